//! Partition of a multimodal token sequence into system / image / user
//! segments occupying contiguous index ranges, in that order.

use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Which segment a prompt position belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    System,
    Image,
    User,
}

/// Counts of the three prompt segments. All positions are handled 0-based
/// here; user-facing reports add 1 when printing (the conventional 1-based
/// inclusive sets are `sys = 1..=n_sys`, `img = n_sys+1..=n_sys+n_img`,
/// `user = n_sys+n_img+1..=total`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub n_sys: usize,
    pub n_img: usize,
    pub n_user: usize,
}

impl TokenLayout {
    pub fn new(n_sys: usize, n_img: usize, n_user: usize) -> Self {
        Self { n_sys, n_img, n_user }
    }

    /// Total prompt length `n_sys + n_img + n_user`.
    pub fn total(&self) -> usize {
        self.n_sys + self.n_img + self.n_user
    }

    pub fn sys_range(&self) -> Range<usize> {
        0..self.n_sys
    }

    pub fn img_range(&self) -> Range<usize> {
        self.n_sys..self.n_sys + self.n_img
    }

    pub fn user_range(&self) -> Range<usize> {
        self.n_sys + self.n_img..self.total()
    }

    /// Segment of a 0-based position; `None` for positions beyond the
    /// prompt (generated tokens).
    pub fn segment_of(&self, index: usize) -> Option<Segment> {
        if self.sys_range().contains(&index) {
            Some(Segment::System)
        } else if self.img_range().contains(&index) {
            Some(Segment::Image)
        } else if self.user_range().contains(&index) {
            Some(Segment::User)
        } else {
            None
        }
    }

    pub fn is_image(&self, index: usize) -> bool {
        self.img_range().contains(&index)
    }

    /// Per-position image flags for a sequence of `seq_len >= total()` rows;
    /// positions beyond the prompt are text.
    pub fn image_flags(&self, seq_len: usize) -> Vec<bool> {
        (0..seq_len).map(|i| self.is_image(i)).collect()
    }

    /// 0-based index of the last prompt token, if the prompt is nonempty.
    pub fn last_prompt_index(&self) -> Option<usize> {
        self.total().checked_sub(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_ranges_partition_the_prompt() {
        // 1-based sets {1..3}, {4..19}, {20..24} for (3, 4x4, 5).
        let layout = TokenLayout::new(3, 16, 5);
        assert_eq!(layout.sys_range(), 0..3);
        assert_eq!(layout.img_range(), 3..19);
        assert_eq!(layout.user_range(), 19..24);
        assert_eq!(layout.total(), 24);
        for i in 0..layout.total() {
            let seg = layout.segment_of(i).unwrap();
            let expected = if i < 3 {
                Segment::System
            } else if i < 19 {
                Segment::Image
            } else {
                Segment::User
            };
            assert_eq!(seg, expected, "position {i}");
        }
        assert_eq!(layout.segment_of(24), None);
    }

    #[test]
    fn conventional_vision_chat_layout() {
        // A 34-token system prompt followed by 576 image tokens puts the
        // image segment at 1-based ids 35..=610. Published descriptions of
        // this layout sometimes quote the range as 35-611, which covers 577
        // ids, one more than the token count; the exact arithmetic is
        // n_sys+1 ..= n_sys+n_img.
        let layout = TokenLayout::new(34, 576, 20);
        assert_eq!(layout.img_range(), 34..610);
        assert_eq!(layout.img_range().len(), 576);
        // 1-based inclusive: 35..=610.
        assert_eq!(layout.img_range().start + 1, 35);
        assert_eq!(layout.img_range().end, 610);
    }

    #[test]
    fn empty_user_segment_is_valid() {
        let layout = TokenLayout::new(2, 4, 0);
        assert_eq!(layout.user_range(), 6..6);
        assert!(layout.user_range().is_empty());
        assert_eq!(layout.total(), 6);
        assert_eq!(layout.last_prompt_index(), Some(5));
    }

    #[test]
    fn image_flags_extend_with_text() {
        let layout = TokenLayout::new(1, 2, 1);
        assert_eq!(
            layout.image_flags(6),
            vec![false, true, true, false, false, false]
        );
    }
}
