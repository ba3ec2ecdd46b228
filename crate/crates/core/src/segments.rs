//! Segment-wise attention accounting: how much head-averaged attention a
//! query token pays to the system, image and user segments, per layer,
//! normalized so the three shares sum to 1.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::layout::TokenLayout;
use crate::model::AttentionRecord;
use crate::raster::{unit_to_byte, GrayImage};

/// Image-share threshold below which a layer is flagged in reports.
pub const DEFAULT_IMAGE_SHARE_THRESHOLD: f64 = 0.02;

/// Normalized attention shares of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentShares {
    pub sys: f64,
    pub img: f64,
    pub user: f64,
}

impl SegmentShares {
    pub fn sum(&self) -> f64 {
        self.sys + self.img + self.user
    }
}

/// Per-layer segment shares for a set of query rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceProfile {
    pub per_layer: Vec<SegmentShares>,
}

impl InfluenceProfile {
    pub fn n_layers(&self) -> usize {
        self.per_layer.len()
    }

    /// Shares of a 1-based layer.
    pub fn layer(&self, layer: usize) -> Result<SegmentShares> {
        if layer == 0 || layer > self.per_layer.len() {
            return Err(contract(format!(
                "layer {layer} out of 1..={}",
                self.per_layer.len()
            )));
        }
        Ok(self.per_layer[layer - 1])
    }
}

/// Which rows of the attention matrices act as answer queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryPolicy {
    /// Only the row that produces the first answer token (the last prompt
    /// position).
    FirstAnswer,
    /// The rows producing each of `n` decoded tokens: the last prompt
    /// position plus the first `n - 1` generated positions.
    AnswerSpan { n_answers: usize },
}

impl QueryPolicy {
    /// Resolves to 0-based row indices for a capture of `seq_len` rows.
    pub fn resolve(&self, layout: &TokenLayout, seq_len: usize) -> Result<Vec<usize>> {
        let last = layout
            .last_prompt_index()
            .ok_or_else(|| contract("empty prompt has no query rows"))?;
        let rows: Vec<usize> = match *self {
            QueryPolicy::FirstAnswer => vec![last],
            QueryPolicy::AnswerSpan { n_answers } => {
                if n_answers == 0 {
                    return Err(contract("answer span must cover at least one token"));
                }
                (last..last + n_answers).collect()
            }
        };
        if let Some(&bad) = rows.iter().find(|&&r| r >= seq_len) {
            return Err(contract(format!(
                "query row {bad} outside captured sequence of {seq_len}"
            )));
        }
        Ok(rows)
    }
}

fn validate_query_rows(
    record: &AttentionRecord,
    layout: &TokenLayout,
    query_rows: &[usize],
) -> Result<()> {
    if query_rows.is_empty() {
        return Err(contract("query rows must be nonempty"));
    }
    let seq_len = record.seq_len();
    if layout.total() > seq_len {
        return Err(contract(format!(
            "layout of {} tokens exceeds captured sequence of {seq_len}",
            layout.total()
        )));
    }
    let last = layout
        .last_prompt_index()
        .ok_or_else(|| contract("empty prompt"))?;
    for &r in query_rows {
        if r >= seq_len {
            return Err(contract(format!("query row {r} outside sequence of {seq_len}")));
        }
        if r < last {
            return Err(contract(format!(
                "query row {r} precedes the end of the prompt ({last}); its causal \
                 prefix does not cover all segments"
            )));
        }
    }
    Ok(())
}

/// Sums a head-averaged attention row over each segment, renormalizes the
/// triple to 1, and averages over the query rows, per layer. Heads are
/// averaged before segment summation.
pub fn influence_rates(
    record: &AttentionRecord,
    layout: &TokenLayout,
    query_rows: &[usize],
) -> Result<InfluenceProfile> {
    validate_query_rows(record, layout, query_rows)?;
    let per_layer = record
        .layers
        .iter()
        .map(|layer| {
            let n_heads = layer.heads.len() as f64;
            let mut acc = SegmentShares { sys: 0.0, img: 0.0, user: 0.0 };
            for &row in query_rows {
                let mut sums = [0.0f64; 3];
                for (seg, range) in [
                    layout.sys_range(),
                    layout.img_range(),
                    layout.user_range(),
                ]
                .into_iter()
                .enumerate()
                {
                    for j in range {
                        let mut avg = 0.0;
                        for head in &layer.heads {
                            avg += head.at2(row, j);
                        }
                        sums[seg] += avg / n_heads;
                    }
                }
                let total: f64 = sums.iter().sum();
                acc.sys += sums[0] / total;
                acc.img += sums[1] / total;
                acc.user += sums[2] / total;
            }
            let n = query_rows.len() as f64;
            SegmentShares { sys: acc.sys / n, img: acc.img / n, user: acc.user / n }
        })
        .collect();
    Ok(InfluenceProfile { per_layer })
}

/// Per-head breakdown: shares for every `(layer, head)` pair, for
/// diagnostics. Same row policy and normalization as [`influence_rates`].
pub fn influence_rates_per_head(
    record: &AttentionRecord,
    layout: &TokenLayout,
    query_rows: &[usize],
) -> Result<Vec<Vec<SegmentShares>>> {
    validate_query_rows(record, layout, query_rows)?;
    Ok(record
        .layers
        .iter()
        .map(|layer| {
            layer
                .heads
                .iter()
                .map(|head| {
                    let mut acc = SegmentShares { sys: 0.0, img: 0.0, user: 0.0 };
                    for &row in query_rows {
                        let sum_over = |range: std::ops::Range<usize>| -> f64 {
                            range.map(|j| head.at2(row, j)).sum()
                        };
                        let s = sum_over(layout.sys_range());
                        let i = sum_over(layout.img_range());
                        let u = sum_over(layout.user_range());
                        let total = s + i + u;
                        acc.sys += s / total;
                        acc.img += i / total;
                        acc.user += u / total;
                    }
                    let n = query_rows.len() as f64;
                    SegmentShares { sys: acc.sys / n, img: acc.img / n, user: acc.user / n }
                })
                .collect()
        })
        .collect())
}

/// First 1-based layer whose image share drops below `threshold`.
pub fn flag_layer(profile: &InfluenceProfile, threshold: f64) -> Option<usize> {
    profile
        .per_layer
        .iter()
        .position(|s| s.img < threshold)
        .map(|i| i + 1)
}

/// `layer,lambda_sys,lambda_img,lambda_user` rows, one per layer, 1-based.
pub fn profile_csv(profile: &InfluenceProfile) -> String {
    let mut out = String::from("layer,lambda_sys,lambda_img,lambda_user\n");
    for (i, s) in profile.per_layer.iter().enumerate() {
        out.push_str(&format!("{},{},{},{}\n", i + 1, s.sys, s.img, s.user));
    }
    out
}

/// Grayscale share matrix, layers down the side and the three segments
/// across, each cell an upscaled block with brightness equal to the share.
pub fn profile_matrix_image(profile: &InfluenceProfile) -> GrayImage {
    const CELL: usize = 24;
    let rows = profile.per_layer.len();
    let mut img = GrayImage::new(3 * CELL, rows * CELL);
    for (r, s) in profile.per_layer.iter().enumerate() {
        for (c, v) in [s.sys, s.img, s.user].into_iter().enumerate() {
            let byte = unit_to_byte(v);
            for dy in 0..CELL {
                for dx in 0..CELL {
                    img.set(c * CELL + dx, r * CELL + dy, byte);
                }
            }
        }
    }
    img
}

/// Files produced by [`write_profile_report`].
#[derive(Debug, Clone, Serialize)]
pub struct ProfileReportFiles {
    pub csv_path: PathBuf,
    pub matrix_path: PathBuf,
    /// First 1-based layer with image share below the threshold, if any.
    pub flagged_layer: Option<usize>,
}

/// Writes the per-layer share table and the rendered share matrix into
/// `dir`, flagging the first layer whose image share falls below
/// `threshold`.
pub fn write_profile_report(
    dir: impl AsRef<Path>,
    profile: &InfluenceProfile,
    threshold: f64,
) -> Result<ProfileReportFiles> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join("influence.csv");
    std::fs::write(&csv_path, profile_csv(profile))?;
    let matrix_path = dir.join("share_matrix.pgm");
    profile_matrix_image(profile).write_pgm(&matrix_path)?;
    Ok(ProfileReportFiles {
        csv_path,
        matrix_path,
        flagged_layer: flag_layer(profile, threshold),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttentionRecord, HookPoint, LayerCapture};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Builds a record from per-layer per-head square matrices.
    fn record_from_heads(layers: Vec<Vec<Tensor>>) -> AttentionRecord {
        let s = layers[0][0].shape()[0];
        AttentionRecord {
            hook: HookPoint::PostAttentionNorm,
            layers: layers
                .into_iter()
                .map(|heads| LayerCapture {
                    heads,
                    features: Tensor::zeros([s, 1]),
                    layer_input: Tensor::zeros([s, 1]),
                })
                .collect(),
        }
    }

    fn uniform_causal(s: usize) -> Tensor {
        let mut data = vec![0.0; s * s];
        for i in 0..s {
            for j in 0..=i {
                data[i * s + j] = 1.0 / (i + 1) as f64;
            }
        }
        Tensor::new([s, s], data).unwrap()
    }

    #[test]
    fn uniform_attention_yields_segment_proportions() {
        let layout = TokenLayout::new(2, 4, 2);
        let record = record_from_heads(vec![vec![uniform_causal(8)]]);
        let profile = influence_rates(&record, &layout, &[7]).unwrap();
        let s = profile.per_layer[0];
        assert!((s.sys - 0.25).abs() < 1e-12);
        assert!((s.img - 0.5).abs() < 1e-12);
        assert!((s.user - 0.25).abs() < 1e-12);
    }

    #[test]
    fn one_hot_on_image_index() {
        let layout = TokenLayout::new(2, 4, 2);
        let mut data = vec![0.0; 64];
        data[7 * 8 + 3] = 1.0; // query row 7 attends only to image position 3
        let record = record_from_heads(vec![vec![Tensor::new([8, 8], data).unwrap()]]);
        let profile = influence_rates(&record, &layout, &[7]).unwrap();
        let s = profile.per_layer[0];
        assert_eq!((s.sys, s.img, s.user), (0.0, 1.0, 0.0));
    }

    #[test]
    fn shares_sum_to_one_and_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let layout = TokenLayout::new(3, 4, 3);
        let s = 12; // prompt of 10 plus two generated rows
        let n_heads = 3;
        let n_layers = 2;
        let layers: Vec<Vec<Tensor>> = (0..n_layers)
            .map(|_| {
                (0..n_heads)
                    .map(|_| {
                        let mut data = vec![0.0; s * s];
                        for i in 0..s {
                            let mut row: Vec<f64> =
                                (0..=i).map(|_| rng.gen_range(0.01..1.0)).collect();
                            let total: f64 = row.iter().sum();
                            for v in row.iter_mut() {
                                *v /= total;
                            }
                            data[i * s..i * s + i + 1].copy_from_slice(&row);
                        }
                        Tensor::new([s, s], data).unwrap()
                    })
                    .collect()
            })
            .collect();
        let record = record_from_heads(layers.clone());
        let rows = [9, 10, 11];
        let profile = influence_rates(&record, &layout, &rows).unwrap();

        for (li, shares) in profile.per_layer.iter().enumerate() {
            assert!((shares.sum() - 1.0).abs() < 1e-9);
            // Brute force: per row, sum each index's head-mean, normalize,
            // then average rows.
            let mut expect = [0.0f64; 3];
            for &row in &rows {
                let mut sums = [0.0f64; 3];
                for j in 0..layout.total() {
                    let head_mean: f64 = layers[li]
                        .iter()
                        .map(|h| h.at2(row, j))
                        .sum::<f64>()
                        / n_heads as f64;
                    let seg = match layout.segment_of(j).unwrap() {
                        crate::layout::Segment::System => 0,
                        crate::layout::Segment::Image => 1,
                        crate::layout::Segment::User => 2,
                    };
                    sums[seg] += head_mean;
                }
                let total: f64 = sums.iter().sum();
                for k in 0..3 {
                    expect[k] += sums[k] / total / rows.len() as f64;
                }
            }
            assert!((shares.sys - expect[0]).abs() < 1e-12);
            assert!((shares.img - expect[1]).abs() < 1e-12);
            assert!((shares.user - expect[2]).abs() < 1e-12);
        }
    }

    #[test]
    fn shuffling_mass_within_image_segment_keeps_image_share() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layout = TokenLayout::new(2, 4, 2);
        let s = 8;
        let mut data = vec![0.0; s * s];
        let row = 7;
        let mut vals: Vec<f64> = (0..s).map(|_| rng.gen_range(0.01..1.0)).collect();
        let total: f64 = vals.iter().sum();
        for v in vals.iter_mut() {
            *v /= total;
        }
        data[row * s..(row + 1) * s].copy_from_slice(&vals);
        let before = influence_rates(
            &record_from_heads(vec![vec![Tensor::new([s, s], data.clone()).unwrap()]]),
            &layout,
            &[row],
        )
        .unwrap();

        // Rotate the image-segment entries of the query row.
        let img = layout.img_range();
        let slice = &mut data[row * s + img.start..row * s + img.end];
        slice.rotate_left(2);
        let after = influence_rates(
            &record_from_heads(vec![vec![Tensor::new([s, s], data).unwrap()]]),
            &layout,
            &[row],
        )
        .unwrap();
        assert!((before.per_layer[0].img - after.per_layer[0].img).abs() < 1e-15);
    }

    #[test]
    fn query_row_before_prompt_end_is_rejected() {
        let layout = TokenLayout::new(2, 4, 2);
        let record = record_from_heads(vec![vec![uniform_causal(8)]]);
        assert!(influence_rates(&record, &layout, &[6]).is_err());
        assert!(influence_rates(&record, &layout, &[]).is_err());
        assert!(influence_rates(&record, &layout, &[8]).is_err());
    }

    #[test]
    fn flag_layer_threshold_crossing() {
        let profile = InfluenceProfile {
            per_layer: [0.5, 0.3, 0.01, 0.015]
                .iter()
                .map(|&img| SegmentShares { sys: (1.0 - img) / 2.0, img, user: (1.0 - img) / 2.0 })
                .collect(),
        };
        assert_eq!(flag_layer(&profile, 0.02), Some(3));
        assert_eq!(flag_layer(&profile, 0.001), None);
    }

    #[test]
    fn uniform_model_never_flags_when_image_share_is_large() {
        // With uniform rows the image share is n_img / total
        // (= 0.5 here), far above the default threshold.
        let layout = TokenLayout::new(2, 4, 2);
        let record = record_from_heads(vec![vec![uniform_causal(8)], vec![uniform_causal(8)]]);
        let profile = influence_rates(&record, &layout, &[7]).unwrap();
        assert_eq!(flag_layer(&profile, DEFAULT_IMAGE_SHARE_THRESHOLD), None);
    }

    #[test]
    fn csv_has_header_and_one_row_per_layer() {
        let profile = InfluenceProfile {
            per_layer: vec![
                SegmentShares { sys: 0.25, img: 0.5, user: 0.25 },
                SegmentShares { sys: 0.4, img: 0.2, user: 0.4 },
            ],
        };
        let csv = profile_csv(&profile);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "layer,lambda_sys,lambda_img,lambda_user");
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "1,0.25,0.5,0.25");
    }

    #[test]
    fn query_policy_resolution() {
        let layout = TokenLayout::new(2, 4, 2);
        assert_eq!(QueryPolicy::FirstAnswer.resolve(&layout, 8).unwrap(), vec![7]);
        assert_eq!(
            QueryPolicy::AnswerSpan { n_answers: 3 }.resolve(&layout, 10).unwrap(),
            vec![7, 8, 9]
        );
        assert!(QueryPolicy::AnswerSpan { n_answers: 3 }.resolve(&layout, 9).is_err());
    }
}
