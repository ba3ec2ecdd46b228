//! Attention-ranked image-token truncation: average the heads at a chosen
//! layer, score image tokens from a designated query row, keep the top-k,
//! rebuild the index set and resume inference on the reduced rows.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::layout::TokenLayout;
use crate::model::{AttentionRecord, ColumnBlock, MiniLvlm, MultimodalInput, TokenId};
use crate::tensor::{argmax as argmax_row, Tensor};

/// Which row of the head-averaged attention matrix scores the image tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// The last image token's row (its causal prefix covers exactly the
    /// whole image segment). The default.
    #[default]
    LastImage,
    /// The last prompt token's row.
    LastPrompt,
}

/// What the caller asks for: where to truncate and how many image tokens
/// survive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationRequest {
    /// 1-based layer at which scores are computed and rows are dropped.
    pub layer: usize,
    /// Number of image tokens to keep.
    pub k: usize,
    #[serde(default)]
    pub score_mode: ScoreMode,
}

/// A resolved plan: the surviving image indices and the rebuilt row set.
/// All token indices are 0-based sequence coordinates; `layer` is 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationPlan {
    pub layer: usize,
    pub k: usize,
    pub score_row_mode: ScoreMode,
    /// 0-based row the scores were read from.
    pub score_row: usize,
    /// Surviving image positions, ascending.
    #[serde(rename = "kept_indices")]
    pub kept_image_indices: Vec<usize>,
    /// All surviving positions (system, kept image, user), ascending.
    pub rebuilt_set: Vec<usize>,
}

/// Whether dropped tokens are removed (rows deleted) or only masked out of
/// attention from the truncation layer onward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationStyle {
    #[default]
    Remove,
    Mask,
}

/// Elementwise mean of the per-head attention matrices at a 1-based layer.
/// Rows remain probability distributions.
pub fn head_average(record: &AttentionRecord, layer: usize) -> Result<Tensor> {
    let capture = record.layer(layer)?;
    let n_heads = capture.heads.len();
    let (s, cols) = capture.heads[0].dims2()?;
    if s != cols {
        return Err(contract(format!("attention matrices must be square, got {s}x{cols}")));
    }
    let mut data = vec![0.0; s * s];
    for head in &capture.heads {
        for (acc, v) in data.iter_mut().zip(head.data()) {
            *acc += v;
        }
    }
    for v in data.iter_mut() {
        *v /= n_heads as f64;
    }
    Tensor::new([s, s], data)
}

/// The `score_row` slice of a head-averaged attention matrix restricted to
/// the image columns, in index order. The row's causal prefix must cover
/// the whole image segment.
pub fn image_scores(avg: &Tensor, layout: &TokenLayout, score_row: usize) -> Result<Vec<f64>> {
    let (s, _) = avg.dims2()?;
    if layout.n_img == 0 {
        return Err(contract("layout has no image tokens to score"));
    }
    if score_row >= s {
        return Err(contract(format!("score row {score_row} outside sequence of {s}")));
    }
    let img = layout.img_range();
    if score_row + 1 < img.end {
        return Err(contract(format!(
            "score row {score_row} cannot see the whole image segment \
             (ends at {})",
            img.end - 1
        )));
    }
    Ok(img.map(|j| avg.at2(score_row, j)).collect())
}

/// Indices of the `k` largest scores, ties broken by lower index first,
/// returned in ascending index order. `k` larger than the vector saturates.
pub fn argtop(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| a.cmp(&b))
    });
    let mut picked: Vec<usize> = order.into_iter().take(k.min(scores.len())).collect();
    picked.sort_unstable();
    picked
}

fn score_row_for(mode: ScoreMode, layout: &TokenLayout) -> Result<usize> {
    match mode {
        ScoreMode::LastImage => {
            if layout.n_img == 0 {
                return Err(contract("layout has no image tokens"));
            }
            Ok(layout.img_range().end - 1)
        }
        ScoreMode::LastPrompt => layout
            .last_prompt_index()
            .ok_or_else(|| contract("empty prompt")),
    }
}

/// Scores the image tokens at the requested layer and resolves which rows
/// survive. `k = 0` drops the whole image segment.
pub fn plan_truncation(
    record: &AttentionRecord,
    layout: &TokenLayout,
    request: &TruncationRequest,
) -> Result<TruncationPlan> {
    let avg = head_average(record, request.layer)?;
    let score_row = score_row_for(request.score_mode, layout)?;
    let scores = image_scores(&avg, layout, score_row)?;
    let relative = argtop(&scores, request.k);
    let kept_image_indices: Vec<usize> =
        relative.iter().map(|&r| layout.img_range().start + r).collect();
    let mut rebuilt_set: Vec<usize> = layout.sys_range().collect();
    rebuilt_set.extend(&kept_image_indices);
    rebuilt_set.extend(layout.user_range());
    Ok(TruncationPlan {
        layer: request.layer,
        k: request.k,
        score_row_mode: request.score_mode,
        score_row,
        kept_image_indices,
        rebuilt_set,
    })
}

/// Output of a truncated run: the resolved plan, the logits of the
/// truncated prompt pass (one row per surviving position), and the greedy
/// decode over the reduced context.
#[derive(Debug, Clone)]
pub struct TruncationRun {
    pub plan: TruncationPlan,
    pub prompt_logits: Tensor,
    pub decoded: Vec<TokenId>,
}

/// Runs the full pipeline: forward with capture through the stack, score at
/// the requested layer, drop rows, resume mid-stack, and greedily decode
/// `max_new` tokens over the reduced context. Generated tokens are appended
/// after the surviving rows with their original positions preserved.
pub fn run_truncated(
    model: &MiniLvlm,
    input: &MultimodalInput,
    request: &TruncationRequest,
    max_new: usize,
) -> Result<TruncationRun> {
    run_truncated_styled(model, input, request, max_new, TruncationStyle::Remove)
}

pub fn run_truncated_styled(
    model: &MiniLvlm,
    input: &MultimodalInput,
    request: &TruncationRequest,
    max_new: usize,
    style: TruncationStyle,
) -> Result<TruncationRun> {
    let n_layers = model.config().n_layers;
    if request.layer == 0 || request.layer > n_layers {
        return Err(contract(format!(
            "truncation layer {} out of 1..={n_layers}",
            request.layer
        )));
    }
    let capture = model.forward_with_capture(input, Default::default())?;
    let plan = plan_truncation(&capture.record, &capture.layout, request)?;
    let layout = capture.layout;

    let prompt_logits = match style {
        TruncationStyle::Remove => {
            let hidden = &capture.record.layer(plan.layer)?.layer_input;
            model.forward_from_layer(hidden, &plan.rebuilt_set, plan.layer, &layout)?
        }
        TruncationStyle::Mask => {
            let block = dropped_column_block(&plan, &layout, layout.total());
            model.logits_with_block(input, &[], &block)?
        }
    };

    let mut decoded: Vec<TokenId> = Vec::with_capacity(max_new);
    for step in 0..max_new {
        let logits = if step == 0 {
            prompt_logits.clone()
        } else {
            match style {
                TruncationStyle::Remove => {
                    let ext = model.forward_with_capture_suffix(input, &decoded, Default::default())?;
                    let hidden = &ext.record.layer(plan.layer)?.layer_input;
                    let mut keep = plan.rebuilt_set.clone();
                    keep.extend(layout.total()..layout.total() + decoded.len());
                    model.forward_from_layer(hidden, &keep, plan.layer, &layout)?
                }
                TruncationStyle::Mask => {
                    let block =
                        dropped_column_block(&plan, &layout, layout.total() + decoded.len());
                    model.logits_with_block(input, &decoded, &block)?
                }
            }
        };
        let last = logits.row(logits.shape()[0] - 1);
        decoded.push(argmax_row(last));
    }
    Ok(TruncationRun { plan, prompt_logits, decoded })
}

fn dropped_column_block(plan: &TruncationPlan, layout: &TokenLayout, seq_len: usize) -> ColumnBlock {
    let mut cols = vec![false; seq_len];
    for j in layout.img_range() {
        if !plan.kept_image_indices.contains(&j) {
            cols[j] = true;
        }
    }
    ColumnBlock { from_layer: plan.layer, cols }
}

/// Ratio of truncated to baseline attention cost under the quadratic cost
/// model: layers before the truncation layer attend over the full prompt,
/// layers from it onward over the kept rows.
pub fn attention_cost_ratio(
    prompt_len: usize,
    kept_len: usize,
    layer: usize,
    n_layers: usize,
) -> f64 {
    let full = (prompt_len * prompt_len) as f64;
    let reduced = (kept_len * kept_len) as f64;
    let baseline = n_layers as f64 * full;
    let truncated = (layer - 1) as f64 * full + (n_layers - layer + 1) as f64 * reduced;
    truncated / baseline
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_support::{random_input, tiny_config};
    use crate::model::{HookPoint, LayerCapture, MiniLvlm};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn record_with_heads(heads: Vec<Tensor>) -> AttentionRecord {
        let s = heads[0].shape()[0];
        AttentionRecord {
            hook: HookPoint::PostAttentionNorm,
            layers: vec![LayerCapture {
                heads,
                features: Tensor::zeros([s, 1]),
                layer_input: Tensor::zeros([s, 1]),
            }],
        }
    }

    #[test]
    fn head_average_single_head_is_identity() {
        let m = Tensor::new([2, 2], vec![0.7, 0.3, 0.2, 0.8]).unwrap();
        let record = record_with_heads(vec![m.clone()]);
        let avg = head_average(&record, 1).unwrap();
        assert_eq!(avg.data(), m.data());
        assert!(head_average(&record, 2).is_err());
        assert!(head_average(&record, 0).is_err());
    }

    #[test]
    fn head_average_two_heads() {
        let a = Tensor::new([2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let b = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let record = record_with_heads(vec![a, b]);
        let avg = head_average(&record, 1).unwrap();
        assert_eq!(avg.row(1), &[0.5, 0.5]);
    }

    #[test]
    fn head_average_matches_brute_force_and_keeps_rows_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = 6;
        let heads: Vec<Tensor> = (0..4)
            .map(|_| {
                let mut data = vec![0.0; s * s];
                for i in 0..s {
                    let mut row: Vec<f64> = (0..=i).map(|_| rng.gen_range(0.01..1.0)).collect();
                    let t: f64 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v /= t);
                    data[i * s..i * s + i + 1].copy_from_slice(&row);
                }
                Tensor::new([s, s], data).unwrap()
            })
            .collect();
        let record = record_with_heads(heads.clone());
        let avg = head_average(&record, 1).unwrap();
        for i in 0..s {
            let row_sum: f64 = avg.row(i).iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-9);
            for j in 0..s {
                let expect: f64 =
                    heads.iter().map(|h| h.at2(i, j)).sum::<f64>() / heads.len() as f64;
                assert!((avg.at2(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn image_scores_uniform_and_one_hot() {
        let layout = TokenLayout::new(2, 4, 2);
        let uniform = Tensor::new([8, 8], vec![1.0 / 8.0; 64]).unwrap();
        let scores = image_scores(&uniform, &layout, 7).unwrap();
        assert_eq!(scores, vec![1.0 / 8.0; 4]);

        let mut data = vec![0.0; 64];
        data[5 * 8 + 4] = 1.0; // row 5 = last image token, one-hot on third image token
        let m = Tensor::new([8, 8], data).unwrap();
        assert_eq!(image_scores(&m, &layout, 5).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn image_scores_matches_direct_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let layout = TokenLayout::new(3, 4, 2);
        let s = 9;
        let data: Vec<f64> = (0..s * s).map(|_| rng.gen_range(0.0..1.0)).collect();
        let m = Tensor::new([s, s], data.clone()).unwrap();
        let row = 8;
        let scores = image_scores(&m, &layout, row).unwrap();
        for (idx, j) in layout.img_range().enumerate() {
            assert_eq!(scores[idx], data[row * s + j]);
        }
    }

    #[test]
    fn image_scores_rejects_incomplete_prefix() {
        let layout = TokenLayout::new(2, 4, 2);
        let m = Tensor::new([8, 8], vec![0.125; 64]).unwrap();
        // Row 4 cannot see image token at position 5.
        assert!(image_scores(&m, &layout, 4).is_err());
        assert!(image_scores(&m, &layout, 5).is_ok());
    }

    #[test]
    fn argtop_tie_break_and_saturation() {
        assert_eq!(argtop(&[0.1, 0.4, 0.4, 0.2], 2), vec![1, 2]);
        assert_eq!(argtop(&[0.5, 0.1], 10), vec![0, 1]);
        assert_eq!(argtop(&[0.5, 0.1], 0), Vec::<usize>::new());
    }

    #[test]
    fn argtop_matches_sort_oracle_and_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let n = rng.gen_range(1..12);
            // Coarse values force plenty of ties.
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..4) as f64 / 4.0).collect();
            let mut prev: Vec<usize> = Vec::new();
            for k in 0..=n {
                let got = argtop(&scores, k);
                assert_eq!(got.len(), k.min(n));
                // Oracle: stable sort by descending score keeps lower
                // indices first among ties.
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
                let mut expect: Vec<usize> = order.into_iter().take(k).collect();
                expect.sort_unstable();
                assert_eq!(got, expect, "scores={scores:?} k={k}");
                // Monotone containment in k.
                assert!(prev.iter().all(|i| got.contains(i)));
                prev = got;
            }
            // Scale invariance of the selection.
            let scaled: Vec<f64> = scores.iter().map(|v| v * 3.7).collect();
            assert_eq!(argtop(&scores, n / 2 + 1), argtop(&scaled, n / 2 + 1));
        }
    }

    #[test]
    fn plan_preserves_order_and_k_zero_drops_image() {
        let layout = TokenLayout::new(2, 4, 2);
        let mut data = vec![0.0; 64];
        // Last image row (index 5) scores: image cols 2..6.
        for (j, v) in [(2, 0.1), (3, 0.4), (4, 0.2), (5, 0.3)] {
            data[5 * 8 + j] = v;
        }
        let record = record_with_heads(vec![Tensor::new([8, 8], data).unwrap()]);
        let plan = plan_truncation(
            &record,
            &layout,
            &TruncationRequest { layer: 1, k: 2, score_mode: ScoreMode::LastImage },
        )
        .unwrap();
        assert_eq!(plan.score_row, 5);
        assert_eq!(plan.kept_image_indices, vec![3, 5]);
        assert_eq!(plan.rebuilt_set, vec![0, 1, 3, 5, 6, 7]);
        assert!(plan.rebuilt_set.windows(2).all(|w| w[0] < w[1]));

        let empty = plan_truncation(
            &record,
            &layout,
            &TruncationRequest { layer: 1, k: 0, score_mode: ScoreMode::LastImage },
        )
        .unwrap();
        assert!(empty.kept_image_indices.is_empty());
        assert_eq!(empty.rebuilt_set, vec![0, 1, 6, 7]);
    }

    #[test]
    fn keep_all_reproduces_baseline_exactly_at_every_layer() {
        let cfg = tiny_config();
        let model = MiniLvlm::new(cfg).unwrap();
        let input = random_input(&cfg, 31, 2, 3);
        let baseline = model.logits(&input).unwrap();
        for layer in 1..=cfg.n_layers {
            let run = run_truncated(
                &model,
                &input,
                &TruncationRequest { layer, k: cfg.n_img(), score_mode: ScoreMode::LastImage },
                1,
            )
            .unwrap();
            assert!(
                run.prompt_logits
                    .data()
                    .iter()
                    .zip(baseline.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits()),
                "identity truncation at layer {layer} diverged"
            );
        }
    }

    #[test]
    fn k_zero_at_layer_one_matches_text_only_oracle() {
        let cfg = tiny_config();
        let model = MiniLvlm::new(cfg).unwrap();
        let input = random_input(&cfg, 32, 3, 3);
        let run = run_truncated(
            &model,
            &input,
            &TruncationRequest { layer: 1, k: 0, score_mode: ScoreMode::LastImage },
            0,
        )
        .unwrap();

        let keep = run.plan.rebuilt_set.clone();
        let tokens: Vec<usize> = input
            .system_tokens
            .iter()
            .chain(&input.user_tokens)
            .copied()
            .collect();
        let rebuilt = model.embed_tokens_at_positions(&tokens, &keep).unwrap();
        let text_layout = TokenLayout::new(tokens.len(), 0, 0);
        let all: Vec<usize> = (0..tokens.len()).collect();
        let oracle = model.forward_from_layer(&rebuilt, &all, 1, &text_layout).unwrap();
        assert_eq!(run.prompt_logits.shape(), oracle.shape());
        for (a, b) in run.prompt_logits.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn masked_style_matches_removal_on_surviving_rows() {
        let cfg = tiny_config();
        let model = MiniLvlm::new(cfg).unwrap();
        let input = random_input(&cfg, 33, 2, 3);
        let req = TruncationRequest { layer: 2, k: 1, score_mode: ScoreMode::LastImage };
        let removed = run_truncated_styled(&model, &input, &req, 1, TruncationStyle::Remove).unwrap();
        let masked = run_truncated_styled(&model, &input, &req, 1, TruncationStyle::Mask).unwrap();
        assert_eq!(removed.plan, masked.plan);
        let v = cfg.vocab_size;
        for (rank, &orig) in removed.plan.rebuilt_set.iter().enumerate() {
            for c in 0..v {
                let a = removed.prompt_logits.at2(rank, c);
                let b = masked.prompt_logits.at2(orig, c);
                assert!(
                    (a - b).abs() < 1e-12,
                    "row {orig} col {c}: removed {a} vs masked {b}"
                );
            }
        }
        assert_eq!(removed.decoded, masked.decoded);
    }

    #[test]
    fn truncated_decode_with_full_keep_matches_plain_decode() {
        let cfg = tiny_config();
        let model = MiniLvlm::new(cfg).unwrap();
        let input = random_input(&cfg, 34, 2, 2);
        let plain = model.greedy_decode(&input, 3).unwrap();
        let run = run_truncated(
            &model,
            &input,
            &TruncationRequest { layer: 1, k: cfg.n_img(), score_mode: ScoreMode::LastImage },
            3,
        )
        .unwrap();
        assert_eq!(run.decoded, plain);
    }

    #[test]
    fn cost_ratio_arithmetic() {
        // Prompt 24, keep 8, truncate at layer 1 of 2: every layer runs at
        // the reduced quadratic cost.
        let r = attention_cost_ratio(24, 8, 1, 2);
        assert!((r - (8.0f64 / 24.0).powi(2)).abs() < 1e-12);
        // Truncating at the first layer with nothing dropped costs the same.
        assert!((attention_cost_ratio(24, 24, 1, 4) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn request_layer_out_of_range_rejected() {
        let cfg = tiny_config();
        let model = MiniLvlm::new(cfg).unwrap();
        let input = random_input(&cfg, 35, 2, 2);
        let req = TruncationRequest { layer: cfg.n_layers + 1, k: 0, score_mode: ScoreMode::LastImage };
        assert!(run_truncated(&model, &input, &req, 0).is_err());
    }
}
