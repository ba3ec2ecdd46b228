//! Smoothed gradient class-activation maps over the decoder stack: pool the
//! realized answer-token logits into a scalar, differentiate it against a
//! captured per-layer feature map, weight channels by the pooled gradient,
//! rectify, average over Gaussian-perturbed copies of the image, and
//! max-normalize into the patch grid.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::layout::TokenLayout;
use crate::model::{HookPoint, MiniLvlm, ModelConfig, MultimodalInput, PatchGrid, TokenId};
use crate::raster::{heat_color, unit_to_byte, RgbImage};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// How many pixels each patch occupies in exported overlays.
const PATCH_PIXELS: usize = 16;
/// Blend strength of the colormap at full saliency.
const OVERLAY_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CamConfig {
    /// 1-based layer whose captured features are weighted into the map.
    pub layer: usize,
    /// Standard deviation of the additive Gaussian image noise.
    pub noise_s: f64,
    /// Number of perturbation samples averaged into the map.
    pub n_samples: usize,
    pub seed: u64,
    pub hook: HookPoint,
    /// How many decoded tokens are pooled into the scalar answer logit.
    pub answer_tokens: usize,
}

impl CamConfig {
    pub fn new(layer: usize, noise_s: f64, n_samples: usize, seed: u64) -> Self {
        Self { layer, noise_s, n_samples, seed, hook: HookPoint::default(), answer_tokens: 1 }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.layer == 0 || self.layer > config.n_layers {
            return Err(contract(format!(
                "cam layer {} out of 1..={}",
                self.layer, config.n_layers
            )));
        }
        if self.n_samples == 0 {
            return Err(contract("n_samples must be at least 1"));
        }
        if !(self.noise_s >= 0.0 && self.noise_s.is_finite()) {
            return Err(contract("noise_s must be finite and nonnegative"));
        }
        if self.answer_tokens == 0 {
            return Err(contract("answer span must cover at least one token"));
        }
        Ok(())
    }
}

/// A nonnegative patch-grid saliency map; after normalization the maximum
/// is exactly 1 unless the map is identically zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    normalized: bool,
}

impl SaliencyMap {
    /// Reshapes a row-major patch vector into the grid, unnormalized.
    pub fn from_vector(values: Vec<f64>, rows: usize, cols: usize) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                context: "SaliencyMap::from_vector",
                expected: format!("{} values", rows * cols),
                got: format!("{}", values.len()),
            });
        }
        Ok(Self { rows, cols, values, normalized: false })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    /// Row-major patch values; the inverse of [`SaliencyMap::from_vector`].
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Divides by the maximum; an all-zero map stays zero.
    pub fn normalized(mut self) -> Self {
        let max = self.max_value();
        if max > 0.0 {
            for v in self.values.iter_mut() {
                *v /= max;
            }
        }
        self.normalized = true;
        self
    }
}

/// The answer positions and realized token ids pooled into the scalar
/// answer logit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSpan {
    /// 0-based rows whose logits produce each answer token.
    pub positions: Vec<usize>,
    pub token_ids: Vec<TokenId>,
}

impl AnswerSpan {
    pub fn new(positions: Vec<usize>, token_ids: Vec<TokenId>) -> Result<Self> {
        if positions.len() != token_ids.len() || positions.is_empty() {
            return Err(contract(format!(
                "answer span needs equal nonempty positions and ids, got {} and {}",
                positions.len(),
                token_ids.len()
            )));
        }
        Ok(Self { positions, token_ids })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Greedy-decodes the answer once on the clean input and fixes the span:
/// token `t` is produced by row `prompt_len - 1 + t`, so the capture
/// sequence must carry the first `n - 1` decoded tokens as a suffix.
pub fn plan_answer_span(
    model: &MiniLvlm,
    input: &MultimodalInput,
    n_answers: usize,
) -> Result<(AnswerSpan, Vec<TokenId>)> {
    let answers = model.greedy_decode(input, n_answers)?;
    let (_, layout) = model.embed_multimodal(input)?;
    let last = layout
        .last_prompt_index()
        .ok_or_else(|| contract("empty prompt"))?;
    let positions: Vec<usize> = (last..last + n_answers).collect();
    let suffix = answers[..n_answers - 1].to_vec();
    Ok((AnswerSpan::new(positions, answers)?, suffix))
}

/// Sum of the logits assigned to each realized answer token at its step,
/// as a taped scalar.
pub fn answer_logit(tape: &mut Tape, logits: Var, span: &AnswerSpan) -> Result<Var> {
    let coords: Vec<(usize, usize)> = span
        .positions
        .iter()
        .zip(&span.token_ids)
        .map(|(&p, &t)| (p, t))
        .collect();
    tape.gather_sum(logits, &coords)
}

/// Gradient of the backward target with respect to a captured feature map.
/// A feature the target does not depend on gets an all-zero gradient.
pub fn feature_gradients(tape: &Tape, grads: &Gradients, feature: Var) -> Result<Tensor> {
    match grads.get(feature) {
        Some(g) => Ok(g.clone()),
        None => {
            let value = tape.value(feature);
            if !value.grad_enabled() {
                return Err(contract(
                    "feature map did not participate in the taped computation",
                ));
            }
            Ok(Tensor::zeros(value.shape().to_vec()))
        }
    }
}

/// Channel-pooled weighting: `alpha_k` is the mean of the gradient over all
/// sequence positions; the raw map is `relu(sum_k alpha_k * A[p,k])` at the
/// image rows only, in image-index order.
pub fn cam_map(features: &Tensor, grads: &Tensor, layout: &TokenLayout) -> Result<Vec<f64>> {
    let (s, d) = features.dims2()?;
    if grads.shape() != features.shape() {
        return Err(Error::ShapeMismatch {
            context: "cam_map",
            expected: format!("{:?}", features.shape()),
            got: format!("{:?}", grads.shape()),
        });
    }
    if layout.img_range().end > s {
        return Err(contract("layout image range exceeds feature rows"));
    }
    let mut alpha = vec![0.0; d];
    for i in 0..s {
        for (k, a) in alpha.iter_mut().enumerate() {
            *a += grads.at2(i, k);
        }
    }
    for a in alpha.iter_mut() {
        *a /= s as f64;
    }
    Ok(layout
        .img_range()
        .map(|p| {
            let mut v = 0.0;
            for (k, a) in alpha.iter().enumerate() {
                v += a * features.at2(p, k);
            }
            v.max(0.0)
        })
        .collect())
}

/// Adds elementwise Gaussian noise to the patch grid. The stream is fully
/// determined by `(seed, sample_index)`, so any sample is reproducible in
/// isolation; zero noise returns the image unchanged.
pub fn perturb_image(
    image: &PatchGrid,
    noise_s: f64,
    sample_index: usize,
    seed: u64,
) -> Result<PatchGrid> {
    if !(noise_s >= 0.0 && noise_s.is_finite()) {
        return Err(contract("noise_s must be finite and nonnegative"));
    }
    if noise_s == 0.0 {
        return Ok(image.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample_index as u64);
    let normal = Normal::new(0.0, noise_s).expect("validated std");
    let mut out = image.clone();
    for v in out.data.iter_mut() {
        *v += normal.sample(&mut rng);
    }
    Ok(out)
}

/// One perturbation sample's raw (pre-average, pre-normalization) maps for
/// every layer, given a fixed answer span.
fn sample_maps(
    model: &MiniLvlm,
    input: &MultimodalInput,
    cfg: &CamConfig,
    span: &AnswerSpan,
    suffix: &[TokenId],
    sample_index: usize,
) -> Result<Vec<Vec<f64>>> {
    let perturbed = perturb_image(&input.image, cfg.noise_s, sample_index, cfg.seed)?;
    let mut tape = Tape::new();
    let (run, layout) =
        model.taped_analysis_run(&mut tape, input, suffix, Some(&perturbed), cfg.hook, None)?;
    let z = answer_logit(&mut tape, run.logits, span)?;
    let grads = tape.backward(z)?;
    run.features
        .iter()
        .map(|&feat| {
            let g = feature_gradients(&tape, &grads, feat)?;
            cam_map(tape.value(feat), &g, &layout)
        })
        .collect()
}

/// Raw single-sample map of the configured layer (no averaging, no
/// normalization).
pub fn sample_cam(
    model: &MiniLvlm,
    input: &MultimodalInput,
    cfg: &CamConfig,
    sample_index: usize,
) -> Result<Vec<f64>> {
    cfg.validate(model.config())?;
    let (span, suffix) = plan_answer_span(model, input, cfg.answer_tokens)?;
    let maps = sample_maps(model, input, cfg, &span, &suffix, sample_index)?;
    Ok(maps.into_iter().nth(cfg.layer - 1).expect("layer validated"))
}

/// Full smoothed pipeline for the configured layer: average the raw maps of
/// `n_samples` perturbations, reshape to the patch grid, max-normalize.
pub fn smooth_cam(model: &MiniLvlm, input: &MultimodalInput, cfg: &CamConfig) -> Result<SaliencyMap> {
    let mut maps = smooth_cam_all_layers(model, input, cfg)?;
    Ok(maps.swap_remove(cfg.layer - 1))
}

/// Smoothed, normalized maps for every layer from one set of perturbation
/// samples.
pub fn smooth_cam_all_layers(
    model: &MiniLvlm,
    input: &MultimodalInput,
    cfg: &CamConfig,
) -> Result<Vec<SaliencyMap>> {
    cfg.validate(model.config())?;
    let (span, suffix) = plan_answer_span(model, input, cfg.answer_tokens)?;
    let n_img = model.config().n_img();
    let mut acc: Vec<Vec<f64>> = vec![vec![0.0; n_img]; model.config().n_layers];
    for i in 0..cfg.n_samples {
        let maps = sample_maps(model, input, cfg, &span, &suffix, i)?;
        for (layer_acc, map) in acc.iter_mut().zip(maps) {
            for (a, v) in layer_acc.iter_mut().zip(map) {
                *a += v;
            }
        }
    }
    let n = cfg.n_samples as f64;
    acc.into_iter()
        .map(|mut layer_acc| {
            for v in layer_acc.iter_mut() {
                *v /= n;
            }
            let grid = SaliencyMap::from_vector(
                layer_acc,
                model.config().patch_rows,
                model.config().patch_cols,
            )?;
            Ok(grid.normalized())
        })
        .collect()
}

/// Pooled answer logit with the post-attention-norm features of `layer`
/// replaced by `features`: the probe used to finite-difference the same
/// scalar the reverse pass differentiates.
pub fn answer_logit_with_features(
    model: &MiniLvlm,
    input: &MultimodalInput,
    layer: usize,
    features: &Tensor,
    n_answers: usize,
) -> Result<f64> {
    let (span, suffix) = plan_answer_span(model, input, n_answers)?;
    let mut tape = Tape::new();
    let (run, _) = model.taped_analysis_run(
        &mut tape,
        input,
        &suffix,
        None,
        HookPoint::PostAttentionNorm,
        Some((layer, features)),
    )?;
    let z = answer_logit(&mut tape, run.logits, &span)?;
    tape.value(z).item()
}

/// Captured features and their answer-logit gradient at one layer of the
/// unperturbed input.
pub fn captured_feature_gradients(
    model: &MiniLvlm,
    input: &MultimodalInput,
    layer: usize,
    hook: HookPoint,
    n_answers: usize,
) -> Result<(Tensor, Tensor)> {
    if layer == 0 || layer > model.config().n_layers {
        return Err(contract(format!(
            "layer {layer} out of 1..={}",
            model.config().n_layers
        )));
    }
    let (span, suffix) = plan_answer_span(model, input, n_answers)?;
    let mut tape = Tape::new();
    let (run, _) = model.taped_analysis_run(&mut tape, input, &suffix, None, hook, None)?;
    let z = answer_logit(&mut tape, run.logits, &span)?;
    let grads = tape.backward(z)?;
    let feat = run.features[layer - 1];
    let g = feature_gradients(&tape, &grads, feat)?;
    Ok((tape.value(feat).clone(), g))
}

/// Per-patch grayscale rendering of the image: channel means, min-max
/// normalized over the grid (flat images render mid-gray).
fn image_gray_levels(image: &PatchGrid) -> Vec<f64> {
    let means: Vec<f64> = (0..image.n_patches())
        .map(|p| {
            let (r, c) = (p / image.cols, p % image.cols);
            (0..image.channels).map(|ch| image.get(r, c, ch)).sum::<f64>()
                / image.channels as f64
        })
        .collect();
    let min = means.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        means.iter().map(|m| (m - min) / (max - min)).collect()
    } else {
        vec![0.5; means.len()]
    }
}

/// The saliency map color-blended over the grayscale image. Blend strength
/// scales with the map value, so zero-saliency patches reproduce the plain
/// grayscale rendering exactly.
pub fn overlay_image(map: &SaliencyMap, image: &PatchGrid) -> Result<RgbImage> {
    if !map.is_normalized() {
        return Err(contract("overlay requires a normalized map"));
    }
    if map.rows() != image.rows || map.cols() != image.cols {
        return Err(Error::ShapeMismatch {
            context: "overlay_image",
            expected: format!("{}x{} map", image.rows, image.cols),
            got: format!("{}x{}", map.rows(), map.cols()),
        });
    }
    let gray = image_gray_levels(image);
    let mut out = RgbImage::new(image.cols * PATCH_PIXELS, image.rows * PATCH_PIXELS);
    for pr in 0..image.rows {
        for pc in 0..image.cols {
            let g = gray[pr * image.cols + pc];
            let v = map.get(pr, pc);
            let alpha = OVERLAY_ALPHA * v;
            let heat = heat_color(v);
            let rgb = [
                unit_to_byte((1.0 - alpha) * g + alpha * heat[0] as f64 / 255.0),
                unit_to_byte((1.0 - alpha) * g + alpha * heat[1] as f64 / 255.0),
                unit_to_byte((1.0 - alpha) * g + alpha * heat[2] as f64 / 255.0),
            ];
            for dy in 0..PATCH_PIXELS {
                for dx in 0..PATCH_PIXELS {
                    out.set(pc * PATCH_PIXELS + dx, pr * PATCH_PIXELS + dy, rgb);
                }
            }
        }
    }
    Ok(out)
}

/// Writes the overlay as a binary PPM; identical inputs produce identical
/// bytes.
pub fn overlay_export(map: &SaliencyMap, image: &PatchGrid, path: impl AsRef<Path>) -> Result<()> {
    overlay_image(map, image)?.write_ppm(path)
}

/// `row,col,value` lines for the patch grid.
pub fn map_csv(map: &SaliencyMap) -> String {
    let mut out = String::from("row,col,value\n");
    for r in 0..map.rows() {
        for c in 0..map.cols() {
            out.push_str(&format!("{r},{c},{}\n", map.get(r, c)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_support::{random_input, tiny_config};
    use crate::model::MiniLvlm;
    use rand::{Rng, SeedableRng};

    #[test]
    fn answer_logit_pools_selected_entries() {
        let mut tape = Tape::new();
        let logits = tape.leaf(
            Tensor::from_rows(&[
                vec![1.5, 0.0],
                vec![-0.5, 9.0],
                vec![2.0, -3.0],
            ])
            .unwrap()
            .with_grad(),
        );
        let span = AnswerSpan::new(vec![0, 1, 2], vec![0, 0, 0]).unwrap();
        let z = answer_logit(&mut tape, logits, &span).unwrap();
        assert_eq!(tape.value(z).item().unwrap(), 3.0);

        let single = AnswerSpan::new(vec![1], vec![1]).unwrap();
        let z1 = answer_logit(&mut tape, logits, &single).unwrap();
        assert_eq!(tape.value(z1).item().unwrap(), 9.0);
    }

    #[test]
    fn answer_span_rejects_mismatched_lengths() {
        assert!(AnswerSpan::new(vec![0, 1], vec![5]).is_err());
        assert!(AnswerSpan::new(vec![], vec![]).is_err());
    }

    #[test]
    fn independent_feature_gets_zero_gradient() {
        let mut tape = Tape::new();
        let feature = tape.leaf(Tensor::zeros([2, 2]).with_grad());
        let other = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap().with_grad());
        let z = tape.sum_all(other);
        let grads = tape.backward(z).unwrap();
        let g = feature_gradients(&tape, &grads, feature).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_head_gradient_is_weight_broadcast() {
        let mut tape = Tape::new();
        let a = tape.leaf(
            Tensor::from_rows(&[vec![0.3, -0.7], vec![1.1, 0.4]]).unwrap().with_grad(),
        );
        let w = tape.leaf(Tensor::from_rows(&[vec![2.0, -1.0], vec![2.0, -1.0]]).unwrap());
        let prod = tape.mul(a, w).unwrap();
        let z = tape.sum_all(prod);
        let grads = tape.backward(z).unwrap();
        let g = feature_gradients(&tape, &grads, a).unwrap();
        assert_eq!(g.data(), &[2.0, -1.0, 2.0, -1.0]);
    }

    #[test]
    fn cam_map_zero_gradient_gives_zero_map() {
        let layout = TokenLayout::new(1, 3, 0);
        let features = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]).unwrap();
        let grads = Tensor::zeros([4, 1]);
        assert_eq!(cam_map(&features, &grads, &layout).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn cam_map_single_channel_relu_by_hand() {
        let layout = TokenLayout::new(1, 3, 0);
        let features = Tensor::from_rows(&[vec![9.0], vec![-1.0], vec![2.0], vec![3.0]]).unwrap();
        let grads = Tensor::from_rows(&[vec![1.0], vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(cam_map(&features, &grads, &layout).unwrap(), vec![0.0, 2.0, 3.0]);
    }

    #[test]
    fn cam_map_matches_double_loop_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let layout = TokenLayout::new(2, 4, 1);
        let s = 7;
        let d = 5;
        let features = Tensor::new(
            [s, d],
            (0..s * d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
        )
        .unwrap();
        let grads = Tensor::new(
            [s, d],
            (0..s * d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
        )
        .unwrap();
        let got = cam_map(&features, &grads, &layout).unwrap();
        for (out_idx, p) in layout.img_range().enumerate() {
            let mut v = 0.0;
            for k in 0..d {
                let mut alpha = 0.0;
                for i in 0..s {
                    alpha += grads.at2(i, k);
                }
                alpha /= s as f64;
                v += alpha * features.at2(p, k);
            }
            let expect = if v > 0.0 { v } else { 0.0 };
            assert!((got[out_idx] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn perturbation_zero_noise_and_determinism() {
        let img = PatchGrid::new(2, 2, 2, (0..8).map(|v| v as f64).collect()).unwrap();
        assert_eq!(perturb_image(&img, 0.0, 3, 9).unwrap(), img);
        let a = perturb_image(&img, 0.5, 3, 9).unwrap();
        let b = perturb_image(&img, 0.5, 3, 9).unwrap();
        assert_eq!(a, b);
        let c = perturb_image(&img, 0.5, 4, 9).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn perturbation_std_matches_noise_scale() {
        let n = 100_000;
        let img = PatchGrid::new(100, 100, 10, vec![0.0; n]).unwrap();
        let noise_s = 0.37;
        let out = perturb_image(&img, noise_s, 0, 1234).unwrap();
        let mean: f64 = out.data.iter().sum::<f64>() / n as f64;
        let var: f64 =
            out.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        assert!(
            (std - noise_s).abs() / noise_s < 0.02,
            "sample std {std} vs {noise_s}"
        );
    }

    #[test]
    fn single_sample_zero_noise_equals_unsmoothed() {
        let cfg = tiny_config();
        let model = MiniLvlm::new(cfg).unwrap();
        let input = random_input(&cfg, 40, 2, 2);
        let cam_cfg = CamConfig::new(1, 0.0, 1, 7);
        let raw = sample_cam(&model, &input, &cam_cfg, 0).unwrap();
        let smoothed = smooth_cam(&model, &input, &cam_cfg).unwrap();
        let expect = SaliencyMap::from_vector(raw, cfg.patch_rows, cfg.patch_cols)
            .unwrap()
            .normalized();
        assert_eq!(smoothed, expect);
        if smoothed.max_value() > 0.0 {
            assert_eq!(smoothed.max_value(), 1.0);
        }
    }

    #[test]
    fn averaging_is_linear_in_samples() {
        let cfg = tiny_config();
        let model = MiniLvlm::new(cfg).unwrap();
        let input = random_input(&cfg, 41, 2, 2);
        let n = 5;
        let cam_cfg = CamConfig { noise_s: 0.2, n_samples: n, ..CamConfig::new(2, 0.2, n, 11) };
        let mut mean = vec![0.0; cfg.n_img()];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(sample_cam(&model, &input, &cam_cfg, i).unwrap()) {
                *m += v / n as f64;
            }
        }
        let smoothed = smooth_cam(&model, &input, &cam_cfg).unwrap();
        let max = mean.iter().cloned().fold(0.0, f64::max);
        for (got, raw) in smoothed.values().iter().zip(&mean) {
            let expect = if max > 0.0 { raw / max } else { *raw };
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn hook_points_give_different_maps() {
        let cfg = tiny_config();
        let model = MiniLvlm::new(cfg).unwrap();
        let input = random_input(&cfg, 42, 2, 2);
        let post = smooth_cam(
            &model,
            &input,
            &CamConfig { hook: HookPoint::PostAttentionNorm, ..CamConfig::new(1, 0.0, 1, 0) },
        )
        .unwrap();
        let pre = smooth_cam(
            &model,
            &input,
            &CamConfig { hook: HookPoint::PreNorm, ..CamConfig::new(1, 0.0, 1, 0) },
        )
        .unwrap();
        let mlp = smooth_cam(
            &model,
            &input,
            &CamConfig { hook: HookPoint::MlpOut, ..CamConfig::new(1, 0.0, 1, 0) },
        )
        .unwrap();
        assert_ne!(post.values(), pre.values());
        assert_ne!(post.values(), mlp.values());
    }

    #[test]
    fn reshape_round_trip_is_identity() {
        let values: Vec<f64> = (0..6).map(|v| v as f64 / 10.0).collect();
        let map = SaliencyMap::from_vector(values.clone(), 2, 3).unwrap();
        assert_eq!(map.values(), values.as_slice());
        assert_eq!(map.get(1, 0), values[3]);
        let rebuilt = SaliencyMap::from_vector(map.values().to_vec(), 2, 3).unwrap();
        assert_eq!(rebuilt.values(), values.as_slice());
    }

    #[test]
    fn overlay_zero_map_is_plain_grayscale() {
        let image = PatchGrid::new(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let map = SaliencyMap::from_vector(vec![0.0; 4], 2, 2).unwrap().normalized();
        let overlay = overlay_image(&map, &image).unwrap();
        let gray = image_gray_levels(&image);
        for (p, g) in gray.iter().enumerate() {
            let (pr, pc) = (p / 2, p % 2);
            let byte = unit_to_byte(*g);
            let px = overlay.get(pc * PATCH_PIXELS, pr * PATCH_PIXELS);
            assert_eq!(px, [byte, byte, byte]);
        }
    }

    #[test]
    fn overlay_one_hot_map_colors_exactly_one_patch() {
        let image = PatchGrid::new(2, 2, 1, vec![0.5; 4]).unwrap();
        let map = SaliencyMap::from_vector(vec![0.0, 0.0, 1.0, 0.0], 2, 2)
            .unwrap()
            .normalized();
        let overlay = overlay_image(&map, &image).unwrap();
        let g = 0.5;
        let heat = heat_color(1.0);
        let hot = [
            unit_to_byte((1.0 - OVERLAY_ALPHA) * g + OVERLAY_ALPHA * heat[0] as f64 / 255.0),
            unit_to_byte((1.0 - OVERLAY_ALPHA) * g + OVERLAY_ALPHA * heat[1] as f64 / 255.0),
            unit_to_byte((1.0 - OVERLAY_ALPHA) * g + OVERLAY_ALPHA * heat[2] as f64 / 255.0),
        ];
        let plain = [unit_to_byte(g); 3];
        for p in 0..4 {
            let (pr, pc) = (p / 2, p % 2);
            let px = overlay.get(pc * PATCH_PIXELS, pr * PATCH_PIXELS);
            if p == 2 {
                assert_eq!(px, hot, "saturated patch must carry the full colormap value");
            } else {
                assert_eq!(px, plain, "zero patches must stay plain gray");
            }
        }
    }

    #[test]
    fn export_is_byte_identical_across_runs() {
        let cfg = tiny_config();
        let model = MiniLvlm::new(cfg).unwrap();
        let input = random_input(&cfg, 43, 2, 2);
        let cam_cfg = CamConfig::new(2, 0.1, 3, 5);
        let dir = std::env::temp_dir().join("flowscope-cam-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("a.ppm");
        let p2 = dir.join("b.ppm");
        let m1 = smooth_cam(&model, &input, &cam_cfg).unwrap();
        let m2 = smooth_cam(&model, &input, &cam_cfg).unwrap();
        overlay_export(&m1, &input.image, &p1).unwrap();
        overlay_export(&m2, &input.image, &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn map_csv_layout() {
        let map = SaliencyMap::from_vector(vec![0.0, 0.25, 0.5, 1.0], 2, 2).unwrap();
        let csv = map_csv(&map);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "row,col,value");
        assert_eq!(lines[2], "0,1,0.25");
        assert_eq!(lines.len(), 5);
    }
}
