//! A small decoder-only multimodal transformer with causal attention.
//!
//! The forward pass can capture per-layer per-head attention maps and one
//! feature map per layer at a configurable hook point, and it can resume
//! mid-stack on a reduced row set. Positions are absolute learned embeddings
//! added at embed time, so rows deleted mid-stack keep their original
//! positional information.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use train::{train_toy, TrainOptions, TrainReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::layout::TokenLayout;
use crate::tape::{causal_mask, Tape, Var};
use crate::tensor::{argmax, Tensor};

pub type TokenId = usize;

/// Epsilon used by every layer normalization in the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Standard deviation of the Gaussian weight initialization.
const INIT_STD: f64 = 0.05;

/// Where the per-layer feature map is captured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookPoint {
    /// Output of the normalization that follows the attention sublayer
    /// (the input to the MLP). The default capture point.
    #[default]
    PostAttentionNorm,
    /// Output of the normalization that precedes the attention sublayer.
    PreNorm,
    /// Output of the MLP, before its residual addition.
    MlpOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    /// Image patch grid height.
    pub patch_rows: usize,
    /// Image patch grid width.
    pub patch_cols: usize,
    /// Feature channels per image patch.
    pub patch_channels: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("vocab_size", self.vocab_size),
            ("patch_rows", self.patch_rows),
            ("patch_cols", self.patch_cols),
            ("patch_channels", self.patch_channels),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(contract(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(contract(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Number of image tokens, `patch_rows * patch_cols`.
    pub fn n_img(&self) -> usize {
        self.patch_rows * self.patch_cols
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// MLP hidden width, fixed at `4 * d_model`.
    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    /// Closed-form parameter count of the model this config describes.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d * d          // wq, wk, wv, wo
            + d * self.d_ff() + self.d_ff() // w1, b1
            + self.d_ff() * d + d           // w2, b2
            + 4 * d;                        // two norms, gain + bias each
        self.vocab_size * d                 // token embeddings
            + self.max_seq * d              // position embeddings
            + self.patch_channels * d + d   // patch projector
            + self.n_layers * per_layer
            + 2 * d                         // final norm
            + d * self.vocab_size           // output head
    }
}

/// A grid of continuous image-patch features, row-major over patches with
/// channels innermost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols * channels != data.len() {
            return Err(Error::ShapeMismatch {
                context: "PatchGrid::new",
                expected: format!("{} values", rows * cols * channels),
                got: format!("{}", data.len()),
            });
        }
        Ok(Self { rows, cols, channels, data })
    }

    pub fn zeros(rows: usize, cols: usize, channels: usize) -> Self {
        Self { rows, cols, channels, data: vec![0.0; rows * cols * channels] }
    }

    pub fn n_patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.cols + col) * self.channels + channel]
    }

    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f64) {
        self.data[(row * self.cols + col) * self.channels + channel] = value;
    }

    /// The `n_patches x channels` matrix view fed to the patch projector.
    pub fn as_matrix(&self) -> Tensor {
        Tensor::new([self.n_patches(), self.channels], self.data.clone())
            .expect("grid dimensions are consistent")
    }
}

/// One analysis input: a system prompt, an image, and a user prompt,
/// assembled in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalInput {
    pub system_tokens: Vec<TokenId>,
    pub image: PatchGrid,
    pub user_tokens: Vec<TokenId>,
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone)]
pub struct ModelWeights {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    pub lm_w: Tensor,
}

impl ModelWeights {
    fn init(config: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let d = config.d_model;
        let mut gauss = |shape: Vec<usize>| {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = (0..numel).map(|_| normal.sample(&mut rng)).collect();
            Tensor::new(shape, data).expect("consistent shape")
        };
        let tok_emb = gauss(vec![config.vocab_size, d]);
        let pos_emb = gauss(vec![config.max_seq, d]);
        let proj_w = gauss(vec![config.patch_channels, d]);
        let proj_b = Tensor::zeros([d]);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1_gain: Tensor::full([d], 1.0),
                ln1_bias: Tensor::zeros([d]),
                wq: gauss(vec![d, d]),
                wk: gauss(vec![d, d]),
                wv: gauss(vec![d, d]),
                wo: gauss(vec![d, d]),
                ln2_gain: Tensor::full([d], 1.0),
                ln2_bias: Tensor::zeros([d]),
                w1: gauss(vec![d, config.d_ff()]),
                b1: Tensor::zeros([config.d_ff()]),
                w2: gauss(vec![config.d_ff(), d]),
                b2: Tensor::zeros([d]),
            })
            .collect();
        let final_gain = Tensor::full([d], 1.0);
        let final_bias = Tensor::zeros([d]);
        let lm_w = gauss(vec![d, config.vocab_size]);
        Self { tok_emb, pos_emb, proj_w, proj_b, layers, final_gain, final_bias, lm_w }
    }

    /// Parameters in the fixed manifest order used by checkpoints and the
    /// optimizer.
    pub fn param_entries(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
            ("proj_w".into(), &self.proj_w),
            ("proj_b".into(), &self.proj_b),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("ln1_gain", &l.ln1_gain),
                ("ln1_bias", &l.ln1_bias),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("ln2_gain", &l.ln2_gain),
                ("ln2_bias", &l.ln2_bias),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
            ] {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_gain".into(), &self.final_gain));
        out.push(("final_bias".into(), &self.final_bias));
        out.push(("lm_w".into(), &self.lm_w));
        out
    }

    pub(crate) fn param_entries_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
            ("proj_w".into(), &mut self.proj_w),
            ("proj_b".into(), &mut self.proj_b),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (name, t) in [
                ("ln1_gain", &mut l.ln1_gain),
                ("ln1_bias", &mut l.ln1_bias),
                ("wq", &mut l.wq),
                ("wk", &mut l.wk),
                ("wv", &mut l.wv),
                ("wo", &mut l.wo),
                ("ln2_gain", &mut l.ln2_gain),
                ("ln2_bias", &mut l.ln2_bias),
                ("w1", &mut l.w1),
                ("b1", &mut l.b1),
                ("w2", &mut l.w2),
                ("b2", &mut l.b2),
            ] {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_gain".into(), &mut self.final_gain));
        out.push(("final_bias".into(), &mut self.final_bias));
        out.push(("lm_w".into(), &mut self.lm_w));
        out
    }
}

/// Blocks attention from every query to the flagged columns, starting at a
/// 1-based layer. Used for masked-style truncation ablations and by models
/// constructed with a known image cutoff.
#[derive(Debug, Clone)]
pub struct ColumnBlock {
    pub from_layer: usize,
    pub cols: Vec<bool>,
}

/// Captured state of one layer during a forward pass.
#[derive(Debug, Clone)]
pub struct LayerCapture {
    /// Per-head attention probabilities, each `S x S`.
    pub heads: Vec<Tensor>,
    /// Feature map at the configured hook point, `S x d_model`.
    pub features: Tensor,
    /// Hidden state entering this layer, `S x d_model`.
    pub layer_input: Tensor,
}

/// Per-layer capture of attention maps and hook-point features.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub hook: HookPoint,
    pub layers: Vec<LayerCapture>,
}

impl AttentionRecord {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn seq_len(&self) -> usize {
        self.layers[0].layer_input.shape()[0]
    }

    /// Capture for a 1-based layer index.
    pub fn layer(&self, layer: usize) -> Result<&LayerCapture> {
        if layer == 0 || layer > self.layers.len() {
            return Err(contract(format!(
                "layer {layer} out of 1..={}",
                self.layers.len()
            )));
        }
        Ok(&self.layers[layer - 1])
    }
}

/// Result of a capturing forward pass over a prompt (plus optional decoded
/// suffix).
#[derive(Debug, Clone)]
pub struct CaptureRun {
    pub logits: Tensor,
    pub record: AttentionRecord,
    pub layout: TokenLayout,
}

/// Tape handles produced by a taped forward pass; used where gradients of
/// intermediate activations are needed.
pub struct TapedForward {
    pub logits: Var,
    /// Hook-point feature map per executed layer, in layer order.
    pub features: Vec<Var>,
    /// Hidden state entering each executed layer.
    pub layer_inputs: Vec<Var>,
    /// Attention probabilities per executed layer, per head.
    pub attention: Vec<Vec<Var>>,
}

/// Options for the taped forward pass.
pub(crate) struct ForwardOpts<'a> {
    /// First layer to execute, 1-based.
    pub start_layer: usize,
    pub hook: HookPoint,
    /// Replace the post-attention-norm output of a 1-based layer with the
    /// given tensor (inserted as a grad-enabled leaf). A probe point for
    /// gradient checks.
    pub feature_override: Option<(usize, &'a Tensor)>,
    /// Additional column blocking, merged with any model-level block.
    pub column_block: Option<&'a ColumnBlock>,
}

impl Default for ForwardOpts<'_> {
    fn default() -> Self {
        Self {
            start_layer: 1,
            hook: HookPoint::default(),
            feature_override: None,
            column_block: None,
        }
    }
}

pub(crate) struct WeightVars {
    tok_emb: Var,
    pos_emb: Var,
    proj_w: Var,
    proj_b: Var,
    layers: Vec<[Var; 12]>,
    final_gain: Var,
    final_bias: Var,
    lm_w: Var,
}

impl WeightVars {
    /// Vars in the same order as [`ModelWeights::param_entries`].
    pub(crate) fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb, self.proj_w, self.proj_b];
        for l in &self.layers {
            out.extend_from_slice(l);
        }
        out.extend_from_slice(&[self.final_gain, self.final_bias, self.lm_w]);
        out
    }
}

#[derive(Debug, Clone)]
pub struct MiniLvlm {
    config: ModelConfig,
    weights: ModelWeights,
    /// When set, attention to image columns is blocked from this 1-based
    /// layer onward (a value of `n_layers + 1` never triggers).
    image_block_from: Option<usize>,
}

impl MiniLvlm {
    /// Builds a model with seeded Gaussian initialization.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let weights = ModelWeights::init(&config);
        Ok(Self { config, weights, image_block_from: None })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut ModelWeights {
        &mut self.weights
    }

    pub fn param_count(&self) -> usize {
        self.weights
            .param_entries()
            .iter()
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn image_block_from(&self) -> Option<usize> {
        self.image_block_from
    }

    /// Blocks image columns from the given 1-based layer onward;
    /// `n_layers + 1` is the no-op sentinel.
    pub fn set_image_block_from(&mut self, layer: Option<usize>) -> Result<()> {
        if let Some(l) = layer {
            if l == 0 || l > self.config.n_layers + 1 {
                return Err(contract(format!(
                    "image block layer {l} out of 1..={}",
                    self.config.n_layers + 1
                )));
            }
        }
        self.image_block_from = layer;
        Ok(())
    }

    // ── Embedding ───────────────────────────────────────────────────────

    fn validate_input(&self, input: &MultimodalInput, extra: usize) -> Result<TokenLayout> {
        let cfg = &self.config;
        if input.image.rows != cfg.patch_rows
            || input.image.cols != cfg.patch_cols
            || input.image.channels != cfg.patch_channels
        {
            return Err(Error::ShapeMismatch {
                context: "embed_multimodal",
                expected: format!(
                    "{}x{}x{} patch grid",
                    cfg.patch_rows, cfg.patch_cols, cfg.patch_channels
                ),
                got: format!(
                    "{}x{}x{}",
                    input.image.rows, input.image.cols, input.image.channels
                ),
            });
        }
        for &t in input.system_tokens.iter().chain(&input.user_tokens) {
            if t >= cfg.vocab_size {
                return Err(contract(format!(
                    "token id {t} out of vocabulary 0..{}",
                    cfg.vocab_size
                )));
            }
        }
        let layout = TokenLayout::new(
            input.system_tokens.len(),
            cfg.n_img(),
            input.user_tokens.len(),
        );
        let needed = layout.total() + extra;
        if needed > cfg.max_seq {
            return Err(Error::Capacity { needed, max: cfg.max_seq });
        }
        Ok(layout)
    }

    /// Embeds `[system | image | user | suffix]` on the tape with the given
    /// weight vars. Positions are sequential from 0. When `grad_image` is
    /// set the image matrix becomes a grad-enabled leaf.
    pub(crate) fn embed_with_weights(
        &self,
        tape: &mut Tape,
        w: &WeightVars,
        input: &MultimodalInput,
        suffix: &[TokenId],
        image_override: Option<&PatchGrid>,
        grad_image: bool,
    ) -> Result<(Var, TokenLayout)> {
        if let Some(&bad) = suffix.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(contract(format!("suffix token id {bad} out of vocabulary")));
        }
        let layout = self.validate_input(input, suffix.len())?;
        if let Some(img) = image_override {
            if (img.rows, img.cols, img.channels)
                != (input.image.rows, input.image.cols, input.image.channels)
            {
                return Err(contract("image override dimensions differ from input"));
            }
        }
        let image = image_override.unwrap_or(&input.image);

        let mut parts = Vec::new();
        if !input.system_tokens.is_empty() {
            parts.push(tape.gather_rows(w.tok_emb, &input.system_tokens)?);
        }
        let mut img_mat = image.as_matrix();
        img_mat.set_grad_enabled(grad_image);
        let img_leaf = tape.leaf(img_mat);
        let projected = tape.matmul(img_leaf, w.proj_w)?;
        parts.push(tape.add_row(projected, w.proj_b)?);
        let mut tail: Vec<TokenId> = input.user_tokens.clone();
        tail.extend(suffix);
        if !tail.is_empty() {
            parts.push(tape.gather_rows(w.tok_emb, &tail)?);
        }
        let seq = tape.concat_rows(&parts)?;
        let total = layout.total() + suffix.len();
        let positions: Vec<usize> = (0..total).collect();
        let pos = tape.gather_rows(w.pos_emb, &positions)?;
        let embedded = tape.add(seq, pos)?;
        Ok((embedded, layout))
    }

    /// Embeds a prompt, returning the `S x d_model` sequence and its layout.
    pub fn embed_multimodal(&self, input: &MultimodalInput) -> Result<(Tensor, TokenLayout)> {
        self.embed_with_suffix(input, &[])
    }

    /// Embeds a prompt followed by already-generated text tokens.
    pub fn embed_with_suffix(
        &self,
        input: &MultimodalInput,
        suffix: &[TokenId],
    ) -> Result<(Tensor, TokenLayout)> {
        let mut tape = Tape::new();
        let w = self.weight_vars(&mut tape, false);
        let (var, layout) = self.embed_with_weights(&mut tape, &w, input, suffix, None, false)?;
        Ok((tape.value(var).clone(), layout))
    }

    /// Embeds plain text tokens at explicit positions. Supports rebuilding
    /// reduced inputs whose surviving tokens keep their original positions.
    pub fn embed_tokens_at_positions(
        &self,
        tokens: &[TokenId],
        positions: &[usize],
    ) -> Result<Tensor> {
        if tokens.len() != positions.len() || tokens.is_empty() {
            return Err(contract("tokens and positions must be equal nonempty lengths"));
        }
        if let Some(&bad) = positions.iter().find(|&&p| p >= self.config.max_seq) {
            return Err(Error::Capacity { needed: bad + 1, max: self.config.max_seq });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(contract(format!("token id {bad} out of vocabulary")));
        }
        let mut tape = Tape::new();
        let tok_table = tape.leaf(self.weights.tok_emb.clone());
        let pos_table = tape.leaf(self.weights.pos_emb.clone());
        let toks = tape.gather_rows(tok_table, tokens)?;
        let pos = tape.gather_rows(pos_table, positions)?;
        let out = tape.add(toks, pos)?;
        Ok(tape.value(out).clone())
    }

    // ── Forward ─────────────────────────────────────────────────────────

    pub(crate) fn weight_vars(&self, tape: &mut Tape, grad: bool) -> WeightVars {
        let mut insert = |t: &Tensor| {
            let mut v = t.clone();
            v.set_grad_enabled(grad);
            tape.leaf(v)
        };
        WeightVars {
            tok_emb: insert(&self.weights.tok_emb),
            pos_emb: insert(&self.weights.pos_emb),
            proj_w: insert(&self.weights.proj_w),
            proj_b: insert(&self.weights.proj_b),
            layers: self
                .weights
                .layers
                .iter()
                .map(|l| {
                    [
                        insert(&l.ln1_gain),
                        insert(&l.ln1_bias),
                        insert(&l.wq),
                        insert(&l.wk),
                        insert(&l.wv),
                        insert(&l.wo),
                        insert(&l.ln2_gain),
                        insert(&l.ln2_bias),
                        insert(&l.w1),
                        insert(&l.b1),
                        insert(&l.w2),
                        insert(&l.b2),
                    ]
                })
                .collect(),
            final_gain: insert(&self.weights.final_gain),
            final_bias: insert(&self.weights.final_bias),
            lm_w: insert(&self.weights.lm_w),
        }
    }

    fn attn_mask(
        &self,
        seq_len: usize,
        layer: usize,
        img_cols: &[bool],
        extra: Option<&ColumnBlock>,
    ) -> Vec<bool> {
        let mut mask = causal_mask(seq_len);
        let model_blocked = self.image_block_from.map_or(false, |from| layer >= from);
        let extra_cols = extra.filter(|b| layer >= b.from_layer).map(|b| &b.cols);
        if model_blocked || extra_cols.is_some() {
            for j in 0..seq_len {
                let blocked =
                    (model_blocked && img_cols[j]) || extra_cols.map_or(false, |c| c[j]);
                if blocked {
                    for i in 0..seq_len {
                        mask[i * seq_len + j] = true;
                    }
                }
            }
        }
        mask
    }

    /// Runs layers `start_layer..=n_layers` plus the output head over `x0`,
    /// recording everything on the tape. `img_cols` flags image positions of
    /// the current (possibly reduced) sequence.
    pub(crate) fn forward_with_weights(
        &self,
        tape: &mut Tape,
        w: &WeightVars,
        x0: Var,
        img_cols: &[bool],
        opts: &ForwardOpts<'_>,
    ) -> Result<TapedForward> {
        let cfg = &self.config;
        let (seq_len, d) = tape.value(x0).dims2()?;
        if d != cfg.d_model {
            return Err(Error::ShapeMismatch {
                context: "forward",
                expected: format!("[S, {}]", cfg.d_model),
                got: format!("{:?}", tape.value(x0).shape()),
            });
        }
        if img_cols.len() != seq_len {
            return Err(contract("image column flags must cover the sequence"));
        }
        if opts.start_layer == 0 || opts.start_layer > cfg.n_layers {
            return Err(contract(format!(
                "start layer {} out of 1..={}",
                opts.start_layer, cfg.n_layers
            )));
        }
        if let Some(block) = opts.column_block {
            if block.cols.len() != seq_len {
                return Err(contract("column block flags must cover the sequence"));
            }
        }

        let head_dim = cfg.head_dim();
        let scale = 1.0 / (head_dim as f64).sqrt();

        let mut x = x0;
        let n_run = cfg.n_layers - opts.start_layer + 1;
        let mut features = Vec::with_capacity(n_run);
        let mut layer_inputs = Vec::with_capacity(n_run);
        let mut attention = Vec::with_capacity(n_run);

        for layer in opts.start_layer..=cfg.n_layers {
            let [ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2] =
                w.layers[layer - 1];
            layer_inputs.push(x);

            let xn = tape.layer_norm(x, ln1_g, ln1_b, LAYER_NORM_EPS)?;
            let pre_norm_feat = xn;
            let q = tape.matmul(xn, wq)?;
            let k = tape.matmul(xn, wk)?;
            let v = tape.matmul(xn, wv)?;
            let mask = self.attn_mask(seq_len, layer, img_cols, opts.column_block);

            let mut head_ctx = Vec::with_capacity(cfg.n_heads);
            let mut head_probs = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
                let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
                let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scaled = tape.scale(scores, scale);
                let probs = tape.softmax_rows(scaled, Some(&mask))?;
                head_probs.push(probs);
                head_ctx.push(tape.matmul(probs, vh)?);
            }
            attention.push(head_probs);
            let ctx = tape.concat_cols(&head_ctx)?;
            let attn_out = tape.matmul(ctx, wo)?;
            x = tape.add(x, attn_out)?;

            let mut a = tape.layer_norm(x, ln2_g, ln2_b, LAYER_NORM_EPS)?;
            if let Some((l, t)) = opts.feature_override {
                if l == layer {
                    let mut replacement = t.clone();
                    replacement.set_grad_enabled(true);
                    a = tape.leaf(replacement);
                }
            }
            let post_norm_feat = a;

            let m1 = tape.matmul(a, w1)?;
            let m1b = tape.add_row(m1, b1)?;
            let hidden = tape.gelu(m1b);
            let m2 = tape.matmul(hidden, w2)?;
            let mlp_out = tape.add_row(m2, b2)?;
            x = tape.add(x, mlp_out)?;

            features.push(match opts.hook {
                HookPoint::PostAttentionNorm => post_norm_feat,
                HookPoint::PreNorm => pre_norm_feat,
                HookPoint::MlpOut => mlp_out,
            });
        }

        let f = tape.layer_norm(x, w.final_gain, w.final_bias, LAYER_NORM_EPS)?;
        let logits = tape.matmul(f, w.lm_w)?;
        Ok(TapedForward { logits, features, layer_inputs, attention })
    }

    /// Embeds and runs a full taped pass over `[prompt | suffix]`, with the
    /// image inserted as a grad-enabled leaf so activation gradients exist.
    /// The first entry of `layer_inputs` is the embedded sequence itself.
    pub fn taped_run(
        &self,
        tape: &mut Tape,
        input: &MultimodalInput,
        suffix: &[TokenId],
        hook: HookPoint,
    ) -> Result<(TapedForward, TokenLayout)> {
        self.taped_analysis_run(tape, input, suffix, None, hook, None)
    }

    pub(crate) fn taped_analysis_run(
        &self,
        tape: &mut Tape,
        input: &MultimodalInput,
        suffix: &[TokenId],
        image_override: Option<&PatchGrid>,
        hook: HookPoint,
        feature_override: Option<(usize, &Tensor)>,
    ) -> Result<(TapedForward, TokenLayout)> {
        let w = self.weight_vars(tape, false);
        let (x0, layout) =
            self.embed_with_weights(tape, &w, input, suffix, image_override, true)?;
        let seq_len = layout.total() + suffix.len();
        let img_cols = layout.image_flags(seq_len);
        let opts = ForwardOpts { hook, feature_override, ..ForwardOpts::default() };
        let run = self.forward_with_weights(tape, &w, x0, &img_cols, &opts)?;
        Ok((run, layout))
    }

    fn extract_record(&self, tape: &Tape, run: &TapedForward, hook: HookPoint) -> AttentionRecord {
        let layers = run
            .layer_inputs
            .iter()
            .zip(&run.features)
            .zip(&run.attention)
            .map(|((&input, &feat), heads)| LayerCapture {
                heads: heads.iter().map(|&h| tape.value(h).clone()).collect(),
                features: tape.value(feat).clone(),
                layer_input: tape.value(input).clone(),
            })
            .collect();
        AttentionRecord { hook, layers }
    }

    /// Full causal forward pass over a prompt with per-layer capture.
    pub fn forward_with_capture(
        &self,
        input: &MultimodalInput,
        hook: HookPoint,
    ) -> Result<CaptureRun> {
        self.forward_with_capture_suffix(input, &[], hook)
    }

    /// Capture pass over `[prompt | generated suffix]`.
    pub fn forward_with_capture_suffix(
        &self,
        input: &MultimodalInput,
        suffix: &[TokenId],
        hook: HookPoint,
    ) -> Result<CaptureRun> {
        let mut tape = Tape::new();
        let w = self.weight_vars(&mut tape, false);
        let (x0, layout) = self.embed_with_weights(&mut tape, &w, input, suffix, None, false)?;
        let seq_len = layout.total() + suffix.len();
        let img_cols = layout.image_flags(seq_len);
        let opts = ForwardOpts { hook, ..ForwardOpts::default() };
        let run = self.forward_with_weights(&mut tape, &w, x0, &img_cols, &opts)?;
        let record = self.extract_record(&tape, &run, hook);
        Ok(CaptureRun { logits: tape.value(run.logits).clone(), record, layout })
    }

    /// Logits of a prompt without capture.
    pub fn logits(&self, input: &MultimodalInput) -> Result<Tensor> {
        self.logits_with_suffix(input, &[])
    }

    pub fn logits_with_suffix(
        &self,
        input: &MultimodalInput,
        suffix: &[TokenId],
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let w = self.weight_vars(&mut tape, false);
        let (x0, layout) = self.embed_with_weights(&mut tape, &w, input, suffix, None, false)?;
        let seq_len = layout.total() + suffix.len();
        let img_cols = layout.image_flags(seq_len);
        let run = self.forward_with_weights(&mut tape, &w, x0, &img_cols, &ForwardOpts::default())?;
        Ok(tape.value(run.logits).clone())
    }

    /// Resumes execution at a 1-based layer over only the kept rows of a
    /// previously computed layer input. Surviving rows keep their original
    /// (embedded) positional information. `layout` describes the original
    /// sequence the hidden state came from.
    pub fn forward_from_layer(
        &self,
        hidden: &Tensor,
        keep: &[usize],
        start_layer: usize,
        layout: &TokenLayout,
    ) -> Result<Tensor> {
        let (rows, _) = hidden.dims2()?;
        if keep.is_empty() {
            return Err(contract("keep set must be nonempty"));
        }
        if let Some(&bad) = keep.iter().find(|&&i| i >= rows) {
            return Err(contract(format!("keep index {bad} out of 0..{rows}")));
        }
        if keep.windows(2).any(|w| w[0] >= w[1]) {
            return Err(contract("keep indices must be strictly increasing"));
        }
        let mut tape = Tape::new();
        let w = self.weight_vars(&mut tape, false);
        let full = tape.leaf(hidden.clone());
        let reduced = if keep.len() == rows {
            full
        } else {
            tape.gather_rows(full, keep)?
        };
        let img_cols: Vec<bool> = keep.iter().map(|&i| layout.is_image(i)).collect();
        let opts = ForwardOpts { start_layer, ..ForwardOpts::default() };
        let run = self.forward_with_weights(&mut tape, &w, reduced, &img_cols, &opts)?;
        Ok(tape.value(run.logits).clone())
    }

    /// Forward pass over a prompt with extra column blocking from a given
    /// layer (masked-style truncation).
    pub fn logits_with_block(
        &self,
        input: &MultimodalInput,
        suffix: &[TokenId],
        block: &ColumnBlock,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let w = self.weight_vars(&mut tape, false);
        let (x0, layout) = self.embed_with_weights(&mut tape, &w, input, suffix, None, false)?;
        let seq_len = layout.total() + suffix.len();
        let img_cols = layout.image_flags(seq_len);
        let opts = ForwardOpts { column_block: Some(block), ..ForwardOpts::default() };
        let run = self.forward_with_weights(&mut tape, &w, x0, &img_cols, &opts)?;
        Ok(tape.value(run.logits).clone())
    }

    /// Deterministic argmax decoding of `max_new` tokens. Appended tokens
    /// attend causally to the full prefix.
    pub fn greedy_decode(&self, input: &MultimodalInput, max_new: usize) -> Result<Vec<TokenId>> {
        if max_new == 0 {
            return Err(contract("max_new must be at least 1"));
        }
        self.validate_input(input, max_new)?;
        let mut generated: Vec<TokenId> = Vec::with_capacity(max_new);
        for _ in 0..max_new {
            let logits = self.logits_with_suffix(input, &generated)?;
            let last = logits.row(logits.shape()[0] - 1);
            generated.push(argmax(last));
        }
        Ok(generated)
    }
}


#[cfg(test)]
mod tests {
    use super::test_support::{random_input, tiny_config};
    use super::*;

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        cfg.d_model = 15;
        assert!(cfg.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }

    #[test]
    fn embed_layout_matches_segment_arithmetic() {
        let mut cfg = tiny_config();
        cfg.patch_rows = 4;
        cfg.patch_cols = 4;
        cfg.max_seq = 40;
        let model = MiniLvlm::new(cfg).unwrap();
        let input = random_input(&cfg, 1, 3, 5);
        let (seq, layout) = model.embed_multimodal(&input).unwrap();
        assert_eq!(layout, TokenLayout::new(3, 16, 5));
        assert_eq!(seq.shape(), &[24, cfg.d_model]);
        // 1-based sets: S = {1..3}, I = {4..19}, U = {20..24}.
        assert_eq!(layout.sys_range(), 0..3);
        assert_eq!(layout.img_range(), 3..19);
        assert_eq!(layout.user_range(), 19..24);
    }

    #[test]
    fn embed_empty_user_prompt() {
        let cfg = tiny_config();
        let model = MiniLvlm::new(cfg).unwrap();
        let mut input = random_input(&cfg, 2, 2, 3);
        input.user_tokens.clear();
        let (_, layout) = model.embed_multimodal(&input).unwrap();
        assert!(layout.user_range().is_empty());
        assert_eq!(layout.total(), 2 + 4);
    }

    #[test]
    fn embed_rejects_overflow() {
        let mut cfg = tiny_config();
        cfg.max_seq = 8;
        let model = MiniLvlm::new(cfg).unwrap();
        let input = random_input(&cfg, 3, 3, 4);
        assert!(matches!(
            model.embed_multimodal(&input),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn embedding_matches_manual_lookup() {
        let cfg = tiny_config();
        let model = MiniLvlm::new(cfg).unwrap();
        let input = random_input(&cfg, 3, 3, 2);
        let (seq, layout) = model.embed_multimodal(&input).unwrap();
        let w = model.weights();
        // First system token row = tok_emb[id] + pos_emb[0].
        let id = input.system_tokens[0];
        for j in 0..cfg.d_model {
            let expect = w.tok_emb.at2(id, j) + w.pos_emb.at2(0, j);
            assert!((seq.at2(0, j) - expect).abs() < 1e-15);
        }
        // First user token row sits right after the image segment.
        let u0 = layout.user_range().start;
        let uid = input.user_tokens[0];
        for j in 0..cfg.d_model {
            let expect = w.tok_emb.at2(uid, j) + w.pos_emb.at2(u0, j);
            assert!((seq.at2(u0, j) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let cfg = tiny_config();
        let model = MiniLvlm::new(cfg).unwrap();
        let input = random_input(&cfg, 5, 2, 3);
        let run = model
            .forward_with_capture(&input, HookPoint::PostAttentionNorm)
            .unwrap();
        for layer in &run.record.layers {
            for head in &layer.heads {
                let (s, _) = head.dims2().unwrap();
                for i in 0..s {
                    let row = head.row(i);
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-9);
                    for (j, &p) in row.iter().enumerate() {
                        assert!(p >= 0.0);
                        if j > i {
                            assert_eq!(p, 0.0, "causal support violated at ({i},{j})");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn single_token_attention_is_identity() {
        let mut cfg = tiny_config();
        cfg.patch_rows = 1;
        cfg.patch_cols = 1;
        let model = MiniLvlm::new(cfg).unwrap();
        let input = MultimodalInput {
            system_tokens: vec![],
            image: PatchGrid::new(1, 1, cfg.patch_channels, vec![0.3; cfg.patch_channels])
                .unwrap(),
            user_tokens: vec![],
        };
        let run = model
            .forward_with_capture(&input, HookPoint::PostAttentionNorm)
            .unwrap();
        for layer in &run.record.layers {
            for head in &layer.heads {
                assert_eq!(head.shape(), &[1, 1]);
                assert_eq!(head.data(), &[1.0]);
            }
        }
    }

    #[test]
    fn capture_is_transparent() {
        let cfg = tiny_config();
        let model = MiniLvlm::new(cfg).unwrap();
        let input = random_input(&cfg, 6, 2, 2);
        let plain = model.logits(&input).unwrap();
        let run = model
            .forward_with_capture(&input, HookPoint::PostAttentionNorm)
            .unwrap();
        assert_eq!(plain.data(), run.logits.data());
    }

    #[test]
    fn causality_perturbation() {
        let cfg = tiny_config();
        let model = MiniLvlm::new(cfg).unwrap();
        let base = random_input(&cfg, 7, 3, 3);
        let mut changed = base.clone();
        // Perturb the second user token (position n_sys + n_img + 1).
        changed.user_tokens[1] = (changed.user_tokens[1] + 1) % cfg.vocab_size;
        let j = 3 + cfg.n_img() + 1;
        let a = model.logits(&base).unwrap();
        let b = model.logits(&changed).unwrap();
        let (s, v) = a.dims2().unwrap();
        for i in 0..s {
            let differs = (0..v).any(|c| a.at2(i, c) != b.at2(i, c));
            if i < j {
                assert!(!differs, "position {i} changed before perturbed token {j}");
            }
        }
        let last_differs = (0..v).any(|c| a.at2(s - 1, c) != b.at2(s - 1, c));
        assert!(last_differs, "perturbation never reached the last position");
    }

    #[test]
    fn identity_truncation_is_bitwise() {
        let cfg = tiny_config();
        let model = MiniLvlm::new(cfg).unwrap();
        let input = random_input(&cfg, 8, 2, 3);
        let run = model
            .forward_with_capture(&input, HookPoint::PostAttentionNorm)
            .unwrap();
        let s = run.layout.total();
        let keep: Vec<usize> = (0..s).collect();
        for layer in 1..=cfg.n_layers {
            let hidden = &run.record.layer(layer).unwrap().layer_input;
            let resumed = model
                .forward_from_layer(hidden, &keep, layer, &run.layout)
                .unwrap();
            assert!(
                resumed
                    .data()
                    .iter()
                    .zip(run.logits.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits()),
                "layer {layer} identity truncation diverged"
            );
        }
    }

    #[test]
    fn text_only_truncation_matches_rebuilt_input() {
        let cfg = tiny_config();
        let model = MiniLvlm::new(cfg).unwrap();
        let input = random_input(&cfg, 9, 3, 4);
        let run = model
            .forward_with_capture(&input, HookPoint::PostAttentionNorm)
            .unwrap();
        let layout = run.layout;
        let keep: Vec<usize> = (0..layout.total())
            .filter(|&i| !layout.is_image(i))
            .collect();
        let truncated = model
            .forward_from_layer(&run.record.layer(1).unwrap().layer_input, &keep, 1, &layout)
            .unwrap();

        // Rebuilt oracle: embed only the text tokens, at their original
        // positions, and run the full stack on a text-only layout.
        let tokens: Vec<TokenId> = input
            .system_tokens
            .iter()
            .chain(&input.user_tokens)
            .copied()
            .collect();
        let rebuilt = model.embed_tokens_at_positions(&tokens, &keep).unwrap();
        let text_layout = TokenLayout::new(tokens.len(), 0, 0);
        let all: Vec<usize> = (0..tokens.len()).collect();
        let oracle = model
            .forward_from_layer(&rebuilt, &all, 1, &text_layout)
            .unwrap();
        assert_eq!(truncated.shape(), oracle.shape());
        for (a, b) in truncated.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn greedy_decode_is_argmax_and_deterministic() {
        let cfg = tiny_config();
        let model = MiniLvlm::new(cfg).unwrap();
        let input = random_input(&cfg, 10, 2, 3);
        let logits = model.logits(&input).unwrap();
        let expect = argmax(logits.row(logits.shape()[0] - 1));
        let one = model.greedy_decode(&input, 1).unwrap();
        assert_eq!(one, vec![expect]);
        let a = model.greedy_decode(&input, 4).unwrap();
        let b = model.greedy_decode(&input, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn image_block_sentinel_is_noop() {
        let cfg = tiny_config();
        let base = MiniLvlm::new(cfg).unwrap();
        let mut blocked = base.clone();
        blocked.set_image_block_from(Some(cfg.n_layers + 1)).unwrap();
        let input = random_input(&cfg, 11, 2, 2);
        let a = base.logits(&input).unwrap();
        let b = blocked.logits(&input).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn feature_override_with_captured_value_reproduces_baseline() {
        let cfg = tiny_config();
        let model = MiniLvlm::new(cfg).unwrap();
        let input = random_input(&cfg, 12, 2, 2);
        let run = model
            .forward_with_capture(&input, HookPoint::PostAttentionNorm)
            .unwrap();
        let captured = run.record.layer(1).unwrap().features.clone();

        let mut tape = Tape::new();
        let (tf, _) = model
            .taped_analysis_run(
                &mut tape,
                &input,
                &[],
                None,
                HookPoint::PostAttentionNorm,
                Some((1, &captured)),
            )
            .unwrap();
        for (a, b) in tape.value(tf.logits).data().iter().zip(run.logits.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
