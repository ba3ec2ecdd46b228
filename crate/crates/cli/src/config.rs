//! Per-subcommand configuration: an optional TOML file supplies defaults,
//! command-line flags override it, and the fully resolved configuration is
//! echoed into the output directory so every run is reproducible from its
//! artifacts.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use flowscope::cliff::MetricKind;
use flowscope::model::{HookPoint, ModelConfig};
use flowscope::tasks::{SyntheticTask, TaskKind};
use flowscope::truncation::{ScoreMode, TruncationStyle};

use crate::usage;

/// Environment variable consulted for the output directory when no flag or
/// config-file value is given.
pub const OUT_DIR_ENV: &str = "FLOWSCOPE_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "flowscope-out";

pub fn load_file<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config file {}", p.display()))?;
            toml::from_str(&text).map_err(|e| usage(format!("config file {}: {e}", p.display())))
        }
    }
}

/// Flag > environment > config file > built-in default.
pub fn resolve_out_dir(flag: Option<PathBuf>, file: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .or(file)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

pub fn echo_config<T: Serialize>(out_dir: &Path, resolved: &T) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let text = toml::to_string_pretty(resolved).context("encoding resolved config")?;
    std::fs::write(out_dir.join("resolved_config.toml"), text)?;
    Ok(())
}

pub fn parse_task_kind(name: &str) -> Result<TaskKind> {
    match name {
        "patch_lookup" => Ok(TaskKind::PatchLookup),
        "multi_hop" => Ok(TaskKind::MultiHop),
        "global_describe" => Ok(TaskKind::GlobalDescribe),
        "text_only" => Ok(TaskKind::TextOnly),
        other => Err(usage(format!(
            "unknown task kind '{other}' (expected patch_lookup, multi_hop, \
             global_describe or text_only)"
        ))),
    }
}

pub fn parse_hook(name: &str) -> Result<HookPoint> {
    match name {
        "post_attention_norm" => Ok(HookPoint::PostAttentionNorm),
        "pre_norm" => Ok(HookPoint::PreNorm),
        "mlp_out" => Ok(HookPoint::MlpOut),
        other => Err(usage(format!(
            "unknown hook point '{other}' (expected post_attention_norm, pre_norm or mlp_out)"
        ))),
    }
}

pub fn parse_score_mode(name: &str) -> Result<ScoreMode> {
    match name {
        "last_image" => Ok(ScoreMode::LastImage),
        "last_prompt" => Ok(ScoreMode::LastPrompt),
        other => Err(usage(format!(
            "unknown score mode '{other}' (expected last_image or last_prompt)"
        ))),
    }
}

pub fn parse_style(name: &str) -> Result<TruncationStyle> {
    match name {
        "remove" => Ok(TruncationStyle::Remove),
        "mask" => Ok(TruncationStyle::Mask),
        other => Err(usage(format!(
            "unknown truncation style '{other}' (expected remove or mask)"
        ))),
    }
}

pub fn parse_metric(name: &str) -> Result<MetricKind> {
    match name {
        "accuracy" => Ok(MetricKind::Accuracy),
        "logit_deviation" => Ok(MetricKind::LogitDeviation),
        other => Err(usage(format!(
            "unknown metric '{other}' (expected accuracy or logit_deviation)"
        ))),
    }
}

// ── Shared task/input specification ─────────────────────────────────────

/// A seeded synthetic task batch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub classes: usize,
    pub count: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn synthetic(&self) -> SyntheticTask {
        SyntheticTask {
            kind: self.kind,
            classes: self.classes,
            seed: self.seed,
            count: self.count,
        }
    }
}

/// Where an analysis input comes from: a JSON file holding a serialized
/// multimodal input, or one generated instance of a synthetic task.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSpec {
    File { path: PathBuf },
    Task { spec: TaskSpec, instance: usize },
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// JSON file with a serialized multimodal input.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Synthetic task kind used to generate the input.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub task_seed: Option<u64>,
    /// Which generated instance to analyze.
    #[arg(long)]
    pub instance: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputFileSection {
    pub input: Option<PathBuf>,
    pub task: Option<String>,
    pub classes: Option<usize>,
    pub task_seed: Option<u64>,
    pub instance: Option<usize>,
}

pub fn resolve_input(args: &InputArgs, file: &InputFileSection) -> Result<InputSpec> {
    if let Some(path) = args.input.clone().or_else(|| file.input.clone()) {
        return Ok(InputSpec::File { path });
    }
    let kind_name = args
        .task
        .clone()
        .or_else(|| file.task.clone())
        .unwrap_or_else(|| "patch_lookup".to_string());
    let kind = parse_task_kind(&kind_name)?;
    let instance = args.instance.or(file.instance).unwrap_or(0);
    let spec = TaskSpec {
        kind,
        classes: args.classes.or(file.classes).unwrap_or(4),
        count: instance + 1,
        seed: args.task_seed.or(file.task_seed).unwrap_or(31),
    };
    Ok(InputSpec::Task { spec, instance })
}

// ── init-model ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Args)]
pub struct InitArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub patch_rows: Option<usize>,
    #[arg(long)]
    pub patch_cols: Option<usize>,
    #[arg(long)]
    pub patch_channels: Option<usize>,
    #[arg(long)]
    pub max_seq: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitFile {
    pub out_dir: Option<PathBuf>,
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_model: Option<usize>,
    pub vocab_size: Option<usize>,
    pub patch_rows: Option<usize>,
    pub patch_cols: Option<usize>,
    pub patch_channels: Option<usize>,
    pub max_seq: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InitConfig {
    pub out_dir: PathBuf,
    pub model: ModelConfig,
}

impl InitArgs {
    pub fn resolve(&self) -> Result<InitConfig> {
        let file: InitFile = load_file(self.config.as_deref())?;
        let model = ModelConfig {
            n_layers: self.n_layers.or(file.n_layers).unwrap_or(4),
            n_heads: self.n_heads.or(file.n_heads).unwrap_or(4),
            d_model: self.d_model.or(file.d_model).unwrap_or(32),
            vocab_size: self.vocab_size.or(file.vocab_size).unwrap_or(16),
            patch_rows: self.patch_rows.or(file.patch_rows).unwrap_or(3),
            patch_cols: self.patch_cols.or(file.patch_cols).unwrap_or(3),
            patch_channels: self.patch_channels.or(file.patch_channels).unwrap_or(4),
            max_seq: self.max_seq.or(file.max_seq).unwrap_or(24),
            seed: self.seed.or(file.seed).unwrap_or(0),
        };
        Ok(InitConfig {
            out_dir: resolve_out_dir(self.out_dir.clone(), file.out_dir),
            model,
        })
    }
}

// ── train-toy ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Checkpoint to start from.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub task_seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub out_dir: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub task: Option<String>,
    pub classes: Option<usize>,
    pub count: Option<usize>,
    pub task_seed: Option<u64>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub shuffle_seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainConfig {
    pub out_dir: PathBuf,
    pub model: PathBuf,
    pub task: TaskSpec,
    pub epochs: usize,
    pub learning_rate: f64,
    pub shuffle_seed: u64,
}

impl TrainArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let file: TrainFile = load_file(self.config.as_deref())?;
        let model = self
            .model
            .clone()
            .or(file.model)
            .ok_or_else(|| usage("train-toy requires --model <checkpoint>"))?;
        let kind_name = self
            .task
            .clone()
            .or(file.task)
            .ok_or_else(|| usage("train-toy requires --task <kind>"))?;
        Ok(TrainConfig {
            out_dir: resolve_out_dir(self.out_dir.clone(), file.out_dir),
            model,
            task: TaskSpec {
                kind: parse_task_kind(&kind_name)?,
                classes: self.classes.or(file.classes).unwrap_or(4),
                count: self.count.or(file.count).unwrap_or(256),
                seed: self.task_seed.or(file.task_seed).unwrap_or(31),
            },
            epochs: self.epochs.or(file.epochs).unwrap_or(12),
            learning_rate: self.learning_rate.or(file.learning_rate).unwrap_or(0.05),
            shuffle_seed: self.shuffle_seed.or(file.shuffle_seed).unwrap_or(11),
        })
    }
}

// ── analyze ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub input: InputArgs,
    /// Gaussian image-noise standard deviation for map smoothing.
    #[arg(long)]
    pub noise_s: Option<f64>,
    /// Number of perturbation samples averaged per map.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub cam_seed: Option<u64>,
    #[arg(long)]
    pub hook: Option<String>,
    #[arg(long)]
    pub answer_tokens: Option<usize>,
    /// Image-share threshold for the flagged layer.
    #[arg(long)]
    pub share_threshold: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeFile {
    pub out_dir: Option<PathBuf>,
    pub model: Option<PathBuf>,
    #[serde(flatten)]
    pub input: InputFileSection,
    pub noise_s: Option<f64>,
    pub samples: Option<usize>,
    pub cam_seed: Option<u64>,
    pub hook: Option<String>,
    pub answer_tokens: Option<usize>,
    pub share_threshold: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeConfig {
    pub out_dir: PathBuf,
    pub model: PathBuf,
    pub input: InputSpec,
    pub noise_s: f64,
    pub samples: usize,
    pub cam_seed: u64,
    pub hook: HookPoint,
    pub answer_tokens: usize,
    pub share_threshold: f64,
}

impl AnalyzeArgs {
    pub fn resolve(&self) -> Result<AnalyzeConfig> {
        let file: AnalyzeFile = load_file(self.config.as_deref())?;
        let model = self
            .model
            .clone()
            .or(file.model)
            .ok_or_else(|| usage("analyze requires --model <checkpoint>"))?;
        let hook_name = self
            .hook
            .clone()
            .or(file.hook)
            .unwrap_or_else(|| "post_attention_norm".to_string());
        Ok(AnalyzeConfig {
            out_dir: resolve_out_dir(self.out_dir.clone(), file.out_dir),
            model,
            input: resolve_input(&self.input, &file.input)?,
            noise_s: self.noise_s.or(file.noise_s).unwrap_or(0.0),
            samples: self.samples.or(file.samples).unwrap_or(1),
            cam_seed: self.cam_seed.or(file.cam_seed).unwrap_or(0),
            hook: parse_hook(&hook_name)?,
            answer_tokens: self.answer_tokens.or(file.answer_tokens).unwrap_or(1),
            share_threshold: self
                .share_threshold
                .or(file.share_threshold)
                .unwrap_or(flowscope::segments::DEFAULT_IMAGE_SHARE_THRESHOLD),
        })
    }
}

// ── truncate ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Args)]
pub struct TruncateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub input: InputArgs,
    /// 1-based layer at which image tokens are scored and dropped.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Number of image tokens kept.
    #[arg(long)]
    pub keep: Option<usize>,
    #[arg(long)]
    pub score_mode: Option<String>,
    #[arg(long)]
    pub style: Option<String>,
    #[arg(long)]
    pub max_new: Option<usize>,
    /// Sweep the truncation layer across the whole stack.
    #[arg(long)]
    pub sweep: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruncateFile {
    pub out_dir: Option<PathBuf>,
    pub model: Option<PathBuf>,
    #[serde(flatten)]
    pub input: InputFileSection,
    pub layer: Option<usize>,
    pub keep: Option<usize>,
    pub score_mode: Option<String>,
    pub style: Option<String>,
    pub max_new: Option<usize>,
    pub sweep: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TruncateConfig {
    pub out_dir: PathBuf,
    pub model: PathBuf,
    pub input: InputSpec,
    pub layer: usize,
    pub keep: usize,
    pub score_mode: ScoreMode,
    pub style: TruncationStyle,
    pub max_new: usize,
    pub sweep: bool,
}

impl TruncateArgs {
    pub fn resolve(&self) -> Result<TruncateConfig> {
        let file: TruncateFile = load_file(self.config.as_deref())?;
        let model = self
            .model
            .clone()
            .or(file.model)
            .ok_or_else(|| usage("truncate requires --model <checkpoint>"))?;
        let score_name = self
            .score_mode
            .clone()
            .or(file.score_mode)
            .unwrap_or_else(|| "last_image".to_string());
        let style_name = self
            .style
            .clone()
            .or(file.style)
            .unwrap_or_else(|| "remove".to_string());
        Ok(TruncateConfig {
            out_dir: resolve_out_dir(self.out_dir.clone(), file.out_dir),
            model,
            input: resolve_input(&self.input, &file.input)?,
            layer: self.layer.or(file.layer).unwrap_or(1),
            keep: self.keep.or(file.keep).unwrap_or(0),
            score_mode: parse_score_mode(&score_name)?,
            style: parse_style(&style_name)?,
            max_new: self.max_new.or(file.max_new).unwrap_or(1),
            sweep: self.sweep || file.sweep.unwrap_or(false),
        })
    }
}

// ── cliff ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Args)]
pub struct CliffArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Comma-separated task kinds to sweep.
    #[arg(long)]
    pub tasks: Option<String>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub task_seed: Option<u64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub metric: Option<String>,
    /// Block image attention from this 1-based layer onward before
    /// sweeping (a planted ground-truth cliff).
    #[arg(long)]
    pub plant: Option<usize>,
    #[arg(long)]
    pub share_threshold: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliffFile {
    pub out_dir: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub tasks: Option<String>,
    pub classes: Option<usize>,
    pub count: Option<usize>,
    pub task_seed: Option<u64>,
    pub epsilon: Option<f64>,
    pub metric: Option<String>,
    pub plant: Option<usize>,
    pub share_threshold: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CliffConfig {
    pub out_dir: PathBuf,
    pub model: PathBuf,
    pub tasks: Vec<TaskKind>,
    pub classes: usize,
    pub count: usize,
    pub task_seed: u64,
    pub epsilon: f64,
    pub metric: MetricKind,
    pub plant: Option<usize>,
    pub share_threshold: f64,
}

impl CliffArgs {
    pub fn resolve(&self) -> Result<CliffConfig> {
        let file: CliffFile = load_file(self.config.as_deref())?;
        let model = self
            .model
            .clone()
            .or(file.model)
            .ok_or_else(|| usage("cliff requires --model <checkpoint>"))?;
        let tasks_raw = self
            .tasks
            .clone()
            .or(file.tasks)
            .ok_or_else(|| usage("cliff requires --tasks <kind[,kind...]>"))?;
        let tasks = tasks_raw
            .split(',')
            .filter(|s| !s.is_empty())
            .map(parse_task_kind)
            .collect::<Result<Vec<_>>>()?;
        if tasks.is_empty() {
            return Err(usage("cliff requires at least one task kind"));
        }
        let metric_name = self
            .metric
            .clone()
            .or(file.metric)
            .unwrap_or_else(|| "logit_deviation".to_string());
        Ok(CliffConfig {
            out_dir: resolve_out_dir(self.out_dir.clone(), file.out_dir),
            model,
            tasks,
            classes: self.classes.or(file.classes).unwrap_or(4),
            count: self.count.or(file.count).unwrap_or(16),
            task_seed: self.task_seed.or(file.task_seed).unwrap_or(31),
            epsilon: self.epsilon.or(file.epsilon).unwrap_or(0.0),
            metric: parse_metric(&metric_name)?,
            plant: self.plant.or(file.plant),
            share_threshold: self
                .share_threshold
                .or(file.share_threshold)
                .unwrap_or(flowscope::segments::DEFAULT_IMAGE_SHARE_THRESHOLD),
        })
    }
}
