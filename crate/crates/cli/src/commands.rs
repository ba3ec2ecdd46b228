//! The five subcommands. Each takes a fully resolved configuration, writes
//! its artifacts under the output directory, and prints a short summary.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use flowscope::cam::{map_csv, overlay_export, smooth_cam_all_layers, CamConfig};
use flowscope::cliff::{
    render_cliff_report, render_taxonomy, sweep_cliff, taxonomy_report, CliffReport,
    SweepOptions,
};
use flowscope::layout::TokenLayout;
use flowscope::model::{
    load_checkpoint, save_checkpoint, train_toy, MiniLvlm, MultimodalInput, TokenId, TrainOptions,
};
use flowscope::segments::{influence_rates, write_profile_report, QueryPolicy, SegmentShares};
use flowscope::tasks::TaskKind;
use flowscope::truncation::{
    attention_cost_ratio, run_truncated_styled, TruncationRequest, TruncationRun,
};

use crate::config::{
    echo_config, AnalyzeConfig, CliffConfig, InitConfig, InputSpec, TrainConfig, TruncateConfig,
};
use crate::usage;

fn kind_name(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::PatchLookup => "patch_lookup",
        TaskKind::MultiHop => "multi_hop",
        TaskKind::GlobalDescribe => "global_describe",
        TaskKind::TextOnly => "text_only",
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).context("encoding json")?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_model(path: &Path) -> Result<MiniLvlm> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn resolve_input_data(model: &MiniLvlm, spec: &InputSpec) -> Result<MultimodalInput> {
    match spec {
        InputSpec::File { path } => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading input {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing input {}", path.display()))
        }
        InputSpec::Task { spec, instance } => {
            let inst = spec
                .synthetic()
                .instance(model.config(), *instance)
                .map_err(|e| usage(e.to_string()))?;
            Ok(inst.input)
        }
    }
}

// ── init-model ──────────────────────────────────────────────────────────

pub fn run_init(cfg: &InitConfig) -> Result<()> {
    cfg.model.validate().map_err(|e| usage(e.to_string()))?;
    let model = MiniLvlm::new(cfg.model)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    echo_config(&cfg.out_dir, cfg)?;
    let path = cfg.out_dir.join("model.ckpt");
    save_checkpoint(&model, &path)?;
    println!(
        "wrote {} ({} parameters)",
        path.display(),
        model.param_count()
    );
    Ok(())
}

// ── train-toy ───────────────────────────────────────────────────────────

pub fn run_train(cfg: &TrainConfig) -> Result<()> {
    let mut model = load_model(&cfg.model)?;
    let instances = cfg
        .task
        .synthetic()
        .generate(model.config())
        .map_err(|e| usage(e.to_string()))?;
    let report = train_toy(
        &mut model,
        &instances,
        &TrainOptions {
            epochs: cfg.epochs,
            learning_rate: cfg.learning_rate,
            shuffle_seed: cfg.shuffle_seed,
        },
    )?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    echo_config(&cfg.out_dir, cfg)?;
    let path = cfg.out_dir.join("trained.ckpt");
    save_checkpoint(&model, &path)?;
    write_json(&cfg.out_dir.join("train_report.json"), &report)?;
    println!(
        "trained {} on {} {} instances: loss {:.6}, accuracy {:.3}",
        path.display(),
        instances.len(),
        kind_name(cfg.task.kind),
        report.final_loss,
        report.train_accuracy
    );
    Ok(())
}

// ── analyze ─────────────────────────────────────────────────────────────

#[derive(Serialize)]
pub struct AnalyzeSummary {
    pub layout: TokenLayout,
    pub decoded_tokens: Vec<TokenId>,
    /// First 1-based layer whose image attention share fell below the
    /// threshold.
    pub flagged_layer: Option<usize>,
    pub share_threshold: f64,
    pub per_layer_shares: Vec<SegmentShares>,
    pub cam_layers: usize,
    pub hook: flowscope::model::HookPoint,
    pub noise_s: f64,
    pub samples: usize,
}

pub fn run_analyze(cfg: &AnalyzeConfig) -> Result<AnalyzeSummary> {
    let model = load_model(&cfg.model)?;
    let input = resolve_input_data(&model, &cfg.input)?;
    let n_layers = model.config().n_layers;

    let decoded = model.greedy_decode(&input, cfg.answer_tokens)?;
    let suffix = &decoded[..cfg.answer_tokens - 1];
    let capture = model.forward_with_capture_suffix(&input, suffix, cfg.hook)?;
    let seq_len = capture.layout.total() + suffix.len();
    let query_rows = QueryPolicy::AnswerSpan { n_answers: cfg.answer_tokens }
        .resolve(&capture.layout, seq_len)?;
    let profile = influence_rates(&capture.record, &capture.layout, &query_rows)?;

    std::fs::create_dir_all(&cfg.out_dir)?;
    echo_config(&cfg.out_dir, cfg)?;
    let profile_files =
        write_profile_report(cfg.out_dir.join("profile"), &profile, cfg.share_threshold)?;

    let cam_dir = cfg.out_dir.join("cam");
    std::fs::create_dir_all(&cam_dir)?;
    let cam_cfg = CamConfig {
        layer: 1,
        noise_s: cfg.noise_s,
        n_samples: cfg.samples,
        seed: cfg.cam_seed,
        hook: cfg.hook,
        answer_tokens: cfg.answer_tokens,
    };
    let maps = smooth_cam_all_layers(&model, &input, &cam_cfg)?;
    for (i, map) in maps.iter().enumerate() {
        let stem = format!("layer_{:02}", i + 1);
        overlay_export(map, &input.image, cam_dir.join(format!("{stem}.ppm")))?;
        std::fs::write(cam_dir.join(format!("{stem}.csv")), map_csv(map))?;
    }

    let summary = AnalyzeSummary {
        layout: capture.layout,
        decoded_tokens: decoded,
        flagged_layer: profile_files.flagged_layer,
        share_threshold: cfg.share_threshold,
        per_layer_shares: profile.per_layer.clone(),
        cam_layers: n_layers,
        hook: cfg.hook,
        noise_s: cfg.noise_s,
        samples: cfg.samples,
    };
    write_json(&cfg.out_dir.join("analyze_summary.json"), &summary)?;
    println!(
        "analyze: {} layers, flagged layer {}, outputs in {}",
        n_layers,
        summary
            .flagged_layer
            .map_or("none".to_string(), |l| l.to_string()),
        cfg.out_dir.display()
    );
    Ok(summary)
}

// ── truncate ────────────────────────────────────────────────────────────

#[derive(Serialize)]
pub struct TruncateComparison {
    pub layer: usize,
    pub keep: usize,
    pub prompt_tokens: usize,
    pub kept_tokens: usize,
    pub baseline_decoded: Vec<TokenId>,
    pub truncated_decoded: Vec<TokenId>,
    pub answers_match: bool,
    /// Max-abs difference of the next-token logits at the last position.
    pub last_logit_delta: f64,
    /// Truncated / baseline attention cost under the quadratic model.
    pub attention_cost_ratio: f64,
    /// `1 - attention_cost_ratio`.
    pub attention_savings: f64,
}

#[derive(Serialize)]
struct SweepRow {
    layer: usize,
    kept_tokens: usize,
    answers_match: bool,
    last_logit_delta: f64,
    attention_cost_ratio: f64,
}

fn compare_runs(
    model: &MiniLvlm,
    run: &TruncationRun,
    baseline_logits: &flowscope::Tensor,
    baseline_decoded: &[TokenId],
    layout_total: usize,
) -> Result<TruncateComparison> {
    let n_layers = model.config().n_layers;
    let base_last = baseline_logits.row(baseline_logits.shape()[0] - 1);
    let trunc_last = run.prompt_logits.row(run.prompt_logits.shape()[0] - 1);
    let delta = base_last
        .iter()
        .zip(trunc_last)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let kept = run.plan.rebuilt_set.len();
    let ratio = attention_cost_ratio(layout_total, kept, run.plan.layer, n_layers);
    Ok(TruncateComparison {
        layer: run.plan.layer,
        keep: run.plan.k,
        prompt_tokens: layout_total,
        kept_tokens: kept,
        baseline_decoded: baseline_decoded.to_vec(),
        truncated_decoded: run.decoded.clone(),
        answers_match: baseline_decoded == run.decoded,
        last_logit_delta: delta,
        attention_cost_ratio: ratio,
        attention_savings: 1.0 - ratio,
    })
}

pub fn run_truncate(cfg: &TruncateConfig) -> Result<TruncateComparison> {
    let model = load_model(&cfg.model)?;
    let n_layers = model.config().n_layers;
    let n_img = model.config().n_img();
    if cfg.layer == 0 || cfg.layer > n_layers {
        return Err(usage(format!("--layer {} out of 1..={n_layers}", cfg.layer)));
    }
    if cfg.keep > n_img {
        return Err(usage(format!("--keep {} exceeds {n_img} image tokens", cfg.keep)));
    }
    let input = resolve_input_data(&model, &cfg.input)?;
    let (_, layout) = model.embed_multimodal(&input)?;
    let baseline_logits = model.logits(&input)?;
    let baseline_decoded = model.greedy_decode(&input, cfg.max_new.max(1))?;
    let baseline_decoded = baseline_decoded[..cfg.max_new].to_vec();

    let request = TruncationRequest { layer: cfg.layer, k: cfg.keep, score_mode: cfg.score_mode };
    let run = run_truncated_styled(&model, &input, &request, cfg.max_new, cfg.style)?;
    let comparison =
        compare_runs(&model, &run, &baseline_logits, &baseline_decoded, layout.total())?;

    let dir = cfg.out_dir.join("truncation");
    std::fs::create_dir_all(&dir)?;
    echo_config(&cfg.out_dir, cfg)?;
    write_json(&dir.join("plan.json"), &run.plan)?;
    write_json(&dir.join("comparison.json"), &comparison)?;

    if cfg.sweep {
        let mut rows = Vec::with_capacity(n_layers);
        for layer in 1..=n_layers {
            let req = TruncationRequest { layer, k: cfg.keep, score_mode: cfg.score_mode };
            let swept = run_truncated_styled(&model, &input, &req, cfg.max_new, cfg.style)?;
            let cmp =
                compare_runs(&model, &swept, &baseline_logits, &baseline_decoded, layout.total())?;
            rows.push(SweepRow {
                layer,
                kept_tokens: cmp.kept_tokens,
                answers_match: cmp.answers_match,
                last_logit_delta: cmp.last_logit_delta,
                attention_cost_ratio: cmp.attention_cost_ratio,
            });
        }
        let mut csv =
            String::from("layer,kept_tokens,answers_match,last_logit_delta,attention_cost_ratio\n");
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                r.layer, r.kept_tokens, r.answers_match, r.last_logit_delta, r.attention_cost_ratio
            ));
        }
        std::fs::write(dir.join("sweep.csv"), csv)?;
    }

    println!(
        "truncate: layer {} keep {} -> kept {} of {} tokens, answers match: {}, savings {:.1}%",
        cfg.layer,
        cfg.keep,
        comparison.kept_tokens,
        comparison.prompt_tokens,
        comparison.answers_match,
        100.0 * comparison.attention_savings
    );
    Ok(comparison)
}

// ── cliff ───────────────────────────────────────────────────────────────

#[derive(Serialize)]
pub struct CliffSummary {
    pub reports: Vec<(String, CliffReport)>,
}

pub fn run_cliff(cfg: &CliffConfig) -> Result<CliffSummary> {
    let mut model = load_model(&cfg.model)?;
    if let Some(layer) = cfg.plant {
        model
            .set_image_block_from(Some(layer))
            .map_err(|e| usage(e.to_string()))?;
    }
    let opts = SweepOptions {
        epsilon: cfg.epsilon,
        metric: cfg.metric,
        score_mode: Default::default(),
        image_share_threshold: cfg.share_threshold,
    };

    let dir = cfg.out_dir.join("cliff");
    std::fs::create_dir_all(&dir)?;
    echo_config(&cfg.out_dir, cfg)?;

    let mut reports: Vec<(String, CliffReport)> = Vec::new();
    for &kind in &cfg.tasks {
        let task = flowscope::tasks::SyntheticTask {
            kind,
            classes: cfg.classes,
            seed: cfg.task_seed,
            count: cfg.count,
        };
        let instances = task
            .generate(model.config())
            .map_err(|e| usage(e.to_string()))?;
        let report = sweep_cliff(&model, &instances, &opts)?;
        let name = kind_name(kind);
        write_json(&dir.join(format!("{name}_report.json")), &report)?;
        std::fs::write(dir.join(format!("{name}_report.txt")), render_cliff_report(&report))?;
        println!(
            "cliff[{name}]: detected {} attention_flag {}",
            report
                .detected_cliff
                .map_or("none".to_string(), |l| l.to_string()),
            report
                .attention_flag_layer
                .map_or("none".to_string(), |l| l.to_string())
        );
        reports.push((name.to_string(), report));
    }

    if reports.len() >= 2 {
        let taxonomy = taxonomy_report(&reports)?;
        write_json(&dir.join("taxonomy.json"), &taxonomy)?;
        std::fs::write(dir.join("taxonomy.txt"), render_taxonomy(&taxonomy))?;
    }
    Ok(CliffSummary { reports })
}
