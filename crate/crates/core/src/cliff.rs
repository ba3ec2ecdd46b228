//! Cliff-layer detection: sweep full image-token truncation across layers
//! and report the earliest layer whose task metric matches the untruncated
//! baseline, side by side with the attention-share flag layer.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::model::{CaptureRun, MiniLvlm, ModelConfig};
use crate::segments::{flag_layer, influence_rates, InfluenceProfile, SegmentShares};
use crate::segments::DEFAULT_IMAGE_SHARE_THRESHOLD;
use crate::tasks::TaskInstance;
use crate::tensor::argmax;
use crate::truncation::{plan_truncation, ScoreMode, TruncationRequest};

/// Builds a model whose attention to image columns is exactly zero from the
/// 1-based `cutoff` layer onward, so image information provably stops
/// flowing there. `cutoff = n_layers + 1` leaves the model unmodified.
/// Ground truth for cliff detection.
pub fn plant_cliff_model(config: ModelConfig, cutoff: usize) -> Result<MiniLvlm> {
    let mut model = MiniLvlm::new(config)?;
    model.set_image_block_from(Some(cutoff))?;
    Ok(model)
}

/// What the sweep measures per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Fraction of instances whose single-token decode matches the planted
    /// answer. Baseline is the untruncated accuracy.
    Accuracy,
    /// Mean over instances of the max-abs difference between truncated and
    /// baseline last-row logits. Baseline is exactly 0, so `epsilon = 0`
    /// detects bit-exact agreement.
    LogitDeviation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub epsilon: f64,
    pub metric: MetricKind,
    pub score_mode: ScoreMode,
    /// Threshold for the attention-share flag layer reported alongside.
    pub image_share_threshold: f64,
}

impl SweepOptions {
    /// Exact-agreement sweep for planted models.
    pub fn exact() -> Self {
        Self {
            epsilon: 0.0,
            metric: MetricKind::LogitDeviation,
            score_mode: ScoreMode::LastImage,
            image_share_threshold: DEFAULT_IMAGE_SHARE_THRESHOLD,
        }
    }

    /// Accuracy sweep for trained toys; `epsilon` is in accuracy points
    /// (0.01 = one point).
    pub fn accuracy(epsilon: f64) -> Self {
        Self {
            epsilon,
            metric: MetricKind::Accuracy,
            score_mode: ScoreMode::LastImage,
            image_share_threshold: DEFAULT_IMAGE_SHARE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSweepPoint {
    pub layer: usize,
    pub metric: f64,
    /// `|metric - baseline|`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CliffReport {
    pub metric: MetricKind,
    pub epsilon: f64,
    pub baseline_metric: f64,
    pub per_layer: Vec<LayerSweepPoint>,
    /// Smallest 1-based layer whose metric is within `epsilon` of baseline.
    pub detected_cliff: Option<usize>,
    /// First layer whose mean image attention share fell below the
    /// threshold, from the segment accounting view.
    pub attention_flag_layer: Option<usize>,
}

/// Evaluates the baseline metric, then the metric under `k = 0` truncation
/// at every layer, and reports the earliest layer within `epsilon` of
/// baseline.
pub fn sweep_cliff(
    model: &MiniLvlm,
    instances: &[TaskInstance],
    opts: &SweepOptions,
) -> Result<CliffReport> {
    if instances.is_empty() {
        return Err(contract("sweep over an empty task"));
    }
    if !(opts.epsilon >= 0.0) {
        return Err(contract("epsilon must be nonnegative"));
    }
    let n_layers = model.config().n_layers;
    let mut per_layer_acc = vec![0.0f64; n_layers];
    let mut baseline_acc = 0.0f64;
    let mut share_acc = vec![SegmentShares { sys: 0.0, img: 0.0, user: 0.0 }; n_layers];

    for inst in instances {
        let cap: CaptureRun = model.forward_with_capture(&inst.input, Default::default())?;
        let layout = cap.layout;
        let last = layout
            .last_prompt_index()
            .ok_or_else(|| contract("empty prompt"))?;
        let baseline_row = cap.logits.row(cap.logits.shape()[0] - 1);

        match opts.metric {
            MetricKind::Accuracy => {
                if argmax(baseline_row) == inst.answer {
                    baseline_acc += 1.0;
                }
            }
            MetricKind::LogitDeviation => {}
        }

        let profile = influence_rates(&cap.record, &layout, &[last])?;
        for (acc, s) in share_acc.iter_mut().zip(&profile.per_layer) {
            acc.sys += s.sys;
            acc.img += s.img;
            acc.user += s.user;
        }

        for layer in 1..=n_layers {
            let plan = plan_truncation(
                &cap.record,
                &layout,
                &TruncationRequest { layer, k: 0, score_mode: opts.score_mode },
            )?;
            let hidden = &cap.record.layer(layer)?.layer_input;
            let truncated =
                model.forward_from_layer(hidden, &plan.rebuilt_set, layer, &layout)?;
            let trunc_row = truncated.row(truncated.shape()[0] - 1);
            per_layer_acc[layer - 1] += match opts.metric {
                MetricKind::Accuracy => {
                    if argmax(trunc_row) == inst.answer {
                        1.0
                    } else {
                        0.0
                    }
                }
                MetricKind::LogitDeviation => trunc_row
                    .iter()
                    .zip(baseline_row)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max),
            };
        }
    }

    let n = instances.len() as f64;
    let baseline_metric = match opts.metric {
        MetricKind::Accuracy => baseline_acc / n,
        MetricKind::LogitDeviation => 0.0,
    };
    let per_layer: Vec<LayerSweepPoint> = per_layer_acc
        .iter()
        .enumerate()
        .map(|(i, &acc)| {
            let metric = acc / n;
            LayerSweepPoint { layer: i + 1, metric, delta: (metric - baseline_metric).abs() }
        })
        .collect();
    let detected_cliff = per_layer
        .iter()
        .find(|p| p.delta <= opts.epsilon)
        .map(|p| p.layer);

    let mean_profile = InfluenceProfile {
        per_layer: share_acc
            .into_iter()
            .map(|s| SegmentShares { sys: s.sys / n, img: s.img / n, user: s.user / n })
            .collect(),
    };
    Ok(CliffReport {
        metric: opts.metric,
        epsilon: opts.epsilon,
        baseline_metric,
        per_layer,
        detected_cliff,
        attention_flag_layer: flag_layer(&mean_profile, opts.image_share_threshold),
    })
}

/// One record per layer plus a summary block.
pub fn render_cliff_report(report: &CliffReport) -> String {
    let metric_name = match report.metric {
        MetricKind::Accuracy => "accuracy",
        MetricKind::LogitDeviation => "logit_deviation",
    };
    let mut out = String::new();
    out.push_str(&format!(
        "metric={metric_name} epsilon={} baseline={}\n",
        report.epsilon, report.baseline_metric
    ));
    out.push_str("layer,metric,delta\n");
    for p in &report.per_layer {
        out.push_str(&format!("{},{},{}\n", p.layer, p.metric, p.delta));
    }
    out.push_str(&format!(
        "summary: detected_cliff={} attention_flag_layer={}\n",
        report
            .detected_cliff
            .map_or("none".to_string(), |l| l.to_string()),
        report
            .attention_flag_layer
            .map_or("none".to_string(), |l| l.to_string()),
    ));
    out
}

/// A measured sweep result for one named task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyRow {
    pub task: String,
    pub detected_cliff: Option<usize>,
    pub attention_flag_layer: Option<usize>,
    pub baseline_metric: f64,
}

/// A context row quoted from published truncation studies of large
/// pretrained checkpoints; never measured by this toolkit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceAnnotation {
    pub model: String,
    pub dataset: String,
    pub metric: String,
    pub baseline: Option<f64>,
    pub at_cliff: Option<f64>,
    pub cliff_layer: Option<usize>,
    pub note: Option<String>,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyReport {
    /// Measured rows, ordered by detected cliff layer (undetected last).
    pub rows: Vec<TaxonomyRow>,
    /// Published reference rows, labeled `source=paper`.
    pub references: Vec<ReferenceAnnotation>,
}

/// Published reference values quoted for context alongside measured sweeps.
pub fn published_references() -> Vec<ReferenceAnnotation> {
    let llava = "LLaVA-1.5-7B";
    let row = |dataset: &str,
               metric: &str,
               baseline: Option<f64>,
               at_cliff: Option<f64>,
               cliff_layer: Option<usize>,
               note: Option<&str>| ReferenceAnnotation {
        model: llava.to_string(),
        dataset: dataset.to_string(),
        metric: metric.to_string(),
        baseline,
        at_cliff,
        cliff_layer,
        note: note.map(str::to_string),
        source: "paper".to_string(),
    };
    vec![
        row("ScienceQA", "cliff_layer", None, None, Some(12), None),
        row("TextVQA", "cliff_layer", None, None, Some(18), None),
        row(
            "POPE",
            "cliff_layer",
            None,
            None,
            Some(24),
            Some("also reported as layer 22 in the sweep discussion"),
        ),
        row("CHAIR", "cliff_layer", None, None, Some(30), Some("approximate")),
        row("POPE", "Acc", Some(84.70), Some(85.51), None, None),
        row("POPE", "F1", Some(85.50), Some(85.99), None, None),
        row("ScienceQA", "Acc", Some(65.00), Some(66.48), None, None),
        row("TextVQA", "Acc", Some(59.34), Some(60.02), None, None),
        row("CHAIR", "CHAIR_s", Some(13.80), Some(13.80), None, None),
        row(
            "ScienceQA",
            "Acc",
            None,
            Some(47.5),
            Some(1),
            Some("all image tokens truncated at the first layer; text-only answering"),
        ),
    ]
}

/// Comparative table over several task sweeps, ordered by detected cliff
/// layer, with published reference annotations attached.
pub fn taxonomy_report(entries: &[(String, CliffReport)]) -> Result<TaxonomyReport> {
    if entries.len() < 2 {
        return Err(contract("taxonomy comparison needs at least two tasks"));
    }
    let mut rows: Vec<TaxonomyRow> = entries
        .iter()
        .map(|(task, report)| TaxonomyRow {
            task: task.clone(),
            detected_cliff: report.detected_cliff,
            attention_flag_layer: report.attention_flag_layer,
            baseline_metric: report.baseline_metric,
        })
        .collect();
    rows.sort_by_key(|r| (r.detected_cliff.is_none(), r.detected_cliff, r.task.clone()));
    Ok(TaxonomyReport { rows, references: published_references() })
}

pub fn render_taxonomy(report: &TaxonomyReport) -> String {
    let mut out = String::from("task,detected_cliff,attention_flag_layer,baseline_metric\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.task,
            r.detected_cliff.map_or("none".to_string(), |l| l.to_string()),
            r.attention_flag_layer
                .map_or("none".to_string(), |l| l.to_string()),
            r.baseline_metric
        ));
    }
    out.push_str("\nreference annotations:\n");
    out.push_str("model,dataset,metric,baseline,at_cliff,cliff_layer,source,note\n");
    for a in &report.references {
        let opt_f = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let opt_u = |v: Option<usize>| v.map_or(String::new(), |x| x.to_string());
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            a.model,
            a.dataset,
            a.metric,
            opt_f(a.baseline),
            opt_f(a.at_cliff),
            opt_u(a.cliff_layer),
            a.source,
            a.note.clone().unwrap_or_default()
        ));
    }
    out
}
