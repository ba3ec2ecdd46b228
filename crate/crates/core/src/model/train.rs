//! Plain SGD training on single-token-answer toy tasks. One instance per
//! step, cross-entropy on the logits of the last prompt position.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ForwardOpts, MiniLvlm};
use crate::error::{contract, Result};
use crate::tape::Tape;
use crate::tasks::TaskInstance;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Seed for the per-epoch instance order shuffle.
    pub shuffle_seed: u64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    /// Mean loss over the last epoch.
    pub final_loss: f64,
    /// Greedy-decode accuracy over the training instances after training.
    pub train_accuracy: f64,
}

pub fn train_toy(
    model: &mut MiniLvlm,
    instances: &[TaskInstance],
    opts: &TrainOptions,
) -> Result<TrainReport> {
    if instances.is_empty() {
        return Err(contract("training requires at least one instance"));
    }
    if opts.epochs == 0 {
        return Err(contract("epochs must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.shuffle_seed);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut steps = 0;
    let mut last_epoch_loss = 0.0;

    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &idx in &order {
            let inst = &instances[idx];
            epoch_loss += sgd_step(model, inst, opts.learning_rate)?;
            steps += 1;
        }
        last_epoch_loss = epoch_loss / instances.len() as f64;
    }

    let mut correct = 0usize;
    for inst in instances {
        let decoded = model.greedy_decode(&inst.input, 1)?;
        if decoded[0] == inst.answer {
            correct += 1;
        }
    }
    Ok(TrainReport {
        steps,
        final_loss: last_epoch_loss,
        train_accuracy: correct as f64 / instances.len() as f64,
    })
}

fn sgd_step(model: &mut MiniLvlm, inst: &TaskInstance, lr: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let w = model.weight_vars(&mut tape, true);
    let (x0, layout) =
        model.embed_with_weights(&mut tape, &w, &inst.input, &[], None, false)?;
    let img_cols = layout.image_flags(layout.total());
    let run = model.forward_with_weights(&mut tape, &w, x0, &img_cols, &ForwardOpts::default())?;
    let last = layout
        .last_prompt_index()
        .ok_or_else(|| contract("empty prompt"))?;
    let answer_row = tape.gather_rows(run.logits, &[last])?;
    let loss = tape.cross_entropy_mean(answer_row, &[inst.answer])?;
    let loss_value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;

    let ordered = w.ordered();
    let params = model.weights_mut().param_entries_mut();
    debug_assert_eq!(ordered.len(), params.len());
    for ((_, tensor), var) in params.into_iter().zip(ordered) {
        if let Some(g) = grads.get(var) {
            for (p, gv) in tensor.data_mut().iter_mut().zip(g.data()) {
                *p -= lr * gv;
            }
        }
    }
    Ok(loss_value)
}
