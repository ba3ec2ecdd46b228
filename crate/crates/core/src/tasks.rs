//! Synthetic single-token-answer tasks over planted images. Each instance
//! carries its ground-truth answer token, so scoring is exact string-free
//! comparison of one decoded token.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::model::{MiniLvlm, ModelConfig, MultimodalInput, PatchGrid, TokenId};

/// First vocabulary id used for answer classes; ids below are reserved for
/// prompt scaffolding.
pub const FIRST_CLASS_TOKEN: TokenId = 8;

const SYS_TOKENS: [TokenId; 2] = [1, 2];
const QUESTION_OPEN: TokenId = 3;
const QUESTION_CLOSE: TokenId = 4;

/// Feature magnitude of planted patch markers, well above the noise floor.
const MARK: f64 = 2.5;
const PATCH_NOISE_STD: f64 = 0.1;

pub fn class_token(class: usize) -> TokenId {
    FIRST_CLASS_TOKEN + class
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Read the class channel of the single marked patch.
    PatchLookup,
    /// Combine the class channels of two marked patches (sum mod classes).
    MultiHop,
    /// Name the strict-majority patch class over the whole grid.
    GlobalDescribe,
    /// Echo a user token; the image is pure noise and carries no signal.
    TextOnly,
}

/// A seeded generator for a batch of task instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub classes: usize,
    pub seed: u64,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct TaskInstance {
    pub input: MultimodalInput,
    pub answer: TokenId,
}

impl SyntheticTask {
    fn required_channels(&self) -> usize {
        match self.kind {
            TaskKind::PatchLookup | TaskKind::GlobalDescribe => self.classes,
            TaskKind::MultiHop => self.classes + 2,
            TaskKind::TextOnly => 1,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.classes < 2 {
            return Err(contract("task needs at least 2 classes"));
        }
        if self.count == 0 {
            return Err(contract("task needs at least 1 instance"));
        }
        if config.vocab_size < FIRST_CLASS_TOKEN + self.classes {
            return Err(contract(format!(
                "vocab_size {} too small for {} classes (needs {})",
                config.vocab_size,
                self.classes,
                FIRST_CLASS_TOKEN + self.classes
            )));
        }
        if config.patch_channels < self.required_channels() {
            return Err(contract(format!(
                "patch_channels {} too small for {:?} with {} classes (needs {})",
                config.patch_channels,
                self.kind,
                self.classes,
                self.required_channels()
            )));
        }
        if self.kind == TaskKind::MultiHop && config.n_img() < 2 {
            return Err(contract("multi_hop needs at least 2 patches"));
        }
        Ok(())
    }

    /// Generates the instance batch. Classes rotate round-robin, so answer
    /// counts are balanced whenever `count % classes == 0`. Instance `i` is
    /// reproducible in isolation from `(seed, i)`.
    pub fn generate(&self, config: &ModelConfig) -> Result<Vec<TaskInstance>> {
        self.validate(config)?;
        (0..self.count).map(|i| self.instance(config, i)).collect()
    }

    pub fn instance(&self, config: &ModelConfig, index: usize) -> Result<TaskInstance> {
        self.validate(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64 + 1);
        let class = index % self.classes;
        let n_patches = config.n_img();
        let channels = config.patch_channels;

        let mut image = PatchGrid::zeros(config.patch_rows, config.patch_cols, channels);
        let image_noise_std = if self.kind == TaskKind::TextOnly { 1.0 } else { PATCH_NOISE_STD };
        let base_noise = Normal::new(0.0, image_noise_std).expect("valid std");
        for v in image.data.iter_mut() {
            *v = base_noise.sample(&mut rng);
        }

        let mut user_tokens = vec![QUESTION_OPEN, QUESTION_CLOSE];
        let answer;
        match self.kind {
            TaskKind::PatchLookup => {
                let p = rng.gen_range(0..n_patches);
                let (r, c) = (p / config.patch_cols, p % config.patch_cols);
                image.set(r, c, class, image.get(r, c, class) + MARK);
                answer = class_token(class);
            }
            TaskKind::MultiHop => {
                let p1 = rng.gen_range(0..n_patches);
                let mut p2 = rng.gen_range(0..n_patches - 1);
                if p2 >= p1 {
                    p2 += 1;
                }
                let c1 = rng.gen_range(0..self.classes);
                let c2 = (class + self.classes - c1) % self.classes;
                let marker_a = self.classes;
                let marker_b = self.classes + 1;
                for (p, marker, ch) in [(p1, marker_a, c1), (p2, marker_b, c2)] {
                    let (r, c) = (p / config.patch_cols, p % config.patch_cols);
                    image.set(r, c, marker, image.get(r, c, marker) + MARK);
                    image.set(r, c, ch, image.get(r, c, ch) + MARK);
                }
                answer = class_token(class);
            }
            TaskKind::GlobalDescribe => {
                // Strict majority: any other class has at most
                // n_patches - majority < majority patches.
                let majority = n_patches / 2 + 1;
                let mut order: Vec<usize> = (0..n_patches).collect();
                for i in (1..order.len()).rev() {
                    let j = rng.gen_range(0..=i);
                    order.swap(i, j);
                }
                for (rank, &p) in order.iter().enumerate() {
                    let patch_class = if rank < majority {
                        class
                    } else {
                        let mut other = rng.gen_range(0..self.classes - 1);
                        if other >= class {
                            other += 1;
                        }
                        other
                    };
                    let (r, c) = (p / config.patch_cols, p % config.patch_cols);
                    image.set(r, c, patch_class, image.get(r, c, patch_class) + MARK);
                }
                answer = class_token(class);
            }
            TaskKind::TextOnly => {
                answer = class_token(class);
                user_tokens = vec![QUESTION_OPEN, answer, QUESTION_CLOSE];
            }
        }

        Ok(TaskInstance {
            input: MultimodalInput {
                system_tokens: SYS_TOKENS.to_vec(),
                image,
                user_tokens,
            },
            answer,
        })
    }
}

/// Fraction of instances whose single-token greedy decode matches the
/// planted answer.
pub fn accuracy(model: &MiniLvlm, instances: &[TaskInstance]) -> Result<f64> {
    if instances.is_empty() {
        return Err(contract("accuracy over an empty instance set"));
    }
    let mut correct = 0usize;
    for inst in instances {
        if model.greedy_decode(&inst.input, 1)?[0] == inst.answer {
            correct += 1;
        }
    }
    Ok(correct as f64 / instances.len() as f64)
}
