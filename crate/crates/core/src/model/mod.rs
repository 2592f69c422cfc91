//! A toy next-scale transformer: per-scale parallel token prediction
//! conditioned on all previous scales via block-causal attention, with an
//! explicit, inspectable KV cache.
//!
//! The class condition occupies one dedicated sequence position before the
//! first scale. Blocks are pre-norm with full attention inside a scale and a
//! GELU MLP at expansion 4; position embeddings are learned and absolute.

mod cache;
mod forward;

pub use cache::KVCacheState;
pub use forward::{
    build_scale_input, cond_cache, forward_scale, forward_teacher_forced, ingest_prefix,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::schedule::ScaleSchedule;
use crate::tensor::Mat;

/// Initialization std for random checkpoints.
pub const INIT_STD: f64 = 0.02;
/// MLP expansion factor.
pub const MLP_EXPANSION: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub vocab: usize,
    pub cond_classes: usize,
    /// Channel count of the quantizer feature space this model re-embeds.
    pub in_channels: usize,
    /// The scale schedule the model is sized for (position table, etc.).
    pub patch_nums: Vec<usize>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0
            || self.width == 0
            || self.heads == 0
            || self.vocab == 0
            || self.cond_classes == 0
            || self.in_channels == 0
        {
            return Err(Error::Contract("model dimensions must be positive".into()));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Contract(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        ScaleSchedule::new(&self.patch_nums)?;
        Ok(())
    }

    pub fn schedule(&self) -> ScaleSchedule {
        ScaleSchedule::new(&self.patch_nums).expect("validated schedule")
    }

    pub fn max_scales(&self) -> usize {
        self.patch_nums.len()
    }

    pub fn total_tokens(&self) -> usize {
        self.patch_nums.iter().map(|p| p * p).sum()
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Class-embedding row used as the unconditional input for guidance.
    pub fn null_class(&self) -> usize {
        self.cond_classes
    }

    pub fn param_count(&self) -> u64 {
        tensor_specs(self)
            .iter()
            .map(|t| t.shape.iter().product::<usize>() as u64)
            .sum()
    }

    /// Dimensions matching the 2B-parameter 30-layer preset.
    pub fn preset_d30() -> Self {
        Self {
            depth: 30,
            width: 1920,
            heads: 30,
            vocab: 4096,
            cond_classes: 1000,
            in_channels: 32,
            patch_nums: crate::schedule::STANDARD_PATCH_NUMS.to_vec(),
        }
    }

    /// Dimensions matching the 0.3B-parameter 16-layer preset.
    pub fn preset_d16() -> Self {
        Self {
            depth: 16,
            width: 1024,
            heads: 16,
            vocab: 4096,
            cond_classes: 1000,
            in_channels: 32,
            patch_nums: crate::schedule::STANDARD_PATCH_NUMS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    Gaussian,
    Zero,
    One,
}

pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: InitKind,
}

/// The full named-tensor directory of a model, in a fixed order shared by
/// random initialization and checkpoint serialization.
pub fn tensor_specs(cfg: &ModelConfig) -> Vec<TensorSpec> {
    use InitKind::*;
    let w = cfg.width;
    let hidden = MLP_EXPANSION * w;
    let k = cfg.max_scales();
    let total = cfg.total_tokens();
    let mut specs = vec![
        TensorSpec {
            name: "embed.input_proj".into(),
            shape: vec![cfg.in_channels, w],
            init: Gaussian,
        },
        TensorSpec {
            name: "embed.scale".into(),
            shape: vec![k, w],
            init: Gaussian,
        },
        TensorSpec {
            name: "embed.pos".into(),
            shape: vec![1 + total, w],
            init: Gaussian,
        },
        TensorSpec {
            name: "embed.class".into(),
            shape: vec![cfg.cond_classes + 1, w],
            init: Gaussian,
        },
    ];
    for l in 0..cfg.depth {
        let p = |suffix: &str| format!("layers.{l}.{suffix}");
        specs.extend([
            TensorSpec {
                name: p("ln1.gain"),
                shape: vec![w],
                init: One,
            },
            TensorSpec {
                name: p("ln1.bias"),
                shape: vec![w],
                init: Zero,
            },
            TensorSpec {
                name: p("attn.wq"),
                shape: vec![w, w],
                init: Gaussian,
            },
            TensorSpec {
                name: p("attn.wk"),
                shape: vec![w, w],
                init: Gaussian,
            },
            TensorSpec {
                name: p("attn.wv"),
                shape: vec![w, w],
                init: Gaussian,
            },
            TensorSpec {
                name: p("attn.wo"),
                shape: vec![w, w],
                init: Gaussian,
            },
            TensorSpec {
                name: p("ln2.gain"),
                shape: vec![w],
                init: One,
            },
            TensorSpec {
                name: p("ln2.bias"),
                shape: vec![w],
                init: Zero,
            },
            TensorSpec {
                name: p("mlp.w1"),
                shape: vec![w, hidden],
                init: Gaussian,
            },
            TensorSpec {
                name: p("mlp.b1"),
                shape: vec![hidden],
                init: Zero,
            },
            TensorSpec {
                name: p("mlp.w2"),
                shape: vec![hidden, w],
                init: Gaussian,
            },
            TensorSpec {
                name: p("mlp.b2"),
                shape: vec![w],
                init: Zero,
            },
        ]);
    }
    specs.extend([
        TensorSpec {
            name: "final_norm.gain".into(),
            shape: vec![w],
            init: One,
        },
        TensorSpec {
            name: "final_norm.bias".into(),
            shape: vec![w],
            init: Zero,
        },
        // the output head starts at zero so a fresh model scores all tokens
        // uniformly
        TensorSpec {
            name: "head.out".into(),
            shape: vec![w, cfg.vocab],
            init: Zero,
        },
    ]);
    specs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub input_proj: Mat,
    pub scale_embed: Mat,
    pub pos_embed: Mat,
    pub class_embed: Mat,
    pub layers: Vec<LayerWeights>,
    pub final_norm_gain: Vec<f64>,
    pub final_norm_bias: Vec<f64>,
    pub head: Mat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

impl ModelBundle {
    /// Reproducible random weights: Gaussian with std 0.02, norm gains at
    /// one, biases and the output head at zero.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = HashMap::new();
        for spec in tensor_specs(&config) {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                InitKind::Gaussian => (0..n)
                    .map(|_| {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        g * INIT_STD
                    })
                    .collect(),
                InitKind::Zero => vec![0.0; n],
                InitKind::One => vec![1.0; n],
            };
            tensors.insert(spec.name, data);
        }
        Self::from_tensors(config, tensors)
    }

    /// Like [`ModelBundle::random`] but with a Gaussian output head as well,
    /// so logits actually vary; the initializer of choice for randomized
    /// equivalence oracles.
    pub fn random_dense(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::random(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        for v in m.weights.head.data_mut() {
            *v = {
                let g: f64 = StandardNormal.sample(&mut rng);
                g * INIT_STD
            };
        }
        Ok(m)
    }

    /// All-zero weights; logits are identically zero.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors = tensor_specs(&config)
            .into_iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                (s.name, vec![0.0; n])
            })
            .collect();
        Self::from_tensors(config, tensors)
    }

    /// Assembles a bundle from a name -> data map (checkpoint loading).
    pub fn from_tensors(config: ModelConfig, mut map: HashMap<String, Vec<f64>>) -> Result<Self> {
        config.validate()?;
        let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let data = map
                .remove(name)
                .ok_or_else(|| Error::Contract(format!("missing tensor {name}")))?;
            let n: usize = shape.iter().product();
            if data.len() != n {
                return Err(Error::Shape(format!(
                    "tensor {name}: expected {n} entries, got {}",
                    data.len()
                )));
            }
            if !data.iter().all(|v| v.is_finite()) {
                return Err(Error::Contract(format!("tensor {name} has non-finite entries")));
            }
            Ok(data)
        };
        let w = config.width;
        let hidden = MLP_EXPANSION * w;
        let mat = |data: Vec<f64>, r: usize, c: usize| Mat::from_vec(r, c, data);
        let input_proj = mat(
            take("embed.input_proj", &[config.in_channels, w])?,
            config.in_channels,
            w,
        )?;
        let scale_embed = mat(
            take("embed.scale", &[config.max_scales(), w])?,
            config.max_scales(),
            w,
        )?;
        let pos_rows = 1 + config.total_tokens();
        let pos_embed = mat(take("embed.pos", &[pos_rows, w])?, pos_rows, w)?;
        let class_rows = config.cond_classes + 1;
        let class_embed = mat(take("embed.class", &[class_rows, w])?, class_rows, w)?;
        let mut layers = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let p = |suffix: &str| format!("layers.{l}.{suffix}");
            layers.push(LayerWeights {
                ln1_gain: take(&p("ln1.gain"), &[w])?,
                ln1_bias: take(&p("ln1.bias"), &[w])?,
                wq: mat(take(&p("attn.wq"), &[w, w])?, w, w)?,
                wk: mat(take(&p("attn.wk"), &[w, w])?, w, w)?,
                wv: mat(take(&p("attn.wv"), &[w, w])?, w, w)?,
                wo: mat(take(&p("attn.wo"), &[w, w])?, w, w)?,
                ln2_gain: take(&p("ln2.gain"), &[w])?,
                ln2_bias: take(&p("ln2.bias"), &[w])?,
                w1: mat(take(&p("mlp.w1"), &[w, hidden])?, w, hidden)?,
                b1: take(&p("mlp.b1"), &[hidden])?,
                w2: mat(take(&p("mlp.w2"), &[hidden, w])?, hidden, w)?,
                b2: take(&p("mlp.b2"), &[w])?,
            });
        }
        let final_norm_gain = take("final_norm.gain", &[w])?;
        let final_norm_bias = take("final_norm.bias", &[w])?;
        let head = mat(take("head.out", &[w, config.vocab])?, w, config.vocab)?;
        if let Some(name) = map.keys().next() {
            return Err(Error::Contract(format!("unexpected tensor {name}")));
        }
        Ok(Self {
            config,
            weights: ModelWeights {
                input_proj,
                scale_embed,
                pos_embed,
                class_embed,
                layers,
                final_norm_gain,
                final_norm_bias,
                head,
            },
        })
    }

    /// Named views over every tensor, in the order of [`tensor_specs`].
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let w = &self.weights;
        let mut out: Vec<(String, Vec<usize>, &[f64])> = vec![
            (
                "embed.input_proj".into(),
                vec![self.config.in_channels, self.config.width],
                w.input_proj.data(),
            ),
            (
                "embed.scale".into(),
                vec![self.config.max_scales(), self.config.width],
                w.scale_embed.data(),
            ),
            (
                "embed.pos".into(),
                vec![1 + self.config.total_tokens(), self.config.width],
                w.pos_embed.data(),
            ),
            (
                "embed.class".into(),
                vec![self.config.cond_classes + 1, self.config.width],
                w.class_embed.data(),
            ),
        ];
        for (l, layer) in w.layers.iter().enumerate() {
            let p = |suffix: &str| format!("layers.{l}.{suffix}");
            let width = self.config.width;
            let hidden = MLP_EXPANSION * width;
            out.extend([
                (p("ln1.gain"), vec![width], layer.ln1_gain.as_slice()),
                (p("ln1.bias"), vec![width], layer.ln1_bias.as_slice()),
                (p("attn.wq"), vec![width, width], layer.wq.data()),
                (p("attn.wk"), vec![width, width], layer.wk.data()),
                (p("attn.wv"), vec![width, width], layer.wv.data()),
                (p("attn.wo"), vec![width, width], layer.wo.data()),
                (p("ln2.gain"), vec![width], layer.ln2_gain.as_slice()),
                (p("ln2.bias"), vec![width], layer.ln2_bias.as_slice()),
                (p("mlp.w1"), vec![width, hidden], layer.w1.data()),
                (p("mlp.b1"), vec![hidden], layer.b1.as_slice()),
                (p("mlp.w2"), vec![hidden, width], layer.w2.data()),
                (p("mlp.b2"), vec![width], layer.b2.as_slice()),
            ]);
        }
        out.extend([
            (
                "final_norm.gain".into(),
                vec![self.config.width],
                w.final_norm_gain.as_slice(),
            ),
            (
                "final_norm.bias".into(),
                vec![self.config.width],
                w.final_norm_bias.as_slice(),
            ),
            (
                "head.out".into(),
                vec![self.config.width, self.config.vocab],
                w.head.data(),
            ),
        ]);
        out
    }
}

/// Releases a cache's buffers, returning the exact byte count freed.
/// Idempotent: a second release returns 0.
pub fn release_cache(cache: &mut KVCacheState) -> u64 {
    cache.release()
}
