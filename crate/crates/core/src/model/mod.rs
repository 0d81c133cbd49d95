//! Toy transformer encoder–decoder: a context encoder, one weight-shared
//! knowledge encoder applied per relation, and a decoder whose knowledge
//! cross-attention feeds a refine gate instead of a residual addition.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{
    decode_step_logits, encode_context_values, encode_knowledge_values, generate, joint_loss,
    nll_loss, refine_gate_values, token_nlls, ExampleForward, ForwardOptions, GateMode,
    KnowledgePath,
};

pub(crate) use forward::{forward_example as forward_graph, Binding};

pub(crate) fn binding(params: &ModelParams) -> Binding {
    Binding::new(params)
}

pub(crate) fn bound_node(bind: &Binding, id: ParamId) -> Option<crate::autodiff::TensorId> {
    bind.node(id)
}

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::corpus::SPECIALS;
use crate::error::{contract_err, Result};

/// Which normalization the refine gate applies to the knowledge stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinerNorm {
    LayerNorm,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub num_emotions: usize,
    pub max_src: usize,
    pub max_tgt: usize,
    pub gamma: f64,
    pub refiner_norm: RefinerNorm,
}

impl ModelConfig {
    pub fn toy(dim: usize, layers: usize, vocab_size: usize, num_emotions: usize) -> Self {
        ModelConfig {
            dim,
            layers,
            heads: 2,
            ffn_dim: 4 * dim,
            vocab_size,
            num_emotions,
            max_src: 64,
            max_tgt: 32,
            gamma: 1.0,
            refiner_norm: RefinerNorm::LayerNorm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.layers == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return Err(contract_err("model dimensions must be positive"));
        }
        if self.dim % self.heads != 0 {
            return Err(contract_err(format!(
                "heads {} must divide dim {}",
                self.heads, self.dim
            )));
        }
        if self.vocab_size < SPECIALS.len() {
            return Err(contract_err(format!(
                "vocabulary of {} lacks room for the {} special tokens",
                self.vocab_size,
                SPECIALS.len()
            )));
        }
        if self.num_emotions < 2 {
            return Err(contract_err("need at least two emotion categories"));
        }
        if self.gamma < 0.0 || !self.gamma.is_finite() {
            return Err(contract_err("gamma must be finite and non-negative"));
        }
        if self.max_src < 2 || self.max_tgt < 2 {
            return Err(contract_err("sequence caps must be at least 2"));
        }
        Ok(())
    }

    pub fn max_positions(&self) -> usize {
        self.max_src.max(self.max_tgt)
    }
}

/// Handle into the parameter store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Position in store order; `batch_gradients` returns gradients in the
    /// same order.
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named tensors in declaration order; the checkpoint writes them in this
/// exact order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub(crate) fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }

    pub(crate) fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.names.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttentionIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncoderLayerIds {
    pub attn: AttentionIds,
    pub ffn: FfnIds,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum RefinerNormIds {
    LayerNorm { gain: ParamId, bias: ParamId },
    Linear { weight: ParamId, bias: ParamId },
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecoderLayerIds {
    pub self_attn: AttentionIds,
    pub ctx_attn: AttentionIds,
    pub kno_wq: ParamId,
    pub kno_wk: ParamId,
    pub kno_wv: ParamId,
    pub kno_wo: ParamId,
    pub gate_w: ParamId,
    pub refiner_norm: RefinerNormIds,
    pub ffn: FfnIds,
}

/// The full parameter set plus the layout handles into the store.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub(crate) token_emb: ParamId,
    pub(crate) pos_emb: ParamId,
    pub(crate) ctx_layers: Vec<EncoderLayerIds>,
    pub(crate) kno_layers: Vec<EncoderLayerIds>,
    pub(crate) dec_layers: Vec<DecoderLayerIds>,
    pub(crate) theta: ParamId,
    pub(crate) out_proj: ParamId,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn gaussian_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| normal(rng) * std).collect();
    Tensor::new(shape, data).expect("finite init")
}

impl ModelParams {
    /// Seeded initialization: Xavier-style weights, unit layer-norm gains,
    /// zero biases, and a zero refine-gate weight (α starts at ½).
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let mut store = ParamStore::new();

        let token_emb = store.add(
            "token_emb",
            gaussian_tensor(&mut rng, vec![config.vocab_size, d], 0.1),
        );
        let pos_emb = store.add(
            "pos_emb",
            gaussian_tensor(&mut rng, vec![config.max_positions(), d], 0.1),
        );

        let attention = |store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str| {
            let std = 1.0 / (d as f64).sqrt();
            AttentionIds {
                wq: store.add(format!("{prefix}.wq"), gaussian_tensor(rng, vec![d, d], std)),
                wk: store.add(format!("{prefix}.wk"), gaussian_tensor(rng, vec![d, d], std)),
                wv: store.add(format!("{prefix}.wv"), gaussian_tensor(rng, vec![d, d], std)),
                wo: store.add(format!("{prefix}.wo"), gaussian_tensor(rng, vec![d, d], std)),
                ln_gain: store.add(
                    format!("{prefix}.ln_gain"),
                    Tensor::new(vec![d], vec![1.0; d]).expect("finite"),
                ),
                ln_bias: store.add(format!("{prefix}.ln_bias"), Tensor::zeros(vec![d])),
            }
        };
        let ffn = |store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str| {
            let f = config.ffn_dim;
            FfnIds {
                w1: store.add(
                    format!("{prefix}.w1"),
                    gaussian_tensor(rng, vec![d, f], 1.0 / (d as f64).sqrt()),
                ),
                b1: store.add(format!("{prefix}.b1"), Tensor::zeros(vec![1, f])),
                w2: store.add(
                    format!("{prefix}.w2"),
                    gaussian_tensor(rng, vec![f, d], 1.0 / (f as f64).sqrt()),
                ),
                b2: store.add(format!("{prefix}.b2"), Tensor::zeros(vec![1, d])),
                ln_gain: store.add(
                    format!("{prefix}.ln_gain"),
                    Tensor::new(vec![d], vec![1.0; d]).expect("finite"),
                ),
                ln_bias: store.add(format!("{prefix}.ln_bias"), Tensor::zeros(vec![d])),
            }
        };

        let encoder_stack = |store: &mut ParamStore, rng: &mut ChaCha8Rng, which: &str| {
            (0..config.layers)
                .map(|l| EncoderLayerIds {
                    attn: attention(store, rng, &format!("{which}.{l}.attn")),
                    ffn: ffn(store, rng, &format!("{which}.{l}.ffn")),
                })
                .collect::<Vec<_>>()
        };
        let ctx_layers = encoder_stack(&mut store, &mut rng, "ctx");
        let kno_layers = encoder_stack(&mut store, &mut rng, "kno");

        let dec_layers: Vec<DecoderLayerIds> = (0..config.layers)
            .map(|l| {
                let std = 1.0 / (d as f64).sqrt();
                let self_attn = attention(&mut store, &mut rng, &format!("dec.{l}.self"));
                let ctx_attn = attention(&mut store, &mut rng, &format!("dec.{l}.ctx"));
                let kno_wq = store.add(
                    format!("dec.{l}.kno.wq"),
                    gaussian_tensor(&mut rng, vec![d, d], std),
                );
                let kno_wk = store.add(
                    format!("dec.{l}.kno.wk"),
                    gaussian_tensor(&mut rng, vec![d, d], std),
                );
                let kno_wv = store.add(
                    format!("dec.{l}.kno.wv"),
                    gaussian_tensor(&mut rng, vec![d, d], std),
                );
                let kno_wo = store.add(
                    format!("dec.{l}.kno.wo"),
                    gaussian_tensor(&mut rng, vec![d, d], std),
                );
                let gate_w = store.add(format!("dec.{l}.gate_w"), Tensor::zeros(vec![2 * d, 1]));
                let refiner_norm = match config.refiner_norm {
                    RefinerNorm::LayerNorm => RefinerNormIds::LayerNorm {
                        gain: store.add(
                            format!("dec.{l}.refine.ln_gain"),
                            Tensor::new(vec![d], vec![1.0; d]).expect("finite"),
                        ),
                        bias: store.add(format!("dec.{l}.refine.ln_bias"), Tensor::zeros(vec![d])),
                    },
                    RefinerNorm::Linear => RefinerNormIds::Linear {
                        weight: store.add(
                            format!("dec.{l}.refine.weight"),
                            gaussian_tensor(&mut rng, vec![d, d], std),
                        ),
                        bias: store.add(format!("dec.{l}.refine.bias"), Tensor::zeros(vec![1, d])),
                    },
                };
                let ffn = ffn(&mut store, &mut rng, &format!("dec.{l}.ffn"));
                DecoderLayerIds {
                    self_attn,
                    ctx_attn,
                    kno_wq,
                    kno_wk,
                    kno_wv,
                    kno_wo,
                    gate_w,
                    refiner_norm,
                    ffn,
                }
            })
            .collect();

        let theta = store.add(
            "theta",
            gaussian_tensor(&mut rng, vec![d, config.num_emotions], 0.1),
        );
        let out_proj = store.add(
            "out_proj",
            gaussian_tensor(&mut rng, vec![d, config.vocab_size], 1.0 / (d as f64).sqrt()),
        );

        Ok(ModelParams {
            config,
            store,
            token_emb,
            pos_emb,
            ctx_layers,
            kno_layers,
            dec_layers,
            theta,
            out_proj,
        })
    }

    pub fn emotion_classifier(&self) -> crate::workspace::EmotionClassifier {
        crate::workspace::EmotionClassifier::new(self.store.get(self.theta).clone())
            .expect("theta is d×q by construction")
    }

    pub fn theta_id(&self) -> ParamId {
        self.theta
    }

    /// Rebuild the layout against a store loaded from a checkpoint. The
    /// store must have been produced by `init` with the same config.
    pub(crate) fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let template = ModelParams::init(config.clone(), 0)?;
        if template.store.len() != store.len() {
            return Err(contract_err(format!(
                "checkpoint holds {} tensors, model expects {}",
                store.len(),
                template.store.len()
            )));
        }
        for id in template.store.ids() {
            if template.store.name(id) != store.name(id) {
                return Err(contract_err(format!(
                    "checkpoint tensor {} where {} was expected",
                    store.name(id),
                    template.store.name(id)
                )));
            }
            if template.store.get(id).shape() != store.get(id).shape() {
                return Err(contract_err(format!(
                    "checkpoint tensor {} has shape {:?}, expected {:?}",
                    store.name(id),
                    store.get(id).shape(),
                    template.store.get(id).shape()
                )));
            }
        }
        Ok(ModelParams { store, ..template })
    }
}

use rand::SeedableRng;
