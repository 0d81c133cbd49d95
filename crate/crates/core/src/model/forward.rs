//! Forward passes: context/knowledge encoding, the workspace hook, the
//! knowledge-aware decoder with its refine gate, teacher-forced losses, and
//! greedy generation.

use crate::autodiff::{Tape, Tensor, TensorId};
use crate::corpus::{EncodedExample, Vocabulary};
use crate::error::{contract_err, dim_err, Result};
use crate::knowledge::Relation;
use crate::workspace::{competition, CompetitionOutcome, EmotionClassifier, WorkspaceState};

use super::{DecoderLayerIds, EncoderLayerIds, FfnIds, ModelParams, ParamId, RefinerNormIds};

const LN_EPS: f64 = 1e-5;
const MASK_NEG: f64 = -1e9;

/// How the refine gate's mixing coefficient is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateMode {
    #[default]
    Learned,
    /// Test hook standing in for a gate input driven to −∞: the knowledge
    /// stream is multiplied out and the output is exactly the residual.
    ForceZero,
}

/// Which knowledge the decoder attends to.
#[derive(Debug, Clone, Default)]
pub enum KnowledgePath {
    /// Run the competition; attend to the winner rectified by δ.
    #[default]
    Adaptive,
    /// Use a frozen outcome instead of running the competition.
    Override { winner: Relation, delta: Vec<f64> },
    /// Selector disabled: attend to all five relations, δ = 0.
    AllRelations,
    /// No knowledge sublayer at all.
    ContextOnly,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub gate: GateMode,
    pub knowledge: KnowledgePath,
}

/// Per-parameter tape bindings, one per (tape, step).
#[derive(Debug)]
pub(crate) struct Binding {
    map: Vec<Option<TensorId>>,
}

impl Binding {
    pub fn new(params: &ModelParams) -> Self {
        Binding { map: vec![None; params.store.len()] }
    }

    pub fn bind(&mut self, tape: &mut Tape, params: &ModelParams, id: ParamId) -> TensorId {
        if let Some(existing) = self.map[id.0] {
            return existing;
        }
        let node = tape.leaf(params.store.get(id));
        self.map[id.0] = Some(node);
        node
    }

    pub fn node(&self, id: ParamId) -> Option<TensorId> {
        self.map[id.0]
    }
}

fn multi_head_attention(
    tape: &mut Tape,
    bind: &mut Binding,
    params: &ModelParams,
    q_in: TensorId,
    kv_in: TensorId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    causal: bool,
) -> Result<TensorId> {
    let d = params.config.dim;
    let heads = params.config.heads;
    let dh = d / heads;
    let t_len = tape.shape(q_in)[0];
    let s_len = tape.shape(kv_in)[0];

    let wq = bind.bind(tape, params, wq);
    let wk = bind.bind(tape, params, wk);
    let wv = bind.bind(tape, params, wv);
    let wo = bind.bind(tape, params, wo);
    let q = tape.matmul(q_in, wq)?;
    let k = tape.matmul(kv_in, wk)?;
    let v = tape.matmul(kv_in, wv)?;

    let mask = if causal {
        if t_len != s_len {
            return Err(dim_err("causal attention requires square score matrix"));
        }
        let mut data = vec![0.0; t_len * s_len];
        for i in 0..t_len {
            for j in (i + 1)..s_len {
                data[i * s_len + j] = MASK_NEG;
            }
        }
        Some(tape.constant(&Tensor::new(vec![t_len, s_len], data)?))
    } else {
        None
    };

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let masked = match mask {
            Some(m) => tape.add(scaled, m)?,
            None => scaled,
        };
        let attn = tape.softmax(masked)?;
        head_outputs.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat_cols(&head_outputs)?;
    tape.matmul(merged, wo)
}

fn feed_forward(
    tape: &mut Tape,
    bind: &mut Binding,
    params: &ModelParams,
    ids: &FfnIds,
    x: TensorId,
) -> Result<TensorId> {
    let w1 = bind.bind(tape, params, ids.w1);
    let b1 = bind.bind(tape, params, ids.b1);
    let w2 = bind.bind(tape, params, ids.w2);
    let b2 = bind.bind(tape, params, ids.b2);
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row_vec(h, b1)?;
    let h = tape.relu(h)?;
    let h = tape.matmul(h, w2)?;
    tape.add_row_vec(h, b2)
}

fn residual_norm(
    tape: &mut Tape,
    bind: &mut Binding,
    params: &ModelParams,
    x: TensorId,
    sub: TensorId,
    gain: ParamId,
    bias: ParamId,
) -> Result<TensorId> {
    let gain = bind.bind(tape, params, gain);
    let bias = bind.bind(tape, params, bias);
    let sum = tape.add(x, sub)?;
    tape.layer_norm(sum, gain, bias, LN_EPS)
}

fn encoder_layer(
    tape: &mut Tape,
    bind: &mut Binding,
    params: &ModelParams,
    layer: &EncoderLayerIds,
    x: TensorId,
) -> Result<TensorId> {
    let attn = multi_head_attention(
        tape, bind, params, x, x,
        layer.attn.wq, layer.attn.wk, layer.attn.wv, layer.attn.wo,
        false,
    )?;
    let h = residual_norm(tape, bind, params, x, attn, layer.attn.ln_gain, layer.attn.ln_bias)?;
    let f = feed_forward(tape, bind, params, &layer.ffn, h)?;
    residual_norm(tape, bind, params, h, f, layer.ffn.ln_gain, layer.ffn.ln_bias)
}

fn embed_sequence(
    tape: &mut Tape,
    bind: &mut Binding,
    params: &ModelParams,
    ids: &[usize],
) -> Result<TensorId> {
    if ids.len() > params.config.max_positions() {
        return Err(contract_err(format!(
            "sequence of {} exceeds the {} learned positions",
            ids.len(),
            params.config.max_positions()
        )));
    }
    let table = bind.bind(tape, params, params.token_emb);
    let pos = bind.bind(tape, params, params.pos_emb);
    let tok = tape.embed(table, ids)?;
    let pos_rows = tape.slice_rows(pos, 0, ids.len())?;
    tape.add(tok, pos_rows)
}

/// Encode a CLS-prefixed context sequence; row 0 of the output is the
/// whole-sequence representation. Overlong input is tail-truncated (CLS
/// kept) and counted, never silently dropped.
pub(crate) fn encode_context(
    tape: &mut Tape,
    bind: &mut Binding,
    params: &ModelParams,
    token_ids: &[usize],
    truncations: &mut usize,
) -> Result<TensorId> {
    if token_ids.is_empty() {
        return Err(contract_err("context sequence is empty"));
    }
    if token_ids[0] != Vocabulary::CLS {
        return Err(contract_err("context sequence must start with [CLS]"));
    }
    let max_src = params.config.max_src;
    let mut owned;
    let ids = if token_ids.len() > max_src {
        *truncations += 1;
        owned = Vec::with_capacity(max_src);
        owned.push(Vocabulary::CLS);
        owned.extend_from_slice(&token_ids[token_ids.len() - (max_src - 1)..]);
        owned.as_slice()
    } else {
        token_ids
    };
    let mut x = embed_sequence(tape, bind, params, ids)?;
    for layer in &params.ctx_layers {
        x = encoder_layer(tape, bind, params, layer, x)?;
    }
    Ok(x)
}

/// Encode the five relation sequences with the shared knowledge encoder.
/// Returns the per-relation encodings, their CLS rows, and the averaged
/// representation z_r.
pub(crate) fn encode_knowledge(
    tape: &mut Tape,
    bind: &mut Binding,
    params: &ModelParams,
    relation_seqs: &[Vec<usize>; 5],
    truncations: &mut usize,
) -> Result<(Vec<TensorId>, Vec<TensorId>, TensorId)> {
    let max_src = params.config.max_src;
    let mut encodings = Vec::with_capacity(5);
    let mut cls_rows = Vec::with_capacity(5);
    for seq in relation_seqs {
        if seq.is_empty() {
            return Err(contract_err("relation sequence is empty; all five are required"));
        }
        if seq[0] != Vocabulary::CLS {
            return Err(contract_err("relation sequence must start with [CLS]"));
        }
        let mut owned;
        let ids = if seq.len() > max_src {
            *truncations += 1;
            owned = seq[..max_src].to_vec();
            owned[0] = Vocabulary::CLS;
            owned.as_slice()
        } else {
            seq.as_slice()
        };
        let mut x = embed_sequence(tape, bind, params, ids)?;
        for layer in &params.kno_layers {
            x = encoder_layer(tape, bind, params, layer, x)?;
        }
        cls_rows.push(tape.slice_rows(x, 0, 1)?);
        encodings.push(x);
    }
    let stacked = tape.concat_rows(&cls_rows)?;
    let z_r = tape.mean_rows(stacked)?;
    Ok((encodings, cls_rows, z_r))
}

fn refine_gate(
    tape: &mut Tape,
    bind: &mut Binding,
    params: &ModelParams,
    layer: &DecoderLayerIds,
    h_tilde_k: TensorId,
    h_c: TensorId,
    mode: GateMode,
) -> Result<TensorId> {
    let rows = tape.shape(h_tilde_k)[0];
    let normed = match layer.refiner_norm {
        RefinerNormIds::LayerNorm { gain, bias } => {
            let gain = bind.bind(tape, params, gain);
            let bias = bind.bind(tape, params, bias);
            tape.layer_norm(h_tilde_k, gain, bias, LN_EPS)?
        }
        RefinerNormIds::Linear { weight, bias } => {
            let weight = bind.bind(tape, params, weight);
            let bias = bind.bind(tape, params, bias);
            let mapped = tape.matmul(h_tilde_k, weight)?;
            tape.add_row_vec(mapped, bias)?
        }
    };
    let alpha = match mode {
        GateMode::Learned => {
            let w = bind.bind(tape, params, layer.gate_w);
            let cat = tape.concat_cols(&[h_tilde_k, h_c])?;
            let raw = tape.matmul(cat, w)?;
            tape.sigmoid(raw)?
        }
        GateMode::ForceZero => tape.constant(&Tensor::zeros(vec![rows, 1])),
    };
    let ones = tape.constant(&Tensor::new(vec![rows, 1], vec![1.0; rows])?);
    let neg_alpha = tape.scale(alpha, -1.0)?;
    let beta = tape.add(ones, neg_alpha)?;
    let k_part = tape.scale_rows(normed, alpha)?;
    let c_part = tape.scale_rows(h_c, beta)?;
    tape.add(k_part, c_part)
}

/// Teacher-forced decoder: masked self-attention, cross-attention over the
/// context, cross-attention over the rectified knowledge feeding the refine
/// gate, then the feed-forward block; finally the vocabulary projection.
pub(crate) fn decode(
    tape: &mut Tape,
    bind: &mut Binding,
    params: &ModelParams,
    target_in: &[usize],
    z_ctx: TensorId,
    knowledge: Option<TensorId>,
    gate: GateMode,
) -> Result<TensorId> {
    if target_in.is_empty() {
        return Err(contract_err("decoder target is empty"));
    }
    let mut x = embed_sequence(tape, bind, params, target_in)?;
    for layer in &params.dec_layers {
        let self_out = multi_head_attention(
            tape, bind, params, x, x,
            layer.self_attn.wq, layer.self_attn.wk, layer.self_attn.wv, layer.self_attn.wo,
            true,
        )?;
        let h1 = residual_norm(
            tape, bind, params, x, self_out,
            layer.self_attn.ln_gain, layer.self_attn.ln_bias,
        )?;
        let ctx_out = multi_head_attention(
            tape, bind, params, h1, z_ctx,
            layer.ctx_attn.wq, layer.ctx_attn.wk, layer.ctx_attn.wv, layer.ctx_attn.wo,
            false,
        )?;
        let h_c = residual_norm(
            tape, bind, params, h1, ctx_out,
            layer.ctx_attn.ln_gain, layer.ctx_attn.ln_bias,
        )?;
        let gated = match knowledge {
            Some(memory) => {
                let h_tilde_k = multi_head_attention(
                    tape, bind, params, h_c, memory,
                    layer.kno_wq, layer.kno_wk, layer.kno_wv, layer.kno_wo,
                    false,
                )?;
                refine_gate(tape, bind, params, layer, h_tilde_k, h_c, gate)?
            }
            None => h_c,
        };
        let f = feed_forward(tape, bind, params, &layer.ffn, gated)?;
        x = residual_norm(tape, bind, params, gated, f, layer.ffn.ln_gain, layer.ffn.ln_bias)?;
    }
    let proj = bind.bind(tape, params, params.out_proj);
    tape.matmul(x, proj)
}

enum ClassifierKnowledge {
    Winner(usize),
    Average,
    None,
}

struct SelectedKnowledge {
    memory: Option<TensorId>,
    outcome: Option<CompetitionOutcome>,
    classifier_input: ClassifierKnowledge,
}

/// Resolve the knowledge path: run the competition on detached values (or
/// honor an override), and hand back the decoder memory plus which fused
/// representation the emotion head should read.
fn select_knowledge(
    tape: &mut Tape,
    params: &ModelParams,
    theta: TensorId,
    encodings: &[TensorId],
    cls_rows: &[TensorId],
    ctx_cls: TensorId,
    options: &ForwardOptions,
) -> Result<SelectedKnowledge> {
    match &options.knowledge {
        KnowledgePath::Adaptive => {
            let clf = EmotionClassifier::new(tape.detach(theta))?;
            let entries: Vec<(Relation, Vec<f64>)> = Relation::ALL
                .iter()
                .zip(cls_rows)
                .map(|(&r, &node)| (r, tape.value(node).to_vec()))
                .collect();
            let state = WorkspaceState::new(entries, tape.value(ctx_cls).to_vec())?;
            let outcome = competition(&state, &clf)?;
            let winner_enc = encodings[outcome.winner.index()];
            let delta_node =
                tape.constant(&Tensor::new(vec![1, params.config.dim], outcome.delta.clone())?);
            let memory = tape.add_row_vec(winner_enc, delta_node)?;
            let winner_idx = outcome.winner.index();
            Ok(SelectedKnowledge {
                memory: Some(memory),
                outcome: Some(outcome),
                classifier_input: ClassifierKnowledge::Winner(winner_idx),
            })
        }
        KnowledgePath::Override { winner, delta } => {
            let winner_enc = encodings[winner.index()];
            let delta_node =
                tape.constant(&Tensor::new(vec![1, params.config.dim], delta.clone())?);
            let memory = tape.add_row_vec(winner_enc, delta_node)?;
            Ok(SelectedKnowledge {
                memory: Some(memory),
                outcome: None,
                classifier_input: ClassifierKnowledge::Winner(winner.index()),
            })
        }
        KnowledgePath::AllRelations => Ok(SelectedKnowledge {
            memory: Some(tape.concat_rows(encodings)?),
            outcome: None,
            classifier_input: ClassifierKnowledge::Average,
        }),
        KnowledgePath::ContextOnly => Ok(SelectedKnowledge {
            memory: None,
            outcome: None,
            classifier_input: ClassifierKnowledge::None,
        }),
    }
}

/// Tape-level result of one example's forward pass.
#[derive(Debug)]
pub(crate) struct ExampleGraph {
    pub loss: TensorId,
    pub l_nll: TensorId,
    pub l_emo: TensorId,
    pub logits: TensorId,
    pub p_emo: Vec<f64>,
    pub outcome: Option<CompetitionOutcome>,
    pub truncations: usize,
}

pub(crate) fn forward_example(
    tape: &mut Tape,
    bind: &mut Binding,
    params: &ModelParams,
    example: &EncodedExample,
    options: &ForwardOptions,
) -> Result<ExampleGraph> {
    if example.target_ids.len() < 2 {
        return Err(contract_err("target must hold BOS plus at least one token"));
    }
    if example.emotion >= params.config.num_emotions {
        return Err(contract_err(format!(
            "emotion index {} out of range {}",
            example.emotion, params.config.num_emotions
        )));
    }
    let mut truncations = 0usize;
    let z_ctx = encode_context(tape, bind, params, &example.context_ids, &mut truncations)?;
    let ctx_cls = tape.slice_rows(z_ctx, 0, 1)?;
    let (encodings, cls_rows, z_r) =
        encode_knowledge(tape, bind, params, &example.relation_ids, &mut truncations)?;
    let theta = bind.bind(tape, params, params.theta);

    let selected = select_knowledge(tape, params, theta, &encodings, &cls_rows, ctx_cls, options)?;

    // Emotion head on the path's fused representation: the selection
    // winner when the selector is on, the relation average when it is
    // disabled, the bare context when knowledge is absent.
    let z_f = match selected.classifier_input {
        ClassifierKnowledge::Winner(idx) => {
            let fused = tape.add(cls_rows[idx], ctx_cls)?;
            fused
        }
        ClassifierKnowledge::Average => tape.add(z_r, ctx_cls)?,
        ClassifierKnowledge::None => ctx_cls,
    };
    let emo_logits = tape.matmul(z_f, theta)?;
    let l_emo = tape.cross_entropy(emo_logits, &[example.emotion], &[true])?;
    let p_emo = {
        let soft = tape.softmax(emo_logits)?;
        tape.value(soft).to_vec()
    };
    let memory = selected.memory;
    let outcome = selected.outcome;

    let target_in = &example.target_ids[..example.target_ids.len() - 1];
    let labels = &example.target_ids[1..];
    let logits = decode(tape, bind, params, target_in, z_ctx, memory, options.gate)?;
    let mask: Vec<bool> = labels.iter().map(|&t| t != Vocabulary::PAD).collect();
    let l_nll = tape.cross_entropy(logits, labels, &mask)?;
    let weighted_emo = tape.scale(l_emo, params.config.gamma)?;
    let loss = tape.add(l_nll, weighted_emo)?;
    Ok(ExampleGraph {
        loss,
        l_nll,
        l_emo,
        logits,
        p_emo,
        outcome,
        truncations,
    })
}

/// Detached forward results for evaluation and tests.
#[derive(Debug, Clone)]
pub struct ExampleForward {
    pub logits: Tensor,
    pub p_emo: Vec<f64>,
    pub predicted_emotion: usize,
    pub l_nll: f64,
    pub l_emo: f64,
    pub loss: f64,
    pub outcome: Option<CompetitionOutcome>,
    pub truncations: usize,
}

impl ModelParams {
    /// One example, values only.
    pub fn run_forward(
        &self,
        example: &EncodedExample,
        options: &ForwardOptions,
    ) -> Result<ExampleForward> {
        let mut tape = Tape::new();
        let mut bind = Binding::new(self);
        let graph = forward_example(&mut tape, &mut bind, self, example, options)?;
        let predicted_emotion = argmax(&graph.p_emo);
        Ok(ExampleForward {
            logits: tape.detach(graph.logits),
            p_emo: graph.p_emo,
            predicted_emotion,
            l_nll: tape.scalar_value(graph.l_nll)?,
            l_emo: tape.scalar_value(graph.l_emo)?,
            loss: tape.scalar_value(graph.loss)?,
            outcome: graph.outcome,
            truncations: graph.truncations,
        })
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean negative log-likelihood over non-pad target positions.
pub fn nll_loss(logits: &Tensor, target_ids: &[usize], pad_id: usize) -> Result<f64> {
    let nlls = token_nlls(logits, target_ids, pad_id)?;
    Ok(nlls.iter().sum::<f64>() / nlls.len() as f64)
}

/// Per-token negative log-likelihoods at the non-pad positions.
pub fn token_nlls(logits: &Tensor, target_ids: &[usize], pad_id: usize) -> Result<Vec<f64>> {
    let (rows, cols) = (logits.rows(), logits.cols());
    if target_ids.len() != rows {
        return Err(dim_err(format!(
            "{rows} logit rows vs {} targets",
            target_ids.len()
        )));
    }
    let mut out = Vec::new();
    for (i, &t) in target_ids.iter().enumerate() {
        if t == pad_id {
            continue;
        }
        if t >= cols {
            return Err(contract_err(format!("target {t} out of vocabulary {cols}")));
        }
        let row = &logits.data()[i * cols..(i + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        out.push(lse - row[t]);
    }
    if out.is_empty() {
        return Err(contract_err("all target positions are padding"));
    }
    Ok(out)
}

/// Eq. (10): the weighted sum of the generation and emotion losses.
pub fn joint_loss(l_nll: f64, l_emo: f64, gamma: f64) -> f64 {
    l_nll + gamma * l_emo
}

/// Greedy argmax decoding from BOS until EOS or the cap. Selection runs
/// once per example before any token is produced.
pub fn generate(
    params: &ModelParams,
    example: &EncodedExample,
    max_len: usize,
    options: &ForwardOptions,
) -> Result<(Vec<usize>, usize, Option<CompetitionOutcome>)> {
    if max_len == 0 || max_len > params.config.max_tgt {
        return Err(contract_err(format!(
            "max_len {max_len} outside 1..={}",
            params.config.max_tgt
        )));
    }
    let mut tape = Tape::new();
    let mut bind = Binding::new(params);
    let mut truncations = 0usize;
    let z_ctx = encode_context(&mut tape, &mut bind, params, &example.context_ids, &mut truncations)?;
    let ctx_cls = tape.slice_rows(z_ctx, 0, 1)?;
    let (encodings, cls_rows, z_r) =
        encode_knowledge(&mut tape, &mut bind, params, &example.relation_ids, &mut truncations)?;
    let theta = bind.bind(&mut tape, params, params.theta);

    let selected =
        select_knowledge(&mut tape, params, theta, &encodings, &cls_rows, ctx_cls, options)?;
    let z_f = match selected.classifier_input {
        ClassifierKnowledge::Winner(idx) => tape.add(cls_rows[idx], ctx_cls)?,
        ClassifierKnowledge::Average => tape.add(z_r, ctx_cls)?,
        ClassifierKnowledge::None => ctx_cls,
    };
    let emo_logits = tape.matmul(z_f, theta)?;
    let soft = tape.softmax(emo_logits)?;
    let predicted_emotion = argmax(tape.value(soft));
    let memory = selected.memory;
    let outcome = selected.outcome;

    let mut generated: Vec<usize> = Vec::new();
    while generated.len() < max_len {
        let mut target_in = vec![Vocabulary::BOS];
        target_in.extend(&generated);
        let logits = decode(&mut tape, &mut bind, params, &target_in, z_ctx, memory, options.gate)?;
        let cols = params.config.vocab_size;
        let last = &tape.value(logits)[(target_in.len() - 1) * cols..target_in.len() * cols];
        let next = argmax(last);
        generated.push(next);
        if next == Vocabulary::EOS {
            break;
        }
    }
    Ok((generated, predicted_emotion, outcome))
}

/// Context encoding, values only: rows are per-position states, row 0 is
/// the whole-sequence representation.
pub fn encode_context_values(params: &ModelParams, token_ids: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut bind = Binding::new(params);
    let mut truncations = 0;
    let z = encode_context(&mut tape, &mut bind, params, token_ids, &mut truncations)?;
    Ok(tape.detach(z))
}

/// Knowledge encoding, values only: the five per-relation encodings and the
/// averaged CLS representation z_r.
pub fn encode_knowledge_values(
    params: &ModelParams,
    relation_seqs: &[Vec<usize>; 5],
) -> Result<(Vec<Tensor>, Tensor)> {
    let mut tape = Tape::new();
    let mut bind = Binding::new(params);
    let mut truncations = 0;
    let (encodings, _, z_r) =
        encode_knowledge(&mut tape, &mut bind, params, relation_seqs, &mut truncations)?;
    Ok((
        encodings.iter().map(|&id| tape.detach(id)).collect(),
        tape.detach(z_r),
    ))
}

/// Value-level refine gate used by the interpolation and identity tests.
/// Returns (blended output, α per row, normalized knowledge stream).
pub fn refine_gate_values(
    h_tilde_k: &Tensor,
    h_c: &Tensor,
    w: &Tensor,
    ln_gain: &Tensor,
    ln_bias: &Tensor,
    force_zero: bool,
) -> Result<(Tensor, Vec<f64>, Tensor)> {
    if h_tilde_k.shape() != h_c.shape() {
        return Err(dim_err("gate streams must share a shape"));
    }
    let d = h_tilde_k.cols();
    if w.numel() != 2 * d {
        return Err(dim_err(format!("gate weight must be 2d = {}", 2 * d)));
    }
    let rows = h_tilde_k.rows();
    let mut tape = Tape::new();
    let hk = tape.leaf(h_tilde_k);
    let hc = tape.leaf(h_c);
    let gain = tape.constant(ln_gain);
    let bias = tape.constant(ln_bias);
    let normed = tape.layer_norm(hk, gain, bias, LN_EPS)?;
    let alpha = if force_zero {
        tape.constant(&Tensor::zeros(vec![rows, 1]))
    } else {
        let w2 = tape.constant(&Tensor::new(vec![2 * d, 1], w.data().to_vec())?);
        let cat = tape.concat_cols(&[hk, hc])?;
        let raw = tape.matmul(cat, w2)?;
        tape.sigmoid(raw)?
    };
    let ones = tape.constant(&Tensor::new(vec![rows, 1], vec![1.0; rows])?);
    let neg = tape.scale(alpha, -1.0)?;
    let beta = tape.add(ones, neg)?;
    let k_part = tape.scale_rows(normed, alpha)?;
    let c_part = tape.scale_rows(hc, beta)?;
    let out = tape.add(k_part, c_part)?;
    Ok((
        tape.detach(out),
        tape.value(alpha).to_vec(),
        tape.detach(normed),
    ))
}

/// Teacher-forced logits for one example, values only.
pub fn decode_step_logits(
    params: &ModelParams,
    example: &EncodedExample,
    options: &ForwardOptions,
) -> Result<Tensor> {
    Ok(params.run_forward(example, options)?.logits)
}
