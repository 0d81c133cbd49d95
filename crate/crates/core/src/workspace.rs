//! Contextual unification: fuse knowledge with context, classify emotion,
//! and run the competitive elimination over relation representations. Each
//! iteration scores every surviving relation by how far its predicted
//! emotion distribution sits from the context's, removes the worst, and
//! accumulates the QP descent direction as the rectification signal.
//!
//! Everything here is value-level: the competition never touches a training
//! tape, so the accumulated direction enters the decoder as a constant.

use std::io::Write;

use crate::autodiff::{Tape, Tensor};
use crate::error::{contract_err, dim_err, numeric_err, Result};
use crate::knowledge::Relation;
use crate::qp::{solve_simplex_qp, QpProblem};

/// Linear emotion head `g_θ`: logits are `θᵀz` with `θ ∈ R^{d×q}`.
#[derive(Debug, Clone)]
pub struct EmotionClassifier {
    theta: Tensor,
}

impl EmotionClassifier {
    pub fn new(theta: Tensor) -> Result<Self> {
        if theta.shape().len() != 2 {
            return Err(dim_err("classifier weight must be d×q"));
        }
        if theta.shape()[1] < 2 {
            return Err(contract_err("classifier needs at least two emotion categories"));
        }
        Ok(EmotionClassifier { theta })
    }

    pub fn dim(&self) -> usize {
        self.theta.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.theta.shape()[1]
    }

    pub fn theta(&self) -> &Tensor {
        &self.theta
    }

    fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        let (d, q) = (self.dim(), self.num_classes());
        if z.len() != d {
            return Err(dim_err(format!("input of {} for classifier over R^{d}", z.len())));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(numeric_err("non-finite classifier input"));
        }
        let theta = self.theta.data();
        let mut logits = vec![0.0; q];
        for (i, &zi) in z.iter().enumerate() {
            for (l, t) in logits.iter_mut().zip(&theta[i * q..(i + 1) * q]) {
                *l += zi * t;
            }
        }
        Ok(logits)
    }
}

/// Point-wise addition of a relation representation and the context CLS.
pub fn fuse(z_r: &[f64], z_ctx_cls: &[f64]) -> Result<Vec<f64>> {
    if z_r.len() != z_ctx_cls.len() {
        return Err(dim_err(format!("fuse dims {} vs {}", z_r.len(), z_ctx_cls.len())));
    }
    Ok(z_r.iter().zip(z_ctx_cls).map(|(a, b)| a + b).collect())
}

/// `softmax(θᵀz)`.
pub fn classify_emotion(clf: &EmotionClassifier, z: &[f64]) -> Result<Vec<f64>> {
    let logits = clf.logits(z)?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    Ok(exp.iter().map(|v| v / sum).collect())
}

/// `-log P_emo(e)` against the gold label.
pub fn emotion_loss_supervised(p_emo: &[f64], label: usize) -> Result<f64> {
    if label >= p_emo.len() {
        return Err(contract_err(format!(
            "label {label} out of range for {} categories",
            p_emo.len()
        )));
    }
    if p_emo[label] <= 0.0 {
        return Err(numeric_err("zero probability at the gold label"));
    }
    Ok(-p_emo[label].ln())
}

/// Divergence of one relation from the context: the cross-entropy
/// `H(softmax(θᵀz_ctx), softmax(θᵀz_j))` with the context distribution as
/// the target. Minimal (equal to the context entropy) exactly when the two
/// distributions coincide.
pub fn relation_divergence(
    clf: &EmotionClassifier,
    z_j: &[f64],
    z_ctx_cls: &[f64],
) -> Result<f64> {
    let p_ctx = classify_emotion(clf, z_ctx_cls)?;
    Ok(divergence_with_grad(clf, z_j, &p_ctx)?.0)
}

/// Divergence plus its gradient with respect to the relation representation,
/// computed by reverse mode on a scratch tape.
pub fn divergence_with_grad(
    clf: &EmotionClassifier,
    z_j: &[f64],
    p_ctx: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let d = clf.dim();
    if z_j.len() != d {
        return Err(dim_err(format!("relation vector of {} over R^{d}", z_j.len())));
    }
    let mut tape = Tape::new();
    let z = tape.leaf(&Tensor::new(vec![1, d], z_j.to_vec())?);
    let theta = tape.constant(clf.theta());
    let logits = tape.matmul(z, theta)?;
    let loss = tape.soft_cross_entropy(logits, p_ctx)?;
    tape.backward(loss)?;
    let value = tape.scalar_value(loss)?;
    let grad = tape.grad(z).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; d]);
    Ok((value, grad))
}

/// Inputs to the competition: per-relation CLS vectors in canonical order
/// plus the context CLS vector.
#[derive(Debug, Clone)]
pub struct WorkspaceState {
    entries: Vec<(Relation, Vec<f64>)>,
    z_ctx_cls: Vec<f64>,
}

impl WorkspaceState {
    pub fn new(mut entries: Vec<(Relation, Vec<f64>)>, z_ctx_cls: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(contract_err("workspace needs at least one relation"));
        }
        let d = z_ctx_cls.len();
        if entries.iter().any(|(_, z)| z.len() != d) {
            return Err(dim_err("relation vectors must match the context dimension"));
        }
        if entries
            .iter()
            .flat_map(|(_, z)| z.iter())
            .chain(z_ctx_cls.iter())
            .any(|v| !v.is_finite())
        {
            return Err(numeric_err("non-finite workspace input"));
        }
        entries.sort_by_key(|(r, _)| r.index());
        Ok(WorkspaceState { entries, z_ctx_cls })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One elimination event.
#[derive(Debug, Clone, PartialEq)]
pub struct Elimination {
    pub iteration: usize,
    pub relation: Relation,
    pub loss: f64,
}

/// Per-iteration record of the QP outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationSnapshot {
    pub relations: Vec<Relation>,
    pub lambda: Vec<f64>,
    pub delta: Vec<f64>,
}

/// Ordered elimination record plus the surviving relation.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkspaceTrace {
    pub eliminations: Vec<Elimination>,
    pub snapshots: Vec<IterationSnapshot>,
    pub winner: Relation,
}

impl WorkspaceTrace {
    /// `elim_1 → elim_2 → ... → winner`, the selection-process rendering.
    pub fn selection_process(&self) -> String {
        let mut parts: Vec<&str> = self.eliminations.iter().map(|e| e.relation.name()).collect();
        parts.push(self.winner.name());
        parts.join(" \u{2192} ")
    }
}

/// Outcome of one competition run.
#[derive(Debug, Clone, PartialEq)]
pub struct CompetitionOutcome {
    pub winner: Relation,
    pub delta: Vec<f64>,
    pub trace: WorkspaceTrace,
}

/// Iteratively remove the relation whose emotion distribution diverges most
/// from the context's, accumulating the QP descent direction, until a single
/// relation survives.
pub fn competition(state: &WorkspaceState, clf: &EmotionClassifier) -> Result<CompetitionOutcome> {
    let d = state.z_ctx_cls.len();
    if clf.dim() != d {
        return Err(dim_err(format!("classifier over R^{} vs workspace R^{d}", clf.dim())));
    }
    let p_ctx = classify_emotion(clf, &state.z_ctx_cls)?;

    // Loss values and gradients depend only on (θ, z_j, z_ctx), all fixed
    // during the loop, so compute them once per relation.
    let mut scored: Vec<(Relation, f64, Vec<f64>)> = Vec::with_capacity(state.entries.len());
    for (relation, z_j) in &state.entries {
        let (loss, grad) = divergence_with_grad(clf, z_j, &p_ctx)?;
        scored.push((*relation, loss, grad));
    }

    let mut delta = vec![0.0; d];
    let mut eliminations = Vec::new();
    let mut snapshots = Vec::new();
    let mut iteration = 1;
    while scored.len() > 1 {
        let rows: Vec<Vec<f64>> = scored.iter().map(|(_, _, g)| g.clone()).collect();
        let losses: Vec<f64> = scored.iter().map(|(_, f, _)| *f).collect();
        let problem = QpProblem::from_rows(&rows, losses.clone())?;
        let solution = solve_simplex_qp(&problem)?;
        for (dv, sv) in delta.iter_mut().zip(&solution.delta) {
            *dv += sv;
        }

        let mut worst = 0;
        for (j, loss) in losses.iter().enumerate() {
            if *loss > losses[worst] {
                worst = j;
            }
        }
        snapshots.push(IterationSnapshot {
            relations: scored.iter().map(|(r, _, _)| *r).collect(),
            lambda: solution.lambda.clone(),
            delta: delta.clone(),
        });
        eliminations.push(Elimination {
            iteration,
            relation: scored[worst].0,
            loss: losses[worst],
        });
        scored.remove(worst);
        iteration += 1;
    }

    let winner = scored[0].0;
    Ok(CompetitionOutcome {
        winner,
        delta,
        trace: WorkspaceTrace { eliminations, snapshots, winner },
    })
}

/// Add the accumulated direction along the trailing axis at every position.
pub fn broadcast(h_k: &Tensor, delta: &[f64]) -> Result<Tensor> {
    let cols = h_k.cols();
    if cols != delta.len() {
        return Err(dim_err(format!(
            "broadcast over trailing dim {cols} with delta of {}",
            delta.len()
        )));
    }
    let mut data = h_k.data().to_vec();
    for row in 0..h_k.rows() {
        for j in 0..cols {
            data[row * cols + j] += delta[j];
        }
    }
    Tensor::new(h_k.shape().to_vec(), data)
}

/// One CSV row per elimination: the per-example selection record consumed
/// by the trace command.
pub fn write_trace_csv<W: Write>(
    out: &mut W,
    rows: &[(String, WorkspaceTrace)],
) -> std::io::Result<()> {
    writeln!(out, "example_id,iteration,eliminated_relation,loss_value,winner")?;
    for (example_id, trace) in rows {
        for e in &trace.eliminations {
            writeln!(
                out,
                "{example_id},{},{},{},{}",
                e.iteration,
                e.relation.name(),
                e.loss,
                trace.winner.name()
            )?;
        }
        if trace.eliminations.is_empty() {
            writeln!(out, "{example_id},0,,,{}", trace.winner.name())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn clf(theta_rows: &[Vec<f64>]) -> EmotionClassifier {
        EmotionClassifier::new(Tensor::matrix(theta_rows).unwrap()).unwrap()
    }

    /// Independent cross-entropy arithmetic used as the oracle.
    fn hand_cross_entropy(target_logits: &[f64], pred_logits: &[f64]) -> f64 {
        let soft = |l: &[f64]| {
            let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect::<Vec<f64>>()
        };
        let p = soft(target_logits);
        let q = soft(pred_logits);
        -p.iter().zip(&q).map(|(pi, qi)| pi * qi.ln()).sum::<f64>()
    }

    #[test]
    fn fuse_examples() {
        assert_eq!(fuse(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), vec![4.0, 6.0]);
        assert_eq!(fuse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), vec![3.0, 4.0]);
        assert_eq!(
            fuse(&[1.0, 2.0], &[3.0, 4.0]).unwrap(),
            fuse(&[3.0, 4.0], &[1.0, 2.0]).unwrap()
        );
        assert!(fuse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn classify_zero_weights_is_uniform() {
        let c = EmotionClassifier::new(Tensor::zeros(vec![3, 32])).unwrap();
        let p = classify_emotion(&c, &[0.5, -1.0, 2.0]).unwrap();
        for v in &p {
            assert!((v - 1.0 / 32.0).abs() < 1e-15);
        }
    }

    #[test]
    fn classify_symmetric_logits() {
        let c = clf(&[vec![1.0, -1.0]]);
        let p = classify_emotion(&c, &[0.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn classify_argmax_shift_invariant() {
        let c = clf(&[vec![0.5, -0.3, 1.0], vec![0.2, 0.9, -0.4]]);
        let z = [1.0, -2.0];
        let p = classify_emotion(&c, &z).unwrap();
        let argmax = |v: &[f64]| {
            v.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        // Shifting every logit by a constant leaves the argmax unchanged;
        // emulate by adding a constant column to θᵀz via a bias-free check.
        let logits: Vec<f64> = (0..3)
            .map(|q| z[0] * c.theta().data()[q] + z[1] * c.theta().data()[3 + q])
            .collect();
        let shifted: Vec<f64> = logits.iter().map(|v| v + 7.5).collect();
        assert_eq!(argmax(&p), argmax(&shifted));
    }

    #[test]
    fn emotion_loss_values() {
        let uniform = vec![1.0 / 32.0; 32];
        let loss = emotion_loss_supervised(&uniform, 5).unwrap();
        assert!((loss - 32.0_f64.ln()).abs() < 1e-12);

        let mut one_hot = vec![0.0; 8];
        one_hot[3] = 1.0;
        assert_eq!(emotion_loss_supervised(&one_hot, 3).unwrap(), 0.0);

        let half = vec![0.5, 0.25, 0.25];
        assert!((emotion_loss_supervised(&half, 0).unwrap() - 2.0_f64.ln()).abs() < 1e-12);

        assert!(emotion_loss_supervised(&half, 9).is_err());
    }

    #[test]
    fn divergence_minimal_at_context_and_uniform_when_degenerate() {
        let c = clf(&[vec![0.7, -0.2], vec![-0.4, 0.9], vec![0.1, 0.3]]);
        let z_ctx = [1.2, -0.5, 0.8];
        let f_same = relation_divergence(&c, &z_ctx, &z_ctx).unwrap();
        let p = classify_emotion(&c, &z_ctx).unwrap();
        let entropy = -p.iter().map(|v| v * v.ln()).sum::<f64>();
        assert!((f_same - entropy).abs() < 1e-12);

        let zero = EmotionClassifier::new(Tensor::zeros(vec![3, 5])).unwrap();
        let f = relation_divergence(&zero, &[9.0, -3.0, 1.0], &z_ctx).unwrap();
        assert!((f - 5.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn divergence_orders_aligned_before_opposed() {
        // d=1, q=2, θ=[[1,-1]], z_ctx=(2): hand-computed cross-entropies.
        let c = clf(&[vec![1.0, -1.0]]);
        let f_aligned = relation_divergence(&c, &[2.0], &[2.0]).unwrap();
        let f_opposed = relation_divergence(&c, &[-2.0], &[2.0]).unwrap();
        let expect_aligned = hand_cross_entropy(&[2.0, -2.0], &[2.0, -2.0]);
        let expect_opposed = hand_cross_entropy(&[2.0, -2.0], &[-2.0, 2.0]);
        assert!((f_aligned - expect_aligned).abs() < 1e-12);
        assert!((f_opposed - expect_opposed).abs() < 1e-12);
        assert!(f_opposed > f_aligned);
    }

    #[test]
    fn divergence_gradient_matches_analytic_form() {
        // ∇_z H(p, softmax(θᵀz)) = θ·(q − p).
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..20 {
            let d = rng.gen_range(2..6);
            let q = rng.gen_range(2..6);
            let rows: Vec<Vec<f64>> = (0..d)
                .map(|_| (0..q).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let c = clf(&rows);
            let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let z_ctx: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let p = classify_emotion(&c, &z_ctx).unwrap();
            let (_, grad) = divergence_with_grad(&c, &z, &p).unwrap();
            let qdist = classify_emotion(&c, &z).unwrap();
            for i in 0..d {
                let expect: f64 = (0..q).map(|k| rows[i][k] * (qdist[k] - p[k])).sum();
                assert!((grad[i] - expect).abs() < 1e-10);
            }
        }
    }

    fn state_of(entries: Vec<(Relation, Vec<f64>)>, ctx: Vec<f64>) -> WorkspaceState {
        WorkspaceState::new(entries, ctx).unwrap()
    }

    #[test]
    fn single_relation_wins_without_eliminations() {
        let c = clf(&[vec![1.0, -1.0]]);
        let state = state_of(vec![(Relation::XWant, vec![0.3])], vec![0.1]);
        let out = competition(&state, &c).unwrap();
        assert_eq!(out.winner, Relation::XWant);
        assert_eq!(out.delta, vec![0.0]);
        assert!(out.trace.eliminations.is_empty());
    }

    #[test]
    fn zero_classifier_ties_break_in_canonical_order() {
        let c = EmotionClassifier::new(Tensor::zeros(vec![2, 4])).unwrap();
        let entries: Vec<(Relation, Vec<f64>)> = Relation::ALL
            .iter()
            .enumerate()
            .map(|(i, &r)| (r, vec![i as f64, -(i as f64)]))
            .collect();
        let state = state_of(entries, vec![0.5, 0.5]);
        let out = competition(&state, &c).unwrap();
        // All losses equal ln 4; earliest of the tied maxima goes first.
        let order: Vec<Relation> = out.trace.eliminations.iter().map(|e| e.relation).collect();
        assert_eq!(
            order,
            vec![Relation::XIntent, Relation::XNeed, Relation::XWant, Relation::XEffect]
        );
        assert_eq!(out.winner, Relation::XReact);
        for e in &out.trace.eliminations {
            assert!((e.loss - 4.0_f64.ln()).abs() < 1e-12);
        }
        // θ = 0 makes every gradient zero, so delta stays zero.
        assert_eq!(out.delta, vec![0.0, 0.0]);
    }

    #[test]
    fn opposed_relation_eliminated_first() {
        let c = clf(&[vec![1.0, -1.0]]);
        let state = state_of(
            vec![(Relation::XReact, vec![-2.0]), (Relation::XIntent, vec![2.0])],
            vec![2.0],
        );
        let out = competition(&state, &c).unwrap();
        assert_eq!(out.trace.eliminations.len(), 1);
        assert_eq!(out.trace.eliminations[0].relation, Relation::XReact);
        assert_eq!(out.winner, Relation::XIntent);
    }

    #[test]
    fn trace_shape_invariants() {
        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..25 {
            let d = 3;
            let rows: Vec<Vec<f64>> = (0..d)
                .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let c = clf(&rows);
            let entries: Vec<(Relation, Vec<f64>)> = Relation::ALL
                .iter()
                .map(|&r| (r, (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()))
                .collect();
            let ctx: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let out = competition(&state_of(entries, ctx), &c).unwrap();
            assert_eq!(out.trace.eliminations.len(), 4);
            assert!(out
                .trace
                .eliminations
                .iter()
                .all(|e| e.relation != out.winner));
            // Candidate set shrinks by one per snapshot.
            for (i, snap) in out.trace.snapshots.iter().enumerate() {
                assert_eq!(snap.relations.len(), 5 - i);
                assert_eq!(snap.lambda.len(), 5 - i);
            }
        }
    }

    #[test]
    fn delta_bounded_by_sum_of_max_row_norms() {
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..25 {
            let d = 4;
            let rows: Vec<Vec<f64>> = (0..d)
                .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let c = clf(&rows);
            let entries: Vec<(Relation, Vec<f64>)> = Relation::ALL
                .iter()
                .map(|&r| (r, (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()))
                .collect();
            let ctx: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let state = state_of(entries.clone(), ctx.clone());
            let out = competition(&state, &c).unwrap();

            // Recompute per-iteration max gradient norms from the snapshots.
            let p_ctx = classify_emotion(&c, &ctx).unwrap();
            let norm_of = |r: Relation| {
                let z = &entries.iter().find(|(er, _)| *er == r).unwrap().1;
                let (_, g) = divergence_with_grad(&c, z, &p_ctx).unwrap();
                g.iter().map(|v| v * v).sum::<f64>().sqrt()
            };
            let bound: f64 = out
                .trace
                .snapshots
                .iter()
                .map(|s| s.relations.iter().map(|&r| norm_of(r)).fold(0.0, f64::max))
                .sum();
            let delta_norm = out.delta.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(delta_norm <= bound + 1e-9, "{delta_norm} > {bound}");
        }
    }

    #[test]
    fn clone_of_context_survives_when_others_are_far() {
        let mut rng = StdRng::seed_from_u64(31);
        let mut run = 0;
        while run < 100 {
            let d = 4;
            let q = 3;
            let rows: Vec<Vec<f64>> = (0..d)
                .map(|_| (0..q).map(|_| rng.gen_range(-1.5..1.5)).collect())
                .collect();
            if rows.iter().flatten().all(|v| v.abs() < 1e-3) {
                continue;
            }
            let c = clf(&rows);
            let ctx: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let clone_div = relation_divergence(&c, &ctx, &ctx).unwrap();

            let mut entries = vec![(Relation::XWant, ctx.clone())];
            let mut ok = true;
            for &r in &[Relation::XIntent, Relation::XNeed, Relation::XEffect, Relation::XReact] {
                let mut found = None;
                for _ in 0..200 {
                    let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-12.0..12.0)).collect();
                    let div = relation_divergence(&c, &z, &ctx).unwrap();
                    if div >= clone_div + 1.0 {
                        found = Some(z);
                        break;
                    }
                }
                match found {
                    Some(z) => entries.push((r, z)),
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                // θ too flat to push divergences up by 1; draw a fresh one.
                continue;
            }
            let out = competition(&state_of(entries, ctx), &c).unwrap();
            assert_eq!(out.winner, Relation::XWant, "seed run {run}");
            run += 1;
        }
    }

    #[test]
    fn broadcast_examples() {
        let h = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let out = broadcast(&h, &[0.5, -0.5]).unwrap();
        assert_eq!(out.data(), &[1.5, 0.5]);

        let m = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let same = broadcast(&m, &[0.0, 0.0]).unwrap();
        assert_eq!(same.data(), m.data());

        let fwd = broadcast(&m, &[1.0, -2.0]).unwrap();
        let back = broadcast(&fwd, &[-1.0, 2.0]).unwrap();
        assert_eq!(back.data(), m.data());

        assert!(broadcast(&m, &[1.0]).is_err());
    }

    #[test]
    fn selection_process_format() {
        let trace = WorkspaceTrace {
            eliminations: vec![
                Elimination { iteration: 1, relation: Relation::XEffect, loss: 1.0 },
                Elimination { iteration: 2, relation: Relation::XReact, loss: 0.9 },
            ],
            snapshots: vec![],
            winner: Relation::XIntent,
        };
        assert_eq!(trace.selection_process(), "xEffect → xReact → xIntent");
    }

    #[test]
    fn trace_csv_rows() {
        let trace = WorkspaceTrace {
            eliminations: vec![Elimination {
                iteration: 1,
                relation: Relation::XNeed,
                loss: 1.25,
            }],
            snapshots: vec![],
            winner: Relation::XWant,
        };
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &[("ex1".to_string(), trace)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "example_id,iteration,eliminated_relation,loss_value,winner"
        );
        assert_eq!(lines.next().unwrap(), "ex1,1,xNeed,1.25,xWant");
    }

    #[test]
    fn empty_workspace_rejected() {
        assert!(WorkspaceState::new(vec![], vec![1.0]).is_err());
    }
}
