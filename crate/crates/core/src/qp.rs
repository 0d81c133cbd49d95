//! Exact solver for the dual of the min-max descent-direction problem:
//! minimize ½λᵀGGᵀλ − fᵀλ over the probability simplex. The row count J is
//! the number of still-active knowledge relations, so J ≤ 5 and exhaustive
//! active-set enumeration is both exact and cheap.

use crate::error::{contract_err, dim_err, numeric_err, Error, Result};

/// Dual problem data. Row `j` of `g` is the gradient of loss `f[j]` with
/// respect to its knowledge representation.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    g: Vec<f64>,
    f: Vec<f64>,
    j: usize,
    d: usize,
}

/// Solver output: simplex weights, the descent direction `-Gᵀλ`, and the
/// optimality certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub lambda: Vec<f64>,
    pub delta: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub active_set: Vec<usize>,
}

impl QpProblem {
    pub fn new(g: Vec<f64>, f: Vec<f64>, d: usize) -> Result<Self> {
        let j = f.len();
        if j == 0 {
            return Err(contract_err("QP requires at least one row"));
        }
        if g.len() != j * d {
            return Err(dim_err(format!(
                "gradient matrix has {} entries, expected {}×{}",
                g.len(),
                j,
                d
            )));
        }
        if g.iter().chain(f.iter()).any(|v| !v.is_finite()) {
            return Err(numeric_err("non-finite entry in QP data"));
        }
        Ok(QpProblem { g, f, j, d })
    }

    pub fn from_rows(rows: &[Vec<f64>], f: Vec<f64>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(dim_err("ragged gradient rows"));
        }
        if rows.len() != f.len() {
            return Err(dim_err(format!(
                "{} gradient rows vs {} loss values",
                rows.len(),
                f.len()
            )));
        }
        QpProblem::new(rows.concat(), f, d)
    }

    pub fn num_rows(&self) -> usize {
        self.j
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn losses(&self) -> &[f64] {
        &self.f
    }

    pub fn grad_row(&self, j: usize) -> &[f64] {
        &self.g[j * self.d..(j + 1) * self.d]
    }

    /// Gram matrix Q = GGᵀ, J×J row-major.
    fn gram(&self) -> Vec<f64> {
        let j = self.j;
        let mut q = vec![0.0; j * j];
        for a in 0..j {
            for b in a..j {
                let dot: f64 = self
                    .grad_row(a)
                    .iter()
                    .zip(self.grad_row(b))
                    .map(|(x, y)| x * y)
                    .sum();
                q[a * j + b] = dot;
                q[b * j + a] = dot;
            }
        }
        q
    }
}

/// `δ = -Gᵀλ`.
pub fn descent_direction(problem: &QpProblem, lambda: &[f64]) -> Result<Vec<f64>> {
    if lambda.len() != problem.j {
        return Err(dim_err(format!(
            "lambda has {} entries for {} rows",
            lambda.len(),
            problem.j
        )));
    }
    let mut delta = vec![0.0; problem.d];
    for (j, &w) in lambda.iter().enumerate() {
        for (dv, gv) in delta.iter_mut().zip(problem.grad_row(j)) {
            *dv -= w * gv;
        }
    }
    Ok(delta)
}

fn objective_at(q: &[f64], f: &[f64], lambda: &[f64]) -> f64 {
    let j = f.len();
    let mut quad = 0.0;
    for a in 0..j {
        for b in 0..j {
            quad += lambda[a] * q[a * j + b] * lambda[b];
        }
    }
    0.5 * quad - f.iter().zip(lambda).map(|(fi, li)| fi * li).sum::<f64>()
}

/// Maximum violation over stationarity, dual feasibility, complementarity,
/// and primal feasibility. Zero exactly at the optimum.
pub fn kkt_residual(problem: &QpProblem, lambda: &[f64]) -> Result<f64> {
    if lambda.len() != problem.j {
        return Err(dim_err(format!(
            "lambda has {} entries for {} rows",
            lambda.len(),
            problem.j
        )));
    }
    let sum: f64 = lambda.iter().sum();
    let min = lambda.iter().cloned().fold(f64::INFINITY, f64::min);
    if (sum - 1.0).abs() > 1e-8 || min < -1e-8 {
        return Err(contract_err(format!(
            "lambda off the simplex: sum {sum}, min {min}"
        )));
    }
    let q = problem.gram();
    let j = problem.j;
    // Gradient of the objective: Qλ − f.
    let mut grad = vec![0.0; j];
    for a in 0..j {
        let mut acc = 0.0;
        for b in 0..j {
            acc += q[a * j + b] * lambda[b];
        }
        grad[a] = acc - problem.f[a];
    }
    // At the optimum the active coordinates share the multiplier
    // ν = λᵀ(Qλ − f) and every inactive coordinate satisfies ∇φ_i ≥ ν.
    let nu: f64 = lambda.iter().zip(&grad).map(|(l, g)| l * g).sum();
    let mut residual = (sum - 1.0).abs().max((-min).max(0.0));
    for a in 0..j {
        let mu = grad[a] - nu;
        residual = residual.max(-mu.min(0.0));
        residual = residual.max((lambda[a] * mu).abs());
    }
    Ok(residual)
}

/// Solve the bordered equality system on a face: for the active coordinates
/// `Q_SS λ_S − ν·1 = f_S` together with `Σ λ_S = 1`. Returns None when the
/// system is numerically singular.
fn solve_face(q: &[f64], f: &[f64], j: usize, face: &[usize]) -> Option<Vec<f64>> {
    let s = face.len();
    let n = s + 1;
    let mut a = vec![0.0; n * n];
    let mut b = vec![0.0; n];
    for (r, &fr) in face.iter().enumerate() {
        for (c, &fc) in face.iter().enumerate() {
            a[r * n + c] = q[fr * j + fc];
        }
        a[r * n + s] = -1.0;
        b[r] = f[fr];
    }
    for c in 0..s {
        a[s * n + c] = 1.0;
    }
    b[s] = 1.0;

    let scale = a.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    for col in 0..n {
        let (pivot_row, pivot) = (col..n)
            .map(|r| (r, a[r * n + col]))
            .max_by(|x, y| x.1.abs().partial_cmp(&y.1.abs()).expect("finite"))
            .expect("non-empty range");
        if pivot.abs() < 1e-12 * scale {
            return None;
        }
        if pivot_row != col {
            for c in 0..n {
                a.swap(col * n + c, pivot_row * n + c);
            }
            b.swap(col, pivot_row);
        }
        for r in (col + 1)..n {
            let factor = a[r * n + col] / a[col * n + col];
            if factor == 0.0 {
                continue;
            }
            for c in col..n {
                a[r * n + c] -= factor * a[col * n + c];
            }
            b[r] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut acc = b[r];
        for c in (r + 1)..n {
            acc -= a[r * n + c] * x[c];
        }
        x[r] = acc / a[r * n + r];
    }
    x.truncate(s);
    Some(x)
}

/// Euclidean projection onto the probability simplex.
fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (i + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Projected gradient on a face whose reduced Gram block is singular.
fn projected_gradient_face(q: &[f64], f: &[f64], j: usize, face: &[usize]) -> Vec<f64> {
    let s = face.len();
    let mut trace = 0.0;
    for &r in face {
        trace += q[r * j + r];
    }
    let step = 1.0 / trace.max(1e-12);
    let mut lam = vec![1.0 / s as f64; s];
    for _ in 0..10_000 {
        let mut grad = vec![0.0; s];
        for (a, &fa) in face.iter().enumerate() {
            let mut acc = 0.0;
            for (b, &fb) in face.iter().enumerate() {
                acc += q[fa * j + fb] * lam[b];
            }
            grad[a] = acc - f[fa];
        }
        let moved: Vec<f64> = lam.iter().zip(&grad).map(|(l, g)| l - step * g).collect();
        let next = project_simplex(&moved);
        let change = next
            .iter()
            .zip(&lam)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        lam = next;
        if change < 1e-10 {
            break;
        }
    }
    lam
}

fn next_combination(face: &mut [usize], j: usize) -> bool {
    let s = face.len();
    let mut i = s;
    while i > 0 {
        i -= 1;
        if face[i] != i + j - s {
            face[i] += 1;
            for l in (i + 1)..s {
                face[l] = face[l - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Visit faces in (cardinality, lexicographic) order so that ties resolve
/// toward the smallest active set.
fn for_each_face(j: usize, mut visit: impl FnMut(&[usize])) {
    for size in 1..=j {
        let mut face: Vec<usize> = (0..size).collect();
        loop {
            visit(&face);
            if !next_combination(&mut face, j) {
                break;
            }
        }
    }
}

fn finish_solution(problem: &QpProblem, q: &[f64], lambda: Vec<f64>) -> Result<QpSolution> {
    let mut lambda = lambda;
    for v in lambda.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let sum: f64 = lambda.iter().sum();
    for v in lambda.iter_mut() {
        *v /= sum;
    }
    let objective = objective_at(q, &problem.f, &lambda);
    let delta = descent_direction(problem, &lambda)?;
    let residual = kkt_residual(problem, &lambda)?;
    let active_set = lambda
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(i, _)| i)
        .collect();
    Ok(QpSolution {
        lambda,
        delta,
        objective,
        kkt_residual: residual,
        active_set,
    })
}

/// Exact global minimizer of ½λᵀGGᵀλ − fᵀλ over the probability simplex,
/// by enumerating the equality-constrained solution on every face and
/// keeping the best feasible candidate.
pub fn solve_simplex_qp(problem: &QpProblem) -> Result<QpSolution> {
    let j = problem.j;
    let q = problem.gram();
    let mut best: Option<(f64, Vec<f64>)> = None;

    let mut consider = |face: &[usize]| {
        let lam_face = match solve_face(&q, &problem.f, j, face) {
            Some(x) => x,
            None => projected_gradient_face(&q, &problem.f, j, face),
        };
        if lam_face.iter().any(|&v| v < -1e-10) {
            return;
        }
        let mut lambda = vec![0.0; j];
        for (&idx, &v) in face.iter().zip(&lam_face) {
            lambda[idx] = v.max(0.0);
        }
        let obj = objective_at(&q, &problem.f, &lambda);
        if best.as_ref().map_or(true, |(b, _)| obj < *b) {
            best = Some((obj, lambda));
        }
    };
    for_each_face(j, &mut consider);

    let (_, lambda) = best.expect("singleton faces always yield feasible candidates");
    finish_solution(problem, &q, lambda)
}

/// Independent oracle: enumerate every grid point of the simplex at the
/// given resolution and return the best. Along the last two coordinates the
/// objective restricted to the grid line is a convex quadratic, so only the
/// grid points flanking its vertex (plus the endpoints) need evaluating;
/// the returned point is still the exact grid minimizer.
pub fn brute_force_qp(problem: &QpProblem, resolution: f64) -> Result<QpSolution> {
    if !(resolution > 0.0 && resolution <= 1.0) {
        return Err(contract_err(format!("resolution {resolution} outside (0, 1]")));
    }
    if problem.j > 5 {
        return Err(contract_err("brute force limited to J ≤ 5"));
    }
    let n = ((1.0 / resolution).round() as usize).max(1);
    let points = simplex_grid_count(n, problem.j);
    if points > 10_000_000 {
        return Err(Error::Capacity(format!(
            "{points} grid points exceed the 1e7 enumeration bound"
        )));
    }
    let j = problem.j;
    let q = problem.gram();

    if j == 1 {
        return finish_solution(problem, &q, vec![1.0]);
    }

    let nf = n as f64;
    let mut best_obj = f64::INFINITY;
    let mut best_counts = vec![0usize; j];

    // Recursion state over the first J-2 coordinates, tracked in count
    // space: v = Q·p, pqp = pᵀQp, fp = fᵀp.
    let mut prefix = vec![0usize; j];
    let mut v = vec![0.0; j];

    fn recurse(
        depth: usize,
        remaining: usize,
        j: usize,
        n: f64,
        q: &[f64],
        f: &[f64],
        prefix: &mut Vec<usize>,
        v: &mut Vec<f64>,
        pqp: f64,
        fp: f64,
        best_obj: &mut f64,
        best_counts: &mut Vec<usize>,
    ) {
        if depth == j - 2 {
            segment_min(remaining, j, n, q, f, prefix, v, pqp, fp, best_obj, best_counts);
            return;
        }
        for count in 0..=remaining {
            prefix[depth] = count;
            let c = count as f64;
            let new_pqp = pqp + 2.0 * c * v[depth] + c * c * q[depth * j + depth];
            let new_fp = fp + c * f[depth];
            let mut new_v = v.clone();
            for (col, nv) in new_v.iter_mut().enumerate() {
                *nv += c * q[depth * j + col];
            }
            recurse(
                depth + 1,
                remaining - count,
                j,
                n,
                q,
                f,
                prefix,
                &mut new_v,
                new_pqp,
                new_fp,
                best_obj,
                best_counts,
            );
        }
        prefix[depth] = 0;
    }

    #[allow(clippy::too_many_arguments)]
    fn segment_min(
        m: usize,
        j: usize,
        n: f64,
        q: &[f64],
        f: &[f64],
        prefix: &[usize],
        v: &[f64],
        pqp: f64,
        fp: f64,
        best_obj: &mut f64,
        best_counts: &mut Vec<usize>,
    ) {
        let a_idx = j - 2;
        let b_idx = j - 1;
        let mf = m as f64;
        let qaa = q[a_idx * j + a_idx];
        let qab = q[a_idx * j + b_idx];
        let qbb = q[b_idx * j + b_idx];
        let n2 = n * n;
        let coef_a = (qaa - 2.0 * qab + qbb) / (2.0 * n2);
        let coef_b = (v[a_idx] - v[b_idx] + mf * (qab - qbb)) / n2 - (f[a_idx] - f[b_idx]) / n;
        let coef_c = (pqp + 2.0 * mf * v[b_idx] + mf * mf * qbb) / (2.0 * n2) - (fp + mf * f[b_idx]) / n;

        let mut candidates = [0usize; 4];
        let mut count = 0;
        let push = |k: usize, cands: &mut [usize; 4], count: &mut usize| {
            if !cands[..*count].contains(&k) {
                cands[*count] = k;
                *count += 1;
            }
        };
        push(0, &mut candidates, &mut count);
        push(m, &mut candidates, &mut count);
        if coef_a > 0.0 {
            let vertex = -coef_b / (2.0 * coef_a);
            if vertex > 0.0 && vertex < mf {
                push(vertex.floor() as usize, &mut candidates, &mut count);
                push((vertex.ceil() as usize).min(m), &mut candidates, &mut count);
            }
        }
        candidates[..count].sort_unstable();
        for &k in &candidates[..count] {
            let kf = k as f64;
            let obj = coef_a * kf * kf + coef_b * kf + coef_c;
            if obj < *best_obj {
                *best_obj = obj;
                best_counts[..j - 2].copy_from_slice(&prefix[..j - 2]);
                best_counts[a_idx] = k;
                best_counts[b_idx] = m - k;
            }
        }
    }

    recurse(
        0, n, j, nf, &q, &problem.f, &mut prefix, &mut v, 0.0, 0.0, &mut best_obj, &mut best_counts,
    );

    let lambda: Vec<f64> = best_counts.iter().map(|&c| c as f64 / nf).collect();
    let objective = objective_at(&q, &problem.f, &lambda);
    let delta = descent_direction(problem, &lambda)?;
    let residual = kkt_residual(problem, &lambda)?;
    let active_set = lambda
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(i, _)| i)
        .collect();
    Ok(QpSolution {
        lambda,
        delta,
        objective,
        kkt_residual: residual,
        active_set,
    })
}

fn simplex_grid_count(n: usize, j: usize) -> u128 {
    // C(n + j - 1, j - 1)
    let mut num = 1u128;
    let mut den = 1u128;
    for i in 0..(j - 1) as u128 {
        num *= (n as u128) + i + 1;
        den *= i + 1;
    }
    num / den
}
