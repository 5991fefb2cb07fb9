//! Entropic optimal transport between token sets.
//!
//! The cost matrix comes from token-wise cosine alignment (C = 1 - A), the
//! marginals are uniform Dirac weights over tokens, and the entropic
//! problem is solved by Sinkhorn iteration in the log domain: direct
//! diagonal scaling underflows exp(-C/eta) for sharp regularization, while
//! log-sum-exp updates are algebraically identical and stable.
//!
//! `exact_ot_bruteforce` is the validation oracle: exhaustive permutation
//! search for uniform square instances, basic-feasible-solution enumeration
//! for small rectangular ones.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

/// Cost matrix for a transport problem.
#[derive(Clone, Debug)]
pub struct CostMatrix<S> {
    values: TensorBase<S>,
    from_alignment: bool,
}

impl<S: Scalar> CostMatrix<S> {
    /// Wrap an arbitrary finite cost matrix.
    pub fn raw(values: TensorBase<S>) -> Result<Self> {
        if !values.all_finite() {
            return Err(Error::NonFinite { what: "cost matrix".into() });
        }
        Ok(Self { values, from_alignment: false })
    }

    pub fn values(&self) -> &TensorBase<S> {
        &self.values
    }

    pub fn from_alignment_tag(&self) -> bool {
        self.from_alignment
    }
}

/// Cost from a cosine alignment matrix: C = 1 - A, entries in [0, 2].
///
/// Entries outside [-1, 1] beyond a 1e-9 slack signal unnormalized features
/// upstream and are rejected.
pub fn cost_from_alignment<S: Scalar>(alignment: &TensorBase<S>) -> Result<CostMatrix<S>> {
    let slack = S::from_f64_lossy(1e-9);
    let one = S::one();
    for r in 0..alignment.rows() {
        for c in 0..alignment.cols() {
            let v = alignment.get(r, c);
            if !v.is_finite() || v > one + slack || v < -(one + slack) {
                return Err(Error::CosineOutOfRange { row: r, col: c, value: v.to_f64_lossy() });
            }
        }
    }
    let values = alignment.map(|a| (one - a).max(S::zero()).min(S::from_f64_lossy(2.0)));
    Ok(CostMatrix { values, from_alignment: true })
}

/// Row/column marginals of a transport problem: positive, each summing to 1.
#[derive(Clone, Debug)]
pub struct Marginals<S> {
    rows: Vec<S>,
    cols: Vec<S>,
}

impl<S: Scalar> Marginals<S> {
    pub fn new(rows: Vec<S>, cols: Vec<S>) -> Result<Self> {
        let tol = S::from_f64_lossy(1e-12);
        for (name, v) in [("row", &rows), ("col", &cols)] {
            if v.is_empty() {
                return Err(Error::InvalidArg { op: "marginals", msg: format!("empty {name} marginal") });
            }
            if v.iter().any(|&p| !(p > S::zero())) {
                return Err(Error::InvalidArg { op: "marginals", msg: format!("non-positive {name} entry") });
            }
            let sum = v.iter().fold(S::zero(), |a, &b| a + b);
            if (sum - S::one()).abs() > tol {
                return Err(Error::InvalidArg {
                    op: "marginals",
                    msg: format!("{name} marginal sums to {sum}, expected 1"),
                });
            }
        }
        Ok(Self { rows, cols })
    }

    /// Uniform weights 1/N per side — the Dirac construction over tokens.
    pub fn uniform(n_rows: usize, n_cols: usize) -> Self {
        let r = S::one() / S::from_f64_lossy(n_rows as f64);
        let c = S::one() / S::from_f64_lossy(n_cols as f64);
        Self { rows: vec![r; n_rows], cols: vec![c; n_cols] }
    }

    pub fn rows(&self) -> &[S] {
        &self.rows
    }

    pub fn cols(&self) -> &[S] {
        &self.cols
    }

    fn is_uniform(&self) -> bool {
        let tol = S::from_f64_lossy(1e-12);
        let r = S::one() / S::from_f64_lossy(self.rows.len() as f64);
        let c = S::one() / S::from_f64_lossy(self.cols.len() as f64);
        self.rows.iter().all(|&p| (p - r).abs() <= tol) && self.cols.iter().all(|&p| (p - c).abs() <= tol)
    }
}

/// Solved (approximate) transport plan.
#[derive(Clone, Debug)]
pub struct TransportPlan<S> {
    pub values: TensorBase<S>,
    pub iterations_used: usize,
    /// L∞ violation of the row/column marginal constraints at exit.
    pub marginal_violation: S,
    pub converged: bool,
}

impl<S: Scalar> TransportPlan<S> {
    /// Total transported mass; 1 for a feasible plan.
    pub fn total_mass(&self) -> S {
        self.values.sum_all()
    }
}

fn logsumexp<S: Scalar>(terms: impl Iterator<Item = S> + Clone) -> S {
    let max = terms.clone().fold(S::neg_infinity(), S::max);
    if !max.is_finite() {
        return max;
    }
    let sum = terms.fold(S::zero(), |acc, t| acc + (t - max).exp());
    max + sum.ln()
}

/// Entropic OT by log-domain Sinkhorn iteration.
///
/// Alternates the dual-potential updates until the L∞ marginal violation of
/// the implied plan drops to `tol` or `max_iters` sweeps run out. Failure to
/// converge is not an error: the plan is returned with its violation and
/// `converged = false`, and the caller decides.
pub fn sinkhorn<S: Scalar>(
    cost: &CostMatrix<S>,
    marginals: &Marginals<S>,
    eta: S,
    max_iters: usize,
    tol: S,
) -> Result<TransportPlan<S>> {
    sinkhorn_impl(cost, marginals, eta, max_iters, tol, None)
}

/// As [`sinkhorn`], recording the L∞ marginal violation after every sweep.
pub fn sinkhorn_trace<S: Scalar>(
    cost: &CostMatrix<S>,
    marginals: &Marginals<S>,
    eta: S,
    max_iters: usize,
    tol: S,
) -> Result<(TransportPlan<S>, Vec<S>)> {
    let mut history = Vec::new();
    let plan = sinkhorn_impl(cost, marginals, eta, max_iters, tol, Some(&mut history))?;
    Ok((plan, history))
}

fn sinkhorn_impl<S: Scalar>(
    cost: &CostMatrix<S>,
    marginals: &Marginals<S>,
    eta: S,
    max_iters: usize,
    tol: S,
    mut trace: Option<&mut Vec<S>>,
) -> Result<TransportPlan<S>> {
    if !(eta > S::zero()) {
        return Err(Error::InvalidArg { op: "sinkhorn", msg: format!("eta {eta} must be > 0") });
    }
    if !(tol > S::zero()) {
        return Err(Error::InvalidArg { op: "sinkhorn", msg: format!("tol {tol} must be > 0") });
    }
    let c = &cost.values;
    if !c.all_finite() {
        return Err(Error::NonFinite { what: "cost matrix".into() });
    }
    let (nv, nt) = (c.rows(), c.cols());
    if nv != marginals.rows.len() || nt != marginals.cols.len() {
        return Err(Error::InvalidArg {
            op: "sinkhorn",
            msg: format!("cost {nv}x{nt} vs marginals {}x{}", marginals.rows.len(), marginals.cols.len()),
        });
    }

    let log_p: Vec<S> = marginals.rows.iter().map(|&p| p.ln()).collect();
    let log_q: Vec<S> = marginals.cols.iter().map(|&q| q.ln()).collect();
    let mut f = vec![S::zero(); nv];
    let mut g = vec![S::zero(); nt];

    let plan_of = |f: &[S], g: &[S]| -> TensorBase<S> {
        let mut t = TensorBase::zeros(nv, nt);
        for i in 0..nv {
            for j in 0..nt {
                t.set(i, j, ((f[i] + g[j] - c.get(i, j)) / eta).exp());
            }
        }
        t
    };
    let violation_of = |t: &TensorBase<S>| -> S {
        let mut worst = S::zero();
        for (i, &p) in marginals.rows.iter().enumerate() {
            let mut sum = S::zero();
            for j in 0..nt {
                sum += t.get(i, j);
            }
            worst = worst.max((sum - p).abs());
        }
        for (j, &q) in marginals.cols.iter().enumerate() {
            let mut sum = S::zero();
            for i in 0..nv {
                sum += t.get(i, j);
            }
            worst = worst.max((sum - q).abs());
        }
        worst
    };

    let mut iterations = 0;
    let mut plan = plan_of(&f, &g);
    let mut violation = violation_of(&plan);
    let mut converged = violation <= tol;

    while !converged && iterations < max_iters {
        for i in 0..nv {
            let lse = logsumexp((0..nt).map(|j| (g[j] - c.get(i, j)) / eta));
            f[i] = eta * (log_p[i] - lse);
        }
        for j in 0..nt {
            let lse = logsumexp((0..nv).map(|i| (f[i] - c.get(i, j)) / eta));
            g[j] = eta * (log_q[j] - lse);
        }
        iterations += 1;
        plan = plan_of(&f, &g);
        violation = violation_of(&plan);
        if let Some(h) = trace.as_deref_mut() {
            h.push(violation);
        }
        converged = violation <= tol;
    }

    Ok(TransportPlan { values: plan, iterations_used: iterations, marginal_violation: violation, converged })
}

/// Plan-weighted token similarity: sum_ij T_ij * A_ij.
///
/// With a unit-mass plan the result lies between the smallest and largest
/// alignment entry.
pub fn ot_similarity<S: Scalar>(plan: &TransportPlan<S>, alignment: &TensorBase<S>) -> S {
    assert_eq!(plan.values.shape(), alignment.shape(), "plan/alignment shape mismatch");
    plan.values.frobenius_dot(alignment)
}

/// Exact minimum transport cost for small instances.
///
/// Uniform square instances up to N=8 are solved by exhaustive permutation
/// search (the optimum of the assignment polytope). Other instances with
/// rows*cols <= 12 are solved by enumerating basic feasible solutions
/// (spanning trees of the transport graph), which contain an LP optimum.
pub fn exact_ot_bruteforce<S: Scalar>(cost: &CostMatrix<S>, marginals: &Marginals<S>) -> Result<S> {
    let c = &cost.values;
    let (nv, nt) = (c.rows(), c.cols());
    if nv != marginals.rows.len() || nt != marginals.cols.len() {
        return Err(Error::InvalidArg {
            op: "exact_ot_bruteforce",
            msg: format!("cost {nv}x{nt} vs marginals {}x{}", marginals.rows.len(), marginals.cols.len()),
        });
    }

    if nv == nt && nv <= 8 && marginals.is_uniform() {
        return Ok(assignment_minimum(c) / S::from_f64_lossy(nv as f64));
    }
    if nv * nt <= 12 {
        return basic_solution_minimum(c, marginals);
    }
    Err(Error::BruteForceTooLarge { rows: nv, cols: nt })
}

/// Minimum over all permutations of sum_i C[i, perm(i)], by Heap's algorithm.
fn assignment_minimum<S: Scalar>(c: &TensorBase<S>) -> S {
    let n = c.rows();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut counters = vec![0usize; n];
    let cost_of = |perm: &[usize]| -> S {
        let mut acc = S::zero();
        for (i, &j) in perm.iter().enumerate() {
            acc += c.get(i, j);
        }
        acc
    };
    let mut best = cost_of(&perm);
    let mut i = 0;
    while i < n {
        if counters[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(counters[i], i);
            }
            best = best.min(cost_of(&perm));
            counters[i] += 1;
            i = 0;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    best
}

/// Minimum cost over basic feasible solutions of the transportation polytope.
fn basic_solution_minimum<S: Scalar>(c: &TensorBase<S>, marginals: &Marginals<S>) -> Result<S> {
    let (nv, nt) = (c.rows(), c.cols());
    let cells = nv * nt;
    let basis_size = nv + nt - 1;
    let feas_tol = S::from_f64_lossy(1e-12);
    let mut best: Option<S> = None;

    // Iterate subsets of `basis_size` cells via bitmask.
    for mask in 0u32..(1u32 << cells) {
        if mask.count_ones() as usize != basis_size {
            continue;
        }
        let cells_in: Vec<(usize, usize)> =
            (0..cells).filter(|b| mask & (1 << b) != 0).map(|b| (b / nt, b % nt)).collect();

        // Solve the tree system by leaf stripping: a node of degree 1
        // determines its single incident flow.
        let mut remaining_row: Vec<S> = marginals.rows.to_vec();
        let mut remaining_col: Vec<S> = marginals.cols.to_vec();
        let mut active: Vec<bool> = vec![true; basis_size];
        let mut flow = vec![S::zero(); basis_size];
        let mut solved = 0;
        loop {
            let mut progressed = false;
            for (e, &(i, j)) in cells_in.iter().enumerate() {
                if !active[e] {
                    continue;
                }
                let row_deg = cells_in.iter().enumerate().filter(|&(k, &(r, _))| active[k] && r == i).count();
                let col_deg = cells_in.iter().enumerate().filter(|&(k, &(_, cc))| active[k] && cc == j).count();
                if row_deg == 1 {
                    flow[e] = remaining_row[i];
                    remaining_col[j] -= flow[e];
                    remaining_row[i] = S::zero();
                } else if col_deg == 1 {
                    flow[e] = remaining_col[j];
                    remaining_row[i] -= flow[e];
                    remaining_col[j] = S::zero();
                } else {
                    continue;
                }
                active[e] = false;
                solved += 1;
                progressed = true;
            }
            if !progressed {
                break;
            }
        }
        if solved != basis_size {
            continue; // contains a cycle: not a basis
        }
        if flow.iter().any(|&x| x < -feas_tol) {
            continue; // infeasible vertex
        }
        let mut total = S::zero();
        for (e, &(i, j)) in cells_in.iter().enumerate() {
            total += flow[e].max(S::zero()) * c.get(i, j);
        }
        best = Some(match best {
            Some(b) => b.min(total),
            None => total,
        });
    }

    best.ok_or_else(|| Error::InvalidArg { op: "exact_ot_bruteforce", msg: "no basic feasible solution found".into() })
}
