//! Token-expert affinity matrices.
//!
//! Four parameterizations feed the allocation stage: row softmax of the gate
//! logits, an entropy-regularized transport plan solved by alternating
//! normalization, a sparsity-capped quadratically-regularized transport
//! plan, and per-slot logits for soft routing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::Var;
use crate::tensor::{sorted_indices_desc, Tensor};

/// Gating weights, stored `[features, experts]` so logits are `X W`.
#[derive(Debug, Clone)]
pub struct GateParams {
    pub weights: Tensor,
    pub noise_stddev: f64,
}

impl GateParams {
    pub fn new(weights: Tensor, noise_stddev: f64) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(Error::invalid("gate weights must be [features, experts]"));
        }
        if !(noise_stddev >= 0.0 && noise_stddev.is_finite()) {
            return Err(Error::invalid("noise stddev must be finite and >= 0"));
        }
        Ok(GateParams {
            weights,
            noise_stddev,
        })
    }

    pub fn init(features: usize, experts: usize, stddev: f64, rng: &mut Rng) -> Result<Self> {
        Ok(GateParams {
            weights: rng.normal_tensor(&[features, experts], stddev)?,
            noise_stddev: 0.0,
        })
    }

    pub fn experts(&self) -> usize {
        self.weights.shape()[1]
    }
}

/// Conventional logit-noise scale when noise is enabled.
pub fn default_noise_stddev(experts: usize) -> f64 {
    1.0 / experts as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AffinityKind {
    Softmax,
    SinkhornEntropic,
    SparseOt,
}

/// Feasibility diagnostics attached to every affinity matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverResiduals {
    /// Max deviation of a row sum from 1.
    pub row_sum_dev: f64,
    /// Max deviation of a column sum from `tokens / experts`.
    pub col_sum_dev: f64,
    /// Nonzero count per column.
    pub col_nonzeros: Vec<usize>,
    /// Iterations the solver actually ran (1 for closed forms).
    pub iterations: usize,
}

pub fn measure_residuals(values: &Tensor, iterations: usize) -> SolverResiduals {
    let (t, e) = (values.shape()[0], values.shape()[1]);
    let target = t as f64 / e as f64;
    let row_sums = values.sum_axis(1).expect("matrix");
    let col_sums = values.sum_axis(0).expect("matrix");
    let row_sum_dev = row_sums
        .data()
        .iter()
        .map(|v| (v - 1.0).abs())
        .fold(0.0, f64::max);
    let col_sum_dev = col_sums
        .data()
        .iter()
        .map(|v| (v - target).abs())
        .fold(0.0, f64::max);
    let mut col_nonzeros = vec![0usize; e];
    for i in 0..t {
        for j in 0..e {
            if values.at2(i, j) != 0.0 {
                col_nonzeros[j] += 1;
            }
        }
    }
    SolverResiduals {
        row_sum_dev,
        col_sum_dev,
        col_nonzeros,
        iterations,
    }
}

/// A `[tokens, experts]` score matrix with its provenance and diagnostics.
pub struct AffinityMatrix<'t> {
    pub values: Var<'t>,
    pub kind: AffinityKind,
    pub residuals: SolverResiduals,
}

impl<'t> AffinityMatrix<'t> {
    /// Assert the kind-specific feasibility constraints.
    pub fn check_invariants(&self) -> Result<()> {
        let v = self.values.value();
        match self.kind {
            AffinityKind::Softmax | AffinityKind::SinkhornEntropic => {
                if v.data().iter().any(|&x| x <= 0.0) {
                    return Err(Error::invalid("affinity entries must be positive"));
                }
                if self.residuals.row_sum_dev > 1e-12 {
                    return Err(Error::invalid("row sums must equal 1 within 1e-12"));
                }
            }
            AffinityKind::SparseOt => {
                if v.data().iter().any(|&x| x < 0.0) {
                    return Err(Error::invalid("sparse plan entries must be nonnegative"));
                }
            }
        }
        Ok(())
    }
}

/// Softmax affinity with optional logit noise; differentiable in `x` and `w`.
pub struct SoftmaxAffinity<'t> {
    pub affinity: AffinityMatrix<'t>,
    /// Realized additive noise (`sigma * eta`), kept for the load loss.
    pub noise: Option<Tensor>,
}

pub fn softmax_affinity<'t>(
    x: Var<'t>,
    w: Var<'t>,
    noise_stddev: f64,
    rng: &mut Rng,
) -> Result<SoftmaxAffinity<'t>> {
    if noise_stddev < 0.0 {
        return Err(Error::invalid("noise stddev must be >= 0"));
    }
    let logits = x.matmul(w)?;
    let (noisy, noise) = if noise_stddev > 0.0 {
        let eps = rng.normal_tensor(&logits.shape(), noise_stddev)?;
        let shifted = logits.add(logits.tape().constant(eps.clone()))?;
        (shifted, Some(eps))
    } else {
        (logits, None)
    };
    let values = noisy.softmax_rows()?;
    let residuals = measure_residuals(&values.value(), 1);
    Ok(SoftmaxAffinity {
        affinity: AffinityMatrix {
            values,
            kind: AffinityKind::Softmax,
            residuals,
        },
        noise,
    })
}

/// Noiseless softmax of `X W`, used as the combine source by split routers.
pub fn softmax_affinity_noiseless<'t>(x: Var<'t>, w: Var<'t>) -> Result<AffinityMatrix<'t>> {
    let values = x.matmul(w)?.softmax_rows()?;
    let residuals = measure_residuals(&values.value(), 1);
    Ok(AffinityMatrix {
        values,
        kind: AffinityKind::Softmax,
        residuals,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornParams {
    pub iters: usize,
    pub tol: f64,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        SinkhornParams {
            iters: 50,
            tol: 1e-6,
        }
    }
}

/// Per-iteration diagnostics of the alternating-normalization solver.
#[derive(Debug, Clone, Default)]
pub struct SinkhornTrace {
    /// Maximization-form dual objective; non-decreasing across iterations.
    pub dual_objectives: Vec<f64>,
    pub row_devs: Vec<f64>,
    pub col_devs: Vec<f64>,
}

/// Entropy-regularized transport plan with unit row sums and `T/E` column
/// sums, solved by alternating column and row normalization of
/// `exp(logits)`. Each iteration ends on the row step, so returned row sums
/// are exact to machine precision.
pub fn sinkhorn_plan(
    logits: &Tensor,
    iters: usize,
    tol: f64,
) -> Result<(Tensor, SolverResiduals, SinkhornTrace)> {
    if iters < 1 {
        return Err(Error::invalid("sinkhorn: iters must be >= 1"));
    }
    if logits.shape().len() != 2 {
        return Err(Error::invalid("sinkhorn: logits must be [tokens, experts]"));
    }
    logits.check_finite("sinkhorn_plan")?;
    let (t, e) = (logits.shape()[0], logits.shape()[1]);
    let target = t as f64 / e as f64;
    let shift = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let kernel = logits.map("sinkhorn_exp", |v| (v - shift).exp())?;

    let mut row_scale = vec![1.0; t];
    let mut col_scale = vec![1.0; e];
    let mut trace = SinkhornTrace::default();
    let mut iterations = 0;

    let plan = |row_scale: &[f64], col_scale: &[f64]| -> Result<Tensor> {
        let mut data = Vec::with_capacity(t * e);
        for i in 0..t {
            for j in 0..e {
                data.push(row_scale[i] * kernel.at2(i, j) * col_scale[j]);
            }
        }
        let out = Tensor::new(vec![t, e], data)?;
        out.check_finite("sinkhorn_plan")?;
        Ok(out)
    };

    for _ in 0..iters {
        // column step: scale each column to mass T/E
        for j in 0..e {
            let mut s = 0.0;
            for i in 0..t {
                s += row_scale[i] * kernel.at2(i, j);
            }
            col_scale[j] = target / s;
        }
        // row step: scale each row to mass 1
        for i in 0..t {
            let mut s = 0.0;
            for j in 0..e {
                s += kernel.at2(i, j) * col_scale[j];
            }
            row_scale[i] = 1.0 / s;
        }
        iterations += 1;

        let current = plan(&row_scale, &col_scale)?;
        let res = measure_residuals(&current, iterations);
        trace.row_devs.push(res.row_sum_dev);
        trace.col_devs.push(res.col_sum_dev);
        trace.dual_objectives.push(dual_objective(
            &current, &row_scale, &col_scale, target, shift,
        ));
        if res.row_sum_dev < tol && res.col_sum_dev < tol {
            break;
        }
    }

    let out = plan(&row_scale, &col_scale)?;
    let residuals = measure_residuals(&out, iterations);
    Ok((out, residuals, trace))
}

/// Maximization-form dual of the entropic transport problem, evaluated from
/// the scaling vectors. Alternating normalization performs exact blockwise
/// ascent on this objective.
fn dual_objective(
    plan: &Tensor,
    row_scale: &[f64],
    col_scale: &[f64],
    target: f64,
    shift: f64,
) -> f64 {
    let mass = plan.sum_all();
    let u: f64 = row_scale.iter().map(|a| -a.ln() - 1.0 + shift).sum();
    let v: f64 = col_scale.iter().map(|b| -b.ln()).sum();
    -(mass + u + target * v)
}

/// Forward-only entropic-transport affinity: the plan is computed off-tape
/// and re-enters the graph behind a stop-gradient marker.
pub fn sinkhorn_affinity<'t>(
    x: Var<'t>,
    w: Var<'t>,
    params: &SinkhornParams,
) -> Result<AffinityMatrix<'t>> {
    let logits = x.value().matmul(&w.value())?;
    let (plan, residuals, _) = sinkhorn_plan(&logits, params.iters, params.tol)?;
    let values = x.tape().constant(plan).stop_gradient();
    Ok(AffinityMatrix {
        values,
        kind: AffinityKind::SinkhornEntropic,
        residuals,
    })
}

/// Differentiable variant used by the no-softmax-combine ablation: the
/// backward pass unrolls through every normalization step.
pub fn sinkhorn_affinity_differentiable<'t>(
    x: Var<'t>,
    w: Var<'t>,
    params: &SinkhornParams,
) -> Result<AffinityMatrix<'t>> {
    if params.iters < 1 {
        return Err(Error::invalid("sinkhorn: iters must be >= 1"));
    }
    let logits = x.matmul(w)?;
    let (t, e) = (logits.shape()[0], logits.shape()[1]);
    let target = t as f64 / e as f64;
    let shift = logits
        .value()
        .data()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut current = logits.add_scalar(-shift)?.exp()?;
    let mut iterations = 0;
    for _ in 0..params.iters {
        let col_sums = current.sum_axis(0)?;
        current = current.div_row(col_sums)?.scale(target)?;
        let row_sums = current.sum_axis(1)?;
        current = current.div_col(row_sums)?;
        iterations += 1;
        let res = measure_residuals(&current.value(), iterations);
        if res.row_sum_dev < params.tol && res.col_sum_dev < params.tol {
            break;
        }
    }
    let residuals = measure_residuals(&current.value(), iterations);
    Ok(AffinityMatrix {
        values: current,
        kind: AffinityKind::SinkhornEntropic,
        residuals,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparseOtParams {
    pub iters: usize,
    /// Row-potential step size; `None` selects `0.25 / experts`.
    pub step: Option<f64>,
}

impl Default for SparseOtParams {
    fn default() -> Self {
        SparseOtParams {
            iters: 100,
            step: None,
        }
    }
}

/// Approximate solution of the capacity-capped quadratically-regularized
/// transport problem
/// `max <plan, utility> - 0.5 ||plan||^2` subject to unit row sums, `T/E`
/// column sums, nonnegativity, and at most `capacity` nonzeros per column.
///
/// Column mass and the cardinality cap are enforced exactly at every
/// retrieval: each column keeps its `capacity` best candidate scores and
/// projects them onto the mass-`T/E` simplex (the threshold plays the role
/// of an exactly-optimized column potential). Row potentials follow
/// fixed-step ascent on the row-sum residual. The cardinality cap makes the
/// dual nonsmooth, so iterates can cycle; the returned plan is the
/// incumbent: the retrieval with the smallest row residual seen along the
/// trajectory. Row feasibility stays approximate and is reported, never
/// asserted.
pub fn sparse_ot_plan(
    utility: &Tensor,
    capacity: usize,
    iters: usize,
    step: f64,
) -> Result<(Tensor, SolverResiduals)> {
    if utility.shape().len() != 2 {
        return Err(Error::invalid("sparse_ot: utility must be [tokens, experts]"));
    }
    if capacity < 1 {
        return Err(Error::invalid("sparse_ot: capacity must be >= 1"));
    }
    if iters < 1 {
        return Err(Error::invalid("sparse_ot: iters must be >= 1"));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid("sparse_ot: step must be positive"));
    }
    utility.check_finite("sparse_ot_plan")?;
    let (t, e) = (utility.shape()[0], utility.shape()[1]);
    if capacity * e < t {
        return Err(Error::InfeasibleCapacity {
            capacity,
            experts: e,
            tokens: t,
        });
    }
    let cap = capacity.min(t);
    let mass = t as f64 / e as f64;

    let mut alpha = vec![0.0; t];
    let mut best: Option<Tensor> = None;
    let mut best_dev = f64::INFINITY;
    let mut iterations = 0;
    let mut scores = vec![0.0; t];
    for iter in 0..iters {
        let mut plan = Tensor::zeros(&[t, e]);
        for r in 0..e {
            for i in 0..t {
                scores[i] = utility.at2(i, r) - alpha[i];
            }
            let order = sorted_indices_desc(&scores);
            let selected = &order[..cap];
            let tau = simplex_threshold(selected.iter().map(|&i| scores[i]), mass);
            for &i in selected {
                let v = scores[i] - tau;
                if v > 0.0 {
                    plan.set2(i, r, v);
                }
            }
        }
        iterations = iter + 1;
        let row_sums = plan.sum_axis(1)?;
        let row_dev = row_sums
            .data()
            .iter()
            .map(|v| (v - 1.0).abs())
            .fold(0.0, f64::max);
        if row_dev < best_dev {
            best_dev = row_dev;
            best = Some(plan);
        }
        if best_dev < 1e-13 || iter == iters - 1 {
            break;
        }
        for i in 0..t {
            alpha[i] += step * (row_sums.data()[i] - 1.0);
        }
    }
    let plan = best.expect("at least one retrieval ran");
    plan.check_finite("sparse_ot_plan")?;
    let residuals = measure_residuals(&plan, iterations);
    Ok((plan, residuals))
}

/// Threshold `tau` such that `sum(max(0, s_i - tau)) = mass` over the given
/// descending-ordered scores.
fn simplex_threshold(scores_desc: impl Iterator<Item = f64>, mass: f64) -> f64 {
    let s: Vec<f64> = scores_desc.collect();
    let mut prefix = 0.0;
    let mut tau = 0.0;
    for (j, &v) in s.iter().enumerate() {
        prefix += v;
        let candidate = (prefix - mass) / (j + 1) as f64;
        if j + 1 == s.len() || s[j + 1] <= candidate {
            tau = candidate;
            break;
        }
    }
    tau
}

/// Forward-only sparse transport affinity built from a softmax utility
/// matrix. The plan is computed off-tape and carries a stop-gradient marker.
pub fn sparse_ot_affinity<'t>(
    utility: &AffinityMatrix<'t>,
    capacity: usize,
    params: &SparseOtParams,
) -> Result<AffinityMatrix<'t>> {
    if utility.kind != AffinityKind::Softmax {
        return Err(Error::invalid("sparse_ot_affinity needs a softmax utility"));
    }
    let values = utility.values.value();
    let experts = values.shape()[1];
    let step = params.step.unwrap_or(0.25 / experts as f64);
    let (plan, residuals) = sparse_ot_plan(&values, capacity, params.iters, step)?;
    let tape = utility.values.tape();
    Ok(AffinityMatrix {
        values: tape.constant(plan).stop_gradient(),
        kind: AffinityKind::SparseOt,
        residuals,
    })
}

/// Per-slot logits `Z[t, r, c] = <X[t, :], Phi[:, r, c]>`.
pub struct SlotLogits<'t> {
    pub z: Var<'t>,
}

pub fn slot_logits<'t>(x: Var<'t>, phi: Var<'t>) -> Result<SlotLogits<'t>> {
    let phi_shape = phi.shape();
    if phi_shape.len() != 3 {
        return Err(Error::invalid("slot tensor must be [features, experts, capacity]"));
    }
    let x_shape = x.shape();
    if x_shape.len() != 2 || x_shape[1] != phi_shape[0] {
        return Err(Error::ShapeMismatch {
            op: "slot_logits",
            lhs: x_shape,
            rhs: phi_shape,
        });
    }
    let (t, e, c) = (x_shape[0], phi_shape[1], phi_shape[2]);
    let flat = phi.reshape(&[phi_shape[0], e * c])?;
    let z = x.matmul(flat)?.reshape(&[t, e, c])?;
    Ok(SlotLogits { z })
}
