//! Training objectives: the symmetric invariance loss, Gumbel-perturbed soft
//! cluster assignment, straight-through centroids and the inter-cluster
//! separation loss, combined as `(1 - α)·L_inv + α·L_cluster`.

use rand::Rng;
use rand_distr::{Distribution, Open01};

use crate::autodiff::{argmax, BnMode, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{BnUpdate, BoundParams, ModelParams};
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 0.5;

/// Standard Gumbel transform of a uniform draw: `-ln(-ln u)`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// A `rows × cols` matrix of independent standard Gumbel draws.
pub fn gumbel_sample<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let u: f64 = Open01.sample(rng);
            gumbel_from_uniform(u)
        })
        .collect();
    Tensor::matrix(rows, cols, data).expect("gumbel shape")
}

/// Mean over rows of `-(p/|p|)·(z/|z|)`; `z` is detached when `stop_grad`.
fn negative_cosine(tape: &mut Tape, p: Var, z: Var, stop_grad: bool) -> Result<Var> {
    for v in [p, z] {
        let t = tape.value(v);
        if let Some(i) = (0..t.rows()).find(|&i| t.row(i).iter().all(|&x| x == 0.0)) {
            return Err(Error::Degenerate(format!("row {i} has zero norm")));
        }
    }
    let z = if stop_grad { tape.stop_gradient(z) } else { z };
    let pn = tape.row_l2_normalize(p)?;
    let zn = tape.row_l2_normalize(z)?;
    let prod = tape.elementwise_mul(pn, zn)?;
    let total = tape.sum_all(prod);
    let n = tape.value(p).rows() as f64;
    Ok(tape.scalar_mul(total, -1.0 / n))
}

/// `sim(p1, sg(z2)) + sim(p2, sg(z1))`, each term averaged over rows.
/// Lies in `[-2, 2]`.
pub fn invariance_loss(tape: &mut Tape, p1: Var, z1: Var, p2: Var, z2: Var) -> Result<Var> {
    invariance_loss_with(tape, p1, z1, p2, z2, true)
}

/// [`invariance_loss`] with the stop-gradient optionally removed (used only
/// to show that gradient checks catch the missing detach).
pub fn invariance_loss_with(
    tape: &mut Tape,
    p1: Var,
    z1: Var,
    p2: Var,
    z2: Var,
    stop_grad: bool,
) -> Result<Var> {
    let shape = tape.value(p1).shape().to_vec();
    for v in [z1, p2, z2] {
        if tape.value(v).shape() != shape.as_slice() {
            return Err(Error::shape(
                "invariance_loss",
                format!("{:?} vs {:?}", shape, tape.value(v).shape()),
            ));
        }
    }
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::shape("invariance_loss", format!("need N×D with N ≥ 1, got {shape:?}")));
    }
    let a = negative_cosine(tape, p1, z2, stop_grad)?;
    let b = negative_cosine(tape, p2, z1, stop_grad)?;
    tape.add(a, b)
}

/// Soft assignments `A = softmax((logits + g) / τ)` and their row argmax.
#[derive(Clone, Debug)]
pub struct AssignmentMatrix {
    pub a: Var,
    pub hard_labels: Vec<usize>,
    pub noise_applied: bool,
}

/// Row-softmax of `(logits + noise) / τ`. The noise is a constant leaf.
pub fn assign(tape: &mut Tape, logits: Var, tau: f64, noise: Option<&Tensor>) -> Result<AssignmentMatrix> {
    if !(tau > 0.0) {
        return Err(Error::Param(format!("temperature must be positive, got {tau}")));
    }
    let input = match noise {
        Some(g) => {
            let gv = tape.leaf(g.clone());
            tape.add(logits, gv)?
        }
        None => logits,
    };
    let a = tape.row_softmax(input, tau)?;
    let av = tape.value(a);
    let hard_labels = (0..av.rows()).map(|i| argmax(av.row(i))).collect();
    Ok(AssignmentMatrix {
        a,
        hard_labels,
        noise_applied: noise.is_some(),
    })
}

/// Unit-norm centroids of the non-empty clusters.
#[derive(Clone, Debug)]
pub struct CentroidSet {
    /// `k × D`.
    pub c: Var,
    pub k: usize,
    /// Length `K`; true where at least one sample is hard-assigned.
    pub occupied: Vec<bool>,
    /// Length `K` hard-assignment counts.
    pub counts: Vec<usize>,
}

/// `C = normalize(nonzero(onehot(A)ᵀ · sg(Z)))`.
///
/// The one-hot goes through the straight-through node, so gradients reach
/// `A` as if the soft assignment had been used. `Z` is detached on this path.
/// Empty clusters are detected from the hard-assignment counts.
pub fn centroids(tape: &mut Tape, assignment: &AssignmentMatrix, z: Var) -> Result<CentroidSet> {
    centroids_with(tape, assignment, z, true)
}

pub fn centroids_with(
    tape: &mut Tape,
    assignment: &AssignmentMatrix,
    z: Var,
    stop_grad: bool,
) -> Result<CentroidSet> {
    let (ar, zr) = (tape.value(assignment.a).rows(), tape.value(z).rows());
    if ar != zr {
        return Err(Error::shape(
            "centroids",
            format!("assignment has {ar} rows, projections {zr}"),
        ));
    }
    let h = tape.straight_through_onehot(assignment.a)?;
    let clusters = tape.value(h).cols();
    let mut counts = vec![0usize; clusters];
    {
        let hv = tape.value(h);
        for i in 0..hv.rows() {
            counts[argmax(hv.row(i))] += 1;
        }
    }
    let z = if stop_grad { tape.stop_gradient(z) } else { z };
    let ht = tape.transpose(h)?;
    let sums = tape.matmul(ht, z)?;
    let keep: Vec<usize> = (0..clusters).filter(|&j| counts[j] > 0).collect();
    let selected = tape.select_rows(sums, &keep)?;
    let c = tape.row_l2_normalize(selected)?;
    Ok(CentroidSet {
        c,
        k: keep.len(),
        occupied: counts.iter().map(|&n| n > 0).collect(),
        counts,
    })
}

/// Mean off-diagonal entry of the centroid Gram matrix `C·Cᵀ`:
/// `Σ_{i≠j} (C Cᵀ)_ij / (k (k - 1))`. Zero (a constant) when `k < 2`.
pub fn cluster_loss(tape: &mut Tape, centroids: &CentroidSet) -> Result<Var> {
    let k = centroids.k;
    if k < 2 {
        return Ok(tape.leaf(Tensor::scalar(0.0)));
    }
    let ct = tape.transpose(centroids.c)?;
    let gram = tape.matmul(centroids.c, ct)?;
    let mut mask = Tensor::full(&[k, k], 1.0);
    for i in 0..k {
        mask.set(i, i, 0.0);
    }
    let mask = tape.leaf(mask);
    let off = tape.elementwise_mul(gram, mask)?;
    let total = tape.sum_all(off);
    Ok(tape.scalar_mul(total, 1.0 / (k * (k - 1)) as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_inv: f64,
    pub l_cluster: f64,
    pub l_total: f64,
    pub alpha: f64,
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::Param(format!("alpha must lie in [0, 1], got {alpha}")))
    }
}

/// `(1 - α)·l_inv + α·l_cluster` on the tape.
pub fn composite_loss(tape: &mut Tape, l_inv: Var, l_cluster: Var, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    let a = tape.scalar_mul(l_inv, 1.0 - alpha);
    let b = tape.scalar_mul(l_cluster, alpha);
    tape.add(a, b)
}

/// The same combination on plain values.
pub fn composite_value(l_inv: f64, l_cluster: f64, alpha: f64) -> Result<LossBreakdown> {
    check_alpha(alpha)?;
    Ok(LossBreakdown {
        l_inv,
        l_cluster,
        l_total: (1.0 - alpha) * l_inv + alpha * l_cluster,
        alpha,
    })
}

/// Noiseless argmax of the eval-mode assigner on projections `z`.
pub fn eval_assign(params: &ModelParams, z: &Tensor) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let vz = tape.leaf(z.clone());
    let logits = params.assigner_logits(&mut tape, &bound, vz, BnMode::Eval, &mut Vec::new())?;
    let lv = tape.value(logits);
    Ok((0..lv.rows()).map(|i| argmax(lv.row(i))).collect())
}

/// Which terms enter the objective and how.
#[derive(Clone, Debug)]
pub struct ObjectiveSpec {
    pub use_invariance: bool,
    pub use_cluster: bool,
    /// Weight on the cluster term.
    pub alpha: f64,
    /// Frozen Gumbel noise for `Z`'s `2N × K` logits, if any.
    pub noise: Option<Tensor>,
    /// Detach the stop-gradient sites. Always true outside mutation tests.
    pub stop_gradient: bool,
}

#[derive(Debug)]
pub struct ObjectiveOutput {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    /// Hard labels of the `2N` rows of `Z`, when the assigner ran.
    pub hard_labels: Option<Vec<usize>>,
    pub centroids: Option<CentroidSet>,
    pub bn_updates: Vec<BnUpdate>,
}

/// Builds the whole training graph for one pair of views.
///
/// The invariance loss is always evaluated for reporting; it only enters
/// the total when `use_invariance` is set. The assigner is only run when
/// `use_cluster` is set, so a pure invariance objective never touches it.
pub fn build_objective(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &BoundParams,
    x1: Var,
    x2: Var,
    spec: &ObjectiveSpec,
) -> Result<ObjectiveOutput> {
    check_alpha(spec.alpha)?;
    let mut bn_updates = Vec::new();
    let out = params.forward_siamese(tape, bound, x1, x2, BnMode::Train, &mut bn_updates)?;
    let l_inv = invariance_loss_with(tape, out.p1, out.z1, out.p2, out.z2, spec.stop_gradient)?;

    let (l_cluster, hard_labels, cset) = if spec.use_cluster {
        let logits = params.assigner_logits(tape, bound, out.z, BnMode::Train, &mut bn_updates)?;
        if let Some(noise) = &spec.noise {
            let lshape = tape.value(logits).shape();
            if noise.shape() != lshape {
                return Err(Error::shape(
                    "objective",
                    format!("noise {:?} does not match logits {:?}", noise.shape(), lshape),
                ));
            }
        }
        let assignment = assign(tape, logits, params.config.temperature, spec.noise.as_ref())?;
        let cset = centroids_with(tape, &assignment, out.z, spec.stop_gradient)?;
        let lc = cluster_loss(tape, &cset)?;
        (lc, Some(assignment.hard_labels), Some(cset))
    } else {
        (tape.leaf(Tensor::scalar(0.0)), None, None)
    };

    let zero = || Tensor::scalar(0.0);
    let inv_term = if spec.use_invariance { l_inv } else { tape.leaf(zero()) };
    let loss = composite_loss(tape, inv_term, l_cluster, spec.alpha)?;
    let breakdown = LossBreakdown {
        l_inv: tape.value(l_inv).item(),
        l_cluster: tape.value(l_cluster).item(),
        l_total: tape.value(loss).item(),
        alpha: spec.alpha,
    };
    Ok(ObjectiveOutput {
        loss,
        breakdown,
        hard_labels,
        centroids: cset,
        bn_updates,
    })
}
