//! Probe forward passes, L1 losses and their analytic gradients.
//!
//! Two parameterizations are supported. The linear probe keeps one dense map
//! `B` per objective and predicts `‖B(h_i − h_j)‖²` and `‖B h_i‖²`. The
//! orthogonal probe shares a rotation `V` between objectives and predicts
//! `‖d̄_o ⊙ Vᵀ(h_i − h_j)‖²` and `‖d̄_o ⊙ Vᵀ h_i‖²`. With `B = U·diag(s)·Vᵀ`
//! both forms agree for every orthogonal `U`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{dso_gradient, dso_penalty, l1_penalty, l1_subgradient};
use crate::matrix::Matrix;
use crate::objective::{ObjectiveId, Target};
use crate::treebank::GoldLabels;

/// Shared rotation plus one scaling vector per objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalProbeParams {
    pub v: Matrix,
    pub scalers: BTreeMap<ObjectiveId, Vec<f64>>,
}

impl OrthogonalProbeParams {
    /// `V = init`, every scaling vector filled with `1/√dim`.
    pub fn new(init: Matrix, objectives: &[ObjectiveId]) -> Result<Self> {
        if !init.is_square() || init.rows() == 0 {
            return Err(Error::InvalidArgument("V must be square and non-empty".into()));
        }
        let dim = init.rows();
        let fill = 1.0 / (dim as f64).sqrt();
        Ok(OrthogonalProbeParams {
            v: init,
            scalers: objectives.iter().map(|&o| (o, vec![fill; dim])).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.v.rows()
    }

    pub fn scaler(&self, objective: ObjectiveId) -> Result<&[f64]> {
        self.scalers
            .get(&objective)
            .map(|d| d.as_slice())
            .ok_or_else(|| Error::InvalidArgument(format!("objective {} is not configured", objective)))
    }
}

/// Independent dense map per objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbeParams {
    pub maps: BTreeMap<ObjectiveId, Matrix>,
}

impl LinearProbeParams {
    pub fn dim(&self) -> usize {
        self.maps.values().next().map_or(0, |m| m.cols())
    }

    pub fn map(&self, objective: ObjectiveId) -> Result<&Matrix> {
        self.maps
            .get(&objective)
            .ok_or_else(|| Error::InvalidArgument(format!("objective {} is not configured", objective)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ProbeParams {
    Orthogonal(OrthogonalProbeParams),
    Linear(LinearProbeParams),
}

impl ProbeParams {
    pub fn dim(&self) -> usize {
        match self {
            ProbeParams::Orthogonal(p) => p.dim(),
            ProbeParams::Linear(p) => p.dim(),
        }
    }

    pub fn objectives(&self) -> Vec<ObjectiveId> {
        match self {
            ProbeParams::Orthogonal(p) => p.scalers.keys().copied().collect(),
            ProbeParams::Linear(p) => p.maps.keys().copied().collect(),
        }
    }

    pub fn predict_depths(&self, objective: ObjectiveId, h: &Matrix) -> Result<Vec<f64>> {
        match self {
            ProbeParams::Orthogonal(p) => depth_forward_orthogonal(&p.v, p.scaler(objective)?, h),
            ProbeParams::Linear(p) => depth_forward_linear(p.map(objective)?, h),
        }
    }

    pub fn predict_distances(&self, objective: ObjectiveId, h: &Matrix) -> Result<Matrix> {
        match self {
            ProbeParams::Orthogonal(p) => distance_forward_orthogonal(&p.v, p.scaler(objective)?, h),
            ProbeParams::Linear(p) => distance_forward_linear(p.map(objective)?, h),
        }
    }

    pub fn predict(&self, objective: ObjectiveId, h: &Matrix) -> Result<Prediction> {
        Ok(match objective.target {
            Target::Depth => Prediction::Depths(self.predict_depths(objective, h)?),
            Target::Distance => Prediction::Distances(self.predict_distances(objective, h)?),
        })
    }
}

/// Regularization settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub lambda_o: f64,
    pub lambda_s: f64,
    /// Sparsity switches on once DSO falls below this value.
    pub sparsity_trigger: f64,
    pub clip_norm: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            lambda_o: 0.05,
            lambda_s: 0.0,
            sparsity_trigger: 1.5,
            clip_norm: 1.5,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_o >= 0.0
            && self.lambda_s >= 0.0
            && self.sparsity_trigger.is_finite()
            && self.clip_norm > 0.0
            && self.lambda_o.is_finite()
            && self.lambda_s.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid hyperparameters {:?}", self)))
        }
    }
}

fn check_shapes(map: &Matrix, h: &Matrix) -> Result<()> {
    if !map.is_square() || map.cols() != h.cols() {
        return Err(Error::InvalidArgument(format!(
            "probe of shape {}x{} cannot map embeddings of dim {}",
            map.rows(),
            map.cols(),
            h.cols()
        )));
    }
    Ok(())
}

fn check_scaler(v: &Matrix, d: &[f64], h: &Matrix) -> Result<()> {
    check_shapes(v, h)?;
    if d.len() != v.cols() {
        return Err(Error::InvalidArgument(format!(
            "scaling vector of length {} for dim {}",
            d.len(),
            v.cols()
        )));
    }
    Ok(())
}

fn row_sq_norms(y: &Matrix) -> Vec<f64> {
    (0..y.rows())
        .map(|i| y.row(i).iter().map(|v| v * v).sum())
        .collect()
}

fn pairwise_sq_dists(y: &Matrix) -> Matrix {
    let n = y.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = y
                .row(i)
                .iter()
                .zip(y.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            out[(i, j)] = d;
            out[(j, i)] = d;
        }
    }
    out
}

/// Rows `Vᵀ h_i` scaled elementwise by `d`.
fn rotate_and_scale(v: &Matrix, d: &[f64], h: &Matrix) -> Matrix {
    let mut y = h.matmul(v).expect("checked shapes");
    for i in 0..y.rows() {
        for (yk, dk) in y.row_mut(i).iter_mut().zip(d) {
            *yk *= dk;
        }
    }
    y
}

/// `out[i][j] = ‖B(h_i − h_j)‖²`.
pub fn distance_forward_linear(b: &Matrix, h: &Matrix) -> Result<Matrix> {
    check_shapes(b, h)?;
    Ok(pairwise_sq_dists(&h.matmul(&b.transpose())?))
}

/// `out[i] = ‖B h_i‖²`.
pub fn depth_forward_linear(b: &Matrix, h: &Matrix) -> Result<Vec<f64>> {
    check_shapes(b, h)?;
    Ok(row_sq_norms(&h.matmul(&b.transpose())?))
}

/// `out[i][j] = ‖d̄ ⊙ Vᵀ(h_i − h_j)‖²`.
pub fn distance_forward_orthogonal(v: &Matrix, d: &[f64], h: &Matrix) -> Result<Matrix> {
    check_scaler(v, d, h)?;
    Ok(pairwise_sq_dists(&rotate_and_scale(v, d, h)))
}

/// `out[i] = ‖d̄ ⊙ Vᵀ h_i‖²`.
pub fn depth_forward_orthogonal(v: &Matrix, d: &[f64], h: &Matrix) -> Result<Vec<f64>> {
    check_scaler(v, d, h)?;
    Ok(row_sq_norms(&rotate_and_scale(v, d, h)))
}

/// Probe output for one sentence.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Depths(Vec<f64>),
    Distances(Matrix),
}

impl Prediction {
    pub fn len(&self) -> usize {
        match self {
            Prediction::Depths(d) => d.len(),
            Prediction::Distances(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Whether every gold entry for `target` is masked.
pub fn all_masked(gold: &GoldLabels, target: Target) -> bool {
    match target {
        Target::Depth => gold.unmasked_depths() == 0,
        Target::Distance => gold.unmasked_pairs() == 0,
    }
}

/// Sentence-normalized L1 loss: `1/s²` over ordered pairs for distances,
/// `1/s` over tokens for depths. Masked gold entries are skipped.
pub fn data_loss(pred: &Prediction, gold: &GoldLabels) -> Result<f64> {
    let s = gold.len();
    if pred.len() != s {
        return Err(Error::InvalidArgument(format!(
            "prediction for {} tokens, gold for {}",
            pred.len(),
            s
        )));
    }
    let sf = s as f64;
    Ok(match pred {
        Prediction::Depths(p) => {
            let sum: f64 = p
                .iter()
                .zip(gold.depths())
                .filter_map(|(pv, g)| g.map(|g| (g - pv).abs()))
                .sum();
            sum / sf
        }
        Prediction::Distances(p) => {
            let mut sum = 0.0;
            for i in 0..s {
                for j in 0..s {
                    if i == j {
                        continue;
                    }
                    if let Some(g) = gold.distance(i, j) {
                        sum += (g - p[(i, j)]).abs();
                    }
                }
            }
            sum / (sf * sf)
        }
    })
}

/// One sentence paired with its gold labels.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub embeddings: &'a Matrix,
    pub gold: &'a GoldLabels,
}

/// Breakdown of a batch loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLoss {
    /// Mean data term plus the active penalties.
    pub total: f64,
    pub data: f64,
    /// `λ_O · DSO(V)`, 0 for linear probes.
    pub orthogonality: f64,
    /// `λ_S · ‖d̄_o‖₁` when sparsity is active, else 0.
    pub sparsity: f64,
    /// Sentences whose labels were entirely masked.
    pub skipped: usize,
}

/// Loss of `batch` for `objective`, with its breakdown.
pub fn batch_loss(
    params: &ProbeParams,
    hyper: &Hyperparams,
    batch: &[Example<'_>],
    objective: ObjectiveId,
    sparsity_active: bool,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut data = 0.0;
    let mut skipped = 0;
    for ex in batch {
        if all_masked(ex.gold, objective.target) {
            skipped += 1;
            continue;
        }
        data += data_loss(&params.predict(objective, ex.embeddings)?, ex.gold)?;
    }
    data /= batch.len() as f64;
    let (orthogonality, sparsity) = match params {
        ProbeParams::Orthogonal(p) => (
            hyper.lambda_o * dso_penalty(&p.v)?,
            if sparsity_active {
                hyper.lambda_s * l1_penalty(p.scaler(objective)?)
            } else {
                0.0
            },
        ),
        ProbeParams::Linear(_) => (0.0, 0.0),
    };
    Ok(BatchLoss {
        total: data + orthogonality + sparsity,
        data,
        orthogonality,
        sparsity,
        skipped,
    })
}

/// Mean data loss over the batch plus `λ_O·DSO(V)` plus, when active,
/// `λ_S·‖d̄_o‖₁`. Penalties are zero for linear probes.
pub fn total_loss(
    params: &ProbeParams,
    hyper: &Hyperparams,
    batch: &[Example<'_>],
    objective: ObjectiveId,
    sparsity_active: bool,
) -> Result<f64> {
    Ok(batch_loss(params, hyper, batch, objective, sparsity_active)?.total)
}

/// Gradients of [`total_loss`]. Only the parameters touched by the batch's
/// objective are present.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientBundle {
    pub v: Option<Matrix>,
    pub scalers: BTreeMap<ObjectiveId, Vec<f64>>,
    pub maps: BTreeMap<ObjectiveId, Matrix>,
}

impl GradientBundle {
    pub fn is_finite(&self) -> bool {
        self.v.as_ref().is_none_or(|m| m.is_finite())
            && self.scalers.values().all(|d| d.iter().all(|x| x.is_finite()))
            && self.maps.values().all(|m| m.is_finite())
    }
}

fn kink_sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-token loss slopes `∂loss/∂pred_i` for a depth objective.
fn depth_slopes(pred: &[f64], gold: &GoldLabels) -> Vec<f64> {
    let s = pred.len() as f64;
    pred.iter()
        .zip(gold.depths())
        .map(|(&p, g)| g.map_or(0.0, |g| kink_sign(p - g) / s))
        .collect()
}

/// Symmetric pair slopes `∂loss/∂pred_ij` over ordered pairs.
fn distance_slopes(pred: &Matrix, gold: &GoldLabels) -> Matrix {
    let n = pred.rows();
    let s2 = (n * n) as f64;
    let mut c = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                if let Some(g) = gold.distance(i, j) {
                    c[(i, j)] = kink_sign(pred[(i, j)] - g) / s2;
                }
            }
        }
    }
    c
}

/// `(diag(rowsum C) − C) · Y`, used for `Σ_ij c_ij (y_i − y_j)` style sums.
fn laplacian_times(c: &Matrix, y: &Matrix) -> Matrix {
    let n = c.rows();
    let mut out = Matrix::zeros(n, y.cols());
    for i in 0..n {
        let r: f64 = c.row(i).iter().sum();
        let out_row = out.row_mut(i);
        for (o, &v) in out_row.iter_mut().zip(y.row(i)) {
            *o += r * v;
        }
        for j in 0..n {
            let cij = c[(i, j)];
            if cij == 0.0 {
                continue;
            }
            for (o, &v) in out.row_mut(i).iter_mut().zip(y.row(j)) {
                *o -= cij * v;
            }
        }
    }
    out
}

/// Adds one sentence's data-term gradient for the orthogonal probe.
fn accumulate_orthogonal(
    v: &Matrix,
    d: &[f64],
    ex: &Example<'_>,
    target: Target,
    weight: f64,
    grad_v: &mut Matrix,
    grad_d: &mut [f64],
) -> Result<()> {
    let h = ex.embeddings;
    check_scaler(v, d, h)?;
    let z = h.matmul(v)?;
    let w: Vec<f64> = d.iter().map(|x| x * x).collect();
    let dim = d.len();
    // m has rows dL/dz_i (before the d² factor); grad_V = Hᵀ m · diag(2w).
    let m = match target {
        Target::Depth => {
            let y = rotate_and_scale(v, d, h);
            let slopes = depth_slopes(&row_sq_norms(&y), ex.gold);
            let mut m = z.clone();
            for (i, &c) in slopes.iter().enumerate() {
                let zi = z.row(i);
                for k in 0..dim {
                    grad_d[k] += weight * c * 2.0 * d[k] * zi[k] * zi[k];
                }
                for x in m.row_mut(i) {
                    *x *= c;
                }
            }
            m
        }
        Target::Distance => {
            let y = rotate_and_scale(v, d, h);
            let slopes = distance_slopes(&pairwise_sq_dists(&y), ex.gold);
            let n = z.rows();
            for i in 0..n {
                for j in 0..n {
                    let c = slopes[(i, j)];
                    if c == 0.0 {
                        continue;
                    }
                    let (zi, zj) = (z.row(i), z.row(j));
                    for k in 0..dim {
                        let diff = zi[k] - zj[k];
                        grad_d[k] += weight * c * 2.0 * d[k] * diff * diff;
                    }
                }
            }
            // Σ_ij c_ij (h_i − h_j)(z_i − z_j)ᵀ = 2 Hᵀ L Z.
            laplacian_times(&slopes, &z).scale(2.0)
        }
    };
    let mut g = h.tr_matmul(&m)?;
    for r in 0..g.rows() {
        for (x, wk) in g.row_mut(r).iter_mut().zip(&w) {
            *x *= 2.0 * wk;
        }
    }
    grad_v.axpy(weight, &g);
    Ok(())
}

/// Adds one sentence's data-term gradient for a linear map.
fn accumulate_linear(
    b: &Matrix,
    ex: &Example<'_>,
    target: Target,
    weight: f64,
    grad_b: &mut Matrix,
) -> Result<()> {
    let h = ex.embeddings;
    check_shapes(b, h)?;
    let y = h.matmul(&b.transpose())?;
    // grad_B = Σ c · 2 (B δ) δᵀ, written as 2·Yᵀ·M with M built from the slopes.
    let m = match target {
        Target::Depth => {
            let slopes = depth_slopes(&row_sq_norms(&y), ex.gold);
            let mut m = h.clone();
            for (i, &c) in slopes.iter().enumerate() {
                for x in m.row_mut(i) {
                    *x *= c;
                }
            }
            m
        }
        Target::Distance => {
            let slopes = distance_slopes(&pairwise_sq_dists(&y), ex.gold);
            laplacian_times(&slopes, h).scale(2.0)
        }
    };
    grad_b.axpy(2.0 * weight, &y.tr_matmul(&m)?);
    Ok(())
}

/// Analytic gradients of [`total_loss`] with respect to `V` and the active
/// scaling vector (orthogonal probe) or the active map (linear probe).
/// Absolute-value and L1 kinks take subgradient 0.
pub fn loss_gradients(
    params: &ProbeParams,
    hyper: &Hyperparams,
    batch: &[Example<'_>],
    objective: ObjectiveId,
    sparsity_active: bool,
) -> Result<GradientBundle> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let weight = 1.0 / batch.len() as f64;
    let mut bundle = GradientBundle::default();
    match params {
        ProbeParams::Orthogonal(p) => {
            let d = p.scaler(objective)?;
            let mut grad_v = Matrix::zeros(p.dim(), p.dim());
            let mut grad_d = vec![0.0; p.dim()];
            for ex in batch {
                accumulate_orthogonal(&p.v, d, ex, objective.target, weight, &mut grad_v, &mut grad_d)?;
            }
            if hyper.lambda_o != 0.0 {
                grad_v.axpy(hyper.lambda_o, &dso_gradient(&p.v)?);
            }
            if sparsity_active && hyper.lambda_s != 0.0 {
                for (g, s) in grad_d.iter_mut().zip(l1_subgradient(d)) {
                    *g += hyper.lambda_s * s;
                }
            }
            bundle.v = Some(grad_v);
            bundle.scalers.insert(objective, grad_d);
        }
        ProbeParams::Linear(p) => {
            let b = p.map(objective)?;
            let mut grad_b = Matrix::zeros(b.rows(), b.cols());
            for ex in batch {
                accumulate_linear(b, ex, objective.target, weight, &mut grad_b)?;
            }
            bundle.maps.insert(objective, grad_b);
        }
    }
    Ok(bundle)
}

/// Trainable parameter count of a joint orthogonal probe: `dim² + dim·n`.
pub fn parameter_count(dim: usize, n_objectives: usize) -> usize {
    dim * dim + dim * n_objectives
}

/// Degrees of freedom of a joint orthogonal probe: `dim(dim−1)/2 + dim·n`.
pub fn degrees_of_freedom(dim: usize, n_objectives: usize) -> usize {
    dim * (dim - 1) / 2 + dim * n_objectives
}
