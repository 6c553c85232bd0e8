//! Consensus objectives and their gradients.
//!
//! * classifying consensus: conditional entropy of one view's latent class
//!   given another's, traded against the marginal entropies, computed from
//!   the cross-view joint class distribution of the augmented batches;
//! * coding consensus: hard pseudolabels from the original batch supervise
//!   the augmented batch of the same view (or, optionally, a symmetric
//!   cross-entropy between views);
//! * global consensus: negated trace of the cross-view latent products;
//! * reconstruction: squared error of both autoencoder passes.
//!
//! Every loss returns its value together with the gradient w.r.t. the tensors
//! it consumes. Sums over samples are taken over the current batch, and the
//! joint distribution uses the batch size as its normalizer.

use serde::{Deserialize, Serialize};

use crate::error::{HcnError, Result};
use crate::model::{BundleGradients, ForwardBundle};
use crate::numerics::{
    clamped_ln, matmul, matmul_nt, matmul_tn, row_l2_normalize, row_l2_normalize_backward, softmax_backward,
    trace_product, DenseMatrix, LOG_EPS,
};

const STOCHASTIC_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for ConsensusWeights {
    fn default() -> Self {
        ConsensusWeights {
            alpha: 3.0,
            beta: 3.6,
            gamma: 9.5,
            lambda1: 0.01,
            lambda2: 0.3,
        }
    }
}

impl ConsensusWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(HcnError::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn zero() -> Self {
        ConsensusWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            lambda1: 0.0,
            lambda2: 0.0,
        }
    }
}

/// How the coding-consensus term is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CodingMode {
    /// Pseudolabels of the original batch supervise the augmented batch, per view.
    #[default]
    WeakToStrong,
    /// Symmetric cross-entropy between the class posteriors of two views.
    CrossView,
}

/// Normalized cross-view joint distribution over latent classes with its marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct JointClassDistribution {
    joint: DenseMatrix,
    marginal_u: Vec<f64>,
    marginal_v: Vec<f64>,
}

impl JointClassDistribution {
    /// Wraps an already normalized joint matrix.
    pub fn from_joint(joint: DenseMatrix) -> Result<Self> {
        if joint.as_slice().iter().any(|&p| !(p >= 0.0)) {
            return Err(HcnError::InvalidArgument("joint distribution has negative entries".into()));
        }
        let total = joint.sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(HcnError::InvalidArgument(format!("joint distribution sums to {total}")));
        }
        Ok(JointClassDistribution {
            marginal_u: joint.row_sums(),
            marginal_v: joint.column_sums(),
            joint,
        })
    }

    pub fn joint(&self) -> &DenseMatrix {
        &self.joint
    }

    /// `p(c_u)`, the row sums.
    pub fn marginal_u(&self) -> &[f64] {
        &self.marginal_u
    }

    /// `p(c_v)`, the column sums.
    pub fn marginal_v(&self) -> &[f64] {
        &self.marginal_v
    }

    pub fn transpose(&self) -> JointClassDistribution {
        JointClassDistribution {
            joint: self.joint.transpose(),
            marginal_u: self.marginal_v.clone(),
            marginal_v: self.marginal_u.clone(),
        }
    }
}

fn check_stochastic(y: &DenseMatrix) -> Result<()> {
    for (i, row) in y.row_iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL || row.iter().any(|&p| !(p >= 0.0)) {
            return Err(HcnError::NotStochastic { row: i, sum });
        }
    }
    Ok(())
}

fn check_pair(op: &'static str, a: &DenseMatrix, b: &DenseMatrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(HcnError::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

/// `(1/n) Y_uᵀ Y_v` before normalization by its total.
fn unnormalized_joint(y_u: &DenseMatrix, y_v: &DenseMatrix) -> Result<DenseMatrix> {
    let mut joint = matmul_tn(y_u, y_v)?;
    joint.scale(1.0 / y_u.rows() as f64);
    Ok(joint)
}

/// Joint class probability `p(c_u = j, c_v = h) ∝ (1/n) Σ_i y_u[i][j] y_v[i][h]`,
/// normalized to sum to one.
pub fn joint_class_prob(y_u: &DenseMatrix, y_v: &DenseMatrix) -> Result<JointClassDistribution> {
    check_pair("joint_class_prob", y_u, y_v)?;
    if y_u.rows() == 0 {
        return Err(HcnError::InvalidArgument("joint_class_prob needs at least one sample".into()));
    }
    check_stochastic(y_u)?;
    check_stochastic(y_v)?;
    let mut joint = unnormalized_joint(y_u, y_v)?;
    let total = joint.sum();
    joint.scale(1.0 / total);
    Ok(JointClassDistribution {
        marginal_u: joint.row_sums(),
        marginal_v: joint.column_sums(),
        joint,
    })
}

/// Shannon entropy in nats, `−Σ p log p` with the log clamp.
pub fn entropy(p: &[f64]) -> Result<f64> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(HcnError::InvalidArgument(format!(
            "not a probability vector (sum {sum})"
        )));
    }
    Ok(entropy_unchecked(p))
}

fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter().map(|&v| v * clamped_ln(v, LOG_EPS)).sum::<f64>()
}

/// `∂H/∂p_k` for the clamped entropy.
fn entropy_grad(p: &[f64]) -> Vec<f64> {
    p.iter()
        .map(|&v| -(clamped_ln(v, LOG_EPS) + if v > LOG_EPS { 1.0 } else { 0.0 }))
        .collect()
}

/// Which variable the conditional entropy conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Given {
    /// `H(c_u | c_v)`
    V,
    /// `H(c_v | c_u)`
    U,
}

/// `H(c_u | c_v) = −Σ_jh p_jh log(p_jh / p_v[h])`, or the mirrored form.
pub fn conditional_entropy(d: &JointClassDistribution, given: Given) -> f64 {
    match given {
        Given::V => conditional_entropy_value(&d.joint, &d.marginal_v),
        Given::U => conditional_entropy_value(&d.joint.transpose(), &d.marginal_u),
    }
}

/// Conditional entropy of the row variable given the column variable.
fn conditional_entropy_value(joint: &DenseMatrix, col_marginal: &[f64]) -> f64 {
    let mut h = 0.0;
    for j in 0..joint.rows() {
        for (p, &m) in joint.row(j).iter().zip(col_marginal) {
            if m > 0.0 {
                h -= p * clamped_ln(p / m, LOG_EPS);
            }
        }
    }
    h
}

/// Gradient of [`conditional_entropy_value`] w.r.t. the joint, where the
/// column marginal is itself the column sums of the joint.
fn conditional_entropy_grad(joint: &DenseMatrix, col_marginal: &[f64]) -> DenseMatrix {
    let (rows, cols) = joint.shape();
    let mut grad = DenseMatrix::zeros(rows, cols);
    let mut via_marginal = vec![0.0; cols];
    for j in 0..rows {
        for h in 0..cols {
            let p = joint.get(j, h);
            let m = col_marginal[h];
            let ratio = if m > 0.0 { p / m } else { 0.0 };
            if ratio > LOG_EPS {
                grad.set(j, h, -(ratio.ln() + 1.0));
                via_marginal[h] += ratio;
            } else {
                grad.set(j, h, -LOG_EPS.ln());
            }
        }
    }
    for j in 0..rows {
        for (g, d) in grad.row_mut(j).iter_mut().zip(&via_marginal) {
            *g += d;
        }
    }
    grad
}

/// `|H(c_u|c_v) − H(c_u) + H(c_v) − H(c_v|c_u)|`, zero up to rounding for any joint.
pub fn entropy_identity_check(d: &JointClassDistribution) -> f64 {
    let h_u_given_v = conditional_entropy(d, Given::V);
    let h_v_given_u = conditional_entropy(d, Given::U);
    let h_u = entropy_unchecked(&d.marginal_u);
    let h_v = entropy_unchecked(&d.marginal_v);
    (h_u_given_v - h_u + h_v - h_v_given_u).abs()
}

/// A loss term for one ordered view pair `u > v` or one view (`u == v`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairTerm {
    pub u: usize,
    pub v: usize,
    pub value: f64,
}

/// Ordered pairs `(u, v)` with `u > v`.
pub fn view_pairs(n_views: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n_views).flat_map(move |u| (0..u).map(move |v| (u, v)))
}

#[derive(Debug, Clone)]
pub struct ClassifyingLoss {
    pub value: f64,
    pub per_pair: Vec<PairTerm>,
    /// Gradient w.r.t. each view's augmented class posteriors.
    pub grad_y_aug: Vec<DenseMatrix>,
}

/// `Σ_{u>v} α H(c_u|c_v) − β H(c_u) − γ H(c_v)` over the augmented posteriors.
pub fn classifying_loss(y_aug: &[&DenseMatrix], w: &ConsensusWeights) -> Result<ClassifyingLoss> {
    if y_aug.len() < 2 {
        return Err(HcnError::TooFewViews(y_aug.len()));
    }
    let mut grad_y_aug: Vec<DenseMatrix> = y_aug.iter().map(|y| DenseMatrix::zeros(y.rows(), y.cols())).collect();
    let mut per_pair = Vec::new();
    let mut value = 0.0;
    for (u, v) in view_pairs(y_aug.len()) {
        let (y_u, y_v) = (y_aug[u], y_aug[v]);
        let dist = joint_class_prob(y_u, y_v)?;
        let h_cond = conditional_entropy(&dist, Given::V);
        let h_u = entropy_unchecked(&dist.marginal_u);
        let h_v = entropy_unchecked(&dist.marginal_v);
        let pair_value = w.alpha * h_cond - w.beta * h_u - w.gamma * h_v;
        value += pair_value;
        per_pair.push(PairTerm { u, v, value: pair_value });

        // dL/dP for the normalized joint
        let mut g = conditional_entropy_grad(&dist.joint, &dist.marginal_v);
        g.scale(w.alpha);
        let gu = entropy_grad(&dist.marginal_u);
        let gv = entropy_grad(&dist.marginal_v);
        let k = g.cols();
        for j in 0..g.rows() {
            for h in 0..k {
                let e = g.get(j, h) - w.beta * gu[j] - w.gamma * gv[h];
                g.set(j, h, e);
            }
        }
        // through P = P̃ / ΣP̃
        let raw_total = unnormalized_joint(y_u, y_v)?.sum();
        let mean = trace_product(&g, &dist.joint)?;
        let mut d_raw = g.map(|e| (e - mean) / raw_total);
        // through P̃ = (1/b) Y_uᵀ Y_v
        d_raw.scale(1.0 / y_u.rows() as f64);
        grad_y_aug[u].add_assign(&matmul_nt(y_v, &d_raw)?)?;
        grad_y_aug[v].add_assign(&matmul(y_u, &d_raw)?)?;
    }
    Ok(ClassifyingLoss {
        value,
        per_pair,
        grad_y_aug,
    })
}

/// One-hot argmax per row; ties go to the lowest column. Carries no gradient.
pub fn pseudolabels(y: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(y.rows(), y.cols());
    for i in 0..y.rows() {
        let row = y.row(i);
        let mut best = 0;
        for (j, &p) in row.iter().enumerate().skip(1) {
            if p > row[best] {
                best = j;
            }
        }
        if !row.is_empty() {
            out.set(i, best, 1.0);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct CodingLoss {
    pub value: f64,
    pub per_view: Vec<f64>,
    pub grad_y_aug: Vec<DenseMatrix>,
}

/// Weak-to-strong pseudo-supervision: `−Σ_v Σ_i t̂_iᵀ log y_aug,i`.
pub fn coding_loss(t_hat: &[&DenseMatrix], y_aug: &[&DenseMatrix]) -> Result<CodingLoss> {
    if t_hat.len() != y_aug.len() {
        return Err(HcnError::InvalidArgument(format!(
            "{} pseudolabel blocks for {} views",
            t_hat.len(),
            y_aug.len()
        )));
    }
    let mut per_view = Vec::with_capacity(y_aug.len());
    let mut grad_y_aug = Vec::with_capacity(y_aug.len());
    for (t, y) in t_hat.iter().zip(y_aug) {
        check_pair("coding_loss", t, y)?;
        let mut v_loss = 0.0;
        let mut grad = DenseMatrix::zeros(y.rows(), y.cols());
        for ((g, &tv), &yv) in grad.as_mut_slice().iter_mut().zip(t.as_slice()).zip(y.as_slice()) {
            if tv != 0.0 {
                v_loss -= tv * clamped_ln(yv, LOG_EPS);
                if yv > LOG_EPS {
                    *g = -tv / yv;
                }
            }
        }
        per_view.push(v_loss);
        grad_y_aug.push(grad);
    }
    Ok(CodingLoss {
        value: per_view.iter().sum(),
        per_view,
        grad_y_aug,
    })
}

#[derive(Debug, Clone)]
pub struct CrossViewCodingLoss {
    pub value: f64,
    pub per_pair: Vec<PairTerm>,
    pub grad_y: Vec<DenseMatrix>,
}

/// `−Σ_{u>v} Σ_i (y_v,iᵀ log y_u,i + y_u,iᵀ log y_v,i)`, which for two views is the
/// symmetric cross-view cross-entropy.
pub fn cross_view_coding_loss(y: &[&DenseMatrix]) -> Result<CrossViewCodingLoss> {
    if y.len() < 2 {
        return Err(HcnError::TooFewViews(y.len()));
    }
    let mut grad_y: Vec<DenseMatrix> = y.iter().map(|m| DenseMatrix::zeros(m.rows(), m.cols())).collect();
    let mut per_pair = Vec::new();
    for (u, v) in view_pairs(y.len()) {
        check_pair("cross_view_coding_loss", y[u], y[v])?;
        let mut value = 0.0;
        let (yu, yv) = (y[u].as_slice(), y[v].as_slice());
        let mut gu = vec![0.0; yu.len()];
        let mut gv = vec![0.0; yv.len()];
        for k in 0..yu.len() {
            let (lu, lv) = (clamped_ln(yu[k], LOG_EPS), clamped_ln(yv[k], LOG_EPS));
            value -= yv[k] * lu + yu[k] * lv;
            gu[k] = -lv - if yu[k] > LOG_EPS { yv[k] / yu[k] } else { 0.0 };
            gv[k] = -lu - if yv[k] > LOG_EPS { yu[k] / yv[k] } else { 0.0 };
        }
        let (rows, cols) = y[u].shape();
        grad_y[u].add_assign(&DenseMatrix::from_vec(rows, cols, gu)?)?;
        grad_y[v].add_assign(&DenseMatrix::from_vec(rows, cols, gv)?)?;
        per_pair.push(PairTerm { u, v, value });
    }
    Ok(CrossViewCodingLoss {
        value: per_pair.iter().map(|t| t.value).sum(),
        per_pair,
        grad_y,
    })
}

#[derive(Debug, Clone)]
pub struct GlobalLoss {
    pub value: f64,
    pub per_pair: Vec<PairTerm>,
    pub grad_z: Vec<DenseMatrix>,
    /// Empty when no augmented features were given.
    pub grad_z_aug: Vec<DenseMatrix>,
}

/// `−Σ_{u>v} tr(Z_uᵀ Z_v) + tr(Z_aug,uᵀ Z_aug,v)`.
///
/// With `normalize`, every latent row is scaled to unit length first, so each
/// trace is a sum of per-sample cosine similarities. Pass an empty `z_aug`
/// to drop the augmented term.
pub fn global_loss(z: &[&DenseMatrix], z_aug: &[&DenseMatrix], normalize: bool) -> Result<GlobalLoss> {
    if z.len() < 2 {
        return Err(HcnError::TooFewViews(z.len()));
    }
    if !z_aug.is_empty() && z_aug.len() != z.len() {
        return Err(HcnError::InvalidArgument(format!(
            "{} augmented blocks for {} views",
            z_aug.len(),
            z.len()
        )));
    }
    let (value_plain, per_plain, grad_z) = global_term(z, normalize)?;
    let mut per_pair = per_plain;
    let mut value = value_plain;
    let mut grad_z_aug = Vec::new();
    if !z_aug.is_empty() {
        let (value_aug, per_aug, g) = global_term(z_aug, normalize)?;
        value += value_aug;
        for (t, a) in per_pair.iter_mut().zip(per_aug) {
            t.value += a.value;
        }
        grad_z_aug = g;
    }
    Ok(GlobalLoss {
        value,
        per_pair,
        grad_z,
        grad_z_aug,
    })
}

fn global_term(z: &[&DenseMatrix], normalize: bool) -> Result<(f64, Vec<PairTerm>, Vec<DenseMatrix>)> {
    let feats: Vec<DenseMatrix> = if normalize {
        z.iter().map(|m| row_l2_normalize(m)).collect()
    } else {
        z.iter().map(|m| (*m).clone()).collect()
    };
    let mut grads: Vec<DenseMatrix> = z.iter().map(|m| DenseMatrix::zeros(m.rows(), m.cols())).collect();
    let mut per_pair = Vec::new();
    let mut value = 0.0;
    for (u, v) in view_pairs(z.len()) {
        let t = -trace_product(&feats[u], &feats[v])?;
        value += t;
        per_pair.push(PairTerm { u, v, value: t });
        grads[u].add_scaled(&feats[v], -1.0)?;
        grads[v].add_scaled(&feats[u], -1.0)?;
    }
    if normalize {
        for (g, m) in grads.iter_mut().zip(z) {
            *g = row_l2_normalize_backward(m, g)?;
        }
    }
    Ok((value, per_pair, grads))
}

#[derive(Debug, Clone)]
pub struct ReconstructionLoss {
    pub value: f64,
    pub per_view: Vec<f64>,
    pub grad_x_hat: Vec<DenseMatrix>,
    pub grad_x_hat_aug: Vec<DenseMatrix>,
}

/// `Σ_v ‖X − X̂‖²_F + ‖X_aug − X̂_aug‖²_F`
pub fn reconstruction_loss(bundle: &ForwardBundle, batch: &[DenseMatrix]) -> Result<ReconstructionLoss> {
    if batch.len() != bundle.n_views() {
        return Err(HcnError::InvalidArgument(format!(
            "{} views in the batch, {} in the bundle",
            batch.len(),
            bundle.n_views()
        )));
    }
    let mut per_view = Vec::new();
    let mut grad_x_hat = Vec::new();
    let mut grad_x_hat_aug = Vec::new();
    for (pass, x) in bundle.views.iter().zip(batch) {
        check_pair("reconstruction_loss", x, pass.x_hat())?;
        let mut g = pass.x_hat().clone();
        g.add_scaled(x, -1.0)?;
        let mut g_aug = pass.x_hat_aug().clone();
        g_aug.add_scaled(&pass.x_aug, -1.0)?;
        let sq = |m: &DenseMatrix| m.as_slice().iter().map(|v| v * v).sum::<f64>();
        per_view.push(sq(&g) + sq(&g_aug));
        g.scale(2.0);
        g_aug.scale(2.0);
        grad_x_hat.push(g);
        grad_x_hat_aug.push(g_aug);
    }
    Ok(ReconstructionLoss {
        value: per_view.iter().sum(),
        per_view,
        grad_x_hat,
        grad_x_hat_aug,
    })
}

/// Switches that shape the total objective beyond the weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    pub normalize_global: bool,
    pub coding_mode: CodingMode,
    /// When off, the reconstruction term is neither computed nor optimized and is logged as 0.
    pub reconstruction: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            normalize_global: true,
            coding_mode: CodingMode::WeakToStrong,
            reconstruction: true,
        }
    }
}

/// Per-term loss values of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub cls: f64,
    pub code: f64,
    pub glb: f64,
    pub total: f64,
    pub rec_per_view: Vec<f64>,
    pub cls_per_pair: Vec<PairTerm>,
    /// Per view for weak-to-strong coding, per pair (`u > v`) for cross-view coding.
    pub code_terms: Vec<PairTerm>,
    pub glb_per_pair: Vec<PairTerm>,
}

impl LossBreakdown {
    /// `rec + cls + λ1·code + λ2·glb`
    pub fn recompose(&self, w: &ConsensusWeights) -> f64 {
        self.rec + self.cls + w.lambda1 * self.code + w.lambda2 * self.glb
    }

    /// Name of the first non-finite term, in logging order.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("rec", self.rec),
            ("cls", self.cls),
            ("code", self.code),
            ("glb", self.glb),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }

    pub const CSV_HEADER: &'static str = "epoch,step,rec,cls,code,glb,total";

    pub fn csv_row(&self, epoch: usize, step: usize) -> String {
        format!(
            "{epoch},{step},{},{},{},{},{}",
            self.rec, self.cls, self.code, self.glb, self.total
        )
    }
}

/// `L = L_rec + L_cls + λ1 L_code + λ2 L_glb` with gradients on every bundle tensor.
pub fn total_loss(
    bundle: &ForwardBundle,
    batch: &[DenseMatrix],
    w: &ConsensusWeights,
    opts: &LossOptions,
) -> Result<(LossBreakdown, BundleGradients)> {
    let n_views = bundle.n_views();
    if n_views < 2 {
        return Err(HcnError::TooFewViews(n_views));
    }
    let mut grads = BundleGradients::zeros_like(bundle);

    let (rec, rec_per_view) = if opts.reconstruction {
        let r = reconstruction_loss(bundle, batch)?;
        for ((g, dx), dx_aug) in grads.views.iter_mut().zip(r.grad_x_hat).zip(r.grad_x_hat_aug) {
            g.dx_hat = dx;
            g.dx_hat_aug = dx_aug;
        }
        (r.value, r.per_view)
    } else {
        (0.0, vec![0.0; n_views])
    };

    let y = bundle.y();
    let y_aug = bundle.y_aug();
    let cls = classifying_loss(&y_aug, w)?;
    // upstream on Y_aug and Y, pulled through the softmax once at the end
    let mut dy_aug = cls.grad_y_aug;
    let mut dy: Vec<DenseMatrix> = y.iter().map(|m| DenseMatrix::zeros(m.rows(), m.cols())).collect();

    let (code, code_terms) = match opts.coding_mode {
        CodingMode::WeakToStrong => {
            let t_hat: Vec<DenseMatrix> = y.iter().map(|m| pseudolabels(m)).collect();
            let t_refs: Vec<&DenseMatrix> = t_hat.iter().collect();
            let c = coding_loss(&t_refs, &y_aug)?;
            if w.lambda1 != 0.0 {
                for (d, g) in dy_aug.iter_mut().zip(&c.grad_y_aug) {
                    d.add_scaled(g, w.lambda1)?;
                }
            }
            let terms = c.per_view.iter().enumerate().map(|(v, &value)| PairTerm { u: v, v, value }).collect();
            (c.value, terms)
        }
        CodingMode::CrossView => {
            let c = cross_view_coding_loss(&y)?;
            if w.lambda1 != 0.0 {
                for (d, g) in dy.iter_mut().zip(&c.grad_y) {
                    d.add_scaled(g, w.lambda1)?;
                }
            }
            (c.value, c.per_pair)
        }
    };

    let glb = global_loss(&bundle.z(), &bundle.z_aug(), opts.normalize_global)?;
    for (v, g) in grads.views.iter_mut().enumerate() {
        g.dz_aug = softmax_backward(y_aug[v], &dy_aug[v])?;
        if opts.coding_mode == CodingMode::CrossView && w.lambda1 != 0.0 {
            g.dz = softmax_backward(y[v], &dy[v])?;
        }
        if w.lambda2 != 0.0 {
            g.dz.add_scaled(&glb.grad_z[v], w.lambda2)?;
            g.dz_aug.add_scaled(&glb.grad_z_aug[v], w.lambda2)?;
        }
    }

    let mut breakdown = LossBreakdown {
        rec,
        cls: cls.value,
        code,
        glb: glb.value,
        total: 0.0,
        rec_per_view,
        cls_per_pair: cls.per_pair,
        code_terms,
        glb_per_pair: glb.per_pair,
    };
    breakdown.total = breakdown.recompose(w);
    Ok((breakdown, grads))
}

/// Agreement of class column `j` across two prediction matrices.
pub fn column_consensus_index(a: &DenseMatrix, b: &DenseMatrix, j: usize) -> Result<f64> {
    check_pair("column_consensus_index", a, b)?;
    Ok((0..a.rows()).map(|i| a.get(i, j) * b.get(i, j)).sum())
}

/// Agreement of the codes of sample `i` across two prediction matrices.
pub fn row_consensus_index(a: &DenseMatrix, b: &DenseMatrix, i: usize) -> Result<f64> {
    check_pair("row_consensus_index", a, b)?;
    Ok(a.row(i).iter().zip(b.row(i)).map(|(x, y)| x * y).sum())
}

/// Whole-matrix agreement `tr(aᵀ b)`.
pub fn global_consensus_index(a: &DenseMatrix, b: &DenseMatrix) -> Result<f64> {
    trace_product(a, b)
}

/// Both sides of the positive-pair reduction: `(−log s(z1, z2), ‖z1 − z2‖²)`
/// with the Gaussian similarity `s = exp(−‖z1 − z2‖²)`.
pub fn positive_pair_equivalence(z1: &[f64], z2: &[f64]) -> Result<(f64, f64)> {
    if z1.len() != z2.len() {
        return Err(HcnError::ShapeMismatch {
            op: "positive_pair_equivalence",
            left: (1, z1.len()),
            right: (1, z2.len()),
        });
    }
    let sq: f64 = z1.iter().zip(z2).map(|(a, b)| (a - b) * (a - b)).sum();
    let similarity = (-sq).exp();
    Ok((-similarity.ln(), sq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::softmax_rows;
    use crate::rng::{stream_rng, Stream};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_logits(seed: u64, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
        let mut rng = stream_rng(seed, Stream::GradCheck, 7);
        let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
        DenseMatrix::from_vec(rows, cols, data).unwrap()
    }

    fn one_hot(labels: &[usize], k: usize) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(labels.len(), k);
        for (i, &l) in labels.iter().enumerate() {
            m.set(i, l, 1.0);
        }
        m
    }

    fn weights(alpha: f64, beta: f64, gamma: f64) -> ConsensusWeights {
        ConsensusWeights {
            alpha,
            beta,
            gamma,
            lambda1: 0.0,
            lambda2: 0.0,
        }
    }

    /// Entry-by-entry evaluation of the normalized joint.
    fn brute_joint(yu: &DenseMatrix, yv: &DenseMatrix) -> Vec<Vec<f64>> {
        let (n, k) = yu.shape();
        let mut p = vec![vec![0.0; k]; k];
        for j in 0..k {
            for h in 0..k {
                for i in 0..n {
                    p[j][h] += yu.get(i, j) * yv.get(i, h);
                }
                p[j][h] /= n as f64;
            }
        }
        let total: f64 = p.iter().flatten().sum();
        p.iter_mut().flatten().for_each(|v| *v /= total);
        p
    }

    #[test]
    fn joint_of_balanced_one_hot_is_diagonal() {
        let y = one_hot(&[0, 1, 2, 0, 1, 2], 3);
        let d = joint_class_prob(&y, &y).unwrap();
        for j in 0..3 {
            for h in 0..3 {
                let expected = if j == h { 1.0 / 3.0 } else { 0.0 };
                assert!((d.joint().get(j, h) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn joint_worked_example() {
        let yu = DenseMatrix::from_rows(&[[0.6, 0.4], [0.2, 0.8]]).unwrap();
        let yv = DenseMatrix::from_rows(&[[0.5, 0.5], [0.3, 0.7]]).unwrap();
        let d = joint_class_prob(&yu, &yv).unwrap();
        let brute = brute_joint(&yu, &yv);
        let expected = [[0.18, 0.22], [0.22, 0.38]];
        for j in 0..2 {
            for h in 0..2 {
                assert!((brute[j][h] - expected[j][h]).abs() < 1e-12);
                assert!((d.joint().get(j, h) - expected[j][h]).abs() < 1e-12);
            }
        }
        assert!((d.marginal_u()[0] - 0.4).abs() < 1e-12);
        assert!((d.marginal_v()[1] - 0.6).abs() < 1e-12);

        let swapped = joint_class_prob(&yv, &yu).unwrap();
        assert_eq!(swapped.joint(), &d.joint().transpose());
    }

    #[test]
    fn joint_rejects_bad_inputs() {
        let good = DenseMatrix::from_rows(&[[0.5, 0.5]]).unwrap();
        let bad = DenseMatrix::from_rows(&[[0.5, 0.6]]).unwrap();
        assert!(matches!(joint_class_prob(&good, &bad), Err(HcnError::NotStochastic { row: 0, .. })));
        assert!(joint_class_prob(&good, &DenseMatrix::from_rows(&[[1.0, 0.0, 0.0]]).unwrap()).is_err());
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-15);
        // −(0.25 ln 0.25 + 0.75 ln 0.75)
        let direct = -(0.25 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        assert!((direct - 0.5623).abs() < 1e-4);
        assert!((entropy(&[0.25, 0.75]).unwrap() - direct).abs() < 1e-15);
        assert!(entropy(&[0.5, 0.6]).is_err());
        assert!(entropy(&[-0.5, 1.5]).is_err());
    }

    #[test]
    fn conditional_entropy_cases() {
        let diag = JointClassDistribution::from_joint(
            DenseMatrix::from_rows(&[[0.3, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 0.2]]).unwrap(),
        )
        .unwrap();
        assert!(conditional_entropy(&diag, Given::V).abs() < 1e-15);
        assert!(conditional_entropy(&diag, Given::U).abs() < 1e-15);

        let pu = [0.2, 0.3, 0.5];
        let pv = [0.6, 0.4];
        let mut prod = DenseMatrix::zeros(3, 2);
        for j in 0..3 {
            for h in 0..2 {
                prod.set(j, h, pu[j] * pv[h]);
            }
        }
        let prod = JointClassDistribution::from_joint(prod).unwrap();
        assert!((conditional_entropy(&prod, Given::V) - entropy(&pu).unwrap()).abs() < 1e-12);
        assert!((conditional_entropy(&prod, Given::U) - entropy(&pv).unwrap()).abs() < 1e-12);

        // worked joint: brute-force H(c_u|c_v) = −Σ p log(p / p_v)
        let yu = DenseMatrix::from_rows(&[[0.6, 0.4], [0.2, 0.8]]).unwrap();
        let yv = DenseMatrix::from_rows(&[[0.5, 0.5], [0.3, 0.7]]).unwrap();
        let d = joint_class_prob(&yu, &yv).unwrap();
        let p = brute_joint(&yu, &yv);
        let pv = [p[0][0] + p[1][0], p[0][1] + p[1][1]];
        let mut oracle = 0.0;
        for row in &p {
            for h in 0..2 {
                oracle -= row[h] * (row[h] / pv[h]).ln();
            }
        }
        assert!((conditional_entropy(&d, Given::V) - oracle).abs() < 1e-12);
    }

    #[test]
    fn identity_check_on_special_joints() {
        let diag = JointClassDistribution::from_joint(DenseMatrix::from_rows(&[[0.5, 0.0], [0.0, 0.5]]).unwrap()).unwrap();
        assert!(entropy_identity_check(&diag) < 1e-15);
        let prod = JointClassDistribution::from_joint(DenseMatrix::from_rows(&[[0.12, 0.28], [0.18, 0.42]]).unwrap()).unwrap();
        assert!(entropy_identity_check(&prod) < 1e-12);
    }

    #[test]
    fn pseudolabel_cases() {
        let y = DenseMatrix::from_rows(&[[0.1, 0.9], [0.5, 0.5]]).unwrap();
        let t = pseudolabels(&y);
        assert_eq!(t.as_slice(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(pseudolabels(&t), t);
    }

    #[test]
    fn classifying_loss_closed_forms() {
        let k = 4;
        let labels: Vec<usize> = (0..16).map(|i| i % k).collect();
        let y = one_hot(&labels, k);
        let w = weights(3.0, 3.6, 9.5);
        let aligned = classifying_loss(&[&y, &y], &w).unwrap();
        assert!((aligned.value + (3.6 + 9.5) * (k as f64).ln()).abs() < 1e-9);

        let uniform = DenseMatrix::filled(16, k, 1.0 / k as f64);
        let indep = classifying_loss(&[&uniform, &uniform], &w).unwrap();
        assert!((indep.value - (3.0 - 3.6 - 9.5) * (k as f64).ln()).abs() < 1e-9);

        assert!(matches!(classifying_loss(&[&y], &w), Err(HcnError::TooFewViews(1))));
    }

    /// Finite-difference check of a loss defined on row-softmax logits.
    fn check_through_softmax<F>(logits: &[DenseMatrix], f: F)
    where
        F: Fn(&[DenseMatrix]) -> (f64, Vec<DenseMatrix>),
    {
        let shapes: Vec<_> = logits.iter().map(|m| m.shape()).collect();
        let unflatten = |p: &[f64]| {
            let mut off = 0;
            shapes
                .iter()
                .map(|&(r, c)| {
                    let m = DenseMatrix::from_vec(r, c, p[off..off + r * c].to_vec()).unwrap();
                    off += r * c;
                    m
                })
                .collect::<Vec<_>>()
        };
        let flat: Vec<f64> = logits.iter().flat_map(|m| m.as_slice().to_vec()).collect();
        let report = crate::nn::grad_check(
            |p| {
                let z = unflatten(p);
                let y: Vec<DenseMatrix> = z.iter().map(softmax_rows).collect();
                let (value, dy) = f(&y);
                let grad = y
                    .iter()
                    .zip(&dy)
                    .flat_map(|(yv, g)| softmax_backward(yv, g).unwrap().into_vec())
                    .collect();
                (value, grad)
            },
            &flat,
            &crate::nn::GradCheckConfig::default(),
        );
        assert!(report.passed(), "{:?}", report.failures);
    }

    #[test]
    fn classifying_gradient_matches_finite_differences() {
        for n_views in [2, 3] {
            let logits: Vec<_> = (0..n_views).map(|v| random_logits(v as u64, 8, 4, 2.0)).collect();
            let w = weights(3.8, 2.7, 2.2);
            check_through_softmax(&logits, |y| {
                let refs: Vec<&DenseMatrix> = y.iter().collect();
                let l = classifying_loss(&refs, &w).unwrap();
                (l.value, l.grad_y_aug)
            });
        }
    }

    #[test]
    fn coding_loss_cases() {
        let t = DenseMatrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let half = DenseMatrix::from_rows(&[[0.5, 0.5]]).unwrap();
        let l = coding_loss(&[&t], &[&half]).unwrap();
        assert!((l.value - 2f64.ln()).abs() < 1e-12);

        let labels = [0, 2, 1, 1];
        let t = one_hot(&labels, 3);
        let exact = coding_loss(&[&t, &t], &[&t, &t]).unwrap();
        assert!(exact.value.abs() <= 8.0 * (1.0 - 1e-12f64).ln().abs() + 1e-15);

        let uniform = DenseMatrix::filled(4, 3, 1.0 / 3.0);
        let u = coding_loss(&[&t, &t], &[&uniform, &uniform]).unwrap();
        assert!((u.value - 8.0 * 3f64.ln()).abs() < 1e-9);

        assert!(coding_loss(&[&t], &[&half]).is_err());
    }

    #[test]
    fn coding_gradient_matches_finite_differences() {
        let logits: Vec<_> = (0..2).map(|v| random_logits(10 + v, 8, 4, 2.0)).collect();
        let targets: Vec<_> = (0..2).map(|v| pseudolabels(&softmax_rows(&random_logits(20 + v, 8, 4, 2.0)))).collect();
        check_through_softmax(&logits, |y| {
            let t: Vec<&DenseMatrix> = targets.iter().collect();
            let refs: Vec<&DenseMatrix> = y.iter().collect();
            let l = coding_loss(&t, &refs).unwrap();
            (l.value, l.grad_y_aug)
        });
    }

    #[test]
    fn cross_view_coding_cases() {
        let t = one_hot(&[0, 1, 1], 2);
        assert!(cross_view_coding_loss(&[&t, &t]).unwrap().value.abs() < 1e-9);

        let p = DenseMatrix::from_rows(&[[0.2, 0.3, 0.5], [0.2, 0.3, 0.5]]).unwrap();
        let h = entropy(&[0.2, 0.3, 0.5]).unwrap();
        assert!((cross_view_coding_loss(&[&p, &p]).unwrap().value - 4.0 * h).abs() < 1e-12);

        let a = softmax_rows(&random_logits(30, 5, 3, 2.0));
        let b = softmax_rows(&random_logits(31, 5, 3, 2.0));
        let mut oracle = 0.0;
        for i in 0..5 {
            for j in 0..3 {
                oracle -= b.get(i, j) * a.get(i, j).ln() + a.get(i, j) * b.get(i, j).ln();
            }
        }
        // pair (u=1, v=0) with y_0 = a, y_1 = b
        assert!((cross_view_coding_loss(&[&a, &b]).unwrap().value - oracle).abs() < 1e-12);

        let logits: Vec<_> = (0..2).map(|v| random_logits(40 + v, 8, 4, 2.0)).collect();
        check_through_softmax(&logits, |y| {
            let refs: Vec<&DenseMatrix> = y.iter().collect();
            let l = cross_view_coding_loss(&refs).unwrap();
            (l.value, l.grad_y)
        });
    }

    #[test]
    fn global_loss_cases() {
        let z = random_logits(50, 6, 4, 1.0);
        let l = global_loss(&[&z, &z], &[], true).unwrap();
        assert!((l.value + 6.0).abs() < 1e-12);
        assert!(l.grad_z_aug.is_empty());

        let a = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 2.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[[0.0, 3.0], [4.0, 0.0]]).unwrap();
        assert_eq!(global_loss(&[&a, &b], &[&a, &b], true).unwrap().value, 0.0);

        let zs: Vec<_> = (0..3).map(|v| random_logits(60 + v, 5, 3, 1.0)).collect();
        let za: Vec<_> = (0..3).map(|v| random_logits(70 + v, 5, 3, 1.0)).collect();
        let raw = global_loss(&[&zs[0], &zs[1], &zs[2]], &[&za[0], &za[1], &za[2]], false).unwrap();
        let mut oracle = 0.0;
        for (u, v) in [(1, 0), (2, 0), (2, 1)] {
            for i in 0..5 {
                for j in 0..3 {
                    oracle -= zs[u].get(i, j) * zs[v].get(i, j) + za[u].get(i, j) * za[v].get(i, j);
                }
            }
        }
        assert!((raw.value - oracle).abs() < 1e-12);
        assert_eq!(raw.per_pair.len(), 3);
        assert!(global_loss(&[&zs[0]], &[], true).is_err());
    }

    #[test]
    fn global_gradient_matches_finite_differences() {
        for normalize in [true, false] {
            let blocks: Vec<_> = (0..6).map(|v| random_logits(80 + v, 8, 4, 1.0)).collect();
            let flat: Vec<f64> = blocks.iter().flat_map(|m| m.as_slice().to_vec()).collect();
            let report = crate::nn::grad_check(
                |p| {
                    let ms: Vec<_> = p.chunks(32).map(|c| DenseMatrix::from_vec(8, 4, c.to_vec()).unwrap()).collect();
                    let z: Vec<&DenseMatrix> = ms[..3].iter().collect();
                    let za: Vec<&DenseMatrix> = ms[3..].iter().collect();
                    let l = global_loss(&z, &za, normalize).unwrap();
                    let g = l.grad_z.iter().chain(&l.grad_z_aug).flat_map(|m| m.as_slice().to_vec()).collect();
                    (l.value, g)
                },
                &flat,
                &crate::nn::GradCheckConfig::default(),
            );
            assert!(report.passed(), "normalize={normalize}: {:?}", report.failures);
        }
    }

    #[test]
    fn desk_example_consensus_indices() {
        // five students, columns [boy, girl]; height and weight classifiers
        let height = one_hot(&[0, 0, 1, 0, 1], 2);
        let weight = one_hot(&[0, 1, 1, 0, 0], 2);
        assert_eq!(column_consensus_index(&height, &weight, 0).unwrap(), 2.0);
        assert_eq!(row_consensus_index(&height, &weight, 0).unwrap(), 1.0);
        assert_eq!(row_consensus_index(&height, &weight, 1).unwrap(), 0.0);
        assert_eq!(global_consensus_index(&height, &weight).unwrap(), 3.0);
    }

    #[test]
    fn positive_pair_cases() {
        assert_eq!(positive_pair_equivalence(&[0.3, -1.0], &[0.3, -1.0]).unwrap(), (0.0, 0.0));
        assert_eq!(positive_pair_equivalence(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), (1.0, 1.0));
        assert!(positive_pair_equivalence(&[1.0], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn classifying_loss_is_sample_order_invariant(seed in any::<u64>()) {
            let a = softmax_rows(&random_logits(seed, 10, 5, 3.0));
            let b = softmax_rows(&random_logits(seed ^ 1, 10, 5, 3.0));
            let perm = [4, 9, 0, 2, 7, 1, 8, 3, 6, 5];
            let w = weights(3.0, 3.0, 8.0);
            let before = classifying_loss(&[&a, &b], &w).unwrap().value;
            let after = classifying_loss(&[&a.select_rows(&perm), &b.select_rows(&perm)], &w).unwrap().value;
            prop_assert!((before - after).abs() < 1e-10);
        }

        #[test]
        fn normalized_global_loss_is_bounded_and_scale_free(seed in any::<u64>(), s in 0.1f64..10.0) {
            let zs: Vec<_> = (0..3).map(|v| random_logits(seed.wrapping_add(v), 6, 4, 2.0)).collect();
            let refs: Vec<&DenseMatrix> = zs.iter().collect();
            let l = global_loss(&refs, &refs, true).unwrap().value;
            prop_assert!(l.abs() <= 6.0 * 3.0 * 2.0 + 1e-9);
            let scaled: Vec<_> = zs.iter().map(|m| m.scaled(s)).collect();
            let srefs: Vec<&DenseMatrix> = scaled.iter().collect();
            let ls = global_loss(&srefs, &srefs, true).unwrap().value;
            prop_assert!((l - ls).abs() < 1e-10);
        }

        #[test]
        fn coding_loss_nonnegative(seed in any::<u64>()) {
            let y = softmax_rows(&random_logits(seed, 6, 4, 3.0));
            let t = pseudolabels(&softmax_rows(&random_logits(seed ^ 5, 6, 4, 3.0)));
            prop_assert!(coding_loss(&[&t], &[&y]).unwrap().value >= 0.0);
        }
    }
}
