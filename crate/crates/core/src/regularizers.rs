//! Consistency losses between current and stored logits.
//!
//! Every loss takes two BxC logit batches inside a graph: `current` is the
//! classifier's output on buffered inputs right now, `stored` is the logit
//! snapshot frozen into the buffer when those inputs were first seen. The
//! stored side enters as a constant node, so gradients flow only through the
//! current side; nothing here refreshes or re-derives the targets.
//!
//! Distribution-space losses (KL, mutual information) softmax the logits
//! internally. The self-supervised family (InfoNCE, BYOL, DINO, Barlow
//! Twins) works on L2-normalized rows, Barlow Twins on batch-standardized
//! columns. On their own these objectives have collapsed minima; in this
//! setting the cross-entropy terms of the combined objective anchor the
//! logits, which is what keeps them usable as regularizers.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_INFONCE_TEMPERATURE: f64 = 0.5;
pub const DEFAULT_DINO_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_OFFDIAG_WEIGHT: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LpNorm {
    L1,
    L2,
    LInf,
}

fn check_same_shape(g: &Graph, a: NodeId, b: NodeId) -> Result<(usize, usize)> {
    let (ra, ca) = g.dims(a);
    let (rb, cb) = g.dims(b);
    if (ra, ca) != (rb, cb) {
        return Err(Error::ShapeMismatch(format!(
            "regularizer inputs {ra}x{ca} vs {rb}x{cb}"
        )));
    }
    Ok((ra, ca))
}

/// Mean over the batch of the Minkowski distance between logit rows.
pub fn lp_loss(g: &mut Graph, current: NodeId, stored: NodeId, p: LpNorm) -> Result<NodeId> {
    check_same_shape(g, current, stored)?;
    let d = g.sub(current, stored)?;
    let per_row = match p {
        LpNorm::L1 => {
            let a = g.abs(d);
            g.row_sum(a)
        }
        LpNorm::L2 => {
            let sq = g.mul(d, d)?;
            let rs = g.row_sum(sq);
            g.sqrt(rs)
        }
        LpNorm::LInf => {
            let a = g.abs(d);
            g.row_max(a)
        }
    };
    Ok(g.mean_all(per_row))
}

/// Mean squared logit difference over all B*C entries; the squared-L2
/// variant of the Minkowski family under a different normalization.
pub fn mse_loss(g: &mut Graph, current: NodeId, stored: NodeId) -> Result<NodeId> {
    check_same_shape(g, current, stored)?;
    let d = g.sub(current, stored)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean_all(sq))
}

/// Mean KL divergence from the stored to the current prediction,
/// D(softmax(current) || softmax(stored)), averaged over the batch.
pub fn kl_div_loss(g: &mut Graph, current: NodeId, stored: NodeId) -> Result<NodeId> {
    let (b, _) = check_same_shape(g, current, stored)?;
    let p = g.softmax(current)?;
    let lp = g.log_softmax(current)?;
    let lq = g.log_softmax(stored)?;
    let diff = g.sub(lp, lq)?;
    let w = g.mul(p, diff)?;
    let s = g.sum_all(w);
    Ok(g.scale(s, 1.0 / b as f64))
}

/// Negative mutual information between the two prediction variables under
/// the symmetrized batch-averaged joint; maximizing agreement minimizes
/// this. Zero when both sides are uniform, -ln C at perfectly matched
/// one-hot predictions.
pub fn mi_loss(g: &mut Graph, current: NodeId, stored: NodeId) -> Result<NodeId> {
    check_same_shape(g, current, stored)?;
    let a = g.softmax(current)?;
    let b = g.softmax(stored)?;
    g.mutual_information(a, b)
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive and finite, got {tau}"
        )));
    }
    Ok(())
}

/// Contrastive batch loss over cosine similarities at temperature `tau`.
/// Rows are L2-normalized; the two views are stacked and each of the 2B
/// rows anchors one term whose positive is its counterpart and whose
/// denominator spans the positive plus the 2B - 2 other in-batch rows.
pub fn info_nce_loss(g: &mut Graph, current: NodeId, stored: NodeId, tau: f64) -> Result<NodeId> {
    let (b, _) = check_same_shape(g, current, stored)?;
    check_temperature(tau)?;
    if b < 2 {
        return Err(Error::InfoNceNeedsNegatives(b));
    }
    let u = g.l2_normalize_rows(current)?;
    let v = g.l2_normalize_rows(stored)?;
    let w = g.concat_rows(u, v)?;
    let wt = g.transpose(w);
    let sims = g.matmul(w, wt)?;
    let sims = g.scale(sims, 1.0 / tau);
    g.nt_xent(sims, b)
}

/// Mean over the batch of 2 - 2 cos(current_row, stored_row): the
/// normalized-prediction regression loss, minimal at perfect alignment,
/// 2 at orthogonality, 4 at opposition.
pub fn byol_loss(g: &mut Graph, current: NodeId, stored: NodeId) -> Result<NodeId> {
    check_same_shape(g, current, stored)?;
    let u = g.l2_normalize_rows(current)?;
    let v = g.l2_normalize_rows(stored)?;
    let prod = g.mul(u, v)?;
    let cos = g.row_sum(prod);
    let mean = g.mean_all(cos);
    let scaled = g.scale(mean, -2.0);
    Ok(g.add_scalar(scaled, 2.0))
}

/// Cross-entropy between the softmaxed stored view and the log-softmaxed
/// current view, both L2-normalized first and sharpened by one shared
/// temperature. No centering term: the replayed cross-entropy anchor makes
/// the usual collapse guard unnecessary here.
pub fn dino_loss(g: &mut Graph, current: NodeId, stored: NodeId, tau: f64) -> Result<NodeId> {
    let (b, _) = check_same_shape(g, current, stored)?;
    check_temperature(tau)?;
    let u = g.l2_normalize_rows(current)?;
    let v = g.l2_normalize_rows(stored)?;
    let vs = g.scale(v, 1.0 / tau);
    let target = g.softmax(vs)?;
    let us = g.scale(u, 1.0 / tau);
    let logp = g.log_softmax(us)?;
    let w = g.mul(target, logp)?;
    let s = g.sum_all(w);
    Ok(g.scale(s, -1.0 / b as f64))
}

/// Redundancy-reduction loss on the CxC cross-correlation of
/// batch-standardized columns: on-diagonal terms pull per-dimension
/// correlation to one, off-diagonal terms (weighted by `offdiag_weight`)
/// push distinct dimensions toward decorrelation.
pub fn barlow_twins_loss(
    g: &mut Graph,
    current: NodeId,
    stored: NodeId,
    offdiag_weight: f64,
) -> Result<NodeId> {
    let (b, c) = check_same_shape(g, current, stored)?;
    if !(offdiag_weight.is_finite() && offdiag_weight >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "off-diagonal weight must be non-negative and finite, got {offdiag_weight}"
        )));
    }
    if b < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch standardization needs at least 2 rows, got {b}"
        )));
    }
    let nh = standardize_cols(g, current)?;
    let nz = standardize_cols(g, stored)?;
    let nt = g.transpose(nh);
    let cc = g.matmul(nt, nz)?;
    let cc = g.scale(cc, 1.0 / b as f64);

    let dd = g.diag(cc)?;
    let ones = g.constant(&Tensor::filled(c, 1, 1.0));
    let dev = g.sub(ones, dd)?;
    let dev_sq = g.powi(dev, 2);
    let on_diag = g.sum_all(dev_sq);

    let all_sq = g.powi(cc, 2);
    let total = g.sum_all(all_sq);
    let diag_sq = g.powi(dd, 2);
    let diag_total = g.sum_all(diag_sq);
    let off_diag = g.sub(total, diag_total)?;

    let weighted = g.scale(off_diag, offdiag_weight);
    g.add(on_diag, weighted)
}

/// Column-wise zero mean, unit variance over the batch (population
/// variance, so a +-v two-row column standardizes to exactly +-1).
fn standardize_cols(g: &mut Graph, m: NodeId) -> Result<NodeId> {
    let mu = g.col_mean(m);
    let centered = g.sub_row(m, mu)?;
    let sq = g.mul(centered, centered)?;
    let var = g.col_mean(sq);
    if g.data(var).iter().any(|&v| v == 0.0) {
        return Err(Error::DegenerateBatchStats);
    }
    let sd = g.sqrt(var);
    g.div_row(centered, sd)
}

// ─── configurable dispatch ───

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    None,
    L1,
    L2,
    Linf,
    Mse,
    Kl,
    Mi,
    Infonce,
    Byol,
    Dino,
    Barlow,
}

/// Which consistency loss to add to the replay objective and with what
/// hyperparameters. `temperature` applies to `infonce` and `dino` only,
/// `offdiag_weight` to `barlow` only; leaving them unset picks the
/// per-kind defaults. `beta` scales the whole term in the total objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerSpec {
    pub kind: RegularizerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offdiag_weight: Option<f64>,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}

impl RegularizerSpec {
    pub fn new(kind: RegularizerKind) -> Self {
        Self {
            kind,
            temperature: None,
            offdiag_weight: None,
            beta: DEFAULT_BETA,
        }
    }

    /// Plain experience replay: no consistency term.
    pub fn none() -> Self {
        Self::new(RegularizerKind::None)
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }
}

pub type LossFn = Box<dyn Fn(&mut Graph, NodeId, NodeId) -> Result<NodeId> + Send + Sync>;

/// Binds a spec's hyperparameters into a reusable loss closure. The `none`
/// kind yields a constant zero that contributes no gradient.
pub fn make_regularizer(spec: &RegularizerSpec) -> Result<LossFn> {
    use RegularizerKind::*;

    if !(spec.beta.is_finite() && spec.beta >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "beta must be non-negative and finite, got {}",
            spec.beta
        )));
    }
    if let Some(t) = spec.temperature {
        if !matches!(spec.kind, Infonce | Dino) {
            return Err(Error::InvalidConfig(format!(
                "temperature is not a parameter of {:?}",
                spec.kind
            )));
        }
        check_temperature(t).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    }
    if let Some(w) = spec.offdiag_weight {
        if spec.kind != Barlow {
            return Err(Error::InvalidConfig(format!(
                "offdiag_weight is not a parameter of {:?}",
                spec.kind
            )));
        }
        if !(w.is_finite() && w >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "offdiag_weight must be non-negative and finite, got {w}"
            )));
        }
    }

    Ok(match spec.kind {
        None => Box::new(|g, _, _| Ok(g.constant(&Tensor::scalar(0.0)))),
        L1 => Box::new(|g, a, b| lp_loss(g, a, b, LpNorm::L1)),
        L2 => Box::new(|g, a, b| lp_loss(g, a, b, LpNorm::L2)),
        Linf => Box::new(|g, a, b| lp_loss(g, a, b, LpNorm::LInf)),
        Mse => Box::new(mse_loss),
        Kl => Box::new(kl_div_loss),
        Mi => Box::new(mi_loss),
        Infonce => {
            let tau = spec.temperature.unwrap_or(DEFAULT_INFONCE_TEMPERATURE);
            Box::new(move |g, a, b| info_nce_loss(g, a, b, tau))
        }
        Byol => Box::new(byol_loss),
        Dino => {
            let tau = spec.temperature.unwrap_or(DEFAULT_DINO_TEMPERATURE);
            Box::new(move |g, a, b| dino_loss(g, a, b, tau))
        }
        Barlow => {
            let w = spec.offdiag_weight.unwrap_or(DEFAULT_OFFDIAG_WEIGHT);
            Box::new(move |g, a, b| barlow_twins_loss(g, a, b, w))
        }
    })
}
