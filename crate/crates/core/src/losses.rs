//! Batch-hard triplet loss, label-smoothed cross-entropy and their weighted sum.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::head::HeadOutput;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Added under the square root when gradients flow, keeping d/dx sqrt finite at 0.
pub const DIST_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub margin: f64,
    pub epsilon: f64,
    pub soft_margin: bool,
    pub label_smoothing: bool,
    pub w_tp: f64,
    pub w_ce: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.3,
            epsilon: 0.1,
            soft_margin: false,
            label_smoothing: true,
            w_tp: 1.0,
            w_ce: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::config("loss.margin", "must be a non-negative number"));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::config("loss.epsilon", "must lie in [0, 1)"));
        }
        for (key, w) in [("loss.w_tp", self.w_tp), ("loss.w_ce", self.w_ce)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(key, "must be a non-negative number"));
            }
        }
        if self.w_tp == 0.0 && self.w_ce == 0.0 {
            return Err(Error::config("loss.w_tp", "loss weights cannot both be zero"));
        }
        Ok(())
    }

    pub fn effective_epsilon(&self) -> f64 {
        if self.label_smoothing {
            self.epsilon
        } else {
            0.0
        }
    }
}

/// Euclidean distance matrix `[N,N]` via `|a|^2 + |b|^2 - 2ab`, clamped at zero,
/// with an exact zero diagonal.
pub fn pairwise_distances<'t, T: Scalar>(e: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = e.shape();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::Shape(format!("pairwise distances need non-empty [N,D], got {shape:?}")));
    }
    let n = shape[0];
    let sq = e.mul(e)?.sum(&[1], true)?;
    let rows = sq.broadcast_to(&[n, n])?;
    let cols = sq.reshape(&[1, n])?.broadcast_to(&[n, n])?;
    let gram = e.matmul(e.transpose(0, 1)?)?;
    let mut d2 = rows.add(cols)?.sub(gram.mul_scalar(2.0))?.clamp_min(0.0);
    if e.requires_grad() {
        d2 = d2.add_scalar(DIST_EPS);
    }
    let off_diag = Tensor::from_vec(
        [n, n],
        (0..n * n).map(|k| if k / n == k % n { T::zero() } else { T::one() }).collect(),
    )?;
    d2.sqrt()?.mul(e.tape().constant(off_diag))
}

/// Hardest positive and negative per anchor.
pub struct MiningResult<'t, T: Scalar> {
    pub d_pos: Var<'t, T>,
    pub d_neg: Var<'t, T>,
    pub pos_index: Vec<usize>,
    pub neg_index: Vec<usize>,
}

/// Index-only batch-hard mining over a row-major `[N,N]` distance table; ties go to
/// the lowest index.
pub fn mine_indices<T: Scalar>(dist: &[T], labels: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = labels.len();
    if dist.len() != n * n {
        return Err(Error::Shape(format!("distance table has {} entries for {n} labels", dist.len())));
    }
    let mut pos = Vec::with_capacity(n);
    let mut neg = Vec::with_capacity(n);
    for i in 0..n {
        let (p, q) = hardest_for_anchor(&dist[i * n..(i + 1) * n], labels, i);
        let p = p.ok_or_else(|| Error::Mining(format!("identity {} has a single sample in the batch", labels[i])))?;
        let q = q.ok_or_else(|| Error::Mining("batch holds a single identity".into()))?;
        pos.push(p);
        neg.push(q);
    }
    Ok((pos, neg))
}

/// Farthest same-identity and nearest other-identity sample for one anchor row.
pub fn hardest_for_anchor<T: Scalar>(row: &[T], labels: &[usize], anchor: usize) -> (Option<usize>, Option<usize>) {
    let mut best_p: Option<usize> = None;
    let mut best_n: Option<usize> = None;
    for (j, &d) in row.iter().enumerate() {
        if j == anchor {
            continue;
        }
        if labels[j] == labels[anchor] {
            if best_p.is_none_or(|b| d > row[b]) {
                best_p = Some(j);
            }
        } else if best_n.is_none_or(|b| d < row[b]) {
            best_n = Some(j);
        }
    }
    (best_p, best_n)
}

pub fn batch_hard<'t, T: Scalar>(dist: Var<'t, T>, labels: &[usize]) -> Result<MiningResult<'t, T>> {
    let n = labels.len();
    if dist.shape() != [n, n] {
        return Err(Error::Shape(format!(
            "distance matrix {:?} does not match {n} labels",
            dist.shape()
        )));
    }
    let (pos_index, neg_index) = dist.with_value(|d| mine_indices(d.data(), labels))?;
    let flat = |idx: &[usize]| idx.iter().enumerate().map(|(i, &j)| i * n + j).collect::<Vec<_>>();
    Ok(MiningResult {
        d_pos: dist.gather(&flat(&pos_index))?,
        d_neg: dist.gather(&flat(&neg_index))?,
        pos_index,
        neg_index,
    })
}

pub fn triplet_loss<'t, T: Scalar>(mr: &MiningResult<'t, T>, cfg: &LossConfig) -> Result<Var<'t, T>> {
    let gap = mr.d_pos.sub(mr.d_neg)?;
    let per_anchor = if cfg.soft_margin {
        gap.softplus()
    } else {
        gap.add_scalar(cfg.margin).relu()
    };
    per_anchor.mean_all()
}

/// Label-smoothed targets: `1-eps` on the true class, `eps/(N_c-1)` elsewhere.
pub fn smooth_targets<T: Scalar>(labels: &[usize], num_classes: usize, eps: f64) -> Result<Tensor<T>> {
    if num_classes == 0 {
        return Err(Error::config("head.num_classes", "must be positive"));
    }
    if num_classes == 1 && eps > 0.0 {
        return Err(Error::config("loss.epsilon", "label smoothing needs at least two identities"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::Contract(format!("label {bad} outside 0..{num_classes}")));
    }
    let off = if num_classes > 1 { eps / (num_classes - 1) as f64 } else { 0.0 };
    let mut data = vec![T::from_f64_lossy(off); labels.len() * num_classes];
    for (i, &y) in labels.iter().enumerate() {
        data[i * num_classes + y] = T::from_f64_lossy(1.0 - eps);
    }
    Tensor::from_vec([labels.len(), num_classes], data)
}

/// `-(1/N) sum_i sum_c q_ic log softmax(z)_ic`.
pub fn cross_entropy<'t, T: Scalar>(logits: Var<'t, T>, q: &Tensor<T>) -> Result<Var<'t, T>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape.as_slice() != q.shape() {
        return Err(Error::Shape(format!(
            "cross-entropy logits {shape:?} and targets {:?} disagree",
            q.shape()
        )));
    }
    let n = shape[0] as f64;
    let lp = logits.log_softmax(1)?;
    Ok(lp.mul(logits.tape().constant(q.clone()))?.sum_all().mul_scalar(-1.0 / n))
}

/// Every term of a combined loss, in head embedding order.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    /// One triplet term per branch-level embedding.
    pub triplet: Vec<f64>,
    /// One cross-entropy term per embedding.
    pub ce: Vec<f64>,
    pub triplet_mean: f64,
    pub ce_mean: f64,
    pub total: f64,
}

/// `w_tp * mean(branch triplet terms) + w_ce * mean(embedding cross-entropy terms)`.
///
/// Triplet terms use branch-level pre-neck embeddings; cross-entropy uses every logit set.
pub fn total_loss<'t, T: Scalar>(
    out: &HeadOutput<'t, T>,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<(Var<'t, T>, LossReport)> {
    let tape = out
        .pre_bn
        .first()
        .ok_or_else(|| Error::Contract("head produced no embeddings".into()))?
        .tape();
    let mut tp_terms = Vec::new();
    if cfg.w_tp > 0.0 {
        for (kind, &e) in out.kinds.iter().zip(&out.pre_bn) {
            if kind.is_branch() {
                let mr = batch_hard(pairwise_distances(e)?, labels)?;
                tp_terms.push(triplet_loss(&mr, cfg)?);
            }
        }
    }
    let mut ce_terms = Vec::new();
    if cfg.w_ce > 0.0 {
        if out.logits.is_empty() {
            return Err(Error::config("head.num_classes", "cross-entropy needs classifier logits"));
        }
        let nc = out.logits[0].shape()[1];
        let q = smooth_targets::<T>(labels, nc, cfg.effective_epsilon())?;
        for &z in &out.logits {
            ce_terms.push(cross_entropy(z, &q)?);
        }
    }
    let mean_of = |terms: &[Var<'t, T>]| -> Result<Option<Var<'t, T>>> {
        let Some((&first, rest)) = terms.split_first() else { return Ok(None) };
        let mut acc = first;
        for &t in rest {
            acc = acc.add(t)?;
        }
        Ok(Some(acc.mul_scalar(1.0 / terms.len() as f64)))
    };
    let tp = mean_of(&tp_terms)?;
    let ce = mean_of(&ce_terms)?;
    let total = match (tp, ce) {
        (Some(a), Some(b)) => a.mul_scalar(cfg.w_tp).add(b.mul_scalar(cfg.w_ce))?,
        (Some(a), None) => a.mul_scalar(cfg.w_tp),
        (None, Some(b)) => b.mul_scalar(cfg.w_ce),
        (None, None) => tape.constant(Tensor::scalar(T::zero())),
    };
    let values = |terms: &[Var<'t, T>]| terms.iter().map(|t| t.item().as_f64()).collect::<Vec<_>>();
    let report = LossReport {
        triplet: values(&tp_terms),
        ce: values(&ce_terms),
        triplet_mean: tp.map_or(0.0, |v| v.item().as_f64()),
        ce_mean: ce.map_or(0.0, |v| v.item().as_f64()),
        total: total.item().as_f64(),
    };
    Ok((total, report))
}
