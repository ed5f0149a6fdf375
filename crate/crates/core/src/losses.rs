//! Training objectives and the consistent-teacher blend.
//!
//! Every loss comes with its gradient. Consistency terms compare softmax
//! probabilities; the past prediction is aligned to the current frame by
//! backward flow warping of its logits.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::flow::{photometric_weight, warp_flow, FlowField};
use crate::ops::{log_softmax_channels, softmax_backward, softmax_channels};
use crate::tensor::{Kind, LabelMap, Real, Tensor};

/// Loss weights. `lambda_base` weights the consistency term in base training,
/// `lambda_kd` in distillation, and `tau` is the distillation temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_base: f64,
    pub lambda_kd: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_base: 0.5, lambda_kd: 135000.0, tau: 2.0 }
    }
}

impl LossWeights {
    /// Consistency weights may be zero (the no-consistency ablation); the
    /// temperature must be positive.
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_base >= 0.0 && self.lambda_kd >= 0.0) || !self.lambda_base.is_finite() || !self.lambda_kd.is_finite() {
            return Err(Error::InvalidArgument("consistency weights must be finite and non-negative".into()));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidArgument("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// `(1/HW) Σ O ‖y − x̂‖²` with the squared norm summed over channels.
/// Returns the value and the gradient w.r.t. `y`; the gradient w.r.t. `x̂` is
/// its negation.
pub fn loss_tc_grad<T: Real>(y: &Tensor<T>, x_hat: &Tensor<T>, weight: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    y.ensure_same_shape(x_hat, "consistency loss")?;
    if weight.channels() != 1 || !weight.same_spatial(y) {
        return shape_err("consistency weight must be one channel of matching size");
    }
    let (c, h, w) = y.chw();
    let p = h * w;
    if p == 0 {
        return Ok((T::zero(), Tensor::zeros(c, h, w, Kind::Probs)));
    }
    let inv = T::one() / T::lit(p as f64);
    let two = T::lit(2.0);
    let (dy, dx, o) = (y.data(), x_hat.data(), weight.data());
    let mut grad = vec![T::zero(); c * p];
    let mut per_pixel = vec![T::zero(); p];
    for ch in 0..c {
        for i in 0..p {
            let d = dy[ch * p + i] - dx[ch * p + i];
            per_pixel[i] = per_pixel[i] + d * d;
            grad[ch * p + i] = two * o[i] * d * inv;
        }
    }
    let total: T = per_pixel.iter().zip(o).map(|(&s, &w)| w * s).sum();
    Ok((total * inv, Tensor::new(vec![c, h, w], grad, Kind::Probs)?))
}

pub fn loss_tc<T: Real>(y: &Tensor<T>, x_hat: &Tensor<T>, weight: &Tensor<T>) -> Result<T> {
    Ok(loss_tc_grad(y, x_hat, weight)?.0)
}

/// Mean cross-entropy over pixels whose label is not `ignore_index`. With no
/// counted pixel the loss and gradient are zero.
pub fn loss_ce_grad<T: Real>(logits: &Tensor<T>, labels: &LabelMap, ignore_index: u8) -> Result<(T, Tensor<T>)> {
    let (c, h, w) = logits.chw();
    if labels.dims() != (h, w) {
        return shape_err(format!("labels {:?} vs logits {}x{}", labels.dims(), h, w));
    }
    let p = h * w;
    let mut count = 0usize;
    for &l in labels.data() {
        if l == ignore_index {
            continue;
        }
        if l as usize >= c {
            return Err(Error::InvalidArgument(format!("label {} out of range for {} classes", l, c)));
        }
        count += 1;
    }
    let mut grad = vec![T::zero(); c * p];
    if count == 0 {
        return Ok((T::zero(), Tensor::new(vec![c, h, w], grad, Kind::Logits)?));
    }
    let logp = log_softmax_channels(logits, T::one())?;
    let lp = logp.data();
    let inv = T::one() / T::lit(count as f64);
    let mut total = T::zero();
    for (i, &l) in labels.data().iter().enumerate() {
        if l == ignore_index {
            continue;
        }
        total = total - lp[l as usize * p + i];
        for ch in 0..c {
            let prob = lp[ch * p + i].exp();
            let target = if ch == l as usize { T::one() } else { T::zero() };
            grad[ch * p + i] = (prob - target) * inv;
        }
    }
    Ok((total * inv, Tensor::new(vec![c, h, w], grad, Kind::Logits)?))
}

pub fn loss_ce<T: Real>(logits: &Tensor<T>, labels: &LabelMap, ignore_index: u8) -> Result<T> {
    Ok(loss_ce_grad(logits, labels, ignore_index)?.0)
}

/// Temperature-scaled distillation loss
/// `τ² · mean_pixels Σ_c softmax(T/τ) (log softmax(T/τ) − log softmax(P/τ))`
/// with its gradient w.r.t. the student logits `P`.
pub fn loss_kl_grad<T: Real>(student: &Tensor<T>, teacher: &Tensor<T>, tau: T) -> Result<(T, Tensor<T>)> {
    student.ensure_same_shape(teacher, "distillation loss")?;
    let (c, h, w) = student.chw();
    let p = h * w;
    let ls = log_softmax_channels(student, tau)?;
    let lt = log_softmax_channels(teacher, tau)?;
    if p == 0 {
        return Ok((T::zero(), Tensor::zeros(c, h, w, Kind::Logits)));
    }
    let inv = T::one() / T::lit(p as f64);
    let (s, t) = (ls.data(), lt.data());
    let mut total = T::zero();
    let mut grad = vec![T::zero(); c * p];
    for i in 0..p {
        let mut kl = T::zero();
        for ch in 0..c {
            let k = ch * p + i;
            let pt = t[k].exp();
            if pt > T::zero() {
                kl = kl + pt * (t[k] - s[k]);
            }
            grad[k] = tau * (s[k].exp() - pt) * inv;
        }
        total = total + kl;
    }
    Ok((total * inv * tau * tau, Tensor::new(vec![c, h, w], grad, Kind::Logits)?))
}

pub fn loss_kl<T: Real>(student: &Tensor<T>, teacher: &Tensor<T>, tau: T) -> Result<T> {
    Ok(loss_kl_grad(student, teacher, tau)?.0)
}

/// Photometric consistency weight for a frame pair, zeroed where the flow
/// leaves the past frame. `flow` is stored on the current grid.
pub fn consistency_weight<T: Real>(current: &Tensor<T>, past: &Tensor<T>, flow: &FlowField) -> Result<Tensor<T>> {
    let (past_warped, valid) = warp_flow(past, flow, T::zero())?;
    photometric_weight(current, &past_warped)?.mul_map(&valid)
}

/// Consistent teacher targets for a frame pair.
///
/// `flow_q_to_p` lives on the past grid and warps current-frame tensors onto
/// it; `flow_p_to_q` is the opposite. `occ_q` and `occ_p` are binary occlusion
/// masks on the current and past grids. Outside occlusions each target is the
/// mean of the frame's own teacher logits and the other frame's warped logits;
/// inside, the teacher logits pass through unchanged. Correspondences leaving
/// the frame count as occluded.
pub fn teacher_blend<T: Real>(
    t_q: &Tensor<T>,
    t_p: &Tensor<T>,
    flow_q_to_p: &FlowField,
    flow_p_to_q: &FlowField,
    occ_q: &Tensor<T>,
    occ_p: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    t_q.ensure_same_shape(t_p, "teacher logits")?;
    if occ_q.channels() != 1 || occ_p.channels() != 1 || !occ_q.same_spatial(t_q) || !occ_p.same_spatial(t_p) {
        return shape_err("occlusion masks must be single-channel maps matching the teacher logits");
    }
    let blend = |own: &Tensor<T>, other: &Tensor<T>, flow: &FlowField, occ: &Tensor<T>| -> Result<Tensor<T>> {
        let (warped, valid) = warp_flow(other, flow, T::zero())?;
        let p = own.plane();
        let (o, wv, m, v) = (own.data(), warped.data(), occ.data(), valid.data());
        let half = T::lit(0.5);
        let data = (0..own.len())
            .map(|k| {
                let i = k % p;
                if m[i] != T::zero() || v[i] == T::zero() {
                    o[k]
                } else {
                    (o[k] + wv[k]) * half
                }
            })
            .collect();
        Tensor::new(own.dims().to_vec(), data, Kind::Logits)
    };
    let tc_q = blend(t_q, t_p, flow_p_to_q, occ_q)?;
    let tc_p = blend(t_p, t_q, flow_q_to_p, occ_p)?;
    Ok((tc_q, tc_p))
}

/// Value and gradients of a two-frame training objective.
#[derive(Debug, Clone)]
pub struct PairLoss<T> {
    pub total: T,
    /// Cross-entropy (base) or summed distillation terms (kd).
    pub supervised: T,
    pub consistency: T,
    pub grad_current: Tensor<T>,
    pub grad_past: Tensor<T>,
}

/// Consistency term between current logits and past logits aligned with
/// `flow_p_to_q`; returns (value, grad current, grad past).
fn consistency_term<T: Real>(p_q: &Tensor<T>, p_p: &Tensor<T>, flow_p_to_q: &FlowField, weight: &Tensor<T>) -> Result<(T, Tensor<T>, Tensor<T>)> {
    let grid = flow_p_to_q.grid::<T>();
    let aligned = grid.apply(p_p, T::zero())?;
    let y = softmax_channels(p_q, T::one())?;
    let x_hat = softmax_channels(&aligned, T::one())?;
    let (value, g_y) = loss_tc_grad(&y, &x_hat, weight)?;
    let g_q = softmax_backward(&y, &g_y)?;
    let g_aligned = softmax_backward(&x_hat, &g_y.scale(-T::one()))?;
    Ok((value, g_q, grid.adjoint(&g_aligned)?))
}

/// `CE(P_q, A_q) + λ · L_tc(P_q, P_p)`.
pub fn total_loss_base<T: Real>(
    p_q: &Tensor<T>,
    p_p: &Tensor<T>,
    labels_q: &LabelMap,
    flow_p_to_q: &FlowField,
    weight: &Tensor<T>,
    weights: &LossWeights,
    ignore_index: u8,
) -> Result<PairLoss<T>> {
    weights.validate()?;
    p_q.ensure_same_shape(p_p, "pair logits")?;
    let (ce, g_ce) = loss_ce_grad(p_q, labels_q, ignore_index)?;
    if weights.lambda_base == 0.0 {
        let zero = Tensor::zeros(p_p.channels(), p_p.height(), p_p.width(), Kind::Logits);
        return Ok(PairLoss { total: ce, supervised: ce, consistency: T::zero(), grad_current: g_ce, grad_past: zero });
    }
    let lambda = T::lit(weights.lambda_base);
    let (tc, g_q, g_p) = consistency_term(p_q, p_p, flow_p_to_q, weight)?;
    Ok(PairLoss {
        total: ce + lambda * tc,
        supervised: ce,
        consistency: tc,
        grad_current: g_ce.add(&g_q.scale(lambda))?,
        grad_past: g_p.scale(lambda),
    })
}

/// `KL(P_q, T^c_q) + KL(P_p, T^c_p) + λ_kd · L_tc(P_q, P_p)`. Labels are not used.
pub fn total_loss_kd<T: Real>(
    p_q: &Tensor<T>,
    p_p: &Tensor<T>,
    tc_q: &Tensor<T>,
    tc_p: &Tensor<T>,
    flow_p_to_q: &FlowField,
    weight: &Tensor<T>,
    weights: &LossWeights,
) -> Result<PairLoss<T>> {
    weights.validate()?;
    p_q.ensure_same_shape(p_p, "pair logits")?;
    let tau = T::lit(weights.tau);
    let (kq, g_kq) = loss_kl_grad(p_q, tc_q, tau)?;
    let (kp, g_kp) = loss_kl_grad(p_p, tc_p, tau)?;
    let supervised = kq + kp;
    if weights.lambda_kd == 0.0 {
        return Ok(PairLoss { total: supervised, supervised, consistency: T::zero(), grad_current: g_kq, grad_past: g_kp });
    }
    let lambda = T::lit(weights.lambda_kd);
    let (tc, g_q, g_p) = consistency_term(p_q, p_p, flow_p_to_q, weight)?;
    Ok(PairLoss {
        total: supervised + lambda * tc,
        supervised,
        consistency: tc,
        grad_current: g_kq.add(&g_q.scale(lambda))?,
        grad_past: g_kp.add(&g_p.scale(lambda))?,
    })
}
