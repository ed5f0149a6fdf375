//! Central finite-difference checks of analytic gradients, in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::{loss_ce_grad, loss_kl_grad, loss_tc_grad, total_loss_base, total_loss_kd, LossWeights};
use crate::ops::{bilinear_resize, bilinear_resize_backward, conv2d, conv2d_backward, softmax_channels, ConvSpec};
use crate::propagation::{align_past, propagate_step, propagate_step_backward, similarity_alpha_backward, similarity_alpha_forward, SimilarityLayer};
use crate::tensor::{Kind, LabelMap, Tensor, IGNORE_LABEL};
use crate::train::{pair_loss, Model, PairSample, TrainMode};

pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter index where the worst error occurred.
    pub worst_index: usize,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central-difference gradient of `loss_fn` at `params`.
///
/// Uses the five-point central stencil at offsets ±ε and ±2ε. Its truncation
/// error is O(ε⁴), so entries that are small through cancellation (softmax
/// gradients sum to zero over classes) are still resolved at a fixed step.
pub fn numeric_gradient(loss_fn: impl Fn(&[f64]) -> Result<f64>, params: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let mut x = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let mut at = |offset: f64| -> Result<f64> {
            x[i] = params[i] + offset;
            let v = loss_fn(&x)?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss at parameter {}", i)));
            }
            Ok(v)
        };
        let (up, down) = (at(epsilon)?, at(-epsilon)?);
        let (up2, down2) = (at(2.0 * epsilon)?, at(-2.0 * epsilon)?);
        x[i] = params[i];
        grad.push((8.0 * (up - down) - (up2 - down2)) / (12.0 * epsilon));
    }
    Ok(grad)
}

/// Worst relative error between two gradients.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64], tolerance: f64) -> Result<GradCheckReport> {
    if numeric.len() != analytic.len() {
        return Err(Error::Shape(format!("{} numeric but {} analytic gradient entries", numeric.len(), analytic.len())));
    }
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_index: 0, checked: analytic.len(), tolerance };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let err = relative_error(a, n);
        if err > report.max_rel_error || !err.is_finite() {
            report.max_rel_error = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}

/// Compares `analytic` against [`numeric_gradient`] of `loss_fn` at `params`.
pub fn grad_check(loss_fn: impl Fn(&[f64]) -> Result<f64>, params: &[f64], analytic: &[f64], epsilon: f64, tolerance: f64) -> Result<GradCheckReport> {
    if params.len() != analytic.len() {
        return Err(Error::Shape(format!("{} parameters but {} gradient entries", params.len(), analytic.len())));
    }
    compare_gradients(analytic, &numeric_gradient(loss_fn, params, epsilon)?, tolerance)
}

/// One named check of the suite.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub seed: u64,
    pub report: GradCheckReport,
    /// True when the entry is a deliberately broken gradient that must fail.
    pub negative_control: bool,
}

impl SuiteEntry {
    pub fn ok(&self) -> bool {
        self.report.passed() != self.negative_control
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(c, h, w, Kind::Feature, |_, _, _| rng.random_range(lo..hi))
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn from_slice(like: &Tensor<f64>, x: &[f64]) -> Result<Tensor<f64>> {
    Tensor::new(like.dims().to_vec(), x.to_vec(), like.kind())
}

fn concat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

/// Whether perturbing any single entry of `x` by ±`eps` or ±2`eps` (the
/// stencil of [`grad_check`]) leaves the ReLU activation pattern unchanged.
/// Central differences are only a valid oracle for a piecewise-smooth
/// function when the stencil does not cross a kink.
pub fn kinks_stable(x: &[f64], eps: f64, pattern: impl Fn(&[f64]) -> Result<Vec<bool>>) -> Result<bool> {
    let reference = pattern(x)?;
    let mut y = x.to_vec();
    for i in 0..x.len() {
        for d in [eps, -eps, 2.0 * eps, -2.0 * eps] {
            y[i] = x[i] + d;
            if pattern(&y)? != reference {
                return Ok(false);
            }
        }
        y[i] = x[i];
    }
    Ok(true)
}

/// Draws instances from `rng` until `draw` accepts one.
fn resample<R>(rng: &mut ChaCha8Rng, mut draw: impl FnMut(&mut ChaCha8Rng) -> Result<Option<R>>) -> Result<R> {
    for _ in 0..MAX_RESAMPLES {
        if let Some(r) = draw(rng)? {
            return Ok(r);
        }
    }
    Err(Error::InvalidArgument(format!("no kink-free instance in {} draws", MAX_RESAMPLES)))
}

const MAX_RESAMPLES: usize = 1000;

/// Runs every gradient check on one seeded random instance built around
/// 8×8 frames (features on the 2×2 stride-4 grid).
pub fn gradient_instance(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (eps, tol) = (DEFAULT_EPSILON, DEFAULT_TOLERANCE);
    let mut out = Vec::new();
    let mut push = |name: &str, report: GradCheckReport, negative_control: bool| {
        out.push(SuiteEntry { name: name.to_string(), seed, report, negative_control });
    };

    // conv2d: input, weights and bias under a random linear read-out
    let mut spec = ConvSpec::<f64>::zeros(3, 2, 3, 1, 1)?;
    spec.weights.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
    spec.bias.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
    let input = random_tensor(&mut rng, 3, 8, 8, -1.0, 1.0);
    let r = random_tensor(&mut rng, 2, 8, 8, -1.0, 1.0);
    let g = conv2d_backward(&input, &spec, &r)?;
    let (ni, nw) = (input.len(), spec.weights.len());
    let params = concat(&[input.data(), &spec.weights, &spec.bias]);
    let analytic = concat(&[g.input.data(), &g.weights, &g.bias]);
    let f = |x: &[f64]| -> Result<f64> {
        let mut s = spec.clone();
        s.weights.copy_from_slice(&x[ni..ni + nw]);
        s.bias.copy_from_slice(&x[ni + nw..]);
        Ok(dot(&conv2d(&from_slice(&input, &x[..ni])?, &s)?, &r))
    };
    push("conv2d", grad_check(f, &params, &analytic, eps, tol)?, false);

    // bilinear_resize, both up and down
    for (name, oh, ow) in [("bilinear_resize_up", 16, 12), ("bilinear_resize_down", 4, 6)] {
        let input = random_tensor(&mut rng, 2, 8, 8, -1.0, 1.0);
        let r = random_tensor(&mut rng, 2, oh, ow, -1.0, 1.0);
        let analytic = bilinear_resize_backward(&r, 8, 8)?;
        let f = |x: &[f64]| Ok(dot(&bilinear_resize(&from_slice(&input, x)?, oh, ow)?, &r));
        push(name, grad_check(f, input.data(), analytic.data(), eps, tol)?, false);
    }

    // similarity layer: parameters and both feature maps, α at stride 4
    let (layer, fp, fq, validity) = resample(&mut rng, |rng| {
        let layer = SimilarityLayer::<f64>::learned(4, rng.random())?;
        let fp = random_tensor(rng, 4, 2, 2, 0.0, 1.0);
        let fq = random_tensor(rng, 4, 2, 2, 0.0, 1.0);
        let validity = Tensor::from_fn(1, 8, 8, Kind::Mask, |_, _, _| if rng.random::<f64>() < 0.8 { 1.0 } else { 0.0 });
        let np = layer.param_count();
        let nf = fp.len();
        let pattern = |x: &[f64]| -> Result<Vec<bool>> {
            let mut l = layer.clone();
            l.set_flat_params(&x[..np])?;
            Ok(similarity_alpha_forward(&from_slice(&fp, &x[np..np + nf])?, &from_slice(&fq, &x[np + nf..])?, &validity, &l)?.relu_pattern())
        };
        let stable = kinks_stable(&concat(&[&layer.flat_params(), fp.data(), fq.data()]), eps, pattern)?;
        Ok(stable.then_some((layer, fp, fq, validity)))
    })?;
    let r = random_tensor(&mut rng, 1, 8, 8, -1.0, 1.0);
    let cache = similarity_alpha_forward(&fp, &fq, &validity, &layer)?;
    let sg = similarity_alpha_backward(&cache, &layer, &r)?;
    let np = layer.param_count();
    let nf = fp.len();
    let params = concat(&[&layer.flat_params(), fp.data(), fq.data()]);
    let analytic = concat(&[&sg.params, sg.feat_past.data(), sg.feat_current.data()]);
    let f = |x: &[f64]| -> Result<f64> {
        let mut l = layer.clone();
        l.set_flat_params(&x[..np])?;
        let a = similarity_alpha_forward(&from_slice(&fp, &x[np..np + nf])?, &from_slice(&fq, &x[np + nf..])?, &validity, &l)?;
        Ok(dot(&a.alpha, &r))
    };
    push("similarity_alpha", grad_check(f, &params, &analytic, eps, tol)?, false);

    // propagate_step: q, p and α
    let q = random_tensor(&mut rng, 3, 8, 8, -3.0, 3.0);
    let p = random_tensor(&mut rng, 3, 8, 8, -3.0, 3.0);
    let alpha = random_tensor(&mut rng, 1, 8, 8, 0.05, 0.95);
    let r = random_tensor(&mut rng, 3, 8, 8, -1.0, 1.0);
    let (gq, gp, ga) = propagate_step_backward(&q, &p, &alpha, &r)?;
    let n = q.len();
    let params = concat(&[q.data(), p.data(), alpha.data()]);
    let analytic = concat(&[gq.data(), gp.data(), ga.data()]);
    let f = |x: &[f64]| {
        let out = propagate_step(&from_slice(&q, &x[..n])?, &from_slice(&p, &x[n..2 * n])?, &from_slice(&alpha, &x[2 * n..])?)?;
        Ok(dot(&out, &r))
    };
    push("propagate_step", grad_check(f, &params, &analytic, eps, tol)?, false);

    // loss_tc w.r.t. y
    let y = softmax_channels(&random_tensor(&mut rng, 3, 8, 8, -2.0, 2.0), 1.0)?.with_kind(Kind::Probs);
    let x_hat = softmax_channels(&random_tensor(&mut rng, 3, 8, 8, -2.0, 2.0), 1.0)?.with_kind(Kind::Probs);
    let o = random_tensor(&mut rng, 1, 8, 8, 0.1, 1.0);
    let (_, g) = loss_tc_grad(&y, &x_hat, &o)?;
    let f = |x: &[f64]| Ok(loss_tc_grad(&from_slice(&y, x)?, &x_hat, &o)?.0);
    push("loss_tc", grad_check(f, y.data(), g.data(), eps, tol)?, false);

    // loss_ce with some ignored pixels
    let logits = random_tensor(&mut rng, 4, 8, 8, -3.0, 3.0).with_kind(Kind::Logits);
    let labels = LabelMap::new(8, 8, (0..64).map(|_| if rng.random::<f64>() < 0.1 { IGNORE_LABEL } else { rng.random_range(0..4) }).collect())?;
    let (_, g) = loss_ce_grad(&logits, &labels, IGNORE_LABEL)?;
    let f = |x: &[f64]| Ok(loss_ce_grad(&from_slice(&logits, x)?, &labels, IGNORE_LABEL)?.0);
    push("loss_ce", grad_check(f, logits.data(), g.data(), eps, tol)?, false);

    // loss_kl w.r.t. the student
    let student = random_tensor(&mut rng, 4, 8, 8, -3.0, 3.0).with_kind(Kind::Logits);
    let teacher = random_tensor(&mut rng, 4, 8, 8, -3.0, 3.0).with_kind(Kind::Logits);
    let (_, g) = loss_kl_grad(&student, &teacher, 2.0)?;
    let f = |x: &[f64]| Ok(loss_kl_grad(&from_slice(&student, x)?, &teacher, 2.0)?.0);
    push("loss_kl", grad_check(f, student.data(), g.data(), eps, tol)?, false);

    // composed losses w.r.t. both frames' logits
    let (sample, model) = resample(&mut rng, |rng| {
        let (sample, model) = random_pair(rng.random(), 8, 3)?;
        let np = model.layer.param_count();
        let q_p = sample.past.logits(&model.head)?;
        let aligned = align_past(&q_p, &sample.past.features, &sample.homography)?;
        let pattern = |x: &[f64]| -> Result<Vec<bool>> {
            let mut layer = model.layer.clone();
            layer.set_flat_params(&x[..np])?;
            Ok(similarity_alpha_forward(&aligned.features, &sample.current.features, &aligned.validity, &layer)?.relu_pattern())
        };
        let stable = kinks_stable(&model.layer.flat_params(), eps, pattern)?;
        Ok(stable.then_some((sample, model)))
    })?;
    let p_q = random_tensor(&mut rng, 3, 8, 8, -3.0, 3.0).with_kind(Kind::Logits);
    let p_p = random_tensor(&mut rng, 3, 8, 8, -3.0, 3.0).with_kind(Kind::Logits);
    let weights = LossWeights { lambda_kd: 2.0, ..Default::default() };
    let labels = sample.labels.clone().expect("random pair has labels");
    let (tq, tp) = sample.teacher.clone().expect("random pair has a teacher");
    let n = p_q.len();
    let params = concat(&[p_q.data(), p_p.data()]);
    let base = total_loss_base(&p_q, &p_p, &labels, &sample.flow, &sample.weight, &weights, IGNORE_LABEL)?;
    let f = |x: &[f64]| {
        Ok(total_loss_base(&from_slice(&p_q, &x[..n])?, &from_slice(&p_p, &x[n..])?, &labels, &sample.flow, &sample.weight, &weights, IGNORE_LABEL)?.total)
    };
    push("total_loss_base", grad_check(f, &params, &concat(&[base.grad_current.data(), base.grad_past.data()]), eps, tol)?, false);
    let kd = total_loss_kd(&p_q, &p_p, &tq, &tp, &sample.flow, &sample.weight, &weights)?;
    let f = |x: &[f64]| Ok(total_loss_kd(&from_slice(&p_q, &x[..n])?, &from_slice(&p_p, &x[n..])?, &tq, &tp, &sample.flow, &sample.weight, &weights)?.total);
    push("total_loss_kd", grad_check(f, &params, &concat(&[kd.grad_current.data(), kd.grad_past.data()]), eps, tol)?, false);

    // full training objective w.r.t. every trainable parameter
    for (name, mode) in [("training_loss_base", TrainMode::Base), ("training_loss_kd", TrainMode::Distillation)] {
        let r = pair_loss(&model, &sample, mode, true, true, &weights)?;
        let params = model.flat_params();
        let f = |x: &[f64]| {
            let mut m = model.clone();
            m.set_flat_params(x)?;
            Ok(pair_loss(&m, &sample, mode, true, true, &weights)?.loss.total)
        };
        let numeric = numeric_gradient(&f, &params, eps)?;
        push(name, compare_gradients(&r.grads, &numeric, tol)?, false);
        if mode == TrainMode::Base {
            let mut corrupted = r.grads.clone();
            let k = corrupted.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).map(|(i, _)| i).unwrap_or(0);
            corrupted[k] *= 2.0;
            push("negative_control", compare_gradients(&corrupted, &numeric, tol)?, true);
        }
    }
    Ok(out)
}

/// Runs [`gradient_instance`] for `instances` consecutive seeds.
pub fn gradient_suite(seed: u64, instances: usize) -> Result<Vec<SuiteEntry>> {
    let mut all = Vec::new();
    for i in 0..instances as u64 {
        all.extend(gradient_instance(seed.wrapping_add(i))?);
    }
    Ok(all)
}

/// A random 8×8 training pair and model (used by the suite).
pub fn random_pair(seed: u64, size: usize, classes: usize) -> Result<(PairSample<f64>, Model<f64>)> {
    use crate::flow::flow_from_homography;
    use crate::geometry::Homography;
    use crate::losses::consistency_weight;
    use crate::surrogate::{gaussian_noise, surrogate_features, SurrogateHead, FEATURE_CHANNELS};
    use crate::train::FrameInput;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frame = |rng: &mut ChaCha8Rng| Tensor::<f64>::from_fn(3, size, size, Kind::Image, |_, _, _| rng.random());
    let (fp, fq) = (frame(&mut rng), frame(&mut rng));
    let h_map = Homography::translation(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let flow = flow_from_homography(&h_map, size, size)?;
    let weight = consistency_weight(&fq, &fp, &flow)?;
    let labels = LabelMap::new(size, size, (0..size * size).map(|_| rng.random_range(0..classes as u8)).collect())?;
    let mut teacher = || Tensor::from_fn(classes, size, size, Kind::Logits, |_, _, _| rng.random_range(-3.0..3.0));
    let teacher = Some((teacher(), teacher()));
    let sample = PairSample {
        past: FrameInput { features: surrogate_features(&fp)?, noise: gaussian_noise(classes, size, size, 0.5, rng.random()) },
        current: FrameInput { features: surrogate_features(&fq)?, noise: gaussian_noise(classes, size, size, 0.5, rng.random()) },
        homography: h_map,
        flow,
        weight,
        labels: Some(labels),
        teacher,
    };
    let mut head = SurrogateHead::zeros(classes);
    let hp: Vec<f64> = (0..head.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
    head.set_flat_params(&hp)?;
    let layer = SimilarityLayer::learned(FEATURE_CHANNELS, rng.random())?;
    Ok((sample, Model { head, layer }))
}
