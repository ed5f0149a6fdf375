//! Two-frame training of the similarity layer (and optionally the surrogate
//! head) with SGD and momentum.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::flow::FlowField;
use crate::geometry::Homography;
use crate::losses::{total_loss_base, total_loss_kd, LossWeights, PairLoss};
use crate::propagation::{align_past, propagate_step, propagate_step_backward, similarity_alpha_backward, similarity_alpha_forward, SimilarityLayer};
use crate::surrogate::SurrogateHead;
use crate::tensor::{LabelMap, Real, Tensor, IGNORE_LABEL};

/// Which objective drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Cross-entropy on the current frame plus the consistency term.
    Base,
    /// Distillation towards blended teacher logits on both frames.
    #[serde(rename = "kd")]
    Distillation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Seeds the per-epoch pair order.
    pub seed: u64,
    pub mode: TrainMode,
    /// Train the head jointly instead of keeping it frozen.
    pub one_step: bool,
    /// Align the past frame with the pair's homography (identity otherwise).
    pub registration: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 0.5, momentum: 0.9, epochs: 10, seed: 0, mode: TrainMode::Base, one_step: false, registration: true }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("at least one epoch is required".into()));
        }
        Ok(())
    }
}

/// The trainable pipeline: image-model head plus similarity layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    pub head: SurrogateHead<T>,
    pub layer: SimilarityLayer<T>,
}

impl<T: Real> Model<T> {
    /// Similarity parameters followed by head parameters.
    pub fn flat_params(&self) -> Vec<T> {
        let mut p = self.layer.flat_params();
        p.extend(self.head.flat_params());
        p
    }

    pub fn set_flat_params(&mut self, params: &[T]) -> Result<()> {
        let n = self.layer.param_count();
        if params.len() != n + self.head.param_count() {
            return shape_err("model parameter count mismatch");
        }
        self.layer.set_flat_params(&params[..n])?;
        self.head.set_flat_params(&params[n..])
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { head: self.head.cast(), layer: self.layer.cast() }
    }
}

/// One input of the image model: frozen features and the frame's logit noise.
#[derive(Debug, Clone)]
pub struct FrameInput<T = f32> {
    pub features: Tensor<T>,
    pub noise: Tensor<T>,
}

impl<T: Real> FrameInput<T> {
    pub fn logits(&self, head: &SurrogateHead<T>) -> Result<Tensor<T>> {
        head.logits(&self.features, self.noise.height(), self.noise.width())?.add(&self.noise)
    }

    pub fn cast<U: Real>(&self) -> FrameInput<U> {
        FrameInput { features: self.features.cast(), noise: self.noise.cast() }
    }
}

/// A consecutive frame pair (past `p`, current `q`).
#[derive(Debug, Clone)]
pub struct PairSample<T = f32> {
    pub past: FrameInput<T>,
    pub current: FrameInput<T>,
    pub homography: Homography,
    /// Past→current flow, stored on the current grid.
    pub flow: FlowField,
    /// Consistency weight on the current grid.
    pub weight: Tensor<T>,
    pub labels: Option<LabelMap>,
    /// Blended teacher logits (current, past).
    pub teacher: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> PairSample<T> {
    pub fn cast<U: Real>(&self) -> PairSample<U> {
        PairSample {
            past: self.past.cast(),
            current: self.current.cast(),
            homography: self.homography,
            flow: self.flow.clone(),
            weight: self.weight.cast(),
            labels: self.labels.clone(),
            teacher: self.teacher.as_ref().map(|(a, b)| (a.cast(), b.cast())),
        }
    }
}

/// Loss value and gradient of one pair.
#[derive(Debug, Clone)]
pub struct PairResult<T> {
    pub loss: PairLoss<T>,
    /// Flattened like [`Model::flat_params`]; head entries are zero unless
    /// `one_step` is set.
    pub grads: Vec<T>,
}

/// Forward and backward pass of the two-frame objective. The past output is
/// the image model's past logits; the current output is the propagation of
/// the current logits with the aligned past.
pub fn pair_loss<T: Real>(model: &Model<T>, sample: &PairSample<T>, mode: TrainMode, one_step: bool, registration: bool, weights: &LossWeights) -> Result<PairResult<T>> {
    let q_p = sample.past.logits(&model.head)?;
    let q_q = sample.current.logits(&model.head)?;
    let h_map = if registration { sample.homography } else { Homography::identity() };
    let aligned = align_past(&q_p, &sample.past.features, &h_map)?;
    let cache = similarity_alpha_forward(&aligned.features, &sample.current.features, &aligned.validity, &model.layer)?;
    let p_q = propagate_step(&q_q, &aligned.logits, &cache.alpha)?;
    let loss = match mode {
        TrainMode::Base => {
            let labels = sample.labels.as_ref().ok_or_else(|| Error::MissingArtifact("pair has no current-frame labels".into()))?;
            total_loss_base(&p_q, &q_p, labels, &sample.flow, &sample.weight, weights, IGNORE_LABEL)?
        }
        TrainMode::Distillation => {
            let (tq, tp) = sample.teacher.as_ref().ok_or_else(|| Error::MissingArtifact("pair has no teacher logits".into()))?;
            total_loss_kd(&p_q, &q_p, tq, tp, &sample.flow, &sample.weight, weights)?
        }
    };
    if !loss.total.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let (g_q, g_aligned, g_alpha) = propagate_step_backward(&q_q, &aligned.logits, &cache.alpha, &loss.grad_current)?;
    let mut grads = similarity_alpha_backward(&cache, &model.layer, &g_alpha)?.params;
    if grads.len() != model.layer.param_count() {
        grads.resize(model.layer.param_count(), T::zero());
    }
    if one_step {
        let mut g_past = loss.grad_past.clone();
        g_past.add_assign(&aligned.logit_grid.adjoint(&g_aligned)?)?;
        let hq = model.head.backward(&sample.current.features, &g_q)?;
        let hp = model.head.backward(&sample.past.features, &g_past)?;
        grads.extend(hq.iter().zip(&hp).map(|(a, b)| *a + *b));
    } else {
        grads.extend(std::iter::repeat_n(T::zero(), model.head.param_count()));
    }
    Ok(PairResult { loss, grads })
}

/// `v ← m v + g`, `p ← p − lr v`.
pub fn sgd_step<T: Real>(params: &mut [T], grads: &[T], lr: T, momentum: T, velocity: &mut [T]) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return shape_err(format!("sgd: {} params, {} grads, {} velocity", params.len(), grads.len(), velocity.len()));
    }
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        *v = momentum * *v + *g;
        *p = *p - lr * *v;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T = f32> {
    pub model: Model<T>,
    /// Mean loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Runs `config.epochs` passes over `samples` in a seeded shuffled order,
/// one SGD step per pair.
pub fn train<T: Real>(samples: &[PairSample<T>], init: &Model<T>, config: &TrainConfig, weights: &LossWeights) -> Result<TrainOutcome<T>> {
    config.validate()?;
    weights.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training pairs".into()));
    }
    for (i, s) in samples.iter().enumerate() {
        let missing = match config.mode {
            TrainMode::Base => s.labels.is_none(),
            TrainMode::Distillation => s.teacher.is_none(),
        };
        if missing {
            return Err(Error::MissingArtifact(format!("pair {} lacks the targets needed for {:?} training", i, config.mode)));
        }
    }
    let mut model = init.clone();
    let mut params = model.flat_params();
    let mut velocity = vec![T::zero(); params.len()];
    let (lr, momentum) = (T::lit(config.lr), T::lit(config.momentum));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut steps = 0;
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for &i in &order {
            let r = pair_loss(&model, &samples[i], config.mode, config.one_step, config.registration, weights)?;
            sum += r.loss.total.as_f64();
            sgd_step(&mut params, &r.grads, lr, momentum, &mut velocity)?;
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::NonFinite(format!("parameters diverged in epoch {}", epoch)));
            }
            model.set_flat_params(&params)?;
            steps += 1;
        }
        epoch_losses.push(sum / samples.len() as f64);
    }
    Ok(TrainOutcome { model, epoch_losses, steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    fn random_pair(seed: u64, size: usize, classes: usize) -> (PairSample<f64>, Model<f64>) {
        gradcheck::random_pair(seed, size, classes).unwrap()
    }

    #[test]
    fn sgd_examples() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut v = vec![0.0; 3];
        sgd_step(&mut p, &[0.0; 3], 0.1, 0.9, &mut v).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        let g = p.clone();
        sgd_step(&mut p, &g, 1.0, 0.0, &mut v).unwrap();
        assert_eq!(p, vec![0.0; 3]);
        assert!(sgd_step(&mut p, &[0.0; 2], 1.0, 0.0, &mut v).is_err());
    }

    #[test]
    fn sgd_converges_on_quadratic_bowl() {
        for &lr in &[0.05, 0.2, 0.45] {
            let mut p = [3.0f64];
            let mut v = [0.0];
            for _ in 0..500 {
                let g = [2.0 * p[0]];
                sgd_step(&mut p, &g, lr, 0.0, &mut v).unwrap();
            }
            // p_{k+1} = (1 − 2 lr) p_k
            assert!(p[0].abs() <= 3.0 * (1.0f64 - 2.0 * lr).abs().powi(500) + 1e-300);
            assert!(p[0].abs() < 1e-10);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { momentum: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn one_step_adds_head_gradients() {
        let (sample, model) = random_pair(1, 8, 3);
        let w = LossWeights::default();
        let frozen = pair_loss(&model, &sample, TrainMode::Base, false, true, &w).unwrap();
        let joint = pair_loss(&model, &sample, TrainMode::Base, true, true, &w).unwrap();
        let n = model.layer.param_count();
        assert_eq!(frozen.grads[..n], joint.grads[..n]);
        assert!(frozen.grads[n..].iter().all(|&g| g == 0.0));
        assert!(joint.grads[n..].iter().any(|&g| g != 0.0));
        assert_eq!(frozen.loss.total, joint.loss.total);
    }

    #[test]
    fn missing_targets_are_reported() {
        let (mut sample, model) = random_pair(2, 8, 3);
        sample.labels = None;
        let cfg = TrainConfig { epochs: 1, ..Default::default() };
        let err = train(&[sample.clone()], &model, &cfg, &LossWeights::default()).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
        let kd = TrainConfig { mode: TrainMode::Distillation, ..cfg };
        assert!(train(&[sample], &model, &kd, &LossWeights::default()).is_ok());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (sample, model) = random_pair(3, 8, 3);
        // lr must be positive, so an arbitrarily small step stands in for lr = 0
        // at the optimizer level
        let mut p = model.flat_params();
        let before = p.clone();
        let mut v = vec![0.0; p.len()];
        let r = pair_loss(&model, &sample, TrainMode::Base, true, true, &LossWeights::default()).unwrap();
        for _ in 0..5 {
            sgd_step(&mut p, &r.grads, 0.0, 0.9, &mut v).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn repeated_pair_descends() {
        let (sample, model) = random_pair(4, 8, 3);
        let cfg = TrainConfig { lr: 1e-3, momentum: 0.0, epochs: 20, one_step: true, ..Default::default() };
        let out = train(&[sample], &model, &cfg, &LossWeights::default()).unwrap();
        assert_eq!(out.steps, 20);
        for w in out.epoch_losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{:?}", out.epoch_losses);
        }
    }

    #[test]
    fn modes_follow_different_trajectories() {
        let samples: Vec<_> = (0..3).map(|s| random_pair(10 + s, 8, 3).0).collect();
        let model = random_pair(10, 8, 3).1;
        let cfg = TrainConfig { epochs: 2, ..Default::default() };
        let w = LossWeights { lambda_kd: 1.0, ..Default::default() };
        let base = train(&samples, &model, &cfg, &w).unwrap();
        let kd = train(&samples, &model, &TrainConfig { mode: TrainMode::Distillation, ..cfg }, &w).unwrap();
        assert_ne!(base.model.flat_params(), kd.model.flat_params());
        let again = train(&samples, &model, &cfg, &w).unwrap();
        assert_eq!(base.model, again.model);
        assert_eq!(base.epoch_losses, again.epoch_losses);
    }
}
