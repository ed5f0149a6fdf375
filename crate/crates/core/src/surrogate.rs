//! Frozen stand-in for the image segmentation model: parameter-free block
//! statistics at stride 4 followed by a per-pixel linear classifier, plus the
//! synthetic teacher used for distillation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::losses::loss_ce_grad;
use crate::ops::{bilinear_resize, bilinear_resize_backward};
use crate::tensor::{Kind, LabelMap, Real, Tensor, IGNORE_LABEL};

pub const FEATURE_STRIDE: usize = 4;
pub const FEATURE_CHANNELS: usize = 8;

/// Stride-4 feature map of an RGB frame: per 4×4 block the mean of each
/// colour channel, the standard deviation of each colour channel, and the mean
/// absolute central difference of the gray image along x and along y.
pub fn surrogate_features<T: Real>(frame: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = frame.chw();
    if c != 3 {
        return shape_err(format!("expected an RGB frame, got {} channels", c));
    }
    if h % FEATURE_STRIDE != 0 || w % FEATURE_STRIDE != 0 || h == 0 || w == 0 {
        return shape_err(format!("frame {}x{} is not divisible by {}", h, w, FEATURE_STRIDE));
    }
    let s = FEATURE_STRIDE;
    let (fh, fw) = (h / s, w / s);
    let third = T::lit(1.0 / 3.0);
    let gray: Vec<T> = (0..h * w).map(|i| (frame.data()[i] + frame.data()[h * w + i] + frame.data()[2 * h * w + i]) * third).collect();
    let g = |y: usize, x: usize| gray[y * w + x];
    let half = T::lit(0.5);
    let count = T::lit((s * s) as f64);
    let mut out = Tensor::zeros(FEATURE_CHANNELS, fh, fw, Kind::Feature);
    for by in 0..fh {
        for bx in 0..fw {
            let pixels = || (0..s).flat_map(move |dy| (0..s).map(move |dx| (by * s + dy, bx * s + dx)));
            for ch in 0..3 {
                let mean = pixels().map(|(y, x)| frame.at(ch, y, x)).sum::<T>() / count;
                let var = pixels().map(|(y, x)| (frame.at(ch, y, x) - mean).powi(2)).sum::<T>() / count;
                out.set(ch, by, bx, mean);
                out.set(3 + ch, by, bx, var.sqrt());
            }
            let gx = pixels().map(|(y, x)| (g(y, (x + 1).min(w - 1)) - g(y, x.saturating_sub(1))).abs() * half).sum::<T>() / count;
            let gy = pixels().map(|(y, x)| (g((y + 1).min(h - 1), x) - g(y.saturating_sub(1), x)).abs() * half).sum::<T>() / count;
            out.set(6, by, bx, gx);
            out.set(7, by, bx, gy);
        }
    }
    Ok(out)
}

/// Per-pixel linear classifier over the feature channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateHead<T = f32> {
    pub classes: usize,
    /// Row-major `classes × FEATURE_CHANNELS`.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> SurrogateHead<T> {
    pub fn zeros(classes: usize) -> Self {
        Self { classes, weights: vec![T::zero(); classes * FEATURE_CHANNELS], bias: vec![T::zero(); classes] }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn flat_params(&self) -> Vec<T> {
        self.weights.iter().chain(&self.bias).copied().collect()
    }

    pub fn set_flat_params(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.param_count() {
            return shape_err(format!("expected {} head parameters, got {}", self.param_count(), params.len()));
        }
        let nw = self.weights.len();
        self.weights.copy_from_slice(&params[..nw]);
        self.bias.copy_from_slice(&params[nw..]);
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> SurrogateHead<U> {
        SurrogateHead {
            classes: self.classes,
            weights: self.weights.iter().map(|v| U::lit(v.as_f64())).collect(),
            bias: self.bias.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    fn check(&self, features: &Tensor<T>) -> Result<()> {
        if self.classes < 2 || self.weights.len() != self.classes * FEATURE_CHANNELS || self.bias.len() != self.classes {
            return shape_err("malformed surrogate head");
        }
        if features.channels() != FEATURE_CHANNELS {
            return shape_err(format!("head expects {} feature channels, got {}", FEATURE_CHANNELS, features.channels()));
        }
        Ok(())
    }

    /// Logits on the feature grid.
    pub fn logits_low(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(features)?;
        let (_, h, w) = features.chw();
        let p = h * w;
        let f = features.data();
        let mut out = vec![T::zero(); self.classes * p];
        for c in 0..self.classes {
            let row = &self.weights[c * FEATURE_CHANNELS..(c + 1) * FEATURE_CHANNELS];
            for i in 0..p {
                out[c * p + i] = self.bias[c] + (0..FEATURE_CHANNELS).map(|k| row[k] * f[k * p + i]).sum::<T>();
            }
        }
        Tensor::new(vec![self.classes, h, w], out, Kind::Logits)
    }

    /// Full-resolution logits (bilinear upsampling of [`Self::logits_low`]).
    pub fn logits(&self, features: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        Ok(bilinear_resize(&self.logits_low(features)?, out_h, out_w)?.with_kind(Kind::Logits))
    }

    /// Parameter gradients (flattened like [`Self::flat_params`]) given the
    /// gradient of the full-resolution logits.
    pub fn backward(&self, features: &Tensor<T>, grad_logits: &Tensor<T>) -> Result<Vec<T>> {
        self.check(features)?;
        let (_, h, w) = features.chw();
        if grad_logits.channels() != self.classes {
            return shape_err("logit gradient has the wrong class count");
        }
        let g = bilinear_resize_backward(grad_logits, h, w)?;
        let p = h * w;
        let (f, gd) = (features.data(), g.data());
        let mut grads = vec![T::zero(); self.param_count()];
        let nw = self.weights.len();
        for c in 0..self.classes {
            for i in 0..p {
                let gi = gd[c * p + i];
                for k in 0..FEATURE_CHANNELS {
                    grads[c * FEATURE_CHANNELS + k] = grads[c * FEATURE_CHANNELS + k] + gi * f[k * p + i];
                }
                grads[nw + c] = grads[nw + c] + gi;
            }
        }
        Ok(grads)
    }
}

/// Seed for the logit noise of one frame of a sequence.
pub fn frame_noise_seed(sequence_seed: u64, frame: usize) -> u64 {
    sequence_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (frame as u64).wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// I.i.d. Gaussian noise of standard deviation `level`.
pub fn gaussian_noise<T: Real>(c: usize, h: usize, w: usize, level: f64, seed: u64) -> Tensor<T> {
    if level == 0.0 {
        return Tensor::zeros(c, h, w, Kind::Logits);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(c, h, w, Kind::Logits, |_, _, _| T::lit(level * rng.sample::<f64, _>(StandardNormal)))
}

/// Image-model logits of a frame: the head applied to the frame's features,
/// upsampled to full resolution, plus seeded Gaussian noise of std `level`.
pub fn surrogate_logits<T: Real>(frame: &Tensor<T>, head: &SurrogateHead<T>, level: f64, seed: u64) -> Result<Tensor<T>> {
    if !(level >= 0.0 && level.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise level {} must be finite and non-negative", level)));
    }
    let (_, h, w) = frame.chw();
    let clean = head.logits(&surrogate_features(frame)?, h, w)?;
    if level == 0.0 {
        return Ok(clean);
    }
    clean.add(&gaussian_noise(head.classes, h, w, level, seed))
}

/// Settings for fitting the head by gradient descent on cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadFit {
    pub iterations: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Upper bound on sampled training pixels.
    pub max_pixels: usize,
    pub seed: u64,
}

impl Default for HeadFit {
    fn default() -> Self {
        Self { iterations: 300, lr: 0.5, momentum: 0.9, weight_decay: 1e-3, max_pixels: 40_000, seed: 0 }
    }
}

/// Fits a head on (features, full-resolution labels) pairs. Each pixel sees
/// the bilinearly upsampled features, which by linearity is the same model as
/// upsampling the head's low-resolution logits. Optimisation runs on
/// standardised features and the result is mapped back.
pub fn fit_head(samples: &[(Tensor<f32>, LabelMap)], classes: usize, fit: &HeadFit) -> Result<SurrogateHead<f32>> {
    if classes < 2 {
        return Err(Error::InvalidArgument("a head needs at least two classes".into()));
    }
    let mut pixels: Vec<([f64; FEATURE_CHANNELS], u8)> = Vec::new();
    for (features, labels) in samples {
        if features.channels() != FEATURE_CHANNELS {
            return shape_err("head features have the wrong channel count");
        }
        let (h, w) = labels.dims();
        let up = bilinear_resize(&features.cast::<f64>(), h, w)?;
        let p = h * w;
        for (i, &l) in labels.data().iter().enumerate() {
            if l == IGNORE_LABEL {
                continue;
            }
            if l as usize >= classes {
                return Err(Error::InvalidArgument(format!("label {} out of range for {} classes", l, classes)));
            }
            let mut f = [0.0; FEATURE_CHANNELS];
            for (k, v) in f.iter_mut().enumerate() {
                *v = up.data()[k * p + i];
            }
            pixels.push((f, l));
        }
    }
    if pixels.is_empty() {
        return Err(Error::InvalidArgument("no labelled pixels to fit the head on".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(fit.seed);
    pixels.shuffle(&mut rng);
    pixels.truncate(fit.max_pixels.max(1));
    let n = pixels.len() as f64;

    let mut mean = [0.0; FEATURE_CHANNELS];
    let mut std = [0.0; FEATURE_CHANNELS];
    for (f, _) in &pixels {
        for k in 0..FEATURE_CHANNELS {
            mean[k] += f[k] / n;
        }
    }
    for (f, _) in &pixels {
        for k in 0..FEATURE_CHANNELS {
            std[k] += (f[k] - mean[k]).powi(2) / n;
        }
    }
    for s in &mut std {
        *s = s.sqrt().max(1e-6);
    }
    let z: Vec<[f64; FEATURE_CHANNELS]> = pixels
        .iter()
        .map(|(f, _)| std::array::from_fn(|k| (f[k] - mean[k]) / std[k]))
        .collect();

    // Pixel rows as a 1×1×N "image" so the shared cross-entropy applies.
    let labels = LabelMap::new(1, pixels.len(), pixels.iter().map(|p| p.1).collect())?;
    let np = 1 + FEATURE_CHANNELS;
    let mut params = vec![0.0f64; classes * np];
    let mut velocity = vec![0.0f64; params.len()];
    for _ in 0..fit.iterations {
        let logits = Tensor::from_fn(classes, 1, pixels.len(), Kind::Logits, |c, _, i| {
            let row = &params[c * np..(c + 1) * np];
            row[FEATURE_CHANNELS] + (0..FEATURE_CHANNELS).map(|k| row[k] * z[i][k]).sum::<f64>()
        });
        let (_, g) = loss_ce_grad(&logits, &labels, IGNORE_LABEL)?;
        let mut grad = vec![0.0; params.len()];
        for c in 0..classes {
            let gc = g.channel(c);
            for (i, zi) in z.iter().enumerate() {
                for k in 0..FEATURE_CHANNELS {
                    grad[c * np + k] += gc[i] * zi[k];
                }
                grad[c * np + FEATURE_CHANNELS] += gc[i];
            }
            for k in 0..FEATURE_CHANNELS {
                grad[c * np + k] += fit.weight_decay * params[c * np + k];
            }
        }
        for ((p, v), g) in params.iter_mut().zip(&mut velocity).zip(&grad) {
            *v = fit.momentum * *v + g;
            *p -= fit.lr * *v;
        }
    }

    let mut head = SurrogateHead::<f32>::zeros(classes);
    for c in 0..classes {
        let row = &params[c * np..(c + 1) * np];
        let mut b = row[FEATURE_CHANNELS];
        for k in 0..FEATURE_CHANNELS {
            let wk = row[k] / std[k];
            head.weights[c * FEATURE_CHANNELS + k] = wk as f32;
            b -= wk * mean[k];
        }
        head.bias[c] = b as f32;
    }
    Ok(head)
}

/// Teacher logits from labels: `margin` on the class, 0 elsewhere. With
/// probability `corruption_rate` a pixel's class is replaced by a uniformly
/// drawn different class. Ignored pixels get all-zero logits.
pub fn make_teacher_logits(labels: &LabelMap, classes: usize, margin: f64, corruption_rate: f64, seed: u64) -> Result<Tensor<f32>> {
    if !(margin > 0.0 && margin.is_finite()) {
        return Err(Error::InvalidArgument(format!("teacher margin {} must be positive", margin)));
    }
    if !(0.0..1.0).contains(&corruption_rate) {
        return Err(Error::InvalidArgument(format!("corruption rate {} must lie in [0, 1)", corruption_rate)));
    }
    if classes < 2 {
        return Err(Error::InvalidArgument("teacher needs at least two classes".into()));
    }
    let (h, w) = labels.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Tensor::zeros(classes, h, w, Kind::Logits);
    for y in 0..h {
        for x in 0..w {
            let l = labels.at(y, x);
            if l == IGNORE_LABEL {
                continue;
            }
            let mut class = l as usize;
            if class >= classes {
                return Err(Error::InvalidArgument(format!("label {} out of range for {} classes", l, classes)));
            }
            if rng.random::<f64>() < corruption_rate {
                let shift = rng.random_range(1..classes);
                class = (class + shift) % classes;
            }
            out.set(class, y, x, margin as f32);
        }
    }
    Ok(out)
}
