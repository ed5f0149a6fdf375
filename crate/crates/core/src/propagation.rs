//! Similarity-weighted propagation of logits through a video.
//!
//! Each frame's output is `α p + (1 − α) q`, where `q` is the image model's
//! logits for the frame, `p` the previous output aligned to the current frame,
//! and `α` a per-pixel weight computed from the two frames' stride-4 feature
//! maps. Pixels without a valid aligned past sample always take `q`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::geometry::{homography_grid, Homography};
use crate::ops::{
    bilinear_resize, bilinear_resize_backward, conv2d, conv2d_backward, relu, relu_backward, sigmoid, sigmoid_backward, ConvSpec, SamplingGrid,
};
use crate::tensor::{Kind, Real, Tensor};

/// How interpolation weights are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMode {
    /// Convolution stack over the concatenated feature maps.
    Conv,
    /// Parameter-free per-pixel cosine similarity mapped to [0, 1].
    Cosine,
}

/// Convolutional stack `2C → C → C/2 → 1` (3×3, stride 1, padding 1, ReLU
/// between layers, sigmoid output), or the cosine baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityLayer<T = f32> {
    pub mode: SimilarityMode,
    pub convs: Vec<ConvSpec<T>>,
}

impl<T: Real> SimilarityLayer<T> {
    pub fn cosine() -> Self {
        Self { mode: SimilarityMode::Cosine, convs: Vec::new() }
    }

    fn stack_shapes(feature_channels: usize) -> Result<Vec<(usize, usize)>> {
        if feature_channels < 2 {
            return Err(Error::InvalidArgument("similarity stack needs at least 2 feature channels".into()));
        }
        let c = feature_channels;
        Ok(vec![(2 * c, c), (c, (c / 2).max(1)), ((c / 2).max(1), 1)])
    }

    /// All weights and biases zero: α is 0.5 wherever the past is valid.
    pub fn zeros(feature_channels: usize) -> Result<Self> {
        let convs = Self::stack_shapes(feature_channels)?
            .into_iter()
            .map(|(i, o)| ConvSpec::zeros(i, o, 3, 1, 1))
            .collect::<Result<_>>()?;
        Ok(Self { mode: SimilarityMode::Conv, convs })
    }

    /// Seeded initialisation: weights uniform in ±√(1/fan_in), biases zero.
    pub fn learned(feature_channels: usize, seed: u64) -> Result<Self> {
        let mut layer = Self::zeros(feature_channels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in &mut layer.convs {
            let bound = (1.0 / (conv.in_channels * conv.kernel * conv.kernel) as f64).sqrt();
            conv.weights.iter_mut().for_each(|w| *w = T::lit(rng.random_range(-bound..bound)));
        }
        Ok(layer)
    }

    pub fn feature_channels(&self) -> Option<usize> {
        self.convs.first().map(|c| c.in_channels / 2)
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(ConvSpec::param_count).sum()
    }

    pub fn check(&self) -> Result<()> {
        if self.mode == SimilarityMode::Cosine {
            return Ok(());
        }
        if self.convs.is_empty() {
            return Err(Error::InvalidArgument("convolutional similarity layer has no layers".into()));
        }
        for pair in self.convs.windows(2) {
            if pair[0].out_channels != pair[1].in_channels {
                return shape_err("similarity layers are not chained");
            }
        }
        for c in &self.convs {
            c.check()?;
            if c.stride != 1 || c.padding != c.kernel / 2 {
                return Err(Error::InvalidArgument("similarity convolutions must preserve resolution".into()));
            }
        }
        if self.convs.last().map(|c| c.out_channels) != Some(1) {
            return shape_err("similarity stack must end in one channel");
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> SimilarityLayer<U> {
        SimilarityLayer {
            mode: self.mode,
            convs: self
                .convs
                .iter()
                .map(|c| ConvSpec {
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                    kernel: c.kernel,
                    stride: c.stride,
                    padding: c.padding,
                    weights: c.weights.iter().map(|v| U::lit(v.as_f64())).collect(),
                    bias: c.bias.iter().map(|v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Parameters flattened layer by layer, weights before bias.
    pub fn flat_params(&self) -> Vec<T> {
        self.convs.iter().flat_map(|c| c.weights.iter().chain(&c.bias).copied()).collect()
    }

    pub fn set_flat_params(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.param_count() {
            return shape_err(format!("expected {} parameters, got {}", self.param_count(), params.len()));
        }
        let mut off = 0;
        for c in &mut self.convs {
            let nw = c.weights.len();
            c.weights.copy_from_slice(&params[off..off + nw]);
            off += nw;
            let nb = c.bias.len();
            c.bias.copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
        Ok(())
    }
}

/// Intermediate values of a similarity forward pass, kept for backward.
#[derive(Debug, Clone)]
pub struct SimilarityCache<T> {
    mode: SimilarityMode,
    inputs: Vec<Tensor<T>>,
    pre: Vec<Tensor<T>>,
    low: Tensor<T>,
    feat_past: Tensor<T>,
    feat_current: Tensor<T>,
    validity: Tensor<T>,
    pub alpha: Tensor<T>,
}

impl<T: Real> SimilarityCache<T> {
    /// Sign pattern of every hidden pre-activation; the pass is smooth in its
    /// inputs as long as this pattern does not change.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let hidden = self.pre.len().saturating_sub(1);
        self.pre[..hidden].iter().flat_map(|z| z.data().iter().map(|&v| v > T::zero())).collect()
    }
}

/// Gradients of a similarity pass.
#[derive(Debug, Clone)]
pub struct SimilarityGrads<T> {
    /// Flattened like [`SimilarityLayer::flat_params`].
    pub params: Vec<T>,
    pub feat_past: Tensor<T>,
    pub feat_current: Tensor<T>,
}

fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ca, h, w) = a.chw();
    let (cb, _, _) = b.chw();
    let mut data = Vec::with_capacity((ca + cb) * h * w);
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(vec![ca + cb, h, w], data, Kind::Feature)
}

fn cosine_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = a.chw();
    let p = h * w;
    let (da, db) = (a.data(), b.data());
    let data = (0..p)
        .map(|i| {
            let (mut dot, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
            for ch in 0..c {
                let (x, y) = (da[ch * p + i], db[ch * p + i]);
                dot = dot + x * y;
                na = na + x * x;
                nb = nb + y * y;
            }
            let s = dot / (na.sqrt() * nb.sqrt()).max(T::lit(1e-12));
            ((s + T::one()) * T::lit(0.5)).max(T::zero()).min(T::one())
        })
        .collect();
    Tensor::new(vec![1, h, w], data, Kind::Alpha).expect("cosine map dims")
}

/// Forward pass returning the cache needed by [`similarity_alpha_backward`].
pub fn similarity_alpha_forward<T: Real>(
    feat_past_warped: &Tensor<T>,
    feat_current: &Tensor<T>,
    validity: &Tensor<T>,
    layer: &SimilarityLayer<T>,
) -> Result<SimilarityCache<T>> {
    feat_past_warped.ensure_same_shape(feat_current, "similarity features")?;
    layer.check()?;
    if validity.channels() != 1 {
        return shape_err("validity mask must have one channel");
    }
    let (_, out_h, out_w) = validity.chw();
    let mut inputs = Vec::new();
    let mut pre = Vec::new();
    let low = match layer.mode {
        SimilarityMode::Cosine => cosine_map(feat_past_warped, feat_current),
        SimilarityMode::Conv => {
            if Some(feat_current.channels()) != layer.feature_channels() {
                return shape_err(format!(
                    "similarity layer expects {:?} feature channels, got {}",
                    layer.feature_channels(),
                    feat_current.channels()
                ));
            }
            let mut x = concat_channels(feat_past_warped, feat_current)?;
            let n = layer.convs.len();
            for (li, conv) in layer.convs.iter().enumerate() {
                let z = conv2d(&x, conv)?;
                inputs.push(x);
                x = if li + 1 < n { relu(&z) } else { sigmoid(&z) };
                pre.push(z);
            }
            x.with_kind(Kind::Alpha)
        }
    };
    let up = bilinear_resize(&low, out_h, out_w)?;
    let alpha = up.mul_map(validity)?.with_kind(Kind::Alpha);
    Ok(SimilarityCache {
        mode: layer.mode,
        inputs,
        pre,
        low,
        feat_past: feat_past_warped.clone(),
        feat_current: feat_current.clone(),
        validity: validity.clone(),
        alpha,
    })
}

/// Interpolation weights at the resolution of `validity`, forced to 0 where
/// `validity` is 0.
pub fn similarity_alpha<T: Real>(
    feat_past_warped: &Tensor<T>,
    feat_current: &Tensor<T>,
    validity: &Tensor<T>,
    layer: &SimilarityLayer<T>,
) -> Result<Tensor<T>> {
    Ok(similarity_alpha_forward(feat_past_warped, feat_current, validity, layer)?.alpha)
}

/// Backward pass of the convolutional similarity layer. Cosine mode has no
/// parameters and yields empty parameter gradients and zero feature gradients.
pub fn similarity_alpha_backward<T: Real>(cache: &SimilarityCache<T>, layer: &SimilarityLayer<T>, grad_alpha: &Tensor<T>) -> Result<SimilarityGrads<T>> {
    cache.alpha.ensure_same_shape(grad_alpha, "alpha gradient")?;
    let zeros_like = |t: &Tensor<T>| Tensor::zeros(t.channels(), t.height(), t.width(), Kind::Feature);
    if cache.mode == SimilarityMode::Cosine {
        return Ok(SimilarityGrads { params: Vec::new(), feat_past: zeros_like(&cache.feat_past), feat_current: zeros_like(&cache.feat_current) });
    }
    let g_up = grad_alpha.mul_map(&cache.validity)?;
    let (_, lh, lw) = cache.low.chw();
    let mut g = bilinear_resize_backward(&g_up, lh, lw)?;
    let n = layer.convs.len();
    let mut per_layer = vec![(Vec::new(), Vec::new()); n];
    for li in (0..n).rev() {
        g = if li + 1 == n {
            sigmoid_backward(&cache.low, &g)?
        } else {
            relu_backward(&cache.pre[li], &g)?
        };
        let grads = conv2d_backward(&cache.inputs[li], &layer.convs[li], &g)?;
        per_layer[li] = (grads.weights, grads.bias);
        g = grads.input;
    }
    let params = per_layer.into_iter().flat_map(|(w, b)| w.into_iter().chain(b)).collect();
    let c = cache.feat_past.channels();
    let p = cache.feat_past.plane();
    let (_, h, w) = cache.feat_past.chw();
    let data = g.into_data();
    Ok(SimilarityGrads {
        params,
        feat_past: Tensor::new(vec![c, h, w], data[..c * p].to_vec(), Kind::Feature)?,
        feat_current: Tensor::new(vec![c, h, w], data[c * p..].to_vec(), Kind::Feature)?,
    })
}

/// `q̂ = α p + (1 − α) q` per pixel and class, with α broadcast over classes.
pub fn propagate_step<T: Real>(q: &Tensor<T>, p_warped: &Tensor<T>, alpha: &Tensor<T>) -> Result<Tensor<T>> {
    q.ensure_same_shape(p_warped, "propagation logits")?;
    if alpha.channels() != 1 || !alpha.same_spatial(q) {
        return shape_err("alpha must be a single-channel map matching the logits");
    }
    if alpha.data().iter().any(|&a| !(a >= T::zero() && a <= T::one())) {
        return Err(Error::InvalidArgument("alpha outside [0, 1]".into()));
    }
    let (c, h, w) = q.chw();
    let p = h * w;
    let (dq, dp, da) = (q.data(), p_warped.data(), alpha.data());
    let data = (0..c * p)
        .map(|i| {
            let a = da[i % p];
            if a == T::zero() {
                dq[i]
            } else if a == T::one() {
                dp[i]
            } else {
                // rounding can leave the segment; clamp keeps the blend convex
                let (lo, hi) = if dp[i] < dq[i] { (dp[i], dq[i]) } else { (dq[i], dp[i]) };
                (dq[i] + a * (dp[i] - dq[i])).max(lo).min(hi)
            }
        })
        .collect();
    Tensor::new(vec![c, h, w], data, Kind::Logits)
}

/// Gradients of [`propagate_step`] w.r.t. `q`, `p_warped` and `alpha`.
pub fn propagate_step_backward<T: Real>(
    q: &Tensor<T>,
    p_warped: &Tensor<T>,
    alpha: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    q.ensure_same_shape(grad, "propagation gradient")?;
    let (c, h, w) = q.chw();
    let p = h * w;
    let (dq, dp, da, g) = (q.data(), p_warped.data(), alpha.data(), grad.data());
    let mut gq = vec![T::zero(); c * p];
    let mut gp = vec![T::zero(); c * p];
    let mut ga = vec![T::zero(); p];
    for i in 0..c * p {
        let a = da[i % p];
        gq[i] = (T::one() - a) * g[i];
        gp[i] = a * g[i];
        ga[i % p] = ga[i % p] + g[i] * (dp[i] - dq[i]);
    }
    Ok((
        Tensor::new(vec![c, h, w], gq, Kind::Logits)?,
        Tensor::new(vec![c, h, w], gp, Kind::Logits)?,
        Tensor::new(vec![1, h, w], ga, Kind::Feature)?,
    ))
}

/// Inference switches matching the ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOptions {
    /// Align the past with the supplied homography; identity otherwise.
    pub registration: bool,
    /// Force α = 0, reducing the output to the image model.
    pub alpha_zero: bool,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self { registration: true, alpha_zero: false }
    }
}

/// Recurrent state of one video stream.
#[derive(Debug, Clone, Default)]
pub struct PropagatorState<T = f32> {
    pub last_prediction: Option<Tensor<T>>,
    pub last_features: Option<Tensor<T>>,
    pub frame_index: usize,
}

impl<T: Real> PropagatorState<T> {
    pub fn new() -> Self {
        Self { last_prediction: None, last_features: None, frame_index: 0 }
    }

    /// Starts a new video: clears stored tensors and the frame counter.
    pub fn reset(&mut self) {
        *self = Self::new();
    }
}

/// Integer stride between the logit grid and the feature grid.
pub fn feature_stride(logit_h: usize, logit_w: usize, feat_h: usize, feat_w: usize) -> Result<usize> {
    if feat_h == 0 || feat_w == 0 || logit_h % feat_h != 0 || logit_w % feat_w != 0 || logit_h / feat_h != logit_w / feat_w {
        return shape_err(format!("features {}x{} are not an integer downsampling of {}x{}", feat_h, feat_w, logit_h, logit_w));
    }
    Ok(logit_h / feat_h)
}

/// Aligned past logits, their validity mask, and aligned past features.
pub struct Alignment<T> {
    pub logits: Tensor<T>,
    pub validity: Tensor<T>,
    pub features: Tensor<T>,
    pub logit_grid: SamplingGrid<T>,
    pub feature_grid: SamplingGrid<T>,
}

/// Warps past logits and features onto the current frame with `h_map`.
pub fn align_past<T: Real>(past_logits: &Tensor<T>, past_features: &Tensor<T>, h_map: &Homography) -> Result<Alignment<T>> {
    let (_, h, w) = past_logits.chw();
    let (_, fh, fw) = past_features.chw();
    let stride = feature_stride(h, w, fh, fw)?;
    let logit_grid = homography_grid::<T>(h_map, h, w, h, w)?;
    let feature_grid = homography_grid::<T>(&h_map.rescaled(stride as f64)?, fh, fw, fh, fw)?;
    Ok(Alignment {
        logits: logit_grid.apply(past_logits, T::zero())?,
        validity: logit_grid.mask(),
        features: feature_grid.apply(past_features, T::zero())?,
        logit_grid,
        feature_grid,
    })
}

/// Processes one frame of a stream. Frame 0 returns `q` unchanged; later
/// frames blend `q` with the aligned previous output. The returned logits are
/// also stored as the state's next past prediction.
pub fn video_step<T: Real>(
    state: &mut PropagatorState<T>,
    q: &Tensor<T>,
    features: &Tensor<T>,
    past_to_current: Option<&Homography>,
    layer: &SimilarityLayer<T>,
    options: StepOptions,
) -> Result<Tensor<T>> {
    let (past_logits, past_features) = match (&state.last_prediction, &state.last_features) {
        (Some(p), Some(f)) if state.frame_index > 0 => (p, f),
        _ => {
            feature_stride(q.height(), q.width(), features.height(), features.width())?;
            state.last_prediction = Some(q.clone());
            state.last_features = Some(features.clone());
            state.frame_index = 1;
            return Ok(q.clone());
        }
    };
    q.ensure_same_shape(past_logits, "logits across frames")?;
    features.ensure_same_shape(past_features, "features across frames")?;
    let h_map = if options.registration {
        *past_to_current.ok_or_else(|| Error::InvalidArgument(format!("frame {} needs a homography", state.frame_index)))?
    } else {
        Homography::identity()
    };
    let out = if options.alpha_zero {
        q.clone()
    } else {
        let aligned = align_past(past_logits, past_features, &h_map)?;
        let alpha = similarity_alpha(&aligned.features, features, &aligned.validity, layer)?;
        propagate_step(q, &aligned.logits, &alpha)?
    };
    state.last_prediction = Some(out.clone());
    state.last_features = Some(features.clone());
    state.frame_index += 1;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::softmax_channels;

    fn rand_tensor(seed: u64, c: usize, h: usize, w: usize, kind: Kind) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(c, h, w, kind, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn ones_mask(h: usize, w: usize) -> Tensor<f64> {
        Tensor::filled(1, h, w, 1.0, Kind::Mask)
    }

    #[test]
    fn stack_halves_channels() {
        let layer = SimilarityLayer::<f32>::learned(8, 1).unwrap();
        let shapes: Vec<_> = layer.convs.iter().map(|c| (c.in_channels, c.out_channels, c.kernel)).collect();
        assert_eq!(shapes, vec![(16, 8, 3), (8, 4, 3), (4, 1, 3)]);
        assert!(layer.convs.iter().all(|c| c.bias.iter().all(|&b| b == 0.0)));
        let bound = (1.0f32 / (16.0 * 9.0)).sqrt();
        assert!(layer.convs[0].weights.iter().all(|w| w.abs() <= bound));
        assert_eq!(layer, SimilarityLayer::learned(8, 1).unwrap());
        assert_ne!(layer, SimilarityLayer::learned(8, 2).unwrap());
    }

    #[test]
    fn cosine_alpha_examples() {
        let f = rand_tensor(1, 4, 3, 3, Kind::Feature);
        let a = similarity_alpha(&f, &f, &ones_mask(12, 12), &SimilarityLayer::cosine()).unwrap();
        assert!(a.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));

        let x = Tensor::<f64>::new(vec![2, 1, 1], vec![1.0, 0.0], Kind::Feature).unwrap();
        let y = Tensor::<f64>::new(vec![2, 1, 1], vec![0.0, 3.0], Kind::Feature).unwrap();
        let a = similarity_alpha(&x, &y, &ones_mask(4, 4), &SimilarityLayer::cosine()).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn dead_network_gives_half() {
        let f = rand_tensor(2, 8, 4, 4, Kind::Feature);
        let g = rand_tensor(3, 8, 4, 4, Kind::Feature);
        let mut mask = ones_mask(16, 16);
        mask.set(0, 0, 0, 0.0);
        let a = similarity_alpha(&f, &g, &mask, &SimilarityLayer::zeros(8).unwrap()).unwrap();
        assert_eq!(a.at(0, 0, 0), 0.0);
        assert!(a.data()[1..].iter().all(|&v| v == 0.5));
    }

    #[test]
    fn similarity_rejects_mismatched_channels() {
        let f = rand_tensor(2, 6, 4, 4, Kind::Feature);
        assert!(similarity_alpha(&f, &f, &ones_mask(16, 16), &SimilarityLayer::zeros(8).unwrap()).is_err());
        let g = rand_tensor(2, 8, 4, 5, Kind::Feature);
        let h = rand_tensor(2, 8, 4, 4, Kind::Feature);
        assert!(similarity_alpha(&g, &h, &ones_mask(16, 16), &SimilarityLayer::zeros(8).unwrap()).is_err());
    }

    #[test]
    fn propagate_examples() {
        let q = rand_tensor(5, 3, 4, 4, Kind::Logits);
        let p = rand_tensor(6, 3, 4, 4, Kind::Logits);
        let zero = Tensor::<f64>::zeros(1, 4, 4, Kind::Alpha);
        let one = Tensor::<f64>::filled(1, 4, 4, 1.0, Kind::Alpha);
        assert_eq!(propagate_step(&q, &p, &zero).unwrap().data(), q.data());
        assert_eq!(propagate_step(&q, &p, &one).unwrap().data(), p.data());
        let q1 = Tensor::<f64>::filled(1, 1, 1, 4.0, Kind::Logits);
        let p1 = Tensor::<f64>::filled(1, 1, 1, 2.0, Kind::Logits);
        let half = Tensor::<f64>::filled(1, 1, 1, 0.5, Kind::Alpha);
        assert_eq!(propagate_step(&q1, &p1, &half).unwrap().data(), &[3.0]);
        let bad = Tensor::<f64>::filled(1, 4, 4, 1.5, Kind::Alpha);
        assert!(propagate_step(&q, &p, &bad).is_err());
        assert!(propagate_step(&q, &rand_tensor(1, 2, 4, 4, Kind::Logits), &zero).is_err());
    }

    #[test]
    fn composed_gradient_matches_finite_differences() {
        let layer = SimilarityLayer::<f64>::learned(4, 9).unwrap();
        let fp = rand_tensor(10, 4, 2, 2, Kind::Feature).map(f64::abs);
        let fc = rand_tensor(11, 4, 2, 2, Kind::Feature).map(f64::abs);
        let q = rand_tensor(12, 3, 8, 8, Kind::Logits);
        let p = rand_tensor(13, 3, 8, 8, Kind::Logits);
        let up = rand_tensor(14, 3, 8, 8, Kind::Logits);
        let mask = ones_mask(8, 8);
        let loss = |l: &SimilarityLayer<f64>| -> f64 {
            let a = similarity_alpha(&fp, &fc, &mask, l).unwrap();
            propagate_step(&q, &p, &a).unwrap().data().iter().zip(up.data()).map(|(x, y)| x * y).sum()
        };
        let cache = similarity_alpha_forward(&fp, &fc, &mask, &layer).unwrap();
        let (_, _, ga) = propagate_step_backward(&q, &p, &cache.alpha, &up).unwrap();
        let grads = similarity_alpha_backward(&cache, &layer, &ga).unwrap();
        let params = layer.flat_params();
        for i in 0..params.len() {
            let mut lp = layer.clone();
            let mut v = params.clone();
            v[i] += 1e-3;
            lp.set_flat_params(&v).unwrap();
            let mut lm = layer.clone();
            v[i] -= 2e-3;
            lm.set_flat_params(&v).unwrap();
            let n = (loss(&lp) - loss(&lm)) / 2e-3;
            let a = grads.params[i];
            assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-8) < 1e-3, "param {}: {} vs {}", i, a, n);
        }
    }

    #[test]
    fn first_frame_returns_q_exactly() {
        let q = rand_tensor(1, 3, 8, 8, Kind::Logits).cast::<f32>();
        let f = rand_tensor(2, 8, 2, 2, Kind::Feature).cast::<f32>();
        let mut state = PropagatorState::new();
        let out = video_step(&mut state, &q, &f, None, &SimilarityLayer::learned(8, 0).unwrap(), StepOptions::default()).unwrap();
        assert_eq!(out, q);
        assert_eq!(state.frame_index, 1);
    }

    #[test]
    fn registration_requires_homography_after_first_frame() {
        let q = rand_tensor(1, 3, 8, 8, Kind::Logits);
        let f = rand_tensor(2, 8, 2, 2, Kind::Feature);
        let layer = SimilarityLayer::learned(8, 0).unwrap();
        let mut state = PropagatorState::new();
        video_step(&mut state, &q, &f, None, &layer, StepOptions::default()).unwrap();
        assert!(video_step(&mut state, &q, &f, None, &layer, StepOptions::default()).is_err());
        let no_reg = StepOptions { registration: false, alpha_zero: false };
        assert!(video_step(&mut state, &q, &f, None, &layer, no_reg).is_ok());
    }

    #[test]
    fn static_video_converges_monotonically() {
        let q = rand_tensor(3, 4, 8, 8, Kind::Logits);
        let f = rand_tensor(4, 8, 2, 2, Kind::Feature);
        let first = rand_tensor(5, 4, 8, 8, Kind::Logits);
        let layer = SimilarityLayer::learned(8, 3).unwrap();
        let mut state = PropagatorState::new();
        let mut prev = video_step(&mut state, &first, &f, None, &layer, StepOptions::default()).unwrap();
        let mut last_change = f64::INFINITY;
        for _ in 0..20 {
            let out = video_step(&mut state, &q, &f, Some(&Homography::identity()), &layer, StepOptions::default()).unwrap();
            let change = out.sub(&prev).unwrap().max_abs();
            assert!(change <= last_change + 1e-12);
            last_change = change;
            prev = out;
        }
        assert!(prev.sub(&q).unwrap().max_abs() < first.sub(&q).unwrap().max_abs());
    }

    #[test]
    fn alpha_zero_reduces_to_image_model() {
        let layer = SimilarityLayer::learned(8, 3).unwrap();
        let opts = StepOptions { registration: true, alpha_zero: true };
        let mut state = PropagatorState::new();
        let f = rand_tensor(4, 8, 2, 2, Kind::Feature);
        video_step(&mut state, &rand_tensor(6, 3, 8, 8, Kind::Logits), &f, None, &layer, opts).unwrap();
        let q1 = rand_tensor(7, 3, 8, 8, Kind::Logits);
        let out = video_step(&mut state, &q1, &f, Some(&Homography::translation(1.0, 0.0)), &layer, opts).unwrap();
        assert_eq!(out, q1);
    }

    #[test]
    fn invalid_pixels_keep_current_logits() {
        let layer = SimilarityLayer::learned(8, 3).unwrap();
        let mut state = PropagatorState::new();
        let f = rand_tensor(4, 8, 2, 2, Kind::Feature);
        video_step(&mut state, &rand_tensor(6, 3, 8, 8, Kind::Logits), &f, None, &layer, StepOptions::default()).unwrap();
        let q1 = rand_tensor(7, 3, 8, 8, Kind::Logits);
        let out = video_step(&mut state, &q1, &f, Some(&Homography::translation(2.0, 0.0)), &layer, StepOptions::default()).unwrap();
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..2 {
                    assert_eq!(out.at(c, y, x), q1.at(c, y, x));
                }
            }
        }
    }

    #[test]
    fn reset_restores_first_frame_behaviour() {
        let layer = SimilarityLayer::learned(8, 3).unwrap();
        let f = rand_tensor(4, 8, 2, 2, Kind::Feature);
        let q = rand_tensor(6, 3, 8, 8, Kind::Logits);
        let mut state = PropagatorState::new();
        video_step(&mut state, &rand_tensor(1, 3, 8, 8, Kind::Logits), &f, None, &layer, StepOptions::default()).unwrap();
        video_step(&mut state, &q, &f, Some(&Homography::identity()), &layer, StepOptions::default()).unwrap();
        state.reset();
        state.reset();
        assert_eq!(state.frame_index, 0);
        assert!(state.last_prediction.is_none() && state.last_features.is_none());
        assert_eq!(video_step(&mut state, &q, &f, None, &layer, StepOptions::default()).unwrap(), q);
    }

    #[test]
    fn argmax_unchanged_when_alpha_is_zero() {
        let q = rand_tensor(8, 4, 8, 8, Kind::Logits);
        let p = rand_tensor(9, 4, 8, 8, Kind::Logits);
        let zero = Tensor::<f64>::zeros(1, 8, 8, Kind::Alpha);
        let out = propagate_step(&q, &p, &zero).unwrap();
        assert_eq!(crate::ops::argmax_channels(&out).unwrap(), crate::ops::argmax_channels(&q).unwrap());
        let _ = softmax_channels(&out, 1.0).unwrap();
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn interpolation_between_equals_is_identity(vals in prop::collection::vec(-10.0f64..10.0, 8), a in prop::collection::vec(0.0f64..=1.0, 4)) {
                let q = Tensor::new(vec![2, 2, 2], vals, Kind::Logits).unwrap();
                let alpha = Tensor::new(vec![1, 2, 2], a, Kind::Alpha).unwrap();
                prop_assert_eq!(propagate_step(&q, &q, &alpha).unwrap(), q);
            }
        }
    }
}
