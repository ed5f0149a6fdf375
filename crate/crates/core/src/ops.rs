//! Forward operators with hand-written backward passes.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Kind, LabelMap, Real, Tensor};

/// A 2-D convolution with square, odd kernel and zero padding.
///
/// Weights are laid out `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec<T = f32> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvSpec<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        let spec = Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weights: vec![T::zero(); in_channels * out_channels * kernel * kernel],
            bias: vec![T::zero(); out_channels],
        };
        spec.check()?;
        Ok(spec)
    }

    pub fn check(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel size {} is not odd", self.kernel)));
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        if self.weights.len() != self.in_channels * self.out_channels * self.kernel * self.kernel {
            return shape_err(format!("conv weight count {} for {}->{} k{}", self.weights.len(), self.in_channels, self.out_channels, self.kernel));
        }
        if self.bias.len() != self.out_channels {
            return shape_err(format!("conv bias count {} for {} outputs", self.bias.len(), self.out_channels));
        }
        Ok(())
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < self.kernel || pw < self.kernel {
            return shape_err(format!("input {}x{} smaller than kernel {} after padding", h, w, self.kernel));
        }
        let oh = (ph - self.kernel) / self.stride + 1;
        let ow = (pw - self.kernel) / self.stride + 1;
        if oh == 0 || ow == 0 {
            return shape_err("convolution output is empty");
        }
        Ok((oh, ow))
    }

    #[inline]
    fn widx(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

pub fn conv2d<T: Real>(input: &Tensor<T>, spec: &ConvSpec<T>) -> Result<Tensor<T>> {
    spec.check()?;
    let (c, h, w) = input.chw();
    if c != spec.in_channels {
        return shape_err(format!("conv expects {} input channels, got {}", spec.in_channels, c));
    }
    let (oh, ow) = spec.output_size(h, w)?;
    let k = spec.kernel;
    let pad = spec.padding as isize;
    let src = input.data();
    let mut out = vec![T::zero(); spec.out_channels * oh * ow];
    for o in 0..spec.out_channels {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        plane.iter_mut().for_each(|v| *v = spec.bias[o]);
        for i in 0..c {
            let chan = &src[i * h * w..(i + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = spec.weights[spec.widx(o, i, ky, kx)];
                    if wv == T::zero() {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * spec.stride) as isize - pad + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &chan[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        for (ox, ov) in orow.iter_mut().enumerate() {
                            let ix = (ox * spec.stride) as isize - pad + kx as isize;
                            if ix >= 0 && ix < w as isize {
                                *ov = *ov + wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![spec.out_channels, oh, ow], out, Kind::Feature)
}

/// Backward pass of [`conv2d`] given the gradient of the loss w.r.t. its output.
pub fn conv2d_backward<T: Real>(input: &Tensor<T>, spec: &ConvSpec<T>, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
    let (c, h, w) = input.chw();
    let (oh, ow) = spec.output_size(h, w)?;
    if grad_out.chw() != (spec.out_channels, oh, ow) {
        return shape_err(format!("conv upstream gradient {:?}, expected {:?}", grad_out.chw(), (spec.out_channels, oh, ow)));
    }
    let k = spec.kernel;
    let pad = spec.padding as isize;
    let src = input.data();
    let g = grad_out.data();
    let mut gin = vec![T::zero(); c * h * w];
    let mut gw = vec![T::zero(); spec.weights.len()];
    let mut gb = vec![T::zero(); spec.out_channels];
    for o in 0..spec.out_channels {
        let gplane = &g[o * oh * ow..(o + 1) * oh * ow];
        gb[o] = gplane.iter().copied().sum();
        for i in 0..c {
            let chan = &src[i * h * w..(i + 1) * h * w];
            let gchan = &mut gin[i * h * w..(i + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wi = spec.widx(o, i, ky, kx);
                    let wv = spec.weights[wi];
                    let mut acc = T::zero();
                    for oy in 0..oh {
                        let iy = (oy * spec.stride) as isize - pad + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = iy as usize * w;
                        for ox in 0..ow {
                            let ix = (ox * spec.stride) as isize - pad + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let gv = gplane[oy * ow + ox];
                            acc = acc + gv * chan[base + ix as usize];
                            gchan[base + ix as usize] = gchan[base + ix as usize] + gv * wv;
                        }
                    }
                    gw[wi] = acc;
                }
            }
        }
    }
    Ok(ConvGrads { input: Tensor::new(vec![c, h, w], gin, input.kind())?, weights: gw, bias: gb })
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient through ReLU; `pre` is the activation input.
pub fn relu_backward<T: Real>(pre: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    grad.zip_map(pre, |g, x| if x > T::zero() { g } else { T::zero() })
}

#[inline]
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Gradient through sigmoid given its output.
pub fn sigmoid_backward<T: Real>(out: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    grad.zip_map(out, |g, s| g * s * (T::one() - s))
}

fn check_temperature<T: Real>(temperature: T) -> Result<()> {
    if !(temperature > T::zero()) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {:?}", temperature)));
    }
    Ok(())
}

/// Per-pixel softmax over channels of `logits / temperature`.
pub fn softmax_channels<T: Real>(logits: &Tensor<T>, temperature: T) -> Result<Tensor<T>> {
    check_temperature(temperature)?;
    let (c, h, w) = logits.chw();
    if c == 0 {
        return shape_err("softmax needs at least one channel");
    }
    let p = h * w;
    let src = logits.data();
    let mut out = vec![T::zero(); c * p];
    let inv_t = T::one() / temperature;
    for i in 0..p {
        let mut m = T::neg_infinity();
        for ch in 0..c {
            m = m.max(src[ch * p + i] * inv_t);
        }
        let mut s = T::zero();
        for ch in 0..c {
            let e = (src[ch * p + i] * inv_t - m).exp();
            out[ch * p + i] = e;
            s = s + e;
        }
        for ch in 0..c {
            out[ch * p + i] = out[ch * p + i] / s;
        }
    }
    Tensor::new(vec![c, h, w], out, Kind::Probs)
}

/// Per-pixel log-softmax over channels of `logits / temperature`.
pub fn log_softmax_channels<T: Real>(logits: &Tensor<T>, temperature: T) -> Result<Tensor<T>> {
    check_temperature(temperature)?;
    let (c, h, w) = logits.chw();
    if c == 0 {
        return shape_err("log-softmax needs at least one channel");
    }
    let p = h * w;
    let src = logits.data();
    let mut out = vec![T::zero(); c * p];
    let inv_t = T::one() / temperature;
    for i in 0..p {
        let mut m = T::neg_infinity();
        for ch in 0..c {
            m = m.max(src[ch * p + i] * inv_t);
        }
        let s: T = (0..c).map(|ch| (src[ch * p + i] * inv_t - m).exp()).sum();
        let lse = m + s.ln();
        for ch in 0..c {
            out[ch * p + i] = src[ch * p + i] * inv_t - lse;
        }
    }
    Tensor::new(vec![c, h, w], out, Kind::Feature)
}

/// Maps a gradient w.r.t. softmax probabilities back to the logits, for
/// temperature 1.
pub fn softmax_backward<T: Real>(probs: &Tensor<T>, grad_probs: &Tensor<T>) -> Result<Tensor<T>> {
    probs.ensure_same_shape(grad_probs, "softmax backward")?;
    let (c, h, w) = probs.chw();
    let p = h * w;
    let (y, g) = (probs.data(), grad_probs.data());
    let mut out = vec![T::zero(); c * p];
    for i in 0..p {
        let dot: T = (0..c).map(|ch| y[ch * p + i] * g[ch * p + i]).sum();
        for ch in 0..c {
            out[ch * p + i] = y[ch * p + i] * (g[ch * p + i] - dot);
        }
    }
    Tensor::new(vec![c, h, w], out, Kind::Logits)
}

/// Per-pixel index of the largest channel. Ties go to the lowest index.
pub fn argmax_channels<T: Real>(logits: &Tensor<T>) -> Result<LabelMap> {
    let (c, h, w) = logits.chw();
    if c == 0 {
        return shape_err("argmax needs at least one channel");
    }
    if c > 255 {
        return shape_err("label maps hold at most 255 classes");
    }
    let p = h * w;
    let src = logits.data();
    let labels = (0..p)
        .map(|i| {
            let mut best = 0usize;
            let mut bv = src[i];
            for ch in 1..c {
                let v = src[ch * p + i];
                if v > bv {
                    bv = v;
                    best = ch;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, labels)
}

/// Bilinear footprint of a sample point: top-left corner and fractional offsets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint<T> {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub fx: T,
    pub fy: T,
}

impl<T: Real> Footprint<T> {
    /// Footprint of (x, y) on a `w`×`h` grid, or `None` outside `[0, w-1]×[0, h-1]`.
    pub fn locate(w: usize, h: usize, x: T, y: T) -> Option<Self> {
        if w == 0 || h == 0 || !x.is_finite() || !y.is_finite() {
            return None;
        }
        let (xmax, ymax) = (T::lit((w - 1) as f64), T::lit((h - 1) as f64));
        if x < T::zero() || y < T::zero() || x > xmax || y > ymax {
            return None;
        }
        let xf = x.floor();
        let yf = y.floor();
        let x0 = xf.to_usize().unwrap_or(0).min(w - 1);
        let y0 = yf.to_usize().unwrap_or(0).min(h - 1);
        Some(Self { x0, y0, x1: (x0 + 1).min(w - 1), y1: (y0 + 1).min(h - 1), fx: x - xf, fy: y - yf })
    }

    #[inline]
    pub fn weights(&self) -> [(usize, usize, T); 4] {
        let one = T::one();
        [
            (self.y0, self.x0, (one - self.fx) * (one - self.fy)),
            (self.y0, self.x1, self.fx * (one - self.fy)),
            (self.y1, self.x0, (one - self.fx) * self.fy),
            (self.y1, self.x1, self.fx * self.fy),
        ]
    }

    #[inline]
    pub fn sample_plane(&self, plane: &[T], w: usize) -> T {
        self.weights().iter().fold(T::zero(), |acc, &(y, x, wt)| acc + wt * plane[y * w + x])
    }
}

/// Samples every channel of `input` at continuous (x, y). Returns the values and
/// whether the point was inside the grid; outside, every value is `fill`.
pub fn bilinear_sample<T: Real>(input: &Tensor<T>, x: T, y: T, fill: T) -> (Vec<T>, bool) {
    let (c, h, w) = input.chw();
    match Footprint::locate(w, h, x, y) {
        Some(fp) => ((0..c).map(|ch| fp.sample_plane(input.channel(ch), w)).collect(), true),
        None => (vec![fill; c], false),
    }
}

/// Precomputed resampling of a source grid onto an output grid. Both
/// homography and flow warps reduce to one of these, which gives them a shared
/// forward and adjoint.
#[derive(Debug, Clone)]
pub struct SamplingGrid<T> {
    pub out_h: usize,
    pub out_w: usize,
    pub src_h: usize,
    pub src_w: usize,
    taps: Vec<Option<Footprint<T>>>,
}

impl<T: Real> SamplingGrid<T> {
    /// Builds a grid from a per-output-pixel source coordinate function
    /// `(row, col) -> Some((x, y))`; `None` marks an unmappable pixel.
    pub fn from_fn(out_h: usize, out_w: usize, src_h: usize, src_w: usize, f: impl Fn(usize, usize) -> Option<(T, T)>) -> Self {
        let mut taps = Vec::with_capacity(out_h * out_w);
        for i in 0..out_h {
            for j in 0..out_w {
                taps.push(f(i, j).and_then(|(x, y)| Footprint::locate(src_w, src_h, x, y)));
            }
        }
        Self { out_h, out_w, src_h, src_w, taps }
    }

    pub fn mask(&self) -> Tensor<T> {
        let data = self.taps.iter().map(|t| if t.is_some() { T::one() } else { T::zero() }).collect();
        Tensor::new(vec![1, self.out_h, self.out_w], data, Kind::Mask).expect("mask dims")
    }

    pub fn apply(&self, input: &Tensor<T>, fill: T) -> Result<Tensor<T>> {
        let (c, h, w) = input.chw();
        if (h, w) != (self.src_h, self.src_w) {
            return shape_err(format!("sampling grid built for {}x{}, input is {}x{}", self.src_h, self.src_w, h, w));
        }
        let p = self.out_h * self.out_w;
        let mut out = vec![fill; c * p];
        for ch in 0..c {
            let plane = input.channel(ch);
            let dst = &mut out[ch * p..(ch + 1) * p];
            for (o, tap) in dst.iter_mut().zip(&self.taps) {
                if let Some(fp) = tap {
                    *o = fp.sample_plane(plane, w);
                }
            }
        }
        Tensor::new(vec![c, self.out_h, self.out_w], out, input.kind())
    }

    /// Nearest-neighbour resampling of a label map; unmapped pixels get `fill`.
    pub fn apply_labels(&self, labels: &LabelMap, fill: u8) -> Result<LabelMap> {
        if labels.dims() != (self.src_h, self.src_w) {
            return shape_err("label map does not match sampling grid source");
        }
        let half = T::lit(0.5);
        let data = self
            .taps
            .iter()
            .map(|tap| match tap {
                Some(fp) => {
                    let x = if fp.fx >= half { fp.x1 } else { fp.x0 };
                    let y = if fp.fy >= half { fp.y1 } else { fp.y0 };
                    labels.at(y, x)
                }
                None => fill,
            })
            .collect();
        LabelMap::new(self.out_h, self.out_w, data)
    }

    /// Adjoint of [`SamplingGrid::apply`]: scatters an output-grid gradient back
    /// onto the source grid. Filled pixels contribute nothing.
    pub fn adjoint(&self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = grad_out.chw();
        if (h, w) != (self.out_h, self.out_w) {
            return shape_err("gradient does not match sampling grid output");
        }
        let sp = self.src_h * self.src_w;
        let mut out = vec![T::zero(); c * sp];
        for ch in 0..c {
            let g = grad_out.channel(ch);
            let dst = &mut out[ch * sp..(ch + 1) * sp];
            for (gv, tap) in g.iter().zip(&self.taps) {
                if let Some(fp) = tap {
                    for (y, x, wt) in fp.weights() {
                        dst[y * self.src_w + x] = dst[y * self.src_w + x] + wt * *gv;
                    }
                }
            }
        }
        Tensor::new(vec![c, self.src_h, self.src_w], out, grad_out.kind())
    }
}

/// Source taps for one output axis of an align-corners-false resize.
fn resize_axis<T: Real>(src: usize, dst: usize) -> Vec<(usize, usize, T)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = if i0 == src - 1 { 0.0 } else { s - i0 as f64 };
            (i0, i1, T::lit(frac))
        })
        .collect()
}

/// Bilinear resize with the align-corners-false convention: output index `i`
/// reads source coordinate `(i + 0.5) * src / dst - 0.5`, clamped at the edges.
pub fn bilinear_resize<T: Real>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return shape_err("resize target must be non-empty");
    }
    let (c, h, w) = input.chw();
    if h == 0 || w == 0 {
        return shape_err("cannot resize an empty tensor");
    }
    let ry = resize_axis::<T>(h, out_h);
    let rx = resize_axis::<T>(w, out_w);
    let one = T::one();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = input.channel(ch);
        for &(y0, y1, fy) in &ry {
            for &(x0, x1, fx) in &rx {
                let top = plane[y0 * w + x0] * (one - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (one - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (one - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out, input.kind())
}

/// Backward pass of [`bilinear_resize`]: distributes the upstream gradient
/// with the forward interpolation weights.
pub fn bilinear_resize_backward<T: Real>(grad_out: &Tensor<T>, in_h: usize, in_w: usize) -> Result<Tensor<T>> {
    let (c, oh, ow) = grad_out.chw();
    if in_h == 0 || in_w == 0 || oh == 0 || ow == 0 {
        return shape_err("resize backward on empty tensor");
    }
    let ry = resize_axis::<T>(in_h, oh);
    let rx = resize_axis::<T>(in_w, ow);
    let one = T::one();
    let mut out = vec![T::zero(); c * in_h * in_w];
    for ch in 0..c {
        let g = grad_out.channel(ch);
        let dst = &mut out[ch * in_h * in_w..(ch + 1) * in_h * in_w];
        for (oy, &(y0, y1, fy)) in ry.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in rx.iter().enumerate() {
                let gv = g[oy * ow + ox];
                dst[y0 * in_w + x0] = dst[y0 * in_w + x0] + gv * (one - fx) * (one - fy);
                dst[y0 * in_w + x1] = dst[y0 * in_w + x1] + gv * fx * (one - fy);
                dst[y1 * in_w + x0] = dst[y1 * in_w + x0] + gv * (one - fx) * fy;
                dst[y1 * in_w + x1] = dst[y1 * in_w + x1] + gv * fx * fy;
            }
        }
    }
    Tensor::new(vec![c, in_h, in_w], out, grad_out.kind())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(c, h, w, Kind::Feature, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn random_conv(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> ConvSpec<f64> {
        let mut spec = ConvSpec::zeros(cin, cout, k, stride, pad).unwrap();
        spec.weights.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        spec.bias.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        spec
    }

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
    }

    #[test]
    fn conv_sum_of_ones_under_zero_padding() {
        let input = Tensor::<f32>::filled(1, 3, 3, 1.0, Kind::Feature);
        let mut spec = ConvSpec::zeros(1, 1, 3, 1, 1).unwrap();
        spec.weights.iter_mut().for_each(|v| *v = 1.0);
        let out = conv2d(&input, &spec).unwrap();
        assert_eq!(out.chw(), (1, 3, 3));
        assert_eq!(out.at(0, 1, 1), 9.0);
        for (y, x) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(out.at(0, y, x), 4.0);
        }
        assert_eq!(out.at(0, 0, 1), 6.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random_tensor(&mut rng, 2, 5, 7);
        let mut spec = ConvSpec::zeros(2, 2, 3, 1, 1).unwrap();
        let (a, b) = (spec.widx(0, 0, 1, 1), spec.widx(1, 1, 1, 1));
        spec.weights[a] = 1.0;
        spec.weights[b] = 1.0;
        assert_eq!(conv2d(&input, &spec).unwrap().data(), input.data());
    }

    #[test]
    fn conv_output_size_and_errors() {
        let spec = ConvSpec::<f32>::zeros(1, 1, 3, 2, 1).unwrap();
        assert_eq!(spec.output_size(8, 7).unwrap(), (4, 4));
        assert!(ConvSpec::<f32>::zeros(1, 1, 2, 1, 0).is_err());
        let x = Tensor::<f32>::zeros(2, 4, 4, Kind::Feature);
        assert!(matches!(conv2d(&x, &spec), Err(Error::Shape(_))));
        let tiny = Tensor::<f32>::zeros(1, 1, 1, Kind::Feature);
        let spec5 = ConvSpec::<f32>::zeros(1, 1, 5, 1, 0).unwrap();
        assert!(conv2d(&tiny, &spec5).is_err());
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for stride in [1, 2] {
            let x = random_tensor(&mut rng, 4, 8, 8);
            let spec = random_conv(&mut rng, 4, 2, 3, stride, 1);
            let out = conv2d(&x, &spec).unwrap();
            let (oc, oh, ow) = out.chw();
            let up = random_tensor(&mut rng, oc, oh, ow);
            let loss = |x: &Tensor<f64>, s: &ConvSpec<f64>| -> f64 {
                conv2d(x, s).unwrap().data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
            };
            let grads = conv2d_backward(&x, &spec, &up).unwrap();
            let eps = 1e-3;
            for idx in 0..x.len() {
                let mut xp = x.clone();
                xp.data_mut()[idx] += eps;
                let mut xm = x.clone();
                xm.data_mut()[idx] -= eps;
                let n = (loss(&xp, &spec) - loss(&xm, &spec)) / (2.0 * eps);
                assert!(rel_err(grads.input.data()[idx], n) < 1e-3, "input grad {}", idx);
            }
            for idx in 0..spec.weights.len() {
                let mut sp = spec.clone();
                sp.weights[idx] += eps;
                let mut sm = spec.clone();
                sm.weights[idx] -= eps;
                let n = (loss(&x, &sp) - loss(&x, &sm)) / (2.0 * eps);
                assert!(rel_err(grads.weights[idx], n) < 1e-3, "weight grad {}", idx);
            }
            for idx in 0..spec.bias.len() {
                let mut sp = spec.clone();
                sp.bias[idx] += eps;
                let mut sm = spec.clone();
                sm.bias[idx] -= eps;
                let n = (loss(&x, &sp) - loss(&x, &sm)) / (2.0 * eps);
                assert!(rel_err(grads.bias[idx], n) < 1e-3, "bias grad {}", idx);
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::<f64>::new(vec![2, 1, 1], vec![0.0, 0.0], Kind::Logits).unwrap();
        assert_eq!(softmax_channels(&t, 1.0).unwrap().data(), &[0.5, 0.5]);
        let t = Tensor::<f64>::new(vec![2, 1, 1], vec![2.0, 0.0], Kind::Logits).unwrap();
        let p = softmax_channels(&t, 2.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p.data()[0] - e / (e + 1.0)).abs() < 1e-6);
        assert!((p.data()[0] - 0.7310586).abs() < 1e-6);
        assert!((p.data()[1] - 0.2689414).abs() < 1e-6);
        assert!(softmax_channels(&t, 0.0).is_err());
        assert!(softmax_channels(&t, -1.0).is_err());
    }

    #[test]
    fn softmax_stable_for_large_logits() {
        let t = Tensor::<f32>::new(vec![3, 1, 1], vec![1000.0, 999.0, -1000.0], Kind::Logits).unwrap();
        let p = softmax_channels(&t, 1.0).unwrap();
        assert!(p.all_finite());
        p.validate().unwrap();
    }

    #[test]
    fn argmax_examples() {
        let one = Tensor::<f32>::filled(1, 2, 2, 3.0, Kind::Logits);
        assert!(argmax_channels(&one).unwrap().data().iter().all(|&l| l == 0));
        let t = Tensor::<f32>::new(vec![3, 1, 1], vec![1.0, 3.0, 2.0], Kind::Logits).unwrap();
        assert_eq!(argmax_channels(&t).unwrap().data(), &[1]);
        let t = Tensor::<f32>::new(vec![2, 1, 1], vec![5.0, 5.0], Kind::Logits).unwrap();
        assert_eq!(argmax_channels(&t).unwrap().data(), &[0]);
    }

    #[test]
    fn bilinear_sample_examples() {
        let t = Tensor::<f64>::from_fn(1, 3, 4, Kind::Image, |_, y, x| (10 * y + x) as f64);
        let (v, ok) = bilinear_sample(&t, 2.0, 1.0, -1.0);
        assert!(ok);
        assert_eq!(v, vec![12.0]);
        let row = Tensor::<f64>::new(vec![1, 1, 2], vec![2.0, 4.0], Kind::Image).unwrap();
        let (v, ok) = bilinear_sample(&row, 0.5, 0.0, 0.0);
        assert!(ok);
        assert_eq!(v, vec![3.0]);
        let (v, ok) = bilinear_sample(&row, -0.01, 0.0, 7.0);
        assert!(!ok);
        assert_eq!(v, vec![7.0]);
        let (_, ok) = bilinear_sample(&t, 3.0, 2.0, 0.0);
        assert!(ok, "far corner is inside");
    }

    #[test]
    fn resize_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&mut rng, 2, 4, 6);
        assert_eq!(bilinear_resize(&x, 4, 6).unwrap().data(), x.data());
        let c = Tensor::<f64>::filled(1, 4, 4, 0.25, Kind::Alpha);
        for (h, w) in [(1, 1), (8, 8), (3, 13), (16, 4)] {
            let r = bilinear_resize(&c, h, w).unwrap();
            assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
        assert!(bilinear_resize(&c, 0, 4).is_err());
    }

    #[test]
    fn resize_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(&mut rng, 1, 4, 4);
        let up = random_tensor(&mut rng, 1, 8, 8);
        let loss = |x: &Tensor<f64>| -> f64 { bilinear_resize(x, 8, 8).unwrap().data().iter().zip(up.data()).map(|(a, b)| a * b).sum() };
        let g = bilinear_resize_backward(&up, 4, 4).unwrap();
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += 1e-3;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= 1e-3;
            let n = (loss(&xp) - loss(&xm)) / 2e-3;
            assert!(rel_err(g.data()[idx], n) < 1e-3);
        }
    }

    #[test]
    fn sampling_grid_adjoint_is_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let grid = SamplingGrid::<f64>::from_fn(5, 6, 4, 7, |i, j| Some((j as f64 * 1.1 - 0.3, i as f64 * 0.8 + 0.2)));
        let x = random_tensor(&mut rng, 2, 4, 7);
        let g = random_tensor(&mut rng, 2, 5, 6);
        let lhs: f64 = grid.apply(&x, 0.0).unwrap().data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = grid.adjoint(&g).unwrap().data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn conv_is_linear_without_bias(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = random_tensor(&mut rng, 3, 6, 5);
                let y = random_tensor(&mut rng, 3, 6, 5);
                let mut spec = random_conv(&mut rng, 3, 2, 3, 1, 1);
                spec.bias.iter_mut().for_each(|v| *v = 0.0);
                let lhs = conv2d(&x.scale(a).add(&y.scale(b)).unwrap(), &spec).unwrap();
                let rhs = conv2d(&x, &spec).unwrap().scale(a).add(&conv2d(&y, &spec).unwrap().scale(b)).unwrap();
                for (l, r) in lhs.data().iter().zip(rhs.data()) {
                    prop_assert!((l - r).abs() < 1e-5);
                }
            }

            #[test]
            fn softmax_positive_normalized_and_shift_invariant(vals in prop::collection::vec(-50.0f64..50.0, 3), shift in -100.0f64..100.0, tau in 0.1f64..5.0) {
                let t = Tensor::new(vec![3, 1, 1], vals.clone(), Kind::Logits).unwrap();
                let p = softmax_channels(&t, tau).unwrap();
                prop_assert!(p.data().iter().all(|&v| v > 0.0));
                prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
                let s = t.map(|v| v + shift);
                let q = softmax_channels(&s, tau).unwrap();
                for (a, b) in p.data().iter().zip(q.data()) {
                    prop_assert!((a - b).abs() < 1e-6);
                }
            }

            #[test]
            fn bilinear_sample_is_continuous(x in 0.0f64..5.0, y in 0.0f64..3.0, seed in 0u64..100) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let t = random_tensor(&mut rng, 2, 4, 6);
                // probe just either side of the nearest cell boundary
                let bx = x.round().clamp(1.0, 4.0);
                let (a, _) = bilinear_sample(&t, bx - 1e-6, y, 0.0);
                let (b, _) = bilinear_sample(&t, bx + 1e-6, y, 0.0);
                for (u, v) in a.iter().zip(&b) {
                    prop_assert!((u - v).abs() < 1e-4);
                }
            }

            #[test]
            fn forward_ops_are_pure(seed in 0u64..200) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = random_tensor(&mut rng, 2, 5, 5).cast::<f32>();
                let spec = random_conv(&mut rng, 2, 3, 3, 1, 1);
                let spec = ConvSpec { weights: spec.weights.iter().map(|&v| v as f32).collect(), bias: spec.bias.iter().map(|&v| v as f32).collect(), ..ConvSpec::zeros(2, 3, 3, 1, 1).unwrap() };
                prop_assert_eq!(conv2d(&x, &spec).unwrap(), conv2d(&x, &spec).unwrap());
                prop_assert_eq!(bilinear_resize(&x, 9, 7).unwrap(), bilinear_resize(&x, 9, 7).unwrap());
                prop_assert_eq!(softmax_channels(&x, 1.5).unwrap(), softmax_channels(&x, 1.5).unwrap());
            }
        }
    }
}
