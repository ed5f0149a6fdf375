//! Optical-flow warping and occlusion reasoning. Flows are always supplied,
//! never estimated.

use crate::error::{shape_err, Result};
use crate::geometry::Homography;
use crate::ops::SamplingGrid;
use crate::tensor::{Kind, LabelMap, Real, Tensor};

/// Threshold constants of the forward/backward consistency check.
pub const OCCLUSION_REL: f64 = 0.01;
pub const OCCLUSION_ABS: f64 = 0.5;

/// Dense displacement field from a source frame `a` to a target frame `b`.
///
/// Vectors are stored on the target grid and point at the source location:
/// pixel `(i, j)` of frame `b` corresponds to `(j + u, i + v)` in frame `a`.
/// Channel 0 holds `u` (horizontal), channel 1 holds `v` (vertical).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    field: Tensor<f32>,
}

impl FlowField {
    pub fn new(field: Tensor<f32>) -> Result<Self> {
        let field = field.with_kind(Kind::Flow);
        field.validate()?;
        Ok(Self { field })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { field: Tensor::zeros(2, h, w, Kind::Flow) }
    }

    pub fn uniform(h: usize, w: usize, u: f32, v: f32) -> Self {
        Self { field: Tensor::from_fn(2, h, w, Kind::Flow, |c, _, _| if c == 0 { u } else { v }) }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> (f32, f32)) -> Self {
        let mut field = Tensor::zeros(2, h, w, Kind::Flow);
        for i in 0..h {
            for j in 0..w {
                let (u, v) = f(i, j);
                field.set(0, i, j, u);
                field.set(1, i, j, v);
            }
        }
        Self { field }
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.field
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.field
    }

    pub fn height(&self) -> usize {
        self.field.height()
    }

    pub fn width(&self) -> usize {
        self.field.width()
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> (f32, f32) {
        (self.field.at(0, i, j), self.field.at(1, i, j))
    }

    pub fn negated(&self) -> Self {
        Self { field: self.field.map(|v| -v) }
    }

    /// Backward-warp sampling grid; the source grid has the flow's size.
    pub fn grid<T: Real>(&self) -> SamplingGrid<T> {
        let (h, w) = (self.height(), self.width());
        SamplingGrid::from_fn(h, w, h, w, |i, j| {
            let (u, v) = self.at(i, j);
            Some((T::lit(j as f64 + u as f64), T::lit(i as f64 + v as f64)))
        })
    }
}

/// Flow on the current grid induced by a past→current homography: each
/// current pixel points to its preimage under `h_map`. Pixels whose preimage
/// is at infinity get a displacement far outside the frame.
pub fn flow_from_homography(h_map: &Homography, h: usize, w: usize) -> Result<FlowField> {
    let inv = h_map.inverse()?;
    Ok(FlowField::from_fn(h, w, |i, j| match inv.apply(j as f64, i as f64) {
        Ok((x, y)) => ((x - j as f64) as f32, (y - i as f64) as f32),
        Err(_) => (f32::MAX / 4.0, f32::MAX / 4.0),
    }))
}

/// Backward warp of `input` (living in the flow's source frame) onto the
/// flow's target grid. Returns the warped tensor and a validity mask.
pub fn warp_flow<T: Real>(input: &Tensor<T>, flow: &FlowField, fill: T) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_, h, w) = input.chw();
    if (h, w) != (flow.height(), flow.width()) {
        return shape_err(format!("flow is {}x{}, input is {}x{}", flow.height(), flow.width(), h, w));
    }
    let grid = flow.grid::<T>();
    Ok((grid.apply(input, fill)?, grid.mask()))
}

/// Nearest-neighbour flow warp of a label map.
pub fn warp_labels_flow(labels: &LabelMap, flow: &FlowField, fill: u8) -> Result<LabelMap> {
    if labels.dims() != (flow.height(), flow.width()) {
        return shape_err("flow and label map sizes differ");
    }
    flow.grid::<f64>().apply_labels(labels, fill)
}

/// Photometric confidence `exp(-‖I_cur − I_past_warped‖₁)` per pixel, with
/// the L1 norm taken across colour channels. Images are expected in [0, 1].
pub fn photometric_weight<T: Real>(current: &Tensor<T>, past_warped: &Tensor<T>) -> Result<Tensor<T>> {
    current.ensure_same_shape(past_warped, "photometric weight")?;
    let (c, h, w) = current.chw();
    let p = h * w;
    let (a, b) = (current.data(), past_warped.data());
    let data = (0..p)
        .map(|i| {
            let l1: T = (0..c).map(|ch| (a[ch * p + i] - b[ch * p + i]).abs()).sum();
            (-l1).exp()
        })
        .collect();
    Tensor::new(vec![1, h, w], data, Kind::Alpha)
}

/// Forward/backward consistency check. `flow_bwd_warped` must already be
/// resampled onto `flow_fwd`'s grid. A pixel is occluded (1) when
/// `‖f + b‖² > 0.01 (‖f‖² + ‖b‖²) + 0.5`.
pub fn occlusion_mask_fb(flow_fwd: &FlowField, flow_bwd_warped: &FlowField) -> Result<Tensor<f32>> {
    let (h, w) = (flow_fwd.height(), flow_fwd.width());
    if (h, w) != (flow_bwd_warped.height(), flow_bwd_warped.width()) {
        return shape_err("forward and backward flows differ in size");
    }
    let mut mask = Tensor::zeros(1, h, w, Kind::Mask);
    for i in 0..h {
        for j in 0..w {
            let (fu, fv) = flow_fwd.at(i, j);
            let (bu, bv) = flow_bwd_warped.at(i, j);
            let (fu, fv, bu, bv) = (fu as f64, fv as f64, bu as f64, bv as f64);
            let lhs = (fu + bu).powi(2) + (fv + bv).powi(2);
            let rhs = OCCLUSION_REL * (fu * fu + fv * fv + bu * bu + bv * bv) + OCCLUSION_ABS;
            if lhs > rhs {
                mask.set(0, i, j, 1.0);
            }
        }
    }
    Ok(mask)
}

/// Occlusion mask on the grid of `flow_ab` (stored on frame `b`), using the
/// opposite flow `flow_ba` (stored on frame `a`). The opposite flow is
/// resampled with `flow_ab` first; pixels whose correspondence leaves the
/// frame are marked occluded.
pub fn occlusion_between(flow_ab: &FlowField, flow_ba: &FlowField) -> Result<Tensor<f32>> {
    let (warped, valid) = warp_flow(flow_ba.tensor(), flow_ab, 0.0)?;
    let mut mask = occlusion_mask_fb(flow_ab, &FlowField::new(warped)?)?;
    for (m, v) in mask.data_mut().iter_mut().zip(valid.data()) {
        if *v == 0.0 {
            *m = 1.0;
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::warp_homography;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_flow_is_identity() {
        let img = Tensor::<f32>::from_fn(3, 6, 7, Kind::Image, |c, y, x| (c + y * x) as f32 * 0.01);
        let (out, mask) = warp_flow(&img, &FlowField::zeros(6, 7), -1.0).unwrap();
        assert_eq!(out, img);
        assert!(mask.data().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn uniform_flow_shifts_a_ramp() {
        // current pixel (i, j) reads past (j + 1, i): content moves one column left
        let ramp = Tensor::<f64>::from_fn(1, 4, 5, Kind::Image, |_, y, x| (10 * y + x) as f64);
        let (out, mask) = warp_flow(&ramp, &FlowField::uniform(4, 5, 1.0, 0.0), -7.0).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(out.at(0, y, x), ramp.at(0, y, x + 1));
                assert_eq!(mask.at(0, y, x), 1.0);
            }
            assert_eq!(out.at(0, y, 4), -7.0);
            assert_eq!(mask.at(0, y, 4), 0.0);
        }
    }

    #[test]
    fn homography_flow_matches_homography_warp() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Tensor::<f64>::from_fn(2, 24, 24, Kind::Image, |_, _, _| rng.random_range(0.0..1.0));
        let h = Homography::from_rows([1.03, -0.02, 1.7, 0.01, 0.97, -0.8, 3e-4, -2e-4, 1.0]).unwrap();
        let flow = flow_from_homography(&h, 24, 24).unwrap();
        let (a, ma) = warp_flow(&img, &flow, 0.0).unwrap();
        let (b, mb) = warp_homography(&img, &h, 0.0).unwrap();
        for i in 0..ma.len() {
            if ma.data()[i] == 1.0 && mb.data()[i] == 1.0 {
                for c in 0..2 {
                    assert!((a.channel(c)[i] - b.channel(c)[i]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn photometric_weight_examples() {
        let a = Tensor::<f64>::filled(3, 2, 2, 0.3, Kind::Image);
        assert!(photometric_weight(&a, &a).unwrap().data().iter().all(|&v| v == 1.0));
        let zeros = Tensor::<f64>::zeros(3, 2, 2, Kind::Image);
        let ones = Tensor::<f64>::filled(3, 2, 2, 1.0, Kind::Image);
        let o = photometric_weight(&ones, &zeros).unwrap();
        assert!(o.data().iter().all(|&v| (v - (-3.0f64).exp()).abs() < 1e-6 && (v - 0.0497871).abs() < 1e-6));
        let mut prev = 1.0;
        for k in 0..10 {
            let b = Tensor::<f64>::filled(3, 1, 1, 0.1 * k as f64, Kind::Image);
            let v = photometric_weight(&Tensor::zeros(3, 1, 1, Kind::Image), &b).unwrap().data()[0];
            assert!(v <= prev);
            prev = v;
        }
        assert!(photometric_weight(&a, &Tensor::zeros(3, 2, 3, Kind::Image)).is_err());
    }

    #[test]
    fn occlusion_examples() {
        let f = FlowField::uniform(3, 3, 2.5, -1.0);
        let m = occlusion_mask_fb(&f, &f.negated()).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
        let same = FlowField::uniform(2, 2, 10.0, 0.0);
        assert!(occlusion_mask_fb(&same, &same).unwrap().data().iter().all(|&v| v == 1.0));
        let z = FlowField::zeros(2, 2);
        assert!(occlusion_mask_fb(&z, &z).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn occlusion_between_flags_frame_exits() {
        let fwd = FlowField::uniform(4, 4, 1.0, 0.0);
        let bwd = FlowField::uniform(4, 4, -1.0, 0.0);
        let m = occlusion_between(&fwd, &bwd).unwrap();
        for i in 0..4 {
            assert_eq!(m.at(0, i, 3), 1.0);
            for j in 0..3 {
                assert_eq!(m.at(0, i, j), 0.0);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn photometric_weight_is_symmetric(a in prop::collection::vec(0.0f64..1.0, 12), b in prop::collection::vec(0.0f64..1.0, 12)) {
                let ta = Tensor::new(vec![3, 2, 2], a, Kind::Image).unwrap();
                let tb = Tensor::new(vec![3, 2, 2], b, Kind::Image).unwrap();
                prop_assert_eq!(photometric_weight(&ta, &tb).unwrap(), photometric_weight(&tb, &ta).unwrap());
                let o = photometric_weight(&ta, &tb).unwrap();
                prop_assert!(o.data().iter().all(|&v| v > 0.0 && v <= 1.0));
            }

            #[test]
            fn occlusion_invariant_under_negation(f in prop::collection::vec(-20.0f32..20.0, 8), b in prop::collection::vec(-20.0f32..20.0, 8)) {
                let ff = FlowField::new(Tensor::new(vec![2, 2, 2], f, Kind::Flow).unwrap()).unwrap();
                let bb = FlowField::new(Tensor::new(vec![2, 2, 2], b, Kind::Flow).unwrap()).unwrap();
                prop_assert_eq!(occlusion_mask_fb(&ff, &bb).unwrap(), occlusion_mask_fb(&ff.negated(), &bb.negated()).unwrap());
            }
        }
    }
}
