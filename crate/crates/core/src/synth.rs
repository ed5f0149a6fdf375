//! Procedural aerial sequences with exact ground truth: a textured planar
//! ground seen by a slowly drifting nadir camera, with square sprites moving
//! across it.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{flow_from_homography, FlowField};
use crate::geometry::{pose_to_homography, CameraPose, GroundPlane, Homography, Intrinsics};
use crate::surrogate::FEATURE_STRIDE;
use crate::tensor::{Kind, LabelMap, Tensor};

/// Camera trajectory bounds. The camera keeps a constant velocity and
/// constant rotation rates drawn once per sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraMotion {
    /// Height above the ground plane in metres.
    pub altitude: f64,
    /// Focal length in pixels.
    pub focal: f64,
    /// Range of the ground speed in metres per frame.
    pub translation: [f64; 2],
    /// Bound on the yaw, pitch and roll rates in radians per frame.
    pub max_rotation: f64,
}

impl Default for CameraMotion {
    fn default() -> Self {
        Self { altitude: 50.0, focal: 64.0, translation: [0.5, 1.0], max_rotation: 0.003 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Ground classes are `0..classes-1`; the last class marks sprites.
    pub classes: usize,
    /// Number of ground regions over the area swept by the camera.
    pub regions: usize,
    pub sprites: usize,
    /// Sprite side length in pixels.
    pub sprite_size: f64,
    /// Sprite speed range in pixels per frame.
    pub sprite_speed: [f64; 2],
    pub camera: CameraMotion,
    /// Standard deviation of the image model's logit noise.
    pub noise_level: f64,
    /// Every `annotation_interval`-th frame carries labels.
    pub annotation_interval: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            frames: 30,
            classes: 4,
            regions: 8,
            sprites: 2,
            sprite_size: 12.0,
            sprite_speed: [1.0, 2.0],
            camera: CameraMotion::default(),
            noise_level: 1.0,
            annotation_interval: 5,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.height < 32 || self.width < 32 {
            return bad(format!("frames must be at least 32x32, got {}x{}", self.height, self.width));
        }
        if self.height % FEATURE_STRIDE != 0 || self.width % FEATURE_STRIDE != 0 {
            return bad(format!("frame size must be divisible by {}", FEATURE_STRIDE));
        }
        if !(2..=255).contains(&self.classes) {
            return bad(format!("class count {} outside 2..=255", self.classes));
        }
        if self.frames == 0 || self.regions == 0 || self.annotation_interval == 0 {
            return bad("frames, regions and annotation interval must be positive".into());
        }
        let c = &self.camera;
        if !(c.altitude > 0.0 && c.focal > 0.0) {
            return bad("altitude and focal length must be positive".into());
        }
        if !(0.0 <= c.translation[0] && c.translation[0] <= c.translation[1] && c.max_rotation >= 0.0 && c.max_rotation < 0.1) {
            return bad("invalid camera motion bounds".into());
        }
        if !(0.0 <= self.sprite_speed[0] && self.sprite_speed[0] <= self.sprite_speed[1]) {
            return bad("invalid sprite speed range".into());
        }
        if self.sprites > 0 && !(self.sprite_size > 0.0 && self.sprite_size < self.height.min(self.width) as f64) {
            return bad(format!("sprite size {} must be positive and smaller than the frame", self.sprite_size));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return bad("noise level must be non-negative".into());
        }
        Ok(())
    }

    fn metres_per_pixel(&self) -> f64 {
        self.camera.altitude / self.camera.focal
    }
}

/// A generated sequence. Pair `k` relates frame `k` to frame `k + 1`.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub config: SceneConfig,
    /// RGB in [0, 1].
    pub frames: Vec<Tensor<f32>>,
    /// Ground truth for every frame.
    pub labels: Vec<LabelMap>,
    /// Frames that count as annotated.
    pub annotated: Vec<bool>,
    pub poses: Vec<CameraPose>,
    /// `H_{k→k+1}` for each pair.
    pub homographies: Vec<Homography>,
    /// `k → k+1` flow, stored on frame `k + 1`.
    pub flows_fwd: Vec<FlowField>,
    /// `k+1 → k` flow, stored on frame `k`.
    pub flows_bwd: Vec<FlowField>,
}

/// Ground colours per class; further classes get evenly spaced hues.
fn class_colour(class: usize, classes: usize) -> [f64; 3] {
    const GROUND: [[f64; 3]; 4] = [[0.30, 0.55, 0.25], [0.55, 0.55, 0.55], [0.62, 0.45, 0.28], [0.25, 0.35, 0.60]];
    if class + 1 == classes {
        return [0.85, 0.20, 0.20];
    }
    if class < GROUND.len() {
        return GROUND[class];
    }
    let h = class as f64 * 0.618_033_988_75 % 1.0;
    let rgb = |o: f64| 0.45 + 0.2 * (std::f64::consts::TAU * (h + o)).cos();
    [rgb(0.0), rgb(1.0 / 3.0), rgb(2.0 / 3.0)]
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Smooth value noise in [-1, 1] on a lattice of the given spacing.
fn value_noise(x: f64, y: f64, spacing: f64, salt: u64) -> f64 {
    let (gx, gy) = (x / spacing, y / spacing);
    let (ix, iy) = (gx.floor(), gy.floor());
    let (fx, fy) = (gx - ix, gy - iy);
    let lattice = |dx: i64, dy: i64| {
        let h = splitmix(salt ^ splitmix((ix as i64 + dx) as u64 ^ splitmix((iy as i64 + dy) as u64)));
        (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    };
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (s(fx), s(fy));
    let top = lattice(0, 0) * (1.0 - sx) + lattice(1, 0) * sx;
    let bottom = lattice(0, 1) * (1.0 - sx) + lattice(1, 1) * sx;
    top * (1.0 - sy) + bottom * sy
}

struct Region {
    site: [f64; 2],
    class: u8,
    colour: [f64; 3],
}

struct Sprite {
    start: [f64; 2],
    velocity: [f64; 2],
    half: f64,
    colour: [f64; 3],
}

impl Sprite {
    fn centre(&self, frame: usize) -> [f64; 2] {
        [self.start[0] + self.velocity[0] * frame as f64, self.start[1] + self.velocity[1] * frame as f64]
    }

    /// Signed distance (metres) from the square's edge, positive inside.
    fn inside_distance(&self, p: &Vector3<f64>, frame: usize) -> f64 {
        let c = self.centre(frame);
        self.half - (p.x - c[0]).abs().max((p.y - c[1]).abs())
    }
}

struct Scene {
    regions: Vec<Region>,
    sprites: Vec<Sprite>,
    edge_softness: f64,
    /// Mean distance from a site to its nearest neighbour.
    site_spacing: f64,
    texture_salt: u64,
    sprite_class: u8,
}

impl Scene {
    fn ground(&self, p: &Vector3<f64>) -> ([f64; 3], u8) {
        let d2: Vec<f64> = self.regions.iter().map(|r| (p.x - r.site[0]).powi(2) + (p.y - r.site[1]).powi(2)).collect();
        let nearest = (0..d2.len()).min_by(|&a, &b| d2[a].total_cmp(&d2[b])).unwrap_or(0);
        // soft Voronoi: (d² − d²_min) / 2L approximates the distance to the
        // bisector, and the softmax over it is continuous everywhere
        let scale = 2.0 * self.site_spacing * self.edge_softness;
        let mut colour = [0.0; 3];
        let mut total = 0.0;
        for (r, &d) in self.regions.iter().zip(&d2) {
            let wgt = (-(d - d2[nearest]) / scale).exp();
            total += wgt;
            for c in 0..3 {
                colour[c] += wgt * r.colour[c];
            }
        }
        let t = 0.035 * value_noise(p.x, p.y, 3.0, self.texture_salt) + 0.015 * value_noise(p.x, p.y, 2.0, self.texture_salt ^ 0xABCD);
        (colour.map(|v| (v / total + t).clamp(0.0, 1.0)), self.regions[nearest].class)
    }

    /// Colour and label at a ground point, with the index of the sprite that
    /// owns the label (if any).
    fn shade(&self, p: &Vector3<f64>, frame: usize) -> ([f64; 3], u8, Option<usize>) {
        let (mut colour, mut label) = self.ground(p);
        let mut owner = None;
        for (i, s) in self.sprites.iter().enumerate() {
            let d = s.inside_distance(p, frame);
            let cover = logistic(d / self.edge_softness);
            for c in 0..3 {
                colour[c] = cover * s.colour[c] + (1.0 - cover) * colour[c];
            }
            if d > 0.0 {
                label = self.sprite_class;
                owner = Some(i);
            }
        }
        (colour, label, owner)
    }
}

/// World→camera rotation of a camera looking straight down, then rotated by
/// yaw about the optical axis and tilted by pitch and roll.
pub fn camera_rotation(yaw: f64, pitch: f64, roll: f64) -> Matrix3<f64> {
    let nadir = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
    let (cy, sy) = (yaw.cos(), yaw.sin());
    let (cp, sp) = (pitch.cos(), pitch.sin());
    let (cr, sr) = (roll.cos(), roll.sin());
    let rz = Matrix3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
    let ry = Matrix3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr);
    rx * ry * nadir * rz
}

fn trajectory(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<CameraPose> {
    let cam = &config.camera;
    let intrinsics = Intrinsics { fx: cam.focal, fy: cam.focal, cx: (config.width as f64 - 1.0) / 2.0, cy: (config.height as f64 - 1.0) / 2.0 };
    let speed = if cam.translation[1] > cam.translation[0] { rng.random_range(cam.translation[0]..=cam.translation[1]) } else { cam.translation[0] };
    let heading = rng.random_range(0.0..std::f64::consts::TAU);
    let mut rate = || if cam.max_rotation > 0.0 { rng.random_range(-cam.max_rotation..=cam.max_rotation) } else { 0.0 };
    let (yaw_rate, pitch_rate, roll_rate) = (rate(), rate(), rate());
    (0..config.frames)
        .map(|k| {
            let t = k as f64;
            let r = camera_rotation(yaw_rate * t, pitch_rate * t, roll_rate * t);
            let centre = Vector3::new(speed * heading.cos() * t, speed * heading.sin() * t, cam.altitude);
            CameraPose::from_center(r, centre, intrinsics, GroundPlane::default())
        })
        .collect()
}

fn place_regions(config: &SceneConfig, bounds: [f64; 4], rng: &mut ChaCha8Rng) -> Vec<Region> {
    let [x0, y0, x1, y1] = bounds;
    let ground_classes = config.classes - 1;
    let mut regions: Vec<Region> = Vec::with_capacity(config.regions);
    for _ in 0..config.regions {
        // best of several candidates keeps regions from getting tiny
        let mut best = [0.0; 2];
        let mut best_d = -1.0;
        for _ in 0..12 {
            let c = [rng.random_range(x0..x1), rng.random_range(y0..y1)];
            let d = regions.iter().map(|r| (r.site[0] - c[0]).powi(2) + (r.site[1] - c[1]).powi(2)).fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = c;
            }
        }
        let class = rng.random_range(0..ground_classes);
        let base = class_colour(class, config.classes);
        let colour = base.map(|v| (v + rng.random_range(-0.04..0.04)).clamp(0.0, 1.0));
        regions.push(Region { site: best, class: class as u8, colour });
    }
    regions
}

fn mean_spacing(regions: &[Region]) -> Option<f64> {
    if regions.len() < 2 {
        return None;
    }
    let total: f64 = regions
        .iter()
        .enumerate()
        .map(|(i, a)| {
            regions
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, b)| ((a.site[0] - b.site[0]).powi(2) + (a.site[1] - b.site[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Some(total / regions.len() as f64)
}

/// Renders a sequence; deterministic given the config (including its seed).
pub fn generate_sequence(config: &SceneConfig) -> Result<SyntheticSequence> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let poses = trajectory(config, &mut rng);
    let (h, w) = (config.height, config.width);
    let mpp = config.metres_per_pixel();

    let mut bounds = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for pose in &poses {
        for (x, y) in [(0.0, 0.0), (w as f64, 0.0), (0.0, h as f64), (w as f64, h as f64)] {
            let p = pose.backproject(x, y).ok_or_else(|| Error::Degenerate("frame corner does not hit the ground".into()))?;
            bounds = [bounds[0].min(p.x), bounds[1].min(p.y), bounds[2].max(p.x), bounds[3].max(p.y)];
        }
    }
    let margin = 10.0 * mpp;
    bounds = [bounds[0] - margin, bounds[1] - margin, bounds[2] + margin, bounds[3] + margin];
    let regions = place_regions(config, bounds, &mut rng);

    let half = config.sprite_size * mpp / 2.0;
    let sprites = (0..config.sprites)
        .map(|_| {
            let (cx, cy) = (rng.random_range(0.2..0.8) * w as f64, rng.random_range(0.2..0.8) * h as f64);
            let p = poses[0].backproject(cx, cy).ok_or_else(|| Error::Degenerate("sprite start off the ground".into()))?;
            let [s0, s1] = config.sprite_speed;
            let speed = if s1 > s0 { rng.random_range(s0..=s1) } else { s0 } * mpp;
            let dir = rng.random_range(0.0..std::f64::consts::TAU);
            let colour = class_colour(config.classes - 1, config.classes).map(|v| (v + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0));
            Ok(Sprite { start: [p.x, p.y], velocity: [speed * dir.cos(), speed * dir.sin()], half, colour })
        })
        .collect::<Result<Vec<_>>>()?;
    let site_spacing = mean_spacing(&regions).unwrap_or(20.0 * mpp);
    let scene = Scene { regions, sprites, edge_softness: 1.2 * mpp, site_spacing, texture_salt: rng.random(), sprite_class: (config.classes - 1) as u8 };

    let mut frames = Vec::with_capacity(config.frames);
    let mut labels = Vec::with_capacity(config.frames);
    let mut owners = Vec::with_capacity(config.frames);
    for (k, pose) in poses.iter().enumerate() {
        let mut img = Tensor::zeros(3, h, w, Kind::Image);
        let mut lab = LabelMap::filled(h, w, 0);
        let mut own = vec![None; h * w];
        for i in 0..h {
            for j in 0..w {
                let p = pose.backproject(j as f64, i as f64).ok_or_else(|| Error::Degenerate("pixel ray misses the ground".into()))?;
                let (colour, label, owner) = scene.shade(&p, k);
                for c in 0..3 {
                    img.set(c, i, j, colour[c] as f32);
                }
                lab.set(i, j, label);
                own[i * w + j] = owner;
            }
        }
        frames.push(img);
        labels.push(lab);
        owners.push(own);
    }

    let mut homographies = Vec::new();
    let mut flows_fwd = Vec::new();
    let mut flows_bwd = Vec::new();
    for k in 1..config.frames {
        let (past, cur) = (&poses[k - 1], &poses[k]);
        let hm = if past == cur { Homography::identity() } else { pose_to_homography(past, cur)? };
        let mut fwd = flow_from_homography(&hm, h, w)?;
        let mut bwd = flow_from_homography(&hm.inverse()?, h, w)?;
        // sprite pixels follow the sprite instead of the ground
        for (flow, pose_here, pose_there, owner, step) in [(&mut fwd, cur, past, &owners[k], -1.0), (&mut bwd, past, cur, &owners[k - 1], 1.0)] {
            let mut field = flow.tensor().clone();
            for i in 0..h {
                for j in 0..w {
                    let Some(s) = owner[i * w + j] else { continue };
                    let p = pose_here.backproject(j as f64, i as f64).ok_or_else(|| Error::Degenerate("pixel ray misses the ground".into()))?;
                    let v = scene.sprites[s].velocity;
                    let q = Vector3::new(p.x + step * v[0], p.y + step * v[1], p.z);
                    let (x, y) = pose_there.project(&q).ok_or_else(|| Error::Degenerate("sprite leaves the view frustum".into()))?;
                    field.set(0, i, j, (x - j as f64) as f32);
                    field.set(1, i, j, (y - i as f64) as f32);
                }
            }
            *flow = FlowField::new(field)?;
        }
        homographies.push(hm);
        flows_fwd.push(fwd);
        flows_bwd.push(bwd);
    }

    let annotated = (0..config.frames).map(|k| k % config.annotation_interval == 0).collect();
    Ok(SyntheticSequence { config: config.clone(), frames, labels, annotated, poses, homographies, flows_fwd, flows_bwd })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::occlusion_between;
    use crate::geometry::warp_homography;

    fn camera_only(seed: u64) -> SceneConfig {
        SceneConfig { sprites: 0, seed, frames: 6, ..Default::default() }
    }

    #[test]
    fn static_scene_is_constant() {
        let cfg = SceneConfig {
            sprites: 0,
            frames: 4,
            camera: CameraMotion { translation: [0.0, 0.0], max_rotation: 0.0, ..Default::default() },
            ..Default::default()
        };
        let seq = generate_sequence(&cfg).unwrap();
        for k in 1..4 {
            assert_eq!(seq.homographies[k - 1], Homography::identity());
            assert!(seq.flows_fwd[k - 1].tensor().data().iter().all(|&v| v == 0.0));
            assert!(seq.flows_bwd[k - 1].tensor().data().iter().all(|&v| v == 0.0));
            assert_eq!(seq.frames[k], seq.frames[0]);
            assert_eq!(seq.labels[k], seq.labels[0]);
        }
    }

    #[test]
    fn lateral_translation_flow_magnitude() {
        let (t, d, f) = (0.8, 40.0, 64.0);
        let cfg = SceneConfig {
            sprites: 0,
            frames: 3,
            camera: CameraMotion { altitude: d, focal: f, translation: [t, t], max_rotation: 0.0 },
            ..Default::default()
        };
        let seq = generate_sequence(&cfg).unwrap();
        for flows in [&seq.flows_fwd, &seq.flows_bwd] {
            for flow in flows.iter() {
                for i in 0..64 {
                    for j in 0..64 {
                        let (u, v) = flow.at(i, j);
                        let mag = ((u as f64).powi(2) + (v as f64).powi(2)).sqrt();
                        assert!((mag - f * t / d).abs() < 1e-5, "{} vs {}", mag, f * t / d);
                    }
                }
            }
        }
    }

    #[test]
    fn same_seed_same_sequence() {
        let cfg = SceneConfig { frames: 5, seed: 42, ..Default::default() };
        let (a, b) = (generate_sequence(&cfg).unwrap(), generate_sequence(&cfg).unwrap());
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.homographies, b.homographies);
        assert_eq!(a.flows_fwd.iter().map(|f| f.tensor().clone()).collect::<Vec<_>>(), b.flows_fwd.iter().map(|f| f.tensor().clone()).collect::<Vec<_>>());
        let c = generate_sequence(&SceneConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn config_validation() {
        assert!(SceneConfig::default().validate().is_ok());
        assert!(SceneConfig { sprite_size: 64.0, ..Default::default() }.validate().is_err());
        assert!(SceneConfig { classes: 1, ..Default::default() }.validate().is_err());
        assert!(SceneConfig { height: 30, ..Default::default() }.validate().is_err());
        assert!(SceneConfig { width: 66, ..Default::default() }.validate().is_err());
        let mut c = SceneConfig::default();
        c.camera.altitude = 0.0;
        assert!(generate_sequence(&c).is_err());
    }

    #[test]
    fn homography_warp_reproduces_next_frame() {
        for seed in 0..3 {
            let seq = generate_sequence(&camera_only(seed)).unwrap();
            for k in 1..seq.frames.len() {
                let (warped, valid) = warp_homography(&seq.frames[k - 1], &seq.homographies[k - 1], 0.0).unwrap();
                let mut worst = 0.0f32;
                for c in 0..3 {
                    for i in 0..64 {
                        for j in 0..64 {
                            if valid.at(0, i, j) == 1.0 {
                                worst = worst.max((warped.at(c, i, j) - seq.frames[k].at(c, i, j)).abs());
                            }
                        }
                    }
                }
                assert!(worst < 2e-2, "seed {} frame {}: {}", seed, k, worst);
            }
        }
    }

    #[test]
    fn background_flows_are_consistent() {
        for seed in 0..3 {
            let seq = generate_sequence(&SceneConfig { seed, frames: 6, ..Default::default() }).unwrap();
            for k in 1..seq.frames.len() {
                let occ = occlusion_between(&seq.flows_fwd[k - 1], &seq.flows_bwd[k - 1]).unwrap();
                let fwd_h = flow_from_homography(&seq.homographies[k - 1], 64, 64).unwrap();
                for i in 0..64 {
                    for j in 0..64 {
                        let (u, v) = seq.flows_fwd[k - 1].at(i, j);
                        let (x, y) = (j as f64 + u as f64, i as f64 + v as f64);
                        let in_frame = (0.0..=63.0).contains(&x) && (0.0..=63.0).contains(&y);
                        let ground_here = seq.labels[k].at(i, j) != 3;
                        // the past location must also show ground, at all four neighbours
                        let ground_there = in_frame && {
                            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
                            [(y0, x0), (y0, (x0 + 1).min(63)), ((y0 + 1).min(63), x0), ((y0 + 1).min(63), (x0 + 1).min(63))]
                                .iter()
                                .all(|&(a, b)| seq.labels[k - 1].at(a, b) != 3)
                        };
                        if ground_here && ground_there {
                            assert_eq!(occ.at(0, i, j), 0.0, "seed {} frame {} pixel ({}, {})", seed, k, i, j);
                            assert_eq!(seq.flows_fwd[k - 1].at(i, j), fwd_h.at(i, j));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn sprites_carry_their_class_and_occlude() {
        let cfg = SceneConfig { seed: 5, frames: 6, sprite_speed: [2.5, 3.0], camera: CameraMotion { translation: [0.0, 0.0], max_rotation: 0.0, ..Default::default() }, ..Default::default() };
        let seq = generate_sequence(&cfg).unwrap();
        assert!(seq.labels.iter().all(|l| l.data().contains(&3)));
        assert!(seq.labels.iter().all(|l| l.data().iter().all(|&v| v <= 3)));
        let mut flagged = 0;
        for k in 1..cfg.frames {
            let occ = occlusion_between(&seq.flows_fwd[k - 1], &seq.flows_bwd[k - 1]).unwrap();
            for i in 0..64 {
                for j in 0..64 {
                    // ground now visible where a sprite stood in the past frame
                    if seq.labels[k].at(i, j) != 3 && seq.labels[k - 1].at(i, j) == 3 {
                        assert_eq!(seq.flows_fwd[k - 1].at(i, j), (0.0, 0.0));
                        assert_eq!(occ.at(0, i, j), 1.0);
                        flagged += 1;
                    }
                }
            }
        }
        assert!(flagged > 0);
        assert_eq!(seq.annotated, vec![true, false, false, false, false, true]);
    }

}
