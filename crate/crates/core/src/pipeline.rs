//! End-to-end pipelines over in-memory sequences: fitting the image model,
//! training, streaming inference, distillation targets and evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::flow::{occlusion_between, FlowField};
use crate::geometry::{estimate_homography_dlt, Homography};
use crate::losses::{consistency_weight, teacher_blend, LossWeights};
use crate::metrics::{miou, tc_video, ConfusionMatrix};
use crate::ops::argmax_channels;
use crate::propagation::{video_step, PropagatorState, SimilarityLayer, SimilarityMode, StepOptions};
use crate::surrogate::{fit_head, frame_noise_seed, gaussian_noise, make_teacher_logits, surrogate_features, surrogate_logits, HeadFit, SurrogateHead, FEATURE_CHANNELS};
use crate::synth::SyntheticSequence;
use crate::tensor::{LabelMap, Tensor, IGNORE_LABEL};
use crate::train::{train, FrameInput, Model, PairSample, TrainConfig, TrainMode};

/// Logit noise of the image model for one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateNoise {
    pub level: f64,
    pub seed: u64,
}

/// A video with whatever annotations are available.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub name: String,
    /// RGB in [0, 1].
    pub frames: Vec<Tensor<f32>>,
    /// Sparse annotations by frame index.
    pub labels: BTreeMap<usize, LabelMap>,
    /// Ground truth on every frame, when known (used for the teacher).
    pub dense_labels: Option<Vec<LabelMap>>,
    /// `H_{k→k+1}` per pair.
    pub homographies: Option<Vec<Homography>>,
    /// `k → k+1` flows stored on frame `k + 1`.
    pub flows_fwd: Option<Vec<FlowField>>,
    /// `k+1 → k` flows stored on frame `k`.
    pub flows_bwd: Option<Vec<FlowField>>,
    pub classes: Vec<String>,
    pub seed: u64,
    pub noise: SurrogateNoise,
}

/// Rounds to the 8-bit grid used on disk, so in-memory and loaded sequences agree.
pub fn quantize_frame(frame: &Tensor<f32>) -> Tensor<f32> {
    frame.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

pub fn class_names(classes: usize) -> Vec<String> {
    (0..classes).map(|c| if c + 1 == classes { "sprite".to_string() } else { format!("ground{}", c) }).collect()
}

impl Sequence {
    pub fn from_synthetic(name: &str, seq: &SyntheticSequence) -> Self {
        let labels = seq.annotated.iter().enumerate().filter(|(_, a)| **a).map(|(k, _)| (k, seq.labels[k].clone())).collect();
        Self {
            name: name.to_string(),
            frames: seq.frames.iter().map(quantize_frame).collect(),
            labels,
            dense_labels: Some(seq.labels.clone()),
            homographies: Some(seq.homographies.clone()),
            flows_fwd: Some(seq.flows_fwd.clone()),
            flows_bwd: Some(seq.flows_bwd.clone()),
            classes: class_names(seq.config.classes),
            seed: seq.config.seed,
            noise: SurrogateNoise { level: seq.config.noise_level, seed: seq.config.seed },
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Checks list lengths and shapes against the frame count.
    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        if n == 0 {
            return Err(Error::Manifest(format!("sequence '{}' has no frames", self.name)));
        }
        if self.classes.len() < 2 || self.classes.len() > 255 {
            return Err(Error::Manifest(format!("sequence '{}' lists {} classes", self.name, self.classes.len())));
        }
        let (c, h, w) = self.frames[0].chw();
        if c != 3 || self.frames.iter().any(|f| f.chw() != (3, h, w)) {
            return Err(Error::Manifest(format!("sequence '{}' frames are not same-sized RGB images", self.name)));
        }
        let pairs = n - 1;
        let check_len = |what: &str, len: Option<usize>| match len {
            Some(l) if l != pairs => Err(Error::Manifest(format!("sequence '{}': {} has {} entries for {} pairs", self.name, what, l, pairs))),
            _ => Ok(()),
        };
        check_len("homographies", self.homographies.as_ref().map(Vec::len))?;
        check_len("flows_fwd", self.flows_fwd.as_ref().map(Vec::len))?;
        check_len("flows_bwd", self.flows_bwd.as_ref().map(Vec::len))?;
        for flows in [&self.flows_fwd, &self.flows_bwd].into_iter().flatten() {
            if flows.iter().any(|f| (f.height(), f.width()) != (h, w)) {
                return Err(Error::Manifest(format!("sequence '{}' has flows of the wrong size", self.name)));
            }
        }
        if let Some(d) = &self.dense_labels {
            if d.len() != n {
                return Err(Error::Manifest(format!("sequence '{}': {} dense label maps for {} frames", self.name, d.len(), n)));
            }
        }
        if let Some(&k) = self.labels.keys().find(|&&k| k >= n) {
            return Err(Error::Manifest(format!("sequence '{}' labels frame {} of {}", self.name, k, n)));
        }
        let classes = self.classes.len();
        for l in self.labels.values().chain(self.dense_labels.iter().flatten()) {
            if l.dims() != (h, w) || l.data().iter().any(|&v| v != IGNORE_LABEL && v as usize >= classes) {
                return Err(Error::Manifest(format!("sequence '{}' has a label map out of range or of the wrong size", self.name)));
            }
        }
        Ok(())
    }

    /// The image model's logits for frame `k`.
    pub fn image_logits(&self, head: &SurrogateHead<f32>, k: usize) -> Result<Tensor<f32>> {
        surrogate_logits(&self.frames[k], head, self.noise.level, frame_noise_seed(self.noise.seed, k))
    }

    fn frame_input(&self, classes: usize, k: usize) -> Result<FrameInput<f32>> {
        let (_, h, w) = self.frames[k].chw();
        Ok(FrameInput { features: surrogate_features(&self.frames[k])?, noise: gaussian_noise(classes, h, w, self.noise.level, frame_noise_seed(self.noise.seed, k)) })
    }

    /// Past→current homography for the pair ending at frame `k` (`k ≥ 1`).
    /// Without stored homographies it is estimated from the forward flow, or
    /// taken as the identity when no flow exists either.
    pub fn pair_homography(&self, k: usize) -> Result<Homography> {
        if let Some(hs) = &self.homographies {
            return Ok(hs[k - 1]);
        }
        match &self.flows_fwd {
            Some(flows) => homography_from_flow(&flows[k - 1]),
            None => Ok(Homography::identity()),
        }
    }

    fn flow_fwd(&self, k: usize) -> Result<&FlowField> {
        self.flows_fwd
            .as_ref()
            .map(|f| &f[k - 1])
            .ok_or_else(|| Error::MissingArtifact(format!("sequence '{}' has no forward flows", self.name)))
    }
}

/// DLT fit to correspondences sampled on a regular grid of the flow field.
pub fn homography_from_flow(flow: &FlowField) -> Result<Homography> {
    let (h, w) = (flow.height(), flow.width());
    let mut corr = Vec::new();
    let step = (h.min(w) / 8).max(1);
    for i in (0..h).step_by(step) {
        for j in (0..w).step_by(step) {
            let (u, v) = flow.at(i, j);
            corr.push(((j as f64 + u as f64, i as f64 + v as f64), (j as f64, i as f64)));
        }
    }
    estimate_homography_dlt(&corr)
}

/// Fits the image model's head on all annotated frames.
pub fn fit_surrogate(sequences: &[Sequence], fit: &HeadFit) -> Result<SurrogateHead<f32>> {
    let classes = common_classes(sequences)?;
    let mut samples = Vec::new();
    for s in sequences {
        for (&k, l) in &s.labels {
            samples.push((surrogate_features(&s.frames[k])?, l.clone()));
        }
    }
    if samples.is_empty() {
        return Err(Error::MissingArtifact("no annotated frames to fit the image model on".into()));
    }
    fit_head(&samples, classes, fit)
}

fn common_classes(sequences: &[Sequence]) -> Result<usize> {
    let first = sequences.first().ok_or_else(|| Error::InvalidArgument("no sequences".into()))?;
    if sequences.iter().any(|s| s.classes.len() != first.classes.len()) {
        return Err(Error::Manifest("sequences disagree on the class list".into()));
    }
    Ok(first.classes.len())
}

/// Consistent teacher targets for one sequence: entry `k − 1` holds
/// `(T^c_k, T^c_{k−1})` for the pair ending at frame `k`.
pub fn teacher_targets(seq: &Sequence, margin: f64, corruption: f64, seed: u64) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
    let dense = seq.dense_labels.as_ref().ok_or_else(|| Error::MissingArtifact(format!("sequence '{}' has no dense labels for the teacher", seq.name)))?;
    let bwd = seq.flows_bwd.as_ref().ok_or_else(|| Error::MissingArtifact(format!("sequence '{}' has no backward flows", seq.name)))?;
    let classes = seq.num_classes();
    let teacher: Vec<Tensor<f32>> = dense
        .iter()
        .enumerate()
        .map(|(k, l)| make_teacher_logits(l, classes, margin, corruption, frame_noise_seed(seed, k)))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(seq.len().saturating_sub(1));
    for k in 1..seq.len() {
        let fwd = seq.flow_fwd(k)?;
        let occ_q = occlusion_between(fwd, &bwd[k - 1])?;
        let occ_p = occlusion_between(&bwd[k - 1], fwd)?;
        out.push(teacher_blend(&teacher[k], &teacher[k - 1], &bwd[k - 1], fwd, &occ_q, &occ_p)?);
    }
    Ok(out)
}

/// Everything `train` needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub config: TrainConfig,
    pub weights: LossWeights,
    pub similarity: SimilarityMode,
    pub head_fit: HeadFit,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { config: TrainConfig::default(), weights: LossWeights::default(), similarity: SimilarityMode::Conv, head_fit: HeadFit::default() }
    }
}

/// Builds the training pairs. Base mode uses pairs whose current frame is
/// annotated; distillation uses every pair and needs `teachers`
/// (one [`teacher_targets`] result per sequence).
pub fn training_pairs(sequences: &[Sequence], mode: TrainMode, teachers: Option<&[Vec<(Tensor<f32>, Tensor<f32>)>]>) -> Result<Vec<PairSample<f32>>> {
    let classes = common_classes(sequences)?;
    if mode == TrainMode::Distillation {
        match teachers {
            Some(t) if t.len() == sequences.len() => {}
            _ => return Err(Error::MissingArtifact("distillation needs teacher targets for every sequence".into())),
        }
    }
    let mut pairs = Vec::new();
    for (si, s) in sequences.iter().enumerate() {
        for k in 1..s.len() {
            let labels = s.labels.get(&k).cloned();
            if mode == TrainMode::Base && labels.is_none() {
                continue;
            }
            let teacher = match (mode, teachers) {
                (TrainMode::Distillation, Some(t)) => {
                    Some(t[si].get(k - 1).cloned().ok_or_else(|| Error::MissingArtifact(format!("sequence '{}' lacks teacher pair {}", s.name, k)))?)
                }
                _ => None,
            };
            let flow = s.flow_fwd(k)?.clone();
            let weight = consistency_weight(&s.frames[k], &s.frames[k - 1], &flow)?;
            pairs.push(PairSample {
                past: s.frame_input(classes, k - 1)?,
                current: s.frame_input(classes, k)?,
                homography: s.pair_homography(k)?,
                flow,
                weight,
                labels,
                teacher,
            });
        }
    }
    if pairs.is_empty() {
        return Err(Error::MissingArtifact(format!("no usable training pairs for {:?} mode", mode)));
    }
    Ok(pairs)
}

/// Result of [`train_model`].
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model<f32>,
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Two-step default: fit the head on annotations, freeze it, then train the
/// similarity layer. With `one_step` both start from scratch together.
pub fn train_model(sequences: &[Sequence], options: &TrainOptions, teachers: Option<&[Vec<(Tensor<f32>, Tensor<f32>)>]>) -> Result<Trained> {
    for s in sequences {
        s.validate()?;
    }
    let classes = common_classes(sequences)?;
    let cfg = &options.config;
    let head = if cfg.one_step { SurrogateHead::zeros(classes) } else { fit_surrogate(sequences, &HeadFit { seed: cfg.seed, ..options.head_fit })? };
    let layer = match options.similarity {
        SimilarityMode::Conv => SimilarityLayer::learned(FEATURE_CHANNELS, cfg.seed)?,
        SimilarityMode::Cosine => SimilarityLayer::cosine(),
    };
    let init = Model { head, layer };
    if options.similarity == SimilarityMode::Cosine && !cfg.one_step {
        // nothing is trainable
        return Ok(Trained { model: init, epoch_losses: Vec::new(), steps: 0 });
    }
    let pairs = training_pairs(sequences, cfg.mode, teachers)?;
    let out = train(&pairs, &init, cfg, &options.weights)?;
    Ok(Trained { model: out.model, epoch_losses: out.epoch_losses, steps: out.steps })
}

/// Streams the model over one video and returns per-frame output logits.
pub fn infer_sequence(seq: &Sequence, model: &Model<f32>, options: StepOptions) -> Result<Vec<Tensor<f32>>> {
    let mut state = PropagatorState::new();
    let mut out = Vec::with_capacity(seq.len());
    for k in 0..seq.len() {
        let q = seq.image_logits(&model.head, k)?;
        let features = surrogate_features(&seq.frames[k])?;
        let h_map = if k > 0 && options.registration { Some(seq.pair_homography(k)?) } else { None };
        out.push(video_step(&mut state, &q, &features, h_map.as_ref(), &model.layer, options)?);
    }
    Ok(out)
}

pub fn predictions(logits: &[Tensor<f32>]) -> Result<Vec<LabelMap>> {
    logits.iter().map(argmax_channels).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub name: String,
    pub miou: Option<f64>,
    pub tc: Option<f64>,
    pub pairs: usize,
    pub annotated_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// mIoU over the pooled confusion matrix of all annotated frames.
    pub miou: Option<f64>,
    /// Mean of the per-video TC values.
    pub tc: Option<f64>,
    pub per_class_iou: Vec<Option<f64>>,
    pub sequences: Vec<SequenceReport>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.6}", x));
        let mut s = format!("mIoU {}\nTC {}\n", fmt(self.miou), fmt(self.tc));
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            s.push_str(&format!("class {} IoU {}\n", c, fmt(*iou)));
        }
        for r in &self.sequences {
            s.push_str(&format!(
                "{}: mIoU {} TC {} pairs {} annotated {}\n",
                if r.name.is_empty() { "." } else { &r.name },
                fmt(r.miou),
                fmt(r.tc),
                r.pairs,
                r.annotated_frames
            ));
        }
        s
    }
}

/// mIoU on annotated frames and TC over all consecutive pairs (with the
/// sequences' forward flows).
pub fn evaluate(sequences: &[Sequence], preds: &[Vec<LabelMap>]) -> Result<EvalReport> {
    if sequences.len() != preds.len() {
        return shape_err(format!("{} sequences but {} prediction sets", sequences.len(), preds.len()));
    }
    let classes = common_classes(sequences)?;
    let mut pooled = ConfusionMatrix::new(classes, IGNORE_LABEL);
    let mut per_seq = Vec::new();
    let mut tcs = Vec::new();
    for (s, p) in sequences.iter().zip(preds) {
        if p.len() != s.len() {
            return shape_err(format!("sequence '{}' has {} frames but {} predictions", s.name, s.len(), p.len()));
        }
        let mut cm = ConfusionMatrix::new(classes, IGNORE_LABEL);
        for (&k, l) in &s.labels {
            cm.accumulate(l, &p[k], None)?;
        }
        pooled.merge(&cm)?;
        let seq_miou = if cm.total() > 0 { Some(miou(&cm)?) } else { None };
        let tc = match &s.flows_fwd {
            Some(flows) if s.len() > 1 => Some(tc_video(p, flows)?),
            _ => None,
        };
        tcs.extend(tc);
        per_seq.push(SequenceReport { name: s.name.clone(), miou: seq_miou, tc, pairs: s.len() - 1, annotated_frames: s.labels.len() });
    }
    Ok(EvalReport {
        miou: if pooled.total() > 0 { Some(miou(&pooled)?) } else { None },
        tc: (!tcs.is_empty()).then(|| tcs.iter().sum::<f64>() / tcs.len() as f64),
        per_class_iou: pooled.ious(),
        sequences: per_seq,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_sequence, SceneConfig};

    fn small(seed: u64, sprites: usize) -> Sequence {
        let cfg = SceneConfig { height: 32, width: 32, frames: 6, annotation_interval: 2, sprites, sprite_size: 6.0, seed, ..Default::default() };
        Sequence::from_synthetic("s", &generate_sequence(&cfg).unwrap())
    }

    fn head_for(seqs: &[Sequence]) -> SurrogateHead<f32> {
        fit_surrogate(seqs, &HeadFit { iterations: 30, ..Default::default() }).unwrap()
    }

    #[test]
    fn ground_truth_predictions_score_perfect_miou() {
        let s = small(1, 2);
        let preds = s.dense_labels.clone().unwrap();
        let r = evaluate(std::slice::from_ref(&s), &[preds]).unwrap();
        assert_eq!(r.miou, Some(1.0));
        assert_eq!(r.sequences[0].pairs, 5);
        assert_eq!(r.sequences[0].annotated_frames, 3);
        let tc = r.tc.unwrap();
        assert!((0.0..=1.0).contains(&tc));
    }

    #[test]
    fn alpha_zero_reduces_to_the_image_model() {
        let s = small(2, 2);
        let model = Model { head: head_for(&[s.clone()]), layer: SimilarityLayer::learned(FEATURE_CHANNELS, 1).unwrap() };
        let out = infer_sequence(&s, &model, StepOptions { registration: true, alpha_zero: true }).unwrap();
        for (k, o) in out.iter().enumerate() {
            let q = s.image_logits(&model.head, k).unwrap();
            assert_eq!(argmax_channels(o).unwrap(), argmax_channels(&q).unwrap());
        }
        let full = infer_sequence(&s, &model, StepOptions::default()).unwrap();
        assert_eq!(full[0], s.image_logits(&model.head, 0).unwrap());
    }

    #[test]
    fn base_pairs_need_annotated_current_frames() {
        let s = small(3, 1);
        let pairs = training_pairs(std::slice::from_ref(&s), TrainMode::Base, None).unwrap();
        assert_eq!(pairs.len(), 2);
        assert!(pairs.iter().all(|p| p.labels.is_some() && p.teacher.is_none()));
        assert!(matches!(training_pairs(std::slice::from_ref(&s), TrainMode::Distillation, None), Err(Error::MissingArtifact(_))));
        let t = teacher_targets(&s, 4.0, 0.0, 0).unwrap();
        let kd = training_pairs(std::slice::from_ref(&s), TrainMode::Distillation, Some(&[t])).unwrap();
        assert_eq!(kd.len(), 5);
    }

    #[test]
    fn flow_fallback_recovers_camera_homography() {
        let s = small(4, 0);
        for k in 1..s.len() {
            let est = homography_from_flow(&s.flows_fwd.as_ref().unwrap()[k - 1]).unwrap();
            let truth = s.homographies.as_ref().unwrap()[k - 1];
            for (x, y) in [(0.0, 0.0), (31.0, 0.0), (15.5, 15.5), (0.0, 31.0)] {
                let (a, b) = (est.apply(x, y).unwrap(), truth.apply(x, y).unwrap());
                // flows are stored in single precision
                assert!((a.0 - b.0).abs() < 1e-3 && (a.1 - b.1).abs() < 1e-3);
            }
        }
        let mut no_h = s.clone();
        no_h.homographies = None;
        assert!(no_h.pair_homography(1).is_ok());
        no_h.flows_fwd = None;
        assert_eq!(no_h.pair_homography(1).unwrap(), Homography::identity());
    }

    #[test]
    fn validate_catches_inconsistent_lists() {
        let mut s = small(5, 0);
        assert!(s.validate().is_ok());
        s.flows_bwd.as_mut().unwrap().pop();
        assert!(matches!(s.validate(), Err(Error::Manifest(_))));
        let mut s = small(5, 0);
        s.labels.insert(1, LabelMap::filled(32, 32, 9));
        assert!(matches!(s.validate(), Err(Error::Manifest(_))));
    }

    #[test]
    fn training_is_deterministic() {
        let seqs = vec![small(6, 1), small(7, 1)];
        let options = TrainOptions { config: TrainConfig { epochs: 2, ..Default::default() }, head_fit: HeadFit { iterations: 20, ..Default::default() }, ..Default::default() };
        let a = train_model(&seqs, &options, None).unwrap();
        let b = train_model(&seqs, &options, None).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.epoch_losses, b.epoch_losses);
        assert_eq!(a.steps, 8);
    }
}
