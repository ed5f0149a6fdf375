//! On-disk formats: STEN tensor files, binary netpbm images, sequence
//! manifests and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::geometry::Homography;
use crate::losses::LossWeights;
use crate::pipeline::{Sequence, SurrogateNoise};
use crate::propagation::{SimilarityLayer, SimilarityMode};
use crate::surrogate::{SurrogateHead, FEATURE_CHANNELS};
use crate::tensor::{Kind, LabelMap, Tensor};
use crate::train::{Model, TrainMode};

const STEN_MAGIC: &[u8; 4] = b"STEN";
const STEN_VERSION: u8 = 1;

/// Payload of a tensor file.
#[derive(Debug, Clone, PartialEq)]
pub enum StenData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    I32(Vec<i32>),
}

impl StenData {
    fn dtype(&self) -> u8 {
        match self {
            StenData::F32(_) => 0,
            StenData::U8(_) => 1,
            StenData::I32(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            StenData::F32(v) => v.len(),
            StenData::U8(v) => v.len(),
            StenData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A typed n-dimensional array as stored in a `.sten` file.
#[derive(Debug, Clone, PartialEq)]
pub struct StenTensor {
    pub dims: Vec<usize>,
    pub data: StenData,
}

impl StenTensor {
    pub fn new(dims: Vec<usize>, data: StenData) -> Result<Self> {
        if dims.len() > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!("rank {} does not fit the header", dims.len())));
        }
        let n = element_count(&dims).ok_or_else(|| Error::InvalidArgument("extent product overflows".into()))?;
        if n != data.len() {
            return Err(Error::InvalidArgument(format!("dims {:?} need {} values, got {}", dims, n, data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Self {
        Self { dims: t.dims().to_vec(), data: StenData::F32(t.data().to_vec()) }
    }

    /// Float payload as a tensor of the given kind.
    pub fn into_tensor(self, kind: Kind) -> Result<Tensor<f32>> {
        match self.data {
            StenData::F32(v) => Tensor::new(self.dims, v, kind),
            _ => Err(Error::Format("expected a 32-bit float tensor".into())),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let width = match self.data {
            StenData::U8(_) => 1,
            _ => 4,
        };
        let mut out = Vec::with_capacity(8 + 8 * self.dims.len() + width * self.data.len());
        out.extend_from_slice(STEN_MAGIC);
        out.extend_from_slice(&[STEN_VERSION, self.data.dtype(), self.dims.len() as u8, 0]);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            StenData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            StenData::U8(v) => out.extend_from_slice(v),
            StenData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format("tensor file shorter than its header".into()));
        }
        if &bytes[..4] != STEN_MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
        }
        let (version, dtype, rank, reserved) = (bytes[4], bytes[5], bytes[6] as usize, bytes[7]);
        if version != STEN_VERSION {
            return Err(Error::Format(format!("unsupported tensor file version {}", version)));
        }
        if reserved != 0 {
            return Err(Error::Format("reserved header byte is not zero".into()));
        }
        let width = match dtype {
            0 | 2 => 4,
            1 => 1,
            _ => return Err(Error::Format(format!("unknown dtype {}", dtype))),
        };
        let header = 8 + 8 * rank;
        if bytes.len() < header {
            return Err(Error::Format("truncated extents".into()));
        }
        let dims = bytes[8..header]
            .chunks_exact(8)
            .map(|c| usize::try_from(u64::from_le_bytes(c.try_into().expect("8-byte chunk"))).map_err(|_| Error::Format("extent too large".into())))
            .collect::<Result<Vec<_>>>()?;
        let n = element_count(&dims).ok_or_else(|| Error::Format("extent product overflows".into()))?;
        let payload = &bytes[header..];
        if Some(payload.len()) != n.checked_mul(width) {
            return Err(Error::Format(format!("payload holds {} bytes, extents {:?} need {}", payload.len(), dims, n.saturating_mul(width))));
        }
        let data = match dtype {
            0 => StenData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk"))).collect()),
            1 => StenData::U8(payload.to_vec()),
            _ => StenData::I32(payload.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().expect("4-byte chunk"))).collect()),
        };
        Ok(Self { dims, data })
    }
}

fn element_count(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::MissingArtifact(format!("{}: {}", path.display(), e)))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {}", path.display(), m)),
        other => other,
    })
}

pub fn write_sten(path: &Path, t: &StenTensor) -> Result<()> {
    Ok(fs::write(path, t.encode())?)
}

pub fn read_sten(path: &Path) -> Result<StenTensor> {
    with_path(path, StenTensor::decode(&read_file(path)?))
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    write_sten(path, &StenTensor::from_tensor(t))
}

pub fn read_tensor(path: &Path, kind: Kind) -> Result<Tensor<f32>> {
    with_path(path, read_sten(path)?.into_tensor(kind))
}

pub fn write_flow(path: &Path, flow: &FlowField) -> Result<()> {
    write_tensor(path, flow.tensor())
}

pub fn read_flow(path: &Path) -> Result<FlowField> {
    with_path(path, FlowField::new(read_tensor(path, Kind::Flow)?).map_err(|e| Error::Format(e.to_string())))
}

/// Splits a binary netpbm file into its header fields and raster.
fn parse_netpbm<'a>(bytes: &'a [u8], magic: &[u8; 2]) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format(format!("expected a {} image", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("malformed image header".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("malformed image header".into()));
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {}", maxval)));
    }
    Ok((w, h, &bytes[pos + 1..]))
}

/// Writes an RGB frame in [0, 1] as a binary pixmap.
pub fn write_ppm(path: &Path, frame: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = frame.chw();
    if c != 3 {
        return Err(Error::InvalidArgument(format!("pixmaps need 3 channels, got {}", c)));
    }
    let mut out = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                out.push((frame.at(ch, i, j).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(fs::write(path, out)?)
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = read_file(path)?;
    let (w, h, raster) = with_path(path, parse_netpbm(&bytes, b"P6"))?;
    if raster.len() != 3 * w * h {
        return Err(Error::Format(format!("{}: raster holds {} bytes, expected {}", path.display(), raster.len(), 3 * w * h)));
    }
    Ok(Tensor::from_fn(3, h, w, Kind::Image, |c, i, j| raster[3 * (i * w + j) + c] as f32 / 255.0))
}

pub fn write_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    let (h, w) = labels.dims();
    let mut out = format!("P5\n{} {}\n255\n", w, h).into_bytes();
    out.extend_from_slice(labels.data());
    Ok(fs::write(path, out)?)
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    let bytes = read_file(path)?;
    let (w, h, raster) = with_path(path, parse_netpbm(&bytes, b"P5"))?;
    if raster.len() != w * h {
        return Err(Error::Format(format!("{}: raster holds {} bytes, expected {}", path.display(), raster.len(), w * h)));
    }
    LabelMap::new(h, w, raster.to_vec())
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// JSON description of one sequence directory. Paths are relative to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub frames: Vec<String>,
    /// Sparse annotations, frame index → label image.
    #[serde(default)]
    pub labels: BTreeMap<usize, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homographies: Option<Vec<[f64; 9]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flows_fwd: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flows_bwd: Option<Vec<String>>,
    pub classes: Vec<String>,
    pub seed: u64,
    /// Labels for every frame; only the teacher uses them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_labels: Option<Vec<String>>,
    /// Logit noise of the image model; none when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surrogate_noise: Option<SurrogateNoise>,
}

impl Manifest {
    /// Structural checks that need no file contents.
    pub fn validate(&self, dir: &Path) -> Result<()> {
        let n = self.frames.len();
        let bad = |m: String| Err(Error::Manifest(format!("{}: {}", dir.display(), m)));
        if n == 0 {
            return bad("no frames listed".into());
        }
        let pairs = n - 1;
        for (what, len) in [
            ("homographies", self.homographies.as_ref().map(Vec::len)),
            ("flows_fwd", self.flows_fwd.as_ref().map(Vec::len)),
            ("flows_bwd", self.flows_bwd.as_ref().map(Vec::len)),
        ] {
            if let Some(l) = len.filter(|&l| l != pairs) {
                return bad(format!("{} lists {} entries for {} frame pairs", what, l, pairs));
            }
        }
        if let Some(l) = self.dense_labels.as_ref().map(Vec::len).filter(|&l| l != n) {
            return bad(format!("dense_labels lists {} entries for {} frames", l, n));
        }
        if let Some(&k) = self.labels.keys().find(|&&k| k >= n) {
            return bad(format!("labels reference frame {} of {}", k, n));
        }
        if self.classes.len() < 2 || self.classes.len() > 255 {
            return bad(format!("{} classes listed, need 2 to 255", self.classes.len()));
        }
        if let Some(noise) = &self.surrogate_noise {
            if !(noise.level >= 0.0 && noise.level.is_finite()) {
                return bad("surrogate noise level must be finite and non-negative".into());
            }
        }
        let files = self
            .frames
            .iter()
            .chain(self.labels.values())
            .chain(self.flows_fwd.iter().flatten())
            .chain(self.flows_bwd.iter().flatten())
            .chain(self.dense_labels.iter().flatten());
        for f in files {
            if !dir.join(f).is_file() {
                return Err(Error::MissingArtifact(format!("{}: referenced file '{}' does not exist", dir.display(), f)));
            }
        }
        Ok(())
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::MissingArtifact(format!("{}: {}", path.display(), e)))?;
    serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {}", path.display(), e)))
}

/// Loads one sequence directory; the manifest is checked before any file is read.
pub fn load_sequence(dir: &Path, name: &str) -> Result<Sequence> {
    let m = read_manifest(dir)?;
    m.validate(dir)?;
    let frames = m.frames.iter().map(|f| read_ppm(&dir.join(f))).collect::<Result<Vec<_>>>()?;
    let labels = m.labels.iter().map(|(&k, f)| Ok((k, read_pgm(&dir.join(f))?))).collect::<Result<BTreeMap<_, _>>>()?;
    let dense_labels = m.dense_labels.as_ref().map(|l| l.iter().map(|f| read_pgm(&dir.join(f))).collect::<Result<Vec<_>>>()).transpose()?;
    let homographies = m
        .homographies
        .as_ref()
        .map(|hs| hs.iter().map(|h| Homography::from_rows(*h).map_err(|e| Error::Manifest(format!("{}: {}", dir.display(), e)))).collect::<Result<Vec<_>>>())
        .transpose()?;
    let load_flows = |list: &Option<Vec<String>>| list.as_ref().map(|l| l.iter().map(|f| read_flow(&dir.join(f))).collect::<Result<Vec<_>>>()).transpose();
    let seq = Sequence {
        name: name.to_string(),
        frames,
        labels,
        dense_labels,
        homographies,
        flows_fwd: load_flows(&m.flows_fwd)?,
        flows_bwd: load_flows(&m.flows_bwd)?,
        classes: m.classes.clone(),
        seed: m.seed,
        noise: m.surrogate_noise.unwrap_or(SurrogateNoise { level: 0.0, seed: m.seed }),
    };
    seq.validate().map_err(|e| match e {
        Error::Manifest(msg) => Error::Manifest(format!("{}: {}", dir.display(), msg)),
        other => other,
    })?;
    Ok(seq)
}

/// Writes a sequence directory with frames, labels, flows and a manifest.
pub fn save_sequence(dir: &Path, seq: &Sequence) -> Result<()> {
    for sub in ["frames", "labels", "flows"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut m = Manifest {
        frames: Vec::new(),
        labels: BTreeMap::new(),
        homographies: seq.homographies.as_ref().map(|hs| hs.iter().map(|h| h.0).collect()),
        flows_fwd: None,
        flows_bwd: None,
        classes: seq.classes.clone(),
        seed: seq.seed,
        dense_labels: None,
        surrogate_noise: Some(seq.noise),
    };
    for (k, f) in seq.frames.iter().enumerate() {
        let rel = format!("frames/frame_{:04}.ppm", k);
        write_ppm(&dir.join(&rel), f)?;
        m.frames.push(rel);
    }
    for (&k, l) in &seq.labels {
        let rel = format!("labels/label_{:04}.pgm", k);
        write_pgm(&dir.join(&rel), l)?;
        m.labels.insert(k, rel);
    }
    if let Some(dense) = &seq.dense_labels {
        fs::create_dir_all(dir.join("dense"))?;
        let mut list = Vec::new();
        for (k, l) in dense.iter().enumerate() {
            let rel = format!("dense/label_{:04}.pgm", k);
            write_pgm(&dir.join(&rel), l)?;
            list.push(rel);
        }
        m.dense_labels = Some(list);
    }
    let save_flows = |flows: &Option<Vec<FlowField>>, prefix: &str| -> Result<Option<Vec<String>>> {
        flows
            .as_ref()
            .map(|fs| {
                fs.iter()
                    .enumerate()
                    .map(|(k, f)| {
                        let rel = format!("flows/{}_{:04}.sten", prefix, k);
                        write_flow(&dir.join(&rel), f)?;
                        Ok(rel)
                    })
                    .collect()
            })
            .transpose()
    };
    m.flows_fwd = save_flows(&seq.flows_fwd, "fwd")?;
    m.flows_bwd = save_flows(&seq.flows_bwd, "bwd")?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

/// Sequence directories under `root`: the root itself when it has a
/// manifest (name ""), otherwise every subdirectory with one, by name.
pub fn dataset_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    if root.join(MANIFEST_FILE).is_file() {
        return Ok(vec![(String::new(), root.to_path_buf())]);
    }
    let entries = fs::read_dir(root).map_err(|e| Error::MissingArtifact(format!("{}: {}", root.display(), e)))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.join(MANIFEST_FILE).is_file() {
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            dirs.push((name, path));
        }
    }
    if dirs.is_empty() {
        return Err(Error::MissingArtifact(format!("{}: no {} found", root.display(), MANIFEST_FILE)));
    }
    dirs.sort();
    Ok(dirs)
}

pub fn load_dataset(root: &Path) -> Result<Vec<Sequence>> {
    let dirs = dataset_dirs(root)?;
    // validate every manifest before loading any payload
    for (_, d) in &dirs {
        read_manifest(d)?.validate(d)?;
    }
    dirs.iter().map(|(name, d)| load_sequence(d, name)).collect()
}

/// Output directory of one sequence below a dataset-shaped root.
pub fn sequence_dir(root: &Path, name: &str) -> PathBuf {
    if name.is_empty() {
        root.to_path_buf()
    } else {
        root.join(name)
    }
}

pub fn prediction_path(root: &Path, name: &str, k: usize) -> PathBuf {
    sequence_dir(root, name).join(format!("pred_{:04}.pgm", k))
}

pub fn logits_path(root: &Path, name: &str, k: usize) -> PathBuf {
    sequence_dir(root, name).join(format!("logits_{:04}.sten", k))
}

/// Reads `pred_*.pgm` label maps for every frame of every sequence.
pub fn read_predictions(root: &Path, sequences: &[Sequence]) -> Result<Vec<Vec<LabelMap>>> {
    sequences.iter().map(|s| (0..s.len()).map(|k| read_pgm(&prediction_path(root, &s.name, k))).collect()).collect()
}

/// Teacher targets for the pair ending at frame `k`: `(T^c_k, T^c_{k−1})`.
pub fn teacher_paths(root: &Path, name: &str, k: usize) -> (PathBuf, PathBuf) {
    let dir = sequence_dir(root, name);
    (dir.join(format!("teacher_cur_{:04}.sten", k)), dir.join(format!("teacher_past_{:04}.sten", k)))
}

pub fn write_teachers(root: &Path, name: &str, targets: &[(Tensor<f32>, Tensor<f32>)]) -> Result<()> {
    fs::create_dir_all(sequence_dir(root, name))?;
    for (i, (tq, tp)) in targets.iter().enumerate() {
        let (pq, pp) = teacher_paths(root, name, i + 1);
        write_tensor(&pq, tq)?;
        write_tensor(&pp, tp)?;
    }
    Ok(())
}

pub fn read_teachers(root: &Path, seq: &Sequence) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
    (1..seq.len())
        .map(|k| {
            let (pq, pp) = teacher_paths(root, &seq.name, k);
            Ok((read_tensor(&pq, Kind::Logits)?, read_tensor(&pp, Kind::Logits)?))
        })
        .collect()
}

const CKPT_MAGIC: &[u8; 4] = b"SSPK";
const CKPT_VERSION: u8 = 1;

/// Everything needed to rebuild a model, plus how it was trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub mode: TrainMode,
    pub seed: u64,
    pub epochs: usize,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub one_step: bool,
    pub registration: bool,
    pub similarity: SimilarityMode,
    pub weights: LossWeights,
    pub classes: usize,
    pub feature_channels: usize,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model<f32>,
}

impl Checkpoint {
    /// Magic, version, three zero bytes, u32 LE header length, JSON header,
    /// then the flat parameters (similarity layer, then head) as a tensor file.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.meta)?;
        let params = self.model.flat_params();
        let blob = StenTensor::new(vec![params.len()], StenData::F32(params))?.encode();
        let mut out = Vec::with_capacity(12 + header.len() + blob.len());
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&[CKPT_VERSION, 0, 0, 0]);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != CKPT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        if bytes[4] != CKPT_VERSION || bytes[5..8] != [0, 0, 0] {
            return Err(Error::Format(format!("unsupported checkpoint version {}", bytes[4])));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let header = bytes.get(12..12 + len).ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
        let meta: CheckpointMeta = serde_json::from_slice(header).map_err(|e| Error::Format(format!("checkpoint header: {}", e)))?;
        let params = match StenTensor::decode(&bytes[12 + len..])? {
            StenTensor { dims, data: StenData::F32(v) } if dims.len() == 1 => v,
            _ => return Err(Error::Format("checkpoint parameters must be a 1-D float tensor".into())),
        };
        if meta.classes < 2 || meta.feature_channels != FEATURE_CHANNELS {
            return Err(Error::Format("checkpoint header does not describe a supported model".into()));
        }
        let layer = match meta.similarity {
            SimilarityMode::Conv => SimilarityLayer::zeros(meta.feature_channels)?,
            SimilarityMode::Cosine => SimilarityLayer::cosine(),
        };
        let mut model = Model { head: SurrogateHead::zeros(meta.classes), layer };
        model.set_flat_params(&params).map_err(|e| Error::Format(format!("checkpoint parameters: {}", e)))?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Format("checkpoint holds non-finite parameters".into()));
        }
        Ok(Self { meta, model })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    Ok(fs::write(path, ckpt.encode()?)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    with_path(path, Checkpoint::decode(&read_file(path)?))
}
