//! Synthetic dataset generation and (de)serialization.
//!
//! A dataset directory holds `manifest.json` and one `seq_NNNNN.bin` record
//! per sequence:
//!
//! ```text
//! magic    8 bytes "EGSTSEQ\0"
//! version  u32
//! action   u32 (index into the nine classes)
//! dims     7 x u32: frames, C, H, W, h, w, J
//! offsets  4 x u64: frames, heatmaps, poses, flags blocks
//! blocks   little-endian f64: frames [L,C,H,W], heatmaps [L,h,w,J],
//!          poses [L,J,3] (camera frame, mm), flags [L,J] (1 = occluded)
//! ```

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::camera::{occlusion_flags, FisheyeCamera};
use super::render::{render_frame, render_gt_heatmap};
use super::skeleton::{sample_motion, Action, SkeletonSpec, LOWER_BODY, UPPER_BODY};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const DATASET_VERSION: u32 = 1;
pub const RECORD_MAGIC: &[u8; 8] = b"EGSTSEQ\0";
const HEADER_BYTES: u64 = 8 + 4 + 4 + 7 * 4 + 4 * 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub schema_version: u32,
    pub image_size: [usize; 2],
    pub channels: usize,
    pub heatmap_size: [usize; 2],
    /// Gaussian width in heatmap cells.
    pub sigma: f64,
    pub frames_per_sequence: usize,
    /// Seconds between frames.
    pub dt: f64,
    pub torso_radius: f64,
    pub camera: FisheyeCamera,
    pub skeleton: SkeletonSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            schema_version: DATASET_VERSION,
            image_size: [32, 32],
            channels: 1,
            heatmap_size: [16, 16],
            sigma: 1.0,
            frames_per_sequence: 8,
            dt: 0.15,
            torso_radius: 130.0,
            camera: FisheyeCamera::for_image(32, 32),
            skeleton: SkeletonSpec::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != DATASET_VERSION {
            return Err(Error::Dataset(format!(
                "config version {} (expected {DATASET_VERSION})",
                self.schema_version
            )));
        }
        if self.camera.height != self.image_size[0] || self.camera.width != self.image_size[1] {
            return Err(Error::Config("camera image size differs from image_size".into()));
        }
        if self.heatmap_size.contains(&0) || self.frames_per_sequence == 0 || !(self.dt > 0.0) || self.torso_radius < 0.0 {
            return Err(Error::Config("heatmap size, frame count and dt must be positive; torso radius nonnegative".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("heatmap sigma must be positive, got {}", self.sigma)));
        }
        self.camera.validate()?;
        self.skeleton.validate()
    }

    pub fn joints(&self) -> usize {
        self.skeleton.joints()
    }
}

/// One rendered sequence with per-frame targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub action: Action,
    /// `[L, C, H, W]`
    pub frames: Tensor,
    /// `[L, h, w, J]`
    pub heatmaps: Tensor,
    /// `[L, J, 3]`, camera frame, millimetres.
    pub poses: Tensor,
    /// `[L][J]`
    pub occluded: Vec<Vec<bool>>,
}

/// A model input window with targets for its last frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[T, C, H, W]`, oldest first.
    pub frames: Tensor,
    /// `[h, w, J]`
    pub heatmaps: Tensor,
    /// `[J, 3]` millimetres.
    pub pose: Tensor,
    pub occluded: Vec<bool>,
    pub action: Action,
}

fn block(t: &Tensor, index: usize) -> &[f64] {
    let per = t.numel() / t.shape()[0];
    &t.values()[index * per..(index + 1) * per]
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The `window` frames ending at `end` (inclusive), with targets of
    /// frame `end`.
    pub fn sample(&self, end: usize, window: usize) -> Result<Sample> {
        if window == 0 || end >= self.len() || end + 1 < window {
            return Err(Error::InvalidArgument(format!(
                "window of {window} frames ending at {end} does not fit a {}-frame sequence",
                self.len()
            )));
        }
        let fs = self.frames.shape();
        let per = fs[1] * fs[2] * fs[3];
        let start = end + 1 - window;
        let frames = Tensor::new(vec![window, fs[1], fs[2], fs[3]], self.frames.values()[start * per..(end + 1) * per].to_vec())?;
        let hs = &self.heatmaps.shape()[1..];
        let ps = &self.poses.shape()[1..];
        Ok(Sample {
            frames,
            heatmaps: Tensor::new(hs.to_vec(), block(&self.heatmaps, end).to_vec())?,
            pose: Tensor::new(ps.to_vec(), block(&self.poses, end).to_vec())?,
            occluded: self.occluded[end].clone(),
            action: self.action,
        })
    }

    fn occlusion_rate(&self, joints: &[usize]) -> f64 {
        let hidden: usize = self.occluded.iter().map(|f| joints.iter().filter(|&&j| f[j]).count()).sum();
        hidden as f64 / (joints.len() * self.occluded.len()) as f64
    }
}

/// Renders one sequence.
pub fn generate_sequence(config: &SynthConfig, action: Action, seed: u64) -> Result<Sequence> {
    config.validate()?;
    let cam = &config.camera;
    let l = config.frames_per_sequence;
    let body = sample_motion(&config.skeleton, &action.profile(), l, config.dt, seed)?;
    let mut frames = Vec::new();
    let mut heatmaps = Vec::new();
    let mut poses = Vec::new();
    let mut occluded = Vec::new();
    for pose in &body {
        let cam_pose = cam.pose_for(pose).pose_to_camera(pose);
        frames.extend_from_slice(render_frame(pose, cam, config.torso_radius, config.channels, &config.skeleton.parents)?.values());
        heatmaps.extend_from_slice(render_gt_heatmap(&cam_pose, cam, config.heatmap_size, config.sigma)?.values());
        poses.extend(cam_pose.iter().flatten());
        occluded.push(occlusion_flags(pose, cam, config.torso_radius));
    }
    let [hh, ww] = config.image_size;
    let [h, w] = config.heatmap_size;
    let j = config.joints();
    Ok(Sequence {
        action,
        frames: Tensor::new(vec![l, config.channels, hh, ww], frames)?,
        heatmaps: Tensor::new(vec![l, h, w, j], heatmaps)?,
        poses: Tensor::new(vec![l, j, 3], poses)?,
        occluded,
    })
}

/// Seed of sequence `index`: stream `index + 1` of the master generator.
pub fn sequence_seed(master: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index as u64 + 1);
    rng.next_u64()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockOffsets {
    pub frames: u64,
    pub heatmaps: u64,
    pub poses: u64,
    pub flags: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub index: usize,
    pub file: String,
    pub action: Action,
    pub seed: u64,
    pub frames: usize,
    pub occlusion_upper: f64,
    pub occlusion_lower: f64,
    pub offsets: BlockOffsets,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub config: SynthConfig,
    pub sequences: Vec<SequenceEntry>,
}

impl DatasetManifest {
    /// Mean occlusion rate of upper- and lower-body joints over all frames.
    pub fn occlusion_rates(&self) -> (f64, f64) {
        let n = self.sequences.len().max(1) as f64;
        let upper = self.sequences.iter().map(|s| s.occlusion_upper).sum::<f64>() / n;
        let lower = self.sequences.iter().map(|s| s.occlusion_lower).sum::<f64>() / n;
        (upper, lower)
    }

    pub fn action_counts(&self) -> Vec<(Action, usize)> {
        Action::ALL
            .iter()
            .map(|&a| (a, self.sequences.iter().filter(|s| s.action == a).count()))
            .filter(|&(_, c)| c > 0)
            .collect()
    }
}

/// Index of one training sample: a sequence and the frame whose targets
/// it carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleRef {
    pub sequence: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    /// Renders `n_sequences` sequences cycling through `actions`.
    pub fn generate(config: &SynthConfig, n_sequences: usize, actions: &[Action], seed: u64) -> Result<Self> {
        config.validate()?;
        if n_sequences == 0 {
            return Err(Error::InvalidArgument("at least one sequence is required".into()));
        }
        if actions.is_empty() {
            return Err(Error::InvalidArgument("at least one action is required".into()));
        }
        let mut sequences = Vec::with_capacity(n_sequences);
        let mut entries = Vec::with_capacity(n_sequences);
        for index in 0..n_sequences {
            let action = actions[index % actions.len()];
            let s = sequence_seed(seed, index);
            let seq = generate_sequence(config, action, s)?;
            entries.push(SequenceEntry {
                index,
                file: format!("seq_{index:05}.bin"),
                action,
                seed: s,
                frames: seq.len(),
                occlusion_upper: seq.occlusion_rate(&UPPER_BODY),
                occlusion_lower: seq.occlusion_rate(&LOWER_BODY),
                offsets: offsets(&seq),
                bytes: record_len(&seq),
            });
            sequences.push(seq);
        }
        Ok(Self {
            manifest: DatasetManifest { schema_version: DATASET_VERSION, seed, config: config.clone(), sequences: entries },
            sequences,
        })
    }

    /// Windows of `context` frames ending at every frame that has enough
    /// history, sequence-major.
    pub fn sample_refs(&self, context: usize) -> Vec<SampleRef> {
        self.sequences
            .iter()
            .enumerate()
            .flat_map(|(sequence, s)| (context.saturating_sub(1)..s.len()).map(move |end| SampleRef { sequence, end }))
            .collect()
    }

    pub fn sample(&self, r: SampleRef, window: usize) -> Result<Sample> {
        self.sequences
            .get(r.sequence)
            .ok_or_else(|| Error::InvalidArgument(format!("no sequence {}", r.sequence)))?
            .sample(r.end, window)
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (entry, seq) in self.manifest.sequences.iter().zip(&self.sequences) {
            let path = dir.join(&entry.file);
            std::fs::write(&path, encode_record(seq)).map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.schema_version != DATASET_VERSION {
            return Err(Error::Dataset(format!(
                "manifest version {} (expected {DATASET_VERSION})",
                manifest.schema_version
            )));
        }
        manifest.config.validate()?;
        let mut sequences = Vec::with_capacity(manifest.sequences.len());
        for entry in &manifest.sequences {
            let path = dir.join(&entry.file);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let seq = decode_record(&bytes, &manifest.config)?;
            if seq.action != entry.action || offsets(&seq) != entry.offsets || bytes.len() as u64 != entry.bytes {
                return Err(Error::Dataset(format!("{} does not match its manifest entry", entry.file)));
            }
            sequences.push(seq);
        }
        Ok(Self { manifest, sequences })
    }
}

/// Generates a dataset and writes it to `out_dir`.
pub fn generate_dataset(config: &SynthConfig, n_sequences: usize, actions: &[Action], seed: u64, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let ds = Dataset::generate(config, n_sequences, actions, seed)?;
    ds.write(out_dir)?;
    Ok(ds.manifest)
}

fn offsets(seq: &Sequence) -> BlockOffsets {
    let frames = HEADER_BYTES;
    let heatmaps = frames + 8 * seq.frames.numel() as u64;
    let poses = heatmaps + 8 * seq.heatmaps.numel() as u64;
    let flags = poses + 8 * seq.poses.numel() as u64;
    BlockOffsets { frames, heatmaps, poses, flags }
}

fn record_len(seq: &Sequence) -> u64 {
    offsets(seq).flags + 8 * (seq.occluded.len() * seq.occluded[0].len()) as u64
}

fn encode_record(seq: &Sequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(record_len(seq) as usize);
    out.extend_from_slice(RECORD_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(seq.action.index() as u32).to_le_bytes());
    let fs = seq.frames.shape();
    let hs = seq.heatmaps.shape();
    for d in [fs[0], fs[1], fs[2], fs[3], hs[1], hs[2], hs[3]] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let o = offsets(seq);
    for x in [o.frames, o.heatmaps, o.poses, o.flags] {
        out.extend_from_slice(&x.to_le_bytes());
    }
    let flags = seq.occluded.iter().flatten().map(|&f| if f { 1.0 } else { 0.0 });
    for v in seq.frames.values().iter().chain(seq.heatmaps.values()).chain(seq.poses.values()).copied().chain(flags) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_record(bytes: &[u8], config: &SynthConfig) -> Result<Sequence> {
    let bad = |msg: &str| Error::Dataset(msg.to_string());
    if bytes.len() < HEADER_BYTES as usize || &bytes[..8] != RECORD_MAGIC {
        return Err(bad("not a sequence record"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
    let version = u32_at(8);
    if version != DATASET_VERSION {
        return Err(Error::Dataset(format!("record version {version} (expected {DATASET_VERSION})")));
    }
    let action = *Action::ALL.get(u32_at(12) as usize).ok_or_else(|| bad("unknown action index"))?;
    let d: Vec<usize> = (0..7).map(|k| u32_at(16 + 4 * k) as usize).collect();
    let (l, c, hh, ww, h, w, j) = (d[0], d[1], d[2], d[3], d[4], d[5], d[6]);
    if [c, hh, ww, h, w, j] != [config.channels, config.image_size[0], config.image_size[1], config.heatmap_size[0], config.heatmap_size[1], config.joints()] || l == 0 {
        return Err(bad("record dimensions differ from the dataset config"));
    }
    let o: Vec<usize> = (0..4).map(|k| u64_at(44 + 8 * k) as usize).collect();
    let sizes = [l * c * hh * ww, l * h * w * j, l * j * 3, l * j];
    let mut expected = HEADER_BYTES as usize;
    for (k, n) in sizes.iter().enumerate() {
        if o[k] != expected {
            return Err(bad("block offsets are inconsistent"));
        }
        expected += 8 * n;
    }
    if bytes.len() != expected {
        return Err(bad("record length does not match its header"));
    }
    let floats = |k: usize| -> Vec<f64> {
        bytes[o[k]..o[k] + 8 * sizes[k]]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect()
    };
    let flags = floats(3);
    Ok(Sequence {
        action,
        frames: Tensor::new(vec![l, c, hh, ww], floats(0))?,
        heatmaps: Tensor::new(vec![l, h, w, j], floats(1))?,
        poses: Tensor::new(vec![l, j, 3], floats(2))?,
        occluded: flags.chunks(j).map(|f| f.iter().map(|&x| x != 0.0).collect()).collect(),
    })
}
