//! Multi-person 2D pose ingestion: keypoint types, pose filling,
//! normalization, part partition, frame sampling, and dataset files.
//!
//! A detector writes one record per video as line-delimited JSON; each frame
//! is a list of persons, each person 14 `[x, y, confidence]` triples in
//! canonical order with `null` for missing keypoints. Confidences are parsed
//! and ignored downstream.

pub mod synth;

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PsrnError, Result};
use crate::objectstream::{load_feature_map, FeatureMap};

pub const KEYPOINT_COUNT: usize = 14;

/// Canonical keypoint order within a pose.
pub const KEYPOINT_NAMES: [&str; KEYPOINT_COUNT] = [
    "head_top", "neck", "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle",
];

pub mod kp {
    pub const HEAD_TOP: usize = 0;
    pub const NECK: usize = 1;
    pub const R_SHOULDER: usize = 2;
    pub const R_ELBOW: usize = 3;
    pub const R_WRIST: usize = 4;
    pub const L_SHOULDER: usize = 5;
    pub const L_ELBOW: usize = 6;
    pub const L_WRIST: usize = 7;
    pub const R_HIP: usize = 8;
    pub const R_KNEE: usize = 9;
    pub const R_ANKLE: usize = 10;
    pub const L_HIP: usize = 11;
    pub const L_KNEE: usize = 12;
    pub const L_ANKLE: usize = 13;
}

/// One detected joint. A missing keypoint is exactly `(0, 0)` with
/// `present = false`; the numeric pipeline sees only the coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub present: bool,
}

impl Keypoint {
    pub fn at(x: f64, y: f64) -> Self {
        Keypoint { x, y, present: true }
    }

    pub fn missing() -> Self {
        Keypoint {
            x: 0.0,
            y: 0.0,
            present: false,
        }
    }
}

/// Exactly 14 keypoints in canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub keypoints: [Keypoint; KEYPOINT_COUNT],
}

impl Pose {
    /// All-(0,0) virtual pose used to pad absent persons.
    pub fn virtual_pose() -> Self {
        Pose {
            keypoints: [Keypoint::missing(); KEYPOINT_COUNT],
        }
    }

    pub fn is_virtual(&self) -> bool {
        self.keypoints.iter().all(|k| !k.present)
    }
}

/// Per-video pose detections, ordered as in the source video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSequence {
    pub video_id: String,
    pub label: Option<usize>,
    pub width: u32,
    pub height: u32,
    /// Frames hold the detected poses (up to N detections before filling,
    /// exactly N after).
    pub frames: Vec<Vec<Pose>>,
}

/// Five index groups over the 14 keypoints. The paper's part dimensions
/// (8, 6, 6, 6, 6) sum to 32 > 28, so two keypoints belong to two parts:
/// the shoulders sit in both the head group and their arm group.
#[derive(Debug, Clone, PartialEq)]
pub struct PartPartition {
    groups: [Vec<usize>; 5],
}

pub const PART_NAMES: [&str; 5] = ["head", "r_arm", "l_arm", "r_leg", "l_leg"];
pub const PART_DIMS: [usize; 5] = [8, 6, 6, 6, 6];

impl PartPartition {
    /// head = {head_top, neck, r_shoulder, l_shoulder}; arms and legs are
    /// {shoulder, elbow, wrist} and {hip, knee, ankle}.
    pub fn canonical() -> Self {
        use kp::*;
        PartPartition {
            groups: [
                vec![HEAD_TOP, NECK, R_SHOULDER, L_SHOULDER],
                vec![R_SHOULDER, R_ELBOW, R_WRIST],
                vec![L_SHOULDER, L_ELBOW, L_WRIST],
                vec![R_HIP, R_KNEE, R_ANKLE],
                vec![L_HIP, L_KNEE, L_ANKLE],
            ],
        }
    }

    pub fn new(groups: [Vec<usize>; 5]) -> Result<Self> {
        let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
        if sizes != [4, 3, 3, 3, 3] {
            return Err(PsrnError::Config(format!(
                "part group sizes must be (4,3,3,3,3), got {sizes:?}"
            )));
        }
        if groups.iter().flatten().any(|&i| i >= KEYPOINT_COUNT) {
            return Err(PsrnError::Config(
                "part group index out of keypoint range".to_string(),
            ));
        }
        Ok(PartPartition { groups })
    }

    pub fn groups(&self) -> &[Vec<usize>; 5] {
        &self.groups
    }
}

/// Largest per-frame detection count over the whole dataset: the common
/// person number N.
pub fn scan_max_persons(dataset: &[PoseSequence]) -> Result<usize> {
    let max = dataset
        .iter()
        .flat_map(|s| s.frames.iter())
        .map(Vec::len)
        .max()
        .unwrap_or(0);
    if max == 0 {
        return Err(PsrnError::EmptyDataset);
    }
    Ok(max)
}

/// Pads every frame to exactly `n` poses with all-(0,0) virtual poses
/// appended after the real detections. Already-complete frames pass through
/// untouched, so the operation is idempotent.
pub fn fill_poses(sequence: &PoseSequence, n: usize) -> Result<PoseSequence> {
    let mut out = sequence.clone();
    for (frame_idx, frame) in out.frames.iter_mut().enumerate() {
        if frame.len() > n {
            return Err(PsrnError::Capacity {
                video_id: sequence.video_id.clone(),
                frame: frame_idx,
                found: frame.len(),
                capacity: n,
            });
        }
        while frame.len() < n {
            frame.push(Pose::virtual_pose());
        }
    }
    Ok(out)
}

/// Rescales pixel coordinates into `[0, 1]` by the image dimensions,
/// clamping detections marginally outside the frame. Absent keypoints stay
/// at `(0, 0)`.
pub fn normalize_positions(sequence: &PoseSequence) -> Result<PoseSequence> {
    if sequence.width == 0 || sequence.height == 0 {
        return Err(PsrnError::Format {
            what: format!("video {:?}", sequence.video_id),
            details: format!(
                "nonpositive image dimensions {}x{}",
                sequence.width, sequence.height
            ),
        });
    }
    let (w, h) = (f64::from(sequence.width), f64::from(sequence.height));
    let mut out = sequence.clone();
    for frame in &mut out.frames {
        for pose in frame {
            for k in &mut pose.keypoints {
                if k.present {
                    k.x = (k.x / w).clamp(0.0, 1.0);
                    k.y = (k.y / h).clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(out)
}

/// Concatenates each part group's keypoints as `(x, y)` pairs in canonical
/// order, yielding vectors of dimension (8, 6, 6, 6, 6).
pub fn partition_parts(pose: &Pose, partition: &PartPartition) -> [Vec<f64>; 5] {
    partition.groups().clone().map(|group| {
        let mut v = Vec::with_capacity(group.len() * 2);
        for idx in group {
            v.push(pose.keypoints[idx].x);
            v.push(pose.keypoints[idx].y);
        }
        v
    })
}

/// Uniformly samples `t` frames, without replacement when the video is long
/// enough and with replacement otherwise, sorted ascending either way. Also
/// draws the index (into the sampled list) of the frame the object stream
/// would use.
pub fn sample_frames(
    sequence: &PoseSequence,
    t: usize,
    rng: &mut impl Rng,
) -> Result<(PoseSequence, usize)> {
    if sequence.frames.is_empty() {
        return Err(PsrnError::EmptySequence(sequence.video_id.clone()));
    }
    assert!(t > 0, "sample length must be positive");
    let total = sequence.frames.len();
    let mut indices: Vec<usize> = if total >= t {
        rand::seq::index::sample(rng, total, t).into_vec()
    } else {
        (0..t).map(|_| rng.random_range(0..total)).collect()
    };
    indices.sort_unstable();
    let object_frame = rng.random_range(0..t);
    let frames = indices.iter().map(|&i| sequence.frames[i].clone()).collect();
    Ok((
        PoseSequence {
            video_id: sequence.video_id.clone(),
            label: sequence.label,
            width: sequence.width,
            height: sequence.height,
            frames,
        },
        object_frame,
    ))
}

// --- detection and manifest files ---

#[derive(Serialize, Deserialize)]
struct PoseRecord {
    video_id: String,
    label: Option<i64>,
    width: u32,
    height: u32,
    /// frames -> persons -> 14 keypoints, each `[x, y, confidence]` or null.
    frames: Vec<Vec<Vec<Option<[f64; 3]>>>>,
}

fn record_to_sequence(record: PoseRecord, path: &Path, line: usize) -> Result<PoseSequence> {
    let label = match record.label {
        None => None,
        Some(l) if l >= 0 => Some(l as usize),
        Some(l) => {
            return Err(PsrnError::Format {
                what: format!("{} line {line}", path.display()),
                details: format!("negative label {l}"),
            })
        }
    };
    let mut frames = Vec::with_capacity(record.frames.len());
    for (fi, frame) in record.frames.into_iter().enumerate() {
        let mut poses = Vec::with_capacity(frame.len());
        for person in frame {
            if person.len() != KEYPOINT_COUNT {
                return Err(PsrnError::Format {
                    what: format!("{} line {line}", path.display()),
                    details: format!(
                        "frame {fi}: person has {} keypoints, expected {KEYPOINT_COUNT}",
                        person.len()
                    ),
                });
            }
            let mut pose = Pose::virtual_pose();
            for (ki, entry) in person.into_iter().enumerate() {
                if let Some([x, y, _conf]) = entry {
                    pose.keypoints[ki] = Keypoint::at(x, y);
                }
            }
            poses.push(pose);
        }
        frames.push(poses);
    }
    Ok(PoseSequence {
        video_id: record.video_id,
        label,
        width: record.width,
        height: record.height,
        frames,
    })
}

fn sequence_to_record(seq: &PoseSequence) -> PoseRecord {
    PoseRecord {
        video_id: seq.video_id.clone(),
        label: seq.label.map(|l| l as i64),
        width: seq.width,
        height: seq.height,
        frames: seq
            .frames
            .iter()
            .map(|frame| {
                frame
                    .iter()
                    .map(|pose| {
                        pose.keypoints
                            .iter()
                            .map(|k| k.present.then_some([k.x, k.y, 1.0]))
                            .collect()
                    })
                    .collect()
            })
            .collect(),
    }
}

/// Reads a line-delimited JSON detection file (one record per video).
pub fn read_pose_file(path: &Path) -> Result<Vec<PoseSequence>> {
    let file = fs::File::open(path).map_err(|e| PsrnError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| PsrnError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PoseRecord =
            serde_json::from_str(&line).map_err(|e| PsrnError::json(path, e))?;
        out.push(record_to_sequence(record, path, i + 1)?);
    }
    Ok(out)
}

pub fn write_pose_file(path: &Path, sequences: &[PoseSequence]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| PsrnError::io(path, e))?;
    for seq in sequences {
        let record = sequence_to_record(seq);
        let line = serde_json::to_string(&record).map_err(|e| PsrnError::json(path, e))?;
        writeln!(file, "{line}").map_err(|e| PsrnError::io(path, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = PsrnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(PsrnError::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// One dataset entry; paths are relative to the manifest file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    pub split: Split,
    pub pose_path: String,
    pub featmap_path: String,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| PsrnError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PsrnError::json(path, e))
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let text =
        serde_json::to_string_pretty(entries).map_err(|e| PsrnError::json(path, e))?;
    fs::write(path, text).map_err(|e| PsrnError::io(path, e))
}

/// A fully loaded dataset: raw (pixel-space) pose sequences plus the
/// per-video feature map.
#[derive(Debug, Clone)]
pub struct LoadedVideo {
    pub seq: PoseSequence,
    pub featmap: FeatureMap,
    pub split: Split,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub videos: Vec<LoadedVideo>,
}

/// Loads every video named by a manifest, reading each pose file once.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let entries = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut pose_cache: HashMap<PathBuf, HashMap<String, PoseSequence>> = HashMap::new();
    let mut videos = Vec::with_capacity(entries.len());
    for entry in &entries {
        let pose_path = base.join(&entry.pose_path);
        if !pose_cache.contains_key(&pose_path) {
            let seqs = read_pose_file(&pose_path)?;
            pose_cache.insert(
                pose_path.clone(),
                seqs.into_iter().map(|s| (s.video_id.clone(), s)).collect(),
            );
        }
        let seq = pose_cache[&pose_path]
            .get(&entry.video_id)
            .cloned()
            .ok_or_else(|| PsrnError::Data(format!(
                "video {:?} not found in {}",
                entry.video_id,
                pose_path.display()
            )))?;
        let featmap = load_feature_map(&base.join(&entry.featmap_path))?;
        videos.push(LoadedVideo {
            seq,
            featmap,
            split: entry.split,
        });
    }
    Ok(Dataset { videos })
}
