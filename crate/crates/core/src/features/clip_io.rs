//! On-disk clip layout: one directory per clip holding `keypoints.stpt`,
//! `features.stpt` and `annotations.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::ActionSegment;
use crate::features::{FeatureClip, KeypointSequence, SyntheticClip};
use crate::numerics::io::{load_tensor, save_tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub start: i64,
    pub end: i64,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    pub video_id: String,
    pub frames: usize,
    pub segments: Vec<SegmentRecord>,
}

pub fn write_clip(dir: &Path, clip: &SyntheticClip) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_tensor(&dir.join("keypoints.stpt"), &clip.keypoints.to_tensor())?;
    save_tensor(&dir.join("features.stpt"), clip.temporal_features.tensor())?;
    let ann = Annotations {
        video_id: clip.video_id.clone(),
        frames: clip.frames(),
        segments: clip
            .ground_truth
            .iter()
            .map(|s| SegmentRecord {
                start: s.start.round() as i64,
                end: s.end.round() as i64,
                class: s.class,
            })
            .collect(),
    };
    let mut json = serde_json::to_string_pretty(&ann)?;
    json.push('\n');
    fs::write(dir.join("annotations.json"), json)?;
    Ok(())
}

pub fn read_clip(dir: &Path) -> Result<SyntheticClip> {
    let keypoints = KeypointSequence::from_tensor(&load_tensor(&dir.join("keypoints.stpt"))?)?;
    let temporal_features = FeatureClip::new(load_tensor(&dir.join("features.stpt"))?)?;
    let ann: Annotations = serde_json::from_str(&fs::read_to_string(dir.join("annotations.json"))?)?;
    if ann.frames != keypoints.frames() || ann.frames != temporal_features.frames() {
        return Err(Error::Format(format!(
            "{}: annotation frames {} disagree with keypoints ({}) / features ({})",
            dir.display(),
            ann.frames,
            keypoints.frames(),
            temporal_features.frames()
        )));
    }
    let mut ground_truth = Vec::with_capacity(ann.segments.len());
    for s in &ann.segments {
        if s.start < 0 || s.start >= s.end || s.end > ann.frames as i64 {
            return Err(Error::Format(format!(
                "{}: segment {}..{} outside 0..{}",
                dir.display(),
                s.start,
                s.end,
                ann.frames
            )));
        }
        ground_truth.push(ActionSegment::ground_truth(s.start as f64, s.end as f64, s.class));
    }
    Ok(SyntheticClip {
        video_id: ann.video_id,
        keypoints,
        temporal_features,
        ground_truth,
        rng_seed: 0,
    })
}

/// Write every clip to `root/<video_id>/`.
pub fn write_dataset(root: &Path, clips: &[SyntheticClip]) -> Result<()> {
    fs::create_dir_all(root)?;
    for clip in clips {
        write_clip(&root.join(&clip.video_id), clip)?;
    }
    Ok(())
}

/// Read every clip directory under `root`, in name order.
pub fn read_dataset(root: &Path) -> Result<Vec<SyntheticClip>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("annotations.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Input(format!("no clips found under {}", root.display())));
    }
    dirs.iter().map(|d| read_clip(d)).collect()
}
