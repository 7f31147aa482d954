use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{accuracy, dataset_ao_score, overlap_score, ActionSegment, AoOptions};

/// One line of a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub video_id: String,
    pub start: f64,
    pub end: f64,
    pub class: usize,
    pub score: f64,
}

impl PredictionRecord {
    pub fn new(video_id: &str, s: &ActionSegment) -> Self {
        Self { video_id: video_id.to_string(), start: s.start, end: s.end, class: s.class, score: s.score }
    }

    pub fn segment(&self) -> ActionSegment {
        ActionSegment::new(self.start, self.end, self.class, self.score)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: usize,
    pub support: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub ao_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ao_score: f64,
    pub top1: f64,
    pub mean1: f64,
    pub clips: usize,
    pub ground_truths: usize,
    pub predictions: usize,
    pub per_class: Vec<ClassRow>,
}

/// For each ground truth, the class of the prediction overlapping it most
/// (any class; ties go to the higher score), or `None` when nothing overlaps.
pub fn per_gt_classes(predictions: &[ActionSegment], gts: &[ActionSegment]) -> Vec<Option<usize>> {
    gts.iter()
        .map(|g| {
            let mut best: Option<(f64, f64, usize)> = None;
            for p in predictions {
                let os = overlap_score(p, g);
                if os <= 0.0 {
                    continue;
                }
                if best.is_none_or(|(bo, bs, _)| os > bo || (os == bo && p.score > bs)) {
                    best = Some((os, p.score, p.class));
                }
            }
            best.map(|(_, _, c)| c)
        })
        .collect()
}

impl MetricsReport {
    /// `clips` pairs each clip's predictions with its ground truth.
    pub fn compute(
        clips: &[(Vec<ActionSegment>, Vec<ActionSegment>)],
        classes: usize,
        opts: AoOptions,
    ) -> Result<Self> {
        let mut predicted = Vec::new();
        let mut truth = Vec::new();
        for (preds, gts) in clips {
            for (g, c) in gts.iter().zip(per_gt_classes(preds, gts)) {
                truth.push(g.class);
                // A ground truth nothing overlaps counts as a miss.
                predicted.push(c.unwrap_or(usize::MAX));
            }
        }
        if truth.is_empty() {
            return Err(Error::Input("metrics: no ground-truth segments".into()));
        }
        let (top1, mean1) = accuracy(&predicted, &truth, classes)?;
        let per_class = (0..classes)
            .map(|k| {
                let support = truth.iter().filter(|&&t| t == k).count();
                let correct = truth.iter().zip(&predicted).filter(|(&t, &p)| t == k && p == k).count();
                let class_clips: Vec<_> = clips
                    .iter()
                    .map(|(p, g)| {
                        let keep = |s: &&ActionSegment| s.class == k;
                        (p.iter().filter(keep).copied().collect(), g.iter().filter(keep).copied().collect())
                    })
                    .collect();
                ClassRow {
                    class: k,
                    support,
                    correct,
                    accuracy: if support == 0 { 0.0 } else { correct as f64 / support as f64 },
                    ao_score: dataset_ao_score(&class_clips, opts),
                }
            })
            .collect();
        Ok(Self {
            ao_score: dataset_ao_score(clips, opts),
            top1,
            mean1,
            clips: clips.len(),
            ground_truths: truth.len(),
            predictions: clips.iter().map(|(p, _)| p.len()).sum(),
            per_class,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Per-class rows followed by an `all` summary row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["class", "support", "correct", "accuracy", "ao_score"])
            .map_err(csv_err)?;
        for r in &self.per_class {
            w.write_record([
                r.class.to_string(),
                r.support.to_string(),
                r.correct.to_string(),
                r.accuracy.to_string(),
                r.ao_score.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let correct: usize = self.per_class.iter().map(|r| r.correct).sum();
        w.write_record([
            "all".to_string(),
            self.ground_truths.to_string(),
            correct.to_string(),
            self.top1.to_string(),
            self.ao_score.to_string(),
        ])
        .map_err(csv_err)?;
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}
