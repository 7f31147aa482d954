//! Synthetic clips with planted actions.
//!
//! An action of class `k` moves keypoint `a_k` next to keypoint `b_k` for the
//! duration of the segment, and adds a class-specific low-rank pattern to the
//! temporal features. The temporal pattern fades in and out around the
//! boundaries (`boundary_blur`), while the keypoint contact is sharp but
//! subject to occlusion and jitter.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evaluation::ActionSegment;
use crate::features::skeleton::*;
use crate::features::{FeatureClip, KeypointSequence};
use crate::numerics::Tensor;
use crate::rng::{derive_seed, stream_rng};

/// `(moving keypoint, target keypoint)` per class.
pub const CLASS_PAIRS: [(usize, usize); 6] = [
    (RIGHT_WRIST, HEAD),
    (LEFT_WRIST, HEAD),
    (RIGHT_WRIST, LEFT_WRIST),
    (RIGHT_WRIST, LEFT_SHOULDER),
    (LEFT_WRIST, RIGHT_SHOULDER),
    (LEFT_WRIST, RIGHT_KNEE),
];

/// Offset of the moving keypoint from its target during contact.
const CONTACT_OFFSET: [f64; 2] = [0.015, 0.015];
/// Jitter is truncated to this magnitude per coordinate so contact distances
/// stay below 0.05 and rest distances above 0.3.
const JITTER_LIMIT: f64 = 0.008;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub clips: usize,
    /// Frames per clip after temporal striding.
    pub frames: usize,
    pub classes: usize,
    pub min_segments: usize,
    pub max_segments: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub channels: usize,
    pub width: usize,
    pub signal_rank: usize,
    pub signal_strength: f64,
    pub feature_noise: f64,
    pub keypoint_noise: f64,
    /// Per-frame, per-keypoint probability of being invisible.
    pub occlusion: f64,
    /// Frames over which the temporal signal ramps in and out.
    pub boundary_blur: usize,
    /// Source-video frames per generated frame; recorded for loaders.
    pub stride: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            clips: 200,
            frames: 64,
            classes: 3,
            min_segments: 1,
            max_segments: 3,
            min_len: 6,
            max_len: 16,
            channels: 256,
            width: 1,
            signal_rank: 2,
            signal_strength: 1.0,
            feature_noise: 0.5,
            keypoint_noise: 0.004,
            occlusion: 0.1,
            boundary_blur: 3,
            stride: 8,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(format!("generator: {m}")));
        if self.classes == 0 || self.classes > CLASS_PAIRS.len() {
            return fail(format!("classes must be in 1..={}, got {}", CLASS_PAIRS.len(), self.classes));
        }
        if self.min_segments == 0 || self.min_segments > self.max_segments {
            return fail(format!(
                "segment count range {}..={} is empty or zero",
                self.min_segments, self.max_segments
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return fail(format!("segment length range {}..={} is invalid", self.min_len, self.max_len));
        }
        if self.channels == 0 || self.channels % 2 != 0 || self.width == 0 {
            return fail(format!("channels must be even and positive, got {}", self.channels));
        }
        if self.signal_rank == 0 || self.signal_rank > self.channels {
            return fail(format!("signal rank {} out of range", self.signal_rank));
        }
        if !(0.0..1.0).contains(&self.occlusion) {
            return fail(format!("occlusion probability {} out of range", self.occlusion));
        }
        if self.stride == 0 {
            return fail("stride must be positive".into());
        }
        // The tightest packing: every segment at minimum length, one-frame gaps.
        let needed = self.max_segments * self.min_len + self.max_segments.saturating_sub(1);
        if needed > self.frames {
            return Err(Error::InvalidArgument(format!(
                "generator: {} segments of length ≥ {} cannot fit in {} frames",
                self.max_segments, self.min_len, self.frames
            )));
        }
        Ok(())
    }

    /// Orthonormal-ish `C × rank` basis per class, shared by every clip.
    fn class_bases(&self, seed: u64) -> Vec<Vec<Vec<f64>>> {
        let mut rng = stream_rng(seed, "class-basis", 0);
        let normal = Normal::new(0.0, 1.0).unwrap();
        (0..self.classes)
            .map(|_| {
                (0..self.signal_rank)
                    .map(|_| {
                        let v: Vec<f64> = (0..self.channels).map(|_| normal.sample(&mut rng)).collect();
                        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                        // Unit RMS per channel.
                        let s = (self.channels as f64).sqrt() / norm;
                        v.into_iter().map(|x| x * s).collect()
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub video_id: String,
    pub keypoints: KeypointSequence,
    pub temporal_features: FeatureClip,
    pub ground_truth: Vec<ActionSegment>,
    pub rng_seed: u64,
}

impl SyntheticClip {
    pub fn frames(&self) -> usize {
        self.keypoints.frames()
    }
}

/// Segment classes for every clip. Counts are drawn per clip; the classes
/// are a shuffled round-robin deck, so the dataset histogram is balanced to
/// within one segment per class.
fn class_plan(spec: &GeneratorSpec, seed: u64) -> Vec<Vec<usize>> {
    let counts: Vec<usize> = (0..spec.clips)
        .map(|i| stream_rng(seed, "layout", i as u64).random_range(spec.min_segments..=spec.max_segments))
        .collect();
    let total: usize = counts.iter().sum();
    let mut deck: Vec<usize> = (0..total).map(|s| s % spec.classes).collect();
    deck.shuffle(&mut stream_rng(seed, "classes", 0));
    let mut rest = deck.as_slice();
    counts
        .into_iter()
        .map(|n| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head.to_vec()
        })
        .collect()
}

fn place_segments<R: Rng>(spec: &GeneratorSpec, classes: &[usize], rng: &mut R) -> Vec<(usize, usize, usize)> {
    let count = classes.len();
    loop {
        let lens: Vec<usize> = (0..count).map(|_| rng.random_range(spec.min_len..=spec.max_len)).collect();
        let used: usize = lens.iter().sum::<usize>() + count - 1;
        if used > spec.frames {
            continue;
        }
        // Spread the slack over count+1 gaps.
        let slack = spec.frames - used;
        let mut cuts: Vec<usize> = (0..count).map(|_| rng.random_range(0..=slack)).collect();
        cuts.sort_unstable();
        let mut out = Vec::with_capacity(count);
        let mut cursor = 0;
        let mut prev_cut = 0;
        for (i, len) in lens.into_iter().enumerate() {
            cursor += cuts[i] - prev_cut;
            prev_cut = cuts[i];
            out.push((cursor, cursor + len, classes[i]));
            cursor += len + 1;
        }
        return out;
    }
}

fn jitter<R: Rng>(rng: &mut R, normal: &Normal<f64>) -> f64 {
    normal.sample(rng).clamp(-JITTER_LIMIT, JITTER_LIMIT)
}

/// Generate one clip from its own seed; `bases` come from the dataset seed.
fn build_clip(
    spec: &GeneratorSpec,
    bases: &[Vec<Vec<f64>>],
    classes: &[usize],
    index: usize,
    clip_seed: u64,
) -> Result<SyntheticClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(clip_seed);
    let segments = place_segments(spec, classes, &mut rng);
    let t_len = spec.frames;
    let j = NUM_KEYPOINTS;

    let kp_noise = Normal::new(0.0, spec.keypoint_noise.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut points = Vec::with_capacity(t_len * j);
    let mut visible = Vec::with_capacity(t_len * j);
    for t in 0..t_len {
        let mut frame: Vec<[f64; 2]> = REST_POSE
            .iter()
            .map(|p| [p[0] + jitter(&mut rng, &kp_noise), p[1] + jitter(&mut rng, &kp_noise)])
            .collect();
        if let Some(&(_, _, class)) = segments.iter().find(|(s, e, _)| (*s..*e).contains(&t)) {
            let (a, b) = CLASS_PAIRS[class];
            frame[a] = [
                frame[b][0] + CONTACT_OFFSET[0] + jitter(&mut rng, &kp_noise),
                frame[b][1] + CONTACT_OFFSET[1] + jitter(&mut rng, &kp_noise),
            ];
        }
        for p in frame {
            points.push([p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]);
            visible.push(rng.random::<f64>() >= spec.occlusion);
        }
    }
    let keypoints = KeypointSequence::new(t_len, points, visible)?;

    // Temporal features: class pattern with a soft envelope plus noise.
    let c = spec.channels;
    let l = spec.width;
    let mut amplitude = vec![vec![0.0; c]; t_len];
    let blur = spec.boundary_blur as f64;
    for &(s, e, class) in &segments {
        let coeffs: Vec<f64> = (0..spec.signal_rank).map(|_| rng.random_range(0.7..1.3)).collect();
        let norm = (coeffs.iter().map(|x| x * x).sum::<f64>()).sqrt();
        let lo = s.saturating_sub(spec.boundary_blur);
        let hi = (e + spec.boundary_blur).min(t_len);
        for (t, amp) in amplitude.iter_mut().enumerate().take(hi).skip(lo) {
            let outside = if t < s {
                (s - t) as f64
            } else if t >= e {
                (t + 1 - e) as f64
            } else {
                0.0
            };
            let envelope = 1.0 - outside / (blur + 1.0);
            for (r, basis) in bases[class].iter().enumerate() {
                let w = spec.signal_strength * envelope * coeffs[r] / norm;
                for (a, &u) in amp.iter_mut().zip(basis) {
                    *a += w * u;
                }
            }
        }
    }
    let feat_noise = Normal::new(0.0, spec.feature_noise.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut data = Vec::with_capacity(t_len * c * l);
    for amp in &amplitude {
        for &a in amp {
            for _ in 0..l {
                data.push(a + feat_noise.sample(&mut rng));
            }
        }
    }
    let temporal_features = FeatureClip::new(Tensor::new(vec![t_len, c, l], data)?)?;

    let ground_truth = segments
        .iter()
        .map(|&(s, e, class)| ActionSegment::ground_truth(s as f64, e as f64, class))
        .collect();
    Ok(SyntheticClip {
        video_id: format!("clip_{index:05}"),
        keypoints,
        temporal_features,
        ground_truth,
        rng_seed: clip_seed,
    })
}

/// Clip `index` of the dataset defined by `(spec, seed)`.
pub fn generate_clip(spec: &GeneratorSpec, seed: u64, index: usize) -> Result<SyntheticClip> {
    spec.validate()?;
    if index >= spec.clips {
        return Err(Error::InvalidArgument(format!("clip index {index} outside 0..{}", spec.clips)));
    }
    let bases = spec.class_bases(seed);
    let plan = class_plan(spec, seed);
    build_clip(spec, &bases, &plan[index], index, derive_seed(seed, "data", index as u64))
}

/// Deterministic in `(spec, seed)`; clips are generated in parallel from
/// per-clip derived seeds.
pub fn generate_synthetic_dataset(spec: &GeneratorSpec, seed: u64) -> Result<Vec<SyntheticClip>> {
    spec.validate()?;
    let bases = spec.class_bases(seed);
    let plan = class_plan(spec, seed);
    (0..spec.clips)
        .into_par_iter()
        .map(|i| build_clip(spec, &bases, &plan[i], i, derive_seed(seed, "data", i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::pairwise_distances;

    fn small_spec() -> GeneratorSpec {
        GeneratorSpec {
            clips: 8,
            frames: 48,
            channels: 16,
            ..GeneratorSpec::default()
        }
    }

    #[test]
    fn noiseless_contact_is_exactly_inside_segment() {
        let spec = GeneratorSpec {
            keypoint_noise: 0.0,
            feature_noise: 0.0,
            occlusion: 0.0,
            min_segments: 1,
            max_segments: 1,
            ..small_spec()
        };
        for i in 0..5 {
            let clip = generate_clip(&spec, 11, i).unwrap();
            let seg = clip.ground_truth[0];
            let (a, b) = CLASS_PAIRS[seg.class];
            let d = pairwise_distances(&clip.keypoints);
            let j = NUM_KEYPOINTS;
            for t in 0..spec.frames {
                let dist = d.data()[t * j * j + a * j + b];
                let inside = (t as f64) >= seg.start && (t as f64) < seg.end;
                if inside {
                    assert!(dist < 0.05, "frame {t}: {dist}");
                } else {
                    assert!(dist >= 0.3, "frame {t}: {dist}");
                }
            }
        }
    }

    #[test]
    fn jittered_contact_respects_thresholds() {
        let spec = GeneratorSpec { occlusion: 0.0, keypoint_noise: 0.05, ..small_spec() };
        for clip in generate_synthetic_dataset(&spec, 3).unwrap() {
            let d = pairwise_distances(&clip.keypoints);
            let j = NUM_KEYPOINTS;
            for seg in &clip.ground_truth {
                let (a, b) = CLASS_PAIRS[seg.class];
                for t in 0..spec.frames {
                    let dist = d.data()[t * j * j + a * j + b];
                    let in_any_same_pair = clip.ground_truth.iter().any(|g| {
                        CLASS_PAIRS[g.class] == (a, b) && (t as f64) >= g.start && (t as f64) < g.end
                    });
                    if in_any_same_pair {
                        assert!(dist < 0.05);
                    } else if !clip.ground_truth.iter().any(|g| (t as f64) >= g.start && (t as f64) < g.end) {
                        assert!(dist >= 0.3);
                    }
                }
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_synthetic_dataset(&small_spec(), 42).unwrap();
        let b = generate_synthetic_dataset(&small_spec(), 42).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(&small_spec(), 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn segments_are_valid_and_disjoint() {
        let spec = small_spec();
        for clip in generate_synthetic_dataset(&spec, 5).unwrap() {
            let gt = &clip.ground_truth;
            assert!((spec.min_segments..=spec.max_segments).contains(&gt.len()));
            for (i, s) in gt.iter().enumerate() {
                assert!(0.0 <= s.start && s.start < s.end && s.end <= spec.frames as f64);
                for o in &gt[i + 1..] {
                    assert!(s.end <= o.start || o.end <= s.start);
                }
            }
        }
    }

    #[test]
    fn class_histogram_is_near_uniform() {
        let spec = GeneratorSpec { clips: 200, ..small_spec() };
        let clips = generate_synthetic_dataset(&spec, 9).unwrap();
        let mut counts = [0usize; 3];
        for c in &clips {
            for s in &c.ground_truth {
                counts[s.class] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        let expected = total as f64 / 3.0;
        for &n in &counts {
            assert!((n as f64 - expected).abs() <= 0.1 * expected, "{counts:?}");
        }
    }

    #[test]
    fn impossible_packing_is_an_error() {
        let spec = GeneratorSpec { frames: 10, min_len: 6, max_segments: 2, ..small_spec() };
        assert!(generate_synthetic_dataset(&spec, 0).is_err());
    }
}
