use crate::error::{Error, Result};
use crate::features::skeleton::NUM_KEYPOINTS;
use crate::numerics::Tensor;

/// Distance reported for any pair involving an invisible keypoint.
pub const INVISIBLE_DISTANCE: f64 = -1.0;

/// Per-frame 2-D positions of the 13 skeleton keypoints.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSequence {
    frames: usize,
    points: Vec<[f64; 2]>,
    visible: Vec<bool>,
}

impl KeypointSequence {
    /// `points` and `visible` are frame-major, `frames × 13` entries.
    pub fn new(frames: usize, points: Vec<[f64; 2]>, visible: Vec<bool>) -> Result<Self> {
        let n = frames * NUM_KEYPOINTS;
        if points.len() != n || visible.len() != n {
            return Err(Error::Input(format!(
                "keypoint sequence of {frames} frames needs {n} points, got {} points / {} flags",
                points.len(),
                visible.len()
            )));
        }
        for (i, (p, &v)) in points.iter().zip(&visible).enumerate() {
            if v && !(p.iter().all(|c| (0.0..=1.0).contains(c))) {
                return Err(Error::Input(format!(
                    "visible keypoint {} of frame {} lies outside the unit square: {p:?}",
                    i % NUM_KEYPOINTS,
                    i / NUM_KEYPOINTS
                )));
            }
        }
        Ok(Self { frames, points, visible })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn point(&self, frame: usize, joint: usize) -> [f64; 2] {
        self.points[frame * NUM_KEYPOINTS + joint]
    }

    pub fn is_visible(&self, frame: usize, joint: usize) -> bool {
        self.visible[frame * NUM_KEYPOINTS + joint]
    }

    /// `T × 13 × 3` tensor of `(x, y, visible)`.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.points.len() * 3);
        for (p, &v) in self.points.iter().zip(&self.visible) {
            data.extend_from_slice(&[p[0], p[1], if v { 1.0 } else { 0.0 }]);
        }
        Tensor::new(vec![self.frames, NUM_KEYPOINTS, 3], data).expect("consistent shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [frames, joints, 3] = t.shape() else {
            return Err(Error::Format(format!("keypoint tensor has shape {:?}", t.shape())));
        };
        if *joints != NUM_KEYPOINTS {
            return Err(Error::Format(format!("expected {NUM_KEYPOINTS} keypoints, got {joints}")));
        }
        let (points, visible) = t
            .data()
            .chunks_exact(3)
            .map(|c| ([c[0], c[1]], c[2] != 0.0))
            .unzip();
        Self::new(*frames, points, visible)
    }
}

/// Per-frame Euclidean distance matrices, `T × 13 × 13`. Rows and columns of
/// invisible keypoints hold [`INVISIBLE_DISTANCE`].
pub fn pairwise_distances(kp: &KeypointSequence) -> Tensor {
    let j = NUM_KEYPOINTS;
    let mut data = vec![0.0; kp.frames() * j * j];
    for t in 0..kp.frames() {
        let base = t * j * j;
        for a in 0..j {
            for b in 0..j {
                data[base + a * j + b] = if kp.is_visible(t, a) && kp.is_visible(t, b) {
                    let (pa, pb) = (kp.point(t, a), kp.point(t, b));
                    (pa[0] - pb[0]).hypot(pa[1] - pb[1])
                } else {
                    INVISIBLE_DISTANCE
                };
            }
        }
    }
    Tensor::new(vec![kp.frames(), j, j], data).expect("consistent shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform(frames: usize, p: [f64; 2]) -> KeypointSequence {
        let n = frames * NUM_KEYPOINTS;
        KeypointSequence::new(frames, vec![p; n], vec![true; n]).unwrap()
    }

    #[test]
    fn identical_points_give_zero_matrix() {
        let d = pairwise_distances(&uniform(2, [0.4, 0.7]));
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn three_four_five_triangle() {
        let mut points = vec![[0.0, 0.0]; NUM_KEYPOINTS];
        points[1] = [0.6, 0.8];
        let kp = KeypointSequence::new(1, points, vec![true; NUM_KEYPOINTS]).unwrap();
        let d = pairwise_distances(&kp);
        let n = NUM_KEYPOINTS;
        assert!((d.data()[1] - 1.0).abs() < 1e-15);
        assert!((d.data()[n] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn invisible_row_and_column_are_sentinel() {
        let mut visible = vec![true; NUM_KEYPOINTS];
        visible[3] = false;
        let kp = KeypointSequence::new(1, vec![[0.5, 0.5]; NUM_KEYPOINTS], visible).unwrap();
        let d = pairwise_distances(&kp);
        for k in 0..NUM_KEYPOINTS {
            assert_eq!(d.data()[3 * NUM_KEYPOINTS + k], INVISIBLE_DISTANCE);
            assert_eq!(d.data()[k * NUM_KEYPOINTS + 3], INVISIBLE_DISTANCE);
        }
    }

    #[test]
    fn out_of_range_visible_point_is_rejected() {
        let mut points = vec![[0.5, 0.5]; NUM_KEYPOINTS];
        points[0] = [1.5, 0.5];
        assert!(KeypointSequence::new(1, points.clone(), vec![true; NUM_KEYPOINTS]).is_err());
        let mut visible = vec![true; NUM_KEYPOINTS];
        visible[0] = false;
        assert!(KeypointSequence::new(1, points, visible).is_ok());
    }

    proptest! {
        #[test]
        fn distances_symmetric_with_zero_diagonal(
            coords in proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0, proptest::bool::weighted(0.8)), NUM_KEYPOINTS * 3)
        ) {
            let points = coords.iter().map(|c| [c.0, c.1]).collect();
            let visible = coords.iter().map(|c| c.2).collect();
            let kp = KeypointSequence::new(3, points, visible).unwrap();
            let d = pairwise_distances(&kp);
            let n = NUM_KEYPOINTS;
            for t in 0..3 {
                for a in 0..n {
                    if kp.is_visible(t, a) {
                        prop_assert_eq!(d.data()[t * n * n + a * n + a], 0.0);
                    }
                    for b in 0..n {
                        prop_assert_eq!(d.data()[t * n * n + a * n + b], d.data()[t * n * n + b * n + a]);
                    }
                }
            }
        }
    }
}
