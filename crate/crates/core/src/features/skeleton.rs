//! The fixed 13-point upper-body/leg skeleton used for distance features.

use crate::numerics::Tensor;

pub const NUM_KEYPOINTS: usize = 13;

pub const HEAD: usize = 0;
pub const NECK: usize = 1;
pub const RIGHT_SHOULDER: usize = 2;
pub const RIGHT_ELBOW: usize = 3;
pub const RIGHT_WRIST: usize = 4;
pub const LEFT_SHOULDER: usize = 5;
pub const LEFT_ELBOW: usize = 6;
pub const LEFT_WRIST: usize = 7;
pub const PELVIS: usize = 8;
pub const RIGHT_HIP: usize = 9;
pub const RIGHT_KNEE: usize = 10;
pub const LEFT_HIP: usize = 11;
pub const LEFT_KNEE: usize = 12;

pub const KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "head",
    "neck",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "pelvis",
    "right_hip",
    "right_knee",
    "left_hip",
    "left_knee",
];

/// Bones of the skeleton tree (12 edges over 13 nodes).
pub const SKELETON_EDGES: [(usize, usize); NUM_KEYPOINTS - 1] = [
    (HEAD, NECK),
    (NECK, RIGHT_SHOULDER),
    (RIGHT_SHOULDER, RIGHT_ELBOW),
    (RIGHT_ELBOW, RIGHT_WRIST),
    (NECK, LEFT_SHOULDER),
    (LEFT_SHOULDER, LEFT_ELBOW),
    (LEFT_ELBOW, LEFT_WRIST),
    (NECK, PELVIS),
    (PELVIS, RIGHT_HIP),
    (RIGHT_HIP, RIGHT_KNEE),
    (PELVIS, LEFT_HIP),
    (LEFT_HIP, LEFT_KNEE),
];

/// Resting pose in normalized image coordinates.
pub(crate) const REST_POSE: [[f64; 2]; NUM_KEYPOINTS] = [
    [0.50, 0.15],
    [0.50, 0.25],
    [0.38, 0.28],
    [0.32, 0.45],
    [0.30, 0.60],
    [0.62, 0.28],
    [0.68, 0.45],
    [0.70, 0.60],
    [0.50, 0.60],
    [0.43, 0.62],
    [0.42, 0.85],
    [0.57, 0.62],
    [0.58, 0.85],
];

/// `D^{-1/2} (A + I) D^{-1/2}` for an undirected edge list over `n` nodes.
pub fn normalized_adjacency(n: usize, edges: &[(usize, usize)]) -> Tensor {
    let mut a = Tensor::identity(n);
    {
        let d = a.data_mut();
        for &(i, j) in edges {
            d[i * n + j] = 1.0;
            d[j * n + i] = 1.0;
        }
    }
    let degree: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum()).collect();
    let d = a.data_mut();
    for i in 0..n {
        for j in 0..n {
            d[i * n + j] /= (degree[i] * degree[j]).sqrt();
        }
    }
    a
}

/// Normalized adjacency of the 13-point skeleton.
pub fn skeleton_adjacency() -> Tensor {
    normalized_adjacency(NUM_KEYPOINTS, &SKELETON_EDGES)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skeleton_is_a_spanning_tree() {
        let mut parent: Vec<usize> = (0..NUM_KEYPOINTS).collect();
        fn find(p: &mut Vec<usize>, x: usize) -> usize {
            if p[x] != x {
                let r = find(p, p[x]);
                p[x] = r;
            }
            p[x]
        }
        for &(a, b) in &SKELETON_EDGES {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            assert_ne!(ra, rb, "cycle through {a}-{b}");
            parent[ra] = rb;
        }
        let root = find(&mut parent, 0);
        assert!((0..NUM_KEYPOINTS).all(|i| find(&mut parent, i) == root));
    }

    #[test]
    fn adjacency_is_symmetric_with_positive_diagonal() {
        let a = skeleton_adjacency();
        for i in 0..NUM_KEYPOINTS {
            assert!(a.at2(i, i) > 0.0);
            for j in 0..NUM_KEYPOINTS {
                assert_eq!(a.at2(i, j), a.at2(j, i));
            }
        }
        // Head has one neighbour: self-loop weight 1/(2·2) normalized → 1/2.
        assert!((a.at2(HEAD, HEAD) - 0.5).abs() < 1e-15);
    }
}
