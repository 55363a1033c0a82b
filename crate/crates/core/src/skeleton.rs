//! Default graph topology for each sub-pose group (local node indices).

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::GroupId;
use crate::tensor::Tensor;

/// Wrist (0) to the four-joint chain of each finger.
pub fn hand_edges() -> Vec<(usize, usize)> {
    let mut e = Vec::with_capacity(20);
    for finger in 0..5 {
        let base = 1 + finger * 4;
        e.push((0, base));
        for j in 0..3 {
            e.push((base + j, base + j + 1));
        }
    }
    e
}

/// Local order: nose, l-ear, r-ear, l-shoulder, r-shoulder, l-elbow, r-elbow, l-wrist, r-wrist.
pub fn body_edges() -> Vec<(usize, usize)> {
    alloc::vec![(0, 1), (0, 2), (0, 3), (0, 4), (3, 4), (3, 5), (5, 7), (4, 6), (6, 8)]
}

/// Local order: nine jaw points, nose tip (9), eight inner-mouth points (10..18).
/// Star from the nose to every other node, plus the inner-mouth cycle.
pub fn face_edges() -> Vec<(usize, usize)> {
    let mut e: Vec<(usize, usize)> = (0..18).filter(|&i| i != 9).map(|i| (9, i)).collect();
    for i in 0..8 {
        e.push((10 + i, 10 + (i + 1) % 8));
    }
    e
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupEdges {
    pub lh: Vec<(usize, usize)>,
    pub rh: Vec<(usize, usize)>,
    pub b: Vec<(usize, usize)>,
    pub f: Vec<(usize, usize)>,
}

impl Default for GroupEdges {
    fn default() -> Self {
        Self { lh: hand_edges(), rh: hand_edges(), b: body_edges(), f: face_edges() }
    }
}

impl GroupEdges {
    pub fn for_group(&self, g: GroupId) -> &[(usize, usize)] {
        match g {
            GroupId::LeftHand => &self.lh,
            GroupId::RightHand => &self.rh,
            GroupId::Body => &self.b,
            GroupId::Face => &self.f,
        }
    }
}

/// Row-normalized `D⁻¹(A + I)` for an undirected edge list over `nodes` nodes.
pub fn normalized_adjacency(edges: &[(usize, usize)], nodes: usize) -> Result<Tensor> {
    let mut a = Tensor::zeros(&[nodes, nodes]);
    for i in 0..nodes {
        a.row_mut(i)[i] = 1.0;
    }
    for &(i, j) in edges {
        if i >= nodes || j >= nodes {
            return Err(Error::ConfigMismatch(alloc::format!(
                "edge ({i},{j}) references a node outside a {nodes}-node group"
            )));
        }
        a.row_mut(i)[j] = 1.0;
        a.row_mut(j)[i] = 1.0;
    }
    for i in 0..nodes {
        let row = a.row_mut(i);
        let deg: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= deg;
        }
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_topologies_are_connected_trees_or_better() {
        assert_eq!(hand_edges().len(), 20);
        assert_eq!(body_edges().len(), 9);
        assert_eq!(face_edges().len(), 17 + 8);
        for (edges, n) in [(hand_edges(), 21), (body_edges(), 9), (face_edges(), 18)] {
            // Union-find connectivity.
            let mut parent: Vec<usize> = (0..n).collect();
            fn find(p: &mut [usize], x: usize) -> usize {
                if p[x] != x {
                    let r = find(p, p[x]);
                    p[x] = r;
                }
                p[x]
            }
            for (a, b) in edges {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                parent[ra] = rb;
            }
            let root = find(&mut parent, 0);
            assert!((0..n).all(|i| find(&mut parent, i) == root));
        }
    }

    #[test]
    fn adjacency_rows_sum_to_one() {
        let a = normalized_adjacency(&hand_edges(), 21).unwrap();
        for i in 0..21 {
            assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(normalized_adjacency(&[(0, 30)], 21).is_err());
    }
}
