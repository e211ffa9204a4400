//! Cross-patient hypergraph construction and propagation.
//!
//! Vertices are the pixels of a flattened feature map. Each vertex owns one
//! hyperedge built by a two-pass nearest-neighbor search: the first pass uses
//! K=1 to measure how often a vertex is chosen by others, the second uses that
//! degree as the per-vertex K. Propagation applies the degree-normalized
//! incidence product to the vertex features on the autodiff tape.

use std::io::Write;

use thiserror::Error;

use crate::scalar::{cast, Scalar};
use crate::tensor::tape::{Padding, TapeBase, Var};
use crate::tensor::{TensorBase, TensorError};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("neighbor search needs at least 2 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("vertex count mismatch: {lhs} vs {rhs}")]
    VertexCountMismatch { lhs: usize, rhs: usize },
    #[error("zero {kind} degree at index {index}")]
    ZeroDegree { kind: &'static str, index: usize },
    #[error("provenance mismatch: vertices flattened from {expected:?}, got map {got:?}")]
    ProvenanceMismatch { expected: [usize; 4], got: Vec<usize> },
    #[error("expected {expected} edge weights, got {got}")]
    EdgeWeightMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = GraphError> = std::result::Result<T, E>;

/// Flattened feature map: one vertex per pixel, `(B*H*W, C)` on the tape,
/// with the source dimensions kept for provenance.
#[derive(Clone, Copy, Debug)]
pub struct VertexSet {
    pub features: Var,
    /// `(B, C, H, W)` of the map the vertices came from.
    pub source_dims: [usize; 4],
}

impl VertexSet {
    pub fn vertex_count(&self) -> usize {
        let [b, _, h, w] = self.source_dims;
        b * h * w
    }

    /// `(batch, row, col)` grid position of a vertex index.
    pub fn origin(&self, vertex: usize) -> (usize, usize, usize) {
        let [_, _, h, w] = self.source_dims;
        (vertex / (h * w), (vertex / w) % h, vertex % w)
    }
}

/// Flatten a `(B, C, H, W)` feature map into vertices, batch-major then row
/// then column. Gradients flow back through the inverse permutation.
pub fn flatten_features<T: Scalar>(
    tape: &mut TapeBase<T>,
    feature_map: Var,
) -> Result<VertexSet> {
    let shape = tape.shape(feature_map);
    if shape.len() != 4 {
        return Err(GraphError::Tensor(TensorError::InvalidShape {
            op: "flatten_features",
            shape: shape.to_vec(),
            msg: "expected rank 4".into(),
        }));
    }
    let source_dims = [shape[0], shape[1], shape[2], shape[3]];
    let features = tape.flatten_bchw(feature_map)?;
    Ok(VertexSet {
        features,
        source_dims,
    })
}

/// Incidence structure: rows are vertices, columns are hyperedges, one
/// hyperedge per vertex. Edge weights start at 1 and may be overridden by a
/// learnable tape variable during propagation.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypergraph {
    n: usize,
    incidence: Vec<u8>,
    vertex_degrees: Vec<usize>,
    edge_degrees: Vec<usize>,
    edge_weights: Vec<f64>,
}

impl Hypergraph {
    /// Build from a raw 0/1 incidence matrix (row-major, vertex by edge).
    pub fn from_incidence(n: usize, incidence: Vec<u8>) -> Result<Self> {
        if incidence.len() != n * n {
            return Err(GraphError::Tensor(TensorError::LengthMismatch {
                shape: vec![n, n],
                len: incidence.len(),
            }));
        }
        let mut vertex_degrees = vec![0usize; n];
        let mut edge_degrees = vec![0usize; n];
        for v in 0..n {
            for e in 0..n {
                if incidence[v * n + e] != 0 {
                    vertex_degrees[v] += 1;
                    edge_degrees[e] += 1;
                }
            }
        }
        Ok(Self {
            n,
            incidence,
            vertex_degrees,
            edge_degrees,
            edge_weights: vec![1.0; n],
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.n
    }

    pub fn contains(&self, vertex: usize, edge: usize) -> bool {
        self.incidence[vertex * self.n + edge] != 0
    }

    pub fn vertex_degree(&self, vertex: usize) -> usize {
        self.vertex_degrees[vertex]
    }

    pub fn edge_degree(&self, edge: usize) -> usize {
        self.edge_degrees[edge]
    }

    pub fn edge_weights(&self) -> &[f64] {
        &self.edge_weights
    }

    pub fn set_edge_weights(&mut self, weights: Vec<f64>) -> Result<()> {
        if weights.len() != self.n {
            return Err(GraphError::EdgeWeightMismatch {
                expected: self.n,
                got: weights.len(),
            });
        }
        self.edge_weights = weights;
        Ok(())
    }

    /// Members of hyperedge `e`, ascending vertex index.
    pub fn edge_members(&self, edge: usize) -> Vec<usize> {
        (0..self.n).filter(|&v| self.contains(v, edge)).collect()
    }

    /// Sparse coordinate dump: one `vertex edge` pair per line, row-major.
    pub fn write_coo<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for v in 0..self.n {
            for e in 0..self.n {
                if self.incidence[v * self.n + e] != 0 {
                    writeln!(w, "{v} {e}")?;
                }
            }
        }
        Ok(())
    }

    pub fn to_coo_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_coo(&mut buf).expect("write to vec");
        String::from_utf8(buf).expect("ascii output")
    }
}

/// Squared Euclidean distance between rows `i` and `j` of an `(N, C)` matrix.
fn sq_dist<T: Scalar>(features: &TensorBase<T>, c: usize, i: usize, j: usize) -> f64 {
    let a = &features.data()[i * c..(i + 1) * c];
    let b = &features.data()[j * c..(j + 1) * c];
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = x.to_f64().unwrap_or(f64::NAN) - y.to_f64().unwrap_or(f64::NAN);
        acc += d * d;
    }
    acc
}

/// Indices of the `k` nearest neighbors of `j` (self excluded), ties broken
/// by lowest vertex index.
fn k_nearest<T: Scalar>(features: &TensorBase<T>, c: usize, n: usize, j: usize, k: usize) -> Vec<usize> {
    let mut candidates: Vec<(f64, usize)> = (0..n)
        .filter(|&i| i != j)
        .map(|i| (sq_dist(features, c, i, j), i))
        .collect();
    candidates.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    candidates.into_iter().take(k).map(|(_, i)| i).collect()
}

fn check_vertex_matrix<T: Scalar>(features: &TensorBase<T>) -> Result<(usize, usize)> {
    let shape = features.shape();
    if shape.len() != 2 {
        return Err(GraphError::Tensor(TensorError::InvalidShape {
            op: "knn",
            shape: shape.to_vec(),
            msg: "expected (N, C) vertex matrix".into(),
        }));
    }
    Ok((shape[0], shape[1]))
}

/// First pass: K=1 for every vertex. Column j holds v_j and its single
/// nearest neighbor.
pub fn knn_first_pass<T: Scalar>(features: &TensorBase<T>) -> Result<Hypergraph> {
    let (n, c) = check_vertex_matrix(features)?;
    if n < 2 {
        return Err(GraphError::TooFewVertices(n));
    }
    let mut incidence = vec![0u8; n * n];
    for j in 0..n {
        incidence[j * n + j] = 1;
        let nn = k_nearest(features, c, n, j, 1)[0];
        incidence[nn * n + j] = 1;
    }
    Hypergraph::from_incidence(n, incidence)
}

/// Second pass: K(j) is v_j's degree in the preliminary incidence, clamped
/// to the available neighbor pool.
pub fn knn_second_pass<T: Scalar>(
    features: &TensorBase<T>,
    preliminary: &Hypergraph,
) -> Result<Hypergraph> {
    let (n, c) = check_vertex_matrix(features)?;
    if n != preliminary.vertex_count() {
        return Err(GraphError::VertexCountMismatch {
            lhs: n,
            rhs: preliminary.vertex_count(),
        });
    }
    let mut incidence = vec![0u8; n * n];
    for j in 0..n {
        incidence[j * n + j] = 1;
        let k = preliminary.vertex_degree(j).min(n - 1);
        for nn in k_nearest(features, c, n, j, k) {
            incidence[nn * n + j] = 1;
        }
    }
    Hypergraph::from_incidence(n, incidence)
}

/// Both passes in sequence.
pub fn build_two_pass<T: Scalar>(features: &TensorBase<T>) -> Result<Hypergraph> {
    let preliminary = knn_first_pass(features)?;
    knn_second_pass(features, &preliminary)
}

/// Degree-normalized propagation over the hyperedges:
/// vertex features are gathered into edges, reweighted, and scattered back,
/// with symmetric vertex-degree normalization. When `edge_weights` is given
/// it must be a length-N vector on the tape (the diagonal); gradients then
/// flow into it as well as into the vertex features.
pub fn hgnn_propagate<T: Scalar>(
    tape: &mut TapeBase<T>,
    graph: &Hypergraph,
    features: Var,
    edge_weights: Option<Var>,
) -> Result<Var> {
    let n = graph.vertex_count();
    let shape = tape.shape(features);
    if shape.len() != 2 || shape[0] != n {
        return Err(GraphError::VertexCountMismatch {
            lhs: shape.first().copied().unwrap_or(0),
            rhs: n,
        });
    }
    for v in 0..n {
        if graph.vertex_degree(v) == 0 {
            return Err(GraphError::ZeroDegree { kind: "vertex", index: v });
        }
    }
    for e in 0..n {
        if graph.edge_degree(e) == 0 {
            return Err(GraphError::ZeroDegree { kind: "edge", index: e });
        }
    }

    let mut h = vec![T::zero(); n * n];
    let mut ht = vec![T::zero(); n * n];
    for v in 0..n {
        for e in 0..n {
            if graph.contains(v, e) {
                h[v * n + e] = T::one();
                ht[e * n + v] = T::one();
            }
        }
    }
    let h = tape.constant(TensorBase::from_vec(vec![n, n], h)?);
    let ht = tape.constant(TensorBase::from_vec(vec![n, n], ht)?);

    let mut dv_inv_sqrt = vec![T::zero(); n * n];
    for v in 0..n {
        dv_inv_sqrt[v * n + v] = cast::<T>(1.0 / (graph.vertex_degree(v) as f64).sqrt());
    }
    let dv_inv_sqrt = tape.constant(TensorBase::from_vec(vec![n, n], dv_inv_sqrt)?);

    let mut de_inv = vec![T::zero(); n * n];
    for e in 0..n {
        de_inv[e * n + e] = cast::<T>(1.0 / graph.edge_degree(e) as f64);
    }
    let de_inv = tape.constant(TensorBase::from_vec(vec![n, n], de_inv)?);

    let we = match edge_weights {
        Some(w) => {
            if tape.shape(w) != [n] {
                return Err(GraphError::EdgeWeightMismatch {
                    expected: n,
                    got: tape.value(w).numel(),
                });
            }
            tape.diag(w)?
        }
        None => {
            let weights: Vec<T> = graph.edge_weights.iter().map(|&w| cast::<T>(w)).collect();
            let w = tape.constant(TensorBase::from_vec(vec![n], weights)?);
            tape.diag(w)?
        }
    };

    // D_v^{-1/2} H W_e D_e^{-1} H^T D_v^{-1/2} V, evaluated right to left.
    let t = tape.matmul(dv_inv_sqrt, features)?;
    let t = tape.matmul(ht, t)?;
    let t = tape.matmul(de_inv, t)?;
    let t = tape.matmul(we, t)?;
    let t = tape.matmul(h, t)?;
    tape.matmul(dv_inv_sqrt, t).map_err(Into::into)
}

/// Reshape propagated vertices back to the source map, concatenate with the
/// original features along channels, and fuse through a 1x1 convolution.
pub fn fuse<T: Scalar>(
    tape: &mut TapeBase<T>,
    propagated: Var,
    original: Var,
    source_dims: [usize; 4],
    fuse_weight: Var,
    fuse_bias: Option<Var>,
) -> Result<Var> {
    let [b, c, h, w] = source_dims;
    if tape.shape(original) != source_dims {
        return Err(GraphError::ProvenanceMismatch {
            expected: source_dims,
            got: tape.shape(original).to_vec(),
        });
    }
    if tape.shape(propagated) != [b * h * w, c] {
        return Err(GraphError::ProvenanceMismatch {
            expected: source_dims,
            got: tape.shape(propagated).to_vec(),
        });
    }
    let sw = tape.shape(fuse_weight);
    if sw.len() != 4 || sw[1] != 2 * c || sw[2] != 1 || sw[3] != 1 {
        return Err(GraphError::Tensor(TensorError::InvalidShape {
            op: "fuse",
            shape: sw.to_vec(),
            msg: format!("expected (Cout, {}, 1, 1) fuse kernel", 2 * c),
        }));
    }
    let restored = tape.unflatten_bchw(propagated, source_dims)?;
    let stacked = tape.concat(&[restored, original], 1)?;
    tape.conv2d(stacked, fuse_weight, fuse_bias, Padding::Valid)
        .map_err(Into::into)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::finite_difference_check;

    type Tape = TapeBase<f64>;
    type Tensor = TensorBase<f64>;

    fn vertices_1d(positions: &[f64]) -> Tensor {
        Tensor::from_vec(vec![positions.len(), 1], positions.to_vec()).unwrap()
    }

    /// Independent brute-force construction of the two-pass incidence,
    /// written against the textual procedure rather than the implementation.
    fn brute_force_two_pass(features: &Tensor) -> (Vec<u8>, Vec<u8>) {
        let n = features.shape()[0];
        let c = features.shape()[1];
        let dist = |i: usize, j: usize| -> f64 {
            (0..c)
                .map(|k| {
                    let d = features.data()[i * c + k] - features.data()[j * c + k];
                    d * d
                })
                .sum()
        };
        let ranked = |j: usize| -> Vec<usize> {
            let mut v: Vec<usize> = (0..n).filter(|&i| i != j).collect();
            v.sort_by(|&a, &b| dist(a, j).total_cmp(&dist(b, j)).then(a.cmp(&b)));
            v
        };
        let mut first = vec![0u8; n * n];
        for j in 0..n {
            first[j * n + j] = 1;
            first[ranked(j)[0] * n + j] = 1;
        }
        let degree = |h: &[u8], v: usize| -> usize { (0..n).map(|e| h[v * n + e] as usize).sum() };
        let mut second = vec![0u8; n * n];
        for j in 0..n {
            second[j * n + j] = 1;
            let k = degree(&first, j).min(n - 1);
            for &i in ranked(j).iter().take(k) {
                second[i * n + j] = 1;
            }
        }
        (first, second)
    }

    #[test]
    fn flatten_shape_and_constancy() {
        let mut tape = Tape::new();
        let map = tape.constant(Tensor::full(&[2, 3, 2, 2], 0.7));
        let vs = flatten_features(&mut tape, map).unwrap();
        assert_eq!(tape.shape(vs.features), &[8, 3]);
        assert!(tape.value(vs.features).data().iter().all(|&v| v == 0.7));
        assert_eq!(vs.origin(0), (0, 0, 0));
        assert_eq!(vs.origin(3), (0, 1, 1));
        assert_eq!(vs.origin(4), (1, 0, 0));
    }

    #[test]
    fn flatten_round_trips_through_inverse_permutation() {
        let data: Vec<f64> = (0..24).map(|v| v as f64 * 0.5 - 3.0).collect();
        let original = Tensor::from_vec(vec![2, 3, 2, 2], data).unwrap();
        let mut tape = Tape::new();
        let map = tape.constant(original.clone());
        let vs = flatten_features(&mut tape, map).unwrap();
        let back = tape.unflatten_bchw(vs.features, vs.source_dims).unwrap();
        assert_eq!(tape.value(back), &original);
    }

    #[test]
    fn first_pass_collinear_example() {
        let features = vertices_1d(&[0.0, 1.0, 10.0]);
        let g = knn_first_pass(&features).unwrap();
        assert_eq!(g.edge_members(0), vec![0, 1]);
        assert_eq!(g.edge_members(1), vec![0, 1]);
        assert_eq!(g.edge_members(2), vec![1, 2]);
        assert_eq!(
            (0..3).map(|v| g.vertex_degree(v)).collect::<Vec<_>>(),
            vec![2, 3, 1]
        );
    }

    #[test]
    fn first_pass_two_vertices_all_ones() {
        let features = vertices_1d(&[0.0, 5.0]);
        let g = knn_first_pass(&features).unwrap();
        for v in 0..2 {
            for e in 0..2 {
                assert!(g.contains(v, e));
            }
        }
    }

    #[test]
    fn first_pass_rejects_single_vertex() {
        let features = vertices_1d(&[0.0]);
        assert!(matches!(
            knn_first_pass(&features),
            Err(GraphError::TooFewVertices(1))
        ));
    }

    #[test]
    fn duplicate_features_tie_break_prefers_lower_index() {
        // Vertices 3 and 7 coincide; vertex 0 is equidistant to both.
        let features = vertices_1d(&[0.0, 30.0, 40.0, 5.0, 50.0, 60.0, 70.0, 5.0, 80.0]);
        let g = knn_first_pass(&features).unwrap();
        assert_eq!(g.edge_members(0), vec![0, 3]);
        // Each duplicate's nearest neighbor is the other duplicate.
        assert_eq!(g.edge_members(3), vec![3, 7]);
        assert_eq!(g.edge_members(7), vec![3, 7]);
    }

    #[test]
    fn second_pass_collinear_example() {
        let features = vertices_1d(&[0.0, 1.0, 10.0]);
        let prelim = knn_first_pass(&features).unwrap();
        let g = knn_second_pass(&features, &prelim).unwrap();
        // K = (2, 3 clamped to 2, 1)
        assert_eq!(g.edge_members(0), vec![0, 1, 2]);
        assert_eq!(g.edge_members(1), vec![0, 1, 2]);
        assert_eq!(g.edge_members(2), vec![1, 2]);
        for j in 0..3 {
            let expected_k = prelim.vertex_degree(j).min(2);
            assert_eq!(g.edge_degree(j), expected_k + 1);
        }
    }

    #[test]
    fn equidistant_simplex_matches_brute_force() {
        // Equilateral triangle: all pairwise distances equal.
        let features = Tensor::from_vec(
            vec![3, 2],
            vec![0.0, 0.0, 1.0, 0.0, 0.5, 0.75f64.sqrt()],
        )
        .unwrap();
        let (first, second) = brute_force_two_pass(&features);
        let prelim = knn_first_pass(&features).unwrap();
        let got = knn_second_pass(&features, &prelim).unwrap();
        assert_eq!(prelim, Hypergraph::from_incidence(3, first).unwrap());
        assert_eq!(got, Hypergraph::from_incidence(3, second).unwrap());
    }

    #[test]
    fn two_vertices_second_pass_equals_first() {
        let features = vertices_1d(&[2.0, -1.0]);
        let prelim = knn_first_pass(&features).unwrap();
        let got = knn_second_pass(&features, &prelim).unwrap();
        assert_eq!(prelim, got);
    }

    #[test]
    fn second_pass_rejects_vertex_count_mismatch() {
        let features = vertices_1d(&[0.0, 1.0, 2.0]);
        let prelim = knn_first_pass(&vertices_1d(&[0.0, 1.0])).unwrap();
        assert!(matches!(
            knn_second_pass(&features, &prelim),
            Err(GraphError::VertexCountMismatch { .. })
        ));
    }

    #[test]
    fn random_sets_match_brute_force_exactly() {
        let mut state = 0x5eed_1234u64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for round in 0..10 {
            let n = 3 + (round * 5) % 30;
            let c = 1 + round % 4;
            let data: Vec<f64> = (0..n * c).map(|_| next() * 4.0 - 2.0).collect();
            let features = Tensor::from_vec(vec![n, c], data).unwrap();
            let (first, second) = brute_force_two_pass(&features);
            let prelim = knn_first_pass(&features).unwrap();
            let got = knn_second_pass(&features, &prelim).unwrap();
            assert_eq!(prelim, Hypergraph::from_incidence(n, first).unwrap(), "first pass n={n} c={c}");
            assert_eq!(got, Hypergraph::from_incidence(n, second).unwrap(), "second pass n={n} c={c}");
            // Column sums are K(j)+1; row sums at least 1.
            for j in 0..n {
                assert_eq!(got.edge_degree(j), prelim.vertex_degree(j).min(n - 1) + 1);
                assert!(got.vertex_degree(j) >= 1);
            }
        }
    }

    #[test]
    fn identity_incidence_propagates_unchanged() {
        let mut incidence = vec![0u8; 9];
        for i in 0..3 {
            incidence[i * 3 + i] = 1;
        }
        let g = Hypergraph::from_incidence(3, incidence).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(
            Tensor::from_vec(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        );
        let out = hgnn_propagate(&mut tape, &g, v, None).unwrap();
        assert!(tape.value(out).max_abs_diff(tape.value(v)).unwrap() < 1e-12);
    }

    #[test]
    fn two_vertex_all_ones_averages_features() {
        let g = Hypergraph::from_incidence(2, vec![1, 1, 1, 1]).unwrap();
        assert_eq!(g.vertex_degree(0), 2);
        assert_eq!(g.edge_degree(0), 2);
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::from_vec(vec![2, 1], vec![1.0, 3.0]).unwrap());
        let out = hgnn_propagate(&mut tape, &g, v, None).unwrap();
        let expected = Tensor::from_vec(vec![2, 1], vec![2.0, 2.0]).unwrap();
        assert!(tape.value(out).max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn propagation_is_linear_in_edge_weights() {
        let features = vertices_1d(&[0.0, 1.0, 10.0, -4.0]);
        let g = build_two_pass(&features).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(features.clone());
        let base = hgnn_propagate(&mut tape, &g, v, None).unwrap();

        let mut scaled_graph = g.clone();
        scaled_graph.set_edge_weights(vec![2.5; 4]).unwrap();
        let scaled = hgnn_propagate(&mut tape, &scaled_graph, v, None).unwrap();

        let base_scaled = tape.mul_scalar(base, 2.5);
        assert!(
            tape.value(scaled)
                .max_abs_diff(tape.value(base_scaled))
                .unwrap()
                < 1e-12
        );
    }

    #[test]
    fn propagation_is_permutation_equivariant() {
        let features = Tensor::from_vec(
            vec![4, 2],
            vec![0.0, 0.1, 1.0, -0.4, 2.0, 0.9, -1.5, 0.3],
        )
        .unwrap();
        let g = build_two_pass(&features).unwrap();
        let perm = [2usize, 0, 3, 1]; // new index -> old index
        let n = 4;
        let permuted_features = {
            let mut data = Vec::new();
            for &old in &perm {
                data.extend_from_slice(&features.data()[old * 2..(old + 1) * 2]);
            }
            Tensor::from_vec(vec![n, 2], data).unwrap()
        };
        let mut incidence = vec![0u8; n * n];
        for new_v in 0..n {
            for new_e in 0..n {
                if g.contains(perm[new_v], perm[new_e]) {
                    incidence[new_v * n + new_e] = 1;
                }
            }
        }
        let permuted_graph = Hypergraph::from_incidence(n, incidence).unwrap();

        let mut tape = Tape::new();
        let v = tape.constant(features.clone());
        let out = hgnn_propagate(&mut tape, &g, v, None).unwrap();
        let pv = tape.constant(permuted_features);
        let pout = hgnn_propagate(&mut tape, &permuted_graph, pv, None).unwrap();

        for new_v in 0..n {
            for col in 0..2 {
                let a = tape.value(pout).get(&[new_v, col]).unwrap();
                let b = tape.value(out).get(&[perm[new_v], col]).unwrap();
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_vertices_stay_parallel() {
        let u = [0.8, -0.2, 1.4];
        let features = Tensor::from_vec(vec![5, 3], u.repeat(5)).unwrap();
        // Constant features make every distance zero; ties resolve by index.
        let g = build_two_pass(&features).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(features);
        let out = hgnn_propagate(&mut tape, &g, v, None).unwrap();
        for row in 0..5 {
            let lambda = tape.value(out).get(&[row, 0]).unwrap() / u[0];
            for col in 1..3 {
                let got = tape.value(out).get(&[row, col]).unwrap();
                assert!((got - lambda * u[col]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn propagation_gradients_match_finite_differences() {
        let features = Tensor::from_vec(
            vec![6, 2],
            vec![
                0.3, -0.8, 1.2, 0.4, -0.5, 0.9, 2.0, -1.0, 0.05, 0.7, -1.3, -0.2,
            ],
        )
        .unwrap();
        let g = build_two_pass(&features).unwrap();

        // Gradient w.r.t. vertex features.
        let graph = g.clone();
        let report = finite_difference_check(
            move |tape, x| {
                let out = hgnn_propagate(tape, &graph, x, None)
                    .map_err(|_| TensorError::Domain { op: "hgnn", msg: "propagate".into() })?;
                let sq = tape.mul(out, out)?;
                Ok(tape.sum(sq))
            },
            &features,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "vertex grad rel err {}", report.max_rel_err);

        // Gradient w.r.t. edge weights.
        let graph = g.clone();
        let feat = features.clone();
        let weights = Tensor::from_vec(vec![6], vec![1.0, 0.5, 2.0, 1.5, 0.75, 1.25]).unwrap();
        let report = finite_difference_check(
            move |tape, w| {
                let v = tape.constant(feat.clone());
                let out = hgnn_propagate(tape, &graph, v, Some(w))
                    .map_err(|_| TensorError::Domain { op: "hgnn", msg: "propagate".into() })?;
                let sq = tape.mul(out, out)?;
                Ok(tape.sum(sq))
            },
            &weights,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "edge weight grad rel err {}", report.max_rel_err);
    }

    #[test]
    fn fuse_projection_kernels_select_branches() {
        let dims = [1usize, 2, 2, 2];
        let mut tape = Tape::new();
        let original = tape.constant(
            Tensor::from_vec(vec![1, 2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap(),
        );
        let vs = flatten_features(&mut tape, original).unwrap();
        let propagated = tape.mul_scalar(vs.features, 10.0);

        // [I | 0] selects the propagated branch.
        let mut proj = Tensor::zeros(&[2, 4, 1, 1]);
        proj.set(&[0, 0, 0, 0], 1.0).unwrap();
        proj.set(&[1, 1, 0, 0], 1.0).unwrap();
        let w = tape.constant(proj);
        let fused = fuse(&mut tape, propagated, original, dims, w, None).unwrap();
        let expected = tape.mul_scalar(original, 10.0);
        assert!(
            tape.value(fused)
                .max_abs_diff(tape.value(expected))
                .unwrap()
                < 1e-12
        );

        // [0 | I] selects the original branch.
        let mut proj = Tensor::zeros(&[2, 4, 1, 1]);
        proj.set(&[0, 2, 0, 0], 1.0).unwrap();
        proj.set(&[1, 3, 0, 0], 1.0).unwrap();
        let w = tape.constant(proj);
        let fused = fuse(&mut tape, propagated, original, dims, w, None).unwrap();
        assert!(
            tape.value(fused)
                .max_abs_diff(tape.value(original))
                .unwrap()
                < 1e-12
        );
    }

    #[test]
    fn fuse_random_kernel_matches_per_pixel_linear_map() {
        let dims = [2usize, 2, 2, 2];
        let mut state = 99u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        };
        let original_t =
            Tensor::from_vec(vec![2, 2, 2, 2], (0..16).map(|_| next()).collect()).unwrap();
        let kernel_t = Tensor::from_vec(vec![2, 4, 1, 1], (0..8).map(|_| next()).collect()).unwrap();
        let bias_t = Tensor::from_vec(vec![2], vec![next(), next()]).unwrap();

        let mut tape = Tape::new();
        let original = tape.constant(original_t.clone());
        let vs = flatten_features(&mut tape, original).unwrap();
        let propagated = tape.mul_scalar(vs.features, 3.0);
        let propagated_t = tape.value(propagated).clone();
        let w = tape.constant(kernel_t.clone());
        let b = tape.constant(bias_t.clone());
        let fused = fuse(&mut tape, propagated, original, dims, w, Some(b)).unwrap();

        // Oracle: per pixel, output = kernel . [propagated; original] + bias.
        let [bs, c, h, wd] = dims;
        for bi in 0..bs {
            for y in 0..h {
                for x in 0..wd {
                    let vertex = (bi * h + y) * wd + x;
                    let mut stacked = Vec::new();
                    for ci in 0..c {
                        stacked.push(propagated_t.get(&[vertex, ci]).unwrap());
                    }
                    for ci in 0..c {
                        stacked.push(original_t.get(&[bi, ci, y, x]).unwrap());
                    }
                    for co in 0..c {
                        let mut acc = bias_t.data()[co];
                        for (i, &s) in stacked.iter().enumerate() {
                            acc += kernel_t.get(&[co, i, 0, 0]).unwrap() * s;
                        }
                        let got = tape.value(fused).get(&[bi, co, y, x]).unwrap();
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn coo_dump_is_row_major_pairs() {
        let g = Hypergraph::from_incidence(2, vec![1, 1, 0, 1]).unwrap();
        assert_eq!(g.to_coo_string(), "0 0\n0 1\n1 1\n");
    }
}
