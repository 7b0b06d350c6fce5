//! Point sets and exact geometric operators on them: brute-force KNN,
//! neighborhood centroids, random subsampling and nearest-neighbor
//! upsampling.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Point = [f64; 3];

/// Width of [`relative_neighbor_encoding`] rows.
pub const ENCODING_CHANNELS: usize = 8;

/// Points with per-point feature channels and optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    positions: Vec<Point>,
    features: Vec<f64>,
    feature_dim: usize,
    labels: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn new(
        positions: Vec<Point>,
        features: Vec<f64>,
        feature_dim: usize,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let n = positions.len();
        if n == 0 {
            return Err(Error::data("point cloud must contain at least one point"));
        }
        if let Some(i) = positions.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::data(format!("point {i} has a non-finite coordinate")));
        }
        if features.len() != n * feature_dim {
            return Err(Error::data(format!(
                "expected {} feature values for {n} points x {feature_dim} channels, got {}",
                n * feature_dim,
                features.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::data(format!("{} labels for {n} points", l.len())));
            }
        }
        Ok(PointCloud {
            positions,
            features,
            feature_dim,
            labels,
        })
    }

    /// A cloud with coordinates only.
    pub fn from_positions(positions: Vec<Point>, labels: Option<Vec<usize>>) -> Result<Self> {
        Self::new(positions, Vec::new(), 0, labels)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Point] {
        &self.positions
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::data(format!(
                "{} labels for {} points",
                labels.len(),
                self.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Checks every label lies in `[0, num_classes)`.
    pub fn validate_labels(&self, num_classes: usize) -> Result<()> {
        if let Some(labels) = &self.labels {
            if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
                return Err(Error::data(format!(
                    "point {i} has label {l}, outside [0, {num_classes})"
                )));
            }
        }
        Ok(())
    }

    /// The sub-cloud at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let d = self.feature_dim;
        let mut positions = Vec::with_capacity(indices.len());
        let mut features = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index {
                    op: "PointCloud::select",
                    index: i,
                    extent: self.len(),
                });
            }
            positions.push(self.positions[i]);
            features.extend_from_slice(self.feature_row(i));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Self::new(positions, features, d, labels)
    }

    /// Fraction of points carrying `class`.
    pub fn class_fraction(&self, class: usize) -> Option<f64> {
        self.labels
            .as_ref()
            .map(|l| l.iter().filter(|&&c| c == class).count() as f64 / l.len() as f64)
    }
}

#[inline]
pub fn squared_distance(a: &Point, b: &Point) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

/// For each point, its `k` nearest points.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndex {
    k: usize,
    indices: Vec<usize>,
}

impl NeighborIndex {
    /// Wraps a row-major `[n, k]` index table, checking bounds.
    pub fn from_rows(k: usize, indices: Vec<usize>, n: usize) -> Result<Self> {
        if k == 0 || indices.len() != n * k {
            return Err(Error::invalid(format!(
                "neighbor table of length {} is not {n} x {k}",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Index {
                op: "NeighborIndex",
                index: bad,
                extent: n,
            });
        }
        Ok(NeighborIndex { k, indices })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn as_flat(&self) -> &[usize] {
        &self.indices
    }
}

/// Exact k-nearest neighbors by brute force.
///
/// Each row holds the query itself plus its `k - 1` closest points, sorted by
/// nondecreasing distance with ties broken toward the lower index.
pub fn knn(positions: &[Point], k: usize) -> Result<NeighborIndex> {
    let n = positions.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "knn: k = {k} must lie in [1, {n}]"
        )));
    }
    let mut indices = Vec::with_capacity(n * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n);
    let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    for q in positions {
        scratch.clear();
        scratch.extend(positions.iter().enumerate().map(|(j, p)| (squared_distance(q, p), j)));
        if k < n {
            scratch.select_nth_unstable_by(k - 1, order);
        }
        let nearest = &mut scratch[..k];
        nearest.sort_unstable_by(order);
        indices.extend(nearest.iter().map(|&(_, j)| j));
    }
    Ok(NeighborIndex { k, indices })
}

/// Neighborhood centroids and each point's distance to its centroid.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidOffsets {
    pub centroids: Vec<Point>,
    pub distances: Vec<f64>,
}

pub fn centroid_offset(positions: &[Point], nbrs: &NeighborIndex) -> CentroidOffsets {
    let k = nbrs.k() as f64;
    let mut centroids = Vec::with_capacity(nbrs.len());
    let mut distances = Vec::with_capacity(nbrs.len());
    for (i, p) in positions.iter().enumerate().take(nbrs.len()) {
        let mut c = [0.0; 3];
        for &j in nbrs.row(i) {
            for (ca, pa) in c.iter_mut().zip(&positions[j]) {
                *ca += pa;
            }
        }
        for ca in &mut c {
            *ca /= k;
        }
        distances.push(squared_distance(p, &c).sqrt());
        centroids.push(c);
    }
    CentroidOffsets {
        centroids,
        distances,
    }
}

/// Per (point, neighbor) geometry: offset of the neighbor from the
/// neighborhood centroid (3), the centroid (3), the neighbor-to-centroid
/// distance (1) and the point-to-centroid distance (1). Shape `[N, k, 8]`.
pub fn relative_neighbor_encoding(positions: &[Point], nbrs: &NeighborIndex) -> Tensor {
    let stats = centroid_offset(positions, nbrs);
    let (n, k) = (nbrs.len(), nbrs.k());
    let mut out = Vec::with_capacity(n * k * ENCODING_CHANNELS);
    for i in 0..n {
        let c = stats.centroids[i];
        for &j in nbrs.row(i) {
            let p = positions[j];
            let off = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
            out.extend_from_slice(&off);
            out.extend_from_slice(&c);
            out.push((off[0] * off[0] + off[1] * off[1] + off[2] * off[2]).sqrt());
            out.push(stats.distances[i]);
        }
    }
    Tensor::new(vec![n, k, ENCODING_CHANNELS], out).expect("encoding shape")
}

/// Bookkeeping for one random downsampling step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplingTrace {
    /// Source index of each kept point, in coarse order.
    pub kept: Vec<usize>,
    /// For each fine point, the coarse position of its nearest kept point.
    pub upmap: Vec<usize>,
}

impl SamplingTrace {
    /// Builds the trace for a given kept set, computing `upmap` exactly.
    /// Distance ties go to the earlier kept point.
    pub fn from_kept(fine: &[Point], kept: Vec<usize>) -> Result<Self> {
        if kept.is_empty() {
            return Err(Error::invalid("sampling trace needs at least one kept point"));
        }
        let mut seen = vec![false; fine.len()];
        for &k in &kept {
            if k >= fine.len() {
                return Err(Error::Index {
                    op: "SamplingTrace",
                    index: k,
                    extent: fine.len(),
                });
            }
            if std::mem::replace(&mut seen[k], true) {
                return Err(Error::invalid(format!("kept index {k} appears twice")));
            }
        }
        let coarse: Vec<Point> = kept.iter().map(|&i| fine[i]).collect();
        let upmap = fine
            .iter()
            .map(|p| {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (j, c) in coarse.iter().enumerate() {
                    let d = squared_distance(p, c);
                    if d < best_d {
                        best = j;
                        best_d = d;
                    }
                }
                best
            })
            .collect();
        Ok(SamplingTrace { kept, upmap })
    }

    pub fn coarse_len(&self) -> usize {
        self.kept.len()
    }

    pub fn fine_len(&self) -> usize {
        self.upmap.len()
    }
}

/// Number of points kept when downsampling `n` points by `ratio`.
pub fn subsample_count(n: usize, ratio: usize) -> usize {
    n.div_ceil(ratio)
}

/// Uniformly chooses `ceil(n / ratio)` distinct indices by a seeded
/// shuffle-prefix, returned in ascending order.
pub fn sample_indices<R: Rng + ?Sized>(n: usize, ratio: usize, rng: &mut R) -> Result<Vec<usize>> {
    if ratio == 0 {
        return Err(Error::invalid("downsampling ratio must be at least 1"));
    }
    if n == 0 {
        return Err(Error::invalid("cannot subsample an empty point set"));
    }
    let m = subsample_count(n, ratio);
    let mut all: Vec<usize> = (0..n).collect();
    let (prefix, _) = all.partial_shuffle(rng, m);
    let mut kept = prefix.to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Random downsampling of a cloud together with its trace.
pub fn random_subsample<R: Rng + ?Sized>(
    cloud: &PointCloud,
    ratio: usize,
    rng: &mut R,
) -> Result<(PointCloud, SamplingTrace)> {
    let kept = sample_indices(cloud.len(), ratio, rng)?;
    let coarse = cloud.select(&kept)?;
    let trace = SamplingTrace::from_kept(cloud.positions(), kept)?;
    Ok((coarse, trace))
}

/// Copies each coarse feature row to the fine points mapped onto it.
/// Differentiable: gradients scatter-add back into the coarse rows.
pub fn nn_upsample(
    tape: &mut Tape,
    coarse: Var,
    trace: &SamplingTrace,
    fine_count: usize,
) -> Result<Var> {
    if trace.upmap.len() != fine_count {
        return Err(Error::Shape {
            op: "nn_upsample",
            lhs: vec![trace.upmap.len()],
            rhs: vec![fine_count],
        });
    }
    tape.gather_rows(coarse, &trace.upmap, &[fine_count])
}
