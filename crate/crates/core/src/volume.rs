//! Dense voxel grids: binary masks, scalar fields and sparse voxel sets, plus
//! the grid kernels the rest of the crate is built on (Gaussian heatmaps,
//! exact Manhattan distance transforms, signed distances, percentiles).
//!
//! Voxel `(i, j, k)` lives at linear index `(i * W + j) * D + k`. The same
//! layout is used by the raw little-endian serializers at the bottom of this
//! module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer voxel coordinate `(i, j, k)`.
pub type Voxel = [usize; 3];

const MIN_DIM: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub dims: [usize; 3],
    pub spacing_mm: f64,
}

impl GridMeta {
    pub fn new(dims: [usize; 3], spacing_mm: f64) -> Result<Self> {
        if dims.iter().any(|&d| d < MIN_DIM) {
            return Err(Error::InvalidParams(format!(
                "grid dims {dims:?} must all be >= {MIN_DIM}"
            )));
        }
        if !(spacing_mm > 0.0 && spacing_mm.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "voxel spacing must be positive, got {spacing_mm}"
            )));
        }
        Ok(Self { dims, spacing_mm })
    }

    pub fn cube(n: usize, spacing_mm: f64) -> Result<Self> {
        Self::new([n, n, n], spacing_mm)
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, v: Voxel) -> usize {
        (v[0] * self.dims[1] + v[1]) * self.dims[2] + v[2]
    }

    #[inline]
    pub fn voxel(&self, idx: usize) -> Voxel {
        let k = idx % self.dims[2];
        let ij = idx / self.dims[2];
        [ij / self.dims[1], ij % self.dims[1], k]
    }

    #[inline]
    pub fn contains_signed(&self, v: [i64; 3]) -> bool {
        (0..3).all(|a| v[a] >= 0 && (v[a] as usize) < self.dims[a])
    }

    /// Geometric center in voxel coordinates.
    pub fn center(&self) -> [f64; 3] {
        self.dims.map(|d| (d as f64 - 1.0) / 2.0)
    }

    /// In-grid six-connected neighbors of `v`, plus the number of neighbors
    /// that fall outside the grid.
    pub fn neighbors6(&self, v: Voxel) -> (impl Iterator<Item = Voxel> + '_, usize) {
        let mut outside = 0;
        for a in 0..3 {
            if v[a] == 0 {
                outside += 1;
            }
            if v[a] + 1 == self.dims[a] {
                outside += 1;
            }
        }
        let it = (0..6).filter_map(move |n| {
            let axis = n / 2;
            let mut w = v;
            if n % 2 == 0 {
                if w[axis] == 0 {
                    return None;
                }
                w[axis] -= 1;
            } else {
                if w[axis] + 1 >= self.dims[axis] {
                    return None;
                }
                w[axis] += 1;
            }
            Some(w)
        });
        (it, outside)
    }

    pub fn check_same(&self, other: &GridMeta) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch(self.dims, other.dims));
        }
        Ok(())
    }
}

#[inline]
pub fn manhattan(a: Voxel, b: Voxel) -> usize {
    a[0].abs_diff(b[0]) + a[1].abs_diff(b[1]) + a[2].abs_diff(b[2])
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    meta: GridMeta,
    voxels: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(meta: GridMeta) -> Self {
        Self {
            meta,
            voxels: vec![0; meta.len()],
        }
    }

    pub fn from_fn(meta: GridMeta, mut f: impl FnMut(Voxel) -> bool) -> Self {
        let voxels = (0..meta.len())
            .map(|idx| f(meta.voxel(idx)) as u8)
            .collect();
        Self { meta, voxels }
    }

    pub fn from_bytes(meta: GridMeta, voxels: Vec<u8>) -> Result<Self> {
        if voxels.len() != meta.len() {
            return Err(Error::InvalidParams(format!(
                "mask has {} voxels, grid needs {}",
                voxels.len(),
                meta.len()
            )));
        }
        if let Some(bad) = voxels.iter().find(|&&b| b > 1) {
            return Err(Error::OutOfRange(format!("mask value {bad} is not binary")));
        }
        Ok(Self { meta, voxels })
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.voxels
    }

    #[inline]
    pub fn get(&self, v: Voxel) -> bool {
        self.voxels[self.meta.index(v)] != 0
    }

    #[inline]
    pub fn get_index(&self, idx: usize) -> bool {
        self.voxels[idx] != 0
    }

    #[inline]
    pub fn set(&mut self, v: Voxel, on: bool) {
        let idx = self.meta.index(v);
        self.voxels[idx] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&b| b != 0).count()
    }

    pub fn is_degenerate(&self) -> bool {
        let n = self.count();
        n == 0 || n == self.voxels.len()
    }

    /// A mask voxel with at least one six-connected background neighbor.
    /// Neighbors outside the grid count as background.
    pub fn is_boundary(&self, v: Voxel) -> bool {
        if !self.get(v) {
            return false;
        }
        let (mut nbrs, outside) = self.meta.neighbors6(v);
        outside > 0 || nbrs.any(|w| !self.get(w))
    }

    pub fn boundary(&self) -> VoxelSet {
        let points = (0..self.meta.len())
            .map(|idx| self.meta.voxel(idx))
            .filter(|&v| self.is_boundary(v))
            .collect();
        VoxelSet {
            meta: self.meta,
            points,
        }
    }

    pub fn to_field(&self) -> ScalarField {
        ScalarField {
            meta: self.meta,
            values: self.voxels.iter().map(|&b| b as f64).collect(),
        }
    }

    pub fn dice(&self, other: &BinaryMask) -> f64 {
        let (mut inter, mut total) = (0usize, 0usize);
        for (&a, &b) in self.voxels.iter().zip(&other.voxels) {
            inter += (a & b) as usize;
            total += (a + b) as usize;
        }
        if total == 0 {
            1.0
        } else {
            2.0 * inter as f64 / total as f64
        }
    }

    /// Keeps only the largest six-connected foreground component
    /// (lowest linear index wins ties).
    pub fn largest_component(&self) -> BinaryMask {
        let n = self.meta.len();
        let mut label = vec![u32::MAX; n];
        let mut best: Option<(usize, u32)> = None;
        let mut next = 0u32;
        let mut stack = Vec::new();
        for start in 0..n {
            if self.voxels[start] == 0 || label[start] != u32::MAX {
                continue;
            }
            let mut size = 0;
            label[start] = next;
            stack.push(start);
            while let Some(idx) = stack.pop() {
                size += 1;
                let (nbrs, _) = self.meta.neighbors6(self.meta.voxel(idx));
                for w in nbrs {
                    let widx = self.meta.index(w);
                    if self.voxels[widx] != 0 && label[widx] == u32::MAX {
                        label[widx] = next;
                        stack.push(widx);
                    }
                }
            }
            if best.map_or(true, |(s, _)| size > s) {
                best = Some((size, next));
            }
            next += 1;
        }
        let keep = best.map(|(_, l)| l);
        BinaryMask {
            meta: self.meta,
            voxels: label
                .iter()
                .map(|&l| (Some(l) == keep && l != u32::MAX) as u8)
                .collect(),
        }
    }

    pub fn count_components(&self) -> usize {
        let n = self.meta.len();
        let mut seen = vec![false; n];
        let mut comps = 0;
        let mut stack = Vec::new();
        for start in 0..n {
            if self.voxels[start] == 0 || seen[start] {
                continue;
            }
            comps += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(idx) = stack.pop() {
                let (nbrs, _) = self.meta.neighbors6(self.meta.voxel(idx));
                for w in nbrs {
                    let widx = self.meta.index(w);
                    if self.voxels[widx] != 0 && !seen[widx] {
                        seen[widx] = true;
                        stack.push(widx);
                    }
                }
            }
        }
        comps
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    meta: GridMeta,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn constant(meta: GridMeta, value: f64) -> Self {
        Self {
            meta,
            values: vec![value; meta.len()],
        }
    }

    pub fn from_fn(meta: GridMeta, mut f: impl FnMut(Voxel) -> f64) -> Self {
        let values = (0..meta.len()).map(|idx| f(meta.voxel(idx))).collect();
        Self { meta, values }
    }

    pub fn from_values(meta: GridMeta, values: Vec<f64>) -> Result<Self> {
        if values.len() != meta.len() {
            return Err(Error::InvalidParams(format!(
                "field has {} values, grid needs {}",
                values.len(),
                meta.len()
            )));
        }
        Ok(Self { meta, values })
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, v: Voxel) -> f64 {
        self.values[self.meta.index(v)]
    }

    #[inline]
    pub fn set(&mut self, v: Voxel, value: f64) {
        let idx = self.meta.index(v);
        self.values[idx] = value;
    }

    pub fn is_probability(&self) -> bool {
        self.values.iter().all(|&v| (0.0..=1.0).contains(&v))
    }

    pub fn check_probability(&self, what: &str) -> Result<()> {
        match self.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            Some(bad) => Err(Error::OutOfRange(format!("{what} value {bad} outside [0, 1]"))),
            None => Ok(()),
        }
    }

    /// Per-voxel maximum of two fields.
    pub fn max_with(&self, other: &ScalarField) -> Result<ScalarField> {
        self.meta.check_same(&other.meta)?;
        Ok(ScalarField {
            meta: self.meta,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a.max(*b))
                .collect(),
        })
    }
}

/// Duplicate-free voxel set kept in ascending linear-index order.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelSet {
    meta: GridMeta,
    points: Vec<Voxel>,
}

impl VoxelSet {
    pub fn new(meta: GridMeta, points: impl IntoIterator<Item = Voxel>) -> Result<Self> {
        let mut idx = Vec::new();
        for p in points {
            if (0..3).any(|a| p[a] >= meta.dims[a]) {
                return Err(Error::OutOfRange(format!(
                    "voxel {p:?} outside grid {:?}",
                    meta.dims
                )));
            }
            idx.push(meta.index(p));
        }
        idx.sort_unstable();
        idx.dedup();
        Ok(Self {
            meta,
            points: idx.into_iter().map(|i| meta.voxel(i)).collect(),
        })
    }

    pub fn empty(meta: GridMeta) -> Self {
        Self {
            meta,
            points: Vec::new(),
        }
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn points(&self) -> &[Voxel] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn contains(&self, v: Voxel) -> bool {
        let idx = self.meta.index(v);
        self.points
            .binary_search_by_key(&idx, |p| self.meta.index(*p))
            .is_ok()
    }

    pub fn union<'a>(meta: GridMeta, sets: impl IntoIterator<Item = &'a VoxelSet>) -> VoxelSet {
        let mut flags = vec![false; meta.len()];
        for s in sets {
            for &p in &s.points {
                flags[meta.index(p)] = true;
            }
        }
        VoxelSet {
            meta,
            points: flags
                .iter()
                .enumerate()
                .filter(|(_, &f)| f)
                .map(|(i, _)| meta.voxel(i))
                .collect(),
        }
    }

    pub fn to_mask(&self) -> BinaryMask {
        let mut mask = BinaryMask::zeros(self.meta);
        for &p in &self.points {
            mask.set(p, true);
        }
        mask
    }
}

/// Gaussian heatmap peaked along `points`: each voxel takes the largest
/// per-point Gaussian, so the value is exactly 1 on every point. Distances are
/// Euclidean in voxel units.
pub fn make_gaussian_map(points: &VoxelSet, sigma: f64) -> Result<ScalarField> {
    if points.is_empty() {
        return Err(Error::EmptyScribble);
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParams(format!("sigma must be positive, got {sigma}")));
    }
    let meta = *points.meta();
    let [h, w, d] = meta.dims;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let pts: Vec<[f64; 3]> = points
        .points()
        .iter()
        .map(|p| p.map(|c| c as f64))
        .collect();
    let mut values = vec![0.0; meta.len()];
    let mut row_best = vec![0.0f64; d];
    for i in 0..h {
        for j in 0..w {
            row_best.fill(f64::INFINITY);
            for p in &pts {
                let di = i as f64 - p[0];
                let dj = j as f64 - p[1];
                let base = di * di + dj * dj;
                for (k, best) in row_best.iter_mut().enumerate() {
                    let dk = k as f64 - p[2];
                    let d2 = base + dk * dk;
                    if d2 < *best {
                        *best = d2;
                    }
                }
            }
            let off = (i * w + j) * d;
            for (k, &d2) in row_best.iter().enumerate() {
                values[off + k] = (-d2 * inv).exp();
            }
        }
    }
    Ok(ScalarField { meta, values })
}

/// Values of [`make_gaussian_map`] at selected voxels only, bit-identical to
/// the full map.
pub fn gaussian_at(points: &VoxelSet, sigma: f64, voxels: impl Iterator<Item = Voxel>) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Err(Error::EmptyScribble);
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParams(format!("sigma must be positive, got {sigma}")));
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let pts: Vec<[f64; 3]> = points.points().iter().map(|p| p.map(|c| c as f64)).collect();
    Ok(voxels
        .map(|v| {
            let q = v.map(|c| c as f64);
            let d2 = pts
                .iter()
                .map(|p| {
                    let (di, dj, dk) = (q[0] - p[0], q[1] - p[1], q[2] - p[2]);
                    di * di + dj * dj + dk * dk
                })
                .fold(f64::INFINITY, f64::min);
            (-d2 * inv).exp()
        })
        .collect())
}

/// `1 - A` per voxel.
pub fn complement_map(a: &ScalarField) -> Result<ScalarField> {
    a.check_probability("heatmap")?;
    Ok(ScalarField {
        meta: a.meta,
        values: a.values.iter().map(|&v| 1.0 - v).collect(),
    })
}

/// Voxel is set iff `A >= tau`.
pub fn threshold_map(a: &ScalarField, tau: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::OutOfRange(format!("threshold {tau} outside [0, 1]")));
    }
    Ok(BinaryMask {
        meta: a.meta,
        voxels: a.values.iter().map(|&v| (v >= tau) as u8).collect(),
    })
}

const DT_INF: u32 = u32::MAX / 4;

/// Exact Manhattan distance (in voxels) from every grid voxel to the nearest
/// target, as raw integers. Separable: the L1 metric decomposes into three
/// independent 1D forward/backward sweeps.
pub fn manhattan_dt_raw(meta: &GridMeta, targets: &[Voxel]) -> Result<Vec<u32>> {
    if targets.is_empty() {
        return Err(Error::EmptySet("distance transform targets"));
    }
    let mut dist = vec![DT_INF; meta.len()];
    for &t in targets {
        dist[meta.index(t)] = 0;
    }
    let [h, w, d] = meta.dims;
    let strides = [w * d, d, 1];
    for axis in 0..3 {
        let n = meta.dims[axis];
        let stride = strides[axis];
        // every line parallel to `axis`
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        let (na, nb) = (meta.dims[others[0]], meta.dims[others[1]]);
        for a in 0..na {
            for b in 0..nb {
                let mut v = [0usize; 3];
                v[others[0]] = a;
                v[others[1]] = b;
                let start = meta.index(v);
                for s in 1..n {
                    let prev = dist[start + (s - 1) * stride] + 1;
                    let cur = &mut dist[start + s * stride];
                    if prev < *cur {
                        *cur = prev;
                    }
                }
                for s in (0..n - 1).rev() {
                    let next = dist[start + (s + 1) * stride] + 1;
                    let cur = &mut dist[start + s * stride];
                    if next < *cur {
                        *cur = next;
                    }
                }
            }
        }
        let _ = (h, w, d);
    }
    Ok(dist)
}

pub fn manhattan_distance_transform(targets: &VoxelSet) -> Result<ScalarField> {
    let meta = *targets.meta();
    let raw = manhattan_dt_raw(&meta, targets.points())?;
    Ok(ScalarField {
        meta,
        values: raw.into_iter().map(|v| v as f64).collect(),
    })
}

/// Manhattan distance to the mask boundary: negative inside, positive
/// outside, zero on boundary voxels.
pub fn signed_distance(mask: &BinaryMask) -> Result<ScalarField> {
    if mask.is_degenerate() {
        return Err(Error::DegenerateMask);
    }
    let boundary = mask.boundary();
    let raw = manhattan_dt_raw(&mask.meta, boundary.points())?;
    let values = raw
        .iter()
        .zip(&mask.voxels)
        .map(|(&d, &m)| if m != 0 { -(d as f64) } else { d as f64 })
        .collect();
    Ok(ScalarField {
        meta: mask.meta,
        values,
    })
}

/// Nearest-rank percentile: the element at `ceil(p/100 * n) - 1` of the
/// ascending sort, clamped to the valid index range.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptySet("percentile input"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::OutOfRange(format!("percentile {p} outside [0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = (p * n as f64 / 100.0).ceil() as i64 - 1;
    Ok(sorted[rank.clamp(0, n as i64 - 1) as usize])
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

pub fn mask_to_bytes(mask: &BinaryMask) -> Vec<u8> {
    mask.voxels.clone()
}

pub fn mask_from_bytes(meta: GridMeta, bytes: &[u8]) -> Result<BinaryMask> {
    BinaryMask::from_bytes(meta, bytes.to_vec())
}

/// Little-endian f32 per voxel. Values are narrowed to f32.
pub fn field_to_bytes(field: &ScalarField) -> Vec<u8> {
    let mut out = Vec::with_capacity(field.values.len() * 4);
    for &v in &field.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn field_from_bytes(meta: GridMeta, bytes: &[u8]) -> Result<ScalarField> {
    if bytes.len() != meta.len() * 4 {
        return Err(Error::InvalidParams(format!(
            "field blob has {} bytes, grid needs {}",
            bytes.len(),
            meta.len() * 4
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(ScalarField { meta, values })
}
