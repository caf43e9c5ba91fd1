//! Rotational sweep geometry. Every frame is a rectangle whose rows run along
//! the grid's vertical axis `i` and whose columns run along a horizontal
//! direction rotated by the frame angle about a vertical axis through the
//! pivot.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, GridMeta, Voxel, VoxelSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePose {
    pub frame_id: usize,
    pub angle_rad: f64,
    pub pivot: [f64; 3],
    pub pixel_spacing: f64,
    pub rows: usize,
    pub cols: usize,
}

/// Result of mapping a frame pixel into the grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub point: [f64; 3],
    /// Nearest voxel, when it lies inside the grid.
    pub voxel: Option<Voxel>,
}

impl Projection {
    pub fn in_bounds(&self) -> bool {
        self.voxel.is_some()
    }
}

impl FramePose {
    /// Unit column direction in grid coordinates.
    pub fn column_axis(&self) -> [f64; 3] {
        [0.0, self.angle_rad.cos(), self.angle_rad.sin()]
    }

    pub fn normal(&self) -> [f64; 3] {
        [0.0, -self.angle_rad.sin(), self.angle_rad.cos()]
    }

    fn center_pixel(&self) -> (f64, f64) {
        (
            (self.rows as f64 - 1.0) / 2.0,
            (self.cols as f64 - 1.0) / 2.0,
        )
    }

    pub fn project(&self, pixel: (f64, f64)) -> [f64; 3] {
        let (rc, cc) = self.center_pixel();
        let dr = (pixel.0 - rc) * self.pixel_spacing;
        let dc = (pixel.1 - cc) * self.pixel_spacing;
        let h = self.column_axis();
        [
            self.pivot[0] + dr,
            self.pivot[1] + dc * h[1],
            self.pivot[2] + dc * h[2],
        ]
    }

    /// In-plane pixel coordinates of a grid point; the out-of-plane component
    /// is discarded.
    pub fn unproject(&self, point: [f64; 3]) -> (f64, f64) {
        let (rc, cc) = self.center_pixel();
        let h = self.column_axis();
        let d = sub(point, self.pivot);
        (
            d[0] / self.pixel_spacing + rc,
            (d[1] * h[1] + d[2] * h[2]) / self.pixel_spacing + cc,
        )
    }

    /// Signed distance of a grid point from the frame plane.
    pub fn plane_offset(&self, point: [f64; 3]) -> f64 {
        let n = self.normal();
        let d = sub(point, self.pivot);
        d[1] * n[1] + d[2] * n[2]
    }

    fn within_extent(&self, pixel: (f64, f64)) -> bool {
        pixel.0 >= -0.5
            && pixel.0 < self.rows as f64 - 0.5
            && pixel.1 >= -0.5
            && pixel.1 < self.cols as f64 - 0.5
    }

    /// Half-open half-voxel slab around the plane, clipped to the frame.
    pub fn contains_voxel(&self, v: Voxel) -> bool {
        let p = v.map(|c| c as f64);
        let off = self.plane_offset(p);
        (-0.5..0.5).contains(&off) && self.within_extent(self.unproject(p))
    }

    pub fn pixel_of_voxel(&self, v: Voxel) -> (f64, f64) {
        self.unproject(v.map(|c| c as f64))
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameStack {
    pub meta: GridMeta,
    pub poses: Vec<FramePose>,
}

impl FrameStack {
    pub fn new(meta: GridMeta, poses: Vec<FramePose>) -> Result<Self> {
        if poses.len() < 2 {
            return Err(Error::InvalidParams("a sweep needs at least two frames".into()));
        }
        if poses.windows(2).any(|w| w[0].frame_id >= w[1].frame_id) {
            return Err(Error::InvalidParams("frame ids must be unique and increasing".into()));
        }
        Ok(Self { meta, poses })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn pose(&self, frame_id: usize) -> Option<&FramePose> {
        self.poses.iter().find(|p| p.frame_id == frame_id)
    }

    pub fn position(&self, frame_id: usize) -> Option<usize> {
        self.poses.iter().position(|p| p.frame_id == frame_id)
    }

    /// Rasterized plane of every frame, in pose order.
    pub fn planes(&self) -> Vec<VoxelSet> {
        self.poses
            .iter()
            .map(|p| rasterize_frame_plane(p, &self.meta))
            .collect()
    }
}

/// Uniformly spaced poses `angle_f = f * span / n_frames` about a vertical
/// axis through `pivot` (grid center when `None`).
pub fn synthesize_sweep(
    meta: GridMeta,
    n_frames: usize,
    span_rad: f64,
    pivot: Option<[f64; 3]>,
) -> Result<FrameStack> {
    if n_frames < 2 {
        return Err(Error::InvalidParams(format!("n_frames must be >= 2, got {n_frames}")));
    }
    if !(span_rad > 0.0 && span_rad <= 2.0 * PI) {
        return Err(Error::InvalidParams(format!("sweep span {span_rad} outside (0, 2pi]")));
    }
    let pivot = pivot.unwrap_or_else(|| meta.center());
    let [h, w, d] = meta.dims;
    let cols = ((w * w + d * d) as f64).sqrt().ceil() as usize;
    let poses = (0..n_frames)
        .map(|f| FramePose {
            frame_id: f,
            angle_rad: f as f64 * span_rad / n_frames as f64,
            pivot,
            pixel_spacing: 1.0,
            rows: h,
            cols,
        })
        .collect();
    FrameStack::new(meta, poses)
}

pub fn project_pixel_to_voxel(pose: &FramePose, meta: &GridMeta, pixel: (f64, f64)) -> Projection {
    let point = pose.project(pixel);
    let rounded = point.map(|c| c.round() as i64);
    let voxel = meta
        .contains_signed(rounded)
        .then(|| rounded.map(|c| c as usize));
    Projection { point, voxel }
}

/// Closest voxel to `point` (Euclidean, lowest index on ties) that belongs to
/// the rasterized frame plane.
pub fn snap_to_plane(pose: &FramePose, meta: &GridMeta, point: [f64; 3]) -> Option<Voxel> {
    let base = point.map(|c| c.round() as i64);
    let mut best: Option<(f64, usize, Voxel)> = None;
    for di in -1..=1 {
        for dj in -1..=1 {
            for dk in -1..=1 {
                let c = [base[0] + di, base[1] + dj, base[2] + dk];
                if !meta.contains_signed(c) {
                    continue;
                }
                let v = c.map(|x| x as usize);
                if !pose.contains_voxel(v) {
                    continue;
                }
                let d2: f64 = (0..3).map(|a| (v[a] as f64 - point[a]).powi(2)).sum();
                let idx = meta.index(v);
                if best.map_or(true, |(bd, bi, _)| d2 < bd || (d2 == bd && idx < bi)) {
                    best = Some((d2, idx, v));
                }
            }
        }
    }
    best.map(|(_, _, v)| v)
}

pub fn rasterize_frame_plane(pose: &FramePose, meta: &GridMeta) -> VoxelSet {
    let [h, w, d] = meta.dims;
    let mut pts = Vec::new();
    for j in 0..w {
        for k in 0..d {
            // the plane offset does not depend on i
            let off = pose.plane_offset([0.0, j as f64, k as f64]);
            if !(-0.5..0.5).contains(&off) {
                continue;
            }
            for i in 0..h {
                if pose.contains_voxel([i, j, k]) {
                    pts.push([i, j, k]);
                }
            }
        }
    }
    VoxelSet::new(*meta, pts).expect("rasterized voxels lie in the grid")
}

/// Mask-boundary voxels on the frame plane.
pub fn extract_plane_contour(mask: &BinaryMask, pose: &FramePose) -> VoxelSet {
    let plane = rasterize_frame_plane(pose, mask.meta());
    contour_on_plane(mask, &plane)
}

pub fn contour_on_plane(mask: &BinaryMask, plane: &VoxelSet) -> VoxelSet {
    let pts: Vec<Voxel> = plane
        .points()
        .iter()
        .copied()
        .filter(|&v| mask.is_boundary(v))
        .collect();
    VoxelSet::new(*mask.meta(), pts).expect("plane voxels lie in the grid")
}

/// Per-frame contours of `mask` on precomputed planes.
pub fn contours_on_planes(mask: &BinaryMask, planes: &[VoxelSet]) -> Vec<VoxelSet> {
    planes.iter().map(|p| contour_on_plane(mask, p)).collect()
}

/// 26-adjacency; on a single frame plane this is in-plane 8-connectivity.
pub fn adjacent(a: Voxel, b: Voxel) -> bool {
    a != b && (0..3).all(|x| a[x].abs_diff(b[x]) <= 1)
}
