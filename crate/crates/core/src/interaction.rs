//! Simulated and user-supplied scribbles and their Gaussian encodings.

use std::collections::{BTreeSet, HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{adjacent, contour_on_plane, snap_to_plane, FrameStack};
use crate::volume::{make_gaussian_map, manhattan_dt_raw, BinaryMask, GridMeta, ScalarField, Voxel, VoxelSet};

/// Interaction settings. Defaults are the published values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditConfig {
    pub sigma_enc: f64,
    pub sigma_edit: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            sigma_enc: 20.0,
            sigma_edit: 20.0,
            min_len: 5,
            max_len: 41,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scribble {
    pub frame_id: usize,
    pub path: Vec<Voxel>,
}

impl Scribble {
    /// Checks the path invariants against the sweep.
    pub fn validate(&self, frames: &FrameStack) -> Result<()> {
        let pose = frames
            .pose(self.frame_id)
            .ok_or_else(|| Error::InvalidScribble(format!("unknown frame {}", self.frame_id)))?;
        if self.path.len() < 2 {
            return Err(Error::InvalidScribble("a scribble needs at least 2 points".into()));
        }
        let mut seen = BTreeSet::new();
        for (n, &v) in self.path.iter().enumerate() {
            if (0..3).any(|a| v[a] >= frames.meta.dims[a]) || !pose.contains_voxel(v) {
                return Err(Error::InvalidScribble(format!("point {v:?} is not on frame {}", self.frame_id)));
            }
            if !seen.insert(v) {
                return Err(Error::InvalidScribble(format!("path revisits {v:?}")));
            }
            if n > 0 && !adjacent(self.path[n - 1], v) {
                return Err(Error::InvalidScribble(format!(
                    "disconnected path between {:?} and {v:?}",
                    self.path[n - 1]
                )));
            }
        }
        Ok(())
    }

    pub fn voxel_set(&self, meta: GridMeta) -> Result<VoxelSet> {
        VoxelSet::new(meta, self.path.iter().copied())
    }
}

/// Wire form of a scribble: frame-pixel `[row, col]` coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelScribble {
    pub frame_id: usize,
    pub path: Vec<[f64; 2]>,
}

impl PixelScribble {
    pub fn from_scribble(s: &Scribble, frames: &FrameStack) -> Result<Self> {
        let pose = frames
            .pose(s.frame_id)
            .ok_or_else(|| Error::InvalidScribble(format!("unknown frame {}", s.frame_id)))?;
        Ok(Self {
            frame_id: s.frame_id,
            path: s
                .path
                .iter()
                .map(|&v| {
                    let (r, c) = pose.pixel_of_voxel(v);
                    [r, c]
                })
                .collect(),
        })
    }

    /// Maps pixels onto plane voxels. Consecutive duplicates after snapping
    /// collapse into one point; the voxel path must then be connected.
    pub fn to_scribble(&self, frames: &FrameStack) -> Result<Scribble> {
        let pose = frames
            .pose(self.frame_id)
            .ok_or_else(|| Error::InvalidScribble(format!("unknown frame {}", self.frame_id)))?;
        if self.path.len() < 2 {
            return Err(Error::InvalidScribble("a scribble needs at least 2 points".into()));
        }
        let mut path: Vec<Voxel> = Vec::with_capacity(self.path.len());
        for px in &self.path {
            if !px.iter().all(|c| c.is_finite()) {
                return Err(Error::InvalidScribble("non-finite coordinate".into()));
            }
            let point = pose.project((px[0], px[1]));
            let v = snap_to_plane(pose, &frames.meta, point).ok_or_else(|| {
                Error::InvalidScribble(format!("pixel {px:?} falls outside the grid"))
            })?;
            if path.last() != Some(&v) {
                path.push(v);
            }
        }
        let s = Scribble {
            frame_id: self.frame_id,
            path,
        };
        s.validate(frames)?;
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditRecord {
    pub t: usize,
    pub scribble: Scribble,
    pub u: ScalarField,
    pub a: ScalarField,
    pub sigma_enc: f64,
    pub sigma_edit: f64,
}

pub fn encode_edit(
    scribble: &Scribble,
    meta: GridMeta,
    sigma_enc: f64,
    sigma_edit: f64,
    t: usize,
) -> Result<EditRecord> {
    let set = scribble.voxel_set(meta)?;
    let u = make_gaussian_map(&set, sigma_enc)?;
    let a = if sigma_edit == sigma_enc {
        u.clone()
    } else {
        make_gaussian_map(&set, sigma_edit)?
    };
    Ok(EditRecord {
        t,
        scribble: scribble.clone(),
        u,
        a,
        sigma_enc,
        sigma_edit,
    })
}

/// Dense lookup from linear index to position in a point list.
fn index_of(meta: &GridMeta, pts: &[Voxel]) -> HashMap<usize, usize> {
    pts.iter().enumerate().map(|(n, &v)| (meta.index(v), n)).collect()
}

fn bfs(meta: &GridMeta, pts: &[Voxel], blocked: &[bool], start: usize) -> (Vec<usize>, Vec<usize>) {
    let lookup = index_of(meta, pts);
    let mut dist = vec![usize::MAX; pts.len()];
    let mut parent = vec![usize::MAX; pts.len()];
    let mut queue = VecDeque::from([start]);
    dist[start] = 0;
    while let Some(n) = queue.pop_front() {
        let v = pts[n];
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                for dk in -1i64..=1 {
                    let w = [v[0] as i64 + di, v[1] as i64 + dj, v[2] as i64 + dk];
                    if !meta.contains_signed(w) {
                        continue;
                    }
                    let w = w.map(|c| c as usize);
                    if let Some(&m) = lookup.get(&meta.index(w)) {
                        if dist[m] == usize::MAX && !blocked[m] {
                            dist[m] = dist[n] + 1;
                            parent[m] = n;
                            queue.push_back(m);
                        }
                    }
                }
            }
        }
    }
    (dist, parent)
}

fn farthest_within(meta: &GridMeta, pts: &[Voxel], dist: &[usize], budget: usize) -> usize {
    let mut best = None;
    for (n, &d) in dist.iter().enumerate() {
        if d == usize::MAX || d > budget {
            continue;
        }
        let key = (d, std::cmp::Reverse(meta.index(pts[n])));
        if best.map_or(true, |(k, _)| key > k) {
            best = Some((key, n));
        }
    }
    best.map(|(_, n)| n).expect("start point is always reachable")
}

fn trace(parent: &[usize], end: usize) -> Vec<usize> {
    let mut path = vec![end];
    let mut cur = end;
    while parent[cur] != usize::MAX {
        cur = parent[cur];
        path.push(cur);
    }
    path.reverse();
    path
}

/// Connected, repeat-free path of at most `max_len` points through `center`,
/// built from two shortest-path arms inside `pts` (26-adjacency).
pub fn geodesic_segment(meta: &GridMeta, pts: &[Voxel], center: Voxel, max_len: usize) -> Vec<Voxel> {
    let Some(c) = pts.iter().position(|&p| p == center) else {
        return Vec::new();
    };
    if max_len <= 1 {
        return vec![center];
    }
    let no_block = vec![false; pts.len()];
    let (dist, parent) = bfs(meta, pts, &no_block, c);
    let first = trace(&parent, farthest_within(meta, pts, &dist, (max_len - 1) / 2));

    let budget = max_len - first.len();
    let mut blocked = vec![false; pts.len()];
    for &n in &first[1..] {
        blocked[n] = true;
    }
    // keep the second arm from running alongside the first
    let mut strict = blocked.clone();
    for (n, &p) in pts.iter().enumerate() {
        if first.iter().skip(2).any(|&m| adjacent(pts[m], p)) && n != c {
            strict[n] = true;
        }
    }
    let mut second = {
        let (d, p) = bfs(meta, pts, &strict, c);
        trace(&p, farthest_within(meta, pts, &d, budget))
    };
    if second.len() == 1 {
        let (d, p) = bfs(meta, pts, &blocked, c);
        second = trace(&p, farthest_within(meta, pts, &d, budget));
    }
    second
        .iter()
        .rev()
        .chain(first.iter().skip(1))
        .map(|&n| pts[n])
        .collect()
}

fn closest_to_centroid(meta: &GridMeta, pts: &[Voxel]) -> Voxel {
    let n = pts.len() as f64;
    let mut c = [0.0; 3];
    for p in pts {
        for a in 0..3 {
            c[a] += p[a] as f64 / n;
        }
    }
    *pts.iter()
        .min_by(|a, b| {
            let da: f64 = (0..3).map(|x| (a[x] as f64 - c[x]).powi(2)).sum();
            let db: f64 = (0..3).map(|x| (b[x] as f64 - c[x]).powi(2)).sum();
            da.total_cmp(&db).then(meta.index(**a).cmp(&meta.index(**b)))
        })
        .expect("non-empty point list")
}

/// 26-connected components of a point list, each sorted by linear index.
fn components(meta: &GridMeta, pts: &[Voxel]) -> Vec<Vec<Voxel>> {
    let mut label = vec![false; pts.len()];
    let mut out = Vec::new();
    for start in 0..pts.len() {
        if label[start] {
            continue;
        }
        let (dist, _) = bfs(meta, pts, &label, start);
        let comp: Vec<Voxel> = dist
            .iter()
            .enumerate()
            .filter(|(_, &d)| d != usize::MAX)
            .map(|(n, _)| {
                label[n] = true;
                pts[n]
            })
            .collect();
        out.push(comp);
    }
    out
}

/// Training-time edit: on the frame with the most `y`/`y_init` disagreement,
/// a path along the ground-truth boundary through the largest disagreement
/// region.
pub fn synthesize_training_edit(
    y_init: &BinaryMask,
    y: &BinaryMask,
    frames: &FrameStack,
    planes: &[VoxelSet],
    seed: u64,
    cfg: &EditConfig,
) -> Result<Scribble> {
    let meta = *y.meta();
    y.meta().check_same(y_init.meta())?;
    let mut ranked: Vec<(usize, usize, Vec<Voxel>)> = frames
        .poses
        .iter()
        .zip(planes)
        .map(|(pose, plane)| {
            let wrong: Vec<Voxel> = plane
                .points()
                .iter()
                .copied()
                .filter(|&v| y.get(v) != y_init.get(v))
                .collect();
            (pose.frame_id, wrong.len(), wrong)
        })
        .filter(|(_, n, _)| *n > 0)
        .collect();
    if ranked.is_empty() {
        return Err(Error::NothingToEdit);
    }
    // most disagreement first, lower frame id on ties
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for (frame_id, _, wrong) in ranked {
        let plane = &planes[frames.position(frame_id).expect("frame from this stack")];
        let contour = contour_on_plane(y, plane);
        if contour.len() < 2 {
            continue;
        }
        let comps = components(&meta, &wrong);
        let largest = comps.iter().map(Vec::len).max().expect("non-empty");
        let tied: Vec<&Vec<Voxel>> = comps.iter().filter(|c| c.len() == largest).collect();
        let region = tied[if tied.len() > 1 { rng.gen_range(0..tied.len()) } else { 0 }];

        let in_region: std::collections::HashSet<usize> = region.iter().map(|&v| meta.index(v)).collect();
        let touches = |v: Voxel| {
            (-1i64..=1).any(|di| {
                (-1i64..=1).any(|dj| {
                    (-1i64..=1).any(|dk| {
                        let w = [v[0] as i64 + di, v[1] as i64 + dj, v[2] as i64 + dk];
                        meta.contains_signed(w) && in_region.contains(&meta.index(w.map(|c| c as usize)))
                    })
                })
            })
        };
        let mut candidates: Vec<Voxel> = contour.points().iter().copied().filter(|&v| touches(v)).collect();
        if candidates.is_empty() {
            // isolated error blob: use the nearest ground-truth boundary point
            let dt = manhattan_dt_raw(&meta, region)?;
            let nearest = *contour
                .points()
                .iter()
                .min_by_key(|&&v| (dt[meta.index(v)], meta.index(v)))
                .expect("non-empty contour");
            candidates.push(nearest);
        }
        let center = closest_to_centroid(&meta, &candidates);
        let mut path = geodesic_segment(&meta, &candidates, center, cfg.max_len);
        if path.len() < cfg.min_len {
            path = geodesic_segment(&meta, contour.points(), center, cfg.min_len);
        }
        if path.len() >= 2 {
            return Ok(Scribble { frame_id, path });
        }
    }
    Err(Error::NothingToEdit)
}

/// Scribble that confirms `y` where it already is correct: a segment of the
/// longest plane contour, centred on the point nearest its centroid.
pub fn confirming_edit(y: &BinaryMask, frames: &FrameStack, planes: &[VoxelSet], cfg: &EditConfig) -> Result<Scribble> {
    let meta = *y.meta();
    let (frame_id, contour) = frames
        .poses
        .iter()
        .zip(planes)
        .map(|(p, plane)| (p.frame_id, contour_on_plane(y, plane)))
        .fold(None::<(usize, VoxelSet)>, |best, (id, c)| match best {
            Some((_, ref b)) if b.len() >= c.len() => best,
            _ => Some((id, c)),
        })
        .ok_or(Error::NothingToEdit)?;
    if contour.len() < 2 {
        return Err(Error::NothingToEdit);
    }
    let center = closest_to_centroid(&meta, contour.points());
    let path = geodesic_segment(&meta, contour.points(), center, cfg.max_len);
    if path.len() < 2 {
        return Err(Error::NothingToEdit);
    }
    Ok(Scribble { frame_id, path })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TestEdit {
    pub scribble: Scribble,
    /// Largest Manhattan distance (voxels) from the chosen contour to the
    /// predicted surface.
    pub score: u32,
}

/// Test-time edit: the ground-truth contour farthest from the prediction,
/// skipping frames in `excluded`.
pub fn select_test_edit(
    y_hat: &BinaryMask,
    cas_contours: &[VoxelSet],
    frames: &FrameStack,
    planes: &[VoxelSet],
    excluded: &BTreeSet<usize>,
    cfg: &EditConfig,
) -> Result<TestEdit> {
    let meta = *y_hat.meta();
    let predicted = VoxelSet::union(meta, &crate::geometry::contours_on_planes(y_hat, planes));
    if predicted.is_empty() {
        return Err(Error::NoPredictedSurface);
    }
    let dt = manhattan_dt_raw(&meta, predicted.points())?;
    let mut best: Option<(u32, usize, Voxel, usize)> = None;
    for (pos, (pose, contour)) in frames.poses.iter().zip(cas_contours).enumerate() {
        if excluded.contains(&pose.frame_id) || contour.len() < 2 {
            continue;
        }
        let (score, far) = contour
            .points()
            .iter()
            .map(|&v| (dt[meta.index(v)], v))
            .min_by(|a, b| b.0.cmp(&a.0).then(meta.index(a.1).cmp(&meta.index(b.1))))
            .expect("non-empty contour");
        if best.map_or(true, |(s, _, _, _)| score > s) {
            best = Some((score, pose.frame_id, far, pos));
        }
    }
    let (score, frame_id, far, pos) = best.ok_or(Error::NoCandidateEdits)?;
    let path = geodesic_segment(&meta, cas_contours[pos].points(), far, cfg.max_len);
    Ok(TestEdit {
        scribble: Scribble { frame_id, path },
        score,
    })
}
