//! Interactive editing sessions: a case, an engine and a history of edits.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engines::{Engine, EngineInput};
use crate::error::{Error, Result};
use crate::geometry::{contour_on_plane, project_pixel_to_voxel, FramePose};
use crate::harness::EngineId;
use crate::interaction::{encode_edit, EditConfig, EditRecord, PixelScribble};
use crate::metrics::{evaluate, no_edit_baseline, MetricReport};
use crate::phantom::CaseBundle;
use crate::volume::{threshold_map, BinaryMask, VoxelSet};

#[derive(Clone, Debug)]
pub struct HistoryEntry {
    pub input: PixelScribble,
    pub record: EditRecord,
    pub mask: BinaryMask,
    pub report: MetricReport,
}

/// Everything needed to rebuild a session from scratch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub case: String,
    pub engine: EngineId,
    pub edit: EditConfig,
    pub scribbles: Vec<PixelScribble>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditOutcome {
    pub t: usize,
    pub metrics: MetricReport,
    pub changed_frames: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UndoOutcome {
    /// Iteration index of the state now current; `None` at the initial state.
    pub t: Option<usize>,
    pub metrics: MetricReport,
    pub changed_frames: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameInfo {
    pub frame_id: usize,
    pub angle_rad: f64,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameContours {
    pub cas: Vec<[f64; 2]>,
    pub current: Vec<[f64; 2]>,
    pub initial: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub t: usize,
    pub frame_id: usize,
    pub metrics: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub baseline: MetricReport,
    pub iterations: Vec<IterationMetrics>,
}

pub struct Session {
    pub case: Arc<CaseBundle>,
    pub engine_id: EngineId,
    engine: Arc<Engine>,
    pub edit: EditConfig,
    planes: Vec<VoxelSet>,
    baseline: MetricReport,
    history: Vec<HistoryEntry>,
}

impl Session {
    pub fn new(case: Arc<CaseBundle>, engine_id: EngineId, engine: Arc<Engine>, edit: EditConfig) -> Result<Self> {
        let planes = case.frames.planes();
        let baseline = no_edit_baseline(&case)?;
        Ok(Self {
            case,
            engine_id,
            engine,
            edit,
            planes,
            baseline,
            history: Vec::new(),
        })
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    /// The segmentation the next edit starts from.
    pub fn current(&self) -> &BinaryMask {
        self.history.last().map_or(&self.case.y_init, |h| &h.mask)
    }

    pub fn frames(&self) -> Vec<FrameInfo> {
        self.case
            .frames
            .poses
            .iter()
            .map(|p| FrameInfo {
                frame_id: p.frame_id,
                angle_rad: p.angle_rad,
                rows: p.rows,
                cols: p.cols,
            })
            .collect()
    }

    fn pose(&self, frame_id: usize) -> Result<(&FramePose, usize)> {
        let pos = self
            .case
            .frames
            .position(frame_id)
            .ok_or(Error::UnknownFrame(frame_id))?;
        Ok((&self.case.frames.poses[pos], pos))
    }

    pub fn frame_image(&self, frame_id: usize) -> Result<(usize, usize, Vec<f64>)> {
        frame_image(&self.case, frame_id)
    }

    pub fn frame_contours(&self, frame_id: usize) -> Result<FrameContours> {
        let (pose, pos) = self.pose(frame_id)?;
        let plane = &self.planes[pos];
        Ok(FrameContours {
            cas: polyline(pose, &self.case.cas_contours[pos]),
            current: polyline(pose, &contour_on_plane(self.current(), plane)),
            initial: polyline(pose, &contour_on_plane(&self.case.y_init, plane)),
        })
    }

    fn changed_frames(&self, before: &BinaryMask, after: &BinaryMask) -> Vec<usize> {
        self.case
            .frames
            .poses
            .iter()
            .zip(&self.planes)
            .filter(|(_, plane)| contour_on_plane(before, plane) != contour_on_plane(after, plane))
            .map(|(p, _)| p.frame_id)
            .collect()
    }

    pub fn submit(&mut self, input: &PixelScribble) -> Result<EditOutcome> {
        self.pose(input.frame_id)?;
        let scribble = input.to_scribble(&self.case.frames)?;
        let t = self.history.len();
        let record = encode_edit(&scribble, self.case.meta, self.edit.sigma_enc, self.edit.sigma_edit, t)?;
        let previous = self.current().clone();
        let engine_input = EngineInput::new(self.case.x.clone(), previous.clone(), record.u.clone())?;
        let mask = threshold_map(&self.engine.apply(&engine_input, &record.a)?, 0.5)?;
        let report = evaluate(&self.case.with_initial(previous.clone()), &mask, &record)?;
        let changed_frames = self.changed_frames(&previous, &mask);
        self.history.push(HistoryEntry {
            input: input.clone(),
            record,
            mask,
            report: report.clone(),
        });
        Ok(EditOutcome {
            t,
            metrics: report,
            changed_frames,
        })
    }

    pub fn undo(&mut self) -> Result<UndoOutcome> {
        let popped = self.history.pop().ok_or(Error::NothingToUndo)?;
        let changed_frames = self.changed_frames(&popped.mask, self.current());
        Ok(UndoOutcome {
            t: self.history.len().checked_sub(1),
            metrics: self.current_report().clone(),
            changed_frames,
        })
    }

    /// Report of the current state: the last edit's, or the no-edit baseline.
    pub fn current_report(&self) -> &MetricReport {
        self.history.last().map_or(&self.baseline, |h| &h.report)
    }

    pub fn metrics(&self) -> SessionMetrics {
        SessionMetrics {
            baseline: self.baseline.clone(),
            iterations: self
                .history
                .iter()
                .enumerate()
                .map(|(t, h)| IterationMetrics {
                    t,
                    frame_id: h.input.frame_id,
                    metrics: h.report.clone(),
                })
                .collect(),
        }
    }

    pub fn log(&self) -> SessionLog {
        SessionLog {
            case: self.case.id.clone(),
            engine: self.engine_id,
            edit: self.edit,
            scribbles: self.history.iter().map(|h| h.input.clone()).collect(),
        }
    }

    /// Rebuilds a session by resubmitting every logged scribble.
    pub fn replay(log: &SessionLog, case: Arc<CaseBundle>, engine: Arc<Engine>) -> Result<Self> {
        if case.id != log.case {
            return Err(Error::InvalidParams(format!("log is for case {}, not {}", log.case, case.id)));
        }
        let mut s = Session::new(case, log.engine, engine, log.edit)?;
        for input in &log.scribbles {
            s.submit(input)?;
        }
        Ok(s)
    }
}

/// Intensities sampled at each pixel centre of a frame, row-major; zero
/// outside the grid. Returns `(rows, cols, values)`.
pub fn frame_image(case: &CaseBundle, frame_id: usize) -> Result<(usize, usize, Vec<f64>)> {
    let pose = case.frames.pose(frame_id).ok_or(Error::UnknownFrame(frame_id))?;
    let mut out = Vec::with_capacity(pose.rows * pose.cols);
    for r in 0..pose.rows {
        for c in 0..pose.cols {
            let p = project_pixel_to_voxel(pose, &case.meta, (r as f64, c as f64));
            out.push(p.voxel.map_or(0.0, |v| case.x.get(v)));
        }
    }
    Ok((pose.rows, pose.cols, out))
}

/// Contour voxels as a pixel path, chained greedily from the top-left point
/// to the nearest unvisited one (lowest index on ties).
pub fn polyline(pose: &FramePose, contour: &VoxelSet) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = contour
        .points()
        .iter()
        .map(|&v| {
            let (r, c) = pose.pixel_of_voxel(v);
            [r, c]
        })
        .collect();
    if pts.is_empty() {
        return pts;
    }
    let start = (0..pts.len())
        .min_by(|&a, &b| pts[a][0].total_cmp(&pts[b][0]).then(pts[a][1].total_cmp(&pts[b][1])))
        .expect("non-empty");
    pts.swap(0, start);
    for i in 1..pts.len() {
        let last = pts[i - 1];
        let d2 = |p: &[f64; 2]| (p[0] - last[0]).powi(2) + (p[1] - last[1]).powi(2);
        let next = (i..pts.len())
            .min_by(|&a, &b| d2(&pts[a]).total_cmp(&d2(&pts[b])).then(a.cmp(&b)))
            .expect("non-empty tail");
        pts.swap(i, next);
    }
    pts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interaction::select_test_edit;
    use crate::phantom::PhantomParams;
    use crate::volume::GridMeta;
    use std::collections::BTreeSet;

    fn case() -> Arc<CaseBundle> {
        let meta = GridMeta::cube(32, 1.0).unwrap();
        let params = PhantomParams {
            base_radii: [8.0, 7.0, 7.0],
            n_frames: 6,
            ..PhantomParams::default()
        };
        Arc::new(CaseBundle::generate("c0", meta, &params, 2.5, 3).unwrap())
    }

    fn cfg() -> EditConfig {
        EditConfig {
            sigma_enc: 4.0,
            sigma_edit: 4.0,
            ..EditConfig::default()
        }
    }

    fn worst_edit(s: &Session, excluded: &BTreeSet<usize>) -> PixelScribble {
        let c = &s.case;
        let e = select_test_edit(s.current(), &c.cas_contours, &c.frames, &c.frames.planes(), excluded, &s.edit).unwrap();
        PixelScribble::from_scribble(&e.scribble, &c.frames).unwrap()
    }

    #[test]
    fn boundary_scribble_is_a_fixed_point() {
        let c = case();
        let mut s = Session::new(c.clone(), EngineId::Geometric, Arc::new(Engine::Geometric), cfg()).unwrap();
        let before: Vec<_> = s.frames().iter().map(|f| s.frame_contours(f.frame_id).unwrap()).collect();
        let plane = &c.frames.planes()[0];
        let contour = contour_on_plane(&c.y_init, plane);
        let seg = crate::interaction::geodesic_segment(&c.meta, contour.points(), contour.points()[0], 7);
        let px = PixelScribble::from_scribble(
            &crate::interaction::Scribble {
                frame_id: 0,
                path: seg,
            },
            &c.frames,
        )
        .unwrap();
        let out = s.submit(&px).unwrap();
        assert_eq!(out.t, 0);
        assert!(out.changed_frames.is_empty());
        let after: Vec<_> = s.frames().iter().map(|f| s.frame_contours(f.frame_id).unwrap()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn undo_restores_and_replay_reproduces() {
        let c = case();
        let engine = Arc::new(Engine::Geometric);
        let mut s = Session::new(c.clone(), EngineId::Geometric, engine.clone(), cfg()).unwrap();
        let e1 = worst_edit(&s, &BTreeSet::new());
        let r1 = s.submit(&e1).unwrap();
        let after_first = s.current().clone();
        let e2 = worst_edit(&s, &[e1.frame_id].into());
        assert_eq!(s.submit(&e2).unwrap().t, 1);
        let undone = s.undo().unwrap();
        assert_eq!(undone.t, Some(0));
        assert_eq!(s.current(), &after_first);
        assert_eq!(undone.metrics, r1.metrics);
        let again = s.submit(&e2).unwrap();
        let replayed = Session::replay(&s.log(), c.clone(), engine).unwrap();
        assert_eq!(replayed.current(), s.current());
        assert_eq!(replayed.metrics(), s.metrics());
        assert_eq!(again.t, 1);
        s.undo().unwrap();
        s.undo().unwrap();
        assert_eq!(s.current(), &c.y_init);
        assert!(s.undo().unwrap_err().to_string().contains("nothing to undo"));
    }

    #[test]
    fn sessions_are_independent() {
        let c = case();
        let engine = Arc::new(Engine::Geometric);
        let mut a = Session::new(c.clone(), EngineId::Geometric, engine.clone(), cfg()).unwrap();
        let b = Session::new(c.clone(), EngineId::Geometric, engine, cfg()).unwrap();
        a.submit(&worst_edit(&a, &BTreeSet::new())).unwrap();
        assert_eq!(a.history().len(), 1);
        assert!(b.history().is_empty());
        assert_eq!(b.current(), &c.y_init);
    }

    #[test]
    fn far_frames_are_untouched_by_geometric_edits() {
        let c = case();
        let mut s = Session::new(c.clone(), EngineId::Geometric, Arc::new(Engine::Geometric), cfg()).unwrap();
        let e = worst_edit(&s, &BTreeSet::new());
        let before: Vec<_> = s.frames().iter().map(|f| s.frame_contours(f.frame_id).unwrap().current).collect();
        s.submit(&e).unwrap();
        let a = &s.history()[0].record.a;
        for (pos, plane) in c.frames.planes().iter().enumerate() {
            if plane.points().iter().all(|&v| a.get(v) < 0.01) {
                let fid = c.frames.poses[pos].frame_id;
                assert_eq!(s.frame_contours(fid).unwrap().current, before[pos]);
            }
        }
    }

    #[test]
    fn frame_image_and_polylines() {
        let c = case();
        let s = Session::new(c.clone(), EngineId::Geometric, Arc::new(Engine::Geometric), cfg()).unwrap();
        let (rows, cols, img) = s.frame_image(0).unwrap();
        assert_eq!(img.len(), rows * cols);
        assert!(img.iter().any(|&v| v > 0.0));
        let fc = s.frame_contours(0).unwrap();
        assert_eq!(fc.cas.len(), c.cas_contours[0].len());
        assert!(s.frame_contours(99).is_err());
    }

    #[test]
    fn polyline_chains_points() {
        let meta = GridMeta::cube(8, 1.0).unwrap();
        let frames = crate::geometry::synthesize_sweep(meta, 2, std::f64::consts::PI, None).unwrap();
        let pose = &frames.poses[0];
        let plane = &frames.planes()[0];
        let pts: Vec<_> = plane.points().iter().copied().filter(|v| v[0] == 3).collect();
        let line = polyline(pose, &VoxelSet::new(meta, pts.clone()).unwrap());
        assert_eq!(line.len(), pts.len());
        for w in line.windows(2) {
            let d = ((w[0][0] - w[1][0]).powi(2) + (w[0][1] - w[1][1]).powi(2)).sqrt();
            assert!(d <= 1.0 + 1e-9, "{w:?}");
        }
    }
}
