//! Contour-distance editing metric and its summary statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::contours_on_planes;
use crate::interaction::EditRecord;
use crate::phantom::CaseBundle;
use crate::volume::{manhattan_dt_raw, mean, percentile, BinaryMask, ScalarField, Voxel, VoxelSet};

pub const NEAR_THRESHOLD: f64 = 0.5;

/// How region weights enter the per-point distances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `A` on the edit term and `(1 - A) / 2` on the preservation terms.
    #[default]
    Soft,
    /// Unweighted distances: the edit term counts only where `A >= 0.5` and
    /// the preservation terms only where `A < 0.5`, each halved as above.
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub overall_p95_mm: f64,
    pub overall_mean_mm: f64,
    pub near_p95_mm: Option<f64>,
    pub near_mean_mm: Option<f64>,
    pub far_p95_mm: Option<f64>,
    pub far_mean_mm: Option<f64>,
    pub n_points: usize,
    pub n_points_near: usize,
    pub n_points_far: usize,
}

/// One contour voxel of the distance map, value in voxel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistanceSample {
    pub voxel: Voxel,
    pub value: f64,
    pub near: bool,
}

fn dt_or(targets: &VoxelSet, missing: Error) -> Result<Vec<u32>> {
    if targets.is_empty() {
        return Err(missing);
    }
    manhattan_dt_raw(targets.meta(), targets.points())
}

/// `A(p)` times the distance from each CAS point to the predicted contour.
pub fn d_edit(y_cas: &VoxelSet, y_hat_contour: &VoxelSet, a: &ScalarField) -> Result<Vec<(Voxel, f64)>> {
    y_cas.meta().check_same(a.meta())?;
    if y_cas.is_empty() {
        return Err(Error::EmptySet("CAS contour"));
    }
    let dt = dt_or(y_hat_contour, Error::NoPredictedSurface)?;
    let meta = y_cas.meta();
    Ok(y_cas
        .points()
        .iter()
        .map(|&p| (p, a.get(p) * f64::from(dt[meta.index(p)])))
        .collect())
}

/// `(1 - A) / 2` times the distance in both directions between the initial
/// and predicted contours. Initial-contour points come first.
pub fn d_preserve(
    y_init_contour: &VoxelSet,
    y_hat_contour: &VoxelSet,
    a: &ScalarField,
) -> Result<Vec<(Voxel, f64)>> {
    y_init_contour.meta().check_same(a.meta())?;
    let to_hat = dt_or(y_hat_contour, Error::NoPredictedSurface)?;
    let to_init = dt_or(y_init_contour, Error::EmptySet("initial contour"))?;
    let meta = a.meta();
    let term = |p: Voxel, dt: &[u32]| (p, (1.0 - a.get(p)) / 2.0 * f64::from(dt[meta.index(p)]));
    Ok(y_init_contour
        .points()
        .iter()
        .map(|&p| term(p, &to_hat))
        .chain(y_hat_contour.points().iter().map(|&q| term(q, &to_init)))
        .collect())
}

/// Sums edit and preservation contributions per voxel; samples come out
/// sorted by linear index.
pub fn distance_samples(
    y_cas: &VoxelSet,
    y_init: &BinaryMask,
    y_hat: &BinaryMask,
    planes: &[VoxelSet],
    a: &ScalarField,
    weighting: Weighting,
) -> Result<Vec<DistanceSample>> {
    let meta = *y_hat.meta();
    let hat = VoxelSet::union(meta, &contours_on_planes(y_hat, planes));
    let init = VoxelSet::union(meta, &contours_on_planes(y_init, planes));
    let weights = match weighting {
        Weighting::Soft => a.clone(),
        Weighting::Hard => ScalarField::from_fn(meta, |v| if a.get(v) >= NEAR_THRESHOLD { 1.0 } else { 0.0 }),
    };
    let mut map: BTreeMap<usize, f64> = BTreeMap::new();
    for (p, d) in d_edit(y_cas, &hat, &weights)?.into_iter().chain(d_preserve(&init, &hat, &weights)?) {
        *map.entry(meta.index(p)).or_insert(0.0) += d;
    }
    Ok(map
        .into_iter()
        .map(|(idx, value)| {
            let voxel = meta.voxel(idx);
            DistanceSample {
                voxel,
                value,
                near: a.get(voxel) >= NEAR_THRESHOLD,
            }
        })
        .collect())
}

/// Unweighted distances (voxels) from `points` to the nearest voxel of
/// `surface`.
pub fn point_to_surface(points: &[Voxel], surface: &VoxelSet) -> Result<Vec<f64>> {
    let dt = dt_or(surface, Error::NoPredictedSurface)?;
    Ok(points.iter().map(|&p| f64::from(dt[surface.meta().index(p)])).collect())
}

fn stats(values: &[f64], spacing: f64) -> Result<(f64, f64)> {
    Ok((percentile(values, 95.0)? * spacing, mean(values) * spacing))
}

impl MetricReport {
    pub fn from_samples(samples: &[DistanceSample], spacing_mm: f64) -> Result<Self> {
        let all: Vec<f64> = samples.iter().map(|s| s.value).collect();
        let near: Vec<f64> = samples.iter().filter(|s| s.near).map(|s| s.value).collect();
        let far: Vec<f64> = samples.iter().filter(|s| !s.near).map(|s| s.value).collect();
        let (overall_p95_mm, overall_mean_mm) = stats(&all, spacing_mm)?;
        let region = |v: &[f64]| if v.is_empty() { Ok(None) } else { stats(v, spacing_mm).map(Some) };
        let near_stats = region(&near)?;
        let far_stats = region(&far)?;
        Ok(Self {
            overall_p95_mm,
            overall_mean_mm,
            near_p95_mm: near_stats.map(|s| s.0),
            near_mean_mm: near_stats.map(|s| s.1),
            far_p95_mm: far_stats.map(|s| s.0),
            far_mean_mm: far_stats.map(|s| s.1),
            n_points: all.len(),
            n_points_near: near.len(),
            n_points_far: far.len(),
        })
    }

    /// Report without a region split.
    pub fn from_values(values: &[f64], spacing_mm: f64) -> Result<Self> {
        let (overall_p95_mm, overall_mean_mm) = stats(values, spacing_mm)?;
        Ok(Self {
            overall_p95_mm,
            overall_mean_mm,
            near_p95_mm: None,
            near_mean_mm: None,
            far_p95_mm: None,
            far_mean_mm: None,
            n_points: values.len(),
            n_points_near: 0,
            n_points_far: 0,
        })
    }
}

pub fn evaluate_with(
    case: &CaseBundle,
    planes: &[VoxelSet],
    y_hat: &BinaryMask,
    a: &ScalarField,
    weighting: Weighting,
) -> Result<Vec<DistanceSample>> {
    let cas = VoxelSet::union(case.meta, &case.cas_contours);
    distance_samples(&cas, &case.y_init, y_hat, planes, a, weighting)
}

pub fn evaluate(case: &CaseBundle, y_hat: &BinaryMask, edit: &EditRecord) -> Result<MetricReport> {
    let samples = evaluate_with(case, &case.frames.planes(), y_hat, &edit.a, Weighting::Soft)?;
    MetricReport::from_samples(&samples, case.meta.spacing_mm)
}

/// Unweighted distances (voxels) from all CAS points to the contours of
/// `mask`.
pub fn cas_to_mask(case: &CaseBundle, planes: &[VoxelSet], mask: &BinaryMask) -> Result<Vec<f64>> {
    let cas = VoxelSet::union(case.meta, &case.cas_contours);
    let surface = VoxelSet::union(case.meta, &contours_on_planes(mask, planes));
    point_to_surface(cas.points(), &surface)
}

pub fn no_edit_baseline(case: &CaseBundle) -> Result<MetricReport> {
    let values = cas_to_mask(case, &case.frames.planes(), &case.y_init)?;
    MetricReport::from_values(&values, case.meta.spacing_mm)
}

/// Mean symmetric Manhattan distance (voxels) between the full 3D
/// boundaries of two masks.
pub fn symmetric_surface_distance(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.meta().check_same(b.meta())?;
    let (ba, bb) = (a.boundary(), b.boundary());
    let ab = point_to_surface(ba.points(), &bb)?;
    let ba_d = point_to_surface(bb.points(), &ba)?;
    Ok((ab.iter().sum::<f64>() + ba_d.iter().sum::<f64>()) / (ab.len() + ba_d.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::synthesize_sweep;
    use crate::volume::{manhattan, GridMeta};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn brute_min(p: Voxel, set: &VoxelSet) -> f64 {
        set.points().iter().map(|&q| manhattan(p, q)).min().unwrap() as f64
    }

    fn random_set(m: GridMeta, rng: &mut ChaCha8Rng, n: usize) -> VoxelSet {
        let pts: Vec<Voxel> = (0..n)
            .map(|_| [0, 1, 2].map(|a| rng.gen_range(0..m.dims[a])))
            .collect();
        VoxelSet::new(m, pts).unwrap()
    }

    #[test]
    fn d_edit_examples() {
        let m = GridMeta::cube(8, 1.0).unwrap();
        let a = ScalarField::constant(m, 0.5);
        let cas = VoxelSet::new(m, [[1, 1, 1]]).unwrap();
        let hat = VoxelSet::new(m, [[1, 3, 3]]).unwrap();
        assert_eq!(d_edit(&cas, &hat, &a).unwrap(), vec![([1, 1, 1], 2.0)]);
        let covering = VoxelSet::new(m, [[1, 1, 1], [2, 2, 2]]).unwrap();
        assert!(d_edit(&cas, &covering, &a).unwrap().iter().all(|(_, d)| *d == 0.0));
        assert!(matches!(d_edit(&cas, &VoxelSet::empty(m), &a), Err(Error::NoPredictedSurface)));
    }

    #[test]
    fn d_preserve_examples() {
        let m = GridMeta::cube(12, 1.0).unwrap();
        let line = |j: usize| VoxelSet::new(m, (0..12).map(|i| [i, j, 5])).unwrap();
        let zero = ScalarField::constant(m, 0.0);
        let vals = d_preserve(&line(2), &line(5), &zero).unwrap();
        assert_eq!(vals.len(), 24);
        assert!(vals.iter().all(|(_, d)| *d == 1.5));
        assert!(d_preserve(&line(2), &line(2), &zero).unwrap().iter().all(|(_, d)| *d == 0.0));
        let one = ScalarField::constant(m, 1.0);
        assert!(d_preserve(&line(2), &line(5), &one).unwrap().iter().all(|(_, d)| *d == 0.0));
    }

    #[test]
    fn brute_force_oracles_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let n = rng.gen_range(4..=16);
            let m = GridMeta::cube(n, 1.0).unwrap();
            let cas = random_set(m, &mut rng, 20);
            let hat = random_set(m, &mut rng, 15);
            let init = random_set(m, &mut rng, 15);
            let a = ScalarField::from_fn(m, |_| rng.gen_range(0.0..=1.0));
            for (p, d) in d_edit(&cas, &hat, &a).unwrap() {
                assert_eq!(d, a.get(p) * brute_min(p, &hat));
            }
            let vals = d_preserve(&init, &hat, &a).unwrap();
            let (first, second) = vals.split_at(init.len());
            for (p, d) in first {
                assert_eq!(*d, (1.0 - a.get(*p)) / 2.0 * brute_min(*p, &hat));
            }
            for (q, d) in second {
                assert_eq!(*d, (1.0 - a.get(*q)) / 2.0 * brute_min(*q, &init));
            }
        }
    }

    fn sphere(m: GridMeta, c: [f64; 3], r: f64) -> BinaryMask {
        BinaryMask::from_fn(m, |v| (0..3).map(|a| (v[a] as f64 - c[a]).powi(2)).sum::<f64>() <= r * r)
    }

    fn case(m: GridMeta, y: BinaryMask, y_init: BinaryMask) -> CaseBundle {
        let frames = synthesize_sweep(m, 6, PI, None).unwrap();
        let cas_contours = crate::phantom::extract_cas_contours(&y, &frames);
        CaseBundle {
            id: "t".into(),
            meta: m,
            x: ScalarField::constant(m, 0.0),
            y,
            y_init,
            frames,
            cas_contours,
        }
    }

    #[test]
    fn no_edit_baseline_examples() {
        let m = GridMeta::new([32, 32, 32], 1.5).unwrap();
        let y = sphere(m, [15.5, 15.5, 15.5], 8.0);
        assert_eq!(no_edit_baseline(&case(m, y.clone(), y.clone())).unwrap().overall_p95_mm, 0.0);
        // translation by 2 along the vertical axis, which every frame contains
        let shifted = BinaryMask::from_fn(m, |v| v[0] >= 2 && y.get([v[0] - 2, v[1], v[2]]));
        let c = case(m, y, shifted);
        let r = no_edit_baseline(&c).unwrap();
        let planes = c.frames.planes();
        let surface = VoxelSet::union(m, &contours_on_planes(&c.y_init, &planes));
        let cas = VoxelSet::union(m, &c.cas_contours);
        let brute: Vec<f64> = cas.points().iter().map(|&p| brute_min(p, &surface)).collect();
        assert_eq!(r.overall_p95_mm, percentile(&brute, 95.0).unwrap() * 1.5);
        assert_eq!(r.overall_p95_mm, 2.0 * 1.5);
        assert!(r.near_p95_mm.is_none() && r.far_p95_mm.is_none());
    }

    #[test]
    fn unchanged_prediction_without_edit_reports_cas_distance() {
        let m = GridMeta::cube(32, 1.0).unwrap();
        let y = sphere(m, [15.5, 15.5, 15.5], 8.0);
        let y_init = sphere(m, [15.5, 15.5, 15.5], 6.0);
        let c = case(m, y, y_init.clone());
        let zero = ScalarField::constant(m, 0.0);
        let planes = c.frames.planes();
        let s = evaluate_with(&c, &planes, &y_init, &zero, Weighting::Soft).unwrap();
        assert!(s.iter().all(|x| x.value == 0.0 && !x.near));
        let one = ScalarField::constant(m, 1.0);
        let s = evaluate_with(&c, &planes, &y_init, &one, Weighting::Soft).unwrap();
        let base = cas_to_mask(&c, &planes, &y_init).unwrap();
        let cas = VoxelSet::union(m, &c.cas_contours);
        for (p, d) in cas.points().iter().zip(&base) {
            let sample = s.iter().find(|x| x.voxel == *p).unwrap();
            assert_eq!(sample.value, *d);
        }
        let r = MetricReport::from_samples(&s, 1.0).unwrap();
        assert_eq!(r.n_points_far, 0);
    }

    #[test]
    fn blended_prediction_scores_near_zero() {
        let m = GridMeta::cube(32, 1.0).unwrap();
        let y = sphere(m, [15.5, 15.5, 15.5], 9.0);
        let y_init = sphere(m, [15.5, 15.5, 15.5], 7.0);
        let c = case(m, y.clone(), y_init.clone());
        let seed = VoxelSet::new(m, [[15, 15, 24]]).unwrap();
        let a = crate::volume::make_gaussian_map(&seed, 4.0).unwrap();
        let y_hat = BinaryMask::from_fn(m, |v| if a.get(v) >= 0.5 { y.get(v) } else { y_init.get(v) });
        let planes = c.frames.planes();
        let r = MetricReport::from_samples(&evaluate_with(&c, &planes, &y_hat, &a, Weighting::Soft).unwrap(), 1.0).unwrap();
        assert!(r.overall_p95_mm <= 1.0, "{r:?}");
        assert_eq!(r.n_points, r.n_points_near + r.n_points_far);
    }

    #[test]
    fn hard_weighting_counts_regions_separately() {
        let m = GridMeta::cube(32, 1.0).unwrap();
        let y = sphere(m, [15.5, 15.5, 15.5], 9.0);
        let y_init = sphere(m, [15.5, 15.5, 15.5], 7.0);
        let c = case(m, y, y_init.clone());
        let seed = VoxelSet::new(m, [[15, 15, 24]]).unwrap();
        let a = crate::volume::make_gaussian_map(&seed, 4.0).unwrap();
        let planes = c.frames.planes();
        let soft = evaluate_with(&c, &planes, &y_init, &a, Weighting::Soft).unwrap();
        let hard = evaluate_with(&c, &planes, &y_init, &a, Weighting::Hard).unwrap();
        assert_eq!(soft.len(), hard.len());
        assert_ne!(soft, hard);
        // on a binary vicinity map the two modes agree
        let step = crate::volume::threshold_map(&a, 0.5).unwrap().to_field();
        let soft = evaluate_with(&c, &planes, &y_init, &step, Weighting::Soft).unwrap();
        let hard = evaluate_with(&c, &planes, &y_init, &step, Weighting::Hard).unwrap();
        assert_eq!(soft, hard);
    }

    #[test]
    fn symmetric_surface_distance_of_shells() {
        let m = GridMeta::cube(32, 1.0).unwrap();
        let a = sphere(m, [15.5, 15.5, 15.5], 9.0);
        assert_eq!(symmetric_surface_distance(&a, &a).unwrap(), 0.0);
        let b = sphere(m, [15.5, 15.5, 15.5], 7.0);
        let d = symmetric_surface_distance(&a, &b).unwrap();
        assert!(d >= 2.0 && d <= 3.5, "{d}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn d_edit_monotone_under_translation(seed in any::<u64>(), shift in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = GridMeta::cube(16, 1.0).unwrap();
            // predicted contour in the lower half, CAS points above it
            let hat_pts: Vec<Voxel> = (0..6).map(|_| [rng.gen_range(0..6), rng.gen_range(0..16), rng.gen_range(0..16)]).collect();
            let cas = VoxelSet::new(m, (0..6).map(|_| [rng.gen_range(6..10), rng.gen_range(0..16), rng.gen_range(0..16)])).unwrap();
            let hat = VoxelSet::new(m, hat_pts.iter().copied()).unwrap();
            let moved = VoxelSet::new(m, hat_pts.iter().map(|p| [p[0] - p[0].min(shift), p[1], p[2]])).unwrap();
            // moving every point down by up to `shift` never brings it closer
            let a = ScalarField::from_fn(m, |_| rng.gen_range(0.0..=1.0));
            let before = d_edit(&cas, &hat, &a).unwrap();
            let after = d_edit(&cas, &moved, &a).unwrap();
            for ((_, x), (_, y)) in before.iter().zip(&after) {
                prop_assert!(y >= x);
            }
        }

        #[test]
        fn metric_is_nonnegative_and_order_free(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = GridMeta::cube(24, 1.0).unwrap();
            let r = rng.gen_range(5.0..8.0);
            let y = sphere(m, [11.5, 11.5, 11.5], r);
            let y_init = sphere(m, [11.5, 11.5, 11.5], r - 1.5);
            let y_hat = sphere(m, [11.5, 11.5, 11.5], r - 0.7);
            let c = case(m, y, y_init);
            let a = ScalarField::from_fn(m, |_| rng.gen_range(0.0..=1.0));
            let planes = c.frames.planes();
            let s1 = evaluate_with(&c, &planes, &y_hat, &a, Weighting::Soft).unwrap();
            prop_assert!(s1.iter().all(|s| s.value >= 0.0));
            let mut rev = c.clone();
            rev.frames.poses.reverse();
            rev.cas_contours.reverse();
            let rev_planes: Vec<VoxelSet> = planes.iter().rev().cloned().collect();
            let s2 = evaluate_with(&rev, &rev_planes, &y_hat, &a, Weighting::Soft).unwrap();
            prop_assert_eq!(s1, s2);
        }
    }
}
