//! Synthetic cases: a deformed-ellipsoid atrium, a sparse intensity volume
//! that is only populated on the sweep planes, a warped initial segmentation
//! and the per-frame ground-truth contours.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{contours_on_planes, synthesize_sweep, FramePose, FrameStack};
use crate::volume::{
    field_from_bytes, field_to_bytes, mask_from_bytes, BinaryMask, GridMeta, ScalarField, Voxel,
    VoxelSet,
};

pub const FORMAT_VERSION: &str = "1";

/// Blood pool intensity.
pub const LUMEN_INTENSITY: f64 = 0.2;
/// Wall and surrounding tissue intensity.
pub const TISSUE_INTENSITY: f64 = 0.7;

const MARGIN: f64 = 4.0;
const LOBE_HEIGHT: f64 = 0.3;
const LOBE_WIDTH: f64 = 0.35;
const SHAPE_MODES: usize = 3;
const WARP_MODES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomParams {
    pub seed: u64,
    /// Semi-axes in voxels along (i, j, k).
    pub base_radii: [f64; 3],
    pub n_lobes: usize,
    pub deform_amplitude: f64,
    /// Standard deviation of the multiplicative speckle.
    pub noise_level: f64,
    pub n_frames: usize,
    pub span_rad: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            seed: 0,
            base_radii: [13.0, 12.0, 11.0],
            n_lobes: 1,
            deform_amplitude: 0.12,
            noise_level: 0.15,
            n_frames: 12,
            span_rad: PI,
        }
    }
}

impl PhantomParams {
    fn max_extent_factor(&self) -> f64 {
        let lobes = if self.n_lobes > 0 { LOBE_HEIGHT } else { 0.0 };
        1.0 + self.deform_amplitude + lobes
    }

    pub fn validate(&self, meta: &GridMeta) -> Result<()> {
        if self.base_radii.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::InvalidParams("radii must be positive".into()));
        }
        if self.deform_amplitude < 0.0 || self.noise_level < 0.0 {
            return Err(Error::InvalidParams(
                "deform_amplitude and noise_level must be >= 0".into(),
            ));
        }
        let c = meta.center();
        for a in 0..3 {
            let reach = self.base_radii[a] * self.max_extent_factor();
            if reach + MARGIN > c[a] {
                return Err(Error::InvalidParams(format!(
                    "radius {} (reach {reach:.2}) leaves less than {MARGIN} voxels of margin on axis {a}",
                    self.base_radii[a]
                )));
            }
        }
        Ok(())
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    UnitSphere.sample(rng)
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Star-shaped radial profile around the ellipsoid center.
struct ShapeModel {
    modes: Vec<([f64; 3], f64, f64, f64)>,
    lobes: Vec<[f64; 3]>,
    amplitude: f64,
}

impl ShapeModel {
    fn sample(params: &PhantomParams, rng: &mut ChaCha8Rng) -> Self {
        let mut modes = Vec::with_capacity(SHAPE_MODES);
        let mut total = 0.0;
        for _ in 0..SHAPE_MODES {
            let axis = unit_vector(rng);
            let freq = rng.gen_range(1.0..2.0);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let weight: f64 = rng.gen_range(0.5..1.0);
            total += weight;
            modes.push((axis, freq, phase, weight));
        }
        for m in &mut modes {
            m.3 /= total;
        }
        let lobes = (0..params.n_lobes).map(|_| unit_vector(rng)).collect();
        Self {
            modes,
            lobes,
            amplitude: params.deform_amplitude,
        }
    }

    fn surface_radius(&self, dir: [f64; 3]) -> f64 {
        let mut s = 1.0;
        if self.amplitude > 0.0 {
            let wave: f64 = self
                .modes
                .iter()
                .map(|&(axis, f, ph, w)| w * (PI * f * dot(dir, axis) + ph).sin())
                .sum();
            s += self.amplitude * wave;
        }
        for &l in &self.lobes {
            s += LOBE_HEIGHT * (-(1.0 - dot(dir, l)) / (LOBE_WIDTH * LOBE_WIDTH)).exp();
        }
        s
    }
}

/// Ground-truth mask, sparse intensity volume and sweep for one case.
pub fn generate_phantom(
    meta: GridMeta,
    params: &PhantomParams,
) -> Result<(BinaryMask, ScalarField, FrameStack)> {
    params.validate(&meta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let shape = ShapeModel::sample(params, &mut rng);
    let c = meta.center();
    let r = params.base_radii;
    let raw = BinaryMask::from_fn(meta, |v| {
        let q = [
            (v[0] as f64 - c[0]) / r[0],
            (v[1] as f64 - c[1]) / r[1],
            (v[2] as f64 - c[2]) / r[2],
        ];
        let rho2 = dot(q, q);
        if rho2 == 0.0 {
            return true;
        }
        if params.deform_amplitude == 0.0 && params.n_lobes == 0 {
            return rho2 <= 1.0;
        }
        let rho = rho2.sqrt();
        rho <= shape.surface_radius(q.map(|x| x / rho))
    });
    let y = raw.largest_component();
    let frames = synthesize_sweep(meta, params.n_frames, params.span_rad, None)?;
    let x = render_intensity(&y, &frames, params.noise_level, &mut rng);
    Ok((y, x, frames))
}

fn render_intensity(
    y: &BinaryMask,
    frames: &FrameStack,
    noise_level: f64,
    rng: &mut ChaCha8Rng,
) -> ScalarField {
    let meta = *y.meta();
    let support = VoxelSet::union(meta, &frames.planes());
    let mut x = ScalarField::constant(meta, 0.0);
    for &v in support.points() {
        let base = if y.get(v) {
            LUMEN_INTENSITY
        } else {
            TISSUE_INTENSITY
        };
        let speckle = if noise_level > 0.0 {
            let n: f64 = StandardNormal.sample(rng);
            (1.0 + noise_level * n).max(0.0)
        } else {
            1.0
        };
        // stored volumes are f32; keep the in-memory copy identical
        let value = (base * speckle).clamp(0.0, 1.0) as f32 as f64;
        x.set(v, value);
    }
    x
}

/// Smooth random displacement field with a prescribed maximum magnitude.
struct WarpField {
    modes: Vec<([f64; 3], [f64; 3], f64)>,
    scale: f64,
}

impl WarpField {
    fn sample(meta: &GridMeta, max_disp: f64, rng: &mut ChaCha8Rng) -> Self {
        let extent = meta.dims.iter().copied().max().unwrap() as f64;
        let modes: Vec<_> = (0..WARP_MODES)
            .map(|_| {
                let amp = unit_vector(rng).map(|a| a * rng.gen_range(0.5..1.0));
                let cycles = rng.gen_range(0.5..1.5);
                let wave = unit_vector(rng).map(|d| d * 2.0 * PI * cycles / extent);
                let phase = rng.gen_range(0.0..2.0 * PI);
                (amp, wave, phase)
            })
            .collect();
        let mut field = Self { modes, scale: 1.0 };
        let peak = (0..meta.len())
            .map(|idx| norm(field.at(meta.voxel(idx))))
            .fold(0.0, f64::max);
        field.scale = if peak > 0.0 { max_disp / peak } else { 0.0 };
        field
    }

    fn at(&self, v: Voxel) -> [f64; 3] {
        let p = v.map(|c| c as f64);
        let mut d = [0.0; 3];
        for (amp, wave, phase) in &self.modes {
            let s = (dot(*wave, p) + phase).sin();
            for a in 0..3 {
                d[a] += amp[a] * s;
            }
        }
        d.map(|x| x * self.scale)
    }
}

fn norm(v: [f64; 3]) -> f64 {
    dot(v, v).sqrt()
}

/// Imperfect initial segmentation: `y` pulled back through a smooth seeded
/// displacement field whose largest displacement is `error_level` voxels.
pub fn generate_initial_seg(y: &BinaryMask, error_level: f64, seed: u64) -> Result<BinaryMask> {
    if !(error_level >= 0.0 && error_level.is_finite()) {
        return Err(Error::InvalidParams(format!("error_level {error_level} must be >= 0")));
    }
    if y.is_degenerate() {
        return Err(Error::DegenerateMask);
    }
    if error_level == 0.0 {
        return Ok(y.clone());
    }
    let meta = *y.meta();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let warp = WarpField::sample(&meta, error_level, &mut rng);
    let warped = BinaryMask::from_fn(meta, |v| {
        let d = warp.at(v);
        let src = [
            (v[0] as f64 + d[0]).round() as i64,
            (v[1] as f64 + d[1]).round() as i64,
            (v[2] as f64 + d[2]).round() as i64,
        ];
        meta.contains_signed(src) && y.get(src.map(|c| c as usize))
    })
    .largest_component();
    if warped.is_degenerate() {
        return Err(Error::DegenerateMask);
    }
    Ok(warped)
}

/// Ground-truth contour of `y` on every frame; empty entries are kept.
pub fn extract_cas_contours(y: &BinaryMask, frames: &FrameStack) -> Vec<VoxelSet> {
    contours_on_planes(y, &frames.planes())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseBundle {
    pub id: String,
    pub meta: GridMeta,
    pub x: ScalarField,
    pub y: BinaryMask,
    pub y_init: BinaryMask,
    pub frames: FrameStack,
    pub cas_contours: Vec<VoxelSet>,
}

impl CaseBundle {
    pub fn generate(
        id: impl Into<String>,
        meta: GridMeta,
        params: &PhantomParams,
        error_level: f64,
        init_seed: u64,
    ) -> Result<Self> {
        let (y, x, frames) = generate_phantom(meta, params)?;
        let y_init = generate_initial_seg(&y, error_level, init_seed)?;
        let cas_contours = extract_cas_contours(&y, &frames);
        Ok(Self {
            id: id.into(),
            meta,
            x,
            y,
            y_init,
            frames,
            cas_contours,
        })
    }

    /// Same case with a different initial segmentation.
    pub fn with_initial(&self, y_init: BinaryMask) -> Self {
        Self {
            y_init,
            ..self.clone()
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Member {
    crc32: u32,
    bytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: String,
    case_id: String,
    meta: GridMeta,
    frames: Vec<FramePose>,
    x: String,
    y: String,
    y_init: String,
    cas: Vec<String>,
    members: BTreeMap<String, Member>,
}

fn voxel_list_json(set: &VoxelSet) -> Vec<u8> {
    serde_json::to_vec(set.points()).expect("voxel list serializes")
}

/// Writes the bundle as a directory; the directory appears atomically.
pub fn save_case(bundle: &CaseBundle, path: &Path) -> Result<()> {
    let mut files: Vec<(String, Vec<u8>)> = vec![
        ("x.f32".into(), field_to_bytes(&bundle.x)),
        ("y.u8".into(), bundle.y.as_bytes().to_vec()),
        ("y_init.u8".into(), bundle.y_init.as_bytes().to_vec()),
    ];
    let mut cas = Vec::new();
    for (pose, contour) in bundle.frames.poses.iter().zip(&bundle.cas_contours) {
        let name = format!("cas_{}.json", pose.frame_id);
        files.push((name.clone(), voxel_list_json(contour)));
        cas.push(name);
    }
    let members = files
        .iter()
        .map(|(name, data)| {
            (
                name.clone(),
                Member {
                    crc32: crc32fast::hash(data),
                    bytes: data.len(),
                },
            )
        })
        .collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION.into(),
        case_id: bundle.id.clone(),
        meta: bundle.meta,
        frames: bundle.frames.poses.clone(),
        x: "x.f32".into(),
        y: "y.u8".into(),
        y_init: "y_init.u8".into(),
        cas,
        members,
    };
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent)?;
    let tmp = tempdir_in(parent, path)?;
    for (name, data) in &files {
        fs::write(tmp.join(name), data)?;
    }
    fs::write(tmp.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    if path.exists() {
        fs::remove_dir_all(path)?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn tempdir_in(parent: &Path, target: &Path) -> Result<std::path::PathBuf> {
    let stem = target
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "case".into());
    let tmp = parent.join(format!(".{stem}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    Ok(tmp)
}

fn read_member(dir: &Path, manifest: &Manifest, name: &str) -> Result<Vec<u8>> {
    let entry = manifest
        .members
        .get(name)
        .ok_or_else(|| Error::MissingMember(name.to_string()))?;
    let data = match fs::read(dir.join(name)) {
        Ok(d) => d,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingMember(name.to_string()))
        }
        Err(e) => return Err(e.into()),
    };
    if data.len() != entry.bytes {
        return Err(Error::Truncated {
            name: name.to_string(),
            expected: entry.bytes,
            found: data.len(),
        });
    }
    if crc32fast::hash(&data) != entry.crc32 {
        return Err(Error::Checksum(name.to_string()));
    }
    Ok(data)
}

pub fn load_case(path: &Path) -> Result<CaseBundle> {
    let manifest_path = path.join("manifest.json");
    let raw = fs::read(&manifest_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingMember("manifest.json".into()),
        _ => e.into(),
    })?;
    let manifest: Manifest = serde_json::from_slice(&raw)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION.into(),
            found: manifest.format_version.clone(),
        });
    }
    let meta = GridMeta::new(manifest.meta.dims, manifest.meta.spacing_mm)?;
    let x = field_from_bytes(meta, &read_member(path, &manifest, &manifest.x)?)?;
    let y = mask_from_bytes(meta, &read_member(path, &manifest, &manifest.y)?)?;
    let y_init = mask_from_bytes(meta, &read_member(path, &manifest, &manifest.y_init)?)?;
    let mut cas_contours = Vec::with_capacity(manifest.cas.len());
    for name in &manifest.cas {
        let pts: Vec<Voxel> = serde_json::from_slice(&read_member(path, &manifest, name)?)?;
        cas_contours.push(VoxelSet::new(meta, pts)?);
    }
    let frames = FrameStack::new(meta, manifest.frames)?;
    if cas_contours.len() != frames.len() {
        return Err(Error::InvalidParams(format!(
            "{} contours for {} frames",
            cas_contours.len(),
            frames.len()
        )));
    }
    Ok(CaseBundle {
        id: manifest.case_id,
        meta,
        x,
        y,
        y_init,
        frames,
        cas_contours,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::manhattan_dt_raw;

    fn meta(n: usize) -> GridMeta {
        GridMeta::cube(n, 1.1024).unwrap()
    }

    #[test]
    fn undeformed_phantom_is_exact_ellipsoid() {
        let m = meta(48);
        let params = PhantomParams {
            n_lobes: 0,
            deform_amplitude: 0.0,
            ..Default::default()
        };
        let (y, _, _) = generate_phantom(m, &params).unwrap();
        let c = m.center();
        let r = params.base_radii;
        for idx in 0..m.len() {
            let v = m.voxel(idx);
            let s: f64 = (0..3).map(|a| ((v[a] as f64 - c[a]) / r[a]).powi(2)).sum();
            assert_eq!(y.get(v), s <= 1.0);
        }
    }

    #[test]
    fn phantom_is_deterministic_and_connected() {
        let m = meta(48);
        let params = PhantomParams {
            seed: 42,
            n_lobes: 2,
            ..Default::default()
        };
        let a = generate_phantom(m, &params).unwrap();
        let b = generate_phantom(m, &params).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.count_components(), 1);
    }

    #[test]
    fn intensity_lives_on_planes_only() {
        let m = meta(32);
        let params = PhantomParams {
            base_radii: [8.0, 7.0, 7.0],
            noise_level: 0.0,
            ..Default::default()
        };
        let (y, x, frames) = generate_phantom(m, &params).unwrap();
        let support = VoxelSet::union(m, &frames.planes());
        let mut levels = std::collections::BTreeSet::new();
        for idx in 0..m.len() {
            let v = m.voxel(idx);
            if support.contains(v) {
                levels.insert(x.get(v).to_bits());
                let expect = if y.get(v) { LUMEN_INTENSITY } else { TISSUE_INTENSITY };
                assert_eq!(x.get(v), expect as f32 as f64);
            } else {
                assert_eq!(x.get(v), 0.0);
            }
        }
        assert_eq!(levels.len(), 2);
    }

    #[test]
    fn oversized_radii_rejected() {
        let params = PhantomParams {
            base_radii: [22.0, 10.0, 10.0],
            ..Default::default()
        };
        assert!(matches!(
            generate_phantom(meta(48), &params),
            Err(Error::InvalidParams(_))
        ));
    }

    #[test]
    fn initial_seg_zero_level_and_determinism() {
        let m = meta(32);
        let params = PhantomParams {
            base_radii: [8.0, 7.0, 7.0],
            ..Default::default()
        };
        let (y, _, _) = generate_phantom(m, &params).unwrap();
        assert_eq!(generate_initial_seg(&y, 0.0, 5).unwrap(), y);
        let a = generate_initial_seg(&y, 2.5, 5).unwrap();
        assert_eq!(a, generate_initial_seg(&y, 2.5, 5).unwrap());
        assert_ne!(a, y);
        assert_eq!(a.count_components(), 1);
        assert!(generate_initial_seg(&BinaryMask::zeros(m), 1.0, 1).is_err());
    }

    #[test]
    fn initial_seg_dice_decreases_with_level() {
        let m = meta(32);
        let params = PhantomParams {
            base_radii: [8.0, 7.0, 7.0],
            ..Default::default()
        };
        let (y, _, _) = generate_phantom(m, &params).unwrap();
        let mean_dice = |level: f64| {
            (0..10)
                .map(|s| y.dice(&generate_initial_seg(&y, level, s).unwrap()))
                .sum::<f64>()
                / 10.0
        };
        let d = [mean_dice(1.0), mean_dice(2.0), mean_dice(4.0)];
        assert!(d[0] > d[1] && d[1] > d[2], "{d:?}");
    }

    #[test]
    fn cas_contours_sit_on_the_boundary() {
        let m = meta(32);
        let params = PhantomParams {
            base_radii: [8.0, 7.0, 7.0],
            ..Default::default()
        };
        let (y, _, frames) = generate_phantom(m, &params).unwrap();
        let cas = extract_cas_contours(&y, &frames);
        assert_eq!(cas.len(), frames.len());
        let boundary = y.boundary();
        let dt = manhattan_dt_raw(&m, boundary.points()).unwrap();
        for (contour, plane) in cas.iter().zip(frames.planes()) {
            assert!(!contour.is_empty());
            for &v in contour.points() {
                assert_eq!(dt[m.index(v)], 0);
                assert!(plane.contains(v));
            }
        }
        // a frame that misses the structure keeps its (empty) slot
        let mut shifted = frames.clone();
        shifted.poses[1].pivot = [15.5, 15.5, 30.0];
        shifted.poses[1].angle_rad = 0.0;
        let cas = extract_cas_contours(&y, &shifted);
        assert_eq!(cas.len(), frames.len());
        assert!(cas[1].is_empty());
    }

    fn small_bundle() -> CaseBundle {
        let m = meta(24);
        let params = PhantomParams {
            base_radii: [5.0, 4.5, 4.5],
            n_frames: 4,
            seed: 9,
            ..Default::default()
        };
        CaseBundle::generate("case-0", m, &params, 1.5, 10).unwrap()
    }

    #[test]
    fn bundle_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let b = small_bundle();
        let path = dir.path().join("case-0");
        save_case(&b, &path).unwrap();
        assert_eq!(load_case(&path).unwrap(), b);
        // overwriting is allowed and leaves no temp directories behind
        save_case(&b, &path).unwrap();
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn bundle_corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let b = small_bundle();
        let path = dir.path().join("c");
        save_case(&b, &path).unwrap();

        let mut y = fs::read(path.join("y.u8")).unwrap();
        y[100] ^= 1;
        fs::write(path.join("y.u8"), &y).unwrap();
        assert!(matches!(load_case(&path), Err(Error::Checksum(n)) if n == "y.u8"));
        y[100] ^= 1;
        fs::write(path.join("y.u8"), &y[..50]).unwrap();
        assert!(matches!(load_case(&path), Err(Error::Truncated { .. })));
        fs::write(path.join("y.u8"), &y).unwrap();

        fs::remove_file(path.join("cas_2.json")).unwrap();
        match load_case(&path) {
            Err(Error::MissingMember(name)) => assert_eq!(name, "cas_2.json"),
            other => panic!("unexpected {other:?}"),
        }

        save_case(&b, &path).unwrap();
        let text = fs::read_to_string(path.join("manifest.json")).unwrap();
        fs::write(
            path.join("manifest.json"),
            text.replace("\"format_version\": \"1\"", "\"format_version\": \"7\""),
        )
        .unwrap();
        assert!(matches!(load_case(&path), Err(Error::VersionMismatch { .. })));
    }
}
