//! Editing engines: `apply(x, y_init, u) -> y_hat`.

pub mod cnn;
mod conv;
pub mod train;

use crate::error::{Error, Result};
use crate::interaction::EditRecord;
use crate::phantom::CaseBundle;
use crate::volume::{signed_distance, threshold_map, BinaryMask, GridMeta, ScalarField};

pub use cnn::{load_checkpoint, save_checkpoint, TinyCnn};
pub use train::{train, LossKind, TrainConfig, TrainReport};

/// The three input channels of an editing model.
#[derive(Clone, Debug, PartialEq)]
pub struct EngineInput {
    pub x: ScalarField,
    pub y_init: BinaryMask,
    pub u: ScalarField,
}

impl EngineInput {
    pub fn new(x: ScalarField, y_init: BinaryMask, u: ScalarField) -> Result<Self> {
        x.meta().check_same(y_init.meta())?;
        x.meta().check_same(u.meta())?;
        Ok(Self { x, y_init, u })
    }

    pub fn meta(&self) -> &GridMeta {
        self.x.meta()
    }

    /// Channel-major `[x, y_init, u]`.
    pub fn channels(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * self.meta().len());
        out.extend_from_slice(self.x.values());
        out.extend(self.y_init.as_bytes().iter().map(|&b| f64::from(b)));
        out.extend_from_slice(self.u.values());
        out
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Non-learned editor: shifts the level set of `y_init` so that it passes
/// through the scribble (the voxels where `u == 1`), fading out with `a`.
pub fn geometric_blend_edit(input: &EngineInput, a: &ScalarField) -> Result<ScalarField> {
    input.meta().check_same(a.meta())?;
    let phi = signed_distance(&input.y_init)?;
    let peaks: Vec<f64> = input
        .u
        .values()
        .iter()
        .zip(phi.values())
        .filter(|(&u, _)| u == 1.0)
        .map(|(_, &p)| -p)
        .collect();
    if peaks.is_empty() {
        return Err(Error::EmptyScribble);
    }
    let shift = peaks.iter().sum::<f64>() / peaks.len() as f64;
    let values = phi
        .values()
        .iter()
        .zip(a.values())
        .map(|(&p, &w)| sigmoid(-(p + w * shift)))
        .collect();
    ScalarField::from_values(*input.meta(), values)
}

pub fn cnn_forward(model: &TinyCnn, input: &EngineInput) -> Result<ScalarField> {
    if model.in_channels() != 3 {
        return Err(Error::InvalidParams(format!(
            "model expects {} input channels, not 3",
            model.in_channels()
        )));
    }
    let meta = *input.meta();
    let out = model.forward(meta.dims, &input.channels())?;
    ScalarField::from_values(meta, out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Engine {
    NoEdit,
    Geometric,
    Cnn { name: String, model: Box<TinyCnn> },
}

impl Engine {
    pub fn name(&self) -> &str {
        match self {
            Engine::NoEdit => "no_edit",
            Engine::Geometric => "geometric",
            Engine::Cnn { name, .. } => name,
        }
    }

    /// Raw probabilities for one input. `a` is only used by the geometric
    /// editor.
    pub fn apply(&self, input: &EngineInput, a: &ScalarField) -> Result<ScalarField> {
        match self {
            Engine::NoEdit => Ok(input.y_init.to_field()),
            Engine::Geometric => geometric_blend_edit(input, a),
            Engine::Cnn { model, .. } => cnn_forward(model, input),
        }
    }
}

/// Runs `engine` on the case's current `y_init` with the edit's encoding.
/// Returns the mask thresholded at 0.5 and the raw probabilities.
pub fn apply_engine(engine: &Engine, case: &CaseBundle, edit: &EditRecord) -> Result<(BinaryMask, ScalarField)> {
    let input = EngineInput::new(case.x.clone(), case.y_init.clone(), edit.u.clone())?;
    let raw = engine.apply(&input, &edit.a)?;
    Ok((threshold_map(&raw, 0.5)?, raw))
}

/// Axis-aligned sub-box of a grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Patch {
    pub origin: [usize; 3],
    pub dims: [usize; 3],
}

impl Patch {
    /// Box of side `size` (clamped to the grid) centred on `center` and
    /// shifted to lie inside the grid. `size == 0` selects the whole grid.
    pub fn around(meta: &GridMeta, center: [usize; 3], size: usize) -> Self {
        let mut origin = [0; 3];
        let mut dims = meta.dims;
        if size > 0 {
            for a in 0..3 {
                dims[a] = size.min(meta.dims[a]);
                origin[a] = center[a].saturating_sub(dims[a] / 2).min(meta.dims[a] - dims[a]);
            }
        }
        Self { origin, dims }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear indices into the full grid, in patch order.
    pub fn indices<'a>(&'a self, meta: &'a GridMeta) -> impl Iterator<Item = usize> + 'a {
        let [h, w, d] = self.dims;
        (0..h).flat_map(move |i| {
            (0..w).flat_map(move |j| {
                (0..d).map(move |k| meta.index([self.origin[0] + i, self.origin[1] + j, self.origin[2] + k]))
            })
        })
    }

    pub fn gather<T: Copy>(&self, meta: &GridMeta, full: &[T]) -> Vec<T> {
        self.indices(meta).map(|i| full[i]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{make_gaussian_map, VoxelSet};

    fn sphere(meta: GridMeta, r: f64) -> BinaryMask {
        let c = meta.center();
        BinaryMask::from_fn(meta, |v| (0..3).map(|a| (v[a] as f64 - c[a]).powi(2)).sum::<f64>() <= r * r)
    }

    #[test]
    fn geometric_fixed_points() {
        let m = GridMeta::cube(32, 1.0).unwrap();
        let y_init = sphere(m, 8.0);
        let x = ScalarField::constant(m, 0.0);
        // scribble on the boundary: zero offset
        let b = y_init.boundary();
        let s = VoxelSet::new(m, b.points()[..5].iter().copied()).unwrap();
        let u = make_gaussian_map(&s, 5.0).unwrap();
        let input = EngineInput::new(x.clone(), y_init.clone(), u.clone()).unwrap();
        let out = threshold_map(&geometric_blend_edit(&input, &u).unwrap(), 0.5).unwrap();
        assert_eq!(out, y_init);
        // vanishing vicinity map
        let s = VoxelSet::new(m, [[15, 15, 28]]).unwrap();
        let u = make_gaussian_map(&s, 5.0).unwrap();
        let input = EngineInput::new(x, y_init.clone(), u).unwrap();
        let zero = ScalarField::constant(m, 0.0);
        let out = threshold_map(&geometric_blend_edit(&input, &zero).unwrap(), 0.5).unwrap();
        assert_eq!(out, y_init);
    }

    #[test]
    fn geometric_pulls_boundary_to_outside_scribble() {
        let m = GridMeta::cube(32, 1.0).unwrap();
        let y_init = sphere(m, 8.0);
        let c = m.center();
        // a short line three voxels outside the sphere along +k
        let k = y_init.boundary().points().iter().filter(|v| v[0] == 15 && v[1] == 15).map(|v| v[2]).max().unwrap() + 3;
        let s = VoxelSet::new(m, [[15, 14, k], [15, 15, k], [15, 16, k]]).unwrap();
        let a = make_gaussian_map(&s, 4.0).unwrap();
        let input = EngineInput::new(ScalarField::constant(m, 0.0), y_init.clone(), a.clone()).unwrap();
        let out = threshold_map(&geometric_blend_edit(&input, &a).unwrap(), 0.5).unwrap();
        for &v in s.points() {
            assert!(out.get(v), "{v:?} {c:?}");
        }
        for idx in 0..m.len() {
            if a.values()[idx] < 0.01 {
                assert_eq!(out.get_index(idx), y_init.get_index(idx));
            }
        }
    }

    #[test]
    fn patches_stay_inside_the_grid() {
        let m = GridMeta::new([10, 20, 30], 1.0).unwrap();
        let p = Patch::around(&m, [0, 19, 15], 12);
        assert_eq!(p.dims, [10, 12, 12]);
        assert_eq!(p.origin, [0, 8, 9]);
        assert_eq!(p.indices(&m).count(), p.len());
        assert_eq!(Patch::around(&m, [5, 5, 5], 0).dims, m.dims);
        let full: Vec<usize> = (0..m.len()).collect();
        let g = p.gather(&m, &full);
        assert_eq!(g[0], m.index([0, 8, 9]));
    }
}
