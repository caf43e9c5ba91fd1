//! Training loop for the editing CNN under the four strategies.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cnn::TinyCnn;
use super::Patch;
use crate::error::{Error, Result};
use crate::interaction::{confirming_edit, synthesize_training_edit, EditConfig, Scribble};
use crate::losses::{ce_loss_slice, dice_loss_slice, editing_loss_slice};
use crate::phantom::CaseBundle;
use crate::volume::{gaussian_at, make_gaussian_map, GridMeta, ScalarField, VoxelSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    Dice,
    Editing,
    Intercnn,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Ce, LossKind::Dice, LossKind::Editing, LossKind::Intercnn];

    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Dice => "dice",
            LossKind::Editing => "editing",
            LossKind::Intercnn => "intercnn",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidParams(format!("unknown loss {s:?} (expected ce, dice, editing or intercnn)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub intercnn_steps: usize,
    pub seed: u64,
    /// Channel widths, input first.
    pub widths: Vec<usize>,
    /// Side of the training crop around each edit; 0 trains on whole volumes.
    pub patch_size: usize,
    /// Maximum per-axis offset of the crop centre from the edit.
    pub patch_jitter: usize,
    pub edit: EditConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_kind: LossKind::Editing,
            epochs: DEFAULT_EPOCHS,
            learning_rate: 0.005,
            batch_size: 4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            intercnn_steps: 10,
            seed: 0,
            widths: vec![3, 8, 8, 1],
            patch_size: 16,
            patch_jitter: 14,
            edit: EditConfig::default(),
        }
    }
}

pub const DEFAULT_EPOCHS: usize = 100;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.into()));
        if self.epochs == 0 || self.batch_size == 0 || self.intercnn_steps == 0 {
            return bad("epochs, batch_size and intercnn_steps must be positive");
        }
        if !(self.learning_rate > 0.0 && self.eps > 0.0) {
            return bad("learning_rate and eps must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.widths.first() != Some(&3) {
            return bad("the first width must be 3 (x, y_init, u)");
        }
        if self.patch_size != 0 && self.patch_size < 4 {
            return bad("patch_size must be 0 or at least 4");
        }
        if !(self.edit.sigma_enc > 0.0 && self.edit.sigma_edit > 0.0) {
            return bad("sigmas must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean sample loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Wall-clock seconds per epoch; not deterministic.
    pub epoch_seconds: Vec<f64>,
}

pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize, lr: f64, b1: f64, b2: f64, eps: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
            b1,
            b2,
            eps,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.b1.powi(self.t);
        let c2 = 1.0 - self.b2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.b1 * *m + (1.0 - self.b1) * g;
            *v = self.b2 * *v + (1.0 - self.b2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Deterministic seed derivation.
pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn scribble_center(s: &Scribble) -> [usize; 3] {
    s.path[s.path.len() / 2]
}

fn jittered(meta: &GridMeta, center: [usize; 3], jitter: usize, seed: u64) -> [usize; 3] {
    if jitter == 0 {
        return center;
    }
    let span = 2 * jitter as u64 + 1;
    let mut out = center;
    for a in 0..3 {
        let off = (mix(seed, a as u64) % span) as i64 - jitter as i64;
        out[a] = (center[a] as i64 + off).clamp(0, meta.dims[a] as i64 - 1) as usize;
    }
    out
}

/// One training edit per case, fixed for the whole run.
pub fn training_scribble(case: &CaseBundle, planes: &[VoxelSet], seed: u64, cfg: &EditConfig) -> Result<Scribble> {
    match synthesize_training_edit(&case.y_init, &case.y, &case.frames, planes, seed, cfg) {
        Err(Error::NothingToEdit) => confirming_edit(&case.y, &case.frames, planes, cfg),
        other => other,
    }
}

struct Prepared<'a> {
    case: &'a CaseBundle,
    planes: Vec<VoxelSet>,
    scribble: Scribble,
    u: ScalarField,
    a: ScalarField,
}

fn gaussian(s: &Scribble, meta: GridMeta, sigma: f64) -> Result<ScalarField> {
    make_gaussian_map(&s.voxel_set(meta)?, sigma)
}

fn prepare<'a>(case: &'a CaseBundle, idx: usize, cfg: &TrainConfig) -> Result<Prepared<'a>> {
    let planes = case.frames.planes();
    let scribble = training_scribble(case, &planes, mix(cfg.seed, idx as u64), &cfg.edit)?;
    let u = gaussian(&scribble, case.meta, cfg.edit.sigma_enc)?;
    let a = if cfg.edit.sigma_edit == cfg.edit.sigma_enc {
        u.clone()
    } else {
        gaussian(&scribble, case.meta, cfg.edit.sigma_edit)?
    };
    Ok(Prepared {
        case,
        planes,
        scribble,
        u,
        a,
    })
}

fn patch_input(meta: &GridMeta, patch: &Patch, x: &ScalarField, y_init: &[u8], u: &ScalarField) -> Vec<f64> {
    let mut input = Vec::with_capacity(3 * patch.len());
    input.extend(patch.indices(meta).map(|i| x.values()[i]));
    input.extend(patch.indices(meta).map(|i| f64::from(y_init[i])));
    input.extend(patch.indices(meta).map(|i| u.values()[i]));
    input
}

/// Loss and parameter gradient of one forward/backward pass on a patch.
fn patch_step(
    model: &mut TinyCnn,
    kind: LossKind,
    patch: &Patch,
    input: &[f64],
    target: &[u8],
    y_init: &[u8],
    a: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let probs = model.forward_train(patch.dims, input)?;
    let mut g = vec![0.0; probs.len()];
    let loss = match kind {
        LossKind::Ce | LossKind::Intercnn => ce_loss_slice(&probs, target, &mut g),
        LossKind::Dice => dice_loss_slice(&probs, target, &mut g),
        LossKind::Editing => editing_loss_slice(&probs, target, y_init, a, &mut g),
    };
    let grads = model.backward(&g)?;
    model.clear_cache();
    Ok((loss, grads, probs))
}

fn sample_gradient(model: &mut TinyCnn, prep: &Prepared, sample: usize, epoch: usize, cfg: &TrainConfig) -> Result<(f64, Vec<f64>)> {
    let case = prep.case;
    let meta = case.meta;
    let jitter_seed = mix(mix(cfg.seed ^ 0x7177, sample as u64), epoch as u64);
    if cfg.loss_kind != LossKind::Intercnn {
        let center = jittered(&meta, scribble_center(&prep.scribble), cfg.patch_jitter, jitter_seed);
        let patch = Patch::around(&meta, center, cfg.patch_size);
        let input = patch_input(&meta, &patch, &case.x, case.y_init.as_bytes(), &prep.u);
        let target = patch.gather(&meta, case.y.as_bytes());
        let init = patch.gather(&meta, case.y_init.as_bytes());
        let a = patch.gather(&meta, prep.a.values());
        let (loss, grads, _) = patch_step(model, cfg.loss_kind, &patch, &input, &target, &init, &a)?;
        return Ok((loss, grads));
    }

    // iterative scheme: re-feed the running prediction with all edits so
    // far; the accumulated encoding is only evaluated on each patch
    let mut current = case.y_init.clone();
    let mut later: Vec<VoxelSet> = Vec::new();
    let mut scribble = prep.scribble.clone();
    let mut total = 0.0;
    let mut acc = vec![0.0; model.params.len()];
    let mut steps = 0;
    for step in 0..cfg.intercnn_steps {
        let center = jittered(&meta, scribble_center(&scribble), cfg.patch_jitter, mix(jitter_seed, step as u64));
        let patch = Patch::around(&meta, center, cfg.patch_size);
        let mut u = patch.gather(&meta, prep.u.values());
        for s in &later {
            let g = gaussian_at(s, cfg.edit.sigma_enc, patch.indices(&meta).map(|i| meta.voxel(i)))?;
            u.iter_mut().zip(g).for_each(|(a, b)| *a = a.max(b));
        }
        let mut input = Vec::with_capacity(3 * patch.len());
        input.extend(patch.indices(&meta).map(|i| case.x.values()[i]));
        input.extend(patch.indices(&meta).map(|i| f64::from(current.as_bytes()[i])));
        input.extend_from_slice(&u);
        let target = patch.gather(&meta, case.y.as_bytes());
        let (loss, grads, probs) = patch_step(model, LossKind::Ce, &patch, &input, &target, &[], &[])?;
        total += loss;
        acc.iter_mut().zip(&grads).for_each(|(a, g)| *a += g);
        steps += 1;
        for (idx, p) in patch.indices(&meta).zip(&probs) {
            current.set(meta.voxel(idx), *p >= 0.5);
        }
        if step + 1 == cfg.intercnn_steps {
            break;
        }
        let seed = mix(mix(cfg.seed, sample as u64), (epoch * cfg.intercnn_steps + step) as u64);
        scribble = match synthesize_training_edit(&current, &case.y, &case.frames, &prep.planes, seed, &cfg.edit) {
            Ok(s) => s,
            Err(Error::NothingToEdit) => break,
            Err(e) => return Err(e),
        };
        later.push(scribble.voxel_set(meta)?);
    }
    let k = steps as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    Ok((total / k, acc))
}

/// Trains a fresh model. Deterministic in `cfg.seed` and the corpus order.
pub fn train(corpus: &[CaseBundle], cfg: &TrainConfig) -> Result<(TinyCnn, TrainReport)> {
    train_with_progress(corpus, cfg, |_, _| {})
}

pub fn train_with_progress(
    corpus: &[CaseBundle],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(TinyCnn, TrainReport)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptySet("training corpus"));
    }
    let prepared = corpus
        .iter()
        .enumerate()
        .map(|(i, c)| prepare(c, i, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut model = TinyCnn::new(&cfg.widths, cfg.seed)?;
    let mut adam = Adam::new(model.params.len(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0x5eed));
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        epoch_seconds: Vec::with_capacity(cfg.epochs),
    };
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = vec![0.0; model.params.len()];
            for &sample in batch {
                let (loss, grads) = sample_gradient(&mut model, &prepared[sample], sample, epoch, cfg)?;
                if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Divergence {
                        epoch,
                        sample,
                        detail: format!("non-finite loss or gradient (loss {loss})"),
                    });
                }
                epoch_loss += loss;
                acc.iter_mut().zip(&grads).for_each(|(a, g)| *a += g);
            }
            let k = batch.len() as f64;
            acc.iter_mut().for_each(|a| *a /= k);
            adam.step(&mut model.params, &acc);
            if !model.params_finite() {
                return Err(Error::Divergence {
                    epoch,
                    sample: batch[batch.len() - 1],
                    detail: "non-finite parameters after update".into(),
                });
            }
        }
        let mean = epoch_loss / corpus.len() as f64;
        report.epoch_losses.push(mean);
        report.epoch_seconds.push(start.elapsed().as_secs_f64());
        on_epoch(epoch, mean);
    }
    model.quantize();
    Ok((model, report))
}
