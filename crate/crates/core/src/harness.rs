//! Experiment driver: corpora, engine training, single-edit tables and
//! sequential-editing curves.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engines::train::{mix, train_with_progress, TrainReport};
use crate::engines::{load_checkpoint, save_checkpoint, Engine, EngineInput, LossKind, TrainConfig};
use crate::error::{Error, Result};
use crate::geometry::contours_on_planes;
use crate::interaction::{encode_edit, select_test_edit, EditConfig};
use crate::metrics::{cas_to_mask, evaluate_with, point_to_surface, DistanceSample, MetricReport, Weighting, NEAR_THRESHOLD};
use crate::phantom::{load_case, save_case, CaseBundle, PhantomParams};
use crate::volume::{mean, percentile, threshold_map, GridMeta, VoxelSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineId {
    NoEdit,
    Geometric,
    Ce,
    Dice,
    Intercnn,
    Editing,
}

impl EngineId {
    pub const ALL: [EngineId; 6] = [
        EngineId::NoEdit,
        EngineId::Geometric,
        EngineId::Ce,
        EngineId::Dice,
        EngineId::Intercnn,
        EngineId::Editing,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EngineId::NoEdit => "no_edit",
            EngineId::Geometric => "geometric",
            EngineId::Ce => "ce",
            EngineId::Dice => "dice",
            EngineId::Intercnn => "intercnn",
            EngineId::Editing => "editing",
        }
    }

    pub fn loss_kind(&self) -> Option<LossKind> {
        match self {
            EngineId::Ce => Some(LossKind::Ce),
            EngineId::Dice => Some(LossKind::Dice),
            EngineId::Intercnn => Some(LossKind::Intercnn),
            EngineId::Editing => Some(LossKind::Editing),
            EngineId::NoEdit | EngineId::Geometric => None,
        }
    }

    pub fn from_loss(kind: LossKind) -> Self {
        match kind {
            LossKind::Ce => EngineId::Ce,
            LossKind::Dice => EngineId::Dice,
            LossKind::Intercnn => EngineId::Intercnn,
            LossKind::Editing => EngineId::Editing,
        }
    }

    /// Whether successive edits accumulate into one encoding.
    pub fn accumulates_edits(&self) -> bool {
        *self == EngineId::Intercnn
    }
}

impl fmt::Display for EngineId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EngineId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EngineId::ALL.into_iter().find(|e| e.as_str() == s).ok_or_else(|| {
            let names: Vec<&str> = EngineId::ALL.iter().map(EngineId::as_str).collect();
            Error::InvalidParams(format!("unknown engine {s:?}; available: {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// p95 over all contour points of all test cases.
    #[default]
    Pooled,
    /// Mean over cases of the per-case p95.
    PerCase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    pub phantom: PhantomParams,
    pub error_level: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_train: 100,
            n_test: 25,
            dims: [48, 48, 48],
            spacing_mm: 1.1024,
            phantom: PhantomParams::default(),
            error_level: 3.6,
            seed: 0,
        }
    }
}

/// Desk-scale counterpart of the published sigma of 20 voxels on a 128 grid.
pub const DESK_SIGMA: f64 = 7.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    pub engines: Vec<EngineId>,
    pub n_sequential_edits: usize,
    pub seed: u64,
    pub train: TrainConfig,
    pub edit: EditConfig,
    pub weighting: Weighting,
    pub aggregation: Aggregation,
    /// Folds for cross-validation over the training split; 0 disables it.
    pub cv_folds: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let edit = EditConfig {
            sigma_enc: DESK_SIGMA,
            sigma_edit: DESK_SIGMA,
            ..EditConfig::default()
        };
        Self {
            corpus: CorpusSpec::default(),
            engines: EngineId::ALL.to_vec(),
            n_sequential_edits: 10,
            seed: 0,
            train: TrainConfig {
                edit,
                ..TrainConfig::default()
            },
            edit,
            weighting: Weighting::Soft,
            aggregation: Aggregation::Pooled,
            cv_folds: 0,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(&fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpus.n_test == 0 {
            return Err(Error::InvalidParams("n_test must be at least 1".into()));
        }
        if self.engines.is_empty() {
            return Err(Error::InvalidParams("no engines selected".into()));
        }
        if self.cv_folds == 1 || self.cv_folds > self.corpus.n_train {
            return Err(Error::InvalidParams("cv_folds must be 0 or between 2 and n_train".into()));
        }
        GridMeta::new(self.corpus.dims, self.corpus.spacing_mm)?;
        if self.corpus.error_level < 0.0 {
            return Err(Error::InvalidParams("error_level must be non-negative".into()));
        }
        if !(self.edit.sigma_enc > 0.0 && self.edit.sigma_edit > 0.0) {
            return Err(Error::InvalidParams("sigmas must be positive".into()));
        }
        if self.engines.iter().any(|e| e.loss_kind().is_some()) {
            self.train.validate()?;
        }
        Ok(())
    }

    /// Training config for one engine; the seed is shared so that all
    /// trained engines start from the same weights. Edit sigmas always come
    /// from the experiment-level `edit`.
    pub fn train_config(&self, kind: LossKind) -> TrainConfig {
        TrainConfig {
            loss_kind: kind,
            seed: mix(self.seed, self.train.seed),
            edit: self.edit,
            ..self.train.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<CaseBundle>,
    pub test: Vec<CaseBundle>,
}

fn case_seeds(spec: &CorpusSpec, split: u64, i: usize) -> (u64, u64) {
    let base = mix(mix(spec.seed, split), i as u64);
    (base, mix(base, 0x1a17))
}

pub fn generate_case(spec: &CorpusSpec, id: &str, split: u64, i: usize) -> Result<CaseBundle> {
    let meta = GridMeta::new(spec.dims, spec.spacing_mm)?;
    let (phantom_seed, init_seed) = case_seeds(spec, split, i);
    let params = PhantomParams {
        seed: phantom_seed,
        ..spec.phantom.clone()
    };
    CaseBundle::generate(id, meta, &params, spec.error_level, init_seed)
}

/// Train ids `train-000..`, test ids `test-000..`; disjoint by construction.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    let make = |prefix: &str, split: u64, n: usize| {
        (0..n)
            .map(|i| generate_case(spec, &format!("{prefix}-{i:03}"), split, i))
            .collect::<Result<Vec<_>>>()
    };
    Ok(Corpus {
        train: make("train", 1, spec.n_train)?,
        test: make("test", 2, spec.n_test)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub spec: CorpusSpec,
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// CRC32 of each member's bundle manifest, keyed by case id.
    pub members: BTreeMap<String, u32>,
}

pub const SPLIT_FILE: &str = "split.json";

fn ensure_empty(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        if !force {
            return Err(Error::OutputExists(dir.to_path_buf()));
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn make_corpus(spec: &CorpusSpec, dir: &Path, force: bool) -> Result<CorpusManifest> {
    ensure_empty(dir, force)?;
    let corpus = generate_corpus(spec)?;
    let mut members = BTreeMap::new();
    for case in corpus.train.iter().chain(&corpus.test) {
        let case_dir = dir.join(&case.id);
        save_case(case, &case_dir)?;
        members.insert(case.id.clone(), crc32fast::hash(&fs::read(case_dir.join("manifest.json"))?));
    }
    let manifest = CorpusManifest {
        spec: spec.clone(),
        train: corpus.train.iter().map(|c| c.id.clone()).collect(),
        test: corpus.test.iter().map(|c| c.id.clone()).collect(),
        members,
    };
    fs::write(dir.join(SPLIT_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_corpus(dir: &Path) -> Result<(CorpusManifest, Corpus)> {
    let split = dir.join(SPLIT_FILE);
    if !split.exists() {
        return Err(Error::MissingArtifact(split.display().to_string()));
    }
    let manifest: CorpusManifest = serde_json::from_slice(&fs::read(&split)?)?;
    let load = |ids: &[String]| -> Result<Vec<CaseBundle>> {
        ids.iter()
            .map(|id| {
                let case_dir = dir.join(id);
                let expected = manifest
                    .members
                    .get(id)
                    .ok_or_else(|| Error::MissingMember(id.clone()))?;
                let path = case_dir.join("manifest.json");
                if !path.exists() {
                    return Err(Error::MissingMember(id.clone()));
                }
                if crc32fast::hash(&fs::read(&path)?) != *expected {
                    return Err(Error::Checksum(path.display().to_string()));
                }
                load_case(&case_dir)
            })
            .collect()
    };
    let corpus = Corpus {
        train: load(&manifest.train)?,
        test: load(&manifest.test)?,
    };
    Ok((manifest, corpus))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedEngine {
    pub id: EngineId,
    pub engine: Engine,
    /// Set when the engine was trained in this process.
    pub report: Option<TrainReport>,
}

pub fn model_dir(root: &Path, kind: LossKind) -> PathBuf {
    root.join(kind.as_str())
}

/// Trains every learned engine of `cfg.engines` on `train_cases`.
pub fn train_engines(
    cfg: &ExperimentConfig,
    train_cases: &[CaseBundle],
    mut on_epoch: impl FnMut(EngineId, usize, f64),
) -> Result<Vec<NamedEngine>> {
    cfg.engines
        .iter()
        .map(|&id| {
            let (engine, report) = match id {
                EngineId::NoEdit => (Engine::NoEdit, None),
                EngineId::Geometric => (Engine::Geometric, None),
                _ => {
                    let kind = id.loss_kind().expect("learned engine");
                    let (model, report) =
                        train_with_progress(train_cases, &cfg.train_config(kind), |e, l| on_epoch(id, e, l))?;
                    let engine = Engine::Cnn {
                        name: id.as_str().into(),
                        model: Box::new(model),
                    };
                    (engine, Some(report))
                }
            };
            Ok(NamedEngine { id, engine, report })
        })
        .collect()
}

/// Engines of `cfg.engines`, learned ones loaded from `models/<loss>/`.
pub fn load_engines(cfg: &ExperimentConfig, models: &Path) -> Result<Vec<NamedEngine>> {
    cfg.engines
        .iter()
        .map(|&id| {
            let engine = match id.loss_kind() {
                None if id == EngineId::NoEdit => Engine::NoEdit,
                None => Engine::Geometric,
                Some(kind) => {
                    let dir = model_dir(models, kind);
                    let (model, _) = load_checkpoint(&dir).map_err(|e| match e {
                        Error::MissingArtifact(_) => {
                            Error::MissingArtifact(format!("checkpoint for engine {id} ({})", dir.display()))
                        }
                        other => other,
                    })?;
                    Engine::Cnn {
                        name: id.as_str().into(),
                        model: Box::new(model),
                    }
                }
            };
            Ok(NamedEngine { id, engine, report: None })
        })
        .collect()
}

pub fn save_engine(cfg: &ExperimentConfig, engine: &NamedEngine, models: &Path) -> Result<()> {
    if let (Engine::Cnn { model, .. }, Some(kind)) = (&engine.engine, engine.id.loss_kind()) {
        save_checkpoint(model, &serde_json::to_value(cfg.train_config(kind))?, &model_dir(models, kind))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub p95_mm: f64,
    pub mean_mm: f64,
    pub n_points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineRow {
    pub engine: EngineId,
    pub overall: RegionStats,
    pub near: Option<RegionStats>,
    pub far: Option<RegionStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseEdit {
    pub case_id: String,
    pub frame_id: usize,
    pub score_voxels: u32,
    pub scribble_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingleEditResult {
    pub aggregation: Aggregation,
    pub weighting: Weighting,
    pub rows: Vec<EngineRow>,
    pub edits: Vec<CaseEdit>,
}

fn fmt_f(x: f64) -> String {
    format!("{x:.6}")
}

impl SingleEditResult {
    pub fn row(&self, id: EngineId) -> Option<&EngineRow> {
        self.rows.iter().find(|r| r.engine == id)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("engine,region,p95_mm,mean_mm,n_points\n");
        for row in &self.rows {
            let regions = [("overall", Some(&row.overall)), ("near", row.near.as_ref()), ("far", row.far.as_ref())];
            for (name, stats) in regions {
                if let Some(s) = stats {
                    let _ = writeln!(out, "{},{name},{},{},{}", row.engine, fmt_f(s.p95_mm), fmt_f(s.mean_mm), s.n_points);
                }
            }
        }
        out
    }
}

fn region_stats(values: &[f64], spacing: f64) -> Result<RegionStats> {
    Ok(RegionStats {
        p95_mm: percentile(values, 95.0)? * spacing,
        mean_mm: mean(values) * spacing,
        n_points: values.len(),
    })
}

/// Per-case value lists for one engine, split by region.
#[derive(Default)]
struct Pool {
    overall: Vec<Vec<f64>>,
    near: Vec<Vec<f64>>,
    far: Vec<Vec<f64>>,
}

impl Pool {
    fn push_samples(&mut self, samples: &[DistanceSample]) {
        self.overall.push(samples.iter().map(|s| s.value).collect());
        self.near.push(samples.iter().filter(|s| s.near).map(|s| s.value).collect());
        self.far.push(samples.iter().filter(|s| !s.near).map(|s| s.value).collect());
    }

    fn summarize(lists: &[Vec<f64>], agg: Aggregation, spacing: f64) -> Result<Option<RegionStats>> {
        match agg {
            Aggregation::Pooled => {
                let all: Vec<f64> = lists.iter().flatten().copied().collect();
                if all.is_empty() {
                    return Ok(None);
                }
                region_stats(&all, spacing).map(Some)
            }
            Aggregation::PerCase => {
                let per: Vec<RegionStats> = lists
                    .iter()
                    .filter(|l| !l.is_empty())
                    .map(|l| region_stats(l, spacing))
                    .collect::<Result<_>>()?;
                if per.is_empty() {
                    return Ok(None);
                }
                let k = per.len() as f64;
                Ok(Some(RegionStats {
                    p95_mm: per.iter().map(|s| s.p95_mm).sum::<f64>() / k,
                    mean_mm: per.iter().map(|s| s.mean_mm).sum::<f64>() / k,
                    n_points: per.iter().map(|s| s.n_points).sum(),
                }))
            }
        }
    }
}

/// One edit per test case on the contour farthest from `y_init`, applied
/// by every engine.
pub fn run_single_edit_experiment(
    cfg: &ExperimentConfig,
    test: &[CaseBundle],
    engines: &[NamedEngine],
) -> Result<SingleEditResult> {
    let mut cases: Vec<&CaseBundle> = test.iter().collect();
    cases.sort_by(|a, b| a.id.cmp(&b.id));
    let spacing = cases.first().ok_or(Error::EmptySet("test set"))?.meta.spacing_mm;
    let mut pools: Vec<Pool> = engines.iter().map(|_| Pool::default()).collect();
    let mut edits = Vec::with_capacity(cases.len());
    for case in cases {
        let planes = case.frames.planes();
        let chosen = select_test_edit(&case.y_init, &case.cas_contours, &case.frames, &planes, &BTreeSet::new(), &cfg.edit)?;
        let rec = encode_edit(&chosen.scribble, case.meta, cfg.edit.sigma_enc, cfg.edit.sigma_edit, 0)?;
        edits.push(CaseEdit {
            case_id: case.id.clone(),
            frame_id: chosen.scribble.frame_id,
            score_voxels: chosen.score,
            scribble_len: chosen.scribble.path.len(),
        });
        let input = EngineInput::new(case.x.clone(), case.y_init.clone(), rec.u.clone())?;
        for (named, pool) in engines.iter().zip(&mut pools) {
            if named.id == EngineId::NoEdit {
                pool.overall.push(cas_to_mask(case, &planes, &case.y_init)?);
                continue;
            }
            let mask = threshold_map(&named.engine.apply(&input, &rec.a)?, 0.5)?;
            pool.push_samples(&evaluate_with(case, &planes, &mask, &rec.a, cfg.weighting)?);
        }
    }
    let rows = engines
        .iter()
        .zip(&pools)
        .map(|(named, pool)| {
            let overall = Pool::summarize(&pool.overall, cfg.aggregation, spacing)?
                .ok_or(Error::EmptySet("contour points"))?;
            Ok(EngineRow {
                engine: named.id,
                overall,
                near: Pool::summarize(&pool.near, cfg.aggregation, spacing)?,
                far: Pool::summarize(&pool.far, cfg.aggregation, spacing)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SingleEditResult {
        aggregation: cfg.aggregation,
        weighting: cfg.weighting,
        rows,
        edits,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub engine: EngineId,
    pub case_id: String,
    pub t: usize,
    pub frame_id: usize,
    /// p95 distance from all CAS points to the prediction.
    pub cas_p95_mm: f64,
    /// p95 distance from the first edit's CAS points with `A >= 0.5` to the
    /// prediction.
    pub first_edit_p95_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequentialResult {
    pub records: Vec<IterationRecord>,
    /// Number of iterations actually run per (engine, case).
    pub completed: BTreeMap<String, usize>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

impl SequentialResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("engine,case,t,frame_id,cas_p95_mm,first_edit_p95_mm\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.engine,
                r.case_id,
                r.t,
                r.frame_id,
                fmt_f(r.cas_p95_mm),
                fmt_f(r.first_edit_p95_mm)
            );
        }
        out
    }

    fn series(&self, engine: EngineId) -> BTreeMap<&str, Vec<&IterationRecord>> {
        let mut out: BTreeMap<&str, Vec<&IterationRecord>> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.engine == engine) {
            out.entry(r.case_id.as_str()).or_default().push(r);
        }
        out
    }

    /// Median over cases of the CAS p95 at each iteration, over the cases
    /// that reached it.
    pub fn median_curve(&self, engine: EngineId) -> Vec<f64> {
        let series = self.series(engine);
        let len = series.values().map(Vec::len).max().unwrap_or(0);
        (0..len)
            .map(|t| {
                let mut v: Vec<f64> = series.values().filter_map(|s| s.get(t)).map(|r| r.cas_p95_mm).collect();
                median(&mut v)
            })
            .collect()
    }

    /// Per case: largest first-edit-region error over iterations 2.. minus
    /// the error right after the first edit.
    pub fn first_edit_growth(&self, engine: EngineId) -> BTreeMap<String, f64> {
        self.series(engine)
            .into_iter()
            .filter(|(_, s)| s.len() >= 2)
            .map(|(id, s)| {
                let later = s[1..].iter().map(|r| r.first_edit_p95_mm).fold(f64::MIN, f64::max);
                (id.to_string(), later - s[0].first_edit_p95_mm)
            })
            .collect()
    }

    pub fn frames_distinct(&self) -> bool {
        let mut seen: BTreeMap<(EngineId, &str), BTreeSet<usize>> = BTreeMap::new();
        self.records
            .iter()
            .all(|r| seen.entry((r.engine, r.case_id.as_str())).or_default().insert(r.frame_id))
    }
}

/// Repeated edits per case with `y_init` chained to the previous output and
/// no frame edited twice.
pub fn run_sequential_experiment(
    cfg: &ExperimentConfig,
    test: &[CaseBundle],
    engines: &[NamedEngine],
) -> Result<SequentialResult> {
    let mut cases: Vec<&CaseBundle> = test.iter().collect();
    cases.sort_by(|a, b| a.id.cmp(&b.id));
    let mut records = Vec::new();
    let mut completed = BTreeMap::new();
    for named in engines.iter().filter(|e| e.id != EngineId::NoEdit) {
        for case in &cases {
            let planes = case.frames.planes();
            let spacing = case.meta.spacing_mm;
            let mut current = case.y_init.clone();
            let mut excluded = BTreeSet::new();
            let mut acc_u = None;
            let mut first: Option<Vec<[usize; 3]>> = None;
            let mut done = 0;
            for t in 0..cfg.n_sequential_edits {
                let chosen = match select_test_edit(&current, &case.cas_contours, &case.frames, &planes, &excluded, &cfg.edit) {
                    Ok(c) => c,
                    Err(Error::NoCandidateEdits) => break,
                    Err(e) => return Err(e),
                };
                let frame_id = chosen.scribble.frame_id;
                excluded.insert(frame_id);
                let rec = encode_edit(&chosen.scribble, case.meta, cfg.edit.sigma_enc, cfg.edit.sigma_edit, t)?;
                let u = match (&acc_u, named.id.accumulates_edits()) {
                    (Some(prev), true) => rec.u.max_with(prev)?,
                    _ => rec.u.clone(),
                };
                if named.id.accumulates_edits() {
                    acc_u = Some(u.clone());
                }
                let input = EngineInput::new(case.x.clone(), current.clone(), u)?;
                let mask = threshold_map(&named.engine.apply(&input, &rec.a)?, 0.5)?;
                let region = first.get_or_insert_with(|| {
                    let pos = case.frames.position(frame_id).expect("frame from this case");
                    case.cas_contours[pos]
                        .points()
                        .iter()
                        .copied()
                        .filter(|&p| rec.a.get(p) >= NEAR_THRESHOLD)
                        .collect()
                });
                let surface = VoxelSet::union(case.meta, &contours_on_planes(&mask, &planes));
                let cas_p95_mm = if surface.is_empty() {
                    f64::INFINITY
                } else {
                    percentile(&cas_to_mask(case, &planes, &mask)?, 95.0)? * spacing
                };
                let first_edit_p95_mm = if surface.is_empty() {
                    f64::INFINITY
                } else {
                    percentile(&point_to_surface(region, &surface)?, 95.0)? * spacing
                };
                records.push(IterationRecord {
                    engine: named.id,
                    case_id: case.id.clone(),
                    t,
                    frame_id,
                    cas_p95_mm,
                    first_edit_p95_mm,
                });
                current = mask;
                done += 1;
                if current.is_degenerate() {
                    break;
                }
            }
            completed.insert(format!("{}/{}", named.id, case.id), done);
        }
    }
    Ok(SequentialResult { records, completed })
}

/// What a spread summary varies over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpreadOver {
    /// Cross-validation folds of the training split.
    CvFolds,
    /// Independent corpus and training seeds.
    Seeds,
}

impl SpreadOver {
    pub fn as_str(&self) -> &'static str {
        match self {
            SpreadOver::CvFolds => "cv_folds",
            SpreadOver::Seeds => "seeds",
        }
    }
}

/// Mean and sample standard deviation of a p95 over repeated runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpreadSummary {
    pub engine: EngineId,
    pub region: String,
    pub over: SpreadOver,
    pub p95_mm_mean: f64,
    pub p95_mm_std: f64,
    pub n_runs: usize,
}

fn summarize(engines: &[EngineId], runs: &[SingleEditResult], over: SpreadOver) -> Vec<SpreadSummary> {
    let mut out = Vec::new();
    for &engine in engines {
        for region in ["overall", "near", "far"] {
            let vals: Vec<f64> = runs
                .iter()
                .filter_map(|r| r.row(engine))
                .filter_map(|row| match region {
                    "overall" => Some(row.overall.p95_mm),
                    "near" => row.near.as_ref().map(|s| s.p95_mm),
                    _ => row.far.as_ref().map(|s| s.p95_mm),
                })
                .collect();
            if vals.is_empty() {
                continue;
            }
            let m = mean(&vals);
            let var = if vals.len() > 1 {
                vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64
            } else {
                0.0
            };
            out.push(SpreadSummary {
                engine,
                region: region.into(),
                over,
                p95_mm_mean: m,
                p95_mm_std: var.sqrt(),
                n_runs: vals.len(),
            });
        }
    }
    out
}

/// k-fold cross-validation of the single-edit experiment over the training
/// split.
pub fn run_cross_validation(cfg: &ExperimentConfig, train_cases: &[CaseBundle]) -> Result<Vec<SpreadSummary>> {
    let k = cfg.cv_folds;
    if k < 2 || k > train_cases.len() {
        return Err(Error::InvalidParams("cross-validation needs 2 <= folds <= n_train".into()));
    }
    let mut per_fold: Vec<SingleEditResult> = Vec::with_capacity(k);
    for fold in 0..k {
        let (held, rest): (Vec<_>, Vec<_>) = train_cases.iter().enumerate().partition(|(i, _)| i % k == fold);
        let held: Vec<CaseBundle> = held.into_iter().map(|(_, c)| c.clone()).collect();
        let rest: Vec<CaseBundle> = rest.into_iter().map(|(_, c)| c.clone()).collect();
        let engines = train_engines(cfg, &rest, |_, _, _| {})?;
        per_fold.push(run_single_edit_experiment(cfg, &held, &engines)?);
    }
    Ok(summarize(&cfg.engines, &per_fold, SpreadOver::CvFolds))
}

/// Repeats corpus generation, training and the single-edit experiment with
/// `n` consecutive seeds starting at the configured ones.
pub fn run_seed_repeats(cfg: &ExperimentConfig, n: usize) -> Result<Vec<SpreadSummary>> {
    if n < 2 {
        return Err(Error::InvalidParams("seed repeats need at least 2 runs".into()));
    }
    let mut runs = Vec::with_capacity(n);
    for r in 0..n as u64 {
        let mut c = cfg.clone();
        c.seed = cfg.seed.wrapping_add(r);
        c.corpus.seed = cfg.corpus.seed.wrapping_add(r);
        let corpus = generate_corpus(&c.corpus)?;
        let engines = train_engines(&c, &corpus.train, |_, _, _| {})?;
        runs.push(run_single_edit_experiment(&c, &corpus.test, &engines)?);
    }
    Ok(summarize(&cfg.engines, &runs, SpreadOver::Seeds))
}

pub fn spread_to_csv(rows: &[SpreadSummary]) -> String {
    let mut out = String::from("engine,region,over,p95_mm_mean,p95_mm_std,n_runs\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.engine,
            r.region,
            r.over.as_str(),
            fmt_f(r.p95_mm_mean),
            fmt_f(r.p95_mm_std),
            r.n_runs
        );
    }
    out
}

/// Writes `<stem>.csv` and `<stem>.json` into `dir`.
pub fn write_outputs<T: Serialize>(dir: &Path, stem: &str, csv: &str, value: &T) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.csv")), csv)?;
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

/// Reports for the no-edit baseline, per case, in id order.
pub fn no_edit_reports(test: &[CaseBundle]) -> Result<Vec<(String, MetricReport)>> {
    let mut cases: Vec<&CaseBundle> = test.iter().collect();
    cases.sort_by(|a, b| a.id.cmp(&b.id));
    cases
        .into_iter()
        .map(|c| Ok((c.id.clone(), crate::metrics::no_edit_baseline(c)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> CorpusSpec {
        CorpusSpec {
            n_train: 4,
            n_test: 2,
            dims: [32, 32, 32],
            phantom: PhantomParams {
                base_radii: [8.0, 7.0, 7.0],
                n_frames: 6,
                ..PhantomParams::default()
            },
            error_level: 2.0,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn engine_ids_parse() {
        for id in EngineId::ALL {
            assert_eq!(id.as_str().parse::<EngineId>().unwrap(), id);
        }
        let err = "foo".parse::<EngineId>().unwrap_err().to_string();
        assert!(err.contains("geometric") && err.contains("editing"));
    }

    #[test]
    fn corpus_split_is_disjoint_and_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("corpus");
        let m1 = make_corpus(&tiny_spec(), &out, false).unwrap();
        assert_eq!(m1.members.len(), 6);
        let train: BTreeSet<_> = m1.train.iter().collect();
        assert!(m1.test.iter().all(|t| !train.contains(t)));
        let all: BTreeSet<_> = m1.train.iter().chain(&m1.test).cloned().collect();
        assert_eq!(all, m1.members.keys().cloned().collect());
        assert!(matches!(make_corpus(&tiny_spec(), &out, false), Err(Error::OutputExists(_))));
        let m2 = make_corpus(&tiny_spec(), &out, true).unwrap();
        assert_eq!(m1, m2);
        let (_, corpus) = load_corpus(&out).unwrap();
        assert_eq!(corpus, generate_corpus(&tiny_spec()).unwrap());
    }

    #[test]
    fn no_edit_only_table_matches_baseline() {
        let corpus = generate_corpus(&tiny_spec()).unwrap();
        let cfg = ExperimentConfig {
            corpus: tiny_spec(),
            engines: vec![EngineId::NoEdit],
            ..ExperimentConfig::default()
        };
        let engines = load_engines(&cfg, Path::new("/nonexistent")).unwrap();
        let r = run_single_edit_experiment(&cfg, &corpus.test, &engines).unwrap();
        let mut pooled = Vec::new();
        for case in &corpus.test {
            pooled.extend(cas_to_mask(case, &case.frames.planes(), &case.y_init).unwrap());
        }
        let expect = percentile(&pooled, 95.0).unwrap() * case_spacing(&corpus);
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.rows[0].overall.p95_mm, expect);
        assert!(r.rows[0].near.is_none());
        assert_eq!(r.to_csv().lines().count(), 2);
    }

    fn case_spacing(c: &Corpus) -> f64 {
        c.test[0].meta.spacing_mm
    }

    #[test]
    fn missing_checkpoint_names_the_engine() {
        let cfg = ExperimentConfig {
            engines: vec![EngineId::Editing],
            ..ExperimentConfig::default()
        };
        match load_engines(&cfg, Path::new("/nonexistent")) {
            Err(Error::MissingArtifact(msg)) => assert!(msg.contains("editing")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn geometric_sequential_run_is_chained_and_distinct() {
        let corpus = generate_corpus(&tiny_spec()).unwrap();
        let cfg = ExperimentConfig {
            corpus: tiny_spec(),
            engines: vec![EngineId::Geometric],
            n_sequential_edits: 4,
            ..ExperimentConfig::default()
        };
        let engines = load_engines(&cfg, Path::new("/nonexistent")).unwrap();
        let r = run_sequential_experiment(&cfg, &corpus.test, &engines).unwrap();
        assert!(r.frames_distinct());
        assert_eq!(r.records.len(), 8);
        assert_eq!(r.median_curve(EngineId::Geometric).len(), 4);
        assert_eq!(r, run_sequential_experiment(&cfg, &corpus.test, &engines).unwrap());
    }

    #[test]
    fn config_validation() {
        let mut cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        cfg.corpus.n_test = 0;
        assert!(cfg.validate().is_err());
        let json = r#"{"engines": ["geometric", "foo"]}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(json).is_err());
        let json = r#"{"engines": ["geometric"], "corpus": {"n_train": 3}}"#;
        let cfg: ExperimentConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.corpus.n_train, 3);
        assert_eq!(cfg.edit.sigma_enc, DESK_SIGMA);
    }

    #[test]
    fn spread_summaries_over_folds_and_seeds() {
        let spec = CorpusSpec { n_train: 4, ..tiny_spec() };
        let cfg = ExperimentConfig {
            corpus: spec.clone(),
            engines: vec![EngineId::NoEdit, EngineId::Geometric],
            cv_folds: 2,
            ..ExperimentConfig::default()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let folds = run_cross_validation(&cfg, &corpus.train).unwrap();
        // no_edit has only an overall row, geometric has all three
        assert_eq!(folds.len(), 4);
        assert!(folds.iter().all(|f| f.over == SpreadOver::CvFolds && f.n_runs == 2 && f.p95_mm_std >= 0.0));

        let seeds = run_seed_repeats(&cfg, 2).unwrap();
        assert!(seeds.iter().all(|f| f.over == SpreadOver::Seeds && f.n_runs == 2));
        let first = run_single_edit_experiment(&cfg, &corpus.test, &load_engines(&cfg, Path::new("/x")).unwrap()).unwrap();
        let overall = &seeds[0];
        assert_eq!(overall.engine, EngineId::NoEdit);
        // the first repeat is the configured corpus itself
        let mut c2 = cfg.clone();
        c2.corpus.seed += 1;
        let second = generate_corpus(&c2.corpus).unwrap();
        let r2 = run_single_edit_experiment(&c2, &second.test, &load_engines(&c2, Path::new("/x")).unwrap()).unwrap();
        let (a, b) = (first.rows[0].overall.p95_mm, r2.rows[0].overall.p95_mm);
        assert!((overall.p95_mm_mean - (a + b) / 2.0).abs() < 1e-12);
        assert!(spread_to_csv(&seeds).starts_with("engine,region,over,"));
        assert!(run_seed_repeats(&cfg, 1).is_err());
    }
}
