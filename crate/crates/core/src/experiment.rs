//! Cross-validated missingness grids: split, inject, preprocess, optionally
//! impute, train, score, and write the report files.
//!
//! A training run depends on the training missing rate, fold and method
//! but not on the test missing rate, so one trained model is scored on
//! every configured test rate.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    load_csv, stratified_kfold, FeatureSchema, Fold, FoldPlan, Preprocessor, RawDataset, SchemaSpec, TabularDataset,
};
use crate::error::{Error, Result};
use crate::impute::{apply_knn, apply_mean, fit_knn, fit_mean, KnnImputerState, MeanImputerState, DEFAULT_K};
use crate::io::write_atomic;
use crate::metrics::{aggregate_grid, auc, compare, format_grid, format_win_loss, FoldScore, Outcome, WinLoss};
use crate::missingness::inject_mcar_grid;
use crate::model::{checkpoint, NaimConfig, NaimParameters, TokenKind};
use crate::seed::{derive_seed, label_seed, rng_from};
use crate::train::{positive_scores, score_dataset, train_with_observer, EpochRecord, TrainConfig, TrainHistory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "naim")]
    Naim,
    #[serde(rename = "naim-no-reg")]
    NaimNoReg,
    #[serde(rename = "naim-no-reg+mean")]
    NaimNoRegMean,
    #[serde(rename = "naim-no-reg+knn")]
    NaimNoRegKnn,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Naim, Method::NaimNoReg, Method::NaimNoRegMean, Method::NaimNoRegKnn];

    pub fn id(self) -> &'static str {
        match self {
            Method::Naim => "naim",
            Method::NaimNoReg => "naim-no-reg",
            Method::NaimNoRegMean => "naim-no-reg+mean",
            Method::NaimNoRegKnn => "naim-no-reg+knn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }

    pub fn augmentation(self) -> bool {
        self == Method::Naim
    }

    pub fn imputer(self) -> Option<ImputerKind> {
        match self {
            Method::NaimNoRegMean => Some(ImputerKind::Mean),
            Method::NaimNoRegKnn => Some(ImputerKind::Knn),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImputerKind {
    Mean,
    Knn,
}

/// Which missing rate the validation split receives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValidationMissing {
    /// Injected together with the training split.
    #[default]
    Train,
    /// Injected at each test rate, which means one training run per test rate.
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Short dataset label used in reports.
    pub name: String,
    pub dataset: PathBuf,
    pub schema: PathBuf,
    #[serde(default)]
    pub model: NaimConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Missing fractions in `[0, 1)`.
    #[serde(default = "default_rates")]
    pub train_missing: Vec<f64>,
    #[serde(default = "default_rates")]
    pub test_missing: Vec<f64>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub validation_missing: ValidationMissing,
    #[serde(default = "default_k")]
    pub knn_k: usize,
}

fn default_methods() -> Vec<Method> {
    vec![Method::Naim]
}

fn default_rates() -> Vec<f64> {
    vec![0.0, 0.05, 0.10, 0.25, 0.50, 0.75]
}

fn default_folds() -> usize {
    5
}

fn default_k() -> usize {
    DEFAULT_K
}

/// Integer percentage used in cell labels.
pub fn pct(rate: f64) -> u32 {
    (rate * 100.0).round() as u32
}

impl ExperimentConfig {
    /// Reads a JSON config; relative data paths resolve against the
    /// config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset, &mut cfg.schema] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.methods.is_empty() {
            return Err(Error::Config("no methods configured".into()));
        }
        for &r in self.train_missing.iter().chain(&self.test_missing) {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("missing rate {r} outside [0, 1)")));
            }
        }
        if self.train_missing.is_empty() || self.test_missing.is_empty() {
            return Err(Error::Config("missing-rate lists must be non-empty".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("need at least 2 folds, got {}", self.folds)));
        }
        if self.knn_k == 0 {
            return Err(Error::Config("knn_k must be positive".into()));
        }
        Ok(())
    }

    /// Number of (method, train rate, test rate, fold) result rows.
    pub fn cell_count(&self) -> usize {
        self.methods.len() * self.train_missing.len() * self.test_missing.len() * self.folds
    }
}

/// Seeds of one scored cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSeeds {
    pub split: u64,
    pub train_mcar: u64,
    pub test_mcar: u64,
    pub model: u64,
}

/// Seed scheme. Data seeds leave out the method so every method sees the
/// same masks; the model seed leaves out the test rate because one model
/// serves all test rates.
pub fn cell_seeds(master: u64, train_rate: f64, test_rate: f64, fold: usize, method: Method, val: ValidationMissing) -> CellSeeds {
    let (tr, te, f) = (u64::from(pct(train_rate)), u64::from(pct(test_rate)), fold as u64);
    let val_key = match val {
        ValidationMissing::Train => u64::MAX,
        ValidationMissing::Test => te,
    };
    CellSeeds {
        split: derive_seed(&[master, label_seed("split")]),
        train_mcar: derive_seed(&[master, label_seed("train-mcar"), tr, f]),
        test_mcar: derive_seed(&[master, label_seed("test-mcar"), tr, te, f]),
        model: derive_seed(&[master, label_seed("model"), tr, val_key, f, label_seed(method.id())]),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: Method,
    pub train_pct: u32,
    pub test_pct: u32,
    pub fold: usize,
    pub auc: Option<f64>,
    pub test_loss: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs: Option<usize>,
    pub seeds: CellSeeds,
    pub error: Option<String>,
}

/// Test-set predictions of one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellPredictions {
    pub method: Method,
    pub train_pct: u32,
    pub test_pct: u32,
    pub fold: usize,
    /// Dataset row indices.
    pub rows: Vec<usize>,
    pub labels: Vec<usize>,
    pub scores: Vec<f64>,
    /// Probability given to the true class.
    pub true_class_prob: Vec<f64>,
}

/// One training run and the test rates it is scored on.
#[derive(Clone, Debug, PartialEq)]
struct Unit {
    method: Method,
    train_rate: f64,
    /// Validation rate when it follows the test rate.
    val_rate: Option<f64>,
    fold: usize,
    test_rates: Vec<f64>,
}

impl Unit {
    fn label(&self) -> String {
        let mut s = format!("{}_tr{}", self.method.id(), pct(self.train_rate));
        if let Some(v) = self.val_rate {
            let _ = write!(s, "_val{}", pct(v));
        }
        let _ = write!(s, "_f{}", self.fold);
        s
    }
}

fn plan_units(cfg: &ExperimentConfig) -> Vec<Unit> {
    let mut units = Vec::new();
    for &method in &cfg.methods {
        for &train_rate in &cfg.train_missing {
            for fold in 0..cfg.folds {
                match cfg.validation_missing {
                    ValidationMissing::Train => units.push(Unit {
                        method,
                        train_rate,
                        val_rate: None,
                        fold,
                        test_rates: cfg.test_missing.clone(),
                    }),
                    ValidationMissing::Test => units.extend(cfg.test_missing.iter().map(|&t| Unit {
                        method,
                        train_rate,
                        val_rate: Some(t),
                        fold,
                        test_rates: vec![t],
                    })),
                }
            }
        }
    }
    units
}

/// A fitted imputer, serializable so checkpoints are self-contained.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FittedImputer {
    None,
    Mean(MeanImputerState),
    /// The KNN imputer is its training split; it is rebuilt on load.
    Knn { k: usize, values: Vec<f64>, present: Vec<bool> },
}

impl FittedImputer {
    fn fit(kind: Option<ImputerKind>, train: &TabularDataset, k: usize) -> Result<Self> {
        Ok(match kind {
            None => Self::None,
            Some(ImputerKind::Mean) => Self::Mean(fit_mean(train)),
            Some(ImputerKind::Knn) => Self::Knn {
                k: k.min(train.n_samples()),
                values: train.values().to_vec(),
                present: train.present().to_vec(),
            },
        })
    }

    fn build(&self, schema: &FeatureSchema) -> Result<BuiltImputer> {
        Ok(match self {
            Self::None => BuiltImputer::None,
            Self::Mean(s) => BuiltImputer::Mean(s.clone()),
            Self::Knn { k, values, present } => {
                let n = present.len() / schema.features.len().max(1);
                let train = TabularDataset::new(schema.clone(), values.clone(), present.clone(), vec![0; n])?;
                BuiltImputer::Knn(Box::new(fit_knn(&train, *k)?))
            }
        })
    }
}

enum BuiltImputer {
    None,
    Mean(MeanImputerState),
    Knn(Box<KnnImputerState>),
}

impl BuiltImputer {
    fn apply(&self, d: TabularDataset) -> Result<TabularDataset> {
        match self {
            Self::None => Ok(d),
            Self::Mean(s) => apply_mean(s, &d),
            Self::Knn(s) => apply_knn(s, &d),
        }
    }
}

/// Test-set evaluation of a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub auc: f64,
    pub loss: f64,
    pub probs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Scored {
    pub fn true_class_prob(&self) -> Vec<f64> {
        self.probs.iter().zip(&self.labels).map(|(p, &l)| p[l]).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelRecord {
    method: Method,
    schema: SchemaSpec,
    preprocessor: Preprocessor,
    imputer: FittedImputer,
    best_epoch: usize,
}

/// A trained network with the preprocessing and imputation fitted on its
/// training split.
pub struct TrainedModel {
    pub method: Method,
    pub schema: SchemaSpec,
    pub params: NaimParameters,
    pub preprocessor: Preprocessor,
    pub history: TrainHistory,
    imputer: FittedImputer,
    built: BuiltImputer,
}

impl TrainedModel {
    /// Preprocesses and, for imputation methods, imputes raw rows.
    pub fn prepare(&self, raw: &RawDataset) -> Result<TabularDataset> {
        self.built.apply(self.preprocessor.apply(raw)?)
    }

    pub fn score(&self, raw: &RawDataset) -> Result<Scored> {
        let data = self.prepare(raw)?;
        let (loss, probs) = score_dataset(&self.params, &data)?;
        let auc = auc(&positive_scores(&probs), data.labels())?;
        Ok(Scored { auc, loss, probs, labels: data.labels().to_vec() })
    }

    /// Writes a checkpoint carrying the weights, schema, preprocessor and
    /// imputer.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let record = ModelRecord {
            method: self.method,
            schema: self.schema.clone(),
            preprocessor: self.preprocessor.clone(),
            imputer: self.imputer.clone(),
            best_epoch: self.history.best_epoch,
        };
        checkpoint::save(path, &self.params, serde_json::to_value(record)?)
    }

    /// Loads a checkpoint written by [`TrainedModel::save`]; the training
    /// history is not stored and comes back empty.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (params, meta) = checkpoint::load(path)?;
        let record: ModelRecord = serde_json::from_value(meta.extra)
            .map_err(|e| Error::Checkpoint(format!("checkpoint lacks a model record: {e}")))?;
        let built = record.imputer.build(&record.preprocessor.schema())?;
        Ok(Self {
            method: record.method,
            schema: record.schema,
            params,
            preprocessor: record.preprocessor,
            history: TrainHistory { best_epoch: record.best_epoch, ..TrainHistory::default() },
            imputer: record.imputer,
            built,
        })
    }
}

/// The training and validation splits of one fold after missingness
/// injection.
fn inject_train_val(
    cfg: &ExperimentConfig,
    raw: &RawDataset,
    fold: &Fold,
    unit: &Unit,
    seeds: CellSeeds,
) -> Result<(RawDataset, RawDataset)> {
    Ok(match unit.val_rate {
        None => {
            let joint: Vec<usize> = fold.train.iter().chain(&fold.validation).copied().collect();
            let injected = inject(raw.subset(&joint), unit.train_rate, seeds.train_mcar)?;
            let n = fold.train.len();
            let idx: Vec<usize> = (0..joint.len()).collect();
            (injected.subset(&idx[..n]), injected.subset(&idx[n..]))
        }
        Some(v) => {
            let _ = cfg;
            (
                inject(raw.subset(&fold.train), unit.train_rate, seeds.train_mcar)?,
                inject(raw.subset(&fold.validation), v, derive_seed(&[seeds.test_mcar, label_seed("validation")]))?,
            )
        }
    })
}

fn fit_unit(
    cfg: &ExperimentConfig,
    spec: &SchemaSpec,
    raw: &RawDataset,
    fold: &Fold,
    unit: &Unit,
    observe: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainedModel> {
    let seeds = cell_seeds(cfg.seed, unit.train_rate, unit.test_rates[0], unit.fold, unit.method, cfg.validation_missing);
    let (train_raw, val_raw) = inject_train_val(cfg, raw, fold, unit, seeds)?;
    let preprocessor = Preprocessor::fit(&train_raw);
    let train_set = preprocessor.apply(&train_raw)?;
    let imputer = FittedImputer::fit(unit.method.imputer(), &train_set, cfg.knn_k)?;
    let built = imputer.build(train_set.schema())?;
    let val_set = built.apply(preprocessor.apply(&val_raw)?)?;
    let train_set = built.apply(train_set)?;

    let tokens = TokenKind::from_schema(train_set.schema());
    let model_cfg = NaimConfig { n_classes: train_set.schema().classes.len(), ..cfg.model.clone() };
    let params = NaimParameters::init(&model_cfg, &tokens, &mut rng_from(&[seeds.model, label_seed("init")]))?;
    let train_cfg = TrainConfig {
        seed: seeds.model,
        augmentation: cfg.train.augmentation && unit.method.augmentation(),
        ..cfg.train.clone()
    };
    let outcome = train_with_observer(params, &train_set, &val_set, &train_cfg, observe)?;
    Ok(TrainedModel {
        method: unit.method,
        schema: spec.clone(),
        params: outcome.params,
        preprocessor,
        history: outcome.history,
        imputer,
        built,
    })
}

struct UnitOutput {
    model: TrainedModel,
    scored: Vec<Scored>,
}

fn run_unit(
    cfg: &ExperimentConfig,
    spec: &SchemaSpec,
    raw: &RawDataset,
    plan: &FoldPlan,
    unit: &Unit,
    observe: &mut dyn FnMut(&EpochRecord),
) -> Result<UnitOutput> {
    let fold = &plan.folds[unit.fold];
    let model = fit_unit(cfg, spec, raw, fold, unit, observe)?;
    let mut scored = Vec::new();
    for &test_rate in &unit.test_rates {
        let seeds = cell_seeds(cfg.seed, unit.train_rate, test_rate, unit.fold, unit.method, cfg.validation_missing);
        scored.push(model.score(&inject(raw.subset(&fold.test), test_rate, seeds.test_mcar)?)?);
    }
    Ok(UnitOutput { model, scored })
}

/// Loads the configured dataset and its fold plan.
pub fn load_experiment_data(cfg: &ExperimentConfig) -> Result<(SchemaSpec, RawDataset, FoldPlan)> {
    let spec = SchemaSpec::load(&cfg.schema)?;
    let raw = load_csv(&cfg.dataset, &spec)?;
    let split = cell_seeds(cfg.seed, 0.0, 0.0, 0, cfg.methods[0], cfg.validation_missing).split;
    let plan = stratified_kfold(&raw.labels, cfg.folds, split)?;
    Ok((spec, raw, plan))
}

/// Trains one model exactly as the grid would for the given method,
/// training missing rate and fold.
pub fn train_one(
    cfg: &ExperimentConfig,
    method: Method,
    train_rate: f64,
    fold: usize,
    observe: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainedModel> {
    cfg.validate()?;
    let (spec, raw, plan) = load_experiment_data(cfg)?;
    let f = plan
        .folds
        .get(fold)
        .ok_or_else(|| Error::Config(format!("fold {fold} out of range for {} folds", cfg.folds)))?;
    let unit = Unit {
        method,
        train_rate,
        val_rate: (cfg.validation_missing == ValidationMissing::Test).then_some(train_rate),
        fold,
        test_rates: vec![train_rate],
    };
    fit_unit(cfg, &spec, &raw, f, &unit, observe)
}

/// Applies MCAR missingness at `rate` to raw rows; a zero rate is a no-op.
pub fn inject(raw: RawDataset, rate: f64, seed: u64) -> Result<RawDataset> {
    if rate == 0.0 {
        return Ok(raw);
    }
    let present = raw.present();
    let grid = inject_mcar_grid(&present, raw.len(), raw.n_features(), rate, &mut rng_from(&[seed]))?;
    raw.with_present(&grid)
}

#[derive(Clone, Debug, Default)]
pub struct GridOptions {
    pub jobs: usize,
    pub out: Option<PathBuf>,
    /// Print per-epoch progress to stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UnitRecord {
    pub label: String,
    pub seconds: f64,
    pub epochs: usize,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: ExperimentConfig,
    pub cells: Vec<CellResult>,
    pub runs: Vec<UnitRecord>,
    pub total_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct GridReport {
    pub cells: Vec<CellResult>,
    pub predictions: Vec<CellPredictions>,
    pub histories: Vec<(String, TrainHistory)>,
    pub manifest: RunManifest,
}

impl GridReport {
    pub fn fold_scores(&self) -> Vec<FoldScore> {
        self.cells
            .iter()
            .filter_map(|c| {
                c.auc.map(|auc| FoldScore {
                    train_pct: c.train_pct,
                    test_pct: c.test_pct,
                    method: c.method.id().into(),
                    fold: c.fold,
                    auc,
                })
            })
            .collect()
    }

    pub fn results_csv(&self) -> String {
        let mut out = String::from("method,train_pct,test_pct,fold,auc,test_loss,best_epoch,epochs,status\n");
        for c in &self.cells {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let optu = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                c.method.id(),
                c.train_pct,
                c.test_pct,
                c.fold,
                opt(c.auc),
                opt(c.test_loss),
                optu(c.best_epoch),
                optu(c.epochs),
                if c.error.is_none() { "ok" } else { "failed" }
            );
        }
        out
    }

    pub fn predictions_csv(&self) -> String {
        let mut out = String::from("method,train_pct,test_pct,fold,row,label,score\n");
        for p in &self.predictions {
            for ((r, l), s) in p.rows.iter().zip(&p.labels).zip(&p.scores) {
                let _ = writeln!(out, "{},{},{},{},{r},{l},{s}", p.method.id(), p.train_pct, p.test_pct, p.fold);
            }
        }
        out
    }

    /// Table of mean AUC and standard error, followed by the
    /// win/loss table of the first configured method against the others.
    pub fn grid_text(&self) -> Result<String> {
        let cells = aggregate_grid(&self.fold_scores())?;
        let mut out = format!("dataset: {}\n\n", self.manifest.config.name);
        out.push_str(&format_grid(&cells));
        let wl = self.win_loss()?;
        if !wl.is_empty() {
            let _ = write!(
                out,
                "\nsignificant wins/losses of {} (paired Wilcoxon on true-class probabilities, p < 0.05)\n\n",
                self.manifest.config.methods[0].id()
            );
            out.push_str(&format_win_loss(&wl));
        }
        Ok(out)
    }

    /// Win/loss counts of the first configured method against each other
    /// method over the (train %, test %) cells. Samples are paired across
    /// all folds of a cell.
    pub fn win_loss(&self) -> Result<Vec<WinLoss>> {
        let methods = &self.manifest.config.methods;
        let Some(&reference) = methods.first() else { return Ok(Vec::new()) };
        let collect = |m: Method, tr: u32, te: u32| -> Vec<(usize, usize, f64)> {
            let mut v: Vec<(usize, usize, f64)> = self
                .predictions
                .iter()
                .filter(|p| p.method == m && p.train_pct == tr && p.test_pct == te)
                .flat_map(|p| p.rows.iter().zip(&p.true_class_prob).map(move |(&r, &q)| (p.fold, r, q)))
                .collect();
            v.sort_by_key(|a| (a.0, a.1));
            v
        };
        let mut rows = Vec::new();
        for &other in &methods[1..] {
            let mut row = WinLoss {
                competitor: other.id().into(),
                dataset: self.manifest.config.name.clone(),
                wins: 0,
                losses: 0,
                cells: 0,
            };
            for &tr in &self.manifest.config.train_missing {
                for &te in &self.manifest.config.test_missing {
                    let (a, b) = (collect(reference, pct(tr), pct(te)), collect(other, pct(tr), pct(te)));
                    if a.is_empty() || a.len() != b.len() {
                        continue;
                    }
                    let xa: Vec<f64> = a.iter().map(|t| t.2).collect();
                    let xb: Vec<f64> = b.iter().map(|t| t.2).collect();
                    row.cells += 1;
                    match compare(&xa, &xb)? {
                        Outcome::Win => row.wins += 1,
                        Outcome::Loss => row.losses += 1,
                        Outcome::Tie => {}
                    }
                }
            }
            rows.push(row);
        }
        Ok(rows)
    }

    /// Writes `results.csv`, `predictions.csv`, `grid.txt`, `manifest.json`
    /// and one `history_<run>.csv` per training run.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("results.csv"), self.results_csv().as_bytes())?;
        write_atomic(&dir.join("predictions.csv"), self.predictions_csv().as_bytes())?;
        for (label, h) in &self.histories {
            h.write_csv(&dir.join(format!("history_{label}.csv")))?;
        }
        match self.grid_text() {
            Ok(t) => write_atomic(&dir.join("grid.txt"), t.as_bytes())?,
            Err(e) => write_atomic(&dir.join("grid.txt"), format!("no table: {e}\n").as_bytes())?,
        }
        let manifest = serde_json::to_vec_pretty(&self.manifest)?;
        write_atomic(&dir.join("manifest.json"), &manifest)
    }
}

/// A unit's history and per-test-rate scores, with its wall-clock seconds.
type TimedUnit = (Result<(TrainHistory, Vec<Scored>)>, f64);

/// Loads the dataset, runs every training run (in parallel up to
/// `opts.jobs`), and writes the report files when `opts.out` is set. A
/// failing run marks its cells failed without affecting the others.
pub fn run_grid(cfg: &ExperimentConfig, opts: &GridOptions) -> Result<GridReport> {
    cfg.validate()?;
    let start = Instant::now();
    let (spec, raw, plan) = load_experiment_data(cfg)?;
    let units = plan_units(cfg);
    if let Some(dir) = &opts.out {
        std::fs::create_dir_all(dir)?;
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let outputs: Vec<TimedUnit> = pool.install(|| {
        units
            .par_iter()
            .map(|unit| {
                let t = Instant::now();
                let label = unit.label();
                let out = run_unit(cfg, &spec, &raw, &plan, unit, &mut |r: &EpochRecord| {
                    if opts.verbose {
                        eprintln!(
                            "{label} epoch {:>4} train {:.5} val {:.5} auc {} lr {:e}",
                            r.epoch,
                            r.train_loss,
                            r.val_loss,
                            r.val_auc.map_or("-".into(), |a| format!("{a:.4}")),
                            r.lr
                        );
                    }
                })
                .map(|o| (o.model.history, o.scored));
                let secs = t.elapsed().as_secs_f64();
                if let (Some(dir), Ok((h, _))) = (&opts.out, &out) {
                    if let Err(e) = h.write_csv(&dir.join(format!("history_{label}.csv"))) {
                        eprintln!("{label}: could not write history: {e}");
                    }
                }
                if opts.verbose {
                    match &out {
                        Ok((h, _)) => eprintln!("{label} done in {secs:.1}s, best epoch {}", h.best_epoch),
                        Err(e) => eprintln!("{label} failed: {e}"),
                    }
                }
                (out, secs)
            })
            .collect()
    });

    let mut cells = Vec::new();
    let mut predictions = Vec::new();
    let mut histories = Vec::new();
    let mut runs = Vec::new();
    for (unit, (out, secs)) in units.iter().zip(outputs) {
        let label = unit.label();
        let (error, epochs) = match &out {
            Ok((h, _)) => (None, h.epochs.len()),
            Err(e) => (Some(e.to_string()), 0),
        };
        runs.push(UnitRecord { label: label.clone(), seconds: secs, epochs, error: error.clone() });
        for (i, &test_rate) in unit.test_rates.iter().enumerate() {
            let seeds = cell_seeds(cfg.seed, unit.train_rate, test_rate, unit.fold, unit.method, cfg.validation_missing);
            let mut cell = CellResult {
                method: unit.method,
                train_pct: pct(unit.train_rate),
                test_pct: pct(test_rate),
                fold: unit.fold,
                auc: None,
                test_loss: None,
                best_epoch: None,
                epochs: None,
                seeds,
                error: error.clone(),
            };
            if let Ok((h, scored)) = &out {
                let sc = &scored[i];
                cell.auc = Some(sc.auc);
                cell.test_loss = Some(sc.loss);
                cell.best_epoch = Some(h.best_epoch);
                cell.epochs = Some(h.epochs.len());
                predictions.push(CellPredictions {
                    method: unit.method,
                    train_pct: cell.train_pct,
                    test_pct: cell.test_pct,
                    fold: unit.fold,
                    rows: plan.folds[unit.fold].test.clone(),
                    labels: sc.labels.clone(),
                    scores: positive_scores(&sc.probs),
                    true_class_prob: sc.true_class_prob(),
                });
            }
            cells.push(cell);
        }
        if let Ok((h, _)) = out {
            histories.push((label, h));
        }
    }
    cells.sort_by(|a, b| {
        (a.method, a.train_pct, a.test_pct, a.fold).cmp(&(b.method, b.train_pct, b.test_pct, b.fold))
    });
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        cells: cells.clone(),
        runs,
        total_seconds: start.elapsed().as_secs_f64(),
    };
    let report = GridReport { cells, predictions, histories, manifest };
    if let Some(dir) = &opts.out {
        report.write(dir)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ExperimentConfig {
        serde_json::from_str(r#"{"name": "t", "dataset": "d.csv", "schema": "s.json"}"#).unwrap()
    }

    #[test]
    fn defaults_mirror_the_training_protocol() {
        let c = config();
        assert_eq!(c.folds, 5);
        assert_eq!(c.methods, vec![Method::Naim]);
        assert_eq!(c.train.max_epochs, 1500);
        assert_eq!(c.model.d_e, 6);
        assert_eq!(c.cell_count(), 180);
        c.validate().unwrap();
    }

    #[test]
    fn reduced_grid_counts() {
        let c = ExperimentConfig { train_missing: vec![0.0, 0.5], test_missing: vec![0.0, 0.5], ..config() };
        assert_eq!(c.cell_count(), 20);
        assert_eq!(plan_units(&c).len(), 10);
        let c = ExperimentConfig { validation_missing: ValidationMissing::Test, ..c };
        assert_eq!(plan_units(&c).len(), 20);
    }

    #[test]
    fn config_rejects_bad_rates_and_methods() {
        assert!(ExperimentConfig { test_missing: vec![1.0], ..config() }.validate().is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(
            r#"{"name": "t", "dataset": "d", "schema": "s", "methods": ["mice"]}"#
        )
        .is_err());
        assert_eq!(Method::parse("naim-no-reg+knn").unwrap(), Method::NaimNoRegKnn);
        assert!(Method::parse("x").is_err());
    }

    #[test]
    fn seeds_share_data_across_methods() {
        let v = ValidationMissing::Train;
        let a = cell_seeds(7, 0.25, 0.5, 1, Method::Naim, v);
        let b = cell_seeds(7, 0.25, 0.5, 1, Method::NaimNoReg, v);
        let c = cell_seeds(7, 0.25, 0.75, 1, Method::Naim, v);
        assert_eq!((a.split, a.train_mcar, a.test_mcar), (b.split, b.train_mcar, b.test_mcar));
        assert_ne!(a.model, b.model);
        assert_eq!(a.model, c.model);
        assert_ne!(a.test_mcar, c.test_mcar);
    }
}
