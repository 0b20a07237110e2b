//! Experiment orchestration: configuration, the end-to-end pipeline
//! (load, split, partition, imbalance, reorder, pretrain, probe) and the
//! auxiliary commands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::augment::{make_views, AugmentConfig, MaskMode};
use crate::dataset::{load_csv, synth_table_with_margin, train_test_split, MinMaxScaler, Table};
use crate::error::{Error, Result};
use crate::federation::{row_doubling_audit, run_cfl, write_round_logs, PrivacyAudit, RoundLog, TrainConfig};
use crate::loss::{bench_similarity, total_loss, LossConfig, LossWeights, Similarity};
use crate::math::{Matrix, Purpose, RngStream, StreamKey};
use crate::model::{init_params, Activation, MlpParams, ModelShape, OptimizerKind, ViewGrads};
use crate::probe::{evaluate_baselines, evaluate_silo, MetricsReport, MetricsRow, ModelTag, ProbeConfig};
use crate::silo::{
    covariance_deviation_experiment, pearson_order, vertical_partition, zero_fill_check, CovDevConfig,
    ImbalanceSpec, Setting, SiloManifestEntry, SiloView, ZeroFillReport,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Csv {
        path: PathBuf,
        label_column: String,
    },
    Synth {
        rows: usize,
        features: usize,
        classes: usize,
        margin: f64,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Csv {
            path: PathBuf::from("data/adult.csv"),
            label_column: "income".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchDims {
    pub embed_dim: usize,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub dataset_tag: String,
    pub dims: Vec<BenchDims>,
    pub iters: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            dataset_tag: "synthetic".into(),
            dims: vec![BenchDims { embed_dim: 256, k: 256 }],
            iters: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovDevSettings {
    pub silos: Vec<usize>,
    pub seeds: usize,
    pub rows_per_silo: usize,
    pub features: usize,
    pub drop_rate: f64,
    pub delta_cap: Option<f64>,
}

impl Default for CovDevSettings {
    fn default() -> Self {
        Self {
            silos: vec![1, 5, 10, 25, 50],
            seeds: 20,
            rows_per_silo: 500,
            features: 8,
            drop_rate: 0.3,
            delta_cap: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSettings {
    pub d_in: usize,
    pub hidden: usize,
    pub embed: usize,
    pub k: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self {
            d_in: 12,
            hidden: 32,
            embed: 16,
            k: 8,
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

/// One JSON document drives every command. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub setting: Setting,
    pub n_silos: usize,
    pub features_per_silo: usize,
    /// Rows kept after a seeded subsample; `null` keeps every row.
    pub max_rows: Option<usize>,
    /// Fraction of rows used for training.
    pub split_rate: f64,
    pub client_drop_rate: f64,
    pub data_drop_rate: f64,
    pub class_drop_rate: f64,
    pub labeled_fraction: f64,
    pub pearson_reorder: bool,
    pub seed: u64,

    pub encoder_size: usize,
    pub hidden_layers: usize,
    pub embed_size: usize,
    pub activation: Activation,
    pub epochs: usize,
    pub local_epochs_per_round: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub temperature: f64,
    pub similarity: Similarity,
    pub noise_level: f64,
    pub mask_prob: f64,
    pub mask_mode: MaskMode,
    pub weighted_aggregation: bool,
    pub threads: Option<usize>,

    pub probe_l2: f64,
    pub probe_max_iter: usize,
    pub probe_tol: f64,

    pub bench: BenchSettings,
    pub covdev: CovDevSettings,
    pub gradcheck: GradcheckSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let probe = ProbeConfig::default();
        let aug = AugmentConfig::default();
        Self {
            dataset: DatasetSpec::default(),
            setting: Setting::Standard,
            n_silos: 5,
            features_per_silo: 20,
            max_rows: Some(6000),
            split_rate: 0.3,
            client_drop_rate: 0.25,
            data_drop_rate: 0.5,
            class_drop_rate: 0.5,
            labeled_fraction: 1.0,
            pearson_reorder: true,
            seed: 0,
            encoder_size: 256,
            hidden_layers: 1,
            embed_size: 256,
            activation: Activation::LeakyRelu,
            epochs: 10,
            local_epochs_per_round: 1,
            batch_size: 256,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            temperature: 0.1,
            similarity: Similarity::Dot,
            noise_level: aug.noise_level,
            mask_prob: aug.mask_prob,
            mask_mode: aug.mask_mode,
            weighted_aggregation: false,
            threads: None,
            probe_l2: probe.l2,
            probe_max_iter: probe.max_iter,
            probe_tol: probe.tol,
            bench: BenchSettings::default(),
            covdev: CovDevSettings::default(),
            gradcheck: GradcheckSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_silos == 0 || self.features_per_silo == 0 {
            return bad("n_silos and features_per_silo must be >= 1".into());
        }
        if !(self.split_rate > 0.0 && self.split_rate < 1.0) {
            return bad(format!("split_rate must lie in (0, 1), got {}", self.split_rate));
        }
        for (name, v) in [
            ("client_drop_rate", self.client_drop_rate),
            ("data_drop_rate", self.data_drop_rate),
            ("class_drop_rate", self.class_drop_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.hidden_layers == 0 || self.encoder_size == 0 || self.embed_size == 0 {
            return bad("hidden_layers, encoder_size and embed_size must be >= 1".into());
        }
        if let Some(0) = self.max_rows {
            return bad("max_rows must be >= 1 when set".into());
        }
        self.train_config().validate().map_err(to_config)?;
        self.probe_config().validate().map_err(to_config)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            local_epochs_per_round: self.local_epochs_per_round,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            hidden: vec![self.encoder_size; self.hidden_layers],
            embed: self.embed_size,
            activation: self.activation,
            loss: LossConfig {
                temperature: self.temperature,
                similarity: self.similarity,
                weights: LossWeights::default(),
            },
            augment: AugmentConfig {
                noise_level: self.noise_level,
                mask_prob: self.mask_prob,
                mask_mode: self.mask_mode,
                ..AugmentConfig::default()
            },
            weighted_aggregation: self.weighted_aggregation,
            max_batches_per_epoch: None,
            threads: self.threads,
            seed: self.seed,
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            l2: self.probe_l2,
            max_iter: self.probe_max_iter,
            tol: self.probe_tol,
            labeled_fraction: self.labeled_fraction,
        }
    }

    pub fn imbalance(&self) -> ImbalanceSpec {
        ImbalanceSpec {
            client_drop_rate: self.client_drop_rate,
            data_drop_rate: self.data_drop_rate,
            class_drop_rate: self.class_drop_rate,
            mode: self.setting,
        }
    }

    /// Resolves a relative CSV path against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let DatasetSpec::Csv { path, .. } = &mut self.dataset {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }
}

fn to_config(e: Error) -> Error {
    match e {
        Error::InvalidParameter(m) => Error::Config(m),
        other => other,
    }
}

fn stream(seed: u64, purpose: Purpose) -> RngStream {
    RngStream::new(seed, StreamKey::global(purpose))
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Table> {
    let mut t = match &cfg.dataset {
        DatasetSpec::Csv { path, label_column } => load_csv(path, label_column)?,
        DatasetSpec::Synth {
            rows,
            features,
            classes,
            margin,
        } => synth_table_with_margin(*rows, *features, *classes, *margin, &mut stream(cfg.seed, Purpose::Synth))?,
    };
    if let Some(max) = cfg.max_rows {
        if max < t.n_rows() {
            t = t.subsample(max, &mut stream(cfg.seed, Purpose::Subsample));
        }
    }
    t.validate()?;
    Ok(t)
}

fn hstack_views(views: &[SiloView]) -> Result<Matrix> {
    let parts: Vec<&Matrix> = views.iter().map(|v| &v.features).collect();
    Matrix::hstack(&parts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: String,
    pub setting: Setting,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub pearson_reorder: bool,
    pub silos: Vec<SiloManifestEntry>,
    pub zero_fill: Vec<ZeroFillReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiloSummary {
    pub silo: usize,
    pub n_present_train: usize,
    pub cfl_f1: f64,
    pub base2_f1: f64,
    pub cfl_delta: f64,
    pub base2_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: ExperimentConfig,
    pub dataset: String,
    pub setting: Setting,
    pub base1_f1: f64,
    pub mean_f1_cfl: f64,
    pub mean_f1_base2: f64,
    pub mean_delta_cfl: f64,
    pub mean_delta_base2: f64,
    pub silos: Vec<SiloSummary>,
    pub privacy_audit_passed: bool,
    pub wall_seconds: f64,
    pub files: Vec<String>,
}

/// Everything one pipeline run produces, before anything is written.
#[derive(Clone, Debug)]
pub struct ExperimentRun {
    pub summary: RunSummary,
    pub report: MetricsReport,
    pub logs: Vec<RoundLog>,
    pub manifest: Manifest,
    pub audit: PrivacyAudit,
    pub global: MlpParams,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    let start = Instant::now();
    cfg.validate()?;
    let table = load_dataset(cfg).map_err(|e| e.in_stage("load"))?;
    let dataset = table.name.clone();
    info!("{dataset}: {} rows, {} features, {} classes", table.n_rows(), table.n_features(), table.n_classes());

    let split = train_test_split(&table, cfg.split_rate, &mut stream(cfg.seed, Purpose::Split))
        .map_err(|e| e.in_stage("split"))?;
    let scaler = MinMaxScaler::fit(&split.train);
    let (train, test) = (|| Ok((scaler.transform(&split.train)?, scaler.transform(&split.test)?)))()
        .map_err(|e: Error| e.in_stage("normalize"))?;

    let (full_train, full_test) = (|| {
        Ok((
            vertical_partition(&train, cfg.n_silos, cfg.features_per_silo)?,
            vertical_partition(&test, cfg.n_silos, cfg.features_per_silo)?,
        ))
    })()
    .map_err(|e: Error| e.in_stage("partition"))?;

    let mut test_views = full_test.clone();
    let mut train_views = cfg
        .imbalance()
        .apply(&full_train, &stream(cfg.seed, Purpose::DataDrop))
        .map_err(|e| e.in_stage("imbalance"))?;
    let zero_fill = train_views
        .iter()
        .map(zero_fill_check)
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("zero-fill check"))?;

    if cfg.pearson_reorder {
        (|| -> Result<()> {
            for (tr, te) in train_views.iter_mut().zip(test_views.iter_mut()) {
                let order = pearson_order(tr)?;
                *tr = tr.with_column_order(&order)?;
                *te = te.with_column_order(&order)?;
            }
            Ok(())
        })()
        .map_err(|e| e.in_stage("pearson reorder"))?;
    }

    let train_cfg = cfg.train_config();
    let run = run_cfl(&train_views, &train_cfg).map_err(|e| e.in_stage("pretrain"))?;
    let mut audit = run.audit.clone();
    let doubled = row_doubling_audit(&train_views, &train_cfg).map_err(|e| e.in_stage("privacy audit"))?;
    audit.failures.extend(doubled.failures);
    audit.messages_checked += doubled.messages_checked;
    for b in doubled.payload_bytes {
        if !audit.payload_bytes.contains(&b) {
            audit.payload_bytes.push(b);
        }
    }
    if audit.payload_bytes.len() > 1 {
        audit
            .failures
            .push(format!("payload sizes differ across messages: {:?}", audit.payload_bytes));
    }

    let probe_cfg = cfg.probe_config();
    let setting = cfg.setting.as_str();
    let encoder = run.encoder();
    let mut rows = (|| -> Result<Vec<MetricsRow>> {
        let global_train = hstack_views(&full_train)?;
        let global_test = hstack_views(&full_test)?;
        let mut rows = evaluate_baselines(
            &dataset,
            setting,
            (&global_train, &train.labels),
            (&global_test, &test.labels),
            &train_views,
            &test_views,
            &probe_cfg,
            cfg.seed,
        )?;
        for (tr, te) in train_views.iter().zip(&test_views) {
            let s = evaluate_silo(&encoder, tr, te, &probe_cfg, cfg.seed)?;
            rows.push(MetricsRow {
                dataset: dataset.clone(),
                setting: setting.to_string(),
                silo: tr.silo_id,
                model: ModelTag::Cfl,
                precision: s.precision,
                recall: s.recall,
                f1: s.f1,
            });
        }
        Ok(rows)
    })()
    .map_err(|e| e.in_stage("probe"))?;
    let order = |m: ModelTag| match m {
        ModelTag::Base1 => 0,
        ModelTag::Cfl => 1,
        ModelTag::Base2 => 2,
    };
    rows.sort_by_key(|r| (order(r.model), r.silo));
    let report = MetricsReport { rows };

    let base1_f1 = report.f1(ModelTag::Base1, 0).unwrap_or(f64::NAN);
    let silos: Vec<SiloSummary> = train_views
        .iter()
        .map(|v| {
            let cfl = report.f1(ModelTag::Cfl, v.silo_id).unwrap_or(f64::NAN);
            let b2 = report.f1(ModelTag::Base2, v.silo_id).unwrap_or(f64::NAN);
            SiloSummary {
                silo: v.silo_id,
                n_present_train: v.n_present(),
                cfl_f1: cfl,
                base2_f1: b2,
                cfl_delta: cfl - base1_f1,
                base2_delta: b2 - base1_f1,
            }
        })
        .collect();
    let mean = |f: &dyn Fn(&SiloSummary) -> f64| silos.iter().map(f).sum::<f64>() / silos.len() as f64;
    let summary = RunSummary {
        config: cfg.clone(),
        dataset: dataset.clone(),
        setting: cfg.setting,
        base1_f1,
        mean_f1_cfl: mean(&|s| s.cfl_f1),
        mean_f1_base2: mean(&|s| s.base2_f1),
        mean_delta_cfl: mean(&|s| s.cfl_delta),
        mean_delta_base2: mean(&|s| s.base2_delta),
        silos,
        privacy_audit_passed: audit.passed(),
        wall_seconds: start.elapsed().as_secs_f64(),
        files: Vec::new(),
    };
    let manifest = Manifest {
        dataset,
        setting: cfg.setting,
        seed: cfg.seed,
        n_train: train.n_rows(),
        n_test: test.n_rows(),
        pearson_reorder: cfg.pearson_reorder,
        silos: train_views.iter().map(SiloView::manifest_entry).collect(),
        zero_fill,
    };
    info!(
        "{} {}: F1 Base1 {:.4}, CFL {:.4}, Base2 {:.4}",
        manifest.dataset, setting, summary.base1_f1, summary.mean_f1_cfl, summary.mean_f1_base2
    );
    Ok(ExperimentRun {
        summary,
        report,
        logs: run.logs.clone(),
        manifest,
        audit,
        global: run.global,
    })
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const ROUNDS_FILE: &str = "rounds.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Runs the pipeline and writes metrics, summary, round logs and manifest
/// into `out`.
pub fn cmd_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let run = run_experiment(cfg)?;
    (|| {
        ensure_dir(out)?;
        run.report.write_csv(&out.join(METRICS_FILE))?;
        write_round_logs(&out.join(ROUNDS_FILE), &run.logs)?;
        write_json(&out.join(MANIFEST_FILE), &run.manifest)?;
        let mut summary = run.summary;
        summary.files = [METRICS_FILE, SUMMARY_FILE, ROUNDS_FILE, MANIFEST_FILE]
            .iter()
            .map(|f| f.to_string())
            .collect();
        write_json(&out.join(SUMMARY_FILE), &summary)?;
        Ok(summary)
    })()
    .map_err(|e: Error| e.in_stage("write outputs"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub pearson_reorder: bool,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
}

#[derive(Clone, Debug)]
pub struct Ablation {
    pub with_reorder: RunSummary,
    pub without_reorder: RunSummary,
    pub rows: Vec<AblationRow>,
    pub column_orders: [Vec<Vec<usize>>; 2],
}

fn cfl_means(report: &MetricsReport) -> (f64, f64, f64) {
    let rows: Vec<&MetricsRow> = report.rows.iter().filter(|r| r.model == ModelTag::Cfl).collect();
    let n = rows.len().max(1) as f64;
    (
        rows.iter().map(|r| r.precision).sum::<f64>() / n,
        rows.iter().map(|r| r.recall).sum::<f64>() / n,
        rows.iter().map(|r| r.f1).sum::<f64>() / n,
    )
}

/// The same experiment with and without Pearson reordering, on one seed.
pub fn run_ablate_pearson(cfg: &ExperimentConfig) -> Result<Ablation> {
    let variant = |on: bool| -> Result<(ExperimentRun, AblationRow)> {
        let run = run_experiment(&ExperimentConfig {
            pearson_reorder: on,
            ..cfg.clone()
        })?;
        let (p, r, f) = cfl_means(&run.report);
        let row = AblationRow {
            variant: if on { "pearson" } else { "no_pearson" }.into(),
            pearson_reorder: on,
            mean_precision: p,
            mean_recall: r,
            mean_f1: f,
        };
        Ok((run, row))
    };
    let (with, row_with) = variant(true)?;
    let (without, row_without) = variant(false)?;
    let orders = |r: &ExperimentRun| r.manifest.silos.iter().map(|s| s.column_order.clone()).collect();
    Ok(Ablation {
        column_orders: [orders(&with), orders(&without)],
        with_reorder: with.summary,
        without_reorder: without.summary,
        rows: vec![row_with, row_without],
    })
}

pub fn cmd_ablate_pearson(cfg: &ExperimentConfig, out: &Path) -> Result<Ablation> {
    let ab = run_ablate_pearson(cfg)?;
    ensure_dir(out)?;
    let path = out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Data(e.to_string()))?;
    for r in &ab.rows {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_json(&out.join("ablation_with_pearson.json"), &ab.with_reorder)?;
    write_json(&out.join("ablation_without_pearson.json"), &ab.without_reorder)?;
    Ok(ab)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub dataset: String,
    pub embed_dim: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub t_dot_s: f64,
    pub t_cos_s: f64,
    pub ratio: f64,
}

pub fn run_bench_loss(cfg: &ExperimentConfig) -> Result<Vec<BenchRow>> {
    let mut rng = stream(cfg.seed, Purpose::Bench);
    cfg.bench
        .dims
        .iter()
        .map(|d| {
            let r = bench_similarity(d.embed_dim, d.k, cfg.bench.iters, cfg.temperature, &mut rng)?;
            info!("bench embed {} K {}: ratio {:.3}", d.embed_dim, d.k, r.ratio);
            Ok(BenchRow {
                dataset: cfg.bench.dataset_tag.clone(),
                embed_dim: r.embed_dim,
                k: r.k,
                t_dot_s: r.t_dot_s,
                t_cos_s: r.t_cos_s,
                ratio: r.ratio,
            })
        })
        .collect()
}

pub fn cmd_bench_loss(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<BenchRow>> {
    let rows = run_bench_loss(cfg)?;
    ensure_dir(out)?;
    let path = out.join("bench_loss.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Data(e.to_string()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckTerm {
    pub term: String,
    pub max_rel_error: f64,
    pub worst_param: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub terms: Vec<GradcheckTerm>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Entry-wise relative error with a small absolute floor on the scale so
/// that exactly-zero gradients do not divide by zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic parameter gradients of each loss term against central
/// finite differences on a random small network. `corrupt` perturbs the
/// analytic gradient before comparison (used as a negative control).
pub fn run_gradcheck_with(
    settings: &GradcheckSettings,
    seed: u64,
    temperature: f64,
    corrupt: Option<&dyn Fn(&mut [f64])>,
) -> Result<GradcheckReport> {
    let shape = ModelShape::new(settings.d_in, settings.hidden, settings.embed);
    let mut rng = stream(seed, Purpose::Gradcheck);
    let params = init_params(&shape, &mut rng)?;
    let b = Matrix::from_fn(settings.k, settings.d_in, |_, _| rand::Rng::random_range(&mut rng, 0.0..1.0));
    let (v1, v2) = make_views(&b, &AugmentConfig::default(), &mut rng)?;
    let weights = |r, c, d| LossWeights {
        recon: r,
        contrastive: c,
        distance: d,
    };
    let terms = [
        ("recon", Similarity::Dot, weights(1.0, 0.0, 0.0)),
        ("contrastive_dot", Similarity::Dot, weights(0.0, 1.0, 0.0)),
        ("contrastive_cosine", Similarity::Cosine, weights(0.0, 1.0, 0.0)),
        ("distance", Similarity::Dot, weights(0.0, 0.0, 1.0)),
        ("total_dot", Similarity::Dot, weights(1.0, 1.0, 1.0)),
        ("total_cosine", Similarity::Cosine, weights(1.0, 1.0, 1.0)),
    ];
    let theta = params.flatten();
    let mut out = Vec::new();
    for (name, similarity, w) in terms {
        let lcfg = LossConfig {
            temperature,
            similarity,
            weights: w,
        };
        let eval = |p: &MlpParams| -> Result<f64> {
            let t = p.forward(&[&v1, &v2])?;
            let (a, c) = (&t.views[0], &t.views[1]);
            Ok(total_loss(&a.embedding, &c.embedding, &a.reconstruction, &c.reconstruction, &b, &lcfg)?.l_total)
        };
        let trace = params.forward(&[&v1, &v2])?;
        let (a, c) = (&trace.views[0], &trace.views[1]);
        let lb = total_loss(&a.embedding, &c.embedding, &a.reconstruction, &c.reconstruction, &b, &lcfg)?;
        let up: [ViewGrads; 2] = lb.view_grads();
        let mut analytic = params.backward(&trace, &up)?.flatten();
        if let Some(f) = corrupt {
            f(&mut analytic);
        }
        let mut worst = (0.0, 0);
        for i in 0..theta.len() {
            let mut plus = theta.clone();
            plus[i] += settings.step;
            let mut minus = theta.clone();
            minus[i] -= settings.step;
            let fp = eval(&MlpParams::unflatten(&plus, &shape)?)?;
            let fm = eval(&MlpParams::unflatten(&minus, &shape)?)?;
            let numeric = (fp - fm) / (2.0 * settings.step);
            let e = relative_error(analytic[i], numeric);
            if e > worst.0 {
                worst = (e, i);
            }
        }
        out.push(GradcheckTerm {
            term: name.into(),
            max_rel_error: worst.0,
            worst_param: worst.1,
        });
    }
    let max_rel_error = out.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        terms: out,
        max_rel_error,
        tolerance: settings.tolerance,
        passed: max_rel_error < settings.tolerance,
    })
}

pub fn cmd_gradcheck(cfg: &ExperimentConfig) -> Result<GradcheckReport> {
    run_gradcheck_with(&cfg.gradcheck, cfg.seed, cfg.temperature, None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovDevRow {
    pub seed: u64,
    pub silos: usize,
    pub deviation: f64,
    pub bound: f64,
    pub max_local: f64,
}

/// Zero-fill covariance deviation for each requested silo count and seed.
pub fn run_covdev(cfg: &ExperimentConfig) -> Result<Vec<CovDevRow>> {
    let s = &cfg.covdev;
    let max_m = s.silos.iter().copied().max().unwrap_or(0);
    let cd = CovDevConfig {
        rows_per_silo: s.rows_per_silo,
        features: s.features,
        drop_rate: s.drop_rate,
        delta_cap: s.delta_cap.unwrap_or(f64::INFINITY),
    };
    let mut rows = Vec::new();
    for k in 0..s.seeds as u64 {
        let seed = cfg.seed.wrapping_add(k);
        let points = covariance_deviation_experiment(max_m, &cd, &stream(seed, Purpose::CovDev))?;
        for &m in &s.silos {
            let p = points
                .get(m.wrapping_sub(1))
                .ok_or_else(|| Error::Config(format!("silo count {m} must be >= 1")))?;
            rows.push(CovDevRow {
                seed,
                silos: m,
                deviation: p.deviation,
                bound: p.bound,
                max_local: p.max_local,
            });
        }
    }
    Ok(rows)
}

pub fn cmd_covdev(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<CovDevRow>> {
    let rows = run_covdev(cfg)?;
    ensure_dir(out)?;
    let path = out.join("covdev.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Data(e.to_string()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}
