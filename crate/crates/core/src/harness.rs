//! Sequential multi-domain protocol, accuracy-matrix metrics, the benchmark
//! suite and result export.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::coreset::{
    build_feature_set, distill_labels, make_entries, memory_report, random_select, select_exemplars, HerdingForm,
    KnowledgeCoreSet, MemoryReport,
};
use crate::csi_sim::{generate_domain, one_hot, DomainDataset, PerturbationConfig, SceneConfig, SceneSpec, UserProfile};
use crate::error::{Error, Result};
use crate::model::{softmax, Evaluator, ModelConfig, ModelParams, ProbVector};
use crate::preprocess::{input_width, preprocess_sequence, PreprocessedSequence, DEFAULT_TEMPORAL_LEN};
use crate::seed;
use crate::storage::write_atomic;
use crate::train::{estimate_importance, train_epochs, ImportanceVector, Period, Sample, Selection, TrainConfig, Variant};

/// Model hyper-parameters apart from the input width and class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub mlp_hidden: usize,
    pub width: usize,
    pub heads: usize,
    pub n_blocks: usize,
    pub dropout: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            mlp_hidden: 64,
            width: 32,
            heads: 4,
            n_blocks: 2,
            dropout: 0.1,
        }
    }
}

impl ModelShape {
    pub fn standard() -> Self {
        let m = ModelConfig::standard(1);
        Self {
            mlp_hidden: m.mlp_hidden,
            width: m.width,
            heads: m.heads,
            n_blocks: m.n_blocks,
            dropout: m.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Number of sequential domains `K`.
    pub n_domains: usize,
    pub n_classes: usize,
    pub n_per_class: usize,
    pub scene: SceneSpec,
    pub perturbation: PerturbationConfig,
    /// Domain `k` (0-based) is performed by user `first_user + k`.
    pub first_user: u64,
    /// Seeds the domain data; shared by every trial and variant.
    pub data_seed: u64,
    /// Seeds initialization, batching, dropout and clustering per trial.
    pub base_seed: u64,
    pub n_trials: usize,
    pub variants: Vec<Variant>,
    pub temporal_len: usize,
    pub model: ModelShape,
    pub train: TrainConfig,
    /// Exemplars per class `E`.
    pub budget: usize,
    /// Clustering share of the budget.
    pub beta: f64,
    /// Downscaling factor of distilled labels.
    pub eta: f64,
    pub herding_form: HerdingForm,
    /// Learning-rate factor of fine-tuning after the first domain.
    pub finetune_lr_factor: f64,
    pub importance_samples: usize,
    /// Share of each class held out for evaluation; 0 evaluates on the full
    /// training data.
    pub eval_holdout: f64,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Four domains, 30 sequences per class, about 30 packets per sequence.
    pub fn desk() -> Self {
        Self {
            n_domains: 4,
            n_classes: 10,
            n_per_class: 30,
            scene: SceneSpec {
                packet_rate: 10.0,
                env_jitter: 0.002,
                snr_db: 30.0,
                ..SceneSpec::desk()
            },
            perturbation: PerturbationConfig {
                max_offset: 0.04,
                amplitude_range: (0.85, 1.15),
                speed_range: (0.9, 1.1),
                instance_amplitude_spread: 0.03,
                instance_max_delay: 0.03,
                instance_position_jitter: 0.0005,
            },
            first_user: 1,
            data_seed: 2024,
            base_seed: 7,
            n_trials: 5,
            variants: vec![
                Variant::Proposed,
                Variant::ErKmeans,
                Variant::ErHerding,
                Variant::BlFt,
                Variant::BlCumulative,
            ],
            temporal_len: DEFAULT_TEMPORAL_LEN,
            model: ModelShape::default(),
            train: TrainConfig {
                learning_rate: 3e-3,
                iterations: 300,
                deviation_radius: 0.01,
                ..TrainConfig::default()
            },
            budget: 10,
            beta: 0.9,
            eta: 2.0,
            herding_form: HerdingForm::Mean,
            finetune_lr_factor: 0.1,
            importance_samples: 100,
            eval_holdout: 0.0,
            output_dir: None,
        }
    }

    /// Eight domains, 30 trials, every variant, full-size scene and model.
    pub fn paper() -> Self {
        Self {
            n_domains: 8,
            n_trials: 30,
            scene: SceneSpec::full(),
            perturbation: PerturbationConfig::default(),
            variants: Variant::ALL.to_vec(),
            model: ModelShape::standard(),
            train: TrainConfig::default(),
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_domains == 0 || self.n_trials == 0 {
            return bad("n_domains and n_trials must be >= 1".into());
        }
        if self.budget > self.train_per_class() {
            return bad(format!(
                "budget {} exceeds {} training sequences per class",
                self.budget,
                self.train_per_class()
            ));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta {} not in [0, 1]", self.beta));
        }
        if !(self.eta >= 1.0) {
            return bad(format!("eta {} must be >= 1", self.eta));
        }
        if !(self.finetune_lr_factor > 0.0) {
            return bad("finetune_lr_factor must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.eval_holdout) {
            return bad(format!("eval_holdout {} not in [0, 1)", self.eval_holdout));
        }
        if self.variants.is_empty() {
            return bad("no variants selected".into());
        }
        self.train.validate()?;
        self.model_config()?.validate()?;
        self.scene.build()?.validate()
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let layout = self.scene.build()?.layout();
        let m = &self.model;
        Ok(ModelConfig {
            input_width: input_width(&layout, self.temporal_len),
            mlp_hidden: m.mlp_hidden,
            width: m.width,
            heads: m.heads,
            n_blocks: m.n_blocks,
            n_classes: self.n_classes,
            dropout: m.dropout,
        })
    }

    fn holdout_per_class(&self) -> usize {
        (self.eval_holdout * self.n_per_class as f64).ceil() as usize
    }

    fn train_per_class(&self) -> usize {
        self.n_per_class - self.holdout_per_class()
    }

    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        seed::derive(self.base_seed, trial as u64)
    }

    pub fn user_id(&self, domain: usize) -> u64 {
        self.first_user + domain as u64
    }
}

/// Anything that maps a preprocessed input to class probabilities.
pub trait Classifier {
    fn predict(&mut self, x: &PreprocessedSequence) -> Result<ProbVector>;
}

impl Classifier for Evaluator<'_> {
    fn predict(&mut self, x: &PreprocessedSequence) -> Result<ProbVector> {
        Ok(softmax(&self.run(x)?.0, 1.0))
    }
}

/// Preprocessed input with its class.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledInput {
    pub x: PreprocessedSequence,
    pub label: usize,
}

/// Fraction of entries whose most probable class equals the label.
pub fn evaluate(clf: &mut dyn Classifier, data: &[LabeledInput]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("evaluation set is empty".into()));
    }
    let mut hits = 0usize;
    for d in data {
        if clf.predict(&d.x)?.argmax() == d.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// `rows[p][k]`: accuracy on domain `k` after training period `p`, `k <= p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self { rows: Vec::new() }
    }

    pub fn periods(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, period: usize, domain: usize) -> Option<f64> {
        self.rows.get(period)?.get(domain).copied()
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 || row.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!(
                "row {} must hold {} accuracies in [0, 1]",
                self.rows.len(),
                self.rows.len() + 1
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.rows.iter().enumerate().all(|(p, r)| r.len() == p + 1)
    }

    pub fn to_csv(&self) -> String {
        let k = self.rows.len();
        let mut s = String::from("period");
        for d in 0..k {
            s.push_str(&format!(",domain_{}", d + 1));
        }
        s.push('\n');
        for (p, row) in self.rows.iter().enumerate() {
            s.push_str(&(p + 1).to_string());
            for d in 0..k {
                s.push(',');
                if let Some(v) = row.get(d) {
                    s.push_str(&v.to_string());
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut m = Self::new();
        for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
            let row = line
                .split(',')
                .skip(1)
                .filter(|c| !c.is_empty())
                .map(|c| c.parse::<f64>().map_err(|e| Error::Config(format!("bad matrix cell `{c}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            m.push_row(row)?;
        }
        Ok(m)
    }
}

impl Default for AccuracyMatrix {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub average_accuracy: f64,
    pub forgetting: f64,
    /// Accuracy of each domain over the periods since it was learned.
    pub curves: Vec<Vec<f64>>,
}

pub fn compute_metrics(r: &AccuracyMatrix) -> Result<Metrics> {
    let k = r.periods();
    if k == 0 || !r.is_complete() {
        return Err(Error::InvalidArgument("accuracy matrix is incomplete".into()));
    }
    let last = &r.rows[k - 1];
    let average_accuracy = last.iter().sum::<f64>() / k as f64;
    let forgetting = if k == 1 {
        0.0
    } else {
        (0..k - 1).map(|d| r.rows[d][d] - last[d]).sum::<f64>() / (k - 1) as f64
    };
    let curves = (0..k).map(|d| (d..k).map(|p| r.rows[p][d]).collect()).collect();
    Ok(Metrics {
        average_accuracy,
        forgetting,
        curves,
    })
}

/// What the learner holds after a period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InventorySnapshot {
    pub period: usize,
    /// Domains whose full raw data the learner still holds.
    pub raw_domains: Vec<usize>,
    /// Stored exemplars per origin domain.
    pub exemplars: BTreeMap<usize, usize>,
}

/// Tracks which raw domain datasets the learner currently holds.
#[derive(Debug, Clone, Default)]
pub struct Inventory {
    live: BTreeSet<usize>,
    pub snapshots: Vec<InventorySnapshot>,
}

impl Inventory {
    pub fn load(&mut self, domain: usize) {
        self.live.insert(domain);
    }

    pub fn release(&mut self, domain: usize) {
        self.live.remove(&domain);
    }

    pub fn live(&self) -> Vec<usize> {
        self.live.iter().copied().collect()
    }

    pub fn snapshot(&mut self, period: usize, core: &KnowledgeCoreSet) {
        let mut exemplars = BTreeMap::new();
        for e in &core.entries {
            *exemplars.entry(e.domain).or_insert(0) += 1;
        }
        self.snapshots.push(InventorySnapshot {
            period,
            raw_domains: self.live(),
            exemplars,
        });
    }
}

/// Generates domain `k` of the configured sequence.
pub fn domain_dataset(cfg: &ExperimentConfig, scene: &SceneConfig, k: usize) -> Result<DomainDataset> {
    let user = UserProfile::new(cfg.user_id(k), cfg.n_classes, cfg.perturbation.clone())?;
    generate_domain(k, scene, &user, cfg.n_per_class, seed::derive(cfg.data_seed, k as u64))
}

/// A domain split into training positions and evaluation inputs.
pub struct PreparedDomain {
    pub data: DomainDataset,
    pub inputs: Vec<PreprocessedSequence>,
    pub train: Vec<usize>,
    pub eval: Vec<LabeledInput>,
}

pub fn prepare_domain(cfg: &ExperimentConfig, data: DomainDataset) -> Result<PreparedDomain> {
    let inputs = data
        .entries
        .iter()
        .map(|e| preprocess_sequence(e, &data.layout, data.duration, cfg.temporal_len))
        .collect::<Result<Vec<_>>>()?;
    let hold = cfg.holdout_per_class();
    let mut seen = vec![0usize; data.n_classes];
    let mut train = Vec::new();
    let mut eval_idx = Vec::new();
    for i in 0..data.len() {
        let c = data.label(i);
        seen[c] += 1;
        if seen[c] > cfg.n_per_class - hold {
            eval_idx.push(i);
        } else {
            train.push(i);
        }
    }
    if hold == 0 {
        eval_idx = train.clone();
    }
    let eval = eval_idx
        .iter()
        .map(|&i| LabeledInput {
            x: inputs[i].clone(),
            label: data.label(i),
        })
        .collect();
    Ok(PreparedDomain {
        data,
        inputs,
        train,
        eval,
    })
}

/// Outcome of one (variant, trial) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: Variant,
    pub trial: usize,
    pub seed: u64,
    pub matrix: AccuracyMatrix,
    pub metrics: Metrics,
    /// Mean training loss over the last tenth of each period's iterations.
    pub final_losses: Vec<f64>,
    pub memory: Option<MemoryReport>,
    pub inventory: Vec<InventorySnapshot>,
}

pub struct RunOutput {
    pub params: ModelParams,
    pub coreset: KnowledgeCoreSet,
    pub record: RunRecord,
}

/// Runs every period of one variant for one trial.
pub fn run_sequential(cfg: &ExperimentConfig, variant: Variant, trial: usize) -> Result<RunOutput> {
    run_sequential_with(cfg, variant, trial, |_, _| Ok(()))
}

/// As [`run_sequential`], calling `on_period(period, trace)` after training.
pub fn run_sequential_with(
    cfg: &ExperimentConfig,
    variant: Variant,
    trial: usize,
    mut on_period: impl FnMut(usize, &[crate::train::TraceRow]) -> Result<()>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let scene = cfg.scene.build()?;
    let trial_seed = cfg.trial_seed(trial);
    let run_seed = seed::derive_tag(trial_seed, variant.tag());
    // same initialization for every variant of a trial
    let mut params = ModelParams::init(cfg.model_config()?, trial_seed)?;
    let mut core = KnowledgeCoreSet::new(cfg.budget);
    let mut replay: Vec<Sample> = Vec::new();
    let mut importance: Option<ImportanceVector> = None;
    let mut retained: Vec<Sample> = Vec::new();
    let mut inventory = Inventory::default();
    let mut evals: Vec<Vec<LabeledInput>> = Vec::new();
    let mut matrix = AccuracyMatrix::new();
    let mut final_losses = Vec::new();

    for k in 0..cfg.n_domains {
        let domain = prepare_domain(cfg, domain_dataset(cfg, &scene, k)?)?;
        inventory.load(k);
        let current: Vec<Sample> = domain
            .train
            .iter()
            .map(|&i| Sample::new(domain.inputs[i].clone(), domain.data.target(i)))
            .collect();
        let mut tc = cfg.train.clone();
        tc.seed = seed::derive(run_seed, k as u64);
        if variant == Variant::BlFt && k > 0 {
            tc.learning_rate *= cfg.finetune_lr_factor;
        }
        let data: &[Sample] = if variant == Variant::BlCumulative {
            retained.extend(current.iter().cloned());
            &retained
        } else {
            &current
        };
        let period = Period {
            data,
            replay: &replay,
            importance: importance.as_ref(),
            use_sam: variant.uses_sam(),
        };
        let trace = train_epochs(&mut params, &period, &tc)?;
        on_period(k, &trace)?;
        let tail = &trace[trace.len() - (trace.len() / 10).max(1).min(trace.len())..];
        final_losses.push(if tail.is_empty() {
            0.0
        } else {
            tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64
        });

        evals.push(domain.eval);
        let mut ev = Evaluator::new(&params);
        let row = evals.iter().map(|e| evaluate(&mut ev, e)).collect::<Result<Vec<_>>>()?;
        matrix.push_row(row)?;

        if let Some(sel) = variant.selection(cfg.beta) {
            let train_inputs: Vec<PreprocessedSequence> =
                domain.train.iter().map(|&i| domain.inputs[i].clone()).collect();
            let labels: Vec<usize> = domain.train.iter().map(|&i| domain.data.label(i)).collect();
            let fs = build_feature_set(&params, &train_inputs, &labels, cfg.n_classes)?;
            let mut picks = Vec::new();
            for (c, class) in fs.classes.iter().enumerate() {
                let s = seed::derive(run_seed, (1000 + k * cfg.n_classes + c) as u64);
                let local = match sel {
                    Selection::Hybrid { beta } => select_exemplars(class, cfg.budget, beta, cfg.herding_form, s)?,
                    Selection::Random => random_select(class.len(), cfg.budget, s)?,
                };
                picks.extend(local.into_iter().map(|j| domain.train[class.indices[j]]));
            }
            let chosen: Vec<&PreprocessedSequence> = picks.iter().map(|&i| &domain.inputs[i]).collect();
            let (labels, eta) = if variant.distills() {
                (distill_labels(&params, &chosen, cfg.eta)?, cfg.eta)
            } else {
                let hard = picks
                    .iter()
                    .map(|&i| ProbVector::new(one_hot(domain.data.label(i), cfg.n_classes)))
                    .collect::<Result<Vec<_>>>()?;
                (hard, 1.0)
            };
            for (x, l) in chosen.iter().zip(&labels) {
                replay.push(Sample {
                    x: (*x).clone(),
                    target: l.as_slice().to_vec(),
                    eta,
                });
            }
            core.update_knowledge(k, make_entries(&domain.data, &picks, labels, eta))?;
        }
        if let Some(method) = variant.importance() {
            let n = cfg.importance_samples.min(current.len());
            let v = estimate_importance(&params, &current, method, n, seed::derive(run_seed, 5000 + k as u64))?;
            match importance.as_mut() {
                Some(acc) => acc.absorb(v)?,
                None => importance = Some(v),
            }
        }
        if variant != Variant::BlCumulative {
            inventory.release(k);
        }
        drop(domain.data);
        inventory.snapshot(k, &core);
    }

    let metrics = compute_metrics(&matrix)?;
    let memory = variant.selection(cfg.beta).map(|_| {
        let layout = scene.layout();
        let typical_n = (scene.packet_rate * scene.duration).round() as usize;
        memory_report(&core, cfg.n_classes * cfg.n_per_class, typical_n, layout.len(), cfg.n_classes)
    });
    Ok(RunOutput {
        params,
        coreset: core,
        record: RunRecord {
            variant,
            trial,
            seed: run_seed,
            matrix,
            metrics,
            final_losses,
            memory,
            inventory: inventory.snapshots,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: Variant,
    pub n_runs: usize,
    pub mean_average_accuracy: f64,
    pub std_average_accuracy: f64,
    pub mean_forgetting: f64,
    pub std_forgetting: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub variant: Variant,
    pub trial: usize,
    pub error: String,
}

/// Results of many runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultBundle {
    pub config: ExperimentConfig,
    pub runs: Vec<RunRecord>,
    pub failures: Vec<Failure>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

impl ResultBundle {
    pub fn summary(&self) -> Vec<SummaryRow> {
        self.config
            .variants
            .iter()
            .map(|&variant| {
                let runs: Vec<&RunRecord> = self.runs.iter().filter(|r| r.variant == variant).collect();
                let acc: Vec<f64> = runs.iter().map(|r| r.metrics.average_accuracy).collect();
                let fg: Vec<f64> = runs.iter().map(|r| r.metrics.forgetting).collect();
                let (ma, sa) = mean_std(&acc);
                let (mf, sf) = mean_std(&fg);
                SummaryRow {
                    variant,
                    n_runs: runs.len(),
                    mean_average_accuracy: ma,
                    std_average_accuracy: sa,
                    mean_forgetting: mf,
                    std_forgetting: sf,
                }
            })
            .collect()
    }

    pub fn row(&self, variant: Variant) -> Option<SummaryRow> {
        self.summary().into_iter().find(|r| r.variant == variant)
    }

    /// Keeps only the runs of the listed trials.
    pub fn restrict_trials(&self, trials: &[usize]) -> Self {
        Self {
            config: self.config.clone(),
            runs: self.runs.iter().filter(|r| trials.contains(&r.trial)).cloned().collect(),
            failures: self.failures.iter().filter(|f| trials.contains(&f.trial)).cloned().collect(),
        }
    }
}

/// Worker count from `EDGECL_THREADS`, default 1.
pub fn worker_count() -> usize {
    std::env::var("EDGECL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n >= 1)
        .unwrap_or(1)
}

fn run_isolated(cfg: &ExperimentConfig, variant: Variant, trial: usize) -> std::result::Result<RunRecord, Failure> {
    let out = panic::catch_unwind(AssertUnwindSafe(|| run_sequential(cfg, variant, trial)));
    let error = match out {
        Ok(Ok(o)) => return Ok(o.record),
        Ok(Err(e)) => e.to_string(),
        Err(p) => p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into()),
    };
    Err(Failure { variant, trial, error })
}

/// Runs the listed trials of every configured variant. A failing run is
/// recorded and does not stop the others.
pub fn run_trials(cfg: &ExperimentConfig, trials: &[usize]) -> Result<ResultBundle> {
    cfg.validate()?;
    let jobs: Vec<(Variant, usize)> = cfg
        .variants
        .iter()
        .flat_map(|&v| trials.iter().map(move |&t| (v, t)))
        .collect();
    let slots: Vec<Mutex<Option<std::result::Result<RunRecord, Failure>>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);
    let workers = worker_count().min(jobs.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().unwrap();
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(&(v, t)) = jobs.get(i) else { break };
                *slots[i].lock().unwrap() = Some(run_isolated(cfg, v, t));
            });
        }
    });
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for slot in slots {
        match slot.into_inner().unwrap().expect("every job ran") {
            Ok(r) => runs.push(r),
            Err(f) => failures.push(f),
        }
    }
    Ok(ResultBundle {
        config: cfg.clone(),
        runs,
        failures,
    })
}

pub fn run_benchmark_suite(cfg: &ExperimentConfig) -> Result<ResultBundle> {
    let trials: Vec<usize> = (0..cfg.n_trials).collect();
    run_trials(cfg, &trials)
}

pub fn results_json(bundle: &ResultBundle) -> Result<Vec<u8>> {
    let doc = serde_json::json!({
        "config": bundle.config,
        "runs": bundle.runs,
        "failures": bundle.failures,
        "summary": bundle.summary(),
    });
    let mut v = serde_json::to_vec_pretty(&doc)?;
    v.push(b'\n');
    Ok(v)
}

pub fn summary_csv(bundle: &ResultBundle) -> String {
    let mut s = String::from(
        "variant,n_runs,mean_average_accuracy,std_average_accuracy,mean_forgetting,std_forgetting\n",
    );
    for r in bundle.summary() {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variant,
            r.n_runs,
            r.mean_average_accuracy,
            r.std_average_accuracy,
            r.mean_forgetting,
            r.std_forgetting
        ));
    }
    s
}

pub fn curves_csv(bundle: &ResultBundle) -> String {
    let mut s = String::from("variant,trial,domain,period,accuracy\n");
    for r in &bundle.runs {
        for (p, row) in r.matrix.rows.iter().enumerate() {
            for (d, acc) in row.iter().enumerate() {
                s.push_str(&format!("{},{},{},{},{}\n", r.variant, r.trial, d + 1, p + 1, acc));
            }
        }
    }
    s
}

/// Writes `results.json`, `summary.csv`, `curves.csv` and one
/// `matrix_<variant>_<trial>.csv` per run.
pub fn export_results(bundle: &ResultBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for r in &bundle.runs {
        let name = format!("matrix_{}_{}.csv", r.variant, r.trial);
        write_atomic(&dir.join(name), r.matrix.to_csv().as_bytes())?;
    }
    write_atomic(&dir.join("summary.csv"), summary_csv(bundle).as_bytes())?;
    write_atomic(&dir.join("curves.csv"), curves_csv(bundle).as_bytes())?;
    write_atomic(&dir.join("results.json"), &results_json(bundle)?)
}

pub fn load_results(dir: &Path) -> Result<ResultBundle> {
    let path = dir.join("results.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    #[derive(Deserialize)]
    struct Doc {
        config: ExperimentConfig,
        runs: Vec<RunRecord>,
        failures: Vec<Failure>,
    }
    let d: Doc = serde_json::from_slice(&bytes)?;
    Ok(ResultBundle {
        config: d.config,
        runs: d.runs,
        failures: d.failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_hand_example() {
        let mut r = AccuracyMatrix::new();
        r.push_row(vec![0.9]).unwrap();
        r.push_row(vec![0.7, 0.8]).unwrap();
        let m = compute_metrics(&r).unwrap();
        assert!((m.forgetting - 0.2).abs() < 1e-12);
        assert!((m.average_accuracy - 0.75).abs() < 1e-12);
        assert_eq!(m.curves, vec![vec![0.9, 0.7], vec![0.8]]);
        assert!(r.push_row(vec![0.1]).is_err());
        assert!(compute_metrics(&AccuracyMatrix::new()).is_err());
    }

    #[test]
    fn matrix_csv_round_trip() {
        let mut r = AccuracyMatrix::new();
        r.push_row(vec![0.9]).unwrap();
        r.push_row(vec![0.7, 0.8333333333333334]).unwrap();
        assert_eq!(AccuracyMatrix::from_csv(&r.to_csv()).unwrap(), r);
    }

    #[test]
    fn config_toml_round_trip() {
        let c = ExperimentConfig::desk();
        let t = c.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&t).unwrap();
        assert_eq!(back, c);
        c.validate().unwrap();
        ExperimentConfig::paper().validate().unwrap();
    }

    struct Fixed(usize, usize);

    impl Classifier for Fixed {
        fn predict(&mut self, _: &PreprocessedSequence) -> Result<ProbVector> {
            Ok(ProbVector::new(one_hot(self.0, self.1)).unwrap())
        }
    }

    #[test]
    fn evaluate_basics() {
        let x = PreprocessedSequence {
            x: crate::autodiff::Mat::zeros(2, 2),
            temporal_len: 2,
        };
        let data: Vec<LabeledInput> = (0..4).map(|i| LabeledInput { x: x.clone(), label: i % 2 }).collect();
        assert_eq!(evaluate(&mut Fixed(1, 2), &data).unwrap(), 0.5);
        assert!(evaluate(&mut Fixed(1, 2), &[]).is_err());
    }
}
