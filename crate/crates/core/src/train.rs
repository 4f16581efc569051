//! Losses, batch gradients, the two-step sharpness-aware update, and the
//! replay / parameter-regularization terms used by the benchmark variants.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, CE_CLAMP};
use crate::error::{Error, Result};
use crate::model::{build_forward, ModelParams, ParamVars};
use crate::preprocess::PreprocessedSequence;
use crate::seed;

/// Gradient norm below which the ascent direction is treated as zero.
pub const MIN_GRAD_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Proposed,
    ErKmeans,
    ErHerding,
    PrEwc,
    PrMas,
    BlFt,
    BlCumulative,
    BlErRand,
    BlNondistill,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceMethod {
    Ewc,
    Mas,
}

/// How a core-set variant picks its exemplars.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selection {
    /// Clustering share `beta`, rest by herding.
    Hybrid { beta: f64 },
    Random,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Proposed,
        Variant::ErKmeans,
        Variant::ErHerding,
        Variant::PrEwc,
        Variant::PrMas,
        Variant::BlFt,
        Variant::BlCumulative,
        Variant::BlErRand,
        Variant::BlNondistill,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Proposed => "proposed",
            Variant::ErKmeans => "er_kmeans",
            Variant::ErHerding => "er_herding",
            Variant::PrEwc => "pr_ewc",
            Variant::PrMas => "pr_mas",
            Variant::BlFt => "bl_ft",
            Variant::BlCumulative => "bl_cumulative",
            Variant::BlErRand => "bl_er_rand",
            Variant::BlNondistill => "bl_nondistill",
        }
    }

    pub fn uses_sam(self) -> bool {
        matches!(self, Variant::Proposed | Variant::BlNondistill)
    }

    /// Exemplar selection rule, `None` for variants without a core-set.
    pub fn selection(self, beta: f64) -> Option<Selection> {
        match self {
            Variant::Proposed | Variant::BlNondistill => Some(Selection::Hybrid { beta }),
            Variant::ErKmeans => Some(Selection::Hybrid { beta: 1.0 }),
            Variant::ErHerding => Some(Selection::Hybrid { beta: 0.0 }),
            Variant::BlErRand => Some(Selection::Random),
            _ => None,
        }
    }

    /// Only the proposed method stores softened model outputs as labels.
    pub fn distills(self) -> bool {
        self == Variant::Proposed
    }

    pub fn importance(self) -> Option<ImportanceMethod> {
        match self {
            Variant::PrEwc => Some(ImportanceMethod::Ewc),
            Variant::PrMas => Some(ImportanceMethod::Mas),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// SAM radius; only honoured by variants that use SAM.
    pub deviation_radius: f64,
    /// Upper bound on exemplars replayed per iteration.
    pub replay_batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            iterations: 500,
            batch_size: 32,
            deviation_radius: 0.03,
            replay_batch: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.deviation_radius >= 0.0) {
            return Err(Error::Config(format!("deviation radius must be >= 0, got {}", self.deviation_radius)));
        }
        Ok(())
    }
}

/// Cross entropy with probabilities clamped from below.
pub fn ce_loss(p: &[f64], target: &[f64]) -> Result<f64> {
    if p.len() != target.len() {
        return Err(Error::Shape(format!("prediction length {} != target length {}", p.len(), target.len())));
    }
    Ok(-p.iter().zip(target).map(|(p, t)| t * p.max(CE_CLAMP).ln()).sum::<f64>())
}

/// Per-parameter weights and anchor of the quadratic drift penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub v: Vec<f64>,
    pub anchor: Vec<f64>,
}

impl ImportanceVector {
    pub fn new(v: Vec<f64>, anchor: Vec<f64>) -> Result<Self> {
        if v.len() != anchor.len() {
            return Err(Error::Shape(format!("importance length {} != anchor length {}", v.len(), anchor.len())));
        }
        if v.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::InvalidArgument("importance must be finite and nonnegative".into()));
        }
        Ok(Self { v, anchor })
    }

    /// `0.5 * sum v_i (theta_i - anchor_i)^2`.
    pub fn penalty(&self, theta: &[f64]) -> f64 {
        0.5 * self
            .v
            .iter()
            .zip(theta.iter().zip(&self.anchor))
            .map(|(v, (t, a))| v * (t - a) * (t - a))
            .sum::<f64>()
    }

    /// Adds `other`'s importance and moves the anchor to `other`'s.
    pub fn absorb(&mut self, other: ImportanceVector) -> Result<()> {
        if other.v.len() != self.v.len() {
            return Err(Error::Shape("importance vectors differ in length".into()));
        }
        for (a, b) in self.v.iter_mut().zip(&other.v) {
            *a += b;
        }
        self.anchor = other.anchor;
        Ok(())
    }
}

/// One training input with its (possibly soft) target. Logits are divided by
/// `eta` before the softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: PreprocessedSequence,
    pub target: Vec<f64>,
    pub eta: f64,
}

impl Sample {
    pub fn new(x: PreprocessedSequence, target: Vec<f64>) -> Self {
        Self { x, target, eta: 1.0 }
    }
}

fn record_sample_loss(
    tape: &mut Tape,
    vars: &ParamVars,
    params: &ModelParams,
    s: &Sample,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    if s.target.len() != params.config.n_classes {
        return Err(Error::Shape(format!(
            "target length {} != {} classes",
            s.target.len(),
            params.config.n_classes
        )));
    }
    let out = build_forward(tape, vars, &params.config, &s.x.x, rng)?;
    let logits = if s.eta == 1.0 { out.logits } else { tape.scale(out.logits, 1.0 / s.eta) };
    let p = tape.row_softmax(logits);
    Ok(tape.cross_entropy(p, &s.target))
}

/// Summed loss over `items` plus the optional drift penalty, with its exact
/// gradient. Dropout is active iff `dropout_rng` is given.
pub fn loss_and_gradient(
    params: &ModelParams,
    items: &[&Sample],
    importance: Option<&ImportanceVector>,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let vars = ParamVars::new(&mut tape, &params.theta, &params.layout);
    let mut terms = Vec::with_capacity(items.len() + 1);
    for s in items {
        terms.push(record_sample_loss(&mut tape, &vars, params, s, dropout_rng.as_deref_mut())?);
    }
    if let Some(imp) = importance {
        if imp.v.len() != params.len() {
            return Err(Error::Shape("importance length differs from parameter count".into()));
        }
        let theta = tape.param(&params.theta, 0, 1, params.len());
        terms.push(tape.weighted_sq_diff(theta, &imp.anchor, &imp.v));
    }
    let loss = tape.sum(terms);
    let value = tape.value(loss).scalar();
    let grad = tape.backward(loss, params.len())?;
    Ok((value, grad))
}

/// Objective of one iteration in eval mode: current-domain items and replayed
/// exemplars (each carrying its own `eta`) plus the drift penalty when given.
pub fn objective(
    params: &ModelParams,
    batch: &[&Sample],
    replay: &[&Sample],
    importance: Option<&ImportanceVector>,
) -> Result<f64> {
    let items: Vec<&Sample> = batch.iter().chain(replay).copied().collect();
    Ok(loss_and_gradient(params, &items, importance, None)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One update `theta -= alpha * grad L(theta + delta)` with
/// `delta = eps * g / |g|`. With `eps == 0` the second gradient is skipped and
/// the step is plain gradient descent.
pub fn sam_step<F>(theta: &mut [f64], mut loss_grad: F, alpha: f64, eps: f64) -> Result<TraceRow>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (loss, g1) = loss_grad(theta)?;
    let g_norm = norm(&g1);
    let step = if eps == 0.0 || g_norm < MIN_GRAD_NORM {
        g1
    } else {
        let shifted: Vec<f64> = theta.iter().zip(&g1).map(|(t, g)| t + eps * g / g_norm).collect();
        loss_grad(&shifted)?.1
    };
    for (t, g) in theta.iter_mut().zip(&step) {
        *t -= alpha * g;
    }
    Ok(TraceRow {
        iteration: 0,
        loss,
        grad_norm: g_norm,
    })
}

/// Per-parameter importance at the current parameters, averaged over
/// `n_samples` items drawn without replacement.
pub fn estimate_importance(
    params: &ModelParams,
    data: &[Sample],
    method: ImportanceMethod,
    n_samples: usize,
    seed_value: u64,
) -> Result<ImportanceVector> {
    if n_samples == 0 || n_samples > data.len() {
        return Err(Error::InvalidArgument(format!(
            "importance needs 1..={} samples, got {n_samples}",
            data.len()
        )));
    }
    let mut rng = seed::rng(seed_value, 0x1a9);
    let mut picks = index::sample(&mut rng, data.len(), n_samples).into_vec();
    picks.sort_unstable();
    let mut v = vec![0.0; params.len()];
    for i in picks {
        let s = &data[i];
        let mut tape = Tape::new();
        let vars = ParamVars::new(&mut tape, &params.theta, &params.layout);
        let loss = match method {
            ImportanceMethod::Ewc => record_sample_loss(&mut tape, &vars, params, s, None)?,
            ImportanceMethod::Mas => {
                let out = build_forward(&mut tape, &vars, &params.config, &s.x.x, None)?;
                tape.half_sum_squares(out.logits)
            }
        };
        let g = tape.backward(loss, params.len())?;
        for (acc, g) in v.iter_mut().zip(&g) {
            *acc += match method {
                ImportanceMethod::Ewc => g * g,
                ImportanceMethod::Mas => g.abs(),
            };
        }
    }
    v.iter_mut().for_each(|x| *x /= n_samples as f64);
    ImportanceVector::new(v, params.theta.clone())
}

/// Everything one training period needs besides the parameters.
pub struct Period<'a> {
    pub data: &'a [Sample],
    pub replay: &'a [Sample],
    pub importance: Option<&'a ImportanceVector>,
    pub use_sam: bool,
}

fn draw(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    if k <= n {
        index::sample(rng, n, k).into_vec()
    } else {
        (0..k).map(|_| rng.gen_range(0..n)).collect()
    }
}

/// `I` iterations of mini-batch updates; returns the loss trace.
pub fn train_epochs(params: &mut ModelParams, period: &Period<'_>, config: &TrainConfig) -> Result<Vec<TraceRow>> {
    config.validate()?;
    if period.data.is_empty() {
        return Err(Error::EmptyDataset("training domain has no entries".into()));
    }
    let eps = if period.use_sam { config.deviation_radius } else { 0.0 };
    let mut rng = seed::rng(config.seed, 0x7a1);
    let mut trace = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let mut items: Vec<&Sample> = draw(&mut rng, period.data.len(), config.batch_size)
            .into_iter()
            .map(|i| &period.data[i])
            .collect();
        let n_replay = period.replay.len().min(config.replay_batch);
        if n_replay > 0 {
            items.extend(index::sample(&mut rng, period.replay.len(), n_replay).into_iter().map(|i| &period.replay[i]));
        }
        let dropout_state: ChaCha8Rng = seed::rng(rng.gen(), 0xd0);
        let config_model = params.config.clone();
        let layout = params.layout.clone();
        let mut row = sam_step(
            &mut params.theta,
            |theta| {
                let p = ModelParams {
                    config: config_model.clone(),
                    layout: layout.clone(),
                    theta: theta.to_vec(),
                };
                // both SAM passes see the same dropout masks
                let mut r = dropout_state.clone();
                loss_and_gradient(&p, &items, period.importance, Some(&mut r))
            },
            config.learning_rate,
            eps,
        )?;
        row.iteration = it;
        trace.push(row);
    }
    Ok(trace)
}

pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut s = String::from("iteration,loss,grad_norm\n");
    for r in trace {
        s.push_str(&format!("{},{},{}\n", r.iteration, r.loss, r.grad_norm));
    }
    crate::storage::write_atomic(path, s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mat;
    use crate::model::ModelConfig;

    #[test]
    fn ce_examples() {
        let u = vec![0.1; 10];
        let mut t = vec![0.0; 10];
        t[3] = 1.0;
        assert!((ce_loss(&u, &t).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!(ce_loss(&t, &t).unwrap() <= 1e-11);
        assert!((ce_loss(&[0.7, 0.2, 0.1], &[1.0, 0.0, 0.0]).unwrap() - 0.356675).abs() < 1e-6);
        assert!(ce_loss(&[0.5, 0.5], &[1.0]).is_err());
    }

    #[test]
    fn sam_closed_form() {
        let mut theta = vec![3.0, 4.0];
        let quad = |t: &[f64]| Ok((0.5 * t.iter().map(|x| x * x).sum::<f64>(), t.to_vec()));
        sam_step(&mut theta, quad, 0.1, 0.5).unwrap();
        assert!((theta[0] - 2.67).abs() < 1e-12 && (theta[1] - 3.56).abs() < 1e-12);
    }

    #[test]
    fn variant_tags_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.tag().parse::<Variant>().unwrap(), v);
        }
        assert!("nope".parse::<Variant>().is_err());
    }

    #[test]
    fn penalty_zero_at_anchor() {
        let imp = ImportanceVector::new(vec![1.0, 2.0], vec![0.5, -1.0]).unwrap();
        assert_eq!(imp.penalty(&[0.5, -1.0]), 0.0);
        assert!((imp.penalty(&[1.5, -1.0]) - 0.5).abs() < 1e-15);
        assert!(ImportanceVector::new(vec![-1.0], vec![0.0]).is_err());
    }

    #[test]
    fn zero_iterations_keep_params() {
        let cfg = ModelConfig {
            input_width: 4,
            mlp_hidden: 8,
            width: 8,
            heads: 2,
            n_blocks: 1,
            n_classes: 2,
            dropout: 0.1,
        };
        let mut p = ModelParams::init(cfg, 1).unwrap();
        let before = p.theta.clone();
        let data = vec![Sample::new(
            PreprocessedSequence {
                x: Mat::from_vec(3, 4, vec![0.1; 12]),
                temporal_len: 2,
            },
            vec![1.0, 0.0],
        )];
        let period = Period {
            data: &data,
            replay: &[],
            importance: None,
            use_sam: true,
        };
        let tc = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        assert!(train_epochs(&mut p, &period, &tc).unwrap().is_empty());
        assert_eq!(p.theta, before);
    }
}
