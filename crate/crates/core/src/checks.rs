//! Self-checks behind `edgecl check`. Each check compares library output
//! with a brute-force or closed-form reference.

use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use serde::Serialize;

use crate::autodiff::Mat;
use crate::coreset::{clustering_objective, exemplar_ratio, herding_select, kmeans_select, model_float_count, sq_dist, ClassFeatures, HerdingForm};
use crate::csi_sim::{
    generate_sequence, mean_path_variation, verify_variation_scaling, DynamicPath, InstanceVariation,
    PerturbationConfig, ScalingProbe, SceneSpec, Trajectory, UserProfile, SPEED_OF_LIGHT,
};
use crate::error::{Error, Result};
use crate::harness::{results_json, run_benchmark_suite, run_trials, ExperimentConfig, ResultBundle};
use crate::model::{forward, forward_downscaled, softmax, Mode, ModelConfig, ModelParams};
use crate::preprocess::{conjugate_multiply, preprocess_sequence, PreprocessedSequence};
use crate::seed;
use crate::train::{loss_and_gradient, sam_step, ImportanceVector, Sample, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Unit,
    Oracle,
    EndToEnd,
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" => Ok(Level::Unit),
            "oracle" => Ok(Level::Oracle),
            "endtoend" => Ok(Level::EndToEnd),
            _ => Err(Error::InvalidArgument(format!("unknown check level '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub criterion: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(criterion: u8, name: &'static str, passed: bool, detail: String) -> Self {
        Self {
            criterion,
            name,
            passed,
            detail,
        }
    }
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {:>2} {}: {}", self.criterion, self.name, self.detail)
    }
}

/// Runs every check of `level`. `cfg` is the experiment used end to end.
pub fn run(level: Level, cfg: &ExperimentConfig) -> Result<Vec<CheckResult>> {
    match level {
        Level::Unit => Ok(vec![sam_closed_form()?, distillation()?, memory_accounting()]),
        Level::Oracle => Ok(vec![
            gradient_oracle(20)?,
            clustering_oracle(30)?,
            herding_oracle(100)?,
            preprocessing_invariance()?,
            variation_scaling()?,
        ]),
        Level::EndToEnd => {
            let bundle = run_benchmark_suite(cfg)?;
            Ok(vec![ordering(&bundle), determinism(cfg, &bundle)?])
        }
    }
}

/// Tiny model used by the gradient check.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        input_width: 4,
        mlp_hidden: 8,
        width: 8,
        heads: 2,
        n_blocks: 1,
        n_classes: 2,
        dropout: 0.0,
    }
}

fn random_input(rng: &mut impl Rng, rows: usize, cols: usize) -> PreprocessedSequence {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    PreprocessedSequence {
        x: Mat::from_vec(rows, cols, data),
        temporal_len: 0,
    }
}

/// Largest relative gap between reverse-mode and central-difference
/// gradients over `models` random tiny models.
pub fn gradient_max_rel_error(models: usize) -> Result<f64> {
    let cfg = tiny_config();
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for m in 0..models as u64 {
        let mut rng = seed::rng(0x6AD, m);
        let mut params = ModelParams::init(cfg.clone(), m)?;
        for t in params.theta.iter_mut() {
            *t += rng.gen_range(-0.2..0.2);
        }
        let current = Sample::new(random_input(&mut rng, 3, cfg.input_width), vec![1.0, 0.0]);
        let p: f64 = rng.gen_range(0.1..0.9);
        let replay = Sample {
            x: random_input(&mut rng, 3, cfg.input_width),
            target: vec![p, 1.0 - p],
            eta: 2.0,
        };
        let v: Vec<f64> = (0..params.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let anchor: Vec<f64> = params.theta.iter().map(|t| t + rng.gen_range(-0.1..0.1)).collect();
        let imp = ImportanceVector::new(v, anchor)?;
        let items = [&current, &replay];
        let (_, grad) = loss_and_gradient(&params, &items, Some(&imp), None)?;
        for i in 0..params.len() {
            let orig = params.theta[i];
            params.theta[i] = orig + step;
            let up = loss_and_gradient(&params, &items, Some(&imp), None)?.0;
            params.theta[i] = orig - step;
            let down = loss_and_gradient(&params, &items, Some(&imp), None)?.0;
            params.theta[i] = orig;
            let fd = (up - down) / (2.0 * step);
            let scale = grad[i].abs().max(fd.abs()).max(1e-6);
            worst = worst.max((grad[i] - fd).abs() / scale);
        }
    }
    Ok(worst)
}

pub fn gradient_oracle(models: usize) -> Result<CheckResult> {
    let e = gradient_max_rel_error(models)?;
    Ok(CheckResult::new(1, "gradient oracle", e < 1e-4, format!("max relative error {e:.3e} over {models} models")))
}

pub fn sam_closed_form() -> Result<CheckResult> {
    let quad = |t: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((0.5 * t.iter().map(|x| x * x).sum::<f64>(), t.to_vec())) };
    let mut theta = [3.0, 4.0];
    sam_step(&mut theta, quad, 0.1, 0.5)?;
    let expected = [3.0 - 0.1 * 3.3, 4.0 - 0.1 * 4.4];
    let err = (theta[0] - expected[0]).abs().max((theta[1] - expected[1]).abs());
    let mut plain = [3.0, 4.0];
    sam_step(&mut plain, quad, 0.1, 0.0)?;
    let sgd: [f64; 2] = [3.0 - 0.1 * 3.0, 4.0 - 0.1 * 4.0];
    let bitwise = plain[0].to_bits() == sgd[0].to_bits() && plain[1].to_bits() == sgd[1].to_bits();
    Ok(CheckResult::new(
        2,
        "SAM closed form",
        err <= 1e-12 && bitwise,
        format!("theta = ({:.6}, {:.6}), error {err:.1e}, eps=0 bitwise SGD: {bitwise}", theta[0], theta[1]),
    ))
}

/// Member-pair optimum of the clustering objective over all index pairs.
fn best_pair(points: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for a in 0..points.len() {
        for b in a + 1..points.len() {
            best = best.min(clustering_objective(points, &[points[a].clone(), points[b].clone()]));
        }
    }
    best
}

/// Unit-square corners in a seeded order.
pub fn shuffled_square(seed_value: u64) -> Vec<Vec<f64>> {
    use rand::seq::SliceRandom;
    let mut pts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
    pts.shuffle(&mut seed::rng(seed_value, 0x5C));
    pts
}

pub fn clustering_oracle(instances: u64) -> Result<CheckResult> {
    let mut hits = 0;
    let mut monotone = true;
    for s in 0..instances {
        let pts = shuffled_square(s);
        let out = kmeans_select(&ClassFeatures::from_points(pts.clone()), 2, s)?;
        monotone &= out.objective_trace.windows(2).all(|w| w[1] <= w[0]);
        let centers: Vec<Vec<f64>> = out.selected.iter().map(|&i| pts[i].clone()).collect();
        if (clustering_objective(&pts, &centers) - best_pair(&pts)).abs() <= 1e-12 {
            hits += 1;
        }
    }
    let need = (instances * 28).div_ceil(30);
    Ok(CheckResult::new(
        3,
        "clustering oracle",
        hits >= need && monotone,
        format!("optimum reached in {hits}/{instances}, Lloyd monotone: {monotone}"),
    ))
}

pub fn herding_oracle(instances: u64) -> Result<CheckResult> {
    let mut mismatches = 0;
    for s in 0..instances {
        let mut rng = seed::rng(s, 0x4E8);
        let pts: Vec<Vec<f64>> = (0..30).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let class = ClassFeatures::from_points(pts.clone());
        let mean = class.mean();
        let picks = herding_select(&class, &[], 10, HerdingForm::Mean)?;
        let mut sum = vec![0.0; 4];
        let mut taken = vec![false; 30];
        for (j, &got) in picks.iter().enumerate() {
            let mut best = (f64::INFINITY, usize::MAX);
            for (i, p) in pts.iter().enumerate() {
                if taken[i] {
                    continue;
                }
                let run: Vec<f64> = sum.iter().zip(p).map(|(a, b)| (a + b) / (j + 1) as f64).collect();
                let d = sq_dist(&run, &mean);
                if d < best.0 {
                    best = (d, i);
                }
            }
            if best.1 != got {
                mismatches += 1;
            }
            taken[got] = true;
            for (a, b) in sum.iter_mut().zip(&pts[got]) {
                *a += b;
            }
        }
    }
    Ok(CheckResult::new(
        4,
        "herding oracle",
        mismatches == 0,
        format!("{mismatches} greedy steps differ from exhaustive minimization over {instances} instances"),
    ))
}

/// Complex correlation coefficient `|<a, b>| / (|a| |b|)`.
pub fn complex_correlation(a: &[Complex64], b: &[Complex64]) -> f64 {
    let dot: Complex64 = a.iter().zip(b).map(|(x, y)| x * y.conj()).sum();
    let na: f64 = a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    dot.norm() / (na * nb)
}

/// Largest relative change of the preprocessed output under injected
/// per-packet phase errors.
pub fn phase_invariance_error() -> Result<f64> {
    let spec = SceneSpec::desk();
    let scene = spec.build()?;
    let layout = scene.layout();
    let user = UserProfile::new(3, 10, PerturbationConfig::default())?;
    let mut worst: f64 = 0.0;
    for class in 0..10 {
        let seq = generate_sequence(&scene, &user, class, seed::derive(99, class as u64))?;
        let mut rng = seed::rng(class as u64, 0xFA5E);
        let mut rotated = seq.clone();
        for n in 0..seq.len() {
            let rot = Complex64::from_polar(1.0, rng.gen_range(0.0..std::f64::consts::TAU));
            for v in &mut rotated.samples[n * seq.l_h..(n + 1) * seq.l_h] {
                *v *= rot;
            }
        }
        let a = preprocess_sequence(&seq, &layout, scene.duration, 16)?;
        let b = preprocess_sequence(&rotated, &layout, scene.duration, 16)?;
        let scale = a.x.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = a.x.data.iter().zip(&b.x.data).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        worst = worst.max(diff / scale);
    }
    Ok(worst)
}

/// Smallest correlation, over subcarriers and activities, between the
/// variation of the conjugate product and its first-order prediction from
/// the user term, in a noise-free scene with a strong static path.
pub fn first_order_correlation() -> Result<f64> {
    let spec = SceneSpec {
        static_path_gain: 40.0,
        n_env_paths: 0,
        phase_error_enabled: false,
        ..SceneSpec::desk()
    };
    let scene = spec.build()?;
    let layout = scene.layout();
    let user = UserProfile::new(5, 10, PerturbationConfig::default())?;
    let times: Vec<f64> = (0..=300).map(|i| i as f64 * 0.01).collect();
    let mut worst: f64 = 1.0;
    for class in 0..user.n_classes() {
        let paths = user.scatterers(class, &InstanceVariation::nominal(user.activities[class].parts.len(), 0))?;
        for k in 0..layout.n_subcarriers {
            let f = scene.subcarrier_frequency(k);
            let lambda = SPEED_OF_LIGHT / f;
            let (tx, r0, r1) = (&scene.tx_positions[0], &scene.rx_positions[0], &scene.rx_positions[1]);
            let s0 = scene.static_gain[layout.index(k, 0, 0)];
            let s1 = scene.static_gain[layout.index(k, 0, 1)];
            let beta = s1 / s0.conj();
            let user_at = |rx: &[f64; 3], t: f64| -> Complex64 {
                paths
                    .iter()
                    .map(|p| {
                        let pos = p.trajectory.position(t);
                        crate::csi_sim::path_gain(p.gain, p.rcs, dist(tx, &pos), dist(rx, &pos), lambda)
                    })
                    .sum()
            };
            let mut dx = Vec::new();
            let mut pred = Vec::new();
            let mut prev: Option<(Complex64, Complex64, Complex64)> = None;
            for &t in &times {
                let (u0, u1) = (user_at(r0, t), user_at(r1, t));
                let mut h = vec![Complex64::new(0.0, 0.0); layout.len()];
                h[layout.index(k, 0, 0)] = s0 + u0;
                h[layout.index(k, 0, 1)] = s1 + u1;
                let x = conjugate_multiply(&h, &layout)?[k];
                if let Some((px, pu0, pu1)) = prev {
                    dx.push(x - px);
                    pred.push((u1 - pu1) + beta * (u0 - pu0).conj());
                }
                prev = Some((x, u0, u1));
            }
            worst = worst.min(complex_correlation(&dx, &pred));
        }
    }
    Ok(worst)
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub fn preprocessing_invariance() -> Result<CheckResult> {
    let e = phase_invariance_error()?;
    let c = first_order_correlation()?;
    Ok(CheckResult::new(
        5,
        "preprocessing invariance",
        e < 1e-9 && c > 0.99,
        format!("phase-error change {e:.2e} relative, first-order correlation {c:.5}"),
    ))
}

/// Ratio of mean per-step variation of a user path at Tx distance `d_u` to
/// an environment path at `d_e`, both moving radially with the same speed.
pub fn variation_ratio(d_u: f64, d_e: f64) -> f64 {
    let f = 5.28e9;
    let lambda = SPEED_OF_LIGHT / f;
    let tx = [0.0, 0.0, 0.0];
    let rx = [-1000.0, 0.0, 0.0];
    let times: Vec<f64> = (0..=200).map(|i| i as f64 * 1e-3).collect();
    let path = |d: f64| DynamicPath {
        gain: 1.0,
        rcs: 1.0,
        trajectory: Trajectory::new(vec![0.0, 1.0], vec![[d, 0.0, 0.0], [d + 0.5, 0.0, 0.0]]).expect("valid keyframes"),
    };
    mean_path_variation(&path(d_u), &tx, &rx, lambda, &times) / mean_path_variation(&path(d_e), &tx, &rx, lambda, &times)
}

pub fn variation_scaling() -> Result<CheckResult> {
    let pts = verify_variation_scaling(&ScalingProbe::default(), &[5.0, 10.0, 20.0])?;
    let corollary = pts
        .iter()
        .map(|p| ((p.relative_derivative - p.expected) / p.expected).abs())
        .fold(0.0f64, f64::max);
    let ratio = [(1.0, 2.0), (2.0, 6.0), (4.0, 1.5)]
        .iter()
        .map(|&(du, de)| {
            let expected = de / du;
            ((variation_ratio(du, de) - expected) / expected).abs()
        })
        .fold(0.0f64, f64::max);
    Ok(CheckResult::new(
        6,
        "variation scaling",
        corollary < 0.10 && ratio < 0.15,
        format!("-1/d deviation {:.2}%, distance-ratio deviation {:.2}%", 100.0 * corollary, 100.0 * ratio),
    ))
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

pub fn distillation() -> Result<CheckResult> {
    let cfg = ModelConfig {
        input_width: 12,
        mlp_hidden: 16,
        width: 8,
        heads: 2,
        n_blocks: 1,
        n_classes: 5,
        dropout: 0.1,
    };
    let params = ModelParams::init(cfg.clone(), 3)?;
    let mut identical = true;
    let mut monotone = true;
    let mut shift: f64 = 0.0;
    let etas = [1.0, 1.25, 1.5, 2.0, 3.0, 5.0, 10.0];
    for i in 0..100u64 {
        let mut rng = seed::rng(i, 0xD15);
        let x = random_input(&mut rng, 4, cfg.input_width);
        let plain = forward(&params, &x, Mode::Eval, None)?;
        identical &= forward_downscaled(&params, &x, 1.0)?.as_slice() == plain.probs.as_slice();
        let ent: Vec<f64> = etas
            .iter()
            .map(|&e| forward_downscaled(&params, &x, e).map(|p| entropy(p.as_slice())))
            .collect::<Result<_>>()?;
        monotone &= ent.windows(2).all(|w| w[1] >= w[0] - 1e-12);
        let c: f64 = rng.gen_range(-50.0..50.0);
        let moved: Vec<f64> = plain.logits.iter().map(|z| z + c).collect();
        let a = softmax(&plain.logits, 1.0);
        let b = softmax(&moved, 1.0);
        shift = shift.max(a.as_slice().iter().zip(b.as_slice()).fold(0.0f64, |m, (p, q)| m.max((p - q).abs())));
    }
    Ok(CheckResult::new(
        7,
        "distillation properties",
        identical && monotone && shift < 1e-9,
        format!("eta=1 identical: {identical}, entropy monotone: {monotone}, shift error {shift:.1e}"),
    ))
}

pub fn memory_accounting() -> CheckResult {
    let ratio = exemplar_ratio(10, 10, 3013);
    let exact = ratio == 100.0 / 3013.0 && (ratio * 1e4).round() / 1e4 == 0.0332;
    let (n, l_h, c, e) = (300, 117 * 3, 10, 10);
    let counts = [1usize, 4, 8].iter().all(|&k| model_float_count(k, n, l_h, c, e) == k * (n * l_h + c) * c * e);
    CheckResult::new(
        9,
        "memory accounting",
        exact && counts,
        format!("ratio {ratio:.4} (exact: {exact}), float counts match: {counts}"),
    )
}

/// The four ordering conditions on the suite means.
pub fn ordering(bundle: &ResultBundle) -> CheckResult {
    let get = |v: Variant| bundle.row(v).filter(|r| r.n_runs > 0);
    let (Some(p), Some(ft), Some(cum), Some(km), Some(he)) = (
        get(Variant::Proposed),
        get(Variant::BlFt),
        get(Variant::BlCumulative),
        get(Variant::ErKmeans),
        get(Variant::ErHerding),
    ) else {
        return CheckResult::new(8, "end-to-end ordering", false, "missing variant results".into());
    };
    let er = km.mean_average_accuracy.max(he.mean_average_accuracy);
    let conds = [
        p.mean_forgetting <= 0.5 * ft.mean_forgetting,
        p.mean_average_accuracy >= ft.mean_average_accuracy + 0.05,
        cum.mean_average_accuracy >= p.mean_average_accuracy,
        p.mean_average_accuracy >= er - 0.02,
    ];
    CheckResult::new(
        8,
        "end-to-end ordering",
        conds.iter().all(|&c| c) && bundle.failures.is_empty(),
        format!(
            "acc/fg proposed {:.3}/{:.3}, bl_ft {:.3}/{:.3}, cumulative {:.3}, best ER {:.3}; conditions {:?}",
            p.mean_average_accuracy, p.mean_forgetting, ft.mean_average_accuracy, ft.mean_forgetting,
            cum.mean_average_accuracy, er, conds
        ),
    )
}

/// Reruns the first trial and compares the serialized results.
pub fn determinism(cfg: &ExperimentConfig, bundle: &ResultBundle) -> Result<CheckResult> {
    let again = run_trials(cfg, &[0])?;
    let same = results_json(&again)? == results_json(&bundle.restrict_trials(&[0]))?;
    Ok(CheckResult::new(10, "determinism", same, format!("first-trial results.json identical: {same}")))
}
