//! Exemplar selection (k-means++/Lloyd clustering plus herding), distilled
//! labels, and the growing knowledge core-set.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::csi_sim::{CsiSequence, DomainDataset};
use crate::error::{Error, Result};
use crate::model::{softmax, Evaluator, ModelParams, ProbVector};
use crate::preprocess::PreprocessedSequence;
use crate::seed;

/// Lloyd iteration cap.
pub const MAX_LLOYD_ITERS: usize = 100;

/// Feature vectors of one class with their indices into the source dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassFeatures {
    pub features: Vec<Vec<f64>>,
    pub indices: Vec<usize>,
}

impl ClassFeatures {
    pub fn new(features: Vec<Vec<f64>>, indices: Vec<usize>) -> Result<Self> {
        if features.len() != indices.len() {
            return Err(Error::Shape("feature and index counts differ".into()));
        }
        if let Some(f) = features.first() {
            if features.iter().any(|g| g.len() != f.len()) {
                return Err(Error::Shape("feature lengths differ".into()));
            }
        }
        Ok(Self { features, indices })
    }

    /// Features only, indexed `0..n`.
    pub fn from_points(features: Vec<Vec<f64>>) -> Self {
        let indices = (0..features.len()).collect();
        Self { features, indices }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn mean(&self) -> Vec<f64> {
        let dim = self.features.first().map_or(0, Vec::len);
        let mut m = vec![0.0; dim];
        for f in &self.features {
            for (a, b) in m.iter_mut().zip(f) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.len() as f64);
        m
    }
}

/// Per-class feature lists of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub classes: Vec<ClassFeatures>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.classes.iter().map(ClassFeatures::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Encodes every entry in eval mode and groups the features by class.
pub fn build_feature_set(
    params: &ModelParams,
    inputs: &[PreprocessedSequence],
    labels: &[usize],
    n_classes: usize,
) -> Result<FeatureSet> {
    if inputs.len() != labels.len() {
        return Err(Error::Shape("inputs and labels differ in length".into()));
    }
    let mut classes: Vec<ClassFeatures> = (0..n_classes)
        .map(|_| ClassFeatures {
            features: Vec::new(),
            indices: Vec::new(),
        })
        .collect();
    let mut ev = Evaluator::new(params);
    for (i, (x, &c)) in inputs.iter().zip(labels).enumerate() {
        let class = classes
            .get_mut(c)
            .ok_or_else(|| Error::InvalidArgument(format!("label {c} not in 0..{n_classes}")))?;
        class.features.push(ev.run(x)?.1);
        class.indices.push(i);
    }
    Ok(FeatureSet { classes })
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sum of squared distances from each point to its nearest center.
pub fn clustering_objective(points: &[Vec<f64>], centers: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
        .sum()
}

/// Result of [`kmeans_select`]: positions into the class list, plus the
/// Lloyd objective after every iteration (entry 0 is the seeding).
#[derive(Debug, Clone, PartialEq)]
pub struct KmeansOutcome {
    pub selected: Vec<usize>,
    pub objective_trace: Vec<f64>,
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut bd = f64::INFINITY;
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < bd {
            bd = d;
            best = j;
        }
    }
    best
}

fn kmeans_pp(points: &[Vec<f64>], m: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.gen_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < m {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centers.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    centers
}

/// Selects `m` distinct members of `class` nearest to k-means centroids.
pub fn kmeans_select(class: &ClassFeatures, m: usize, seed_value: u64) -> Result<KmeansOutcome> {
    let pts = &class.features;
    let n = pts.len();
    if m == 0 || m > n {
        return Err(Error::InvalidArgument(format!("cannot cluster {n} points into {m} groups")));
    }
    if m == n {
        return Ok(KmeansOutcome {
            selected: (0..n).collect(),
            objective_trace: vec![0.0],
        });
    }
    let mut rng = seed::rng(seed_value, 0xc1);
    let mut centers = kmeans_pp(pts, m, &mut rng);
    let mut assign: Vec<usize> = pts.iter().map(|p| nearest(p, &centers)).collect();
    let mut trace = vec![clustering_objective(pts, &centers)];
    let dim = pts[0].len();
    for _ in 0..MAX_LLOYD_ITERS {
        let mut sums = vec![vec![0.0; dim]; m];
        let mut counts = vec![0usize; m];
        for (p, &a) in pts.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..m {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        for j in 0..m {
            if counts[j] == 0 {
                // reseed at the point farthest from its current center
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(&pts[a], &centers[assign[a]]);
                        let db = sq_dist(&pts[b], &centers[assign[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .unwrap();
                centers[j] = pts[far].clone();
                assign[far] = j;
            }
        }
        let next: Vec<usize> = pts.iter().map(|p| nearest(p, &centers)).collect();
        trace.push(clustering_objective(pts, &centers));
        if next == assign {
            break;
        }
        assign = next;
    }
    Ok(KmeansOutcome {
        selected: centroids_to_members(pts, &centers),
        objective_trace: trace,
    })
}

/// Nearest distinct member for each center, in center order. Ties go to the
/// lowest index; a member already taken passes to the next nearest.
fn centroids_to_members(points: &[Vec<f64>], centers: &[Vec<f64>]) -> Vec<usize> {
    let mut taken = vec![false; points.len()];
    let mut out = Vec::with_capacity(centers.len());
    for c in centers {
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| sq_dist(&points[a], c).total_cmp(&sq_dist(&points[b], c)).then(a.cmp(&b)));
        let pick = order.into_iter().find(|&i| !taken[i]).expect("m <= n");
        taken[pick] = true;
        out.push(pick);
    }
    out
}

/// How herding scores a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HerdingForm {
    /// Distance of the running mean to the class mean.
    #[default]
    Mean,
    /// Distance of the running sum to the class mean.
    Sum,
}

/// Greedily adds `m` positions to `fixed` so the running mean of the chosen
/// features tracks the class mean. Returns only the new positions.
pub fn herding_select(class: &ClassFeatures, fixed: &[usize], m: usize, form: HerdingForm) -> Result<Vec<usize>> {
    let n = class.len();
    if fixed.len() + m > n || fixed.iter().any(|&i| i >= n) {
        return Err(Error::InvalidArgument(format!(
            "cannot add {m} to {} chosen out of {n}",
            fixed.len()
        )));
    }
    let target = class.mean();
    let mut chosen = vec![false; n];
    let mut sum = vec![0.0; target.len()];
    for &i in fixed {
        chosen[i] = true;
        for (s, v) in sum.iter_mut().zip(&class.features[i]) {
            *s += v;
        }
    }
    let mut out = Vec::with_capacity(m);
    for step in 0..m {
        let j = (fixed.len() + step + 1) as f64;
        let div = match form {
            HerdingForm::Mean => j,
            HerdingForm::Sum => 1.0,
        };
        let mut best = None;
        let mut best_d = f64::INFINITY;
        for i in (0..n).filter(|&i| !chosen[i]) {
            let d: f64 = sum
                .iter()
                .zip(&class.features[i])
                .zip(&target)
                .map(|((s, f), t)| {
                    let r = (s + f) / div - t;
                    r * r
                })
                .sum();
            if d < best_d {
                best_d = d;
                best = Some(i);
            }
        }
        let i = best.expect("feasible");
        chosen[i] = true;
        for (s, v) in sum.iter_mut().zip(&class.features[i]) {
            *s += v;
        }
        out.push(i);
    }
    Ok(out)
}

/// Clustering share of an exemplar budget.
pub fn clustering_count(budget: usize, beta: f64) -> usize {
    (beta * budget as f64).round() as usize
}

/// `round(beta * budget)` positions by clustering, the rest by herding.
pub fn select_exemplars(
    class: &ClassFeatures,
    budget: usize,
    beta: f64,
    form: HerdingForm,
    seed_value: u64,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("clustering ratio {beta} not in [0, 1]")));
    }
    if budget > class.len() {
        return Err(Error::InvalidArgument(format!(
            "budget {budget} exceeds {} class members",
            class.len()
        )));
    }
    let m1 = clustering_count(budget, beta);
    let mut picks = if m1 > 0 { kmeans_select(class, m1, seed_value)?.selected } else { Vec::new() };
    let rest = herding_select(class, &picks, budget - m1, form)?;
    picks.extend(rest);
    Ok(picks)
}

/// `budget` uniformly random distinct positions.
pub fn random_select(n: usize, budget: usize, seed_value: u64) -> Result<Vec<usize>> {
    if budget > n {
        return Err(Error::InvalidArgument(format!("budget {budget} exceeds {n} members")));
    }
    let mut rng = seed::rng(seed_value, 0x4a);
    Ok(index::sample(&mut rng, n, budget).into_vec())
}

/// Softened eval-mode predictions `softmax(logits / eta)`.
pub fn distill_labels(params: &ModelParams, inputs: &[&PreprocessedSequence], eta: f64) -> Result<Vec<ProbVector>> {
    if !(eta >= 1.0) {
        return Err(Error::InvalidArgument(format!("downscaling factor must be >= 1, got {eta}")));
    }
    let mut ev = Evaluator::new(params);
    inputs.iter().map(|x| Ok(softmax(&ev.run(x)?.0, eta))).collect()
}

/// One stored exemplar.
#[derive(Debug, Clone, PartialEq)]
pub struct CoreEntry {
    pub sequence: CsiSequence,
    pub label: ProbVector,
    pub domain: usize,
    pub class: usize,
    /// Downscaling factor the label was produced with; replay uses the same.
    pub eta: f64,
}

/// Exemplars accumulated over periods.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KnowledgeCoreSet {
    pub entries: Vec<CoreEntry>,
    pub budget: usize,
}

impl KnowledgeCoreSet {
    pub fn new(budget: usize) -> Self {
        Self {
            entries: Vec::new(),
            budget,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn domains(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.entries.iter().map(|e| e.domain).collect();
        d.dedup();
        d
    }

    /// Appends one domain's exemplars; each class must bring exactly `budget`.
    pub fn update_knowledge(&mut self, domain: usize, new: Vec<CoreEntry>) -> Result<()> {
        let mut per_class: BTreeMap<usize, usize> = BTreeMap::new();
        for e in &new {
            if e.domain != domain {
                return Err(Error::InvalidArgument(format!("entry tagged domain {} while adding {domain}", e.domain)));
            }
            if self.entries.iter().any(|x| x.domain == domain && x.class == e.class) {
                return Err(Error::DuplicateInsertion { domain, class: e.class });
            }
            *per_class.entry(e.class).or_default() += 1;
        }
        if let Some((c, n)) = per_class.iter().find(|(_, n)| **n != self.budget) {
            return Err(Error::InvalidArgument(format!(
                "class {c} brings {n} exemplars, budget is {}",
                self.budget
            )));
        }
        self.entries.extend(new);
        Ok(())
    }

    /// Persists as a dataset directory plus `labels.json`.
    pub fn save(&self, dir: &Path, meta: &crate::storage::DatasetMeta) -> Result<()> {
        let seqs: Vec<&CsiSequence> = self.entries.iter().map(|e| &e.sequence).collect();
        crate::storage::write_sequences(dir, meta, &seqs)?;
        let labels = LabelsFile {
            budget: self.budget,
            entries: self
                .entries
                .iter()
                .map(|e| LabelRecord {
                    domain: e.domain,
                    class: e.class,
                    label: e.label.as_slice().to_vec(),
                    eta: e.eta,
                })
                .collect(),
        };
        let mut json = serde_json::to_vec_pretty(&labels)?;
        json.push(b'\n');
        crate::storage::write_atomic(&dir.join("labels.json"), &json)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (_, seqs) = crate::storage::read_sequences(dir)?;
        let path = dir.join("labels.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let labels: LabelsFile = serde_json::from_slice(&bytes)?;
        if labels.entries.len() != seqs.len() {
            return Err(Error::Format {
                path,
                msg: "label count differs from stored sequences".into(),
            });
        }
        let entries = seqs
            .into_iter()
            .zip(labels.entries)
            .map(|(sequence, r)| {
                Ok(CoreEntry {
                    sequence,
                    label: ProbVector::new(r.label)?,
                    domain: r.domain,
                    class: r.class,
                    eta: r.eta,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            entries,
            budget: labels.budget,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct LabelsFile {
    budget: usize,
    entries: Vec<LabelRecord>,
}

#[derive(Serialize, Deserialize)]
struct LabelRecord {
    domain: usize,
    class: usize,
    label: Vec<f64>,
    eta: f64,
}

/// Storage accounting of a core-set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    /// Bytes of the stored exemplars in the on-disk layout.
    pub stored_bytes: usize,
    /// `k (N L_H + C) C E` with `k` the number of stored domains.
    pub model_float_count: usize,
    /// `C E / M`: exemplars per domain relative to a full domain dataset.
    pub ratio: f64,
}

pub fn model_float_count(k: usize, n: usize, l_h: usize, n_classes: usize, budget: usize) -> usize {
    k * (n * l_h + n_classes) * n_classes * budget
}

pub fn exemplar_ratio(n_classes: usize, budget: usize, domain_size: usize) -> f64 {
    (n_classes * budget) as f64 / domain_size as f64
}

/// `typical_n` is the representative sequence length used in the float count.
pub fn memory_report(
    core: &KnowledgeCoreSet,
    typical_domain_size: usize,
    typical_n: usize,
    l_h: usize,
    n_classes: usize,
) -> MemoryReport {
    let stored_bytes = core
        .entries
        .iter()
        .map(|e| crate::storage::entry_bytes(e.sequence.len(), e.sequence.l_h))
        .sum();
    MemoryReport {
        stored_bytes,
        model_float_count: model_float_count(core.domains().len(), typical_n, l_h, n_classes, core.budget),
        ratio: exemplar_ratio(n_classes, core.budget, typical_domain_size),
    }
}

/// Builds core entries for the chosen dataset positions.
pub fn make_entries(
    domain: &DomainDataset,
    picks: &[usize],
    labels: Vec<ProbVector>,
    eta: f64,
) -> Vec<CoreEntry> {
    picks
        .iter()
        .zip(labels)
        .map(|(&i, label)| CoreEntry {
            sequence: domain.entries[i].clone(),
            label,
            domain: domain.domain_id,
            class: domain.label(i),
            eta,
        })
        .collect()
}
