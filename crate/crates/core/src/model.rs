//! Transformer discriminator: MLP encoder, MHSA + feed-forward blocks with
//! residual connections, and a predictor reading the first sequence row.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_in_place, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::preprocess::PreprocessedSequence;
use crate::seed;

/// Variance guard of the per-vector standardization.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width `L_P` of the preprocessed input rows.
    pub input_width: usize,
    /// Output width of the first MLP-encoder layer.
    pub mlp_hidden: usize,
    /// Transformer width `L`, also the output of the second MLP-encoder layer.
    pub width: usize,
    pub heads: usize,
    pub n_blocks: usize,
    pub n_classes: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// 128/64 MLP encoder, `L = 64`, 8 heads, 2 blocks, 10 classes, dropout 0.1.
    pub fn standard(input_width: usize) -> Self {
        Self {
            input_width,
            mlp_hidden: 128,
            width: 64,
            heads: 8,
            n_blocks: 2,
            n_classes: 10,
            dropout: 0.1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.input_width,
            self.mlp_hidden,
            self.width,
            self.heads,
            self.n_classes,
        ];
        if counts.contains(&0) {
            return Err(Error::Config(format!("model widths must be >= 1: {self:?}")));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Location of one weight or bias block inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorSpec {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Weight `(out x in)` and bias `(1 x out)` of a fully connected layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseSpec {
    pub weight: TensorSpec,
    pub bias: TensorSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadSpec {
    pub query: TensorSpec,
    pub key: TensorSpec,
    pub value: TensorSpec,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub heads: Vec<HeadSpec>,
    pub ff1: DenseSpec,
    pub ff2: DenseSpec,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub fc1: DenseSpec,
    pub fc2: DenseSpec,
    pub blocks: Vec<BlockSpec>,
    pub predictor: DenseSpec,
    pub total: usize,
}

struct Cursor(usize);

impl Cursor {
    fn take(&mut self, rows: usize, cols: usize) -> TensorSpec {
        let t = TensorSpec {
            offset: self.0,
            rows,
            cols,
        };
        self.0 += rows * cols;
        t
    }

    fn dense(&mut self, out: usize, inp: usize) -> DenseSpec {
        DenseSpec {
            weight: self.take(out, inp),
            bias: self.take(1, out),
        }
    }
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut c = Cursor(0);
        let fc1 = c.dense(cfg.mlp_hidden, cfg.input_width);
        let fc2 = c.dense(cfg.width, cfg.mlp_hidden);
        let d = cfg.head_dim();
        let blocks = (0..cfg.n_blocks)
            .map(|_| BlockSpec {
                heads: (0..cfg.heads)
                    .map(|_| HeadSpec {
                        query: c.take(d, d),
                        key: c.take(d, d),
                        value: c.take(d, d),
                    })
                    .collect(),
                ff1: c.dense(cfg.width, cfg.width),
                ff2: c.dense(cfg.width, cfg.width),
            })
            .collect();
        let predictor = c.dense(cfg.n_classes, cfg.width);
        Self {
            fc1,
            fc2,
            blocks,
            predictor,
            total: c.0,
        }
    }

    /// Every weight matrix with its Xavier fan sizes `(fan_in, fan_out)`.
    pub fn weights(&self) -> Vec<(TensorSpec, usize, usize)> {
        let fc = |d: &DenseSpec| (d.weight, d.weight.cols, d.weight.rows);
        let mut out = vec![fc(&self.fc1), fc(&self.fc2)];
        for b in &self.blocks {
            for h in &b.heads {
                for t in [h.query, h.key, h.value] {
                    out.push((t, t.rows, t.cols));
                }
            }
            out.push(fc(&b.ff1));
            out.push(fc(&b.ff2));
        }
        out.push(fc(&self.predictor));
        out
    }
}

/// Flat trainable vector with a structured view through [`ParamLayout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub theta: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let theta = vec![0.0; layout.total];
        Ok(Self {
            config,
            layout,
            theta,
        })
    }

    /// Xavier-uniform weights, zero biases.
    pub fn init(config: ModelConfig, seed_value: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = seed::rng(seed_value, 0x1417);
        for (spec, fan_in, fan_out) in p.layout.weights() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut p.theta[spec.range()] {
                *v = rng.gen_range(-bound..=bound);
            }
        }
        Ok(p)
    }

    pub fn from_theta(config: ModelConfig, theta: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        if theta.len() != p.layout.total {
            return Err(Error::Shape(format!(
                "theta has {} entries, layout needs {}",
                theta.len(),
                p.layout.total
            )));
        }
        p.theta = theta;
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn view(&self, t: TensorSpec) -> &[f64] {
        &self.theta[t.range()]
    }

    pub fn view_mut(&mut self, t: TensorSpec) -> &mut [f64] {
        &mut self.theta[t.range()]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let c = &self.config;
        let mut buf = Vec::with_capacity(HEADER_LEN + self.theta.len() * 4);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [
            c.input_width as u32,
            c.mlp_hidden as u32,
            c.width as u32,
            c.heads as u32,
            c.n_blocks as u32,
            c.n_classes as u32,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&c.dropout.to_bits().to_le_bytes());
        buf.extend_from_slice(&(self.theta.len() as u32).to_le_bytes());
        for v in &self.theta {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        crate::storage::write_atomic(&dir.join("model.bin"), &buf)?;
        let header = serde_json::json!({
            "format": "edgecl-model",
            "endianness": "little",
            "config": c,
            "n_params": self.theta.len(),
        });
        let mut json = serde_json::to_vec_pretty(&header)?;
        json.write_all(b"\n").map_err(|e| Error::io(dir, e))?;
        crate::storage::write_atomic(&dir.join("model.json"), &json)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("model.bin");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let bad = |msg: &str| Error::Format {
            path: path.clone(),
            msg: msg.to_string(),
        };
        if bytes.len() < HEADER_LEN || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing checkpoint header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let config = ModelConfig {
            input_width: word(0) as usize,
            mlp_hidden: word(1) as usize,
            width: word(2) as usize,
            heads: word(3) as usize,
            n_blocks: word(4) as usize,
            n_classes: word(5) as usize,
            dropout: f64::from_bits(u64::from_le_bytes(bytes[28..36].try_into().unwrap())),
        };
        let n = u32::from_le_bytes(bytes[36..40].try_into().unwrap()) as usize;
        let body = &bytes[HEADER_LEN..];
        if body.len() != 4 * n {
            return Err(bad("parameter payload length mismatch"));
        }
        let theta = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::from_theta(config, theta)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"ECLM";
// magic, six u32 sizes, f64 dropout, u32 parameter count
const HEADER_LEN: usize = 40;

/// Probability vector over `C` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        let sum: f64 = p.iter().sum();
        if p.is_empty() || p.iter().any(|v| !(0.0..=1.0).contains(v)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("not a probability vector: {p:?}")));
        }
        Ok(Self(p))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.0.iter().enumerate() {
            if *v > self.0[best] {
                best = i;
            }
        }
        best
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self.0.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }
}

/// Softmax of `logits / temperature`.
pub fn softmax(logits: &[f64], temperature: f64) -> ProbVector {
    let mut p: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    softmax_in_place(&mut p);
    ProbVector(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameter blocks of one tape.
pub struct ParamVars {
    fc1: (Var, Var),
    fc2: (Var, Var),
    blocks: Vec<BlockVars>,
    predictor: (Var, Var),
}

struct BlockVars {
    heads: Vec<(Var, Var, Var)>,
    ff1: (Var, Var),
    ff2: (Var, Var),
}

impl ParamVars {
    pub fn new(tape: &mut Tape, theta: &[f64], layout: &ParamLayout) -> Self {
        let mut t = |s: TensorSpec| tape.param(theta, s.offset, s.rows, s.cols);
        let mut dense = |d: &DenseSpec| (t(d.weight), t(d.bias));
        let fc1 = dense(&layout.fc1);
        let fc2 = dense(&layout.fc2);
        let blocks = layout
            .blocks
            .iter()
            .map(|b| BlockVars {
                heads: b
                    .heads
                    .iter()
                    .map(|h| {
                        (
                            tape.param(theta, h.query.offset, h.query.rows, h.query.cols),
                            tape.param(theta, h.key.offset, h.key.rows, h.key.cols),
                            tape.param(theta, h.value.offset, h.value.rows, h.value.cols),
                        )
                    })
                    .collect(),
                ff1: (
                    tape.param(theta, b.ff1.weight.offset, b.ff1.weight.rows, b.ff1.weight.cols),
                    tape.param(theta, b.ff1.bias.offset, 1, b.ff1.bias.cols),
                ),
                ff2: (
                    tape.param(theta, b.ff2.weight.offset, b.ff2.weight.rows, b.ff2.weight.cols),
                    tape.param(theta, b.ff2.bias.offset, 1, b.ff2.bias.cols),
                ),
            })
            .collect();
        let p = &layout.predictor;
        let predictor = (
            tape.param(theta, p.weight.offset, p.weight.rows, p.weight.cols),
            tape.param(theta, p.bias.offset, 1, p.bias.cols),
        );
        Self {
            fc1,
            fc2,
            blocks,
            predictor,
        }
    }
}

/// Nodes of one forward pass on a tape.
pub struct ForwardVars {
    /// Final transformer output, `N x L`.
    pub sequence: Var,
    /// First row of `sequence`.
    pub feature: Var,
    pub logits: Var,
    /// Attention weights per block, then per head.
    pub attention: Vec<Vec<Var>>,
}

fn fc(tape: &mut Tape, x: Var, (w, b): (Var, Var)) -> Var {
    let y = tape.matmul(x, w, true);
    let y = tape.add_bias(y, b);
    let y = tape.relu(y);
    tape.row_norm(y, NORM_EPS)
}

fn maybe_dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut Option<&mut ChaCha8Rng>) -> Var {
    let Some(rng) = rng.as_deref_mut() else { return x };
    if rate == 0.0 {
        return x;
    }
    let keep = 1.0 / (1.0 - rate);
    let n = tape.value(x).data.len();
    let mask = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    tape.dropout(x, mask)
}

/// Records the forward pass. Dropout is active iff `dropout_rng` is given.
pub fn build_forward(
    tape: &mut Tape,
    vars: &ParamVars,
    cfg: &ModelConfig,
    x: &Mat,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardVars> {
    if x.cols != cfg.input_width {
        return Err(Error::Shape(format!(
            "input width {} != model input width {}",
            x.cols, cfg.input_width
        )));
    }
    if x.rows == 0 {
        return Err(Error::Shape("empty input sequence".into()));
    }
    let rate = cfg.dropout;
    let input = tape.input(x.clone());
    let h = fc(tape, input, vars.fc1);
    let z = fc(tape, h, vars.fc2);
    let mut z = maybe_dropout(tape, z, rate, &mut dropout_rng);

    let d = cfg.head_dim();
    let inv_sqrt = 1.0 / (d as f64).sqrt();
    let mut attention = Vec::with_capacity(vars.blocks.len());
    for block in &vars.blocks {
        let mut outs = Vec::with_capacity(block.heads.len());
        let mut maps = Vec::with_capacity(block.heads.len());
        for (a, &(wq, wk, wv)) in block.heads.iter().enumerate() {
            let za = tape.slice_cols(z, a * d, d);
            let q = tape.matmul(za, wq, false);
            let k = tape.matmul(za, wk, false);
            let v = tape.matmul(za, wv, false);
            let s = tape.matmul(q, k, true);
            let s = tape.scale(s, inv_sqrt);
            let s = tape.row_softmax(s);
            maps.push(s);
            outs.push(tape.matmul(s, v, false));
        }
        attention.push(maps);
        let mhsa = tape.concat_cols(outs);
        let mhsa = maybe_dropout(tape, mhsa, rate, &mut dropout_rng);
        z = tape.add(z, mhsa);
        let f = fc(tape, z, block.ff1);
        let f = fc(tape, f, block.ff2);
        let f = maybe_dropout(tape, f, rate, &mut dropout_rng);
        z = tape.add(z, f);
    }
    let feature = tape.row(z, 0);
    let logits = tape.matmul(feature, vars.predictor.0, true);
    let logits = tape.add_bias(logits, vars.predictor.1);
    Ok(ForwardVars {
        sequence: z,
        feature,
        logits,
        attention,
    })
}

/// Values cached from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub probs: ProbVector,
    pub logits: Vec<f64>,
    pub feature: Vec<f64>,
    pub sequence: Mat,
    pub attention: Vec<Vec<Mat>>,
}

pub fn forward(
    params: &ModelParams,
    x: &PreprocessedSequence,
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let vars = ParamVars::new(&mut tape, &params.theta, &params.layout);
    let rng = match mode {
        Mode::Train => rng,
        Mode::Eval => None,
    };
    let out = build_forward(&mut tape, &vars, &params.config, &x.x, rng)?;
    let logits = tape.value(out.logits).data.clone();
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok(ForwardOutput {
        probs: softmax(&logits, 1.0),
        feature: tape.value(out.feature).data.clone(),
        sequence: tape.value(out.sequence).clone(),
        attention: out
            .attention
            .iter()
            .map(|b| b.iter().map(|v| tape.value(*v).clone()).collect())
            .collect(),
        logits,
    })
}

/// Eval-mode prediction with logits divided by `eta` before the softmax.
pub fn forward_downscaled(params: &ModelParams, x: &PreprocessedSequence, eta: f64) -> Result<ProbVector> {
    if !(eta >= 1.0) {
        return Err(Error::InvalidArgument(format!("downscaling factor must be >= 1, got {eta}")));
    }
    let out = forward(params, x, Mode::Eval, None)?;
    Ok(softmax(&out.logits, eta))
}

/// Encoder output consumed by the predictor (first row of the final sequence).
pub fn extract_feature(params: &ModelParams, x: &PreprocessedSequence) -> Result<Vec<f64>> {
    Ok(forward(params, x, Mode::Eval, None)?.feature)
}

/// Predictor applied to an already-encoded `N x L` sequence; only row 0 is read.
pub fn predict_from_sequence(params: &ModelParams, sequence: &Mat) -> Result<(Vec<f64>, ProbVector)> {
    let cfg = &params.config;
    if sequence.cols != cfg.width || sequence.rows == 0 {
        return Err(Error::Shape(format!(
            "encoded sequence is {}x{}, expected Nx{}",
            sequence.rows, sequence.cols, cfg.width
        )));
    }
    let w = params.view(params.layout.predictor.weight);
    let b = params.view(params.layout.predictor.bias);
    let z = sequence.row(0);
    let logits: Vec<f64> = (0..cfg.n_classes)
        .map(|c| b[c] + w[c * cfg.width..(c + 1) * cfg.width].iter().zip(z).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let p = softmax(&logits, 1.0);
    Ok((logits, p))
}

/// Eval-mode forward over many inputs reusing one tape.
pub struct Evaluator<'a> {
    params: &'a ModelParams,
    tape: Tape,
    vars: ParamVars,
    mark: usize,
}

impl<'a> Evaluator<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        let mut tape = Tape::new();
        let vars = ParamVars::new(&mut tape, &params.theta, &params.layout);
        let mark = tape.len();
        Self {
            params,
            tape,
            vars,
            mark,
        }
    }

    /// Logits and feature vector of one input.
    pub fn run(&mut self, x: &PreprocessedSequence) -> Result<(Vec<f64>, Vec<f64>)> {
        self.tape.truncate(self.mark);
        let out = build_forward(&mut self.tape, &self.vars, &self.params.config, &x.x, None)?;
        let logits = self.tape.value(out.logits).data.clone();
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok((logits, self.tape.value(out.feature).data.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_width: 6,
            mlp_hidden: 8,
            width: 8,
            heads: 2,
            n_blocks: 1,
            n_classes: 3,
            dropout: 0.1,
        }
    }

    fn input(rows: usize, cols: usize, s: f64) -> PreprocessedSequence {
        PreprocessedSequence {
            x: Mat::from_vec(rows, cols, (0..rows * cols).map(|i| ((i as f64 + s) * 0.37).sin()).collect()),
            temporal_len: 2,
        }
    }

    #[test]
    fn layout_counts() {
        let cfg = ModelConfig::standard(64);
        let l = ParamLayout::new(&cfg);
        let expected = (64 * 128 + 128) + (128 * 64 + 64) + 2 * (8 * 3 * 64 + 2 * (64 * 64 + 64)) + (64 * 10 + 10);
        assert_eq!(l.total, expected);
        assert_eq!(l.predictor.bias.range().end, l.total);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = ModelParams::init(tiny(), 3).unwrap();
        assert_eq!(a, ModelParams::init(tiny(), 3).unwrap());
        assert_ne!(a, ModelParams::init(tiny(), 4).unwrap());
        for (spec, fi, fo) in a.layout.weights() {
            let bound = (6.0 / (fi + fo) as f64).sqrt();
            assert!(a.view(spec).iter().all(|v| v.abs() <= bound));
        }
        assert!(a.view(a.layout.fc1.bias).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_predictor_gives_uniform() {
        let mut p = ModelParams::init(tiny(), 1).unwrap();
        let pr = p.layout.predictor;
        p.view_mut(pr.weight).fill(0.0);
        let out = forward(&p, &input(4, 6, 0.0), Mode::Eval, None).unwrap();
        for v in out.probs.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let p = ModelParams::init(tiny(), 2).unwrap();
        let out = forward(&p, &input(3, 6, 1.0), Mode::Eval, None).unwrap();
        for block in &out.attention {
            for m in block {
                for r in 0..m.rows {
                    assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn downscaled_limits() {
        let p = ModelParams::init(tiny(), 5).unwrap();
        let x = input(5, 6, 2.0);
        let plain = forward(&p, &x, Mode::Eval, None).unwrap().probs;
        assert_eq!(forward_downscaled(&p, &x, 1.0).unwrap(), plain);
        let flat = forward_downscaled(&p, &x, 1e6).unwrap();
        assert!(flat.as_slice().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-3));
        assert!(forward_downscaled(&p, &x, 0.5).is_err());
    }

    #[test]
    fn feature_consistent_with_logits() {
        let p = ModelParams::init(tiny(), 8).unwrap();
        let x = input(4, 6, 3.0);
        let out = forward(&p, &x, Mode::Eval, None).unwrap();
        assert_eq!(extract_feature(&p, &x).unwrap(), out.feature);
        assert_eq!(out.feature.len(), 8);
        let (logits, _) = predict_from_sequence(&p, &out.sequence).unwrap();
        for (a, b) in logits.iter().zip(&out.logits) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = ModelParams::init(tiny(), 8).unwrap();
        assert!(matches!(
            forward(&p, &input(4, 5, 0.0), Mode::Eval, None),
            Err(Error::Shape(_))
        ));
        assert!(ModelParams::zeros(ModelConfig { heads: 3, ..tiny() }).is_err());
    }

    #[test]
    fn train_mode_dropout_changes_output_eval_does_not() {
        let p = ModelParams::init(tiny(), 8).unwrap();
        let x = input(4, 6, 3.0);
        let mut r1 = seed::rng(1, 0);
        let a = forward(&p, &x, Mode::Train, Some(&mut r1)).unwrap();
        let e1 = forward(&p, &x, Mode::Eval, None).unwrap();
        let mut r2 = seed::rng(1, 0);
        let e2 = forward(&p, &x, Mode::Eval, Some(&mut r2)).unwrap();
        assert_ne!(a.logits, e1.logits);
        assert_eq!(e1.logits, e2.logits);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = ModelParams::init(tiny(), 9).unwrap();
        p.save(dir.path()).unwrap();
        let q = ModelParams::load(dir.path()).unwrap();
        assert_eq!(q.config, p.config);
        for (a, b) in p.theta.iter().zip(&q.theta) {
            assert_eq!(*a as f32, *b as f32);
        }
        let json: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("model.json")).unwrap()).unwrap();
        assert_eq!(json["n_params"], p.theta.len());
    }
}
