//! Toy environments, the frozen embedding and the offline transition format.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use thiserror::Error;

use crate::rng::{self, Stream};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub ds: usize,
    pub da: usize,
    pub rows: Vec<Transition>,
    pub meta: BTreeMap<String, String>,
}

impl Dataset {
    pub fn new(ds: usize, da: usize) -> Self {
        Self {
            ds,
            da,
            rows: Vec::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        for (expected, got) in [(self.ds, t.s.len()), (self.da, t.a.len()), (self.ds, t.s_next.len())] {
            if expected != got {
                return Err(DataError::DimensionMismatch { expected, got });
            }
        }
        let finite = t.s.iter().chain(&t.a).chain(&t.s_next).all(|v| v.is_finite()) && t.r.is_finite();
        if !finite {
            return Err(DataError::Invalid("non-finite transition".into()));
        }
        self.rows.push(t);
        Ok(())
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    fn matrix(&self, width: usize, f: impl Fn(&Transition) -> &[f64]) -> Array2<f64> {
        let mut m = Array2::zeros((self.rows.len(), width));
        for (i, t) in self.rows.iter().enumerate() {
            m.row_mut(i).assign(&ArrayView1::from(f(t)));
        }
        m
    }

    pub fn states(&self) -> Array2<f64> {
        self.matrix(self.ds, |t| &t.s)
    }

    pub fn actions(&self) -> Array2<f64> {
        self.matrix(self.da, |t| &t.a)
    }

    pub fn next_states(&self) -> Array2<f64> {
        self.matrix(self.ds, |t| &t.s_next)
    }

    pub fn rewards(&self) -> Array1<f64> {
        self.rows.iter().map(|t| t.r).collect()
    }

    pub fn dones(&self) -> Vec<bool> {
        self.rows.iter().map(|t| t.done).collect()
    }

    /// Row subset in the given order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            ds: self.ds,
            da: self.da,
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            meta: self.meta.clone(),
        }
    }
}

/// Piecewise toy dynamics; branches are tested in the listed order.
pub fn toy_dynamics(s: f64, a: f64) -> f64 {
    if s.abs() < 0.5 && a.abs() < 0.5 {
        (-a).sin() + 1.0
    } else if s >= 0.5 {
        1.0
    } else if s <= -0.5 {
        -1.0
    } else {
        0.0
    }
}

pub fn gen_didactic_dataset(n: usize, seed: u64, sigma: f64) -> Result<Dataset> {
    if !(sigma >= 0.0) {
        return Err(DataError::Invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    let mut rng = rng::substream(seed, "didactic", 0);
    let mut d = Dataset::new(1, 1);
    d.set_meta("generator", "didactic");
    d.set_meta("seed", seed);
    d.set_meta("sigma", sigma);
    for _ in 0..n {
        let s = rng::normal(&mut rng);
        let a = rng::normal(&mut rng);
        let noise = rng::normal(&mut rng);
        d.rows.push(Transition {
            s: vec![s],
            a: vec![a],
            r: 0.0,
            s_next: vec![toy_dynamics(s, a) + sigma * noise],
            done: false,
        });
    }
    Ok(d)
}

/// Noiseless transitions on a `resolution x resolution` grid over `[-1,1]^2`,
/// state-major.
pub fn gen_eval_grid(resolution: usize) -> Result<Dataset> {
    if resolution < 2 {
        return Err(DataError::Invalid(format!("resolution must be >= 2, got {resolution}")));
    }
    let step = 2.0 / (resolution - 1) as f64;
    let mut d = Dataset::new(1, 1);
    d.set_meta("generator", "grid");
    d.set_meta("resolution", resolution);
    for i in 0..resolution {
        let s = -1.0 + step * i as f64;
        for j in 0..resolution {
            let a = -1.0 + step * j as f64;
            d.rows.push(Transition {
                s: vec![s],
                a: vec![a],
                r: 0.0,
                s_next: vec![toy_dynamics(s, a)],
                done: false,
            });
        }
    }
    Ok(d)
}

/// Frozen two-layer random map `tanh(W2 tanh(W1 x + b1) + b2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

impl Embedding {
    /// Gaussian `N(0, 1/fan_in)` weights and zero biases; the hidden width
    /// equals `output_dim`.
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || output_dim <= input_dim {
            return Err(DataError::Invalid(format!(
                "embedding needs 0 < input_dim < output_dim, got {input_dim} -> {output_dim}"
            )));
        }
        let mut rng = rng::substream(seed, "embedding", input_dim as u64 * 1000 + output_dim as u64);
        let gauss = |rows: usize, cols: usize, rng: &mut Stream| {
            let scale = (1.0 / cols as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| scale * rng::normal(rng))
        };
        let w1 = gauss(output_dim, input_dim, &mut rng);
        let w2 = gauss(output_dim, output_dim, &mut rng);
        Ok(Self {
            w1,
            b1: Array1::zeros(output_dim),
            w2,
            b2: Array1::zeros(output_dim),
        })
    }

    pub fn from_parts(w1: Array2<f64>, b1: Array1<f64>, w2: Array2<f64>, b2: Array1<f64>) -> Result<Self> {
        if w1.nrows() != b1.len() || w2.ncols() != w1.nrows() || w2.nrows() != b2.len() {
            return Err(DataError::Invalid("embedding layer shapes disagree".into()));
        }
        Ok(Self { w1, b1, w2, b2 })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(DataError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let row = ArrayView2::from_shape((1, x.len()), x).expect("contiguous slice");
        Ok(self.embed_batch(row)?.into_raw_vec_and_offset().0)
    }

    /// Row-wise embedding of a batch.
    pub fn embed_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(DataError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let h = (x.dot(&self.w1.t()) + &self.b1).mapv(f64::tanh);
        Ok((h.dot(&self.w2.t()) + &self.b2).mapv(f64::tanh))
    }
}

/// Pair of embeddings lifting a low-dimensional dataset.
#[derive(Clone, Debug)]
pub struct EmbeddedSpace {
    pub state: Embedding,
    pub action: Embedding,
}

impl EmbeddedSpace {
    pub fn new(ds: usize, da: usize, state_dim: usize, action_dim: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            state: Embedding::new(ds, state_dim, rng::fork_seed(&mut rng::substream(seed, "embed-state", 0)))?,
            action: Embedding::new(da, action_dim, rng::fork_seed(&mut rng::substream(seed, "embed-action", 0)))?,
        })
    }

    pub fn lift(&self, d: &Dataset) -> Result<Dataset> {
        let mut out = Dataset::new(self.state.output_dim(), self.action.output_dim());
        out.meta = d.meta.clone();
        out.set_meta("embedded", format!("{}->{}", d.ds, self.state.output_dim()));
        for t in &d.rows {
            out.push(Transition {
                s: self.state.embed(&t.s)?,
                a: self.action.embed(&t.a)?,
                r: t.r,
                s_next: self.state.embed(&t.s_next)?,
                done: t.done,
            })?;
        }
        Ok(out)
    }
}

pub const CLIFF_ACTION_BOUND: f64 = 0.2;

pub fn cliffchain_step(s: f64, a: f64) -> (f64, f64, bool) {
    let a = a.clamp(-CLIFF_ACTION_BOUND, CLIFF_ACTION_BOUND);
    let s_next = if s < 0.5 && 0.5 <= s + a && a > 0.15 {
        -1.0
    } else {
        (s + a).clamp(-1.0, 1.0)
    };
    let done = s_next >= 0.9;
    let r = if done { s_next + 1.0 } else { s_next };
    (s_next, r, done)
}

pub fn gen_cliff_offline(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(DataError::Invalid("cliff dataset needs n >= 1".into()));
    }
    let env = CliffChain::default();
    let mut rng = rng::substream(seed, "cliff-offline", 0);
    let mut d = Dataset::new(1, 1);
    d.set_meta("generator", "cliffchain");
    d.set_meta("seed", seed);
    let mut s = env.reset(&mut rng);
    let mut t = 0;
    while d.len() < n {
        let a = rng::uniform(&mut rng, -0.05, 0.10);
        let (s_next, r, done) = cliffchain_step(s[0], a);
        d.rows.push(Transition {
            s: s.clone(),
            a: vec![a],
            r,
            s_next: vec![s_next],
            done,
        });
        t += 1;
        if done || t >= env.max_steps {
            s = env.reset(&mut rng);
            t = 0;
        } else {
            s = vec![s_next];
        }
    }
    Ok(d)
}

/// Environment interface for policy evaluation.
pub trait Env: Sync {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn action_bound(&self) -> f64;
    fn max_steps(&self) -> usize;
    fn reset(&self, rng: &mut Stream) -> Vec<f64>;
    fn step(&self, s: &[f64], a: &[f64]) -> (Vec<f64>, f64, bool);
    /// Reward and termination of an arbitrary (possibly model-predicted) transition.
    fn reward(&self, s: &[f64], a: &[f64], s_next: &[f64]) -> (f64, bool);
}

#[derive(Clone, Debug)]
pub struct CliffChain {
    pub max_steps: usize,
}

impl Default for CliffChain {
    fn default() -> Self {
        Self { max_steps: 100 }
    }
}

impl Env for CliffChain {
    fn state_dim(&self) -> usize {
        1
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn action_bound(&self) -> f64 {
        CLIFF_ACTION_BOUND
    }

    fn max_steps(&self) -> usize {
        self.max_steps
    }

    fn reset(&self, rng: &mut Stream) -> Vec<f64> {
        vec![rng::uniform(rng, -1.0, 0.0)]
    }

    fn step(&self, s: &[f64], a: &[f64]) -> (Vec<f64>, f64, bool) {
        let (sn, r, done) = cliffchain_step(s[0], a[0]);
        (vec![sn], r, done)
    }

    fn reward(&self, _s: &[f64], _a: &[f64], s_next: &[f64]) -> (f64, bool) {
        let done = s_next[0] >= 0.9;
        (if done { s_next[0] + 1.0 } else { s_next[0] }, done)
    }
}

fn header(ds: usize, da: usize) -> Vec<String> {
    let mut h: Vec<String> = (0..ds).map(|i| format!("s{i}")).collect();
    h.extend((0..da).map(|i| format!("a{i}")));
    h.push("r".into());
    h.extend((0..ds).map(|i| format!("sp{i}")));
    h.push("done".into());
    h
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (k, v) in &d.meta {
        writeln!(w, "#{k}={v}")?;
    }
    writeln!(w, "{}", header(d.ds, d.da).join(","))?;
    let mut line = String::new();
    for t in &d.rows {
        line.clear();
        for v in t.s.iter().chain(&t.a).chain(std::iter::once(&t.r)).chain(&t.s_next) {
            line.push_str(&format!("{v:.16e},"));
        }
        line.push(if t.done { '1' } else { '0' });
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut meta = BTreeMap::new();
    let mut dims: Option<(usize, usize)> = None;
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx as u64 + 1;
        let line = line?;
        let parse_err = |msg: String| DataError::Parse { line: line_no, msg };
        if let Some(kv) = line.strip_prefix('#') {
            let (k, v) = kv.split_once('=').ok_or_else(|| parse_err("meta line without '='".into()))?;
            meta.insert(k.trim().to_string(), v.trim().to_string());
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let Some((ds, da)) = dims else {
            let ds = fields.iter().filter(|f| f.starts_with("sp")).count();
            let da = fields.iter().filter(|f| f.starts_with('a')).count();
            if ds == 0 || da == 0 || fields != header(ds, da) {
                return Err(parse_err(format!("malformed header `{line}`")));
            }
            dims = Some((ds, da));
            continue;
        };
        let width = 2 * ds + da + 2;
        if fields.len() != width {
            return Err(parse_err(format!("expected {width} columns, found {}", fields.len())));
        }
        let mut nums = Vec::with_capacity(width - 1);
        for f in &fields[..width - 1] {
            let v: f64 = f.parse().map_err(|_| parse_err(format!("bad number `{f}`")))?;
            nums.push(v);
        }
        let done = match fields[width - 1] {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(format!("done must be 0 or 1, found `{other}`"))),
        };
        rows.push(Transition {
            s: nums[..ds].to_vec(),
            a: nums[ds..ds + da].to_vec(),
            r: nums[ds + da],
            s_next: nums[ds + da + 1..].to_vec(),
            done,
        });
    }
    let (ds, da) = dims.ok_or(DataError::Parse {
        line: 0,
        msg: "missing header".into(),
    })?;
    Ok(Dataset { ds, da, rows, meta })
}
