//! Small reverse-mode autodiff over dense row-major matrices, with the layers
//! the agent networks need: dense, layer norm, multi-head self-attention
//! encoder blocks, and Adam.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters live in
//! a [`ParamStore`] and are read into the graph on first use; `backward`
//! returns their gradients as a [`Gradients`] value that can be accumulated
//! across passes before an optimizer step.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use rand::Rng;
use thiserror::Error;

pub const CHECKPOINT_FORMAT: &str = "heatlab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const LEAKY_SLOPE: f64 = 0.01;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("non-finite gradient for parameter {0}")]
    NonFinite(String),
    #[error("checkpoint version mismatch: file has {found}, this build reads {expected}")]
    Version { found: String, expected: String },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid network config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NeuralError> {
        if data.len() != rows * cols {
            return Err(NeuralError::Shape { op: "tensor", left: (rows, cols), right: (data.len(), 1) });
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![value] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NeuralError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NeuralError::Shape { op: "from_rows", left: (rows.len(), cols), right: (1, r.len()) });
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor { rows: rows.len(), cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
        Tensor { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a {:?} tensor", self.shape());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, NeuralError> {
        if self.cols != other.rows {
            return Err(NeuralError::Shape { op: "matmul", left: self.shape(), right: other.shape() });
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        matmul_into(self, other, &mut out);
        Ok(out)
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape(), other.shape());
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn sum_rows(&self) -> Tensor {
        let mut out = Tensor::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, v) in out.data.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }
}

fn matmul_into(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    let (n, k, m) = (a.rows, a.cols, b.cols);
    for i in 0..n {
        let out_row = &mut out.data[i * m..(i + 1) * m];
        for p in 0..k {
            let x = a.data[i * k + p];
            if x == 0.0 {
                continue;
            }
            let b_row = &b.data[p * m..(p + 1) * m];
            for (o, &y) in out_row.iter_mut().zip(b_row) {
                *o += x * y;
            }
        }
    }
}

/// `aᵀ·b` without materialising the transpose.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Tensor::zeros(k, m);
    for i in 0..n {
        let b_row = &b.data[i * m..(i + 1) * m];
        for p in 0..k {
            let x = a.data[i * k + p];
            if x == 0.0 {
                continue;
            }
            let out_row = &mut out.data[p * m..(p + 1) * m];
            for (o, &y) in out_row.iter_mut().zip(b_row) {
                *o += x * y;
            }
        }
    }
    out
}

/// `a·bᵀ`.
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows, a.cols, b.rows);
    let mut out = Tensor::zeros(n, m);
    for i in 0..n {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..m {
            let b_row = &b.data[j * k..(j + 1) * k];
            out.data[i * m + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    out
}

pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// `|ρ − 𝟙(x < 0)|·x²`.
pub fn expectile(x: f64, rho: f64) -> f64 {
    let w = if x < 0.0 { 1.0 - rho } else { rho };
    w * x * x
}

pub type ParamId = usize;

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Copies values pairwise; used for hard target updates.
    pub fn copy_params(&mut self, from: &[ParamId], to: &[ParamId]) {
        assert_eq!(from.len(), to.len(), "parameter lists differ in length");
        for (&f, &t) in from.iter().zip(to) {
            assert_eq!(self.tensors[f].shape(), self.tensors[t].shape(), "{} vs {}", self.names[f], self.names[t]);
            let src = self.tensors[f].data.clone();
            self.tensors[t].data.copy_from_slice(&src);
        }
    }

    /// Text header (format line, metadata, manifest) followed by the values
    /// as little-endian f64 in manifest order.
    pub fn write_checkpoint<W: Write>(&self, meta: &BTreeMap<String, String>, out: &mut W) -> Result<(), NeuralError> {
        let mut header = format!("{CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}\n");
        for (k, v) in meta {
            if k.contains(char::is_whitespace) || v.contains(char::is_whitespace) {
                return Err(NeuralError::Checkpoint(format!("metadata entry {k:?} contains whitespace")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        for (name, t) in self.names.iter().zip(&self.tensors) {
            header.push_str(&format!("tensor {name} {} {}\n", t.rows, t.cols));
        }
        header.push_str("end\n");
        out.write_all(header.as_bytes())?;
        for t in &self.tensors {
            for v in &t.data {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<(ParamStore, BTreeMap<String, String>), NeuralError> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let mut pos = 0;
        let next_line = |pos: &mut usize| -> Result<String, NeuralError> {
            let rest = &bytes[*pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| NeuralError::Checkpoint("header ends early".into()))?;
            let line = std::str::from_utf8(&rest[..end])
                .map_err(|_| NeuralError::Checkpoint("header is not UTF-8".into()))?
                .to_string();
            *pos += end + 1;
            Ok(line)
        };
        let first = next_line(&mut pos)?;
        let expected = format!("{CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}");
        if first != expected {
            return Err(NeuralError::Version { found: first, expected });
        }
        let mut meta = BTreeMap::new();
        let mut manifest = Vec::new();
        loop {
            let line = next_line(&mut pos)?;
            let parts: Vec<&str> = line.split(' ').collect();
            match parts.as_slice() {
                ["end"] => break,
                ["meta", k, v] => {
                    meta.insert(k.to_string(), v.to_string());
                }
                ["tensor", name, r, c] => {
                    let parse = |s: &str| s.parse::<usize>().map_err(|_| NeuralError::Checkpoint(format!("bad shape in {line:?}")));
                    manifest.push((name.to_string(), parse(r)?, parse(c)?));
                }
                _ => return Err(NeuralError::Checkpoint(format!("unexpected header line {line:?}"))),
            }
        }
        let total: usize = manifest.iter().map(|(_, r, c)| r * c).sum();
        let body = &bytes[pos..];
        if body.len() != total * 8 {
            return Err(NeuralError::Checkpoint(format!("expected {} value bytes, found {}", total * 8, body.len())));
        }
        let mut store = ParamStore::new();
        let mut chunks = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        for (name, r, c) in manifest {
            if store.id(&name).is_some() {
                return Err(NeuralError::Checkpoint(format!("duplicate tensor {name}")));
            }
            let data: Vec<f64> = chunks.by_ref().take(r * c).collect();
            store.add(name, Tensor { rows: r, cols: c, data });
        }
        Ok((store, meta))
    }

    /// Overwrites values from `other`, which must have the same manifest.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<(), NeuralError> {
        if self.names != other.names {
            return Err(NeuralError::Checkpoint("tensor manifest does not match this model".into()));
        }
        for (mine, theirs) in self.tensors.iter().zip(&other.tensors) {
            if mine.shape() != theirs.shape() {
                return Err(NeuralError::Checkpoint("tensor shapes do not match this model".into()));
            }
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }
}

/// Per-parameter gradient slots; `None` where a parameter was not touched.
#[derive(Clone, Debug)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn empty(n_params: usize) -> Self {
        Gradients { slots: vec![None; n_params] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots[id].as_ref()
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (mine, theirs) in self.slots.iter_mut().zip(&other.slots) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.add_assign(t),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.slots.iter_mut().flatten() {
            t.data.iter_mut().for_each(|v| *v *= k);
        }
    }

    /// Drops every slot not listed in `keep`.
    pub fn retain(&mut self, keep: &[ParamId]) {
        let mut mask = vec![false; self.slots.len()];
        keep.iter().for_each(|&k| mask[k] = true);
        for (slot, keep) in self.slots.iter_mut().zip(mask) {
            if !keep {
                *slot = None;
            }
        }
    }

    pub fn touched(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.slots.iter().enumerate().filter(|(_, s)| s.is_some()).map(|(i, _)| i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    LayerNorm { x: Var, xhat: Tensor, inv_std: Vec<f64> },
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Var, Var),
    Slice(Var, usize),
    Gather(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Expectile(Var, f64),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Tape of one forward pass over a parameter store.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph { store, nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) {
        if self.shape(a) != self.shape(b) {
            panic!("{}", NeuralError::Shape { op, left: self.shape(a), right: self.shape(b) });
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b)).unwrap_or_else(|e| panic!("{e}"));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ar, ac) = self.shape(a);
        if self.shape(row) != (1, ac) {
            panic!("{}", NeuralError::Shape { op: "add_row", left: (ar, ac), right: self.shape(row) });
        }
        let mut out = self.value(a).clone();
        let b = self.value(row).data.clone();
        for r in 0..ar {
            for (o, v) in out.data[r * ac..(r + 1) * ac].iter_mut().zip(&b) {
                *o += v;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 × c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (ar, ac) = self.shape(a);
        if self.shape(row) != (1, ac) {
            panic!("{}", NeuralError::Shape { op: "mul_row", left: (ar, ac), right: self.shape(row) });
        }
        let mut out = self.value(a).clone();
        let g = self.value(row).data.clone();
        for r in 0..ar {
            for (o, v) in out.data[r * ac..(r + 1) * ac].iter_mut().zip(&g) {
                *o *= v;
            }
        }
        self.push(out, Op::MulRow(a, row))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("add", a, b);
        let out = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("sub", a, b);
        let out = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("mul", a, b);
        let out = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x + k);
        self.push(out, Op::AddScalar(a))
    }

    pub fn leaky_relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(leaky_relu);
        self.push(out, Op::LeakyRelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    /// Per-row normalisation to zero mean and unit variance, no affine part.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (c, v) in row.iter().enumerate() {
                xhat.data[r * cols + c] = (v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(xhat.clone(), Op::LayerNorm { x: a, xhat, inv_std })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            out.data[r * x.cols..(r + 1) * x.cols].copy_from_slice(&softmax_row(x.row(r)));
        }
        self.push(out, Op::Softmax(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            out.data[r * x.cols..(r + 1) * x.cols].copy_from_slice(&log_softmax_row(x.row(r)));
        }
        self.push(out, Op::LogSoftmax(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ar != br {
            panic!("{}", NeuralError::Shape { op: "concat_cols", left: (ar, ac), right: (br, bc) });
        }
        let mut out = Tensor::zeros(ar, ac + bc);
        for r in 0..ar {
            out.data[r * (ac + bc)..r * (ac + bc) + ac].copy_from_slice(self.value(a).row(r));
            out.data[r * (ac + bc) + ac..(r + 1) * (ac + bc)].copy_from_slice(self.value(b).row(r));
        }
        self.push(out, Op::Concat(a, b))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (ar, ac) = self.shape(a);
        assert!(start + len <= ac, "slice {start}+{len} beyond {ac} columns");
        let mut out = Tensor::zeros(ar, len);
        for r in 0..ar {
            out.data[r * len..(r + 1) * len].copy_from_slice(&self.value(a).row(r)[start..start + len]);
        }
        self.push(out, Op::Slice(a, start))
    }

    /// Picks column `idx[r]` from each row, giving an `n × 1` column.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        assert_eq!(idx.len(), x.rows, "gather needs one index per row");
        let data = idx.iter().enumerate().map(|(r, &c)| x.get(r, c)).collect();
        let out = Tensor { rows: x.rows, cols: 1, data };
        self.push(out, Op::Gather(a, idx.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data.iter().sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::scalar(x.data.iter().sum::<f64>() / x.data.len() as f64);
        self.push(out, Op::Mean(a))
    }

    pub fn expectile(&mut self, a: Var, rho: f64) -> Var {
        let out = self.value(a).map(|x| expectile(x, rho));
        self.push(out, Op::Expectile(a, rho))
    }

    /// Reverse pass from a scalar; returns gradients of every parameter used.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::empty(self.store.len());

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.slots[*id] = Some(g),
                Op::MatMul(a, b) => {
                    let ga = matmul_nt(&g, self.value(*b));
                    let gb = matmul_tn(self.value(*a), &g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, g.sum_rows());
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let x = self.value(*a);
                    let w = self.value(*row);
                    let mut ga = g.clone();
                    let mut gw = Tensor::zeros(1, w.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            let k = r * g.cols + c;
                            ga.data[k] = g.data[k] * w.data[c];
                            gw.data[c] += g.data[k] * x.data[k];
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *row, gw);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|v| -v));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip(self.value(*b), |d, y| d * y);
                    let gb = g.zip(self.value(*a), |d, x| d * x);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g.map(|v| v * k)),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::LeakyRelu(a) => {
                    let ga = g.zip(self.value(*a), |d, x| if x > 0.0 { d } else { LEAKY_SLOPE * d });
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => acc(&mut grads, *a, g.zip(y, |d, e| d * e)),
                Op::Log(a) => acc(&mut grads, *a, g.zip(self.value(*a), |d, x| d / x)),
                Op::Square(a) => acc(&mut grads, *a, g.zip(self.value(*a), |d, x| 2.0 * d * x)),
                Op::LayerNorm { x, xhat, inv_std } => {
                    let cols = g.cols;
                    let mut gx = Tensor::zeros(g.rows, cols);
                    for r in 0..g.rows {
                        let dy = g.row(r);
                        let xh = xhat.row(r);
                        let mean_dy = dy.iter().sum::<f64>() / cols as f64;
                        let mean_dy_xh = dy.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            gx.data[r * cols + c] = inv_std[r] * (dy[c] - mean_dy - xh[c] * mean_dy_xh);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Softmax(a) => {
                    let mut ga = Tensor::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(d, p)| d * p).sum();
                        for c in 0..g.cols {
                            let k = r * g.cols + c;
                            ga.data[k] = y.data[k] * (g.data[k] - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    let mut ga = Tensor::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let total: f64 = g.row(r).iter().sum();
                        for c in 0..g.cols {
                            let k = r * g.cols + c;
                            ga.data[k] = g.data[k] - y.data[k].exp() * total;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Concat(a, b) => {
                    let ac = self.shape(*a).1;
                    let bc = self.shape(*b).1;
                    let mut ga = Tensor::zeros(g.rows, ac);
                    let mut gb = Tensor::zeros(g.rows, bc);
                    for r in 0..g.rows {
                        ga.data[r * ac..(r + 1) * ac].copy_from_slice(&g.row(r)[..ac]);
                        gb.data[r * bc..(r + 1) * bc].copy_from_slice(&g.row(r)[ac..]);
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Slice(a, start) => {
                    let (ar, ac) = self.shape(*a);
                    let mut ga = Tensor::zeros(ar, ac);
                    for r in 0..ar {
                        ga.data[r * ac + start..r * ac + start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Gather(a, idx) => {
                    let (ar, ac) = self.shape(*a);
                    let mut ga = Tensor::zeros(ar, ac);
                    for (r, &c) in idx.iter().enumerate() {
                        ga.data[r * ac + c] = g.data[r];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (ar, ac) = self.shape(*a);
                    acc(&mut grads, *a, Tensor::filled(ar, ac, g.item()));
                }
                Op::Mean(a) => {
                    let (ar, ac) = self.shape(*a);
                    acc(&mut grads, *a, Tensor::filled(ar, ac, g.item() / (ar * ac) as f64));
                }
                Op::Expectile(a, rho) => {
                    let ga = g.zip(self.value(*a), |d, x| {
                        let w = if x < 0.0 { 1.0 - rho } else { *rho };
                        2.0 * w * x * d
                    });
                    acc(&mut grads, *a, ga);
                }
            }
        }
        out
    }
}

/// Affine layer `x·W + b` with `W: in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Dense {
    /// Weights uniform in ±1/√fan_in, zero bias.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input_dim: usize, output_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input_dim as f64).sqrt();
        let weight = store.add(format!("{name}.w"), Tensor::uniform(input_dim, output_dim, bound, rng));
        let bias = store.add(format!("{name}.b"), Tensor::zeros(1, output_dim));
        Dense { weight, bias, input_dim, output_dim }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var, NeuralError> {
        let (r, c) = g.shape(x);
        if c != self.input_dim {
            return Err(NeuralError::Shape { op: "dense", left: (r, c), right: (self.input_dim, self.output_dim) });
        }
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let xw = g.matmul(x, w);
        Ok(g.add_row(xw, b))
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Layer normalisation with learned gain and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::filled(1, dim, 1.0));
        let shift = store.add(format!("{name}.shift"), Tensor::zeros(1, dim));
        LayerNorm { gain, shift }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let n = g.layer_norm(x);
        let gain = g.param(self.gain);
        let shift = g.param(self.shift);
        let scaled = g.mul_row(n, gain);
        g.add_row(scaled, shift)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gain, self.shift]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { layers: 2, model_dim: 32, heads: 2, ff_dim: 64 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), NeuralError> {
        if self.model_dim == 0 || self.heads == 0 || self.ff_dim == 0 {
            return Err(NeuralError::Config("encoder sizes must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(NeuralError::Config(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct EncoderBlock {
    norm_attn: LayerNorm,
    query: Dense,
    key: Dense,
    value: Dense,
    out: Dense,
    norm_ff: LayerNorm,
    ff_in: Dense,
    ff_out: Dense,
}

/// Pre-norm transformer encoder without positional encoding, so it is
/// equivariant to row permutations of its input.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    input: Dense,
    blocks: Vec<EncoderBlock>,
    final_norm: LayerNorm,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        config: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self, NeuralError> {
        config.validate()?;
        let d = config.model_dim;
        let input = Dense::new(store, &format!("{name}.input"), input_dim, d, rng);
        let blocks = (0..config.layers)
            .map(|l| {
                let p = format!("{name}.block{l}");
                EncoderBlock {
                    norm_attn: LayerNorm::new(store, &format!("{p}.norm_attn"), d),
                    query: Dense::new(store, &format!("{p}.query"), d, d, rng),
                    key: Dense::new(store, &format!("{p}.key"), d, d, rng),
                    value: Dense::new(store, &format!("{p}.value"), d, d, rng),
                    out: Dense::new(store, &format!("{p}.out"), d, d, rng),
                    norm_ff: LayerNorm::new(store, &format!("{p}.norm_ff"), d),
                    ff_in: Dense::new(store, &format!("{p}.ff_in"), d, config.ff_dim, rng),
                    ff_out: Dense::new(store, &format!("{p}.ff_out"), config.ff_dim, d, rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(store, &format!("{name}.final_norm"), d);
        Ok(Encoder { config: config.clone(), input, blocks, final_norm })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var, NeuralError> {
        let mut h = self.input.forward(g, x)?;
        let dh = self.config.model_dim / self.config.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for block in &self.blocks {
            let n = block.norm_attn.forward(g, h);
            let q = block.query.forward(g, n)?;
            let k = block.key.forward(g, n)?;
            let v = block.value.forward(g, n)?;
            let mut heads: Option<Var> = None;
            for head in 0..self.config.heads {
                let qh = g.slice_cols(q, head * dh, dh);
                let kh = g.slice_cols(k, head * dh, dh);
                let vh = g.slice_cols(v, head * dh, dh);
                let kt = g.transpose(kh);
                let scores = g.matmul(qh, kt);
                let scores = g.scale(scores, scale);
                let attn = g.softmax_rows(scores);
                let oh = g.matmul(attn, vh);
                heads = Some(match heads {
                    None => oh,
                    Some(prev) => g.concat_cols(prev, oh),
                });
            }
            let attended = block.out.forward(g, heads.expect("at least one head"))?;
            h = g.add(h, attended);
            let n = block.norm_ff.forward(g, h);
            let f = block.ff_in.forward(g, n)?;
            let f = g.leaky_relu(f);
            let f = block.ff_out.forward(g, f)?;
            h = g.add(h, f);
        }
        Ok(self.final_norm.forward(g, h))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = self.input.params();
        for b in &self.blocks {
            for p in [&b.norm_attn, &b.norm_ff] {
                out.extend(p.params());
            }
            for d in [&b.query, &b.key, &b.value, &b.out, &b.ff_in, &b.ff_out] {
                out.extend(d.params());
            }
        }
        out.extend(self.final_norm.params());
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction and a step counter per parameter, so parameters
/// shared between trainers are corrected by their own update count.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    t: Vec<u64>,
}

impl Adam {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Adam { config, m: vec![None; n_params], v: vec![None; n_params], t: vec![0; n_params] }
    }

    pub fn steps(&self, id: ParamId) -> u64 {
        self.t[id]
    }

    /// Updates every parameter with a gradient. Nothing is written if any
    /// gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<(), NeuralError> {
        for id in grads.touched() {
            if !grads.slots[id].as_ref().expect("touched").is_finite() {
                return Err(NeuralError::NonFinite(store.name(id).to_string()));
            }
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        for id in grads.touched() {
            let g = grads.slots[id].as_ref().expect("touched");
            let (rows, cols) = g.shape();
            let m = self.m[id].get_or_insert_with(|| Tensor::zeros(rows, cols));
            let v = self.v[id].get_or_insert_with(|| Tensor::zeros(rows, cols));
            self.t[id] += 1;
            let t = self.t[id] as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let p = store.get_mut(id);
            for k in 0..g.data.len() {
                m.data[k] = beta1 * m.data[k] + (1.0 - beta1) * g.data[k];
                v.data[k] = beta2 * v.data[k] + (1.0 - beta2) * g.data[k] * g.data[k];
                let m_hat = m.data[k] / c1;
                let v_hat = v.data[k] / c2;
                p.data[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_dense_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let d = Dense::new(&mut store, "d", 3, 3, &mut rng);
        *store.get_mut(d.weight) = Tensor::identity(3);
        let mut g = Graph::new(&store);
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.5], vec![0.0, 4.0, -1.0]]).unwrap();
        let xv = g.input(x.clone());
        let y = d.forward(&mut g, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn bias_gradient_of_sum_is_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let d = Dense::new(&mut store, "d", 4, 2, &mut rng);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::uniform(5, 4, 1.0, &mut rng));
        let y = d.forward(&mut g, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s);
        // five rows each contribute one
        assert_eq!(grads.get(d.bias).unwrap(), &Tensor::filled(1, 2, 5.0));
        let mut g1 = Graph::new(&store);
        let x1 = g1.input(Tensor::uniform(1, 4, 1.0, &mut rng));
        let y1 = d.forward(&mut g1, x1).unwrap();
        let s1 = g1.sum(y1);
        assert_eq!(g1.backward(s1).get(d.bias).unwrap(), &Tensor::filled(1, 2, 1.0));
    }

    #[test]
    fn dense_rejects_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let d = Dense::new(&mut store, "d", 4, 2, &mut rng);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(2, 3));
        assert!(matches!(d.forward(&mut g, x), Err(NeuralError::Shape { .. })));
    }

    #[test]
    fn softmax_basics() {
        let p = softmax_row(&[2.0; 5]);
        assert!(p.iter().all(|v| (v - 0.2).abs() < 1e-15));
        let p = softmax_row(&[1.0, -3.0, 0.5, 8.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let lp = log_softmax_row(&[1.0, -3.0, 0.5, 8.0]);
        for (a, b) in p.iter().zip(lp) {
            assert!((a.ln() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn expectile_examples() {
        assert_eq!(expectile(2.0, 0.5), 2.0);
        assert!((expectile(-1.0, 0.7) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::from_rows(&[vec![1.5, -2.0]]).unwrap());
        let mut adam = Adam::new(AdamConfig::default(), 1);
        let mut grads = Gradients::empty(1);
        grads.slots[0] = Some(Tensor::zeros(1, 2));
        adam.step(&mut store, &grads).unwrap();
        assert_eq!(store.get(id).data(), &[1.5, -2.0]);
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        // m = 0.1·g, v = 0.001·g², m̂ = g, v̂ = g² → Δ = −lr·g/(|g| + eps)
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(1.0));
        let config = AdamConfig { lr: 0.01, ..AdamConfig::default() };
        let mut adam = Adam::new(config, 1);
        let mut grads = Gradients::empty(1);
        grads.slots[0] = Some(Tensor::scalar(0.5));
        adam.step(&mut store, &grads).unwrap();
        let expected = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((store.get(id).item() - expected).abs() < 1e-15);
        // second step: m = 0.19·0.5·..., computed directly
        grads.slots[0] = Some(Tensor::scalar(-0.25));
        adam.step(&mut store, &grads).unwrap();
        let m: f64 = 0.9 * 0.05 + 0.1 * -0.25;
        let v: f64 = 0.999 * 0.001 * 0.25 + 0.001 * 0.0625;
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.999f64 * 0.999);
        let expected2 = expected - 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((store.get(id).item() - expected2).abs() < 1e-15);
        assert_eq!(adam.steps(id), 2);
    }

    #[test]
    fn adam_refuses_non_finite_gradients() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::scalar(1.0));
        store.add("b", Tensor::scalar(2.0));
        let mut adam = Adam::new(AdamConfig::default(), 2);
        let mut grads = Gradients::empty(2);
        grads.slots[0] = Some(Tensor::scalar(1.0));
        grads.slots[1] = Some(Tensor::scalar(f64::NAN));
        match adam.step(&mut store, &grads) {
            Err(NeuralError::NonFinite(name)) => assert_eq!(name, "b"),
            other => panic!("{other:?}"),
        }
        assert_eq!(store.get(0).item(), 1.0);
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        Dense::new(&mut store, "a", 3, 5, &mut rng);
        LayerNorm::new(&mut store, "n", 5);
        let mut meta = BTreeMap::new();
        meta.insert("updates".to_string(), "17".to_string());
        let mut bytes = Vec::new();
        store.write_checkpoint(&meta, &mut bytes).unwrap();
        let (loaded, meta2) = ParamStore::read_checkpoint(&mut &bytes[..]).unwrap();
        assert_eq!(loaded, store);
        assert_eq!(meta2, meta);
        let mut again = Vec::new();
        loaded.write_checkpoint(&meta2, &mut again).unwrap();
        assert_eq!(bytes, again);

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(ParamStore::read_checkpoint(&mut &truncated[..]), Err(NeuralError::Checkpoint(_))));
        let text = String::from_utf8_lossy(&bytes).replacen("heatlab-checkpoint v1", "heatlab-checkpoint v2", 1);
        match ParamStore::read_checkpoint(&mut text.as_bytes()) {
            Err(NeuralError::Version { found, expected }) => {
                assert_eq!(found, "heatlab-checkpoint v2");
                assert_eq!(expected, "heatlab-checkpoint v1");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn encoder_config_requires_divisible_heads() {
        let bad = EncoderConfig { model_dim: 30, heads: 4, ..EncoderConfig::default() };
        assert!(bad.validate().is_err());
        assert!(EncoderConfig::default().validate().is_ok());
    }
}
