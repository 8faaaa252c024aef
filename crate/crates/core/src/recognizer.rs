//! Per-attribute two-layer softmax perceptrons.
//!
//! Block `k` reads the input coordinates listed in its receptive field
//! (the whole input unless told otherwise), applies `relu(W1 x + b1)`, then
//! `W2 h + b2`, then a softmax over the values of `A_k`.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::Node;
use crate::text::fmt_f64;

/// Per-attribute probability vectors for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeProbs {
    pub probs: Vec<Vec<f64>>,
}

impl AttributeProbs {
    pub fn uniform(cards: &[usize]) -> Self {
        Self {
            probs: cards.iter().map(|&c| vec![1.0 / c as f64; c]).collect(),
        }
    }

    pub fn one_hot(cards: &[usize], node: &[usize]) -> Self {
        let probs = cards
            .iter()
            .zip(node)
            .map(|(&c, &v)| {
                let mut p = vec![0.0; c];
                p[v] = 1.0;
                p
            })
            .collect();
        Self { probs }
    }

    /// Argmax per attribute, ties to the smallest value.
    pub fn argmax(&self) -> Node {
        self.probs.iter().map(|p| argmax(p)).collect()
    }
}

pub(crate) fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Anything that maps an input to per-attribute distributions with exact
/// input gradients. Implemented by the plain recognizer, the noise-smoothed
/// recognizer and the generator's Bayes posterior.
pub trait AttributeModel: Sync {
    fn input_dim(&self) -> usize;
    fn cardinalities(&self) -> Vec<usize>;
    fn forward(&self, x: &[f64]) -> Result<AttributeProbs>;
    /// `∇_x Σ_k Σ_v upstream[k][v] · log p_k(v | x)`.
    fn log_prob_vjp(&self, x: &[f64], upstream: &[Vec<f64>]) -> Result<Vec<f64>>;
}

fn check_dim(x: &[f64], dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: x.len(),
        });
    }
    Ok(())
}

/// Gradient of `(1/m) Σ_{k ∈ attacked} CE(p_k(x), labels_k)`; attribute indices are 1-based.
pub fn input_gradient(
    model: &dyn AttributeModel,
    x: &[f64],
    labels: &[usize],
    attacked: &[usize],
) -> Result<Vec<f64>> {
    let upstream = ce_upstream(&model.cardinalities(), labels, attacked)?;
    model.log_prob_vjp(x, &upstream)
}

/// Mean cross-entropy over the attacked attributes.
pub fn attack_loss(
    model: &dyn AttributeModel,
    x: &[f64],
    labels: &[usize],
    attacked: &[usize],
) -> Result<f64> {
    let probs = model.forward(x)?;
    let m = attacked.len() as f64;
    Ok(attacked
        .iter()
        .map(|&k| -probs.probs[k - 1][labels[k - 1]].ln())
        .sum::<f64>()
        / m)
}

pub(crate) fn ce_upstream(
    cards: &[usize],
    labels: &[usize],
    attacked: &[usize],
) -> Result<Vec<Vec<f64>>> {
    if attacked.is_empty() {
        return Err(Error::Precondition(
            "attacked attribute set is empty".into(),
        ));
    }
    if labels.len() != cards.len() {
        return Err(Error::LengthMismatch(labels.len(), cards.len()));
    }
    let mut up: Vec<Vec<f64>> = cards.iter().map(|&c| vec![0.0; c]).collect();
    let m = attacked.len() as f64;
    for &k in attacked {
        if k == 0 || k > cards.len() {
            return Err(Error::Precondition(format!(
                "attacked attribute {k} outside 1..={}",
                cards.len()
            )));
        }
        up[k - 1][labels[k - 1]] -= 1.0 / m;
    }
    Ok(up)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub fields: Vec<usize>,
    pub hidden: usize,
    pub card: usize,
    /// `hidden × fields.len()`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `card × hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

struct BlockPass {
    pre: Vec<f64>,
    h: Vec<f64>,
    z: Vec<f64>,
}

impl Block {
    fn pass(&self, x: &[f64]) -> BlockPass {
        let f = self.fields.len();
        let mut pre = self.b1.clone();
        for (j, p) in pre.iter_mut().enumerate() {
            let row = &self.w1[j * f..(j + 1) * f];
            *p += row
                .iter()
                .zip(&self.fields)
                .map(|(w, &i)| w * x[i])
                .sum::<f64>();
        }
        let h: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
        let mut z = self.b2.clone();
        for (c, zc) in z.iter_mut().enumerate() {
            let row = &self.w2[c * self.hidden..(c + 1) * self.hidden];
            *zc += row.iter().zip(&h).map(|(w, hv)| w * hv).sum::<f64>();
        }
        BlockPass { pre, h, z }
    }

    /// Adds `W1ᵀ (W2ᵀ g_z ⊙ relu')` into `out` at the receptive field.
    fn input_backward(&self, pass: &BlockPass, gz: &[f64], out: &mut [f64]) {
        let f = self.fields.len();
        for j in 0..self.hidden {
            if pass.pre[j] <= 0.0 {
                continue;
            }
            let gh: f64 = (0..self.card)
                .map(|c| self.w2[c * self.hidden + j] * gz[c])
                .sum();
            if gh == 0.0 {
                continue;
            }
            let row = &self.w1[j * f..(j + 1) * f];
            for (w, &i) in row.iter().zip(&self.fields) {
                out[i] += w * gh;
            }
        }
    }

    /// Accumulates parameter gradients for logit gradient `gz`.
    fn param_backward(&self, x: &[f64], pass: &BlockPass, gz: &[f64], g: &mut Block) {
        let f = self.fields.len();
        for c in 0..self.card {
            g.b2[c] += gz[c];
            let row = &mut g.w2[c * self.hidden..(c + 1) * self.hidden];
            for (r, hv) in row.iter_mut().zip(&pass.h) {
                *r += gz[c] * hv;
            }
        }
        for j in 0..self.hidden {
            if pass.pre[j] <= 0.0 {
                continue;
            }
            let gh: f64 = (0..self.card)
                .map(|c| self.w2[c * self.hidden + j] * gz[c])
                .sum();
            g.b1[j] += gh;
            let row = &mut g.w1[j * f..(j + 1) * f];
            for (r, &i) in row.iter_mut().zip(&self.fields) {
                *r += gh * x[i];
            }
        }
    }

    fn zeros_like(&self) -> Block {
        Block {
            fields: self.fields.clone(),
            hidden: self.hidden,
            card: self.card,
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: vec![0.0; self.b2.len()],
        }
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn tensors(&self) -> [&Vec<f64>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }
}

/// Shape of a recognizer before training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub cardinalities: Vec<usize>,
    pub hidden_dim: usize,
    /// Receptive field per attribute; `None` means the whole input.
    pub fields: Option<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognizerParams {
    pub input_dim: usize,
    pub blocks: Vec<Block>,
}

impl RecognizerParams {
    /// Uniform `±1/√fan_in` initialization.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        if arch.hidden_dim == 0 {
            return Err(Error::Precondition("hidden_dim must be positive".into()));
        }
        let k = arch.cardinalities.len();
        let fields = match &arch.fields {
            Some(f) if f.len() != k => return Err(Error::LengthMismatch(f.len(), k)),
            Some(f) => f.clone(),
            None => vec![(0..arch.input_dim).collect(); k],
        };
        if fields.iter().flatten().any(|&i| i >= arch.input_dim) {
            return Err(Error::Precondition(
                "receptive field outside the input".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
            let b = 1.0 / (fan_in.max(1) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-b..b)).collect()
        };
        let h = arch.hidden_dim;
        let blocks = fields
            .into_iter()
            .zip(&arch.cardinalities)
            .map(|(fields, &card)| {
                let f = fields.len();
                Block {
                    w1: uniform(h * f, f),
                    b1: uniform(h, f),
                    w2: uniform(card * h, h),
                    b2: uniform(card, h),
                    fields,
                    hidden: h,
                    card,
                }
            })
            .collect();
        Ok(Self {
            input_dim: arch.input_dim,
            blocks,
        })
    }

    pub fn zeros(arch: &Architecture) -> Result<Self> {
        let mut p = Self::init(arch, 0)?;
        for b in &mut p.blocks {
            for t in b.tensors_mut() {
                t.fill(0.0);
            }
        }
        Ok(p)
    }

    pub fn num_attributes(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks
            .iter()
            .all(|b| b.tensors().iter().all(|t| t.iter().all(|v| v.is_finite())))
    }

    /// Pre-softmax outputs per attribute.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        check_dim(x, self.input_dim)?;
        Ok(self.blocks.iter().map(|b| b.pass(x).z).collect())
    }

    /// Gradient of `Σ_k Σ_v upstream[k][v] · z_k[v]` with respect to `x`.
    pub fn logit_vjp(&self, x: &[f64], upstream: &[Vec<f64>]) -> Result<Vec<f64>> {
        check_dim(x, self.input_dim)?;
        let mut out = vec![0.0; self.input_dim];
        for (b, gz) in self.blocks.iter().zip(upstream) {
            if gz.iter().all(|&g| g == 0.0) {
                continue;
            }
            let pass = b.pass(x);
            b.input_backward(&pass, gz, &mut out);
        }
        Ok(out)
    }

    fn zeros_like(&self) -> Self {
        Self {
            input_dim: self.input_dim,
            blocks: self.blocks.iter().map(Block::zeros_like).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (ta, tb) in a.tensors_mut().into_iter().zip(b.tensors()) {
                ta.iter_mut().zip(tb).for_each(|(x, y)| *x += y);
            }
        }
    }

    /// Adds the gradient of `Σ_k CE(p_k(x), labels_k)` into `grad`; returns the loss.
    fn accumulate_ce(&self, x: &[f64], labels: &[usize], grad: &mut Self) -> f64 {
        let mut loss = 0.0;
        for ((b, g), &y) in self.blocks.iter().zip(&mut grad.blocks).zip(labels) {
            let pass = b.pass(x);
            let mut gz = softmax(&pass.z);
            loss -= gz[y].max(f64::MIN_POSITIVE).ln();
            gz[y] -= 1.0;
            b.param_backward(x, &pass, &gz, g);
        }
        loss
    }
}

impl AttributeModel for RecognizerParams {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn cardinalities(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.card).collect()
    }

    fn forward(&self, x: &[f64]) -> Result<AttributeProbs> {
        Ok(AttributeProbs {
            probs: self.logits(x)?.iter().map(|z| softmax(z)).collect(),
        })
    }

    fn log_prob_vjp(&self, x: &[f64], upstream: &[Vec<f64>]) -> Result<Vec<f64>> {
        check_dim(x, self.input_dim)?;
        let mut out = vec![0.0; self.input_dim];
        for (b, u) in self.blocks.iter().zip(upstream) {
            let total: f64 = u.iter().sum();
            if u.iter().all(|&g| g == 0.0) {
                continue;
            }
            let pass = b.pass(x);
            let p = softmax(&pass.z);
            let gz: Vec<f64> = u.iter().zip(&p).map(|(ui, pi)| ui - pi * total).collect();
            b.input_backward(&pass, &gz, &mut out);
        }
        Ok(out)
    }
}

/// Input vector plus its attribute labels.
pub trait Example: Sync {
    fn features(&self) -> &[f64];
    fn attributes(&self) -> &[usize];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub hidden_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 0,
            hidden_dim: 64,
        }
    }
}

impl TrainConfig {
    pub(crate) fn check(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Precondition("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Precondition("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Precondition("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: RecognizerParams,
    /// Mean per-sample loss of each epoch, measured during the epoch.
    pub epoch_loss: Vec<f64>,
}

const GRAD_CHUNK: usize = 32;

pub(crate) fn check_examples<E: Example>(arch: &Architecture, data: &[E]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    for e in data {
        check_dim(e.features(), arch.input_dim)?;
        if e.attributes().len() != arch.cardinalities.len() {
            return Err(Error::LengthMismatch(
                e.attributes().len(),
                arch.cardinalities.len(),
            ));
        }
        if e.attributes()
            .iter()
            .zip(&arch.cardinalities)
            .any(|(&v, &c)| v >= c)
        {
            return Err(Error::Precondition(
                "attribute label outside cardinality".into(),
            ));
        }
    }
    Ok(())
}

/// Summed cross-entropy gradient over `(x, labels)` pairs, reduced in a fixed order.
pub(crate) fn batch_gradient(
    params: &RecognizerParams,
    items: &[(&[f64], &[usize])],
) -> (RecognizerParams, f64) {
    let parts: Vec<(RecognizerParams, f64)> = items
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = params.zeros_like();
            let mut loss = 0.0;
            for (x, y) in chunk {
                loss += params.accumulate_ce(x, y, &mut g);
            }
            (g, loss)
        })
        .collect();
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for (g, l) in &parts {
        total.add_assign(g);
        loss += l;
    }
    (total, loss)
}

pub(crate) struct Momentum {
    velocity: RecognizerParams,
}

impl Momentum {
    pub(crate) fn new(params: &RecognizerParams) -> Self {
        Self {
            velocity: params.zeros_like(),
        }
    }

    /// `v ← μ v + g / n`, `θ ← θ − η v`.
    pub(crate) fn step(
        &mut self,
        params: &mut RecognizerParams,
        grad: &RecognizerParams,
        n: usize,
        cfg: &TrainConfig,
    ) {
        let scale = 1.0 / n as f64;
        for ((p, v), g) in params
            .blocks
            .iter_mut()
            .zip(&mut self.velocity.blocks)
            .zip(&grad.blocks)
        {
            for ((tp, tv), tg) in p
                .tensors_mut()
                .into_iter()
                .zip(v.tensors_mut())
                .zip(g.tensors())
            {
                for ((pp, vv), gg) in tp.iter_mut().zip(tv.iter_mut()).zip(tg) {
                    *vv = cfg.momentum * *vv + gg * scale;
                    *pp -= cfg.learning_rate * *vv;
                }
            }
        }
    }
}

/// Epoch order for `n` items, drawn from the shuffle stream.
pub(crate) fn epoch_order(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Mini-batch SGD with momentum on `Σ_k CE`.
pub fn train<E: Example>(
    arch: &Architecture,
    data: &[E],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.check()?;
    check_examples(arch, data)?;
    let mut params = RecognizerParams::init(arch, cfg.seed)?;
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546);
    let mut opt = Momentum::new(&params);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let order = epoch_order(&mut shuffle, data.len());
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let items: Vec<(&[f64], &[usize])> = batch
                .iter()
                .map(|&i| (data[i].features(), data[i].attributes()))
                .collect();
            let (g, loss) = batch_gradient(&params, &items);
            total += loss;
            opt.step(&mut params, &g, items.len(), cfg);
        }
        epoch_loss.push(total / data.len() as f64);
    }
    Ok(TrainOutcome { params, epoch_loss })
}

/// Per-attribute accuracy of argmax predictions.
pub fn attribute_accuracy<E: Example>(model: &dyn AttributeModel, data: &[E]) -> Result<Vec<f64>> {
    let k = model.cardinalities().len();
    let preds: Vec<Node> = data
        .par_iter()
        .map(|e| model.forward(e.features()).map(|p| p.argmax()))
        .collect::<Result<_>>()?;
    let mut correct = vec![0usize; k];
    for (p, e) in preds.iter().zip(data) {
        for (c, (a, b)) in correct.iter_mut().zip(p.iter().zip(e.attributes())) {
            *c += usize::from(a == b);
        }
    }
    Ok(correct
        .iter()
        .map(|&c| c as f64 / data.len().max(1) as f64)
        .collect())
}

const HEADER: &str = "RECOG v1";

fn write_matrix(out: &mut String, name: &str, rows: usize, cols: usize, values: &[f64]) {
    writeln!(out, "{name} {rows} {cols}").unwrap();
    for r in 0..rows {
        let line: Vec<String> = values[r * cols..(r + 1) * cols]
            .iter()
            .map(fmt_f64)
            .collect();
        writeln!(out, "{}", line.join(" ")).unwrap();
    }
}

pub fn write_recognizer(params: &RecognizerParams) -> String {
    let mut out = String::new();
    writeln!(out, "{HEADER}").unwrap();
    writeln!(
        out,
        "input {} blocks {}",
        params.input_dim,
        params.blocks.len()
    )
    .unwrap();
    for (k, b) in params.blocks.iter().enumerate() {
        let fields: Vec<String> = b.fields.iter().map(|i| i.to_string()).collect();
        writeln!(
            out,
            "block {k} hidden {} card {} fields {}",
            b.hidden,
            b.card,
            fields.join(",")
        )
        .unwrap();
        write_matrix(&mut out, "w1", b.hidden, b.fields.len(), &b.w1);
        write_matrix(&mut out, "b1", 1, b.hidden, &b.b1);
        write_matrix(&mut out, "w2", b.card, b.hidden, &b.w2);
        write_matrix(&mut out, "b2", 1, b.card, &b.b2);
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<Vec<&'a str>> {
        for (i, l) in self.inner.by_ref() {
            self.last = i + 1;
            if !l.trim().is_empty() {
                return Ok(l.split_whitespace().collect());
            }
        }
        Err(Error::parse(self.last + 1, "unexpected end of input"))
    }

    fn keyed(&mut self, key: &str, n: usize) -> Result<Vec<&'a str>> {
        let f = self.next()?;
        if f.len() != n || f[0] != key {
            return Err(Error::parse(self.last, format!("expected `{key}` line")));
        }
        Ok(f)
    }

    fn num<T: std::str::FromStr>(&self, s: &str) -> Result<T> {
        s.parse()
            .map_err(|_| Error::parse(self.last, format!("bad number `{s}`")))
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Vec<f64>> {
        let f = self.keyed(name, 3)?;
        if self.num::<usize>(f[1])? != rows || self.num::<usize>(f[2])? != cols {
            return Err(Error::parse(self.last, format!("`{name}` shape mismatch")));
        }
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let row = self.next()?;
            if row.len() != cols {
                return Err(Error::parse(self.last, "row length mismatch"));
            }
            for v in row {
                values.push(self.num(v)?);
            }
        }
        Ok(values)
    }
}

pub fn parse_recognizer(text: &str) -> Result<RecognizerParams> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    if lines.next()?.join(" ") != HEADER {
        return Err(Error::parse(1, format!("expected `{HEADER}`")));
    }
    let f = lines.next()?;
    if f.len() != 4 || f[0] != "input" || f[2] != "blocks" {
        return Err(Error::parse(lines.last, "expected `input <d> blocks <K>`"));
    }
    let input_dim: usize = lines.num(f[1])?;
    let nblocks: usize = lines.num(f[3])?;
    let mut blocks = Vec::with_capacity(nblocks);
    for k in 0..nblocks {
        let f = lines.keyed("block", 8)?;
        if lines.num::<usize>(f[1])? != k {
            return Err(Error::parse(lines.last, "block out of sequence"));
        }
        let hidden: usize = lines.num(f[3])?;
        let card: usize = lines.num(f[5])?;
        let fields: Vec<usize> = f[7]
            .split(',')
            .map(|s| lines.num(s))
            .collect::<Result<_>>()?;
        if fields.iter().any(|&i| i >= input_dim) {
            return Err(Error::parse(
                lines.last,
                "receptive field outside the input",
            ));
        }
        let w1 = lines.matrix("w1", hidden, fields.len())?;
        let b1 = lines.matrix("b1", 1, hidden)?;
        let w2 = lines.matrix("w2", card, hidden)?;
        let b2 = lines.matrix("b2", 1, card)?;
        blocks.push(Block {
            fields,
            hidden,
            card,
            w1,
            b1,
            w2,
            b2,
        });
    }
    Ok(RecognizerParams { input_dim, blocks })
}
