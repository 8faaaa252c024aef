//! Synthetic datasets with closed-form ground truth.
//!
//! A latent node `a0` is drawn from the prior over the planted set. Block
//! `k` of the input is `μ_{k, a0_k} + N(0, σ²I)` clipped to `[0, 1]`, with
//! `μ_{k,v} = 0.5 + s·c_{k,v}` for a random `±1` code `c_{k,v}`. The class
//! is `task(a0)`. With probability `ρ` a label is corrupted: half the time
//! `y` is redrawn uniformly, otherwise the attribute labels are replaced by
//! a uniform node of `Ω` (the input still follows `a0`).

use std::collections::BTreeSet;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::circuit::{Circuit, CircuitNode, NodeKind};
use crate::error::{Error, Result};
use crate::geometry::{inter_class_distance, ClassPartition};
use crate::recognizer::{softmax, AttributeModel, AttributeProbs, Example};
use crate::schema::{Node, VariableSchema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Class = position of the node in the planted list.
    NodePerClass,
    /// Class = rank of `Σ_k a_k` among the distinct planted sums.
    DigitSum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlantedNodes {
    Explicit(Vec<Node>),
    Search { size: usize, target_dmin: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSpec {
    pub block_dim: usize,
    /// Half the per-coordinate gap between two means.
    pub mean_scale: f64,
    pub noise_std: f64,
    /// Minimum Hamming distance between the codes of one attribute.
    pub min_code_distance: usize,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            block_dim: 16,
            mean_scale: 0.08,
            noise_std: 0.05,
            min_code_distance: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub name: String,
    pub attribute_cardinalities: Vec<usize>,
    pub planted: PlantedNodes,
    pub task: Task,
    #[serde(default = "default_noise")]
    pub label_noise: f64,
    #[serde(default)]
    pub feature: FeatureSpec,
    /// Prior over planted nodes; uniform when absent.
    #[serde(default)]
    pub class_prior: Option<Vec<f64>>,
    /// Feature blocks read by each attribute's recognizer; own block when absent.
    #[serde(default)]
    pub recognizer_blocks: Option<Vec<Vec<usize>>>,
    #[serde(default)]
    pub seed: u64,
}

fn default_noise() -> f64 {
    0.01
}

const SEARCH_RESTARTS: usize = 200;
const SEARCH_PROPOSALS: usize = 20_000;

/// Random greedy search for `size` nodes with pairwise distance ≥ `target_dmin`.
pub fn sample_attribute_set(
    schema: &VariableSchema,
    size: usize,
    target_dmin: usize,
    seed: u64,
) -> Result<Vec<Node>> {
    if (size as u128) > schema.omega_size() || target_dmin > schema.num_attributes() && size > 1 {
        return Err(Error::SearchExhausted(0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cards = schema.attribute_cardinalities();
    for _ in 0..SEARCH_RESTARTS {
        let mut set: Vec<Node> = Vec::with_capacity(size);
        for _ in 0..SEARCH_PROPOSALS {
            if set.len() == size {
                break;
            }
            let cand: Node = cards.iter().map(|&c| rng.random_range(0..c)).collect();
            let far = set.iter().all(|a| {
                let d = a.iter().zip(&cand).filter(|(x, y)| x != y).count();
                d >= target_dmin.max(1)
            });
            if far {
                set.push(cand);
            }
        }
        if set.len() == size {
            return Ok(set);
        }
    }
    Err(Error::SearchExhausted(SEARCH_RESTARTS))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub x: Vec<f64>,
    pub attrs: Node,
    pub label: usize,
    /// Node the features were drawn from.
    pub latent: Node,
}

impl Example for LabeledSample {
    fn features(&self) -> &[f64] {
        &self.x
    }
    fn attributes(&self) -> &[usize] {
        &self.attrs
    }
}

/// Fully resolved generator: planted nodes, class map and feature means.
#[derive(Debug, Clone)]
pub struct Generator {
    pub spec: GeneratorSpec,
    schema: VariableSchema,
    planted: Vec<Node>,
    prior: Vec<f64>,
    classes: Vec<usize>,
    /// `means[k][v]` has `block_dim` entries.
    means: Vec<Vec<Vec<f64>>>,
    /// Marginal of the latent per attribute.
    attr_prior: Vec<Vec<f64>>,
}

fn random_codes(
    rng: &mut ChaCha8Rng,
    count: usize,
    len: usize,
    min_dist: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut codes: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut tries = 0;
    while codes.len() < count {
        tries += 1;
        if tries > 100_000 {
            return Err(Error::SearchExhausted(tries));
        }
        let c: Vec<f64> = (0..len)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        if codes
            .iter()
            .all(|o| o.iter().zip(&c).filter(|(a, b)| a != b).count() >= min_dist)
        {
            codes.push(c);
        }
    }
    Ok(codes)
}

impl Generator {
    pub fn new(spec: &GeneratorSpec) -> Result<Self> {
        if !(0.0..0.5).contains(&spec.label_noise) {
            return Err(Error::Precondition(
                "label_noise must lie in [0, 0.5)".into(),
            ));
        }
        if spec.feature.block_dim == 0 || !(spec.feature.noise_std >= 0.0) {
            return Err(Error::Precondition("invalid feature spec".into()));
        }
        let cards = spec.attribute_cardinalities.clone();
        let probe = VariableSchema::new(2, cards.clone())?;
        let planted = match &spec.planted {
            PlantedNodes::Explicit(nodes) => nodes.clone(),
            PlantedNodes::Search { size, target_dmin } => {
                sample_attribute_set(&probe, *size, *target_dmin, spec.seed ^ 0x504c_414e)?
            }
        };
        if planted.is_empty() {
            return Err(Error::Precondition("planted set is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for a in &planted {
            probe.check_node(a)?;
            if !seen.insert(a.clone()) {
                return Err(Error::Precondition(format!("planted node {a:?} repeated")));
            }
        }
        if let PlantedNodes::Search { target_dmin, .. } = spec.planted {
            let singles: Vec<Vec<Node>> = planted.iter().map(|a| vec![a.clone()]).collect();
            if inter_class_distance(cards.len(), &singles) < target_dmin {
                return Err(Error::Precondition(
                    "planted set misses its distance target".into(),
                ));
            }
        }
        let classes: Vec<usize> = match spec.task {
            Task::NodePerClass => (0..planted.len()).collect(),
            Task::DigitSum => {
                let sums: Vec<usize> = planted.iter().map(|a| a.iter().sum()).collect();
                let distinct: Vec<usize> = sums
                    .iter()
                    .copied()
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect();
                sums.iter()
                    .map(|s| distinct.binary_search(s).unwrap())
                    .collect()
            }
        };
        let n_classes = classes.iter().max().unwrap() + 1;
        let schema = VariableSchema::new(n_classes.max(2), cards.clone())?;
        let prior = match &spec.class_prior {
            Some(p) => {
                if p.len() != planted.len() || p.iter().any(|&w| !(w >= 0.0)) {
                    return Err(Error::Precondition(
                        "class_prior must weight every planted node".into(),
                    ));
                }
                let s: f64 = p.iter().sum();
                if !(s > 0.0) {
                    return Err(Error::Precondition("class_prior has zero mass".into()));
                }
                p.iter().map(|w| w / s).collect()
            }
            None => vec![1.0 / planted.len() as f64; planted.len()],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let f = &spec.feature;
        let means: Vec<Vec<Vec<f64>>> = cards
            .iter()
            .map(|&c| {
                random_codes(&mut rng, c, f.block_dim, f.min_code_distance).map(|codes| {
                    codes
                        .iter()
                        .map(|code| code.iter().map(|b| 0.5 + f.mean_scale * b).collect())
                        .collect()
                })
            })
            .collect::<Result<_>>()?;
        let mut attr_prior: Vec<Vec<f64>> = cards.iter().map(|&c| vec![0.0; c]).collect();
        for (a, &w) in planted.iter().zip(&prior) {
            for (k, &v) in a.iter().enumerate() {
                attr_prior[k][v] += w;
            }
        }
        if let Some(blocks) = &spec.recognizer_blocks {
            if blocks.len() != cards.len() || blocks.iter().flatten().any(|&b| b >= cards.len()) {
                return Err(Error::Precondition(
                    "recognizer_blocks must list valid blocks per attribute".into(),
                ));
            }
        }
        Ok(Self {
            spec: spec.clone(),
            schema,
            planted,
            prior,
            classes,
            means,
            attr_prior,
        })
    }

    pub fn schema(&self) -> &VariableSchema {
        &self.schema
    }

    pub fn planted(&self) -> &[Node] {
        &self.planted
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    /// Class of the `i`-th planted node.
    pub fn class_of_planted(&self, i: usize) -> usize {
        self.classes[i]
    }

    pub fn input_dim(&self) -> usize {
        self.spec.feature.block_dim * self.schema.num_attributes()
    }

    fn block_range(&self, k: usize) -> std::ops::Range<usize> {
        let b = self.spec.feature.block_dim;
        k * b..(k + 1) * b
    }

    /// Input coordinates read by each attribute's recognizer.
    pub fn recognizer_fields(&self) -> Vec<Vec<usize>> {
        let k = self.schema.num_attributes();
        let blocks: Vec<Vec<usize>> = match &self.spec.recognizer_blocks {
            Some(b) => b.clone(),
            None => (0..k).map(|i| vec![i]).collect(),
        };
        blocks
            .iter()
            .map(|bs| bs.iter().flat_map(|&b| self.block_range(b)).collect())
            .collect()
    }

    /// Partition of the planted set by task class.
    pub fn planted_partition(&self, gamma: f64) -> Result<ClassPartition> {
        let mut pieces = vec![Vec::new(); self.schema.class_cardinality()];
        for (a, &y) in self.planted.iter().zip(&self.classes) {
            pieces[y].push(a.clone());
        }
        ClassPartition::from_pieces(&self.schema, gamma, pieces)
    }

    /// Draws `n` samples from an independent stream.
    pub fn sample(&self, n: usize, stream: u64) -> Vec<LabeledSample> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.spec.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let noise = Normal::new(0.0, self.spec.feature.noise_std).unwrap();
        let c = self.schema.class_cardinality();
        let cards = self.schema.attribute_cardinalities().to_vec();
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let mut i = 0;
                let mut acc = self.prior[0];
                while u >= acc && i + 1 < self.planted.len() {
                    i += 1;
                    acc += self.prior[i];
                }
                let latent = self.planted[i].clone();
                let mut label = self.classes[i];
                let mut attrs = latent.clone();
                if rng.random_bool(self.spec.label_noise) {
                    if rng.random_bool(0.5) {
                        label = rng.random_range(0..c);
                    } else {
                        attrs = cards.iter().map(|&c| rng.random_range(0..c)).collect();
                    }
                }
                let mut x = Vec::with_capacity(self.input_dim());
                for (k, &v) in latent.iter().enumerate() {
                    for &m in &self.means[k][v] {
                        x.push((m + noise.sample(&mut rng)).clamp(0.0, 1.0));
                    }
                }
                LabeledSample {
                    x,
                    attrs,
                    label,
                    latent,
                }
            })
            .collect()
    }

    pub fn ground_truth(&self) -> GroundTruth<'_> {
        GroundTruth { gen: self }
    }
}

/// Exact distributions of a generator.
#[derive(Debug, Clone, Copy)]
pub struct GroundTruth<'a> {
    gen: &'a Generator,
}

impl<'a> GroundTruth<'a> {
    pub fn schema(&self) -> &VariableSchema {
        &self.gen.schema
    }

    /// `P*(Y = y, A = a)` of the observed labels.
    pub fn joint(&self, y: usize, a: &[usize]) -> f64 {
        let g = self.gen;
        let rho = g.spec.label_noise;
        let c = g.schema.class_cardinality() as f64;
        let omega = g.schema.omega_size() as f64;
        let mut p = 0.0;
        for ((a0, &w), &t) in g.planted.iter().zip(&g.prior).zip(&g.classes) {
            let same = a0.as_slice() == a;
            if same && y == t {
                p += w * (1.0 - rho);
            }
            if same {
                p += w * rho / 2.0 / c;
            }
            if y == t {
                p += w * rho / 2.0 / omega;
            }
        }
        p
    }

    /// `P*(A = a)`.
    pub fn node_mass(&self, a: &[usize]) -> f64 {
        (0..self.gen.schema.class_cardinality())
            .map(|y| self.joint(y, a))
            .sum()
    }

    /// `P*(Y | A = a)`.
    pub fn class_given_attrs(&self, a: &[usize]) -> Vec<f64> {
        let joint: Vec<f64> = (0..self.gen.schema.class_cardinality())
            .map(|y| self.joint(y, a))
            .collect();
        let s: f64 = joint.iter().sum();
        joint.iter().map(|p| p / s).collect()
    }

    /// Per-attribute Bayes posterior of the latent values given `x`.
    pub fn posterior(&self) -> PosteriorModel<'a> {
        PosteriorModel { gen: self.gen }
    }

    /// `P*(Y | x) = Σ_a P*(a | x) P*(Y | a)`.
    pub fn class_posterior(&self, x: &[f64]) -> Result<Vec<f64>> {
        let probs = self.posterior().forward(x)?;
        let c = self.gen.schema.class_cardinality();
        let mut out = vec![0.0; c];
        crate::schema::for_each_weighted_node(&probs.probs, |a, w| {
            if w == 0.0 {
                return;
            }
            for (o, p) in out.iter_mut().zip(self.class_given_attrs(a)) {
                *o += w * p;
            }
        });
        Ok(out)
    }

    /// Circuit whose joint equals `P*(Y, A)` exactly.
    pub fn exact_circuit(&self) -> Circuit {
        let g = self.gen;
        let s = &g.schema;
        let rho = g.spec.label_noise;
        let mut nodes: Vec<CircuitNode> = Vec::new();
        let push = |n: CircuitNode, nodes: &mut Vec<CircuitNode>| {
            nodes.push(n);
            nodes.len() - 1
        };
        let one_hot = |card: usize, v: usize| {
            let mut t = vec![0.0; card];
            t[v] = 1.0;
            t
        };
        let uniform = |card: usize| vec![1.0 / card as f64; card];
        let mut comps = Vec::new();
        let mut weights = Vec::new();
        for ((a0, &w), &t) in g.planted.iter().zip(&g.prior).zip(&g.classes) {
            let parts: [(f64, bool, bool); 3] = [
                (1.0 - rho, false, false),
                (rho / 2.0, true, false),
                (rho / 2.0, false, true),
            ];
            for (cw, uniform_y, uniform_a) in parts {
                if cw * w == 0.0 {
                    continue;
                }
                let ytab = if uniform_y {
                    uniform(s.class_cardinality())
                } else {
                    one_hot(s.class_cardinality(), t)
                };
                let mut children = vec![push(CircuitNode::leaf(0, ytab), &mut nodes)];
                for (k, &v) in a0.iter().enumerate() {
                    let card = s.attribute_cardinalities()[k];
                    let tab = if uniform_a {
                        uniform(card)
                    } else {
                        one_hot(card, v)
                    };
                    children.push(push(CircuitNode::leaf(k + 1, tab), &mut nodes));
                }
                comps.push(push(
                    CircuitNode {
                        scope: s.full_scope(),
                        kind: NodeKind::Product { children },
                    },
                    &mut nodes,
                ));
                weights.push(cw * w);
            }
        }
        let total: f64 = weights.iter().sum();
        let weights = weights.iter().map(|w| w / total).collect();
        nodes.push(CircuitNode {
            scope: s.full_scope(),
            kind: NodeKind::Sum {
                children: comps,
                weights,
            },
        });
        Circuit::from_nodes(s.clone(), nodes)
    }
}

/// Linear-softmax Bayes posterior per feature block.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorModel<'a> {
    gen: &'a Generator,
}

impl PosteriorModel<'_> {
    fn logits(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let g = self.gen;
        if x.len() != g.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: g.input_dim(),
                got: x.len(),
            });
        }
        let var = g.spec.feature.noise_std.powi(2).max(1e-300);
        Ok((0..g.schema.num_attributes())
            .map(|k| {
                let xb = &x[g.block_range(k)];
                g.means[k]
                    .iter()
                    .zip(&g.attr_prior[k])
                    .map(|(mu, &pi)| {
                        let dot: f64 = mu.iter().zip(xb).map(|(m, v)| m * v).sum();
                        let sq: f64 = mu.iter().map(|m| m * m).sum();
                        pi.ln() + (dot - sq / 2.0) / var
                    })
                    .collect()
            })
            .collect())
    }
}

impl AttributeModel for PosteriorModel<'_> {
    fn input_dim(&self) -> usize {
        self.gen.input_dim()
    }

    fn cardinalities(&self) -> Vec<usize> {
        self.gen.schema.attribute_cardinalities().to_vec()
    }

    fn forward(&self, x: &[f64]) -> Result<AttributeProbs> {
        Ok(AttributeProbs {
            probs: self.logits(x)?.iter().map(|z| softmax(z)).collect(),
        })
    }

    fn log_prob_vjp(&self, x: &[f64], upstream: &[Vec<f64>]) -> Result<Vec<f64>> {
        let g = self.gen;
        let var = g.spec.feature.noise_std.powi(2).max(1e-300);
        let probs = self.forward(x)?;
        let mut out = vec![0.0; x.len()];
        for (k, (u, p)) in upstream.iter().zip(&probs.probs).enumerate() {
            let total: f64 = u.iter().sum();
            let range = g.block_range(k);
            for (v, mu) in g.means[k].iter().enumerate() {
                let gz = u[v] - p[v] * total;
                if gz == 0.0 {
                    continue;
                }
                for (o, m) in out[range.clone()].iter_mut().zip(mu) {
                    *o += gz * m / var;
                }
            }
        }
        Ok(out)
    }
}

pub const ADD3_NODES: [[usize; 3]; 10] = [
    [6, 3, 7],
    [9, 6, 8],
    [0, 2, 4],
    [3, 0, 5],
    [5, 5, 1],
    [7, 4, 3],
    [2, 7, 6],
    [4, 1, 2],
    [1, 9, 0],
    [8, 8, 9],
];

pub const ADD5_NODES: [[usize; 5]; 10] = [
    [6, 3, 7, 4, 6],
    [0, 9, 5, 3, 1],
    [5, 0, 9, 2, 3],
    [2, 7, 8, 5, 4],
    [8, 2, 4, 9, 8],
    [7, 5, 0, 6, 0],
    [3, 4, 6, 1, 2],
    [4, 1, 3, 0, 5],
    [1, 6, 2, 8, 9],
    [9, 8, 1, 7, 7],
];

pub const CELEBA_NODES: [[usize; 8]; 10] = [
    [2, 1, 0, 0, 0, 1, 0, 0],
    [1, 0, 0, 0, 0, 1, 1, 1],
    [1, 1, 1, 1, 0, 1, 1, 0],
    [1, 1, 0, 0, 1, 0, 0, 1],
    [2, 0, 1, 1, 1, 1, 0, 1],
    [0, 1, 1, 0, 1, 1, 1, 1],
    [0, 0, 0, 1, 0, 0, 0, 1],
    [3, 0, 1, 0, 1, 0, 1, 0],
    [0, 0, 0, 1, 1, 1, 1, 0],
    [0, 1, 1, 1, 1, 0, 0, 0],
];

fn explicit<const K: usize>(nodes: &[[usize; K]]) -> PlantedNodes {
    PlantedNodes::Explicit(nodes.iter().map(|n| n.to_vec()).collect())
}

/// The named generator presets.
pub fn presets() -> Vec<GeneratorSpec> {
    let base = |name: &str, cards: Vec<usize>, planted, task| GeneratorSpec {
        name: name.to_owned(),
        attribute_cardinalities: cards,
        planted,
        task,
        label_noise: 0.01,
        feature: FeatureSpec::default(),
        class_prior: None,
        recognizer_blocks: None,
        seed: 0,
    };
    let mut correlated = base(
        "correlated",
        vec![10; 3],
        explicit(&ADD3_NODES),
        Task::DigitSum,
    );
    // the second attribute's recognizer also sees the first attribute's block
    correlated.recognizer_blocks = Some(vec![vec![0], vec![0, 1], vec![2]]);
    vec![
        base(
            "mnist-add3-like",
            vec![10; 3],
            explicit(&ADD3_NODES),
            Task::DigitSum,
        ),
        base(
            "mnist-add5-like",
            vec![10; 5],
            explicit(&ADD5_NODES),
            Task::DigitSum,
        ),
        base(
            "celeba-like",
            vec![4, 2, 2, 2, 2, 2, 2, 2],
            explicit(&CELEBA_NODES),
            Task::NodePerClass,
        ),
        correlated,
    ]
}

pub fn preset(name: &str) -> Result<GeneratorSpec> {
    presets()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::Precondition(format!("unknown preset `{name}`")))
}

/// Generated samples plus the spec that reproduces them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: GeneratorSpec,
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    /// Rows `[y, a_1, .., a_K]` of the observed labels.
    pub fn rows(&self) -> Vec<Vec<usize>> {
        self.samples
            .iter()
            .map(|s| {
                std::iter::once(s.label)
                    .chain(s.attrs.iter().copied())
                    .collect()
            })
            .collect()
    }

    pub fn attribute_rows(&self) -> Vec<Node> {
        self.samples.iter().map(|s| s.attrs.clone()).collect()
    }
}

/// Draws `n` samples from stream 0 of the spec's generator.
pub fn generate(spec: &GeneratorSpec, n: usize) -> Result<Dataset> {
    let gen = Generator::new(spec)?;
    Ok(Dataset {
        spec: spec.clone(),
        samples: gen.sample(n, 0),
    })
}

const DSET_HEADER: &str = "DSET v1";

pub fn write_dataset(ds: &Dataset, out: &mut impl Write) -> Result<()> {
    let dim = ds.samples.first().map_or(0, |s| s.x.len());
    let k = ds.spec.attribute_cardinalities.len();
    writeln!(out, "{DSET_HEADER}")?;
    writeln!(out, "{}", serde_json::to_string(&ds.spec)?)?;
    writeln!(out, "rows {} dim {dim} k {k}", ds.samples.len())?;
    let mut buf = Vec::with_capacity(ds.samples.len() * (dim * 8 + (2 * k + 1) * 4));
    for s in &ds.samples {
        for v in &s.x {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &a in s
            .attrs
            .iter()
            .chain(std::iter::once(&s.label))
            .chain(&s.latent)
        {
            buf.extend_from_slice(&(a as u32).to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_dataset(input: &mut impl Read) -> Result<Dataset> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut line = |n: usize| -> Result<String> {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(n, "truncated header"))?;
        let s = String::from_utf8(bytes[pos..pos + end].to_vec())
            .map_err(|_| Error::parse(n, "non-UTF-8 header"))?;
        pos += end + 1;
        Ok(s)
    };
    if line(1)? != DSET_HEADER {
        return Err(Error::parse(1, format!("expected `{DSET_HEADER}`")));
    }
    let spec: GeneratorSpec = serde_json::from_str(&line(2)?)?;
    let shape = line(3)?;
    let f: Vec<&str> = shape.split_whitespace().collect();
    if f.len() != 6 || f[0] != "rows" || f[2] != "dim" || f[4] != "k" {
        return Err(Error::parse(3, "expected `rows <n> dim <d> k <K>`"));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::parse(3, format!("bad number `{s}`")))
    };
    let (n, dim, k) = (num(f[1])?, num(f[3])?, num(f[5])?);
    let row_bytes = dim * 8 + (2 * k + 1) * 4;
    let body = &bytes[pos..];
    if body.len() != n * row_bytes {
        return Err(Error::parse(
            4,
            format!(
                "expected {} data bytes, found {}",
                n * row_bytes,
                body.len()
            ),
        ));
    }
    let mut samples = Vec::with_capacity(n);
    for row in body.chunks(row_bytes) {
        let (xb, lb) = row.split_at(dim * 8);
        let x = xb
            .chunks(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels: Vec<usize> = lb
            .chunks(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        samples.push(LabeledSample {
            x,
            attrs: labels[..k].to_vec(),
            label: labels[k],
            latent: labels[k + 1..].to_vec(),
        });
    }
    Ok(Dataset { spec, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_high_prob_set;
    use crate::recognizer::input_gradient;

    #[test]
    fn add3_sums_are_distinct() {
        let g = Generator::new(&preset("mnist-add3-like").unwrap()).unwrap();
        assert_eq!(g.schema().class_cardinality(), 10);
        let classes: BTreeSet<usize> = (0..10).map(|i| g.class_of_planted(i)).collect();
        assert_eq!(classes.len(), 10);
        assert_eq!(g.planted()[0], vec![6, 3, 7]);
    }

    #[test]
    fn preset_geometry_matches_reference_values() {
        for (name, d, r) in [
            ("mnist-add3-like", 3, 1),
            ("mnist-add5-like", 5, 2),
            ("celeba-like", 4, 1),
        ] {
            let g = Generator::new(&preset(name).unwrap()).unwrap();
            let p = g.planted_partition(0.01).unwrap();
            assert_eq!((p.d_min, p.intrinsic_radius()), (d, r), "{name}");
        }
        let c = preset("celeba-like").unwrap();
        assert_eq!(c.attribute_cardinalities, vec![4, 2, 2, 2, 2, 2, 2, 2]);
    }

    #[test]
    fn noisy_planted_set_is_recovered() {
        let spec = preset("mnist-add3-like").unwrap();
        let ds = generate(&spec, 20_000).unwrap();
        let v = build_high_prob_set(
            &Generator::new(&spec).unwrap().schema().clone(),
            &ds.attribute_rows(),
            0.01,
        )
        .unwrap();
        let mut want: Vec<Node> = ADD3_NODES.iter().map(|n| n.to_vec()).collect();
        want.sort();
        assert_eq!(v.nodes, want);
    }

    #[test]
    fn search_respects_target() {
        let schema = VariableSchema::new(2, vec![10, 10, 10]).unwrap();
        let set = sample_attribute_set(&schema, 10, 3, 1).unwrap();
        let singles: Vec<Vec<Node>> = set.iter().map(|a| vec![a.clone()]).collect();
        assert!(inter_class_distance(3, &singles) >= 3);
        assert_eq!(sample_attribute_set(&schema, 10, 3, 1).unwrap(), set);
        let tiny = VariableSchema::new(2, vec![2, 2]).unwrap();
        assert!(matches!(
            sample_attribute_set(&tiny, 5, 1, 0),
            Err(Error::SearchExhausted(_))
        ));
        assert_eq!(sample_attribute_set(&tiny, 4, 1, 0).unwrap().len(), 4);
    }

    #[test]
    fn joint_is_normalized_and_exact_circuit_agrees() {
        let g = Generator::new(&preset("celeba-like").unwrap()).unwrap();
        let gt = g.ground_truth();
        let c = gt.exact_circuit();
        assert!(c.validate().is_valid(), "{}", c.validate());
        let mut total = 0.0;
        for a in g.schema().nodes() {
            let lj = c.log_joint_classes(&a);
            for (y, l) in lj.iter().enumerate() {
                let p = gt.joint(y, &a);
                total += p;
                assert!((l.exp() - p).abs() < 1e-12);
            }
        }
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn noiseless_conditionals_are_one_hot() {
        let mut spec = preset("celeba-like").unwrap();
        spec.label_noise = 0.0;
        let g = Generator::new(&spec).unwrap();
        for (i, a) in g.planted().iter().enumerate() {
            let p = g.ground_truth().class_given_attrs(a);
            assert_eq!(p[g.class_of_planted(i)], 1.0);
        }
    }

    #[test]
    fn posterior_recovers_latent() {
        let g = Generator::new(&preset("mnist-add3-like").unwrap()).unwrap();
        let post = g.ground_truth().posterior();
        let samples = g.sample(2000, 1);
        let mut hits = 0;
        for s in &samples {
            let p = post.forward(&s.x).unwrap();
            for q in &p.probs {
                assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            hits += usize::from(p.argmax() == s.latent);
        }
        assert!(hits as f64 / samples.len() as f64 > 0.99);
        let gt = g.ground_truth();
        let cp = gt.class_posterior(&samples[0].x).unwrap();
        assert!((cp.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn tiny_noise_gives_one_hot_posterior() {
        let mut spec = preset("mnist-add3-like").unwrap();
        spec.feature.noise_std = 1e-4;
        let g = Generator::new(&spec).unwrap();
        let s = &g.sample(1, 2)[0];
        let p = g.ground_truth().posterior().forward(&s.x).unwrap();
        assert_eq!(p, AttributeProbs::one_hot(&[10, 10, 10], &s.latent));
    }

    #[test]
    fn posterior_gradient_matches_finite_differences() {
        let g = Generator::new(&preset("mnist-add3-like").unwrap()).unwrap();
        let post = g.ground_truth().posterior();
        let s = &g.sample(1, 3)[0];
        let grad = input_gradient(&post, &s.x, &s.attrs, &[2]).unwrap();
        let loss = |x: &[f64]| -post.forward(x).unwrap().probs[1][s.attrs[1]].ln();
        for i in 14..20 {
            let h = 1e-6;
            let (mut xp, mut xm) = (s.x.clone(), s.x.clone());
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!(
                (grad[i] - fd).abs() <= 1e-4 * fd.abs().max(1e-6),
                "{i}: {} vs {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn node_frequencies_track_prior() {
        let mut spec = preset("mnist-add3-like").unwrap();
        spec.label_noise = 0.0;
        let g = Generator::new(&spec).unwrap();
        let n = 10_000;
        let samples = g.sample(n, 4);
        for (i, a) in g.planted().iter().enumerate() {
            let count = samples.iter().filter(|s| &s.latent == a).count() as f64;
            let p = g.prior()[i];
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!(
                (count - n as f64 * p).abs() <= 3.0 * sd,
                "node {i}: {count}"
            );
        }
    }

    #[test]
    fn dataset_round_trip() {
        let ds = generate(&preset("celeba-like").unwrap(), 50).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(read_dataset(&mut buf.as_slice()).unwrap(), ds);
    }
}
