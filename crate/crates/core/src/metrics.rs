//! Total variation, the robustness and estimation-error bound checks, DP
//! smoothing and accuracy.

use std::fmt;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit::Circuit;
use crate::datagen::GroundTruth;
use crate::error::{Error, Result};
use crate::geometry::{ClassPartition, ENUMERATION_CAP};
use crate::integrator::{NpcEngine, RnpcEngine, ZERO_PARTITION};
use crate::recognizer::{AttributeModel, AttributeProbs};
use crate::schema::{Node, VariableSchema};
use crate::text::fmt_f64;

/// Slack allowed on every bound comparison.
pub const BOUND_TOL: f64 = 1e-9;

/// Neighborhood masses below this make the ratio bound undefined.
pub const ZERO_MASS: f64 = 1e-300;

pub fn tv(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch(p.len(), q.len()));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// TV between the two product distributions over `Ω`.
pub fn joint_tv(p: &AttributeProbs, q: &AttributeProbs) -> Result<f64> {
    if p.probs.len() != q.probs.len() {
        return Err(Error::LengthMismatch(p.probs.len(), q.probs.len()));
    }
    let mut size = 1u128;
    for (a, b) in p.probs.iter().zip(&q.probs) {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch {
                expected: a.len(),
                got: b.len(),
            });
        }
        size = size.saturating_mul(a.len() as u128);
    }
    if size > ENUMERATION_CAP {
        return Err(Error::SpaceTooLarge {
            size,
            cap: ENUMERATION_CAP,
        });
    }
    fn rec(p: &[Vec<f64>], q: &[Vec<f64>], pp: f64, qp: f64) -> f64 {
        match p.split_first() {
            None => (pp - qp).abs(),
            Some((head, rest)) => {
                let mut s = 0.0;
                for (a, b) in head.iter().zip(&q[0]) {
                    let (na, nb) = (pp * a, qp * b);
                    if na != 0.0 || nb != 0.0 {
                        s += rec(rest, &q[1..], na, nb);
                    }
                }
                s
            }
        }
    }
    Ok(0.5 * rec(&p.probs, &q.probs, 1.0, 1.0))
}

/// Sum of per-attribute TV distances.
pub fn attr_sum_tv(p: &AttributeProbs, q: &AttributeProbs) -> Result<f64> {
    if p.probs.len() != q.probs.len() {
        return Err(Error::LengthMismatch(p.probs.len(), q.probs.len()));
    }
    p.probs.iter().zip(&q.probs).map(|(a, b)| tv(a, b)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NpcCheck {
    pub tv_pred: f64,
    pub attr_joint_tv: f64,
    pub attr_sum_tv: f64,
}

impl NpcCheck {
    /// `tv_pred ≤ attr_joint_tv ≤ attr_sum_tv` within `BOUND_TOL`.
    pub fn holds(&self) -> bool {
        self.tv_pred <= self.attr_joint_tv + BOUND_TOL
            && self.attr_joint_tv <= self.attr_sum_tv + BOUND_TOL
    }
}

pub fn npc_bound_check(
    benign: &AttributeProbs,
    adv: &AttributeProbs,
    npc: &NpcEngine,
) -> Result<NpcCheck> {
    let (b, _) = npc.infer(benign)?;
    let (a, _) = npc.infer(adv)?;
    Ok(NpcCheck {
        tv_pred: tv(&b.normalized, &a.normalized)?,
        attr_joint_tv: joint_tv(benign, adv)?,
        attr_sum_tv: attr_sum_tv(benign, adv)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RnpcCheck {
    pub tv_pred: f64,
    /// `max_ỹ |1 − mass_adv(N(ỹ)) / mass_benign(N(ỹ))|` over classes with a nonempty piece.
    pub ratio_bound: f64,
    /// Smallest benign neighborhood mass over the same classes.
    pub c_floor: f64,
    pub zero_mass: bool,
}

impl RnpcCheck {
    pub fn holds(&self) -> bool {
        self.zero_mass || self.tv_pred <= self.ratio_bound + BOUND_TOL
    }
}

/// `max |1 − num/den|` and `min den` over the classes with nonempty pieces.
fn ratio_stats(partition: &ClassPartition, num: &[f64], den: &[f64]) -> (f64, f64, bool) {
    let mut ratio: f64 = 0.0;
    let mut floor = f64::INFINITY;
    let mut zero = false;
    for ((piece, &n), &d) in partition.pieces.iter().zip(num).zip(den) {
        if piece.is_empty() {
            continue;
        }
        floor = floor.min(d);
        if d < ZERO_MASS {
            zero = true;
            continue;
        }
        ratio = ratio.max((1.0 - n / d).abs());
    }
    (ratio, if floor.is_finite() { floor } else { 0.0 }, zero)
}

pub fn rnpc_bound_check(
    benign: &AttributeProbs,
    adv: &AttributeProbs,
    rnpc: &RnpcEngine,
) -> Result<RnpcCheck> {
    let (mb, ma) = (rnpc.masses(benign), rnpc.masses(adv));
    let (b, a) = (rnpc.scores_from_masses(&mb), rnpc.scores_from_masses(&ma));
    let (ratio_bound, c_floor, zero_mass) = ratio_stats(rnpc.partition(), &ma, &mb);
    Ok(RnpcCheck {
        tv_pred: tv(&b.normalized, &a.normalized)?,
        ratio_bound: if zero_mass { 0.0 } else { ratio_bound },
        c_floor,
        zero_mass: zero_mass || b.zero_partition,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub sample_id: usize,
    pub tv_pred: f64,
    pub attr_joint_tv: f64,
    pub attr_sum_tv: f64,
    /// TV between the normalized RNPC outputs.
    pub rnpc_tv_pred: f64,
    pub rnpc_ratio_bound: f64,
    pub c_floor: f64,
    pub zero_mass: bool,
}

impl BoundRecord {
    pub fn new(sample_id: usize, npc: NpcCheck, rnpc: RnpcCheck) -> Self {
        Self {
            sample_id,
            tv_pred: npc.tv_pred,
            attr_joint_tv: npc.attr_joint_tv,
            attr_sum_tv: npc.attr_sum_tv,
            rnpc_tv_pred: rnpc.tv_pred,
            rnpc_ratio_bound: rnpc.ratio_bound,
            c_floor: rnpc.c_floor,
            zero_mass: rnpc.zero_mass,
        }
    }

    pub fn npc(&self) -> NpcCheck {
        NpcCheck {
            tv_pred: self.tv_pred,
            attr_joint_tv: self.attr_joint_tv,
            attr_sum_tv: self.attr_sum_tv,
        }
    }

    pub fn rnpc(&self) -> RnpcCheck {
        RnpcCheck {
            tv_pred: self.rnpc_tv_pred,
            ratio_bound: self.rnpc_ratio_bound,
            c_floor: self.c_floor,
            zero_mass: self.zero_mass,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.tv_pred,
            self.attr_joint_tv,
            self.attr_sum_tv,
            self.rnpc_tv_pred,
            self.rnpc_ratio_bound,
            self.c_floor,
        ]
        .iter()
        .all(|v| v.is_finite() && *v >= 0.0)
    }
}

/// Both checks for one benign/adversarial pair.
pub fn bound_record(
    sample_id: usize,
    benign: &AttributeProbs,
    adv: &AttributeProbs,
    npc: &NpcEngine,
    rnpc: &RnpcEngine,
) -> Result<BoundRecord> {
    Ok(BoundRecord::new(
        sample_id,
        npc_bound_check(benign, adv, npc)?,
        rnpc_bound_check(benign, adv, rnpc)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DirectComparison {
    pub checked: usize,
    pub violations: usize,
    pub mean_ratio_bound: f64,
    pub mean_scaled_joint_tv: f64,
}

/// `rnpc_ratio_bound ≤ attr_joint_tv / c_floor` on records with `c_floor > c_min`.
pub fn direct_comparison_check(records: &[BoundRecord], c_min: f64) -> DirectComparison {
    let mut out = DirectComparison::default();
    for r in records.iter().filter(|r| !r.zero_mass && r.c_floor > c_min) {
        let rhs = r.attr_joint_tv / r.c_floor;
        out.checked += 1;
        out.violations += usize::from(r.rnpc_ratio_bound > rhs + BOUND_TOL);
        out.mean_ratio_bound += r.rnpc_ratio_bound;
        out.mean_scaled_joint_tv += rhs;
    }
    if out.checked > 0 {
        out.mean_ratio_bound /= out.checked as f64;
        out.mean_scaled_joint_tv /= out.checked as f64;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BoundSummary {
    pub records: usize,
    pub npc_chain_violations: usize,
    pub rnpc_violations: usize,
    pub zero_mass_flags: usize,
    pub direct: DirectComparison,
    pub mean_tv_pred: f64,
    pub mean_rnpc_tv_pred: f64,
    pub mean_attr_joint_tv: f64,
    pub mean_rnpc_ratio_bound: f64,
}

impl BoundSummary {
    pub fn from_records(records: &[BoundRecord], c_min: f64) -> Self {
        let n = records.len().max(1) as f64;
        let mean = |f: fn(&BoundRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
        Self {
            records: records.len(),
            npc_chain_violations: records.iter().filter(|r| !r.npc().holds()).count(),
            rnpc_violations: records.iter().filter(|r| !r.rnpc().holds()).count(),
            zero_mass_flags: records.iter().filter(|r| r.zero_mass).count(),
            direct: direct_comparison_check(records, c_min),
            mean_tv_pred: mean(|r| r.tv_pred),
            mean_rnpc_tv_pred: mean(|r| r.rnpc_tv_pred),
            mean_attr_joint_tv: mean(|r| r.attr_joint_tv),
            mean_rnpc_ratio_bound: mean(|r| if r.zero_mass { 0.0 } else { r.rnpc_ratio_bound }),
        }
    }

    pub fn all_hold(&self) -> bool {
        self.npc_chain_violations == 0 && self.rnpc_violations == 0 && self.direct.violations == 0
    }

    pub fn flag_rate(&self) -> f64 {
        self.zero_mass_flags as f64 / self.records.max(1) as f64
    }
}

impl fmt::Display for BoundSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = |v: usize| if v == 0 { "pass" } else { "FAIL" };
        writeln!(f, "records: {}", self.records)?;
        writeln!(
            f,
            "npc chain: {} ({} violations)",
            verdict(self.npc_chain_violations),
            self.npc_chain_violations
        )?;
        writeln!(
            f,
            "rnpc ratio bound: {} ({} violations, {} flagged, flag rate {:.4})",
            verdict(self.rnpc_violations),
            self.rnpc_violations,
            self.zero_mass_flags,
            self.flag_rate()
        )?;
        writeln!(
            f,
            "direct comparison: {} ({} of {} violated; mean lhs {:.6}, mean rhs {:.6})",
            verdict(self.direct.violations),
            self.direct.violations,
            self.direct.checked,
            self.direct.mean_ratio_bound,
            self.direct.mean_scaled_joint_tv
        )?;
        writeln!(
            f,
            "means: npc tv {:.6}, joint attr tv {:.6}, rnpc tv {:.6}, rnpc ratio {:.6}",
            self.mean_tv_pred,
            self.mean_attr_joint_tv,
            self.mean_rnpc_tv_pred,
            self.mean_rnpc_ratio_bound
        )
    }
}

pub fn write_bound_records(records: &[BoundRecord], out: &mut impl Write) -> Result<()> {
    writeln!(out, "sample_id,tv_pred,attr_joint_tv,attr_sum_tv,rnpc_tv_pred,rnpc_ratio_bound,c_floor,zero_mass")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.sample_id,
            fmt_f64(&r.tv_pred),
            fmt_f64(&r.attr_joint_tv),
            fmt_f64(&r.attr_sum_tv),
            fmt_f64(&r.rnpc_tv_pred),
            fmt_f64(&r.rnpc_ratio_bound),
            fmt_f64(&r.c_floor),
            r.zero_mass
        )?;
    }
    Ok(())
}

pub fn read_bound_records(text: &str) -> Result<Vec<BoundRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let c: Vec<&str> = line.split(',').collect();
        if c.len() != 8 {
            return Err(Error::parse(i + 1, "expected 8 columns"));
        }
        let f = |j: usize| {
            c[j].parse::<f64>()
                .map_err(|_| Error::parse(i + 1, format!("bad number in column {}", j + 1)))
        };
        out.push(BoundRecord {
            sample_id: c[0]
                .parse()
                .map_err(|_| Error::parse(i + 1, "bad sample id"))?,
            tv_pred: f(1)?,
            attr_joint_tv: f(2)?,
            attr_sum_tv: f(3)?,
            rnpc_tv_pred: f(4)?,
            rnpc_ratio_bound: f(5)?,
            c_floor: f(6)?,
            zero_mass: c[7].parse().map_err(|_| Error::parse(i + 1, "bad flag"))?,
        });
    }
    Ok(out)
}

/// `max{1 − e^{−Kε}, e^{Kε} − 1}`.
pub fn alpha_epsilon(k: usize, eps: f64) -> f64 {
    let ke = k as f64 * eps;
    (1.0 - (-ke).exp()).max(ke.exp() - 1.0)
}

/// Gaussian-mechanism scale `√(2 ln(1.25/δ)) · ℓ / ε`.
pub fn dp_sigma(eps: f64, delta: f64, ell: f64) -> Result<f64> {
    if !(eps > 0.0) || !(delta > 0.0 && delta < 1.0) || !(ell >= 0.0) {
        return Err(Error::Precondition(
            "dp_sigma needs eps > 0, 0 < delta < 1, ell ≥ 0".into(),
        ));
    }
    Ok((2.0 * (1.25 / delta).ln()).sqrt() * ell / eps)
}

/// A recognizer whose outputs average softmax probabilities over fixed
/// Gaussian input perturbations.
#[derive(Debug, Clone)]
pub struct SmoothedRecognizer<M> {
    pub base: M,
    pub sigma: f64,
    noise: Vec<Vec<f64>>,
}

pub fn dp_wrap<M: AttributeModel>(
    base: M,
    sigma: f64,
    n_draws: usize,
    seed: u64,
) -> Result<SmoothedRecognizer<M>> {
    if n_draws == 0 {
        return Err(Error::Precondition("n_draws must be at least 1".into()));
    }
    let normal =
        Normal::new(0.0, sigma).map_err(|e| Error::Precondition(format!("noise scale: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = base.input_dim();
    let noise = (0..n_draws)
        .map(|_| (0..d).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    Ok(SmoothedRecognizer { base, sigma, noise })
}

impl<M> SmoothedRecognizer<M> {
    pub fn n_draws(&self) -> usize {
        self.noise.len()
    }
}

impl<M: AttributeModel> SmoothedRecognizer<M> {
    fn shifted(&self, x: &[f64], i: usize) -> Vec<f64> {
        x.iter().zip(&self.noise[i]).map(|(a, b)| a + b).collect()
    }

    fn draws(&self, x: &[f64]) -> Result<Vec<AttributeProbs>> {
        if x.len() != self.base.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.base.input_dim(),
                got: x.len(),
            });
        }
        (0..self.noise.len())
            .map(|i| self.base.forward(&self.shifted(x, i)))
            .collect()
    }
}

fn average(draws: &[AttributeProbs]) -> AttributeProbs {
    let n = draws.len() as f64;
    let mut probs: Vec<Vec<f64>> = draws[0].probs.iter().map(|p| vec![0.0; p.len()]).collect();
    for d in draws {
        for (acc, p) in probs.iter_mut().zip(&d.probs) {
            acc.iter_mut().zip(p).for_each(|(a, b)| *a += b / n);
        }
    }
    for p in &mut probs {
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
    }
    AttributeProbs { probs }
}

impl<M: AttributeModel> AttributeModel for SmoothedRecognizer<M> {
    fn input_dim(&self) -> usize {
        self.base.input_dim()
    }

    fn cardinalities(&self) -> Vec<usize> {
        self.base.cardinalities()
    }

    fn forward(&self, x: &[f64]) -> Result<AttributeProbs> {
        Ok(average(&self.draws(x)?))
    }

    fn log_prob_vjp(&self, x: &[f64], upstream: &[Vec<f64>]) -> Result<Vec<f64>> {
        let draws = self.draws(x)?;
        let mean = average(&draws);
        let n = draws.len() as f64;
        let mut out = vec![0.0; x.len()];
        for (i, d) in draws.iter().enumerate() {
            // d log p̄ = Σ_i p_i d log p_i / (n p̄)
            let up: Vec<Vec<f64>> = upstream
                .iter()
                .zip(&d.probs)
                .zip(&mean.probs)
                .map(|((u, p), m)| {
                    u.iter()
                        .zip(p)
                        .zip(m)
                        .map(|((u, p), m)| if *u == 0.0 { 0.0 } else { u * p / (n * m) })
                        .collect()
                })
                .collect();
            let g = self.base.log_prob_vjp(&self.shifted(x, i), &up)?;
            out.iter_mut().zip(&g).for_each(|(o, v)| *o += v);
        }
        Ok(out)
    }
}

/// `½ Σ_{y,a} |P_w(y, a) − P*(y, a)|`.
pub fn joint_distribution_tv(circuit: &Circuit, gt: &GroundTruth) -> Result<f64> {
    let schema = gt.schema();
    if circuit.schema() != schema {
        return Err(Error::Precondition(
            "circuit and ground-truth schemas differ".into(),
        ));
    }
    check_cap(schema)?;
    let nodes: Vec<Node> = schema.nodes().collect();
    let parts: Vec<f64> = nodes
        .par_iter()
        .map(|a| {
            circuit
                .log_joint_classes(a)
                .iter()
                .enumerate()
                .map(|(y, lw)| (lw.exp() - gt.joint(y, a)).abs())
                .sum::<f64>()
        })
        .collect();
    Ok(0.5 * parts.iter().sum::<f64>())
}

fn check_cap(schema: &VariableSchema) -> Result<()> {
    let size = schema.omega_size();
    if size > ENUMERATION_CAP {
        return Err(Error::SpaceTooLarge {
            size,
            cap: ENUMERATION_CAP,
        });
    }
    Ok(())
}

/// Smallest true node mass over the high-probability set.
pub fn ground_truth_gamma(gt: &GroundTruth, partition: &ClassPartition) -> f64 {
    partition
        .high_prob_nodes()
        .map(|a| gt.node_mass(a))
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimationReport {
    pub samples: usize,
    pub flagged: usize,
    /// `E[d_TV(Φ̂_θ,w, Φ̂*)]`.
    pub lhs: f64,
    /// `E[max_ỹ |1 − mass_θ / mass_*|]`.
    pub recognizer_term: f64,
    pub joint_tv: f64,
    pub gamma: f64,
    /// `(2/γ) · joint_tv`.
    pub circuit_term: f64,
    pub rhs: f64,
}

impl EstimationReport {
    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs + BOUND_TOL
    }
}

/// Compositional error check: the RNPC built from `recognizer` and
/// `circuit` against the optimal one built from the ground truth, with the
/// same partition and the same samples on both sides.
pub fn estimation_error_check(
    recognizer: &dyn AttributeModel,
    circuit: &Circuit,
    gt: &GroundTruth,
    partition: &ClassPartition,
    inputs: &[&[f64]],
) -> Result<EstimationReport> {
    if inputs.is_empty() {
        return Err(Error::EmptyData);
    }
    let model = RnpcEngine::new(circuit, partition)?;
    let exact = RnpcEngine::new(&gt.exact_circuit(), partition)?;
    let posterior = gt.posterior();
    let per: Vec<Option<(f64, f64)>> = inputs
        .par_iter()
        .map(|x| {
            let mt = model.masses(&recognizer.forward(x)?);
            let ms = exact.masses(&posterior.forward(x)?);
            let (ratio, _, zero) = ratio_stats(partition, &mt, &ms);
            let (st, ss) = (model.scores_from_masses(&mt), exact.scores_from_masses(&ms));
            if zero || st.zero_partition || ss.zero_partition {
                return Ok(None);
            }
            Ok(Some((tv(&st.normalized, &ss.normalized)?, ratio)))
        })
        .collect::<Result<_>>()?;
    let kept: Vec<(f64, f64)> = per.iter().flatten().copied().collect();
    let n = kept.len().max(1) as f64;
    let lhs = kept.iter().map(|v| v.0).sum::<f64>() / n;
    let recognizer_term = kept.iter().map(|v| v.1).sum::<f64>() / n;
    let joint_tv = joint_distribution_tv(circuit, gt)?;
    let gamma = ground_truth_gamma(gt, partition);
    let circuit_term = if joint_tv == 0.0 {
        0.0
    } else {
        2.0 / gamma * joint_tv
    };
    Ok(EstimationReport {
        samples: inputs.len(),
        flagged: inputs.len() - kept.len(),
        lhs,
        recognizer_term,
        joint_tv,
        gamma,
        circuit_term,
        rhs: recognizer_term + circuit_term,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffReport {
    pub samples: usize,
    pub flagged: usize,
    /// `E[d_TV(Φ̂*, P*(Y|x))]`.
    pub lhs: f64,
    /// `E[max_ỹ d_TV(P̄*(Y | A ∈ V_ỹ), P*(Y|x))]`.
    pub rhs: f64,
}

impl TradeoffReport {
    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs + BOUND_TOL
    }
}

pub fn tradeoff_check(
    gt: &GroundTruth,
    partition: &ClassPartition,
    inputs: &[&[f64]],
) -> Result<TradeoffReport> {
    if inputs.is_empty() {
        return Err(Error::EmptyData);
    }
    let circuit = gt.exact_circuit();
    let exact = RnpcEngine::new(&circuit, partition)?;
    let posterior = gt.posterior();
    let averages: Vec<Vec<f64>> = partition
        .pieces
        .iter()
        .filter(|p| !p.is_empty())
        .map(|piece| {
            let c = gt.schema().class_cardinality();
            let mut s = vec![0.0; c];
            for a in piece {
                s.iter_mut()
                    .zip(gt.class_given_attrs(a))
                    .for_each(|(x, y)| *x += y / piece.len() as f64);
            }
            s
        })
        .collect();
    let per: Vec<Option<(f64, f64)>> = inputs
        .par_iter()
        .map(|x| {
            let scores = exact.scores_from_masses(&exact.masses(&posterior.forward(x)?));
            if scores.partition_value < ZERO_PARTITION {
                return Ok(None);
            }
            let truth = gt.class_posterior(x)?;
            let mut worst: f64 = 0.0;
            for avg in &averages {
                worst = worst.max(tv(avg, &truth)?);
            }
            Ok(Some((tv(&scores.normalized, &truth)?, worst)))
        })
        .collect::<Result<_>>()?;
    let kept: Vec<(f64, f64)> = per.iter().flatten().copied().collect();
    let n = kept.len().max(1) as f64;
    Ok(TradeoffReport {
        samples: inputs.len(),
        flagged: inputs.len() - kept.len(),
        lhs: kept.iter().map(|v| v.0).sum::<f64>() / n,
        rhs: kept.iter().map(|v| v.1).sum::<f64>() / n,
    })
}

pub fn accuracy(predictions: &[usize], truths: &[usize]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch(predictions.len(), truths.len()));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyData);
    }
    Ok(predictions
        .iter()
        .zip(truths)
        .filter(|(a, b)| a == b)
        .count() as f64
        / predictions.len() as f64)
}

/// Per-attribute accuracy of predicted nodes against true nodes.
pub fn attribute_accuracy(predictions: &[Node], truths: &[Node]) -> Result<Vec<f64>> {
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch(predictions.len(), truths.len()));
    }
    let k = truths.first().ok_or(Error::EmptyData)?.len();
    (0..k)
        .map(|j| {
            let p: Vec<usize> = predictions.iter().map(|n| n[j]).collect();
            let t: Vec<usize> = truths.iter().map(|n| n[j]).collect();
            accuracy(&p, &t)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{learn_structure, StructureHyperparams};
    use crate::datagen::{preset, Generator};
    use crate::geometry::NeighborhoodRule;
    use crate::recognizer::RecognizerParams;
    use proptest::prelude::*;

    fn simplex(v: Vec<f64>) -> Vec<f64> {
        let s: f64 = v.iter().sum();
        v.iter().map(|x| x / s).collect()
    }

    proptest! {
        #[test]
        fn tv_is_a_metric(a in prop::collection::vec(0.01f64..1.0, 4), b in prop::collection::vec(0.01f64..1.0, 4), c in prop::collection::vec(0.01f64..1.0, 4)) {
            let (p, q, r) = (simplex(a), simplex(b), simplex(c));
            let pq = tv(&p, &q).unwrap();
            prop_assert!((pq - tv(&q, &p).unwrap()).abs() < 1e-15);
            prop_assert!(tv(&p, &p).unwrap() == 0.0);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&pq));
            prop_assert!(pq <= tv(&p, &r).unwrap() + tv(&r, &q).unwrap() + 1e-12);
        }
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!((tv(&[0.6, 0.4], &[0.4, 0.6]).unwrap() - 0.2).abs() < 1e-12);
        assert!(matches!(
            tv(&[1.0], &[0.5, 0.5]),
            Err(Error::LengthMismatch(1, 2))
        ));
    }

    #[test]
    fn disjoint_one_hots() {
        let cards = [3, 3, 3];
        let a = AttributeProbs::one_hot(&cards, &[0, 0, 0]);
        let b = AttributeProbs::one_hot(&cards, &[1, 1, 1]);
        assert_eq!(joint_tv(&a, &b).unwrap(), 1.0);
        assert_eq!(attr_sum_tv(&a, &b).unwrap(), 3.0);
        assert_eq!(joint_tv(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn alpha_and_sigma() {
        assert_eq!(alpha_epsilon(3, 0.0), 0.0);
        assert!((alpha_epsilon(1, 2f64.ln()) - 1.0).abs() < 1e-12);
        assert!(alpha_epsilon(2, 0.3) > alpha_epsilon(2, 0.2));
        assert!((dp_sigma(0.5, 0.01, 1.0).unwrap() - 6.215).abs() < 1e-3);
        assert!(dp_sigma(0.0, 0.01, 1.0).is_err());
    }

    #[test]
    fn direct_comparison_scaling() {
        let rec = |c: f64, ratio: f64| BoundRecord {
            sample_id: 0,
            tv_pred: 0.0,
            attr_joint_tv: 0.1,
            attr_sum_tv: 0.1,
            rnpc_tv_pred: 0.0,
            rnpc_ratio_bound: ratio,
            c_floor: c,
            zero_mass: false,
        };
        assert_eq!(direct_comparison_check(&[rec(1.0, 0.1)], 0.0).violations, 0);
        assert_eq!(
            direct_comparison_check(&[rec(1.0, 0.15)], 0.0).violations,
            1
        );
        assert_eq!(
            direct_comparison_check(&[rec(0.5, 0.15)], 0.0).violations,
            0
        );
        assert_eq!(direct_comparison_check(&[rec(0.5, 0.15)], 0.6).checked, 0);
    }

    #[test]
    fn bound_records_round_trip() {
        let r = BoundRecord {
            sample_id: 7,
            tv_pred: 0.1 / 3.0,
            attr_joint_tv: 0.2,
            attr_sum_tv: 0.3,
            rnpc_tv_pred: 1e-17,
            rnpc_ratio_bound: 0.5,
            c_floor: 0.9,
            zero_mass: false,
        };
        let mut buf = Vec::new();
        write_bound_records(&[r], &mut buf).unwrap();
        assert_eq!(
            read_bound_records(std::str::from_utf8(&buf).unwrap()).unwrap(),
            vec![r]
        );
    }

    fn setup() -> (Generator, ClassPartition, Circuit) {
        let g = Generator::new(&preset("mnist-add3-like").unwrap()).unwrap();
        let p = g.planted_partition(0.01).unwrap();
        let c = g.ground_truth().exact_circuit();
        (g, p, c)
    }

    #[test]
    fn equal_inputs_give_zero_bounds() {
        let (g, p, c) = setup();
        let npc = NpcEngine::new(&c).unwrap();
        let rnpc = RnpcEngine::new(&c, &p).unwrap();
        let s = g.sample(1, 3);
        let probs = g.ground_truth().posterior().forward(&s[0].x).unwrap();
        let r = bound_record(0, &probs, &probs, &npc, &rnpc).unwrap();
        assert_eq!(
            (
                r.tv_pred,
                r.attr_joint_tv,
                r.attr_sum_tv,
                r.rnpc_tv_pred,
                r.rnpc_ratio_bound
            ),
            (0.0, 0.0, 0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn mass_shift_inside_neighborhood_is_invisible() {
        let (_, p, c) = setup();
        let p = p.with_radius(1, NeighborhoodRule::Strict).unwrap();
        let rnpc = RnpcEngine::new(&c, &p).unwrap();
        let node = p.pieces.iter().find(|v| !v.is_empty()).unwrap()[0].clone();
        let cards = c.schema().attribute_cardinalities().to_vec();
        let benign = AttributeProbs::one_hot(&cards, &node);
        let mut moved = node.clone();
        moved[0] = (moved[0] + 1) % cards[0];
        if p.class_of(&moved).is_some() {
            return;
        }
        let adv = AttributeProbs::one_hot(&cards, &moved);
        let r = rnpc_bound_check(&benign, &adv, &rnpc).unwrap();
        assert!(!r.zero_mass || r.holds());
        if !r.zero_mass {
            assert_eq!(r.ratio_bound, 0.0);
            assert!(r.tv_pred < 1e-12);
        }
    }

    #[test]
    fn whole_space_neighborhoods_are_constant() {
        let (g, p, c) = setup();
        let k = c.schema().num_attributes();
        let p = p.with_radius(k, NeighborhoodRule::Ball).unwrap();
        let rnpc = RnpcEngine::new(&c, &p).unwrap();
        let s = g.sample(2, 9);
        let post = g.ground_truth().posterior();
        let a = post.forward(&s[0].x).unwrap();
        let b = post.forward(&s[1].x).unwrap();
        let r = rnpc_bound_check(&a, &b, &rnpc).unwrap();
        assert_eq!(r.c_floor, 1.0);
        assert_eq!(r.ratio_bound, 0.0);
        assert_eq!(r.tv_pred, 0.0);
    }

    #[test]
    fn random_pairs_satisfy_both_chains() {
        let (_, p, c) = setup();
        let npc = NpcEngine::new(&c).unwrap();
        let rnpc = RnpcEngine::new(&c, &p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cards = c.schema().attribute_cardinalities().to_vec();
        let random = |rng: &mut ChaCha8Rng| AttributeProbs {
            probs: cards
                .iter()
                .map(|&n| {
                    simplex(
                        (0..n)
                            .map(|_| rand::Rng::random::<f64>(rng).powi(4) + 1e-6)
                            .collect(),
                    )
                })
                .collect(),
        };
        let mut records = Vec::new();
        for i in 0..200 {
            let (a, b) = (random(&mut rng), random(&mut rng));
            records.push(bound_record(i, &a, &b, &npc, &rnpc).unwrap());
        }
        let s = BoundSummary::from_records(&records, 0.0);
        assert!(s.all_hold(), "{s}");
        assert!(records.iter().all(BoundRecord::is_finite));
    }

    #[test]
    fn exact_components_have_zero_estimation_error() {
        let (g, p, c) = setup();
        let gt = g.ground_truth();
        let s = g.sample(50, 1);
        let xs: Vec<&[f64]> = s.iter().map(|v| v.x.as_slice()).collect();
        let rep = estimation_error_check(&gt.posterior(), &c, &gt, &p, &xs).unwrap();
        assert!(rep.lhs < 1e-12 && rep.rhs < 1e-9, "{rep:?}");
    }

    #[test]
    fn perturbed_components_respect_estimation_bound() {
        let (g, p, exact) = setup();
        let gt = g.ground_truth();
        let s = g.sample(300, 2);
        let xs: Vec<&[f64]> = s.iter().map(|v| v.x.as_slice()).collect();
        let arch = crate::recognizer::Architecture {
            input_dim: g.input_dim(),
            cardinalities: g.schema().attribute_cardinalities().to_vec(),
            hidden_dim: 8,
            fields: Some(g.recognizer_fields()),
        };
        let noisy = RecognizerParams::init(&arch, 5).unwrap();
        let rows: Vec<Vec<usize>> = s
            .iter()
            .map(|v| {
                std::iter::once(v.label)
                    .chain(v.attrs.iter().copied())
                    .collect()
            })
            .collect();
        let learned = learn_structure(g.schema(), &rows, &StructureHyperparams::default()).unwrap();
        for (rec, circ) in [
            (&gt.posterior() as &dyn AttributeModel, &learned),
            (&noisy, &exact),
            (&noisy, &learned),
        ] {
            let rep = estimation_error_check(rec, circ, &gt, &p, &xs).unwrap();
            assert!(rep.holds(), "{rep:?}");
        }
    }

    #[test]
    fn tradeoff_bound_holds_with_label_noise() {
        let mut spec = preset("mnist-add3-like").unwrap();
        spec.label_noise = 0.1;
        let g = Generator::new(&spec).unwrap();
        let gt = g.ground_truth();
        let p = g.planted_partition(0.01).unwrap();
        let s = g.sample(200, 5);
        let xs: Vec<&[f64]> = s.iter().map(|v| v.x.as_slice()).collect();
        let rep = tradeoff_check(&gt, &p, &xs).unwrap();
        assert!(rep.holds(), "{rep:?}");
        assert!(rep.rhs > 0.0);
    }

    #[test]
    fn smoothing_is_valid_and_reduces_to_base() {
        let (g, _, _) = setup();
        let arch = crate::recognizer::Architecture {
            input_dim: g.input_dim(),
            cardinalities: g.schema().attribute_cardinalities().to_vec(),
            hidden_dim: 8,
            fields: Some(g.recognizer_fields()),
        };
        let base = RecognizerParams::init(&arch, 1).unwrap();
        let x = g.sample(1, 0).remove(0).x;
        let plain = dp_wrap(base.clone(), 0.0, 3, 1).unwrap();
        let a = plain.forward(&x).unwrap();
        let b = base.forward(&x).unwrap();
        for (p, q) in a.probs.iter().zip(&b.probs) {
            assert!(tv(p, q).unwrap() < 1e-12);
        }
        let s = dp_wrap(base, 0.5, 5, 2).unwrap();
        for p in s.forward(&x).unwrap().probs {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12 && p.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn smoothing_gradient_matches_differences() {
        let arch = crate::recognizer::Architecture {
            input_dim: 4,
            cardinalities: vec![3, 2],
            hidden_dim: 5,
            fields: None,
        };
        let base = RecognizerParams::init(&arch, 3).unwrap();
        let s = dp_wrap(base, 0.3, 4, 7).unwrap();
        let x = [0.2, 0.4, 0.6, 0.8];
        let g = crate::recognizer::input_gradient(&s, &x, &[1, 0], &[1, 2]).unwrap();
        for i in 0..4 {
            let h = 1e-5;
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let lp = crate::recognizer::attack_loss(&s, &xp, &[1, 0], &[1, 2]).unwrap();
            let lm = crate::recognizer::attack_loss(&s, &xm, &[1, 0], &[1, 2]).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "{i}: {fd} vs {}",
                g[i]
            );
        }
    }

    #[test]
    fn more_draws_reduce_variance() {
        let arch = crate::recognizer::Architecture {
            input_dim: 4,
            cardinalities: vec![3],
            hidden_dim: 6,
            fields: None,
        };
        let base = RecognizerParams::init(&arch, 11).unwrap();
        let x = [0.5; 4];
        let var = |draws: usize| {
            let outs: Vec<f64> = (0..40)
                .map(|seed| {
                    dp_wrap(base.clone(), 1.0, draws, seed)
                        .unwrap()
                        .forward(&x)
                        .unwrap()
                        .probs[0][0]
                })
                .collect();
            let m = outs.iter().sum::<f64>() / outs.len() as f64;
            outs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / outs.len() as f64
        };
        assert!(var(32) < var(2));
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2], &[1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 2]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 0], &[1, 2]).unwrap(), 0.5);
        assert!(accuracy(&[1], &[1, 2]).is_err());
        assert_eq!(
            attribute_accuracy(&[vec![0, 1], vec![1, 1]], &[vec![0, 0], vec![1, 1]]).unwrap(),
            vec![1.0, 0.5]
        );
    }
}
