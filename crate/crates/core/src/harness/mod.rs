//! The experiment pipeline: data generation, recognizer training, circuit
//! learning, partitioning, benign and adversarial evaluation of NPC, RNPC
//! and CBM-lite, bound verification and artifact emission.

mod cbm;
mod report;
mod stages;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cbm::{
    cbm_infer, parse_cbm_head, train_cbm_lite, write_cbm_head, CbmConfig, CbmLiteModel, LinearHead,
};
pub use report::{read_results, report, Report};
pub use stages::*;

use crate::attacks::{attack_batch, AttackConfig, Norm};
use crate::circuit::{fit_parameters_cccp_with, learn_structure, Circuit, StructureHyperparams};
use crate::datagen::{preset, Generator, GeneratorSpec, LabeledSample};
use crate::error::{Error, Result};
use crate::geometry::{build_high_prob_set, partition_by_class, ClassPartition, NeighborhoodRule};
use crate::integrator::{predict, ClassScores, Mode, NpcEngine, QueryCounter, RnpcEngine};
use crate::metrics::{
    dp_sigma, dp_wrap, estimation_error_check, npc_bound_check, rnpc_bound_check, tradeoff_check,
    tv, write_bound_records, BoundRecord, BoundSummary, EstimationReport, NpcCheck, RnpcCheck,
    TradeoffReport,
};
use crate::recognizer::{
    argmax, train, Architecture, AttributeModel, AttributeProbs, RecognizerParams, TrainConfig,
    TrainOutcome,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeKind {
    Npc,
    Rnpc,
    Cbm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackGrid {
    pub norm: Norm,
    pub bounds: Vec<f64>,
    /// 1-based attribute subsets; empty means every single attribute.
    pub attacked_sets: Vec<Vec<usize>>,
    pub steps: usize,
    pub step_size: Option<f64>,
    pub random_start: bool,
}

impl Default for AttackGrid {
    fn default() -> Self {
        Self {
            norm: Norm::Linf,
            bounds: vec![0.0, 0.01, 0.03, 0.05, 0.07, 0.09, 0.11],
            attacked_sets: Vec::new(),
            steps: 50,
            step_size: None,
            random_start: true,
        }
    }
}

impl AttackGrid {
    pub fn sets(&self, k: usize) -> Vec<Vec<usize>> {
        if self.attacked_sets.is_empty() {
            (1..=k).map(|a| vec![a]).collect()
        } else {
            self.attacked_sets.clone()
        }
    }
}

/// Randomized-smoothing ablation: an L2 attack of radius `bound` against a
/// recognizer smoothed with `σ = dp_sigma(eps, delta, bound)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpAblation {
    pub eps: f64,
    pub delta: f64,
    pub n_draws: usize,
    pub bound: f64,
    pub steps: usize,
    pub attacked_sets: Vec<Vec<usize>>,
}

impl Default for DpAblation {
    fn default() -> Self {
        Self {
            eps: 0.5,
            delta: 0.01,
            n_draws: 20,
            bound: 0.05,
            steps: 20,
            attacked_sets: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub preset: String,
    /// Inline generator spec; takes precedence over `spec_path` and `preset`.
    pub spec: Option<GeneratorSpec>,
    pub spec_path: Option<PathBuf>,
    pub n_train: usize,
    pub n_test: usize,
    pub train: TrainConfig,
    pub structure: StructureHyperparams,
    pub cccp_iters: usize,
    pub laplace_alpha: f64,
    /// Frequency threshold for the high-probability set.
    pub gamma: f64,
    pub rule: NeighborhoodRule,
    pub modes: Vec<ModeKind>,
    /// RNPC radii to evaluate; empty means the intrinsic radius.
    pub radii: Vec<usize>,
    pub attack: AttackGrid,
    pub dp: Option<DpAblation>,
    pub cbm: CbmConfig,
    pub bound_checks: bool,
    /// Records with a smaller benign neighborhood floor skip the direct comparison.
    pub c_floor_min: f64,
    pub theory_checks: bool,
    pub out: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: "mnist-add3-like".into(),
            spec: None,
            spec_path: None,
            n_train: 5000,
            n_test: 500,
            train: TrainConfig::default(),
            structure: StructureHyperparams::default(),
            cccp_iters: 10,
            laplace_alpha: 1.0,
            gamma: 0.01,
            rule: NeighborhoodRule::Strict,
            modes: vec![ModeKind::Npc, ModeKind::Rnpc, ModeKind::Cbm],
            radii: Vec::new(),
            attack: AttackGrid::default(),
            dp: None,
            cbm: CbmConfig::default(),
            bound_checks: true,
            c_floor_min: 0.01,
            theory_checks: true,
            out: PathBuf::from("rnpc-out"),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::Precondition(
                "at least one mode must be enabled".into(),
            ));
        }
        if self.attack.bounds.is_empty() {
            return Err(Error::Precondition("the attack bound list is empty".into()));
        }
        if self.attack.bounds.iter().any(|b| !(*b >= 0.0)) {
            return Err(Error::Precondition(
                "attack bounds must be nonnegative".into(),
            ));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Precondition(
                "n_train and n_test must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn generator_spec(&self) -> Result<GeneratorSpec> {
        let mut spec = match (&self.spec, &self.spec_path) {
            (Some(s), _) => s.clone(),
            (None, Some(p)) => serde_json::from_str(&fs::read_to_string(p)?)?,
            (None, None) => preset(&self.preset)?,
        };
        spec.seed = stage_seed(self.seed, "data");
        Ok(spec)
    }
}

/// Seed for a named stage, derived from the master seed.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = master ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Everything trained before evaluation.
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub generator: Generator,
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub recognizer: RecognizerParams,
    pub train_loss: Vec<f64>,
    pub circuit: Circuit,
    pub cccp_trace: Vec<f64>,
    /// Built from training data at the intrinsic radius under `config.rule`.
    pub partition: ClassPartition,
    pub cbm: Option<LinearHead>,
}

pub(crate) fn rows_of(samples: &[LabeledSample]) -> Vec<Vec<usize>> {
    samples
        .iter()
        .map(|s| {
            std::iter::once(s.label)
                .chain(s.attrs.iter().copied())
                .collect()
        })
        .collect()
}

pub fn architecture(generator: &Generator, hidden_dim: usize) -> Architecture {
    Architecture {
        input_dim: generator.input_dim(),
        cardinalities: generator.schema().attribute_cardinalities().to_vec(),
        hidden_dim,
        fields: Some(generator.recognizer_fields()),
    }
}

pub fn learn_circuit(
    cfg: &ExperimentConfig,
    generator: &Generator,
    rows: &[Vec<usize>],
) -> Result<(Circuit, Vec<f64>)> {
    let hp = StructureHyperparams {
        seed: stage_seed(cfg.seed, "structure"),
        ..cfg.structure.clone()
    };
    let structure = learn_structure(generator.schema(), rows, &hp)?;
    let fit = fit_parameters_cccp_with(&structure, rows, cfg.cccp_iters, cfg.laplace_alpha)?;
    Ok((fit.circuit, fit.log_likelihood))
}

pub fn build_partition(
    cfg: &ExperimentConfig,
    generator: &Generator,
    rows: &[Vec<usize>],
) -> Result<ClassPartition> {
    let attrs: Vec<Vec<usize>> = rows.iter().map(|r| r[1..].to_vec()).collect();
    let v = build_high_prob_set(generator.schema(), &attrs, cfg.gamma)?;
    let p = partition_by_class(generator.schema(), &v, rows)?;
    let r = p.radius;
    p.with_radius(r, cfg.rule)
}

pub fn train_recognizer(
    cfg: &ExperimentConfig,
    generator: &Generator,
    train_set: &[LabeledSample],
) -> Result<TrainOutcome> {
    let tcfg = TrainConfig {
        seed: stage_seed(cfg.seed, "train"),
        ..cfg.train.clone()
    };
    train(&architecture(generator, tcfg.hidden_dim), train_set, &tcfg)
}

/// Fits the CBM-lite head when the mode is enabled.
pub fn train_cbm(
    cfg: &ExperimentConfig,
    generator: &Generator,
    recognizer: &RecognizerParams,
    train_set: &[LabeledSample],
) -> Result<Option<LinearHead>> {
    if !cfg.modes.contains(&ModeKind::Cbm) {
        return Ok(None);
    }
    let inputs: Vec<&[f64]> = train_set.iter().map(|s| s.x.as_slice()).collect();
    let labels: Vec<usize> = train_set.iter().map(|s| s.label).collect();
    let ccfg = CbmConfig {
        seed: stage_seed(cfg.seed, "cbm"),
        ..cfg.cbm.clone()
    };
    Ok(Some(
        train_cbm_lite(
            recognizer,
            &inputs,
            &labels,
            generator.schema().class_cardinality(),
            &ccfg,
        )?
        .head,
    ))
}

pub fn generate_data(
    cfg: &ExperimentConfig,
) -> Result<(Generator, Vec<LabeledSample>, Vec<LabeledSample>)> {
    let generator = Generator::new(&cfg.generator_spec()?)?;
    let train_set = generator.sample(cfg.n_train, 1);
    let test = generator.sample(cfg.n_test, 2);
    Ok((generator, train_set, test))
}

impl Pipeline {
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (generator, train_set, test) =
            generate_data(config).map_err(|e| e.in_stage("gen-data"))?;
        let outcome =
            train_recognizer(config, &generator, &train_set).map_err(|e| e.in_stage("train"))?;
        let rows = rows_of(&train_set);
        let (circuit, cccp_trace) =
            learn_circuit(config, &generator, &rows).map_err(|e| e.in_stage("learn-circuit"))?;
        let partition =
            build_partition(config, &generator, &rows).map_err(|e| e.in_stage("partition"))?;
        let cbm = train_cbm(config, &generator, &outcome.params, &train_set)
            .map_err(|e| e.in_stage("train-cbm"))?;
        Ok(Self {
            config: config.clone(),
            generator,
            train: train_set,
            test,
            recognizer: outcome.params,
            train_loss: outcome.epoch_loss,
            circuit,
            cccp_trace,
            partition,
            cbm,
        })
    }

    pub fn radii(&self) -> Vec<usize> {
        if self.config.radii.is_empty() {
            vec![self.partition.radius]
        } else {
            self.config.radii.clone()
        }
    }

    pub fn evaluator(&self) -> Result<Evaluator> {
        let mut engines = Vec::new();
        let mut npc = None;
        for kind in &self.config.modes {
            match kind {
                ModeKind::Npc => {
                    let e = NpcEngine::new(&self.circuit)?;
                    npc = Some(engines.len());
                    engines.push(Engine::Npc(e));
                }
                ModeKind::Rnpc => {
                    for r in self.radii() {
                        let p = self.partition.clone().with_radius(r, self.config.rule)?;
                        engines.push(Engine::Rnpc(RnpcEngine::new(&self.circuit, &p)?));
                    }
                }
                ModeKind::Cbm => {
                    if let Some(h) = &self.cbm {
                        engines.push(Engine::Cbm(h.clone()));
                    }
                }
            }
        }
        Ok(Evaluator {
            engines,
            npc,
            omega: self.generator.schema().omega_size(),
            v_size: self.partition.num_nodes(),
        })
    }

    pub fn test_inputs(&self) -> Vec<&[f64]> {
        self.test.iter().map(|s| s.x.as_slice()).collect()
    }
}

pub enum Engine {
    Npc(NpcEngine),
    Rnpc(RnpcEngine),
    Cbm(LinearHead),
}

impl Engine {
    pub fn mode(&self) -> Mode {
        match self {
            Engine::Npc(_) => Mode::Npc,
            Engine::Rnpc(e) => Mode::Rnpc { r: e.radius() },
            Engine::Cbm(_) => Mode::Cbm,
        }
    }

    pub fn infer(&self, probs: &AttributeProbs) -> Result<(ClassScores, QueryCounter)> {
        match self {
            Engine::Npc(e) => e.infer(probs),
            Engine::Rnpc(e) => e.infer(probs),
            Engine::Cbm(h) => Ok((
                h.scores(probs)?,
                QueryCounter {
                    circuit_conditional_queries: 0,
                    recognizer_forwards: 1,
                },
            )),
        }
    }
}

/// The enabled inference modes over one trained pipeline.
pub struct Evaluator {
    pub engines: Vec<Engine>,
    npc: Option<usize>,
    omega: u128,
    v_size: usize,
}

/// Per-sample outputs of every engine.
struct Scored {
    predictions: Vec<Vec<usize>>,
    normalized: Vec<Vec<Vec<f64>>>,
    queries: Vec<u64>,
}

impl Evaluator {
    fn score_all(&self, probs: &[AttributeProbs]) -> Result<Scored> {
        let per: Vec<Vec<(ClassScores, QueryCounter)>> = probs
            .par_iter()
            .map(|p| {
                self.engines
                    .iter()
                    .map(|e| e.infer(p))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let m = self.engines.len();
        let mut out = Scored {
            predictions: vec![Vec::new(); m],
            normalized: vec![Vec::new(); m],
            queries: vec![0; m],
        };
        for sample in per {
            for (j, (s, q)) in sample.into_iter().enumerate() {
                out.predictions[j].push(predict(&s));
                out.queries[j] += q.circuit_conditional_queries;
                out.normalized[j].push(s.normalized);
            }
        }
        Ok(out)
    }

    fn expected_queries(&self, mode: Mode) -> u64 {
        match mode {
            Mode::Npc => self.omega as u64,
            Mode::Rnpc { .. } => self.v_size as u64,
            Mode::Cbm => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub mode: String,
    /// `plain` or `dp`.
    pub recognizer: String,
    pub norm: String,
    pub bound: f64,
    pub attacked_set: Vec<usize>,
    pub benign_acc: f64,
    pub adv_acc: f64,
    pub mean_tv: f64,
    pub attacked_attr_acc: f64,
    pub queries_per_inference: u64,
    pub expected_queries: u64,
    pub omega_size: u128,
    pub v_size: usize,
    pub queries_ok: bool,
    /// Mean joint attribute TV for NPC, mean neighborhood ratio bound for RNPC.
    pub bound_mean: Option<f64>,
    pub bound_violations: usize,
    pub flagged: usize,
    pub constant_predictions: bool,
}

pub const RESULTS_HEADER: &str = "mode,recognizer,norm,bound,attacked_set,benign_acc,adv_acc,mean_tv,attacked_attr_acc,queries_per_inference,expected_queries,omega_size,v_size,queries_ok,bound_mean,bound_violations,flagged,constant_predictions";

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

pub fn set_label(set: &[usize]) -> String {
    set.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

impl ResultRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.mode,
            self.recognizer,
            self.norm,
            f6(self.bound),
            set_label(&self.attacked_set),
            f6(self.benign_acc),
            f6(self.adv_acc),
            self.mean_tv_text(),
            f6(self.attacked_attr_acc),
            self.queries_per_inference,
            self.expected_queries,
            self.omega_size,
            self.v_size,
            self.queries_ok,
            self.bound_mean.map(f6).unwrap_or_default(),
            self.bound_violations,
            self.flagged,
            self.constant_predictions
        )
    }

    fn mean_tv_text(&self) -> String {
        // exact zero matters for the degeneracy check
        if self.mean_tv == 0.0 {
            "0".into()
        } else {
            format!("{:.6e}", self.mean_tv)
        }
    }
}

/// A bound record tagged with the attack that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedRecord {
    pub recognizer: String,
    pub mode: String,
    pub norm: String,
    pub bound: f64,
    pub attacked_set: Vec<usize>,
    pub record: BoundRecord,
}

pub struct SweepOutput {
    pub rows: Vec<ResultRow>,
    pub records: Vec<TaggedRecord>,
}

fn attr_accuracy(probs: &[AttributeProbs], samples: &[LabeledSample], attacked: &[usize]) -> f64 {
    let mut hits = 0usize;
    for (p, s) in probs.iter().zip(samples) {
        for &k in attacked {
            hits += usize::from(argmax(&p.probs[k - 1]) == s.attrs[k - 1]);
        }
    }
    hits as f64 / (probs.len() * attacked.len()).max(1) as f64
}

fn accuracy_of(pred: &[usize], samples: &[LabeledSample]) -> f64 {
    pred.iter()
        .zip(samples)
        .filter(|(p, s)| **p == s.label)
        .count() as f64
        / samples.len().max(1) as f64
}

/// Runs the attack grid against `model` and evaluates every engine on the
/// clean and perturbed outputs.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    evaluator: &Evaluator,
    model: &dyn AttributeModel,
    recognizer: &str,
    samples: &[LabeledSample],
    norm: Norm,
    bounds: &[f64],
    sets: &[Vec<usize>],
    base: &AttackConfig,
    bound_checks: bool,
) -> Result<SweepOutput> {
    let inputs: Vec<(&[f64], &[usize], usize)> = samples
        .iter()
        .map(|s| (s.x.as_slice(), s.attrs.as_slice(), s.label))
        .collect();
    let benign: Vec<AttributeProbs> = samples
        .par_iter()
        .map(|s| model.forward(&s.x))
        .collect::<Result<_>>()?;
    let clean = evaluator.score_all(&benign)?;
    let rnpc_engines: Vec<(usize, &RnpcEngine)> = evaluator
        .engines
        .iter()
        .enumerate()
        .filter_map(|(j, e)| {
            if let Engine::Rnpc(r) = e {
                Some((j, r))
            } else {
                None
            }
        })
        .collect();
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for (si, set) in sets.iter().enumerate() {
        for (bi, &bound) in bounds.iter().enumerate() {
            let cfg = AttackConfig {
                norm,
                bound,
                attacked: set.clone(),
                seed: crate::harness::stage_seed(base.seed, &format!("{recognizer}/{si}/{bi}")),
                ..base.clone()
            };
            let pairs = attack_batch(model, &inputs, &cfg, false)?;
            let adv: Vec<AttributeProbs> = pairs
                .par_iter()
                .map(|p| model.forward(&p.x_tilde))
                .collect::<Result<_>>()?;
            let attacked = evaluator.score_all(&adv)?;
            let attacked_attr_acc = attr_accuracy(&adv, samples, set);
            let mut per_engine_records: Vec<Vec<BoundRecord>> =
                vec![Vec::new(); evaluator.engines.len()];
            if bound_checks {
                if let Some(npc_index) = evaluator.npc {
                    let Engine::Npc(npc) = &evaluator.engines[npc_index] else {
                        unreachable!()
                    };
                    let chain: Vec<NpcCheck> = (0..samples.len())
                        .into_par_iter()
                        .map(|i| npc_bound_check(&benign[i], &adv[i], npc))
                        .collect::<Result<_>>()?;
                    let empty = RnpcCheck {
                        tv_pred: 0.0,
                        ratio_bound: 0.0,
                        c_floor: 0.0,
                        zero_mass: false,
                    };
                    per_engine_records[npc_index] = chain
                        .iter()
                        .enumerate()
                        .map(|(i, c)| BoundRecord::new(i, *c, empty))
                        .collect();
                    for &(j, rnpc) in &rnpc_engines {
                        per_engine_records[j] = (0..samples.len())
                            .into_par_iter()
                            .map(|i| {
                                Ok(BoundRecord::new(
                                    i,
                                    chain[i],
                                    rnpc_bound_check(&benign[i], &adv[i], rnpc)?,
                                ))
                            })
                            .collect::<Result<_>>()?;
                    }
                }
            }
            for (j, engine) in evaluator.engines.iter().enumerate() {
                let mode = engine.mode();
                let mean_tv = clean.normalized[j]
                    .iter()
                    .zip(&attacked.normalized[j])
                    .map(|(a, b)| tv(a, b))
                    .sum::<Result<f64>>()?
                    / samples.len() as f64;
                let total = clean.queries[j] + attacked.queries[j];
                let n = 2 * samples.len() as u64;
                let expected = evaluator.expected_queries(mode);
                let per_inference = total / n;
                let queries_ok = total % n == 0
                    && per_inference == expected
                    && (evaluator.v_size as u128) <= evaluator.omega;
                let recs = &per_engine_records[j];
                let (bound_mean, bound_violations, flagged) = if recs.is_empty() {
                    (None, 0, 0)
                } else {
                    let s = BoundSummary::from_records(recs, 0.0);
                    match mode {
                        Mode::Npc => (Some(s.mean_attr_joint_tv), s.npc_chain_violations, 0),
                        _ => (
                            Some(s.mean_rnpc_ratio_bound),
                            s.rnpc_violations,
                            s.zero_mass_flags,
                        ),
                    }
                };
                let first_clean = clean.predictions[j][0];
                let constant_predictions = clean.predictions[j]
                    .iter()
                    .chain(&attacked.predictions[j])
                    .all(|&p| p == first_clean);
                rows.push(ResultRow {
                    mode: mode.to_string(),
                    recognizer: recognizer.to_owned(),
                    norm: norm.name().to_owned(),
                    bound,
                    attacked_set: set.clone(),
                    benign_acc: accuracy_of(&clean.predictions[j], samples),
                    adv_acc: accuracy_of(&attacked.predictions[j], samples),
                    mean_tv,
                    attacked_attr_acc,
                    queries_per_inference: per_inference,
                    expected_queries: expected,
                    omega_size: evaluator.omega,
                    v_size: evaluator.v_size,
                    queries_ok,
                    bound_mean,
                    bound_violations,
                    flagged,
                    constant_predictions,
                });
                if matches!(mode, Mode::Rnpc { .. }) {
                    for r in recs {
                        records.push(TaggedRecord {
                            recognizer: recognizer.to_owned(),
                            mode: mode.to_string(),
                            norm: norm.name().to_owned(),
                            bound,
                            attacked_set: set.clone(),
                            record: *r,
                        });
                    }
                }
            }
        }
    }
    Ok(SweepOutput { rows, records })
}

/// Final state of a pipeline run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub rows: Vec<ResultRow>,
    pub bounds: BoundSummary,
    pub estimation: Option<EstimationReport>,
    pub tradeoff: Option<TradeoffReport>,
    pub queries_ok: bool,
    pub cccp_monotone: bool,
}

impl RunOutcome {
    /// Every enabled bound assertion held.
    pub fn bounds_ok(&self) -> bool {
        self.bounds.all_hold()
            && self.queries_ok
            && self.estimation.is_none_or(|e| e.holds())
            && self.tradeoff.is_none_or(|t| t.holds())
    }
}

pub fn write_results(rows: &[ResultRow]) -> String {
    let mut out = String::new();
    writeln!(out, "{RESULTS_HEADER}").unwrap();
    for r in rows {
        writeln!(out, "{}", r.to_csv()).unwrap();
    }
    out
}

/// Mean and population standard deviation of adversarial accuracy across
/// single-attribute attacks, per (recognizer, mode, norm, bound).
pub fn write_summary(rows: &[ResultRow]) -> String {
    let mut keys: Vec<(String, String, String, String)> = Vec::new();
    for r in rows.iter().filter(|r| r.attacked_set.len() == 1) {
        let key = (
            r.recognizer.clone(),
            r.mode.clone(),
            r.norm.clone(),
            f6(r.bound),
        );
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut out = String::new();
    writeln!(out, "recognizer,mode,norm,bound,sets,benign_acc,adv_acc_mean,adv_acc_std,attacked_attr_acc_mean,mean_tv").unwrap();
    for key in keys {
        let group: Vec<&ResultRow> = rows
            .iter()
            .filter(|r| {
                r.attacked_set.len() == 1
                    && (&r.recognizer, &r.mode, &r.norm, f6(r.bound))
                        == (&key.0, &key.1, &key.2, key.3.clone())
            })
            .collect();
        let n = group.len() as f64;
        let mean = group.iter().map(|r| r.adv_acc).sum::<f64>() / n;
        let std = (group
            .iter()
            .map(|r| (r.adv_acc - mean).powi(2))
            .sum::<f64>()
            / n)
            .sqrt();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{:.6e}",
            key.0,
            key.1,
            key.2,
            key.3,
            group.len(),
            f6(group.iter().map(|r| r.benign_acc).sum::<f64>() / n),
            f6(mean),
            f6(std),
            f6(group.iter().map(|r| r.attacked_attr_acc).sum::<f64>() / n),
            group.iter().map(|r| r.mean_tv).sum::<f64>() / n
        )
        .unwrap();
    }
    out
}

fn write_tagged_records(records: &[TaggedRecord]) -> Result<String> {
    let mut body = Vec::new();
    write_bound_records(
        &records.iter().map(|t| t.record).collect::<Vec<_>>(),
        &mut body,
    )?;
    let text = String::from_utf8(body).expect("ASCII CSV");
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            writeln!(out, "recognizer,mode,norm,bound,attacked_set,{line}").unwrap();
        } else {
            let t = &records[i - 1];
            writeln!(
                out,
                "{},{},{},{},{},{line}",
                t.recognizer,
                t.mode,
                t.norm,
                f6(t.bound),
                set_label(&t.attacked_set)
            )
            .unwrap();
        }
    }
    Ok(out)
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Runs every stage and writes artifacts under `config.out`.
pub fn run(config: &ExperimentConfig) -> Result<RunOutcome> {
    let p = Pipeline::prepare(config)?;
    let dir = config.out.clone();
    stage("write", write_training_artifacts(&p, &dir))?;
    evaluate(&p, &dir)
}

/// Benign and adversarial evaluation, bound checks and report emission for
/// a trained pipeline.
pub fn evaluate(p: &Pipeline, dir: &Path) -> Result<RunOutcome> {
    let config = &p.config;
    let dir = dir.to_path_buf();
    let evaluator = stage("eval", p.evaluator())?;
    let k = p.generator.schema().num_attributes();
    let base = AttackConfig {
        steps: config.attack.steps,
        step_size: config.attack.step_size,
        random_start: config.attack.random_start,
        seed: stage_seed(config.seed, "attack"),
        ..AttackConfig::default()
    };
    let mut out = stage(
        "attack",
        sweep(
            &evaluator,
            &p.recognizer,
            "plain",
            &p.test,
            config.attack.norm,
            &config.attack.bounds,
            &config.attack.sets(k),
            &base,
            config.bound_checks,
        ),
    )?;
    if let Some(dp) = &config.dp {
        let sigma = stage("dp", dp_sigma(dp.eps, dp.delta, dp.bound))?;
        let smoothed = stage(
            "dp",
            dp_wrap(
                p.recognizer.clone(),
                sigma,
                dp.n_draws,
                stage_seed(config.seed, "dp"),
            ),
        )?;
        let sets = if dp.attacked_sets.is_empty() {
            config.attack.sets(k)
        } else {
            dp.attacked_sets.clone()
        };
        let dp_base = AttackConfig {
            steps: dp.steps,
            step_size: None,
            ..base.clone()
        };
        // CBM's head was fitted to the plain recognizer's outputs
        let dp_eval = Evaluator {
            engines: evaluator
                .engines
                .iter()
                .filter(|e| !matches!(e, Engine::Cbm(_)))
                .map(clone_engine)
                .collect(),
            npc: evaluator.npc,
            omega: evaluator.omega,
            v_size: evaluator.v_size,
        };
        let extra = stage(
            "dp",
            sweep(
                &dp_eval,
                &smoothed,
                "dp",
                &p.test,
                Norm::L2,
                &[0.0, dp.bound],
                &sets,
                &dp_base,
                config.bound_checks,
            ),
        )?;
        out.rows.extend(extra.rows);
        out.records.extend(extra.records);
    }
    let all: Vec<BoundRecord> = out.records.iter().map(|t| t.record).collect();
    let bounds = BoundSummary::from_records(&all, config.c_floor_min);
    let (estimation, tradeoff) = if config.theory_checks {
        let gt = p.generator.ground_truth();
        let inputs = p.test_inputs();
        let e = stage(
            "bounds",
            estimation_error_check(&p.recognizer, &p.circuit, &gt, &p.partition, &inputs),
        )?;
        let t = stage("bounds", tradeoff_check(&gt, &p.partition, &inputs))?;
        (Some(e), Some(t))
    } else {
        (None, None)
    };
    let queries_ok = out.rows.iter().all(|r| r.queries_ok);
    let cccp_monotone = p.cccp_trace.windows(2).all(|w| w[1] >= w[0] - 1e-8);
    let outcome = RunOutcome {
        out_dir: dir.clone(),
        rows: out.rows,
        bounds,
        estimation,
        tradeoff,
        queries_ok,
        cccp_monotone,
    };
    stage("write", write_eval_artifacts(&outcome, &out.records, &dir))?;
    stage("report", report(&dir).map(|_| ()))?;
    Ok(outcome)
}

fn clone_engine(e: &Engine) -> Engine {
    match e {
        Engine::Npc(n) => Engine::Npc(n.clone()),
        Engine::Rnpc(r) => Engine::Rnpc(r.clone()),
        Engine::Cbm(h) => Engine::Cbm(h.clone()),
    }
}

fn write_eval_artifacts(o: &RunOutcome, records: &[TaggedRecord], dir: &Path) -> Result<()> {
    fs::write(dir.join("results.csv"), write_results(&o.rows))?;
    fs::write(dir.join("summary.csv"), write_summary(&o.rows))?;
    fs::write(dir.join("bounds.csv"), write_tagged_records(records)?)?;
    let mut text = o.bounds.to_string();
    if let Some(e) = &o.estimation {
        writeln!(
            text,
            "compositional error: {} (lhs {:.6}, rhs {:.6} = {:.6} + {:.6}; gamma {:.6}, joint tv {:.6}, {} flagged)",
            if e.holds() { "pass" } else { "FAIL" },
            e.lhs,
            e.rhs,
            e.recognizer_term,
            e.circuit_term,
            e.gamma,
            e.joint_tv,
            e.flagged
        )
        .unwrap();
    }
    if let Some(t) = &o.tradeoff {
        writeln!(
            text,
            "trade-off: {} (lhs {:.6}, rhs {:.6}, {} flagged)",
            if t.holds() { "pass" } else { "FAIL" },
            t.lhs,
            t.rhs,
            t.flagged
        )
        .unwrap();
    }
    writeln!(
        text,
        "query accounting: {}",
        if o.queries_ok { "pass" } else { "FAIL" }
    )
    .unwrap();
    writeln!(
        text,
        "cccp monotone: {}",
        if o.cccp_monotone { "pass" } else { "FAIL" }
    )
    .unwrap();
    writeln!(
        text,
        "overall: {}",
        if o.bounds_ok() { "pass" } else { "FAIL" }
    )
    .unwrap();
    fs::write(dir.join("bounds_summary.txt"), text)?;
    Ok(())
}
