//! Stage-by-stage execution over an artifact directory, so each step of the
//! pipeline can run as its own command.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::{
    build_partition, evaluate, generate_data, learn_circuit, rows_of, stage_seed, train_cbm,
    train_recognizer, Engine, ExperimentConfig, LinearHead, Pipeline, RunOutcome,
};
use crate::attacks::{attack_batch, read_adv_pairs, write_adv_pairs, AdvPair, AttackConfig};
use crate::circuit::{parse_circuit, write_circuit, Circuit};
use crate::datagen::{read_dataset, write_dataset, Dataset, Generator, LabeledSample};
use crate::error::{Error, Result};
use crate::geometry::{parse_partition, write_partition, ClassPartition};
use crate::metrics::{
    estimation_error_check, npc_bound_check, rnpc_bound_check, tradeoff_check, write_bound_records,
    BoundRecord, BoundSummary, EstimationReport, RnpcCheck, TradeoffReport,
};
use crate::recognizer::{
    parse_recognizer, write_recognizer, AttributeModel, RecognizerParams, TrainOutcome,
};

use super::cbm::{parse_cbm_head, write_cbm_head};

pub const CONFIG_FILE: &str = "config.json";
pub const TRAIN_FILE: &str = "train.dset";
pub const TEST_FILE: &str = "test.dset";
pub const RECOGNIZER_FILE: &str = "recognizer.txt";
pub const CIRCUIT_FILE: &str = "circuit.txt";
pub const PARTITION_FILE: &str = "partition.txt";
pub const CBM_FILE: &str = "cbm_head.txt";
pub const ADV_FILE: &str = "adv.csv";
pub const ADV_SIDECAR: &str = "adv.bin";

fn need(dir: &Path, name: &str) -> Result<std::path::PathBuf> {
    let path = dir.join(name);
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingArtifacts(format!(
            "{} not found",
            path.display()
        )))
    }
}

fn read_text(dir: &Path, name: &str) -> Result<String> {
    Ok(fs::read_to_string(need(dir, name)?)?)
}

pub fn load_config(dir: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::from_json(&read_text(dir, CONFIG_FILE)?)
}

pub fn load_dataset(dir: &Path, name: &str) -> Result<Dataset> {
    read_dataset(&mut BufReader::new(fs::File::open(need(dir, name)?)?))
}

fn save_dataset(
    dir: &Path,
    name: &str,
    generator: &Generator,
    samples: &[LabeledSample],
) -> Result<()> {
    let ds = Dataset {
        spec: generator.spec.clone(),
        samples: samples.to_vec(),
    };
    let mut f = BufWriter::new(fs::File::create(dir.join(name))?);
    write_dataset(&ds, &mut f)
}

fn save_recognizer(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    fs::write(dir.join(RECOGNIZER_FILE), write_recognizer(&outcome.params))?;
    let mut loss = String::from("epoch,loss\n");
    for (i, l) in outcome.epoch_loss.iter().enumerate() {
        writeln!(loss, "{},{l:.10e}", i + 1).unwrap();
    }
    fs::write(dir.join("train_loss.csv"), loss)?;
    Ok(())
}

fn save_circuit(dir: &Path, circuit: &Circuit, trace: &[f64]) -> Result<()> {
    fs::write(dir.join(CIRCUIT_FILE), write_circuit(circuit))?;
    let mut out = String::from("iteration,log_likelihood\n");
    for (i, ll) in trace.iter().enumerate() {
        writeln!(out, "{i},{ll:.10e}").unwrap();
    }
    fs::write(dir.join("cccp.csv"), out)?;
    Ok(())
}

fn read_trace(dir: &Path) -> Result<Vec<f64>> {
    read_text(dir, "cccp.csv")?
        .lines()
        .skip(1)
        .enumerate()
        .map(|(i, l)| {
            l.split(',')
                .nth(1)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::parse(i + 2, "bad log-likelihood row"))
        })
        .collect()
}

pub fn write_training_artifacts(p: &Pipeline, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join(CONFIG_FILE),
        serde_json::to_string_pretty(&p.config)?,
    )?;
    save_dataset(dir, TRAIN_FILE, &p.generator, &p.train)?;
    save_dataset(dir, TEST_FILE, &p.generator, &p.test)?;
    save_recognizer(
        dir,
        &TrainOutcome {
            params: p.recognizer.clone(),
            epoch_loss: p.train_loss.clone(),
        },
    )?;
    save_circuit(dir, &p.circuit, &p.cccp_trace)?;
    fs::write(dir.join(PARTITION_FILE), write_partition(&p.partition))?;
    if let Some(h) = &p.cbm {
        fs::write(dir.join(CBM_FILE), write_cbm_head(h))?;
    }
    Ok(())
}

/// Writes the config and both splits; returns the sample counts.
pub fn gen_data_stage(config: &ExperimentConfig, dir: &Path) -> Result<(usize, usize)> {
    config.validate()?;
    let (generator, train_set, test) = generate_data(config).map_err(|e| e.in_stage("gen-data"))?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(config)?)?;
    save_dataset(dir, TRAIN_FILE, &generator, &train_set)?;
    save_dataset(dir, TEST_FILE, &generator, &test)?;
    Ok((train_set.len(), test.len()))
}

/// Config and training split of a directory written by [`gen_data_stage`].
fn training_inputs(dir: &Path) -> Result<(ExperimentConfig, Generator, Vec<LabeledSample>)> {
    let config = load_config(dir)?;
    let ds = load_dataset(dir, TRAIN_FILE)?;
    Ok((config, Generator::new(&ds.spec)?, ds.samples))
}

pub fn train_stage(dir: &Path) -> Result<TrainOutcome> {
    let (config, generator, train_set) = training_inputs(dir)?;
    let outcome =
        train_recognizer(&config, &generator, &train_set).map_err(|e| e.in_stage("train"))?;
    save_recognizer(dir, &outcome)?;
    Ok(outcome)
}

/// Returns the CCCP log-likelihood trace.
pub fn learn_circuit_stage(dir: &Path) -> Result<Vec<f64>> {
    let (config, generator, train_set) = training_inputs(dir)?;
    let (circuit, trace) = learn_circuit(&config, &generator, &rows_of(&train_set))
        .map_err(|e| e.in_stage("learn-circuit"))?;
    save_circuit(dir, &circuit, &trace)?;
    Ok(trace)
}

pub fn partition_stage(dir: &Path) -> Result<ClassPartition> {
    let (config, generator, train_set) = training_inputs(dir)?;
    let p = build_partition(&config, &generator, &rows_of(&train_set))
        .map_err(|e| e.in_stage("partition"))?;
    fs::write(dir.join(PARTITION_FILE), write_partition(&p))?;
    Ok(p)
}

impl Pipeline {
    /// Reloads every training artifact from `dir`. A missing CBM head is
    /// fitted and saved when CBM-lite is enabled.
    pub fn load(dir: &Path) -> Result<Self> {
        let (config, generator, train_set) = training_inputs(dir)?;
        let test = load_dataset(dir, TEST_FILE)?.samples;
        let recognizer = parse_recognizer(&read_text(dir, RECOGNIZER_FILE)?)?;
        let train_loss = match fs::read_to_string(dir.join("train_loss.csv")) {
            Ok(t) => t
                .lines()
                .skip(1)
                .filter_map(|l| l.split(',').nth(1)?.parse().ok())
                .collect(),
            Err(_) => Vec::new(),
        };
        let circuit = parse_circuit(&read_text(dir, CIRCUIT_FILE)?)?;
        let cccp_trace = read_trace(dir)?;
        let partition = parse_partition(generator.schema(), &read_text(dir, PARTITION_FILE)?)?;
        let cbm: Option<LinearHead> = match fs::read_to_string(dir.join(CBM_FILE)) {
            Ok(t) if config.modes.contains(&super::ModeKind::Cbm) => Some(parse_cbm_head(&t)?),
            _ => {
                let h = train_cbm(&config, &generator, &recognizer, &train_set)
                    .map_err(|e| e.in_stage("train-cbm"))?;
                if let Some(h) = &h {
                    fs::write(dir.join(CBM_FILE), write_cbm_head(h))?;
                }
                h
            }
        };
        Ok(Self {
            config,
            generator,
            train: train_set,
            test,
            recognizer,
            train_loss,
            circuit,
            cccp_trace,
            partition,
            cbm,
        })
    }
}

/// Attacks the test split with `cfg` and saves the pairs.
pub fn attack_stage(dir: &Path, cfg: &AttackConfig, cw: bool) -> Result<Vec<AdvPair>> {
    let config = load_config(dir)?;
    let test = load_dataset(dir, TEST_FILE)?.samples;
    let recognizer: RecognizerParams = parse_recognizer(&read_text(dir, RECOGNIZER_FILE)?)?;
    let cfg = AttackConfig {
        seed: stage_seed(config.seed ^ cfg.seed, "attack-stage"),
        ..cfg.clone()
    };
    let inputs: Vec<(&[f64], &[usize], usize)> = test
        .iter()
        .map(|s| (s.x.as_slice(), s.attrs.as_slice(), s.label))
        .collect();
    let pairs = attack_batch(&recognizer, &inputs, &cfg, cw).map_err(|e| e.in_stage("attack"))?;
    let mut csv = BufWriter::new(fs::File::create(dir.join(ADV_FILE))?);
    let mut bin = BufWriter::new(fs::File::create(dir.join(ADV_SIDECAR))?);
    write_adv_pairs(&pairs, &mut csv, &mut bin)?;
    Ok(pairs)
}

/// Benign and adversarial evaluation over saved artifacts.
pub fn eval_stage(dir: &Path) -> Result<RunOutcome> {
    evaluate(&Pipeline::load(dir)?, dir)
}

/// Bound verification over saved adversarial pairs plus the ground-truth checks.
#[derive(Debug, Clone)]
pub struct PairBounds {
    pub pairs: usize,
    pub summary: BoundSummary,
    pub estimation: EstimationReport,
    pub tradeoff: TradeoffReport,
}

impl PairBounds {
    pub fn holds(&self) -> bool {
        self.summary.all_hold() && self.estimation.holds() && self.tradeoff.holds()
    }
}

pub fn bounds_stage(dir: &Path) -> Result<PairBounds> {
    let p = Pipeline::load(dir)?;
    let csv = read_text(dir, ADV_FILE)?;
    let pairs = read_adv_pairs(
        &csv,
        &mut BufReader::new(fs::File::open(need(dir, ADV_SIDECAR)?)?),
    )?;
    let ev = p.evaluator()?;
    let npc = match ev.engines.iter().find_map(|e| {
        if let Engine::Npc(n) = e {
            Some(n.clone())
        } else {
            None
        }
    }) {
        Some(n) => n,
        None => crate::integrator::NpcEngine::new(&p.circuit)?,
    };
    let rnpc: Vec<_> = ev
        .engines
        .iter()
        .filter_map(|e| {
            if let Engine::Rnpc(r) = e {
                Some(r)
            } else {
                None
            }
        })
        .collect();
    let mut records = Vec::new();
    for (i, pair) in pairs.iter().enumerate() {
        let (b, a) = (
            p.recognizer.forward(&pair.x)?,
            p.recognizer.forward(&pair.x_tilde)?,
        );
        let chain = npc_bound_check(&b, &a, &npc)?;
        if rnpc.is_empty() {
            records.push(BoundRecord::new(
                i,
                chain,
                RnpcCheck {
                    tv_pred: 0.0,
                    ratio_bound: 0.0,
                    c_floor: 0.0,
                    zero_mass: false,
                },
            ));
        }
        for r in &rnpc {
            records.push(BoundRecord::new(i, chain, rnpc_bound_check(&b, &a, r)?));
        }
    }
    let summary = BoundSummary::from_records(&records, p.config.c_floor_min);
    let gt = p.generator.ground_truth();
    let inputs = p.test_inputs();
    let estimation = estimation_error_check(&p.recognizer, &p.circuit, &gt, &p.partition, &inputs)?;
    let tradeoff = tradeoff_check(&gt, &p.partition, &inputs)?;
    let mut out = BufWriter::new(fs::File::create(dir.join("adv_bounds.csv"))?);
    write_bound_records(&records, &mut out)?;
    let result = PairBounds {
        pairs: pairs.len(),
        summary,
        estimation,
        tradeoff,
    };
    let mut text = result.summary.to_string();
    writeln!(
        text,
        "compositional error: {}",
        if result.estimation.holds() {
            "pass"
        } else {
            "FAIL"
        }
    )
    .unwrap();
    writeln!(
        text,
        "trade-off: {}",
        if result.tradeoff.holds() {
            "pass"
        } else {
            "FAIL"
        }
    )
    .unwrap();
    fs::write(dir.join("adv_bounds_summary.txt"), text)?;
    Ok(result)
}
