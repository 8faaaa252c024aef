//! Node-wise (NPC) and class-wise (RNPC) integration of recognizer outputs
//! against circuit conditionals.
//!
//! The conditionals `P_w(Y | a)` do not depend on the input, so each engine
//! computes them once; query counters still report the logical number of
//! conditional queries an inference needs.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::circuit::{conditional_class, Circuit};
use crate::error::{Error, Result};
use crate::geometry::ClassPartition;
use crate::recognizer::{argmax, AttributeProbs};
use crate::schema::{for_each_weighted_node, VariableSchema};

/// Default bound on `|Ω|` for node-wise integration.
pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Npc,
    Rnpc { r: usize },
    Cbm,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Npc => write!(f, "npc"),
            Mode::Rnpc { r } => write!(f, "rnpc-r{r}"),
            Mode::Cbm => write!(f, "cbm-lite"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    pub unnormalized: Vec<f64>,
    /// `Z` for RNPC, 1 otherwise.
    pub partition_value: f64,
    pub normalized: Vec<f64>,
    pub mode: Mode,
    /// Set when `Z` vanished and the uniform vector was substituted.
    pub zero_partition: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueryCounter {
    pub circuit_conditional_queries: u64,
    pub recognizer_forwards: u64,
}

/// Argmax of the normalized scores, ties to the smallest class.
pub fn predict(scores: &ClassScores) -> usize {
    argmax(&scores.normalized)
}

fn check_probs(schema: &VariableSchema, probs: &AttributeProbs) -> Result<()> {
    if probs.probs.len() != schema.num_attributes() {
        return Err(Error::LengthMismatch(
            probs.probs.len(),
            schema.num_attributes(),
        ));
    }
    for (p, &c) in probs.probs.iter().zip(schema.attribute_cardinalities()) {
        if p.len() != c {
            return Err(Error::DimensionMismatch {
                expected: c,
                got: p.len(),
            });
        }
    }
    Ok(())
}

/// `P_w(Y | a)`, or the uniform vector when `P_w(a)` vanishes.
fn conditional_or_uniform(circuit: &Circuit, a: &[usize]) -> Result<(Vec<f64>, bool)> {
    match conditional_class(circuit, a) {
        Ok(p) => Ok((p, false)),
        Err(Error::ZeroEvidence(_)) => {
            let c = circuit.schema().class_cardinality();
            Ok((vec![1.0 / c as f64; c], true))
        }
        Err(e) => Err(e),
    }
}

/// `P(Y | x) = Σ_a P_θ(a | x) P_w(Y | a)` with the node conditionals tabulated over `Ω`.
#[derive(Debug, Clone)]
pub struct NpcEngine {
    schema: VariableSchema,
    /// `|Ω| × |Y|`, node-index order.
    table: Vec<f64>,
    pub zero_evidence_nodes: usize,
}

impl NpcEngine {
    pub fn new(circuit: &Circuit) -> Result<Self> {
        Self::with_cap(circuit, DEFAULT_ENUMERATION_CAP)
    }

    pub fn with_cap(circuit: &Circuit, cap: u128) -> Result<Self> {
        let schema = circuit.schema().clone();
        let size = schema.omega_size();
        if size > cap {
            return Err(Error::SpaceTooLarge { size, cap });
        }
        use rayon::prelude::*;
        let nodes: Vec<_> = schema.nodes().collect();
        let rows: Vec<(Vec<f64>, bool)> = nodes
            .par_iter()
            .map(|a| conditional_or_uniform(circuit, a))
            .collect::<Result<_>>()?;
        let zero_evidence_nodes = rows.iter().filter(|(_, z)| *z).count();
        let table = rows.into_iter().flat_map(|(p, _)| p).collect();
        Ok(Self {
            schema,
            table,
            zero_evidence_nodes,
        })
    }

    pub fn schema(&self) -> &VariableSchema {
        &self.schema
    }

    /// `P(Y | a)` by node index.
    pub fn conditional(&self, index: u64) -> &[f64] {
        let c = self.schema.class_cardinality();
        &self.table[index as usize * c..(index as usize + 1) * c]
    }

    pub fn infer(&self, probs: &AttributeProbs) -> Result<(ClassScores, QueryCounter)> {
        check_probs(&self.schema, probs)?;
        let c = self.schema.class_cardinality();
        let mut out = vec![0.0; c];
        let mut idx = 0usize;
        for_each_weighted_node(&probs.probs, |_, w| {
            if w != 0.0 {
                let row = &self.table[idx * c..(idx + 1) * c];
                for (o, p) in out.iter_mut().zip(row) {
                    *o += w * p;
                }
            }
            idx += 1;
        });
        let counter = QueryCounter {
            circuit_conditional_queries: idx as u64,
            recognizer_forwards: 1,
        };
        let scores = ClassScores {
            normalized: out.clone(),
            unnormalized: out,
            partition_value: 1.0,
            mode: Mode::Npc,
            zero_partition: false,
        };
        Ok((scores, counter))
    }
}

/// Z below this is treated as zero.
pub const ZERO_PARTITION: f64 = 1e-300;

/// Class-wise integration over the neighborhoods, with `Σ_{a ∈ V_ỹ} P_w(Y | a)` tabulated per class.
#[derive(Debug, Clone)]
pub struct RnpcEngine {
    partition: ClassPartition,
    /// Per class `ỹ`, the summed conditionals of its piece.
    piece_sums: Vec<Vec<f64>>,
    pub zero_evidence_nodes: usize,
}

impl RnpcEngine {
    pub fn new(circuit: &Circuit, partition: &ClassPartition) -> Result<Self> {
        if circuit.schema() != partition.schema() {
            return Err(Error::Precondition(
                "circuit and partition schemas differ".into(),
            ));
        }
        let c = circuit.schema().class_cardinality();
        let mut zero_evidence_nodes = 0;
        let mut piece_sums = Vec::with_capacity(partition.pieces.len());
        for piece in &partition.pieces {
            let mut s = vec![0.0; c];
            for a in piece {
                let (p, z) = conditional_or_uniform(circuit, a)?;
                zero_evidence_nodes += usize::from(z);
                s.iter_mut().zip(&p).for_each(|(x, y)| *x += y);
            }
            piece_sums.push(s);
        }
        Ok(Self {
            partition: partition.clone(),
            piece_sums,
            zero_evidence_nodes,
        })
    }

    pub fn partition(&self) -> &ClassPartition {
        &self.partition
    }

    pub fn radius(&self) -> usize {
        self.partition.radius
    }

    /// `mass(N(ỹ, r))` per class.
    pub fn masses(&self, probs: &AttributeProbs) -> Vec<f64> {
        self.partition
            .neighborhoods
            .iter()
            .map(|n| n.mass(&probs.probs))
            .collect()
    }

    /// Scores from precomputed neighborhood masses.
    pub fn scores_from_masses(&self, masses: &[f64]) -> ClassScores {
        let c = self.partition.schema().class_cardinality();
        let mut phi = vec![0.0; c];
        let mut z = 0.0;
        for ((m, sums), piece) in masses
            .iter()
            .zip(&self.piece_sums)
            .zip(&self.partition.pieces)
        {
            if piece.is_empty() {
                continue;
            }
            for (p, s) in phi.iter_mut().zip(sums) {
                *p += m * s;
            }
            z += m * piece.len() as f64;
        }
        let zero_partition = !(z >= ZERO_PARTITION);
        let normalized = if zero_partition {
            vec![1.0 / c as f64; c]
        } else {
            phi.iter().map(|p| p / z).collect()
        };
        ClassScores {
            unnormalized: phi,
            partition_value: z,
            normalized,
            mode: Mode::Rnpc {
                r: self.partition.radius,
            },
            zero_partition,
        }
    }

    pub fn infer(&self, probs: &AttributeProbs) -> Result<(ClassScores, QueryCounter)> {
        check_probs(self.partition.schema(), probs)?;
        let scores = self.scores_from_masses(&self.masses(probs));
        let counter = QueryCounter {
            circuit_conditional_queries: self.partition.num_nodes() as u64,
            recognizer_forwards: 1,
        };
        Ok((scores, counter))
    }
}

/// One-shot NPC inference.
pub fn npc_infer(probs: &AttributeProbs, circuit: &Circuit) -> Result<(ClassScores, QueryCounter)> {
    NpcEngine::new(circuit)?.infer(probs)
}

/// One-shot RNPC inference; the partition must carry neighborhoods for `r`.
pub fn rnpc_infer(
    probs: &AttributeProbs,
    circuit: &Circuit,
    partition: &ClassPartition,
    r: usize,
) -> Result<(ClassScores, QueryCounter)> {
    if partition.radius != r {
        return Err(Error::Precondition(format!(
            "partition neighborhoods are built for r = {}, not {r}",
            partition.radius
        )));
    }
    RnpcEngine::new(circuit, partition)?.infer(probs)
}

/// A row of batch inference output.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRow {
    pub sample_id: usize,
    pub mode: Mode,
    pub predicted: usize,
    pub truth: usize,
    pub scores: Vec<f64>,
}

pub fn write_batch_csv(rows: &[BatchRow], classes: usize, out: &mut impl Write) -> Result<()> {
    write!(out, "sample_id,mode,predicted,true")?;
    for y in 0..classes {
        write!(out, ",p{y}")?;
    }
    writeln!(out)?;
    for r in rows {
        write!(
            out,
            "{},{},{},{}",
            r.sample_id, r.mode, r.predicted, r.truth
        )?;
        for s in &r.scores {
            write!(out, ",{}", crate::text::fmt_f64(s))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{CircuitNode, NodeKind};
    use crate::geometry::NeighborhoodRule;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_probs(rng: &mut ChaCha8Rng, cards: &[usize]) -> AttributeProbs {
        AttributeProbs {
            probs: cards
                .iter()
                .map(|&c| {
                    let v: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
                    let s: f64 = v.iter().sum();
                    v.iter().map(|x| x / s).collect()
                })
                .collect(),
        }
    }

    /// Sum over two random factorized components.
    fn random_circuit(schema: &VariableSchema, seed: u64) -> Circuit {
        let mut nodes = Vec::new();
        let mut comps = Vec::new();
        for _ in 0..2 {
            let mut ch = Vec::new();
            for v in 0..schema.num_variables() {
                nodes.push(CircuitNode::leaf(
                    v,
                    vec![1.0 / schema.cardinality(v) as f64; schema.cardinality(v)],
                ));
                ch.push(nodes.len() - 1);
            }
            nodes.push(CircuitNode {
                scope: schema.full_scope(),
                kind: NodeKind::Product { children: ch },
            });
            comps.push(nodes.len() - 1);
        }
        nodes.push(CircuitNode {
            scope: schema.full_scope(),
            kind: NodeKind::Sum {
                children: comps,
                weights: vec![0.5, 0.5],
            },
        });
        Circuit::from_nodes(schema.clone(), nodes).with_random_parameters(seed)
    }

    #[test]
    fn npc_matches_enumeration() {
        let schema = VariableSchema::new(3, vec![3, 3]).unwrap();
        let c = random_circuit(&schema, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let probs = random_probs(&mut rng, &[3, 3]);
        let (s, q) = npc_infer(&probs, &c).unwrap();
        let mut want = vec![0.0; 3];
        for a in schema.nodes() {
            let w = probs.probs[0][a[0]] * probs.probs[1][a[1]];
            let cond = conditional_class(&c, &a).unwrap();
            for y in 0..3 {
                want[y] += w * cond[y];
            }
        }
        for y in 0..3 {
            assert!((s.normalized[y] - want[y]).abs() < 1e-12);
        }
        assert!((s.unnormalized.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(q.circuit_conditional_queries, 9);
    }

    #[test]
    fn npc_one_hot_is_node_conditional() {
        let schema = VariableSchema::new(3, vec![3, 2]).unwrap();
        let c = random_circuit(&schema, 4);
        let (s, _) = npc_infer(&AttributeProbs::one_hot(&[3, 2], &[2, 1]), &c).unwrap();
        let cond = conditional_class(&c, &[2, 1]).unwrap();
        for (a, b) in s.normalized.iter().zip(&cond) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn npc_cap_is_enforced() {
        let schema = VariableSchema::new(2, vec![10; 4]).unwrap();
        let c = random_circuit(&schema, 0);
        assert!(matches!(
            NpcEngine::with_cap(&c, 1000),
            Err(Error::SpaceTooLarge { .. })
        ));
    }

    fn two_class(schema: &VariableSchema) -> ClassPartition {
        ClassPartition::from_pieces(schema, 0.1, vec![vec![vec![0, 0, 0]], vec![vec![2, 2, 2]]])
            .unwrap()
    }

    #[test]
    fn rnpc_matches_direct_expansion() {
        let schema = VariableSchema::new(2, vec![4, 4, 4]).unwrap();
        let c = random_circuit(&schema, 5);
        let p = two_class(&schema);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let probs = random_probs(&mut rng, &[4, 4, 4]);
        let (s, q) = rnpc_infer(&probs, &c, &p, 1).unwrap();
        let mass = |centre: [usize; 3]| -> f64 {
            schema
                .nodes()
                .filter(|a| a.iter().zip(&centre).filter(|(x, y)| x != y).count() <= 1)
                .map(|a| (0..3).map(|k| probs.probs[k][a[k]]).product::<f64>())
                .sum()
        };
        let (m0, m1) = (mass([0, 0, 0]), mass([2, 2, 2]));
        let c0 = conditional_class(&c, &[0, 0, 0]).unwrap();
        let c1 = conditional_class(&c, &[2, 2, 2]).unwrap();
        let z = m0 + m1;
        for y in 0..2 {
            let phi = m0 * c0[y] + m1 * c1[y];
            assert!((s.unnormalized[y] - phi).abs() < 1e-12);
            assert!((s.normalized[y] - phi / z).abs() < 1e-12);
        }
        assert_eq!(q.circuit_conditional_queries, 2);
    }

    #[test]
    fn full_radius_ball_is_input_independent() {
        let schema = VariableSchema::new(2, vec![4, 4, 4]).unwrap();
        let c = random_circuit(&schema, 7);
        let p = two_class(&schema)
            .with_radius(3, NeighborhoodRule::Ball)
            .unwrap();
        let engine = RnpcEngine::new(&c, &p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let first = engine.infer(&random_probs(&mut rng, &[4, 4, 4])).unwrap().0;
        for _ in 0..20 {
            let s = engine.infer(&random_probs(&mut rng, &[4, 4, 4])).unwrap().0;
            assert_eq!(s.normalized, first.normalized);
        }
    }

    #[test]
    fn vanishing_partition_falls_back_to_uniform() {
        let schema = VariableSchema::new(2, vec![4, 4, 4]).unwrap();
        let c = random_circuit(&schema, 9);
        let p = two_class(&schema)
            .with_radius(0, NeighborhoodRule::Strict)
            .unwrap();
        let (s, _) =
            rnpc_infer(&AttributeProbs::one_hot(&[4, 4, 4], &[1, 1, 1]), &c, &p, 0).unwrap();
        assert!(s.zero_partition);
        assert_eq!(s.normalized, vec![0.5, 0.5]);
    }

    #[test]
    fn predict_breaks_ties_low() {
        let mk = |v: Vec<f64>| ClassScores {
            unnormalized: v.clone(),
            partition_value: 1.0,
            normalized: v,
            mode: Mode::Npc,
            zero_partition: false,
        };
        assert_eq!(predict(&mk(vec![0.1, 0.7, 0.2])), 1);
        assert_eq!(predict(&mk(vec![0.5, 0.5])), 0);
    }
}
