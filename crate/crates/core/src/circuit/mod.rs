//! Smooth, decomposable probabilistic circuits over `(Y, A_1..A_K)`.
//!
//! Nodes live in a table in topological order (children precede parents),
//! the root is the last node. All evaluation happens in log space; values
//! are exponentiated only when returned through the public API.

mod cccp;
mod io;
mod learn;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use cccp::{fit_parameters_cccp, fit_parameters_cccp_with, log_likelihood, CccpFit};
pub use io::{parse_circuit, write_circuit};
pub use learn::{learn_structure, StructureHyperparams};

use crate::error::{Error, Result};
use crate::schema::{VariableSchema, CLASS_VAR};

/// Bitmask over variable indices.
pub type Scope = u64;

pub type NodeId = usize;

/// Tolerance on weight and leaf-table normalization.
pub const NORMALIZATION_TOL: f64 = 1e-9;

const JOINT_CHECK_LIMIT: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Sum {
        children: Vec<NodeId>,
        weights: Vec<f64>,
    },
    Product {
        children: Vec<NodeId>,
    },
    Leaf {
        var: usize,
        table: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CircuitNode {
    pub scope: Scope,
    pub kind: NodeKind,
}

impl CircuitNode {
    pub fn leaf(var: usize, table: Vec<f64>) -> Self {
        Self {
            scope: 1 << var,
            kind: NodeKind::Leaf { var, table },
        }
    }

    pub fn children(&self) -> &[NodeId] {
        match &self.kind {
            NodeKind::Sum { children, .. } | NodeKind::Product { children } => children,
            NodeKind::Leaf { .. } => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Circuit {
    schema: VariableSchema,
    nodes: Vec<CircuitNode>,
}

/// Observed values plus the variables summed out.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Query {
    pub assignment: BTreeMap<usize, usize>,
    pub marginalized: BTreeSet<usize>,
}

impl Query {
    /// Every variable summed out.
    pub fn total_mass(schema: &VariableSchema) -> Self {
        Self {
            assignment: BTreeMap::new(),
            marginalized: (0..schema.num_variables()).collect(),
        }
    }

    /// `Y = class`, `A = attrs`.
    pub fn full(class: usize, attrs: &[usize]) -> Self {
        let mut assignment: BTreeMap<usize, usize> =
            attrs.iter().enumerate().map(|(k, &v)| (k + 1, v)).collect();
        assignment.insert(CLASS_VAR, class);
        Self {
            assignment,
            marginalized: BTreeSet::new(),
        }
    }

    /// `A = attrs` with `Y` marginalized.
    pub fn attributes(attrs: &[usize]) -> Self {
        let assignment = attrs.iter().enumerate().map(|(k, &v)| (k + 1, v)).collect();
        Self {
            assignment,
            marginalized: BTreeSet::from([CLASS_VAR]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    ChildOrder { child: NodeId },
    EmptyChildren,
    WeightCount { children: usize, weights: usize },
    NegativeWeight(f64),
    WeightSum(f64),
    NotSmooth { child: NodeId },
    NonDisjoint { child: NodeId },
    ScopeUnion,
    LeafScope,
    LeafTableLength { expected: usize, got: usize },
    NegativeEntry(f64),
    LeafSum(f64),
    VariableOutOfRange(usize),
    RootScope,
    JointNotNormalized(f64),
    Empty,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ChildOrder { child } => write!(f, "child {child} does not precede its parent"),
            Self::EmptyChildren => write!(f, "internal node without children"),
            Self::WeightCount { children, weights } => {
                write!(f, "{weights} weights for {children} children")
            }
            Self::NegativeWeight(w) => write!(f, "negative weight {w}"),
            Self::WeightSum(s) => write!(f, "weights sum ≠ 1 (sum = {s})"),
            Self::NotSmooth { child } => write!(f, "child {child} scope differs from sum scope"),
            Self::NonDisjoint { child } => write!(f, "non-disjoint scopes at child {child}"),
            Self::ScopeUnion => write!(f, "union of child scopes differs from node scope"),
            Self::LeafScope => write!(f, "leaf scope is not the singleton of its variable"),
            Self::LeafTableLength { expected, got } => {
                write!(f, "leaf table has {got} entries, expected {expected}")
            }
            Self::NegativeEntry(p) => write!(f, "negative leaf entry {p}"),
            Self::LeafSum(s) => write!(f, "leaf table sums to {s}"),
            Self::VariableOutOfRange(v) => write!(f, "variable {v} outside schema"),
            Self::RootScope => write!(f, "root scope does not cover every variable"),
            Self::JointNotNormalized(s) => write!(f, "full joint sums to {s}"),
            Self::Empty => write!(f, "circuit has no nodes"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub node: Option<NodeId>,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, node: Option<NodeId>, kind: ViolationKind) {
        self.violations.push(Violation { node, kind });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            match v.node {
                Some(id) => writeln!(f, "node {id}: {}", v.kind)?,
                None => writeln!(f, "circuit: {}", v.kind)?,
            }
        }
        Ok(())
    }
}

pub(crate) fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let values: Vec<f64> = values.into_iter().collect();
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

impl Circuit {
    /// Builds a circuit from a node table; the last node is the root.
    ///
    /// No validation happens here, see [`Circuit::validate`].
    pub fn from_nodes(schema: VariableSchema, nodes: Vec<CircuitNode>) -> Self {
        Self { schema, nodes }
    }

    pub fn schema(&self) -> &VariableSchema {
        &self.schema
    }

    pub fn nodes(&self) -> &[CircuitNode] {
        &self.nodes
    }

    pub fn root(&self) -> NodeId {
        self.nodes.len().saturating_sub(1)
    }

    /// Number of edges, the `|S|` of the complexity accounting.
    pub fn num_edges(&self) -> usize {
        self.nodes.iter().map(|n| n.children().len()).sum()
    }

    pub(crate) fn nodes_mut(&mut self) -> &mut [CircuitNode] {
        &mut self.nodes
    }

    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        if self.nodes.is_empty() {
            report.push(None, ViolationKind::Empty);
            return report;
        }
        let nvars = self.schema.num_variables();
        for (id, node) in self.nodes.iter().enumerate() {
            let here = Some(id);
            for &c in node.children() {
                if c >= id {
                    report.push(here, ViolationKind::ChildOrder { child: c });
                }
            }
            let ordered = node.children().iter().all(|&c| c < id);
            match &node.kind {
                NodeKind::Leaf { var, table } => {
                    if *var >= nvars {
                        report.push(here, ViolationKind::VariableOutOfRange(*var));
                        continue;
                    }
                    if node.scope != 1 << var {
                        report.push(here, ViolationKind::LeafScope);
                    }
                    let card = self.schema.cardinality(*var);
                    if table.len() != card {
                        report.push(
                            here,
                            ViolationKind::LeafTableLength {
                                expected: card,
                                got: table.len(),
                            },
                        );
                    }
                    if let Some(&p) = table.iter().find(|p| !(**p >= 0.0)) {
                        report.push(here, ViolationKind::NegativeEntry(p));
                    }
                    let sum: f64 = table.iter().sum();
                    if (sum - 1.0).abs() > NORMALIZATION_TOL {
                        report.push(here, ViolationKind::LeafSum(sum));
                    }
                }
                NodeKind::Sum { children, weights } => {
                    if children.is_empty() {
                        report.push(here, ViolationKind::EmptyChildren);
                    }
                    if children.len() != weights.len() {
                        report.push(
                            here,
                            ViolationKind::WeightCount {
                                children: children.len(),
                                weights: weights.len(),
                            },
                        );
                    }
                    if let Some(&w) = weights.iter().find(|w| !(**w >= 0.0)) {
                        report.push(here, ViolationKind::NegativeWeight(w));
                    }
                    let sum: f64 = weights.iter().sum();
                    if (sum - 1.0).abs() > NORMALIZATION_TOL {
                        report.push(here, ViolationKind::WeightSum(sum));
                    }
                    if ordered {
                        for &c in children {
                            if self.nodes[c].scope != node.scope {
                                report.push(here, ViolationKind::NotSmooth { child: c });
                            }
                        }
                    }
                }
                NodeKind::Product { children } => {
                    if children.is_empty() {
                        report.push(here, ViolationKind::EmptyChildren);
                    }
                    if ordered {
                        let mut union: Scope = 0;
                        for &c in children {
                            let s = self.nodes[c].scope;
                            if union & s != 0 {
                                report.push(here, ViolationKind::NonDisjoint { child: c });
                            }
                            union |= s;
                        }
                        if union != node.scope {
                            report.push(here, ViolationKind::ScopeUnion);
                        }
                    }
                }
            }
        }
        if self.nodes[self.root()].scope != self.schema.full_scope() {
            report.push(Some(self.root()), ViolationKind::RootScope);
        }
        let states =
            (self.schema.class_cardinality() as u128).saturating_mul(self.schema.omega_size());
        if report.is_valid() && states <= JOINT_CHECK_LIMIT {
            let total: f64 = self
                .schema
                .nodes()
                .map(|a| {
                    self.log_joint_classes(&a)
                        .iter()
                        .map(|l| l.exp())
                        .sum::<f64>()
                })
                .sum();
            if (total - 1.0).abs() > 1e-6 {
                report.push(None, ViolationKind::JointNotNormalized(total));
            }
        }
        report
    }

    /// Log value of the root; `None` entries are marginalized.
    pub(crate) fn log_value(&self, evidence: &[Option<usize>]) -> f64 {
        self.log_values(evidence)[self.root()]
    }

    /// Log value of every node; `None` entries are marginalized.
    pub(crate) fn log_values(&self, evidence: &[Option<usize>]) -> Vec<f64> {
        let mut vals = vec![0.0f64; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            vals[id] = match &node.kind {
                NodeKind::Leaf { var, table } => match evidence[*var] {
                    Some(v) => table[v].ln(),
                    None => 0.0,
                },
                NodeKind::Product { children } => children.iter().map(|&c| vals[c]).sum(),
                NodeKind::Sum { children, weights } => {
                    let mut acc = f64::NEG_INFINITY;
                    for (&c, &w) in children.iter().zip(weights) {
                        acc = log_add(acc, w.ln() + vals[c]);
                    }
                    acc
                }
            };
        }
        vals
    }

    /// `log P_w(Y = y, A = attrs)` for every class in a single pass.
    pub fn log_joint_classes(&self, attrs: &[usize]) -> Vec<f64> {
        let ny = self.schema.class_cardinality();
        let mut vals = vec![0.0f64; self.nodes.len() * ny];
        for (id, node) in self.nodes.iter().enumerate() {
            let (done, rest) = vals.split_at_mut(id * ny);
            let out = &mut rest[..ny];
            match &node.kind {
                NodeKind::Leaf { var, table } => {
                    if *var == CLASS_VAR {
                        for (o, p) in out.iter_mut().zip(table) {
                            *o = p.ln();
                        }
                    } else {
                        out.fill(table[attrs[*var - 1]].ln());
                    }
                }
                NodeKind::Product { children } => {
                    out.fill(0.0);
                    for &c in children {
                        for (o, v) in out.iter_mut().zip(&done[c * ny..(c + 1) * ny]) {
                            *o += v;
                        }
                    }
                }
                NodeKind::Sum { children, weights } => {
                    out.fill(f64::NEG_INFINITY);
                    for (&c, &w) in children.iter().zip(weights) {
                        let lw = w.ln();
                        for (o, v) in out.iter_mut().zip(&done[c * ny..(c + 1) * ny]) {
                            *o = log_add(*o, lw + v);
                        }
                    }
                }
            }
        }
        let root = self.root();
        vals[root * ny..(root + 1) * ny].to_vec()
    }

    /// Randomizes every sum weight and leaf table; structure is kept.
    pub fn with_random_parameters(&self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for node in &mut out.nodes {
            match &mut node.kind {
                NodeKind::Sum { weights, .. } => randomize_simplex(weights, &mut rng),
                NodeKind::Leaf { table, .. } => randomize_simplex(table, &mut rng),
                NodeKind::Product { .. } => {}
            }
        }
        out
    }
}

fn randomize_simplex(values: &mut [f64], rng: &mut impl Rng) {
    for v in values.iter_mut() {
        *v = rng.random_range(0.05..1.0);
    }
    let s: f64 = values.iter().sum();
    for v in values.iter_mut() {
        *v /= s;
    }
}

fn evidence_of(circuit: &Circuit, query: &Query) -> Result<Vec<Option<usize>>> {
    let schema = circuit.schema();
    let nvars = schema.num_variables();
    let mut evidence = vec![None; nvars];
    for (&var, &val) in &query.assignment {
        if var >= nvars {
            return Err(Error::InvalidQuery(format!(
                "variable {var} outside schema"
            )));
        }
        if query.marginalized.contains(&var) {
            return Err(Error::InvalidQuery(format!(
                "variable {var} both assigned and marginalized"
            )));
        }
        if val >= schema.cardinality(var) {
            return Err(Error::InvalidQuery(format!(
                "value {val} outside variable {var}"
            )));
        }
        evidence[var] = Some(val);
    }
    for var in 0..nvars {
        if evidence[var].is_none() && !query.marginalized.contains(&var) {
            return Err(Error::InvalidQuery(format!(
                "variable {var} is neither assigned nor marginalized"
            )));
        }
    }
    if let Some(&var) = query.marginalized.iter().find(|&&v| v >= nvars) {
        return Err(Error::InvalidQuery(format!(
            "variable {var} outside schema"
        )));
    }
    Ok(evidence)
}

/// `P_w(assignment)` with the marginalized variables summed out.
pub fn evaluate(circuit: &Circuit, query: &Query) -> Result<f64> {
    let evidence = evidence_of(circuit, query)?;
    Ok(circuit.log_value(&evidence).exp())
}

/// Marginal probabilities below this count as zero evidence.
pub const ZERO_EVIDENCE: f64 = 1e-300;

/// `P_w(Y | A = attrs)`.
pub fn conditional_class(circuit: &Circuit, attrs: &[usize]) -> Result<Vec<f64>> {
    circuit.schema().check_node(attrs)?;
    let joint = circuit.log_joint_classes(attrs);
    let log_marginal = log_sum_exp(joint.iter().copied());
    if !(log_marginal.exp() >= ZERO_EVIDENCE) {
        return Err(Error::ZeroEvidence(attrs.to_vec()));
    }
    Ok(joint.iter().map(|l| (l - log_marginal).exp()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema2() -> VariableSchema {
        VariableSchema::new(2, vec![2]).unwrap()
    }

    /// 0.3·[Y~(0.9,0.1)]·[A~(0.2,0.8)] + 0.7·[Y~(0.4,0.6)]·[A~(0.5,0.5)]
    fn hand_circuit() -> Circuit {
        let nodes = vec![
            CircuitNode::leaf(0, vec![0.9, 0.1]),
            CircuitNode::leaf(1, vec![0.2, 0.8]),
            CircuitNode::leaf(0, vec![0.4, 0.6]),
            CircuitNode::leaf(1, vec![0.5, 0.5]),
            CircuitNode {
                scope: 0b11,
                kind: NodeKind::Product {
                    children: vec![0, 1],
                },
            },
            CircuitNode {
                scope: 0b11,
                kind: NodeKind::Product {
                    children: vec![2, 3],
                },
            },
            CircuitNode {
                scope: 0b11,
                kind: NodeKind::Sum {
                    children: vec![4, 5],
                    weights: vec![0.3, 0.7],
                },
            },
        ];
        Circuit::from_nodes(schema2(), nodes)
    }

    #[test]
    fn single_leaf_is_valid() {
        let schema = VariableSchema::new(2, vec![2]).unwrap();
        let nodes = vec![
            CircuitNode::leaf(0, vec![0.5, 0.5]),
            CircuitNode::leaf(1, vec![0.5, 0.5]),
            CircuitNode {
                scope: 0b11,
                kind: NodeKind::Product {
                    children: vec![0, 1],
                },
            },
        ];
        let c = Circuit::from_nodes(schema.clone(), nodes);
        assert!(c.validate().is_valid(), "{}", c.validate());
        let leaf = Circuit::from_nodes(schema, vec![CircuitNode::leaf(0, vec![0.5, 0.5])]);
        // node-level invariants hold; only the root-scope requirement fails
        let report = leaf.validate();
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].kind, ViolationKind::RootScope);
    }

    #[test]
    fn reports_unnormalized_weights() {
        let mut c = hand_circuit();
        if let NodeKind::Sum { weights, .. } = &mut c.nodes_mut()[6].kind {
            *weights = vec![0.7, 0.2];
        }
        let report = c.validate();
        assert!(!report.is_valid());
        assert!(report.to_string().contains("weights sum ≠ 1"));
        assert_eq!(report.violations[0].node, Some(6));
    }

    #[test]
    fn reports_non_disjoint_product() {
        let schema = VariableSchema::new(2, vec![2, 2]).unwrap();
        let nodes = vec![
            CircuitNode::leaf(1, vec![0.5, 0.5]),
            CircuitNode::leaf(1, vec![0.5, 0.5]),
            CircuitNode {
                scope: 0b010,
                kind: NodeKind::Product {
                    children: vec![0, 1],
                },
            },
        ];
        let report = Circuit::from_nodes(schema, nodes).validate();
        assert!(report.to_string().contains("non-disjoint scopes"));
    }

    #[test]
    fn total_mass_is_one() {
        let c = hand_circuit();
        let p = evaluate(&c, &Query::total_mass(c.schema())).unwrap();
        assert!((p - 1.0).abs() < 1e-9);
    }

    #[test]
    fn hand_expansion_matches() {
        let c = hand_circuit();
        let y = [[0.9, 0.1], [0.4, 0.6]];
        let a = [[0.2, 0.8], [0.5, 0.5]];
        for yv in 0..2 {
            for av in 0..2 {
                let expected = 0.3 * y[0][yv] * a[0][av] + 0.7 * y[1][yv] * a[1][av];
                let got = evaluate(&c, &Query::full(yv, &[av])).unwrap();
                assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
            }
        }
    }

    #[test]
    fn unlisted_variable_is_invalid_query() {
        let c = hand_circuit();
        let q = Query {
            assignment: BTreeMap::from([(1, 0)]),
            marginalized: BTreeSet::new(),
        };
        assert!(matches!(evaluate(&c, &q), Err(Error::InvalidQuery(_))));
    }

    #[test]
    fn independent_circuit_conditional_is_class_leaf() {
        let schema = VariableSchema::new(3, vec![2, 3]).unwrap();
        let nodes = vec![
            CircuitNode::leaf(0, vec![0.2, 0.5, 0.3]),
            CircuitNode::leaf(1, vec![0.6, 0.4]),
            CircuitNode::leaf(2, vec![0.1, 0.1, 0.8]),
            CircuitNode {
                scope: 0b111,
                kind: NodeKind::Product {
                    children: vec![0, 1, 2],
                },
            },
        ];
        let c = Circuit::from_nodes(schema.clone(), nodes);
        for a in schema.nodes() {
            let cond = conditional_class(&c, &a).unwrap();
            for (got, want) in cond.iter().zip([0.2, 0.5, 0.3]) {
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_evidence_is_reported() {
        let schema = VariableSchema::new(2, vec![2]).unwrap();
        let nodes = vec![
            CircuitNode::leaf(0, vec![0.5, 0.5]),
            CircuitNode::leaf(1, vec![1.0, 0.0]),
            CircuitNode {
                scope: 0b11,
                kind: NodeKind::Product {
                    children: vec![0, 1],
                },
            },
        ];
        let c = Circuit::from_nodes(schema, nodes);
        assert!(matches!(
            conditional_class(&c, &[1]),
            Err(Error::ZeroEvidence(_))
        ));
        assert!(conditional_class(&c, &[0]).is_ok());
    }
}
