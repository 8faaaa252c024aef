//! Hamming geometry of the attribute space: the high-probability set,
//! its class partition, inter-class distances and neighborhoods.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{Node, VariableSchema};
use crate::text::fmt_f64;

/// Neighborhoods are built by scanning the attribute space up to this size,
/// and by expanding Hamming balls beyond it.
pub const ENUMERATION_CAP: u128 = 1_000_000;

pub fn hamming(a: &[usize], b: &[usize]) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    Ok(hamming_unchecked(a, b))
}

fn hamming_unchecked(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSet {
    pub nodes: Vec<Node>,
    pub gamma: f64,
}

/// Nodes whose empirical frequency is at least `gamma`.
///
/// `gamma = 0` keeps every node that occurs.
pub fn build_high_prob_set(schema: &VariableSchema, attrs: &[Node], gamma: f64) -> Result<NodeSet> {
    if !(gamma >= 0.0) {
        return Err(Error::Precondition("gamma must be nonnegative".into()));
    }
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for a in attrs {
        schema.check_node(a)?;
        *counts.entry(schema.node_index(a)).or_default() += 1;
    }
    let n = attrs.len() as f64;
    let nodes = counts
        .into_iter()
        .filter(|&(_, c)| c as f64 / n >= gamma)
        .map(|(i, _)| schema.node_at(i))
        .collect();
    Ok(NodeSet { nodes, gamma })
}

/// How nodes beyond `V_y` enter a neighborhood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NeighborhoodRule {
    /// `V_y` plus low-mass nodes within distance `r`.
    #[default]
    Strict,
    /// Every node within distance `r` of `V_y`, other classes' nodes included.
    /// Identical to `Strict` while `r` is below the inter-class distance.
    Ball,
}

impl NeighborhoodRule {
    fn name(self) -> &'static str {
        match self {
            Self::Strict => "strict",
            Self::Ball => "ball",
        }
    }
}

/// A node set stored either by its members or by its complement in `Ω`.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    k: usize,
    /// Flattened node values, `k` per node.
    values: Vec<u32>,
    complement: bool,
    omega: u128,
}

impl Neighborhood {
    fn from_indices(schema: &VariableSchema, mut idx: Vec<u64>) -> Self {
        idx.sort_unstable();
        idx.dedup();
        let omega = schema.omega_size();
        let complement = (idx.len() as u128) * 2 > omega;
        let listed: Vec<u64> = if complement {
            let members: HashSet<u64> = idx.iter().copied().collect();
            (0..omega as u64).filter(|i| !members.contains(i)).collect()
        } else {
            idx
        };
        let k = schema.num_attributes();
        let mut values = Vec::with_capacity(listed.len() * k);
        for i in listed {
            values.extend(schema.node_at(i).iter().map(|&v| v as u32));
        }
        Self {
            k,
            values,
            complement,
            omega,
        }
    }

    pub fn len(&self) -> u128 {
        let listed = (self.values.len() / self.k.max(1)) as u128;
        if self.complement {
            self.omega - listed
        } else {
            listed
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Member indices in increasing order.
    pub fn members(&self, schema: &VariableSchema) -> Vec<u64> {
        let listed: Vec<u64> = self
            .values
            .chunks(self.k)
            .map(|c| schema.node_index(&c.iter().map(|&v| v as usize).collect::<Vec<_>>()))
            .collect();
        if self.complement {
            let out: HashSet<u64> = listed.into_iter().collect();
            (0..self.omega as u64)
                .filter(|i| !out.contains(i))
                .collect()
        } else {
            listed
        }
    }

    pub fn contains(&self, node: &[usize]) -> bool {
        let listed = self
            .values
            .chunks(self.k)
            .any(|c| c.iter().zip(node).all(|(&a, &b)| a as usize == b));
        listed != self.complement
    }

    /// `Σ_{a ∈ N} ∏_k probs[k][a_k]`; a complement of size zero gives exactly 1.
    pub fn mass(&self, probs: &[Vec<f64>]) -> f64 {
        let listed: f64 = self
            .values
            .chunks(self.k)
            .map(|c| {
                c.iter()
                    .zip(probs)
                    .map(|(&v, p)| p[v as usize])
                    .product::<f64>()
            })
            .sum();
        if self.complement {
            (1.0 - listed).clamp(0.0, 1.0)
        } else {
            listed
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPartition {
    schema: VariableSchema,
    pub gamma: f64,
    /// `V_y` per class.
    pub pieces: Vec<Vec<Node>>,
    pub d_min: usize,
    /// Radius the neighborhoods were built with.
    pub radius: usize,
    pub rule: NeighborhoodRule,
    pub neighborhoods: Vec<Neighborhood>,
    /// Classes that received no node.
    pub empty_pieces: Vec<usize>,
}

/// `⌊(d − 1)/2⌋`.
pub fn radius_for(d_min: usize) -> usize {
    d_min.saturating_sub(1) / 2
}

/// Minimum Hamming distance between nodes of different nonempty pieces;
/// `K + 1` when fewer than two pieces are occupied.
pub fn inter_class_distance(k: usize, pieces: &[Vec<Node>]) -> usize {
    let mut d = k + 1;
    for (i, pi) in pieces.iter().enumerate() {
        for pj in &pieces[i + 1..] {
            for a in pi {
                for b in pj {
                    d = d.min(hamming_unchecked(a, b));
                }
            }
        }
    }
    d
}

impl ClassPartition {
    /// Builds a partition at its intrinsic radius.
    pub fn from_pieces(
        schema: &VariableSchema,
        gamma: f64,
        pieces: Vec<Vec<Node>>,
    ) -> Result<Self> {
        if pieces.len() != schema.class_cardinality() {
            return Err(Error::LengthMismatch(
                pieces.len(),
                schema.class_cardinality(),
            ));
        }
        let mut seen = HashSet::new();
        for a in pieces.iter().flatten() {
            schema.check_node(a)?;
            if !seen.insert(schema.node_index(a)) {
                return Err(Error::Precondition(format!(
                    "node {a:?} appears in two pieces"
                )));
            }
        }
        let d_min = inter_class_distance(schema.num_attributes(), &pieces);
        let empty_pieces = (0..pieces.len())
            .filter(|&y| pieces[y].is_empty())
            .collect();
        let p = Self {
            schema: schema.clone(),
            gamma,
            pieces,
            d_min,
            radius: 0,
            rule: NeighborhoodRule::Strict,
            neighborhoods: Vec::new(),
            empty_pieces,
        };
        let r = p.intrinsic_radius().min(schema.num_attributes());
        p.with_radius(r, NeighborhoodRule::Strict)
    }

    pub fn schema(&self) -> &VariableSchema {
        &self.schema
    }

    pub fn intrinsic_radius(&self) -> usize {
        radius_for(self.d_min)
    }

    /// `V` in piece order.
    pub fn high_prob_nodes(&self) -> impl Iterator<Item = &Node> {
        self.pieces.iter().flatten()
    }

    /// `|V|`.
    pub fn num_nodes(&self) -> usize {
        self.pieces.iter().map(Vec::len).sum()
    }

    /// Class whose piece holds `node`, if any.
    pub fn class_of(&self, node: &[usize]) -> Option<usize> {
        self.pieces.iter().position(|p| p.iter().any(|a| a == node))
    }

    /// Rebuilds every neighborhood for radius `r`.
    pub fn with_radius(mut self, r: usize, rule: NeighborhoodRule) -> Result<Self> {
        let k = self.schema.num_attributes();
        if r > k {
            return Err(Error::Precondition(format!("radius {r} exceeds K = {k}")));
        }
        self.neighborhoods = (0..self.pieces.len())
            .map(|y| neighborhood(&self, y, r, rule))
            .collect::<Result<_>>()?;
        self.radius = r;
        self.rule = rule;
        Ok(self)
    }
}

/// Assigns each node of `v` to its empirical argmax class, ties to the
/// smallest class index. Rows are `[y, a_1, .., a_K]`.
pub fn partition_by_class(
    schema: &VariableSchema,
    v: &NodeSet,
    rows: &[Vec<usize>],
) -> Result<ClassPartition> {
    let c = schema.class_cardinality();
    let mut counts: HashMap<u64, Vec<usize>> = v
        .nodes
        .iter()
        .map(|a| (schema.node_index(a), vec![0; c]))
        .collect();
    for row in rows {
        if row.len() != schema.num_variables() {
            return Err(Error::DimensionMismatch {
                expected: schema.num_variables(),
                got: row.len(),
            });
        }
        if let Some(cnt) = counts.get_mut(&schema.node_index(&row[1..])) {
            cnt[row[0]] += 1;
        }
    }
    let mut pieces = vec![Vec::new(); c];
    for a in &v.nodes {
        let cnt = &counts[&schema.node_index(a)];
        if cnt.iter().all(|&n| n == 0) {
            return Err(Error::Precondition(format!(
                "node {a:?} does not occur in the data"
            )));
        }
        let y = crate::recognizer::argmax(&cnt.iter().map(|&n| n as f64).collect::<Vec<_>>());
        pieces[y].push(a.clone());
    }
    ClassPartition::from_pieces(schema, v.gamma, pieces)
}

/// `N(y, r)` under the given rule.
pub fn neighborhood(
    partition: &ClassPartition,
    y: usize,
    r: usize,
    rule: NeighborhoodRule,
) -> Result<Neighborhood> {
    let schema = partition.schema();
    if r > schema.num_attributes() {
        return Err(Error::Precondition(format!("radius {r} exceeds K")));
    }
    if y >= partition.pieces.len() {
        return Err(Error::Precondition(format!(
            "class {y} outside the partition"
        )));
    }
    let idx = if schema.omega_size() <= ENUMERATION_CAP {
        neighborhood_by_enumeration(partition, y, r, rule)
    } else {
        neighborhood_by_expansion(partition, y, r, rule)
    };
    Ok(Neighborhood::from_indices(schema, idx))
}

fn in_other_piece(partition: &ClassPartition, y: usize) -> HashSet<u64> {
    let s = partition.schema();
    partition
        .pieces
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != y)
        .flat_map(|(_, p)| p.iter().map(|a| s.node_index(a)))
        .collect()
}

/// `N(y, r)` by scanning all of `Ω`.
pub fn neighborhood_by_enumeration(
    partition: &ClassPartition,
    y: usize,
    r: usize,
    rule: NeighborhoodRule,
) -> Vec<u64> {
    let s = partition.schema();
    let piece = &partition.pieces[y];
    let others = in_other_piece(partition, y);
    s.nodes()
        .enumerate()
        .filter(|(i, c)| {
            if rule == NeighborhoodRule::Strict && others.contains(&(*i as u64)) {
                return false;
            }
            piece.iter().any(|a| hamming_unchecked(a, c) <= r)
        })
        .map(|(i, _)| i as u64)
        .collect()
}

/// `N(y, r)` by layered Hamming expansion from each node of `V_y`.
pub fn neighborhood_by_expansion(
    partition: &ClassPartition,
    y: usize,
    r: usize,
    rule: NeighborhoodRule,
) -> Vec<u64> {
    let s = partition.schema();
    let others = in_other_piece(partition, y);
    let mut found: HashSet<u64> = HashSet::new();
    for a in &partition.pieces[y] {
        let mut frontier = vec![a.clone()];
        found.insert(s.node_index(a));
        // layer d holds nodes at distance exactly d, changed positions increasing
        let mut last_pos: Vec<usize> = vec![0];
        for _ in 0..r {
            let mut next = Vec::new();
            let mut next_pos = Vec::new();
            for (node, &start) in frontier.iter().zip(&last_pos) {
                for k in start..s.num_attributes() {
                    if node[k] != a[k] {
                        continue;
                    }
                    for v in 0..s.attribute_cardinalities()[k] {
                        if v == a[k] {
                            continue;
                        }
                        let mut n = node.clone();
                        n[k] = v;
                        found.insert(s.node_index(&n));
                        next.push(n);
                        next_pos.push(k + 1);
                    }
                }
            }
            frontier = next;
            last_pos = next_pos;
        }
    }
    let mut out: Vec<u64> = found
        .into_iter()
        .filter(|i| rule == NeighborhoodRule::Ball || !others.contains(i))
        .collect();
    out.sort_unstable();
    out
}

const HEADER: &str = "PART v1";

pub fn write_partition(p: &ClassPartition) -> String {
    let mut out = String::new();
    writeln!(out, "{HEADER}").unwrap();
    writeln!(out, "gamma {}", fmt_f64(&p.gamma)).unwrap();
    writeln!(out, "r {}", p.radius).unwrap();
    writeln!(out, "rule {}", p.rule.name()).unwrap();
    for (y, piece) in p.pieces.iter().enumerate() {
        let nodes: Vec<String> = piece
            .iter()
            .map(|a| {
                a.iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect();
        writeln!(out, "{y}: {}", nodes.join(";")).unwrap();
    }
    out
}

pub fn parse_partition(schema: &VariableSchema, text: &str) -> Result<ClassPartition> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let mut expect = |key: &str| -> Result<(usize, String)> {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| Error::parse(0, format!("missing `{key}`")))?;
        let rest = l
            .strip_prefix(key)
            .ok_or_else(|| Error::parse(ln, format!("expected `{key}`")))?;
        Ok((ln, rest.trim().to_owned()))
    };
    let (ln, rest) = expect(HEADER)?;
    if !rest.is_empty() {
        return Err(Error::parse(ln, format!("expected `{HEADER}`")));
    }
    let (ln, g) = expect("gamma")?;
    let gamma: f64 = g.parse().map_err(|_| Error::parse(ln, "bad gamma"))?;
    let (ln, r) = expect("r")?;
    let r: usize = r.parse().map_err(|_| Error::parse(ln, "bad radius"))?;
    let (ln, rule) = expect("rule")?;
    let rule = match rule.as_str() {
        "strict" => NeighborhoodRule::Strict,
        "ball" => NeighborhoodRule::Ball,
        _ => return Err(Error::parse(ln, "unknown neighborhood rule")),
    };
    let mut pieces = vec![Vec::new(); schema.class_cardinality()];
    for (ln, l) in lines {
        if l.is_empty() {
            continue;
        }
        let (y, nodes) = l
            .split_once(':')
            .ok_or_else(|| Error::parse(ln, "expected `class:`"))?;
        let y: usize = y
            .trim()
            .parse()
            .map_err(|_| Error::parse(ln, "bad class"))?;
        if y >= pieces.len() {
            return Err(Error::parse(ln, format!("class {y} outside schema")));
        }
        for node in nodes.split(';').map(str::trim).filter(|s| !s.is_empty()) {
            let a: Node = node
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse()
                        .map_err(|_| Error::parse(ln, format!("bad node `{node}`")))
                })
                .collect::<Result<_>>()?;
            pieces[y].push(a);
        }
    }
    ClassPartition::from_pieces(schema, gamma, pieces)?.with_radius(r, rule)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class() -> ClassPartition {
        let schema = VariableSchema::new(2, vec![4, 4, 4]).unwrap();
        ClassPartition::from_pieces(&schema, 0.1, vec![vec![vec![0, 0, 0]], vec![vec![2, 2, 2]]])
            .unwrap()
    }

    #[test]
    fn hamming_basics() {
        assert_eq!(hamming(&[6, 3, 7], &[9, 6, 8]).unwrap(), 3);
        assert_eq!(hamming(&[1, 2], &[1, 2]).unwrap(), 0);
        assert!(matches!(
            hamming(&[1], &[1, 2]),
            Err(Error::LengthMismatch(1, 2))
        ));
    }

    #[test]
    fn high_prob_thresholds() {
        let schema = VariableSchema::new(2, vec![2, 2]).unwrap();
        let data = vec![vec![0, 0], vec![1, 1], vec![0, 0], vec![1, 1]];
        assert_eq!(
            build_high_prob_set(&schema, &data, 0.0)
                .unwrap()
                .nodes
                .len(),
            2
        );
        assert!(build_high_prob_set(&schema, &data, 0.6)
            .unwrap()
            .nodes
            .is_empty());
    }

    #[test]
    fn ball_of_radius_one() {
        let p = two_class();
        assert_eq!(p.d_min, 3);
        assert_eq!(p.radius, 1);
        let n0 = &p.neighborhoods[0];
        assert_eq!(n0.len(), 10);
        let s = p.schema().clone();
        for i in n0.members(&s) {
            assert!(hamming(&s.node_at(i), &[0, 0, 0]).unwrap() <= 1);
            assert!(!p.neighborhoods[1].contains(&s.node_at(i)));
        }
    }

    #[test]
    fn radius_zero_and_full() {
        let p = two_class();
        let s = p.schema().clone();
        let z = neighborhood(&p, 0, 0, NeighborhoodRule::Strict).unwrap();
        assert_eq!(z.members(&s), vec![0]);
        let full = neighborhood(&p, 0, 3, NeighborhoodRule::Strict).unwrap();
        assert_eq!(full.len(), 64 - 1);
        let ball = neighborhood(&p, 0, 3, NeighborhoodRule::Ball).unwrap();
        assert_eq!(ball.len(), 64);
        let probs = vec![vec![0.1, 0.2, 0.3, 0.4]; 3];
        assert_eq!(ball.mass(&probs), 1.0);
    }

    #[test]
    fn expansion_matches_enumeration() {
        let p = two_class();
        for rule in [NeighborhoodRule::Strict, NeighborhoodRule::Ball] {
            for r in 0..=3 {
                for y in 0..2 {
                    assert_eq!(
                        neighborhood_by_enumeration(&p, y, r, rule),
                        neighborhood_by_expansion(&p, y, r, rule)
                    );
                }
            }
        }
    }

    #[test]
    fn partition_assigns_argmax_with_low_tie_break() {
        let schema = VariableSchema::new(3, vec![2, 2]).unwrap();
        let rows = vec![
            vec![1, 0, 0],
            vec![2, 0, 0],
            vec![2, 1, 1],
            vec![2, 1, 1],
            vec![0, 1, 1],
        ];
        let v = build_high_prob_set(
            &schema,
            &rows.iter().map(|r| r[1..].to_vec()).collect::<Vec<_>>(),
            0.0,
        )
        .unwrap();
        let p = partition_by_class(&schema, &v, &rows).unwrap();
        assert_eq!(p.pieces, vec![vec![], vec![vec![0, 0]], vec![vec![1, 1]]]);
        assert_eq!(p.empty_pieces, vec![0]);
        assert_eq!(p.d_min, 2);
    }

    #[test]
    fn partition_text_round_trip() {
        let p = two_class().with_radius(2, NeighborhoodRule::Ball).unwrap();
        let back = parse_partition(p.schema(), &write_partition(&p)).unwrap();
        assert_eq!(back, p);
    }
}
