//! LearnSPN-lite: recursive variable splits and row clustering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Circuit, CircuitNode, NodeId, NodeKind, Scope};
use crate::error::{Error, Result};
use crate::schema::VariableSchema;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StructureHyperparams {
    /// Pairs with empirical MI below this (nats) count as independent.
    pub mi_threshold: f64,
    pub n_clusters: usize,
    pub em_iters: usize,
    pub min_rows: usize,
    pub laplace_alpha: f64,
    pub seed: u64,
}

impl Default for StructureHyperparams {
    fn default() -> Self {
        Self {
            mi_threshold: 0.02,
            n_clusters: 2,
            em_iters: 10,
            min_rows: 30,
            laplace_alpha: 1.0,
            seed: 0,
        }
    }
}

pub(crate) fn check_rows(schema: &VariableSchema, rows: &[Vec<usize>]) -> Result<()> {
    let nvars = schema.num_variables();
    for (i, row) in rows.iter().enumerate() {
        if row.len() != nvars {
            return Err(Error::DimensionMismatch {
                expected: nvars,
                got: row.len(),
            });
        }
        for (var, &v) in row.iter().enumerate() {
            if v >= schema.cardinality(var) {
                return Err(Error::Precondition(format!(
                    "row {i}: value {v} outside variable {var}"
                )));
            }
        }
    }
    Ok(())
}

/// Learns a circuit from full rows `[y, a_1, .., a_K]`.
pub fn learn_structure(
    schema: &VariableSchema,
    rows: &[Vec<usize>],
    hp: &StructureHyperparams,
) -> Result<Circuit> {
    if rows.is_empty() {
        return Err(Error::EmptyData);
    }
    if hp.n_clusters < 2 {
        return Err(Error::Precondition("n_clusters must be at least 2".into()));
    }
    check_rows(schema, rows)?;
    let mut builder = Builder {
        schema,
        rows,
        hp,
        rng: ChaCha8Rng::seed_from_u64(hp.seed),
        nodes: Vec::new(),
    };
    let all_rows: Vec<usize> = (0..rows.len()).collect();
    let vars: Vec<usize> = (0..schema.num_variables()).collect();
    builder.build(&all_rows, &vars);
    Ok(Circuit::from_nodes(schema.clone(), builder.nodes))
}

struct Builder<'a> {
    schema: &'a VariableSchema,
    rows: &'a [Vec<usize>],
    hp: &'a StructureHyperparams,
    rng: ChaCha8Rng,
    nodes: Vec<CircuitNode>,
}

fn scope_of(vars: &[usize]) -> Scope {
    vars.iter().fold(0, |s, &v| s | 1 << v)
}

impl Builder<'_> {
    fn push(&mut self, node: CircuitNode) -> NodeId {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn leaf(&mut self, var: usize, rows: &[usize]) -> NodeId {
        let card = self.schema.cardinality(var);
        let mut counts = vec![self.hp.laplace_alpha; card];
        for &r in rows {
            counts[self.rows[r][var]] += 1.0;
        }
        let total: f64 = counts.iter().sum();
        let table = counts.iter().map(|c| c / total).collect();
        self.push(CircuitNode::leaf(var, table))
    }

    fn factorized(&mut self, rows: &[usize], vars: &[usize]) -> NodeId {
        let children = vars.iter().map(|&v| self.leaf(v, rows)).collect();
        self.push(CircuitNode {
            scope: scope_of(vars),
            kind: NodeKind::Product { children },
        })
    }

    fn build(&mut self, rows: &[usize], vars: &[usize]) -> NodeId {
        if vars.len() == 1 {
            return self.leaf(vars[0], rows);
        }
        if rows.len() < self.hp.min_rows {
            return self.factorized(rows, vars);
        }
        let groups = self.independent_groups(rows, vars);
        if groups.len() > 1 {
            let children = groups.iter().map(|g| self.build(rows, g)).collect();
            return self.push(CircuitNode {
                scope: scope_of(vars),
                kind: NodeKind::Product { children },
            });
        }
        let clusters = self.cluster(rows, vars);
        if clusters.len() < 2 {
            return self.factorized(rows, vars);
        }
        let n = rows.len() as f64;
        let weights = clusters.iter().map(|c| c.len() as f64 / n).collect();
        let children = clusters.iter().map(|c| self.build(c, vars)).collect();
        self.push(CircuitNode {
            scope: scope_of(vars),
            kind: NodeKind::Sum { children, weights },
        })
    }

    /// Connected components of the graph joining pairs with MI ≥ threshold.
    fn independent_groups(&self, rows: &[usize], vars: &[usize]) -> Vec<Vec<usize>> {
        let m = vars.len();
        let mut parent: Vec<usize> = (0..m).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for i in 0..m {
            for j in i + 1..m {
                if find(&mut parent, i) == find(&mut parent, j) {
                    continue;
                }
                if self.mutual_information(rows, vars[i], vars[j]) >= self.hp.mi_threshold {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a] = b;
                }
            }
        }
        let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
        for i in 0..m {
            let r = find(&mut parent, i);
            match groups.iter_mut().find(|(root, _)| *root == r) {
                Some((_, g)) => g.push(vars[i]),
                None => groups.push((r, vec![vars[i]])),
            }
        }
        groups.into_iter().map(|(_, g)| g).collect()
    }

    fn mutual_information(&self, rows: &[usize], a: usize, b: usize) -> f64 {
        let (ca, cb) = (self.schema.cardinality(a), self.schema.cardinality(b));
        let mut joint = vec![0.0f64; ca * cb];
        let mut ma = vec![0.0f64; ca];
        let mut mb = vec![0.0f64; cb];
        for &r in rows {
            let (va, vb) = (self.rows[r][a], self.rows[r][b]);
            joint[va * cb + vb] += 1.0;
            ma[va] += 1.0;
            mb[vb] += 1.0;
        }
        let n = rows.len() as f64;
        let mut mi = 0.0;
        for va in 0..ca {
            for vb in 0..cb {
                let c = joint[va * cb + vb];
                if c > 0.0 {
                    mi += c / n * (c * n / (ma[va] * mb[vb])).ln();
                }
            }
        }
        mi.max(0.0)
    }

    /// Hard EM over products of categoricals; returns the nonempty clusters.
    fn cluster(&mut self, rows: &[usize], vars: &[usize]) -> Vec<Vec<usize>> {
        let k = self.hp.n_clusters.min(rows.len());
        let hamming = |x: usize, y: usize| {
            vars.iter()
                .filter(|&&v| self.rows[x][v] != self.rows[y][v])
                .count()
        };
        let mut centers = vec![rows[self.rng.random_range(0..rows.len())]];
        let mut nearest: Vec<usize> = rows.iter().map(|&r| hamming(r, centers[0])).collect();
        while centers.len() < k {
            let (best, &dist) = nearest.iter().enumerate().max_by_key(|(_, d)| **d).unwrap();
            if dist == 0 {
                break;
            }
            centers.push(rows[best]);
            for (slot, &r) in nearest.iter_mut().zip(rows) {
                *slot = (*slot).min(hamming(r, rows[best]));
            }
        }
        if centers.len() < 2 {
            return vec![rows.to_vec()];
        }
        let mut assign: Vec<usize> = rows
            .iter()
            .map(|&r| {
                (0..centers.len())
                    .min_by_key(|&c| hamming(r, centers[c]))
                    .unwrap()
            })
            .collect();
        let nc = centers.len();
        let alpha = self.hp.laplace_alpha.max(1e-3);
        for _ in 0..self.hp.em_iters {
            let mut sizes = vec![0.0f64; nc];
            let mut counts: Vec<Vec<Vec<f64>>> = (0..nc)
                .map(|_| {
                    vars.iter()
                        .map(|&v| vec![alpha; self.schema.cardinality(v)])
                        .collect()
                })
                .collect();
            for (&r, &c) in rows.iter().zip(&assign) {
                sizes[c] += 1.0;
                for (t, &v) in vars.iter().enumerate() {
                    counts[c][t][self.rows[r][v]] += 1.0;
                }
            }
            let log_tables: Vec<Vec<Vec<f64>>> = counts
                .iter()
                .map(|cl| {
                    cl.iter()
                        .map(|t| {
                            let s: f64 = t.iter().sum();
                            t.iter().map(|x| (x / s).ln()).collect()
                        })
                        .collect()
                })
                .collect();
            let log_prior: Vec<f64> = sizes
                .iter()
                .map(|s| ((s + 1.0) / (rows.len() + nc) as f64).ln())
                .collect();
            let mut changed = false;
            for (slot, &r) in assign.iter_mut().zip(rows) {
                let score = |c: usize| {
                    log_prior[c]
                        + vars
                            .iter()
                            .enumerate()
                            .map(|(t, &v)| log_tables[c][t][self.rows[r][v]])
                            .sum::<f64>()
                };
                let mut best = *slot;
                let mut best_score = score(best);
                for c in 0..nc {
                    let s = score(c);
                    if s > best_score + 1e-12 {
                        best = c;
                        best_score = s;
                    }
                }
                if best != *slot {
                    *slot = best;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        let mut clusters = vec![Vec::new(); nc];
        for (&r, &c) in rows.iter().zip(&assign) {
            clusters[c].push(r);
        }
        clusters.retain(|c| !c.is_empty());
        clusters
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::conditional_class;

    fn rows_from(
        seed: u64,
        n: usize,
        f: impl Fn(&mut ChaCha8Rng) -> Vec<usize>,
    ) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| f(&mut rng)).collect()
    }

    #[test]
    fn independent_pair_splits_into_leaves() {
        let schema = VariableSchema::new(2, vec![2]).unwrap();
        let rows = rows_from(1, 1000, |r| {
            vec![r.random_range(0..2), r.random_range(0..2)]
        });
        let c = learn_structure(&schema, &rows, &StructureHyperparams::default()).unwrap();
        assert!(c.validate().is_valid());
        let root = &c.nodes()[c.root()];
        match &root.kind {
            NodeKind::Product { children } => {
                assert_eq!(children.len(), 2);
                for &ch in children {
                    assert!(matches!(c.nodes()[ch].kind, NodeKind::Leaf { .. }));
                }
            }
            other => panic!("expected product root, got {other:?}"),
        }
    }

    #[test]
    fn correlated_pair_gives_sum_root() {
        let schema = VariableSchema::new(2, vec![2, 2]).unwrap();
        let rows = rows_from(2, 1000, |r| {
            let v = r.random_range(0..2);
            vec![v, v, v]
        });
        let c = learn_structure(&schema, &rows, &StructureHyperparams::default()).unwrap();
        assert!(c.validate().is_valid());
        assert!(matches!(c.nodes()[c.root()].kind, NodeKind::Sum { .. }));
    }

    #[test]
    fn single_row_is_smoothed_product() {
        let schema = VariableSchema::new(3, vec![2, 4]).unwrap();
        let c =
            learn_structure(&schema, &[vec![1, 0, 3]], &StructureHyperparams::default()).unwrap();
        assert!(c.validate().is_valid());
        let root = &c.nodes()[c.root()];
        assert_eq!(root.children().len(), 3);
        for &ch in root.children() {
            let NodeKind::Leaf { table, .. } = &c.nodes()[ch].kind else {
                panic!()
            };
            let max = table.iter().cloned().fold(0.0, f64::max);
            assert!(max <= 2.0 / (table.len() as f64 + 1.0) + 1e-12);
        }
    }

    #[test]
    fn empty_data_is_rejected() {
        let schema = VariableSchema::new(2, vec![2]).unwrap();
        assert!(matches!(
            learn_structure(&schema, &[], &StructureHyperparams::default()),
            Err(Error::EmptyData)
        ));
    }

    #[test]
    fn deterministic_mapping_is_recovered() {
        let schema = VariableSchema::new(4, vec![2, 2]).unwrap();
        for (n, floor) in [(200, 0.9), (2000, 0.99)] {
            let rows = rows_from(3, n, |r| {
                let (a, b) = (r.random_range(0..2), r.random_range(0..2));
                vec![2 * a + b, a, b]
            });
            let c = learn_structure(&schema, &rows, &StructureHyperparams::default()).unwrap();
            let cond = conditional_class(&c, &[1, 1]).unwrap();
            assert!(cond[3] >= floor, "{n} rows: {cond:?}");
        }
    }
}
