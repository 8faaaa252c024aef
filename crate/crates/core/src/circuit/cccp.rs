//! Multiplicative (CCCP / EM) parameter updates.

use rayon::prelude::*;

use super::learn::check_rows;
use super::{log_add, Circuit, NodeKind, ZERO_EVIDENCE};
use crate::error::{Error, Result};

const CHUNK: usize = 256;

#[derive(Debug, Clone)]
pub struct CccpFit {
    pub circuit: Circuit,
    /// Training log-likelihood before the first update and after each one.
    pub log_likelihood: Vec<f64>,
}

/// Total log-likelihood of full rows `[y, a_1, .., a_K]`.
pub fn log_likelihood(circuit: &Circuit, rows: &[Vec<usize>]) -> f64 {
    let chunks: Vec<f64> = rows
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .map(|r| {
                    let ev: Vec<Option<usize>> = r.iter().map(|&v| Some(v)).collect();
                    circuit.log_value(&ev)
                })
                .sum()
        })
        .collect();
    chunks.iter().sum()
}

struct Flows {
    /// Expected edge counts, indexed like the node table then child position.
    edges: Vec<Vec<f64>>,
    /// Expected value counts per leaf.
    leaves: Vec<Vec<f64>>,
}

impl Flows {
    fn zeros(circuit: &Circuit) -> Self {
        let mut edges = Vec::with_capacity(circuit.nodes().len());
        let mut leaves = Vec::with_capacity(circuit.nodes().len());
        for node in circuit.nodes() {
            match &node.kind {
                NodeKind::Sum { children, .. } => {
                    edges.push(vec![0.0; children.len()]);
                    leaves.push(Vec::new());
                }
                NodeKind::Leaf { table, .. } => {
                    edges.push(Vec::new());
                    leaves.push(vec![0.0; table.len()]);
                }
                NodeKind::Product { .. } => {
                    edges.push(Vec::new());
                    leaves.push(Vec::new());
                }
            }
        }
        Self { edges, leaves }
    }

    fn add(&mut self, other: &Flows) {
        for (a, b) in self.edges.iter_mut().zip(&other.edges) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.leaves.iter_mut().zip(&other.leaves) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

/// Top-down log-derivatives `log ∂S/∂S_i` and the per-row flow contributions.
fn accumulate_row(circuit: &Circuit, row: &[usize], flows: &mut Flows) {
    let ev: Vec<Option<usize>> = row.iter().map(|&v| Some(v)).collect();
    let vals = circuit.log_values(&ev);
    let nodes = circuit.nodes();
    let root = circuit.root();
    let log_s = vals[root];
    let mut deriv = vec![f64::NEG_INFINITY; nodes.len()];
    deriv[root] = 0.0;
    for id in (0..nodes.len()).rev() {
        let d = deriv[id];
        if d == f64::NEG_INFINITY {
            continue;
        }
        match &nodes[id].kind {
            NodeKind::Sum { children, weights } => {
                for (pos, (&c, &w)) in children.iter().zip(weights).enumerate() {
                    let lw = w.ln();
                    flows.edges[id][pos] += (d + lw + vals[c] - log_s).exp();
                    deriv[c] = log_add(deriv[c], d + lw);
                }
            }
            NodeKind::Product { children } => {
                for &c in children {
                    let others = if vals[c].is_finite() {
                        vals[id] - vals[c]
                    } else {
                        children.iter().filter(|&&o| o != c).map(|&o| vals[o]).sum()
                    };
                    deriv[c] = log_add(deriv[c], d + others);
                }
            }
            NodeKind::Leaf { var, .. } => {
                flows.leaves[id][row[*var]] += (d + vals[id] - log_s).exp();
            }
        }
    }
}

fn flows(circuit: &Circuit, rows: &[Vec<usize>]) -> Flows {
    let parts: Vec<Flows> = rows
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut f = Flows::zeros(circuit);
            for r in chunk {
                accumulate_row(circuit, r, &mut f);
            }
            f
        })
        .collect();
    let mut total = Flows::zeros(circuit);
    for p in &parts {
        total.add(p);
    }
    total
}

fn apply(circuit: &Circuit, flows: &Flows, alpha: f64, update_leaves: bool) -> Circuit {
    let mut next = circuit.clone();
    for (id, node) in next.nodes_mut().iter_mut().enumerate() {
        match &mut node.kind {
            NodeKind::Sum { weights, .. } => {
                let counts = &flows.edges[id];
                let total: f64 = counts.iter().sum();
                if total > 0.0 {
                    for (w, c) in weights.iter_mut().zip(counts) {
                        *w = c / total;
                    }
                }
            }
            NodeKind::Leaf { table, .. } if update_leaves => {
                let counts = &flows.leaves[id];
                let total: f64 = counts.iter().sum::<f64>() + alpha * counts.len() as f64;
                if total > 0.0 {
                    for (p, c) in table.iter_mut().zip(counts) {
                        *p = (c + alpha) / total;
                    }
                }
            }
            _ => {}
        }
    }
    next
}

/// Runs `iters` multiplicative updates with Laplace `α = 1` leaf re-estimation.
pub fn fit_parameters_cccp(
    circuit: &Circuit,
    rows: &[Vec<usize>],
    iters: usize,
) -> Result<CccpFit> {
    fit_parameters_cccp_with(circuit, rows, iters, 1.0)
}

/// As [`fit_parameters_cccp`] with an explicit smoothing constant.
///
/// Each iteration proposes weights and leaves together; when the smoothed
/// leaves would lower the likelihood the weights-only step is taken, and
/// when that also fails to improve the parameters are kept.
pub fn fit_parameters_cccp_with(
    circuit: &Circuit,
    rows: &[Vec<usize>],
    iters: usize,
    alpha: f64,
) -> Result<CccpFit> {
    if rows.is_empty() {
        return Err(Error::EmptyData);
    }
    check_rows(circuit.schema(), rows)?;
    for (i, r) in rows.iter().enumerate() {
        let ev: Vec<Option<usize>> = r.iter().map(|&v| Some(v)).collect();
        if !(circuit.log_value(&ev).exp() >= ZERO_EVIDENCE) {
            return Err(Error::DegenerateLikelihood(i));
        }
    }
    let mut current = circuit.clone();
    let mut ll = log_likelihood(&current, rows);
    let mut trace = vec![ll];
    for _ in 0..iters {
        let f = flows(&current, rows);
        let full = apply(&current, &f, alpha, true);
        let full_ll = log_likelihood(&full, rows);
        if full_ll >= ll {
            current = full;
            ll = full_ll;
        } else {
            let weights_only = apply(&current, &f, alpha, false);
            let w_ll = log_likelihood(&weights_only, rows);
            if w_ll >= ll {
                current = weights_only;
                ll = w_ll;
            }
        }
        trace.push(ll);
    }
    Ok(CccpFit {
        circuit: current,
        log_likelihood: trace,
    })
}
