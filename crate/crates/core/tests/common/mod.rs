//! Random valid circuits and a brute-force evaluator.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rnpc_core::circuit::{Circuit, CircuitNode, NodeKind};
use rnpc_core::VariableSchema;

pub fn simplex(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

struct Builder<'a> {
    schema: &'a VariableSchema,
    nodes: Vec<CircuitNode>,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn build(&mut self, vars: &[usize], depth: usize) -> usize {
        let scope = vars.iter().fold(0u64, |m, &v| m | 1 << v);
        let kind = if vars.len() == 1 {
            let v = vars[0];
            if depth < 3 && self.rng.random_bool(0.3) {
                let children = (0..self.rng.random_range(2..=3))
                    .map(|_| self.leaf(v))
                    .collect::<Vec<_>>();
                let weights = simplex(&mut self.rng, children.len());
                NodeKind::Sum { children, weights }
            } else {
                return self.leaf(v);
            }
        } else if depth < 4 && self.rng.random_bool(0.5) {
            let n = self.rng.random_range(2..=3);
            let children: Vec<usize> = (0..n).map(|_| self.build(vars, depth + 1)).collect();
            let weights = simplex(&mut self.rng, n);
            NodeKind::Sum { children, weights }
        } else {
            let mut shuffled = vars.to_vec();
            shuffled.shuffle(&mut self.rng);
            let parts = self.rng.random_range(2..=shuffled.len());
            let mut groups = vec![Vec::new(); parts];
            for (i, v) in shuffled.into_iter().enumerate() {
                let g = if i < parts {
                    i
                } else {
                    self.rng.random_range(0..parts)
                };
                groups[g].push(v);
            }
            let children = groups.iter().map(|g| self.build(g, depth + 1)).collect();
            NodeKind::Product { children }
        };
        self.nodes.push(CircuitNode { scope, kind });
        self.nodes.len() - 1
    }

    fn leaf(&mut self, v: usize) -> usize {
        let table = simplex(&mut self.rng, self.schema.cardinality(v));
        self.nodes.push(CircuitNode::leaf(v, table));
        self.nodes.len() - 1
    }
}

pub fn random_circuit(seed: u64) -> Circuit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let k = rng.random_range(1..=4);
        let schema = VariableSchema::new(
            rng.random_range(2..=4),
            (0..k).map(|_| rng.random_range(2..=4)).collect(),
        )
        .unwrap();
        if schema.omega_size() * schema.class_cardinality() as u128 > 10_000 {
            continue;
        }
        let vars: Vec<usize> = (0..schema.num_variables()).collect();
        let mut b = Builder {
            schema: &schema,
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(rng.random()),
        };
        b.build(&vars, 0);
        let nodes = b.nodes;
        let c = Circuit::from_nodes(schema, nodes);
        assert!(c.validate().is_valid(), "{}", c.validate());
        return c;
    }
}

/// Linear-space recursion over the node table with every variable set.
pub fn direct(c: &Circuit, state: &[usize]) -> f64 {
    let mut v = vec![0.0; c.nodes().len()];
    for (i, n) in c.nodes().iter().enumerate() {
        v[i] = match &n.kind {
            NodeKind::Leaf { var, table } => table[state[*var]],
            NodeKind::Product { children } => children.iter().map(|&ch| v[ch]).product(),
            NodeKind::Sum { children, weights } => {
                children.iter().zip(weights).map(|(&ch, w)| w * v[ch]).sum()
            }
        };
    }
    v[c.root()]
}

/// Every full assignment of `(Y, A_1..A_K)`.
pub fn states(schema: &VariableSchema) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for var in 0..schema.num_variables() {
        out = out
            .into_iter()
            .flat_map(|s| {
                (0..schema.cardinality(var)).map(move |x| {
                    let mut t = s.clone();
                    t.push(x);
                    t
                })
            })
            .collect();
    }
    out
}
