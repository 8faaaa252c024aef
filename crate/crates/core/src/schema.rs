//! Variable layout shared by every module: variable 0 is the class `Y`,
//! variables `1..=K` are the attributes `A_1..A_K`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An attribute node: one value per attribute, in order.
pub type Node = Vec<usize>;

/// Index of the class variable inside a full assignment.
pub const CLASS_VAR: usize = 0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableSchema {
    class_cardinality: usize,
    attribute_cardinalities: Vec<usize>,
}

impl VariableSchema {
    pub fn new(class_cardinality: usize, attribute_cardinalities: Vec<usize>) -> Result<Self> {
        if attribute_cardinalities.is_empty() {
            return Err(Error::InvalidSchema(
                "at least one attribute is required".into(),
            ));
        }
        if attribute_cardinalities.len() > 62 {
            return Err(Error::InvalidSchema(
                "at most 62 attributes are supported".into(),
            ));
        }
        if class_cardinality < 2 || attribute_cardinalities.iter().any(|&c| c < 2) {
            return Err(Error::InvalidSchema(
                "every cardinality must be at least 2".into(),
            ));
        }
        Ok(Self {
            class_cardinality,
            attribute_cardinalities,
        })
    }

    pub fn class_cardinality(&self) -> usize {
        self.class_cardinality
    }

    pub fn attribute_cardinalities(&self) -> &[usize] {
        &self.attribute_cardinalities
    }

    /// Number of attributes `K`.
    pub fn num_attributes(&self) -> usize {
        self.attribute_cardinalities.len()
    }

    /// `K + 1`.
    pub fn num_variables(&self) -> usize {
        self.attribute_cardinalities.len() + 1
    }

    /// Cardinality of a variable in the full layout (0 = class).
    pub fn cardinality(&self, var: usize) -> usize {
        if var == CLASS_VAR {
            self.class_cardinality
        } else {
            self.attribute_cardinalities[var - 1]
        }
    }

    /// `∏_k |A_k|`, saturating at `u128::MAX`.
    pub fn omega_size(&self) -> u128 {
        self.attribute_cardinalities
            .iter()
            .fold(1u128, |acc, &c| acc.saturating_mul(c as u128))
    }

    pub fn full_scope(&self) -> u64 {
        (1u64 << self.num_variables()) - 1
    }

    pub fn check_node(&self, node: &[usize]) -> Result<()> {
        if node.len() != self.num_attributes() {
            return Err(Error::LengthMismatch(node.len(), self.num_attributes()));
        }
        for (k, (&v, &c)) in node.iter().zip(&self.attribute_cardinalities).enumerate() {
            if v >= c {
                return Err(Error::Precondition(format!(
                    "attribute {k} value {v} outside cardinality {c}"
                )));
            }
        }
        Ok(())
    }

    /// Mixed-radix index of a node, first attribute most significant.
    pub fn node_index(&self, node: &[usize]) -> u64 {
        node.iter()
            .zip(&self.attribute_cardinalities)
            .fold(0u64, |acc, (&v, &c)| acc * c as u64 + v as u64)
    }

    pub fn node_at(&self, mut index: u64) -> Node {
        let mut node = vec![0; self.num_attributes()];
        for (slot, &c) in node.iter_mut().zip(&self.attribute_cardinalities).rev() {
            *slot = (index % c as u64) as usize;
            index /= c as u64;
        }
        node
    }

    /// Iterator over every node of the attribute space in index order.
    pub fn nodes(&self) -> OmegaIter<'_> {
        OmegaIter {
            cards: &self.attribute_cardinalities,
            next: Some(vec![0; self.num_attributes()]),
        }
    }
}

/// Odometer over the attribute space.
pub struct OmegaIter<'a> {
    cards: &'a [usize],
    next: Option<Node>,
}

impl Iterator for OmegaIter<'_> {
    type Item = Node;

    fn next(&mut self) -> Option<Node> {
        let current = self.next.take()?;
        let mut succ = current.clone();
        let mut k = succ.len();
        loop {
            if k == 0 {
                break;
            }
            k -= 1;
            succ[k] += 1;
            if succ[k] < self.cards[k] {
                self.next = Some(succ);
                break;
            }
            succ[k] = 0;
        }
        Some(current)
    }
}

/// Joint probability `∏_k probs[k][node[k]]`.
pub fn product_mass(probs: &[Vec<f64>], node: &[usize]) -> f64 {
    probs.iter().zip(node).map(|(p, &v)| p[v]).product()
}

/// Calls `f(node, ∏_k probs[k][node[k]])` for every node of the space, in index order.
///
/// Prefix products are reused so each node costs one multiplication.
pub fn for_each_weighted_node(probs: &[Vec<f64>], mut f: impl FnMut(&[usize], f64)) {
    let k = probs.len();
    let mut node = vec![0usize; k];
    let mut prefix = vec![1.0f64; k + 1];
    for i in 0..k {
        prefix[i + 1] = prefix[i] * probs[i][0];
    }
    loop {
        f(&node, prefix[k]);
        let mut i = k;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            node[i] += 1;
            if node[i] < probs[i].len() {
                break;
            }
            node[i] = 0;
        }
        for j in i..k {
            prefix[j + 1] = prefix[j] * probs[j][node[j]];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_cardinalities() {
        assert!(VariableSchema::new(2, vec![]).is_err());
        assert!(VariableSchema::new(1, vec![2]).is_err());
        assert!(VariableSchema::new(2, vec![2, 1]).is_err());
    }

    #[test]
    fn index_round_trip() {
        let s = VariableSchema::new(3, vec![4, 2, 3]).unwrap();
        for (i, node) in s.nodes().enumerate() {
            assert_eq!(s.node_index(&node), i as u64);
            assert_eq!(s.node_at(i as u64), node);
        }
        assert_eq!(s.nodes().count(), 24);
    }

    #[test]
    fn weighted_enumeration_matches_direct_products() {
        let probs = vec![vec![0.2, 0.8], vec![0.1, 0.3, 0.6]];
        let mut seen = Vec::new();
        for_each_weighted_node(&probs, |n, w| seen.push((n.to_vec(), w)));
        assert_eq!(seen.len(), 6);
        for (n, w) in seen {
            assert!((w - product_mass(&probs, &n)).abs() < 1e-15);
        }
    }
}
