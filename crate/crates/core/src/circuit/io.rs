//! `PCIRCUIT v1` text format.
//!
//! ```text
//! PCIRCUIT v1
//! schema <|Y|> <|A_1|>,..,<|A_K|>
//! <id> leaf <var> - <p_0>,..,<p_n>
//! <id> product <v>,<v> <child>,<child> -
//! <id> sum <v>,<v> <child>,<child> <w>,<w>
//! ```
//! The root is the last node line.

use std::fmt::Write as _;

use super::{Circuit, CircuitNode, NodeKind, Scope};
use crate::error::{Error, Result};
use crate::schema::VariableSchema;
use crate::text::fmt_f64;

const HEADER: &str = "PCIRCUIT v1";

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    if items.is_empty() {
        "-".to_owned()
    } else {
        items.iter().map(f).collect::<Vec<_>>().join(",")
    }
}

fn scope_vars(scope: Scope) -> Vec<usize> {
    (0..64).filter(|v| scope >> v & 1 == 1).collect()
}

pub fn write_circuit(circuit: &Circuit) -> String {
    let schema = circuit.schema();
    let mut out = String::new();
    writeln!(out, "{HEADER}").unwrap();
    writeln!(
        out,
        "schema {} {}",
        schema.class_cardinality(),
        join(schema.attribute_cardinalities(), |c| c.to_string())
    )
    .unwrap();
    for (id, node) in circuit.nodes().iter().enumerate() {
        let scope = join(&scope_vars(node.scope), |v| v.to_string());
        let line = match &node.kind {
            NodeKind::Leaf { table, .. } => format!("{id} leaf {scope} - {}", join(table, fmt_f64)),
            NodeKind::Product { children } => {
                format!(
                    "{id} product {scope} {} -",
                    join(children, |c| c.to_string())
                )
            }
            NodeKind::Sum { children, weights } => format!(
                "{id} sum {scope} {} {}",
                join(children, |c| c.to_string()),
                join(weights, fmt_f64)
            ),
        };
        writeln!(out, "{line}").unwrap();
    }
    out
}

fn parse_list<T: std::str::FromStr>(field: &str, line: usize) -> Result<Vec<T>> {
    if field == "-" {
        return Ok(Vec::new());
    }
    field
        .split(',')
        .map(|t| {
            t.parse()
                .map_err(|_| Error::parse(line, format!("bad list entry `{t}`")))
        })
        .collect()
}

/// Parses the text format; the result is not validated.
pub fn parse_circuit(text: &str) -> Result<Circuit> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, HEADER)) => {}
        _ => return Err(Error::parse(1, format!("expected `{HEADER}`"))),
    }
    let (ln, schema_line) = lines
        .next()
        .ok_or_else(|| Error::parse(2, "missing schema line"))?;
    let parts: Vec<&str> = schema_line.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != "schema" {
        return Err(Error::parse(ln, "expected `schema <classes> <cards>`"));
    }
    let classes = parts[1]
        .parse()
        .map_err(|_| Error::parse(ln, "bad class cardinality"))?;
    let schema = VariableSchema::new(classes, parse_list(parts[2], ln)?)?;
    let mut nodes = Vec::new();
    for (ln, line) in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(Error::parse(ln, "expected 5 fields"));
        }
        let id: usize = f[0].parse().map_err(|_| Error::parse(ln, "bad node id"))?;
        if id != nodes.len() {
            return Err(Error::parse(ln, format!("node id {id} out of sequence")));
        }
        let vars: Vec<usize> = parse_list(f[2], ln)?;
        if vars.iter().any(|&v| v >= 64) {
            return Err(Error::parse(ln, "scope variable out of range"));
        }
        let scope = vars.iter().fold(0u64, |s, &v| s | 1 << v);
        let kind = match f[1] {
            "leaf" => {
                let [var] = vars[..] else {
                    return Err(Error::parse(ln, "leaf scope must be a single variable"));
                };
                NodeKind::Leaf {
                    var,
                    table: parse_list(f[4], ln)?,
                }
            }
            "product" => NodeKind::Product {
                children: parse_list(f[3], ln)?,
            },
            "sum" => NodeKind::Sum {
                children: parse_list(f[3], ln)?,
                weights: parse_list(f[4], ln)?,
            },
            other => return Err(Error::parse(ln, format!("unknown node kind `{other}`"))),
        };
        nodes.push(CircuitNode { scope, kind });
    }
    if nodes.is_empty() {
        return Err(Error::parse(text.lines().count(), "no nodes"));
    }
    Ok(Circuit::from_nodes(schema, nodes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{learn_structure, StructureHyperparams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let schema = VariableSchema::new(3, vec![2, 3, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<usize>> = (0..400)
            .map(|_| {
                let a = rng.random_range(0..2);
                vec![a + rng.random_range(0..2), a, rng.random_range(0..3), a]
            })
            .collect();
        let c = learn_structure(&schema, &rows, &StructureHyperparams::default())
            .unwrap()
            .with_random_parameters(9);
        let text = write_circuit(&c);
        let back = parse_circuit(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(write_circuit(&back), text);
    }

    #[test]
    fn rejects_bad_header() {
        assert!(matches!(
            parse_circuit("PCIRCUIT v2\n"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn reports_line_of_bad_node() {
        let text = "PCIRCUIT v1\nschema 2 2\n0 leaf 0 - 0.5,0.5\n1 leaf 1 - x\n";
        assert!(matches!(
            parse_circuit(text),
            Err(Error::Parse { line: 4, .. })
        ));
    }
}
