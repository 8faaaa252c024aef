//! CBM-lite: the shared recognizer followed by a linear softmax head over
//! the concatenated attribute probabilities, trained with the recognizer
//! frozen.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{ClassScores, Mode};
use crate::recognizer::{AttributeModel, AttributeProbs, RecognizerParams};
use crate::text::fmt_f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CbmConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for CbmConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            learning_rate: 0.5,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// `softmax(W p + b)` with `p` the concatenated attribute distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub classes: usize,
    pub input_dim: usize,
    /// Row-major `classes × input_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearHead {
    pub fn zeros(classes: usize, input_dim: usize) -> Self {
        Self {
            classes,
            input_dim,
            weights: vec![0.0; classes * input_dim],
            bias: vec![0.0; classes],
        }
    }

    fn logits(&self, p: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|y| {
                let row = &self.weights[y * self.input_dim..(y + 1) * self.input_dim];
                self.bias[y] + row.iter().zip(p).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    pub fn scores(&self, probs: &AttributeProbs) -> Result<ClassScores> {
        let p = concat(probs);
        if p.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: p.len(),
            });
        }
        let normalized = crate::recognizer::softmax(&self.logits(&p));
        Ok(ClassScores {
            unnormalized: normalized.clone(),
            partition_value: 1.0,
            normalized,
            mode: Mode::Cbm,
            zero_partition: false,
        })
    }
}

fn concat(probs: &AttributeProbs) -> Vec<f64> {
    probs.probs.iter().flatten().copied().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CbmLiteModel {
    pub recognizer: RecognizerParams,
    pub head: LinearHead,
}

/// Fits the head by momentum SGD on class cross-entropy, starting from zero.
pub fn train_cbm_lite(
    recognizer: &RecognizerParams,
    inputs: &[&[f64]],
    labels: &[usize],
    classes: usize,
    cfg: &CbmConfig,
) -> Result<CbmLiteModel> {
    if inputs.len() != labels.len() {
        return Err(Error::LengthMismatch(inputs.len(), labels.len()));
    }
    if inputs.is_empty() {
        return Err(Error::EmptyData);
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Precondition(
            "CBM head needs batch_size ≥ 1 and a positive learning rate".into(),
        ));
    }
    if labels.iter().any(|&y| y >= classes) {
        return Err(Error::Precondition(
            "class label outside the class range".into(),
        ));
    }
    use rayon::prelude::*;
    let feats: Vec<Vec<f64>> = inputs
        .par_iter()
        .map(|x| recognizer.forward(x).map(|p| concat(&p)))
        .collect::<Result<_>>()?;
    let d = feats[0].len();
    let mut head = LinearHead::zeros(classes, d);
    let mut vw = vec![0.0; classes * d];
    let mut vb = vec![0.0; classes];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..feats.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut gw = vec![0.0; classes * d];
            let mut gb = vec![0.0; classes];
            for &i in batch {
                let mut g = crate::recognizer::softmax(&head.logits(&feats[i]));
                g[labels[i]] -= 1.0;
                for (y, gy) in g.iter().enumerate() {
                    gb[y] += gy;
                    for (w, v) in gw[y * d..(y + 1) * d].iter_mut().zip(&feats[i]) {
                        *w += gy * v;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for ((p, v), g) in head.weights.iter_mut().zip(&mut vw).zip(&gw) {
                *v = cfg.momentum * *v + g * scale;
                *p -= cfg.learning_rate * *v;
            }
            for ((p, v), g) in head.bias.iter_mut().zip(&mut vb).zip(&gb) {
                *v = cfg.momentum * *v + g * scale;
                *p -= cfg.learning_rate * *v;
            }
        }
    }
    Ok(CbmLiteModel {
        recognizer: recognizer.clone(),
        head,
    })
}

pub fn cbm_infer(model: &CbmLiteModel, x: &[f64]) -> Result<ClassScores> {
    model.head.scores(&model.recognizer.forward(x)?)
}

const HEADER: &str = "CBMHEAD v1";

pub fn write_cbm_head(head: &LinearHead) -> String {
    let mut out = String::new();
    writeln!(out, "{HEADER}").unwrap();
    writeln!(out, "classes {} inputs {}", head.classes, head.input_dim).unwrap();
    let b: Vec<String> = head.bias.iter().map(fmt_f64).collect();
    writeln!(out, "{}", b.join(" ")).unwrap();
    for row in head.weights.chunks(head.input_dim.max(1)) {
        let r: Vec<String> = row.iter().map(fmt_f64).collect();
        writeln!(out, "{}", r.join(" ")).unwrap();
    }
    out
}

pub fn parse_cbm_head(text: &str) -> Result<LinearHead> {
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::parse(1, format!("expected `{HEADER}`")));
    }
    let shape: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
    if shape.len() != 4 || shape[0] != "classes" || shape[2] != "inputs" {
        return Err(Error::parse(2, "expected `classes <C> inputs <D>`"));
    }
    let classes: usize = shape[1]
        .parse()
        .map_err(|_| Error::parse(2, "bad class count"))?;
    let input_dim: usize = shape[3]
        .parse()
        .map_err(|_| Error::parse(2, "bad input count"))?;
    let mut row = |n: usize, line: usize| -> Result<Vec<f64>> {
        let v: Vec<f64> = lines
            .next()
            .ok_or_else(|| Error::parse(line, "unexpected end of input"))?
            .split_whitespace()
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::parse(line, format!("bad number `{s}`")))
            })
            .collect::<Result<_>>()?;
        if v.len() != n {
            return Err(Error::parse(line, "row length mismatch"));
        }
        Ok(v)
    };
    let bias = row(classes, 3)?;
    let mut weights = Vec::with_capacity(classes * input_dim);
    for y in 0..classes {
        weights.extend(row(input_dim, 4 + y)?);
    }
    Ok(LinearHead {
        classes,
        input_dim,
        weights,
        bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_head_is_uniform() {
        let h = LinearHead::zeros(4, 5);
        let s = h
            .scores(&AttributeProbs {
                probs: vec![vec![0.2, 0.8], vec![0.1, 0.3, 0.6]],
            })
            .unwrap();
        assert!(s.normalized.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn permuting_attributes_and_weights_together_is_invisible() {
        let h = LinearHead {
            classes: 2,
            input_dim: 5,
            weights: vec![0.1, -0.4, 0.7, 0.2, 0.0, 1.0, 0.5, -0.3, 0.9, 0.4],
            bias: vec![0.05, -0.1],
        };
        let p = AttributeProbs {
            probs: vec![vec![0.3, 0.7], vec![0.2, 0.5, 0.3]],
        };
        // swap the two attributes: columns [a0 a1 | b0 b1 b2] -> [b0 b1 b2 | a0 a1]
        let perm = [2, 3, 4, 0, 1];
        let mut w = vec![0.0; 10];
        for y in 0..2 {
            for (j, &src) in perm.iter().enumerate() {
                w[y * 5 + j] = h.weights[y * 5 + src];
            }
        }
        let g = LinearHead {
            weights: w,
            ..h.clone()
        };
        let q = AttributeProbs {
            probs: vec![p.probs[1].clone(), p.probs[0].clone()],
        };
        let (a, b) = (h.scores(&p).unwrap(), g.scores(&q).unwrap());
        for (x, y) in a.normalized.iter().zip(&b.normalized) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn head_round_trip() {
        let h = LinearHead {
            classes: 2,
            input_dim: 3,
            weights: vec![0.1, 0.2, 1.0 / 3.0, -4.0, 5e-20, 6.0],
            bias: vec![0.5, -0.5],
        };
        assert_eq!(parse_cbm_head(&write_cbm_head(&h)).unwrap(), h);
        assert!(parse_cbm_head("nope").is_err());
    }
}
