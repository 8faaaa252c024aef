//! White-box untargeted attacks on a subset of attributes, and adversarial
//! training with them.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recognizer::{
    argmax, attack_loss, batch_gradient, check_examples, epoch_order, input_gradient, Architecture,
    AttributeModel, Example, Momentum, RecognizerParams, TrainConfig, TrainOutcome,
};
use crate::schema::Node;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L2,
}

impl Norm {
    pub fn name(self) -> &'static str {
        match self {
            Norm::Linf => "linf",
            Norm::L2 => "l2",
        }
    }

    pub fn measure(self, v: &[f64]) -> f64 {
        match self {
            Norm::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
            Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub norm: Norm,
    pub bound: f64,
    pub steps: usize,
    /// `2/255` for `Linf` and `0.1·bound` for `L2` when absent.
    pub step_size: Option<f64>,
    /// 1-based attribute indices.
    pub attacked: Vec<usize>,
    pub random_start: bool,
    pub cw_binary_steps: usize,
    pub cw_inner_steps: usize,
    pub cw_inner_lr: f64,
    pub cw_c0: f64,
    pub cw_c_bracket: (f64, f64),
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            norm: Norm::Linf,
            bound: 0.03,
            steps: 50,
            step_size: None,
            attacked: vec![1],
            random_start: true,
            cw_binary_steps: 10,
            cw_inner_steps: 10,
            cw_inner_lr: 0.01,
            cw_c0: 1e-2,
            cw_c_bracket: (1e-4, 1e2),
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn effective_step(&self) -> f64 {
        self.step_size.unwrap_or(match self.norm {
            Norm::Linf => 2.0 / 255.0,
            Norm::L2 => 0.1 * self.bound,
        })
    }

    pub(crate) fn check(&self, k: usize) -> Result<()> {
        if !(self.bound >= 0.0) {
            return Err(Error::Precondition(
                "attack bound must be nonnegative".into(),
            ));
        }
        if self.attacked.is_empty() || self.attacked.iter().any(|&a| a == 0 || a > k) {
            return Err(Error::Precondition(format!(
                "attacked set must be a nonempty subset of 1..={k}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvPair {
    pub x: Vec<f64>,
    pub x_tilde: Vec<f64>,
    pub labels: Node,
    pub class_label: usize,
    pub achieved_norm: f64,
    /// Every attacked attribute's argmax differs from its label at `x_tilde`.
    pub success: bool,
}

fn flipped(
    model: &dyn AttributeModel,
    x: &[f64],
    labels: &[usize],
    attacked: &[usize],
) -> Result<bool> {
    let p = model.forward(x)?;
    Ok(attacked
        .iter()
        .all(|&k| argmax(&p.probs[k - 1]) != labels[k - 1]))
}

fn pair(
    model: &dyn AttributeModel,
    x: &[f64],
    x_tilde: Vec<f64>,
    labels: &[usize],
    class_label: usize,
    cfg: &AttackConfig,
) -> Result<AdvPair> {
    let delta: Vec<f64> = x_tilde.iter().zip(x).map(|(a, b)| a - b).collect();
    Ok(AdvPair {
        success: flipped(model, &x_tilde, labels, &cfg.attacked)?,
        achieved_norm: cfg.norm.measure(&delta),
        x: x.to_vec(),
        x_tilde,
        labels: labels.to_vec(),
        class_label,
    })
}

/// Projects `x` onto the `cfg.norm` ball around `x0`, then onto the box.
fn project(x: &mut [f64], x0: &[f64], norm: Norm, bound: f64) {
    match norm {
        Norm::Linf => {
            for (v, &c) in x.iter_mut().zip(x0) {
                *v = v.clamp(c - bound, c + bound);
            }
        }
        Norm::L2 => {
            let n = x
                .iter()
                .zip(x0)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            if n > bound {
                let s = bound / n;
                for (v, &c) in x.iter_mut().zip(x0) {
                    *v = c + (*v - c) * s;
                }
            }
        }
    }
    for v in x.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

fn random_start(rng: &mut ChaCha8Rng, x0: &[f64], norm: Norm, bound: f64) -> Vec<f64> {
    let mut x: Vec<f64> = match norm {
        Norm::Linf => x0
            .iter()
            .map(|&c| c + rng.random_range(-bound..=bound))
            .collect(),
        Norm::L2 => {
            let dir: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
            let n = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-300);
            let radius = bound * rng.random::<f64>().powf(1.0 / x0.len() as f64);
            x0.iter()
                .zip(&dir)
                .map(|(c, d)| c + d / n * radius)
                .collect()
        }
    };
    project(&mut x, x0, norm, bound);
    x
}

/// Projected gradient ascent on the mean cross-entropy of the attacked
/// attributes. Returns the best iterate seen, the clean input included.
pub fn pgd(
    model: &dyn AttributeModel,
    x: &[f64],
    labels: &[usize],
    class_label: usize,
    cfg: &AttackConfig,
) -> Result<AdvPair> {
    cfg.check(labels.len())?;
    if x.len() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            got: x.len(),
        });
    }
    if cfg.bound == 0.0 || cfg.steps == 0 && !cfg.random_start {
        return pair(model, x, x.to_vec(), labels, class_label, cfg);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eta = cfg.effective_step();
    let mut best = x.to_vec();
    let mut best_loss = attack_loss(model, x, labels, &cfg.attacked)?;
    let mut cur = if cfg.random_start {
        random_start(&mut rng, x, cfg.norm, cfg.bound)
    } else {
        x.to_vec()
    };
    let mut consider = |cand: &[f64], best: &mut Vec<f64>| -> Result<()> {
        let l = attack_loss(model, cand, labels, &cfg.attacked)?;
        if l > best_loss {
            best_loss = l;
            *best = cand.to_vec();
        }
        Ok(())
    };
    if cfg.random_start {
        consider(&cur, &mut best)?;
    }
    for _ in 0..cfg.steps {
        let g = input_gradient(model, &cur, labels, &cfg.attacked)?;
        match cfg.norm {
            Norm::Linf => {
                for (v, gi) in cur.iter_mut().zip(&g) {
                    *v += eta
                        * if *gi > 0.0 {
                            1.0
                        } else if *gi < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                }
            }
            Norm::L2 => {
                let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    for (v, gi) in cur.iter_mut().zip(&g) {
                        *v += eta * gi / n;
                    }
                }
            }
        }
        project(&mut cur, x, cfg.norm, cfg.bound);
        consider(&cur, &mut best)?;
    }
    pair(model, x, best, labels, class_label, cfg)
}

/// Untargeted margin `(1/m) Σ max(log p_true − max_other log p, −κ)` with κ = 0
/// and its gradient with respect to the log-probabilities.
fn cw_margin(
    model: &dyn AttributeModel,
    x: &[f64],
    labels: &[usize],
    attacked: &[usize],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let p = model.forward(x)?;
    let m = attacked.len() as f64;
    let mut up: Vec<Vec<f64>> = p.probs.iter().map(|q| vec![0.0; q.len()]).collect();
    let mut f = 0.0;
    for &k in attacked {
        let q = &p.probs[k - 1];
        let y = labels[k - 1];
        let (other, _) = q.iter().enumerate().filter(|&(i, _)| i != y).fold(
            (usize::MAX, f64::NEG_INFINITY),
            |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
        );
        let lt = q[y].max(f64::MIN_POSITIVE).ln();
        let lo = q[other].max(f64::MIN_POSITIVE).ln();
        let margin = lt - lo;
        if margin > 0.0 {
            f += margin / m;
            up[k - 1][y] += 1.0 / m;
            up[k - 1][other] -= 1.0 / m;
        }
    }
    Ok((f, up))
}

/// Carlini–Wagner L2 with a tanh box and binary search over `c`; the
/// result is projected onto the `bound` ball.
pub fn cw_l2(
    model: &dyn AttributeModel,
    x: &[f64],
    labels: &[usize],
    class_label: usize,
    cfg: &AttackConfig,
) -> Result<AdvPair> {
    cfg.check(labels.len())?;
    if cfg.cw_binary_steps == 0 {
        return Err(Error::Precondition(
            "cw_binary_steps must be at least 1".into(),
        ));
    }
    if x.len() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            got: x.len(),
        });
    }
    let cfg = &AttackConfig {
        norm: Norm::L2,
        ..cfg.clone()
    };
    let w0: Vec<f64> = x
        .iter()
        .map(|&v| (2.0 * v.clamp(1e-6, 1.0 - 1e-6) - 1.0).atanh())
        .collect();
    let (lo_c, hi_c) = cfg.cw_c_bracket;
    let (mut lo, mut hi) = (lo_c, f64::INFINITY);
    let mut c = cfg.cw_c0.clamp(lo_c, hi_c);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut last = x.to_vec();
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    for _ in 0..cfg.cw_binary_steps {
        let mut w = w0.clone();
        let mut m1 = vec![0.0; w.len()];
        let mut m2 = vec![0.0; w.len()];
        let mut found = false;
        for t in 1..=cfg.cw_inner_steps {
            let xt: Vec<f64> = w.iter().map(|v| (v.tanh() + 1.0) / 2.0).collect();
            let (_, up) = cw_margin(model, &xt, labels, &cfg.attacked)?;
            let gf = model.log_prob_vjp(&xt, &up)?;
            for i in 0..w.len() {
                let dx = 2.0 * (xt[i] - x[i]) + c * gf[i];
                let g = dx * (1.0 - w[i].tanh().powi(2)) / 2.0;
                m1[i] = b1 * m1[i] + (1.0 - b1) * g;
                m2[i] = b2 * m2[i] + (1.0 - b2) * g * g;
                let mh = m1[i] / (1.0 - b1.powi(t as i32));
                let vh = m2[i] / (1.0 - b2.powi(t as i32));
                w[i] -= cfg.cw_inner_lr * mh / (vh.sqrt() + eps);
            }
            let mut cand: Vec<f64> = w.iter().map(|v| (v.tanh() + 1.0) / 2.0).collect();
            project(&mut cand, x, Norm::L2, cfg.bound);
            if flipped(model, &cand, labels, &cfg.attacked)? {
                found = true;
                let n =
                    Norm::L2.measure(&cand.iter().zip(x).map(|(a, b)| a - b).collect::<Vec<_>>());
                if best.as_ref().is_none_or(|(bn, _)| n < *bn) {
                    best = Some((n, cand.clone()));
                }
            }
            last = cand;
        }
        if found {
            hi = c;
            c = (lo + hi) / 2.0;
        } else {
            lo = c;
            c = if hi.is_finite() {
                (lo + hi) / 2.0
            } else {
                (c * 10.0).min(hi_c)
            };
        }
    }
    let x_tilde = best.map_or(last, |(_, v)| v);
    pair(model, x, x_tilde, labels, class_label, cfg)
}

fn sample_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Attacks every `(x, labels, class)` in parallel; sample `i` uses a seed
/// derived from `cfg.seed` and `i`.
pub fn attack_batch(
    model: &dyn AttributeModel,
    inputs: &[(&[f64], &[usize], usize)],
    cfg: &AttackConfig,
    cw: bool,
) -> Result<Vec<AdvPair>> {
    inputs
        .par_iter()
        .enumerate()
        .map(|(i, (x, a, y))| {
            let c = AttackConfig {
                seed: sample_seed(cfg.seed, i),
                ..cfg.clone()
            };
            if cw {
                cw_l2(model, x, a, *y, &c)
            } else {
                pgd(model, x, a, *y, &c)
            }
        })
        .collect()
}

/// Training on each batch plus PGD examples against one random attribute.
pub fn adversarial_train<E: Example>(
    arch: &Architecture,
    data: &[E],
    cfg: &TrainConfig,
    atk: &AttackConfig,
) -> Result<TrainOutcome> {
    cfg.check()?;
    check_examples(arch, data)?;
    let k = arch.cardinalities.len();
    atk.check(k)?;
    let mut params = RecognizerParams::init(arch, cfg.seed)?;
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546);
    let mut pick = ChaCha8Rng::seed_from_u64(atk.seed ^ 0x4154_4b31);
    let mut opt = Momentum::new(&params);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut batch_no = 0u64;
    for _ in 0..cfg.epochs {
        let order = epoch_order(&mut shuffle, data.len());
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let target = pick.random_range(1..=k);
            let bcfg = AttackConfig {
                attacked: vec![target],
                seed: sample_seed(atk.seed, batch_no as usize),
                ..atk.clone()
            };
            batch_no += 1;
            let inputs: Vec<(&[f64], &[usize], usize)> = batch
                .iter()
                .map(|&i| (data[i].features(), data[i].attributes(), 0))
                .collect();
            let adv = attack_batch(&params, &inputs, &bcfg, false)?;
            let benign: Vec<(&[f64], &[usize])> = inputs.iter().map(|(x, a, _)| (*x, *a)).collect();
            let crafted: Vec<(&[f64], &[usize])> = adv
                .iter()
                .map(|p| (p.x_tilde.as_slice(), p.labels.as_slice()))
                .collect();
            let (mut g, loss_b) = batch_gradient(&params, &benign);
            let (ga, loss_a) = batch_gradient(&params, &crafted);
            g.add_assign(&ga);
            total += loss_b + loss_a;
            opt.step(&mut params, &g, 2 * benign.len(), cfg);
        }
        epoch_loss.push(total / (2 * data.len()) as f64);
    }
    Ok(TrainOutcome { params, epoch_loss })
}

const ADV_HEADER: &str = "ADV v1";

/// CSV summary plus a binary sidecar holding `x` and `x_tilde` per row.
pub fn write_adv_pairs(
    pairs: &[AdvPair],
    csv: &mut impl Write,
    sidecar: &mut impl Write,
) -> Result<()> {
    writeln!(csv, "index,class_label,labels,achieved_norm,success")?;
    for (i, p) in pairs.iter().enumerate() {
        let labels: Vec<String> = p.labels.iter().map(|v| v.to_string()).collect();
        writeln!(
            csv,
            "{i},{},{},{},{}",
            p.class_label,
            labels.join(";"),
            crate::text::fmt_f64(&p.achieved_norm),
            p.success
        )?;
    }
    let dim = pairs.first().map_or(0, |p| p.x.len());
    writeln!(sidecar, "{ADV_HEADER}")?;
    writeln!(sidecar, "rows {} dim {dim}", pairs.len())?;
    let mut buf = Vec::with_capacity(pairs.len() * dim * 16);
    for p in pairs {
        for v in p.x.iter().chain(&p.x_tilde) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    sidecar.write_all(&buf)?;
    Ok(())
}

pub fn read_adv_pairs(csv: &str, sidecar: &mut impl Read) -> Result<Vec<AdvPair>> {
    let mut bytes = Vec::new();
    sidecar.read_to_end(&mut bytes)?;
    let header_end = |from: usize, line: usize| {
        bytes[from..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|p| from + p)
            .ok_or_else(|| Error::parse(line, "truncated sidecar header"))
    };
    let e1 = header_end(0, 1)?;
    if &bytes[..e1] != ADV_HEADER.as_bytes() {
        return Err(Error::parse(1, format!("expected `{ADV_HEADER}`")));
    }
    let e2 = header_end(e1 + 1, 2)?;
    let shape = String::from_utf8_lossy(&bytes[e1 + 1..e2]).to_string();
    let f: Vec<&str> = shape.split_whitespace().collect();
    if f.len() != 4 || f[0] != "rows" || f[2] != "dim" {
        return Err(Error::parse(2, "expected `rows <n> dim <d>`"));
    }
    let n: usize = f[1].parse().map_err(|_| Error::parse(2, "bad row count"))?;
    let dim: usize = f[3].parse().map_err(|_| Error::parse(2, "bad dimension"))?;
    let body = &bytes[e2 + 1..];
    if body.len() != n * dim * 16 {
        return Err(Error::parse(3, "sidecar length does not match its header"));
    }
    let mut pairs = Vec::with_capacity(n);
    let mut lines = csv.lines().enumerate().skip(1);
    for row in body.chunks(dim * 16).take(n) {
        let vals: Vec<f64> = row
            .chunks(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (ln, line) = lines
            .next()
            .ok_or_else(|| Error::parse(0, "CSV has fewer rows than the sidecar"))?;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 5 {
            return Err(Error::parse(ln + 1, "expected 5 columns"));
        }
        let bad = |what: &str| Error::parse(ln + 1, format!("bad {what}"));
        pairs.push(AdvPair {
            x: vals[..dim].to_vec(),
            x_tilde: vals[dim..].to_vec(),
            class_label: cells[1].parse().map_err(|_| bad("class label"))?,
            labels: cells[2]
                .split(';')
                .map(|v| v.parse().map_err(|_| bad("labels")))
                .collect::<Result<_>>()?,
            achieved_norm: cells[3].parse().map_err(|_| bad("norm"))?,
            success: cells[4].parse().map_err(|_| bad("success flag"))?,
        });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recognizer::train;

    struct Ex(Vec<f64>, Vec<usize>);

    impl Example for Ex {
        fn features(&self) -> &[f64] {
            &self.0
        }
        fn attributes(&self) -> &[usize] {
            &self.1
        }
    }

    fn arch() -> Architecture {
        Architecture {
            input_dim: 8,
            cardinalities: vec![2, 2],
            hidden_dim: 8,
            fields: Some(vec![(0..4).collect(), (4..8).collect()]),
        }
    }

    fn data(n: usize) -> Vec<Ex> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        (0..n)
            .map(|_| {
                let a = vec![rng.random_range(0..2), rng.random_range(0..2)];
                let x = (0..8)
                    .map(|i| {
                        let bit = a[i / 4] == (i % 2);
                        (if bit { 0.6 } else { 0.4 }) + rng.random_range(-0.03..0.03)
                    })
                    .collect();
                Ex(x, a)
            })
            .collect()
    }

    fn trained() -> RecognizerParams {
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 16,
            ..TrainConfig::default()
        };
        train(&arch(), &data(300), &cfg).unwrap().params
    }

    #[test]
    fn zero_bound_is_identity() {
        let p = trained();
        let d = data(5);
        for norm in [Norm::Linf, Norm::L2] {
            let cfg = AttackConfig {
                norm,
                bound: 0.0,
                ..AttackConfig::default()
            };
            let adv = pgd(&p, &d[0].0, &d[0].1, 0, &cfg).unwrap();
            assert_eq!(adv.x_tilde, d[0].0);
        }
    }

    #[test]
    fn constraints_hold_and_ascent() {
        let p = trained();
        for (i, e) in data(40).iter().enumerate() {
            for norm in [Norm::Linf, Norm::L2] {
                for random_start in [false, true] {
                    let cfg = AttackConfig {
                        norm,
                        bound: 0.1,
                        steps: 10,
                        random_start,
                        seed: i as u64,
                        attacked: vec![1, 2],
                        ..AttackConfig::default()
                    };
                    let adv = pgd(&p, &e.0, &e.1, 0, &cfg).unwrap();
                    assert!(adv.achieved_norm <= 0.1 + 1e-9);
                    assert!(adv.x_tilde.iter().all(|v| (0.0..=1.0).contains(v)));
                    let before = attack_loss(&p, &e.0, &e.1, &cfg.attacked).unwrap();
                    let after = attack_loss(&p, &adv.x_tilde, &e.1, &cfg.attacked).unwrap();
                    assert!(after >= before);
                }
            }
        }
    }

    #[test]
    fn larger_bound_never_hurts_mean_objective() {
        let p = trained();
        let d = data(60);
        let mut last = f64::NEG_INFINITY;
        for bound in [0.0, 0.02, 0.05, 0.1] {
            let cfg = AttackConfig {
                bound,
                steps: 20,
                random_start: false,
                ..AttackConfig::default()
            };
            let mean: f64 = d
                .iter()
                .map(|e| {
                    let adv = pgd(&p, &e.0, &e.1, 0, &cfg).unwrap();
                    attack_loss(&p, &adv.x_tilde, &e.1, &cfg.attacked).unwrap()
                })
                .sum::<f64>()
                / d.len() as f64;
            assert!(mean >= last, "{bound}: {mean} < {last}");
            last = mean;
        }
    }

    #[test]
    fn cw_cannot_move_constant_model() {
        let p = RecognizerParams::zeros(&arch()).unwrap();
        let cfg = AttackConfig {
            bound: 1.0,
            ..AttackConfig::default()
        };
        let adv = cw_l2(&p, &[0.5; 8], &[0, 0], 0, &cfg).unwrap();
        assert!(!adv.success);
        assert!(adv.x_tilde.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn cw_success_is_monotone_in_binary_steps() {
        let p = trained();
        let d = data(40);
        let rate = |steps: usize| {
            let cfg = AttackConfig {
                bound: 0.5,
                cw_binary_steps: steps,
                cw_inner_steps: 20,
                ..AttackConfig::default()
            };
            d.iter()
                .filter(|e| cw_l2(&p, &e.0, &e.1, 0, &cfg).unwrap().success)
                .count()
        };
        let mut last = 0;
        for s in [1, 3, 6, 11] {
            let r = rate(s);
            assert!(r >= last, "{s}: {r} < {last}");
            last = r;
        }
    }

    #[test]
    fn zero_bound_adversarial_training_matches_plain() {
        let d = data(64);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let plain = train(&arch(), &d, &cfg).unwrap();
        let atk = AttackConfig {
            bound: 0.0,
            steps: 3,
            ..AttackConfig::default()
        };
        let adv = adversarial_train(&arch(), &d, &cfg, &atk).unwrap();
        assert_eq!(plain.params, adv.params);
        let atk = AttackConfig {
            bound: 0.05,
            steps: 3,
            ..AttackConfig::default()
        };
        let a = adversarial_train(&arch(), &d, &cfg, &atk).unwrap();
        let b = adversarial_train(&arch(), &d, &cfg, &atk).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, plain.params);
    }

    #[test]
    fn adv_pairs_round_trip() {
        let p = trained();
        let d = data(4);
        let inputs: Vec<(&[f64], &[usize], usize)> = d
            .iter()
            .map(|e| (e.0.as_slice(), e.1.as_slice(), 1))
            .collect();
        let pairs = attack_batch(
            &p,
            &inputs,
            &AttackConfig {
                bound: 0.05,
                steps: 5,
                ..AttackConfig::default()
            },
            false,
        )
        .unwrap();
        let (mut csv, mut side) = (Vec::new(), Vec::new());
        write_adv_pairs(&pairs, &mut csv, &mut side).unwrap();
        let back =
            read_adv_pairs(std::str::from_utf8(&csv).unwrap(), &mut side.as_slice()).unwrap();
        assert_eq!(back, pairs);
    }
}
