//! Central finite differences and the per-kernel gradient audit.

use serde::Serialize;

use super::{
    autoregressive_ce, ciou_loss_frozen_alpha, ciou_loss_params, cosine_distance, dice_loss, reid_loss,
    sa_loss_params, smooth_l1_loss, wbce_loss, Emphasis, FgWeight, Grid, LossConfig, LossError, NegativeMining,
    ReidBatch, ReidIdentity,
};
use crate::mask::BinaryMask;
use crate::rng::SplitMix64;
use crate::toy::{Activation, AdapterParams};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Coordinates whose analytic value is below this are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-6;
pub const ABS_TOL: f64 = 1e-6;
pub const DEFAULT_TRIALS: usize = 100;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn finite_diff_gradient<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Worst {
    pub trial: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Comparison {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub pass: bool,
    /// Coordinate with the largest tolerance-normalized error.
    pub worst_index: Option<usize>,
    worst_score: f64,
}

pub fn compare_gradients(analytic: &[f64], numeric: &[f64]) -> Comparison {
    let mut c = Comparison { pass: analytic.len() == numeric.len(), ..Default::default() };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let abs = (a - n).abs();
        c.max_abs_err = c.max_abs_err.max(abs);
        let score = if a.abs() < ABS_FLOOR {
            abs / ABS_TOL
        } else {
            let rel = abs / a.abs().max(n.abs());
            c.max_rel_err = c.max_rel_err.max(rel);
            rel / REL_TOL
        };
        if !(score < 1.0) {
            c.pass = false;
        }
        if c.worst_index.is_none() || score > c.worst_score || score.is_nan() {
            c.worst_index = Some(i);
            c.worst_score = score;
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Kernel {
    Cosine,
    Weighted,
    Reid,
    Wbce,
    Dice,
    SmoothL1,
    Ciou,
    AutoregressiveCe,
    Sa,
    Adapter,
}

impl Kernel {
    pub const ALL: [Kernel; 10] = [
        Kernel::Cosine,
        Kernel::Weighted,
        Kernel::Reid,
        Kernel::Wbce,
        Kernel::Dice,
        Kernel::SmoothL1,
        Kernel::Ciou,
        Kernel::AutoregressiveCe,
        Kernel::Sa,
        Kernel::Adapter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Cosine => "cosine",
            Kernel::Weighted => "weighted",
            Kernel::Reid => "reid",
            Kernel::Wbce => "wbce",
            Kernel::Dice => "dice",
            Kernel::SmoothL1 => "smooth_l1",
            Kernel::Ciou => "ciou",
            Kernel::AutoregressiveCe => "autoregressive_ce",
            Kernel::Sa => "sa",
            Kernel::Adapter => "adapter",
        }
    }
}

impl std::fmt::Display for Kernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Kernel {
    type Err = LossError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Kernel::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| LossError::InvalidConfig(format!("unknown kernel {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelReport {
    pub kernel: String,
    pub trials: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub pass: bool,
    pub worst: Option<Worst>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

type Objective = Box<dyn Fn(&[f64]) -> f64>;

/// A single seeded instance: parameters, analytic gradient, and an evaluator.
struct Case {
    x: Vec<f64>,
    analytic: Vec<f64>,
    f: Objective,
}

/// Runs `trials` seeded instances of `kernel` and compares analytic gradients
/// against central differences at [`FD_STEP`].
pub fn check_kernel(kernel: Kernel, trials: usize, seed: u64) -> Result<KernelReport, LossError> {
    let mut report = KernelReport {
        kernel: kernel.name().to_string(),
        trials,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        pass: true,
        worst: None,
        warning: None,
    };
    if trials == 0 {
        report.warning = Some("no trials run; pass is vacuous".into());
        return Ok(report);
    }
    let mut worst_score = -1.0;
    for trial in 0..trials {
        let mut rng = SplitMix64::derive(seed, &format!("losscheck/{}/{trial}", kernel.name()));
        let case = make_case(kernel, &mut rng)?;
        let numeric = finite_diff_gradient(|x| (case.f)(x), &case.x, FD_STEP);
        let c = compare_gradients(&case.analytic, &numeric);
        report.max_rel_err = report.max_rel_err.max(c.max_rel_err);
        report.max_abs_err = report.max_abs_err.max(c.max_abs_err);
        report.pass &= c.pass;
        if let Some(i) = c.worst_index {
            if c.worst_score > worst_score {
                worst_score = c.worst_score;
                report.worst = Some(Worst { trial, index: i, analytic: case.analytic[i], numeric: numeric[i] });
            }
        }
    }
    Ok(report)
}

pub fn check_all(trials: usize, seed: u64) -> Result<Vec<KernelReport>, LossError> {
    Kernel::ALL.iter().map(|&k| check_kernel(k, trials, seed)).collect()
}

fn normals(rng: &mut SplitMix64, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.normal() * scale).collect()
}

fn range(rng: &mut SplitMix64, lo: usize, hi: usize) -> usize {
    lo + rng.below((hi - lo + 1) as u64) as usize
}

fn random_mask(rng: &mut SplitMix64, w: u32, h: u32) -> BinaryMask {
    let px: Vec<bool> = (0..w * h).map(|_| rng.below(3) == 0).collect();
    BinaryMask::from_pixels(w, h, &px).expect("dimensions match")
}

fn make_case(kernel: Kernel, rng: &mut SplitMix64) -> Result<Case, LossError> {
    Ok(match kernel {
        Kernel::Cosine => {
            let d = range(rng, 2, 8);
            let x = normals(rng, 2 * d, 1.0);
            let r = cosine_distance(&x[..d], &x[d..])?;
            let analytic = [r.grad_u, r.grad_v].concat();
            Case { x, analytic, f: Box::new(move |x| cosine_distance(&x[..d], &x[d..]).map_or(f64::NAN, |r| r.value)) }
        }
        Kernel::Weighted => {
            let n = range(rng, 1, 8);
            let mode = if rng.below(2) == 0 { Emphasis::TowardMax } else { Emphasis::TowardMin };
            let x: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 2.0)).collect();
            let analytic = super::weighted_distance(&x, mode)?.grad;
            Case { x, analytic, f: Box::new(move |x| super::weighted_distance(x, mode).map_or(f64::NAN, |r| r.value)) }
        }
        Kernel::Reid => {
            let p = range(rng, 2, 4);
            let d = range(rng, 3, 8);
            let pos = range(rng, 1, 3);
            let neg = range(rng, 2, 6);
            let shape: Vec<(usize, usize)> = (0..p).map(|_| (pos, neg)).collect();
            let cfg = LossConfig {
                tau: rng.uniform(0.05, 0.5),
                negative_mining: if rng.below(2) == 0 { NegativeMining::Literal } else { NegativeMining::Hard },
                ..Default::default()
            };
            let x = normals(rng, p * (1 + pos + neg) * d, 1.0);
            let batch = unflatten_batch(&x, &shape, d);
            let r = reid_loss(&batch, &cfg)?;
            let analytic = flatten_batch(&ReidBatch { identities: r.grads.identities });
            Case {
                x,
                analytic,
                f: Box::new(move |x| reid_loss(&unflatten_batch(x, &shape, d), &cfg).map_or(f64::NAN, |r| r.value)),
            }
        }
        Kernel::Wbce => {
            let (w, h) = (range(rng, 2, 6), range(rng, 2, 6));
            let target = random_mask(rng, w as u32, h as u32);
            let fg = if rng.below(2) == 0 { FgWeight::Auto } else { FgWeight::Fixed(rng.uniform(0.5, 5.0)) };
            let x = normals(rng, w * h, 2.0);
            let analytic = wbce_loss(&Grid::new(w, h, x.clone())?, &target, fg)?.1.values;
            Case {
                x,
                analytic,
                f: Box::new(move |x| wbce_loss(&Grid::filled(w, h, 0.0).with(x), &target, fg).map_or(f64::NAN, |r| r.0)),
            }
        }
        Kernel::Dice => {
            let (w, h) = (range(rng, 2, 6), range(rng, 2, 6));
            let target = random_mask(rng, w as u32, h as u32);
            let eps = rng.uniform(0.1, 1.0);
            let x: Vec<f64> = (0..w * h).map(|_| rng.uniform(0.05, 0.95)).collect();
            let analytic = dice_loss(&Grid::new(w, h, x.clone())?, &target, eps)?.1.values;
            Case {
                x,
                analytic,
                f: Box::new(move |x| dice_loss(&Grid::filled(w, h, 0.0).with(x), &target, eps).map_or(f64::NAN, |r| r.0)),
            }
        }
        Kernel::SmoothL1 => {
            let n = range(rng, 1, 6);
            let beta = rng.uniform(0.2, 2.0);
            let target = normals(rng, n, 1.0);
            let x = loop {
                let x = normals(rng, n, 1.5);
                if x.iter().zip(&target).all(|(p, t)| ((p - t).abs() - beta).abs() > 1e-3) {
                    break x;
                }
            };
            let analytic = smooth_l1_loss(&x, &target, beta)?.1;
            Case { x, analytic, f: Box::new(move |x| smooth_l1_loss(x, &target, beta).map_or(f64::NAN, |r| r.0)) }
        }
        Kernel::Ciou => {
            let (pred, target) = box_pair(rng, 20.0);
            let r = ciou_loss_params(pred, target)?;
            let alpha = r.alpha;
            Case {
                x: pred.to_vec(),
                analytic: r.grad.to_vec(),
                f: Box::new(move |x| ciou_loss_frozen_alpha(arr4(x), target, alpha).map_or(f64::NAN, |r| r.value)),
            }
        }
        Kernel::AutoregressiveCe => {
            let len = range(rng, 1, 6);
            let vocab = range(rng, 2, 10);
            let targets: Vec<usize> = (0..len).map(|_| rng.below(vocab as u64) as usize).collect();
            let mut mask: Vec<bool> = (0..len).map(|_| rng.below(4) != 0).collect();
            mask[rng.below(len as u64) as usize] = true;
            let x = normals(rng, len * vocab, 2.0);
            let rows = move |x: &[f64]| x.chunks(vocab).map(<[f64]>::to_vec).collect::<Vec<_>>();
            let analytic = autoregressive_ce(&rows(&x), &targets, &mask)?.1.concat();
            Case {
                x,
                analytic,
                f: Box::new(move |x| autoregressive_ce(&rows(x), &targets, &mask).map_or(f64::NAN, |r| r.0)),
            }
        }
        Kernel::Sa => {
            let (w, h) = (range(rng, 4, 8), range(rng, 4, 8));
            let target = random_mask(rng, w as u32, h as u32);
            let cfg = LossConfig {
                wbce_fg_weight: if rng.below(2) == 0 { FgWeight::Auto } else { FgWeight::Fixed(2.0) },
                ..Default::default()
            };
            let (pred, tbox) = box_pair(rng, w.min(h) as f64 / 2.0);
            let logits = normals(rng, w * h, 2.0);
            let r = sa_loss_params(&Grid::new(w, h, logits.clone())?, &target, pred, tbox, &cfg, None)?;
            let alpha = r.ciou_alpha;
            let split = w * h;
            let eval = move |x: &[f64]| {
                sa_loss_params(&Grid::filled(w, h, 0.0).with(&x[..split]), &target, arr4(&x[split..]), tbox, &cfg, Some(alpha))
                    .map_or(f64::NAN, |r| r.value)
            };
            Case { x: [logits, pred.to_vec()].concat(), analytic: [r.grad_logits.values, r.grad_box.to_vec()].concat(), f: Box::new(eval) }
        }
        Kernel::Adapter => {
            let (d_in, hid, d_out) = (range(rng, 2, 6), range(rng, 2, 6), range(rng, 2, 5));
            let act = match rng.below(2) {
                0 => Activation::SmoothGated,
                _ => Activation::Identity,
            };
            let params = AdapterParams::init(d_in, hid, d_out, act, rng).map_err(|e| LossError::InvalidConfig(e.to_string()))?;
            let input = normals(rng, d_in, 1.0);
            let head = normals(rng, d_out, 1.0);
            let (_, cache) = params.forward(&input).map_err(|e| LossError::InvalidConfig(e.to_string()))?;
            let (analytic, _) = params.backward(&cache, &head);
            let x = params.to_flat();
            let eval = move |x: &[f64]| {
                params
                    .with_flat(x)
                    .and_then(|p| p.forward(&input))
                    .map_or(f64::NAN, |(y, _)| y.iter().zip(&head).map(|(a, b)| a * b).sum())
            };
            Case { x, analytic, f: Box::new(eval) }
        }
    })
}

fn arr4(x: &[f64]) -> [f64; 4] {
    [x[0], x[1], x[2], x[3]]
}

/// Two boxes whose edges stay clear of each other so the overlap terms are smooth.
fn box_pair(rng: &mut SplitMix64, scale: f64) -> ([f64; 4], [f64; 4]) {
    loop {
        let mut b = || [rng.uniform(0.0, scale), rng.uniform(0.0, scale), rng.uniform(0.3, scale), rng.uniform(0.3, scale)];
        let p = b();
        let t = b();
        let xs_p = [p[0], p[0] + p[2]];
        let xs_t = [t[0], t[0] + t[2]];
        let ys_p = [p[1], p[1] + p[3]];
        let ys_t = [t[1], t[1] + t[3]];
        let clear = |a: [f64; 2], b: [f64; 2]| a.iter().all(|u| b.iter().all(|v| (u - v).abs() > 1e-3));
        if clear(xs_p, xs_t) && clear(ys_p, ys_t) {
            return (p, t);
        }
    }
}

fn flatten_batch(b: &ReidBatch) -> Vec<f64> {
    let mut out = Vec::new();
    for id in &b.identities {
        out.extend_from_slice(&id.query);
        id.positives.iter().chain(&id.negatives).for_each(|v| out.extend_from_slice(v));
    }
    out
}

fn unflatten_batch(x: &[f64], shape: &[(usize, usize)], d: usize) -> ReidBatch {
    let mut chunks = x.chunks(d).map(<[f64]>::to_vec);
    let identities = shape
        .iter()
        .map(|&(pos, neg)| ReidIdentity {
            query: chunks.next().unwrap_or_default(),
            positives: chunks.by_ref().take(pos).collect(),
            negatives: chunks.by_ref().take(neg).collect(),
        })
        .collect();
    ReidBatch { identities }
}

impl Grid {
    fn with(mut self, values: &[f64]) -> Self {
        self.values.copy_from_slice(values);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_examples() {
        let g = finite_diff_gradient(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0], FD_STEP);
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
        assert_eq!(finite_diff_gradient(|_| 3.5, &[1.0, -7.0, 0.0], FD_STEP), vec![0.0; 3]);
    }

    #[test]
    fn comparison_rules() {
        assert!(compare_gradients(&[1.0, 1e-7], &[1.00001, 5e-7]).pass);
        assert!(!compare_gradients(&[1.0], &[1.001]).pass);
        assert!(!compare_gradients(&[1e-7], &[3e-6]).pass);
        assert!(!compare_gradients(&[1.0], &[f64::NAN]).pass);
        assert_eq!(compare_gradients(&[0.0, 2.0], &[0.0, 2.1]).worst_index, Some(1));
    }

    #[test]
    fn every_kernel_passes() {
        for k in Kernel::ALL {
            let r = check_kernel(k, 30, 2024).unwrap();
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn zero_trials_is_vacuous() {
        let r = check_kernel(Kernel::Reid, 0, 1).unwrap();
        assert!(r.pass && r.warning.is_some());
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = [0.3, -0.4];
        let numeric = finite_diff_gradient(|x| x[0] * x[0] + x[1].sin(), &x, FD_STEP);
        assert!(!compare_gradients(&[2.0 * x[0], x[1].sin()], &numeric).pass);
    }

    #[test]
    fn kernel_names_round_trip() {
        for k in Kernel::ALL {
            assert_eq!(k.name().parse::<Kernel>().unwrap(), k);
        }
    }
}
