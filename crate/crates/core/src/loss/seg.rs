use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::bbox::{box_params_normalized, ciou_core, smooth_l1_loss};
use super::{softplus, Grid, LossConfig, LossError};
use crate::mask::{foreground_count, rle_decode, BinaryMask};
use crate::model::BBox;

/// Foreground pixel weight for the weighted BCE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FgWeight {
    Fixed(f64),
    /// `clamp(#bg / #fg, 1, 100)` per sample; 1 when the target is empty.
    Auto,
}

impl FgWeight {
    pub fn resolve(self, target: &BinaryMask) -> f64 {
        match self {
            FgWeight::Fixed(w) => w,
            FgWeight::Auto => {
                let fg = foreground_count(target);
                if fg == 0 {
                    1.0
                } else {
                    let bg = target.pixel_count() - fg;
                    (bg as f64 / fg as f64).clamp(1.0, 100.0)
                }
            }
        }
    }
}

impl Serialize for FgWeight {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            FgWeight::Fixed(w) => s.serialize_f64(*w),
            FgWeight::Auto => s.serialize_str("auto"),
        }
    }
}

impl<'de> Deserialize<'de> for FgWeight {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(w) => Ok(FgWeight::Fixed(w)),
            Raw::Str(s) if s == "auto" => Ok(FgWeight::Auto),
            Raw::Str(s) => s.parse().map(FgWeight::Fixed).map_err(serde::de::Error::custom),
        }
    }
}

impl std::str::FromStr for FgWeight {
    type Err = LossError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "auto" {
            return Ok(FgWeight::Auto);
        }
        s.parse::<f64>()
            .ok()
            .filter(|w| *w > 0.0 && w.is_finite())
            .map(FgWeight::Fixed)
            .ok_or_else(|| LossError::InvalidConfig(format!("invalid fg weight {s:?}")))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn targets(grid: &Grid, target: &BinaryMask) -> Result<Vec<bool>, LossError> {
    if grid.width != target.width() as usize || grid.height != target.height() as usize {
        return Err(LossError::DimensionMismatch(grid.values.len(), target.pixel_count() as usize));
    }
    Ok(rle_decode(target))
}

/// BCE from logits, `sum_p w_p bce_p / sum_p w_p` with foreground weight `w`.
pub fn wbce_loss(logits: &Grid, target: &BinaryMask, fg_weight: FgWeight) -> Result<(f64, Grid), LossError> {
    let t = targets(logits, target)?;
    if logits.values.iter().any(|x| !x.is_finite()) {
        return Err(LossError::NonFinite);
    }
    let w_fg = fg_weight.resolve(target);
    if !(w_fg > 0.0 && w_fg.is_finite()) {
        return Err(LossError::InvalidConfig(format!("fg weight must be > 0, got {w_fg}")));
    }
    let total_w: f64 = t.iter().map(|&fg| if fg { w_fg } else { 1.0 }).sum();
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(t.len());
    for (&x, &fg) in logits.values.iter().zip(&t) {
        let (w, y) = if fg { (w_fg, 1.0) } else { (1.0, 0.0) };
        // max(x,0) - x*y + ln(1 + e^-|x|)
        value += w * (softplus(x) - x * y);
        grad.push(w * (sigmoid(x) - y) / total_w);
    }
    Ok((value / total_w, Grid { width: logits.width, height: logits.height, values: grad }))
}

/// `1 - (2 sum p t + eps) / (sum p + sum t + eps)`.
pub fn dice_loss(probs: &Grid, target: &BinaryMask, epsilon: f64) -> Result<(f64, Grid), LossError> {
    let t = targets(probs, target)?;
    if let Some(&p) = probs.values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(LossError::ProbabilityOutOfRange(p));
    }
    if !(epsilon > 0.0) {
        return Err(LossError::InvalidConfig(format!("dice epsilon must be > 0, got {epsilon}")));
    }
    let inter: f64 = probs.values.iter().zip(&t).filter(|(_, &fg)| fg).map(|(p, _)| p).sum();
    let sum_p: f64 = probs.values.iter().sum();
    let sum_t = t.iter().filter(|&&fg| fg).count() as f64;
    let num = 2.0 * inter + epsilon;
    let den = sum_p + sum_t + epsilon;
    let grad = t.iter().map(|&fg| -((if fg { 2.0 } else { 0.0 }) * den - num) / (den * den)).collect();
    Ok((1.0 - num / den, Grid { width: probs.width, height: probs.height, values: grad }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SaComponents {
    pub wbce: f64,
    pub dice: f64,
    pub smooth_l1: f64,
    pub ciou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaLoss {
    pub value: f64,
    pub components: SaComponents,
    pub ciou_alpha: f64,
    pub grad_logits: Grid,
    /// Gradient with respect to the predicted `(x, y, w, h)`.
    pub grad_box: [f64; 4],
}

/// `lambda_wbce wbce + lambda_dice dice + lambda_smooth smoothL1 + lambda_ciou ciou`.
///
/// Dice sees `sigmoid(logits)`. Smooth-L1 compares `(cx, cy, w, h)` normalized by
/// the mask dimensions.
pub fn sa_loss(
    logits: &Grid,
    target: &BinaryMask,
    pred_box: &BBox,
    target_box: &BBox,
    cfg: &LossConfig,
) -> Result<SaLoss, LossError> {
    sa_loss_params(logits, target, pred_box.to_array(), target_box.to_array(), cfg, None)
}

/// As [`sa_loss`] on raw box parameters; `frozen_alpha` pins the CIoU aspect weight.
pub fn sa_loss_params(
    logits: &Grid,
    target: &BinaryMask,
    pred_box: [f64; 4],
    target_box: [f64; 4],
    cfg: &LossConfig,
    frozen_alpha: Option<f64>,
) -> Result<SaLoss, LossError> {
    cfg.validate()?;
    let (wbce, g_wbce) = wbce_loss(logits, target, cfg.wbce_fg_weight)?;
    let probs = logits.map(sigmoid);
    let (dice, g_dice) = dice_loss(&probs, target, cfg.dice_epsilon)?;
    let (w, h) = (f64::from(target.width()), f64::from(target.height()));
    let np = box_params_normalized(pred_box, w, h);
    let nt = box_params_normalized(target_box, w, h);
    let (smooth, g_s) = smooth_l1_loss(&np, &nt, cfg.smooth_l1_beta)?;
    let ciou = ciou_core(pred_box, target_box, frozen_alpha)?;

    let grad_logits = logits
        .values
        .iter()
        .zip(probs.values.iter())
        .zip(g_wbce.values.iter().zip(&g_dice.values))
        .map(|((_, p), (gw, gd))| cfg.lambda_wbce * gw + cfg.lambda_dice * gd * p * (1.0 - p))
        .collect();
    // d(cx)/dx = 1/W, d(cx)/dw = 1/(2W), d(wn)/dw = 1/W; same for y/h.
    let g_smooth_box = [g_s[0] / w, g_s[1] / h, 0.5 * g_s[0] / w + g_s[2] / w, 0.5 * g_s[1] / h + g_s[3] / h];
    let mut grad_box = [0.0; 4];
    for k in 0..4 {
        grad_box[k] = cfg.lambda_smooth * g_smooth_box[k] + cfg.lambda_ciou * ciou.grad[k];
    }
    let value = cfg.lambda_wbce * wbce + cfg.lambda_dice * dice + cfg.lambda_smooth * smooth + cfg.lambda_ciou * ciou.value;
    Ok(SaLoss {
        value,
        components: SaComponents { wbce, dice, smooth_l1: smooth, ciou: ciou.value },
        ciou_alpha: ciou.alpha,
        grad_logits: Grid { width: logits.width, height: logits.height, values: grad_logits },
        grad_box,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use std::f64::consts::LN_2;

    fn mask(w: u32, h: u32, f: impl Fn(u32, u32) -> bool) -> BinaryMask {
        BinaryMask::from_fn(w, h, f).unwrap()
    }

    #[test]
    fn wbce_examples() {
        let t = mask(1, 1, |_, _| true);
        let (v, _) = wbce_loss(&Grid::filled(1, 1, 0.0), &t, FgWeight::Fixed(1.0)).unwrap();
        assert!((v - LN_2).abs() < 1e-15);

        let t = mask(3, 3, |x, y| x == y);
        let logits = Grid::new(3, 3, (0..9).map(|i| if i % 4 == 0 { 20.0 } else { -20.0 }).collect()).unwrap();
        let (v, _) = wbce_loss(&logits, &t, FgWeight::Auto).unwrap();
        assert!((0.0..1e-8).contains(&v));

        assert!(wbce_loss(&Grid::filled(2, 2, 0.0), &t, FgWeight::Auto).is_err());
    }

    #[test]
    fn wbce_matches_per_pixel_oracle() {
        // 2x2: fg at (0,0) and (1,1), weight 2.
        let t = mask(2, 2, |x, y| x == y);
        let logits: [f64; 4] = [0.3, -1.2, 2.5, 0.7];
        let fg = [true, false, false, true];
        let mut num = 0.0;
        let mut den = 0.0;
        for (x, y) in logits.iter().zip(fg) {
            let p = 1.0 / (1.0 + (-x).exp());
            let (w, bce) = if y { (2.0, -p.ln()) } else { (1.0, -(1.0 - p).ln()) };
            num += w * bce;
            den += w;
        }
        let (v, _) = wbce_loss(&Grid::new(2, 2, logits.to_vec()).unwrap(), &t, FgWeight::Fixed(2.0)).unwrap();
        assert!((v - num / den).abs() < 1e-12);
    }

    #[test]
    fn auto_weight() {
        assert_eq!(FgWeight::Auto.resolve(&BinaryMask::empty(4, 4).unwrap()), 1.0);
        assert_eq!(FgWeight::Auto.resolve(&mask(4, 4, |x, _| x == 0)), 3.0);
        assert_eq!(FgWeight::Auto.resolve(&mask(20, 20, |x, y| x == 0 && y < 2)), 100.0);
        assert_eq!(FgWeight::Auto.resolve(&mask(4, 4, |_, _| true)), 1.0);
    }

    #[test]
    fn dice_examples() {
        let t = mask(4, 4, |x, y| x < 2 && y < 2);
        let p = Grid::new(4, 4, crate::mask::rle_decode(&t).iter().map(|&b| f64::from(u8::from(b))).collect()).unwrap();
        assert!(dice_loss(&p, &t, 1e-12).unwrap().0.abs() < 1e-12);

        let disjoint = Grid::new(4, 4, (0..16).map(|i| if i >= 12 { 1.0 } else { 0.0 }).collect()).unwrap();
        assert!((dice_loss(&disjoint, &t, 1e-12).unwrap().0 - 1.0).abs() < 1e-12);

        // pred 4 px overlapping the target on 2 of them.
        let half = Grid::new(4, 4, (0..16).map(|i| if [1, 2, 5, 6].contains(&i) { 1.0 } else { 0.0 }).collect()).unwrap();
        assert!((dice_loss(&half, &t, 1e-12).unwrap().0 - 0.5).abs() < 1e-12);

        assert!(matches!(dice_loss(&Grid::filled(4, 4, 1.5), &t, 1.0), Err(LossError::ProbabilityOutOfRange(_))));
    }

    #[test]
    fn dice_in_unit_interval() {
        let mut rng = SplitMix64::new(12);
        for _ in 0..200 {
            let t = BinaryMask::from_pixels(5, 5, &(0..25).map(|_| rng.below(2) == 1).collect::<Vec<_>>()).unwrap();
            let p = Grid::new(5, 5, (0..25).map(|_| rng.unit_f64()).collect()).unwrap();
            let v = dice_loss(&p, &t, 1.0).unwrap().0;
            assert!((0.0..=1.0).contains(&v));
        }
    }

    fn sa_instance(rng: &mut SplitMix64) -> (Grid, BinaryMask, BBox, BBox) {
        let t = BinaryMask::from_pixels(6, 5, &(0..30).map(|_| rng.below(3) == 0).collect::<Vec<_>>()).unwrap();
        let logits = Grid::new(6, 5, (0..30).map(|_| rng.uniform(-3.0, 3.0)).collect()).unwrap();
        let b = |rng: &mut SplitMix64| {
            BBox::new(rng.uniform(0.0, 3.0), rng.uniform(0.0, 3.0), rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0)).unwrap()
        };
        let pb = b(rng);
        let tb = b(rng);
        (logits, t, pb, tb)
    }

    #[test]
    fn sa_is_weighted_sum_of_components() {
        let mut rng = SplitMix64::new(31);
        let cfg = LossConfig::default();
        for _ in 0..50 {
            let (logits, t, pb, tb) = sa_instance(&mut rng);
            let sa = sa_loss(&logits, &t, &pb, &tb, &cfg).unwrap();
            let a = wbce_loss(&logits, &t, cfg.wbce_fg_weight).unwrap().0;
            let b = dice_loss(&logits.map(sigmoid), &t, cfg.dice_epsilon).unwrap().0;
            let nb = |b: &BBox| box_params_normalized(b.to_array(), 6.0, 5.0);
            let c = smooth_l1_loss(&nb(&pb), &nb(&tb), cfg.smooth_l1_beta).unwrap().0;
            let d = super::super::ciou_loss(&pb, &tb).unwrap().value;
            assert!((sa.value - (2.0 * a + b + c + d)).abs() < 1e-12);
        }
    }

    #[test]
    fn sa_perfect_prediction() {
        let t = mask(16, 16, |x, y| (4..12).contains(&x) && (2..14).contains(&y));
        let logits = Grid::new(16, 16, crate::mask::rle_decode(&t).iter().map(|&b| if b { 40.0 } else { -40.0 }).collect()).unwrap();
        let bx = BBox::new(4.0, 2.0, 8.0, 12.0).unwrap();
        let cfg = LossConfig { dice_epsilon: 1e-9, ..Default::default() };
        let sa = sa_loss(&logits, &t, &bx, &bx, &cfg).unwrap();
        let c = sa.components;
        for v in [c.wbce, c.dice, c.smooth_l1, c.ciou] {
            assert!(v < 1e-6, "{c:?}");
        }
    }

    #[test]
    fn sa_linear_in_lambda() {
        let mut rng = SplitMix64::new(77);
        let (logits, t, pb, tb) = sa_instance(&mut rng);
        let base = LossConfig::default();
        let v0 = sa_loss(&logits, &t, &pb, &tb, &base).unwrap();
        let v1 = sa_loss(&logits, &t, &pb, &tb, &LossConfig { lambda_dice: 2.0, ..base }).unwrap();
        assert!((v1.value - v0.value - v0.components.dice).abs() < 1e-12);
        let v2 = sa_loss(&logits, &t, &pb, &tb, &LossConfig { lambda_wbce: 4.0, ..base }).unwrap();
        assert!((v2.value - v0.value - 2.0 * v0.components.wbce).abs() < 1e-12);
    }
}
