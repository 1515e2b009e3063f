use super::LossError;

/// Mean over supervised positions of `-log softmax(logits[t])[targets[t]]`.
///
/// Returns the value and the gradient with respect to every logit; masked-out
/// positions get zero gradient.
pub fn autoregressive_ce(
    logits: &[Vec<f64>],
    targets: &[usize],
    mask: &[bool],
) -> Result<(f64, Vec<Vec<f64>>), LossError> {
    if logits.len() != targets.len() {
        return Err(LossError::DimensionMismatch(logits.len(), targets.len()));
    }
    if mask.len() != targets.len() {
        return Err(LossError::DimensionMismatch(mask.len(), targets.len()));
    }
    for (row, &t) in logits.iter().zip(targets) {
        if row.is_empty() {
            return Err(LossError::Empty);
        }
        if t >= row.len() {
            return Err(LossError::TokenOutOfRange { id: t, vocab: row.len() });
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(LossError::NonFinite);
        }
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(LossError::NoSupervision);
    }
    let scale = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for ((row, &t), &m) in logits.iter().zip(targets).zip(mask) {
        if !m {
            grad.push(vec![0.0; row.len()]);
            continue;
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let log_z = max + sum.ln();
        value += log_z - row[t];
        let mut g: Vec<f64> = row.iter().map(|x| (x - log_z).exp() * scale).collect();
        g[t] -= scale;
        grad.push(g);
    }
    Ok((value * scale, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn uniform_vocab() {
        let logits = vec![vec![0.0; 16]; 3];
        let (v, _) = autoregressive_ce(&logits, &[0, 5, 15], &[true; 3]).unwrap();
        assert!((v - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_target() {
        let mut row = vec![0.0; 16];
        row[3] = 30.0;
        let (v, _) = autoregressive_ce(&[row], &[3], &[true]).unwrap();
        assert!((0.0..1e-8).contains(&v));
    }

    #[test]
    fn matches_direct_softmax() {
        let mut rng = SplitMix64::new(5);
        let logits: Vec<Vec<f64>> = (0..5).map(|_| (0..7).map(|_| rng.normal() * 2.0).collect()).collect();
        let targets = [1, 6, 0, 3, 3];
        let mask = [true, false, true, true, true];
        let mut expected = 0.0;
        for i in [0, 2, 3, 4] {
            let z: f64 = logits[i].iter().map(|x| x.exp()).sum();
            expected -= (logits[i][targets[i]].exp() / z).ln();
        }
        expected /= 4.0;
        let (v, g) = autoregressive_ce(&logits, &targets, &mask).unwrap();
        assert!((v - expected).abs() < 1e-12);
        assert!(g[1].iter().all(|&x| x == 0.0));
        for row in [&g[0], &g[2]] {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(
            autoregressive_ce(&[vec![0.0; 4]], &[4], &[true]),
            Err(LossError::TokenOutOfRange { id: 4, vocab: 4 })
        ));
        assert_eq!(autoregressive_ce(&[vec![0.0; 4]], &[0], &[false]), Err(LossError::NoSupervision));
        assert!(autoregressive_ce(&[vec![0.0; 4]], &[0, 1], &[true, true]).is_err());
    }
}
