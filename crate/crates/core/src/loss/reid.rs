use super::{softplus, LossConfig, LossError};

#[derive(Debug, Clone, PartialEq)]
pub struct CosineDistance {
    pub value: f64,
    pub grad_u: Vec<f64>,
    pub grad_v: Vec<f64>,
}

/// `d = 1 - u.v / (|u| |v|)` with gradients for both arguments.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<CosineDistance, LossError> {
    if u.len() != v.len() {
        return Err(LossError::DimensionMismatch(u.len(), v.len()));
    }
    if u.iter().chain(v).any(|x| !x.is_finite()) {
        return Err(LossError::NonFinite);
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(LossError::ZeroNorm);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let cos = dot / (nu * nv);
    // d(cos)/du = v/(|u||v|) - cos * u/|u|^2
    let grad_u = u.iter().zip(v).map(|(a, b)| -(b / (nu * nv) - cos * a / (nu * nu))).collect();
    let grad_v = u.iter().zip(v).map(|(a, b)| -(a / (nu * nv) - cos * b / (nv * nv))).collect();
    Ok(CosineDistance { value: (1.0 - cos).clamp(0.0, 2.0), grad_u, grad_v })
}

/// Direction of the softmax emphasis over a set of distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Emphasis {
    TowardMax,
    TowardMin,
}

impl Emphasis {
    fn sign(self) -> f64 {
        match self {
            Emphasis::TowardMax => 1.0,
            Emphasis::TowardMin => -1.0,
        }
    }
}

/// Max-shifted softmax of `±d`.
pub fn soft_weights(distances: &[f64], mode: Emphasis) -> Result<Vec<f64>, LossError> {
    if distances.is_empty() {
        return Err(LossError::Empty);
    }
    if distances.iter().any(|d| !d.is_finite()) {
        return Err(LossError::NonFinite);
    }
    let s = mode.sign();
    let max = distances.iter().map(|d| s * d).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = distances.iter().map(|d| (s * d - max).exp()).collect();
    let total: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / total).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedDistance {
    pub value: f64,
    pub weights: Vec<f64>,
    pub grad: Vec<f64>,
}

/// `sum_j w_j d_j` with `w = soft_weights(d)`; gradient includes the softmax Jacobian:
/// `dV/dd_k = w_k (1 + s (d_k - V))`.
pub fn weighted_distance(distances: &[f64], mode: Emphasis) -> Result<WeightedDistance, LossError> {
    let weights = soft_weights(distances, mode)?;
    let value: f64 = weights.iter().zip(distances).map(|(w, d)| w * d).sum();
    let s = mode.sign();
    let grad = weights.iter().zip(distances).map(|(w, d)| w * (1.0 + s * (d - value))).collect();
    Ok(WeightedDistance { value, weights, grad })
}

/// One identity in a P x K batch: its query token, positives and negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct ReidIdentity {
    pub query: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReidBatch {
    pub identities: Vec<ReidIdentity>,
}

impl ReidBatch {
    pub fn validate(&self) -> Result<usize, LossError> {
        let first = self.identities.first().ok_or_else(|| LossError::InvalidBatch("P must be >= 1".into()))?;
        let dim = first.query.len();
        for (i, id) in self.identities.iter().enumerate() {
            if id.positives.is_empty() || id.negatives.is_empty() {
                return Err(LossError::InvalidBatch(format!("identity {i} needs >= 1 positive and >= 1 negative")));
            }
            for v in std::iter::once(&id.query).chain(&id.positives).chain(&id.negatives) {
                if v.len() != dim {
                    return Err(LossError::DimensionMismatch(v.len(), dim));
                }
            }
        }
        Ok(dim)
    }
}

/// Gradients mirroring the batch layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ReidGrads {
    pub identities: Vec<ReidIdentity>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReidLoss {
    pub value: f64,
    /// `(d_plus, d_minus)` per identity.
    pub distances: Vec<(f64, f64)>,
    pub grads: ReidGrads,
}

/// `(lambda / P) * sum_i softplus((d_i+ - d_i-) / tau)`.
pub fn reid_loss(batch: &ReidBatch, cfg: &LossConfig) -> Result<ReidLoss, LossError> {
    cfg.validate()?;
    batch.validate()?;
    let p = batch.identities.len() as f64;
    let mut value = 0.0;
    let mut distances = Vec::with_capacity(batch.identities.len());
    let mut grads = Vec::with_capacity(batch.identities.len());
    for id in &batch.identities {
        let pos: Vec<CosineDistance> =
            id.positives.iter().map(|v| cosine_distance(&id.query, v)).collect::<Result<_, _>>()?;
        let neg: Vec<CosineDistance> =
            id.negatives.iter().map(|v| cosine_distance(&id.query, v)).collect::<Result<_, _>>()?;
        let dp = weighted_distance(&pos.iter().map(|c| c.value).collect::<Vec<_>>(), Emphasis::TowardMax)?;
        let dn = weighted_distance(&neg.iter().map(|c| c.value).collect::<Vec<_>>(), cfg.negative_mining.emphasis())?;
        let z = (dp.value - dn.value) / cfg.tau;
        value += softplus(z);
        distances.push((dp.value, dn.value));

        let coef = cfg.lambda_reid / p * logistic(z) / cfg.tau;
        let mut gq = vec![0.0; id.query.len()];
        let mut gpos = Vec::with_capacity(pos.len());
        for (c, g) in pos.iter().zip(&dp.grad) {
            let s = coef * g;
            axpy(&mut gq, s, &c.grad_u);
            gpos.push(c.grad_v.iter().map(|x| s * x).collect());
        }
        let mut gneg = Vec::with_capacity(neg.len());
        for (c, g) in neg.iter().zip(&dn.grad) {
            let s = -coef * g;
            axpy(&mut gq, s, &c.grad_u);
            gneg.push(c.grad_v.iter().map(|x| s * x).collect());
        }
        grads.push(ReidIdentity { query: gq, positives: gpos, negatives: gneg });
    }
    Ok(ReidLoss { value: cfg.lambda_reid / p * value, distances, grads: ReidGrads { identities: grads } })
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in acc.iter_mut().zip(x) {
        *o += a * v;
    }
}
