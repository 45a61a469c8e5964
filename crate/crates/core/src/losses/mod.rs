//! Training objectives.
//!
//! `total = reid + triplet + lambda * parsing`, where `reid` is label-smoothed
//! identity cross-entropy over every BNNeck head, `triplet` is one of the
//! registered part-level triplet objectives (see [`triplet`]) and `parsing`
//! is pixel-wise label-smoothed cross-entropy plus a total-variation term.

pub mod triplet;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{DropError, Result};
use crate::nn::{log_softmax, scalar};

pub use triplet::{
    baseline_losses, part_distance_matrix, pct_loss, triplet_losses, PartDistanceMatrix,
    PartTripletLoss, TripletInput, TripletOutcome,
};

/// Probabilities are clamped here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadReduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_hp: f64,
    pub gamma_smooth: f64,
    pub epsilon_ls: f64,
    pub margin: f64,
    pub visibility_threshold: f64,
    /// Name of a registered [`PartTripletLoss`].
    #[serde(default = "default_triplet")]
    pub triplet: String,
    #[serde(default)]
    pub reid_reduction: HeadReduction,
}

fn default_triplet() -> String {
    "pct".into()
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_hp: 0.4,
            gamma_smooth: 0.5,
            epsilon_ls: 0.1,
            margin: 0.3,
            visibility_threshold: 0.4,
            triplet: default_triplet(),
            reid_reduction: HeadReduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("lambda_hp", self.lambda_hp),
            ("gamma_smooth", self.gamma_smooth),
            ("epsilon_ls", self.epsilon_ls),
            ("margin", self.margin),
            ("visibility_threshold", self.visibility_threshold),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DropError::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.epsilon_ls >= 1.0 {
            return Err(DropError::Config("epsilon_ls must be below 1".into()));
        }
        triplet_losses().check(&self.triplet)
    }
}

/// Label-smoothed cross-entropy for a batch of logits `[B, N]`, averaged
/// over the batch. Targets are `(1 - eps) * onehot + eps / N`.
pub fn smoothed_cross_entropy(logits: &Tensor, labels: &[usize], epsilon: f64) -> Result<Tensor> {
    let (b, n) = logits.dims2()?;
    if labels.len() != b {
        return Err(DropError::Dimension(format!("{} labels for {b} rows", labels.len())));
    }
    let mut q = vec![epsilon / n as f64; b * n];
    for (i, &y) in labels.iter().enumerate() {
        if y >= n {
            return Err(DropError::LabelOutOfRange { label: y, classes: n });
        }
        q[i * n + y] += 1.0 - epsilon;
    }
    let q = Tensor::from_vec(q, (b, n), logits.device())?.to_dtype(logits.dtype())?;
    let nll = (q * log_softmax(logits, 1)?)?.sum(1)?.neg()?;
    Ok(nll.mean_all()?)
}

/// Identity loss over every head's logits (`K + 2` sets).
pub fn reid_ce_loss(
    logit_sets: &[Tensor],
    labels: &[usize],
    epsilon: f64,
    reduction: HeadReduction,
) -> Result<Tensor> {
    let first = logit_sets
        .first()
        .ok_or_else(|| DropError::Dimension("no logit sets".into()))?;
    let mut total = smoothed_cross_entropy(first, labels, epsilon)?;
    for l in &logit_sets[1..] {
        total = (total + smoothed_cross_entropy(l, labels, epsilon)?)?;
    }
    match reduction {
        HeadReduction::Mean => Ok(total.affine(1.0 / logit_sets.len() as f64, 0.0)?),
        HeadReduction::Sum => Ok(total),
    }
}

#[derive(Debug, Clone)]
pub struct ParsingLossTerms {
    /// `cross_entropy + smoothing`, batch mean.
    pub total: Tensor,
    pub cross_entropy: Tensor,
    /// Already scaled by `gamma_smooth`.
    pub smoothing: Tensor,
}

/// Parsing loss for probabilities `[B, K+1, H, W]` and ground-truth label
/// maps (`H * W` labels per image, row-major).
///
/// Per image: sum over classes and pixels of `-q_k log p_k` with smoothed
/// targets `q = 1 - (N-1)/N * eps` (true class) and `eps / N` otherwise,
/// `N = K + 1`, plus `gamma` times the L1 total variation of every class map
/// over vertical and horizontal neighbours; divided by `H * W`.
pub fn parsing_loss(part_probs: &Tensor, gt: &[Vec<u8>], config: &LossConfig) -> Result<ParsingLossTerms> {
    let (b, n_cls, h, w) = part_probs.dims4()?;
    if gt.len() != b {
        return Err(DropError::Dimension(format!("{} masks for {b} predictions", gt.len())));
    }
    let eps = config.epsilon_ls;
    let on = 1.0 - (n_cls as f64 - 1.0) / n_cls as f64 * eps;
    let off = eps / n_cls as f64;
    let plane = h * w;
    let mut q = vec![off; b * n_cls * plane];
    for (i, mask) in gt.iter().enumerate() {
        if mask.len() != plane {
            return Err(DropError::Dimension(format!(
                "mask has {} pixels, prediction {h}x{w}",
                mask.len()
            )));
        }
        for (p, &label) in mask.iter().enumerate() {
            let label = label as usize;
            if label >= n_cls {
                return Err(DropError::LabelOutOfRange {
                    label,
                    classes: n_cls,
                });
            }
            q[(i * n_cls + label) * plane + p] = on;
        }
    }
    let dev = part_probs.device();
    let dtype = part_probs.dtype();
    let q = Tensor::from_vec(q, (b, n_cls, h, w), dev)?.to_dtype(dtype)?;
    let logp = part_probs.clamp(PROB_FLOOR, 1.0)?.log()?;
    let ce = (q * logp)?.sum((1, 2, 3))?.neg()?;
    let mut tv = Tensor::zeros(b, dtype, dev)?;
    if h > 1 {
        let dv = (part_probs.narrow(2, 1, h - 1)? - part_probs.narrow(2, 0, h - 1)?)?;
        tv = (tv + dv.abs()?.sum((1, 2, 3))?)?;
    }
    if w > 1 {
        let dh = (part_probs.narrow(3, 1, w - 1)? - part_probs.narrow(3, 0, w - 1)?)?;
        tv = (tv + dh.abs()?.sum((1, 2, 3))?)?;
    }
    let norm = 1.0 / plane as f64;
    let cross_entropy = ce.affine(norm, 0.0)?.mean_all()?;
    let smoothing = tv.affine(config.gamma_smooth * norm, 0.0)?.mean_all()?;
    Ok(ParsingLossTerms {
        total: (&cross_entropy + &smoothing)?,
        cross_entropy,
        smoothing,
    })
}

/// `reid + triplet + lambda * parsing`, refusing non-finite terms. With
/// `lambda = 0` the parsing term is left out of the graph entirely.
pub fn total_loss(l_reid: &Tensor, l_pct: &Tensor, l_hp: &Tensor, config: &LossConfig) -> Result<Tensor> {
    for (term, t) in [("reid", l_reid), ("pct", l_pct), ("parsing", l_hp)] {
        if !scalar(t)?.is_finite() {
            return Err(DropError::NonFiniteLoss {
                term: term.into(),
                batch: None,
            });
        }
    }
    let base = (l_reid + l_pct)?;
    if config.lambda_hp == 0.0 {
        return Ok(base);
    }
    Ok((base + l_hp.affine(config.lambda_hp, 0.0)?)?)
}

/// Fraction of pixels whose arg-max class matches the label.
pub fn pixel_accuracy(predicted: &[Vec<u32>], gt: &[Vec<u8>]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (p, g) in predicted.iter().zip(gt) {
        hits += p.iter().zip(g).filter(|(a, b)| **a == u32::from(**b)).count();
        total += g.len();
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

pub(crate) fn zero_like_scalar(reference: &Tensor) -> Result<Tensor> {
    Ok(Tensor::zeros((), reference.dtype(), reference.device())?)
}

#[cfg(test)]
pub(crate) fn f64_scalar(v: f64) -> Result<Tensor> {
    Ok(Tensor::new(v, &candle_core::Device::Cpu)?.to_dtype(candle_core::DType::F64)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::softmax;
    use candle_core::{DType, Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t2(v: Vec<f64>, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(v, (r, c), &Device::Cpu).unwrap()
    }

    #[test]
    fn confident_correct_logits_give_zero_loss() -> Result<()> {
        let l = t2(vec![100.0, 0.0, 0.0, 0.0, 100.0, 0.0], 2, 3);
        let v = scalar(&smoothed_cross_entropy(&l, &[0, 1], 0.0)?)?;
        assert!(v < 1e-12);
        Ok(())
    }

    #[test]
    fn uniform_logits_give_log_n() -> Result<()> {
        let l = Tensor::zeros((4, 7), DType::F64, &Device::Cpu)?;
        for labels in [[0, 1, 2, 3], [6, 6, 6, 6]] {
            let v = scalar(&reid_ce_loss(&[l.clone(), l.clone()], &labels, 0.1, HeadReduction::Mean)?)?;
            assert!((v - 7f64.ln()).abs() < 1e-12);
        }
        Ok(())
    }

    #[test]
    fn three_class_scalar_oracle() -> Result<()> {
        let logits = [0.3, -1.2, 2.0];
        let y = 1;
        let eps = 0.1;
        let lse = logits.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        let expected: f64 = (0..3)
            .map(|c| {
                let q = if c == y { 1.0 - eps + eps / 3.0 } else { eps / 3.0 };
                -q * (logits[c] - lse)
            })
            .sum();
        let got = scalar(&smoothed_cross_entropy(&t2(logits.to_vec(), 1, 3), &[y], eps)?)?;
        assert!((got - expected).abs() < 1e-12);
        Ok(())
    }

    #[test]
    fn label_out_of_range() {
        let l = Tensor::zeros((1, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(
            smoothed_cross_entropy(&l, &[3], 0.1),
            Err(DropError::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn sum_reduction_scales_with_heads() -> Result<()> {
        let l = Tensor::zeros((2, 5), DType::F64, &Device::Cpu)?;
        let v = scalar(&reid_ce_loss(&[l.clone(), l.clone(), l], &[0, 1], 0.1, HeadReduction::Sum)?)?;
        assert!((v - 3.0 * 5f64.ln()).abs() < 1e-12);
        Ok(())
    }

    fn probs(v: Vec<f64>, b: usize, k1: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(v, (b, k1, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn constant_maps_have_no_smoothing_term() -> Result<()> {
        let p = probs([vec![0.7; 6], vec![0.3; 6]].concat(), 1, 2, 3, 2);
        let terms = parsing_loss(&p, &[vec![0; 6]], &LossConfig::default())?;
        assert_eq!(scalar(&terms.smoothing)?, 0.0);
        Ok(())
    }

    #[test]
    fn perfect_prediction_without_smoothing_is_zero() -> Result<()> {
        let gt = vec![0u8, 1, 1, 0];
        let mut v = vec![0.0; 8];
        for (p, &l) in gt.iter().enumerate() {
            v[l as usize * 4 + p] = 1.0;
        }
        let cfg = LossConfig {
            epsilon_ls: 0.0,
            gamma_smooth: 0.0,
            ..LossConfig::default()
        };
        let terms = parsing_loss(&probs(v, 1, 2, 2, 2), &[gt], &cfg)?;
        assert!(scalar(&terms.total)?.abs() < 1e-12);
        Ok(())
    }

    #[test]
    fn two_by_two_hand_computed() -> Result<()> {
        // K = 1: background/part probabilities per pixel (row-major).
        let part = [0.9, 0.2, 0.6, 0.5];
        let gt = vec![1u8, 0, 1, 1];
        let bg: Vec<f64> = part.iter().map(|p| 1.0 - p).collect();
        let cfg = LossConfig::default();
        let (eps, gamma) = (cfg.epsilon_ls, cfg.gamma_smooth);
        let (on, off) = (1.0 - 0.5 * eps, eps / 2.0);
        let mut ce = 0.0;
        for p in 0..4 {
            let (q_bg, q_part) = if gt[p] == 1 { (off, on) } else { (on, off) };
            ce -= q_bg * bg[p].ln() + q_part * part[p].ln();
        }
        // Neighbour pairs: (0,1), (2,3) horizontal; (0,2), (1,3) vertical.
        let pairs = [(0, 1), (2, 3), (0, 2), (1, 3)];
        let tv: f64 = pairs
            .iter()
            .map(|&(a, b)| (part[a] - part[b]).abs() + (bg[a] - bg[b]).abs())
            .sum();
        let expected = (ce + gamma * tv) / 4.0;
        let terms = parsing_loss(&probs([bg, part.to_vec()].concat(), 1, 2, 2, 2), &[gt], &cfg)?;
        assert!((scalar(&terms.total)? - expected).abs() < 1e-12);
        Ok(())
    }

    #[test]
    fn parsing_label_out_of_range() {
        let p = probs(vec![0.5; 8], 1, 2, 2, 2);
        assert!(parsing_loss(&p, &[vec![0, 2, 0, 0]], &LossConfig::default()).is_err());
    }

    #[test]
    fn smoothing_invariant_under_horizontal_flip() -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..3 * 4 * 5).map(|_| rng.random_range(0.0..1.0)).collect();
        let p = probs(v, 1, 3, 4, 5);
        let flip_idx = Tensor::from_vec(vec![4u32, 3, 2, 1, 0], 5, &Device::Cpu)?;
        let flipped = p.index_select(&flip_idx, 3)?;
        let cfg = LossConfig::default();
        let a = scalar(&parsing_loss(&p, &[vec![0; 20]], &cfg)?.smoothing)?;
        let b = scalar(&parsing_loss(&flipped, &[vec![0; 20]], &cfg)?.smoothing)?;
        assert!((a - b).abs() < 1e-12);
        Ok(())
    }

    #[test]
    fn parsing_gradient_wrt_logits_matches_finite_differences() -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let shape = (1, 3, 4, 2);
        let base: Vec<f64> = (0..24).map(|_| rng.random_range(-2.0..2.0)).collect();
        let gt = vec![vec![0u8, 1, 2, 1, 0, 0, 2, 1]];
        let cfg = LossConfig::default();
        let eval = |v: &[f64]| -> f64 {
            let l = Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap();
            scalar(&parsing_loss(&softmax(&l, 1).unwrap(), &gt, &cfg).unwrap().total).unwrap()
        };
        let var = Var::from_vec(base.clone(), shape, &Device::Cpu)?;
        let loss = parsing_loss(&softmax(var.as_tensor(), 1)?, &gt, &cfg)?.total;
        let grad = loss.backward()?.get(var.as_tensor()).unwrap().flatten_all()?.to_vec1::<f64>()?;
        let h = 1e-5;
        for i in 0..base.len() {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1e-8);
            assert!((fd - grad[i]).abs() / denom < 1e-3 || (fd - grad[i]).abs() < 1e-7, "{i}: {fd} vs {}", grad[i]);
        }
        Ok(())
    }

    #[test]
    fn total_loss_combination() -> Result<()> {
        let cfg = LossConfig::default();
        let v = scalar(&total_loss(&f64_scalar(1.0)?, &f64_scalar(0.5)?, &f64_scalar(2.0)?, &cfg)?)?;
        assert!((v - 2.3).abs() < 1e-12);
        let no_hp = LossConfig {
            lambda_hp: 0.0,
            ..cfg.clone()
        };
        let v = scalar(&total_loss(&f64_scalar(1.0)?, &f64_scalar(0.5)?, &f64_scalar(2.0)?, &no_hp)?)?;
        assert!((v - 1.5).abs() < 1e-12);
        let z = f64_scalar(0.0)?;
        assert_eq!(scalar(&total_loss(&z, &z, &z, &cfg)?)?, 0.0);
        Ok(())
    }

    #[test]
    fn total_loss_names_nan_term() {
        let cfg = LossConfig::default();
        let nan = f64_scalar(f64::NAN).unwrap();
        let one = f64_scalar(1.0).unwrap();
        match total_loss(&one, &one, &nan, &cfg) {
            Err(DropError::NonFiniteLoss { term, .. }) => assert_eq!(term, "parsing"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig {
            epsilon_ls: 1.0,
            ..LossConfig::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            margin: -0.1,
            ..LossConfig::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            triplet: "nope".into(),
            ..LossConfig::default()
        }
        .validate()
        .is_err());
    }
}
