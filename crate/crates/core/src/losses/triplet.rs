//! Part-level triplet objectives.
//!
//! All variants implement [`PartTripletLoss`] and are looked up by name in
//! [`triplet_losses`]: `pct` mines over the whole memory bank, `part_average`
//! and `part_hct` only see the current batch.

use std::ops::Range;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::{zero_like_scalar, LossConfig};
use crate::error::{DropError, Result};
use crate::memory_bank::BankSnapshot;
use crate::registry::Registry;

/// Squared distances at or below this are treated as exact zeros.
const SQRT_FLOOR: f64 = 1e-24;

/// `sqrt` that is exactly zero (with zero gradient) at coincident points.
fn safe_sqrt(d2: &Tensor) -> Result<Tensor> {
    let mask = d2.gt(SQRT_FLOOR)?;
    let root = d2.maximum(SQRT_FLOOR)?.sqrt()?;
    Ok(mask.where_cond(&root, &root.zeros_like()?)?)
}

fn bool_tensor(values: &[bool], shape: &[usize], like: &Tensor) -> Result<Tensor> {
    let v: Vec<f32> = values.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(v, shape, like.device())?.to_dtype(like.dtype())?)
}

#[derive(Debug, Clone)]
pub struct PartDistanceMatrix {
    /// `[K, N, N]` Euclidean distances between part embeddings.
    pub values: Tensor,
    /// Row-major `[K, N, N]`: both endpoints visible at part `k`.
    pub validity: Vec<bool>,
    pub num_parts: usize,
    pub len: usize,
}

impl PartDistanceMatrix {
    pub fn valid(&self, k: usize, m: usize, n: usize) -> bool {
        self.validity[(k * self.len + m) * self.len + n]
    }

    pub fn shared_parts(&self, m: usize, n: usize) -> usize {
        (0..self.num_parts).filter(|&k| self.valid(k, m, n)).count()
    }
}

fn check_visibility(visibility: &[Vec<bool>], n: usize, k: usize) -> Result<()> {
    if visibility.len() != n || visibility.iter().any(|v| v.len() != k) {
        return Err(DropError::Dimension(format!("visibility must be [{n}][{k}]")));
    }
    Ok(())
}

/// Pairwise part distances for embeddings `[N, K, C]`.
pub fn part_distance_matrix(embs: &Tensor, visibility: &[Vec<bool>]) -> Result<PartDistanceMatrix> {
    let (n, k, _) = embs.dims3()?;
    if n < 2 {
        return Err(DropError::Dimension(format!("need at least two entries, got {n}")));
    }
    check_visibility(visibility, n, k)?;
    let e = embs.transpose(0, 1)?.contiguous()?;
    let diff = e.unsqueeze(2)?.broadcast_sub(&e.unsqueeze(1)?)?;
    let values = safe_sqrt(&diff.sqr()?.sum(3)?)?;
    let mut validity = vec![false; k * n * n];
    for part in 0..k {
        for m in 0..n {
            for c in 0..n {
                validity[(part * n + m) * n + c] = visibility[m][part] && visibility[c][part];
            }
        }
    }
    Ok(PartDistanceMatrix {
        values,
        validity,
        num_parts: k,
        len: n,
    })
}

/// Result of a batch-hard triplet objective.
#[derive(Debug, Clone)]
pub struct TripletOutcome {
    pub loss: Tensor,
    /// Anchors with at least one positive and one negative.
    pub valid_anchors: usize,
    /// Valid anchors whose hinge was positive.
    pub active_anchors: usize,
    /// No anchor was usable; `loss` is zero.
    pub degenerate: bool,
    /// Per anchor: mined (positive, negative) candidate indices.
    pub mined: Vec<Option<(usize, usize)>>,
}

/// Batch-hard mining over a distance table `[A, N]`.
///
/// For each anchor the hardest positive is the largest defined same-class
/// distance, the hardest negative the smallest defined other-class distance;
/// ties go to the lowest candidate index.
fn batch_hard(
    dist: &Tensor,
    defined: impl Fn(usize, usize) -> bool,
    positive: impl Fn(usize, usize) -> bool,
    margin: f64,
) -> Result<TripletOutcome> {
    let (a_count, n) = dist.dims2()?;
    let vals = dist.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let mut mined = Vec::with_capacity(a_count);
    let mut pos_idx = Vec::new();
    let mut neg_idx = Vec::new();
    let mut valid = 0;
    for (a, row) in vals.iter().enumerate() {
        let mut hp: Option<usize> = None;
        let mut hn: Option<usize> = None;
        for c in 0..n {
            if !defined(a, c) {
                continue;
            }
            if positive(a, c) {
                if hp.is_none_or(|p| row[c] > row[p]) {
                    hp = Some(c);
                }
            } else if hn.is_none_or(|q| row[c] < row[q]) {
                hn = Some(c);
            }
        }
        match (hp, hn) {
            (Some(p), Some(q)) => {
                valid += 1;
                if row[p] - row[q] + margin > 0.0 {
                    pos_idx.push((a * n + p) as u32);
                    neg_idx.push((a * n + q) as u32);
                }
                mined.push(Some((p, q)));
            }
            _ => mined.push(None),
        }
    }
    let active = pos_idx.len();
    let loss = if active == 0 {
        zero_like_scalar(dist)?
    } else {
        let flat = dist.flatten_all()?;
        let dev = dist.device();
        let dp = flat.index_select(&Tensor::from_vec(pos_idx, active, dev)?, 0)?;
        let dn = flat.index_select(&Tensor::from_vec(neg_idx, active, dev)?, 0)?;
        (dp - dn)?
            .affine(1.0, margin)?
            .sum_all()?
            .affine(1.0 / valid as f64, 0.0)?
    };
    if valid == 0 {
        log::debug!("degenerate triplet batch: no anchor with both a positive and a negative");
    }
    Ok(TripletOutcome {
        loss,
        valid_anchors: valid,
        active_anchors: active,
        degenerate: valid == 0,
        mined,
    })
}

/// Part-aware triplet loss over a distance matrix. `anchors` index rows of
/// the matrix that carry gradients; candidates are every entry.
pub fn pct_loss(
    matrix: &PartDistanceMatrix,
    identities: &[usize],
    anchors: Range<usize>,
    config: &LossConfig,
) -> Result<TripletOutcome> {
    let (n, k) = (matrix.len, matrix.num_parts);
    if identities.len() != n || anchors.end > n || anchors.is_empty() {
        return Err(DropError::Dimension(format!(
            "{} identities, anchors {anchors:?} for {n} entries",
            identities.len()
        )));
    }
    let a = anchors.len();
    let start = anchors.start;
    let rows = matrix.values.narrow(1, start, a)?;
    let mut mask = vec![false; k * a * n];
    let mut counts = vec![0usize; a * n];
    for part in 0..k {
        for i in 0..a {
            for c in 0..n {
                if matrix.valid(part, start + i, c) {
                    mask[(part * a + i) * n + c] = true;
                    counts[i * n + c] += 1;
                }
            }
        }
    }
    let mask_t = bool_tensor(&mask, &[k, a, n], &rows)?;
    let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c.max(1) as f64).collect();
    let inv = Tensor::from_vec(inv, (a, n), rows.device())?.to_dtype(rows.dtype())?;
    let dist = ((rows * mask_t)?.sum(0)? * inv)?;
    batch_hard(
        &dist,
        |i, c| counts[i * n + c] > 0 && c != start + i,
        |i, c| identities[start + i] == identities[c],
        config.margin,
    )
}

/// Everything a triplet variant may look at.
#[derive(Debug, Clone)]
pub struct TripletInput<'a> {
    /// `[N, K, C]`.
    pub embs: &'a Tensor,
    pub visibility: &'a [Vec<bool>],
    pub identities: &'a [usize],
    /// Rows of the current batch.
    pub anchors: Range<usize>,
    pub config: &'a LossConfig,
}

impl<'a> TripletInput<'a> {
    pub fn from_snapshot(snapshot: &'a BankSnapshot, config: &'a LossConfig) -> Self {
        Self {
            embs: &snapshot.embs,
            visibility: &snapshot.visibility,
            identities: &snapshot.identities,
            anchors: snapshot.newest.clone(),
            config,
        }
    }

    /// Current batch only.
    fn batch(&self) -> Result<(Tensor, &'a [Vec<bool>], &'a [usize])> {
        let r = self.anchors.clone();
        Ok((
            self.embs.narrow(0, r.start, r.len())?,
            &self.visibility[r.clone()],
            &self.identities[r],
        ))
    }
}

pub trait PartTripletLoss: Send + Sync {
    fn name(&self) -> &'static str;
    /// Whether mining should see the memory bank or only the batch.
    fn uses_bank(&self) -> bool;
    fn compute(&self, input: &TripletInput<'_>) -> Result<TripletOutcome>;
}

pub struct PctLoss;

impl PartTripletLoss for PctLoss {
    fn name(&self) -> &'static str {
        "pct"
    }

    fn uses_bank(&self) -> bool {
        true
    }

    fn compute(&self, input: &TripletInput<'_>) -> Result<TripletOutcome> {
        let matrix = part_distance_matrix(input.embs, input.visibility)?;
        pct_loss(&matrix, input.identities, input.anchors.clone(), input.config)
    }
}

/// In-batch batch-hard triplet on mean per-part distances.
pub struct PartAverageTriplet;

impl PartTripletLoss for PartAverageTriplet {
    fn name(&self) -> &'static str {
        "part_average"
    }

    fn uses_bank(&self) -> bool {
        false
    }

    fn compute(&self, input: &TripletInput<'_>) -> Result<TripletOutcome> {
        let (embs, visibility, identities) = input.batch()?;
        let (b, k, _) = embs.dims3()?;
        check_visibility(visibility, b, k)?;
        // Gram-matrix distances per part.
        let e = embs.transpose(0, 1)?.contiguous()?;
        let sq = e.sqr()?.sum_keepdim(2)?;
        let gram = e.matmul(&e.transpose(1, 2)?)?;
        let d2 = (sq.broadcast_add(&sq.transpose(1, 2)?)? - gram.affine(2.0, 0.0)?)?.relu()?;
        let d = safe_sqrt(&d2)?;
        let mut mask = vec![false; k * b * b];
        let mut counts = vec![0usize; b * b];
        for part in 0..k {
            for i in 0..b {
                for j in 0..b {
                    if visibility[i][part] && visibility[j][part] {
                        mask[(part * b + i) * b + j] = true;
                        counts[i * b + j] += 1;
                    }
                }
            }
        }
        let mask_t = bool_tensor(&mask, &[k, b, b], &d)?;
        let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c.max(1) as f64).collect();
        let inv = Tensor::from_vec(inv, (b, b), d.device())?.to_dtype(d.dtype())?;
        let dist = ((d * mask_t)?.sum(0)? * inv)?;
        batch_hard(
            &dist,
            |i, j| counts[i * b + j] > 0 && i != j,
            |i, j| identities[i] == identities[j],
            input.config.margin,
        )
    }
}

/// In-batch center triplet at part level: each anchor is pulled to its own
/// identity's per-part center and pushed from the nearest other center.
pub struct PartHct;

impl PartTripletLoss for PartHct {
    fn name(&self) -> &'static str {
        "part_hct"
    }

    fn uses_bank(&self) -> bool {
        false
    }

    fn compute(&self, input: &TripletInput<'_>) -> Result<TripletOutcome> {
        let (embs, visibility, identities) = input.batch()?;
        let (b, k, _) = embs.dims3()?;
        check_visibility(visibility, b, k)?;
        let mut classes: Vec<usize> = identities.to_vec();
        classes.sort_unstable();
        classes.dedup();
        let y = classes.len();
        let class_of: Vec<usize> = identities
            .iter()
            .map(|id| classes.binary_search(id).unwrap_or(0))
            .collect();
        // weights[k, c, i]: membership of sample i in the visible set of center (c, k).
        let mut weights = vec![0f64; k * y * b];
        let mut has_center = vec![false; k * y];
        for part in 0..k {
            for c in 0..y {
                let members: Vec<usize> = (0..b)
                    .filter(|&i| class_of[i] == c && visibility[i][part])
                    .collect();
                if members.is_empty() {
                    continue;
                }
                has_center[part * y + c] = true;
                for &i in &members {
                    weights[(part * y + c) * b + i] = 1.0 / members.len() as f64;
                }
            }
        }
        let e = embs.transpose(0, 1)?.contiguous()?;
        let w = Tensor::from_vec(weights, (k, y, b), e.device())?.to_dtype(e.dtype())?;
        let centers = w.matmul(&e)?;
        let diff = e.unsqueeze(2)?.broadcast_sub(&centers.unsqueeze(1)?)?;
        let d = safe_sqrt(&diff.sqr()?.sum(3)?)?;
        let mut mask = vec![false; k * b * y];
        let mut counts = vec![0usize; b * y];
        for part in 0..k {
            for i in 0..b {
                for c in 0..y {
                    if visibility[i][part] && has_center[part * y + c] {
                        mask[(part * b + i) * y + c] = true;
                        counts[i * y + c] += 1;
                    }
                }
            }
        }
        let mask_t = bool_tensor(&mask, &[k, b, y], &d)?;
        let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c.max(1) as f64).collect();
        let inv = Tensor::from_vec(inv, (b, y), d.device())?.to_dtype(d.dtype())?;
        let dist = ((d * mask_t)?.sum(0)? * inv)?;
        batch_hard(
            &dist,
            |i, c| counts[i * y + c] > 0,
            |i, c| class_of[i] == c,
            input.config.margin,
        )
    }
}

pub fn triplet_losses() -> Registry<dyn PartTripletLoss> {
    Registry::<dyn PartTripletLoss>::new("triplet loss")
        .with("pct", |_| Ok(Box::new(PctLoss)))
        .with("part_average", |_| Ok(Box::new(PartAverageTriplet)))
        .with("part_hct", |_| Ok(Box::new(PartHct)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    PartHct,
    PartAverage,
}

impl BaselineMode {
    pub fn strategy_name(self) -> &'static str {
        match self {
            BaselineMode::PartHct => "part_hct",
            BaselineMode::PartAverage => "part_average",
        }
    }
}

/// In-batch comparison objectives for `[B, K, C]` part embeddings.
pub fn baseline_losses(
    part_embs: &Tensor,
    visibility: &[Vec<bool>],
    identities: &[usize],
    mode: BaselineMode,
    config: &LossConfig,
) -> Result<TripletOutcome> {
    let b = part_embs.dim(0)?;
    let strategy = triplet_losses().create(mode.strategy_name(), &())?;
    strategy.compute(&TripletInput {
        embs: part_embs,
        visibility,
        identities,
        anchors: 0..b,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::scalar;
    use candle_core::Device;

    fn embs(v: Vec<f64>, n: usize, k: usize, c: usize) -> Tensor {
        Tensor::from_vec(v, (n, k, c), &Device::Cpu).unwrap()
    }

    #[test]
    fn identical_embeddings_give_zero_matrix() -> Result<()> {
        let m = part_distance_matrix(&embs(vec![0.7; 3 * 2 * 4], 3, 2, 4), &vec![vec![true; 2]; 3])?;
        let v = m.values.flatten_all()?.to_vec1::<f64>()?;
        assert!(v.iter().all(|x| *x == 0.0));
        Ok(())
    }

    #[test]
    fn one_dimensional_distance() -> Result<()> {
        let m = part_distance_matrix(&embs(vec![0.0, 3.0], 2, 1, 1), &vec![vec![true]; 2])?;
        assert_eq!(m.values.to_vec3::<f64>()?[0][0][1], 3.0);
        Ok(())
    }

    #[test]
    fn validity_is_joint_visibility() -> Result<()> {
        let vis = vec![vec![true, false], vec![true, true]];
        let m = part_distance_matrix(&embs(vec![0.0; 4], 2, 2, 1), &vis)?;
        assert!(m.valid(0, 0, 1));
        assert!(!m.valid(1, 0, 1));
        assert!(m.valid(1, 1, 1));
        assert_eq!(m.shared_parts(0, 1), 1);
        Ok(())
    }

    #[test]
    fn coincident_points_have_finite_gradient() -> Result<()> {
        let v = candle_core::Var::from_vec(vec![1.0f64; 4], (2, 1, 2), &Device::Cpu)?;
        let m = part_distance_matrix(v.as_tensor(), &vec![vec![true]; 2])?;
        let g = m.values.sum_all()?.backward()?;
        let g = g.get(v.as_tensor()).unwrap().flatten_all()?.to_vec1::<f64>()?;
        assert!(g.iter().all(|x| x.is_finite()));
        Ok(())
    }

    /// Embeddings on a line so pedestrian distances are easy to dial in.
    fn line(points: &[f64]) -> Tensor {
        embs(points.to_vec(), points.len(), 1, 1)
    }

    #[test]
    fn margin_satisfied_gives_zero() -> Result<()> {
        // ids 0,0 at 0 and 0.1; ids 1,1 at 1.1 and 1.2.
        let m = part_distance_matrix(&line(&[0.0, 0.1, 1.1, 1.2]), &vec![vec![true]; 4])?;
        let out = pct_loss(&m, &[0, 0, 1, 1], 0..4, &LossConfig::default())?;
        assert_eq!(scalar(&out.loss)?, 0.0);
        assert_eq!(out.valid_anchors, 4);
        assert_eq!(out.active_anchors, 0);
        Ok(())
    }

    #[test]
    fn hinge_arithmetic_single_anchor() -> Result<()> {
        // anchor 0 (id 0) at 0, positive at 1.0, negative at 0.5.
        let m = part_distance_matrix(&line(&[0.0, 1.0, 0.5]), &vec![vec![true]; 3])?;
        let out = pct_loss(&m, &[0, 0, 1], 0..1, &LossConfig::default())?;
        assert!((scalar(&out.loss)? - 0.8).abs() < 1e-12);
        assert_eq!(out.mined[0], Some((1, 2)));
        Ok(())
    }

    #[test]
    fn single_identity_is_degenerate() -> Result<()> {
        let e = line(&[0.0, 1.0, 2.0]);
        let vis = vec![vec![true]; 3];
        let m = part_distance_matrix(&e, &vis)?;
        let out = pct_loss(&m, &[4, 4, 4], 0..3, &LossConfig::default())?;
        assert!(out.degenerate);
        assert_eq!(scalar(&out.loss)?, 0.0);
        let base = baseline_losses(&e, &vis, &[4, 4, 4], BaselineMode::PartAverage, &LossConfig::default())?;
        assert!(base.degenerate);
        Ok(())
    }

    #[test]
    fn anchors_without_shared_parts_are_skipped() -> Result<()> {
        let e = embs(vec![0.0, 0.0, 1.0, 1.0, 5.0, 5.0], 3, 2, 1);
        let vis = vec![vec![true, false], vec![false, true], vec![true, true]];
        let m = part_distance_matrix(&e, &vis)?;
        // Entry 0 and 1 share no part, so anchor 0 has no positive.
        let out = pct_loss(&m, &[0, 0, 1], 0..1, &LossConfig::default())?;
        assert!(out.degenerate);
        Ok(())
    }

    #[test]
    fn separable_baselines_are_zero_and_collapsed_give_margin() -> Result<()> {
        let cfg = LossConfig::default();
        let vis = vec![vec![true; 2]; 4];
        let ids = [0, 0, 1, 1];
        let sep = embs(vec![0.0, 0.0, 0.05, 0.05, 3.0, 3.0, 3.05, 3.05], 4, 2, 1);
        let same = embs(vec![1.0; 8], 4, 2, 1);
        for mode in [BaselineMode::PartAverage, BaselineMode::PartHct] {
            let out = baseline_losses(&sep, &vis, &ids, mode, &cfg)?;
            assert_eq!(scalar(&out.loss)?, 0.0, "{mode:?}");
            let out = baseline_losses(&same, &vis, &ids, mode, &cfg)?;
            assert!((scalar(&out.loss)? - cfg.margin).abs() < 1e-12, "{mode:?}");
        }
        Ok(())
    }

    #[test]
    fn registry_lists_variants() {
        let r = triplet_losses();
        assert_eq!(r.names(), vec!["part_average", "part_hct", "pct"]);
        assert!(r.create("pct", &()).unwrap().uses_bank());
        assert!(!r.create("part_hct", &()).unwrap().uses_bank());
    }
}
