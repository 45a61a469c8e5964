//! Visibility-gated query/gallery matching and CMC/mAP evaluation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DropError, Result};

/// Embeddings of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    pub global: Vec<f32>,
    pub foreground: Vec<f32>,
    /// `K` vectors of the same width as `global`.
    pub parts: Vec<Vec<f32>>,
    pub visibility: Vec<bool>,
}

impl EmbeddingSet {
    pub fn dim(&self) -> usize {
        self.global.len()
    }

    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    fn check(&self, dim: usize, k: usize) -> Result<()> {
        let ok = self.global.len() == dim
            && self.foreground.len() == dim
            && self.parts.len() == k
            && self.visibility.len() == k
            && self.parts.iter().all(|p| p.len() == dim);
        if ok {
            Ok(())
        } else {
            Err(DropError::Dimension(format!(
                "embedding set does not match width {dim} with {k} parts"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub emb: EmbeddingSet,
    pub identity: usize,
    pub camera: u32,
}

/// Non-empty selection of embedding kinds, written `G`, `F+P`, `G+F+P`, ...
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Mode {
    pub global: bool,
    pub foreground: bool,
    pub parts: bool,
}

impl Mode {
    pub const G: Mode = Mode::new(true, false, false);
    pub const F: Mode = Mode::new(false, true, false);
    pub const P: Mode = Mode::new(false, false, true);
    pub const FP: Mode = Mode::new(false, true, true);

    pub const fn new(global: bool, foreground: bool, parts: bool) -> Self {
        Self {
            global,
            foreground,
            parts,
        }
    }

    /// Rows of the embedding-mode comparison table.
    pub fn table() -> [Mode; 6] {
        [
            Mode::G,
            Mode::F,
            Mode::P,
            Mode::new(true, true, false),
            Mode::FP,
            Mode::new(true, true, true),
        ]
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut names = Vec::new();
        if self.global {
            names.push("G");
        }
        if self.foreground {
            names.push("F");
        }
        if self.parts {
            names.push("P");
        }
        write!(f, "{}", names.join("+"))
    }
}

impl FromStr for Mode {
    type Err = DropError;

    fn from_str(s: &str) -> Result<Self> {
        let mut mode = Mode::new(false, false, false);
        for tok in s.split('+') {
            let slot = match tok.trim().to_ascii_uppercase().as_str() {
                "G" => &mut mode.global,
                "F" => &mut mode.foreground,
                "P" => &mut mode.parts,
                other => return Err(DropError::Config(format!("unknown embedding mode component {other:?} in {s:?}"))),
            };
            if *slot {
                return Err(DropError::Config(format!("repeated component in mode {s:?}")));
            }
            *slot = true;
        }
        Ok(mode)
    }
}

impl Serialize for Mode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Mode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Relative weights of the distance components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModeWeights {
    pub global: f64,
    pub foreground: f64,
    pub parts: f64,
}

impl Default for ModeWeights {
    fn default() -> Self {
        Self {
            global: 1.0,
            foreground: 1.0,
            parts: 1.0,
        }
    }
}

fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Mean distance over parts visible in both sets, `None` without shared parts.
pub fn shared_part_distance(q: &EmbeddingSet, g: &EmbeddingSet) -> Option<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for k in 0..q.parts.len() {
        if q.visibility[k] && g.visibility[k] {
            total += euclidean(&q.parts[k], &g.parts[k]);
            n += 1;
        }
    }
    (n > 0).then(|| total / n as f64)
}

pub fn pair_distance(q: &RetrievalRecord, g: &RetrievalRecord, mode: Mode) -> Result<f64> {
    pair_distance_weighted(q, g, mode, &ModeWeights::default())
}

/// Weighted mean of the selected, defined components. A parts-only mode
/// without shared parts falls back to the foreground distance.
pub fn pair_distance_weighted(
    q: &RetrievalRecord,
    g: &RetrievalRecord,
    mode: Mode,
    weights: &ModeWeights,
) -> Result<f64> {
    if !(mode.global || mode.foreground || mode.parts) {
        return Err(DropError::Config("empty embedding mode".into()));
    }
    q.emb.check(g.emb.dim(), g.emb.num_parts())?;
    let (qe, ge) = (&q.emb, &g.emb);
    let mut terms: Vec<(f64, f64)> = Vec::with_capacity(3);
    if mode.global {
        terms.push((weights.global, euclidean(&qe.global, &ge.global)));
    }
    if mode.foreground {
        terms.push((weights.foreground, euclidean(&qe.foreground, &ge.foreground)));
    }
    if mode.parts {
        match shared_part_distance(qe, ge) {
            Some(d) => terms.push((weights.parts, d)),
            None if terms.is_empty() => {
                terms.push((1.0, euclidean(&qe.foreground, &ge.foreground)));
            }
            None => {}
        }
    }
    let wsum: f64 = terms.iter().map(|t| t.0).sum();
    if wsum <= 0.0 {
        return Err(DropError::Config("mode weights sum to zero".into()));
    }
    Ok(terms.iter().map(|(w, d)| w * d).sum::<f64>() / wsum)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    /// Per query: gallery indices ascending by distance, excluded items removed.
    pub rankings: Vec<Vec<usize>>,
    /// Per query; `None` for queries without any valid match.
    pub average_precision: Vec<Option<f64>>,
    /// `cmc[r - 1]` = fraction of valid queries matched within the top `r`.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub valid_queries: usize,
    pub skipped_queries: usize,
}

impl RankingResult {
    /// CMC at rank `r` (1-based); saturates past the curve length.
    pub fn rank(&self, r: usize) -> f64 {
        match self.cmc.len() {
            0 => 0.0,
            n => self.cmc[r.clamp(1, n) - 1],
        }
    }
}

/// Single-query protocol: same identity and camera entries are dropped
/// from each query's ranking; ties are broken by gallery index.
pub fn evaluate(queries: &[RetrievalRecord], gallery: &[RetrievalRecord], mode: Mode) -> Result<RankingResult> {
    evaluate_weighted(queries, gallery, mode, &ModeWeights::default())
}

pub fn evaluate_weighted(
    queries: &[RetrievalRecord],
    gallery: &[RetrievalRecord],
    mode: Mode,
    weights: &ModeWeights,
) -> Result<RankingResult> {
    if queries.is_empty() {
        return Err(DropError::NoQueries);
    }
    let max_rank = gallery.len();
    let mut hits = vec![0usize; max_rank];
    let mut rankings = Vec::with_capacity(queries.len());
    let mut aps = Vec::with_capacity(queries.len());
    for q in queries {
        let mut scored = Vec::with_capacity(gallery.len());
        for (j, g) in gallery.iter().enumerate() {
            if g.identity == q.identity && g.camera == q.camera {
                continue;
            }
            scored.push((pair_distance_weighted(q, g, mode, weights)?, j));
        }
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let order: Vec<usize> = scored.iter().map(|s| s.1).collect();
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        let mut first = None;
        for (r, &j) in order.iter().enumerate() {
            if gallery[j].identity == q.identity {
                found += 1;
                precision_sum += found as f64 / (r + 1) as f64;
                first.get_or_insert(r);
            }
        }
        match first {
            Some(r) => {
                for h in &mut hits[r..] {
                    *h += 1;
                }
                aps.push(Some(precision_sum / found as f64));
            }
            None => aps.push(None),
        }
        rankings.push(order);
    }
    let valid = aps.iter().flatten().count();
    let skipped = queries.len() - valid;
    if skipped > 0 {
        log::warn!("{skipped} queries without a valid gallery match were excluded");
    }
    let denom = valid.max(1) as f64;
    Ok(RankingResult {
        rankings,
        cmc: hits.iter().map(|&h| h as f64 / denom).collect(),
        map: aps.iter().flatten().sum::<f64>() / denom,
        average_precision: aps,
        valid_queries: valid,
        skipped_queries: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn record(global: f32, fore: f32, parts: &[f32], vis: &[bool], identity: usize, camera: u32) -> RetrievalRecord {
        RetrievalRecord {
            emb: EmbeddingSet {
                global: vec![global],
                foreground: vec![fore],
                parts: parts.iter().map(|p| vec![*p]).collect(),
                visibility: vis.to_vec(),
            },
            identity,
            camera,
        }
    }

    #[test]
    fn mode_parsing_round_trips() {
        for m in Mode::table() {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert_eq!("f+p".parse::<Mode>().unwrap(), Mode::FP);
        assert!("".parse::<Mode>().is_err());
        assert!("G+G".parse::<Mode>().is_err());
        assert!("X".parse::<Mode>().is_err());
    }

    #[test]
    fn identical_records_are_at_distance_zero() {
        let r = record(1.0, 2.0, &[3.0, 4.0], &[true, false], 0, 0);
        for m in Mode::table() {
            assert_eq!(pair_distance(&r, &r, m).unwrap(), 0.0);
        }
    }

    #[test]
    fn mean_over_shared_parts() {
        let q = record(0.0, 0.0, &[0.0, 0.0, 0.0, 0.0], &[false, true, false, true], 0, 0);
        let g = record(0.0, 0.0, &[9.0, 2.0, 9.0, 4.0], &[true, true, true, true], 1, 1);
        assert_eq!(pair_distance(&q, &g, Mode::P).unwrap(), 3.0);
    }

    #[test]
    fn fallbacks_without_shared_parts() {
        let q = record(1.0, 5.0, &[0.0], &[false], 0, 0);
        let g = record(4.0, 1.0, &[7.0], &[true], 1, 1);
        assert_eq!(pair_distance(&q, &g, Mode::P).unwrap(), 4.0);
        assert_eq!(pair_distance(&q, &g, Mode::FP).unwrap(), 4.0);
        assert_eq!(pair_distance(&q, &g, "G+P".parse().unwrap()).unwrap(), 3.0);
    }

    #[test]
    fn weights_change_the_mix() {
        let q = record(0.0, 0.0, &[0.0], &[true], 0, 0);
        let g = record(0.0, 2.0, &[4.0], &[true], 1, 1);
        let w = ModeWeights {
            parts: 3.0,
            ..ModeWeights::default()
        };
        assert_eq!(pair_distance_weighted(&q, &g, Mode::FP, &w).unwrap(), 3.5);
    }

    #[test]
    fn dimension_mismatch() {
        let q = record(0.0, 0.0, &[0.0], &[true], 0, 0);
        let g = record(0.0, 0.0, &[0.0, 1.0], &[true, true], 1, 1);
        assert!(pair_distance(&q, &g, Mode::G).is_err());
    }

    #[test]
    fn hand_computed_average_precision() {
        let q = record(0.0, 0.0, &[], &[], 7, 0);
        let gallery = vec![
            record(1.0, 0.0, &[], &[], 7, 1),
            record(2.0, 0.0, &[], &[], 3, 1),
            record(3.0, 0.0, &[], &[], 7, 1),
        ];
        let r = evaluate(&[q], &gallery, Mode::G).unwrap();
        assert!((r.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(r.cmc, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn adversarial_and_perfect_orders() {
        let q = record(0.0, 0.0, &[], &[], 1, 0);
        let mut gallery: Vec<_> = (1..5).map(|i| record(i as f32, 0.0, &[], &[], 2, 1)).collect();
        gallery.push(record(10.0, 0.0, &[], &[], 1, 1));
        let r = evaluate(std::slice::from_ref(&q), &gallery, Mode::G).unwrap();
        assert_eq!(&r.cmc[..4], &[0.0; 4]);
        assert_eq!(r.cmc[4], 1.0);
        gallery[4].emb.global[0] = 0.5;
        let r = evaluate(&[q], &gallery, Mode::G).unwrap();
        assert_eq!(r.rank(1), 1.0);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn same_camera_same_identity_excluded() {
        let q = record(0.0, 0.0, &[], &[], 1, 0);
        let gallery = vec![record(0.0, 0.0, &[], &[], 1, 0), record(1.0, 0.0, &[], &[], 1, 1)];
        let r = evaluate(&[q], &gallery, Mode::G).unwrap();
        assert_eq!(r.rankings[0], vec![1]);
    }

    #[test]
    fn unmatched_queries_are_skipped() {
        let qs = vec![record(0.0, 0.0, &[], &[], 1, 0), record(0.0, 0.0, &[], &[], 9, 0)];
        let gallery = vec![record(0.0, 0.0, &[], &[], 1, 1)];
        let r = evaluate(&qs, &gallery, Mode::G).unwrap();
        assert_eq!(r.valid_queries, 1);
        assert_eq!(r.skipped_queries, 1);
        assert_eq!(r.rank(1), 1.0);
    }

    #[test]
    fn no_queries() {
        assert!(matches!(evaluate(&[], &[], Mode::G), Err(DropError::NoQueries)));
    }

    fn random_record(rng: &mut ChaCha8Rng, k: usize, ids: usize) -> RetrievalRecord {
        let v = |rng: &mut ChaCha8Rng| (0..3).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>();
        RetrievalRecord {
            emb: EmbeddingSet {
                global: v(rng),
                foreground: v(rng),
                parts: (0..k).map(|_| v(rng)).collect(),
                visibility: (0..k).map(|_| rng.random_bool(0.6)).collect(),
            },
            identity: rng.random_range(0..ids),
            camera: rng.random_range(0..2),
        }
    }

    #[test]
    fn symmetric_distances_and_monotone_cmc() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let qs: Vec<_> = (0..5).map(|_| random_record(&mut rng, 4, 3)).collect();
            let gs: Vec<_> = (0..9).map(|_| random_record(&mut rng, 4, 3)).collect();
            for m in Mode::table() {
                for q in &qs {
                    for g in &gs {
                        assert_eq!(pair_distance(q, g, m).unwrap(), pair_distance(g, q, m).unwrap());
                    }
                }
                let r = evaluate(&qs, &gs, m).unwrap();
                assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
                assert!(r.average_precision.iter().flatten().all(|ap| (0.0..=1.0).contains(ap)));
            }
        }
    }

    #[test]
    fn far_gallery_item_keeps_rank_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..30 {
            let qs: Vec<_> = (0..4).map(|_| random_record(&mut rng, 2, 3)).collect();
            let mut gs: Vec<_> = (0..8).map(|_| random_record(&mut rng, 2, 3)).collect();
            let before = evaluate(&qs, &gs, Mode::G).unwrap();
            let mut far = random_record(&mut rng, 2, 3);
            far.emb.global = vec![1e6; 3];
            gs.push(far);
            let after = evaluate(&qs, &gs, Mode::G).unwrap();
            if before.valid_queries == after.valid_queries {
                assert_eq!(before.rank(1), after.rank(1));
            }
        }
    }
}
