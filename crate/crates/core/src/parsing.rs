//! Human parsing branch: detail-preserving upsampling of the pyramid, an
//! additive pedestrian position embedding, and per-pixel part prediction.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::backbone::{FeaturePyramid, NUM_STAGES};
use crate::error::{DropError, Result};
use crate::nn::{bilinear_resize, softmax, BatchNorm, Conv2d, Padding, Scope};
use crate::registry::Registry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpuConfig {
    pub reduced_channels: usize,
    /// Name of a registered [`FusionStrategy`].
    #[serde(default = "default_fusion")]
    pub fusion_mode: String,
}

fn default_fusion() -> String {
    "cascade".into()
}

impl Default for DpuConfig {
    fn default() -> Self {
        Self {
            reduced_channels: 16,
            fusion_mode: default_fusion(),
        }
    }
}

impl DpuConfig {
    pub fn validate(&self, stage_channels: &[usize]) -> Result<()> {
        let min = stage_channels.iter().copied().min().unwrap_or(0);
        if self.reduced_channels == 0 || self.reduced_channels > min {
            return Err(DropError::Config(format!(
                "reduced_channels {} must be in 1..={min}",
                self.reduced_channels
            )));
        }
        fusion_strategies().check(&self.fusion_mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PositionEncodingConfig {
    /// Name of a registered [`PositionEncoder`]: `none`, `1d_height` or `2d`.
    pub mode: String,
}

impl Default for PositionEncodingConfig {
    fn default() -> Self {
        Self {
            mode: "1d_height".into(),
        }
    }
}

/// Merges channel-reduced stage maps (shallow to deep) into one map at the
/// stage-1 resolution.
pub trait FusionStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn fuse(&self, reduced: &[Tensor]) -> Result<Tensor>;
}

fn check_halving(reduced: &[Tensor]) -> Result<Vec<(usize, usize)>> {
    if reduced.len() != NUM_STAGES {
        return Err(DropError::Internal(format!(
            "fusion expects {NUM_STAGES} maps, got {}",
            reduced.len()
        )));
    }
    let sizes = reduced
        .iter()
        .map(|t| t.dims4().map(|(_, _, h, w)| (h, w)))
        .collect::<candle_core::Result<Vec<_>>>()?;
    for i in 1..sizes.len() {
        let (h, w) = sizes[i - 1];
        if sizes[i] != (h.div_ceil(2), w.div_ceil(2)) {
            return Err(DropError::Internal(format!(
                "stage {} is {:?}, expected half of stage {} {:?}",
                i + 1,
                sizes[i],
                i,
                sizes[i - 1]
            )));
        }
    }
    Ok(sizes)
}

fn upsample_checked(x: &Tensor, size: (usize, usize)) -> Result<Tensor> {
    let y = bilinear_resize(x, size.0, size.1)?;
    let (_, _, h, w) = y.dims4()?;
    if (h, w) != size {
        return Err(DropError::Internal(format!(
            "upsampled map is {h}x{w}, expected {}x{}",
            size.0, size.1
        )));
    }
    Ok(y)
}

/// Top-down: each deeper map is upsampled 2x and added into the next
/// shallower one, ending at stage 1.
#[derive(Debug, Default)]
pub struct CascadeFusion;

impl FusionStrategy for CascadeFusion {
    fn name(&self) -> &'static str {
        "cascade"
    }

    fn fuse(&self, reduced: &[Tensor]) -> Result<Tensor> {
        let sizes = check_halving(reduced)?;
        let mut acc = reduced[NUM_STAGES - 1].clone();
        for i in (1..NUM_STAGES - 1).rev() {
            acc = (&reduced[i] + upsample_checked(&acc, sizes[i])?)?;
        }
        Ok((&reduced[0] + upsample_checked(&acc, sizes[0])?)?)
    }
}

/// Every deeper map is interpolated straight to stage 1 and summed.
#[derive(Debug, Default)]
pub struct DirectFusion;

impl FusionStrategy for DirectFusion {
    fn name(&self) -> &'static str {
        "direct"
    }

    fn fuse(&self, reduced: &[Tensor]) -> Result<Tensor> {
        let sizes = check_halving(reduced)?;
        let mut acc = reduced[0].clone();
        for map in &reduced[1..] {
            acc = (acc + upsample_checked(map, sizes[0])?)?;
        }
        Ok(acc)
    }
}

pub fn fusion_strategies() -> Registry<dyn FusionStrategy> {
    Registry::<dyn FusionStrategy>::new("fusion mode")
        .with("cascade", |_| Ok(Box::new(CascadeFusion)))
        .with("direct", |_| Ok(Box::new(DirectFusion)))
}

/// Produces an additive position embedding `[1, C, H, W]`.
pub trait PositionEncoder: Send + Sync {
    fn name(&self) -> &'static str;
    fn encode(&self, height: usize, width: usize, train: bool) -> Result<Tensor>;
}

pub struct PositionEncoderArgs {
    pub scope: Scope,
    pub channels: usize,
}

/// Normalized coordinate planes, channel-major `[axes, height, width]`.
/// The first plane holds `h / (height - 1)`, the optional second one
/// `w / (width - 1)`; a length-1 axis maps to 0.
pub fn coordinate_map(height: usize, width: usize, with_width: bool) -> Vec<f64> {
    let norm = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    let mut out = Vec::with_capacity(height * width * 2);
    for h in 0..height {
        out.extend(std::iter::repeat_n(norm(h, height), width));
    }
    if with_width {
        for _ in 0..height {
            out.extend((0..width).map(|w| norm(w, width)));
        }
    }
    out
}

pub struct NoPosition {
    channels: usize,
    scope: Scope,
}

impl PositionEncoder for NoPosition {
    fn name(&self) -> &'static str {
        "none"
    }

    fn encode(&self, height: usize, width: usize, _train: bool) -> Result<Tensor> {
        Ok(Tensor::zeros(
            (1, self.channels, height, width),
            self.scope.dtype(),
            self.scope.device(),
        )?)
    }
}

/// Conv-BN-ReLU-Conv-BN over normalized coordinate planes.
pub struct CoordinateEncoder {
    with_width: bool,
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    scope: Scope,
}

impl CoordinateEncoder {
    fn new(args: &PositionEncoderArgs, with_width: bool) -> Result<Self> {
        let s = &args.scope;
        let axes = if with_width { 2 } else { 1 };
        let c = args.channels;
        Ok(Self {
            with_width,
            conv1: Conv2d::new(&s.pp("conv1"), axes, c, 3, 1, Padding::Replicate, false)?,
            bn1: BatchNorm::new(&s.pp("bn1"), c)?,
            conv2: Conv2d::new(&s.pp("conv2"), c, c, 3, 1, Padding::Replicate, false)?,
            bn2: BatchNorm::new(&s.pp("bn2"), c)?,
            scope: s.clone(),
        })
    }
}

impl PositionEncoder for CoordinateEncoder {
    fn name(&self) -> &'static str {
        if self.with_width {
            "2d"
        } else {
            "1d_height"
        }
    }

    fn encode(&self, height: usize, width: usize, train: bool) -> Result<Tensor> {
        let axes = if self.with_width { 2 } else { 1 };
        let coords = Tensor::from_vec(
            coordinate_map(height, width, self.with_width),
            (1, axes, height, width),
            self.scope.device(),
        )?
        .to_dtype(self.scope.dtype())?;
        let x = self.bn1.forward(&self.conv1.forward(&coords)?, train)?.relu()?;
        self.bn2.forward(&self.conv2.forward(&x)?, train)
    }
}

pub fn position_encoders() -> Registry<dyn PositionEncoder, PositionEncoderArgs> {
    Registry::<dyn PositionEncoder, PositionEncoderArgs>::new("position encoding")
        .with("none", |a| {
            Ok(Box::new(NoPosition {
                channels: a.channels,
                scope: a.scope.clone(),
            }))
        })
        .with("1d_height", |a| Ok(Box::new(CoordinateEncoder::new(a, false)?)))
        .with("2d", |a| Ok(Box::new(CoordinateEncoder::new(a, true)?)))
}

/// Per-pixel part probabilities and the visibility derived from them.
#[derive(Debug, Clone)]
pub struct ParsingPrediction {
    /// `[B, K+1, H, W]` raw scores, class 0 is background.
    pub logits: Tensor,
    /// `[B, K+1, H, W]`, sums to one over the class axis.
    pub part_probs: Tensor,
    /// `[B, H, W]`, per-pixel maximum over the K part classes.
    pub foreground: Tensor,
    /// Per image, per part: spatial maximum of the part probability.
    pub visibility_scores: Vec<Vec<f32>>,
    pub visibility: Vec<Vec<bool>>,
}

impl ParsingPrediction {
    pub fn from_logits(logits: Tensor, visibility_threshold: f64) -> Result<Self> {
        let (b, classes, h, w) = logits.dims4()?;
        if classes < 2 {
            return Err(DropError::Dimension(format!(
                "parsing needs background plus at least one part, got {classes} classes"
            )));
        }
        let parts = classes - 1;
        let part_probs = softmax(&logits, 1)?;
        let part_only = part_probs.narrow(1, 1, parts)?;
        let foreground = part_only.max(1)?;
        let visibility_scores: Vec<Vec<f32>> = part_only
            .reshape((b, parts, h * w))?
            .max(D::Minus1)?
            .to_dtype(candle_core::DType::F32)?
            .to_vec2()?;
        let visibility = visibility_scores
            .iter()
            .map(|row| row.iter().map(|&s| f64::from(s) > visibility_threshold).collect())
            .collect();
        Ok(Self {
            logits,
            part_probs,
            foreground,
            visibility_scores,
            visibility,
        })
    }

    pub fn num_parts(&self) -> Result<usize> {
        Ok(self.part_probs.dim(1)? - 1)
    }

    /// `[B, K+1, H, W]` pooling weights: foreground first, then the K parts.
    pub fn pooling_weights(&self) -> Result<Tensor> {
        let parts = self.num_parts()?;
        Ok(Tensor::cat(
            &[
                self.foreground.unsqueeze(1)?,
                self.part_probs.narrow(1, 1, parts)?,
            ],
            1,
        )?)
    }

    /// Arg-max class per pixel, `[B][H*W]`.
    pub fn labels(&self) -> Result<Vec<Vec<u32>>> {
        let (b, _, h, w) = self.part_probs.dims4()?;
        Ok(self.part_probs.argmax(1)?.reshape((b, h * w))?.to_vec2()?)
    }
}

#[derive(Debug, Clone)]
struct ChannelReduction {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ChannelReduction {
    fn new(scope: &Scope, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&scope.pp("conv"), cin, cout, 1, 1, Padding::Zeros, false)?,
            bn: BatchNorm::new(&scope.pp("bn"), cout)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?, train)
    }
}

enum Source {
    /// Decoupled: every pyramid stage is reduced and fused.
    Pyramid {
        reducers: Vec<ChannelReduction>,
        fusion: Box<dyn FusionStrategy>,
    },
    /// Coupled baseline: parse the same map the re-identification branch uses.
    Shared { reducer: ChannelReduction },
}

pub struct ParsingBranch {
    source: Source,
    position: Box<dyn PositionEncoder>,
    classifier: Conv2d,
    num_parts: usize,
    visibility_threshold: f64,
}

impl ParsingBranch {
    pub fn decoupled(
        scope: &Scope,
        stage_channels: &[usize],
        dpu: &DpuConfig,
        position: &PositionEncodingConfig,
        num_parts: usize,
        visibility_threshold: f64,
    ) -> Result<Self> {
        dpu.validate(stage_channels)?;
        let reducers = stage_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| ChannelReduction::new(&scope.pp(format!("cr{}", i + 1)), c, dpu.reduced_channels))
            .collect::<Result<Vec<_>>>()?;
        let fusion = fusion_strategies().create(&dpu.fusion_mode, &())?;
        Self::finish(
            scope,
            Source::Pyramid { reducers, fusion },
            dpu.reduced_channels,
            position,
            num_parts,
            visibility_threshold,
        )
    }

    pub fn shared(
        scope: &Scope,
        in_channels: usize,
        reduced_channels: usize,
        position: &PositionEncodingConfig,
        num_parts: usize,
        visibility_threshold: f64,
    ) -> Result<Self> {
        let reducer = ChannelReduction::new(&scope.pp("cr_shared"), in_channels, reduced_channels)?;
        Self::finish(
            scope,
            Source::Shared { reducer },
            reduced_channels,
            position,
            num_parts,
            visibility_threshold,
        )
    }

    fn finish(
        scope: &Scope,
        source: Source,
        channels: usize,
        position: &PositionEncodingConfig,
        num_parts: usize,
        visibility_threshold: f64,
    ) -> Result<Self> {
        if num_parts == 0 {
            return Err(DropError::Config("number of parts must be positive".into()));
        }
        let position = position_encoders().create(
            &position.mode,
            &PositionEncoderArgs {
                scope: scope.pp("ppe"),
                channels,
            },
        )?;
        let classifier = Conv2d::new(
            &scope.pp("classifier"),
            channels,
            num_parts + 1,
            1,
            1,
            Padding::Zeros,
            true,
        )?;
        Ok(Self {
            source,
            position,
            classifier,
            num_parts,
            visibility_threshold,
        })
    }

    pub fn num_parts(&self) -> usize {
        self.num_parts
    }

    pub fn is_decoupled(&self) -> bool {
        matches!(self.source, Source::Pyramid { .. })
    }

    /// Stage-1 parsing features from the pyramid (decoupled mode only).
    pub fn detail_preserving_upsample(&self, pyramid: &FeaturePyramid, train: bool) -> Result<Tensor> {
        match &self.source {
            Source::Pyramid { reducers, fusion } => {
                let reduced = reducers
                    .iter()
                    .zip(&pyramid.stages)
                    .map(|(cr, x)| cr.forward(x, train))
                    .collect::<Result<Vec<_>>>()?;
                fusion.fuse(&reduced)
            }
            Source::Shared { .. } => Err(DropError::Config(
                "detail-preserving upsampling requires the decoupled parsing branch".into(),
            )),
        }
    }

    pub fn position_embedding(&self, height: usize, width: usize, train: bool) -> Result<Tensor> {
        self.position.encode(height, width, train)
    }

    /// Classifies position-aware features `[B, C_r, H, W]`.
    pub fn predict(&self, features: &Tensor, train: bool) -> Result<ParsingPrediction> {
        let (_, _, h, w) = features.dims4()?;
        let pos = self.position.encode(h, w, train)?;
        let x = features.broadcast_add(&pos)?;
        let logits = self.classifier.forward(&x)?;
        ParsingPrediction::from_logits(logits, self.visibility_threshold)
    }

    /// Parses either the pyramid (decoupled) or `shared_input` (coupled).
    pub fn parse(
        &self,
        pyramid: &FeaturePyramid,
        shared_input: Option<&Tensor>,
        train: bool,
    ) -> Result<ParsingPrediction> {
        let features = match &self.source {
            Source::Pyramid { .. } => self.detail_preserving_upsample(pyramid, train)?,
            Source::Shared { reducer } => {
                let input = shared_input.ok_or_else(|| {
                    DropError::Internal("shared parsing branch needs its input map".into())
                })?;
                reducer.forward(input, train)?
            }
        };
        self.predict(&features, train)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};
    use proptest::prelude::*;

    fn pyramid(sizes: &[(usize, usize, usize)], seed: u64) -> FeaturePyramid {
        let dev = Device::Cpu;
        let stages = sizes
            .iter()
            .enumerate()
            .map(|(i, &(c, h, w))| {
                let n = c * h * w;
                let v: Vec<f64> = (0..n)
                    .map(|j| (((j as u64 + 1) * 2654435761 + seed * 97 + i as u64 * 31) % 1000) as f64 / 500.0 - 1.0)
                    .collect();
                Tensor::from_vec(v, (1, c, h, w), &dev).unwrap()
            })
            .collect();
        FeaturePyramid::new(stages).unwrap()
    }

    /// Brute-force corner-aligned bilinear sample of a `[h_in, w_in]` grid.
    fn bilinear_oracle(src: &[f64], h_in: usize, w_in: usize, h_out: usize, w_out: usize) -> Vec<f64> {
        let coord = |i: usize, n_in: usize, n_out: usize| {
            if n_in == 1 || n_out == 1 {
                0.0
            } else {
                i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
            }
        };
        let mut out = vec![0.0; h_out * w_out];
        for y in 0..h_out {
            for x in 0..w_out {
                let (fy, fx) = (coord(y, h_in, h_out), coord(x, w_in, w_out));
                let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h_in - 1), (x0 + 1).min(w_in - 1));
                let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
                let v = src[y0 * w_in + x0] * (1.0 - ty) * (1.0 - tx)
                    + src[y0 * w_in + x1] * (1.0 - ty) * tx
                    + src[y1 * w_in + x0] * ty * (1.0 - tx)
                    + src[y1 * w_in + x1] * ty * tx;
                out[y * w_out + x] = v;
            }
        }
        out
    }

    #[test]
    fn direct_fusion_one_hot_matches_bilinear_oracle() -> Result<()> {
        let dev = Device::Cpu;
        let sizes = [(64, 32), (32, 16), (16, 8), (8, 4)];
        let mut reduced: Vec<Tensor> = sizes
            .iter()
            .map(|&(h, w)| Tensor::zeros((1, 1, h, w), DType::F64, &dev))
            .collect::<candle_core::Result<_>>()?;
        let mut hot = vec![0.0; 32];
        hot[0] = 1.0;
        reduced[3] = Tensor::from_vec(hot.clone(), (1, 1, 8, 4), &dev)?;
        let out = DirectFusion.fuse(&reduced)?.flatten_all()?.to_vec1::<f64>()?;
        let expected = bilinear_oracle(&hot, 8, 4, 64, 32);
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        // Footprint: the corner pixel spreads over a (64/7) x (32/3) wedge.
        let support = out.iter().filter(|v| **v > 0.0).count();
        let oracle_support = expected.iter().filter(|v| **v > 0.0).count();
        assert_eq!(support, oracle_support);
        assert!((out[0] - 1.0).abs() < 1e-12);
        Ok(())
    }

    #[test]
    fn fusion_modes_agree_on_shape() -> Result<()> {
        let p = pyramid(&[(3, 8, 4), (3, 4, 2), (3, 2, 1), (3, 1, 1)], 1);
        let a = CascadeFusion.fuse(&p.stages)?;
        let b = DirectFusion.fuse(&p.stages)?;
        assert_eq!(a.dims(), &[1, 3, 8, 4]);
        assert_eq!(a.dims(), b.dims());
        Ok(())
    }

    #[test]
    fn cascade_matches_manual_composition() -> Result<()> {
        let p = pyramid(&[(2, 8, 4), (2, 4, 2), (2, 2, 1), (2, 1, 1)], 2);
        let s = &p.stages;
        let up = |x: &Tensor, h, w| bilinear_resize(x, h, w).unwrap();
        let x3 = (&s[2] + up(&s[3], 2, 1))?;
        let x2 = (&s[1] + up(&x3, 4, 2))?;
        let manual = (&s[0] + up(&x2, 8, 4))?.flatten_all()?.to_vec1::<f64>()?;
        let fused = CascadeFusion.fuse(s)?.flatten_all()?.to_vec1::<f64>()?;
        for (a, b) in manual.iter().zip(&fused) {
            assert!((a - b).abs() < 1e-12);
        }
        Ok(())
    }

    #[test]
    fn mismatched_stage_sizes_are_internal_errors() {
        let p = pyramid(&[(2, 8, 4), (2, 3, 2), (2, 2, 1), (2, 1, 1)], 3);
        assert!(matches!(CascadeFusion.fuse(&p.stages), Err(DropError::Internal(_))));
    }

    fn branch(mode: &str, fusion: &str, parts: usize) -> (std::sync::Arc<ParamStore>, ParsingBranch) {
        let store = ParamStore::new(DType::F64, 11);
        let dpu = DpuConfig {
            reduced_channels: 4,
            fusion_mode: fusion.into(),
        };
        let b = ParsingBranch::decoupled(
            &store.root().pp("parsing"),
            &[4, 5, 6, 7],
            &dpu,
            &PositionEncodingConfig { mode: mode.into() },
            parts,
            0.4,
        )
        .unwrap();
        (store, b)
    }

    #[test]
    fn dpu_output_at_stage_one_in_both_modes() -> Result<()> {
        let p = pyramid(&[(4, 16, 8), (5, 8, 4), (6, 4, 2), (7, 2, 1)], 4);
        for fusion in ["cascade", "direct"] {
            let (_, b) = branch("none", fusion, 3);
            let out = b.detail_preserving_upsample(&p, true)?;
            assert_eq!(out.dims(), &[1, 4, 16, 8]);
        }
        Ok(())
    }

    #[test]
    fn zero_pyramid_gives_zero_features() -> Result<()> {
        let dev = Device::Cpu;
        let stages = [(4, 16, 8), (5, 8, 4), (6, 4, 2), (7, 2, 1)]
            .iter()
            .map(|&(c, h, w)| Tensor::zeros((2, c, h, w), DType::F64, &dev))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let p = FeaturePyramid::new(stages)?;
        let (_, b) = branch("none", "cascade", 3);
        for train in [true, false] {
            let out = b.detail_preserving_upsample(&p, train)?;
            assert!(out.flatten_all()?.to_vec1::<f64>()?.iter().all(|v| *v == 0.0));
        }
        Ok(())
    }

    #[test]
    fn coordinate_rows() {
        let m = coordinate_map(4, 3, false);
        let rows: Vec<f64> = m.chunks(3).map(|r| r[0]).collect();
        assert_eq!(rows, vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert!(m.chunks(3).all(|r| r.iter().all(|v| *v == r[0])));
        assert_eq!(coordinate_map(1, 2, false), vec![0.0, 0.0]);
        let two = coordinate_map(2, 3, true);
        assert_eq!(&two[6..], &[0.0, 0.5, 1.0, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn none_position_is_zero() -> Result<()> {
        let (_, b) = branch("none", "cascade", 3);
        let e = b.position_embedding(5, 3, true)?;
        assert_eq!(e.dims(), &[1, 4, 5, 3]);
        assert!(e.flatten_all()?.to_vec1::<f64>()?.iter().all(|v| *v == 0.0));
        Ok(())
    }

    #[test]
    fn height_encoding_constant_along_width() -> Result<()> {
        let (store, b) = branch("1d_height", "cascade", 3);
        // Perturb every PPE parameter so the check does not rely on init.
        for (name, var) in store.params() {
            if name.contains("ppe") {
                let noise = Tensor::rand(-1f64, 1f64, var.shape(), &Device::Cpu)?;
                var.set(&(var.as_tensor() + noise)?)?;
            }
        }
        for train in [true, false] {
            let e = b.position_embedding(6, 4, train)?.squeeze(0)?.to_vec3::<f64>()?;
            for ch in &e {
                for row in ch {
                    assert!(row.iter().all(|v| (v - row[0]).abs() < 1e-12), "{row:?}");
                }
            }
            // Varies along height for at least one channel.
            assert!(e.iter().any(|ch| (ch[0][0] - ch[5][0]).abs() > 1e-9));
        }
        Ok(())
    }

    #[test]
    fn uniform_logits_hide_every_part() -> Result<()> {
        let logits = Tensor::zeros((1, 9, 4, 2), DType::F64, &Device::Cpu)?;
        let p = ParsingPrediction::from_logits(logits, 0.4)?;
        assert_eq!(p.part_probs.dim(1)?, 9);
        for v in p.part_probs.flatten_all()?.to_vec1::<f64>()? {
            assert!((v - 1.0 / 9.0).abs() < 1e-12);
        }
        assert!(p.visibility_scores[0].iter().all(|s| (f64::from(*s) - 1.0 / 9.0).abs() < 1e-6));
        assert!(p.visibility[0].iter().all(|v| !v));
        Ok(())
    }

    #[test]
    fn crafted_part_above_threshold_is_visible() -> Result<()> {
        // Three classes at one pixel: background 0.39, part1 0.2, part2 0.41,
        // everywhere else background dominates.
        let (h, w) = (2, 2);
        let mut v = vec![0.0; 3 * h * w];
        let probs_at = |p: [f64; 3]| p.map(|x: f64| x.ln());
        let hot = probs_at([0.39, 0.2, 0.41]);
        let cold = probs_at([0.8, 0.1, 0.1]);
        for pix in 0..h * w {
            let src = if pix == 3 { hot } else { cold };
            for c in 0..3 {
                v[c * h * w + pix] = src[c];
            }
        }
        let logits = Tensor::from_vec(v, (1, 3, h, w), &Device::Cpu)?;
        let p = ParsingPrediction::from_logits(logits, 0.4)?;
        assert_eq!(p.visibility[0], vec![false, true]);
        assert!((f64::from(p.visibility_scores[0][1]) - 0.41).abs() < 1e-6);
        Ok(())
    }

    #[test]
    fn parse_without_position_is_pure() -> Result<()> {
        let p = pyramid(&[(4, 16, 8), (5, 8, 4), (6, 4, 2), (7, 2, 1)], 5);
        let (_, b) = branch("none", "cascade", 3);
        let a = b.parse(&p, None, false)?.part_probs.flatten_all()?.to_vec1::<f64>()?;
        let c = b.parse(&p, None, false)?.part_probs.flatten_all()?.to_vec1::<f64>()?;
        assert_eq!(a, c);
        Ok(())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn sum_to_one_and_foreground_max(vals in proptest::collection::vec(-8.0f64..8.0, 2 * 4 * 3 * 2)) {
            let logits = Tensor::from_vec(vals, (2, 4, 3, 2), &Device::Cpu).unwrap();
            let p = ParsingPrediction::from_logits(logits, 0.4).unwrap();
            let probs = p.part_probs.permute((0, 2, 3, 1)).unwrap().flatten_to(2).unwrap()
                .to_vec2::<f64>().unwrap();
            let fg = p.foreground.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for (px, f) in probs.iter().zip(&fg) {
                let s: f64 = px.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-5);
                let m = px[1..].iter().cloned().fold(f64::MIN, f64::max);
                prop_assert!((m - f).abs() < 1e-12);
            }
            for (scores, vis) in p.visibility_scores.iter().zip(&p.visibility) {
                for (s, v) in scores.iter().zip(vis) {
                    prop_assert_eq!(f64::from(*s) > 0.4, *v);
                }
            }
        }
    }

    #[test]
    fn gradient_flows_to_position_encoder() -> Result<()> {
        let (store, b) = branch("1d_height", "direct", 2);
        let p = pyramid(&[(4, 8, 4), (5, 4, 2), (6, 2, 1), (7, 1, 1)], 6);
        let pred = b.parse(&p, None, true)?;
        let loss = pred.part_probs.narrow(1, 1, 1)?.sum_all()?;
        let grads = loss.backward()?;
        let with_grad: Vec<String> = store
            .params()
            .into_iter()
            .filter(|(_, v)| grads.get(v.as_tensor()).is_some())
            .map(|(n, _)| n)
            .collect();
        assert!(with_grad.iter().any(|n| n.contains("ppe.conv2")));
        assert!(with_grad.iter().any(|n| n.contains("cr4")));
        Ok(())
    }
}
