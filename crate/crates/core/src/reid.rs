//! Re-identification branch: the concatenated mid/deep feature map, parsing
//! guided pooling into foreground and part embeddings, and BNNeck identity
//! classifiers.

use candle_core::{IndexOp, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::FeaturePyramid;
use crate::error::{DropError, Result};
use crate::nn::{area_resize, bilinear_resize, BatchNorm, Linear, Scope};

/// Guards the weighted average against empty weight maps.
pub const WAMP_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReidConfig {
    /// Output width C shared by the global, foreground and part embeddings.
    pub embedding_dim: usize,
    /// Use one projection for the foreground and the parts.
    #[serde(default)]
    pub share_projection: bool,
    /// Use one BNNeck classifier for all parts.
    #[serde(default)]
    pub share_part_heads: bool,
}

impl Default for ReidConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 64,
            share_projection: false,
            share_part_heads: false,
        }
    }
}

/// Upsamples stages 3 and 4 to the stage-2 resolution and concatenates them
/// with stage 2 along channels. Stage 1 is not used.
pub fn build_p_reid(pyramid: &FeaturePyramid) -> Result<Tensor> {
    let (h, w) = pyramid.spatial(1)?;
    let maps = [
        pyramid.stage(1).clone(),
        bilinear_resize(pyramid.stage(2), h, w)?,
        bilinear_resize(pyramid.stage(3), h, w)?,
    ];
    Ok(Tensor::cat(&maps, 1)?)
}

/// Weighted average and weighted max pooling.
///
/// `features` is `[B, C, H, W]`, `weights` `[B, J, H', W']`; weights at a
/// different resolution are area-averaged onto the feature grid first.
/// Returns `[B, J, 2C]` holding `[avg; max]` per weight map, where
/// `avg = sum(w * f) / (sum(w) + eps)` and `max = max(w * f)`.
pub fn wamp_descriptors(features: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = features.dims4()?;
    let (bw, j, _, _) = weights.dims4()?;
    if b != bw {
        return Err(DropError::Dimension(format!(
            "features batch {b} vs weight batch {bw}"
        )));
    }
    let weights = area_resize(weights, h, w)?;
    let f = features.reshape((b, c, h * w))?;
    let wt = weights.reshape((b, j, h * w))?;
    let weighted_sum = wt.matmul(&f.transpose(1, 2)?.contiguous()?)?;
    let mass = (wt.sum_keepdim(2)? + WAMP_EPS)?;
    let avg = weighted_sum.broadcast_div(&mass)?;
    let prod = wt.unsqueeze(2)?.broadcast_mul(&f.unsqueeze(1)?)?;
    let max = prod.max(3)?;
    Ok(Tensor::cat(&[avg, max], 2)?)
}

/// Identity-classification head on top of a batch-normalized embedding.
#[derive(Debug, Clone)]
pub struct BnNeckHead {
    bn: BatchNorm,
    classifier: Linear,
}

impl BnNeckHead {
    pub fn new(scope: &Scope, dim: usize, num_identities: usize) -> Result<Self> {
        if num_identities == 0 {
            return Err(DropError::Config("number of identities must be positive".into()));
        }
        Ok(Self {
            bn: BatchNorm::new(&scope.pp("bn"), dim)?,
            classifier: Linear::new(&scope.pp("classifier"), dim, num_identities, false)?,
        })
    }

    pub fn num_identities(&self) -> Result<usize> {
        Ok(self.classifier.weight().dim(0)?)
    }

    /// Returns `(normalized embedding, logits)`.
    pub fn forward(&self, emb: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        let neck = self.bn.forward(emb, train)?;
        let logits = self.classifier.forward(&neck)?;
        Ok((neck, logits))
    }
}

/// Embeddings for a batch of images.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    /// `[B, C]`
    pub global: Tensor,
    /// `[B, C]`
    pub foreground: Tensor,
    /// `[B, K, C]`
    pub parts: Tensor,
    pub visibility: Vec<Vec<bool>>,
}

impl EmbeddingBatch {
    pub fn len(&self) -> usize {
        self.visibility.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visibility.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct HeadOutputs {
    /// Global, foreground, then one entry per part; each `[B, num_identities]`.
    pub logits: Vec<Tensor>,
    /// Post batch-norm embeddings, used for retrieval.
    pub neck: EmbeddingBatch,
}

pub struct ReidBranch {
    fc_global: Linear,
    fc_foreground: Linear,
    fc_parts: Option<Linear>,
    heads: Vec<BnNeckHead>,
    num_parts: usize,
    share_part_heads: bool,
}

impl ReidBranch {
    pub fn new(
        scope: &Scope,
        in_channels: usize,
        num_parts: usize,
        num_identities: usize,
        config: &ReidConfig,
    ) -> Result<Self> {
        let c = config.embedding_dim;
        if c == 0 {
            return Err(DropError::Config("embedding_dim must be positive".into()));
        }
        let fc_global = Linear::new(&scope.pp("fc_global"), in_channels, c, true)?;
        let fc_foreground = Linear::new(&scope.pp("fc_foreground"), 2 * in_channels, c, true)?;
        let fc_parts = if config.share_projection {
            None
        } else {
            Some(Linear::new(&scope.pp("fc_parts"), 2 * in_channels, c, true)?)
        };
        let part_heads = if config.share_part_heads { 1 } else { num_parts };
        let mut heads = vec![
            BnNeckHead::new(&scope.pp("head_global"), c, num_identities)?,
            BnNeckHead::new(&scope.pp("head_foreground"), c, num_identities)?,
        ];
        for k in 0..part_heads {
            heads.push(BnNeckHead::new(&scope.pp(format!("head_part{}", k + 1)), c, num_identities)?);
        }
        Ok(Self {
            fc_global,
            fc_foreground,
            fc_parts,
            heads,
            num_parts,
            share_part_heads: config.share_part_heads,
        })
    }

    pub fn num_identities(&self) -> Result<usize> {
        self.heads[0].num_identities()
    }

    /// Spatial mean followed by the global projection, `[B, C]`.
    pub fn global_pool(&self, p_reid: &Tensor) -> Result<Tensor> {
        let pooled = p_reid.mean((2, 3))?;
        self.fc_global.forward(&pooled)
    }

    /// Foreground `[B, C]` and parts `[B, K, C]` embeddings from pooling
    /// weights `[B, K+1, H, W]` (foreground first).
    pub fn wamp_pool(&self, p_reid: &Tensor, weights: &Tensor) -> Result<(Tensor, Tensor)> {
        let descr = wamp_descriptors(p_reid, weights)?;
        let j = descr.dim(1)?;
        if j != self.num_parts + 1 {
            return Err(DropError::Dimension(format!(
                "expected {} pooling maps, got {j}",
                self.num_parts + 1
            )));
        }
        let foreground = self.fc_foreground.forward(&descr.i((.., 0, ..))?)?;
        let part_fc = self.fc_parts.as_ref().unwrap_or(&self.fc_foreground);
        let parts = part_fc.forward(&descr.narrow(1, 1, self.num_parts)?.contiguous()?)?;
        Ok((foreground, parts))
    }

    pub fn embed(
        &self,
        p_reid: &Tensor,
        weights: &Tensor,
        visibility: Vec<Vec<bool>>,
    ) -> Result<EmbeddingBatch> {
        let global = self.global_pool(p_reid)?;
        let (foreground, parts) = self.wamp_pool(p_reid, weights)?;
        Ok(EmbeddingBatch {
            global,
            foreground,
            parts,
            visibility,
        })
    }

    /// Runs every BNNeck head: `K + 2` logit sets.
    pub fn identity_logits(&self, emb: &EmbeddingBatch, train: bool) -> Result<HeadOutputs> {
        let (g_neck, g_logits) = self.heads[0].forward(&emb.global, train)?;
        let (f_neck, f_logits) = self.heads[1].forward(&emb.foreground, train)?;
        let mut logits = vec![g_logits, f_logits];
        let mut part_necks = Vec::with_capacity(self.num_parts);
        for k in 0..self.num_parts {
            let head = if self.share_part_heads {
                &self.heads[2]
            } else {
                &self.heads[2 + k]
            };
            let (neck, l) = head.forward(&emb.parts.i((.., k, ..))?, train)?;
            part_necks.push(neck);
            logits.push(l);
        }
        Ok(HeadOutputs {
            logits,
            neck: EmbeddingBatch {
                global: g_neck,
                foreground: f_neck,
                parts: Tensor::stack(&part_necks, 1)?,
                visibility: emb.visibility.clone(),
            },
        })
    }
}
