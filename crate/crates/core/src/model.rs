//! Full network: backbone, parsing branch and re-identification branch.

use std::sync::Arc;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{DropError, Result};
use crate::nn::ParamStore;
use crate::parsing::{DpuConfig, ParsingBranch, ParsingPrediction, PositionEncodingConfig};
use crate::reid::{build_p_reid, EmbeddingBatch, HeadOutputs, ReidBranch, ReidConfig};

/// Prefix shared by every parameter that only the parsing loss should train.
pub const PARSING_PREFIX: &str = "parsing.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub dpu: DpuConfig,
    #[serde(default)]
    pub position: PositionEncodingConfig,
    #[serde(default)]
    pub reid: ReidConfig,
    /// Separate parsing and re-identification inputs. When off, both heads
    /// consume the concatenated re-identification map.
    #[serde(default = "yes")]
    pub decouple: bool,
}

fn yes() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            dpu: DpuConfig::default(),
            position: PositionEncodingConfig::default(),
            reid: ReidConfig::default(),
            decouple: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.dpu.validate(&self.backbone.stage_channels)?;
        crate::parsing::position_encoders().check(&self.position.mode)?;
        if self.reid.embedding_dim == 0 {
            return Err(DropError::Config("embedding_dim must be positive".into()));
        }
        Ok(())
    }

    /// Channels of the concatenated re-identification map.
    pub fn reid_channels(&self) -> usize {
        self.backbone.stage_channels[1..].iter().sum()
    }

    /// Resolution the parsing branch predicts at.
    pub fn parsing_size(&self) -> (usize, usize) {
        if self.decouple {
            self.backbone.stage_size(0)
        } else {
            self.backbone.stage_size(1)
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub parsing: ParsingPrediction,
    /// Pre batch-norm embeddings (triplet objectives).
    pub embeddings: EmbeddingBatch,
    pub heads: HeadOutputs,
}

pub struct DropModel {
    config: ModelConfig,
    store: Arc<ParamStore>,
    backbone: Backbone,
    parsing: ParsingBranch,
    reid: ReidBranch,
    num_parts: usize,
}

impl DropModel {
    pub fn new(
        config: &ModelConfig,
        num_parts: usize,
        num_identities: usize,
        visibility_threshold: f64,
        dtype: DType,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(dtype, seed);
        let root = store.root();
        let backbone = Backbone::new(&root.pp("backbone"), &config.backbone)?;
        let parsing_scope = root.pp(PARSING_PREFIX.trim_end_matches('.'));
        let parsing = if config.decouple {
            ParsingBranch::decoupled(
                &parsing_scope,
                &config.backbone.stage_channels,
                &config.dpu,
                &config.position,
                num_parts,
                visibility_threshold,
            )?
        } else {
            ParsingBranch::shared(
                &parsing_scope,
                config.reid_channels(),
                config.dpu.reduced_channels,
                &config.position,
                num_parts,
                visibility_threshold,
            )?
        };
        let reid = ReidBranch::new(
            &root.pp("reid"),
            config.reid_channels(),
            num_parts,
            num_identities,
            &config.reid,
        )?;
        Ok(Self {
            config: config.clone(),
            store,
            backbone,
            parsing,
            reid,
            num_parts,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &Arc<ParamStore> {
        &self.store
    }

    pub fn num_parts(&self) -> usize {
        self.num_parts
    }

    pub fn num_identities(&self) -> Result<usize> {
        self.reid.num_identities()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn parsing_branch(&self) -> &ParsingBranch {
        &self.parsing
    }

    pub fn reid_branch(&self) -> &ReidBranch {
        &self.reid
    }

    /// `images` is `[B, 3, H, W]` in `[0, 1]`.
    ///
    /// Parsing maps enter the pooling as constants: the parsing branch is
    /// trained by the parsing loss alone.
    pub fn forward(&self, images: &Tensor, train: bool) -> Result<ModelOutput> {
        let images = images.to_dtype(self.dtype())?;
        let pyramid = self.backbone.forward(&images, train)?;
        let p_reid = build_p_reid(&pyramid)?;
        let parsing = if self.config.decouple {
            self.parsing.parse(&pyramid, None, train)?
        } else {
            self.parsing.parse(&pyramid, Some(&p_reid), train)?
        };
        let weights = parsing.pooling_weights()?.detach();
        let embeddings = self.reid.embed(&p_reid, &weights, parsing.visibility.clone())?;
        let heads = self.reid.identity_logits(&embeddings, train)?;
        Ok(ModelOutput {
            parsing,
            embeddings,
            heads,
        })
    }
}
