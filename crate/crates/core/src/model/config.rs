use serde::{Deserialize, Serialize};

use crate::error::{CampError, Result};

/// How an original feature is combined with its incoming message.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionOp {
    Add,
    Concat,
    Product,
}

/// Pooling of fused per-region / per-word features into one vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    Attention,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scorer {
    /// Sigmoid of a two-layer MLP on `v* + t*`; scores in `(0, 1)`.
    Mlp,
    /// Cosine of `v*` and `t*`; scores in `[-1, 1]`.
    Cosine,
}

/// Overall pipeline shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Message aggregation, gated fusion, fused aggregation.
    Camp,
    /// No cross-modal interaction: attention pooling of `V` and `T` alone.
    Base,
    /// Cross-modal messages are added to the features without gates or a
    /// learned transform.
    NoFusion,
}

/// Architecture switches and sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of the raw region descriptors.
    pub raw_dim: usize,
    pub embed_dim: usize,
    /// Vocabulary size including the padding token (id 0).
    pub vocab_size: usize,
    /// Sentences are clipped or padded to this many tokens.
    pub max_words: usize,
    /// Shared feature width of regions and words.
    pub d: usize,
    /// Width of the affinity projection space.
    pub d_h: usize,
    pub fusion_op: FusionOp,
    pub use_gates: bool,
    pub use_residual: bool,
    pub use_cross_attn: bool,
    pub aggregation: Aggregation,
    pub scorer: Scorer,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ModelConfig {
    /// Full-size configuration: 2048-d regions, 300-d word embeddings,
    /// 1024-d features, 50-word sentences.
    pub fn paper() -> Self {
        Self {
            raw_dim: 2048,
            embed_dim: 300,
            vocab_size: 10_000,
            max_words: 50,
            d: 1024,
            d_h: 512,
            fusion_op: FusionOp::Add,
            use_gates: true,
            use_residual: true,
            use_cross_attn: true,
            aggregation: Aggregation::Attention,
            scorer: Scorer::Mlp,
            variant: Variant::Camp,
        }
    }

    /// Reduced sizes that train in minutes on one core.
    pub fn desk() -> Self {
        Self {
            embed_dim: 16,
            vocab_size: 64,
            d: 32,
            d_h: 16,
            ..Self::paper()
        }
    }

    /// Whether features are fused with messages (false only for [`Variant::NoFusion`]
    /// and [`Variant::Base`]).
    pub fn use_fusion(&self) -> bool {
        self.variant == Variant::Camp
    }

    /// Input width of the fusion transform.
    pub fn fusion_width(&self) -> usize {
        match self.fusion_op {
            FusionOp::Concat => 2 * self.d,
            FusionOp::Add | FusionOp::Product => self.d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("raw_dim", self.raw_dim),
            ("embed_dim", self.embed_dim),
            ("vocab_size", self.vocab_size),
            ("max_words", self.max_words),
            ("d", self.d),
            ("d_h", self.d_h),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CampError::Config(format!("{name} must be positive")));
            }
        }
        if self.d_h > self.d {
            return Err(CampError::Config(format!(
                "d_h ({}) must not exceed d ({})",
                self.d_h, self.d
            )));
        }
        if self.vocab_size < 2 {
            return Err(CampError::Config(
                "vocabulary needs the padding token and at least one word".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn camp_defaults() {
        let c = ModelConfig::default();
        assert_eq!(c.fusion_op, FusionOp::Add);
        assert!(c.use_gates && c.use_residual && c.use_cross_attn && c.use_fusion());
        assert_eq!(c.aggregation, Aggregation::Attention);
        assert_eq!(c.scorer, Scorer::Mlp);
        assert_eq!(
            (c.d, c.d_h, c.max_words, c.raw_dim, c.embed_dim),
            (1024, 512, 50, 2048, 300)
        );
        c.validate().unwrap();
        ModelConfig::desk().validate().unwrap();
    }

    #[test]
    fn rejects_wide_affinity_space() {
        let c = ModelConfig {
            d_h: 64,
            ..ModelConfig::desk()
        };
        assert!(matches!(c.validate(), Err(CampError::Config(_))));
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c: ModelConfig = serde_json::from_str(r#"{"d": 8, "d_h": 4, "fusion_op": "concat"}"#).unwrap();
        assert_eq!(c.d, 8);
        assert_eq!(c.fusion_op, FusionOp::Concat);
        assert_eq!(c.fusion_width(), 16);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
