//! Configuration types and the TOML config file.
//!
//! One structured file drives every subcommand; sections are optional and
//! fall back to defaults. The loaded config is echoed into checkpoints and
//! metric reports for provenance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RopeMode {
    /// Positional rows added to keys/queries before the dot product.
    Additive,
    /// Keys/queries rotated by their frame index (standard rotary form).
    Rotate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CcaMode {
    /// Full N^2 x N^2 pairwise similarity between context patches.
    EveryTwoPoint,
    /// Only same-index pairs, an N^2 similarity vector.
    ElementWise,
    /// Degenerate single-feature comparison (context grid collapses to 1x1).
    PointLevel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VltaNorm {
    /// Renormalize the visibility-reweighted distribution to sum 1.
    Renorm,
    /// Divide by the sum of visibilities, as written in the source equation.
    PaperLiteral,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextUpdate {
    Frozen,
    Vlta,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RebasePolicy {
    Off,
    OnCut,
    Always,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureMode {
    Checker,
    Noise,
    Flat,
}

/// Architecture hyperparameters. Changing these changes parameter shapes, so
/// they are stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Feature channels D.
    pub channels: usize,
    /// Context grid side N (odd).
    pub context_side: usize,
    /// Sampling points M in cross-attention.
    pub samples: usize,
    /// Saturation range of learned offset deviations around the ring bias,
    /// feature-grid pixels.
    pub offset_range: f64,
    /// Decoder layers.
    pub layers: usize,
    pub ffn_hidden: usize,
    /// Temporal attention heads.
    pub heads: usize,
    /// Image-to-feature downscale factor.
    pub stride: usize,
    pub rope_mode: RopeMode,
    pub cca_mode: CcaMode,
    pub vlta_norm: VltaNorm,
    pub context_update: ContextUpdate,
    pub use_vlta: bool,
    pub use_cca: bool,
    pub use_self_attn: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            context_side: 3,
            samples: 8,
            offset_range: 3.0,
            layers: 2,
            ffn_hidden: 64,
            heads: 1,
            stride: 4,
            rope_mode: RopeMode::Additive,
            cca_mode: CcaMode::EveryTwoPoint,
            vlta_norm: VltaNorm::Renorm,
            context_update: ContextUpdate::Frozen,
            use_vlta: true,
            use_cca: true,
            use_self_attn: true,
        }
    }
}

impl ModelConfig {
    /// Context side actually used for sampling; the point-level similarity
    /// mode collapses the grid to a single cell.
    pub fn effective_context_side(&self) -> usize {
        match self.cca_mode {
            CcaMode::PointLevel => 1,
            _ => self.context_side,
        }
    }

    /// Flattened similarity size fed to the similarity head.
    pub fn similarity_input(&self) -> usize {
        let n2 = self.effective_context_side() * self.effective_context_side();
        match self.cca_mode {
            CcaMode::EveryTwoPoint => n2 * n2,
            CcaMode::ElementWise => n2,
            CcaMode::PointLevel => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 4 || self.channels % 4 != 0 {
            return Err(Error::Config(format!(
                "channels must be a positive multiple of 4, got {}",
                self.channels
            )));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads must divide channels ({} / {})",
                self.channels, self.heads
            )));
        }
        if self.context_side == 0 || self.context_side % 2 == 0 {
            return Err(Error::Config(format!(
                "context_side must be odd, got {}",
                self.context_side
            )));
        }
        if self.samples == 0 {
            return Err(Error::Config("samples must be >= 1".into()));
        }
        if !(self.offset_range > 0.0) {
            return Err(Error::Config("offset_range must be positive".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("layers must be >= 1".into()));
        }
        if self.ffn_hidden == 0 {
            return Err(Error::Config("ffn_hidden must be >= 1".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        Ok(())
    }
}

/// Synthetic world generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub num_sprites: usize,
    pub frame_size: usize,
    /// Video length T in frames.
    pub video_length: usize,
    /// Tracked points per sequence (split between sprites and background).
    pub num_points: usize,
    /// Probability that a sprite gets an occlusion interval per segment.
    pub occlusion_rate: f64,
    /// Probability that the sequence contains a scene cut.
    pub cut_probability: f64,
    pub texture_mode: TextureMode,
    /// Upper bound on per-frame sprite motion, image pixels.
    pub max_speed: f64,
    /// Minimum sprite-center teleport distance at a cut, image pixels.
    pub min_cut_jump: f64,
    /// Attach every tracked point to a sprite (no background points).
    pub sprite_points_only: bool,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_sprites: 3,
            frame_size: 64,
            video_length: 24,
            num_points: 8,
            occlusion_rate: 0.3,
            cut_probability: 0.0,
            texture_mode: TextureMode::Checker,
            max_speed: 2.5,
            min_cut_jump: 0.0,
            sprite_points_only: false,
            seed: 7,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.video_length < 2 {
            return Err(Error::Config("video_length must be >= 2".into()));
        }
        if self.frame_size < 32 {
            return Err(Error::Config("frame_size must be >= 32".into()));
        }
        for (name, p) in [
            ("occlusion_rate", self.occlusion_rate),
            ("cut_probability", self.cut_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if self.num_points == 0 {
            return Err(Error::Config("num_points must be >= 1".into()));
        }
        if !(self.max_speed > 0.0) {
            return Err(Error::Config("max_speed must be positive".into()));
        }
        Ok(())
    }
}

/// Runtime tracking options (do not affect parameter shapes).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    /// Temporal memory capacity; 0 keeps all past frames.
    pub memory_cap: usize,
    /// Sliding attention window over the memory; 0 disables windowing.
    pub window: usize,
    pub rebase: RebasePolicy,
    /// Scene-cut detector threshold on the content-difference score.
    pub cut_threshold: f64,
    /// Reweight temporal attention by past visibility predictions.
    pub vlta_visibility: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            memory_cap: 0,
            window: 0,
            rebase: RebasePolicy::OnCut,
            cut_threshold: 0.24,
            vlta_visibility: true,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.cut_threshold.is_finite() || self.cut_threshold < 0.0 {
            return Err(Error::Config(format!(
                "cut_threshold must be finite and >= 0, got {}",
                self.cut_threshold
            )));
        }
        Ok(())
    }
}

/// Training schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Number of generated training sequences.
    pub sequences: usize,
    /// Micro-batch iterations (one forward/backward pass each).
    pub iterations: usize,
    /// Sequences per micro-batch.
    pub batch: usize,
    /// Optimizer steps happen every `grad_accum` micro-batches.
    pub grad_accum: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Weight of the visibility BCE term.
    pub vis_loss_weight: f64,
    /// Supervise every decoder layer's outputs, not just the last.
    pub aux_loss: bool,
    /// Exclude occluded points from the location loss.
    pub mask_invisible: bool,
    /// Tracked points per sequence during training.
    pub points_per_seq: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub stage2_iterations: usize,
    pub stage2_lr: f64,
    /// Log a loss row every this many iterations.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            sequences: 8,
            iterations: 2000,
            batch: 2,
            grad_accum: 4,
            lr: 2e-3,
            weight_decay: 1e-4,
            vis_loss_weight: 1.0,
            aux_loss: true,
            mask_invisible: true,
            points_per_seq: 6,
            clip_norm: 5.0,
            stage2_iterations: 200,
            stage2_lr: 1e-2,
            log_every: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sequences == 0 || self.batch == 0 || self.grad_accum == 0 {
            return Err(Error::Config(
                "sequences, batch and grad_accum must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.stage2_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.points_per_seq == 0 {
            return Err(Error::Config("points_per_seq must be >= 1".into()));
        }
        Ok(())
    }
}

/// Top-level config file: `[model]`, `[world]`, `[tracker]`, `[training]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub model: ModelConfig,
    pub world: WorldConfig,
    pub tracker: TrackerConfig,
    pub training: TrainConfig,
}

impl AppConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.world.validate()?;
        self.tracker.validate()?;
        self.training.validate()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: AppConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config file: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
