use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

/// Rows of the lead-time embedding table, indexed by minutes `0..=720`.
pub const LEAD_ROWS: usize = 721;
pub const MAX_LEAD_MIN: u32 = 720;
pub const LEAD_STEP_MIN: u32 = 15;

/// Block size of the initial space-to-depth downsampling.
pub const INITIAL_FOLD: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub name: String,
    pub bins: usize,
    /// Extra repetition factor applied after the shared upsampling.
    pub upsample: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub stages: usize,
    pub blocks_per_stage: usize,
    pub stage_channels: Vec<usize>,
    /// Pixels removed from each side after every stage, at trunk resolution.
    pub crop_per_stage: usize,
    pub embed_dim: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_kernel")]
    pub head_kernel: usize,
    pub heads: Vec<HeadSpec>,
}

fn default_kernel() -> usize {
    3
}

impl ModelConfig {
    /// Miniature configuration used by the bundled toy task.
    pub fn desk(input_height: usize, input_width: usize, input_channels: usize) -> Self {
        ModelConfig {
            input_height,
            input_width,
            input_channels,
            stages: 2,
            blocks_per_stage: 2,
            stage_channels: vec![16, 24],
            crop_per_stage: 1,
            embed_dim: 8,
            kernel: 3,
            head_kernel: 3,
            heads: vec![
                HeadSpec { name: "main".into(), bins: 30, upsample: 2 },
                HeadSpec { name: "aux".into(), bins: 30, upsample: 1 },
            ],
        }
    }

    /// Full-size layout: four stages of eight blocks, 256 then 384 channels.
    pub fn full(input_height: usize, input_width: usize, input_channels: usize, crop_per_stage: usize) -> Self {
        ModelConfig {
            input_height,
            input_width,
            input_channels,
            stages: 4,
            blocks_per_stage: 8,
            stage_channels: vec![256, 384, 384, 384],
            crop_per_stage,
            embed_dim: 32,
            kernel: 3,
            head_kernel: 3,
            heads: vec![
                HeadSpec { name: "main".into(), bins: 30, upsample: 1 },
                HeadSpec { name: "aux".into(), bins: 30, upsample: 1 },
            ],
        }
    }

    /// Trunk spatial size after downsampling and all crops.
    pub fn trunk_size(&self) -> (usize, usize) {
        let c = 2 * self.crop_per_stage * self.stages;
        (
            (self.input_height / INITIAL_FOLD).saturating_sub(c),
            (self.input_width / INITIAL_FOLD).saturating_sub(c),
        )
    }

    /// Output grid size of a head.
    pub fn head_size(&self, head: &HeadSpec) -> (usize, usize) {
        let (h, w) = self.trunk_size();
        (h * INITIAL_FOLD * head.upsample, w * INITIAL_FOLD * head.upsample)
    }

    /// Input pixels on each side that only provide context.
    pub fn context_px(&self) -> usize {
        self.crop_per_stage * self.stages * INITIAL_FOLD
    }

    pub fn head(&self, name: &str) -> Option<usize> {
        self.heads.iter().position(|h| h.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.input_height % INITIAL_FOLD != 0 || self.input_width % INITIAL_FOLD != 0 {
            return bad(format!("input {}×{} is not divisible by {INITIAL_FOLD}", self.input_height, self.input_width));
        }
        if self.input_channels == 0 || self.embed_dim == 0 {
            return bad("input channels and embedding size must be positive".into());
        }
        if self.stages == 0 || self.blocks_per_stage == 0 {
            return bad("need at least one stage and one block".into());
        }
        if self.stage_channels.len() != self.stages || self.stage_channels.contains(&0) {
            return bad(format!("{} stage widths for {} stages", self.stage_channels.len(), self.stages));
        }
        if self.kernel % 2 == 0 || self.head_kernel % 2 == 0 {
            return bad("kernels must be odd".into());
        }
        let (h, w) = self.trunk_size();
        let c = 2 * self.crop_per_stage * self.stages;
        if self.input_height / INITIAL_FOLD <= c || self.input_width / INITIAL_FOLD <= c || h == 0 || w == 0 {
            return bad("cropping leaves no pixels".into());
        }
        if self.heads.is_empty() {
            return bad("at least one output head is required".into());
        }
        for (i, hd) in self.heads.iter().enumerate() {
            if hd.bins < 2 || hd.upsample == 0 {
                return bad(format!("head {}: needs ≥ 2 bins and a positive upsampling factor", hd.name));
            }
            if self.heads[..i].iter().any(|o| o.name == hd.name) {
                return bad(format!("duplicate head {}", hd.name));
            }
            if hd.name == "main" && hd.bins != 30 {
                return bad("the main head must have 30 bins".into());
            }
        }
        Ok(())
    }
}

/// Checks a lead time for embedding lookup.
pub fn check_lead(minutes: u32) -> Result<usize> {
    if minutes > MAX_LEAD_MIN {
        return Err(ModelError::Lead(minutes));
    }
    Ok(minutes as usize)
}

/// The 48 future leads `15..=720`, optionally preceded by lead 0.
pub fn inference_leads(include_zero: bool) -> Vec<u32> {
    let start = if include_zero { 0 } else { 1 };
    (start..=MAX_LEAD_MIN / LEAD_STEP_MIN).map(|k| k * LEAD_STEP_MIN).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_geometry() {
        let c = ModelConfig::desk(80, 80, 82);
        c.validate().unwrap();
        assert_eq!(c.trunk_size(), (36, 36));
        assert_eq!(c.context_px(), 4);
        let c = ModelConfig::desk(40, 40, 82);
        assert_eq!(c.trunk_size(), (16, 16));
        assert_eq!(c.head_size(&c.heads[0]), (64, 64));
        assert_eq!(c.head_size(&c.heads[1]), (32, 32));
    }

    #[test]
    fn full_layout_is_constructible() {
        let c = ModelConfig::full(2160, 3600, 200, 4);
        c.validate().unwrap();
        assert_eq!(c.stage_channels[0], 256);
        assert_eq!(c.embed_dim, 32);
    }

    #[test]
    fn invalid_configs() {
        let mut c = ModelConfig::desk(40, 40, 4);
        c.crop_per_stage = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk(40, 40, 4);
        c.stage_channels.pop();
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk(40, 40, 4);
        c.heads[0].bins = 12;
        assert!(c.validate().is_err());
        assert!(ModelConfig::desk(41, 40, 4).validate().is_err());
    }

    #[test]
    fn leads() {
        assert_eq!(inference_leads(false).len(), 48);
        assert_eq!(inference_leads(true).len(), 49);
        assert_eq!(*inference_leads(true).last().unwrap(), 720);
        assert!(check_lead(721).is_err());
        assert_eq!(check_lead(720).unwrap(), 720);
    }
}
