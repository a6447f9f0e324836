use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Correspondence search used during descriptor training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SearchStrategy {
    /// Argmax along the epipolar line, then a soft match in a local window.
    #[default]
    LineToWindow,
    /// Argmax over a coarse grid spanning the whole image, then the same window step.
    CoarseToFine,
}

/// Training hyperparameters for both stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_line: usize,
    /// Window size in normalized image units.
    pub w_patch: f64,
    pub g_d: usize,
    pub g_k: usize,
    /// Reward threshold in pixels.
    pub epsilon: f64,
    pub lambda_p: f64,
    pub lambda_n: f64,
    pub lambda_reg: f64,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub pm_truncation: f64,
    pub descriptor_channels: usize,
    pub stride: usize,
    pub patch_lattice_s: usize,
    pub normalize_descriptors: bool,
    pub search: SearchStrategy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_line: 100,
            w_patch: 0.1,
            g_d: 16,
            g_k: 8,
            epsilon: 2.0,
            lambda_p: 1.0,
            lambda_n: -0.25,
            lambda_reg: -0.001,
            lr: 1e-3,
            momentum: 0.9,
            batch_size: 6,
            iterations: 1000,
            pm_truncation: 0.9,
            descriptor_channels: 128,
            stride: 4,
            patch_lattice_s: 8,
            normalize_descriptors: false,
            search: SearchStrategy::LineToWindow,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::invalid(format!("config: {m}")));
        if self.n_line < 2 {
            return fail("n_line must be >= 2");
        }
        if !(self.w_patch > 0.0 && self.w_patch < 1.0) {
            return fail("w_patch must lie in (0, 1)");
        }
        if self.g_d == 0 || self.g_k == 0 {
            return fail("grid sizes must be >= 1");
        }
        if !(self.pm_truncation > 0.0 && self.pm_truncation <= 1.0) {
            return fail("pm_truncation must lie in (0, 1]");
        }
        if self.patch_lattice_s < 2 {
            return fail("patch_lattice_s must be >= 2");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        if self.stride != 4 {
            return fail("the descriptor network has a fixed stride of 4");
        }
        if self.descriptor_channels == 0 {
            return fail("descriptor_channels must be >= 1");
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return fail("lr must be >= 0 and momentum in [0, 1)");
        }
        if !(self.epsilon >= 0.0) {
            return fail("epsilon must be >= 0");
        }
        Ok(())
    }
}

/// Inference settings: NMS window, score filter, keypoint cap and matcher ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    pub nms_size: usize,
    /// Keypoints with a post-sigmoid score below this value are dropped.
    pub score_threshold: Option<f32>,
    pub max_keypoints: usize,
    pub ratio: Option<f64>,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Profile::Hpatches.extract_config()
    }
}

/// Dataset presets for inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Hpatches,
    Aachen,
    Eth,
}

impl Profile {
    pub fn extract_config(self) -> ExtractConfig {
        match self {
            Profile::Hpatches => ExtractConfig {
                nms_size: 3,
                score_threshold: None,
                max_keypoints: 8192,
                ratio: None,
            },
            Profile::Aachen => ExtractConfig {
                nms_size: 7,
                score_threshold: Some(0.9),
                max_keypoints: 16000,
                ratio: None,
            },
            Profile::Eth => ExtractConfig {
                nms_size: 7,
                score_threshold: Some(0.9),
                max_keypoints: 20000,
                ratio: Some(0.8),
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::Hpatches => "hpatches",
            Profile::Aachen => "aachen",
            Profile::Eth => "eth",
        }
    }
}
