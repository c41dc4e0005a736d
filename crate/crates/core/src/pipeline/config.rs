use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::TuneGrid;
use crate::dataset::DatasetConfig;
use crate::dcae::DcaeArch;
use crate::error::{invalid, CoreError, Result};
use crate::faultnet::{FaultNetArch, LossWeights};
use crate::sim::{LayoutConfig, SimConfig};
use crate::train::TrainOpts;

/// Optimizer schedule of one training stage. The seed is derived from the
/// run seed so a single `seed` key controls the whole run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainOpts::default();
        TrainSection {
            lr: d.lr,
            batch_size: d.batch_size,
            max_epochs: d.max_epochs,
            patience: d.patience,
        }
    }
}

impl TrainSection {
    pub fn opts(&self, seed: u64) -> TrainOpts {
        TrainOpts {
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DcaeSection {
    pub arch: DcaeArch,
    pub train: TrainSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultNetSection {
    pub arch: FaultNetArch,
    pub train: TrainSection,
    pub loss_weights: LossWeights,
    /// Redraw the random zeros of the clean-trained model in every batch
    /// instead of fixing them once per window.
    pub remask: bool,
}

impl Default for FaultNetSection {
    fn default() -> Self {
        FaultNetSection {
            arch: FaultNetArch::default(),
            train: TrainSection::default(),
            loss_weights: LossWeights::default(),
            remask: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineSection {
    /// Tuning grid; the standard grid for the window length when absent.
    pub grid: Option<TuneGrid>,
    pub reference_train: TrainSection,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub depths: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub input_lens: Vec<usize>,
    /// Dataset size per SNR bucket for every sweep point.
    pub windows_per_bucket: usize,
    pub train: TrainSection,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            depths: vec![3, 5, 7, 9, 11],
            kernel_sizes: vec![4, 8, 16, 32],
            input_lens: vec![50, 100],
            windows_per_bucket: 400,
            train: TrainSection {
                max_epochs: 15,
                patience: 5,
                ..TrainSection::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Buckets whose confusion matrices are reported.
    pub confusion_snr_db: Vec<f64>,
    /// Window SNR of the resolution fixture.
    pub resolution_snr_db: f64,
    pub resolution_height_db: f64,
    /// Noise draws averaged in the resolution check.
    pub resolution_trials: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            confusion_snr_db: vec![0.0],
            resolution_snr_db: 5.0,
            resolution_height_db: 15.0,
            resolution_trials: 20,
        }
    }
}

/// Everything a run depends on. Artifacts record the hash of this
/// configuration with `out_dir` left out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub sim: SimConfig,
    pub layout: LayoutConfig,
    pub dataset: DatasetConfig,
    pub dcae: DcaeSection,
    pub faultnet: FaultNetSection,
    pub baselines: BaselineSection,
    pub sweep: SweepSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            out_dir: PathBuf::from("runs/default"),
            sim: SimConfig::default(),
            layout: LayoutConfig::default(),
            dataset: DatasetConfig::default(),
            dcae: DcaeSection::default(),
            faultnet: FaultNetSection::default(),
            baselines: BaselineSection::default(),
            sweep: SweepSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Stage tags mixed into the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Dataset,
    Dcae,
    FaultClean,
    FaultNoisy,
    Reference(usize),
    Sweep,
    Resolution,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(crate::error::io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CoreError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.layout.validate()?;
        self.dataset.validate()?;
        self.dcae.arch.validate()?;
        let len = self.dataset.window_len;
        if self.dcae.arch.input_len != len || self.faultnet.arch.input_len != len {
            return Err(invalid(format!(
                "window length {len} must match the autoencoder ({}) and fault network ({}) inputs",
                self.dcae.arch.input_len, self.faultnet.arch.input_len
            )));
        }
        if len > 255 {
            return Err(invalid("windows longer than 255 samples cannot store positions"));
        }
        for t in [&self.dcae.train, &self.faultnet.train, &self.baselines.reference_train, &self.sweep.train] {
            t.opts(0).validate()?;
        }
        if self.eval.resolution_trials == 0 {
            return Err(invalid("resolution check needs at least one trial"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, excluding `out_dir`.
    pub fn hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(map) = v.as_object_mut() {
            map.remove("out_dir");
        }
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&v)?)))
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        let tag: u64 = match stage {
            Stage::Dataset => 0,
            Stage::Dcae => 1,
            Stage::FaultClean => 2,
            Stage::FaultNoisy => 3,
            Stage::Resolution => 4,
            Stage::Reference(i) => 16 + i as u64,
            Stage::Sweep => 5,
        };
        self.seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }

    pub fn tune_grid(&self) -> TuneGrid {
        self.baselines
            .grid
            .clone()
            .unwrap_or_else(|| TuneGrid::standard(self.dataset.window_len))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let partial = RunConfig::from_toml("seed = 3\n[dcae.train]\nmax_epochs = 2\n").unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.dcae.train.max_epochs, 2);
        assert_eq!(partial.dcae.arch, DcaeArch::default());
        assert!(RunConfig::from_toml("sead = 3").is_err());
    }

    #[test]
    fn hash_ignores_output_directory() {
        let a = RunConfig::default();
        let b = RunConfig {
            out_dir: "elsewhere".into(),
            ..a.clone()
        };
        let c = RunConfig { seed: 8, ..a.clone() };
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }

    #[test]
    fn mismatched_window_lengths_rejected() {
        let mut cfg = RunConfig::default();
        cfg.dcae.arch.input_len = 50;
        assert!(cfg.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn stage_seeds_differ() {
        let cfg = RunConfig::default();
        let seeds = [Stage::Dataset, Stage::Dcae, Stage::FaultClean, Stage::FaultNoisy, Stage::Reference(0)]
            .map(|s| cfg.stage_seed(s));
        for i in 0..seeds.len() {
            for j in i + 1..seeds.len() {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
    }
}
