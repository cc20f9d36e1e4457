//! Run configuration: one TOML file covering every stage, a stable hash
//! that is stamped into each artifact, and sub-seed derivation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{RenderConfig, TrainingProtocol};
use crate::error::{Error, Result};
use crate::eval::{default_bins, default_tolerances};
use crate::io::{sha256, short_hash};
use crate::model::{ModelConfig, TrainConfig};
use crate::nav::PolicyConfig;
use crate::world::{World, WorldConfig};

/// The documented default configuration.
pub const DEFAULT_TOML: &str = include_str!("../../../configs/desk.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub exemplars: usize,
    pub held_out_exemplars: usize,
    pub map_spacing: f64,
    pub queries: usize,
    pub protocol: TrainingProtocol,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            exemplars: 100,
            held_out_exemplars: 15,
            map_spacing: 0.75,
            queries: 200,
            protocol: TrainingProtocol::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tolerances: Vec<f64>,
    pub bins: Vec<(f64, f64)>,
    pub nav_episodes: usize,
    pub nav_min_start: f64,
    pub nav_max_start: f64,
    pub ablation_seeds: Vec<u64>,
    pub ablation_iterations: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tolerances: default_tolerances(),
            bins: default_bins(),
            nav_episodes: 50,
            nav_min_start: 1.0,
            nav_max_start: 3.0,
            ablation_seeds: vec![0, 1, 2],
            ablation_iterations: 600,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub world: WorldConfig,
    pub render: RenderConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub policy: PolicyConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/desk"),
            world: WorldConfig::default(),
            render: RenderConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            policy: PolicyConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Sub-seed for one pipeline stage: the first 8 bytes of
/// `SHA-256(seed as little-endian u64 ‖ label)`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(label.as_bytes());
    u64::from_le_bytes(sha256(&bytes)[..8].try_into().unwrap())
}

/// Stage labels passed to [`derive_seed`].
pub mod stage {
    pub const WORLD: &str = "world";
    pub const TRAIN_DATA: &str = "train-data";
    pub const HELD_OUT: &str = "held-out";
    pub const MAP: &str = "map";
    pub const INIT: &str = "init";
    pub const TRAIN: &str = "train";
    pub const EPISODES: &str = "episodes";
    pub const RANDOM_NAV: &str = "random-nav";
}

fn invalid(field: &str, reason: impl Into<String>) -> Error {
    Error::InvalidConfig {
        field: field.into(),
        reason: reason.into(),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let config: RunConfig = toml::from_str(text).map_err(|e| {
            let reason = e.message().to_string();
            let field = e
                .span()
                .and_then(|s| text.get(s))
                .map(|s| s.trim().to_string())
                .unwrap_or_else(|| "config".into());
            invalid(&field, reason)
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Identifies the configuration; the same values always hash the same.
    pub fn hash(&self) -> String {
        short_hash(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn seed_for(&self, label: &str) -> u64 {
        derive_seed(self.seed, label)
    }

    /// World config with its derived seed.
    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            seed: self.seed_for(stage::WORLD),
            ..self.world.clone()
        }
    }

    /// Training config with its derived seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed_for(stage::TRAIN),
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.world.seed != 0 {
            return Err(invalid("world.seed", "set the global `seed` instead"));
        }
        if self.train.seed != 0 {
            return Err(invalid("train.seed", "set the global `seed` instead"));
        }
        World::generate(&self.world)?;
        self.model.validate()?;
        self.train.validate()?;
        self.policy.validate()?;
        let r = &self.render;
        if [r.height, r.width, 3] != self.model.input {
            return Err(invalid(
                "render",
                format!(
                    "{}x{} images do not match model.input {:?}",
                    r.height, r.width, self.model.input
                ),
            ));
        }
        if r.bins != self.model.w {
            return Err(invalid(
                "render.bins",
                format!("must equal model.w ({})", self.model.w),
            ));
        }
        let d = &self.data;
        if d.exemplars == 0 {
            return Err(invalid("data.exemplars", "must be at least 1"));
        }
        if !(d.map_spacing > 0.0) {
            return Err(invalid("data.map_spacing", "must be positive"));
        }
        if !(d.protocol.near_radius > 0.0) {
            return Err(invalid("data.protocol.near_radius", "must be positive"));
        }
        let e = &self.eval;
        if e.tolerances.iter().any(|t| !(*t >= 0.0)) || e.tolerances.windows(2).any(|w| w[0] > w[1])
        {
            return Err(invalid(
                "eval.tolerances",
                "must be non-negative and sorted",
            ));
        }
        if e.bins.iter().any(|(lo, hi)| !(lo < hi)) {
            return Err(invalid("eval.bins", "each bin needs lo < hi"));
        }
        if !(0.0 <= e.nav_min_start && e.nav_min_start <= e.nav_max_start) {
            return Err(invalid(
                "eval.nav_min_start",
                "need 0 ≤ nav_min_start ≤ nav_max_start",
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_defaults_match_code_defaults() {
        assert_eq!(
            RunConfig::from_toml(DEFAULT_TOML).unwrap(),
            RunConfig::default()
        );
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let mut c = RunConfig::default();
        c.train.iterations = 17;
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(c.hash(), RunConfig::default().hash());
    }

    #[test]
    fn invalid_values_name_the_field() {
        let err = RunConfig::from_toml("[policy]\ngrid = 8\n").unwrap_err();
        assert!(err.to_string().contains("policy.grid"), "{err}");
        let err = RunConfig::from_toml("[train]\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = RunConfig::from_toml("[render]\nbins = 8\n").unwrap_err();
        assert!(err.to_string().contains("render.bins"), "{err}");
        let err = RunConfig::from_toml("[world]\nseed = 4\n").unwrap_err();
        assert!(err.to_string().contains("world.seed"), "{err}");
    }

    #[test]
    fn sub_seeds() {
        assert_eq!(derive_seed(7, "world"), derive_seed(7, "world"));
        assert_ne!(derive_seed(7, "world"), derive_seed(7, "map"));
        assert_ne!(derive_seed(7, "world"), derive_seed(8, "world"));
        let c = RunConfig::default();
        assert_eq!(c.world_config().seed, derive_seed(0, stage::WORLD));
    }
}
