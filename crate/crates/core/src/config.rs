//! Run configuration: defaults, then a TOML file, then command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{EpisodeConfig, RewardConfig, RewardPreset, Task};
use crate::error::{Error, Result};
use crate::net::{ArchConfig, ArchPreset};
use crate::ppo::{PPOConfig, TrainConfig};

/// Episode settings as they appear in a config file. The reward comes from
/// the top-level preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSection {
    pub columns: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub max_digit: u8,
    pub task: Task,
}

impl Default for EpisodeSection {
    fn default() -> Self {
        let e = EpisodeConfig::default();
        EpisodeSection {
            columns: e.columns,
            min_len: e.min_len,
            max_len: e.max_len,
            max_digit: e.max_digit,
            task: e.task,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub preset: RewardPreset,
    pub arch: ArchPreset,
    pub checkpoint_every: u64,
    pub episode: EpisodeSection,
    pub ppo: PPOConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/latest"),
            preset: RewardPreset::Dense,
            arch: ArchPreset::Desk,
            checkpoint_every: 10,
            episode: EpisodeSection::default(),
            ppo: PPOConfig::default(),
        }
    }
}

/// Values given on the command line. `None` leaves the lower layer alone.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub preset: Option<RewardPreset>,
    pub arch: Option<ArchPreset>,
    pub columns: Option<usize>,
    pub task: Option<Task>,
    pub min_len: Option<usize>,
    pub max_len: Option<usize>,
    pub total_steps: Option<u64>,
    pub n_envs: Option<usize>,
    pub lr0: Option<f64>,
    pub cycles: Option<u32>,
    pub epochs: Option<usize>,
    pub rollout_len: Option<usize>,
    pub checkpoint_every: Option<u64>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Defaults, then `file` if given, then `flags`.
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(flags);
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        fn set<T: Clone>(dst: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *dst = v.clone();
            }
        }
        set(&mut self.seed, &o.seed);
        set(&mut self.out, &o.out);
        set(&mut self.preset, &o.preset);
        set(&mut self.arch, &o.arch);
        set(&mut self.checkpoint_every, &o.checkpoint_every);
        set(&mut self.episode.columns, &o.columns);
        set(&mut self.episode.task, &o.task);
        set(&mut self.episode.min_len, &o.min_len);
        set(&mut self.episode.max_len, &o.max_len);
        set(&mut self.ppo.total_steps, &o.total_steps);
        set(&mut self.ppo.n_envs, &o.n_envs);
        set(&mut self.ppo.lr0, &o.lr0);
        set(&mut self.ppo.cycles, &o.cycles);
        set(&mut self.ppo.epochs, &o.epochs);
        set(&mut self.ppo.rollout_len, &o.rollout_len);
    }

    pub fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            columns: self.episode.columns,
            min_len: self.episode.min_len,
            max_len: self.episode.max_len,
            max_digit: self.episode.max_digit,
            task: self.episode.task,
            seed: self.seed,
            reward: RewardConfig::preset(self.preset),
            max_operations: None,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            episode: self.episode_config(),
            arch: ArchConfig::preset(self.arch),
            ppo: self.ppo.clone(),
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.episode_config().validate()?;
        self.ppo.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FILE: &str = r#"
seed = 7
preset = "no-of"

[episode]
columns = 12
task = "add"

[ppo]
lr0 = 0.001
"#;

    /// Each field is checked at every layer combination: default only,
    /// file only, flag only, and file plus flag (flag wins).
    #[test]
    fn precedence_matrix() {
        let d = RunConfig::default();
        let file = RunConfig::from_toml(FILE).unwrap();
        let flags = Overrides {
            seed: Some(9),
            columns: Some(15),
            task: Some(Task::SubOnly),
            total_steps: Some(1234),
            ..Overrides::default()
        };

        let mut flag_only = RunConfig::default();
        flag_only.apply(&flags);
        let mut both = file.clone();
        both.apply(&flags);

        // Untouched by either layer.
        assert_eq!(both.episode.max_len, d.episode.max_len);
        assert_eq!(both.ppo.gamma, d.ppo.gamma);
        // File only.
        assert_eq!(file.preset, RewardPreset::NoOf);
        assert_eq!(both.preset, RewardPreset::NoOf);
        assert_eq!(both.ppo.lr0, 0.001);
        // Flag only.
        assert_eq!(flag_only.ppo.total_steps, 1234);
        assert_eq!(both.ppo.total_steps, 1234);
        assert_eq!(flag_only.episode.columns, 15);
        // File and flag: flag wins.
        assert_eq!(file.seed, 7);
        assert_eq!(both.seed, 9);
        assert_eq!(file.episode.task, Task::AddOnly);
        assert_eq!(both.episode.task, Task::SubOnly);
        assert_eq!(file.episode.columns, 12);
        assert_eq!(both.episode.columns, 15);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("colums = 3").is_err());
        assert!(RunConfig::from_toml("[episode]\ntask = \"mul\"").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn preset_selects_reward() {
        let c = RunConfig {
            preset: RewardPreset::NoOfSp,
            ..RunConfig::default()
        };
        let r = c.episode_config().reward;
        assert!(!r.enable_of && !r.enable_sp);
    }
}
