//! Flat `key = value` run configuration (a TOML subset without tables).

use std::path::{Path, PathBuf};

use histune_core::harness::{BaselineSchedule, EnvConfig, TrainingConfig};
use histune_core::pipeline::{PipelineConfig, Transport};
use histune_core::tuner::{GammaBounds, TunerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TunerKind {
    Static,
    Grid,
    Random,
    History,
}

impl TunerKind {
    pub const ALL: [TunerKind; 4] = [TunerKind::Static, TunerKind::Grid, TunerKind::Random, TunerKind::History];

    pub fn as_str(self) -> &'static str {
        match self {
            TunerKind::Static => "static",
            TunerKind::Grid => "grid",
            TunerKind::Random => "random",
            TunerKind::History => "history",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CliError> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| CliError::Config(format!("unknown tuner kind {s:?} (static, grid, random, history)")))
    }
}

impl std::fmt::Display for TunerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    Absolute,
    /// `th_stable` is a fraction of the maximum per-step reward (#users).
    Fraction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub episodes: u64,
    pub steps_per_episode: u64,
    pub tuner: TunerKind,
    /// Unset: 0.5 for history, 0.9 for static and grid, a seeded draw for
    /// random.
    pub initial_gamma: Option<f64>,

    pub width: u32,
    pub height: u32,
    pub users: usize,
    pub agents: usize,
    pub radius: u32,
    pub layout_seed: u64,
    pub hotspots: usize,

    pub alpha: f64,
    pub agent_epsilon: f64,
    pub epsilon_decay: f64,
    pub epsilon_min: f64,

    pub window_length: usize,
    pub th_stable_mode: ThresholdMode,
    pub th_stable: f64,
    pub tuner_epsilon: f64,
    pub step_c: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub p_random: f64,

    pub schedule_period: u64,
    pub decay_rate: f64,

    pub out: PathBuf,
    pub tcp: bool,
    /// Unset: `HISTUNE_BUS_ADDR`, else 127.0.0.1:7878.
    pub bus_addr: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let training = TrainingConfig::default();
        let tuner = TunerConfig::default();
        Self {
            seed: 0,
            episodes: training.episodes,
            steps_per_episode: training.steps_per_episode,
            tuner: TunerKind::History,
            initial_gamma: None,
            width: training.env.width,
            height: training.env.height,
            users: training.env.users,
            agents: training.env.agents,
            radius: training.env.radius,
            layout_seed: training.env.layout_seed,
            hotspots: training.env.hotspots,
            alpha: training.alpha,
            agent_epsilon: training.agent_epsilon,
            epsilon_decay: training.epsilon_decay,
            epsilon_min: training.epsilon_min,
            window_length: tuner.window_length,
            th_stable_mode: ThresholdMode::Fraction,
            th_stable: 0.03,
            tuner_epsilon: tuner.epsilon,
            step_c: tuner.step_c,
            gamma_min: tuner.bounds.min,
            gamma_max: tuner.bounds.max,
            p_random: tuner.p_random,
            schedule_period: 10,
            decay_rate: 0.1,
            out: PathBuf::from("histune-out"),
            tcp: false,
            bus_addr: None,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("flat config serialises")
    }

    pub fn bounds(&self) -> Result<GammaBounds, CliError> {
        GammaBounds::new(self.gamma_min, self.gamma_max).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn th_stable_absolute(&self) -> f64 {
        match self.th_stable_mode {
            ThresholdMode::Absolute => self.th_stable,
            ThresholdMode::Fraction => self.th_stable * self.users as f64,
        }
    }

    pub fn resolved_initial_gamma(&self) -> Result<f64, CliError> {
        if let Some(g) = self.initial_gamma {
            return Ok(g);
        }
        Ok(match self.tuner {
            TunerKind::History => 0.5,
            TunerKind::Static | TunerKind::Grid => 0.9,
            TunerKind::Random => {
                let b = self.bounds()?;
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(3);
                rng.gen_range(b.min..=b.max)
            }
        })
    }

    pub fn bus_address(&self) -> String {
        self.bus_addr.clone().unwrap_or_else(histune_core::bus::default_bus_addr)
    }

    pub fn tuner_config(&self) -> Result<TunerConfig, CliError> {
        let config = TunerConfig {
            window_length: self.window_length,
            th_stable: self.th_stable_absolute(),
            epsilon: self.tuner_epsilon,
            step_c: self.step_c,
            bounds: self.bounds()?,
            p_random: self.p_random,
        };
        config.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(config)
    }

    pub fn training_config(&self) -> Result<TrainingConfig, CliError> {
        let schedule = match self.tuner {
            TunerKind::Static | TunerKind::History => BaselineSchedule::Static,
            TunerKind::Grid => BaselineSchedule::GridDecay {
                rate: self.decay_rate,
                period: self.schedule_period,
            },
            TunerKind::Random => BaselineSchedule::RandomEvery {
                period: self.schedule_period,
            },
        };
        let config = TrainingConfig {
            env: EnvConfig {
                width: self.width,
                height: self.height,
                users: self.users,
                agents: self.agents,
                radius: self.radius,
                layout_seed: self.layout_seed,
                hotspots: self.hotspots,
            },
            episodes: self.episodes,
            steps_per_episode: self.steps_per_episode,
            alpha: self.alpha,
            agent_epsilon: self.agent_epsilon,
            epsilon_decay: self.epsilon_decay,
            epsilon_min: self.epsilon_min,
            initial_gamma: self.resolved_initial_gamma()?,
            bounds: self.bounds()?,
            schedule,
            seed: self.seed,
            agent_name: "abs-team".into(),
        };
        config.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(config)
    }

    /// Checks every field and builds the pipeline configuration.
    pub fn pipeline_config(&self) -> Result<PipelineConfig, CliError> {
        if !(self.th_stable.is_finite() && self.th_stable > 0.0) {
            return Err(CliError::Config(format!("th_stable {} must be positive", self.th_stable)));
        }
        let mut config = PipelineConfig::new(
            self.training_config()?,
            self.tuner_config()?,
            self.tuner == TunerKind::History,
        );
        if self.tcp {
            let addr = self.bus_address();
            let parsed = std::net::ToSocketAddrs::to_socket_addrs(&addr)
                .ok()
                .and_then(|mut a| a.next())
                .ok_or_else(|| CliError::Config(format!("bad bus address {addr:?}")))?;
            config.transport = Transport::Tcp(parsed);
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.pipeline_config().map(|_| ())
    }
}

/// Defaults rendered for `--help`.
pub fn defaults_help() -> String {
    let mut out = String::from("Config file keys and defaults (flat `key = value`):\n");
    for line in RunConfig::default().to_text().lines() {
        out.push_str("  ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str("  initial_gamma = <unset: history 0.5, static/grid 0.9, random seeded draw>\n");
    out.push_str("  bus_addr = <unset: $HISTUNE_BUS_ADDR or 127.0.0.1:7878>\n");
    out.push_str("th_stable_mode = \"fraction\" scales th_stable by the user count.\n");
    out
}
