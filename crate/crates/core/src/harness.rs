//! Grid-coverage environment, tabular Q-learning agents and the training
//! loop that publishes traces and consumes γ feedback between episodes.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bus::{BusError, FeedbackPayload, TracePayload};
use crate::tuner::GammaBounds;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("non-finite q value at state {state}, action {action} (gamma {gamma})")]
    NonFinite { state: usize, action: usize, gamma: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("bus: {0}")]
    Bus(#[from] BusError),
    #[error("pipeline: {0}")]
    Link(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl Action {
    pub const ALL: [Action; 5] = [Action::Up, Action::Down, Action::Left, Action::Right, Action::Stay];

    pub fn label(self) -> &'static str {
        match self {
            Action::Up => "up",
            Action::Down => "down",
            Action::Left => "left",
            Action::Right => "right",
            Action::Stay => "stay",
        }
    }

    fn delta(self) -> (i64, i64) {
        match self {
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
            Action::Stay => (0, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Pos {
    pub x: u32,
    pub y: u32,
}

impl Pos {
    pub fn new(x: u32, y: u32) -> Self {
        Self { x, y }
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub width: u32,
    pub height: u32,
    pub users: usize,
    pub agents: usize,
    /// Euclidean coverage radius in cells.
    pub radius: u32,
    /// Seed of the user placement, independent of the run seed so every
    /// run sees the same map.
    pub layout_seed: u64,
    /// Number of user clusters; 0 places users uniformly.
    pub hotspots: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            width: 12,
            height: 12,
            users: 30,
            agents: 2,
            radius: 2,
            layout_seed: 0,
            hotspots: 3,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.width == 0 || self.height == 0 {
            return Err(HarnessError::Config("grid must be at least 1x1".into()));
        }
        if self.agents == 0 {
            return Err(HarnessError::Config("need at least one agent".into()));
        }
        let cells = (self.width as u128 * self.height as u128).pow(self.agents as u32);
        if cells > 50_000_000 {
            return Err(HarnessError::Config(format!(
                "joint state space of {cells} cells is too large for a tabular agent"
            )));
        }
        Ok(())
    }
}

/// Number of users within `radius` of at least one agent.
pub fn covered_users(users: &[Pos], agents: &[Pos], radius: u32) -> usize {
    let r2 = radius as i64 * radius as i64;
    users
        .iter()
        .filter(|u| {
            agents.iter().any(|a| {
                let dx = u.x as i64 - a.x as i64;
                let dy = u.y as i64 - a.y as i64;
                dx * dx + dy * dy <= r2
            })
        })
        .count()
}

#[derive(Debug, Clone)]
pub struct CoverageEnv {
    width: u32,
    height: u32,
    radius: u32,
    users: Vec<Pos>,
    start: Vec<Pos>,
    agents: Vec<Pos>,
}

impl CoverageEnv {
    pub fn new(config: &EnvConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.layout_seed);
        let (w, h) = (config.width, config.height);
        let users = if config.hotspots == 0 {
            (0..config.users)
                .map(|_| Pos::new(rng.gen_range(0..w), rng.gen_range(0..h)))
                .collect()
        } else {
            let centres: Vec<Pos> = (0..config.hotspots)
                .map(|_| Pos::new(rng.gen_range(0..w), rng.gen_range(0..h)))
                .collect();
            (0..config.users)
                .map(|i| {
                    let c = centres[i % centres.len()];
                    let jitter = |v: u32, max: u32, rng: &mut ChaCha8Rng| {
                        (v as i64 + rng.gen_range(-1..=1)).clamp(0, max as i64 - 1) as u32
                    };
                    Pos::new(jitter(c.x, w, &mut rng), jitter(c.y, h, &mut rng))
                })
                .collect()
        };
        // agents start spread along the main diagonal
        let start: Vec<Pos> = (0..config.agents)
            .map(|k| {
                let f = if config.agents == 1 { 0.0 } else { k as f64 / (config.agents - 1) as f64 };
                Pos::new(((w - 1) as f64 * f).round() as u32, ((h - 1) as f64 * f).round() as u32)
            })
            .collect();
        Ok(Self::from_parts(w, h, config.radius, users, start))
    }

    pub fn from_parts(width: u32, height: u32, radius: u32, users: Vec<Pos>, start: Vec<Pos>) -> Self {
        Self {
            width,
            height,
            radius,
            users,
            agents: start.clone(),
            start,
        }
    }

    pub fn users(&self) -> &[Pos] {
        &self.users
    }

    pub fn agents(&self) -> &[Pos] {
        &self.agents
    }

    pub fn max_reward(&self) -> usize {
        self.users.len()
    }

    pub fn reset(&mut self) {
        self.agents.clone_from(&self.start);
    }

    pub fn state_count(&self) -> usize {
        (self.width as usize * self.height as usize).pow(self.agents.len() as u32)
    }

    /// Joint position index.
    pub fn state_index(&self) -> usize {
        let cells = self.width as usize * self.height as usize;
        self.agents
            .iter()
            .fold(0, |acc, p| acc * cells + (p.y as usize * self.width as usize + p.x as usize))
    }

    pub fn state_label(&self) -> String {
        self.agents.iter().map(Pos::to_string).collect::<Vec<_>>().join("|")
    }

    pub fn reward(&self) -> f64 {
        covered_users(&self.users, &self.agents, self.radius) as f64
    }

    /// Moves every agent (clamping at the borders) and returns the number
    /// of covered users.
    pub fn step(&mut self, actions: &[Action]) -> f64 {
        assert_eq!(actions.len(), self.agents.len(), "one action per agent");
        for (p, a) in self.agents.iter_mut().zip(actions) {
            let (dx, dy) = a.delta();
            p.x = (p.x as i64 + dx).clamp(0, self.width as i64 - 1) as u32;
            p.y = (p.y as i64 + dy).clamp(0, self.height as i64 - 1) as u32;
        }
        self.reward()
    }
}

/// Tabular Q-learner over the joint state, choosing its own action.
#[derive(Debug, Clone)]
pub struct QAgent {
    q: Vec<f64>,
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl QAgent {
    pub fn new(states: usize, alpha: f64, gamma: f64, epsilon: f64) -> Self {
        Self {
            q: vec![0.0; states * Action::ALL.len()],
            alpha,
            gamma,
            epsilon,
        }
    }

    pub fn row(&self, state: usize) -> &[f64] {
        let n = Action::ALL.len();
        &self.q[state * n..(state + 1) * n]
    }

    pub fn q(&self, state: usize, action: usize) -> f64 {
        self.q[state * Action::ALL.len() + action]
    }

    pub fn set_q(&mut self, state: usize, action: usize, value: f64) {
        self.q[state * Action::ALL.len() + action] = value;
    }

    /// ε-greedy choice; ties between greedy actions are broken uniformly.
    pub fn select<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> usize {
        if rng.gen::<f64>() < self.epsilon {
            return rng.gen_range(0..Action::ALL.len());
        }
        let row = self.row(state);
        let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ties: Vec<usize> = (0..row.len()).filter(|i| row[*i] == best).collect();
        if ties.len() == 1 {
            ties[0]
        } else {
            ties[rng.gen_range(0..ties.len())]
        }
    }

    /// One-step Q-learning update; returns the new value of `(s, a)`.
    pub fn q_update(&mut self, s: usize, a: usize, r: f64, s_next: usize) -> Result<f64, HarnessError> {
        let max_next = self.row(s_next).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let old = self.q(s, a);
        let new = old + self.alpha * (r + self.gamma * max_next - old);
        if !new.is_finite() {
            return Err(HarnessError::NonFinite {
                state: s,
                action: a,
                gamma: self.gamma,
            });
        }
        self.set_q(s, a, new);
        Ok(new)
    }

    fn digest_into(&self, h: &mut impl Hasher) {
        for v in &self.q {
            v.to_bits().hash(h);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BaselineSchedule {
    Static,
    /// γ0 − rate·⌊e / period⌋, floored at the lower bound.
    GridDecay { rate: f64, period: u64 },
    /// Fresh uniform draw within bounds every `period` episodes.
    RandomEvery { period: u64 },
}

impl BaselineSchedule {
    /// γ to use from episode `episode` on, if the schedule changes it there.
    pub fn gamma_at<R: Rng + ?Sized>(
        &self,
        episode: u64,
        initial: f64,
        bounds: GammaBounds,
        rng: &mut R,
    ) -> Option<f64> {
        match *self {
            BaselineSchedule::Static => None,
            BaselineSchedule::GridDecay { rate, period } => {
                if episode == 0 || !episode.is_multiple_of(period) {
                    return None;
                }
                let raw = initial - rate * (episode / period) as f64;
                // strip the representation noise of repeated decimal steps
                Some(bounds.clamp((raw * 1e12).round() / 1e12))
            }
            BaselineSchedule::RandomEvery { period } => {
                (episode > 0 && episode.is_multiple_of(period)).then(|| rng.gen_range(bounds.min..=bounds.max))
            }
        }
    }
}

/// Feedback held until its effective episode.
#[derive(Debug, Default)]
pub struct PendingFeedback {
    queue: Vec<FeedbackPayload>,
}

impl PendingFeedback {
    pub fn offer(&mut self, payload: FeedbackPayload) {
        if payload.name != "gamma" {
            log::warn!("ignoring feedback for unknown hyperparameter {:?}", payload.name);
            return;
        }
        self.queue.push(payload);
    }

    /// Removes the feedback due by `episode` in arrival order, returning
    /// the clamped value to apply (the last due one wins) and the decision
    /// labels applied.
    pub fn take_due(&mut self, episode: u64, bounds: GammaBounds) -> Option<(f64, Vec<&'static str>)> {
        let (due, rest): (Vec<_>, Vec<_>) = self.queue.drain(..).partition(|f| f.effective_episode <= episode);
        self.queue = rest;
        let last = due.last()?;
        let value = bounds.clamp(last.value);
        if value != last.value {
            log::warn!("feedback gamma {} outside bounds; clamped to {value}", last.value);
        }
        Some((value, due.iter().map(|f| f.decision.as_str()).collect()))
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }
}

/// Connection of the training loop to the rest of the pipeline.
pub trait AgentLink {
    fn publish_trace(&mut self, trace: TracePayload) -> Result<(), HarnessError>;
    /// Called before episode `episode` (> 0) starts; returns the feedback
    /// that arrived since the previous boundary.
    fn boundary(&mut self, episode: u64) -> Result<Vec<FeedbackPayload>, HarnessError>;
    /// Called once after the last step.
    fn finish(&mut self) -> Result<(), HarnessError> {
        Ok(())
    }
}

/// Link that drops traces and never yields feedback.
#[derive(Debug, Default)]
pub struct NullLink;

impl AgentLink for NullLink {
    fn publish_trace(&mut self, _: TracePayload) -> Result<(), HarnessError> {
        Ok(())
    }

    fn boundary(&mut self, _: u64) -> Result<Vec<FeedbackPayload>, HarnessError> {
        Ok(Vec::new())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub env: EnvConfig,
    pub episodes: u64,
    pub steps_per_episode: u64,
    pub alpha: f64,
    pub agent_epsilon: f64,
    /// Per-episode multiplicative decay of the action ε; 1 keeps it fixed.
    pub epsilon_decay: f64,
    pub epsilon_min: f64,
    pub initial_gamma: f64,
    pub bounds: GammaBounds,
    pub schedule: BaselineSchedule,
    pub seed: u64,
    pub agent_name: String,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            episodes: 100,
            steps_per_episode: 50,
            alpha: 0.2,
            agent_epsilon: 0.3,
            epsilon_decay: 0.9,
            epsilon_min: 0.0,
            initial_gamma: 0.9,
            bounds: GammaBounds::default(),
            schedule: BaselineSchedule::Static,
            seed: 0,
            agent_name: "abs-team".into(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.env.validate()?;
        if self.episodes == 0 || self.steps_per_episode == 0 {
            return Err(HarnessError::Config("episodes and steps_per_episode must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(HarnessError::Config(format!("alpha {} not in (0, 1]", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.agent_epsilon) {
            return Err(HarnessError::Config(format!("agent_epsilon {} not in [0, 1]", self.agent_epsilon)));
        }
        if !(self.epsilon_decay > 0.0 && self.epsilon_decay <= 1.0) || !(0.0..=1.0).contains(&self.epsilon_min) {
            return Err(HarnessError::Config("epsilon_decay must be in (0, 1] and epsilon_min in [0, 1]".into()));
        }
        if !self.bounds.contains(self.initial_gamma) {
            return Err(HarnessError::Config(format!("initial gamma {} outside bounds", self.initial_gamma)));
        }
        if let BaselineSchedule::GridDecay { period: 0, .. } | BaselineSchedule::RandomEvery { period: 0 } = self.schedule {
            return Err(HarnessError::Config("schedule period must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode: u64,
    pub mean_reward: f64,
    pub gamma: f64,
    /// Labels of the γ changes applied at the start of this episode.
    pub decision_events: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub episodes: Vec<EpisodeRecord>,
    /// Hash of every agent's Q table; stable within one build.
    pub q_digest: u64,
}

impl RunLog {
    pub fn rewards(&self) -> Vec<f64> {
        self.episodes.iter().map(|e| e.mean_reward).collect()
    }

    pub fn gammas(&self) -> Vec<f64> {
        self.episodes.iter().map(|e| e.gamma).collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["episode", "mean_reward", "gamma", "decision_events"])?;
        for e in &self.episodes {
            w.write_record([
                e.episode.to_string(),
                e.mean_reward.to_string(),
                e.gamma.to_string(),
                e.decision_events.join(";"),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs one lifetime. Agents share the covered-user reward and the same γ.
pub fn run_training(config: &TrainingConfig, link: &mut dyn AgentLink) -> Result<RunLog, HarnessError> {
    config.validate()?;
    let mut env = CoverageEnv::new(&config.env)?;
    let states = env.state_count();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut schedule_rng = ChaCha8Rng::seed_from_u64(config.seed);
    schedule_rng.set_stream(1);
    let mut agents: Vec<QAgent> = (0..config.env.agents)
        .map(|_| QAgent::new(states, config.alpha, config.initial_gamma, config.agent_epsilon))
        .collect();
    let mut gamma = config.initial_gamma;
    let mut pending = PendingFeedback::default();
    let mut log = Vec::with_capacity(config.episodes as usize);

    for episode in 0..config.episodes {
        let mut events = Vec::new();
        if episode > 0 {
            for f in link.boundary(episode)? {
                pending.offer(f);
            }
            if let Some((value, labels)) = pending.take_due(episode, config.bounds) {
                gamma = value;
                events.extend(labels.into_iter().map(String::from));
            }
        }
        if let Some(g) = config.schedule.gamma_at(episode, config.initial_gamma, config.bounds, &mut schedule_rng) {
            gamma = g;
            events.push("schedule".into());
        }
        let epsilon = (config.agent_epsilon * config.epsilon_decay.powi(episode as i32)).max(config.epsilon_min);
        for a in &mut agents {
            a.gamma = gamma;
            a.epsilon = epsilon;
        }

        env.reset();
        let mut total = crate::tuner::CompensatedSum::new();
        for step in 0..config.steps_per_episode {
            let s = env.state_index();
            let state_label = env.state_label();
            let qvalues: Vec<f64> = agents.iter().flat_map(|a| a.row(s).iter().copied()).collect();
            let actions: Vec<usize> = agents.iter().map(|a| a.select(s, &mut rng)).collect();
            let moves: Vec<Action> = actions.iter().map(|i| Action::ALL[*i]).collect();
            let reward = env.step(&moves);
            let s_next = env.state_index();
            for (agent, a) in agents.iter_mut().zip(&actions) {
                agent.q_update(s, *a, reward, s_next)?;
            }
            total.add(reward);
            link.publish_trace(TracePayload {
                agent: config.agent_name.clone(),
                episode,
                step,
                reward,
                action: moves.iter().map(|m| m.label()).collect::<Vec<_>>().join("|"),
                state: state_label,
                qvalues,
                gamma,
            })?;
        }
        log.push(EpisodeRecord {
            episode,
            mean_reward: total.mean().expect("at least one step"),
            gamma,
            decision_events: events,
        });
    }
    link.finish()?;

    let mut h = DefaultHasher::new();
    for a in &agents {
        a.digest_into(&mut h);
    }
    Ok(RunLog {
        episodes: log,
        q_digest: h.finish(),
    })
}
