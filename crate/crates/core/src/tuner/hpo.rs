use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::reward::{is_stable, WindowSummary};
use super::{HyperparameterVector, TunerConfig, TunerError};

/// Direction of the most recent exploration move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Direction {
    #[default]
    None,
    Up,
    Down,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExplorationMove {
    Random,
    Increment,
    Decrement,
    ReturnToMax,
}

impl ExplorationMove {
    pub fn wire_label(self) -> &'static str {
        match self {
            ExplorationMove::Random => "random",
            ExplorationMove::Increment => "increment",
            ExplorationMove::Decrement => "decrement",
            ExplorationMove::ReturnToMax => "return_to_max",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecisionKind {
    KeepCurrent,
    NewMaxRecorded,
    Explore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningDecision {
    pub kind: DecisionKind,
    pub new_lambda: HyperparameterVector,
    /// Present exactly when `kind` is `Explore`.
    pub exploration_move: Option<ExplorationMove>,
}

impl TuningDecision {
    /// Label used in feedback envelopes; `None` for `KeepCurrent`.
    pub fn wire_label(&self) -> Option<&'static str> {
        match (self.kind, self.exploration_move) {
            (DecisionKind::NewMaxRecorded, _) => Some("new_max"),
            (DecisionKind::Explore, Some(m)) => Some(m.wire_label()),
            _ => None,
        }
    }
}

/// Memory of the tuner across windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunerState {
    /// Best stable-window reward seen so far; starts at 0.
    pub max_r: f64,
    /// λ that was current when `max_r` was last raised.
    pub max_lambda: HyperparameterVector,
    pub current_lambda: HyperparameterVector,
    pub last_direction: Direction,
    pub windows_seen: u64,
    /// Reward of the previous stable window, used for the direction hint.
    pub last_r_win: Option<f64>,
}

impl TunerState {
    pub fn new(initial: HyperparameterVector) -> Self {
        Self {
            max_r: 0.0,
            max_lambda: initial.clone(),
            current_lambda: initial,
            last_direction: Direction::None,
            windows_seen: 0,
            last_r_win: None,
        }
    }
}

/// Applies the tuning condition to a stable window.
///
/// The caller gates on stability. A window strictly above `max_r` becomes
/// the new maximum and keeps the current λ; ties and lower rewards explore.
pub fn hpo_step<R: Rng + ?Sized>(
    state: &TunerState,
    stable_window: &WindowSummary,
    config: &TunerConfig,
    rng: &mut R,
) -> (TunerState, TuningDecision) {
    let r_win = stable_window.r_win;
    let mut next = state.clone();
    next.windows_seen += 1;
    next.last_r_win = Some(r_win);

    if r_win > state.max_r {
        next.max_r = r_win;
        next.max_lambda = state.current_lambda.clone();
        let decision = TuningDecision {
            kind: DecisionKind::NewMaxRecorded,
            new_lambda: state.current_lambda.clone(),
            exploration_move: None,
        };
        return (next, decision);
    }

    let (lambda, mv) = xi_explore(state, config, r_win, rng);
    next.current_lambda = lambda.clone();
    next.last_direction = match mv {
        ExplorationMove::Increment => Direction::Up,
        ExplorationMove::Decrement => Direction::Down,
        ExplorationMove::Random => Direction::Random,
        // Back on the best known λ: earlier direction history no longer
        // describes the neighbourhood we are in.
        ExplorationMove::ReturnToMax => Direction::None,
    };
    let decision = TuningDecision {
        kind: DecisionKind::Explore,
        new_lambda: lambda,
        exploration_move: Some(mv),
    };
    (next, decision)
}

/// Epsilon-greedy choice of the next λ.
///
/// With probability `1 - epsilon` returns to the best known λ. Otherwise a
/// fraction `p_random` of moves samples γ uniformly inside the bounds and
/// the rest step by `±step_c` from the current γ: keep going the same way
/// if the last directed move was followed by a better window, reverse it
/// if not, and flip a fair coin when there is no direction history.
pub fn xi_explore<R: Rng + ?Sized>(
    state: &TunerState,
    config: &TunerConfig,
    r_win: f64,
    rng: &mut R,
) -> (HyperparameterVector, ExplorationMove) {
    let bounds = config.bounds;
    if rng.gen::<f64>() >= config.epsilon {
        return (state.max_lambda.clone(), ExplorationMove::ReturnToMax);
    }
    if rng.gen::<f64>() < config.p_random {
        let gamma = rng.gen_range(bounds.min..=bounds.max);
        return (
            state.current_lambda.with_gamma(gamma, bounds),
            ExplorationMove::Random,
        );
    }
    let improved = state.last_r_win.map(|prev| r_win > prev);
    let up = match (state.last_direction, improved) {
        (Direction::Up, Some(true)) => true,
        (Direction::Down, Some(true)) => false,
        (Direction::Up, _) => false,
        (Direction::Down, _) => true,
        (Direction::None | Direction::Random, _) => rng.gen_bool(0.5),
    };
    let gamma = state.current_lambda.gamma();
    if up {
        (
            state.current_lambda.with_gamma(gamma + config.step_c, bounds),
            ExplorationMove::Increment,
        )
    } else {
        (
            state.current_lambda.with_gamma(gamma - config.step_c, bounds),
            ExplorationMove::Decrement,
        )
    }
}

/// Best λ found during the run.
pub fn optimal_lambda(state: &TunerState) -> HyperparameterVector {
    state.max_lambda.clone()
}

/// Stateful wrapper owning the configuration, state and seeded rng.
#[derive(Debug, Clone)]
pub struct Tuner {
    config: TunerConfig,
    state: TunerState,
    rng: ChaCha8Rng,
}

impl Tuner {
    pub fn new(config: TunerConfig, initial: HyperparameterVector, seed: u64) -> Result<Self, TunerError> {
        config.validate()?;
        let initial = initial.with_gamma(initial.gamma(), config.bounds);
        Ok(Self {
            config,
            state: TunerState::new(initial),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn config(&self) -> &TunerConfig {
        &self.config
    }

    pub fn state(&self) -> &TunerState {
        &self.state
    }

    /// Runs the tuning condition when the window is stable. Unstable windows
    /// leave the state untouched and yield `KeepCurrent`.
    pub fn observe_window(&mut self, window: &WindowSummary) -> TuningDecision {
        if !is_stable(window, self.config.th_stable) {
            return TuningDecision {
                kind: DecisionKind::KeepCurrent,
                new_lambda: self.state.current_lambda.clone(),
                exploration_move: None,
            };
        }
        let (state, decision) = hpo_step(&self.state, window, &self.config, &mut self.rng);
        self.state = state;
        decision
    }

    pub fn optimal_lambda(&self) -> HyperparameterVector {
        optimal_lambda(&self.state)
    }

    /// Raw rng access for callers that need to derive further streams.
    pub fn rng_mut(&mut self) -> &mut dyn RngCore {
        &mut self.rng
    }
}

#[cfg(test)]
mod tests {
    use super::super::{reward_by_window, EpisodeAverage, GammaBounds};
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn lambda(gamma: f64) -> HyperparameterVector {
        HyperparameterVector::new(gamma, BTreeMap::new(), GammaBounds::default())
    }

    fn window(index: u64, values: &[f64]) -> WindowSummary {
        let first = index * values.len() as u64;
        let avgs: Vec<_> = values
            .iter()
            .enumerate()
            .map(|(i, &r_e)| EpisodeAverage { episode: first + i as u64, r_e, step_count: 10 })
            .collect();
        reward_by_window(index, &avgs, values.len(), lambda(0.5)).unwrap()
    }

    fn config(epsilon: f64) -> TunerConfig {
        TunerConfig { window_length: 3, th_stable: 2.0, epsilon, ..Default::default() }
    }

    #[test]
    fn first_stable_window_records_new_max() {
        let state = TunerState::new(lambda(0.5));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (next, d) = hpo_step(&state, &window(0, &[1.0, 2.0, 3.0]), &config(0.3), &mut rng);
        assert_eq!(d.kind, DecisionKind::NewMaxRecorded);
        assert_eq!(d.exploration_move, None);
        assert_eq!(next.max_r, 2.0);
        assert_eq!(next.current_lambda, lambda(0.5));
        assert_eq!(next.max_lambda, lambda(0.5));
        assert_eq!(d.wire_label(), Some("new_max"));
    }

    #[test]
    fn greedy_explore_returns_to_max() {
        let mut state = TunerState::new(lambda(0.7));
        state.max_r = 5.0;
        state.max_lambda = lambda(0.204);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (next, d) = hpo_step(&state, &window(1, &[2.0, 2.0, 2.0]), &config(0.0), &mut rng);
        assert_eq!(d.kind, DecisionKind::Explore);
        assert_eq!(d.exploration_move, Some(ExplorationMove::ReturnToMax));
        assert_eq!(next.current_lambda.gamma(), 0.204);
        assert_eq!(next.max_r, 5.0);
        assert_eq!(next.last_direction, Direction::None);
    }

    #[test]
    fn ties_explore() {
        let mut state = TunerState::new(lambda(0.5));
        state.max_r = 5.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (next, d) = hpo_step(&state, &window(1, &[4.0, 5.0, 6.0]), &config(0.3), &mut rng);
        assert_eq!(d.kind, DecisionKind::Explore);
        assert!(d.exploration_move.is_some());
        assert_eq!(next.max_r, 5.0);
        assert_eq!(next.max_lambda, lambda(0.5));
    }

    #[test]
    fn increment_is_clamped_at_upper_bound() {
        let mut state = TunerState::new(lambda(0.98));
        state.last_direction = Direction::Up;
        state.last_r_win = Some(1.0);
        let cfg = TunerConfig { epsilon: 1.0, p_random: 0.0, step_c: 0.1, ..config(1.0) };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (l, mv) = xi_explore(&state, &cfg, 2.0, &mut rng);
        assert_eq!(mv, ExplorationMove::Increment);
        assert_eq!(l.gamma(), 0.99);
    }

    #[test]
    fn direction_hint_follows_and_reverses() {
        let cfg = TunerConfig { p_random: 0.0, ..config(1.0) };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut state = TunerState::new(lambda(0.5));
        state.last_r_win = Some(3.0);
        let cases = [
            (Direction::Up, 4.0, ExplorationMove::Increment),
            (Direction::Up, 2.0, ExplorationMove::Decrement),
            (Direction::Down, 4.0, ExplorationMove::Decrement),
            (Direction::Down, 3.0, ExplorationMove::Increment),
        ];
        for (dir, r_win, expected) in cases {
            state.last_direction = dir;
            let (l, mv) = xi_explore(&state, &cfg, r_win, &mut rng);
            assert_eq!(mv, expected, "{dir:?} r_win={r_win}");
            let step = if expected == ExplorationMove::Increment { 0.1 } else { -0.1 };
            assert!((l.gamma() - (0.5 + step)).abs() < 1e-12);
        }
    }

    /// Probability of each move implied by the configuration, computed
    /// independently of `xi_explore`.
    fn move_distribution(cfg: &TunerConfig) -> [(ExplorationMove, f64); 4] {
        let e = cfg.epsilon;
        let p = cfg.p_random;
        [
            (ExplorationMove::ReturnToMax, 1.0 - e),
            (ExplorationMove::Random, e * p),
            (ExplorationMove::Increment, e * (1.0 - p) / 2.0),
            (ExplorationMove::Decrement, e * (1.0 - p) / 2.0),
        ]
    }

    #[test]
    fn move_frequencies_match_configured_distribution() {
        for epsilon in [1.0, 0.3] {
            let cfg = config(epsilon);
            let state = TunerState::new(lambda(0.5));
            let mut rng = ChaCha8Rng::seed_from_u64(0xF00D);
            let n = 10_000;
            let mut counts = std::collections::HashMap::new();
            for _ in 0..n {
                let (l, mv) = xi_explore(&state, &cfg, 1.0, &mut rng);
                assert!(cfg.bounds.contains(l.gamma()));
                *counts.entry(mv).or_insert(0usize) += 1;
            }
            for (mv, p) in move_distribution(&cfg) {
                let observed = *counts.get(&mv).unwrap_or(&0) as f64 / n as f64;
                let se = (p * (1.0 - p) / n as f64).sqrt();
                assert!(
                    (observed - p).abs() <= 3.0 * se + 1e-12,
                    "eps={epsilon} {mv:?}: observed {observed}, expected {p} ± {}",
                    3.0 * se
                );
            }
        }
    }

    #[test]
    fn fresh_state_optimal_lambda_is_initial() {
        let state = TunerState::new(lambda(0.5));
        assert_eq!(optimal_lambda(&state).gamma(), 0.5);
    }

    #[test]
    fn tuner_ignores_unstable_windows() {
        let mut tuner = Tuner::new(config(0.3), lambda(0.5), 9).unwrap();
        let d = tuner.observe_window(&window(0, &[0.0, 0.0, 10.0]));
        assert_eq!(d.kind, DecisionKind::KeepCurrent);
        assert_eq!(d.wire_label(), None);
        assert_eq!(tuner.state(), &TunerState::new(lambda(0.5)));
    }

    #[test]
    fn worked_example_two_new_maxima() {
        let mut tuner = Tuner::new(config(0.3), lambda(0.5), 11).unwrap();
        let d1 = tuner.observe_window(&window(0, &[1.0, 2.0, 3.0]));
        assert_eq!(d1.kind, DecisionKind::NewMaxRecorded);
        assert_eq!(tuner.state().max_r, 2.0);
        let d2 = tuner.observe_window(&window(1, &[4.0, 5.0, 6.0]));
        assert_eq!(d2.kind, DecisionKind::NewMaxRecorded);
        assert_eq!(tuner.state().max_r, 5.0);
    }

    #[test]
    fn replay_is_deterministic() {
        let windows: Vec<_> = (0..50)
            .map(|i| {
                let base = ((i * 7919) % 13) as f64;
                window(i, &[base, base + 0.5, base + 1.0])
            })
            .collect();
        let run = || {
            let mut tuner = Tuner::new(config(0.5), lambda(0.5), 42).unwrap();
            for w in &windows {
                tuner.observe_window(w);
            }
            tuner.optimal_lambda()
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #[test]
        fn invariants_hold_over_random_sequences(
            seed in any::<u64>(),
            epsilon in 0.0f64..=1.0,
            rewards in prop::collection::vec(0.0f64..100.0, 1..60),
        ) {
            let cfg = TunerConfig { epsilon, ..config(epsilon) };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut state = TunerState::new(lambda(0.5));
            for (i, r) in rewards.iter().enumerate() {
                let (next, d) = hpo_step(&state, &window(i as u64, &[*r; 3]), &cfg, &mut rng);
                prop_assert!(next.max_r >= state.max_r);
                prop_assert!(cfg.bounds.contains(next.current_lambda.gamma()));
                prop_assert_eq!(d.kind == DecisionKind::Explore, d.exploration_move.is_some());
                if d.kind == DecisionKind::NewMaxRecorded {
                    prop_assert_eq!(&next.max_lambda, &state.current_lambda);
                }
                state = next;
            }
        }
    }
}
