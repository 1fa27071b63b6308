//! Built-in behavior policies for offline dataset generation.

use rand::Rng;

use super::EpisodeState;

/// A behavior policy proposes the next bidding-parameter action from the
/// current interval state.
pub trait BehaviorPolicy: Send {
    fn name(&self) -> &'static str;
    fn reset(&mut self, rng: &mut dyn rand::RngCore);
    fn act(&mut self, state: &EpisodeState, rng: &mut dyn rand::RngCore) -> f64;
}

/// Random-walk over the bidding parameter.
pub struct RandomWalkPolicy {
    pub sigma: f64,
    pub min: f64,
    pub max: f64,
    current: f64,
}

impl RandomWalkPolicy {
    pub fn new(sigma: f64, min: f64, max: f64) -> Self {
        Self { sigma, min, max, current: 0.5 * (min + max) }
    }
}

fn gauss(rng: &mut dyn rand::RngCore) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl BehaviorPolicy for RandomWalkPolicy {
    fn name(&self) -> &'static str {
        "random-walk"
    }

    fn reset(&mut self, rng: &mut dyn rand::RngCore) {
        self.current = self.min + rng.gen::<f64>() * (self.max - self.min);
    }

    fn act(&mut self, _state: &EpisodeState, rng: &mut dyn rand::RngCore) -> f64 {
        self.current = (self.current + self.sigma * gauss(rng)).clamp(self.min, self.max);
        self.current
    }
}

/// Budget-pacing controller with actuation noise: pushes the interval spend
/// speed toward uniform pacing.
pub struct NoisyPidPolicy {
    pub gain: f64,
    pub noise: f64,
    pub min: f64,
    pub max: f64,
    current: f64,
}

impl NoisyPidPolicy {
    pub fn new(gain: f64, noise: f64, min: f64, max: f64) -> Self {
        Self { gain, noise, min, max, current: 0.3 * (max - min) + min }
    }
}

impl BehaviorPolicy for NoisyPidPolicy {
    fn name(&self) -> &'static str {
        "noisy-pid"
    }

    fn reset(&mut self, rng: &mut dyn rand::RngCore) {
        self.current = self.min + (0.2 + 0.4 * rng.gen::<f64>()) * (self.max - self.min);
    }

    fn act(&mut self, state: &EpisodeState, rng: &mut dyn rand::RngCore) -> f64 {
        // speed 1.0 == uniform pacing
        let speed = state.feature("budget_consumption_speed");
        let error = 1.0 - speed;
        self.current =
            (self.current + self.gain * error + self.noise * gauss(rng)).clamp(self.min, self.max);
        self.current
    }
}

/// Scripted constraint-aware policy: backs off when the CPA ratio exceeds 1,
/// leans in when it is below, with a budget-pacing correction.
pub struct ConstraintAwarePolicy {
    pub step_gain: f64,
    pub pacing_gain: f64,
    pub min: f64,
    pub max: f64,
    current: f64,
}

impl ConstraintAwarePolicy {
    pub fn new(step_gain: f64, pacing_gain: f64, min: f64, max: f64) -> Self {
        Self { step_gain, pacing_gain, min, max, current: 0.3 * (max - min) + min }
    }
}

impl BehaviorPolicy for ConstraintAwarePolicy {
    fn name(&self) -> &'static str {
        "constraint-aware"
    }

    fn reset(&mut self, rng: &mut dyn rand::RngCore) {
        self.current = self.min + (0.15 + 0.3 * rng.gen::<f64>()) * (self.max - self.min);
    }

    fn act(&mut self, state: &EpisodeState, rng: &mut dyn rand::RngCore) -> f64 {
        let ratio = state.feature("current_cpa_ratio");
        let time_left = state.feature("time_left");
        let budget_left = state.feature("budget_left");
        let constraint_term = if ratio > 1.0 {
            -self.step_gain * (ratio - 1.0)
        } else {
            self.step_gain * (1.0 - ratio)
        };
        // Behind pace (budget_left > time_left) -> bid up, ahead -> bid down.
        let pacing_term = self.pacing_gain * (budget_left - time_left);
        let jitter = 0.02 * (self.max - self.min) * gauss(rng);
        self.current = (self.current + constraint_term + pacing_term + jitter)
            .clamp(self.min, self.max);
        self.current
    }
}

/// The built-in policy set used by dataset generation.
pub fn builtin_policies(action_min: f64, action_max: f64) -> Vec<Box<dyn BehaviorPolicy>> {
    let span = action_max - action_min;
    vec![
        Box::new(RandomWalkPolicy::new(0.08 * span, action_min, action_max)),
        Box::new(NoisyPidPolicy::new(0.06 * span, 0.02 * span, action_min, action_max)),
        Box::new(ConstraintAwarePolicy::new(0.05 * span, 0.1 * span, action_min, action_max)),
    ]
}

pub fn policy_by_name(
    name: &str,
    action_min: f64,
    action_max: f64,
) -> Option<Box<dyn BehaviorPolicy>> {
    builtin_policies(action_min, action_max)
        .into_iter()
        .find(|p| p.name() == name)
}
