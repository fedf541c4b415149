//! Discrete-time market with transient price impact.
//!
//! The unaffected price follows an arithmetic Brownian motion sampled on an
//! equidistant grid `t_k = k * dt`. Every executed trade leaves an impact on
//! the execution price that decays according to a [`DecayKernel`]; the
//! execution price at `t_k` is the unaffected price plus the kernel-weighted
//! sum of all earlier trades. Trades walk a block-shaped book of depth
//! `1 / G(0)`, so a trade of size `a` at price `P` earns `-a*P - a^2*G(0)/2`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute slack (relative to `x0`) tolerated on action bounds before a
/// request is treated as an error rather than clamped.
pub const ACTION_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Exponential,
    PowerLaw,
    LinearResilience,
}

impl std::fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            KernelFamily::Exponential => "exponential",
            KernelFamily::PowerLaw => "power_law",
            KernelFamily::LinearResilience => "linear_resilience",
        };
        f.write_str(name)
    }
}

/// Impact decay function `G(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayKernel {
    pub family: KernelFamily,
    pub kappa: f64,
    pub rho: f64,
}

impl DecayKernel {
    pub fn new(family: KernelFamily, kappa: f64, rho: f64) -> Result<Self> {
        let kernel = Self { family, kappa, rho };
        kernel.validate()?;
        Ok(kernel)
    }

    pub fn exponential(kappa: f64, rho: f64) -> Result<Self> {
        Self::new(KernelFamily::Exponential, kappa, rho)
    }

    pub fn power_law(kappa: f64, rho: f64) -> Result<Self> {
        Self::new(KernelFamily::PowerLaw, kappa, rho)
    }

    pub fn linear_resilience(kappa: f64, rho: f64) -> Result<Self> {
        Self::new(KernelFamily::LinearResilience, kappa, rho)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::Config(format!(
                "kappa must be positive, got {}",
                self.kappa
            )));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Config(format!(
                "rho must be positive, got {}",
                self.rho
            )));
        }
        Ok(())
    }

    /// `G(t)` for `t >= 0`.
    pub fn value(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::Domain(format!(
                "kernel evaluated at negative time {t}"
            )));
        }
        Ok(self.eval(t))
    }

    /// `G(0)`, the inverse depth of the order book.
    pub fn at_zero(&self) -> f64 {
        self.kappa
    }

    // Callers guarantee t >= 0.
    pub(crate) fn eval(&self, t: f64) -> f64 {
        match self.family {
            KernelFamily::Exponential => self.kappa * (-self.rho * t).exp(),
            KernelFamily::PowerLaw => self.kappa * (1.0 + t).powf(-self.rho),
            KernelFamily::LinearResilience => self.kappa * (1.0 - self.rho * t).max(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketConfig {
    pub p0: f64,
    pub sigma_w: f64,
    pub x0: f64,
    pub n_steps: usize,
    pub dt: f64,
    pub kernel: DecayKernel,
}

impl MarketConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.x0 > 0.0 && self.x0.is_finite()) {
            return Err(Error::Config(format!(
                "x0 must be positive, got {}",
                self.x0
            )));
        }
        if self.n_steps < 1 {
            return Err(Error::Config("n_steps must be at least 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if !(self.p0 > 0.0 && self.p0.is_finite()) {
            return Err(Error::Config(format!(
                "p0 must be positive, got {}",
                self.p0
            )));
        }
        if !(self.sigma_w >= 0.0 && self.sigma_w.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_w must be nonnegative, got {}",
                self.sigma_w
            )));
        }
        self.kernel.validate()
    }

    /// Number of trading times, `N + 1`.
    pub fn n_trades(&self) -> usize {
        self.n_steps + 1
    }

    /// Final trading time `T = N * dt`.
    pub fn horizon(&self) -> f64 {
        self.n_steps as f64 * self.dt
    }

    pub fn time(&self, step_index: usize) -> f64 {
        step_index as f64 * self.dt
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..self.n_trades()).map(|k| self.time(k)).collect()
    }

    /// Lowest admissible action for the given inventory after slack.
    fn action_floor(&self, inventory: f64) -> f64 {
        -inventory - ACTION_SLACK * self.x0.max(1.0)
    }
}

impl Default for MarketConfig {
    fn default() -> Self {
        Self {
            p0: 50.0,
            sigma_w: 1e-4,
            x0: 10.0,
            n_steps: 9,
            dt: 1.0,
            kernel: DecayKernel {
                family: KernelFamily::Exponential,
                kappa: 1.0,
                rho: 1.0,
            },
        }
    }
}

/// Full market state `(t, X_t, past trades, P_t)` plus the unaffected price.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketState {
    pub step_index: usize,
    pub inventory: f64,
    pub past_trades: Vec<f64>,
    pub exec_price: f64,
    pub unaffected_price: f64,
}

impl MarketState {
    pub fn is_terminal(&self, config: &MarketConfig) -> bool {
        self.step_index > config.n_steps
    }

    /// Price displacement caused by past trades.
    pub fn impact(&self) -> f64 {
        self.exec_price - self.unaffected_price
    }
}

/// Market state with the price components removed; trade history padded with
/// zeros to the fixed length `N + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedState {
    pub step_index: usize,
    pub inventory: f64,
    pub past_trades_padded: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub state: MarketState,
    pub action: f64,
    pub reward: f64,
    pub next_state: MarketState,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: MarketState,
    pub reward: f64,
    pub done: bool,
}

pub fn kernel_value(kernel: &DecayKernel, t: f64) -> Result<f64> {
    kernel.value(t)
}

/// Initial state: full inventory, no trades, both prices at `p0`.
pub fn initial_state(config: &MarketConfig) -> MarketState {
    MarketState {
        step_index: 0,
        inventory: config.x0,
        past_trades: Vec::with_capacity(config.n_trades()),
        exec_price: config.p0,
        unaffected_price: config.p0,
    }
}

/// Kernel-weighted sum of past trades seen at `step_index`.
pub fn impact_at(config: &MarketConfig, past_trades: &[f64], step_index: usize) -> f64 {
    let now = config.time(step_index);
    past_trades
        .iter()
        .enumerate()
        .map(|(j, &xi)| config.kernel.eval(now - config.time(j)) * xi)
        .sum()
}

/// Checks `action` against `[-inventory, 0]`, clamping violations that are
/// within [`ACTION_SLACK`].
fn admissible_action(config: &MarketConfig, inventory: f64, action: f64) -> Result<f64> {
    let slack = ACTION_SLACK * config.x0.max(1.0);
    if !action.is_finite() || action > slack || action < config.action_floor(inventory) {
        return Err(Error::ActionOutOfRange {
            action,
            lower: -inventory,
        });
    }
    Ok(action.clamp(-inventory, 0.0))
}

/// One-step revenue `-((P+)^2 - P^2) / (2 G(0))` with `P+ = P + a G(0)`.
pub fn reward(config: &MarketConfig, state: &MarketState, action: f64) -> Result<f64> {
    let action = admissible_action(config, state.inventory, action)?;
    Ok(trade_revenue(
        config.kernel.at_zero(),
        state.exec_price,
        action,
    ))
}

fn trade_revenue(g0: f64, price: f64, action: f64) -> f64 {
    let after = price + action * g0;
    -(after * after - price * price) / (2.0 * g0)
}

/// Drawing a Brownian increment for every transition keeps price paths a
/// function of the seed alone, independent of the chosen actions.
pub fn step<R: Rng + ?Sized>(
    config: &MarketConfig,
    state: &MarketState,
    action: f64,
    rng: &mut R,
) -> Result<StepOutcome> {
    if state.is_terminal(config) {
        return Err(Error::TerminalState(state.step_index));
    }
    let mut action = admissible_action(config, state.inventory, action)?;
    if state.step_index == config.n_steps {
        let slack = ACTION_SLACK * config.x0.max(1.0);
        if (action + state.inventory).abs() > slack {
            return Err(Error::Domain(format!(
                "final trade must liquidate the remaining {} shares, got {}",
                state.inventory, action
            )));
        }
        action = -state.inventory;
    }
    let reward = trade_revenue(config.kernel.at_zero(), state.exec_price, action);

    let mut past_trades = Vec::with_capacity(config.n_trades());
    past_trades.extend_from_slice(&state.past_trades);
    past_trades.push(action);
    let step_index = state.step_index + 1;
    let inventory = if step_index == config.n_trades() {
        0.0
    } else {
        state.inventory + action
    };

    let z: f64 = rng.sample(StandardNormal);
    let unaffected_price = state.unaffected_price + config.sigma_w * config.dt.sqrt() * z;
    let exec_price = unaffected_price + impact_at(config, &past_trades, step_index);

    let next_state = MarketState {
        step_index,
        inventory,
        past_trades,
        exec_price,
        unaffected_price,
    };
    Ok(StepOutcome {
        done: step_index == config.n_trades(),
        next_state,
        reward,
    })
}

pub fn project(config: &MarketConfig, state: &MarketState) -> ProjectedState {
    let mut padded = vec![0.0; config.n_trades()];
    padded[..state.past_trades.len()].copy_from_slice(&state.past_trades);
    ProjectedState {
        step_index: state.step_index,
        inventory: state.inventory,
        past_trades_padded: padded,
    }
}

/// Seeded environment driving [`step`] with its own Brownian generator.
#[derive(Debug, Clone)]
pub struct MarketEnv {
    config: MarketConfig,
    rng: ChaCha8Rng,
}

impl MarketEnv {
    pub fn new(config: MarketConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn config(&self) -> &MarketConfig {
        &self.config
    }

    /// Replaces the kernel; used by parameter schedules between episodes.
    pub fn set_kernel(&mut self, kernel: DecayKernel) -> Result<()> {
        kernel.validate()?;
        self.config.kernel = kernel;
        Ok(())
    }

    /// Reseeds the price path and returns the initial state.
    pub fn reset(&mut self, seed: u64) -> MarketState {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        initial_state(&self.config)
    }

    pub fn step(&mut self, state: &MarketState, action: f64) -> Result<StepOutcome> {
        step(&self.config, state, action, &mut self.rng)
    }

    /// Executes a complete trade schedule from a fresh reset and returns the
    /// per-step rewards.
    pub fn replay(&mut self, seed: u64, trades: &[f64]) -> Result<Vec<f64>> {
        if trades.len() != self.config.n_trades() {
            return Err(Error::Shape(format!(
                "schedule has {} trades, market expects {}",
                trades.len(),
                self.config.n_trades()
            )));
        }
        let mut state = self.reset(seed);
        let mut rewards = Vec::with_capacity(trades.len());
        for &trade in trades {
            let action = if state.step_index == self.config.n_steps {
                -state.inventory
            } else {
                trade.max(-state.inventory)
            };
            let outcome = self.step(&state, action)?;
            rewards.push(outcome.reward);
            state = outcome.next_state;
        }
        Ok(rewards)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp_config(n_steps: usize, sigma_w: f64) -> MarketConfig {
        MarketConfig {
            n_steps,
            sigma_w,
            ..MarketConfig::default()
        }
    }

    #[test]
    fn kernel_values() {
        let exp = DecayKernel::exponential(1.0, 1.0).unwrap();
        assert_eq!(kernel_value(&exp, 0.0).unwrap(), 1.0);
        assert!((kernel_value(&exp, 1.0).unwrap() - 0.3678794).abs() < 1e-7);
        let pl = DecayKernel::power_law(1.0, 1.0).unwrap();
        assert_eq!(kernel_value(&pl, 1.0).unwrap(), 0.5);
        let lr = DecayKernel::linear_resilience(1.0, 0.5).unwrap();
        assert_eq!(kernel_value(&lr, 4.0).unwrap(), 0.0);
        assert_eq!(kernel_value(&lr, 1.0).unwrap(), 0.5);
    }

    #[test]
    fn kernel_rejects_negative_time_and_bad_params() {
        let exp = DecayKernel::exponential(1.0, 1.0).unwrap();
        assert!(matches!(exp.value(-0.1), Err(Error::Domain(_))));
        assert!(DecayKernel::exponential(0.0, 1.0).is_err());
        assert!(DecayKernel::power_law(1.0, -1.0).is_err());
    }

    #[test]
    fn kernel_at_zero_is_kappa() {
        for family in [
            KernelFamily::Exponential,
            KernelFamily::PowerLaw,
            KernelFamily::LinearResilience,
        ] {
            let k = DecayKernel::new(family, 2.5, 0.3).unwrap();
            assert_eq!(k.value(0.0).unwrap(), 2.5);
        }
    }

    #[test]
    fn strict_convexity_of_smooth_kernels() {
        for k in [
            DecayKernel::exponential(1.0, 1.0).unwrap(),
            DecayKernel::power_law(1.0, 1.0).unwrap(),
        ] {
            for i in 0..50 {
                let t = i as f64 * 0.2;
                let h = 0.1;
                let second = k.eval(t) - 2.0 * k.eval(t + h) + k.eval(t + 2.0 * h);
                assert!(second > 0.0, "{k:?} not convex at {t}");
            }
        }
    }

    #[test]
    fn reset_state() {
        let config = MarketConfig::default();
        let mut env = MarketEnv::new(config, 7).unwrap();
        let s = env.reset(7);
        assert_eq!(s.step_index, 0);
        assert_eq!(s.inventory, 10.0);
        assert_eq!(s.exec_price, 50.0);
        assert_eq!(s.impact(), 0.0);
        assert!(s.past_trades.is_empty());
    }

    #[test]
    fn reset_with_same_seed_replays_brownian_path() {
        let config = exp_config(9, 0.5);
        let mut env = MarketEnv::new(config.clone(), 0).unwrap();
        let trades = vec![-1.0; 10];
        let a = env.replay(42, &trades).unwrap();
        let b = env.replay(42, &trades).unwrap();
        let c = env.replay(43, &trades).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn reward_examples() {
        let config = MarketConfig::default();
        let mut s = initial_state(&config);
        assert_eq!(reward(&config, &s, -10.0).unwrap(), 450.0);
        assert_eq!(reward(&config, &s, 0.0).unwrap(), 0.0);
        s.exec_price = 46.3212;
        let r = reward(&config, &s, -5.0).unwrap();
        assert!((r - 219.106).abs() < 1e-9);
        // algebraic form
        assert!((r - (5.0 * 46.3212 - 12.5)).abs() < 1e-9);
    }

    #[test]
    fn reward_rejects_out_of_range() {
        let config = MarketConfig::default();
        let s = initial_state(&config);
        assert!(matches!(
            reward(&config, &s, -10.5),
            Err(Error::ActionOutOfRange { .. })
        ));
        assert!(reward(&config, &s, 0.1).is_err());
        assert!(reward(&config, &s, f64::NAN).is_err());
        // within slack is clamped
        assert_eq!(reward(&config, &s, 1e-14).unwrap(), 0.0);
    }

    #[test]
    fn full_liquidation_in_one_step() {
        let config = exp_config(1, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s0 = initial_state(&config);
        let o = step(&config, &s0, -10.0, &mut rng).unwrap();
        assert_eq!(o.reward, 450.0);
        assert_eq!(o.next_state.inventory, 0.0);
        assert!(!o.done);
        let o2 = step(&config, &o.next_state, 0.0, &mut rng).unwrap();
        assert!(o2.done);
        assert_eq!(o2.reward, 0.0);
        assert!(matches!(
            step(&config, &o2.next_state, 0.0, &mut rng),
            Err(Error::TerminalState(2))
        ));
    }

    #[test]
    fn execution_price_after_trade() {
        let config = exp_config(1, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let o = step(&config, &initial_state(&config), -10.0, &mut rng).unwrap();
        assert!((o.next_state.exec_price - (50.0 - 10.0 * (-1.0f64).exp())).abs() < 1e-12);
        assert!((o.next_state.exec_price - 46.32121).abs() < 1e-5);
    }

    #[test]
    fn two_trade_episode_reward() {
        let config = exp_config(1, 0.0);
        let mut env = MarketEnv::new(config, 0).unwrap();
        let total: f64 = env.replay(0, &[-5.0, -5.0]).unwrap().iter().sum();
        // 237.5 at P = 50, then 5 * (50 - 5/e) - 12.5
        let expected = 500.0 - 25.0 - 25.0 * (-1.0f64).exp();
        assert!((total - expected).abs() < 1e-9);
        assert!((total - 465.803).abs() < 1e-3);
    }

    #[test]
    fn final_step_must_liquidate() {
        let config = exp_config(1, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let o = step(&config, &initial_state(&config), -4.0, &mut rng).unwrap();
        assert!(step(&config, &o.next_state, -3.0, &mut rng).is_err());
        let last = step(&config, &o.next_state, -6.0, &mut rng).unwrap();
        assert!(last.done);
        assert_eq!(last.next_state.inventory, 0.0);
    }

    #[test]
    fn projection() {
        let config = MarketConfig::default();
        let s0 = initial_state(&config);
        let p = project(&config, &s0);
        assert_eq!(p.step_index, 0);
        assert_eq!(p.inventory, 10.0);
        assert_eq!(p.past_trades_padded, vec![0.0; 10]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s1 = step(&config, &s0, -4.0, &mut rng).unwrap().next_state;
        let p1 = project(&config, &s1);
        assert_eq!(p1.step_index, 1);
        assert_eq!(p1.inventory, 6.0);
        assert_eq!(p1.past_trades_padded.len(), 10);
        assert_eq!(p1.past_trades_padded[0], -4.0);
        assert!(p1.past_trades_padded[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        let mut c = MarketConfig::default();
        assert!(c.validate().is_ok());
        c.x0 = 0.0;
        assert!(c.validate().is_err());
        let c = MarketConfig {
            n_steps: 0,
            ..MarketConfig::default()
        };
        assert!(c.validate().is_err());
        let c = MarketConfig {
            sigma_w: -1.0,
            ..MarketConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
