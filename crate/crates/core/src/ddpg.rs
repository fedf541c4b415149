//! Deep deterministic policy gradient for liquidation.
//!
//! The critic approximates the auxiliary action value
//! `Q_aux(pi(s), a) = Q(s, a) - x * p0`, which depends only on the projected
//! state `(t, X_t, past trades)`. Its Bellman target is
//! `y = r + a * p0 + (1 - d) * Q_aux_target(pi(s'), a')`. The actor emits a raw
//! score `u` and trades `-X * sigmoid(u)`; at the last grid point the
//! remaining inventory is sold unconditionally.
//!
//! Network inputs are normalised as `[t / T, X / X0, xi_0..xi_N / X0]` for the
//! actor, with `a / X0` appended for the critic.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::closed_form::{expected_profit, optimal_strategy, Strategy};
use crate::error::{Error, Result};
use crate::market::{
    project, DecayKernel, MarketConfig, MarketEnv, MarketState, ProjectedState, TransitionRecord,
};
use crate::neural::{adam_step, polyak_update, AdamState, Mlp};
use crate::rl::{liquidated_early, OuNoise, ReplayMemory};

/// Inventory below `EARLY_LIQUIDATION_FRACTION * x0` before the final step
/// counts as liquidated early.
pub const EARLY_LIQUIDATION_FRACTION: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolyakConvention {
    /// `target <- tau * target + (1 - tau) * main`
    AsPaper,
    /// `target <- (1 - tau) * target + tau * main`
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QMode {
    /// Critic learns `Q - x * p0`; targets carry the `a * p0` cash term.
    Auxiliary,
    /// Critic learns the raw return-to-go.
    Standard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    #[serde(rename = "H")]
    pub episodes: usize,
    #[serde(rename = "B")]
    pub batch_size: usize,
    #[serde(rename = "D")]
    pub window: usize,
    pub epsilon: f64,
    pub theta_eps: f64,
    pub sigma_eps: f64,
    pub lr_critic: f64,
    pub critic_depth: usize,
    pub critic_width: usize,
    pub lr_actor: f64,
    pub actor_depth: usize,
    pub actor_width: usize,
    pub tau_critic: f64,
    pub tau_actor: f64,
    pub polyak_convention: PolyakConvention,
    pub q_mode: QMode,
    pub seed: u64,
    /// Greedy evaluation cadence in episodes; the final episode is always
    /// evaluated.
    pub eval_every: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            episodes: 30_000,
            batch_size: 1_000,
            window: 15_000,
            epsilon: 1.0,
            theta_eps: 0.15,
            sigma_eps: 0.2,
            lr_critic: 5e-4,
            critic_depth: 14,
            critic_width: 64,
            lr_actor: 5e-5,
            actor_depth: 10,
            actor_width: 54,
            tau_critic: 0.005,
            tau_actor: 0.005,
            polyak_convention: PolyakConvention::AsPaper,
            q_mode: QMode::Auxiliary,
            seed: 0,
            eval_every: 100,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("B", self.batch_size),
            ("D", self.window),
            ("critic_depth", self.critic_depth),
            ("critic_width", self.critic_width),
            ("actor_depth", self.actor_depth),
            ("actor_width", self.actor_width),
            ("eval_every", self.eval_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!(
                "epsilon must lie in [0, 1], got {}",
                self.epsilon
            )));
        }
        for (name, v) in [
            ("tau_critic", self.tau_critic),
            ("tau_actor", self.tau_actor),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        for (name, v) in [
            ("lr_critic", self.lr_critic),
            ("lr_actor", self.lr_actor),
            ("theta_eps", self.theta_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.sigma_eps >= 0.0) {
            return Err(Error::Config("sigma_eps must be nonnegative".into()));
        }
        Ok(())
    }

    /// Blend weight handed to [`polyak_update`] for the given paper-style tau.
    fn blend(&self, tau: f64) -> f64 {
        match self.polyak_convention {
            PolyakConvention::AsPaper => tau,
            PolyakConvention::Standard => 1.0 - tau,
        }
    }
}

/// Feature scaling frozen when the trainer is built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub horizon: f64,
    pub x0: f64,
    pub p0: f64,
    pub n_trades: usize,
}

impl Normalizer {
    pub fn from_market(market: &MarketConfig) -> Self {
        Self {
            horizon: market.horizon(),
            x0: market.x0,
            p0: market.p0,
            n_trades: market.n_trades(),
        }
    }

    pub fn actor_dim(&self) -> usize {
        2 + self.n_trades
    }

    pub fn critic_dim(&self) -> usize {
        3 + self.n_trades
    }

    fn fill_state(&self, step_index: usize, inventory: f64, trades: &[f64], out: &mut [f64]) {
        out[0] = step_index as f64 / self.horizon;
        out[1] = inventory / self.x0;
        let history = &mut out[2..2 + self.n_trades];
        history.fill(0.0);
        for (slot, t) in history.iter_mut().zip(trades) {
            *slot = t / self.x0;
        }
    }

    pub fn actor_features(&self, state: &ProjectedState) -> Vec<f64> {
        let mut out = vec![0.0; self.actor_dim()];
        self.fill_state(
            state.step_index,
            state.inventory,
            &state.past_trades_padded,
            &mut out,
        );
        out
    }

    pub fn critic_features(&self, state: &ProjectedState, action: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.critic_dim()];
        self.fill_state(
            state.step_index,
            state.inventory,
            &state.past_trades_padded,
            &mut out,
        );
        out[self.critic_dim() - 1] = action / self.x0;
        out
    }

    fn actor_batch<'a>(
        &self,
        states: impl ExactSizeIterator<Item = &'a MarketState>,
    ) -> Array2<f64> {
        let mut m = Array2::zeros((states.len(), self.actor_dim()));
        for (mut row, s) in m.rows_mut().into_iter().zip(states) {
            let row = row.as_slice_mut().expect("standard layout");
            self.fill_state(s.step_index, s.inventory, &s.past_trades, row);
        }
        m
    }

    fn critic_batch<'a>(
        &self,
        states: impl ExactSizeIterator<Item = &'a MarketState>,
        actions: &[f64],
    ) -> Array2<f64> {
        let dim = self.critic_dim();
        let mut m = Array2::zeros((states.len(), dim));
        for ((mut row, s), a) in m.rows_mut().into_iter().zip(states).zip(actions) {
            let row = row.as_slice_mut().expect("standard layout");
            self.fill_state(s.step_index, s.inventory, &s.past_trades, row);
            row[dim - 1] = a / self.x0;
        }
        m
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Actor network with the `-X * sigmoid(u)` squash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorNet {
    pub net: Mlp,
}

impl ActorNet {
    pub fn new<R: Rng + ?Sized>(
        norm: &Normalizer,
        depth: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            net: Mlp::xavier(&layer_sizes(norm.actor_dim(), depth, width), rng)?,
        })
    }

    pub fn raw(&self, norm: &Normalizer, state: &ProjectedState) -> Result<f64> {
        Ok(self.net.predict_one(&norm.actor_features(state))?[0])
    }

    /// Noise-free action, forcing full liquidation at the last grid point.
    pub fn action(&self, norm: &Normalizer, state: &ProjectedState) -> Result<f64> {
        if state.step_index + 1 >= norm.n_trades {
            return Ok(-state.inventory);
        }
        Ok(-state.inventory * sigmoid(self.raw(norm, state)?))
    }
}

/// Critic network over `(projected state, action)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticNet {
    pub net: Mlp,
}

impl CriticNet {
    pub fn new<R: Rng + ?Sized>(
        norm: &Normalizer,
        depth: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            net: Mlp::xavier(&layer_sizes(norm.critic_dim(), depth, width), rng)?,
        })
    }

    pub fn value(&self, norm: &Normalizer, state: &ProjectedState, action: f64) -> Result<f64> {
        Ok(self.net.predict_one(&norm.critic_features(state, action))?[0])
    }
}

fn layer_sizes(input: usize, depth: usize, width: usize) -> Vec<usize> {
    let mut sizes = vec![input];
    sizes.extend(std::iter::repeat_n(width, depth));
    sizes.push(1);
    sizes
}

/// Behaviour policy: forced liquidation at step `N`, otherwise a coin flip
/// decides between the noisy and the clean squashed action. The noise
/// process only advances on the noisy branch.
#[allow(clippy::too_many_arguments)]
pub fn select_action<R: Rng + ?Sized>(
    actor: &ActorNet,
    norm: &Normalizer,
    state: &ProjectedState,
    n_steps: usize,
    noise: &mut OuNoise,
    rng: &mut R,
    epsilon: f64,
) -> Result<f64> {
    if state.step_index >= n_steps {
        return Ok(-state.inventory);
    }
    let mut raw = actor.raw(norm, state)?;
    let coin: f64 = rng.random();
    if coin < epsilon {
        raw += noise.sample(rng);
    }
    Ok(-state.inventory * sigmoid(raw))
}

/// Bellman target for one transition.
pub fn critic_target(
    record: &TransitionRecord,
    target_actor: &ActorNet,
    target_critic: &CriticNet,
    norm: &Normalizer,
    q_mode: QMode,
) -> Result<f64> {
    let cash = match q_mode {
        QMode::Auxiliary => record.action * norm.p0,
        QMode::Standard => 0.0,
    };
    if record.done {
        return Ok(record.reward + cash);
    }
    let next = project_with(norm, &record.next_state);
    let next_action = target_actor.action(norm, &next)?;
    Ok(record.reward + cash + target_critic.value(norm, &next, next_action)?)
}

fn project_with(norm: &Normalizer, state: &MarketState) -> ProjectedState {
    let mut padded = vec![0.0; norm.n_trades];
    padded[..state.past_trades.len()].copy_from_slice(&state.past_trades);
    ProjectedState {
        step_index: state.step_index,
        inventory: state.inventory,
        past_trades_padded: padded,
    }
}

/// One Adam step on the mean squared Bellman error. Returns the loss before
/// the step.
pub fn critic_update(
    critic: &mut CriticNet,
    norm: &Normalizer,
    batch: &[&TransitionRecord],
    targets: &[f64],
    adam: &mut AdamState,
) -> Result<f64> {
    if batch.len() != targets.len() || batch.is_empty() {
        return Err(Error::Shape(format!(
            "{} records for {} targets",
            batch.len(),
            targets.len()
        )));
    }
    let actions: Vec<f64> = batch.iter().map(|r| r.action).collect();
    let inputs = norm.critic_batch(batch.iter().map(|r| &r.state), &actions);
    let (q, cache) = critic.net.forward(inputs.view())?;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros((batch.len(), 1));
    for (i, &y) in targets.iter().enumerate() {
        let diff = q[[i, 0]] - y;
        loss += diff * diff * scale;
        grad[[i, 0]] = 2.0 * diff * scale;
    }
    let (grads, _) = critic.net.backward(&cache, grad.view())?;
    adam_step(&mut critic.net, &grads, adam)?;
    Ok(loss)
}

/// Gradient of the actor objective `-(1/B) sum Q(pi(s), -X sigmoid(u(s)))`
/// with respect to the actor parameters, holding the critic fixed. States at
/// the forced-liquidation step contribute nothing since the actor does not
/// act there. Returns `(gradients, loss)`.
pub fn actor_gradient(
    actor: &ActorNet,
    critic: &CriticNet,
    norm: &Normalizer,
    states: &[&MarketState],
) -> Result<(crate::neural::Gradients, f64)> {
    let b = states.len();
    if b == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let inputs = norm.actor_batch(states.iter().copied());
    let (raw, actor_cache) = actor.net.forward(inputs.view())?;
    let free: Vec<bool> = states
        .iter()
        .map(|s| s.step_index + 1 < norm.n_trades)
        .collect();
    let squash: Vec<f64> = raw.column(0).iter().map(|&u| sigmoid(u)).collect();
    let actions: Vec<f64> = states
        .iter()
        .zip(&squash)
        .zip(&free)
        .map(|((s, &p), &f)| if f { -s.inventory * p } else { -s.inventory })
        .collect();
    let critic_inputs = norm.critic_batch(states.iter().copied(), &actions);
    let (q, critic_cache) = critic.net.forward(critic_inputs.view())?;
    let scale = 1.0 / b as f64;
    let loss = -q.sum() * scale;
    let out_grad = Array2::from_shape_fn((b, 1), |(i, _)| if free[i] { -scale } else { 0.0 });
    let input_grad = critic.net.input_gradient(&critic_cache, out_grad.view())?;
    let action_col = norm.critic_dim() - 1;
    let mut raw_grad = Array2::zeros((b, 1));
    for i in 0..b {
        if !free[i] {
            continue;
        }
        // a = -X sigmoid(u), feature = a / X0
        let d_action = input_grad[[i, action_col]] / norm.x0;
        let p = squash[i];
        raw_grad[[i, 0]] = d_action * (-states[i].inventory * p * (1.0 - p));
    }
    let (grads, _) = actor.net.backward(&actor_cache, raw_grad.view())?;
    Ok((grads, loss))
}

/// One Adam step ascending the critic's value of the actor's actions.
pub fn actor_update(
    actor: &mut ActorNet,
    critic: &CriticNet,
    norm: &Normalizer,
    batch: &[&TransitionRecord],
    adam: &mut AdamState,
) -> Result<f64> {
    let states: Vec<&MarketState> = batch.iter().map(|r| &r.state).collect();
    let (grads, loss) = actor_gradient(actor, critic, norm, &states)?;
    adam_step(&mut actor.net, &grads, adam)?;
    Ok(loss)
}

/// Linear interpolation of the decay rate over an online run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoSchedule {
    pub rho_start: f64,
    pub rho_end: f64,
}

impl RhoSchedule {
    pub fn constant(rho: f64) -> Self {
        Self {
            rho_start: rho,
            rho_end: rho,
        }
    }

    /// `rho_start + (rho_end - rho_start) * h / (H - 1)`.
    pub fn rho_at(&self, episode: usize, episodes: usize) -> f64 {
        if episodes <= 1 {
            return self.rho_start;
        }
        self.rho_start + (self.rho_end - self.rho_start) * episode as f64 / (episodes - 1) as f64
    }
}

/// Per-episode training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub episode: usize,
    pub executed_reward: f64,
    pub greedy_reward: Option<f64>,
    pub oracle_reward: f64,
    pub gap_bps: Option<f64>,
    pub rho: f64,
    pub epsilon: f64,
    pub committed: bool,
    pub updates: usize,
    pub critic_loss: Option<f64>,
    #[serde(skip)]
    pub wall_ms: f64,
}

/// Basis-point shortfall of `achieved` against `oracle`; positive when the
/// agent underperforms.
pub fn gap_bps(oracle: f64, achieved: f64) -> f64 {
    (oracle - achieved) / oracle.abs() * 1e4
}

pub trait MetricsSink {
    fn record(&mut self, row: &MetricsRow) -> Result<()>;
}

impl MetricsSink for Vec<MetricsRow> {
    fn record(&mut self, row: &MetricsRow) -> Result<()> {
        self.push(row.clone());
        Ok(())
    }
}

/// Sink that drops every row.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _row: &MetricsRow) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub executed_reward: f64,
    pub trades: Vec<f64>,
    pub staged: usize,
    pub committed: bool,
    pub updates: usize,
    pub mean_critic_loss: Option<f64>,
}

/// Zero-noise evaluation of the actor's own policy.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyResult {
    pub strategy: Strategy,
    pub reward: f64,
}

/// Runs one episode of a deterministic policy in the given market and
/// returns its transitions.
pub fn rollout<F>(market: &MarketConfig, seed: u64, mut policy: F) -> Result<Vec<TransitionRecord>>
where
    F: FnMut(&ProjectedState) -> Result<f64>,
{
    let mut env = MarketEnv::new(market.clone(), seed)?;
    let mut state = env.reset(seed);
    let mut out = Vec::with_capacity(market.n_trades());
    loop {
        let projected = project(market, &state);
        let action = if state.step_index == market.n_steps {
            -state.inventory
        } else {
            policy(&projected)?
        };
        let step = env.step(&state, action)?;
        out.push(TransitionRecord {
            state,
            action,
            reward: step.reward,
            next_state: step.next_state.clone(),
            done: step.done,
        });
        if step.done {
            return Ok(out);
        }
        state = step.next_state;
    }
}

/// Greedy rollout with the price noise switched off, so the reward equals
/// the schedule's expected profit.
pub fn greedy_rollout(
    actor: &ActorNet,
    norm: &Normalizer,
    market: &MarketConfig,
) -> Result<GreedyResult> {
    let quiet = MarketConfig {
        sigma_w: 0.0,
        ..market.clone()
    };
    let records = rollout(&quiet, 0, |s| actor.action(norm, s))?;
    Ok(GreedyResult {
        reward: records.iter().map(|r| r.reward).sum(),
        strategy: Strategy::new(records.iter().map(|r| r.action).collect()),
    })
}

/// Oracle profit for the market's current kernel.
pub fn oracle_reward(market: &MarketConfig) -> Result<f64> {
    let grid = market.grid();
    let xi = optimal_strategy(&market.kernel, &grid, market.x0)?;
    expected_profit(&market.kernel, &grid, &xi, market.p0)
}

pub struct Trainer {
    config: TrainerConfig,
    market: MarketConfig,
    norm: Normalizer,
    actor: ActorNet,
    critic: CriticNet,
    target_actor: ActorNet,
    target_critic: CriticNet,
    actor_adam: AdamState,
    critic_adam: AdamState,
    memory: ReplayMemory,
    noise: OuNoise,
    rng: ChaCha8Rng,
    episodes_done: u64,
    updates_done: u64,
}

impl Trainer {
    pub fn new(config: TrainerConfig, market: MarketConfig) -> Result<Self> {
        config.validate()?;
        market.validate()?;
        let norm = Normalizer::from_market(&market);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let actor = ActorNet::new(&norm, config.actor_depth, config.actor_width, &mut rng)?;
        let critic = CriticNet::new(&norm, config.critic_depth, config.critic_width, &mut rng)?;
        Ok(Self {
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor_adam: AdamState::new(&actor.net, config.lr_actor),
            critic_adam: AdamState::new(&critic.net, config.lr_critic),
            memory: ReplayMemory::new(config.window, config.batch_size)?,
            noise: OuNoise::new(config.theta_eps, config.sigma_eps),
            actor,
            critic,
            norm,
            market,
            config,
            rng,
            episodes_done: 0,
            updates_done: 0,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn market(&self) -> &MarketConfig {
        &self.market
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.norm
    }

    pub fn actor(&self) -> &ActorNet {
        &self.actor
    }

    pub fn critic(&self) -> &CriticNet {
        &self.critic
    }

    pub fn target_actor(&self) -> &ActorNet {
        &self.target_actor
    }

    pub fn target_critic(&self) -> &CriticNet {
        &self.target_critic
    }

    pub fn memory(&self) -> &ReplayMemory {
        &self.memory
    }

    pub fn episodes_done(&self) -> u64 {
        self.episodes_done
    }

    pub fn updates_done(&self) -> u64 {
        self.updates_done
    }

    pub fn set_actor(&mut self, actor: ActorNet) -> Result<()> {
        if actor.net.sizes() != self.actor.net.sizes() {
            return Err(Error::Shape("actor architecture mismatch".into()));
        }
        self.actor = actor;
        Ok(())
    }

    pub fn set_critic(&mut self, critic: CriticNet) -> Result<()> {
        if critic.net.sizes() != self.critic.net.sizes() {
            return Err(Error::Shape("critic architecture mismatch".into()));
        }
        self.critic = critic;
        Ok(())
    }

    /// Copies the main networks into the targets.
    pub fn sync_targets(&mut self) {
        self.target_actor = self.actor.clone();
        self.target_critic = self.critic.clone();
    }

    pub fn set_kernel(&mut self, kernel: DecayKernel) -> Result<()> {
        kernel.validate()?;
        self.market.kernel = kernel;
        Ok(())
    }

    /// Exploration settings for a continued (online) run.
    pub fn set_exploration(&mut self, epsilon: f64, sigma_eps: f64) -> Result<()> {
        let mut config = self.config.clone();
        config.epsilon = epsilon;
        config.sigma_eps = sigma_eps;
        config.validate()?;
        self.noise = OuNoise::new(config.theta_eps, config.sigma_eps);
        self.config = config;
        Ok(())
    }

    pub fn set_eval_every(&mut self, eval_every: usize) -> Result<()> {
        if eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        self.config.eval_every = eval_every;
        Ok(())
    }

    /// One critic, one actor and one target-network update from a sampled
    /// batch. Returns the critic loss.
    pub fn update(&mut self) -> Result<f64> {
        let batch = self.memory.sample_batch(&mut self.rng)?;
        let targets = batch_targets(
            &batch,
            &self.target_actor,
            &self.target_critic,
            &self.norm,
            self.config.q_mode,
        )?;
        let loss = critic_update(
            &mut self.critic,
            &self.norm,
            &batch,
            &targets,
            &mut self.critic_adam,
        )?;
        actor_update(
            &mut self.actor,
            &self.critic,
            &self.norm,
            &batch,
            &mut self.actor_adam,
        )?;
        polyak_update(
            &mut self.target_critic.net,
            &self.critic.net,
            self.config.blend(self.config.tau_critic),
        )?;
        polyak_update(
            &mut self.target_actor.net,
            &self.actor.net,
            self.config.blend(self.config.tau_actor),
        )?;
        self.updates_done += 1;
        Ok(loss)
    }

    pub fn run_episode(&mut self) -> Result<EpisodeOutcome> {
        let seed: u64 = self.rng.random();
        let mut env = MarketEnv::new(self.market.clone(), seed)?;
        let mut state = env.reset(seed);
        self.noise.reset();
        let n_steps = self.market.n_steps;
        let mut staged = Vec::with_capacity(self.market.n_trades());
        let mut updates = 0;
        let mut loss_sum = 0.0;
        loop {
            let projected = project(&self.market, &state);
            let action = select_action(
                &self.actor,
                &self.norm,
                &projected,
                n_steps,
                &mut self.noise,
                &mut self.rng,
                self.config.epsilon,
            )?;
            let step = env.step(&state, action)?;
            staged.push(TransitionRecord {
                state,
                action,
                reward: step.reward,
                next_state: step.next_state.clone(),
                done: step.done,
            });
            if self.memory.ready() {
                loss_sum += self.update()?;
                updates += 1;
            }
            if step.done {
                break;
            }
            state = step.next_state;
        }
        let executed_reward = staged.iter().map(|r| r.reward).sum();
        let trades = staged.iter().map(|r| r.action).collect();
        let count = staged.len();
        let early = liquidated_early(
            &staged,
            n_steps,
            EARLY_LIQUIDATION_FRACTION * self.market.x0,
        );
        let committed = self.memory.commit_episode(staged, early);
        self.episodes_done += 1;
        Ok(EpisodeOutcome {
            executed_reward,
            trades,
            staged: count,
            committed,
            updates,
            mean_critic_loss: (updates > 0).then(|| loss_sum / updates as f64),
        })
    }

    pub fn greedy(&self) -> Result<GreedyResult> {
        greedy_rollout(&self.actor, &self.norm, &self.market)
    }

    /// Runs `episodes` episodes, evaluating the greedy policy every
    /// `eval_every` episodes and after the last one.
    pub fn train(&mut self, episodes: usize, sink: &mut dyn MetricsSink) -> Result<()> {
        let oracle = oracle_reward(&self.market)?;
        let start = std::time::Instant::now();
        for h in 0..episodes {
            let evaluate = (h + 1) % self.config.eval_every == 0 || h + 1 == episodes;
            let row = self.episode_row(h, evaluate, oracle, start)?;
            sink.record(&row)?;
        }
        Ok(())
    }

    /// Continued training while the kernel decay rate follows `schedule`.
    /// Every episode is evaluated greedily against the oracle of the kernel
    /// in force during that episode.
    pub fn online_train(
        &mut self,
        schedule: RhoSchedule,
        episodes: usize,
        sink: &mut dyn MetricsSink,
    ) -> Result<()> {
        let base = self.market.kernel;
        self.config.eval_every = 1;
        let start = std::time::Instant::now();
        let mut cached: Option<(f64, f64)> = None;
        for h in 0..episodes {
            let rho = schedule.rho_at(h, episodes);
            self.set_kernel(DecayKernel { rho, ..base })?;
            let oracle = match cached {
                Some((r, v)) if r == rho => v,
                _ => {
                    let v = oracle_reward(&self.market)?;
                    cached = Some((rho, v));
                    v
                }
            };
            let row = self.episode_row(h, true, oracle, start)?;
            sink.record(&row)?;
        }
        Ok(())
    }

    fn episode_row(
        &mut self,
        episode: usize,
        evaluate: bool,
        oracle: f64,
        start: std::time::Instant,
    ) -> Result<MetricsRow> {
        let outcome = self.run_episode()?;
        let greedy = if evaluate {
            Some(self.greedy()?.reward)
        } else {
            None
        };
        Ok(MetricsRow {
            episode,
            executed_reward: outcome.executed_reward,
            greedy_reward: greedy,
            oracle_reward: oracle,
            gap_bps: greedy.map(|g| gap_bps(oracle, g)),
            rho: self.market.kernel.rho,
            epsilon: self.config.epsilon,
            committed: outcome.committed,
            updates: outcome.updates,
            critic_loss: outcome.mean_critic_loss,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let checkpoint = CheckpointRef {
            format: CHECKPOINT_FORMAT,
            version: CHECKPOINT_VERSION,
            config: &self.config,
            market: &self.market,
            normalizer: &self.norm,
            actor: &self.actor,
            critic: &self.critic,
            target_actor: &self.target_actor,
            target_critic: &self.target_critic,
            actor_adam: &self.actor_adam,
            critic_adam: &self.critic_adam,
            noise: &self.noise,
            rng: &self.rng,
            episodes_done: self.episodes_done,
            updates_done: self.updates_done,
        };
        let file = BufWriter::new(File::create(dir.join(CHECKPOINT_FILE))?);
        serde_json::to_writer(file, &checkpoint)?;
        let memory = BufWriter::new(File::create(dir.join(MEMORY_FILE))?);
        self.memory.write_to(memory)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let file = File::open(dir.join(CHECKPOINT_FILE))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.display())))?;
        let c: Checkpoint = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                c.format, c.version
            )));
        }
        let memory_file = File::open(dir.join(MEMORY_FILE))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.display())))?;
        let memory = ReplayMemory::read_from(BufReader::new(memory_file))?;
        Ok(Self {
            config: c.config,
            market: c.market,
            norm: c.normalizer,
            actor: c.actor,
            critic: c.critic,
            target_actor: c.target_actor,
            target_critic: c.target_critic,
            actor_adam: c.actor_adam,
            critic_adam: c.critic_adam,
            memory,
            noise: c.noise,
            rng: c.rng,
            episodes_done: c.episodes_done,
            updates_done: c.updates_done,
        })
    }
}

fn batch_targets(
    batch: &[&TransitionRecord],
    target_actor: &ActorNet,
    target_critic: &CriticNet,
    norm: &Normalizer,
    q_mode: QMode,
) -> Result<Vec<f64>> {
    let next_states: Vec<&MarketState> = batch.iter().map(|r| &r.next_state).collect();
    let raw = target_actor
        .net
        .predict(norm.actor_batch(next_states.iter().copied()).view())?;
    let next_actions: Vec<f64> = next_states
        .iter()
        .zip(raw.column(0))
        .map(|(s, &u)| {
            if s.step_index + 1 >= norm.n_trades {
                -s.inventory
            } else {
                -s.inventory * sigmoid(u)
            }
        })
        .collect();
    let q_next = target_critic.net.predict(
        norm.critic_batch(next_states.iter().copied(), &next_actions)
            .view(),
    )?;
    Ok(batch
        .iter()
        .zip(q_next.index_axis(Axis(1), 0))
        .map(|(r, &q)| {
            let cash = match q_mode {
                QMode::Auxiliary => r.action * norm.p0,
                QMode::Standard => 0.0,
            };
            r.reward + cash + if r.done { 0.0 } else { q }
        })
        .collect())
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const MEMORY_FILE: &str = "memory.bin";
const CHECKPOINT_FORMAT: &str = "optexec-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize)]
struct CheckpointRef<'a> {
    format: &'a str,
    version: u32,
    config: &'a TrainerConfig,
    market: &'a MarketConfig,
    normalizer: &'a Normalizer,
    actor: &'a ActorNet,
    critic: &'a CriticNet,
    target_actor: &'a ActorNet,
    target_critic: &'a CriticNet,
    actor_adam: &'a AdamState,
    critic_adam: &'a AdamState,
    noise: &'a OuNoise,
    rng: &'a ChaCha8Rng,
    episodes_done: u64,
    updates_done: u64,
}

#[derive(Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: TrainerConfig,
    market: MarketConfig,
    normalizer: Normalizer,
    actor: ActorNet,
    critic: CriticNet,
    target_actor: ActorNet,
    target_critic: CriticNet,
    actor_adam: AdamState,
    critic_adam: AdamState,
    noise: OuNoise,
    rng: ChaCha8Rng,
    episodes_done: u64,
    updates_done: u64,
}
