//! Independent checks shared by the integration suites and the acceptance
//! harness. Each returns a short description of what was verified, or the
//! first discrepancy found.
#![allow(dead_code, clippy::needless_range_loop)]

use ndarray::{Array2, ArrayView2};
use optexec::closed_form::{expected_profit, Strategy};
use optexec::ddpg::{actor_gradient, rollout, ActorNet, CriticNet, Normalizer};
use optexec::experiments::Preset;
use optexec::market::{project, step, MarketConfig, MarketEnv, MarketState};
use optexec::neural::{Dense, Mlp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

const H: f64 = 1e-5;
const REL: f64 = 1e-4;
const ABS: f64 = 1e-7;
const KINK: f64 = 1e-6;

/// Plain-loop forward; also returns the smallest |pre-activation| of any
/// hidden unit so callers can stay clear of ReLU kinks.
pub fn naive_forward(layers: &[Dense], x: &[f64]) -> (Vec<f64>, f64) {
    let mut a = x.to_vec();
    let mut closest = f64::INFINITY;
    for (l, layer) in layers.iter().enumerate() {
        let (fan_in, fan_out) = layer.weights.dim();
        let mut z = vec![0.0; fan_out];
        for j in 0..fan_out {
            z[j] = layer.bias[j];
            for i in 0..fan_in {
                z[j] += a[i] * layer.weights[[i, j]];
            }
        }
        if l + 1 < layers.len() {
            for v in &mut z {
                closest = closest.min(v.abs());
                *v = v.max(0.0);
            }
        }
        a = z;
    }
    (a, closest)
}

fn scalar(net: &Mlp, x: &Array2<f64>, og: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for (row, g) in x.rows().into_iter().zip(og.rows()) {
        let (out, _) = naive_forward(net.layers(), row.as_slice().unwrap());
        total += out.iter().zip(g.iter()).map(|(a, b)| a * b).sum::<f64>();
    }
    total
}

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= ABS.max(REL * analytic.abs().max(numeric.abs()))
}

fn flat(grads: &[Dense]) -> Vec<f64> {
    grads
        .iter()
        .flat_map(|g| {
            g.weights
                .iter()
                .chain(g.bias.iter())
                .copied()
                .collect::<Vec<_>>()
        })
        .collect()
}

fn random_net(rng: &mut ChaCha8Rng) -> Mlp {
    let inputs = rng.random_range(1..=5);
    let hidden = rng.random_range(0..=3);
    let mut sizes = vec![inputs];
    for _ in 0..hidden {
        sizes.push(rng.random_range(1..=8));
    }
    sizes.push(rng.random_range(1..=3));
    let mut net = Mlp::xavier(&sizes, rng).unwrap();
    for layer in net.layers_mut() {
        layer
            .bias
            .iter_mut()
            .for_each(|b| *b = rng.random_range(-0.5..0.5));
    }
    net
}

fn safe_batch(net: &Mlp, rng: &mut ChaCha8Rng, rows: usize) -> Array2<f64> {
    let dim = net.input_dim();
    let mut out = Array2::zeros((rows, dim));
    for mut row in out.rows_mut() {
        loop {
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
            if naive_forward(net.layers(), &x).1 > 1e3 * KINK {
                row.assign(&ArrayView2::from_shape((1, dim), &x).unwrap().row(0));
                break;
            }
        }
    }
    out
}

/// Parameter and input gradients of `count` random networks against central
/// differences.
pub fn check_backprop(seed: u64, count: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut compared = 0;
    for case in 0..count {
        let net = random_net(&mut rng);
        let batch = rng.random_range(1..=4);
        let x = safe_batch(&net, &mut rng, batch);
        let og = Array2::from_shape_fn((batch, net.output_dim()), |_| rng.random_range(-1.0..1.0));
        let (_, cache) = net.forward(x.view()).unwrap();
        let (grads, input_grad) = net.backward(&cache, og.view()).unwrap();

        let params = net.params_flat();
        let analytic = flat(&grads);
        if analytic.len() != params.len() {
            return Err(format!(
                "net {case}: gradient length {} for {} params",
                analytic.len(),
                params.len()
            ));
        }
        let mut probe = net.clone();
        for (k, &a) in analytic.iter().enumerate() {
            let mut p = params.clone();
            p[k] += H;
            probe.set_params_flat(&p).unwrap();
            let up = scalar(&probe, &x, &og);
            p[k] -= 2.0 * H;
            probe.set_params_flat(&p).unwrap();
            let down = scalar(&probe, &x, &og);
            let numeric = (up - down) / (2.0 * H);
            if !close(a, numeric) {
                return Err(format!(
                    "net {case} param {k}: backprop {a} vs numeric {numeric}"
                ));
            }
            compared += 1;
        }
        for ((i, j), &a) in input_grad.indexed_iter() {
            let mut xp = x.clone();
            xp[[i, j]] += H;
            let up = scalar(&net, &xp, &og);
            xp[[i, j]] -= 2.0 * H;
            let down = scalar(&net, &xp, &og);
            let numeric = (up - down) / (2.0 * H);
            if !close(a, numeric) {
                return Err(format!(
                    "net {case} input ({i},{j}): backprop {a} vs numeric {numeric}"
                ));
            }
            compared += 1;
        }
    }
    Ok(format!("{count} networks, {compared} partial derivatives"))
}

fn random_states(market: &MarketConfig, rng: &mut ChaCha8Rng, count: usize) -> Vec<MarketState> {
    (0..count)
        .map(|_| {
            let step_index = rng.random_range(0..=market.n_steps);
            let mut inventory = market.x0;
            let past_trades: Vec<f64> = (0..step_index)
                .map(|_| {
                    let t = -inventory * rng.random_range(0.05..0.4);
                    inventory += t;
                    t
                })
                .collect();
            MarketState {
                step_index,
                inventory,
                past_trades,
                exec_price: market.p0,
                unaffected_price: market.p0,
            }
        })
        .collect()
}

/// The actor's objective evaluated through the public networks only.
fn actor_objective(
    actor: &ActorNet,
    critic: &CriticNet,
    norm: &Normalizer,
    market: &MarketConfig,
    states: &[MarketState],
) -> f64 {
    let mut total = 0.0;
    for s in states {
        let p = project(market, s);
        let a = actor.action(norm, &p).unwrap();
        total += critic.value(norm, &p, a).unwrap();
    }
    -total / states.len() as f64
}

/// Actor gradients through the critic's action input against central
/// differences of the composite objective.
pub fn check_actor_composite(seed: u64, count: usize) -> Check {
    let market = MarketConfig {
        n_steps: 4,
        ..MarketConfig::default()
    };
    let norm = Normalizer::from_market(&market);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    let mut compared = 0;
    while checked < count {
        let actor = ActorNet::new(
            &norm,
            rng.random_range(1..=3),
            rng.random_range(2..=8),
            &mut rng,
        )
        .unwrap();
        let mut critic = CriticNet::new(
            &norm,
            rng.random_range(1..=3),
            rng.random_range(2..=8),
            &mut rng,
        )
        .unwrap();
        for layer in critic.net.layers_mut() {
            layer
                .bias
                .iter_mut()
                .for_each(|b| *b = rng.random_range(-0.3..0.3));
        }
        let states = random_states(&market, &mut rng, 3);
        let near_kink = states.iter().any(|s| {
            let p = project(&market, s);
            let a = actor.action(&norm, &p).unwrap();
            naive_forward(actor.net.layers(), &norm.actor_features(&p)).1 < 1e3 * KINK
                || naive_forward(critic.net.layers(), &norm.critic_features(&p, a)).1 < 1e3 * KINK
        });
        if near_kink {
            continue;
        }
        let refs: Vec<&MarketState> = states.iter().collect();
        let (grads, loss) = actor_gradient(&actor, &critic, &norm, &refs).unwrap();
        let base = actor_objective(&actor, &critic, &norm, &market, &states);
        if (loss - base).abs() > 1e-12 * base.abs().max(1.0) {
            return Err(format!("actor {checked}: loss {loss} vs objective {base}"));
        }
        let params = actor.net.params_flat();
        let mut probe = actor.clone();
        for (k, &a) in flat(&grads).iter().enumerate() {
            let mut p = params.clone();
            p[k] += H;
            probe.net.set_params_flat(&p).unwrap();
            let up = actor_objective(&probe, &critic, &norm, &market, &states);
            p[k] -= 2.0 * H;
            probe.net.set_params_flat(&p).unwrap();
            let down = actor_objective(&probe, &critic, &norm, &market, &states);
            let numeric = (up - down) / (2.0 * H);
            if !close(a, numeric) {
                return Err(format!(
                    "actor {checked} param {k}: backprop {a} vs numeric {numeric}"
                ));
            }
            compared += 1;
        }
        checked += 1;
    }
    Ok(format!(
        "{count} actor/critic pairs, {compared} partial derivatives"
    ))
}

pub fn quiet(p: Preset) -> MarketConfig {
    MarketConfig {
        sigma_w: 0.0,
        ..p.config().market_config().unwrap()
    }
}

/// Return-to-go from `state` after `action` and then `actor`, minus the cash
/// value of the inventory held.
pub fn aux_value(
    market: &MarketConfig,
    norm: &Normalizer,
    actor: &ActorNet,
    state: &MarketState,
    action: f64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    let mut s = state.clone();
    let mut a = action;
    loop {
        let out = step(market, &s, a, &mut rng).unwrap();
        total += out.reward;
        if out.done {
            break;
        }
        s = out.next_state;
        a = actor.action(norm, &project(market, &s)).unwrap();
    }
    total - state.inventory * market.p0
}

/// `Q_aux(s, a) = r + a p0 + Q_aux(s', a')` along trajectories of random
/// deterministic policies, with every `Q_aux` computed by its own rollout.
pub fn check_aux_bellman(seed: u64, policies: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    for i in 0..policies {
        let market = quiet(Preset::ALL[i % 4]);
        let norm = Normalizer::from_market(&market);
        let actor = ActorNet::new(&norm, 1 + i % 3, 8, &mut rng).unwrap();
        let records = rollout(&market, 0, |s| actor.action(&norm, s)).unwrap();
        for (n, now) in records.iter().enumerate() {
            let lhs = aux_value(&market, &norm, &actor, &now.state, now.action);
            let tail = match records.get(n + 1) {
                Some(next) => aux_value(&market, &norm, &actor, &next.state, next.action),
                None => 0.0,
            };
            let rhs = now.reward + now.action * market.p0 + tail;
            let rel = (lhs - rhs).abs() / lhs.abs().max(1.0);
            if rel > 1e-9 {
                return Err(format!("policy {i} step {n}: {lhs} vs {rhs}"));
            }
            worst = worst.max(rel);
            pairs += 1;
        }
    }
    Ok(format!(
        "{policies} policies, {pairs} transitions, max rel err {worst:.1e}"
    ))
}

/// Sells a random fraction of the remaining inventory at each step.
pub fn random_schedule(rng: &mut ChaCha8Rng, x0: f64, n_trades: usize) -> Vec<f64> {
    let mut left = x0;
    let mut trades = Vec::with_capacity(n_trades);
    for _ in 0..n_trades - 1 {
        let t = -left * rng.random::<f64>().powi(2);
        left += t;
        trades.push(t);
    }
    trades.push(-left);
    trades
}

/// Noiseless episode rewards of random schedules against `expected_profit`.
pub fn check_noiseless_rewards(seed: u64, count: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for (i, p) in Preset::ALL.iter().cycle().take(count).enumerate() {
        let market = quiet(*p);
        let trades = random_schedule(&mut rng, market.x0, market.n_trades());
        let mut env = MarketEnv::new(market.clone(), 0).unwrap();
        let total: f64 = env.replay(i as u64, &trades).unwrap().iter().sum();
        let analytic = expected_profit(
            &market.kernel,
            &market.grid(),
            &Strategy::new(trades),
            market.p0,
        )
        .unwrap();
        let rel = (total - analytic).abs() / analytic.abs();
        if rel > 1e-9 {
            return Err(format!(
                "schedule {i} ({}): {total} vs {analytic}",
                p.name()
            ));
        }
        worst = worst.max(rel);
    }
    Ok(format!("{count} schedules, max rel err {worst:.1e}"))
}

/// Mean episode reward over `seeds` noisy episodes against the analytic
/// expectation, in standard errors.
pub fn check_monte_carlo(market: &MarketConfig, trades: &[f64], seeds: u64) -> Check {
    let analytic = expected_profit(
        &market.kernel,
        &market.grid(),
        &Strategy::new(trades.to_vec()),
        market.p0,
    )
    .unwrap();
    let mut env = MarketEnv::new(market.clone(), 0).unwrap();
    let totals: Vec<f64> = (0..seeds)
        .map(|seed| env.replay(seed, trades).unwrap().iter().sum())
        .collect();
    let n = totals.len() as f64;
    let mean = totals.iter().sum::<f64>() / n;
    let var = totals.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    let z = (mean - analytic) / se;
    if se > 0.0 && z.abs() <= 3.0 {
        Ok(format!(
            "{seeds} seeds, mean {mean:.9} vs {analytic:.9}, {z:+.2} s.e."
        ))
    } else {
        Err(format!(
            "{seeds} seeds, mean {mean:.9} vs {analytic:.9}, {z:+.2} s.e. (s.e. {se:.2e})"
        ))
    }
}
