//! Experiment configuration, presets and runners behind the CLI.
//!
//! Configs are TOML with four sections (`market`, `trainer`, `experiment`,
//! `online`). Time series go to CSV, summaries to JSON. See the README for
//! the full output schema.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::closed_form::{
    expected_profit, immediate_strategy, optimal_strategy, twap_strategy, Strategy,
};
use crate::ddpg::{
    gap_bps, greedy_rollout, oracle_reward, MetricsRow, MetricsSink, QMode, RhoSchedule, Trainer,
    TrainerConfig,
};
use crate::error::{Error, Result};
use crate::market::{DecayKernel, KernelFamily, MarketConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    pub p0: f64,
    pub sigma_w: f64,
    pub x0: f64,
    pub n_steps: usize,
    pub dt: f64,
    pub kernel: KernelFamily,
    pub kappa: f64,
    pub rho: f64,
}

impl Default for MarketSection {
    fn default() -> Self {
        Self::from_market(&MarketConfig::default())
    }
}

impl MarketSection {
    pub fn from_market(m: &MarketConfig) -> Self {
        Self {
            p0: m.p0,
            sigma_w: m.sigma_w,
            x0: m.x0,
            n_steps: m.n_steps,
            dt: m.dt,
            kernel: m.kernel.family,
            kappa: m.kernel.kappa,
            rho: m.kernel.rho,
        }
    }

    pub fn to_market(&self) -> Result<MarketConfig> {
        let market = MarketConfig {
            p0: self.p0,
            sigma_w: self.sigma_w,
            x0: self.x0,
            n_steps: self.n_steps,
            dt: self.dt,
            kernel: DecayKernel::new(self.kernel, self.kappa, self.rho)?,
        };
        market.validate()?;
        Ok(market)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Oracle,
    Baselines,
    Train,
    Ablation,
    Online,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Independent runs executed concurrently.
    pub workers: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            mode: Mode::Train,
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("runs"),
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineSection {
    #[serde(rename = "H")]
    pub episodes: usize,
    pub rho_start: f64,
    pub rho_end: f64,
    pub epsilon: f64,
    pub sigma_eps: f64,
    /// Leading episodes excluded from tracking statistics.
    pub warmup: usize,
    /// Gap threshold used by the tracking statistic, in bps.
    pub gap_threshold_bps: f64,
}

impl Default for OnlineSection {
    fn default() -> Self {
        Self {
            episodes: 100_000,
            rho_start: 1.0,
            rho_end: 0.5,
            epsilon: 0.2,
            sigma_eps: 0.14,
            warmup: 1_000,
            gap_threshold_bps: 300.0,
        }
    }
}

impl OnlineSection {
    pub fn schedule(&self) -> RhoSchedule {
        RhoSchedule {
            rho_start: self.rho_start,
            rho_end: self.rho_end,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub market: MarketSection,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub online: OnlineSection,
}

/// The four kernels of the convergence study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Exponential,
    PowerLaw,
    LinearResilienceSlow,
    LinearResilienceFast,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::Exponential,
        Preset::PowerLaw,
        Preset::LinearResilienceSlow,
        Preset::LinearResilienceFast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Exponential => "exp",
            Preset::PowerLaw => "powerlaw",
            Preset::LinearResilienceSlow => "linres-005",
            Preset::LinearResilienceFast => "linres-05",
        }
    }

    pub fn source(self) -> &'static str {
        match self {
            Preset::Exponential => include_str!("../presets/exp.toml"),
            Preset::PowerLaw => include_str!("../presets/powerlaw.toml"),
            Preset::LinearResilienceSlow => include_str!("../presets/linres-005.toml"),
            Preset::LinearResilienceFast => include_str!("../presets/linres-05.toml"),
        }
    }

    pub fn config(self) -> ExperimentConfig {
        ExperimentConfig::from_toml(self.source()).expect("shipped presets parse")
    }

    pub fn kernel(self) -> DecayKernel {
        let c = self.config();
        DecayKernel {
            family: c.market.kernel,
            kappa: c.market.kappa,
            rho: c.market.rho,
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?}")))
    }
}

const SECTIONS: [&str; 4] = ["market", "trainer", "experiment", "online"];

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.market.to_market()?;
        self.trainer.validate()?;
        if self.experiment.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.experiment.workers == 0 {
            return Err(Error::Config("workers must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.online.epsilon) || !(self.online.sigma_eps >= 0.0) {
            return Err(Error::Config("invalid online exploration settings".into()));
        }
        if !(self.online.rho_start > 0.0 && self.online.rho_end > 0.0) {
            return Err(Error::Config("online decay rates must be positive".into()));
        }
        Ok(())
    }

    pub fn market_config(&self) -> Result<MarketConfig> {
        self.market.to_market()
    }

    /// Applies `key=value` overrides. Keys may be qualified (`online.H`) or
    /// bare, in which case the first section owning the key wins in the
    /// order market, trainer, experiment, online. `tau` sets both target
    /// update rates.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut doc: toml::Table =
            toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let value = parse_value(raw.trim());
            let key = key.trim();
            let targets: Vec<(String, String)> = if key == "tau" || key == "trainer.tau" {
                vec![
                    ("trainer".into(), "tau_critic".into()),
                    ("trainer".into(), "tau_actor".into()),
                ]
            } else if let Some((section, field)) = key.split_once('.') {
                vec![(section.to_string(), field.to_string())]
            } else {
                let section = SECTIONS
                    .iter()
                    .find(|s| {
                        doc.get(**s)
                            .and_then(|t| t.as_table())
                            .is_some_and(|t| t.contains_key(key))
                    })
                    .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
                vec![(section.to_string(), key.to_string())]
            };
            for (section, field) in targets {
                let table = doc
                    .get_mut(&section)
                    .and_then(|t| t.as_table_mut())
                    .ok_or_else(|| Error::Config(format!("unknown config section {section:?}")))?;
                let Some(existing) = table.get(&field) else {
                    return Err(Error::Config(format!(
                        "unknown config key {section}.{field}"
                    )));
                };
                let v = coerce(value.clone(), Some(existing));
                table.insert(field, v);
            }
        }
        let text = toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?;
        *self = Self::from_toml(&text)?;
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Matches the numeric type of the value being replaced so that `p0=50`
/// still lands in a float field.
fn coerce(value: toml::Value, existing: Option<&toml::Value>) -> toml::Value {
    match (existing, value) {
        (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (Some(toml::Value::Integer(_)), toml::Value::Float(f)) if f.fract() == 0.0 => {
            toml::Value::Integer(f as i64)
        }
        (_, v) => v,
    }
}

/// One row of `strategy.csv` for the oracle.
#[derive(Debug, Serialize)]
struct OracleRow {
    k: usize,
    t_k: f64,
    xi_optimal: f64,
    xi_twap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OracleSummary {
    pub kernel: DecayKernel,
    pub optimal_profit: f64,
    pub twap_profit: f64,
    pub immediate_profit: f64,
    pub optimal: Vec<f64>,
}

pub fn oracle_table(market: &MarketConfig) -> Result<OracleSummary> {
    let grid = market.grid();
    let kernel = market.kernel;
    let optimal = optimal_strategy(&kernel, &grid, market.x0).map_err(|e| match e {
        Error::Singular { index, pivot } => Error::Domain(format!(
            "impact matrix for {} kernel (kappa={}, rho={}) is singular at pivot {index} ({pivot:e})",
            kernel.family, kernel.kappa, kernel.rho
        )),
        other => other,
    })?;
    let profit = |s: &Strategy| expected_profit(&kernel, &grid, s, market.p0);
    Ok(OracleSummary {
        kernel,
        optimal_profit: profit(&optimal)?,
        twap_profit: profit(&twap_strategy(market.x0, market.n_steps))?,
        immediate_profit: profit(&immediate_strategy(market.x0, market.n_steps))?,
        optimal: optimal.trades,
    })
}

/// Writes `strategy.csv` and `summary.json` for the closed-form optimum.
pub fn run_oracle(config: &ExperimentConfig, out: &Path) -> Result<OracleSummary> {
    let market = config.market_config()?;
    let summary = oracle_table(&market)?;
    fs::create_dir_all(out)?;
    let twap = twap_strategy(market.x0, market.n_steps);
    let mut w = csv::Writer::from_path(out.join("strategy.csv"))?;
    for (k, (&xi, &tw)) in summary.optimal.iter().zip(&twap.trades).enumerate() {
        w.serialize(OracleRow {
            k,
            t_k: market.time(k),
            xi_optimal: xi,
            xi_twap: tw,
        })?;
    }
    w.flush()?;
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Serialize)]
struct BaselineRow<'a> {
    strategy: &'a str,
    profit: f64,
    gap_bps: f64,
    trades: String,
}

/// Writes `baselines.csv`: profit and oracle gap of the optimal, TWAP and
/// immediate schedules.
pub fn run_baselines(config: &ExperimentConfig, out: &Path) -> Result<OracleSummary> {
    let market = config.market_config()?;
    let summary = oracle_table(&market)?;
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("baselines.csv"))?;
    let twap = twap_strategy(market.x0, market.n_steps).trades;
    let immediate = immediate_strategy(market.x0, market.n_steps).trades;
    for (name, profit, trades) in [
        ("optimal", summary.optimal_profit, &summary.optimal),
        ("twap", summary.twap_profit, &twap),
        ("immediate", summary.immediate_profit, &immediate),
    ] {
        w.serialize(BaselineRow {
            strategy: name,
            profit,
            gap_bps: gap_bps(summary.optimal_profit, profit),
            trades: join(trades),
        })?;
    }
    w.flush()?;
    Ok(summary)
}

fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

/// CSV sink flushed after every row so files stay parseable mid-run.
/// Wall-clock time goes to a separate file to keep `metrics.csv`
/// reproducible.
pub struct CsvMetricsSink {
    metrics: csv::Writer<BufWriter<File>>,
    timing: csv::Writer<BufWriter<File>>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsCsvRow {
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
}

impl From<&MetricsRow> for MetricsCsvRow {
    fn from(r: &MetricsRow) -> Self {
        Self {
            episode: r.episode,
            executed_reward: r.executed_reward,
            greedy_reward: r.greedy_reward,
            oracle_reward: r.oracle_reward,
            gap_bps: r.gap_bps,
            rho: r.rho,
            epsilon: r.epsilon,
            committed: r.committed,
            updates: r.updates,
            critic_loss: r.critic_loss,
        }
    }
}

impl CsvMetricsSink {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let metrics =
            csv::Writer::from_writer(BufWriter::new(File::create(dir.join("metrics.csv"))?));
        let timing =
            csv::Writer::from_writer(BufWriter::new(File::create(dir.join("timing.csv"))?));
        Ok(Self { metrics, timing })
    }
}

#[derive(Serialize)]
struct TimingRow {
    episode: usize,
    wall_ms: f64,
}

impl MetricsSink for CsvMetricsSink {
    fn record(&mut self, row: &MetricsRow) -> Result<()> {
        self.metrics.serialize(MetricsCsvRow::from(row))?;
        self.metrics.flush()?;
        self.timing.serialize(TimingRow {
            episode: row.episode,
            wall_ms: row.wall_ms,
        })?;
        self.timing.flush()?;
        Ok(())
    }
}

/// Writes rows to CSV and keeps them in memory.
struct TeeSink<'a> {
    inner: CsvMetricsSink,
    rows: &'a mut Vec<MetricsRow>,
}

impl MetricsSink for TeeSink<'_> {
    fn record(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.record(row)?;
        self.rows.push(row.clone());
        Ok(())
    }
}

/// Re-bases episode numbers and wall-clock time of a chunk onto the whole run.
struct Shifted<'a> {
    inner: &'a mut dyn MetricsSink,
    episodes: usize,
    started: Instant,
}

impl MetricsSink for Shifted<'_> {
    fn record(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.record(&MetricsRow {
            episode: row.episode + self.episodes,
            wall_ms: self.started.elapsed().as_secs_f64() * 1e3,
            ..row.clone()
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsCsvRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunSummary {
    pub seed: u64,
    pub q_mode: QMode,
    pub episodes: usize,
    pub oracle_reward: f64,
    pub twap_reward: f64,
    pub final_greedy_reward: f64,
    pub final_gap_bps: f64,
    pub best_episode: usize,
    pub best_greedy_reward: f64,
    pub best_gap_bps: f64,
    pub final_strategy: Vec<f64>,
    pub best_strategy: Vec<f64>,
    pub oracle_strategy: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct StrategyRow {
    k: usize,
    t_k: f64,
    xi_agent_final: f64,
    xi_agent_best: f64,
    xi_optimal: f64,
}

/// Trains one agent from scratch and writes `metrics.csv`, `timing.csv`,
/// `strategy.csv`, `summary.json` and a `checkpoint/` directory to `dir`.
pub fn train_single(
    trainer_config: TrainerConfig,
    market: &MarketConfig,
    dir: &Path,
) -> Result<(RunSummary, Trainer)> {
    let episodes = trainer_config.episodes;
    let seed = trainer_config.seed;
    let q_mode = trainer_config.q_mode;
    let mut trainer = Trainer::new(trainer_config, market.clone())?;
    let oracle = oracle_table(market)?;
    let mut rows = Vec::with_capacity(episodes);
    let mut best: Option<(usize, f64, Vec<f64>)> = None;
    {
        let mut sink = TeeSink {
            inner: CsvMetricsSink::create(dir)?,
            rows: &mut rows,
        };
        // train in evaluation-sized chunks so the best schedule can be kept
        let cadence = trainer.config().eval_every;
        let started = Instant::now();
        let mut done = 0;
        while done < episodes {
            let chunk = cadence.min(episodes - done);
            trainer.train(
                chunk,
                &mut Shifted {
                    inner: &mut sink,
                    episodes: done,
                    started,
                },
            )?;
            done += chunk;
            let greedy = trainer.greedy()?;
            if best.as_ref().is_none_or(|(_, b, _)| greedy.reward > *b) {
                best = Some((done - 1, greedy.reward, greedy.strategy.trades));
            }
        }
    }
    let greedy = trainer.greedy()?;
    let (best_episode, best_reward, best_strategy) =
        best.unwrap_or((0, greedy.reward, greedy.strategy.trades.clone()));
    let summary = RunSummary {
        seed,
        q_mode,
        episodes,
        oracle_reward: oracle.optimal_profit,
        twap_reward: oracle.twap_profit,
        final_greedy_reward: greedy.reward,
        final_gap_bps: gap_bps(oracle.optimal_profit, greedy.reward),
        best_episode,
        best_greedy_reward: best_reward,
        best_gap_bps: gap_bps(oracle.optimal_profit, best_reward),
        final_strategy: greedy.strategy.trades.clone(),
        best_strategy,
        oracle_strategy: oracle.optimal.clone(),
    };
    let mut w = csv::Writer::from_path(dir.join("strategy.csv"))?;
    for k in 0..market.n_trades() {
        w.serialize(StrategyRow {
            k,
            t_k: market.time(k),
            xi_agent_final: summary.final_strategy[k],
            xi_agent_best: summary.best_strategy[k],
            xi_optimal: summary.oracle_strategy[k],
        })?;
    }
    w.flush()?;
    write_json(&dir.join("summary.json"), &summary)?;
    trainer.save(&dir.join("checkpoint"))?;
    Ok((summary, trainer))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConvergenceSummary {
    pub runs: Vec<RunSummary>,
    pub median_final_gap_bps: f64,
    pub median_final_greedy_reward: f64,
    pub twap_reward: f64,
    pub oracle_reward: f64,
}

impl ConvergenceSummary {
    fn from_runs(runs: Vec<RunSummary>) -> Self {
        let gaps: Vec<f64> = runs.iter().map(|r| r.final_gap_bps).collect();
        let rewards: Vec<f64> = runs.iter().map(|r| r.final_greedy_reward).collect();
        Self {
            median_final_gap_bps: median(&gaps),
            median_final_greedy_reward: median(&rewards),
            twap_reward: runs[0].twap_reward,
            oracle_reward: runs[0].oracle_reward,
            runs,
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs `jobs` on up to `workers` threads, preserving input order.
fn run_pool<T, F>(jobs: Vec<T>, workers: usize, f: F) -> Result<Vec<RunSummary>>
where
    T: Send,
    F: Fn(T) -> Result<RunSummary> + Sync,
{
    if workers <= 1 || jobs.len() <= 1 {
        return jobs.into_iter().map(&f).collect();
    }
    let mut results: Vec<Option<Result<RunSummary>>> = (0..jobs.len()).map(|_| None).collect();
    let queue = std::sync::Mutex::new(jobs.into_iter().enumerate().collect::<Vec<_>>());
    let slots = std::sync::Mutex::new(&mut results);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let job = queue.lock().expect("queue lock").pop();
                let Some((i, job)) = job else { break };
                let r = f(job);
                slots.lock().expect("slot lock")[i] = Some(r);
            });
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Trains one agent per seed; outputs under `out/seed-<s>/`.
pub fn run_convergence(config: &ExperimentConfig, out: &Path) -> Result<ConvergenceSummary> {
    let market = config.market_config()?;
    let jobs: Vec<u64> = config.experiment.seeds.clone();
    let runs = run_pool(jobs, config.experiment.workers, |seed| {
        let tc = TrainerConfig {
            seed,
            ..config.trainer.clone()
        };
        train_single(tc, &market, &out.join(format!("seed-{seed}"))).map(|(s, _)| s)
    })?;
    let summary = ConvergenceSummary::from_runs(runs);
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AblationSummary {
    pub auxiliary: ConvergenceSummary,
    pub standard: ConvergenceSummary,
}

/// Paired runs differing only in the critic's target form; outputs under
/// `out/seed-<s>/{auxiliary,standard}/`.
pub fn run_ablation(config: &ExperimentConfig, out: &Path) -> Result<AblationSummary> {
    let market = config.market_config()?;
    let mut jobs = Vec::new();
    for &seed in &config.experiment.seeds {
        for mode in [QMode::Auxiliary, QMode::Standard] {
            jobs.push((seed, mode));
        }
    }
    let runs = run_pool(jobs, config.experiment.workers, |(seed, q_mode)| {
        let tc = TrainerConfig {
            seed,
            q_mode,
            ..config.trainer.clone()
        };
        let name = match q_mode {
            QMode::Auxiliary => "auxiliary",
            QMode::Standard => "standard",
        };
        train_single(tc, &market, &out.join(format!("seed-{seed}")).join(name)).map(|(s, _)| s)
    })?;
    let (aux, std): (Vec<_>, Vec<_>) = runs.into_iter().partition(|r| r.q_mode == QMode::Auxiliary);
    let summary = AblationSummary {
        auxiliary: ConvergenceSummary::from_runs(aux),
        standard: ConvergenceSummary::from_runs(std),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OnlineSummary {
    pub episodes: usize,
    pub rho_start: f64,
    pub rho_end: f64,
    pub warmup: usize,
    pub gap_threshold_bps: f64,
    /// Share of post-warmup episodes whose greedy gap is within the
    /// threshold.
    pub within_threshold: f64,
    pub median_gap_bps: f64,
    pub max_gap_bps: f64,
}

/// Continues a trained agent while the decay rate drifts linearly. The
/// checkpoint's kernel family must match the config's.
pub fn run_online(
    config: &ExperimentConfig,
    checkpoint: &Path,
    out: &Path,
) -> Result<OnlineSummary> {
    let market = config.market_config()?;
    let mut trainer = Trainer::load(checkpoint)?;
    if trainer.market().kernel.family != market.kernel.family {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained on a {} kernel, config asks for {}",
            trainer.market().kernel.family,
            market.kernel.family
        )));
    }
    trainer.set_kernel(market.kernel)?;
    trainer.set_exploration(config.online.epsilon, config.online.sigma_eps)?;
    let online = &config.online;
    let mut rows: Vec<MetricsRow> = Vec::with_capacity(online.episodes);
    {
        let mut sink = TeeSink {
            inner: CsvMetricsSink::create(out)?,
            rows: &mut rows,
        };
        trainer.online_train(online.schedule(), online.episodes, &mut sink)?;
    }
    let gaps: Vec<f64> = rows
        .iter()
        .skip(online.warmup)
        .filter_map(|r| r.gap_bps)
        .collect();
    let within = gaps
        .iter()
        .filter(|&&g| g <= online.gap_threshold_bps)
        .count();
    let summary = OnlineSummary {
        episodes: online.episodes,
        rho_start: online.rho_start,
        rho_end: online.rho_end,
        warmup: online.warmup,
        gap_threshold_bps: online.gap_threshold_bps,
        within_threshold: if gaps.is_empty() {
            f64::NAN
        } else {
            within as f64 / gaps.len() as f64
        },
        median_gap_bps: median(&gaps),
        max_gap_bps: gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    write_json(&out.join("summary.json"), &summary)?;
    trainer.save(&out.join("checkpoint"))?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub kernel: DecayKernel,
    pub agent_reward: f64,
    pub oracle_reward: f64,
    pub gap_bps: f64,
    pub agent: Vec<f64>,
    pub optimal: Vec<f64>,
}

/// Greedy evaluation of a checkpoint on the config's market.
pub fn run_eval(checkpoint: &Path, config: &ExperimentConfig, out: &Path) -> Result<EvalReport> {
    let trainer = Trainer::load(checkpoint)?;
    let market = config.market_config()?;
    let greedy = greedy_rollout(trainer.actor(), trainer.normalizer(), &market)?;
    let report = eval_report(&market, greedy.strategy.trades, greedy.reward)?;
    write_eval(&report, &market, out)?;
    Ok(report)
}

pub fn eval_report(
    market: &MarketConfig,
    agent: Vec<f64>,
    agent_reward: f64,
) -> Result<EvalReport> {
    let oracle = oracle_reward(market)?;
    let optimal = optimal_strategy(&market.kernel, &market.grid(), market.x0)?;
    Ok(EvalReport {
        kernel: market.kernel,
        agent_reward,
        oracle_reward: oracle,
        gap_bps: gap_bps(oracle, agent_reward),
        agent,
        optimal: optimal.trades,
    })
}

#[derive(Debug, Serialize)]
struct EvalRow {
    k: usize,
    t_k: f64,
    xi_agent: f64,
    xi_optimal: f64,
    difference: f64,
}

fn write_eval(report: &EvalReport, market: &MarketConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("strategy.csv"))?;
    for (k, (&a, &o)) in report.agent.iter().zip(&report.optimal).enumerate() {
        w.serialize(EvalRow {
            k,
            t_k: market.time(k),
            xi_agent: a,
            xi_optimal: o,
            difference: a - o,
        })?;
    }
    w.flush()?;
    write_json(&out.join("report.json"), report)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}
