//! Exploration noise and replay memory.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{MarketState, TransitionRecord};

/// Ornstein-Uhlenbeck noise discretised with unit step and zero mean:
/// `value <- value + theta * (0 - value) + sigma * Z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuNoise {
    pub theta: f64,
    pub sigma: f64,
    value: f64,
    count: u64,
}

impl OuNoise {
    pub fn new(theta: f64, sigma: f64) -> Self {
        Self {
            theta,
            sigma,
            value: 0.0,
            count: 0,
        }
    }

    pub fn reset(&mut self) {
        self.value = 0.0;
        self.count = 0;
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn set_value(&mut self, value: f64) {
        self.value = value;
    }

    /// Samples drawn since the last reset.
    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.value += self.theta * (0.0 - self.value) + self.sigma * z;
        self.count += 1;
        self.value
    }

    /// Variance of the stationary distribution, `sigma^2 / (theta (2 - theta))`.
    pub fn stationary_variance(&self) -> f64 {
        self.sigma * self.sigma / (self.theta * (2.0 - self.theta))
    }
}

/// Append-only transition store. Sampling only sees the most recent
/// `window` records and is refused until that many exist.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayMemory {
    records: Vec<TransitionRecord>,
    window: usize,
    batch_size: usize,
}

impl ReplayMemory {
    pub fn new(window: usize, batch_size: usize) -> Result<Self> {
        if window == 0 || batch_size == 0 {
            return Err(Error::Config(
                "replay window and batch size must be positive".into(),
            ));
        }
        Ok(Self {
            records: Vec::new(),
            window,
            batch_size,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn set_window(&mut self, window: usize) -> Result<()> {
        if window == 0 {
            return Err(Error::Config("replay window must be positive".into()));
        }
        self.window = window;
        Ok(())
    }

    pub fn set_batch_size(&mut self, batch_size: usize) -> Result<()> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        self.batch_size = batch_size;
        Ok(())
    }

    pub fn records(&self) -> &[TransitionRecord] {
        &self.records
    }

    pub fn ready(&self) -> bool {
        self.records.len() >= self.window
    }

    /// The sampleable tail.
    pub fn window_records(&self) -> &[TransitionRecord] {
        let start = self.records.len().saturating_sub(self.window);
        &self.records[start..]
    }

    /// Appends a finished episode unless it liquidated early. Returns whether
    /// the episode was kept.
    pub fn commit_episode(
        &mut self,
        staged: Vec<TransitionRecord>,
        early_liquidation: bool,
    ) -> bool {
        if early_liquidation {
            return false;
        }
        self.records.extend(staged);
        true
    }

    /// `batch_size` records drawn uniformly with replacement from the window.
    pub fn sample_batch<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<&TransitionRecord>> {
        if !self.ready() {
            return Err(Error::InsufficientMemory {
                have: self.records.len(),
                need: self.window,
            });
        }
        let window = self.window_records();
        Ok((0..self.batch_size)
            .map(|_| &window[rng.random_range(0..window.len())])
            .collect())
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MEMORY_MAGIC)?;
        out.write_all(&MEMORY_VERSION.to_le_bytes())?;
        out.write_all(&(self.window as u64).to_le_bytes())?;
        out.write_all(&(self.batch_size as u64).to_le_bytes())?;
        out.write_all(&(self.records.len() as u64).to_le_bytes())?;
        for r in &self.records {
            write_state(&mut out, &r.state)?;
            out.write_all(&r.action.to_le_bytes())?;
            out.write_all(&r.reward.to_le_bytes())?;
            write_state(&mut out, &r.next_state)?;
            out.write_all(&[r.done as u8])?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MEMORY_MAGIC {
            return Err(Error::Checkpoint("not a replay memory file".into()));
        }
        let version = read_u32(&mut input)?;
        if version != MEMORY_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported replay memory version {version}"
            )));
        }
        let window = read_u64(&mut input)? as usize;
        let batch_size = read_u64(&mut input)? as usize;
        let count = read_u64(&mut input)? as usize;
        let mut memory = Self::new(window, batch_size)?;
        memory.records.reserve(count);
        for _ in 0..count {
            let state = read_state(&mut input)?;
            let action = read_f64(&mut input)?;
            let reward = read_f64(&mut input)?;
            let next_state = read_state(&mut input)?;
            let mut done = [0u8; 1];
            input.read_exact(&mut done)?;
            memory.records.push(TransitionRecord {
                state,
                action,
                reward,
                next_state,
                done: done[0] != 0,
            });
        }
        Ok(memory)
    }
}

/// True when inventory (numerically) vanished before the final trading time.
pub fn liquidated_early(staged: &[TransitionRecord], n_steps: usize, threshold: f64) -> bool {
    staged
        .iter()
        .any(|r| r.next_state.step_index <= n_steps && r.next_state.inventory < threshold)
}

const MEMORY_MAGIC: &[u8; 4] = b"OXRM";
const MEMORY_VERSION: u32 = 1;

fn write_state<W: Write>(out: &mut W, s: &MarketState) -> Result<()> {
    out.write_all(&(s.step_index as u32).to_le_bytes())?;
    out.write_all(&s.inventory.to_le_bytes())?;
    out.write_all(&s.exec_price.to_le_bytes())?;
    out.write_all(&s.unaffected_price.to_le_bytes())?;
    out.write_all(&(s.past_trades.len() as u32).to_le_bytes())?;
    for t in &s.past_trades {
        out.write_all(&t.to_le_bytes())?;
    }
    Ok(())
}

fn read_state<R: Read>(input: &mut R) -> Result<MarketState> {
    let step_index = read_u32(input)? as usize;
    let inventory = read_f64(input)?;
    let exec_price = read_f64(input)?;
    let unaffected_price = read_f64(input)?;
    let n = read_u32(input)? as usize;
    let past_trades = (0..n)
        .map(|_| read_f64(input))
        .collect::<Result<Vec<_>>>()?;
    Ok(MarketState {
        step_index,
        inventory,
        past_trades,
        exec_price,
        unaffected_price,
    })
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(input: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
