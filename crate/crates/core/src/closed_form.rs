//! Closed-form optimal liquidation under transient impact.
//!
//! For a deterministic schedule `xi` the expected revenue is
//! `p0 * x0 - xi' M xi / 2` with `M_ij = G(|t_i - t_j|)`, and the unique
//! maximiser over schedules summing to `-x0` is `-x0 * M^-1 1 / (1' M^-1 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::DecayKernel;

/// Relative pivot threshold below which a matrix is reported singular.
const PIVOT_TOL: f64 = 1e-12;

/// Dense symmetric impact matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpactMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl ImpactMatrix {
    pub fn new(kernel: &DecayKernel, grid: &[f64]) -> Result<Self> {
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Domain(
                "time grid must be strictly increasing".into(),
            ));
        }
        let n = grid.len();
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let g = kernel.eval((grid[j] - grid[i]).abs());
                entries[i * n + j] = g;
                entries[j * n + i] = g;
            }
        }
        Ok(Self { n, entries })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.chunks(self.n)
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        self.rows()
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `v' M v`.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        self.mul_vec(v).iter().zip(v).map(|(a, b)| a * b).sum()
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        solve_linear(&self.entries, self.n, rhs)
    }
}

pub fn impact_matrix(kernel: &DecayKernel, grid: &[f64]) -> Result<ImpactMatrix> {
    ImpactMatrix::new(kernel, grid)
}

/// Solves `A x = b` for a dense row-major `n x n` matrix by Gaussian
/// elimination with partial (row) pivoting.
pub fn solve_linear(matrix: &[f64], n: usize, rhs: &[f64]) -> Result<Vec<f64>> {
    if matrix.len() != n * n || rhs.len() != n {
        return Err(Error::Shape(format!(
            "matrix has {} entries and rhs {} for dimension {n}",
            matrix.len(),
            rhs.len()
        )));
    }
    let scale = matrix.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Err(Error::Singular {
            index: 0,
            pivot: 0.0,
        });
    }
    let mut a = matrix.to_vec();
    let mut b = rhs.to_vec();

    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r, &s| a[r * n + col].abs().total_cmp(&a[s * n + col].abs()))
            .expect("non-empty pivot range");
        let pivot = a[pivot_row * n + col];
        if pivot.abs() < PIVOT_TOL * scale {
            return Err(Error::Singular { index: col, pivot });
        }
        if pivot_row != col {
            for k in 0..n {
                a.swap(col * n + k, pivot_row * n + k);
            }
            b.swap(col, pivot_row);
        }
        for row in col + 1..n {
            let factor = a[row * n + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            a[row * n + col] = 0.0;
            for k in col + 1..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
            b[row] -= factor * b[col];
        }
    }

    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| a[row * n + k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row * n + row];
    }
    Ok(x)
}

/// A trade schedule on the grid, negative entries selling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    pub trades: Vec<f64>,
}

impl Strategy {
    pub fn new(trades: Vec<f64>) -> Self {
        Self { trades }
    }

    /// Inventory liquidated by the schedule, `-sum(trades)`.
    pub fn liquidated(&self) -> f64 {
        -self.trades.iter().sum::<f64>()
    }

    pub fn len(&self) -> usize {
        self.trades.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trades.is_empty()
    }
}

pub fn optimal_strategy(kernel: &DecayKernel, grid: &[f64], x0: f64) -> Result<Strategy> {
    if !(x0 > 0.0) {
        return Err(Error::Domain(format!("x0 must be positive, got {x0}")));
    }
    let m = impact_matrix(kernel, grid)?;
    let weights = m.solve(&vec![1.0; m.dim()])?;
    let total: f64 = weights.iter().sum();
    Ok(Strategy::new(
        weights.iter().map(|w| -x0 * w / total).collect(),
    ))
}

/// `p0 * x0 - xi' M xi / 2`, the expected revenue of a deterministic schedule.
pub fn expected_profit(
    kernel: &DecayKernel,
    grid: &[f64],
    strategy: &Strategy,
    p0: f64,
) -> Result<f64> {
    if strategy.len() != grid.len() {
        return Err(Error::Shape(format!(
            "strategy has {} trades for a grid of {}",
            strategy.len(),
            grid.len()
        )));
    }
    let m = impact_matrix(kernel, grid)?;
    Ok(p0 * strategy.liquidated() - 0.5 * m.quad_form(&strategy.trades))
}

pub fn twap_strategy(x0: f64, n_steps: usize) -> Strategy {
    let n = n_steps + 1;
    Strategy::new(vec![-x0 / n as f64; n])
}

pub fn immediate_strategy(x0: f64, n_steps: usize) -> Strategy {
    let mut trades = vec![0.0; n_steps + 1];
    trades[0] = -x0;
    Strategy::new(trades)
}

/// Largest `N` accepted by [`brute_force_optimal`].
pub const BRUTE_FORCE_MAX_STEPS: usize = 3;

const BRUTE_FORCE_POINTS: usize = 21;

/// Minimises `xi' M xi / 2` over `sum(xi) = -x0` by exhaustive grid search
/// over the first `N` trades (the last one closes the position), refining a
/// shrinking box around the incumbent until the grid step is below
/// `resolution / N`.
///
/// Does not use any linear algebra, so it serves as an independent check on
/// [`optimal_strategy`].
pub fn brute_force_optimal(
    kernel: &DecayKernel,
    grid: &[f64],
    x0: f64,
    resolution: f64,
) -> Result<Strategy> {
    let n = grid.len();
    if n < 2 || n - 1 > BRUTE_FORCE_MAX_STEPS {
        return Err(Error::Domain(format!(
            "brute force supports 1..={BRUTE_FORCE_MAX_STEPS} steps, got {}",
            n.saturating_sub(1)
        )));
    }
    if !(resolution > 0.0) {
        return Err(Error::Domain("resolution must be positive".into()));
    }
    let free = n - 1;
    let g = |i: usize, j: usize| kernel.eval((grid[i] - grid[j]).abs());
    let cost = |free_trades: &[f64]| {
        let mut xi = free_trades.to_vec();
        xi.push(-x0 - free_trades.iter().sum::<f64>());
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                total += xi[i] * g(i, j) * xi[j];
            }
        }
        0.5 * total
    };

    let mut center = vec![-x0 / n as f64; free];
    // Start wide enough to include schedules with intermediate buying.
    let mut half_width = 2.0 * x0;
    let target_step = resolution / free as f64;
    let steps = (BRUTE_FORCE_POINTS - 1) as f64;
    let total_points = BRUTE_FORCE_POINTS.pow(free as u32);
    let mut candidate = vec![0.0; free];

    loop {
        let step = 2.0 * half_width / steps;
        let mut best = (f64::INFINITY, center.clone());
        for flat in 0..total_points {
            let mut rest = flat;
            for (d, slot) in candidate.iter_mut().enumerate() {
                let idx = rest % BRUTE_FORCE_POINTS;
                rest /= BRUTE_FORCE_POINTS;
                *slot = center[d] - half_width + idx as f64 * step;
            }
            let c = cost(&candidate);
            if c < best.0 {
                best = (c, candidate.clone());
            }
        }
        center = best.1;
        if step <= target_step {
            break;
        }
        // Keep one grid cell either side of the incumbent.
        half_width = 2.0 * step;
    }

    let mut trades = center;
    trades.push(-x0 - trades.iter().sum::<f64>());
    Ok(Strategy::new(trades))
}
