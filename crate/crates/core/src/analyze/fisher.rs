//! Fisher's exact test of independence, two-sided by the probability-mass
//! criterion: the p-value sums the probabilities of all tables with the
//! observed margins that are no more probable than the observed table.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

/// Relative slack when comparing a table's probability with the observed one.
pub const RELATIVE_TOLERANCE: f64 = 1e-12;
/// Largest number of tables enumerated before switching to Monte Carlo.
pub const DEFAULT_BUDGET: u64 = 5_000_000;
pub const DEFAULT_SAMPLES: u64 = 200_000;
pub const DEFAULT_MC_SEED: u64 = 0x5EED_F15E;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FisherError {
    #[error("negative count {value} at row {row}, column {col}")]
    NegativeCount { row: usize, col: usize, value: i64 },
    #[error("table has no observations")]
    AllZero,
    #[error("table must be at least 2x2 and rectangular")]
    BadShape,
}

/// Rows and columns of non-negative counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ContingencyTable {
    counts: Vec<Vec<u64>>,
}

impl ContingencyTable {
    pub fn new(rows: Vec<Vec<i64>>) -> Result<ContingencyTable, FisherError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.len() < 2 || cols < 2 || rows.iter().any(|r| r.len() != cols) {
            return Err(FisherError::BadShape);
        }
        let mut counts = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            let mut row = Vec::with_capacity(cols);
            for (j, &v) in r.iter().enumerate() {
                if v < 0 {
                    return Err(FisherError::NegativeCount { row: i, col: j, value: v });
                }
                row.push(v as u64);
            }
            counts.push(row);
        }
        if counts.iter().flatten().all(|&v| v == 0) {
            return Err(FisherError::AllZero);
        }
        Ok(ContingencyTable { counts })
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.counts[0].len())
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// The table without all-zero rows and columns, which carry no
    /// information under fixed margins.
    fn trimmed(&self) -> Vec<Vec<u64>> {
        let cols = self.col_sums();
        self.counts
            .iter()
            .filter(|r| r.iter().any(|&v| v > 0))
            .map(|r| {
                r.iter()
                    .zip(&cols)
                    .filter(|(_, &c)| c > 0)
                    .map(|(&v, _)| v)
                    .collect()
            })
            .collect()
    }
}

/// `ln(k!)` for `k = 0..=n`, as cumulative sums of logarithms.
fn log_factorials(n: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n as usize + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for k in 1..=n {
        acc += (k as f64).ln();
        out.push(acc);
    }
    out
}

/// Combines included and excluded probability mass (both relative to the
/// observed table) into a p-value in (0, 1].
fn p_from_masses(included: f64, excluded: f64) -> f64 {
    if excluded == 0.0 {
        1.0
    } else {
        (included / (included + excluded)).min(1.0)
    }
}

/// Two-sided p-value of a 2x2 table.
pub fn fisher_exact_2x2(table: [[i64; 2]; 2]) -> Result<f64, FisherError> {
    let t = ContingencyTable::new(table.iter().map(|r| r.to_vec()).collect())?;
    let [r0, r1] = [t.row_sums()[0], t.row_sums()[1]];
    let [c0, c1] = [t.col_sums()[0], t.col_sums()[1]];
    let n = t.total();
    let lf = log_factorials(n);
    let log_p = |a: u64| {
        let (b, c) = (r0 - a, c0 - a);
        let d = r1 - c;
        -(lf[a as usize] + lf[b as usize] + lf[c as usize] + lf[d as usize])
    };
    let lo = r0.saturating_sub(c1);
    let hi = r0.min(c0);
    let observed = log_p(t.counts()[0][0]);
    let cutoff = RELATIVE_TOLERANCE.ln_1p();
    let (mut included, mut excluded) = (0.0, 0.0);
    for a in lo..=hi {
        let rel = log_p(a) - observed;
        if rel <= cutoff {
            included += rel.exp();
        } else {
            excluded += rel.exp();
        }
    }
    Ok(p_from_masses(included, excluded))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum FisherMethod {
    Exact { tables: u64 },
    MonteCarlo { samples: u64, seed: u64, std_error: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FisherResult {
    pub p_value: f64,
    #[serde(flatten)]
    pub method: FisherMethod,
}

/// Exact test on an r x c table when at most `budget` tables share its
/// margins, otherwise a Monte Carlo estimate with default sample count and
/// seed.
pub fn fisher_exact_rxc(table: &ContingencyTable, budget: u64) -> FisherResult {
    fisher_exact_rxc_with(table, budget, DEFAULT_SAMPLES, DEFAULT_MC_SEED)
}

pub fn fisher_exact_rxc_with(table: &ContingencyTable, budget: u64, samples: u64, seed: u64) -> FisherResult {
    let cells = table.trimmed();
    if cells.len() < 2 || cells[0].len() < 2 {
        return FisherResult {
            p_value: 1.0,
            method: FisherMethod::Exact { tables: 1 },
        };
    }
    let rows: Vec<u64> = cells.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<u64> = (0..cells[0].len()).map(|j| cells.iter().map(|r| r[j]).sum()).collect();
    let lf = log_factorials(rows.iter().sum());
    let cell_term = |t: &[Vec<u64>]| -> f64 { t.iter().flatten().map(|&v| lf[v as usize]).sum() };
    // Only the cell factorials vary between tables with fixed margins.
    let observed = -cell_term(&cells);
    let cutoff = observed + RELATIVE_TOLERANCE.ln_1p();
    let mut e = Enumeration {
        lf: &lf,
        rows: &rows,
        observed,
        cutoff,
        budget,
        tables: 0,
        included: 0.0,
        excluded: 0.0,
    };
    let mut remaining = cols.clone();
    if e.walk(0, &mut remaining, 0.0) {
        return FisherResult {
            p_value: p_from_masses(e.included, e.excluded),
            method: FisherMethod::Exact { tables: e.tables },
        };
    }
    monte_carlo(&rows, &cols, &lf, cutoff, samples.max(1), seed)
}

struct Enumeration<'a> {
    lf: &'a [f64],
    rows: &'a [u64],
    observed: f64,
    cutoff: f64,
    budget: u64,
    tables: u64,
    included: f64,
    excluded: f64,
}

impl Enumeration<'_> {
    /// Fills rows from `row` on. Returns false once the budget is exceeded.
    fn walk(&mut self, row: usize, cols: &mut [u64], acc: f64) -> bool {
        if row + 1 == self.rows.len() {
            self.tables += 1;
            if self.tables > self.budget {
                return false;
            }
            let log_p = acc - cols.iter().map(|&v| self.lf[v as usize]).sum::<f64>();
            let rel = (log_p - self.observed).exp();
            if log_p <= self.cutoff {
                self.included += rel;
            } else {
                self.excluded += rel;
            }
            return true;
        }
        self.fill(row, 0, self.rows[row], cols, acc)
    }

    fn fill(&mut self, row: usize, col: usize, left: u64, cols: &mut [u64], acc: f64) -> bool {
        if col + 1 == cols.len() {
            if left > cols[col] {
                return true;
            }
            cols[col] -= left;
            let ok = self.walk(row + 1, cols, acc - self.lf[left as usize]);
            cols[col] += left;
            return ok;
        }
        let after: u64 = cols[col + 1..].iter().sum();
        let lo = left.saturating_sub(after);
        let hi = left.min(cols[col]);
        for v in lo..=hi {
            cols[col] -= v;
            let ok = self.fill(row, col + 1, left - v, cols, acc - self.lf[v as usize]);
            cols[col] += v;
            if !ok {
                return false;
            }
        }
        true
    }
}

/// Draws tables with the given margins uniformly over permutations of the
/// column labels and counts those no more probable than the observed one.
fn monte_carlo(rows: &[u64], cols: &[u64], lf: &[f64], cutoff: f64, samples: u64, seed: u64) -> FisherResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = cols
        .iter()
        .enumerate()
        .flat_map(|(j, &c)| std::iter::repeat_n(j, c as usize))
        .collect();
    let mut hits = 0u64;
    let mut cell = vec![0u64; cols.len()];
    for _ in 0..samples {
        labels.shuffle(&mut rng);
        let mut log_p = 0.0;
        let mut start = 0;
        for &r in rows {
            cell.iter_mut().for_each(|c| *c = 0);
            for &j in &labels[start..start + r as usize] {
                cell[j] += 1;
            }
            start += r as usize;
            log_p -= cell.iter().map(|&v| lf[v as usize]).sum::<f64>();
        }
        if log_p <= cutoff {
            hits += 1;
        }
    }
    let p = (hits + 1) as f64 / (samples + 1) as f64;
    FisherResult {
        p_value: p,
        method: FisherMethod::MonteCarlo {
            samples,
            seed,
            std_error: (p * (1.0 - p) / samples as f64).sqrt(),
        },
    }
}
