//! State spaces, transition-matrix estimation and chain simulation.
//!
//! States are stored as zero-based indices (`0..m`). The user-facing
//! labels `1..=m` only appear at the I/O boundary, via
//! [`StateSequence::from_labels`] and [`StateSequence::labels`].

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::substream;

/// Zero-based state index.
pub type State = u8;

/// Log-probability of an impossible path.
pub const LOG_ZERO: f64 = f64::NEG_INFINITY;

/// Tolerance for row sums of user-supplied stochastic matrices.
pub const STOCHASTIC_TOL: f64 = 1e-9;

/// The finite alphabet `{1, ..., m}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StateSpace {
    size: usize,
}

impl StateSpace {
    pub fn new(size: usize) -> Result<Self> {
        if !(2..=u8::MAX as usize).contains(&size) {
            return Err(Error::invalid(format!(
                "state space size must be in 2..=255, got {size}"
            )));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn contains(&self, state: State) -> bool {
        (state as usize) < self.size
    }

    pub fn states(&self) -> impl Iterator<Item = State> {
        (0..self.size).map(|s| s as State)
    }
}

/// A nonempty sequence of states from a known space.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StateSequence {
    states: Vec<State>,
}

impl StateSequence {
    pub fn new(states: Vec<State>, space: StateSpace) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::invalid("state sequence must be nonempty"));
        }
        if let Some(bad) = states.iter().find(|&&s| !space.contains(s)) {
            return Err(Error::invalid(format!(
                "state label {} outside 1..={}",
                *bad as usize + 1,
                space.size()
            )));
        }
        Ok(Self { states })
    }

    /// Builds a sequence from one-based labels.
    pub fn from_labels(labels: &[usize], space: StateSpace) -> Result<Self> {
        let mut states = Vec::with_capacity(labels.len());
        for &label in labels {
            if label == 0 || label > space.size() {
                return Err(Error::invalid(format!(
                    "state label {label} outside 1..={}",
                    space.size()
                )));
            }
            states.push((label - 1) as State);
        }
        Self::new(states, space)
    }

    pub(crate) fn from_vec_unchecked(states: Vec<State>) -> Self {
        debug_assert!(!states.is_empty());
        Self { states }
    }

    pub fn states(&self) -> &[State] {
        &self.states
    }

    pub fn into_states(self) -> Vec<State> {
        self.states
    }

    /// One-based labels.
    pub fn labels(&self) -> Vec<usize> {
        self.states.iter().map(|&s| s as usize + 1).collect()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn first(&self) -> State {
        self.states[0]
    }

    pub fn last(&self) -> State {
        self.states[self.states.len() - 1]
    }
}

impl fmt::Display for StateSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, s) in self.states.iter().enumerate() {
            if k > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}", *s as usize + 1)?;
        }
        Ok(())
    }
}

/// Pairwise transition counts `n[i][j] = #{t : x_t = i, x_{t+1} = j}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionCounts {
    m: usize,
    counts: Vec<u64>,
}

impl TransitionCounts {
    pub fn zeros(m: usize) -> Self {
        Self {
            m,
            counts: vec![0; m * m],
        }
    }

    pub fn from_states(states: &[State], m: usize) -> Self {
        let mut out = Self::zeros(m);
        out.add_path(states);
        out
    }

    /// Adds every consecutive pair of `states`.
    pub fn add_path(&mut self, states: &[State]) {
        for w in states.windows(2) {
            self.counts[w[0] as usize * self.m + w[1] as usize] += 1;
        }
    }

    pub fn get(&self, from: usize, to: usize) -> u64 {
        self.counts[from * self.m + to]
    }

    pub fn row_total(&self, from: usize) -> u64 {
        self.counts[from * self.m..(from + 1) * self.m].iter().sum()
    }

    pub fn size(&self) -> usize {
        self.m
    }
}

/// Row-stochastic `m x m` matrix.
///
/// Estimated matrices carry per-row visit counts; rows never visited are
/// stored as uniform rows and reported by [`TransitionMatrix::is_unvisited`].
/// Matrices supplied directly (e.g. the true simulation matrix) carry no
/// visit counts and every row is treated as defined.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    m: usize,
    probs: Vec<f64>,
    row_visits: Option<Vec<u64>>,
}

impl TransitionMatrix {
    /// Validates and wraps explicit rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        StateSpace::new(m)?;
        let mut probs = Vec::with_capacity(m * m);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != m {
                return Err(Error::invalid(format!(
                    "row {} has {} entries, expected {m}",
                    r + 1,
                    row.len()
                )));
            }
            if let Some(bad) = row.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(Error::invalid(format!(
                    "row {} has entry {bad} outside [0, 1]",
                    r + 1
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::invalid(format!(
                    "row {} sums to {sum}, not 1",
                    r + 1
                )));
            }
            probs.extend(row.iter().map(|p| p / sum));
        }
        Ok(Self {
            m,
            probs,
            row_visits: None,
        })
    }

    /// Maximum-likelihood estimate from transition counts.
    pub fn from_counts(counts: &TransitionCounts) -> Self {
        let m = counts.size();
        let mut probs = vec![0.0; m * m];
        let mut visits = vec![0; m];
        for i in 0..m {
            let total = counts.row_total(i);
            visits[i] = total;
            let row = &mut probs[i * m..(i + 1) * m];
            if total == 0 {
                row.fill(1.0 / m as f64);
            } else {
                for (j, p) in row.iter_mut().enumerate() {
                    *p = counts.get(i, j) as f64 / total as f64;
                }
            }
        }
        Self {
            m,
            probs,
            row_visits: Some(visits),
        }
    }

    pub fn identity(m: usize) -> Result<Self> {
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|i| (0..m).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::from_rows(&rows)
    }

    pub fn size(&self) -> usize {
        self.m
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.probs[from * self.m + to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.probs[from * self.m..(from + 1) * self.m]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.m).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn row_visits(&self) -> Option<&[u64]> {
        self.row_visits.as_deref()
    }

    pub fn is_unvisited(&self, row: usize) -> bool {
        self.row_visits.as_ref().is_some_and(|v| v[row] == 0)
    }

    /// Matrix product `self * other`.
    pub fn multiply(&self, other: &TransitionMatrix) -> Vec<f64> {
        let m = self.m;
        let mut out = vec![0.0; m * m];
        for i in 0..m {
            for k in 0..m {
                let a = self.probs[i * m + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..m {
                    out[i * m + j] += a * other.probs[k * m + j];
                }
            }
        }
        out
    }

    /// `[P, P^2, ..., P^steps]` as dense row-major blocks.
    pub fn powers(&self, steps: usize) -> Vec<Vec<f64>> {
        let m = self.m;
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(steps);
        for k in 0..steps {
            if k == 0 {
                out.push(self.probs.clone());
                continue;
            }
            let prev = &out[k - 1];
            let mut next = vec![0.0; m * m];
            for i in 0..m {
                for l in 0..m {
                    let a = prev[i * m + l];
                    if a == 0.0 {
                        continue;
                    }
                    for j in 0..m {
                        next[i * m + j] += a * self.probs[l * m + j];
                    }
                }
            }
            out.push(next);
        }
        out
    }
}

/// Initial-state distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialDistribution {
    probs: Vec<f64>,
}

impl InitialDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::invalid("initial distribution needs at least 2 states"));
        }
        if probs.iter().any(|p| *p < 0.0 || !p.is_finite()) {
            return Err(Error::invalid("initial distribution has a negative entry"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::invalid(format!(
                "initial distribution sums to {sum}, not 1"
            )));
        }
        Ok(Self {
            probs: probs.into_iter().map(|p| p / sum).collect(),
        })
    }

    pub fn uniform(m: usize) -> Self {
        Self {
            probs: vec![1.0 / m as f64; m],
        }
    }

    pub fn point_mass(m: usize, state: State) -> Self {
        let mut probs = vec![0.0; m];
        probs[state as usize] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn size(&self) -> usize {
        self.probs.len()
    }
}

/// Estimates `P̂` by row-normalized transition counts.
pub fn estimate_transition_matrix(
    seq: &StateSequence,
    space: StateSpace,
) -> Result<TransitionMatrix> {
    if seq.len() < 2 {
        return Err(Error::invalid(
            "transition estimation needs a sequence of length >= 2",
        ));
    }
    Ok(TransitionMatrix::from_counts(&TransitionCounts::from_states(
        seq.states(),
        space.size(),
    )))
}

/// Log-probability of `forecast` continuing from `last_state`.
///
/// Returns [`LOG_ZERO`] as soon as any factor is zero.
pub fn sequence_log_probability(
    forecast: &[State],
    last_state: State,
    p: &TransitionMatrix,
) -> f64 {
    let mut prev = last_state as usize;
    let mut acc = 0.0;
    for &s in forecast {
        let f = p.get(prev, s as usize);
        if f == 0.0 {
            return LOG_ZERO;
        }
        acc += f.ln();
        prev = s as usize;
    }
    acc
}

/// `init * P^steps`, by repeated vector-matrix products.
pub fn matrix_power_distribution(
    init: &InitialDistribution,
    p: &TransitionMatrix,
    steps: usize,
) -> Result<InitialDistribution> {
    let m = p.size();
    if init.size() != m {
        return Err(Error::invalid(format!(
            "initial distribution has {} states, matrix has {m}",
            init.size()
        )));
    }
    let mut cur = init.probs.clone();
    let mut next = vec![0.0; m];
    for _ in 0..steps {
        next.fill(0.0);
        for (i, &w) in cur.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (j, n) in next.iter_mut().enumerate() {
                *n += w * p.get(i, j);
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    let sum: f64 = cur.iter().sum();
    cur.iter_mut().for_each(|x| *x /= sum);
    Ok(InitialDistribution { probs: cur })
}

fn draw_from(probs: &[f64], rng: &mut impl Rng) -> State {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = k;
        }
        acc += p;
        if u < acc {
            return k as State;
        }
    }
    // u landed in the rounding gap above the cumulative sum.
    last_positive as State
}

/// Simulates a chain of `length` states with `rng`.
pub fn simulate_chain_with(
    init: &InitialDistribution,
    p: &TransitionMatrix,
    length: usize,
    rng: &mut impl Rng,
) -> Result<StateSequence> {
    if length == 0 {
        return Err(Error::invalid("chain length must be >= 1"));
    }
    if init.size() != p.size() {
        return Err(Error::invalid("initial distribution and matrix sizes differ"));
    }
    let mut states = Vec::with_capacity(length);
    let mut cur = draw_from(init.probs(), rng);
    states.push(cur);
    for _ in 1..length {
        if p.is_unvisited(cur as usize) {
            return Err(Error::UnvisitedRow {
                state: cur as usize + 1,
            });
        }
        cur = draw_from(p.row(cur as usize), rng);
        states.push(cur);
    }
    Ok(StateSequence::from_vec_unchecked(states))
}

/// Simulates a chain deterministically from `seed`.
pub fn simulate_chain(
    init: &InitialDistribution,
    p: &TransitionMatrix,
    length: usize,
    seed: u64,
) -> Result<StateSequence> {
    simulate_chain_with(init, p, length, &mut substream(seed, &[]))
}

/// The simulation matrix used throughout the study, with its uniform
/// initial distribution.
pub fn conflict_study_chain() -> (TransitionMatrix, InitialDistribution) {
    let p = TransitionMatrix::from_rows(&[
        vec![0.895, 0.105, 0.0, 0.0],
        vec![0.0, 0.0, 0.500, 0.500],
        vec![0.0, 0.0, 0.722, 0.278],
        vec![0.653, 0.347, 0.0, 0.0],
    ])
    .expect("study matrix is stochastic");
    (p, InitialDistribution::uniform(4))
}
