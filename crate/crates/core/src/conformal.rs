//! Conformal prediction sets for Markov state-sequences.
//!
//! Every candidate continuation `x ∈ 𝒳^{T₁}` is appended to the calibration
//! sequence; the transition matrix is re-estimated on this augmented
//! sequence, which is then split into i-blocks anchored at its final state.
//! Reordering those blocks leaves the first state and all transition
//! counts unchanged, so under a Markov model the reordered sequences are
//! equally likely. The candidate's p-value is the randomized rank of its
//! own nonconformity score among the scores of the reordered sequences:
//!
//! ```text
//! q̂(x) = (#{π ∈ Π : S(π) > S(id)} + u · #{π ∈ Π : S(π) = S(id)}) / |Π|
//! ```
//!
//! with a single `u ~ U[0, 1]` per candidate. The prediction set at level
//! `1 − α` keeps the candidates with `q̂ > α`.
//!
//! Candidates are scored independently, each on its own RNG substream keyed
//! by its lexicographic index, so the parallel fan-out is bit-for-bit
//! reproducible.

use rand::Rng;
use rayon::prelude::*;

use crate::composition::Composition;
use crate::error::{Error, Result};
use crate::iblocks::decompose_states;
use crate::markov::{State, StateSequence, StateSpace, TransitionCounts, TransitionMatrix};
use crate::rng::substream;

/// Two scores closer than this count as tied.
pub const SCORE_TIE_TOL: f64 = 1e-12;

pub const DEFAULT_MAX_PERMUTATIONS: usize = 5000;
pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

/// How `P(X_{T+j} | X_T)` is read inside the nonconformity score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreMode {
    /// `[P̂]_{X_{T+j-1}, X_{T+j}}`: consecutive one-step transitions.
    #[default]
    OneStep,
    /// `[P̂^j]_{X_T, X_{T+j}}`: every term conditions on the state at `T`.
    JStep,
}

impl std::str::FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one-step" => Ok(ScoreMode::OneStep),
            "j-step" => Ok(ScoreMode::JStep),
            other => Err(Error::invalid(format!(
                "unknown score mode {other:?} (expected one-step or j-step)"
            ))),
        }
    }
}

impl std::fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScoreMode::OneStep => "one-step",
            ScoreMode::JStep => "j-step",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConformalConfig {
    /// Miscoverage level. `0.0` is accepted and keeps every candidate with
    /// `q̂ > 0` (the target-coverage-1 endpoint).
    pub alpha: f64,
    pub horizon: usize,
    pub max_permutations: usize,
    pub score_mode: ScoreMode,
    /// Artificial state appended after the forecast window, if any.
    pub plus_one: Option<State>,
    pub seed: u64,
    pub enumeration_cap: u64,
}

impl ConformalConfig {
    pub fn new(alpha: f64, horizon: usize) -> Self {
        Self {
            alpha,
            horizon,
            max_permutations: DEFAULT_MAX_PERMUTATIONS,
            score_mode: ScoreMode::default(),
            plus_one: None,
            seed: 0,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
        }
    }

    pub fn validate(&self, space: StateSpace) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!(
                "alpha must be in [0, 1), got {}",
                self.alpha
            )));
        }
        if self.horizon == 0 {
            return Err(Error::invalid("horizon must be >= 1"));
        }
        if self.max_permutations == 0 {
            return Err(Error::invalid("max_permutations must be >= 1"));
        }
        if let Some(s) = self.plus_one {
            if !space.contains(s) {
                return Err(Error::invalid(format!(
                    "plus-one state {} outside the state space",
                    s as usize + 1
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub forecast: StateSequence,
    pub p_value: f64,
    pub identity_score: f64,
    pub num_permutations: usize,
    pub exceed_count: usize,
    pub tie_count: usize,
    /// The tie-breaking uniform draw.
    pub u: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConformalPredictionSet {
    pub alpha: f64,
    /// Candidates with `q̂ > α`, in lexicographic order.
    pub candidates: Vec<ScoredCandidate>,
    pub universe_size: u64,
}

impl ConformalPredictionSet {
    /// Thresholds already-scored candidates at `alpha`.
    pub fn from_scored(scored: &[ScoredCandidate], alpha: f64, universe_size: u64) -> Self {
        Self {
            alpha,
            candidates: scored
                .iter()
                .filter(|c| c.p_value > alpha)
                .cloned()
                .collect(),
            universe_size,
        }
    }

    pub fn level(&self) -> f64 {
        1.0 - self.alpha
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn contains(&self, forecast: &[State]) -> bool {
        self.candidates
            .iter()
            .any(|c| c.forecast.states() == forecast)
    }
}

/// Per-window term lookup shared by all permutations of one candidate.
struct WindowScorer<'a> {
    p: &'a TransitionMatrix,
    mode: ScoreMode,
    /// `P̂^j` for `j = 1..=T₁` (j-step mode only).
    powers: Vec<Vec<f64>>,
}

impl<'a> WindowScorer<'a> {
    fn new(p: &'a TransitionMatrix, mode: ScoreMode, horizon: usize) -> Self {
        let powers = match mode {
            ScoreMode::OneStep => Vec::new(),
            ScoreMode::JStep => p.powers(horizon),
        };
        Self { p, mode, powers }
    }

    /// `window = (x_T, x_{T+1}, ..., x_{T+T₁})`.
    fn score(&self, window: &[State]) -> f64 {
        let horizon = window.len() - 1;
        let m = self.p.size();
        let anchor = window[0] as usize;
        let total: f64 = match self.mode {
            ScoreMode::OneStep => window
                .windows(2)
                .map(|w| self.p.get(w[0] as usize, w[1] as usize))
                .sum(),
            ScoreMode::JStep => window[1..]
                .iter()
                .enumerate()
                .map(|(j, &s)| self.powers[j][anchor * m + s as usize])
                .sum(),
        };
        (1.0 - total / horizon as f64).clamp(0.0, 1.0)
    }
}

/// `S = 1 − mean_j P̂(X_{T+j} | X_T)` over the forecast window of a full
/// (possibly permuted) augmented sequence of length at least `T + T₁`.
pub fn nonconformity_score(
    permuted_seq: &[State],
    calibration_len: usize,
    horizon: usize,
    p: &TransitionMatrix,
    mode: ScoreMode,
) -> Result<f64> {
    if calibration_len == 0 || horizon == 0 {
        return Err(Error::invalid("calibration length and horizon must be >= 1"));
    }
    if permuted_seq.len() < calibration_len + horizon {
        return Err(Error::invalid(format!(
            "sequence of length {} is shorter than T + T1 = {}",
            permuted_seq.len(),
            calibration_len + horizon
        )));
    }
    let window = &permuted_seq[calibration_len - 1..calibration_len + horizon];
    Ok(WindowScorer::new(p, mode, horizon).score(window))
}

/// Lexicographic index of a candidate in `𝒳^{T₁}`, as a stream label.
fn candidate_index(forecast: &[State], m: usize) -> u64 {
    forecast
        .iter()
        .fold(0u64, |acc, &s| acc.wrapping_mul(m as u64).wrapping_add(s as u64))
}

fn candidate_from_index(mut index: u64, horizon: usize, m: usize) -> Vec<State> {
    let mut out = vec![0; horizon];
    for slot in out.iter_mut().rev() {
        *slot = (index % m as u64) as State;
        index /= m as u64;
    }
    out
}

/// Calibration-side work shared by every candidate.
struct Prepared<'a> {
    calibration: &'a [State],
    counts: TransitionCounts,
}

impl<'a> Prepared<'a> {
    fn new(calibration: &'a StateSequence, space: StateSpace) -> Self {
        Self {
            calibration: calibration.states(),
            counts: TransitionCounts::from_states(calibration.states(), space.size()),
        }
    }

    fn score(&self, forecast: &[State], cfg: &ConformalConfig, rng: &mut impl Rng) -> ScoredCandidate {
        let t = self.calibration.len();
        let horizon = forecast.len();
        let mut aug = Vec::with_capacity(t + horizon + 1);
        aug.extend_from_slice(self.calibration);
        aug.extend_from_slice(forecast);
        aug.extend(cfg.plus_one);

        let mut counts = self.counts.clone();
        counts.add_path(&aug[t - 1..]);
        let p_hat = TransitionMatrix::from_counts(&counts);
        let scorer = WindowScorer::new(&p_hat, cfg.score_mode, horizon);

        let anchor = *aug.last().expect("augmented sequence is nonempty");
        let dec = decompose_states(&aug, anchor).expect("anchor is the last state");

        let window_len = horizon + 1;
        let identity_score = scorer.score(&aug[t - 1..t + horizon]);
        let u: f64 = rng.gen();

        let mut suffix = vec![0; aug.len() - (t - 1)];
        let (mut exceed, mut ties) = (0usize, 0usize);
        let n = dec.for_each_permuted_suffix(cfg.max_permutations, rng, &mut suffix, |tail| {
            let s = scorer.score(&tail[..window_len]);
            if (s - identity_score).abs() <= SCORE_TIE_TOL {
                ties += 1;
            } else if s > identity_score {
                exceed += 1;
            }
        });
        let p_value = ((exceed as f64 + u * ties as f64) / n as f64).clamp(0.0, 1.0);
        ScoredCandidate {
            forecast: StateSequence::from_vec_unchecked(forecast.to_vec()),
            p_value,
            identity_score,
            num_permutations: n,
            exceed_count: exceed,
            tie_count: ties,
            u,
        }
    }
}

/// Randomized conformal p-value of one candidate continuation.
pub fn p_value(
    candidate: &StateSequence,
    calibration: &StateSequence,
    cfg: &ConformalConfig,
    space: StateSpace,
) -> Result<ScoredCandidate> {
    cfg.validate(space)?;
    if candidate.len() != cfg.horizon {
        return Err(Error::invalid(format!(
            "candidate has length {}, horizon is {}",
            candidate.len(),
            cfg.horizon
        )));
    }
    if let Some(bad) = candidate.states().iter().find(|&&s| !space.contains(s)) {
        return Err(Error::invalid(format!(
            "candidate state {} outside the state space",
            *bad as usize + 1
        )));
    }
    if calibration.states().iter().any(|&s| !space.contains(s)) {
        return Err(Error::invalid("calibration state outside the state space"));
    }
    let prepared = Prepared::new(calibration, space);
    let index = candidate_index(candidate.states(), space.size());
    Ok(prepared.score(candidate.states(), cfg, &mut substream(cfg.seed, &[index])))
}

/// `m^{T₁}`, checked against `cap`.
pub fn universe_size(space: StateSpace, horizon: usize, cap: u64) -> Result<u64> {
    let requested = (space.size() as u128)
        .checked_pow(horizon as u32)
        .unwrap_or(u128::MAX);
    if requested > cap as u128 {
        return Err(Error::ResourceCap {
            what: "candidate enumeration",
            requested,
            cap,
        });
    }
    Ok(requested as u64)
}

/// Scores every candidate in `𝒳^{T₁}`, in lexicographic order.
pub fn score_all_candidates(
    calibration: &StateSequence,
    cfg: &ConformalConfig,
    space: StateSpace,
) -> Result<Vec<ScoredCandidate>> {
    cfg.validate(space)?;
    if calibration.len() < 2 {
        return Err(Error::invalid("calibration sequence needs length >= 2"));
    }
    if calibration.states().iter().any(|&s| !space.contains(s)) {
        return Err(Error::invalid("calibration state outside the state space"));
    }
    let total = universe_size(space, cfg.horizon, cfg.enumeration_cap)?;
    let prepared = Prepared::new(calibration, space);
    let m = space.size();
    Ok((0..total)
        .into_par_iter()
        .map(|index| {
            let forecast = candidate_from_index(index, cfg.horizon, m);
            prepared.score(&forecast, cfg, &mut substream(cfg.seed, &[index]))
        })
        .collect())
}

/// The conformal prediction set `{x : q̂(x) > α}` plus the full scored list.
pub fn conformal_prediction_set(
    calibration: &StateSequence,
    cfg: &ConformalConfig,
    space: StateSpace,
) -> Result<(ConformalPredictionSet, Vec<ScoredCandidate>)> {
    let scored = score_all_candidates(calibration, cfg, space)?;
    let universe = universe_size(space, cfg.horizon, cfg.enumeration_cap)?;
    Ok((
        ConformalPredictionSet::from_scored(&scored, cfg.alpha, universe),
        scored,
    ))
}

/// Per-step state proportions of the set members.
pub fn set_composition(set: &ConformalPredictionSet, horizon: usize, m: usize) -> Composition {
    Composition::from_members(set.candidates.iter().map(|c| c.forecast.states()), horizon, m)
}
