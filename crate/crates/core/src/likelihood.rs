//! Likelihood-based baseline sets.
//!
//! A Markov chain is fitted to the calibration sequence alone and every
//! positive-probability continuation of length `T₁` is ranked by its
//! probability mass, ties broken uniformly at random. The highest-density
//! set keeps the shortest prefix of that ranking whose mass reaches
//! `1 − α`; the randomized variant drops the last member of that prefix
//! with the probability that makes the expected retained mass exactly
//! `1 − α`.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::markov::{
    estimate_transition_matrix, State, StateSequence, StateSpace, TransitionMatrix, LOG_ZERO,
};
use crate::rng::substream;

/// Relative tolerance under which two masses count as tied.
pub const MASS_TIE_REL_TOL: f64 = 1e-12;

/// Absolute slack when comparing cumulative mass against `1 − α`.
pub const MASS_TOL: f64 = 1e-12;

pub const DEFAULT_SUPPORT_CAP: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct RankedCandidate {
    pub forecast: StateSequence,
    pub mass: f64,
}

/// Positive-mass continuations, sorted by descending mass.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedCandidates {
    entries: Vec<RankedCandidate>,
    cumulative: Vec<f64>,
    horizon: usize,
}

impl RankedCandidates {
    pub fn entries(&self) -> &[RankedCandidate] {
        &self.entries
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    /// Support size `J`.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn total_mass(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    /// Mass of the first `k` entries.
    fn prefix_mass(&self, k: usize) -> f64 {
        if k == 0 {
            0.0
        } else {
            self.cumulative[k - 1]
        }
    }

    /// Smallest `K` with prefix mass `>= target`, or `None` on a deficit.
    fn threshold_index(&self, target: f64) -> Option<usize> {
        let k = self.cumulative.partition_point(|&c| c < target - MASS_TOL);
        (k < self.cumulative.len()).then_some(k + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodPredictionSet {
    pub members: Vec<RankedCandidate>,
    pub attained_mass: f64,
    /// Prefix length `K` from the threshold rule (before any randomized drop).
    pub k: usize,
    /// Requested coverage exceeded the total mass; `members` is the support.
    pub mass_deficit: bool,
    /// The randomized rule dropped the only member.
    pub emptied: bool,
}

impl LikelihoodPredictionSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, forecast: &[State]) -> bool {
        self.members.iter().any(|c| c.forecast.states() == forecast)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::invalid(format!(
            "alpha must be in [0, 1), got {alpha}"
        )));
    }
    Ok(())
}

/// Ranks all positive-mass continuations from `last_state` under `p`.
pub fn rank_with_matrix(
    p: &TransitionMatrix,
    last_state: State,
    horizon: usize,
    seed: u64,
    support_cap: u64,
) -> Result<RankedCandidates> {
    if horizon == 0 {
        return Err(Error::invalid("horizon must be >= 1"));
    }
    if p.is_unvisited(last_state as usize) {
        return Err(Error::UnvisitedRow {
            state: last_state as usize + 1,
        });
    }
    let m = p.size();

    // Depth-first walk over the support, in lexicographic order.
    let mut found: Vec<(Vec<State>, f64)> = Vec::new();
    let mut path: Vec<State> = Vec::with_capacity(horizon);
    let mut logs: Vec<f64> = Vec::with_capacity(horizon);
    #[allow(clippy::too_many_arguments)]
    fn walk(
        p: &TransitionMatrix,
        m: usize,
        prev: State,
        horizon: usize,
        path: &mut Vec<State>,
        logs: &mut Vec<f64>,
        found: &mut Vec<(Vec<State>, f64)>,
        cap: u64,
    ) -> Result<()> {
        for next in 0..m {
            let f = p.get(prev as usize, next);
            if f == 0.0 {
                continue;
            }
            let acc = logs.last().copied().unwrap_or(0.0) + f.ln();
            path.push(next as State);
            logs.push(acc);
            if path.len() == horizon {
                if found.len() as u64 >= cap {
                    return Err(Error::ResourceCap {
                        what: "likelihood support",
                        requested: found.len() as u128 + 1,
                        cap,
                    });
                }
                found.push((path.clone(), acc));
            } else {
                walk(p, m, next as State, horizon, path, logs, found, cap)?;
            }
            path.pop();
            logs.pop();
        }
        Ok(())
    }
    walk(p, m, last_state, horizon, &mut path, &mut logs, &mut found, support_cap)?;

    let mut entries: Vec<RankedCandidate> = found
        .into_iter()
        .filter(|(_, lp)| *lp != LOG_ZERO)
        .map(|(states, lp)| RankedCandidate {
            forecast: StateSequence::from_vec_unchecked(states),
            mass: lp.exp(),
        })
        .filter(|c| c.mass > 0.0)
        .collect();
    // Stable: equal masses stay lexicographic before the tie shuffle.
    entries.sort_by(|a, b| b.mass.total_cmp(&a.mass));

    let mut rng = substream(seed, &[]);
    let mut start = 0;
    while start < entries.len() {
        let lead = entries[start].mass;
        let mut end = start + 1;
        while end < entries.len() && (lead - entries[end].mass) <= MASS_TIE_REL_TOL * lead {
            end += 1;
        }
        if end - start > 1 {
            entries[start..end].shuffle(&mut rng);
        }
        start = end;
    }

    let cumulative = entries
        .iter()
        .scan(0.0, |acc, c| {
            *acc += c.mass;
            Some(*acc)
        })
        .collect();
    Ok(RankedCandidates {
        entries,
        cumulative,
        horizon,
    })
}

/// Fits `P̂` to `calibration` and ranks every continuation by its mass.
pub fn rank_candidates(
    calibration: &StateSequence,
    horizon: usize,
    space: StateSpace,
    seed: u64,
) -> Result<RankedCandidates> {
    let p = estimate_transition_matrix(calibration, space)?;
    rank_with_matrix(&p, calibration.last(), horizon, seed, DEFAULT_SUPPORT_CAP)
}

/// Minimal-cardinality set with mass at least `1 − α`.
///
/// `alpha = 0` requests the whole support.
pub fn hdr_set(ranked: &RankedCandidates, alpha: f64) -> Result<LikelihoodPredictionSet> {
    check_alpha(alpha)?;
    let target = 1.0 - alpha;
    let (k, deficit) = match ranked.threshold_index(target) {
        Some(k) => (k, false),
        None => (ranked.len(), true),
    };
    Ok(LikelihoodPredictionSet {
        members: ranked.entries[..k].to_vec(),
        attained_mass: ranked.prefix_mass(k),
        k,
        mass_deficit: deficit,
        emptied: false,
    })
}

/// Keeps the `K`-th ranked member only when `u_star <= p`, where `p` makes
/// the expected retained mass equal `1 − α`.
pub fn randomized_hdr_set(
    ranked: &RankedCandidates,
    alpha: f64,
    u_star: f64,
) -> Result<LikelihoodPredictionSet> {
    check_alpha(alpha)?;
    if !(0.0..=1.0).contains(&u_star) {
        return Err(Error::invalid(format!("u* must be in [0, 1], got {u_star}")));
    }
    let mut set = hdr_set(ranked, alpha)?;
    if set.mass_deficit || set.k == 0 {
        return Ok(set);
    }
    let k = set.k;
    let p = retention_probability(ranked, alpha, k);
    if u_star > p {
        set.members.truncate(k - 1);
        set.attained_mass = ranked.prefix_mass(k - 1);
        set.emptied = set.members.is_empty();
    }
    Ok(set)
}

/// `((1 − α) − Σ_{j<K} mass_j) / mass_K`.
fn retention_probability(ranked: &RankedCandidates, alpha: f64, k: usize) -> f64 {
    ((1.0 - alpha) - ranked.prefix_mass(k - 1)) / ranked.entries[k - 1].mass
}

/// Expected retained mass of [`randomized_hdr_set`] over `u* ~ U[0, 1]`.
pub fn randomized_expected_mass(ranked: &RankedCandidates, alpha: f64) -> Result<f64> {
    let set = hdr_set(ranked, alpha)?;
    if set.mass_deficit || set.k == 0 {
        return Ok(set.attained_mass);
    }
    let p = retention_probability(ranked, alpha, set.k).clamp(0.0, 1.0);
    Ok(p * ranked.prefix_mass(set.k) + (1.0 - p) * ranked.prefix_mass(set.k - 1))
}
