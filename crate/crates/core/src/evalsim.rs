//! Coverage studies, backtests and forward forecasts.
//!
//! A *case* is one calibration sequence plus its true continuation. Each
//! predictor is built once per case and thresholded across every target
//! level, so the sets of one case are nested across levels. Cases are
//! independent and evaluated in parallel; each draws from its own RNG
//! substream `(seed, kind, horizon, case)`, so reports do not depend on the
//! worker count.

use std::fmt;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;

use crate::composition::Composition;
use crate::conformal::{
    score_all_candidates, ConformalConfig, ScoreMode, DEFAULT_ENUMERATION_CAP,
    DEFAULT_MAX_PERMUTATIONS,
};
use crate::error::{Error, Result};
use crate::ingest::{LabeledSeries, YearMonth};
use crate::likelihood::{hdr_set, randomized_hdr_set, rank_candidates};
use crate::markov::{
    matrix_power_distribution, simulate_chain_with, InitialDistribution, State, StateSequence,
    StateSpace, TransitionMatrix,
};
use crate::rng::{derive_seed, substream};

const STREAM_SIMULATE: u64 = 0;
const STREAM_CONFORMAL: u64 = 1;
const STREAM_LIKELIHOOD: u64 = 2;
const STREAM_RANDOMIZED: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Conformal,
    Likelihood,
    LikelihoodRandomized,
}

impl Method {
    pub const ALL: [Method; 3] = [
        Method::Conformal,
        Method::Likelihood,
        Method::LikelihoodRandomized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Conformal => "conformal",
            Method::Likelihood => "likelihood",
            Method::LikelihoodRandomized => "likelihood_randomized",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conformal" | "cp" => Ok(Method::Conformal),
            "likelihood" | "like" => Ok(Method::Likelihood),
            "likelihood_randomized" | "like-rand" => Ok(Method::LikelihoodRandomized),
            other => Err(Error::invalid(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentGrid {
    /// Target coverages `1 − α`, each in `(0, 1]`.
    pub levels: Vec<f64>,
    pub horizons: Vec<usize>,
    pub replications: usize,
    pub calibration_length: usize,
    pub seed: u64,
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() || self.horizons.is_empty() {
            return Err(Error::invalid("grid needs at least one level and one horizon"));
        }
        if let Some(l) = self.levels.iter().find(|l| !(**l > 0.0 && **l <= 1.0)) {
            return Err(Error::invalid(format!("target coverage {l} outside (0, 1]")));
        }
        if self.horizons.contains(&0) {
            return Err(Error::invalid("horizons must be >= 1"));
        }
        if self.replications == 0 {
            return Err(Error::invalid("replications must be >= 1"));
        }
        if self.calibration_length < 2 {
            return Err(Error::invalid("calibration length must be >= 2"));
        }
        Ok(())
    }
}

/// Conformal settings shared by every case of a study.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorSettings {
    pub max_permutations: usize,
    pub score_mode: ScoreMode,
    pub plus_one: Option<State>,
    pub enumeration_cap: u64,
}

impl Default for PredictorSettings {
    fn default() -> Self {
        Self {
            max_permutations: DEFAULT_MAX_PERMUTATIONS,
            score_mode: ScoreMode::default(),
            plus_one: None,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
        }
    }
}

/// Maps a target coverage to its miscoverage; `1.0` maps to `α = 0`.
pub fn alpha_for(level: f64) -> f64 {
    (1.0 - level).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageCell {
    pub method: Method,
    pub horizon: usize,
    pub level: f64,
    pub covered: usize,
    /// Cases attempted (`R`); failed cases count as not covered.
    pub total: usize,
    pub failures: usize,
    pub cardinality_sum: u64,
}

impl CoverageCell {
    pub fn empirical_coverage(&self) -> f64 {
        self.covered as f64 / self.total as f64
    }

    pub fn mc_stderr(&self) -> f64 {
        let c = self.empirical_coverage();
        (c * (1.0 - c) / self.total as f64).sqrt()
    }

    /// Mean set size over the cases that succeeded.
    pub fn mean_cardinality(&self) -> f64 {
        let ok = self.total - self.failures;
        if ok == 0 {
            f64::NAN
        } else {
            self.cardinality_sum as f64 / ok as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CoverageReport {
    pub cells: Vec<CoverageCell>,
}

impl CoverageReport {
    pub fn cell(&self, method: Method, horizon: usize, level: f64) -> Option<&CoverageCell> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.horizon == horizon && (c.level - level).abs() < 1e-9)
    }

    pub const RELIABILITY_HEADER: [&'static str; 7] = [
        "method",
        "horizon",
        "target_coverage",
        "empirical_coverage",
        "mc_stderr",
        "mean_cardinality",
        "failures",
    ];

    pub fn write_reliability_csv(&self, out: impl Write) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::RELIABILITY_HEADER)?;
        for c in &self.cells {
            w.write_record([
                c.method.name().to_string(),
                c.horizon.to_string(),
                c.level.to_string(),
                c.empirical_coverage().to_string(),
                c.mc_stderr().to_string(),
                c.mean_cardinality().to_string(),
                c.failures.to_string(),
            ])?;
        }
        w.flush()
    }

    /// Mean cardinality pivoted to one column per method.
    pub fn write_cardinality_csv(&self, out: impl Write) -> std::io::Result<()> {
        let mut methods: Vec<Method> = self.cells.iter().map(|c| c.method).collect();
        methods.sort();
        methods.dedup();
        let mut keys: Vec<(usize, f64)> = Vec::new();
        for c in &self.cells {
            if !keys.iter().any(|k| k.0 == c.horizon && k.1 == c.level) {
                keys.push((c.horizon, c.level));
            }
        }
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["horizon".to_string(), "target_coverage".to_string()];
        header.extend(methods.iter().map(|m| m.name().to_string()));
        w.write_record(&header)?;
        for (h, l) in keys {
            let mut row = vec![h.to_string(), l.to_string()];
            for &m in &methods {
                row.push(
                    self.cell(m, h, l)
                        .map_or(String::new(), |c| c.mean_cardinality().to_string()),
                );
            }
            w.write_record(&row)?;
        }
        w.flush()
    }
}

/// Per-level `(covered, cardinality)` for one method on one case.
type LevelOutcomes = Result<Vec<(bool, usize)>>;

#[allow(clippy::too_many_arguments)]
fn evaluate_case(
    calibration: &StateSequence,
    truth: &[State],
    space: StateSpace,
    levels: &[f64],
    methods: &[Method],
    settings: &PredictorSettings,
    seed: u64,
    path: [u64; 2],
) -> Vec<LevelOutcomes> {
    let horizon = truth.len();
    let mut ranked_cache = None;
    methods
        .iter()
        .map(|&method| -> LevelOutcomes {
            match method {
                Method::Conformal => {
                    let cfg = ConformalConfig {
                        alpha: 0.0,
                        horizon,
                        max_permutations: settings.max_permutations,
                        score_mode: settings.score_mode,
                        plus_one: settings.plus_one,
                        seed: derive_seed(seed, &[STREAM_CONFORMAL, path[0], path[1]]),
                        enumeration_cap: settings.enumeration_cap,
                    };
                    let scored = score_all_candidates(calibration, &cfg, space)?;
                    let truth_q = scored
                        .iter()
                        .find(|c| c.forecast.states() == truth)
                        .map(|c| c.p_value)
                        .expect("truth is a candidate");
                    Ok(levels
                        .iter()
                        .map(|&l| {
                            let a = alpha_for(l);
                            (truth_q > a, scored.iter().filter(|c| c.p_value > a).count())
                        })
                        .collect())
                }
                Method::Likelihood | Method::LikelihoodRandomized => {
                    if ranked_cache.is_none() {
                        ranked_cache = Some(rank_candidates(
                            calibration,
                            horizon,
                            space,
                            derive_seed(seed, &[STREAM_LIKELIHOOD, path[0], path[1]]),
                        ));
                    }
                    let ranked = match ranked_cache.as_ref().expect("filled above") {
                        Ok(r) => r,
                        Err(e) => return Err(Error::invalid(e.to_string())),
                    };
                    let u_star: f64 =
                        substream(seed, &[STREAM_RANDOMIZED, path[0], path[1]]).gen();
                    levels
                        .iter()
                        .map(|&l| {
                            let a = alpha_for(l);
                            let set = if method == Method::Likelihood {
                                hdr_set(ranked, a)?
                            } else {
                                randomized_hdr_set(ranked, a, u_star)?
                            };
                            Ok((set.contains(truth), set.len()))
                        })
                        .collect()
                }
            }
        })
        .collect()
}

/// Folds per-case outcomes into cells for one horizon.
fn aggregate(
    report: &mut CoverageReport,
    horizon: usize,
    levels: &[f64],
    methods: &[Method],
    cases: &[Vec<LevelOutcomes>],
) {
    for (mi, &method) in methods.iter().enumerate() {
        for (li, &level) in levels.iter().enumerate() {
            let mut cell = CoverageCell {
                method,
                horizon,
                level,
                covered: 0,
                total: cases.len(),
                failures: 0,
                cardinality_sum: 0,
            };
            for case in cases {
                match &case[mi] {
                    Ok(v) => {
                        let (covered, card) = v[li];
                        cell.covered += covered as usize;
                        cell.cardinality_sum += card as u64;
                    }
                    Err(_) => cell.failures += 1,
                }
            }
            report.cells.push(cell);
        }
    }
}

fn sorted_methods(methods: &[Method]) -> Result<Vec<Method>> {
    let mut out = methods.to_vec();
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(Error::invalid("no methods selected"));
    }
    Ok(out)
}

/// Monte Carlo coverage study: `R` chains of length `T + T₁` per horizon,
/// predictors built on the first `T` states, coverage of the last `T₁`.
pub fn run_simulation_study(
    true_p: &TransitionMatrix,
    true_init: &InitialDistribution,
    grid: &ExperimentGrid,
    methods: &[Method],
    settings: &PredictorSettings,
) -> Result<CoverageReport> {
    grid.validate()?;
    let methods = sorted_methods(methods)?;
    let space = StateSpace::new(true_p.size())?;
    let t = grid.calibration_length;
    let mut report = CoverageReport::default();
    for &horizon in &grid.horizons {
        let cases: Vec<Vec<LevelOutcomes>> = (0..grid.replications)
            .into_par_iter()
            .map(|r| {
                let mut rng = substream(grid.seed, &[STREAM_SIMULATE, horizon as u64, r as u64]);
                let chain = match simulate_chain_with(true_init, true_p, t + horizon, &mut rng) {
                    Ok(c) => c,
                    Err(e) => {
                        let msg = e.to_string();
                        return methods.iter().map(|_| Err(Error::invalid(msg.clone()))).collect();
                    }
                };
                let (cal, truth) = chain.states().split_at(t);
                let cal = StateSequence::from_vec_unchecked(cal.to_vec());
                evaluate_case(
                    &cal,
                    truth,
                    space,
                    &grid.levels,
                    &methods,
                    settings,
                    grid.seed,
                    [horizon as u64, r as u64],
                )
            })
            .collect();
        aggregate(&mut report, horizon, &grid.levels, &methods, &cases);
    }
    Ok(report)
}

/// Predicted coverage of the likelihood set at `T₁ = 1`, `1 − α = 0.5`,
/// when `P̂ ≈ P` and every row maximum is at least one half:
/// `Σ_s max_j P[s][j] · P(X_T = s)`.
pub fn expected_coverage_analytic(
    true_p: &TransitionMatrix,
    true_init: &InitialDistribution,
    calibration_length: usize,
) -> Result<f64> {
    if calibration_length == 0 {
        return Err(Error::invalid("calibration length must be >= 1"));
    }
    let marginal = matrix_power_distribution(true_init, true_p, calibration_length - 1)?;
    Ok(marginal
        .probs()
        .iter()
        .enumerate()
        .map(|(s, w)| w * true_p.row(s).iter().cloned().fold(0.0, f64::max))
        .sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestReport {
    pub report: CoverageReport,
    /// Countries evaluated (the coverage denominator).
    pub evaluated: Vec<String>,
    /// (country, reason) for countries left out before evaluation.
    pub dropped: Vec<(String, String)>,
}

/// Calibrates on each country's states through `cutoff` and checks the next
/// `T₁` states. Countries without enough data on either side of the cutoff
/// are dropped before coverage is computed.
pub fn run_backtest(
    corpus: &[LabeledSeries],
    cutoff: YearMonth,
    grid: &ExperimentGrid,
    methods: &[Method],
    settings: &PredictorSettings,
) -> Result<BacktestReport> {
    if grid.levels.is_empty() || grid.horizons.is_empty() || grid.horizons.contains(&0) {
        return Err(Error::invalid("grid needs levels and positive horizons"));
    }
    if let Some(l) = grid.levels.iter().find(|l| !(**l > 0.0 && **l <= 1.0)) {
        return Err(Error::invalid(format!("target coverage {l} outside (0, 1]")));
    }
    let methods = sorted_methods(methods)?;
    let max_h = *grid.horizons.iter().max().expect("nonempty");
    let space = crate::ingest::conflict_space();

    let mut usable: Vec<(&LabeledSeries, usize)> = Vec::new();
    let mut dropped = Vec::new();
    for s in corpus {
        let offset = s.start.months_until(cutoff);
        let after = s.len() as i64 - offset - 1;
        if offset < 1 {
            dropped.push((
                s.country_id.clone(),
                "fewer than 2 observations through the cutoff".to_string(),
            ));
        } else if after < max_h as i64 {
            dropped.push((
                s.country_id.clone(),
                format!("{} observations after the cutoff, need {max_h}", after.max(0)),
            ));
        } else {
            usable.push((s, offset as usize + 1));
        }
    }

    let mut report = CoverageReport::default();
    for &horizon in &grid.horizons {
        let cases: Vec<Vec<LevelOutcomes>> = usable
            .par_iter()
            .enumerate()
            .map(|(k, (s, cal_len))| {
                let states = s.states.states();
                let cal = StateSequence::from_vec_unchecked(states[..*cal_len].to_vec());
                let truth = &states[*cal_len..*cal_len + horizon];
                evaluate_case(
                    &cal,
                    truth,
                    space,
                    &grid.levels,
                    &methods,
                    settings,
                    grid.seed,
                    [horizon as u64, k as u64],
                )
            })
            .collect();
        aggregate(&mut report, horizon, &grid.levels, &methods, &cases);
    }
    Ok(BacktestReport {
        report,
        evaluated: usable.iter().map(|(s, _)| s.country_id.clone()).collect(),
        dropped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetMember {
    pub forecast: StateSequence,
    /// Conformal p-value, or probability mass for the likelihood sets.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodForecast {
    pub method: Method,
    /// Ranked members: by decreasing p-value (conformal) or mass.
    pub members: Vec<SetMember>,
    pub composition: Composition,
    pub mass_deficit: bool,
}

/// Prediction sets beyond the end of `series`, calibrated on all of it.
pub fn forward_forecast(
    series: &StateSequence,
    space: StateSpace,
    cfg: &ConformalConfig,
    methods: &[Method],
) -> Result<Vec<MethodForecast>> {
    cfg.validate(space)?;
    let methods = sorted_methods(methods)?;
    let m = space.size();
    let mut out = Vec::with_capacity(methods.len());
    let mut ranked = None;
    for method in methods {
        let (members, deficit) = match method {
            Method::Conformal => {
                let scored = score_all_candidates(series, cfg, space)?;
                let mut members: Vec<SetMember> = scored
                    .into_iter()
                    .filter(|c| c.p_value > cfg.alpha)
                    .map(|c| SetMember {
                        forecast: c.forecast,
                        score: c.p_value,
                    })
                    .collect();
                members.sort_by(|a, b| b.score.total_cmp(&a.score));
                (members, false)
            }
            Method::Likelihood | Method::LikelihoodRandomized => {
                if ranked.is_none() {
                    ranked = Some(rank_candidates(
                        series,
                        cfg.horizon,
                        space,
                        derive_seed(cfg.seed, &[STREAM_LIKELIHOOD]),
                    )?);
                }
                let ranked = ranked.as_ref().expect("filled above");
                let set = if method == Method::Likelihood {
                    hdr_set(ranked, cfg.alpha)?
                } else {
                    let u: f64 = substream(cfg.seed, &[STREAM_RANDOMIZED]).gen();
                    randomized_hdr_set(ranked, cfg.alpha, u)?
                };
                let deficit = set.mass_deficit;
                (
                    set.members
                        .into_iter()
                        .map(|c| SetMember {
                            forecast: c.forecast,
                            score: c.mass,
                        })
                        .collect(),
                    deficit,
                )
            }
        };
        let composition =
            Composition::from_members(members.iter().map(|c| c.forecast.states()), cfg.horizon, m);
        out.push(MethodForecast {
            method,
            members,
            composition,
            mass_deficit: deficit,
        });
    }
    Ok(out)
}

pub const MEMBERSHIP_HEADER: [&str; 3] = ["rank", "sequence", "p_value_or_mass"];
pub const COMPOSITION_HEADER: [&str; 4] = ["method", "step", "state", "proportion"];

pub fn write_membership_csv(out: impl Write, forecast: &MethodForecast) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(MEMBERSHIP_HEADER)?;
    for (k, member) in forecast.members.iter().enumerate() {
        w.write_record([
            (k + 1).to_string(),
            member.forecast.to_string(),
            member.score.to_string(),
        ])?;
    }
    w.flush()
}

/// Empty sets are written as one row per step with state `0` and
/// proportion `empty`.
pub fn write_composition_csv<'a>(
    out: impl Write,
    forecasts: impl IntoIterator<Item = &'a MethodForecast>,
) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COMPOSITION_HEADER)?;
    for f in forecasts {
        match &f.composition {
            Composition::Empty { horizon } => {
                for step in 1..=*horizon {
                    w.write_record([f.method.name(), &step.to_string(), "0", "empty"])?;
                }
            }
            Composition::Proportions(rows) => {
                for (t, row) in rows.iter().enumerate() {
                    for (s, p) in row.iter().enumerate() {
                        w.write_record([
                            f.method.name().to_string(),
                            (t + 1).to_string(),
                            (s + 1).to_string(),
                            p.to_string(),
                        ])?;
                    }
                }
            }
        }
    }
    w.flush()
}

/// `n` chains of `length` months from `(p, init)`, labelled `SYN001`, ...
pub fn synthetic_corpus(
    p: &TransitionMatrix,
    init: &InitialDistribution,
    n: usize,
    length: usize,
    start: YearMonth,
    seed: u64,
) -> Result<Vec<LabeledSeries>> {
    let space = StateSpace::new(p.size())?;
    (0..n)
        .map(|k| {
            let chain = simulate_chain_with(init, p, length, &mut substream(seed, &[k as u64]))?;
            Ok(LabeledSeries {
                country_id: format!("SYN{:03}", k + 1),
                start,
                states: StateSequence::new(chain.into_states(), space)?,
            })
        })
        .collect()
}
