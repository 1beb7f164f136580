//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use rand::Rng;

use markov_conformal::conformal::{conformal_prediction_set, p_value, score_all_candidates};
use markov_conformal::evalsim::{
    expected_coverage_analytic, run_backtest, run_simulation_study, synthetic_corpus,
    CoverageReport, ExperimentGrid, Method, PredictorSettings,
};
use markov_conformal::iblocks::{apply_permutation, decompose, factorial, for_each_permutation};
use markov_conformal::ingest::{LabeledSeries, YearMonth};
use markov_conformal::likelihood::{hdr_set, randomized_hdr_set, rank_with_matrix, MASS_TOL};
use markov_conformal::markov::{
    conflict_study_chain, matrix_power_distribution, sequence_log_probability, simulate_chain,
};
use markov_conformal::rng::substream;
use markov_conformal::{
    BlockPermutation, ConformalConfig, State, StateSequence, StateSpace, TransitionCounts,
    TransitionMatrix,
};

const SEED: u64 = 20240601;
const LIMIT: [f64; 4] = [0.6206, 0.0999, 0.1796, 0.0999];
const STUDY_LEVELS: [f64; 7] = [0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 1.0];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn space() -> StateSpace {
    StateSpace::new(4).unwrap()
}

fn binomial_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

fn marginal_anchor() -> Outcome {
    let start = Instant::now();
    let (p, init) = conflict_study_chain();
    let got = matrix_power_distribution(&init, &p, 199).unwrap();
    let elapsed = start.elapsed();
    let worst = got
        .probs()
        .iter()
        .zip(LIMIT)
        .map(|(g, w)| (g - w).abs())
        .fold(0.0, f64::max);
    outcome(
        worst < 1e-3 && elapsed < Duration::from_secs(1),
        format!("max |error| {worst:.2e}, {elapsed:?}"),
    )
}

fn analytic_over_coverage() -> Outcome {
    let start = Instant::now();
    let (p, init) = conflict_study_chain();
    let analytic = expected_coverage_analytic(&p, &init, 200).unwrap();
    let grid = ExperimentGrid {
        levels: vec![0.5],
        horizons: vec![1],
        replications: 500,
        calibration_length: 200,
        seed: SEED,
    };
    let report =
        run_simulation_study(&p, &init, &grid, &[Method::Likelihood], &Default::default()).unwrap();
    let cell = report.cell(Method::Likelihood, 1, 0.5).unwrap();
    let se = binomial_se(0.8, cell.total);
    let elapsed = start.elapsed();
    let simulated = cell.empirical_coverage();
    outcome(
        (analytic - 0.8).abs() < 5e-4
            && (simulated - 0.8).abs() <= 3.0 * se
            && elapsed < Duration::from_secs(60),
        format!("analytic {analytic:.5}, simulated {simulated:.3} (3 SE = {:.3}), {elapsed:?}", 3.0 * se),
    )
}

fn study() -> (CoverageReport, Duration) {
    let (p, init) = conflict_study_chain();
    let grid = ExperimentGrid {
        levels: STUDY_LEVELS.to_vec(),
        horizons: vec![1, 2, 3],
        replications: 500,
        calibration_length: 200,
        seed: SEED,
    };
    let settings = PredictorSettings {
        max_permutations: 2000,
        ..Default::default()
    };
    let start = Instant::now();
    let report = run_simulation_study(&p, &init, &grid, &Method::ALL, &settings).unwrap();
    (report, start.elapsed())
}

fn cp_calibration(report: &CoverageReport, elapsed: Duration) -> Outcome {
    let mut within = 0;
    let mut misses = Vec::new();
    for h in 1..=3 {
        for level in [0.5, 0.6, 0.7, 0.8, 0.9] {
            let c = report.cell(Method::Conformal, h, level).unwrap();
            let cov = c.empirical_coverage();
            if (cov - level).abs() <= 3.0 * binomial_se(level, c.total) {
                within += 1;
            } else {
                misses.push(format!("T1={h}@{level}: {cov:.3}"));
            }
        }
    }
    outcome(
        within >= 13 && elapsed < Duration::from_secs(30 * 60),
        format!("{within}/15 cells within 3 SE {misses:?}, study {elapsed:?}"),
    )
}

/// Peace forever after a war spell, then an escalation the calibration
/// never saw leave peace for.
fn unseen_transition_country() -> LabeledSeries {
    let mut labels = vec![3, 3, 3, 4];
    labels.extend(std::iter::repeat_n(1, 40));
    labels.extend([2, 3, 3, 4, 1]);
    LabeledSeries {
        country_id: "ENGINEERED".into(),
        start: YearMonth::new(2020, 1).unwrap(),
        states: StateSequence::from_labels(&labels, space()).unwrap(),
    }
}

fn endpoint_behavior(report: &CoverageReport) -> Outcome {
    let study_full = (1..=3).all(|h| {
        let c = report.cell(Method::Conformal, h, 1.0).unwrap();
        c.covered == c.total && c.failures == 0
    });

    let (p, init) = conflict_study_chain();
    let mut corpus = synthetic_corpus(&p, &init, 20, 48, YearMonth::new(2020, 1).unwrap(), SEED)
        .unwrap();
    corpus.push(unseen_transition_country());
    // Calibration ends on the last peace month of the engineered country.
    let cutoff = YearMonth::new(2020, 1).unwrap().plus(43);
    let grid = ExperimentGrid {
        levels: vec![1.0],
        horizons: vec![1, 2],
        replications: corpus.len(),
        calibration_length: 2,
        seed: SEED,
    };
    let bt = run_backtest(&corpus, cutoff, &grid, &Method::ALL, &Default::default()).unwrap();
    let mut cp_full = true;
    let mut like_short = true;
    let mut detail = Vec::new();
    for h in [1, 2] {
        let cp = bt.report.cell(Method::Conformal, h, 1.0).unwrap();
        let like = bt.report.cell(Method::Likelihood, h, 1.0).unwrap();
        cp_full &= cp.covered == cp.total;
        like_short &= like.empirical_coverage() < 1.0;
        detail.push(format!(
            "T1={h}: CP {}/{}, Like {}/{}",
            cp.covered, cp.total, like.covered, like.total
        ));
    }
    outcome(
        study_full && cp_full && like_short,
        format!("study CP@1.0 all covered: {study_full}; engineered corpus {detail:?}"),
    )
}

fn cardinality_anchors(report: &CoverageReport) -> Outcome {
    let like = report.cell(Method::Likelihood, 1, 0.95).unwrap().mean_cardinality();
    let mut ordered = true;
    let mut worst = f64::INFINITY;
    for h in 2..=3 {
        for level in STUDY_LEVELS {
            let cp = report.cell(Method::Conformal, h, level).unwrap().mean_cardinality();
            let lk = report.cell(Method::Likelihood, h, level).unwrap().mean_cardinality();
            ordered &= cp >= lk;
            worst = worst.min(cp - lk);
        }
    }
    outcome(
        (like - 2.0).abs() <= 0.05 && ordered,
        format!("Like card @ (1, 0.95) = {like:.3}; min CP - Like over T1>=2 = {worst:.2}"),
    )
}

fn degenerate_case() -> Outcome {
    let start = Instant::now();
    let cal = StateSequence::new(vec![0; 420], space()).unwrap();
    let all_peace: Vec<State> = vec![0; 6];

    let mut plain = ConformalConfig::new(0.2, 6);
    plain.seed = SEED;
    let (set, _) = conformal_prediction_set(&cal, &plain, space()).unwrap();
    let peace_ending: Vec<&StateSequence> = set
        .candidates
        .iter()
        .map(|c| &c.forecast)
        .filter(|f| f.last() == 0)
        .collect();
    let other_ending = set.len() - peace_ending.len();
    let plain_ok = peace_ending.len() == 1
        && peace_ending[0].states() == all_peace.as_slice()
        && other_ending > 100;

    let mut plus = plain.clone();
    plus.plus_one = Some(0);
    let (plus_set, _) = conformal_prediction_set(&cal, &plus, space()).unwrap();
    let singleton = plus_set.len() == 1 && plus_set.contains(&all_peace);
    let elapsed = start.elapsed();

    // The all-peace candidate ties with every permutation, so its p-value is
    // the tie-breaking draw: accepted with probability 0.8 across seeds.
    let candidate = StateSequence::new(all_peace.clone(), space()).unwrap();
    let seeds = 400;
    let accepted = (0..seeds)
        .filter(|&s| {
            let mut cfg = plus.clone();
            cfg.seed = s;
            p_value(&candidate, &cal, &cfg, space()).unwrap().p_value > 0.2
        })
        .count();
    let rate = accepted as f64 / seeds as f64;
    let rate_ok = (rate - 0.8).abs() <= 3.0 * binomial_se(0.8, seeds as usize);

    outcome(
        plain_ok && singleton && rate_ok && elapsed < Duration::from_secs(60),
        format!(
            "no plus-one: {} peace-ending (only all-1: {}), {other_ending} others; \
             plus-one: {} member(s), singleton all-1: {singleton}; \
             all-1 accepted in {rate:.3} of {seeds} seeds; {elapsed:?}",
            peace_ending.len(),
            plain_ok,
            plus_set.len()
        ),
    )
}

fn random_sequence(rng: &mut impl Rng, m: usize, len: usize) -> Vec<State> {
    (0..len).map(|_| rng.gen_range(0..m) as State).collect()
}

fn random_matrix(rng: &mut impl Rng, m: usize) -> TransitionMatrix {
    let rows: Vec<Vec<f64>> = (0..m)
        .map(|_| {
            let r: Vec<f64> = (0..m).map(|_| rng.gen::<f64>() + 1e-3).collect();
            let s: f64 = r.iter().sum();
            r.into_iter().map(|x| x / s).collect()
        })
        .collect();
    TransitionMatrix::from_rows(&rows).unwrap()
}

fn counts(states: &[State], m: usize) -> Vec<u64> {
    let c = TransitionCounts::from_states(states, m);
    (0..m * m).map(|k| c.get(k / m, k % m)).collect()
}

fn property_suites() -> Outcome {
    let mut rng = substream(SEED, &[7]);
    let mut failures: Vec<&str> = Vec::new();

    // Transition counts and path probability under every block permutation.
    let (mut preserved, mut equal_prob, mut cases) = (true, true, 0);
    while cases < 300 {
        let m = rng.gen_range(2..=4);
        let len = rng.gen_range(2..20);
        let states = random_sequence(&mut rng, m, len);
        let anchor = *states.last().unwrap();
        let d = states.iter().filter(|&&s| s == anchor).count() - 1;
        if d > 6 {
            continue;
        }
        cases += 1;
        let seq = StateSequence::new(states.clone(), StateSpace::new(m).unwrap()).unwrap();
        let dec = decompose(&seq, anchor).unwrap();
        let p = random_matrix(&mut rng, m);
        let want = counts(&states, m);
        let base = sequence_log_probability(&states[1..], states[0], &p);
        let mut seen = 0u128;
        for_each_permutation(d, 720, &mut rng, |order| {
            let out = apply_permutation(&dec, &BlockPermutation::new(order.to_vec()).unwrap())
                .unwrap();
            preserved &= counts(out.states(), m) == want
                && out.first() == seq.first()
                && out.last() == seq.last();
            if d <= 5 {
                let lp = sequence_log_probability(&out.states()[1..], out.first(), &p);
                equal_prob &= (lp - base).abs() < 1e-9;
            }
            seen += 1;
        });
        preserved &= seen == factorial(d).unwrap();
    }
    if !preserved {
        failures.push("transition-count preservation");
    }
    if !equal_prob {
        failures.push("equal path probability");
    }

    // HDR minimality against subset brute force.
    let mut minimal = true;
    for _ in 0..200 {
        let m: usize = rng.gen_range(2..=4);
        let horizon = rng.gen_range(1..=4);
        if m.pow(horizon as u32) > 256 {
            continue;
        }
        let p = random_matrix(&mut rng, m);
        let alpha = rng.gen_range(0.0..0.99);
        let ranked = rank_with_matrix(&p, rng.gen_range(0..m) as State, horizon, rng.gen(), 1 << 20)
            .unwrap();
        let set = hdr_set(&ranked, alpha).unwrap();
        let masses: Vec<f64> = ranked.entries().iter().map(|e| e.mass).collect();
        let target = 1.0 - alpha - MASS_TOL;
        minimal &= set.attained_mass >= target;
        if masses.len() <= 14 {
            for subset in 0u32..(1 << masses.len()) {
                if (subset.count_ones() as usize) < set.k {
                    let mass: f64 = (0..masses.len())
                        .filter(|i| subset >> i & 1 == 1)
                        .map(|i| masses[i])
                        .sum();
                    minimal &= mass < target;
                }
            }
        } else {
            let mut sorted = masses.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            minimal &= sorted[..set.k - 1].iter().sum::<f64>() < target;
        }
    }
    if !minimal {
        failures.push("HDR minimality");
    }

    // Randomized HDR mean mass over 10^5 draws.
    let (p, _) = conflict_study_chain();
    let ranked = rank_with_matrix(&p, 0, 3, SEED, 1 << 20).unwrap();
    let alpha = 0.2;
    let draws = 100_000;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..draws {
        let mass = randomized_hdr_set(&ranked, alpha, rng.gen()).unwrap().attained_mass;
        sum += mass;
        sum_sq += mass * mass;
    }
    let mean = sum / draws as f64;
    let se = ((sum_sq / draws as f64 - mean * mean).max(0.0) / draws as f64).sqrt();
    if (mean - (1.0 - alpha)).abs() > 3.0 * se {
        failures.push("randomized HDR expected mass");
    }

    // Nestedness across the level grid and thread-count invariance.
    let (p, init) = conflict_study_chain();
    let cal = simulate_chain(&init, &p, 150, SEED).unwrap();
    let mut cfg = ConformalConfig::new(0.0, 3);
    cfg.seed = SEED;
    cfg.max_permutations = 500;
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| score_all_candidates(&cal, &cfg, space()).unwrap())
    };
    let one = run(1);
    let four = run(4);
    let identical = one.len() == four.len()
        && one
            .iter()
            .zip(&four)
            .all(|(a, b)| a.forecast == b.forecast && a.p_value.to_bits() == b.p_value.to_bits());
    if !identical {
        failures.push("thread-count reproducibility");
    }
    let sets: Vec<HashSet<Vec<State>>> = [0.0, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5]
        .iter()
        .map(|&a| {
            one.iter()
                .filter(|c| c.p_value > a)
                .map(|c| c.forecast.states().to_vec())
                .collect()
        })
        .collect();
    if !sets.windows(2).all(|w| w[1].is_subset(&w[0])) {
        failures.push("CP nestedness");
    }

    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{cases} exhaustive block groups, HDR brute force, 10^5 randomized draws, nestedness, 1 vs 4 threads")
        } else {
            format!("failed: {failures:?}")
        },
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        println!(
            "{} criterion {}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            name,
            o.detail
        );
        results.push((name, o));
    };
    report("1 (marginal distribution anchor)", marginal_anchor());
    report("2 (analytic over-coverage)", analytic_over_coverage());
    let (study, elapsed) = study();
    report("3 (CP calibration)", cp_calibration(&study, elapsed));
    report("4 (endpoint behavior)", endpoint_behavior(&study));
    report("5 (likelihood cardinality anchors)", cardinality_anchors(&study));
    report("6 (degenerate single-state calibration)", degenerate_case());
    report("7 (property suites)", property_suites());

    let failed: Vec<&str> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
