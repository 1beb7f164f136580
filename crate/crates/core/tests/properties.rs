use std::collections::HashSet;

use proptest::prelude::*;

use markov_conformal::conformal::{p_value, score_all_candidates};
use markov_conformal::iblocks::{apply_permutation, decompose, for_each_permutation, BlockPermutation};
use markov_conformal::ingest::{
    exclusion_rule, label_states, read_states, respects_adjacency, write_states,
    CleaningConfig, CountrySeries, ExclusionRule, LabeledSeries, YearMonth,
};
use markov_conformal::likelihood::{hdr_set, rank_with_matrix, MASS_TOL};
use markov_conformal::markov::{estimate_transition_matrix, sequence_log_probability};
use markov_conformal::rng::substream;
use markov_conformal::{
    ConformalConfig, State, StateSequence, StateSpace, TransitionCounts, TransitionMatrix,
};

fn space(m: usize) -> StateSpace {
    StateSpace::new(m).unwrap()
}

/// A sequence over `m` states, its anchor (last state) and block count `D`.
fn anchored_sequence(max_d: usize) -> impl Strategy<Value = (StateSequence, State, usize)> {
    (2usize..=4)
        .prop_flat_map(|m| (Just(m), prop::collection::vec(0..m as State, 2..24)))
        .prop_filter_map("too many blocks", move |(m, states)| {
            let anchor = *states.last().unwrap();
            let d = states.iter().filter(|&&s| s == anchor).count() - 1;
            (d <= max_d).then(|| (StateSequence::new(states, space(m)).unwrap(), anchor, d))
        })
}

fn counts_of(seq: &StateSequence, m: usize) -> Vec<u64> {
    let c = TransitionCounts::from_states(seq.states(), m);
    (0..m * m).map(|k| c.get(k / m, k % m)).collect()
}

fn random_matrix(m: usize) -> impl Strategy<Value = TransitionMatrix> {
    prop::collection::vec(prop::collection::vec(0.0f64..1.0, m), m).prop_map(|rows| {
        let rows: Vec<Vec<f64>> = rows
            .into_iter()
            .map(|r| {
                let r: Vec<f64> = r.into_iter().map(|x| x + 1e-3).collect();
                let s: f64 = r.iter().sum();
                r.into_iter().map(|x| x / s).collect()
            })
            .collect();
        TransitionMatrix::from_rows(&rows).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn every_block_permutation_preserves_transition_counts((seq, anchor, d) in anchored_sequence(6)) {
        let m = 4;
        let dec = decompose(&seq, anchor).unwrap();
        prop_assert_eq!(dec.num_blocks(), d);
        let want = counts_of(&seq, m);
        let mut rng = substream(0, &[]);
        let mut seen = 0;
        for_each_permutation(d, 720, &mut rng, |order| {
            let perm = BlockPermutation::new(order.to_vec()).unwrap();
            let out = apply_permutation(&dec, &perm).unwrap();
            assert_eq!(out.len(), seq.len());
            assert_eq!(counts_of(&out, m), want);
            assert_eq!(out.first(), seq.first());
            assert_eq!(out.last(), seq.last());
            seen += 1;
        });
        prop_assert_eq!(seen as u128, markov_conformal::iblocks::factorial(d).unwrap());
    }

    #[test]
    fn permuted_paths_are_equally_likely(
        (seq, anchor, d) in anchored_sequence(5),
        p in random_matrix(4),
    ) {
        let dec = decompose(&seq, anchor).unwrap();
        let base = sequence_log_probability(&seq.states()[1..], seq.first(), &p);
        let mut rng = substream(1, &[]);
        for_each_permutation(d, 120, &mut rng, |order| {
            let out = apply_permutation(&dec, &BlockPermutation::new(order.to_vec()).unwrap()).unwrap();
            let lp = sequence_log_probability(&out.states()[1..], out.first(), &p);
            assert!((lp - base).abs() < 1e-9, "{lp} vs {base}");
        });
    }

    #[test]
    fn identity_round_trips((seq, anchor, d) in anchored_sequence(usize::MAX)) {
        let dec = decompose(&seq, anchor).unwrap();
        let out = apply_permutation(&dec, &BlockPermutation::identity(d)).unwrap();
        prop_assert_eq!(out, seq);
    }

    #[test]
    fn constant_sequences_are_all_singletons(len in 1usize..60, s in 0u8..4) {
        let seq = StateSequence::new(vec![s; len], space(4)).unwrap();
        prop_assert_eq!(decompose(&seq, s).unwrap().num_blocks(), len - 1);
    }

    #[test]
    fn estimates_are_stochastic_and_match_counts(
        states in prop::collection::vec(0u8..4, 2..200),
    ) {
        let seq = StateSequence::new(states.clone(), space(4)).unwrap();
        let p = estimate_transition_matrix(&seq, space(4)).unwrap();
        let visits = p.row_visits().unwrap();
        let mut direct = [[0u64; 4]; 4];
        for w in states.windows(2) {
            direct[w[0] as usize][w[1] as usize] += 1;
        }
        for i in 0..4 {
            prop_assert_eq!(visits[i], direct[i].iter().sum::<u64>());
            if visits[i] == 0 {
                prop_assert!(p.is_unvisited(i));
                continue;
            }
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for j in 0..4 {
                let scaled = p.get(i, j) * visits[i] as f64;
                prop_assert!((scaled - direct[i][j] as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn labels_respect_adjacency_and_are_deterministic(
        fatalities in prop::collection::vec(prop_oneof![Just(0u64), 1u64..500], 1..80),
    ) {
        let series = CountrySeries {
            country_id: "X".into(),
            start: YearMonth::new(2000, 1).unwrap(),
            fatalities,
        };
        let a = label_states(&series).unwrap();
        prop_assert!(respects_adjacency(a.states.states()));
        prop_assert_eq!(a, label_states(&series).unwrap());
    }

    #[test]
    fn appending_conflict_months_keeps_a_country_past_the_count_rule(
        fatalities in prop::collection::vec(prop_oneof![Just(0u64), 1u64..500], 1..80),
        extra in 1usize..20,
    ) {
        let cfg = CleaningConfig::default();
        let start = YearMonth::new(2000, 1).unwrap();
        let base = CountrySeries { country_id: "X".into(), start, fatalities: fatalities.clone() };
        let before = exclusion_rule(&label_states(&base).unwrap(), &cfg);
        let mut longer = fatalities;
        longer.extend(std::iter::repeat_n(7, extra));
        let grown = CountrySeries { country_id: "X".into(), start, fatalities: longer };
        let after = exclusion_rule(&label_states(&grown).unwrap(), &cfg);
        if before != Some(ExclusionRule::MinNonpeace) {
            prop_assert_ne!(after, Some(ExclusionRule::MinNonpeace));
        }
    }

    #[test]
    fn state_files_round_trip(
        series in prop::collection::vec(
            (prop::collection::vec(0u8..4, 1..40), 1990i32..2020, 1u8..=12),
            1..5,
        ),
    ) {
        let corpus: Vec<LabeledSeries> = series
            .into_iter()
            .enumerate()
            .map(|(k, (states, y, mo))| LabeledSeries {
                country_id: format!("C{k}"),
                start: YearMonth::new(y, mo).unwrap(),
                states: StateSequence::new(states, space(4)).unwrap(),
            })
            .collect();
        let mut buf = Vec::new();
        write_states(&mut buf, &corpus, "mem").unwrap();
        let back = read_states(buf.as_slice(), "mem").unwrap();
        prop_assert_eq!(back, corpus);
    }

    #[test]
    fn hdr_sets_are_minimal(
        p in (2usize..=4).prop_flat_map(random_matrix),
        horizon in 1usize..=4,
        last in 0u8..4,
        alpha in 0.0f64..0.99,
        seed in any::<u64>(),
    ) {
        let m = p.size();
        prop_assume!(m.pow(horizon as u32) <= 256);
        let last = last % m as State;
        let ranked = rank_with_matrix(&p, last, horizon, seed, 1_000_000).unwrap();
        let set = hdr_set(&ranked, alpha).unwrap();
        prop_assert!(!set.mass_deficit);
        prop_assert!(set.attained_mass >= 1.0 - alpha - MASS_TOL);
        let masses: Vec<f64> = ranked.entries().iter().map(|e| e.mass).collect();
        prop_assert!(masses.iter().all(|&w| w > 0.0));
        let target = 1.0 - alpha - MASS_TOL;
        if masses.len() <= 14 {
            for subset in 0u32..(1 << masses.len()) {
                if (subset.count_ones() as usize) < set.k {
                    let mass: f64 = (0..masses.len())
                        .filter(|i| subset >> i & 1 == 1)
                        .map(|i| masses[i])
                        .sum();
                    prop_assert!(mass < target, "smaller subset reaches the target");
                }
            }
        } else {
            let mut sorted = masses.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let best: f64 = sorted[..set.k - 1].iter().sum();
            prop_assert!(best < target);
        }
    }
}

/// Small calibration sequences keep every candidate's group enumerable.
fn small_calibration() -> impl Strategy<Value = StateSequence> {
    prop::collection::vec(0u8..3, 4..9).prop_map(|s| StateSequence::new(s, space(3)).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conformal_sets_are_nested_across_levels(cal in small_calibration(), seed in any::<u64>()) {
        let mut cfg = ConformalConfig::new(0.0, 2);
        cfg.seed = seed;
        cfg.max_permutations = 200;
        let scored = score_all_candidates(&cal, &cfg, space(3)).unwrap();
        let alphas = [0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9];
        let sets: Vec<HashSet<Vec<State>>> = alphas
            .iter()
            .map(|&a| {
                scored
                    .iter()
                    .filter(|c| c.p_value > a)
                    .map(|c| c.forecast.states().to_vec())
                    .collect()
            })
            .collect();
        for w in sets.windows(2) {
            prop_assert!(w[1].is_subset(&w[0]));
        }
        for c in &scored {
            prop_assert!((0.0..=1.0).contains(&c.p_value));
        }
    }

    #[test]
    fn calibration_prefix_permutations_leave_p_values_unchanged(
        cal in small_calibration(),
        middle in 0u8..3,
        seed in any::<u64>(),
        pick in any::<u64>(),
    ) {
        let anchor = cal.last();
        let candidate = StateSequence::new(vec![middle, anchor], space(3)).unwrap();
        let mut cfg = ConformalConfig::new(0.1, 2);
        cfg.seed = seed;
        cfg.max_permutations = 1_000_000;
        let aug_d = cal.states().iter().filter(|&&s| s == anchor).count() + (middle == anchor) as usize;
        prop_assume!(aug_d <= 8);

        let dec = decompose(&cal, anchor).unwrap();
        let d = dec.num_blocks();
        let mut orders = Vec::new();
        for_each_permutation(d, 40_320, &mut substream(0, &[]), |o| orders.push(o.to_vec()));
        let order = orders[(pick % orders.len() as u64) as usize].clone();
        let shuffled = apply_permutation(&dec, &BlockPermutation::new(order).unwrap()).unwrap();

        let a = p_value(&candidate, &cal, &cfg, space(3)).unwrap();
        let b = p_value(&candidate, &shuffled, &cfg, space(3)).unwrap();
        prop_assert_eq!(a.num_permutations, b.num_permutations);
        prop_assert_eq!((a.exceed_count, a.tie_count), (b.exceed_count, b.tie_count));
        prop_assert_eq!(a.u, b.u);
        prop_assert!((a.p_value - b.p_value).abs() < 1e-12);
    }
}

#[test]
fn conformal_sets_do_not_depend_on_worker_count() {
    let (p, init) = markov_conformal::markov::conflict_study_chain();
    let cal = markov_conformal::markov::simulate_chain(&init, &p, 120, 99).unwrap();
    let mut cfg = ConformalConfig::new(0.2, 3);
    cfg.max_permutations = 300;
    cfg.seed = 4;
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| score_all_candidates(&cal, &cfg, space(4)).unwrap())
    };
    let one = run(1);
    let four = run(4);
    assert_eq!(one.len(), 64);
    for (a, b) in one.iter().zip(&four) {
        assert_eq!(a.p_value.to_bits(), b.p_value.to_bits());
        assert_eq!(a.forecast, b.forecast);
    }
}
