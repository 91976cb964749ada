mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use kvverify::analytics::{optimize_inter, path_costs, Capacities, Path, PathParams};
use kvverify::config::{load_config, AcceptanceDraws, IterationTimeMode, Request};
use kvverify::scheduler::{admit, AdmitOutcome, ReserveRings};
use kvverify::specloop::{
    run_autoregressive, run_speculative, sequence_kl_chain, sequence_kl_direct, HashOracle, PerturbedOracle,
    ToyAutoregressiveModel,
};

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, ..ProptestConfig::default() })]

    #[test]
    fn config_survives_toml_round_trip(
        x in 1u32..64,
        w in 2u32..256,
        c in 0.01f64..1.0,
        batch in 1u32..64,
        kv in 1u64..100_000_000_000,
        k in 1u32..10_000,
        fixed in proptest::option::of(1e-4f64..1.0),
        mean in any::<bool>(),
    ) {
        let mut cfg = common::long_context();
        cfg.runtime.draft_length = x;
        cfg.runtime.lookahead_window = w;
        cfg.runtime.compression_ratio = c;
        cfg.runtime.fixed_iteration_time_s = fixed;
        cfg.runtime.iteration_time_mode = if fixed.is_some() { IterationTimeMode::Fixed } else { IterationTimeMode::Derived };
        cfg.runtime.acceptance_draws = if mean { AcceptanceDraws::DeterministicMean } else { AcceptanceDraws::Sampled };
        cfg.scenario.batch_size = batch;
        cfg.scenario.kv_full_bytes = kv;
        cfg.scenario.output_tokens = k;
        let back = load_config(&cfg.to_toml()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn speculation_is_lossless(
        vocab in 2u32..=8,
        seed in any::<u64>(),
        disagree in 0.0f64..=1.0,
        k in 1usize..=64,
        x in 1usize..=8,
        prompt in proptest::collection::vec(0u32..2, 0..4),
    ) {
        let verifier = HashOracle { vocab, seed };
        let drafter = PerturbedOracle { base: verifier, vocab, seed: seed ^ 0xABCD, disagree };
        let spec = run_speculative(&drafter, &verifier, &prompt, k, x);
        prop_assert_eq!(spec.output, run_autoregressive(&verifier, &prompt, k));
        prop_assert!(spec.accepted_lengths.iter().all(|&a| (1..=x + 1).contains(&a)));
    }

    #[test]
    fn chain_rule_matches_enumeration(vocab in 2usize..=4, horizon in 1usize..=5, seed in any::<u64>(), strength in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let full = ToyAutoregressiveModel::random(vocab, horizon, &mut rng).unwrap();
        let lossy = full.perturbed(strength, &mut rng);
        let d = sequence_kl_direct(&full, &lossy, horizon).unwrap().finite().unwrap();
        let c = sequence_kl_chain(&full, &lossy, horizon).unwrap().finite().unwrap();
        prop_assert!((d - c).abs() <= 1e-10);
        prop_assert!(d >= -1e-12);
    }

    #[test]
    fn rings_stay_within_capacity(
        ops in proptest::collection::vec((0u8..3, 1u64..8, 0usize..16), 1..200),
        window in 4usize..40,
        x in 1u32..40,
    ) {
        let gb = 1_000_000_000u64;
        let mut rings = ReserveRings::new(window, 0.03, 5e10, 96 * gb, 50 * gb);
        let mut live: Vec<u64> = Vec::new();
        for (i, (op, size, pick)) in ops.into_iter().enumerate() {
            match op {
                0 => {
                    let r = Request {
                        id: i as u64,
                        arrival: 0.0,
                        kv_full_bytes: size * gb,
                        compression_ratio: 0.25,
                        output_tokens: 10,
                        speculating: true,
                    };
                    if let AdmitOutcome::Reserved(res) = admit(&r, &mut rings, x) {
                        prop_assert!(res.verify_iteration >= rings.origin());
                        live.push(res.request_id);
                    }
                }
                1 if !live.is_empty() => {
                    let id = live.remove(pick % live.len());
                    prop_assert!(rings.release(id).is_ok());
                    prop_assert!(rings.release(id).is_err());
                }
                _ => {
                    for late in rings.advance() {
                        live.retain(|&id| id != late.request_id);
                    }
                }
            }
            prop_assert!(rings.check_invariants().is_ok());
            for w in 0..rings.window() {
                prop_assert!(rings.weights_bytes() + rings.kv_resident() + rings.hbm_inflight(w) <= rings.hbm_capacity());
                prop_assert!(rings.bw_reserved(w) <= 1.0 + 1e-12);
            }
        }
        for id in live {
            rings.release(id).unwrap();
        }
        prop_assert!((0..rings.window()).all(|w| rings.bw_units(w) == 0 && rings.hbm_inflight(w) == 0));
    }

    #[test]
    fn lp_solutions_are_feasible_and_homogeneous(
        k in 16u32..1024,
        x in 1u32..64,
        gamma in 0.2f64..=1.0,
        c in 0.05f64..0.95,
        kv in 0.5e9f64..16e9,
        bw_h in 20e9f64..200e9,
        bw_l in 1e9f64..20e9,
        tl in 0.005f64..0.05,
        tr in 0.005f64..0.05,
        gl in 1u32..8,
        gr in 0u32..8,
        b_max in 1u32..32,
    ) {
        let p = PathParams { k, x, gamma, c, kv_full: kv, bw_h, bw_l, t_tok_local: tl, t_tok_remote: tr };
        let costs: Vec<_> = Path::ALL.iter().map(|&path| path_costs(path, &p).unwrap()).collect();
        let caps = Capacities { local_gpus: gl as f64, remote_gpus: gr as f64, b_max: b_max as f64 };
        let sol = optimize_inter(&costs, &caps, k).unwrap();
        for (_, lhs, cap) in &sol.usage {
            prop_assert!(*lhs <= cap * (1.0 + 1e-9) + 1e-12);
        }
        prop_assert!(sol.rates.iter().all(|r| r.1 >= 0.0));
        if gr == 0 {
            prop_assert!(sol.rates.iter().filter(|r| r.0 != Path::B1).all(|r| r.1 == 0.0));
        }
        let doubled = Capacities { local_gpus: 2.0 * caps.local_gpus, remote_gpus: 2.0 * caps.remote_gpus, ..caps };
        let sol2 = optimize_inter(&costs, &doubled, k).unwrap();
        prop_assert!((sol2.throughput - 2.0 * sol.throughput).abs() <= 1e-9 * sol2.throughput);
    }
}
