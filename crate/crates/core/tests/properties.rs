use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use uplift_core::attender::attender_map;
use uplift_core::bench::{read_records, write_records, BenchRecord, Method};
use uplift_core::training::{LossTrace, TraceRow, TrainConfig};
use uplift_core::{attend, attend_reference, AttenderParams, FeatureMap, Neighborhood, Pattern};

fn pattern() -> impl Strategy<Value = Pattern> {
    prop::sample::select(Pattern::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attend_agrees_and_stays_in_range(
        seed in any::<u64>(),
        p in pattern(),
        h in 1usize..7,
        w in 1usize..7,
        c in prop::sample::select(vec![1usize, 2, 3, 4]),
        scale in 0.1f64..20.0,
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = Neighborhood::named(p);
        let v = FeatureMap::<f32>::random_uniform(h, w, 3, 1.0, &mut r);
        let g = FeatureMap::<f32>::random_uniform(h * c, w * c, 4, scale, &mut r);
        let params = AttenderParams::init(4, &n, &mut r);
        let fast = attend(&g, &v, &n, &params).unwrap();
        let slow = attend_reference(&g, &v, &n, &params).unwrap();
        prop_assert!(fast.max_abs_diff(&slow).unwrap() <= 1e-5);
        // Distribution preservation: never outside the global range of V.
        for (ch, (lo, hi)) in v.channel_ranges().into_iter().enumerate() {
            for px in fast.data().chunks_exact(3) {
                prop_assert!(px[ch] >= lo - 1e-6 && px[ch] <= hi + 1e-6);
            }
        }
        let a = attender_map(&g, &params).unwrap();
        for px in a.data().chunks_exact(n.len()) {
            prop_assert!(px.iter().all(|&x| x >= 0.0));
            prop_assert!((px.iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn bench_csv_round_trip(rows in prop::collection::vec((0usize..4, 1usize..100_000, 0usize..9, 1e-6f64..1e7, 0usize..1 << 40), 0..20)) {
        let recs: Vec<BenchRecord> = rows
            .into_iter()
            .map(|(m, tokens, repeat, ms, bytes)| BenchRecord { method: Method::ALL[m], tokens, repeat, ms, bytes })
            .collect();
        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();
        prop_assert_eq!(read_records(&buf[..]).unwrap(), recs);
    }

    #[test]
    fn loss_trace_round_trip(losses in prop::collection::vec((0f64..10.0, 0f64..10.0), 1..30)) {
        let mut trace = LossTrace::new(&[1, 2]);
        for (step, (a, b)) in losses.into_iter().enumerate() {
            trace.rows.push(TraceRow { step, total: a + b, per_depth: vec![a, b] });
        }
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        prop_assert_eq!(LossTrace::read_csv(&buf[..]).unwrap(), trace);
    }

    #[test]
    fn train_config_text_round_trip(steps in 1usize..10_000, lr in 1e-6f64..1.0, seed in any::<u64>(), p in pattern(), refiner in any::<bool>()) {
        let cfg = TrainConfig {
            steps,
            learning_rate: lr,
            seed,
            neighborhood: Neighborhood::named(p),
            use_refiner: refiner,
            ..TrainConfig::default()
        };
        prop_assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
