//! Simulator, windowing and metric invariants over random inputs.

use otdr_core::dataset::{build_datasets, segment_and_label, window_starts, DatasetConfig, EventClass, WindowOpts};
use otdr_core::metrics::{denoise_metrics, prd, rmse, snr_db};
use otdr_core::sim::{inject_noise, random_layout, synthesize_clean_trace, EventSpec, EventType, LayoutConfig, SimConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn step(position_m: f64, loss_db: f64) -> EventSpec {
    EventSpec {
        position_m,
        event_type: EventType::NonReflective,
        loss_db,
        reflect_height_db: 0.0,
        terminates_fiber: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn clean_trace_without_reflections_never_rises(
        positions in prop::collection::vec(0.05f64..0.95, 0..4),
        losses in prop::collection::vec(0.1f64..5.0, 4),
    ) {
        let sim = SimConfig::default();
        let len = sim.fiber_length_km * 1000.0;
        let mut positions = positions;
        positions.sort_by(f64::total_cmp);
        positions.dedup_by(|a, b| (*a - *b).abs() < 0.01);
        let events: Vec<EventSpec> = positions.iter().zip(&losses).map(|(p, l)| step(p * len, *l)).collect();
        let t = synthesize_clean_trace(&sim, &events).unwrap();
        prop_assert!(t.is_clean);
        for w in t.samples.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn metric_identities(
        clean in prop::collection::vec(0.05f64..1.0, 10..200),
        noise in prop::collection::vec(-0.3f64..0.3, 200),
    ) {
        let n = clean.len();
        let den: Vec<f64> = clean.iter().zip(&noise).map(|(c, e)| c + e).collect();
        prop_assume!(den.iter().zip(&clean).any(|(a, b)| a != b));
        let energy: f64 = clean.iter().map(|v| v * v).sum();
        let r = rmse(&clean, &den).unwrap();
        let p = prd(&clean, &den).unwrap();
        prop_assert!((p - 100.0 * r * (n as f64 / energy).sqrt()).abs() <= 1e-9 * p);
        let s = snr_db(&clean, &den).unwrap();
        prop_assert!((s + 20.0 * (p / 100.0).log10()).abs() <= 1e-9 * s.abs().max(1.0));
        let m = denoise_metrics(&clean, &den, &den).unwrap();
        prop_assert_eq!(m.snr_imp_db, 0.0);
    }

    #[test]
    fn window_accounting(seed in any::<u64>(), stride in prop::sample::select(vec![50usize, 100])) {
        let sim = SimConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let events = random_layout(&sim, &LayoutConfig::default(), &mut rng);
        let clean = synthesize_clean_trace(&sim, &events).unwrap();
        let noisy = inject_noise(&clean, 5.0, seed).unwrap();
        let w = WindowOpts { len: 100, stride };
        let starts = window_starts(clean.samples.len(), w);
        let windows = segment_and_label(&sim, &clean, &noisy, w).unwrap();
        prop_assert!(windows.len() <= starts.len());
        let mut seen = 0;
        for (start, s) in &windows {
            prop_assert!(starts.contains(start));
            prop_assert_eq!(s.clean.len(), 100);
            // scaled by the clean maximum
            let hi = s.clean.iter().copied().fold(f64::MIN, f64::max);
            prop_assert!((hi - 1.0).abs() < 1e-12);
            prop_assert_eq!(s.position.is_some(), s.event_type != EventClass::NoEvent);
            prop_assert_eq!(s.cause, s.event_type.cause());
            if let Some(p) = s.position {
                let abs = start + p as usize;
                prop_assert!(events.iter().any(|e| e.sample_index(clean.sample_spacing_m) == abs));
                seen += 1;
            }
        }
        // no event is labeled twice
        prop_assert!(seen <= events.len() || stride < 100);
    }
}

#[test]
fn split_is_sixty_twenty_twenty_per_stratum() {
    let dc = DatasetConfig {
        windows_per_bucket: 40,
        snr_grid: vec![-3.0, 0.0, 5.0],
        ..DatasetConfig::default()
    };
    let ds = build_datasets(&SimConfig::default(), &LayoutConfig::default(), &dc, 5, "test").unwrap();
    let mut strata = std::collections::BTreeMap::<(usize, usize), [usize; 3]>::new();
    for (k, part) in [&ds.train, &ds.val, &ds.test].into_iter().enumerate() {
        for s in part {
            let b = ds.bucket(s).expect("bucketed");
            strata.entry((b, s.event_type.index())).or_default()[k] += 1;
            let recomputed = snr_db(&s.clean, &s.noisy).unwrap();
            assert!((recomputed - s.snr_in_db).abs() <= 0.05);
        }
    }
    assert_eq!(strata.len(), 12);
    for counts in strata.values() {
        let n = counts.iter().sum::<usize>() as f64;
        for (got, share) in counts.iter().zip([0.6, 0.2, 0.2]) {
            assert!((*got as f64 - share * n).abs() <= 1.0, "{counts:?}");
        }
    }
}
