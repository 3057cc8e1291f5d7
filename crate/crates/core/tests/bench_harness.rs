//! Harness behavior end to end: record counts, stub methods, timeout
//! bookkeeping with real attacks, and report emission.

use std::time::Duration;

use advgnn_core::bench::{
    emit_report, run_benchmark, summarize, AttackMethod, BenchConfig, BenchMethod, ReportFormat,
};
use advgnn_core::datagen::{Provenance, PropertyRecord};
use advgnn_core::netcore::Network;
use advgnn_core::synth::{classified_interior_property, random_network};
use advgnn_core::attacks::PgdConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_dataset(net: &Network, rng: &mut ChaCha8Rng, count: usize, eps: f64) -> Vec<PropertyRecord> {
    (0..count)
        .map(|_| {
            let prop = classified_interior_property(rng, net, 0.2);
            PropertyRecord {
                image: prop.ball.center.clone(),
                y: prop.y,
                y_tar: prop.y_tar,
                epsilon: eps,
                provenance: Provenance {
                    eta: 1e-3,
                    restarts: 1,
                    pgd_steps: 10,
                    pgd_lr: 1e-2,
                    seed: 0,
                    easy_shift: None,
                },
            }
        })
        .collect()
}

#[test]
fn record_count_is_product_of_axes() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xB0);
    let net = random_network(&mut rng, &[3, 6, 3]);
    let dataset = tiny_dataset(&net, &mut rng, 4, 0.3);
    let methods = vec![
        BenchMethod {
            name: "instant".into(),
            method: AttackMethod::InstantStub,
        },
        BenchMethod {
            name: "never".into(),
            method: AttackMethod::NeverStub,
        },
    ];
    let cfg = BenchConfig {
        timeout: Duration::from_millis(50),
        seeds: vec![1, 2, 3],
        parallel: false,
    };
    let records = run_benchmark(&net, &dataset, &methods, &cfg).unwrap();
    assert_eq!(records.len(), 4 * 2 * 3);
    // Deterministic (property, method, seed) order.
    assert_eq!(records[0].property_id, 0);
    assert_eq!(records[0].method, "instant");
    assert_eq!(records[0].seed, 1);
    assert_eq!(records[1].seed, 2);
    assert_eq!(records[3].method, "never");
}

#[test]
fn stub_methods_pin_the_summary_extremes() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xB1);
    let net = random_network(&mut rng, &[2, 4, 2]);
    let dataset = tiny_dataset(&net, &mut rng, 3, 0.2);
    let timeout = Duration::from_millis(80);
    let methods = vec![
        BenchMethod {
            name: "instant".into(),
            method: AttackMethod::InstantStub,
        },
        BenchMethod {
            name: "never".into(),
            method: AttackMethod::NeverStub,
        },
    ];
    let cfg = BenchConfig {
        timeout,
        seeds: vec![7],
        parallel: false,
    };
    let summary = summarize(&run_benchmark(&net, &dataset, &methods, &cfg).unwrap());
    let instant = summary.methods.iter().find(|m| m.method == "instant").unwrap();
    let never = summary.methods.iter().find(|m| m.method == "never").unwrap();
    assert_eq!(instant.pct_timeout, 0.0);
    assert_eq!(instant.curve.last().unwrap().1, 100.0);
    assert!(instant.mean_time < timeout.as_secs_f64() / 2.0);
    assert_eq!(never.pct_timeout, 100.0);
    assert_eq!(never.mean_time, timeout.as_secs_f64());
    assert!(never.curve.is_empty());
}

/// Real attacks under a real (tiny) timeout: time fields never exceed the
/// timeout and unsuccessful runs carry exactly the timeout value.
#[test]
fn real_methods_respect_timeout_bookkeeping() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xB2);
    let net = random_network(&mut rng, &[3, 8, 6, 3]);
    // Hard properties (tiny radius) force timeouts; easy ones finish fast.
    let mut dataset = tiny_dataset(&net, &mut rng, 2, 1e-6);
    dataset.extend(tiny_dataset(&net, &mut rng, 2, 0.5));
    let timeout = Duration::from_millis(100);
    let methods = vec![
        BenchMethod::by_name("pgd", None).unwrap(),
        BenchMethod::by_name("mifgsm", None).unwrap(),
    ];
    let cfg = BenchConfig {
        timeout,
        seeds: vec![1, 2],
        parallel: false,
    };
    let records = run_benchmark(&net, &dataset, &methods, &cfg).unwrap();
    assert_eq!(records.len(), 4 * 2 * 2);
    for r in &records {
        assert!(r.time <= timeout.as_secs_f64() + 1e-12);
        if !r.success {
            assert_eq!(r.time, timeout.as_secs_f64());
        }
    }
    let summary = summarize(&records);
    for m in &summary.methods {
        let mut last = 0.0;
        for &(t, pct) in &m.curve {
            assert!(t >= last);
            last = t;
            assert!(pct <= 100.0);
        }
        // The curve tops out at 100 − %timeout.
        let final_pct = m.curve.last().map_or(0.0, |&(_, pct)| pct);
        assert!((final_pct - (100.0 - m.pct_timeout)).abs() < 1e-9);
    }
}

#[test]
fn parallel_dispatch_keeps_deterministic_order_and_outcomes() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xB3);
    let net = random_network(&mut rng, &[3, 6, 3]);
    let dataset = tiny_dataset(&net, &mut rng, 3, 0.4);
    let methods = vec![BenchMethod {
        name: "pgd".into(),
        method: AttackMethod::Pgd(PgdConfig {
            steps: 25,
            max_restarts: Some(3),
            ..PgdConfig::default()
        }),
    }];
    let base = BenchConfig {
        timeout: Duration::from_secs(5),
        seeds: vec![1, 2],
        parallel: false,
    };
    let seq = run_benchmark(&net, &dataset, &methods, &base).unwrap();
    let par = run_benchmark(
        &net,
        &dataset,
        &methods,
        &BenchConfig {
            parallel: true,
            ..base
        },
    )
    .unwrap();
    assert_eq!(seq.len(), par.len());
    for (a, b) in seq.iter().zip(&par) {
        assert_eq!(a.property_id, b.property_id);
        assert_eq!(a.method, b.method);
        assert_eq!(a.seed, b.seed);
        assert_eq!(a.success, b.success);
        assert_eq!(a.iterations, b.iterations);
        assert_eq!(a.restarts, b.restarts);
    }
}

#[test]
fn reports_round_trip_and_stay_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xB4);
    let net = random_network(&mut rng, &[2, 5, 2]);
    let dataset = tiny_dataset(&net, &mut rng, 3, 0.4);
    let methods = vec![
        BenchMethod::by_name("pgd", None).unwrap(),
        BenchMethod {
            name: "never".into(),
            method: AttackMethod::NeverStub,
        },
    ];
    let cfg = BenchConfig {
        timeout: Duration::from_millis(200),
        seeds: vec![1, 2, 3],
        parallel: false,
    };
    let summary = summarize(&run_benchmark(&net, &dataset, &methods, &cfg).unwrap());
    let dir = std::env::temp_dir().join("advgnn-bench-harness");
    let json_paths = emit_report(&summary, ReportFormat::Json, &dir).unwrap();
    let text = std::fs::read_to_string(&json_paths[0]).unwrap();
    let back: advgnn_core::bench::BenchSummary = serde_json::from_str(&text).unwrap();
    assert_eq!(back, summary);
    let csv_paths = emit_report(&summary, ReportFormat::Csv, &dir).unwrap();
    let csv = std::fs::read_to_string(&csv_paths[0]).unwrap();
    assert!(csv.starts_with("method,mean_time,pct_timeout"));
    assert!(csv.contains("mean_time_s1"));
    // Seed-average equals the arithmetic mean of per-seed means.
    for m in &summary.methods {
        let per_seed: f64 =
            m.per_seed.iter().map(|s| s.mean_time).sum::<f64>() / m.per_seed.len() as f64;
        assert!((m.mean_time - per_seed).abs() < 1e-12);
    }
}
