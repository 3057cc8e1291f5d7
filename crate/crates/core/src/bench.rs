//! Timed, seeded, multi-method benchmark harness.
//!
//! Every (property, method, seed) triple is attacked once under a shared
//! timeout. Bookkeeping convention: a run that fails contributes exactly the
//! timeout value to mean times. Summaries report per-seed and seed-averaged
//! mean time and timeout percentage plus success-rate-over-time curves.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{
    cw_attack, mi_fgsm_plus, pgd_attack, AttackOutcome, CwConfig, MiFgsmConfig, PgdConfig,
};
use crate::datagen::PropertyRecord;
use crate::error::{Error, Result};
use crate::gnn::{advgnn_attack, AdvGnnConfig, GnnParams};
use crate::netcore::Network;

/// One attack method with its configuration. Seeds and deadlines are filled
/// in per run by the harness.
#[derive(Debug, Clone)]
pub enum AttackMethod {
    Pgd(PgdConfig),
    MiFgsm(MiFgsmConfig),
    Cw(CwConfig),
    AdvGnn {
        params: GnnParams,
        cfg: AdvGnnConfig,
    },
    /// Harness-test stub that succeeds immediately.
    InstantStub,
    /// Harness-test stub that runs out the clock.
    NeverStub,
}

/// A named method entry for the harness.
#[derive(Debug, Clone)]
pub struct BenchMethod {
    pub name: String,
    pub method: AttackMethod,
}

impl BenchMethod {
    /// Default configuration for a method name. `advgnn` needs parameters.
    pub fn by_name(name: &str, gnn_params: Option<&GnnParams>) -> Result<Self> {
        let method = match name {
            "pgd" => AttackMethod::Pgd(PgdConfig::default()),
            "mifgsm" => AttackMethod::MiFgsm(MiFgsmConfig::default()),
            "cw" => AttackMethod::Cw(CwConfig::default()),
            "advgnn" => {
                let params = gnn_params.ok_or_else(|| {
                    Error::config("method 'advgnn' needs trained parameters")
                })?;
                AttackMethod::AdvGnn {
                    params: params.clone(),
                    cfg: AdvGnnConfig::default(),
                }
            }
            other => return Err(Error::UnknownMethod(other.into())),
        };
        Ok(BenchMethod {
            name: name.into(),
            method,
        })
    }
}

/// One benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub property_id: usize,
    pub method: String,
    pub seed: u64,
    pub success: bool,
    /// Seconds; equals the timeout for unsuccessful runs.
    pub time: f64,
    pub iterations: usize,
    pub restarts: usize,
}

fn run_one(
    net: &Network,
    record: &PropertyRecord,
    method: &AttackMethod,
    seed: u64,
    timeout: Duration,
) -> Result<AttackOutcome> {
    let prop = record.property(net)?;
    match method {
        AttackMethod::Pgd(base) => {
            let cfg = PgdConfig {
                seed,
                time_budget: Some(timeout),
                ..base.clone()
            };
            pgd_attack(net, &prop, &cfg)
        }
        AttackMethod::MiFgsm(base) => {
            let cfg = MiFgsmConfig {
                seed,
                time_budget: Some(timeout),
                ..base.clone()
            };
            mi_fgsm_plus(net, &prop, &cfg)
        }
        AttackMethod::Cw(base) => {
            let cfg = CwConfig {
                time_budget: Some(timeout),
                ..base.clone()
            };
            cw_attack(net, &prop, &cfg)
        }
        AttackMethod::AdvGnn { params, cfg: base } => {
            let cfg = AdvGnnConfig {
                seed,
                time_budget: Some(timeout),
                ..base.clone()
            };
            advgnn_attack(net, &prop, params, &cfg)
        }
        AttackMethod::InstantStub => Ok(AttackOutcome {
            success: true,
            adversarial_point: Some(record.image.clone()),
            final_loss: 0.0,
            iterations_used: 0,
            restarts_used: 1,
            wall_time: 0.0,
            iterates: Vec::new(),
        }),
        AttackMethod::NeverStub => Ok(AttackOutcome {
            success: false,
            adversarial_point: None,
            final_loss: f64::NEG_INFINITY,
            iterations_used: 0,
            restarts_used: 0,
            wall_time: timeout.as_secs_f64(),
            iterates: Vec::new(),
        }),
    }
}

/// Harness configuration.
#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub timeout: Duration,
    pub seeds: Vec<u64>,
    /// Dispatch runs to a worker pool. Results are collected in
    /// (property, method, seed) order either way.
    pub parallel: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            timeout: Duration::from_secs(100),
            seeds: vec![1, 2, 3],
            parallel: false,
        }
    }
}

/// Attack every (property, method, seed) triple once. Wall time is measured
/// around the attack call alone (the learned attack's bound and dual
/// precomputation happens inside that call and is therefore charged to it);
/// unsuccessful runs are recorded at the timeout value.
pub fn run_benchmark(
    net: &Network,
    dataset: &[PropertyRecord],
    methods: &[BenchMethod],
    cfg: &BenchConfig,
) -> Result<Vec<RunRecord>> {
    let timeout_secs = cfg.timeout.as_secs_f64();
    let tasks: Vec<(usize, usize, u64)> = dataset
        .iter()
        .enumerate()
        .flat_map(|(pid, _)| {
            methods.iter().enumerate().flat_map(move |(mid, _)| {
                cfg.seeds.iter().map(move |&seed| (pid, mid, seed))
            })
        })
        .collect();
    let run = |&(pid, mid, seed): &(usize, usize, u64)| -> Result<RunRecord> {
        let method = &methods[mid];
        let started = Instant::now();
        let outcome = run_one(net, &dataset[pid], &method.method, seed, cfg.timeout)?;
        let elapsed = started.elapsed().as_secs_f64();
        let time = if outcome.success {
            elapsed.min(timeout_secs)
        } else {
            timeout_secs
        };
        Ok(RunRecord {
            property_id: pid,
            method: method.name.clone(),
            seed,
            success: outcome.success,
            time,
            iterations: outcome.iterations_used,
            restarts: outcome.restarts_used,
        })
    };
    if cfg.parallel {
        tasks.par_iter().map(run).collect()
    } else {
        tasks.iter().map(run).collect()
    }
}

/// Per-seed aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub mean_time: f64,
    pub pct_timeout: f64,
}

/// Per-method aggregate with the success-rate-over-time curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    /// Mean over all (property, seed) runs; failures count the timeout.
    pub mean_time: f64,
    pub pct_timeout: f64,
    pub per_seed: Vec<SeedSummary>,
    /// Nondecreasing (time, cumulative % solved) points at each distinct
    /// solve time.
    pub curve: Vec<(f64, f64)>,
}

/// Benchmark summary over all methods.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BenchSummary {
    pub methods: Vec<MethodSummary>,
}

fn mean(values: impl Iterator<Item = f64>, count: usize) -> f64 {
    if count == 0 {
        return 0.0;
    }
    values.sum::<f64>() / count as f64
}

/// Aggregate run records into per-method, per-seed, and curve statistics.
/// Methods appear in first-seen order; seeds in first-seen order per method.
pub fn summarize(records: &[RunRecord]) -> BenchSummary {
    let mut method_names: Vec<String> = Vec::new();
    for r in records {
        if !method_names.contains(&r.method) {
            method_names.push(r.method.clone());
        }
    }
    let mut methods = Vec::with_capacity(method_names.len());
    for name in method_names {
        let rows: Vec<&RunRecord> = records.iter().filter(|r| r.method == name).collect();
        let total = rows.len();
        let mean_time = mean(rows.iter().map(|r| r.time), total);
        let timeouts = rows.iter().filter(|r| !r.success).count();
        let pct_timeout = if total == 0 {
            0.0
        } else {
            100.0 * timeouts as f64 / total as f64
        };
        let mut seeds: Vec<u64> = Vec::new();
        for r in &rows {
            if !seeds.contains(&r.seed) {
                seeds.push(r.seed);
            }
        }
        let per_seed = seeds
            .iter()
            .map(|&seed| {
                let sr: Vec<&&RunRecord> = rows.iter().filter(|r| r.seed == seed).collect();
                let n = sr.len();
                SeedSummary {
                    seed,
                    mean_time: mean(sr.iter().map(|r| r.time), n),
                    pct_timeout: 100.0 * sr.iter().filter(|r| !r.success).count() as f64
                        / n.max(1) as f64,
                }
            })
            .collect();
        // Success curve: cumulative share of runs solved by each time.
        let mut solve_times: Vec<f64> = rows
            .iter()
            .filter(|r| r.success)
            .map(|r| r.time)
            .collect();
        solve_times.sort_by(f64::total_cmp);
        let mut curve: Vec<(f64, f64)> = Vec::new();
        for (i, &t) in solve_times.iter().enumerate() {
            let pct = 100.0 * (i + 1) as f64 / total as f64;
            match curve.last_mut() {
                Some(last) if last.0 == t => last.1 = pct,
                _ => curve.push((t, pct)),
            }
        }
        methods.push(MethodSummary {
            method: name,
            mean_time,
            pct_timeout,
            per_seed,
            curve,
        });
    }
    BenchSummary { methods }
}

/// Output format for [`emit_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    /// `summary.csv` (per-method table with per-seed columns) and
    /// `curves.csv`.
    Csv,
    /// `summary.json`, round-trippable into [`BenchSummary`].
    Json,
    /// `curves.csv` only: `method,time,pct_solved` rows for plotting.
    PlotData,
}

fn write_summary_csv(summary: &BenchSummary, path: &Path) -> Result<()> {
    let mut seeds: Vec<u64> = Vec::new();
    for m in &summary.methods {
        for s in &m.per_seed {
            if !seeds.contains(&s.seed) {
                seeds.push(s.seed);
            }
        }
    }
    let mut text = String::from("method,mean_time,pct_timeout");
    for seed in &seeds {
        text.push_str(&format!(",mean_time_s{seed},pct_timeout_s{seed}"));
    }
    text.push('\n');
    for m in &summary.methods {
        text.push_str(&format!("{},{},{}", m.method, m.mean_time, m.pct_timeout));
        for seed in &seeds {
            match m.per_seed.iter().find(|s| s.seed == *seed) {
                Some(s) => text.push_str(&format!(",{},{}", s.mean_time, s.pct_timeout)),
                None => text.push_str(",,"),
            }
        }
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn write_curves_csv(summary: &BenchSummary, path: &Path) -> Result<()> {
    let mut text = String::from("method,time,pct_solved\n");
    for m in &summary.methods {
        for (t, pct) in &m.curve {
            text.push_str(&format!("{},{},{}\n", m.method, t, pct));
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Write the summary in the requested format into `out_dir`; returns the
/// paths written.
pub fn emit_report(
    summary: &BenchSummary,
    format: ReportFormat,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    match format {
        ReportFormat::Csv => {
            let summary_path = dir.join("summary.csv");
            write_summary_csv(summary, &summary_path)?;
            written.push(summary_path);
            let curves_path = dir.join("curves.csv");
            write_curves_csv(summary, &curves_path)?;
            written.push(curves_path);
        }
        ReportFormat::Json => {
            let path = dir.join("summary.json");
            std::fs::write(&path, serde_json::to_string_pretty(summary)?)?;
            written.push(path);
        }
        ReportFormat::PlotData => {
            let path = dir.join("curves.csv");
            write_curves_csv(summary, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(method: &str, seed: u64, success: bool, time: f64) -> RunRecord {
        RunRecord {
            property_id: 0,
            method: method.into(),
            seed,
            success,
            time,
            iterations: 0,
            restarts: 0,
        }
    }

    #[test]
    fn timeout_contributes_full_value_to_mean() {
        // times [10, 100(timeout), 30] -> mean 46.67, timeout 33.3%
        let records = vec![
            record("pgd", 1, true, 10.0),
            record("pgd", 1, false, 100.0),
            record("pgd", 1, true, 30.0),
        ];
        let summary = summarize(&records);
        let m = &summary.methods[0];
        assert!((m.mean_time - 140.0 / 3.0).abs() < 1e-12);
        assert!((m.pct_timeout - 100.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn identical_seeds_average_to_themselves() {
        let records = vec![
            record("pgd", 1, true, 5.0),
            record("pgd", 2, true, 5.0),
            record("pgd", 3, true, 5.0),
        ];
        let summary = summarize(&records);
        let m = &summary.methods[0];
        assert_eq!(m.mean_time, 5.0);
        for s in &m.per_seed {
            assert_eq!(s.mean_time, 5.0);
            assert_eq!(s.pct_timeout, 0.0);
        }
    }

    #[test]
    fn curve_from_known_times() {
        // times {1, 2, 2, timeout}: 25% at 1, 75% at 2, flat after.
        let records = vec![
            record("pgd", 1, true, 1.0),
            record("pgd", 1, true, 2.0),
            record("pgd", 1, true, 2.0),
            record("pgd", 1, false, 100.0),
        ];
        let summary = summarize(&records);
        assert_eq!(summary.methods[0].curve, vec![(1.0, 25.0), (2.0, 75.0)]);
    }

    #[test]
    fn seed_average_is_mean_of_per_seed() {
        let records = vec![
            record("pgd", 1, true, 10.0),
            record("pgd", 1, true, 20.0),
            record("pgd", 2, true, 30.0),
            record("pgd", 2, true, 40.0),
        ];
        let summary = summarize(&records);
        let m = &summary.methods[0];
        let per_seed_mean: f64 =
            m.per_seed.iter().map(|s| s.mean_time).sum::<f64>() / m.per_seed.len() as f64;
        assert!((m.mean_time - per_seed_mean).abs() < 1e-12);
    }

    #[test]
    fn unknown_method_name_rejected() {
        let err = BenchMethod::by_name("zap", None).unwrap_err();
        assert!(matches!(err, Error::UnknownMethod(_)));
        assert!(BenchMethod::by_name("advgnn", None).is_err());
        assert!(BenchMethod::by_name("pgd", None).is_ok());
    }

    #[test]
    fn empty_summary_emits_headers_only() {
        let dir = std::env::temp_dir().join("advgnn-bench-empty");
        let written = emit_report(&BenchSummary::default(), ReportFormat::Csv, &dir).unwrap();
        let text = std::fs::read_to_string(&written[0]).unwrap();
        assert_eq!(text, "method,mean_time,pct_timeout\n");
        let curves = std::fs::read_to_string(&written[1]).unwrap();
        assert_eq!(curves, "method,time,pct_solved\n");
    }

    #[test]
    fn json_report_round_trips() {
        let records = vec![
            record("pgd", 1, true, 1.5),
            record("pgd", 2, false, 20.0),
            record("cw", 1, true, 0.25),
        ];
        let summary = summarize(&records);
        let dir = std::env::temp_dir().join("advgnn-bench-json");
        let written = emit_report(&summary, ReportFormat::Json, &dir).unwrap();
        let text = std::fs::read_to_string(&written[0]).unwrap();
        let back: BenchSummary = serde_json::from_str(&text).unwrap();
        assert_eq!(back, summary);
    }

    #[test]
    fn curve_csv_is_monotone() {
        let records = vec![
            record("pgd", 1, true, 3.0),
            record("pgd", 1, true, 1.0),
            record("pgd", 2, true, 2.0),
            record("pgd", 2, false, 10.0),
        ];
        let summary = summarize(&records);
        let dir = std::env::temp_dir().join("advgnn-bench-monotone");
        let written = emit_report(&summary, ReportFormat::PlotData, &dir).unwrap();
        let text = std::fs::read_to_string(&written[0]).unwrap();
        let mut last_t = f64::NEG_INFINITY;
        let mut last_pct = f64::NEG_INFINITY;
        for line in text.lines().skip(1) {
            let mut parts = line.split(',');
            parts.next();
            let t: f64 = parts.next().unwrap().parse().unwrap();
            let pct: f64 = parts.next().unwrap().parse().unwrap();
            assert!(t >= last_t && pct >= last_pct, "curve not monotone: {line}");
            last_t = t;
            last_pct = pct;
        }
    }
}
