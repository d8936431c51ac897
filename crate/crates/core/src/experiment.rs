//! Experiment grid: configuration, parallel execution and CSV output.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::budget::Deadline;
use crate::error::{IrlError, Result};
use crate::latent::EmConfig;
use crate::patrol::sim::{aggregate, simulate_run, Method, RunConfig, RunResult, Summary};
use crate::patrol::{PatrolConfig, PatrolDomain};

pub const SCHEMA_VERSION: u32 = 1;

/// How `duration_s` is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    /// Wall-clock time around the learning call.
    #[default]
    Wall,
    /// Deterministic work units scaled by `seconds_per_work_unit`.
    Work,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub domain: PatrolConfig,
    pub methods: Vec<Method>,
    pub observability: Vec<f64>,
    pub demo_pairs: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    pub run_ticks: usize,
    /// Limit per learning call (whole batch solve, or one session).
    pub deadline: Deadline,
    pub clock: Clock,
    pub seconds_per_work_unit: f64,
    pub em: EmConfig,
    /// Worker threads; `None` uses all cores.
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            domain: PatrolConfig::default(),
            methods: vec![
                Method::Batch,
                Method::Incremental,
                Method::IncrementalRandomWeights,
                Method::RandomBaseline,
            ],
            observability: vec![30.0, 70.0, 100.0],
            demo_pairs: vec![4, 8, 16, 32, 64],
            trials: 20,
            seed: 1,
            run_ticks: 120,
            deadline: Deadline::None,
            clock: Clock::Wall,
            seconds_per_work_unit: 1e-8,
            em: EmConfig::default(),
            threads: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| IrlError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(IrlError::Config(m.to_string()));
        if self.methods.is_empty() {
            return fail("methods must not be empty");
        }
        if self.observability.is_empty()
            || self
                .observability
                .iter()
                .any(|o| !(0.0..=100.0).contains(o))
        {
            return fail("observability must be a non-empty list of percentages in [0, 100]");
        }
        if self.demo_pairs.is_empty() || self.demo_pairs.contains(&0) {
            return fail("demo_pairs must be a non-empty list of positive sizes");
        }
        if self.trials == 0 {
            return fail("trials must be >= 1");
        }
        if self.run_ticks == 0 {
            return fail("run_ticks must be >= 1");
        }
        match self.deadline {
            Deadline::WallSeconds(s) if !(s > 0.0) => return fail("deadline must be positive"),
            Deadline::Work(0) => return fail("deadline must be positive"),
            _ => {}
        }
        if !(self.seconds_per_work_unit > 0.0) {
            return fail("seconds_per_work_unit must be positive");
        }
        PatrolDomain::new(&self.domain)?;
        Ok(())
    }
}

/// One CSV row; `None` values are written as empty fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub schema_version: u32,
    pub method: String,
    pub observability: f64,
    pub demo_pairs: usize,
    pub trial: usize,
    pub seed: u64,
    pub lba: Option<f64>,
    pub ile: Option<f64>,
    pub duration_s: Option<f64>,
    pub work_units: Option<u64>,
    pub success: Option<u8>,
    pub detected: Option<u8>,
    pub timeout: Option<u8>,
    pub sessions: Option<usize>,
    pub final_ll: Option<f64>,
    /// `ok`, or `error: <message>` with the metric columns left empty.
    pub status: String,
}

pub const CSV_COLUMNS: [&str; 16] = [
    "schema_version",
    "method",
    "observability",
    "demo_pairs",
    "trial",
    "seed",
    "lba",
    "ile",
    "duration_s",
    "work_units",
    "success",
    "detected",
    "timeout",
    "sessions",
    "final_ll",
    "status",
];

fn finite(x: Option<f64>) -> Option<f64> {
    x.filter(|v| v.is_finite())
}

impl ResultRow {
    fn new(job: &Job, outcome: &Result<RunResult>, cfg: &ExperimentConfig) -> Self {
        let mut row = ResultRow {
            schema_version: SCHEMA_VERSION,
            method: job.method.name().to_string(),
            observability: job.observability,
            demo_pairs: job.demo_pairs,
            trial: job.trial,
            seed: job.seed,
            lba: None,
            ile: None,
            duration_s: None,
            work_units: None,
            success: None,
            detected: None,
            timeout: None,
            sessions: None,
            final_ll: None,
            status: "ok".to_string(),
        };
        match outcome {
            Ok(r) => {
                row.lba = finite(r.lba);
                row.ile = finite(r.ile);
                row.duration_s = Some(match cfg.clock {
                    Clock::Wall => r.duration.as_secs_f64(),
                    Clock::Work => r.work_units as f64 * cfg.seconds_per_work_unit,
                });
                row.work_units = Some(r.work_units);
                row.success = Some(r.success.into());
                row.detected = Some(r.detected.into());
                row.timeout = Some(r.timeout.into());
                row.sessions = Some(r.sessions);
                row.final_ll = finite(r.final_ll);
            }
            Err(e) => row.status = format!("error: {e}"),
        }
        row
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Job {
    method: Method,
    observability: f64,
    demo_pairs: usize,
    trial: usize,
    seed: u64,
}

/// Seed for a grid cell and trial, shared by all methods so that they see
/// identical data.
pub fn trial_seed(base: u64, obs_index: usize, size_index: usize, trial: usize) -> u64 {
    let mut x = base ^ 0x9e37_79b9_7f4a_7c15;
    for v in [obs_index as u64, size_index as u64, trial as u64] {
        x = x
            .wrapping_add(v.wrapping_add(1))
            .wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x ^= x >> 31;
    }
    x
}

fn jobs(cfg: &ExperimentConfig) -> Vec<Job> {
    let mut out = Vec::new();
    for &method in &cfg.methods {
        for (oi, &observability) in cfg.observability.iter().enumerate() {
            for (si, &demo_pairs) in cfg.demo_pairs.iter().enumerate() {
                for trial in 0..cfg.trials {
                    out.push(Job {
                        method,
                        observability,
                        demo_pairs,
                        trial,
                        seed: trial_seed(cfg.seed, oi, si, trial),
                    });
                }
            }
        }
    }
    out
}

/// Runs the full grid. Rows come back in grid order regardless of the
/// order in which workers finish.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let domain = PatrolDomain::new(&cfg.domain)?;
    let jobs = jobs(cfg);
    let run = || {
        jobs.par_iter()
            .map(|job| {
                let run_cfg = RunConfig {
                    method: job.method,
                    observability: job.observability,
                    demo_pairs: job.demo_pairs,
                    deadline: cfg.deadline,
                    em: cfg.em.clone(),
                    run_ticks: cfg.run_ticks,
                };
                let outcome = simulate_run(&domain, &run_cfg, job.seed);
                if let Err(e) = &outcome {
                    log::warn!("{} trial {} failed: {e}", job.method, job.trial);
                }
                ResultRow::new(job, &outcome, cfg)
            })
            .collect::<Vec<_>>()
    };
    let rows = match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| IrlError::Config(e.to_string()))?
            .install(run),
        None => run(),
    };
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(CSV_COLUMNS)?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<ResultRow>, _>>()?;
    Ok(rows)
}

/// Per-cell summary line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub method: String,
    pub observability: f64,
    pub demo_pairs: usize,
    pub summary: Summary,
}

/// Aggregates successful rows by `(method, observability, demo_pairs)`.
pub fn summarize(rows: &[ResultRow]) -> Vec<CellSummary> {
    let mut keys: Vec<(String, f64, usize)> = Vec::new();
    for r in rows {
        let k = (r.method.clone(), r.observability, r.demo_pairs);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .filter_map(|(method, observability, demo_pairs)| {
            let results: Vec<RunResult> = rows
                .iter()
                .filter(|r| {
                    r.method == method
                        && r.observability == observability
                        && r.demo_pairs == demo_pairs
                })
                .filter(|r| r.status == "ok")
                .map(|r| RunResult {
                    success: r.success == Some(1),
                    detected: r.detected == Some(1),
                    timeout: r.timeout == Some(1),
                    duration: std::time::Duration::from_secs_f64(r.duration_s.unwrap_or(0.0)),
                    work_units: r.work_units.unwrap_or(0),
                    lba: r.lba,
                    ile: r.ile,
                    sessions: r.sessions.unwrap_or(0),
                    final_ll: r.final_ll,
                })
                .collect();
            aggregate(&results).ok().map(|summary| CellSummary {
                method,
                observability,
                demo_pairs,
                summary,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            methods = ["batch", "incremental"]
            observability = [70.0]
            demo_pairs = [8]
            trials = 2
            deadline = { work = 500000 }
            clock = "work"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.methods, vec![Method::Batch, Method::Incremental]);
        assert_eq!(cfg.deadline, Deadline::Work(500_000));
        assert_eq!(cfg.domain, PatrolConfig::default());
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(ExperimentConfig::from_toml_str("trials = 0").is_err());
        assert!(ExperimentConfig::from_toml_str("methods = []").is_err());
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml_str("observability = [120.0]").is_err());
    }

    #[test]
    fn seeds_shared_across_methods() {
        let cfg = ExperimentConfig {
            methods: vec![Method::Batch, Method::Incremental],
            observability: vec![30.0],
            demo_pairs: vec![4],
            trials: 3,
            ..ExperimentConfig::default()
        };
        let js = jobs(&cfg);
        assert_eq!(js.len(), 6);
        for t in 0..3 {
            assert_eq!(js[t].seed, js[3 + t].seed);
        }
        assert_ne!(js[0].seed, js[1].seed);
    }

    #[test]
    fn missing_values_written_empty() {
        let job = Job {
            method: Method::RandomBaseline,
            observability: 30.0,
            demo_pairs: 4,
            trial: 0,
            seed: 7,
        };
        let err: Result<RunResult> = Err(IrlError::EmptyInput("x"));
        let row = ResultRow::new(&job, &err, &ExperimentConfig::default());
        let mut buf = Vec::new();
        write_csv(&[row], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
        assert!(!text.contains("NaN"));
        assert!(text.contains("random_baseline,30.0,4,0,7,,,,,,,,,,error: empty input: x"));
    }
}
