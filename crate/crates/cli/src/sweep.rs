//! Grid execution and the aggregate table.
//!
//! Output layout under `out_dir`:
//! - `config.toml` — the experiment as parsed (re-parseable);
//! - `runs/<id>.json` — one `RunReport` per row (plus `<id>.model.json` when
//!   `save_models` is set);
//! - `table.csv` — one row per run, `crash` for diverged cells;
//! - `summary.json` — the rows plus per-grid-point means over seeds.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vitstem::train::{load_dataset, train_on, Dataset, RunReport};

use crate::config::{ExperimentConfig, ResolvedPoint, RunSpec};

pub const CRASH: &str = "crash";
pub const ERROR: &str = "error";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowStatus {
    Ok,
    Crash,
    Error,
}

impl fmt::Display for RowStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RowStatus::Ok => "ok",
            RowStatus::Crash => CRASH,
            RowStatus::Error => ERROR,
        })
    }
}

/// Accuracy at one epoch: a value, a crash before that epoch, or an epoch the
/// run was never scheduled to reach.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cell {
    Acc(f64),
    Crash,
    Missing,
}

impl Cell {
    pub fn render(&self) -> String {
        match self {
            Cell::Acc(v) => v.to_string(),
            Cell::Crash => CRASH.into(),
            Cell::Missing => String::new(),
        }
    }

    fn parse(s: &str) -> Result<Cell> {
        Ok(match s {
            "" => Cell::Missing,
            CRASH => Cell::Crash,
            v => Cell::Acc(v.parse().with_context(|| format!("bad accuracy cell {v:?}"))?),
        })
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Cell::Acc(v) => Some(*v),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub run: String,
    pub point: ResolvedPoint,
    pub seed: u64,
    pub status: RowStatus,
    pub top1: Option<f64>,
    pub diverged_step: Option<usize>,
    /// Accuracy at each of the table's checkpoint epochs, in order.
    pub checkpoints: Vec<Cell>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub checkpoints: Vec<usize>,
    pub rows: Vec<SweepRow>,
}

/// Mean over the seeds of one grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub point: ResolvedPoint,
    pub seeds: Vec<u64>,
    pub crashed: usize,
    pub errored: usize,
    /// Mean final top-1 over runs that finished; `None` if none did.
    pub mean_top1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub name: String,
    pub runs: usize,
    pub crashed: usize,
    pub errored: usize,
    pub groups: Vec<GroupSummary>,
    pub table: SweepTable,
}

pub struct SweepOutcome {
    pub summary: SweepSummary,
    pub reports: Vec<Option<RunReport>>,
    pub out_dir: PathBuf,
}

impl SweepOutcome {
    pub fn table(&self) -> &SweepTable {
        &self.summary.table
    }
}

fn strides_cell(s: &[usize]) -> String {
    s.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("-")
}

const FIXED_COLUMNS: [&str; 9] = [
    "run",
    "stem",
    "strides",
    "ffn",
    "lr",
    "optimizer",
    "warmup",
    "seed",
    "top1",
];

impl SweepTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
        header.extend(self.checkpoints.iter().map(|e| format!("acc@{e}")));
        header.extend(["diverged_step".to_string(), "error".to_string()]);
        w.write_record(&header)?;
        for r in &self.rows {
            let p = &r.point;
            let top1 = match r.status {
                RowStatus::Ok => r.top1.map(|v| v.to_string()).unwrap_or_default(),
                RowStatus::Crash => CRASH.into(),
                RowStatus::Error => ERROR.into(),
            };
            let mut rec = vec![
                r.run.clone(),
                p.stem.clone(),
                strides_cell(&p.strides),
                p.ffn.to_string(),
                p.lr.to_string(),
                p.optimizer.to_string(),
                p.warmup.to_string(),
                r.seed.to_string(),
                top1,
            ];
            rec.extend(r.checkpoints.iter().map(Cell::render));
            rec.push(r.diverged_step.map(|s| s.to_string()).unwrap_or_default());
            rec.push(r.error.clone().unwrap_or_default());
            w.write_record(&rec)?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }

    pub fn from_csv(text: &str) -> Result<SweepTable> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if header.len() < FIXED_COLUMNS.len() + 2 || header[..FIXED_COLUMNS.len()] != FIXED_COLUMNS {
            bail!("not a sweep table: header {header:?}");
        }
        let ck_cols = &header[FIXED_COLUMNS.len()..header.len() - 2];
        let checkpoints = ck_cols
            .iter()
            .map(|c| {
                c.strip_prefix("acc@")
                    .and_then(|e| e.parse().ok())
                    .ok_or_else(|| anyhow!("bad checkpoint column {c:?}"))
            })
            .collect::<Result<Vec<usize>>>()?;
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let f = |i: usize| rec.get(i).unwrap_or("");
            let strides = f(2)
                .split('-')
                .map(|s| s.parse::<usize>().with_context(|| format!("bad strides {:?}", f(2))))
                .collect::<Result<Vec<_>>>()?;
            let (status, top1) = match f(8) {
                CRASH => (RowStatus::Crash, None),
                ERROR => (RowStatus::Error, None),
                "" => (RowStatus::Ok, None),
                v => (RowStatus::Ok, Some(v.parse::<f64>()?)),
            };
            let n = FIXED_COLUMNS.len();
            let cells = (0..checkpoints.len())
                .map(|k| Cell::parse(f(n + k)))
                .collect::<Result<Vec<_>>>()?;
            let m = n + checkpoints.len();
            rows.push(SweepRow {
                run: f(0).to_string(),
                point: ResolvedPoint {
                    stem: f(1).to_string(),
                    strides,
                    ffn: f(3).to_string().try_into()?,
                    lr: f(4).parse()?,
                    optimizer: f(5).parse()?,
                    warmup: f(6).parse()?,
                },
                seed: f(7).parse()?,
                status,
                top1,
                diverged_step: match f(m) {
                    "" => None,
                    v => Some(v.parse()?),
                },
                checkpoints: cells,
                error: Some(f(m + 1).to_string()).filter(|s| !s.is_empty()),
            });
        }
        Ok(SweepTable { checkpoints, rows })
    }
}

fn summarize(name: &str, table: SweepTable) -> SweepSummary {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, GroupSummary> = HashMap::new();
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in &table.rows {
        let key = serde_json::to_string(&r.point).expect("point serializes");
        let g = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key.clone());
            GroupSummary {
                point: r.point.clone(),
                seeds: Vec::new(),
                crashed: 0,
                errored: 0,
                mean_top1: None,
            }
        });
        g.seeds.push(r.seed);
        match r.status {
            RowStatus::Crash => g.crashed += 1,
            RowStatus::Error => g.errored += 1,
            RowStatus::Ok => {
                if let Some(v) = r.top1 {
                    let e = sums.entry(key).or_default();
                    e.0 += v;
                    e.1 += 1;
                }
            }
        }
    }
    let groups = order
        .iter()
        .map(|k| {
            let mut g = groups.remove(k).expect("group exists");
            g.mean_top1 = sums.get(k).map(|(s, n)| s / *n as f64);
            g
        })
        .collect();
    SweepSummary {
        name: name.to_string(),
        runs: table.rows.len(),
        crashed: table.rows.iter().filter(|r| r.status == RowStatus::Crash).count(),
        errored: table.rows.iter().filter(|r| r.status == RowStatus::Error).count(),
        groups,
        table,
    }
}

fn row_from_report(spec: &RunSpec, checkpoints: &[usize], report: &RunReport) -> SweepRow {
    let cells = checkpoints
        .iter()
        .map(|&e| match report.acc_at(e) {
            Some(v) => Cell::Acc(v),
            None if report.diverged && e <= report.train.total_epochs => Cell::Crash,
            None => Cell::Missing,
        })
        .collect();
    SweepRow {
        run: spec.id.clone(),
        point: spec.point.clone(),
        seed: spec.seed,
        status: if report.diverged {
            RowStatus::Crash
        } else {
            RowStatus::Ok
        },
        top1: report.final_top1,
        diverged_step: report.diverged_step,
        checkpoints: cells,
        error: None,
    }
}

fn error_row(spec: &RunSpec, checkpoints: &[usize], msg: String) -> SweepRow {
    SweepRow {
        run: spec.id.clone(),
        point: spec.point.clone(),
        seed: spec.seed,
        status: RowStatus::Error,
        top1: None,
        diverged_step: None,
        checkpoints: vec![Cell::Missing; checkpoints.len()],
        error: Some(msg),
    }
}

fn execute(spec: &RunSpec, ds: &Result<Dataset, String>, runs_dir: &Path, save_model: bool) -> Result<RunReport> {
    let ds = ds.as_ref().map_err(|e| anyhow!("dataset: {e}"))?;
    let (model, report) = train_on(ds, &spec.model, &spec.train)?;
    let path = runs_dir.join(format!("{}.json", spec.id));
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", path.display()))?;
    if save_model {
        model.save(&runs_dir.join(format!("{}.model.json", spec.id)))?;
    }
    Ok(report)
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

/// Run every planned row on `jobs` worker threads. Rows are isolated: a
/// failing row is recorded and the rest of the grid still runs.
pub fn run_sweep(cfg: &ExperimentConfig, jobs: usize) -> Result<SweepOutcome> {
    cfg.validate()?;
    let plan = cfg.plan()?;
    let out = cfg.out_dir.clone();
    let runs_dir = out.join("runs");
    std::fs::create_dir_all(&runs_dir).with_context(|| format!("creating {}", runs_dir.display()))?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;

    let mut datasets: BTreeMap<String, Result<Dataset, String>> = BTreeMap::new();
    for spec in &plan {
        let d = &spec.train.dataset;
        if !datasets.contains_key(d) {
            datasets.insert(d.clone(), load_dataset(d).map_err(|e| e.to_string()));
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .context("building worker pool")?;
    log::info!("sweep {}: {} runs on {} workers", cfg.name, plan.len(), jobs.max(1));
    let results: Vec<Result<RunReport, String>> = pool.install(|| {
        plan.par_iter()
            .map(|spec| {
                let ds = &datasets[&spec.train.dataset];
                let r = catch_unwind(AssertUnwindSafe(|| execute(spec, ds, &runs_dir, cfg.save_models)));
                let r = match r {
                    Ok(Ok(rep)) => Ok(rep),
                    Ok(Err(e)) => Err(format!("{e:#}")),
                    Err(p) => Err(format!("panicked: {}", panic_message(p))),
                };
                match &r {
                    Ok(rep) => log::info!(
                        "{} {}: {}",
                        spec.id,
                        spec.point,
                        rep.final_top1.map_or(CRASH.to_string(), |v| format!("{v:.4}"))
                    ),
                    Err(e) => log::warn!("{} {}: error: {e}", spec.id, spec.point),
                }
                r
            })
            .collect()
    });

    let rows = plan
        .iter()
        .zip(&results)
        .map(|(spec, r)| match r {
            Ok(rep) => row_from_report(spec, &cfg.checkpoints, rep),
            Err(e) => error_row(spec, &cfg.checkpoints, e.clone()),
        })
        .collect();
    let table = SweepTable {
        checkpoints: cfg.checkpoints.clone(),
        rows,
    };
    std::fs::write(out.join("table.csv"), table.to_csv()?)?;
    let summary = summarize(&cfg.name, table);
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(SweepOutcome {
        summary,
        reports: results.into_iter().map(Result::ok).collect(),
        out_dir: out,
    })
}

pub fn read_table(path: &Path) -> Result<SweepTable> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    SweepTable::from_csv(&text).with_context(|| format!("in {}", path.display()))
}

pub fn read_summary(path: &Path) -> Result<SweepSummary> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}
