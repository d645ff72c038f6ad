//! Leave-one-domain-out experiments and the ablation table.
//!
//! A cell (variant, protocol, target, seed) is a pure function of its
//! inputs, so cells may run on a small worker pool; records are gathered
//! by cell index and reports are bitwise reproducible. Wall-clock numbers
//! go to a separate timing file to keep `report.json` deterministic.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{Protocol, RunConfig};
use crate::data::{load_dataset, DomainDataset};
use crate::error::{Error, Result};
use crate::model::Variant;
use crate::rng::RNG_ALGORITHM;
use crate::scalar::Scalar;
use crate::train::{evaluate, train,EntropyStats, TrainSetting};

/// Worker cap: SNR_NUM_THREADS when set, otherwise 1.
pub fn default_workers() -> usize {
    std::env::var("SNR_NUM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Train and test splits of one domain.
pub struct DomainSplits {
    pub name: String,
    pub train: DomainDataset,
    pub test: DomainDataset,
}

/// Load `<root>/<domain>/{train,test}` for every configured domain.
pub fn load_domain_splits(root: &Path, domains: &[String]) -> Result<Vec<DomainSplits>> {
    let mut out = Vec::with_capacity(domains.len());
    for name in domains {
        let dir = root.join(name);
        let train_dir = dir.join("train");
        let test_dir = dir.join("test");
        for d in [&train_dir, &test_dir] {
            if !d.join("manifest.json").exists() {
                return Err(Error::Config(format!(
                    "dataset for domain {name:?} not found: expected {}",
                    d.display()
                )));
            }
        }
        out.push(DomainSplits {
            name: name.clone(),
            train: load_dataset(&train_dir)?,
            test: load_dataset(&test_dir)?,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: String,
    pub protocol: Protocol,
    pub target: String,
    pub seed: u64,
    pub accuracy: f64,
    pub correct: usize,
    pub n_test: usize,
    /// Per-module mean prediction entropies on held-out source test data.
    pub entropy_source: Vec<EntropyStats>,
    /// Same on the target test split.
    pub entropy_target: Vec<EntropyStats>,
    pub param_count: usize,
    pub steps: usize,
    pub final_task_loss: f64,
    pub final_train_accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub protocol: Protocol,
    pub seeds: Vec<u64>,
    pub domains: Vec<String>,
    pub rng_algorithm: String,
    pub runs: Vec<RunRecord>,
    pub mean_accuracy_by_target: BTreeMap<String, f64>,
    pub mean_accuracy: f64,
    /// Parameters added by the normalization modules over the baseline,
    /// and the relative overhead.
    pub param_overhead: usize,
    pub param_overhead_fraction: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimingReport {
    pub cpu_secs_total: f64,
    pub wall_secs: f64,
    pub per_run_secs: Vec<f64>,
}

/// One training cell: train on every domain except `target`, evaluate on
/// the target test split, collect entropy statistics on held-out source
/// data.
pub fn run_cell<S: Scalar>(
    cfg: &RunConfig,
    variant: Variant,
    protocol: Protocol,
    splits: &[DomainSplits],
    target_ix: usize,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<(RunRecord, f64)> {
    let spec = cfg.model.to_spec(variant);
    let sources: Vec<&DomainDataset> = splits
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target_ix)
        .map(|(_, s)| &s.train)
        .collect();
    let target_unlabeled = match protocol {
        Protocol::Uda => Some(&splits[target_ix].train),
        Protocol::Dg => None,
    };
    let started = Instant::now();
    let outcome = train::<S>(&TrainSetting {
        spec: &spec,
        params: &cfg.train,
        sources,
        target_unlabeled,
        seed,
        out_dir,
    })?;
    let train_secs = started.elapsed().as_secs_f64();

    let eval_limit = cfg.train.eval_per_domain;
    let target_eval = evaluate(&outcome.model, &splits[target_ix].test, eval_limit, true, 1)?;

    // entropy stats across all source test splits, sample-weighted
    let mut entropy_source: Vec<EntropyStats> = Vec::new();
    let mut total_n = 0usize;
    for (i, s) in splits.iter().enumerate() {
        if i == target_ix {
            continue;
        }
        let ev = evaluate(&outcome.model, &s.test, eval_limit, true, 1)?;
        if entropy_source.is_empty() {
            entropy_source = vec![EntropyStats::default(); ev.entropy_stats.len()];
        }
        for (acc, st) in entropy_source.iter_mut().zip(&ev.entropy_stats) {
            acc.h_plus += st.h_plus * ev.n as f64;
            acc.h_norm += st.h_norm * ev.n as f64;
            acc.h_minus += st.h_minus * ev.n as f64;
        }
        total_n += ev.n;
    }
    for acc in entropy_source.iter_mut() {
        acc.h_plus /= total_n.max(1) as f64;
        acc.h_norm /= total_n.max(1) as f64;
        acc.h_minus /= total_n.max(1) as f64;
    }

    let last = outcome.epochs.last().expect("at least one epoch");
    Ok((
        RunRecord {
            variant: variant.name().to_string(),
            protocol,
            target: splits[target_ix].name.clone(),
            seed,
            accuracy: target_eval.accuracy,
            correct: target_eval.correct,
            n_test: target_eval.n,
            entropy_source,
            entropy_target: target_eval.entropy_stats,
            param_count: outcome.model.num_params(),
            steps: outcome.steps,
            final_task_loss: last.task_loss,
            final_train_accuracy: last.train_accuracy,
        },
        train_secs,
    ))
}

fn dispatch_cell(
    cfg: &RunConfig,
    variant: Variant,
    protocol: Protocol,
    splits: &[DomainSplits],
    target_ix: usize,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<(RunRecord, f64)> {
    match cfg.train.precision {
        crate::config::Precision::F32 => {
            run_cell::<f32>(cfg, variant, protocol, splits, target_ix, seed, out_dir)
        }
        crate::config::Precision::F64 => {
            run_cell::<f64>(cfg, variant, protocol, splits, target_ix, seed, out_dir)
        }
    }
}

fn summarize(
    cfg: &RunConfig,
    variant: Variant,
    protocol: Protocol,
    records: Vec<RunRecord>,
) -> MetricsReport {
    let mut by_target: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &records {
        by_target.entry(r.target.clone()).or_default().push(r.accuracy);
    }
    let mean_accuracy_by_target: BTreeMap<String, f64> = by_target
        .into_iter()
        .map(|(k, v)| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (k, m)
        })
        .collect();
    let mean_accuracy = mean_accuracy_by_target.values().sum::<f64>()
        / mean_accuracy_by_target.len().max(1) as f64;
    let spec = cfg.model.to_spec(variant);
    let overhead = crate::config::snr_overhead(&spec);
    let total = records.first().map_or(0, |r| r.param_count);
    MetricsReport {
        variant: variant.name().to_string(),
        protocol,
        seeds: cfg.seeds.clone(),
        domains: cfg.domains.clone(),
        rng_algorithm: RNG_ALGORITHM.to_string(),
        runs: records,
        mean_accuracy_by_target,
        mean_accuracy,
        param_overhead: overhead,
        param_overhead_fraction: overhead as f64 / (total.saturating_sub(overhead)).max(1) as f64,
    }
}

/// (variant, target index, seed) work list run on `workers` threads.
fn run_cells(
    cfg: &RunConfig,
    splits: &[DomainSplits],
    cells: &[(Variant, Protocol, usize, u64)],
    out_root: Option<&Path>,
    workers: usize,
) -> Result<(Vec<RunRecord>, TimingReport)> {
    let started = Instant::now();
    let cell_dir = |v: Variant, p: Protocol, t: usize, s: u64| -> Option<PathBuf> {
        out_root.map(|root| {
            root.join("runs").join(format!(
                "{}-{}-{}-s{}",
                v.name(),
                match p {
                    Protocol::Dg => "dg",
                    Protocol::Uda => "uda",
                },
                splits[t].name,
                s
            ))
        })
    };
    let workers = workers.max(1).min(cells.len().max(1));
    let mut slots: Vec<Option<Result<(RunRecord, f64)>>> = Vec::new();
    slots.resize_with(cells.len(), || None);
    if workers == 1 {
        for (i, &(v, p, t, s)) in cells.iter().enumerate() {
            let dir = cell_dir(v, p, t, s);
            slots[i] = Some(dispatch_cell(cfg, v, p, splits, t, s, dir.as_deref()));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let results = std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for _ in 0..workers {
                let next = &next;
                let cell_dir = &cell_dir;
                handles.push(scope.spawn(move || {
                    let mut mine = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                        if i >= cells.len() {
                            break;
                        }
                        let (v, p, t, s) = cells[i];
                        let dir = cell_dir(v, p, t, s);
                        mine.push((i, dispatch_cell(cfg, v, p, splits, t, s, dir.as_deref())));
                    }
                    mine
                }));
            }
            let mut all = Vec::new();
            for h in handles {
                all.extend(h.join().expect("experiment worker panicked"));
            }
            all
        });
        for (i, r) in results {
            slots[i] = Some(r);
        }
    }
    let mut records = Vec::with_capacity(cells.len());
    let mut per_run_secs = Vec::with_capacity(cells.len());
    for slot in slots {
        let (rec, secs) = slot.expect("cell not executed")?;
        records.push(rec);
        per_run_secs.push(secs);
    }
    let timing = TimingReport {
        cpu_secs_total: per_run_secs.iter().sum(),
        wall_secs: started.elapsed().as_secs_f64(),
        per_run_secs,
    };
    Ok((records, timing))
}

/// Leave-one-domain-out: hold out each configured domain in turn, train
/// on the rest across all seeds, and aggregate.
pub fn leave_one_domain_out(
    cfg: &RunConfig,
    splits: &[DomainSplits],
    variant: Variant,
    protocol: Protocol,
    out_root: Option<&Path>,
    workers: usize,
) -> Result<(MetricsReport, TimingReport)> {
    let mut cells = Vec::new();
    for t in 0..splits.len() {
        for &s in &cfg.seeds {
            cells.push((variant, protocol, t, s));
        }
    }
    let (records, timing) = run_cells(cfg, splits, &cells, out_root, workers)?;
    let report = summarize(cfg, variant, protocol, records);
    if let Some(root) = out_root {
        write_report(root, &report, &timing)?;
    }
    Ok((report, timing))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub domains: Vec<String>,
    pub seeds: Vec<u64>,
    pub variants: Vec<MetricsReport>,
}

impl AblationReport {
    /// Aligned comparison table: one row per variant, one column per
    /// held-out target plus the average.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:18}", "variant"));
        for d in &self.domains {
            out.push_str(&format!("{d:>10}"));
        }
        out.push_str(&format!("{:>10}\n", "avg"));
        for v in &self.variants {
            out.push_str(&format!("{:18}", v.variant));
            for d in &self.domains {
                let acc = v.mean_accuracy_by_target.get(d).copied().unwrap_or(f64::NAN);
                out.push_str(&format!("{:>10.2}", 100.0 * acc));
            }
            out.push_str(&format!("{:>10.2}\n", 100.0 * v.mean_accuracy));
        }
        out
    }
}

/// Run the four variants under identical seeds and emit one comparison
/// table.
pub fn ablate(
    cfg: &RunConfig,
    splits: &[DomainSplits],
    out_root: Option<&Path>,
    workers: usize,
) -> Result<(AblationReport, TimingReport)> {
    let mut cells = Vec::new();
    for v in Variant::ALL {
        for t in 0..splits.len() {
            for &s in &cfg.seeds {
                cells.push((v, cfg.protocol, t, s));
            }
        }
    }
    let (records, timing) = run_cells(cfg, splits, &cells, out_root, workers)?;
    let per_variant = Variant::ALL
        .iter()
        .map(|&v| {
            let recs: Vec<RunRecord> = records
                .iter()
                .filter(|r| r.variant == v.name())
                .cloned()
                .collect();
            summarize(cfg, v, cfg.protocol, recs)
        })
        .collect();
    let report = AblationReport {
        domains: cfg.domains.clone(),
        seeds: cfg.seeds.clone(),
        variants: per_variant,
    };
    if let Some(root) = out_root {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join("ablation.json");
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Config(format!("ablation report: {e}")))?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        write_timing(root, &timing)?;
    }
    Ok((report, timing))
}

pub fn write_report(root: &Path, report: &MetricsReport, timing: &TimingReport) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let path = root.join("report.json");
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Config(format!("report: {e}")))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    write_timing(root, timing)
}

fn write_timing(root: &Path, timing: &TimingReport) -> Result<()> {
    let path = root.join("timing.json");
    let json = serde_json::to_string_pretty(timing)
        .map_err(|e| Error::Config(format!("timing: {e}")))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(())
}
