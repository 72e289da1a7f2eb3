//! Benchmark vs. proposed comparison over seeds, encoders and a codec sweep.
//!
//! For every encoder and seed two models are trained from the same
//! configuration, differing only in `include_rate`. Both are evaluated with
//! the internal lossless codec and the external codec at each quality.
//!
//! Artifacts (all inside the output directory):
//!
//! ```text
//! config.txt                         base configuration
//! <enc>/seed<k>/<run>/config.txt     run configuration (run = benchmark | proposed)
//! <enc>/seed<k>/<run>/train_log.csv
//! <enc>/seed<k>/<run>/model.ckpt
//! <enc>/seed<k>/<run>/rd.csv
//! <enc>/<run>_mean_rd.csv            RD points averaged over seeds
//! bd_table.txt                       BD-rate of proposed vs. benchmark per encoder
//! plot_rd.py
//! summary.txt
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{bd_rate, curves_by_kind, format_bd_table, plot_script, write_rd_csv, MetricKind, RdPoint};
use crate::featcodec::ExternalCodec;
use crate::mtl::config::encoder_name;
use crate::mtl::{evaluate, format_log, test_set, train, train_set, Config, EvalReport};

/// Minimum relative lossless BPFE reduction required of the proposed model.
pub const TARGET_BPFE_REDUCTION: f64 = 0.05;
/// Allowed relative increase of the held-out task loss.
pub const TASK_LOSS_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunKind {
    Benchmark,
    Proposed,
}

impl RunKind {
    pub fn name(self) -> &'static str {
        match self {
            RunKind::Benchmark => "benchmark",
            RunKind::Proposed => "proposed",
        }
    }

    fn include_rate(self) -> bool {
        matches!(self, RunKind::Proposed)
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub encoder: String,
    pub seed: u64,
    pub kind: RunKind,
    pub report: EvalReport,
    /// Final-epoch mean rate loss on the training set.
    pub final_rate_loss: f64,
    /// Final-epoch mean `L₁ + L₂ + L₃` on the training set.
    pub final_train_task_loss: f64,
}

impl RunResult {
    pub fn lossless_bpfe(&self) -> f64 {
        self.report.lossless().mean_bpfe
    }

    /// `L₁ + L₂ + L₃` on the held-out set after lossless coding.
    pub fn test_task_loss(&self) -> f64 {
        self.report.lossless().task_loss_sum()
    }
}

/// Per-seed outcome of the directional comparison on the first encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedComparison {
    pub seed: u64,
    pub bpfe_reduction: f64,
    pub task_loss_ratio: f64,
}

impl SeedComparison {
    pub fn passes(&self) -> bool {
        self.bpfe_reduction >= TARGET_BPFE_REDUCTION && self.task_loss_ratio <= 1.0 + TASK_LOSS_TOLERANCE
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub runs: Vec<RunResult>,
    pub comparisons: Vec<SeedComparison>,
    /// `(encoder, [mIoU, IRMSE, PSNR])` BD-rates of the seed-averaged curves.
    pub bd_rows: Vec<(String, [Option<f64>; 3])>,
}

impl ExperimentReport {
    /// At least two thirds of the seeds pass the directional comparison.
    pub fn directional_claim_holds(&self) -> bool {
        let passed = self.comparisons.iter().filter(|c| c.passes()).count();
        !self.comparisons.is_empty() && 3 * passed >= 2 * self.comparisons.len()
    }
}

/// Means of BPFE and metric per (codec, quality, kind) over several runs.
fn mean_points(runs: &[&RunResult]) -> Vec<RdPoint> {
    let per_run: Vec<Vec<RdPoint>> = runs.iter().map(|r| r.report.rd_points()).collect();
    let n = per_run.len() as f64;
    (0..per_run[0].len())
        .map(|i| {
            let first = &per_run[0][i];
            RdPoint {
                bpfe: per_run.iter().map(|p| p[i].bpfe).sum::<f64>() / n,
                metric: per_run.iter().map(|p| p[i].metric).sum::<f64>() / n,
                ..first.clone()
            }
        })
        .collect()
}

fn bd_row(reference: &[RdPoint], test: &[RdPoint]) -> [Option<f64>; 3] {
    let (Ok(rc), Ok(tc)) = (curves_by_kind(reference), curves_by_kind(test)) else {
        return [None; 3];
    };
    MetricKind::ALL.map(|kind| {
        let r = rc.iter().find(|c| c.kind() == kind)?;
        let t = tc.iter().find(|c| c.kind() == kind)?;
        bd_rate(r, t).ok()
    })
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(&path, text).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Runs the full comparison and writes its artifacts under `out_dir`.
/// `progress` receives one line per finished run.
pub fn run_experiment(
    cfg: &Config,
    out_dir: &Path,
    external: Option<&ExternalCodec>,
    progress: &mut dyn FnMut(&str),
) -> Result<ExperimentReport> {
    cfg.validate()?;
    if cfg.seeds.is_empty() {
        return Err(Error::Config("experiment needs at least one seed".into()));
    }
    fs::create_dir_all(out_dir)?;
    write(out_dir.join("config.txt"), &cfg.to_text())?;
    let train_data = train_set(cfg)?;
    let test_data = test_set(cfg)?;

    let mut runs = Vec::new();
    for &arch in &cfg.encoders {
        let enc = encoder_name(arch);
        for &seed in &cfg.seeds {
            for kind in [RunKind::Benchmark, RunKind::Proposed] {
                let mut run_cfg = cfg.clone();
                run_cfg.encoder = arch;
                run_cfg.seed = seed;
                run_cfg.include_rate = kind.include_rate();
                let dir = out_dir.join(&enc).join(format!("seed{seed}")).join(kind.name());
                write(dir.join("config.txt"), &run_cfg.to_text())?;

                let outcome = train(&run_cfg, &train_data)?;
                write(dir.join("train_log.csv"), &format_log(&outcome.log))?;
                outcome.checkpoint.save(dir.join("model.ckpt"))?;
                let report = evaluate(&outcome.checkpoint, &test_data, &run_cfg, external)?;
                write(dir.join("rd.csv"), &write_rd_csv(&report.rd_points()))?;

                let last = outcome.log.last().expect("at least one epoch");
                let run = RunResult {
                    encoder: enc.clone(),
                    seed,
                    kind,
                    report,
                    final_rate_loss: last.losses[3],
                    final_train_task_loss: last.losses[..3].iter().sum(),
                };
                progress(&format!(
                    "{enc} seed {seed} {}: lossless BPFE {:.4}, test task loss {:.4}",
                    kind.name(),
                    run.lossless_bpfe(),
                    run.test_task_loss()
                ));
                runs.push(run);
            }
        }
    }

    let mut bd_rows = Vec::new();
    let mut series = Vec::new();
    for &arch in &cfg.encoders {
        let enc = encoder_name(arch);
        let mut means = Vec::new();
        for kind in [RunKind::Benchmark, RunKind::Proposed] {
            let selected: Vec<&RunResult> = runs.iter().filter(|r| r.encoder == enc && r.kind == kind).collect();
            let pts = mean_points(&selected);
            let rel = format!("{enc}/{}_mean_rd.csv", kind.name());
            write(out_dir.join(&rel), &write_rd_csv(&pts))?;
            series.push((format!("{enc} {}", kind.name()), rel));
            means.push(pts);
        }
        bd_rows.push((format!("{enc} ({})", shape_label(arch)), bd_row(&means[0], &means[1])));
    }
    write(out_dir.join("bd_table.txt"), &format_bd_table(&bd_rows))?;
    let series_refs: Vec<(&str, &str)> = series.iter().map(|(l, p)| (l.as_str(), p.as_str())).collect();
    write(out_dir.join("plot_rd.py"), &plot_script(&series_refs))?;

    let first = encoder_name(cfg.encoders[0]);
    let comparisons = cfg
        .seeds
        .iter()
        .map(|&seed| {
            let find = |kind| runs.iter().find(|r| r.encoder == first && r.seed == seed && r.kind == kind).unwrap();
            let (b, p) = (find(RunKind::Benchmark), find(RunKind::Proposed));
            SeedComparison {
                seed,
                bpfe_reduction: 1.0 - p.lossless_bpfe() / b.lossless_bpfe(),
                task_loss_ratio: p.test_task_loss() / b.test_task_loss(),
            }
        })
        .collect();
    let report = ExperimentReport { runs, comparisons, bd_rows };
    write(out_dir.join("summary.txt"), &summary(&report, &first))?;
    Ok(report)
}

fn shape_label(arch: crate::mtl::ModelArch) -> String {
    let (h, w, c) = arch.bottleneck_shape();
    format!("{h}x{w}x{c}")
}

fn summary(report: &ExperimentReport, first: &str) -> String {
    let mut s = String::new();
    writeln!(s, "encoder seed run        lossless_bpfe  test_task_loss  train_task_loss  train_rate_loss").unwrap();
    for r in &report.runs {
        writeln!(
            s,
            "{:<7} {:>4} {:<10} {:>14.4} {:>15.4} {:>16.4} {:>16.5}",
            r.encoder,
            r.seed,
            r.kind.name(),
            r.lossless_bpfe(),
            r.test_task_loss(),
            r.final_train_task_loss,
            r.final_rate_loss
        )
        .unwrap();
    }
    writeln!(s).unwrap();
    writeln!(
        s,
        "Directional check on {first}: BPFE reduction >= {:.0}% with test task loss at most {:.0}% above the benchmark",
        TARGET_BPFE_REDUCTION * 100.0,
        TASK_LOSS_TOLERANCE * 100.0
    )
    .unwrap();
    for c in &report.comparisons {
        writeln!(
            s,
            "  seed {}: BPFE reduction {:.2}%, task loss ratio {:.4} -> {}",
            c.seed,
            c.bpfe_reduction * 100.0,
            c.task_loss_ratio,
            if c.passes() { "pass" } else { "fail" }
        )
        .unwrap();
    }
    writeln!(s, "Overall: {}", if report.directional_claim_holds() { "PASS" } else { "FAIL" }).unwrap();
    writeln!(s).unwrap();
    s.push_str(&format_bd_table(&report.bd_rows));
    s
}
