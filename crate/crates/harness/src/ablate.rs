//! Ablation runner: Base, +UGF, +UDLR and Full trained from the same config
//! and seeds, evaluated on the test split.

use std::fmt::Write as _;
use std::path::PathBuf;

use riskseg_core::metrics::MetricSummary;
use riskseg_core::model::Flags;

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{HarnessError, Result};
use crate::eval::evaluate;
use crate::train::{train, TrainOptions};

pub const VARIANTS: [(&str, Flags); 4] = [
    ("Base", Flags::BASE),
    ("+UGF", Flags::UGF),
    ("+UDLR", Flags::UDLR),
    ("Full", Flags::FULL),
];

/// Slack allowed when comparing Full against the better single module.
pub const FULL_SLACK: f64 = 0.005;

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub name: &'static str,
    pub flags: Flags,
    /// One entry per seed; `Err` holds the failure message.
    pub runs: Vec<std::result::Result<MetricSummary, String>>,
    /// Validation mIoU after the last epoch, per seed.
    pub final_val_miou: Vec<Option<f64>>,
}

impl AblationRow {
    pub fn ok_runs(&self) -> impl Iterator<Item = &MetricSummary> {
        self.runs.iter().filter_map(|r| r.as_ref().ok())
    }

    pub fn failed(&self) -> usize {
        self.runs.iter().filter(|r| r.is_err()).count()
    }

    /// Mean of each metric over the successful seeds.
    pub fn mean(&self) -> Option<Vec<(String, f64)>> {
        let runs: Vec<_> = self.ok_runs().collect();
        let first = runs.first()?;
        let mut acc = first.entries();
        for r in &runs[1..] {
            for (a, (_, v)) in acc.iter_mut().zip(r.entries()) {
                a.1 += v;
            }
        }
        for a in &mut acc {
            a.1 /= runs.len() as f64;
        }
        Some(acc)
    }

    pub fn mean_of(&self, key: &str) -> Option<f64> {
        self.mean()?.into_iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }
}

#[derive(Debug, Clone)]
pub struct DirectionCheck {
    pub name: &'static str,
    /// `None` when a row involved has no successful run.
    pub passed: Option<bool>,
    /// Counts towards the 3-of-4 gate.
    pub gating: bool,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

fn cmp(a: Option<f64>, b: Option<f64>, f: impl Fn(f64, f64) -> bool) -> Option<bool> {
    Some(f(a?, b?))
}

impl AblationTable {
    pub fn row(&self, name: &str) -> &AblationRow {
        self.rows.iter().find(|r| r.name == name).expect("all four variants are present")
    }

    pub fn checks(&self) -> Vec<DirectionCheck> {
        let m = |n: &str, k: &str| self.row(n).mean_of(k);
        let (base, ugf, udlr, full) = (m("Base", "miou"), m("+UGF", "miou"), m("+UDLR", "miou"), m("Full", "miou"));
        let best_single = match (ugf, udlr) {
            (Some(a), Some(b)) => Some(a.max(b)),
            _ => None,
        };
        vec![
            DirectionCheck { name: "mIoU Full >= Base", passed: cmp(full, base, |a, b| a >= b), gating: true },
            DirectionCheck { name: "mIoU +UGF >= Base", passed: cmp(ugf, base, |a, b| a >= b), gating: true },
            DirectionCheck { name: "mIoU +UDLR >= Base", passed: cmp(udlr, base, |a, b| a >= b), gating: true },
            DirectionCheck {
                name: "mIoU Full >= max(+UGF, +UDLR) - 0.5pp",
                passed: cmp(full, best_single, |a, b| a >= b - FULL_SLACK),
                gating: true,
            },
            DirectionCheck {
                name: "Pr@0.9 +UDLR > Base",
                passed: cmp(m("+UDLR", "pr@0.9"), m("Base", "pr@0.9"), |a, b| a > b),
                gating: false,
            },
            DirectionCheck {
                name: "Pr@0.5 +UGF > Base",
                passed: cmp(m("+UGF", "pr@0.5"), m("Base", "pr@0.5"), |a, b| a > b),
                gating: false,
            },
        ]
    }

    /// At least three of the four mIoU direction checks hold.
    pub fn gate_passed(&self) -> bool {
        self.checks().iter().filter(|c| c.gating && c.passed == Some(true)).count() >= 3
    }

    pub fn to_text(&self) -> String {
        const COLS: [&str; 5] = ["pr@0.5", "pr@0.7", "pr@0.9", "oiou", "miou"];
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:<8} {:>8} {:>8} {:>8} {:>8} {:>8}", "variant", "seed", "Pr@0.5", "Pr@0.7", "Pr@0.9", "oIoU", "mIoU");
        for row in &self.rows {
            for (seed, run) in self.seeds.iter().zip(&row.runs) {
                let _ = match run {
                    Ok(m) => {
                        let e = m.entries();
                        let vals: Vec<String> = COLS
                            .iter()
                            .map(|c| format!("{:>8.2}", 100.0 * e.iter().find(|(k, _)| k == c).unwrap().1))
                            .collect();
                        writeln!(s, "{:<8} {:<8} {}", row.name, seed, vals.join(" "))
                    }
                    Err(msg) => writeln!(s, "{:<8} {:<8} FAILED: {msg}", row.name, seed),
                };
            }
            match row.mean() {
                Some(mean) => {
                    let vals: Vec<String> = COLS
                        .iter()
                        .map(|c| format!("{:>8.2}", 100.0 * mean.iter().find(|(k, _)| k == c).unwrap().1))
                        .collect();
                    let note = if row.failed() > 0 { format!("  [{} failed]", row.failed()) } else { String::new() };
                    let _ = writeln!(s, "{:<8} {:<8} {}{note}", row.name, "mean", vals.join(" "));
                }
                None => {
                    let _ = writeln!(s, "{:<8} {:<8} FAILED: no successful runs", row.name, "mean");
                }
            }
        }
        s.push('\n');
        for c in self.checks() {
            let status = match c.passed {
                Some(true) => "ok",
                Some(false) => "FLAG",
                None => "n/a",
            };
            let _ = writeln!(s, "[{status:>4}] {}{}", c.name, if c.gating { "" } else { " (informational)" });
        }
        let _ = writeln!(s, "gate (>= 3 of 4 mIoU checks): {}", if self.gate_passed() { "pass" } else { "FAIL" });
        s
    }

    /// `variant.seed.metric = value` lines plus `variant.mean.metric`.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for row in &self.rows {
            let key = row.name.trim_start_matches('+').to_lowercase();
            for ((seed, run), val) in self.seeds.iter().zip(&row.runs).zip(&row.final_val_miou) {
                match run {
                    Ok(m) => {
                        for (k, v) in m.entries() {
                            let _ = writeln!(s, "{key}.{seed}.{k} = {v:.6}");
                        }
                        if let Some(v) = val {
                            let _ = writeln!(s, "{key}.{seed}.final_val_miou = {v:.6}");
                        }
                    }
                    Err(_) => {
                        let _ = writeln!(s, "{key}.{seed}.failed = 1");
                    }
                }
            }
            if let Some(mean) = row.mean() {
                for (k, v) in mean {
                    let _ = writeln!(s, "{key}.mean.{k} = {v:.6}");
                }
            }
        }
        s
    }
}

#[derive(Debug, Clone, Default)]
pub struct AblateOptions {
    /// Per-run checkpoints go to `<dir>/<variant>-seed<k>/`.
    pub out_dir: Option<PathBuf>,
}

/// Trains and tests every variant for every seed. Failed runs are recorded
/// in the table rather than aborting the sweep.
pub fn ablate(base: &RunConfig, seeds: &[u64], data: &Dataset, opts: &AblateOptions) -> Result<AblationTable> {
    if seeds.len() < 3 {
        return Err(HarnessError::Config(format!("ablation needs at least 3 seeds, got {}", seeds.len())));
    }
    base.validate()?;
    let mut rows: Vec<AblationRow> = VARIANTS
        .iter()
        .map(|&(name, flags)| AblationRow { name, flags, runs: Vec::new(), final_val_miou: Vec::new() })
        .collect();
    for &seed in seeds {
        for row in rows.iter_mut() {
            let cfg = RunConfig { seed, ..base.with_flags(row.flags) };
            let dir = opts
                .out_dir
                .as_ref()
                .map(|d| d.join(format!("{}-seed{seed}", row.name.trim_start_matches('+').to_lowercase())));
            log::info!("ablation: {} seed {seed}", row.name);
            let mut val = None;
            let run = train(&cfg, data, TrainOptions { out_dir: dir, ..Default::default() }).and_then(|t| {
                val = t.checkpoint.log.last().map(|e| e.val_miou);
                Ok(evaluate(&t.model, &data.test.records, cfg.batch_size, false)?.summary())
            });
            if let Err(e) = &run {
                log::error!("ablation: {} seed {seed} failed: {e}", row.name);
            }
            row.runs.push(run.map_err(|e| e.to_string()));
            row.final_val_miou.push(val);
        }
    }
    Ok(AblationTable { seeds: seeds.to_vec(), rows })
}
