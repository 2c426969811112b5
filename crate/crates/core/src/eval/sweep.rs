//! Data-efficiency sweep over nested training fractions.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transfer::{train, Strategy, TrainConfig, TrainingData};

pub const SWEEP_FRACTIONS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub strategy: Strategy,
    pub fraction: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub auroc: Option<f64>,
}

/// Mean accuracy/AUROC over seeds of the best baseline at fraction 1.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLine {
    pub strategy: Strategy,
    pub accuracy: f64,
    pub auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub reference: Option<ReferenceLine>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl SweepResult {
    /// Wraps cells and picks the reference line: the baseline with the best
    /// mean accuracy at fraction 1.0.
    pub fn from_cells(cells: Vec<SweepCell>) -> Self {
        let mut result = SweepResult {
            cells,
            reference: None,
        };
        let mut best: BTreeMap<Strategy, (f64, Option<f64>)> = BTreeMap::new();
        for c in result.cells.iter().filter(|c| c.strategy.is_baseline()) {
            if let Some(m) = result.mean(c.strategy, 1.0) {
                best.insert(c.strategy, m);
            }
        }
        result.reference = best
            .into_iter()
            .max_by(|a, b| a.1 .0.total_cmp(&b.1 .0).then(b.0.cmp(&a.0)))
            .map(|(strategy, (accuracy, auroc))| ReferenceLine {
                strategy,
                accuracy,
                auroc,
            });
        result
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut cells = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
            let num = |i: usize| -> Result<f64> {
                field(i).parse().map_err(|_| {
                    Error::Config(vec![format!(
                        "{}: bad number {:?}",
                        path.display(),
                        field(i)
                    )])
                })
            };
            let auroc = if field(4).is_empty() {
                None
            } else {
                Some(num(4)?)
            };
            cells.push(SweepCell {
                strategy: field(0).parse()?,
                fraction: num(1)?,
                seed: num(2)? as u64,
                accuracy: num(3)?,
                auroc,
            });
        }
        Ok(Self::from_cells(cells))
    }

    /// Mean (accuracy, AUROC) over seeds for one cell of the grid.
    pub fn mean(&self, strategy: Strategy, fraction: f64) -> Option<(f64, Option<f64>)> {
        let cells: Vec<&SweepCell> = self
            .cells
            .iter()
            .filter(|c| c.strategy == strategy && c.fraction == fraction)
            .collect();
        let acc = mean(cells.iter().map(|c| c.accuracy))?;
        let auroc = if cells.iter().all(|c| c.auroc.is_some()) {
            mean(cells.iter().filter_map(|c| c.auroc))
        } else {
            None
        };
        Some((acc, auroc))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["strategy", "fraction", "seed", "accuracy", "auroc"])?;
        for c in &self.cells {
            w.write_record([
                c.strategy.name().to_string(),
                c.fraction.to_string(),
                c.seed.to_string(),
                c.accuracy.to_string(),
                c.auroc.map_or(String::new(), |a| a.to_string()),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Per (strategy, fraction) means, plus `reference` rows carrying the
    /// best-baseline-at-100% values at every fraction.
    pub fn write_plot_data(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["series", "fraction", "accuracy", "auroc"])?;
        let mut keys: Vec<(Strategy, u64)> = self
            .cells
            .iter()
            .map(|c| (c.strategy, c.fraction.to_bits()))
            .collect();
        keys.sort_by(|a, b| {
            a.0.cmp(&b.0)
                .then(f64::from_bits(a.1).total_cmp(&f64::from_bits(b.1)))
        });
        keys.dedup();
        let fmt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
        for (s, bits) in &keys {
            let f = f64::from_bits(*bits);
            let (acc, auroc) = self.mean(*s, f).expect("key comes from a cell");
            w.write_record([
                s.name().to_string(),
                f.to_string(),
                acc.to_string(),
                fmt(auroc),
            ])?;
        }
        if let Some(r) = &self.reference {
            let mut fractions: Vec<f64> = keys.iter().map(|k| f64::from_bits(k.1)).collect();
            fractions.sort_by(f64::total_cmp);
            fractions.dedup();
            for f in fractions {
                w.write_record([
                    format!("reference:{}", r.strategy.name()),
                    f.to_string(),
                    r.accuracy.to_string(),
                    fmt(r.auroc),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn check_fractions(fractions: &[f64]) -> Result<()> {
    let bad: Vec<String> = fractions
        .iter()
        .filter(|f| !SWEEP_FRACTIONS.contains(f))
        .map(|f| format!("fraction {f} is not one of 0.25, 0.5, 0.75, 1.0"))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(bad))
    }
}

/// Trains every (strategy, fraction, seed) cell. Cells run in parallel on the
/// current rayon pool; results come back in grid order.
pub fn data_efficiency_sweep(
    data: &TrainingData,
    base: &TrainConfig,
    strategies: &[Strategy],
    fractions: &[f64],
    seeds: &[u64],
) -> Result<SweepResult> {
    check_fractions(fractions)?;
    if seeds.is_empty() || strategies.is_empty() {
        return Err(Error::Config(vec![
            "sweep needs at least one strategy and one seed".into(),
        ]));
    }
    for &f in fractions {
        data.train_subset(f)?;
    }
    let mut grid = Vec::new();
    for &s in strategies {
        for &f in fractions {
            for &seed in seeds {
                grid.push(TrainConfig {
                    strategy: s,
                    data_fraction: f,
                    seed,
                    ..base.clone()
                });
            }
        }
    }
    let cells: Vec<SweepCell> = grid
        .par_iter()
        .map(|cfg| {
            let run = train(data, cfg)?;
            let test = run
                .manifest
                .metrics
                .test
                .expect("detection runs report test metrics");
            Ok(SweepCell {
                strategy: cfg.strategy,
                fraction: cfg.data_fraction,
                seed: cfg.seed,
                accuracy: test.accuracy,
                auroc: test.auroc,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SweepResult::from_cells(cells))
}
