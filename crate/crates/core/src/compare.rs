//! The variant comparison experiment: post-only, direct and weighted models
//! trained on the same phantom cases over several seeds.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionVariant;
use crate::network::ModelConfig;
use crate::optim::AdamConfig;
use crate::phantom::Sample;
use crate::train::Trainer;

/// One row group of the comparison table, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    /// Plain model fed the post volume in both branches.
    PostOnly,
    Direct,
    Weighted,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::PostOnly, Arm::Direct, Arm::Weighted];

    pub fn name(self) -> &'static str {
        match self {
            Arm::PostOnly => "post-only",
            Arm::Direct => "direct",
            Arm::Weighted => "weighted",
        }
    }

    pub fn variant(self) -> FusionVariant {
        match self {
            Arm::PostOnly => FusionVariant::PlainResidual,
            Arm::Direct => FusionVariant::DirectAdd,
            Arm::Weighted => FusionVariant::WeightedAdd,
        }
    }

    pub fn post_only(self) -> bool {
        self == Arm::PostOnly
    }
}

/// Learning rate per epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the base rate towards zero over the run.
    Cosine,
}

impl LrSchedule {
    pub fn lr(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = epoch as f64 / epochs.max(1) as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub levels: usize,
    pub base_channels: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            seeds: vec![1, 2, 3],
            epochs: 6,
            lr: 3e-3,
            schedule: LrSchedule::Cosine,
            batch_size: 2,
            levels: model.levels,
            base_channels: model.base_channels,
        }
    }
}

/// Result of one (arm, seed) training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub arm: Arm,
    pub seed: u64,
    pub val_dsc: f64,
    pub val_recall: f64,
    pub noiseless_dsc: Option<f64>,
    /// Fraction of noiseless gland voxels predicted as lesion.
    pub gland_marked: Option<f64>,
    pub train_loss: f64,
    pub wall_ms: u64,
}

/// Medians over seeds for one arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub dsc: f64,
    pub recall: f64,
    pub mean_dsc: f64,
    pub gland_marked: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub config: CompareConfig,
    pub cells: Vec<Cell>,
    pub summary: Vec<ArmSummary>,
}

/// Median of a non-empty list; the mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    })
}

/// Trains one arm for `cfg.epochs` and evaluates it once at the end.
pub fn run_cell(
    cfg: &CompareConfig,
    arm: Arm,
    seed: u64,
    train: &[Sample],
    val: &[Sample],
    noiseless_val: &[Sample],
) -> Result<Cell> {
    let start = Instant::now();
    let model = ModelConfig {
        levels: cfg.levels,
        base_channels: cfg.base_channels,
        variant: arm.variant(),
        seed,
        ..ModelConfig::default()
    };
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut trainer = Trainer::new(model, adam, arm.post_only(), cfg.batch_size)?;
    let mut train_loss = 0.0;
    for epoch in 0..cfg.epochs {
        trainer.state.optimizer.config.lr = cfg.schedule.lr(cfg.lr, epoch, cfg.epochs);
        train_loss = trainer.train_epoch(train)?;
    }
    let report = trainer.evaluate(val)?;
    let clean = if noiseless_val.is_empty() {
        None
    } else {
        Some(trainer.evaluate(noiseless_val)?)
    };
    Ok(Cell {
        arm,
        seed,
        val_dsc: report.dsc,
        val_recall: report.recall,
        noiseless_dsc: clean.as_ref().map(|r| r.dsc),
        gland_marked: clean.and_then(|r| r.gland_marked_fraction),
        train_loss,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

/// Runs every (arm, seed) cell in table order, calling `progress` after each.
pub fn run(
    cfg: &CompareConfig,
    train: &[Sample],
    val: &[Sample],
    noiseless_val: &[Sample],
    mut progress: impl FnMut(&Cell),
) -> Result<CompareReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("compare needs at least one seed".into()));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(
            "compare needs non-empty train and val splits".into(),
        ));
    }
    let mut cells = Vec::new();
    for arm in Arm::ALL {
        for &seed in &cfg.seeds {
            let cell = run_cell(cfg, arm, seed, train, val, noiseless_val)?;
            progress(&cell);
            cells.push(cell);
        }
    }
    Ok(CompareReport::new(cfg.clone(), cells))
}

impl CompareReport {
    /// Sorts cells into table order and computes per-arm medians.
    pub fn new(config: CompareConfig, mut cells: Vec<Cell>) -> Self {
        cells.sort_by_key(|c| (c.arm, c.seed));
        let summary = Arm::ALL
            .iter()
            .filter_map(|&arm| {
                let of = |f: fn(&Cell) -> Option<f64>| -> Vec<f64> {
                    cells
                        .iter()
                        .filter(|c| c.arm == arm)
                        .filter_map(f)
                        .collect()
                };
                let dsc = of(|c| Some(c.val_dsc));
                Some(ArmSummary {
                    arm,
                    dsc: median(&dsc)?,
                    recall: median(&of(|c| Some(c.val_recall)))?,
                    mean_dsc: dsc.iter().sum::<f64>() / dsc.len() as f64,
                    gland_marked: median(&of(|c| c.gland_marked)),
                })
            })
            .collect();
        Self {
            config,
            cells,
            summary,
        }
    }

    pub fn arm(&self, arm: Arm) -> Option<&ArmSummary> {
        self.summary.iter().find(|s| s.arm == arm)
    }

    /// Median DSC of `a` minus that of `b`, in Dice points (×100).
    pub fn gap_points(&self, a: Arm, b: Arm) -> Option<f64> {
        Some(100.0 * (self.arm(a)?.dsc - self.arm(b)?.dsc))
    }

    /// Aligned text: one row per cell, then one median row per arm.
    pub fn table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:>6} {:>8} {:>8} {:>10} {:>13}",
            "arm", "seed", "DSC%", "recall%", "clean DSC%", "gland marked%"
        );
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{:<10} {:>6} {:>8} {:>8} {:>10} {:>13}",
                c.arm.name(),
                c.seed,
                pct(Some(c.val_dsc)),
                pct(Some(c.val_recall)),
                pct(c.noiseless_dsc),
                pct(c.gland_marked)
            );
        }
        for s in &self.summary {
            let _ = writeln!(
                out,
                "{:<10} {:>6} {:>8} {:>8} {:>10} {:>13}",
                s.arm.name(),
                "median",
                pct(Some(s.dsc)),
                pct(Some(s.recall)),
                "",
                pct(s.gland_marked)
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(arm: Arm, seed: u64, dsc: f64) -> Cell {
        Cell {
            arm,
            seed,
            val_dsc: dsc,
            val_recall: dsc,
            noiseless_dsc: None,
            gland_marked: (arm == Arm::PostOnly).then_some(0.5),
            train_loss: 0.0,
            wall_ms: 0,
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(LrSchedule::Cosine.lr(1.0, 0, 4), 1.0);
        assert!((LrSchedule::Cosine.lr(1.0, 2, 4) - 0.5).abs() < 1e-12);
        assert!(LrSchedule::Cosine.lr(1.0, 3, 4) < 0.2);
        assert_eq!(LrSchedule::Constant.lr(0.1, 3, 4), 0.1);
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn report_order_and_gaps() {
        let cells = vec![
            cell(Arm::Weighted, 2, 0.9),
            cell(Arm::PostOnly, 1, 0.7),
            cell(Arm::Weighted, 1, 0.8),
            cell(Arm::Direct, 1, 0.85),
            cell(Arm::Weighted, 3, 0.95),
        ];
        let r = CompareReport::new(CompareConfig::default(), cells);
        let order: Vec<(Arm, u64)> = r.cells.iter().map(|c| (c.arm, c.seed)).collect();
        assert_eq!(
            order,
            vec![
                (Arm::PostOnly, 1),
                (Arm::Direct, 1),
                (Arm::Weighted, 1),
                (Arm::Weighted, 2),
                (Arm::Weighted, 3)
            ]
        );
        assert_eq!(r.arm(Arm::Weighted).unwrap().dsc, 0.9);
        assert!((r.gap_points(Arm::Weighted, Arm::PostOnly).unwrap() - 20.0).abs() < 1e-9);
        let table = r.table();
        assert_eq!(table.lines().count(), 1 + 5 + 3);
        assert!(table
            .lines()
            .all(|l| l.len() == table.lines().next().unwrap().len()));
    }
}
