//! Component ablations over decoupling, position features, the triplet
//! variant and spatial smoothing.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::trainer::Trainer;
use crate::error::{DropError, Result};
use crate::retrieval::Mode;
use crate::synthetic::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Decouple,
    Ppf,
    Pct,
    Ss,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::Decouple, Axis::Ppf, Axis::Pct, Axis::Ss];
}

impl FromStr for Axis {
    type Err = DropError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "decouple" => Ok(Axis::Decouple),
            "ppf" => Ok(Axis::Ppf),
            "pct" => Ok(Axis::Pct),
            "ss" => Ok(Axis::Ss),
            other => Err(DropError::Config(format!(
                "unknown ablation axis {other:?} (decouple, ppf, pct, ss)"
            ))),
        }
    }
}

/// Which components are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub decouple: bool,
    pub ppf: bool,
    pub pct: bool,
    pub ss: bool,
}

impl Components {
    pub const FULL: Components = Components {
        decouple: true,
        ppf: true,
        pct: true,
        ss: true,
    };
    pub const BASELINE: Components = Components {
        decouple: false,
        ppf: false,
        pct: false,
        ss: false,
    };
    pub const DECOUPLE_ONLY: Components = Components {
        decouple: true,
        ..Components::BASELINE
    };

    /// The six component-study rows, baseline first.
    pub fn table() -> Vec<Components> {
        let on = |decouple, ppf, pct, ss| Components { decouple, ppf, pct, ss };
        vec![
            on(false, false, false, false),
            on(true, false, false, false),
            on(true, true, false, false),
            on(true, true, true, false),
            on(true, true, false, true),
            on(true, true, true, true),
        ]
    }

    /// Every on/off combination of `axes`; other components stay on.
    pub fn grid(axes: &[Axis]) -> Vec<Components> {
        let mut out = Vec::with_capacity(1 << axes.len());
        for mask in 0..(1u32 << axes.len()) {
            let mut c = Components::FULL;
            for (i, axis) in axes.iter().enumerate() {
                let v = mask & (1 << i) != 0;
                match axis {
                    Axis::Decouple => c.decouple = v,
                    Axis::Ppf => c.ppf = v,
                    Axis::Pct => c.pct = v,
                    Axis::Ss => c.ss = v,
                }
            }
            out.push(c);
        }
        out
    }

    /// `base` with the disabled components replaced by their fallbacks.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.model.decouple = self.decouple;
        if !self.ppf {
            cfg.model.position.mode = "none".into();
        }
        if !self.pct {
            cfg.loss.triplet = "part_average".into();
        }
        if !self.ss {
            cfg.loss.gamma_smooth = 0.0;
        }
        cfg
    }
}

impl fmt::Display for Components {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = |b: bool| if b { "x" } else { "-" };
        write!(
            f,
            "decouple={} ppf={} pct={} ss={}",
            mark(self.decouple),
            mark(self.ppf),
            mark(self.pct),
            mark(self.ss)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub components: Components,
    pub mode: Mode,
    pub rank1: f64,
    pub map: f64,
    pub parsing_accuracy: f64,
    /// Mean smoothing term over the final epoch.
    pub final_smoothing: f64,
    pub seconds: f64,
}

pub fn run_row(base: &RunConfig, components: Components, dataset: &Dataset) -> Result<AblationResult> {
    let cfg = components.apply(base);
    let start = std::time::Instant::now();
    let mut trainer = Trainer::new(&cfg, dataset)?;
    let fit = trainer.fit(dataset, None, |r| {
        log::info!(
            "[{components}] epoch {} total {:.4} acc {:.3}",
            r.stats.epoch,
            r.stats.total,
            r.stats.pixel_accuracy
        )
    })?;
    let mode = cfg.eval.select_mode;
    let row = fit
        .final_report
        .row(mode)
        .ok_or_else(|| DropError::Config(format!("selection mode {mode} is not among the evaluated modes")))?;
    Ok(AblationResult {
        components,
        mode,
        rank1: row.rank1,
        map: row.map,
        parsing_accuracy: fit.final_report.parsing_accuracy,
        final_smoothing: fit.history.last().map_or(0.0, |r| r.stats.smoothing),
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_ablation(
    base: &RunConfig,
    rows: &[Components],
    dataset: &Dataset,
    mut on_row: impl FnMut(&AblationResult),
) -> Result<Vec<AblationResult>> {
    let mut out = Vec::with_capacity(rows.len());
    for &c in rows {
        let r = run_row(base, c, dataset)?;
        on_row(&r);
        out.push(r);
    }
    Ok(out)
}

pub fn ablation_table(results: &[AblationResult]) -> String {
    let mut s = format!(
        "{:<9}{:<6}{:<6}{:<6}{:>8}{:>8}{:>10}\n",
        "Decouple", "PPF", "PCT", "SS", "R-1", "mAP", "parse-acc"
    );
    let mark = |b: bool| if b { "x" } else { "" };
    for r in results {
        let c = r.components;
        s.push_str(&format!(
            "{:<9}{:<6}{:<6}{:<6}{:>8.1}{:>8.1}{:>9.1}%\n",
            mark(c.decouple),
            mark(c.ppf),
            mark(c.pct),
            mark(c.ss),
            100.0 * r.rank1,
            100.0 * r.map,
            100.0 * r.parsing_accuracy
        ));
    }
    s
}
