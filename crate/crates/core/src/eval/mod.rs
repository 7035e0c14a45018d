//! Evaluation: exit-stage distributions, Bradley-Terry ranking, FLOPs and
//! latency accounting.

mod bt;
mod flops;
mod timing;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harmonet::STAGES;

pub use bt::{bt_fit, log_likelihood, BtScores, PairwiseCounts, DEFAULT_MAX_ITER, DEFAULT_TOL};
pub use flops::{conv_flops, count_flops, gru_flops, FlopsReport, StageBreakdown, FLOP_CONVENTION};
pub use timing::{time_stages, StageTiming, TimingReport};

/// Counts of exit stages 1-4 and their fractions (`None` when empty).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExitHistogram {
    pub counts: [usize; STAGES],
    pub total: usize,
    pub fractions: Option<[f64; STAGES]>,
}

impl ExitHistogram {
    /// Fractions rounded to four decimals, as reported.
    pub fn rounded_fractions(&self) -> Option<[f64; STAGES]> {
        self.fractions.map(|f| f.map(|x| (x * 1e4).round() / 1e4))
    }
}

pub fn exit_histogram(stages: &[usize]) -> Result<ExitHistogram> {
    let mut counts = [0usize; STAGES];
    for &s in stages {
        if !(1..=STAGES).contains(&s) {
            return Err(Error::InvalidArgument(format!("exit stage {s} outside 1..=4")));
        }
        counts[s - 1] += 1;
    }
    let total = stages.len();
    let fractions = (total > 0).then(|| counts.map(|c| c as f64 / total as f64));
    Ok(ExitHistogram {
        counts,
        total,
        fractions,
    })
}

/// Render rows as an aligned text table.
pub fn text_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    for r in rows {
        out.push('\n');
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out.push('\n');
    out
}
