//! Bradley-Terry strengths fitted by the minorize-maximize iteration.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 10_000;

/// `wins[i][j]`: how often method `i` was preferred over method `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseCounts {
    pub methods: Vec<String>,
    pub wins: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct Row {
    method_a: String,
    method_b: String,
    wins_a: f64,
    wins_b: f64,
}

impl PairwiseCounts {
    pub fn new(methods: Vec<String>, wins: Vec<Vec<f64>>) -> Result<Self> {
        let n = methods.len();
        if wins.len() != n || wins.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidArgument(format!("win matrix must be {n}x{n}")));
        }
        for (i, r) in wins.iter().enumerate() {
            for (j, &w) in r.iter().enumerate() {
                if !(w >= 0.0 && w.is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "wins[{i}][{j}] = {w} must be finite and >= 0"
                    )));
                }
                if i == j && w != 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "method `{}` compared with itself",
                        methods[i]
                    )));
                }
            }
        }
        Ok(Self { methods, wins })
    }

    /// Read rows `method_a,method_b,wins_a,wins_b`; repeated pairs add up.
    /// Methods are indexed in order of first appearance.
    pub fn from_csv_reader(r: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        let mut methods = Vec::new();
        let mut entries = Vec::new();
        for row in rdr.deserialize::<Row>() {
            let row = row?;
            if row.method_a == row.method_b {
                return Err(Error::InvalidArgument(format!(
                    "method `{}` compared with itself",
                    row.method_a
                )));
            }
            for w in [row.wins_a, row.wins_b] {
                if !(w >= 0.0 && w.is_finite()) {
                    return Err(Error::InvalidArgument(format!("win count {w} must be finite and >= 0")));
                }
            }
            let mut id = |m: &str| {
                *index.entry(m.to_string()).or_insert_with(|| {
                    methods.push(m.to_string());
                    methods.len() - 1
                })
            };
            let (a, b) = (id(&row.method_a), id(&row.method_b));
            entries.push((a, b, row.wins_a, row.wins_b));
        }
        let n = methods.len();
        let mut wins = vec![vec![0.0; n]; n];
        for (a, b, wa, wb) in entries {
            wins[a][b] += wa;
            wins[b][a] += wb;
        }
        Self::new(methods, wins)
    }

    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(f)
    }

    pub fn len(&self) -> usize {
        self.methods.len()
    }

    pub fn is_empty(&self) -> bool {
        self.methods.is_empty()
    }

    fn games(&self, i: usize, j: usize) -> f64 {
        self.wins[i][j] + self.wins[j][i]
    }

    /// Connected components of the comparison graph, as method-name lists.
    #[allow(clippy::needless_range_loop)]
    pub fn components(&self) -> Vec<Vec<String>> {
        let n = self.len();
        let mut comp = vec![usize::MAX; n];
        let mut out = Vec::new();
        for start in 0..n {
            if comp[start] != usize::MAX {
                continue;
            }
            let id = out.len();
            let mut stack = vec![start];
            comp[start] = id;
            let mut members = Vec::new();
            while let Some(i) = stack.pop() {
                members.push(i);
                for j in 0..n {
                    if comp[j] == usize::MAX && self.games(i, j) > 0.0 {
                        comp[j] = id;
                        stack.push(j);
                    }
                }
            }
            members.sort_unstable();
            out.push(members.into_iter().map(|i| self.methods[i].clone()).collect());
        }
        out
    }

    /// Whether every method can reach every other along "beat" edges; the
    /// maximum-likelihood strengths are finite exactly when this holds.
    #[allow(clippy::needless_range_loop)]
    fn strongly_connected(&self) -> bool {
        let n = self.len();
        let reach = |forward: bool| {
            let mut seen = vec![false; n];
            let mut stack = vec![0];
            seen[0] = true;
            while let Some(i) = stack.pop() {
                for j in 0..n {
                    let w = if forward { self.wins[i][j] } else { self.wins[j][i] };
                    if !seen[j] && w > 0.0 {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
            seen.into_iter().all(|s| s)
        };
        n == 0 || (reach(true) && reach(false))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BtScores {
    pub methods: Vec<String>,
    /// Centered log-strengths.
    pub scores: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood before the first sweep and after each sweep.
    pub log_likelihood: Vec<f64>,
}

impl BtScores {
    /// Fitted `p(i beats j)`.
    pub fn win_prob(&self, i: usize, j: usize) -> f64 {
        1.0 / (1.0 + (self.scores[j] - self.scores[i]).exp())
    }

    /// Method indices from strongest to weakest.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        idx
    }
}

/// `sum_{i != j} w_ij (log s_i - log(s_i + s_j))` for log-strengths `theta`.
pub fn log_likelihood(counts: &PairwiseCounts, theta: &[f64]) -> f64 {
    let n = counts.len();
    let mut ll = 0.0;
    for i in 0..n {
        for j in 0..n {
            let w = counts.wins[i][j];
            if w > 0.0 {
                let m = theta[i].max(theta[j]);
                let lse = m + ((theta[i] - m).exp() + (theta[j] - m).exp()).ln();
                ll += w * (theta[i] - lse);
            }
        }
    }
    ll
}

fn center(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
}

/// Fit strengths by `s_i <- W_i / sum_{j != i} n_ij / (s_i + s_j)`,
/// renormalized every sweep, until `max |d log s| < tol` or `max_iter`.
pub fn bt_fit(counts: &PairwiseCounts, tol: f64, max_iter: usize) -> Result<BtScores> {
    let n = counts.len();
    if n == 0 {
        return Err(Error::InvalidArgument("no methods to rank".into()));
    }
    for i in 0..n {
        if (0..n).all(|j| counts.games(i, j) == 0.0) {
            return Err(Error::InvalidArgument(format!(
                "method `{}` has no comparisons",
                counts.methods[i]
            )));
        }
    }
    let comps = counts.components();
    if comps.len() > 1 {
        return Err(Error::Disconnected(comps));
    }
    if !counts.strongly_connected() {
        return Err(Error::InvalidArgument(
            "strengths are unbounded: some group of methods never beats (or never loses to) the rest".into(),
        ));
    }
    let total_wins: Vec<f64> = counts.wins.iter().map(|r| r.iter().sum()).collect();
    let mut theta = vec![0.0; n];
    let mut trace = vec![log_likelihood(counts, &theta)];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let s: Vec<f64> = theta.iter().map(|t| t.exp()).collect();
        let mut next: Vec<f64> = (0..n)
            .map(|i| {
                let denom: f64 = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| counts.games(i, j) / (s[i] + s[j]))
                    .sum();
                (total_wins[i] / denom).ln()
            })
            .collect();
        center(&mut next);
        let delta = next.iter().zip(&theta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        theta = next;
        trace.push(log_likelihood(counts, &theta));
        if delta < tol {
            converged = true;
            break;
        }
    }
    Ok(BtScores {
        methods: counts.methods.clone(),
        scores: theta,
        iterations,
        converged,
        log_likelihood: trace,
    })
}
