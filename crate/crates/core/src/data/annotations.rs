use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::derive_labels;
use crate::error::{Error, Result};
use crate::harmonet::{SCORED_STAGES, STAGES};

/// A sample's annotated exit stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    pub exit_stage: usize,
}

impl AnnotationRecord {
    pub fn labels(&self) -> [f64; SCORED_STAGES] {
        derive_labels(self.exit_stage).expect("validated on load")
    }
}

/// One annotator's vote; several may share an id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub id: String,
    pub exit_stage: usize,
}

fn parse_lines<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<(usize, T)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

fn check_stage(line: usize, stage: usize) -> Result<()> {
    if (1..=STAGES).contains(&stage) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "line {line}: exit_stage {stage} outside 1..=4"
        )))
    }
}

/// Parse JSON-lines `{"id": str, "exit_stage": int}`. Blank lines are
/// skipped; duplicate ids and out-of-range stages are errors.
pub fn parse_annotations(text: &str) -> Result<Vec<AnnotationRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, rec) in parse_lines::<AnnotationRecord>(text)? {
        check_stage(line, rec.exit_stage)?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::InvalidArgument(format!(
                "line {line}: duplicate id `{}`",
                rec.id
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("{}: {m}", path.display())),
        e => e,
    })
}

/// Plurality vote per id; ties go to the earliest tied stage. Output is
/// sorted by id.
pub fn aggregate_votes(votes: &[VoteRecord]) -> Result<Vec<AnnotationRecord>> {
    let mut tally: BTreeMap<&str, [usize; STAGES]> = BTreeMap::new();
    for (i, v) in votes.iter().enumerate() {
        check_stage(i + 1, v.exit_stage)?;
        tally.entry(&v.id).or_default()[v.exit_stage - 1] += 1;
    }
    Ok(tally
        .into_iter()
        .map(|(id, counts)| {
            let best = counts.iter().copied().max().unwrap_or(0);
            let stage = counts.iter().position(|&c| c == best).unwrap_or(STAGES - 1) + 1;
            AnnotationRecord {
                id: id.to_string(),
                exit_stage: stage,
            }
        })
        .collect())
}

pub fn parse_votes(text: &str) -> Result<Vec<VoteRecord>> {
    Ok(parse_lines(text)?.into_iter().map(|(_, v)| v).collect())
}
