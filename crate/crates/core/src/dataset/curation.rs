//! Applying keep/drop decisions to a manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::dataset::DatasetError;
use crate::imaging::{Manifest, Split, Status};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Verdict {
    Kept,
    Dropped,
}

impl From<Verdict> for Status {
    fn from(v: Verdict) -> Status {
        match v {
            Verdict::Kept => Status::Kept,
            Verdict::Dropped => Status::Dropped,
        }
    }
}

impl FromStr for Verdict {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "kept" | "keep" => Ok(Verdict::Kept),
            "dropped" | "drop" => Ok(Verdict::Dropped),
            _ => Err(format!("invalid decision '{s}' (kept|dropped)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decision {
    pub verdict: Verdict,
    pub artifact_tag: Option<String>,
}

impl From<Verdict> for Decision {
    fn from(verdict: Verdict) -> Self {
        Decision { verdict, artifact_tag: None }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CurationCounts {
    pub total: usize,
    pub pending: usize,
    pub kept: usize,
    pub dropped: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl CurationCounts {
    pub fn of(manifest: &Manifest) -> Self {
        CurationCounts {
            total: manifest.len(),
            pending: manifest.count_status(Status::Pending),
            kept: manifest.count_status(Status::Kept),
            dropped: manifest.count_status(Status::Dropped),
            train: manifest.count_split(Split::Train),
            val: manifest.count_split(Split::Val),
            test: manifest.count_split(Split::Test),
        }
    }
}

impl fmt::Display for CurationCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total\t{}\npending\t{}\nkept\t{}\ndropped\t{}\ntrain\t{}\nval\t{}\ntest\t{}",
            self.total, self.pending, self.kept, self.dropped, self.train, self.val, self.test
        )
    }
}

/// Sets statuses from `decisions`. Dropped tiles lose their split; kept tiles keep theirs.
pub fn apply_curation(
    manifest: &Manifest,
    decisions: &BTreeMap<String, Decision>,
) -> Result<(Manifest, CurationCounts), DatasetError> {
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, r) in manifest.records().iter().enumerate() {
        index.insert(&r.tile_id, i);
    }
    if let Some(unknown) = decisions.keys().find(|id| !index.contains_key(id.as_str())) {
        return Err(DatasetError::UnknownTile(unknown.clone()));
    }
    let mut records = manifest.records().to_vec();
    for (id, d) in decisions {
        let r = &mut records[index[id.as_str()]];
        r.status = d.verdict.into();
        if d.verdict == Verdict::Dropped {
            r.split = Split::Unassigned;
        }
        if d.artifact_tag.is_some() {
            r.artifact_tag = d.artifact_tag.clone();
        }
    }
    let out = manifest.with_records(records)?;
    let counts = CurationCounts::of(&out);
    Ok((out, counts))
}

/// Parses `tile_id<TAB>kept|dropped[<TAB>tag]` lines.
pub fn parse_decisions(text: &str) -> Result<BTreeMap<String, Decision>, DatasetError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| DatasetError::Parse { line: i + 1, reason };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(bad("expected tile_id<TAB>decision[<TAB>tag]".into()));
        }
        let verdict: Verdict = fields[1].trim().parse().map_err(bad)?;
        let artifact_tag = fields.get(2).map(|t| t.trim().to_string()).filter(|t| !t.is_empty());
        if out.insert(fields[0].to_string(), Decision { verdict, artifact_tag }).is_some() {
            return Err(bad(format!("tile '{}' decided twice", fields[0])));
        }
    }
    Ok(out)
}
