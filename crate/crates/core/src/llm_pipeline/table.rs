use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use super::PipelineError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Producer,
    InspectorApproved,
    Fixture,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Producer => "producer",
            Self::InspectorApproved => "inspector-approved",
            Self::Fixture => "fixture",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "producer" => Some(Self::Producer),
            "inspector-approved" => Some(Self::InspectorApproved),
            "fixture" => Some(Self::Fixture),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableRow {
    pub task: String,
    pub category: String,
    pub rank: u32,
    pub provenance: Provenance,
}

/// Ranked task-object pairs. Rows of one task are contiguous and sorted by
/// rank.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TaskObjectTable {
    pub rows: Vec<TableRow>,
}

impl TaskObjectTable {
    pub fn tasks(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if out.last() != Some(&r.task.as_str()) && !out.contains(&r.task.as_str()) {
                out.push(&r.task);
            }
        }
        out
    }

    pub fn ranked(&self, task: &str) -> Vec<(&str, u32)> {
        self.rows
            .iter()
            .filter(|r| r.task == task)
            .map(|r| (r.category.as_str(), r.rank))
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Unique (task, category) pairs and gapless ranks 1..m per task.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let mut seen = BTreeSet::new();
        let mut ranks: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
        for r in &self.rows {
            if !seen.insert((r.task.as_str(), r.category.as_str())) {
                return Err(PipelineError::Table(format!("duplicate pair ({}, {})", r.task, r.category)));
            }
            ranks.entry(&r.task).or_default().push(r.rank);
        }
        for (t, mut v) in ranks {
            v.sort_unstable();
            if v.iter().enumerate().any(|(i, &r)| r as usize != i + 1) {
                return Err(PipelineError::Table(format!("ranks of `{t}` are not 1..{}", v.len())));
            }
        }
        Ok(())
    }

    /// Reassigns ranks 1..m per task keeping the relative order; ties keep
    /// row order.
    pub fn renormalize(&mut self) {
        let order: Vec<String> = self.tasks().into_iter().map(str::to_string).collect();
        let mut out = Vec::with_capacity(self.rows.len());
        for t in order {
            let mut group: Vec<TableRow> = self.rows.iter().filter(|r| r.task == t).cloned().collect();
            group.sort_by_key(|r| r.rank);
            for (i, r) in group.iter_mut().enumerate() {
                r.rank = i as u32 + 1;
            }
            out.extend(group);
        }
        self.rows = out;
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("# task\tcategory\trank\tprovenance\n");
        for r in &self.rows {
            s.push_str(&format!("{}\t{}\t{}\t{}\n", r.task, r.category, r.rank, r.provenance.as_str()));
        }
        s
    }

    pub fn parse_tsv(text: &str) -> Result<Self, PipelineError> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let bad = |m: &str| PipelineError::Table(format!("line {}: {m}", i + 1));
            if f.len() != 4 {
                return Err(bad("expected 4 tab-separated fields"));
            }
            rows.push(TableRow {
                task: f[0].into(),
                category: f[1].into(),
                rank: f[2].parse().map_err(|_| bad("bad rank"))?,
                provenance: Provenance::parse(f[3]).ok_or_else(|| bad("unknown provenance"))?,
            });
        }
        let mut t = Self { rows };
        t.renormalize();
        t.validate()?;
        Ok(t)
    }
}

impl fmt::Display for TaskObjectTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_tsv())
    }
}
