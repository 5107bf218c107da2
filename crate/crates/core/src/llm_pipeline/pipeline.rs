use std::fs;
use std::path::Path;
use std::thread;

use crate::dataforge::{
    assemble, gen_microworld, AffordanceDataset, ComposeConfig, DetectionDb, MicroWorld, MicroWorldSpec, RankRow,
    TaskRanks,
};

use super::client::{CompletionClient, DecodeParams};
use super::table::{Provenance, TableRow, TaskObjectTable};
use super::PipelineError;

pub const PRODUCER_TEMPLATE: &str = include_str!("../../assets/prompts/producer.txt");
pub const MATCHER_TEMPLATE: &str = include_str!("../../assets/prompts/matcher.txt");
pub const INSPECTOR_TEMPLATE: &str = include_str!("../../assets/prompts/inspector.txt");

pub const TASKS_PER_CATEGORY: usize = 10;

const PREPOSITIONS: [&str; 15] = [
    "with", "on", "in", "into", "onto", "from", "at", "for", "of", "to", "under", "over", "by", "inside", "off",
];

/// Substitutes `{key}` placeholders.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut s = template.to_string();
    for (k, v) in vars {
        s = s.replace(&format!("{{{k}}}"), v);
    }
    s
}

/// Lowercased phrase with list markers removed, or `None` when it is not a
/// multi-word phrase containing a preposition.
fn clean_phrase(line: &str) -> Option<String> {
    let t = line
        .trim()
        .trim_start_matches(|c: char| c.is_ascii_digit() || c == '.' || c == ')' || c == '-' || c == '*')
        .trim()
        .trim_matches('"')
        .to_lowercase();
    let words: Vec<&str> = t.split_whitespace().collect();
    if words.len() < 2 || !words.iter().all(|w| w.chars().all(|c| c.is_ascii_alphabetic() || c == '\'')) {
        return None;
    }
    words[1..].iter().any(|w| PREPOSITIONS.contains(w)).then(|| words.join(" "))
}

/// Ten task phrases for one category.
pub fn produce_tasks(client: &dyn CompletionClient, category: &str, params: &DecodeParams) -> Result<Vec<String>, PipelineError> {
    if category.trim().is_empty() {
        return Err(PipelineError::Input("empty category name".into()));
    }
    let text = client.complete(&render(PRODUCER_TEMPLATE, &[("category", category)]), params)?;
    let mut out: Vec<String> = Vec::new();
    for p in text.lines().filter_map(clean_phrase) {
        if !out.contains(&p) {
            out.push(p);
        }
    }
    if out.len() < TASKS_PER_CATEGORY {
        return Err(PipelineError::Unparseable {
            stage: "producer",
            reason: format!("{} usable phrases, need {TASKS_PER_CATEGORY}", out.len()),
            raw: text,
        });
    }
    out.truncate(TASKS_PER_CATEGORY);
    Ok(out)
}

/// Concatenates per-category lists, keeping the first occurrence.
pub fn pool_tasks(lists: &[Vec<String>]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for p in lists.iter().flatten() {
        if !out.contains(p) {
            out.push(p.clone());
        }
    }
    out
}

/// Ranked categories for `task`, renumbered 1..m in the answer's order.
pub fn match_pairs(
    client: &dyn CompletionClient,
    task: &str,
    categories: &[String],
    params: &DecodeParams,
) -> Result<Vec<(String, u32)>, PipelineError> {
    if categories.is_empty() {
        return Err(PipelineError::Input("no candidate categories".into()));
    }
    let cands = categories.join("; ");
    let text = client.complete(&render(MATCHER_TEMPLATE, &[("task", task), ("candidates", &cands)]), params)?;
    if text.trim().eq_ignore_ascii_case("none") {
        return Ok(Vec::new());
    }
    let bad = |reason: String| PipelineError::Unparseable {
        stage: "matcher",
        reason,
        raw: text.clone(),
    };
    let mut rows: Vec<(String, u32)> = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (c, r) = line.split_once('\t').ok_or_else(|| bad(format!("no tab in `{line}`")))?;
        let c = c.trim();
        if !categories.iter().any(|k| k == c) {
            return Err(bad(format!("`{c}` is not a candidate")));
        }
        let r: u32 = r.trim().parse().map_err(|_| bad(format!("bad rank in `{line}`")))?;
        if r == 0 || rows.iter().any(|x| x.0 == c) {
            return Err(bad(format!("bad or repeated entry `{line}`")));
        }
        rows.push((c.to_string(), r));
    }
    rows.sort_by_key(|x| x.1);
    Ok(rows.into_iter().enumerate().map(|(i, (c, _))| (c, i as u32 + 1)).collect())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InspectionReport {
    /// `(task, category, reason)`.
    pub removed: Vec<(String, String, String)>,
    /// Tasks whose inspector answer could not be read; their pairs are kept.
    pub manual: Vec<(String, String)>,
    /// Tasks whose ranks were renumbered after removals.
    pub renormalized: Vec<String>,
}

impl InspectionReport {
    pub fn is_empty(&self) -> bool {
        self.removed.is_empty() && self.manual.is_empty() && self.renormalized.is_empty()
    }
}

fn parse_inspection(text: &str, pairs: &[(&str, u32)]) -> Option<Vec<(String, Option<String>)>> {
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').map(str::trim).collect();
        let c = *f.get(1)?;
        if !pairs.iter().any(|p| p.0 == c) {
            return None;
        }
        match f[0] {
            "keep" => out.push((c.to_string(), None)),
            "remove" => out.push((c.to_string(), Some(f.get(2).copied().unwrap_or("no reason given").to_string()))),
            _ => return None,
        }
    }
    Some(out)
}

/// Drops pairs the inspector rejects and renumbers ranks. Never adds rows.
pub fn inspect_pairs(
    client: &dyn CompletionClient,
    table: &TaskObjectTable,
    params: &DecodeParams,
) -> (TaskObjectTable, InspectionReport) {
    let mut report = InspectionReport::default();
    let mut out = TaskObjectTable::default();
    for task in table.tasks() {
        let pairs = table.ranked(task);
        let list = pairs.iter().map(|(c, r)| format!("{c}={r}")).collect::<Vec<_>>().join("; ");
        let verdict = client
            .complete(&render(INSPECTOR_TEMPLATE, &[("task", task), ("pairs", &list)]), params)
            .map_err(|e| e.to_string())
            .and_then(|t| parse_inspection(&t, &pairs).ok_or(t));
        let rows = table.rows.iter().filter(|r| r.task == task);
        match verdict {
            Err(raw) => {
                report.manual.push((task.to_string(), raw));
                out.rows.extend(rows.cloned());
            }
            Ok(v) => {
                let before = out.rows.len();
                for r in rows {
                    if let Some((_, Some(why))) = v.iter().find(|(c, _)| *c == r.category) {
                        report.removed.push((task.into(), r.category.clone(), why.clone()));
                        continue;
                    }
                    let mut r = r.clone();
                    if r.provenance == Provenance::Producer {
                        r.provenance = Provenance::InspectorApproved;
                    }
                    out.rows.push(r);
                }
                let ranks: Vec<u32> = out.rows[before..].iter().map(|r| r.rank).collect();
                if ranks.iter().enumerate().any(|(i, &r)| r as usize != i + 1) {
                    report.renormalized.push(task.to_string());
                }
            }
        }
    }
    out.renormalize();
    (out, report)
}

/// A row set aside for manual review.
#[derive(Clone, Debug, PartialEq)]
pub struct QuarantineEntry {
    pub stage: String,
    pub subject: String,
    pub reason: String,
    pub raw: String,
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n")
}

pub fn quarantine_tsv(entries: &[QuarantineEntry]) -> String {
    let mut s = String::from("# stage\tsubject\treason\traw\n");
    for e in entries {
        s.push_str(&format!("{}\t{}\t{}\t{}\n", e.stage, escape(&e.subject), escape(&e.reason), escape(&e.raw)));
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub params: DecodeParams,
    pub max_in_flight: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            params: DecodeParams::default(),
            max_in_flight: 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineReport {
    /// Categories whose producer call failed.
    pub pending: Vec<(String, String)>,
    pub quarantine: Vec<QuarantineEntry>,
    /// Tasks no category matched.
    pub dropped_tasks: Vec<String>,
    pub inspection: InspectionReport,
}

/// Applies `f` to every item with at most `width` calls in flight; results
/// keep item order.
fn fan_out<T: Sync, R: Send>(items: &[T], width: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(width.max(1)) {
        thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|it| s.spawn(|| f(it))).collect();
            out.extend(handles.into_iter().map(|h| h.join().expect("pipeline worker panicked")));
        });
    }
    out
}

/// Steps 1 to 3: task generation, matching with ranks, inspection.
pub fn run_pipeline(
    client: &dyn CompletionClient,
    categories: &[String],
    cfg: &PipelineConfig,
) -> (TaskObjectTable, PipelineReport) {
    let mut report = PipelineReport::default();
    let produced = fan_out(categories, cfg.max_in_flight, |c| produce_tasks(client, c, &cfg.params));
    let mut lists = Vec::new();
    for (c, r) in categories.iter().zip(produced) {
        match r {
            Ok(l) => lists.push(l),
            Err(e) => {
                if let PipelineError::Unparseable { raw, reason, stage } = &e {
                    report.quarantine.push(QuarantineEntry {
                        stage: stage.to_string(),
                        subject: c.clone(),
                        reason: reason.clone(),
                        raw: raw.clone(),
                    });
                }
                report.pending.push((c.clone(), e.to_string()));
            }
        }
    }
    let tasks = pool_tasks(&lists);
    let matched = fan_out(&tasks, cfg.max_in_flight, |t| match_pairs(client, t, categories, &cfg.params));
    let mut table = TaskObjectTable::default();
    for (t, m) in tasks.iter().zip(matched) {
        match m {
            Ok(rows) if rows.is_empty() => report.dropped_tasks.push(t.clone()),
            Ok(rows) => table.rows.extend(rows.into_iter().map(|(category, rank)| TableRow {
                task: t.clone(),
                category,
                rank,
                provenance: Provenance::Producer,
            })),
            Err(e) => report.quarantine.push(QuarantineEntry {
                stage: "matcher".into(),
                subject: t.clone(),
                reason: e.to_string(),
                raw: match e {
                    PipelineError::Unparseable { raw, .. } => raw,
                    _ => String::new(),
                },
            }),
        }
    }
    let (table, inspection) = inspect_pairs(client, &table, &cfg.params);
    report.inspection = inspection;
    (table, report)
}

pub fn write_quarantine(path: &Path, report: &PipelineReport) -> Result<(), PipelineError> {
    let mut entries = report.quarantine.clone();
    entries.extend(report.inspection.manual.iter().map(|(t, raw)| QuarantineEntry {
        stage: "inspector".into(),
        subject: t.clone(),
        reason: "unreadable verdict, pairs kept".into(),
        raw: raw.clone(),
    }));
    fs::write(path, quarantine_tsv(&entries)).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))
}

fn task_ranks(table: &TaskObjectTable, id_of: impl Fn(&str) -> Option<u64>) -> Result<Vec<TaskRanks>, PipelineError> {
    table
        .tasks()
        .into_iter()
        .map(|t| {
            let ranks = table
                .ranked(t)
                .into_iter()
                .map(|(c, r)| {
                    id_of(c)
                        .map(|id| (id, r))
                        .ok_or_else(|| PipelineError::Input(format!("category `{c}` is not in the source")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(TaskRanks { verb: t.into(), ranks })
        })
        .collect()
}

/// Step 4 over a detection database.
pub fn build_dataset(
    table: &TaskObjectTable,
    db: &DetectionDb,
    cfg: &ComposeConfig,
    provenance: &str,
) -> Result<AffordanceDataset, PipelineError> {
    table.validate()?;
    if table.is_empty() {
        return Ok(AffordanceDataset::empty(&format!("{provenance}; zero tasks"), cfg.fractions));
    }
    let tasks = task_ranks(table, |c| db.category_by_name(c).map(|k| k.id))?;
    Ok(assemble(db, &tasks, cfg, provenance)?)
}

/// Step 4 over the synthetic world, replacing its rank table with `table`.
/// An empty table gives an empty dataset and no images.
pub fn build_microworld(table: &TaskObjectTable, spec: &MicroWorldSpec, provenance: &str) -> Result<MicroWorld, PipelineError> {
    table.validate()?;
    if table.is_empty() {
        return Ok(MicroWorld {
            dataset: AffordanceDataset::empty(&format!("{provenance}; zero tasks"), spec.fractions),
            scenes: Vec::new(),
            images: Default::default(),
            skipped: 0,
        });
    }
    let spec = MicroWorldSpec {
        ranks: table
            .rows
            .iter()
            .map(|r| RankRow {
                task: r.task.clone(),
                category: r.category.clone(),
                rank: r.rank,
                provenance: r.provenance.as_str().into(),
            })
            .collect(),
        ..spec.clone()
    };
    let mut w = gen_microworld(&spec)?;
    w.dataset.provenance = provenance.into();
    Ok(w)
}
