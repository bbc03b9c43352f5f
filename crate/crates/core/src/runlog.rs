//! The run log: one JSON record per line, header first.
//!
//! Records are written in `(step, phase, member)` order, where the phase
//! within a step is trials, then rung results, then directives, then the
//! population snapshot. Wall-clock times are deliberately kept out of the log
//! (see `timings.csv`) so that a replayed run reproduces it byte for byte.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::confspace::Configuration;
use crate::error::RunError;
use crate::schedulers::{Action, MemberId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub run_id: String,
    pub scheduler: String,
    pub group: String,
    pub env: String,
    pub master_seed: u64,
    pub members: Vec<MemberId>,
    /// The full run configuration, for provenance.
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub step: u64,
    pub member: MemberId,
    pub trial: u64,
    pub config: Configuration,
    #[serde(rename = "return")]
    pub ret: Option<f64>,
    pub score: Option<f64>,
    pub failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// A configuration's score on completing a Hyperband rung.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RungRecord {
    pub step: u64,
    pub member: MemberId,
    pub bracket: u64,
    pub rung: u64,
    pub budget: u64,
    pub score: Option<f64>,
}

/// Where a cloned or backtracked member's state came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSource {
    pub member: MemberId,
    /// Barrier at which the source state was captured.
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectiveRecord {
    pub step: u64,
    pub member: MemberId,
    pub action: Action,
    /// Trial index of the member after the directive is applied.
    pub trial: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<StateSource>,
    /// Configuration active from the next trial onward.
    pub config: Configuration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberState {
    pub member: MemberId,
    pub trial: u64,
    pub score: Option<f64>,
    pub config: Configuration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub step: u64,
    pub members: Vec<MemberState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub best_member: MemberId,
    pub best_score: Option<f64>,
    pub schedule: Schedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Record {
    Header(RunHeader),
    Trial(TrialRecord),
    Rung(RungRecord),
    Directive(DirectiveRecord),
    Snapshot(SnapshotRecord),
    Summary(SummaryRecord),
}

impl Record {
    pub fn step(&self) -> Option<u64> {
        match self {
            Record::Trial(r) => Some(r.step),
            Record::Rung(r) => Some(r.step),
            Record::Directive(r) => Some(r.step),
            Record::Snapshot(r) => Some(r.step),
            Record::Header(_) | Record::Summary(_) => None,
        }
    }

    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("records serialize");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub header: RunHeader,
    pub records: Vec<Record>,
}

impl RunLog {
    pub fn new(header: RunHeader) -> Self {
        RunLog {
            header,
            records: Vec::new(),
        }
    }

    pub fn trials(&self) -> impl Iterator<Item = &TrialRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Trial(t) => Some(t),
            _ => None,
        })
    }

    pub fn rungs(&self) -> impl Iterator<Item = &RungRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Rung(t) => Some(t),
            _ => None,
        })
    }

    pub fn directives(&self) -> impl Iterator<Item = &DirectiveRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Directive(t) => Some(t),
            _ => None,
        })
    }

    pub fn snapshots(&self) -> impl Iterator<Item = &SnapshotRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Snapshot(t) => Some(t),
            _ => None,
        })
    }

    pub fn summary(&self) -> Option<&SummaryRecord> {
        self.records.iter().rev().find_map(|r| match r {
            Record::Summary(s) => Some(s),
            _ => None,
        })
    }

    pub fn to_ndjson(&self) -> String {
        let mut out = Record::Header(self.header.clone()).to_line();
        for r in &self.records {
            out.push_str(&r.to_line());
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, RunError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = match lines.next().map(serde_json::from_str::<Record>) {
            Some(Ok(Record::Header(h))) => h,
            Some(Ok(_)) => return Err(RunError::Log("first record is not a header".into())),
            Some(Err(e)) => return Err(RunError::Log(e.to_string())),
            None => return Err(RunError::Log("empty log".into())),
        };
        let records = lines
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| RunError::Log(format!("line {}: {e}", i + 2)))
            })
            .collect::<Result<Vec<Record>, _>>()?;
        Ok(RunLog { header, records })
    }

    /// Reads `path`, or `path/runlog.ndjson` when `path` is a run directory.
    pub fn read(path: impl AsRef<Path>) -> Result<Self, RunError> {
        let path = path.as_ref();
        let file = if path.is_dir() {
            path.join(RUNLOG_FILE)
        } else {
            path.to_path_buf()
        };
        let text = std::fs::read_to_string(&file).map_err(|e| RunError::io(&file, e))?;
        Self::parse(&text)
    }
}

pub const RUNLOG_FILE: &str = "runlog.ndjson";

/// Appends records to a log file, flushing after each batch.
pub struct LogWriter {
    file: std::io::BufWriter<std::fs::File>,
    path: std::path::PathBuf,
}

impl LogWriter {
    pub fn create(path: &Path, header: &RunHeader) -> Result<Self, RunError> {
        let file = std::fs::File::create(path).map_err(|e| RunError::io(path, e))?;
        let mut w = LogWriter {
            file: std::io::BufWriter::new(file),
            path: path.to_path_buf(),
        };
        w.append(&[Record::Header(header.clone())])?;
        Ok(w)
    }

    /// Opens an existing log and truncates it to its first `keep_bytes` bytes.
    pub fn reopen_truncated(path: &Path, keep_bytes: u64) -> Result<Self, RunError> {
        let file = std::fs::OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(|e| RunError::io(path, e))?;
        file.set_len(keep_bytes).map_err(|e| RunError::io(path, e))?;
        let mut file = std::io::BufWriter::new(file);
        use std::io::Seek;
        file.seek(std::io::SeekFrom::End(0))
            .map_err(|e| RunError::io(path, e))?;
        Ok(LogWriter {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, records: &[Record]) -> Result<(), RunError> {
        for r in records {
            self.file
                .write_all(r.to_line().as_bytes())
                .map_err(|e| RunError::io(&self.path, e))?;
        }
        self.file.flush().map_err(|e| RunError::io(&self.path, e))?;
        self.file
            .get_ref()
            .sync_data()
            .map_err(|e| RunError::io(&self.path, e))
    }

    pub fn byte_len(&mut self) -> Result<u64, RunError> {
        self.file.flush().map_err(|e| RunError::io(&self.path, e))?;
        self.file
            .get_ref()
            .metadata()
            .map(|m| m.len())
            .map_err(|e| RunError::io(&self.path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub trial: u64,
    pub config: Configuration,
}

/// Piecewise-constant hyperparameter schedule; entry `i` applies from its
/// trial index until the next entry's.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Schedule {
    pub entries: Vec<ScheduleEntry>,
}

impl Schedule {
    pub fn constant(config: Configuration) -> Self {
        Schedule {
            entries: vec![ScheduleEntry { trial: 0, config }],
        }
    }

    /// Builds a schedule from per-trial configurations, merging repeats.
    pub fn from_per_trial<'a>(configs: impl IntoIterator<Item = (u64, &'a Configuration)>) -> Self {
        let mut entries: Vec<ScheduleEntry> = Vec::new();
        for (trial, config) in configs {
            if entries.last().is_some_and(|e| e.config.same_values(config)) {
                continue;
            }
            entries.push(ScheduleEntry {
                trial,
                config: config.clone(),
            });
        }
        Schedule { entries }
    }

    pub fn is_valid(&self) -> bool {
        self.entries.first().is_some_and(|e| e.trial == 0)
            && self.entries.windows(2).all(|w| w[0].trial < w[1].trial)
    }

    /// Configuration in force at `trial` (the last entry holds thereafter).
    pub fn config_at(&self, trial: u64) -> &Configuration {
        let i = self.entries.partition_point(|e| e.trial <= trial);
        &self.entries[i.saturating_sub(1)].config
    }

    /// CSV with a `trial` column followed by one column per parameter.
    pub fn to_csv(&self) -> Result<String, RunError> {
        let names: Vec<String> = self
            .entries
            .first()
            .map(|e| e.config.iter().map(|(k, _)| k.to_string()).collect())
            .unwrap_or_default();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut head = vec!["trial".to_string()];
        head.extend(names.iter().cloned());
        w.write_record(&head).map_err(csv_err)?;
        for e in &self.entries {
            let mut row = vec![e.trial.to_string()];
            for n in &names {
                let v = e
                    .config
                    .get(n)
                    .ok_or_else(|| RunError::Config(format!("schedule entry lacks `{n}`")))?;
                row.push(v.to_string());
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| RunError::Log(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv<R: std::io::Read>(reader: R) -> Result<Self, RunError> {
        let mut r = csv::Reader::from_reader(reader);
        let head = r.headers().map_err(csv_err)?.clone();
        if head.get(0) != Some("trial") {
            return Err(RunError::Config("schedule CSV must start with a `trial` column".into()));
        }
        let mut entries = Vec::new();
        for row in r.records() {
            let row = row.map_err(csv_err)?;
            let trial: u64 = row[0]
                .parse()
                .map_err(|_| RunError::Config(format!("bad trial index `{}`", &row[0])))?;
            let mut config = Configuration::new();
            for (name, v) in head.iter().zip(row.iter()).skip(1) {
                let v: f64 = v
                    .parse()
                    .map_err(|_| RunError::Config(format!("bad value `{v}` for `{name}`")))?;
                config.set(name, v);
            }
            entries.push(ScheduleEntry { trial, config });
        }
        let s = Schedule { entries };
        if !s.is_valid() {
            return Err(RunError::Config(
                "schedule trials must start at 0 and strictly increase".into(),
            ));
        }
        Ok(s)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self, RunError> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| RunError::io(path, e))?;
        Self::from_csv(std::io::BufReader::new(f))
    }
}

fn csv_err(e: csv::Error) -> RunError {
    RunError::Log(format!("csv: {e}"))
}

/// Byte offsets just past each line of `text`; used to truncate a log to a barrier.
pub fn line_ends(reader: impl BufRead) -> std::io::Result<Vec<(u64, String)>> {
    let mut out = Vec::new();
    let mut pos = 0u64;
    for line in reader.split(b'\n') {
        let line = line?;
        pos += line.len() as u64 + 1;
        out.push((pos, String::from_utf8_lossy(&line).into_owned()));
    }
    Ok(out)
}
