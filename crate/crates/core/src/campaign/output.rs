//! Result files: versioned JSON envelopes, RFC-4180 CSV tables, JSON-lines
//! sample stores and the wall-clock sidecar kept out of hashed payloads.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{config_digest, CampaignConfig, SCHEMA_VERSION};
use crate::error::{Error, Result};

/// A campaign result together with the configuration that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelope<T> {
    pub schema_version: u32,
    pub kind: String,
    pub config_digest: String,
    pub config: CampaignConfig,
    pub result: T,
}

impl<T> Envelope<T> {
    /// Snapshots `config` without its output section, which never affects
    /// results, so runs writing to different places stay byte-identical.
    pub fn new(kind: &str, config: &CampaignConfig, result: T) -> Self {
        let config = CampaignConfig { output: Default::default(), ..config.clone() };
        Envelope {
            schema_version: SCHEMA_VERSION,
            kind: kind.to_string(),
            config_digest: config_digest(&config),
            config,
            result,
        }
    }

    /// Rejects foreign schema versions and configurations that no longer
    /// match their recorded digest.
    pub fn check(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema(format!("result schema {} (expected {SCHEMA_VERSION})", self.schema_version)));
        }
        let digest = config_digest(&self.config);
        if digest != self.config_digest {
            return Err(Error::Schema(format!(
                "config digest {} does not match its snapshot ({digest})",
                self.config_digest
            )));
        }
        Ok(())
    }
}

/// Wall-clock facts about a run, written next to (never inside) its result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub command: String,
    pub started_unix: f64,
    pub elapsed_secs: f64,
    pub parallel: usize,
    pub version: String,
}

pub struct Stopwatch {
    started: SystemTime,
    clock: Instant,
}

impl Stopwatch {
    pub fn start() -> Self {
        Stopwatch { started: SystemTime::now(), clock: Instant::now() }
    }

    pub fn finish(&self, command: &str, parallel: usize) -> RunMetadata {
        RunMetadata {
            command: command.to_string(),
            started_unix: self.started.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0),
            elapsed_secs: self.clock.elapsed().as_secs_f64(),
            parallel,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// Optional per-record callback, used to stream records to disk.
pub type Sink<'a, T> = Option<&'a mut dyn FnMut(&T) -> Result<()>>;

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::io(path, e.into()))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Writes serializable rows as a CSV table with a header line.
pub fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = CsvSink::create(path)?;
    for row in rows {
        w.push(&row)?;
    }
    w.finish()
}

/// Incremental CSV writer that keeps the path for error reports.
pub struct CsvSink {
    path: PathBuf,
    writer: csv::Writer<BufWriter<File>>,
}

impl CsvSink {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(CsvSink { path: path.to_path_buf(), writer: csv::Writer::from_writer(create(path)?) })
    }

    pub fn push<T: Serialize>(&mut self, row: &T) -> Result<()> {
        self.writer.serialize(row).map_err(|e| csv_error(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse(format!("{}: {other:?}", path.display())),
    }
}

/// JSON-lines store, one record per line.
pub struct JsonLines {
    path: PathBuf,
    writer: BufWriter<File>,
}

impl JsonLines {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(JsonLines { path: path.to_path_buf(), writer: create(path)? })
    }

    pub fn push<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.writer, record).map_err(|e| Error::io(&self.path, e.into()))?;
        self.writer.write_all(b"\n").map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads every record of a JSON-lines store.
pub fn read_json_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Row {
        name: String,
        value: f64,
    }

    #[test]
    fn envelope_round_trip_and_tamper_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let env = Envelope::new("test", &CampaignConfig::with_seed(3), vec![1.5, 0.1 + 0.2]);
        write_json(&path, &env).unwrap();
        let back: Envelope<Vec<f64>> = read_json(&path).unwrap();
        assert_eq!(back, env);
        back.check().unwrap();
        let mut tampered = back.clone();
        tampered.config.seed = 4;
        assert!(matches!(tampered.check(), Err(Error::Schema(_))));
        tampered = back;
        tampered.schema_version = 0;
        assert!(matches!(tampered.check(), Err(Error::Schema(_))));
    }

    #[test]
    fn csv_quotes_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_csv(&path, [Row { name: "a,\"b\"".into(), value: 2.0 }]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "name,value\n\"a,\"\"b\"\"\",2.0\n");
    }

    #[test]
    fn json_lines_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let mut w = JsonLines::create(&path).unwrap();
        for i in 0..3 {
            w.push(&Row { name: format!("r{i}"), value: i as f64 }).unwrap();
        }
        w.finish().unwrap();
        let rows: Vec<Row> = read_json_lines(&path).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2].name, "r2");
    }

    #[test]
    fn io_errors_carry_the_path() {
        let err = write_json(Path::new("/nonexistent/dir/x.json"), &1).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/x.json"));
    }
}
