//! Newline-delimited JSON metrics journal.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// One JSON object per line: `event`, the record's fields and, unless
/// disabled, `wall_s` seconds since the journal was opened.
pub struct Journal {
    out: BufWriter<File>,
    path: PathBuf,
    start: Instant,
    wall_time: bool,
}

impl Journal {
    /// Truncates `path`. With `wall_time` off, identical runs write identical bytes.
    pub fn create(path: &Path, wall_time: bool) -> Result<Self> {
        let f = File::create(path).map_err(Error::io(path))?;
        Ok(Self { out: BufWriter::new(f), path: path.to_path_buf(), start: Instant::now(), wall_time })
    }

    pub fn record(&mut self, event: &str, fields: &impl Serialize) -> Result<()> {
        let mut obj = match serde_json::to_value(fields)? {
            Value::Object(m) => m,
            Value::Null => Map::new(),
            other => Map::from_iter([("value".to_owned(), other)]),
        };
        obj.insert("event".into(), Value::from(event));
        if self.wall_time {
            obj.insert("wall_s".into(), Value::from(self.start.elapsed().as_secs_f64()));
        }
        serde_json::to_writer(&mut self.out, &obj)?;
        self.out.write_all(b"\n").map_err(Error::io(&self.path))?;
        self.out.flush().map_err(Error::io(&self.path))
    }
}

/// Parses a journal back into JSON objects.
pub fn read_journal(path: &Path) -> Result<Vec<Map<String, Value>>> {
    let s = std::fs::read_to_string(path).map_err(Error::io(path))?;
    s.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct M {
        step: u64,
        loss: f64,
    }

    #[test]
    fn lines_parse_back() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("j.ndjson");
        let mut j = Journal::create(&p, true).unwrap();
        j.record("train", &M { step: 1, loss: 0.5 }).unwrap();
        j.record("done", &()).unwrap();
        drop(j);
        let r = read_journal(&p).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0]["event"], "train");
        assert_eq!(r[0]["loss"], 0.5);
        assert!(r[1]["wall_s"].as_f64().unwrap() >= 0.0);
    }

    #[test]
    fn without_wall_time_output_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str| {
            let p = dir.path().join(name);
            let mut j = Journal::create(&p, false).unwrap();
            j.record("train", &M { step: 3, loss: 0.1 + 0.2 }).unwrap();
            drop(j);
            std::fs::read(p).unwrap()
        };
        assert_eq!(write("a"), write("b"));
    }
}
