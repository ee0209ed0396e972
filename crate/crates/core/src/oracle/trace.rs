//! Trace replay: encodings recorded to line-delimited JSON and served back.
//!
//! The first line is a header `{"format":"rsd-trace","version":1,"k":K}`;
//! each following line is `{"query_id":..,"ranking":[..],"probs":[[..]..]}`.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{EncodingMatrix, Oracle, QueryContext};
use crate::error::{Result, RsdError};
use crate::ranking::Ranking;

pub const TRACE_FORMAT: &str = "rsd-trace";
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    k: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    query_id: String,
    ranking: Ranking,
    probs: EncodingMatrix,
}

type Key = (String, Vec<usize>);

/// Serves encodings from a recorded trace.
#[derive(Debug, Default)]
pub struct TraceOracle {
    k: usize,
    entries: HashMap<Key, EncodingMatrix>,
}

impl TraceOracle {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Oracle for TraceOracle {
    fn encode(&self, ctx: &QueryContext, sigma: &Ranking) -> Result<EncodingMatrix> {
        if sigma.len() != self.k {
            return Err(RsdError::Dimension {
                expected: self.k,
                got: sigma.len(),
            });
        }
        self.entries
            .get(&(ctx.query_id.clone(), sigma.as_slice().to_vec()))
            .cloned()
            .ok_or_else(|| RsdError::MissingTraceEntry {
                query_id: ctx.query_id.clone(),
                ranking: sigma.as_slice().to_vec(),
            })
    }
}

pub fn load_trace_oracle(path: impl AsRef<Path>) -> Result<TraceOracle> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header: Header = match lines.next() {
        Some(line) => serde_json::from_str(&line?)?,
        None => return Err(RsdError::MalformedResponse("empty trace file".into())),
    };
    if header.format != TRACE_FORMAT || header.version != TRACE_VERSION {
        return Err(RsdError::MalformedResponse(format!(
            "unsupported trace {} v{}",
            header.format, header.version
        )));
    }
    let mut entries = HashMap::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)?;
        if rec.ranking.len() != header.k || rec.probs.k() != header.k {
            return Err(RsdError::Dimension {
                expected: header.k,
                got: rec.probs.k(),
            });
        }
        entries.insert((rec.query_id, rec.ranking.into_inner()), rec.probs);
    }
    Ok(TraceOracle {
        k: header.k,
        entries,
    })
}

/// Wraps an oracle and remembers every encoding it serves.
#[derive(Debug)]
pub struct RecordingOracle<O> {
    inner: O,
    k: usize,
    seen: Mutex<BTreeMap<Key, EncodingMatrix>>,
}

impl<O: Oracle> RecordingOracle<O> {
    pub fn new(inner: O, k: usize) -> Self {
        Self {
            inner,
            k,
            seen: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn recorded(&self) -> usize {
        self.seen.lock().expect("trace lock").len()
    }

    /// Writes the recorded encodings, sorted by key, as a trace file.
    pub fn write_trace(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        let header = Header {
            format: TRACE_FORMAT.into(),
            version: TRACE_VERSION,
            k: self.k,
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for ((query_id, ranking), probs) in self.seen.lock().expect("trace lock").iter() {
            let rec = Record {
                query_id: query_id.clone(),
                ranking: Ranking::new(ranking.clone())?,
                probs: probs.clone(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

impl<O: Oracle> Oracle for RecordingOracle<O> {
    fn encode(&self, ctx: &QueryContext, sigma: &Ranking) -> Result<EncodingMatrix> {
        let s = self.inner.encode(ctx, sigma)?;
        self.seen
            .lock()
            .expect("trace lock")
            .insert((ctx.query_id.clone(), sigma.as_slice().to_vec()), s.clone());
        Ok(s)
    }
}
