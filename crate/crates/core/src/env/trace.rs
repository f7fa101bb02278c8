//! JSON-lines episode traces: one header line, then one record per TTI.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRACE_SCHEMA: &str = "stackmac.env.trace";
pub const TRACE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema: String,
    pub version: u32,
    pub num_ues: usize,
    pub num_rbgs: usize,
    pub episode_len: usize,
    pub seed: u64,
}

impl TraceHeader {
    pub fn new(num_ues: usize, num_rbgs: usize, episode_len: usize, seed: u64) -> Self {
        Self {
            schema: TRACE_SCHEMA.into(),
            version: TRACE_VERSION,
            num_ues,
            num_rbgs,
            episode_len,
            seed,
        }
    }
}

/// State after TTI `t`, plus the actions and outcomes that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub dcm: Vec<usize>,
    pub bitmaps: Vec<String>,
    pub ucm: Vec<Vec<usize>>,
    pub received: Vec<usize>,
    pub attempted: Vec<usize>,
    pub collision_map: Vec<usize>,
    pub leader_reward: f64,
    pub follower_rewards: Vec<f64>,
    pub arrived: Vec<bool>,
    pub dropped: Vec<bool>,
    pub buffer_bits: Vec<u64>,
    pub channel: Vec<usize>,
    pub csi: Vec<usize>,
    pub usage: Vec<u64>,
}

pub fn write_trace<W: Write>(mut w: W, header: &TraceHeader, records: &[TraceRecord]) -> Result<()> {
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace<R: BufRead>(r: R) -> Result<(TraceHeader, Vec<TraceRecord>)> {
    let mut lines = r.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Serialization("empty trace".into()))??;
    let header: TraceHeader = serde_json::from_str(&first)?;
    if header.schema != TRACE_SCHEMA || header.version != TRACE_VERSION {
        return Err(Error::Serialization(format!(
            "unsupported trace schema {} v{}",
            header.schema, header.version
        )));
    }
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line)?);
        }
    }
    Ok((header, records))
}
