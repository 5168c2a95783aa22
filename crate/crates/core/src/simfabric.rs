//! A deterministic, single-process stand-in for a P-rank message-passing
//! runtime.
//!
//! Ranks are plain loop iterations. Everything that crosses ranks goes through
//! [`Fabric::neighbor_exchange`] (bulk-synchronous, one call per round) or one
//! of the small collectives, and every call is logged.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::Serialize;

use crate::error::{Error, Result};

/// Messages keyed by `(src, dst)`.
pub type Outbox = BTreeMap<(usize, usize), Vec<Vec<u8>>>;

/// Messages delivered in one round, keyed by `(dst, src)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Inbox {
    pub round: u64,
    pub messages: BTreeMap<(usize, usize), Vec<Vec<u8>>>,
}

impl Inbox {
    /// Messages received by `dst`, grouped by sender in ascending order.
    pub fn for_rank(&self, dst: usize) -> impl Iterator<Item = (usize, &Vec<Vec<u8>>)> {
        self.messages.range((dst, 0)..(dst + 1, 0)).map(|(&(_, src), m)| (src, m))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct LogEntry {
    pub round: u64,
    pub src: usize,
    pub dst: usize,
    pub bytes: usize,
}

/// Counter snapshot, for charging communication to a pipeline stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Usage {
    pub exchange_rounds: u64,
    pub collectives: u64,
    pub bytes: u64,
}

impl std::ops::Sub for Usage {
    type Output = Usage;
    fn sub(self, rhs: Usage) -> Usage {
        Usage {
            exchange_rounds: self.exchange_rounds - rhs.exchange_rounds,
            collectives: self.collectives - rhs.collectives,
            bytes: self.bytes - rhs.bytes,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Fabric {
    ranks: usize,
    log: Vec<LogEntry>,
    usage: Usage,
}

impl Fabric {
    pub fn new(ranks: usize) -> Self {
        assert!(ranks > 0);
        Fabric { ranks, log: Vec::new(), usage: Usage::default() }
    }

    pub fn ranks(&self) -> usize {
        self.ranks
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn usage(&self) -> Usage {
        self.usage
    }

    /// Number of neighbor-exchange rounds so far.
    pub fn rounds(&self) -> u64 {
        self.usage.exchange_rounds
    }

    /// One bulk-synchronous round: every message is delivered before the call
    /// returns, and per-pair order is kept.
    pub fn neighbor_exchange(&mut self, outbox: Outbox) -> Result<Inbox> {
        for &(src, dst) in outbox.keys() {
            if src >= self.ranks || dst >= self.ranks {
                return Err(Error::BadDestination { src, dst, ranks: self.ranks });
            }
            if src == dst {
                return Err(Error::SelfMessage(src));
            }
        }
        let round = self.usage.exchange_rounds;
        self.usage.exchange_rounds += 1;
        let mut messages = BTreeMap::new();
        for ((src, dst), msgs) in outbox {
            if msgs.is_empty() {
                continue;
            }
            let bytes: usize = msgs.iter().map(Vec::len).sum();
            self.usage.bytes += bytes as u64;
            self.log.push(LogEntry { round, src, dst, bytes });
            messages.insert((dst, src), msgs);
        }
        Ok(Inbox { round, messages })
    }

    fn check_count(&self, got: usize) -> Result<()> {
        if got != self.ranks {
            return Err(Error::RankCount { expected: self.ranks, got });
        }
        Ok(())
    }

    /// Exclusive prefix sum over ranks.
    pub fn exscan_sum(&mut self, values: &[u64]) -> Result<Vec<u64>> {
        self.check_count(values.len())?;
        self.usage.collectives += 1;
        let mut acc = 0;
        Ok(values
            .iter()
            .map(|&v| {
                let r = acc;
                acc += v;
                r
            })
            .collect())
    }

    /// Sum of one value per rank, reduced in rank order.
    pub fn allreduce_sum(&mut self, values: &[f64]) -> Result<f64> {
        self.check_count(values.len())?;
        self.usage.collectives += 1;
        Ok(values.iter().fold(0.0, |a, b| a + b))
    }

    pub fn allreduce_sum_u64(&mut self, values: &[u64]) -> Result<u64> {
        self.check_count(values.len())?;
        self.usage.collectives += 1;
        Ok(values.iter().sum())
    }

    pub fn allreduce_max(&mut self, values: &[f64]) -> Result<f64> {
        self.check_count(values.len())?;
        self.usage.collectives += 1;
        Ok(values.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
    }

    pub fn allreduce_min(&mut self, values: &[f64]) -> Result<f64> {
        self.check_count(values.len())?;
        self.usage.collectives += 1;
        Ok(values.iter().cloned().fold(f64::INFINITY, f64::min))
    }

    /// Every rank receives every rank's value.
    pub fn allgather<T: Clone>(&mut self, values: &[T]) -> Result<Vec<T>> {
        self.check_count(values.len())?;
        self.usage.collectives += 1;
        Ok(values.to_vec())
    }

    /// Round log as JSON lines.
    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &self.log {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Little-endian message builder.
#[derive(Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        let mut b = [0; 4];
        LittleEndian::write_u32(&mut b, v);
        self.buf.extend_from_slice(&b);
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        let mut b = [0; 8];
        LittleEndian::write_u64(&mut b, v);
        self.buf.extend_from_slice(&b);
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.u64(v.to_bits())
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
}

pub struct Decoder<'a> {
    buf: &'a [u8],
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Decoder { buf }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Decode(format!("need {n} bytes, {} left", self.buf.len())));
        }
        let (h, t) = self.buf.split_at(n);
        self.buf = t;
        Ok(h)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(LittleEndian::read_u64(self.take(8)?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
}
