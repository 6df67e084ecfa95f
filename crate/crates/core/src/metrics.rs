use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "epoch,split,top1,loss,lr,wall_seconds";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    /// Absent for objectives without a classification accuracy.
    pub top1: Option<f64>,
    pub loss: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

/// Per-epoch metrics; epochs increase strictly within each split.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsHistory {
    pub records: Vec<MetricsRecord>,
}

impl MetricsHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, record: MetricsRecord) -> Result<()> {
        if let Some(t) = record.top1 {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidConfig(format!("top1 {t} outside [0, 1]")));
            }
        }
        if !record.loss.is_finite() {
            return Err(Error::InvalidConfig(format!("non-finite loss {} in metrics", record.loss)));
        }
        if let Some(last) = self.split(&record.split).last() {
            if record.epoch <= last.epoch {
                return Err(Error::InvalidConfig(format!(
                    "epoch {} does not follow {} for split `{}`",
                    record.epoch, last.epoch, record.split
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn split<'a>(&'a self, split: &'a str) -> impl Iterator<Item = &'a MetricsRecord> + 'a {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn losses(&self, split: &str) -> Vec<f64> {
        self.split(split).map(|r| r.loss).collect()
    }

    pub fn top1(&self, split: &str) -> Vec<f64> {
        self.split(split).filter_map(|r| r.top1).collect()
    }

    /// Record with the highest top-1 in `split`; the earliest wins ties.
    pub fn best<'a>(&'a self, split: &'a str) -> Option<&'a MetricsRecord> {
        self.split(split).fold(None, |best: Option<&MetricsRecord>, r| match (best, r.top1) {
            (Some(b), Some(t)) if t <= b.top1.unwrap_or(f64::NEG_INFINITY) => Some(b),
            (b, None) => b,
            _ => Some(r),
        })
    }

    pub fn last<'a>(&'a self, split: &'a str) -> Option<&'a MetricsRecord> {
        self.split(split).last()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::InvalidConfig(format!("csv: {e}"));
        wr.write_record(CSV_HEADER.split(',')).map_err(io)?;
        for r in &self.records {
            wr.write_record([
                r.epoch.to_string(),
                r.split.clone(),
                r.top1.map(|t| t.to_string()).unwrap_or_default(),
                r.loss.to_string(),
                r.lr.to_string(),
                r.wall_seconds.to_string(),
            ])
            .map_err(io)?;
        }
        wr.flush().map_err(|e| Error::InvalidConfig(format!("csv: {e}")))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let bad = |e: String| Error::InvalidConfig(format!("metrics csv: {e}"));
        let header: Vec<String> = rd.headers().map_err(|e| bad(e.to_string()))?.iter().map(str::to_string).collect();
        if header.join(",") != CSV_HEADER {
            return Err(bad(format!("header `{}` is not `{CSV_HEADER}`", header.join(","))));
        }
        let mut out = MetricsHistory::new();
        for row in rd.records() {
            let row = row.map_err(|e| bad(e.to_string()))?;
            let num = |i: usize| -> Result<f64> { row[i].parse::<f64>().map_err(|e| bad(format!("column {i}: {e}"))) };
            out.push(MetricsRecord {
                epoch: row[0].parse().map_err(|e| bad(format!("epoch: {e}")))?,
                split: row[1].to_string(),
                top1: if row[2].is_empty() { None } else { Some(num(2)?) },
                loss: num(3)?,
                lr: num(4)?,
                wall_seconds: num(5)?,
            })?;
        }
        Ok(out)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}
