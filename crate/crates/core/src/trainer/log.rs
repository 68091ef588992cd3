//! Per-epoch metrics rows and the `metrics.csv` log.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use crate::error::{MadanError, Result};
use crate::losses::Term;

use super::Phase;

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str =
    "round,stage,phase,epoch,gan_st,gan_ts,cyc,sem,sad,ccd,task,feat,d_loss,total,target_miou";

/// Epoch means of every objective term (per-source terms summed over
/// sources), the discriminator loss, the weighted total and, for epochs that
/// train the task segmenter, target mIoU on the evaluation split.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub stage: usize,
    pub phase: Phase,
    pub epoch: usize,
    pub terms: [f64; 8],
    pub d_loss: f64,
    pub total: f64,
    pub target_miou: Option<f64>,
}

impl MetricsRow {
    pub fn term(&self, t: Term) -> f64 {
        let i = Term::ALL.iter().position(|&x| x == t).expect("known term");
        self.terms[i]
    }

    /// The `metrics.csv` line, six decimals.
    pub fn to_csv(&self) -> String {
        self.format(|v| format!("{v:.6}"))
    }

    /// Lossless form of [`Self::to_csv`], used inside checkpoints.
    pub fn to_record(&self) -> String {
        self.format(|v| format!("{v:?}"))
    }

    fn format(&self, real: impl Fn(f64) -> String) -> String {
        let mut s = format!("{},{},{},{}", self.round, self.stage, self.phase, self.epoch);
        for v in self.terms.iter().chain([&self.d_loss, &self.total]) {
            s.push(',');
            s.push_str(&real(*v));
        }
        s.push(',');
        if let Some(m) = self.target_miou {
            s.push_str(&real(m));
        }
        s
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || MadanError::Config(format!("malformed metrics row `{line}`"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 15 {
            return Err(bad());
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
        let real = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let mut terms = [0.0; 8];
        for (k, t) in terms.iter_mut().enumerate() {
            *t = real(f[4 + k])?;
        }
        Ok(Self {
            round: int(f[0])?,
            stage: int(f[1])?,
            phase: f[2].parse()?,
            epoch: int(f[3])?,
            terms,
            d_loss: real(f[12])?,
            total: real(f[13])?,
            target_miou: if f[14].is_empty() { None } else { Some(real(f[14])?) },
        })
    }
}

/// Rewrites `metrics.csv` from `rows`.
pub fn write_all(dir: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    crate::datagen::io::write_atomic(&dir.join(METRICS_FILE), text.as_bytes())
}

pub fn append(dir: &Path, row: &MetricsRow) -> Result<()> {
    let path = dir.join(METRICS_FILE);
    let mut f = OpenOptions::new()
        .append(true)
        .open(&path)
        .map_err(|e| MadanError::io("opening metrics log", &path, e))?;
    writeln!(f, "{}", row.to_csv()).map_err(|e| MadanError::io("appending metrics log", &path, e))
}

pub fn read(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| MadanError::io("reading metrics log", path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(MadanError::format("metrics log", path, "unexpected header"));
    }
    lines.map(MetricsRow::parse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_round_trip() {
        let r = MetricsRow {
            round: 2,
            stage: 3,
            phase: Phase::Segment,
            epoch: 4,
            terms: [0.5, 0.25, 1.0, 0.0, 0.0, 0.0, 0.75, 0.125],
            d_loss: 1.5,
            total: 2.625,
            target_miou: Some(0.4),
        };
        assert_eq!(MetricsRow::parse(&r.to_csv()).unwrap(), r);
        let r2 = MetricsRow { target_miou: None, ..r };
        assert_eq!(MetricsRow::parse(&r2.to_csv()).unwrap(), r2);
        let r3 = MetricsRow { total: 0.1 + 0.2, ..r2 };
        assert_eq!(MetricsRow::parse(&r3.to_record()).unwrap(), r3);
        assert_eq!(METRICS_HEADER.split(',').count(), 15);
    }
}
