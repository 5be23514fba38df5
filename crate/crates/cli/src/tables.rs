//! CSV tables exchanged between commands.

use std::io::{Read, Write};

use minealloc::aggregate::{AggregateSeries, IbtPrediction};
use minealloc::risk::HashWeightSeries;
use minealloc::{Allocation, Error, Result};

const SUFFIX: &str = "_allocation";

fn csv_err(e: csv::Error) -> Error {
    Error::Parse {
        line: e.position().map(|p| p.line()).unwrap_or(0),
        message: e.to_string(),
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::Io {
        path: "output".into(),
        message: e.to_string(),
    }
}

pub fn writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out)
}

/// Hourly allocation table: aggregate columns, then per-miner columns and
/// hash weights, then baselines.
pub struct AllocationTable<'a> {
    pub chains: &'a [String],
    pub timestamps: Vec<i64>,
    pub aggregate: Vec<&'a [f64]>,
    /// `(miner, allocation per hour, hash weight per hour)`.
    pub miners: Vec<(String, Vec<&'a [f64]>, Vec<f64>)>,
    pub dari: Vec<Vec<f64>>,
    pub price: Vec<Vec<f64>>,
}

impl AllocationTable<'_> {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["timestamp".to_string()];
        let cols = |prefix: String| -> Vec<String> {
            self.chains.iter().map(|c| format!("{prefix}{c}{SUFFIX}")).collect()
        };
        h.extend(cols(String::new()));
        for (m, _, _) in &self.miners {
            h.extend(cols(format!("{m}/")));
            h.push(format!("{m}/hash_weight"));
        }
        h.extend(cols("dari/".into()));
        h.extend(cols("price/".into()));
        h
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut w = writer(out);
        w.write_record(self.header()).map_err(csv_err)?;
        for (k, t) in self.timestamps.iter().enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(self.aggregate[k].iter().map(f64::to_string));
            for (_, alloc, weight) in &self.miners {
                row.extend(alloc[k].iter().map(f64::to_string));
                row.push(weight[k].to_string());
            }
            row.extend(self.dari[k].iter().map(f64::to_string));
            row.extend(self.price[k].iter().map(f64::to_string));
            w.write_record(row).map_err(csv_err)?;
        }
        w.flush().map_err(io_err)
    }
}

/// Reads the aggregate columns (`<chain>_allocation`) of an allocation table.
pub fn read_aggregate<R: Read>(reader: R) -> Result<AggregateSeries> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    if headers.get(0) != Some("timestamp") {
        return Err(Error::Parse {
            line: 1,
            message: "first column must be timestamp".into(),
        });
    }
    let cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| {
            let chain = h.strip_suffix(SUFFIX)?;
            (!chain.contains('/')).then(|| (i, chain.to_string()))
        })
        .collect();
    if cols.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "no <chain>_allocation columns".into(),
        });
    }
    let mut samples = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let parse = |i: usize| -> Result<f64> {
            let s = rec.get(i).unwrap_or("");
            s.parse().map_err(|_| Error::Parse {
                line,
                message: format!("invalid number {s:?}"),
            })
        };
        let t: i64 = rec.get(0).unwrap_or("").parse().map_err(|_| Error::Parse {
            line,
            message: "invalid timestamp".into(),
        })?;
        if samples.last().is_some_and(|(prev, _)| *prev >= t) {
            return Err(Error::Parse {
                line,
                message: "timestamps must increase".into(),
            });
        }
        let w = cols.iter().map(|(i, _)| parse(*i)).collect::<Result<Vec<_>>>()?;
        let w = Allocation::new(w).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        samples.push((t, w));
    }
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(AggregateSeries {
        chains: cols.into_iter().map(|(_, c)| c).collect(),
        miners: Vec::new(),
        samples,
    })
}

/// `period_start,ibt_change_<chain>...,ibt_seconds_<chain>...`; seconds are
/// the ratio times `target`.
pub fn write_prediction<W: Write>(p: &IbtPrediction, target: f64, out: W) -> Result<()> {
    let mut w = writer(out);
    let mut header = vec!["period_start".to_string()];
    header.extend(p.chains.iter().map(|c| format!("ibt_change_{c}")));
    header.extend(p.chains.iter().map(|c| format!("ibt_seconds_{c}")));
    w.write_record(header).map_err(csv_err)?;
    for (t, r) in &p.samples {
        let mut row = vec![t.to_string()];
        row.extend(r.iter().map(f64::to_string));
        row.extend(r.iter().map(|x| (x * target).to_string()));
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads the `ibt_change_<chain>` columns of a `period_start` table.
pub fn read_ibt_changes<R: Read>(reader: R) -> Result<(Vec<String>, Vec<(i64, Vec<f64>)>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    if headers.get(0) != Some("period_start") {
        return Err(Error::Parse {
            line: 1,
            message: "first column must be period_start".into(),
        });
    }
    let (cols, chains): (Vec<usize>, Vec<String>) = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| Some((i, h.strip_prefix("ibt_change_")?.to_string())))
        .unzip();
    if chains.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "no ibt_change_<chain> columns".into(),
        });
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |s: &str| Error::Parse {
            line,
            message: format!("invalid number {s:?}"),
        };
        let t: i64 = rec.get(0).unwrap_or("").parse().map_err(|_| bad(rec.get(0).unwrap_or("")))?;
        if rows.last().is_some_and(|(prev, _)| *prev >= t) {
            return Err(Error::Parse {
                line,
                message: "period_start must increase".into(),
            });
        }
        let v = cols
            .iter()
            .map(|&i| {
                let s = rec.get(i).unwrap_or("");
                s.parse::<f64>().map_err(|_| bad(s))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((t, v));
    }
    Ok((chains, rows))
}

/// Hash weights as `timestamp,miner,weight` or constant `miner,weight`.
pub fn read_hash_weights<R: Read>(reader: R) -> Result<Vec<HashWeightSeries>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let timed = match headers.iter().collect::<Vec<_>>().as_slice() {
        ["timestamp", "miner", "weight"] => true,
        ["miner", "weight"] => false,
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: "expected header timestamp,miner,weight or miner,weight".into(),
            })
        }
    };
    let mut out: Vec<HashWeightSeries> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let off = usize::from(timed);
        let miner = rec.get(off).unwrap_or("");
        let ws = rec.get(off + 1).unwrap_or("");
        let weight: f64 = ws.parse().map_err(|_| Error::Parse {
            line,
            message: format!("invalid weight {ws:?}"),
        })?;
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(Error::Parse {
                line,
                message: format!("weight {weight} must be finite and >= 0"),
            });
        }
        let t = if timed {
            let ts = rec.get(0).unwrap_or("");
            ts.parse::<i64>().map_err(|_| Error::Parse {
                line,
                message: format!("invalid timestamp {ts:?}"),
            })?
        } else {
            i64::MIN
        };
        let series = match out.iter_mut().find(|s| s.miner_id == miner) {
            Some(s) => s,
            None => {
                out.push(HashWeightSeries {
                    miner_id: miner.to_string(),
                    samples: Vec::new(),
                });
                out.last_mut().unwrap()
            }
        };
        if series.samples.last().is_some_and(|(prev, _)| *prev >= t) {
            return Err(Error::Parse {
                line,
                message: format!("{miner}: timestamps must increase"),
            });
        }
        series.samples.push((t, weight));
    }
    if out.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(out)
}
