//! CSV persistence of trial records.
//!
//! Layout: `#` header lines carrying the schema version, master seed, probe
//! labels and the parameter set as JSON, then one row per trial.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Result, SimError};
use crate::params::SimParams;
use crate::sequence::{RecordSet, TrialRecord};
use crate::spin::MeasurementOutcome;

pub const SCHEMA_VERSION: u32 = 1;

fn csv_err(e: csv::Error) -> SimError {
    SimError::Schema(e.to_string())
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Column names for a set of probe labels.
pub fn record_columns(labels: &[String]) -> Vec<String> {
    let mut cols = vec!["trial".to_string(), "seed".to_string()];
    cols.extend(labels.iter().cloned());
    cols.extend(labels.iter().map(|l| format!("{l}_hz")));
    cols.extend(labels.iter().map(|l| format!("{l}_jz")));
    cols.push("omega_p_offset_hz".into());
    cols
}

pub fn write_records<W: Write>(rs: &RecordSet, out: W) -> Result<()> {
    let mut out = BufWriter::new(out);
    let params = serde_json::to_string(&rs.params).map_err(|e| SimError::Schema(e.to_string()))?;
    writeln!(out, "# schema={SCHEMA_VERSION}")?;
    writeln!(out, "# master_seed={}", rs.master_seed)?;
    writeln!(out, "# labels={}", rs.labels.join(","))?;
    writeln!(out, "# params={params}")?;
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(record_columns(&rs.labels)).map_err(csv_err)?;
        for (i, t) in rs.trials.iter().enumerate() {
            let mut row = vec![i.to_string(), t.seed.to_string()];
            let outs: Vec<&MeasurementOutcome> = rs
                .labels
                .iter()
                .map(|l| t.get(l).ok_or_else(|| SimError::MissingLabel(l.clone())))
                .collect::<Result<_>>()?;
            row.extend(outs.iter().map(|o| num(o.n_up)));
            row.extend(outs.iter().map(|o| num(o.frequency_hz)));
            row.extend(outs.iter().map(|o| num(o.true_jz)));
            row.push(num(t.detuning_hz));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_records_path(rs: &RecordSet, path: &Path) -> Result<()> {
    write_records(rs, File::create(path)?)
}

pub fn read_records<R: BufRead>(mut input: R) -> Result<RecordSet> {
    let mut schema = None;
    let mut master_seed = None;
    let mut labels = None;
    let mut params: Option<SimParams> = None;
    let mut line = String::new();
    let mut body = String::new();
    loop {
        line.clear();
        if input.read_line(&mut line)? == 0 {
            break;
        }
        let Some(meta) = line.strip_prefix('#') else {
            body.push_str(&line);
            break;
        };
        let meta = meta.trim();
        if let Some((k, v)) = meta.split_once('=') {
            match k.trim() {
                "schema" => schema = v.trim().parse::<u32>().ok(),
                "master_seed" => {
                    master_seed = Some(
                        v.trim()
                            .parse::<u64>()
                            .map_err(|e| SimError::Schema(format!("master_seed: {e}")))?,
                    )
                }
                "labels" => {
                    labels = Some(
                        v.split(',')
                            .map(str::trim)
                            .filter(|s| !s.is_empty())
                            .map(String::from)
                            .collect::<Vec<_>>(),
                    )
                }
                "params" => {
                    params = Some(serde_json::from_str(v).map_err(|e| SimError::Schema(format!("params: {e}")))?)
                }
                _ => {}
            }
        }
    }
    match schema {
        Some(SCHEMA_VERSION) => {}
        Some(v) => return Err(SimError::Schema(format!("unsupported schema version {v}"))),
        None => return Err(SimError::Schema("missing `# schema=` header".into())),
    }
    let master_seed = master_seed.ok_or_else(|| SimError::Schema("missing `# master_seed=` header".into()))?;
    let labels = labels.ok_or_else(|| SimError::Schema("missing `# labels=` header".into()))?;
    let params = params.ok_or_else(|| SimError::Schema("missing `# params=` header".into()))?;
    input.read_to_string(&mut body)?;

    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let header = rdr.headers().map_err(csv_err)?.clone();
    let index = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| SimError::Schema(format!("missing column `{name}`")))
    };
    let seed_col = index("seed")?;
    index("trial")?;
    let cols: Vec<[usize; 3]> = labels
        .iter()
        .map(|l| Ok([index(l)?, index(&format!("{l}_hz"))?, index(&format!("{l}_jz"))?]))
        .collect::<Result<_>>()?;
    let offset_col = index("omega_p_offset_hz")?;

    let mut trials = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let field = |i: usize| -> Result<&str> {
            rec.get(i)
                .ok_or_else(|| SimError::Schema(format!("row {}: short record", row + 1)))
        };
        let float = |i: usize| -> Result<f64> {
            field(i)?
                .trim()
                .parse::<f64>()
                .map_err(|e| SimError::Schema(format!("row {}, column `{}`: {e}", row + 1, &header[i])))
        };
        let seed = field(seed_col)?
            .trim()
            .parse::<u64>()
            .map_err(|e| SimError::Schema(format!("row {}, column `seed`: {e}", row + 1)))?;
        let outcomes = labels
            .iter()
            .zip(&cols)
            .map(|(l, c)| {
                Ok((
                    l.clone(),
                    MeasurementOutcome {
                        n_up: float(c[0])?,
                        frequency_hz: float(c[1])?,
                        true_jz: float(c[2])?,
                    },
                ))
            })
            .collect::<Result<_>>()?;
        trials.push(TrialRecord {
            seed,
            outcomes,
            detuning_hz: float(offset_col)?,
        });
    }
    Ok(RecordSet {
        params,
        master_seed,
        labels,
        trials,
    })
}

pub fn read_records_path(path: &Path) -> Result<RecordSet> {
    read_records(BufReader::new(File::open(path)?))
}
