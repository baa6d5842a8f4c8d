//! Line-oriented cohort text format.
//!
//! ```text
//! # comment
//! streams sbp,hr
//! patient id=p001 label=1 t_end=72 age=64 gender=F
//! sbp 0.5 131.2
//! hr 0.5 88
//! patient id=p002 label=- t_end=40
//! ```
//!
//! One `streams` directive precedes the first patient. Each `patient` header
//! carries `id`, `label` (`0`, `1` or `-`), `t_end`, and any number of admission
//! `key=value` pairs; sample rows `stream time value` follow until the next
//! header. Blank lines and `#` comments are ignored.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{Cohort, PatientRecord};
use crate::error::{Error, Result};
use crate::gp::{ObservationSet, Sample};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IngestMode {
    /// Every record must be labeled and the cohort non-empty.
    Training,
    /// Labels optional.
    Scoring,
}

struct Pending {
    record: PatientRecord,
    samples: Vec<Sample>,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn finish(p: Pending, dim: usize) -> Result<PatientRecord> {
    let mut record = p.record;
    record.stream = ObservationSet::new(dim, p.samples)?;
    Ok(record)
}

/// Parse cohort text. Errors carry the 1-based line number.
pub fn parse_cohort<R: BufRead>(reader: R) -> Result<Cohort> {
    let mut streams: Option<Vec<String>> = None;
    let mut patients = Vec::new();
    let mut current: Option<Pending> = None;
    let mut ids = HashSet::new();

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let text = line.split('#').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        let mut fields = text.split_whitespace();
        let head = fields.next().unwrap_or_default();
        match head {
            "streams" => {
                if streams.is_some() {
                    return Err(parse_err(lineno, "duplicate `streams` directive"));
                }
                let list = fields
                    .next()
                    .ok_or_else(|| parse_err(lineno, "`streams` needs a comma-separated list"))?;
                if fields.next().is_some() {
                    return Err(parse_err(lineno, "stream list must not contain spaces"));
                }
                let names: Vec<String> = list.split(',').map(str::to_owned).collect();
                let mut seen = HashSet::new();
                for n in &names {
                    if n.is_empty() || !seen.insert(n.as_str()) {
                        return Err(parse_err(
                            lineno,
                            format!("invalid or duplicate stream name `{n}`"),
                        ));
                    }
                }
                streams = Some(names);
            }
            "patient" => {
                let dim = streams
                    .as_ref()
                    .ok_or_else(|| parse_err(lineno, "`patient` before `streams` directive"))?
                    .len();
                if let Some(p) = current.take() {
                    patients.push(finish(p, dim)?);
                }
                let record = parse_header(fields, lineno)?;
                if !ids.insert(record.id.clone()) {
                    return Err(parse_err(
                        lineno,
                        format!("duplicate patient id `{}`", record.id),
                    ));
                }
                current = Some(Pending {
                    record,
                    samples: Vec::new(),
                });
            }
            name => {
                let names = streams
                    .as_ref()
                    .ok_or_else(|| parse_err(lineno, "sample row before `streams` directive"))?;
                let p = current
                    .as_mut()
                    .ok_or_else(|| parse_err(lineno, "sample row before any `patient` header"))?;
                let id = &p.record.id;
                let stream = names.iter().position(|n| n == name).ok_or_else(|| {
                    parse_err(lineno, format!("patient `{id}`: unknown stream `{name}`"))
                })?;
                let mut num = |what: &str| -> Result<f64> {
                    let s = fields.next().ok_or_else(|| {
                        parse_err(lineno, format!("patient `{id}`: missing {what}"))
                    })?;
                    s.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| {
                            parse_err(
                                lineno,
                                format!("patient `{id}`: {what} `{s}` is not a finite number"),
                            )
                        })
                };
                let time = num("time")?;
                let value = num("value")?;
                if fields.next().is_some() {
                    return Err(parse_err(
                        lineno,
                        format!("patient `{id}`: trailing fields in sample row"),
                    ));
                }
                if time < 0.0 {
                    return Err(parse_err(
                        lineno,
                        format!("patient `{id}`: negative time {time}"),
                    ));
                }
                if time > p.record.end_time {
                    return Err(parse_err(
                        lineno,
                        format!(
                            "patient `{id}`: time {time} is after t_end {}",
                            p.record.end_time
                        ),
                    ));
                }
                p.samples.push(Sample::new(stream, time, value));
            }
        }
    }
    let names = streams.ok_or_else(|| parse_err(0, "missing `streams` directive"))?;
    if let Some(p) = current.take() {
        patients.push(finish(p, names.len())?);
    }
    Ok(Cohort {
        streams: names,
        patients,
    })
}

fn parse_header<'a, I: Iterator<Item = &'a str>>(
    fields: I,
    lineno: usize,
) -> Result<PatientRecord> {
    let mut id = None;
    let mut label = None;
    let mut end_time = None;
    let mut admission = BTreeMap::new();
    for f in fields {
        let (k, v) = f
            .split_once('=')
            .ok_or_else(|| parse_err(lineno, format!("expected key=value, got `{f}`")))?;
        match k {
            "id" if !v.is_empty() => id = Some(v.to_owned()),
            "label" => {
                label = match v {
                    "0" => Some(false),
                    "1" => Some(true),
                    "-" => None,
                    _ => {
                        return Err(parse_err(
                            lineno,
                            format!("label must be 0, 1 or -, got `{v}`"),
                        ))
                    }
                }
            }
            "t_end" => {
                let t = v
                    .parse::<f64>()
                    .ok()
                    .filter(|t| t.is_finite() && *t >= 0.0)
                    .ok_or_else(|| {
                        parse_err(
                            lineno,
                            format!("t_end must be a non-negative number, got `{v}`"),
                        )
                    })?;
                end_time = Some(t);
            }
            _ => {
                if admission.insert(k.to_owned(), v.to_owned()).is_some() {
                    return Err(parse_err(lineno, format!("duplicate admission key `{k}`")));
                }
            }
        }
    }
    let id = id.ok_or_else(|| parse_err(lineno, "patient header needs a non-empty id"))?;
    let end_time =
        end_time.ok_or_else(|| parse_err(lineno, format!("patient `{id}`: missing t_end")))?;
    Ok(PatientRecord {
        id,
        admission,
        stream: ObservationSet::empty(1),
        label,
        end_time,
    })
}

pub fn read_cohort(path: &Path) -> Result<Cohort> {
    let f = std::fs::File::open(path)?;
    parse_cohort(BufReader::new(f))
}

/// Read and validate a cohort file, optionally restricting it to a stream
/// whitelist.
pub fn validate_and_ingest(
    path: &Path,
    streams: Option<&[String]>,
    mode: IngestMode,
) -> Result<Cohort> {
    let mut cohort = read_cohort(path)?;
    if let Some(names) = streams {
        cohort = cohort.select_streams(names)?;
    }
    if mode == IngestMode::Training {
        if cohort.is_empty() {
            return Err(Error::EmptyCohort);
        }
        if let Some(p) = cohort.patients.iter().find(|p| p.label.is_none()) {
            return Err(Error::UnlabeledRecord(p.id.clone()));
        }
    }
    Ok(cohort)
}

/// Serialize a cohort; numbers use the shortest representation that parses
/// back to the same value.
pub fn write_cohort<W: Write>(cohort: &Cohort, mut w: W) -> Result<()> {
    writeln!(w, "streams {}", cohort.streams.join(","))?;
    for p in &cohort.patients {
        let label = match p.label {
            Some(true) => "1",
            Some(false) => "0",
            None => "-",
        };
        write!(w, "patient id={} label={label} t_end={}", p.id, p.end_time)?;
        for (k, v) in &p.admission {
            write!(w, " {k}={v}")?;
        }
        writeln!(w)?;
        for s in p.stream.samples() {
            writeln!(w, "{} {} {}", cohort.streams[s.stream], s.time, s.value)?;
        }
    }
    Ok(())
}
