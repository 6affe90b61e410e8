//! DNS observation log parsing.
//!
//! Log format: UTF-8, one record per line, tab-separated:
//! `YYYY-MM-DD<TAB>qname<TAB>rtype<TAB>record_name<TAB>record_data`.
//! Malformed lines are counted and skipped; a stream that is mostly
//! malformed aborts, since that signals the wrong input format.

use std::io::BufRead;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{is_valid_dns_name, normalize_dns_name};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RecordType {
    Cname,
    A,
    Aaaa,
    Other,
}

impl RecordType {
    fn parse(s: &str) -> RecordType {
        match s.to_ascii_uppercase().as_str() {
            "CNAME" => RecordType::Cname,
            "A" => RecordType::A,
            "AAAA" => RecordType::Aaaa,
            _ => RecordType::Other,
        }
    }
}

/// One parsed DNS answer record with its observation day. `qname` is the
/// question-section name; `record_name`/`record_data` come from the answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DnsObservation {
    pub day: NaiveDate,
    pub qname: String,
    pub record_name: String,
    pub record_type: RecordType,
    pub record_data: String,
}

#[derive(Debug, Error)]
pub enum DnsLogError {
    #[error("cannot read DNS log: {0}")]
    Io(#[from] std::io::Error),
    #[error(
        "{malformed} of {total} lines malformed (>50%); input is probably not a DNS log. \
         first bad line ({first_bad_line}): {first_bad_reason}"
    )]
    MostlyMalformed {
        malformed: usize,
        total: usize,
        first_bad_line: usize,
        first_bad_reason: String,
    },
}

fn parse_line(line: &str) -> Result<DnsObservation, String> {
    let mut fields = line.split('\t');
    let day = fields.next().ok_or("missing day")?;
    let qname = fields.next().ok_or("missing qname")?;
    let rtype = fields.next().ok_or("missing record type")?;
    let record_name = fields.next().ok_or("missing record name")?;
    let record_data = fields.next().ok_or("missing record data")?;
    if fields.next().is_some() {
        return Err("too many fields".into());
    }
    let day = NaiveDate::parse_from_str(day.trim(), "%Y-%m-%d")
        .map_err(|e| format!("bad day: {e}"))?;
    let qname = normalize_dns_name(qname);
    let record_name = normalize_dns_name(record_name);
    if !is_valid_dns_name(&qname) {
        return Err(format!("invalid qname `{qname}`"));
    }
    if !is_valid_dns_name(&record_name) {
        return Err(format!("invalid record name `{record_name}`"));
    }
    let record_type = RecordType::parse(rtype.trim());
    let record_data = match record_type {
        RecordType::Cname => {
            let target = normalize_dns_name(record_data);
            if !is_valid_dns_name(&target) {
                return Err(format!("invalid CNAME target `{target}`"));
            }
            target
        }
        _ => record_data.trim().to_string(),
    };
    Ok(DnsObservation {
        day,
        qname,
        record_name,
        record_type,
        record_data,
    })
}

/// Streaming reader over a DNS log. Yields observations in stream order,
/// skipping (and counting) malformed lines. If more than half of a
/// non-empty stream is malformed, the final item is a
/// [`DnsLogError::MostlyMalformed`] error.
pub struct DnsLogReader<R: BufRead> {
    lines: std::io::Lines<R>,
    line_no: usize,
    total: usize,
    malformed: usize,
    first_bad: Option<(usize, String)>,
    done: bool,
}

impl<R: BufRead> DnsLogReader<R> {
    pub fn new(reader: R) -> Self {
        DnsLogReader {
            lines: reader.lines(),
            line_no: 0,
            total: 0,
            malformed: 0,
            first_bad: None,
            done: false,
        }
    }

    pub fn malformed_count(&self) -> usize {
        self.malformed
    }

    pub fn total_lines(&self) -> usize {
        self.total
    }
}

impl<R: BufRead> Iterator for DnsLogReader<R> {
    type Item = Result<DnsObservation, DnsLogError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        loop {
            match self.lines.next() {
                Some(Ok(line)) => {
                    self.line_no += 1;
                    if line.trim().is_empty() {
                        continue;
                    }
                    self.total += 1;
                    match parse_line(&line) {
                        Ok(obs) => return Some(Ok(obs)),
                        Err(reason) => {
                            self.malformed += 1;
                            if self.first_bad.is_none() {
                                self.first_bad = Some((self.line_no, reason));
                            }
                        }
                    }
                }
                Some(Err(e)) => {
                    self.done = true;
                    return Some(Err(DnsLogError::Io(e)));
                }
                None => {
                    self.done = true;
                    if self.total > 0 && self.malformed * 2 > self.total {
                        let (first_bad_line, first_bad_reason) =
                            self.first_bad.clone().unwrap_or((0, String::new()));
                        return Some(Err(DnsLogError::MostlyMalformed {
                            malformed: self.malformed,
                            total: self.total,
                            first_bad_line,
                            first_bad_reason,
                        }));
                    }
                    return None;
                }
            }
        }
    }
}

/// Parses a whole stream eagerly. Most callers want the streaming
/// [`DnsLogReader`]; this is the convenient form for files that fit in
/// memory and for tests.
pub fn parse_dns_log<R: BufRead>(reader: R) -> Result<Vec<DnsObservation>, DnsLogError> {
    DnsLogReader::new(reader).collect()
}

/// Renders an observation back into the log line format.
pub fn format_log_line(obs: &DnsObservation) -> String {
    let rtype = match obs.record_type {
        RecordType::Cname => "CNAME",
        RecordType::A => "A",
        RecordType::Aaaa => "AAAA",
        RecordType::Other => "OTHER",
    };
    format!(
        "{}\t{}\t{}\t{}\t{}",
        obs.day.format("%Y-%m-%d"),
        obs.qname,
        rtype,
        obs.record_name,
        obs.record_data
    )
}
