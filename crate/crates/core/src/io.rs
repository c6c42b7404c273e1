//! Text log format, truth sidecars and the flat experiment config file.
//!
//! A log is a header line followed by one impression per line:
//!
//! ```text
//! #fields=3 vocab=10,10,4 dim=18
//! 5	1	1	0:3 1:7
//! ```
//!
//! Columns are tab separated: timestamp, `y`, `z`, then space-separated
//! `field:id` tokens. The token column may be empty.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::feature::{validate, Dataset, Feature, FieldSchema, SparseSample};
use crate::synth::Truth;

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_header(line: &str) -> Result<FieldSchema> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| parse_err(1, "missing header"))?;
    let (mut fields, mut vocab, mut dim) = (None, None, None);
    for part in body.split_whitespace() {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| parse_err(1, format!("malformed header entry {part:?}")))?;
        let bad = || parse_err(1, format!("malformed header value {part:?}"));
        match k {
            "fields" => fields = Some(v.parse::<usize>().map_err(|_| bad())?),
            "vocab" => {
                vocab = Some(if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|x| x.parse::<usize>().map_err(|_| bad()))
                        .collect::<Result<Vec<_>>>()?
                })
            }
            "dim" => dim = Some(v.parse::<usize>().map_err(|_| bad())?),
            _ => return Err(parse_err(1, format!("unknown header key {k:?}"))),
        }
    }
    let (Some(fields), Some(vocab), Some(dim)) = (fields, vocab, dim) else {
        return Err(parse_err(1, "header needs fields, vocab and dim"));
    };
    if vocab.len() != fields {
        return Err(parse_err(
            1,
            format!("header declares {fields} fields but {} vocab sizes", vocab.len()),
        ));
    }
    FieldSchema::new(vocab, dim).map_err(|e| parse_err(1, e.to_string()))
}

fn parse_flag(s: &str, name: &str, line: usize) -> Result<bool> {
    match s {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(parse_err(line, format!("{name} must be 0 or 1, got {s:?}"))),
    }
}

fn parse_line(text: &str, line: usize) -> Result<SparseSample> {
    let cols: Vec<&str> = text.split('\t').collect();
    if cols.len() != 3 && cols.len() != 4 {
        return Err(parse_err(line, format!("expected 4 tab-separated columns, got {}", cols.len())));
    }
    let timestamp = cols[0]
        .parse::<i64>()
        .map_err(|_| parse_err(line, format!("bad timestamp {:?}", cols[0])))?;
    let y = parse_flag(cols[1], "y", line)?;
    let z = parse_flag(cols[2], "z", line)?;
    let mut features = Vec::new();
    if let Some(tokens) = cols.get(3) {
        for tok in tokens.split(' ').filter(|t| !t.is_empty()) {
            let (f, id) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(line, format!("bad feature token {tok:?}")))?;
            let field = f.parse::<u32>().map_err(|_| parse_err(line, format!("bad field in {tok:?}")))?;
            let id = id.parse::<u32>().map_err(|_| parse_err(line, format!("bad id in {tok:?}")))?;
            features.push(Feature::new(field, id));
        }
    }
    Ok(SparseSample::new(timestamp, features, y, z))
}

/// Reads a log. Errors carry 1-based line numbers (the header is line 1).
/// With `sort`, out-of-order timestamps are stably sorted instead of
/// rejected.
pub fn parse_log<R: Read>(reader: R, sort: bool) -> Result<Dataset> {
    let mut lines = BufReader::new(reader).lines();
    let header = match lines.next() {
        Some(l) => l.map_err(|e| parse_err(1, e.to_string()))?,
        None => return Err(parse_err(1, "missing header")),
    };
    let schema = parse_header(&header)?;
    let mut samples: Vec<SparseSample> = Vec::new();
    for (i, l) in lines.enumerate() {
        let line = i + 2;
        let text = l.map_err(|e| parse_err(line, e.to_string()))?;
        let s = parse_line(&text, line)?;
        validate(&s, &schema).map_err(|v| parse_err(line, v.to_string()))?;
        if let Some(prev) = samples.last() {
            if !sort && s.timestamp < prev.timestamp {
                return Err(parse_err(line, "timestamp decreases"));
            }
        }
        samples.push(s);
    }
    if sort {
        samples.sort_by_key(|s| s.timestamp);
    }
    Ok(Dataset::from_parts_unchecked(schema, samples))
}

pub fn read_log_file(path: &Path, sort: bool) -> Result<Dataset> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_log(f, sort).map_err(|e| match e {
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

fn header_line(schema: &FieldSchema) -> String {
    let vocab: Vec<String> = schema.vocab_sizes().iter().map(usize::to_string).collect();
    format!(
        "#fields={} vocab={} dim={}",
        schema.field_count(),
        vocab.join(","),
        schema.embedding_dim()
    )
}

pub fn write_log<W: Write>(d: &Dataset, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{}", header_line(d.schema()))?;
    let mut buf = String::new();
    for s in d.samples() {
        use std::fmt::Write as _;
        buf.clear();
        let _ = write!(buf, "{}\t{}\t{}\t", s.timestamp, s.y as u8, s.z as u8);
        for (k, f) in s.features.iter().enumerate() {
            if k > 0 {
                buf.push(' ');
            }
            let _ = write!(buf, "{}:{}", f.field, f.id);
        }
        buf.push('\n');
        w.write_all(buf.as_bytes())?;
    }
    w.flush()
}

pub fn write_log_file(d: &Dataset, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_log(d, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

/// One `true_pctr<TAB>true_pcvr` line per sample. Values are written in
/// shortest round-trip form.
pub fn write_truth<W: Write>(truths: &[Truth], mut w: W) -> std::io::Result<()> {
    for t in truths {
        writeln!(w, "{}\t{}", t.pctr, t.pcvr)?;
    }
    w.flush()
}

pub fn write_truth_file(truths: &[Truth], path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_truth(truths, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn parse_truth<R: Read>(reader: R) -> Result<Vec<Truth>> {
    let mut out = Vec::new();
    for (i, l) in BufReader::new(reader).lines().enumerate() {
        let line = i + 1;
        let text = l.map_err(|e| parse_err(line, e.to_string()))?;
        let (a, b) = text
            .split_once('\t')
            .ok_or_else(|| parse_err(line, "expected two tab-separated values"))?;
        let num = |s: &str| s.parse::<f64>().map_err(|_| parse_err(line, format!("bad number {s:?}")));
        out.push(Truth {
            pctr: num(a)?,
            pcvr: num(b)?,
        });
    }
    Ok(out)
}

/// Flat `key = value` settings grouped under `[section]` headers. Keys
/// before the first header live in the section named `""`. Lines starting
/// with `#` or `;` are comments.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigFile {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') || t.starts_with(';') {
                continue;
            }
            if let Some(name) = t.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| parse_err(line, "unterminated section header"))?;
                current = name.trim().to_owned();
                sections.entry(current.clone()).or_default();
                continue;
            }
            let (k, v) = t
                .split_once('=')
                .ok_or_else(|| parse_err(line, format!("expected key = value, got {t:?}")))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(parse_err(line, "empty key"));
            }
            let prev = sections
                .entry(current.clone())
                .or_default()
                .insert(k.to_owned(), v.trim().to_owned());
            if prev.is_some() {
                return Err(parse_err(line, format!("duplicate key {k:?}")));
            }
        }
        Ok(Self { sections })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    pub fn sections(&self) -> impl Iterator<Item = (&str, &BTreeMap<String, String>)> {
        self.sections.iter().map(|(k, v)| (k.as_str(), v))
    }
}
