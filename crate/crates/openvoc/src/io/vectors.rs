//! Semantic vector files and vocabulary pruning.
//!
//! Word vectors come in three common layouts, all mapping a token to a
//! fixed number of coefficients:
//!
//! * `Text` — a header line `<count> <dim>`, then one entry per line:
//!   the token followed by `dim` decimal numbers, space-separated.
//! * `TextNoHeader` — the same without the header; the dimension is taken
//!   from the first line.
//! * `Binary` — an ASCII header line `<count> <dim>\n`, then per entry the
//!   token bytes, a single space, and `dim` little-endian f32 values.
//!
//! Tokens must not contain whitespace (multi-word phrases use underscores
//! by convention). Duplicate tokens happen in real files; the reader keeps
//! the token at its first position but lets the last vector win, and
//! reports how many entries were overwritten so callers can warn.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::embedding::SemanticVocabulary;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VectorFormat {
    Text,
    TextNoHeader,
    Binary,
}

impl VectorFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(VectorFormat::Text),
            "text-noheader" => Ok(VectorFormat::TextNoHeader),
            "binary" => Ok(VectorFormat::Binary),
            other => Err(Error::Config(format!(
                "unknown vector format {other:?} (expected text, text-noheader, or binary)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            VectorFormat::Text => "text",
            VectorFormat::TextNoHeader => "text-noheader",
            VectorFormat::Binary => "binary",
        }
    }
}

/// A parsed vector file. `duplicates` counts entries whose token had
/// already appeared; their vectors replaced the earlier ones in place.
#[derive(Debug, Clone)]
pub struct VectorFile {
    pub labels: Vec<String>,
    pub vectors: Array2<f64>,
    pub duplicates: usize,
}

pub fn read_vectors(path: &Path, format: VectorFormat) -> Result<VectorFile> {
    match format {
        VectorFormat::Text => read_text(path, true),
        VectorFormat::TextNoHeader => read_text(path, false),
        VectorFormat::Binary => read_binary(path),
    }
}

/// Accumulates entries with first-position/last-vector duplicate handling.
struct EntrySink {
    labels: Vec<String>,
    rows: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
    duplicates: usize,
}

impl EntrySink {
    fn new() -> Self {
        EntrySink {
            labels: Vec::new(),
            rows: Vec::new(),
            index: HashMap::new(),
            duplicates: 0,
        }
    }

    fn push(&mut self, token: String, row: Vec<f64>) {
        match self.index.get(&token) {
            Some(&at) => {
                self.rows[at] = row;
                self.duplicates += 1;
            }
            None => {
                self.index.insert(token.clone(), self.labels.len());
                self.labels.push(token);
                self.rows.push(row);
            }
        }
    }

    fn finish(self) -> Result<VectorFile> {
        if self.labels.is_empty() {
            return Err(Error::Empty("vector file"));
        }
        let d = self.rows[0].len();
        let mut vectors = Array2::zeros((self.rows.len(), d));
        for (i, row) in self.rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                vectors[[i, j]] = v;
            }
        }
        Ok(VectorFile {
            labels: self.labels,
            vectors,
            duplicates: self.duplicates,
        })
    }
}

fn read_text(path: &Path, with_header: bool) -> Result<VectorFile> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let reader = BufReader::new(file);
    let mut sink = EntrySink::new();
    let mut expect: Option<(usize, usize)> = None;
    let mut dim: Option<usize> = None;
    let mut records = 0usize;

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(&display, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        if with_header && expect.is_none() {
            let count = tokens
                .next()
                .and_then(|t| t.parse::<usize>().ok())
                .ok_or_else(|| Error::parse(&display, lineno, "bad entry count in header"))?;
            let d = tokens
                .next()
                .and_then(|t| t.parse::<usize>().ok())
                .ok_or_else(|| Error::parse(&display, lineno, "bad dimension in header"))?;
            if tokens.next().is_some() {
                return Err(Error::parse(&display, lineno, "header has more than two fields"));
            }
            if d == 0 {
                return Err(Error::parse(&display, lineno, "dimension 0"));
            }
            expect = Some((count, d));
            dim = Some(d);
            continue;
        }
        let token = tokens
            .next()
            .ok_or_else(|| Error::parse(&display, lineno, "missing token"))?
            .to_string();
        let values: Vec<f64> = tokens
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::parse(&display, lineno, format!("bad number {t:?}")))
            })
            .collect::<Result<_>>()?;
        match dim {
            None => {
                if values.is_empty() {
                    return Err(Error::parse(&display, lineno, "entry has no coefficients"));
                }
                dim = Some(values.len());
            }
            Some(d) => {
                if values.len() != d {
                    return Err(Error::parse(
                        &display,
                        lineno,
                        format!("expected {d} coefficients, found {}", values.len()),
                    ));
                }
            }
        }
        records += 1;
        sink.push(token, values);
    }

    if let Some((count, _)) = expect {
        if records != count {
            return Err(Error::parse(
                &display,
                0,
                format!("header promises {count} entries, file contains {records}"),
            ));
        }
    }
    sink.finish()
}

fn read_binary(path: &Path) -> Result<VectorFile> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut reader = BufReader::new(file);

    // ASCII header line: "<count> <dim>\n".
    let mut header = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = reader.read(&mut byte).map_err(|e| Error::io(&display, e))?;
        if n == 0 {
            return Err(Error::parse(&display, 1, "missing header"));
        }
        if byte[0] == b'\n' {
            break;
        }
        header.push(byte[0]);
        if header.len() > 64 {
            return Err(Error::parse(&display, 1, "header line too long"));
        }
    }
    let header = String::from_utf8(header).map_err(|_| Error::parse(&display, 1, "header is not ASCII"))?;
    let mut parts = header.split_whitespace();
    let count: usize = parts
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::parse(&display, 1, "bad entry count in header"))?;
    let dim: usize = parts
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::parse(&display, 1, "bad dimension in header"))?;
    if dim == 0 {
        return Err(Error::parse(&display, 1, "dimension 0"));
    }

    let mut sink = EntrySink::new();
    let mut float_buf = vec![0u8; 4 * dim];
    for entry in 0..count {
        // Token: bytes up to a single space. Tolerate newlines left over
        // from the previous entry, which some writers emit.
        let mut token = Vec::new();
        loop {
            let n = reader.read(&mut byte).map_err(|e| Error::io(&display, e))?;
            if n == 0 {
                return Err(Error::parse(
                    &display,
                    0,
                    format!("file ends inside entry {} of {count}", entry + 1),
                ));
            }
            match byte[0] {
                b' ' => break,
                b'\n' | b'\r' if token.is_empty() => continue,
                b => token.push(b),
            }
        }
        let token = String::from_utf8(token)
            .map_err(|_| Error::parse(&display, 0, format!("entry {} token is not UTF-8", entry + 1)))?;
        reader.read_exact(&mut float_buf).map_err(|e| Error::io(&display, e))?;
        let values: Vec<f64> = float_buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        sink.push(token, values);
    }
    sink.finish()
}

pub fn write_vectors(
    path: &Path,
    labels: &[String],
    vectors: &Array2<f64>,
    format: VectorFormat,
) -> Result<()> {
    if labels.len() != vectors.nrows() {
        return Err(Error::Shape {
            context: "vector file write",
            expected: format!("{} vector rows", labels.len()),
            got: format!("{}", vectors.nrows()),
        });
    }
    let display = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&display, e))?;
    let mut out = BufWriter::new(file);
    let write = |out: &mut BufWriter<File>, bytes: &[u8]| -> Result<()> {
        out.write_all(bytes).map_err(|e| Error::io(&display, e))
    };

    match format {
        VectorFormat::Text | VectorFormat::TextNoHeader => {
            if format == VectorFormat::Text {
                write(&mut out, format!("{} {}\n", labels.len(), vectors.ncols()).as_bytes())?;
            }
            for (label, row) in labels.iter().zip(vectors.rows()) {
                let mut line = String::with_capacity(16 * (vectors.ncols() + 1));
                line.push_str(label);
                for v in row.iter() {
                    // `{}` on f64 prints the shortest string that parses
                    // back to the same bits, so text files round-trip.
                    line.push(' ');
                    line.push_str(&format!("{v}"));
                }
                line.push('\n');
                write(&mut out, line.as_bytes())?;
            }
        }
        VectorFormat::Binary => {
            write(&mut out, format!("{} {}\n", labels.len(), vectors.ncols()).as_bytes())?;
            for (label, row) in labels.iter().zip(vectors.rows()) {
                write(&mut out, label.as_bytes())?;
                write(&mut out, b" ")?;
                for v in row.iter() {
                    write(&mut out, &(*v as f32).to_le_bytes())?;
                }
            }
        }
    }
    out.flush().map_err(|e| Error::io(&display, e))
}

/// Reads a `token<TAB>count` frequency table. Duplicate tokens keep the
/// last count.
pub fn read_frequencies(path: &Path) -> Result<HashMap<String, u64>> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let reader = BufReader::new(file);
    let mut freqs = HashMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(&display, e))?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let (token, count) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(&display, lineno, "expected token<TAB>count"))?;
        let count: u64 = count
            .trim()
            .parse()
            .map_err(|_| Error::parse(&display, lineno, format!("bad count {count:?}")))?;
        freqs.insert(token.to_string(), count);
    }
    Ok(freqs)
}

/// Restricts a vocabulary to tokens whose corpus frequency lies in
/// `[min_count, max_count]`. Source and target classes are always kept
/// regardless of frequency; tokens absent from the table count as 0.
/// Synonym sets are remapped and lose pruned members.
///
/// Rows are copied verbatim — no renormalization — so pruning is
/// idempotent: pruning a pruned vocabulary with the same table changes
/// nothing.
pub fn prune_vocabulary(
    vocab: &SemanticVocabulary,
    freqs: &HashMap<String, u64>,
    min_count: u64,
    max_count: u64,
) -> Result<SemanticVocabulary> {
    if min_count > max_count {
        return Err(Error::Config(format!(
            "frequency window is empty: min {min_count} > max {max_count}"
        )));
    }
    let protected: HashSet<usize> = vocab
        .source_ids()
        .iter()
        .chain(vocab.target_ids())
        .copied()
        .collect();
    let kept: Vec<usize> = (0..vocab.len())
        .filter(|&i| {
            if protected.contains(&i) {
                return true;
            }
            let f = freqs.get(vocab.label(i)).copied().unwrap_or(0);
            (min_count..=max_count).contains(&f)
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::Empty("vocabulary after pruning"));
    }

    let remap: HashMap<usize, usize> = kept.iter().enumerate().map(|(new, &old)| (old, new)).collect();
    let labels: Vec<String> = kept.iter().map(|&i| vocab.label(i).to_string()).collect();
    let mut vectors = Array2::zeros((kept.len(), vocab.dim()));
    for (new, &old) in kept.iter().enumerate() {
        vectors.row_mut(new).assign(&vocab.vectors().row(old));
    }
    let source_ids: Vec<usize> = vocab.source_ids().iter().map(|i| remap[i]).collect();
    let target_ids: Vec<usize> = vocab.target_ids().iter().map(|i| remap[i]).collect();
    let mut synsets = HashMap::new();
    for (&key, members) in vocab.synsets() {
        let Some(&new_key) = remap.get(&key) else { continue };
        let new_members: Vec<usize> = members.iter().filter_map(|m| remap.get(m).copied()).collect();
        if !new_members.is_empty() {
            synsets.insert(new_key, new_members);
        }
    }
    Ok(SemanticVocabulary::from_parts(
        labels,
        vectors,
        source_ids,
        target_ids,
        synsets,
        vocab.is_normalized(),
    ))
}
