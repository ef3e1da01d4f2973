//! Visual feature matrices and their label sidecars.
//!
//! Features are an N×p matrix in one of two layouts, distinguished by
//! sniffing the first four bytes:
//!
//! * binary — magic `VIFM`, little-endian u32 row and column counts, then
//!   N·p little-endian f32 values in row-major order;
//! * CSV — headerless comma-separated decimals, one instance per line.
//!
//! Labels live in a separate file, one token per line, aligned with the
//! feature rows. The mapping helpers turn those tokens into the two index
//! spaces used internally: training labels become class indices (positions
//! in the source-class list), evaluation labels become vocabulary rows.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::embedding::SemanticVocabulary;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VIFM";

/// Reads a feature matrix, auto-detecting the layout.
pub fn read_features(path: &Path) -> Result<Array2<f64>> {
    let display = path.display().to_string();
    let mut file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut head = [0u8; 4];
    let got = read_up_to(&mut file, &mut head).map_err(|e| Error::io(&display, e))?;
    if got == 4 && &head == MAGIC {
        read_binary(&display, file)
    } else {
        drop(file);
        read_csv(path)
    }
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    Ok(filled)
}

/// Continues after the magic has been consumed.
fn read_binary(display: &str, mut file: File) -> Result<Array2<f64>> {
    let mut u32_buf = [0u8; 4];
    let mut read_u32 = |file: &mut File, what: &str| -> Result<u32> {
        file.read_exact(&mut u32_buf)
            .map_err(|_| Error::parse(display, 0, format!("file ends before {what}")))?;
        Ok(u32::from_le_bytes(u32_buf))
    };
    let n = read_u32(&mut file, "the row count")? as usize;
    let p = read_u32(&mut file, "the column count")? as usize;
    if n == 0 || p == 0 {
        return Err(Error::Empty("feature matrix"));
    }
    let total = n
        .checked_mul(p)
        .ok_or_else(|| Error::parse(display, 0, "row × column count overflows"))?;
    let mut bytes = vec![0u8; 4 * total];
    file.read_exact(&mut bytes)
        .map_err(|_| Error::parse(display, 0, format!("file ends inside the {n}×{p} payload")))?;
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing).map_err(|e| Error::io(display, e))? != 0 {
        return Err(Error::parse(display, 0, "trailing bytes after the payload"));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Array2::from_shape_vec((n, p), values).map_err(|e| Error::parse(display, 0, e.to_string()))
}

fn read_csv(path: &Path) -> Result<Array2<f64>> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let reader = BufReader::new(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width: Option<usize> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(&display, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::parse(&display, lineno, format!("bad number {:?}", t.trim())))
            })
            .collect::<Result<_>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::parse(
                    &display,
                    lineno,
                    format!("expected {w} columns, found {}", row.len()),
                ));
            }
            _ => {}
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Empty("feature matrix"));
    }
    let p = width.expect("nonempty");
    let mut out = Array2::zeros((rows.len(), p));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    Ok(out)
}

pub fn write_features_binary(path: &Path, features: &Array2<f64>) -> Result<()> {
    let display = path.display().to_string();
    let (n, p) = (features.nrows(), features.ncols());
    if n > u32::MAX as usize || p > u32::MAX as usize {
        return Err(Error::InvalidInput(format!("matrix {n}×{p} exceeds the format's u32 limits")));
    }
    let file = File::create(path).map_err(|e| Error::io(&display, e))?;
    let mut out = BufWriter::new(file);
    let mut write = |bytes: &[u8]| -> Result<()> {
        out.write_all(bytes).map_err(|e| Error::io(&display, e))
    };
    write(MAGIC)?;
    write(&(n as u32).to_le_bytes())?;
    write(&(p as u32).to_le_bytes())?;
    for v in features.iter() {
        write(&(*v as f32).to_le_bytes())?;
    }
    drop(write);
    out.flush().map_err(|e| Error::io(&display, e))
}

pub fn write_features_csv(path: &Path, features: &Array2<f64>) -> Result<()> {
    let display = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&display, e))?;
    let mut out = BufWriter::new(file);
    for row in features.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.write_all(line.join(",").as_bytes())
            .and_then(|_| out.write_all(b"\n"))
            .map_err(|e| Error::io(&display, e))?;
    }
    out.flush().map_err(|e| Error::io(&display, e))
}

/// One label token per line, aligned with the feature rows. Blank lines
/// are malformed — they would silently shift the alignment.
pub fn read_labels(path: &Path) -> Result<Vec<String>> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let reader = BufReader::new(file);
    let mut labels = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(&display, e))?;
        let token = line.trim_end_matches('\r');
        if token.is_empty() {
            return Err(Error::parse(&display, lineno + 1, "empty label line"));
        }
        labels.push(token.to_string());
    }
    if labels.is_empty() {
        return Err(Error::Empty("label file"));
    }
    Ok(labels)
}

pub fn write_labels(path: &Path, labels: &[String]) -> Result<()> {
    let display = path.display().to_string();
    let mut text = String::new();
    for l in labels {
        text.push_str(l);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(&display, e))
}

/// Maps training label tokens to class indices (positions in the source
/// list). Tokens outside the source classes are an error: training data
/// for a class we hold no prototype-role for cannot be used.
pub fn train_class_indices(labels: &[String], vocab: &SemanticVocabulary) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|l| {
            let id = vocab.id_of(l).ok_or_else(|| Error::UnknownLabel {
                label: l.clone(),
                where_: "vocabulary",
            })?;
            vocab
                .source_ids()
                .iter()
                .position(|&s| s == id)
                .ok_or_else(|| Error::UnknownLabel {
                    label: l.clone(),
                    where_: "source classes",
                })
        })
        .collect()
}

/// Maps evaluation label tokens to vocabulary rows.
pub fn vocab_row_indices(labels: &[String], vocab: &SemanticVocabulary) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|l| {
            vocab.id_of(l).ok_or_else(|| Error::UnknownLabel {
                label: l.clone(),
                where_: "vocabulary",
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use tempfile::tempdir;

    #[test]
    fn binary_round_trip_and_sniffing() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.feat");
        let m = array![[1.5, -2.25, 0.0], [0.0009765625, 4.0, 7.5]];
        write_features_binary(&path, &m).unwrap();
        let back = read_features(&path).unwrap();
        // All sample values are exactly representable in f32.
        assert_eq!(back, m);
    }

    #[test]
    fn csv_round_trip_preserves_f64() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.csv");
        let m = array![[0.1, 0.2], [1.0 / 3.0, -7.25]];
        write_features_csv(&path, &m).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn binary_rejects_truncation_and_trailing_garbage() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.feat");
        let m = array![[1.0, 2.0], [3.0, 4.0]];
        write_features_binary(&path, &m).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_features(&path), Err(Error::Parse { .. })));

        let mut longer = bytes.clone();
        longer.push(0);
        std::fs::write(&path, &longer).unwrap();
        assert!(matches!(read_features(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.csv");
        std::fs::write(&path, "1,2\n3,4,5\n").unwrap();
        match read_features(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::write(&path, "1,oops\n").unwrap();
        assert!(matches!(read_features(&path), Err(Error::Parse { line: 1, .. })));
        std::fs::write(&path, "\n\n").unwrap();
        assert!(matches!(read_features(&path), Err(Error::Empty(_))));
    }

    #[test]
    fn labels_round_trip_and_reject_blanks() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("y.txt");
        let labels: Vec<String> = vec!["cat".into(), "dog".into()];
        write_labels(&path, &labels).unwrap();
        assert_eq!(read_labels(&path).unwrap(), labels);

        std::fs::write(&path, "cat\n\ndog\n").unwrap();
        assert!(matches!(read_labels(&path), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn label_mapping_resolves_both_index_spaces() {
        let labels: Vec<String> = vec!["a".into(), "b".into(), "c".into(), "d".into()];
        let vectors = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 1.0]];
        let mut vocab = SemanticVocabulary::new(labels, vectors, false).unwrap();
        // Deliberately out of row order: class 0 is "c" (row 2).
        vocab
            .assign_roles(&["c".to_string(), "a".to_string()], &["d".to_string()])
            .unwrap();

        let train: Vec<String> = vec!["a".into(), "c".into(), "a".into()];
        assert_eq!(train_class_indices(&train, &vocab).unwrap(), vec![1, 0, 1]);
        // "d" is in the vocabulary but not a source class.
        let bad: Vec<String> = vec!["d".into()];
        assert!(matches!(
            train_class_indices(&bad, &vocab),
            Err(Error::UnknownLabel { where_: "source classes", .. })
        ));

        let eval: Vec<String> = vec!["d".into(), "b".into()];
        assert_eq!(vocab_row_indices(&eval, &vocab).unwrap(), vec![3, 1]);
        let missing: Vec<String> = vec!["zebra".into()];
        assert!(matches!(
            vocab_row_indices(&missing, &vocab),
            Err(Error::UnknownLabel { where_: "vocabulary", .. })
        ));
    }
}
