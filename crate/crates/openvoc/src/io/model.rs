//! The trained-model file.
//!
//! A model is only meaningful next to the exact vocabulary it was trained
//! against: the embedding maps into that vector space, and the class
//! weights were fit against those prototypes. The file therefore stores a
//! SHA-256 fingerprint of the vocabulary — labels, vectors, source-class
//! assignment, and the normalization flag — and loading verifies it
//! against the vocabulary supplied by the caller. The target split is
//! deliberately *not* fingerprinted: which unseen classes to evaluate
//! against is an evaluation-time choice, and re-slicing it must not
//! invalidate a trained model.
//!
//! Layout (all integers and floats little-endian): magic `OVML`, format
//! version, fingerprint, the p×d embedding as f64, the per-class weights
//! with their optional tail-fit parameters, and the loss configuration.
//! Everything is f64 end to end, so save/load round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::embedding::{EmbeddingMatrix, SemanticVocabulary};
use crate::error::{Error, Result};
use crate::evt::{ClassWeight, ClassWeights, WeibullFit};
use crate::loss::LossConfig;

const MAGIC: &[u8; 4] = b"OVML";
pub const MODEL_VERSION: u32 = 1;
const FINGERPRINT_DOMAIN: &[u8] = b"openvoc.vocab.v1\0";

/// Everything training produces: the embedding, the class weights of the
/// final round, and the loss configuration they were computed under.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub w: EmbeddingMatrix,
    pub weights: ClassWeights,
    pub loss: LossConfig,
}

/// Digest of the parts of a vocabulary a trained model depends on.
pub fn vocab_fingerprint(vocab: &SemanticVocabulary) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(FINGERPRINT_DOMAIN);
    h.update((vocab.len() as u64).to_le_bytes());
    for label in vocab.labels() {
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
    }
    h.update((vocab.vectors().nrows() as u64).to_le_bytes());
    h.update((vocab.vectors().ncols() as u64).to_le_bytes());
    for v in vocab.vectors().iter() {
        h.update(v.to_le_bytes());
    }
    h.update((vocab.source_ids().len() as u64).to_le_bytes());
    for &id in vocab.source_ids() {
        h.update((id as u64).to_le_bytes());
    }
    h.update([vocab.is_normalized() as u8]);
    h.finalize().into()
}

fn push_fit(buf: &mut Vec<u8>, fit: &Option<WeibullFit>) {
    match fit {
        Some(f) => {
            buf.push(1);
            buf.extend_from_slice(&f.shape.to_le_bytes());
            buf.extend_from_slice(&f.scale.to_le_bytes());
        }
        None => buf.push(0),
    }
}

pub fn save_model(path: &Path, model: &TrainedModel, vocab: &SemanticVocabulary) -> Result<()> {
    let display = path.display().to_string();
    let w = model.w.as_array();
    if w.ncols() != vocab.dim() {
        return Err(Error::Shape {
            context: "model save",
            expected: format!("embedding into {} dimensions", vocab.dim()),
            got: format!("{}", w.ncols()),
        });
    }

    let mut buf = Vec::with_capacity(64 + 8 * w.len() + 64 * model.weights.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    buf.extend_from_slice(&vocab_fingerprint(vocab));
    buf.extend_from_slice(&(w.nrows() as u32).to_le_bytes());
    buf.extend_from_slice(&(w.ncols() as u32).to_le_bytes());
    for v in w.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(model.weights.len() as u32).to_le_bytes());
    for c in &model.weights.classes {
        buf.extend_from_slice(&c.weight.to_le_bytes());
        buf.extend_from_slice(&c.margin_radius.to_le_bytes());
        buf.extend_from_slice(&c.coverage_radius.to_le_bytes());
        push_fit(&mut buf, &c.margin_fit);
        push_fit(&mut buf, &c.coverage_fit);
        buf.push(c.margin_fallback as u8);
        buf.push(c.coverage_fallback as u8);
    }
    let l = &model.loss;
    buf.extend_from_slice(&l.alpha.to_le_bytes());
    buf.extend_from_slice(&l.lambda_reg.to_le_bytes());
    buf.extend_from_slice(&l.epsilon.to_le_bytes());
    buf.extend_from_slice(&l.margin_c.to_le_bytes());
    buf.extend_from_slice(&(l.open_neighbors as u32).to_le_bytes());
    buf.extend_from_slice(&(l.source_neighbors as u32).to_le_bytes());
    buf.push(l.average_triplets as u8);

    let mut file = File::create(path).map_err(|e| Error::io(&display, e))?;
    file.write_all(&buf).map_err(|e| Error::io(&display, e))
}

struct Rd<'a, R: Read> {
    inner: R,
    display: &'a str,
}

impl<'a, R: Read> Rd<'a, R> {
    fn bytes(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|_| Error::parse(self.display, 0, format!("file ends before {what}")))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.bytes(&mut b, what)?;
        Ok(b[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.bytes(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.bytes(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }

    fn fit(&mut self, what: &str) -> Result<Option<WeibullFit>> {
        match self.u8(what)? {
            0 => Ok(None),
            1 => Ok(Some(WeibullFit {
                shape: self.f64(what)?,
                scale: self.f64(what)?,
            })),
            other => Err(Error::parse(
                self.display,
                0,
                format!("bad presence flag {other} in {what}"),
            )),
        }
    }
}

pub fn load_model(path: &Path, vocab: &SemanticVocabulary) -> Result<TrainedModel> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut rd = Rd {
        inner: BufReader::new(file),
        display: &display,
    };

    let mut magic = [0u8; 4];
    rd.bytes(&mut magic, "the magic")?;
    if &magic != MAGIC {
        return Err(Error::parse(&display, 0, "not a model file (bad magic)"));
    }
    let version = rd.u32("the version")?;
    if version != MODEL_VERSION {
        return Err(Error::ModelVersion {
            found: version,
            expected: MODEL_VERSION,
        });
    }
    let mut fp = [0u8; 32];
    rd.bytes(&mut fp, "the vocabulary fingerprint")?;
    if fp != vocab_fingerprint(vocab) {
        return Err(Error::FingerprintMismatch);
    }

    let p = rd.u32("the embedding rows")? as usize;
    let d = rd.u32("the embedding columns")? as usize;
    if d != vocab.dim() {
        return Err(Error::parse(
            &display,
            0,
            format!("embedding maps into {d} dimensions but the vocabulary has {}", vocab.dim()),
        ));
    }
    let total = p
        .checked_mul(d)
        .ok_or_else(|| Error::parse(&display, 0, "embedding size overflows"))?;
    let mut values = Vec::with_capacity(total);
    for _ in 0..total {
        values.push(rd.f64("the embedding")?);
    }
    let w = ndarray::Array2::from_shape_vec((p, d), values)
        .map_err(|e| Error::parse(&display, 0, e.to_string()))?;
    let w = EmbeddingMatrix::new(w)?;

    let n_classes = rd.u32("the class count")? as usize;
    let mut classes = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        classes.push(ClassWeight {
            weight: rd.f64("a class weight")?,
            margin_radius: rd.f64("a margin radius")?,
            coverage_radius: rd.f64("a coverage radius")?,
            margin_fit: rd.fit("a margin fit")?,
            coverage_fit: rd.fit("a coverage fit")?,
            margin_fallback: rd.u8("a fallback flag")? != 0,
            coverage_fallback: rd.u8("a fallback flag")? != 0,
        });
    }
    let weights = ClassWeights { classes };

    let loss = LossConfig {
        alpha: rd.f64("the loss config")?,
        lambda_reg: rd.f64("the loss config")?,
        epsilon: rd.f64("the loss config")?,
        margin_c: rd.f64("the loss config")?,
        open_neighbors: rd.u32("the loss config")? as usize,
        source_neighbors: rd.u32("the loss config")? as usize,
        average_triplets: rd.u8("the loss config")? != 0,
    };
    loss.validate()
        .map_err(|e| Error::parse(&display, 0, format!("stored loss configuration is invalid: {e}")))?;

    let mut trailing = [0u8; 1];
    if rd.inner.read(&mut trailing).map_err(|e| Error::io(&display, e))? != 0 {
        return Err(Error::parse(&display, 0, "trailing bytes after the model"));
    }
    Ok(TrainedModel { w, weights, loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_matrix, rng};
    use ndarray::array;
    use tempfile::tempdir;

    fn fixture_vocab() -> SemanticVocabulary {
        let labels: Vec<String> = vec!["a".into(), "b".into(), "c".into(), "d".into()];
        let vectors = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 1.0]];
        let mut vocab = SemanticVocabulary::new(labels, vectors, true).unwrap();
        vocab
            .assign_roles(&["a".to_string(), "b".to_string()], &["c".to_string()])
            .unwrap();
        vocab
    }

    fn fixture_model() -> TrainedModel {
        let mut r = rng(5);
        let w = EmbeddingMatrix::new(random_matrix(&mut r, 3, 2)).unwrap();
        let mut weights = ClassWeights::uniform(2);
        weights.classes[0].weight = 1.25;
        weights.classes[0].margin_radius = 0.75;
        weights.classes[0].margin_fit = Some(WeibullFit { shape: 2.5, scale: 1.125 });
        weights.classes[1].weight = 0.75;
        // A point mass carries an infinite shape; it must survive the disk.
        weights.classes[1].coverage_fit = Some(WeibullFit::point_mass(3.0));
        weights.classes[1].coverage_fallback = true;
        let mut loss = LossConfig::default();
        loss.alpha = 0.55;
        loss.average_triplets = true;
        TrainedModel { w, weights, loss }
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ovml");
        let vocab = fixture_vocab();
        let model = fixture_model();
        save_model(&path, &model, &vocab).unwrap();
        let back = load_model(&path, &vocab).unwrap();

        assert_eq!(back.w.as_array(), model.w.as_array());
        assert_eq!(back.weights.len(), model.weights.len());
        for (a, b) in back.weights.classes.iter().zip(&model.weights.classes) {
            assert_eq!(a.weight.to_bits(), b.weight.to_bits());
            assert_eq!(a.margin_radius.to_bits(), b.margin_radius.to_bits());
            assert_eq!(a.coverage_radius.to_bits(), b.coverage_radius.to_bits());
            assert_eq!(a.margin_fit.map(|f| (f.shape.to_bits(), f.scale.to_bits())),
                       b.margin_fit.map(|f| (f.shape.to_bits(), f.scale.to_bits())));
            assert_eq!(a.coverage_fit.map(|f| (f.shape.to_bits(), f.scale.to_bits())),
                       b.coverage_fit.map(|f| (f.shape.to_bits(), f.scale.to_bits())));
            assert_eq!(a.margin_fallback, b.margin_fallback);
            assert_eq!(a.coverage_fallback, b.coverage_fallback);
        }
        assert!(back.weights.classes[1].coverage_fit.unwrap().shape.is_infinite());
        assert_eq!(back.loss.alpha, model.loss.alpha);
        assert_eq!(back.loss.average_triplets, model.loss.average_triplets);
        assert_eq!(back.loss.open_neighbors, model.loss.open_neighbors);
    }

    #[test]
    fn fingerprint_guards_vectors_labels_sources_and_normalization() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ovml");
        let vocab = fixture_vocab();
        save_model(&path, &fixture_model(), &vocab).unwrap();

        // A different vector.
        let labels: Vec<String> = vec!["a".into(), "b".into(), "c".into(), "d".into()];
        let mut other = SemanticVocabulary::new(
            labels.clone(),
            array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 1.5]],
            true,
        )
        .unwrap();
        other
            .assign_roles(&["a".to_string(), "b".to_string()], &["c".to_string()])
            .unwrap();
        assert!(matches!(load_model(&path, &other), Err(Error::FingerprintMismatch)));

        // A different source split.
        let mut resplit = fixture_vocab();
        resplit
            .assign_roles(&["a".to_string()], &["c".to_string()])
            .unwrap();
        assert!(matches!(load_model(&path, &resplit), Err(Error::FingerprintMismatch)));

        // A different *target* split still loads: targets are not part of
        // the fingerprint by design.
        let mut retarget = fixture_vocab();
        retarget
            .assign_roles(&["a".to_string(), "b".to_string()], &["d".to_string()])
            .unwrap();
        assert!(load_model(&path, &retarget).is_ok());
    }

    #[test]
    fn version_magic_truncation_and_trailing_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ovml");
        let vocab = fixture_vocab();
        save_model(&path, &fixture_model(), &vocab).unwrap();
        let original = std::fs::read(&path).unwrap();

        let mut bad_version = original.clone();
        bad_version[4..8].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &bad_version).unwrap();
        assert!(matches!(
            load_model(&path, &vocab),
            Err(Error::ModelVersion { found: 99, expected: MODEL_VERSION })
        ));

        let mut bad_magic = original.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(load_model(&path, &vocab), Err(Error::Parse { .. })));

        std::fs::write(&path, &original[..original.len() - 5]).unwrap();
        assert!(matches!(load_model(&path, &vocab), Err(Error::Parse { .. })));

        let mut longer = original.clone();
        longer.push(7);
        std::fs::write(&path, &longer).unwrap();
        assert!(matches!(load_model(&path, &vocab), Err(Error::Parse { .. })));
    }

    #[test]
    fn fingerprint_is_a_pure_function_of_the_guarded_parts() {
        let a = fixture_vocab();
        let b = fixture_vocab();
        assert_eq!(vocab_fingerprint(&a), vocab_fingerprint(&b));

        let mut unnormalized = SemanticVocabulary::new(
            a.labels().to_vec(),
            a.vectors().clone(),
            false,
        )
        .unwrap();
        unnormalized
            .assign_roles(&["a".to_string(), "b".to_string()], &["c".to_string()])
            .unwrap();
        assert_ne!(vocab_fingerprint(&a), vocab_fingerprint(&unnormalized));
    }
}
