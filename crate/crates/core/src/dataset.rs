//! JSON-lines datasets and run manifests.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seq::TokenId;
use crate::tokenizer::{MotionSequence, SignPair};

/// One motion–text pair with inline frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub text_tokens: Vec<TokenId>,
    pub frames: usize,
    pub dims: usize,
    pub motion: Vec<f64>,
}

impl Record {
    pub fn from_pair(id: impl Into<String>, pair: &SignPair) -> Self {
        Record {
            id: id.into(),
            text_tokens: pair.text.clone(),
            frames: pair.motion.n_frames(),
            dims: pair.motion.d_s(),
            motion: pair.motion.frames().to_vec(),
        }
    }

    pub fn to_motion(&self) -> Result<MotionSequence> {
        MotionSequence::new(self.frames, self.dims, self.motion.clone())
            .map_err(|e| Error::Data(format!("record {}: {e}", self.id)))
    }
}

/// Generated part token streams for one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub id: String,
    pub text_tokens: Vec<TokenId>,
    pub sign: [Vec<TokenId>; 3],
    pub calls: usize,
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (no, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), no + 1)))?,
        );
    }
    Ok(out)
}

/// Train/dev/test sizes for an 80/10/10 split.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 8 / 10;
    let dev = n / 10;
    (train, dev, n - train - dev)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Lineage record written next to every artifact set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub seed: u64,
    pub config_hash: String,
    /// Hash of the dataset manifest every artifact traces back to.
    pub dataset_hash: String,
    pub inputs: Vec<String>,
    /// `(file name, sha256)` of the outputs.
    pub files: Vec<(String, String)>,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("missing manifest {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{gen_synthetic_pairs, MotionConfig};

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_sizes(100), (80, 10, 10));
        assert_eq!(split_sizes(7), (5, 0, 2));
    }

    #[test]
    fn records_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = gen_synthetic_pairs(3, 1, &MotionConfig::default()).unwrap();
        let recs: Vec<Record> = pairs.iter().enumerate().map(|(i, p)| Record::from_pair(format!("s{i}"), p)).collect();
        let p = dir.path().join("d.jsonl");
        write_jsonl(&p, &recs).unwrap();
        let back: Vec<Record> = read_jsonl(&p).unwrap();
        assert_eq!(back, recs);
        assert_eq!(back[0].to_motion().unwrap(), pairs[0].motion);
        std::fs::write(&p, "{broken\n").unwrap();
        assert!(matches!(read_jsonl::<Record>(&p), Err(Error::Data(_))));
    }
}
