//! Binary model archive: a JSON header followed by raw little-endian tensors.
//!
//! Layout: `PMCK1\n`, header length (u64 LE), header JSON, then per tensor
//! the name length (u32 LE), name bytes, rows and cols (u64 LE each) and
//! `rows * cols` f64 values in row-major order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::hierarchy::LabelHierarchy;
use crate::labelseq::{TargetFormat, Vocabulary};
use crate::model::{Model, ModelConfig};

const MAGIC: &[u8; 6] = b"PMCK1\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    target_format: String,
    vocabulary: Vec<String>,
    hierarchy: String,
    tensors: usize,
    meta: BTreeMap<String, String>,
}

/// Everything needed to decode with a trained model.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocabulary,
    pub hierarchy: LabelHierarchy,
    pub format: TargetFormat,
    /// Free-form provenance (seed, epoch, rho, ...).
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let header = Header {
            model: self.model.config().clone(),
            target_format: self.format.as_str().to_string(),
            vocabulary: self.vocab.tokens().to_vec(),
            hierarchy: self.hierarchy.to_edge_list(),
            tensors: self.model.params().len(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        out.write_all(MAGIC)?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        for (name, value) in self.model.params().iter() {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(value.nrows() as u64).to_le_bytes())?;
            out.write_all(&(value.ncols() as u64).to_le_bytes())?;
            for v in value.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 6];
        read_exact(&mut input, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let len = read_u64(&mut input)? as usize;
        let mut json = vec![0u8; len];
        read_exact(&mut input, &mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        let hierarchy = LabelHierarchy::parse(&header.hierarchy)?;
        let vocab = Vocabulary::from_tokens(header.vocabulary, &hierarchy)?;
        let format: TargetFormat = header.target_format.parse()?;

        let mut params = ParamStore::new();
        for _ in 0..header.tensors {
            let mut n = [0u8; 4];
            read_exact(&mut input, &mut n)?;
            let mut name = vec![0u8; u32::from_le_bytes(n) as usize];
            read_exact(&mut input, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rows = read_u64(&mut input)? as usize;
            let cols = read_u64(&mut input)? as usize;
            let count = rows
                .checked_mul(cols)
                .filter(|&c| c <= 1 << 32)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` has an absurd shape")))?;
            let mut data = Vec::with_capacity(count);
            let mut buf = [0u8; 8];
            for _ in 0..count {
                read_exact(&mut input, &mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            let value = Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            params.add(name, value);
        }
        if input.read(&mut [0u8; 1])? != 0 {
            return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
        }
        let model = Model::from_params(header.model, params)?;
        if model.config().vocab_size != vocab.len() || model.config().out_size != vocab.decoder_size() {
            return Err(Error::VocabMismatch(format!(
                "model expects {}/{} tokens, vocabulary has {}/{}",
                model.config().vocab_size,
                model.config().out_size,
                vocab.len(),
                vocab.decoder_size()
            )));
        }
        Ok(Checkpoint {
            model,
            vocab,
            hierarchy,
            format,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Errors unless `h` is the hierarchy the model was trained on.
    pub fn check_hierarchy(&self, h: &LabelHierarchy) -> Result<()> {
        if h.to_edge_list() != self.hierarchy.to_edge_list() {
            return Err(Error::VocabMismatch(
                "hierarchy differs from the one stored in the checkpoint".into(),
            ));
        }
        Ok(())
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Checkpoint("truncated checkpoint".into()),
        _ => Error::Io(e),
    })
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let h = LabelHierarchy::parse("ROOT\tA\nA\tB\n").unwrap();
        let vocab = Vocabulary::build(&h, ["x", "y"]);
        let mut cfg = ModelConfig::new(vocab.len(), vocab.decoder_size());
        cfg.d_model = 8;
        cfg.heads = 2;
        cfg.d_ff = 8;
        cfg.blocks = 1;
        let model = Model::new(cfg, 5).unwrap();
        Checkpoint {
            model,
            vocab,
            hierarchy: h,
            format: TargetFormat::Flat,
            meta: BTreeMap::from([("epoch".to_string(), "2".to_string())]),
        }
    }

    fn bytes(c: &Checkpoint) -> Vec<u8> {
        let mut buf = Vec::new();
        c.write(&mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut c = sample();
        let e = c.model.embedding_id();
        c.model.params_mut().get_mut(e)[[0, 0]] = f64::MIN_POSITIVE / 3.0;
        c.model.params_mut().get_mut(e)[[0, 1]] = -0.0;
        let buf = bytes(&c);
        let back = Checkpoint::read(buf.as_slice()).unwrap();
        assert_eq!(back.format, TargetFormat::Flat);
        assert_eq!(back.meta["epoch"], "2");
        assert_eq!(back.vocab, c.vocab);
        assert_eq!(back.model.config(), c.model.config());
        for ((n1, a), (n2, b)) in c.model.params().iter().zip(back.model.params().iter()) {
            assert_eq!(n1, n2);
            let bits = |m: &Array2<f64>| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(bytes(&back), buf);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let buf = bytes(&sample());
        assert!(matches!(Checkpoint::read(&b"nope"[..]), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::read(&buf[..buf.len() - 3]), Err(Error::Checkpoint(_))));
        let mut extra = buf.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::read(extra.as_slice()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn hierarchy_check() {
        let c = sample();
        c.check_hierarchy(&LabelHierarchy::parse("ROOT\tA\nA\tB\n").unwrap()).unwrap();
        assert!(c.check_hierarchy(&LabelHierarchy::parse("ROOT\tA\n").unwrap()).is_err());
    }
}
