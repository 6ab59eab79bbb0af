//! Line-delimited JSON corpora and their conversion into model inputs.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{LabelHierarchy, LabelId, LabelSet};
use crate::labelseq::{bfs_flatten, flat_sequence, MultiLevelSequence, TargetFormat, TokenId, Vocabulary};
use crate::pamm::{build_mask, PathAdaptiveMask};

/// One corpus line: `{"text": "...", "labels": ["...", ...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub text: String,
    pub labels: Vec<String>,
}

pub fn parse_corpus(source: &str) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::CorpusFormat {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let mut text = String::new();
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        text.push_str(&line);
    }
    parse_corpus(&text)
}

pub fn write_corpus<W: Write>(records: &[Record], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// A sample ready for training or evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub src: Vec<TokenId>,
    pub gold: LabelSet,
    pub sequence: MultiLevelSequence,
    /// Decoder target ids (the flattened sequence, `EOS` included).
    pub target: Vec<TokenId>,
    /// Present for hierarchical targets only.
    pub mask: Option<PathAdaptiveMask>,
}

fn gold_set(h: &LabelHierarchy, rec: &Record, line: usize) -> Result<LabelSet> {
    let mut set = LabelSet::new();
    for name in &rec.labels {
        let id = h.id(name).ok_or_else(|| Error::CorpusFormat {
            line,
            msg: format!("unknown label `{name}`"),
        })?;
        set.insert(id);
    }
    if let Some((l, p)) = h.first_orphan(&set) {
        return Err(Error::CorpusFormat {
            line,
            msg: format!("label `{}` lacks its parent `{}`", h.name(l), h.name(p)),
        });
    }
    Ok(set)
}

/// Encodes text and targets. Flat targets take a per-sample shuffled label
/// order drawn from `seed`, so no ordering is learnable.
pub fn prepare(
    records: &[Record],
    h: &LabelHierarchy,
    vocab: &Vocabulary,
    format: TargetFormat,
    max_src_len: usize,
    seed: u64,
) -> Result<Vec<Example>> {
    records
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let gold = gold_set(h, rec, i + 1)?;
            let src = vocab.encode_text(&rec.text, max_src_len);
            let (sequence, mask) = match format {
                TargetFormat::Hierarchical => {
                    let ml = bfs_flatten(h, &gold)?;
                    let mask = build_mask(h, &ml)?;
                    (ml, Some(mask))
                }
                TargetFormat::Flat => {
                    let mut order: Vec<LabelId> = gold.iter().copied().collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    order.shuffle(&mut rng);
                    (flat_sequence(&order), None)
                }
            };
            Ok(Example {
                src,
                target: sequence.to_ids(),
                gold,
                sequence,
                mask,
            })
        })
        .collect()
}

/// All whitespace-separated words of a corpus, for vocabulary building.
pub fn words(records: &[Record]) -> impl Iterator<Item = &str> {
    records.iter().flat_map(|r| r.text.split_whitespace())
}
