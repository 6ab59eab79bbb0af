//! Multi-level label sequences and the token vocabulary.
//!
//! A consistent label set is serialized breadth-first: labels of one level
//! are joined by `_`, levels are separated by `/`, and the sequence ends
//! with `EOS`. `parse_sequence` inverts this for arbitrary model output.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hierarchy::{LabelHierarchy, LabelId, LabelSet};

pub const INTRA: &str = "_";
pub const INTER: &str = "/";
pub const EOS: &str = "EOS";
pub const PAD: &str = "PAD";
pub const BOS: &str = "BOS";
pub const UNK: &str = "UNK";

pub type TokenId = usize;

pub const PAD_ID: TokenId = 0;
pub const BOS_ID: TokenId = 1;
pub const EOS_ID: TokenId = 2;
pub const UNK_ID: TokenId = 3;
pub const INTRA_ID: TokenId = 4;
pub const INTER_ID: TokenId = 5;
/// First id assigned to a hierarchy label.
pub const FIRST_LABEL_ID: TokenId = 6;

const RESERVED: [&str; 6] = [PAD, BOS, EOS, UNK, INTRA, INTER];

/// Default encoder input limit.
pub const DEFAULT_MAX_SRC_LEN: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SeqToken {
    Label(LabelId),
    /// `_`
    Intra,
    /// `/`
    Inter,
    Eos,
}

impl SeqToken {
    pub fn is_label(self) -> bool {
        matches!(self, SeqToken::Label(_))
    }

    pub fn is_symbol(self) -> bool {
        !self.is_label()
    }
}

/// How gold label sets are turned into decoder targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TargetFormat {
    /// Breadth-first levels with `_` and `/`.
    #[default]
    Hierarchical,
    /// Unordered set joined by `_` only; the no-hierarchy ablation.
    Flat,
}

impl TargetFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetFormat::Hierarchical => "hierarchical",
            TargetFormat::Flat => "flat",
        }
    }
}

impl std::str::FromStr for TargetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hierarchical" => Ok(TargetFormat::Hierarchical),
            "flat" => Ok(TargetFormat::Flat),
            other => Err(Error::Config(format!("unknown target format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiLevelSequence {
    tokens: Vec<SeqToken>,
    levels: Vec<usize>,
}

impl MultiLevelSequence {
    pub fn tokens(&self) -> &[SeqToken] {
        &self.tokens
    }

    /// Level of each token. Separators carry the level of the group they
    /// close, `EOS` the last level.
    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Position of a label token, if present.
    pub fn position(&self, label: LabelId) -> Option<usize> {
        self.tokens.iter().position(|&t| t == SeqToken::Label(label))
    }

    pub fn labels(&self) -> LabelSet {
        self.tokens
            .iter()
            .filter_map(|t| match t {
                SeqToken::Label(l) => Some(*l),
                _ => None,
            })
            .collect()
    }

    pub fn to_strings<'h>(&self, h: &'h LabelHierarchy) -> Vec<&'h str> {
        self.tokens
            .iter()
            .map(|t| match *t {
                SeqToken::Label(l) => h.name(l),
                SeqToken::Intra => INTRA,
                SeqToken::Inter => INTER,
                SeqToken::Eos => EOS,
            })
            .collect()
    }

    /// Decoder-side ids.
    pub fn to_ids(&self) -> Vec<TokenId> {
        self.tokens.iter().map(|&t| token_id(t)).collect()
    }
}

pub fn token_id(t: SeqToken) -> TokenId {
    match t {
        SeqToken::Label(l) => FIRST_LABEL_ID + l.0,
        SeqToken::Intra => INTRA_ID,
        SeqToken::Inter => INTER_ID,
        SeqToken::Eos => EOS_ID,
    }
}

/// Breadth-first flattening of a consistent label set.
pub fn bfs_flatten(h: &LabelHierarchy, set: &LabelSet) -> Result<MultiLevelSequence> {
    if let Some(bad) = set.iter().find(|l| l.0 >= h.len()) {
        return Err(Error::UnknownLabel(bad.to_string()));
    }
    h.check_consistent(set)?;

    let mut tokens = Vec::with_capacity(2 * set.len() + 1);
    let mut levels = Vec::with_capacity(2 * set.len() + 1);
    let mut level: Vec<LabelId> = h.roots().iter().copied().filter(|r| set.contains(r)).collect();
    let mut depth: usize = 1;
    while !level.is_empty() {
        if depth > 1 {
            tokens.push(SeqToken::Inter);
            levels.push(depth - 1);
        }
        for (k, &l) in level.iter().enumerate() {
            if k > 0 {
                tokens.push(SeqToken::Intra);
                levels.push(depth);
            }
            tokens.push(SeqToken::Label(l));
            levels.push(depth);
        }
        level = level
            .iter()
            .flat_map(|&p| h.children(p).iter().copied())
            .filter(|c| set.contains(c))
            .collect();
        depth += 1;
    }
    tokens.push(SeqToken::Eos);
    levels.push(depth.saturating_sub(1).max(1));
    Ok(MultiLevelSequence { tokens, levels })
}

/// Joins labels with `_` in the given order, then `EOS`. Every label is
/// reported at level 1.
pub fn flat_sequence(labels: &[LabelId]) -> MultiLevelSequence {
    let mut tokens = Vec::with_capacity(2 * labels.len() + 1);
    for (k, &l) in labels.iter().enumerate() {
        if k > 0 {
            tokens.push(SeqToken::Intra);
        }
        tokens.push(SeqToken::Label(l));
    }
    tokens.push(SeqToken::Eos);
    let levels = vec![1; tokens.len()];
    MultiLevelSequence { tokens, levels }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParseDiagnostics {
    pub unknown: Vec<String>,
    pub duplicates: Vec<String>,
    /// `(label, group index, hierarchy depth)`.
    pub level_mismatch: Vec<(String, usize, usize)>,
    /// Separators with no label before them, e.g. `A _ _ B`.
    pub empty_slots: usize,
    /// Labels written back to back without a separator.
    pub missing_separators: usize,
    pub missing_eos: bool,
}

impl ParseDiagnostics {
    pub fn is_clean(&self) -> bool {
        self.unknown.is_empty()
            && self.duplicates.is_empty()
            && self.level_mismatch.is_empty()
            && self.empty_slots == 0
            && self.missing_separators == 0
            && !self.missing_eos
    }

    /// Tokens that were dropped from the predicted set.
    pub fn malformed_tokens(&self) -> usize {
        self.unknown.len() + self.duplicates.len()
    }
}

/// Parses a token sequence back into a label set. Never fails; every
/// anomaly is recorded in the diagnostics. Tokens after the first `EOS` are
/// ignored. With [`TargetFormat::Flat`] `/` is treated like `_` and levels
/// are not checked.
pub fn parse_sequence<S: AsRef<str>>(
    h: &LabelHierarchy,
    tokens: &[S],
    format: TargetFormat,
) -> (LabelSet, ParseDiagnostics) {
    let mut set = LabelSet::new();
    let mut diag = ParseDiagnostics::default();
    let mut group = 1usize;
    let mut slot_filled = false;
    let mut saw_eos = false;
    let mut seen_any = false;

    for tok in tokens {
        let tok = tok.as_ref();
        match tok {
            EOS => {
                saw_eos = true;
                break;
            }
            INTRA | INTER => {
                if !slot_filled {
                    diag.empty_slots += 1;
                }
                if tok == INTER && format == TargetFormat::Hierarchical {
                    group += 1;
                }
                slot_filled = false;
            }
            name => {
                if slot_filled {
                    diag.missing_separators += 1;
                }
                slot_filled = true;
                seen_any = true;
                match h.id(name) {
                    None => diag.unknown.push(name.to_string()),
                    Some(l) => {
                        if !set.insert(l) {
                            diag.duplicates.push(name.to_string());
                            continue;
                        }
                        if format == TargetFormat::Hierarchical && h.depth(l) != group {
                            diag.level_mismatch.push((name.to_string(), group, h.depth(l)));
                        }
                    }
                }
            }
        }
    }
    // A trailing separator right before EOS leaves an empty slot.
    if seen_any && !slot_filled && saw_eos {
        diag.empty_slots += 1;
    }
    diag.missing_eos = !saw_eos;
    (set, diag)
}

/// Token table shared by encoder and decoder.
///
/// Ids `0..6` are `PAD BOS EOS UNK _ /`, followed by one id per hierarchy
/// label (in hierarchy order), followed by text words. The decoder only
/// ever predicts ids below [`Vocabulary::decoder_size`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    label_count: usize,
}

impl Vocabulary {
    /// Builds from the hierarchy and a word stream. Words are lowercased and
    /// sorted so the numbering does not depend on corpus order.
    pub fn build<'a>(h: &LabelHierarchy, words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(h.ids().map(|l| h.name(l).to_string()));
        let mut index: HashMap<String, TokenId> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let distinct: BTreeSet<String> = words.into_iter().map(str::to_lowercase).collect();
        for w in distinct {
            if !index.contains_key(&w) {
                index.insert(w.clone(), tokens.len());
                tokens.push(w);
            }
        }
        Vocabulary {
            tokens,
            index,
            label_count: h.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of ids the decoder can emit: reserved symbols plus labels.
    pub fn decoder_size(&self) -> usize {
        FIRST_LABEL_ID + self.label_count
    }

    pub fn label_count(&self) -> usize {
        self.label_count
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Lowercases, splits on whitespace, maps unknown words to `UNK` and
    /// truncates to `max_len` tokens.
    pub fn encode_text(&self, text: &str, max_len: usize) -> Vec<TokenId> {
        text.split_whitespace()
            .take(max_len)
            .map(|w| {
                let w = w.to_lowercase();
                self.index.get(&w).copied().unwrap_or(UNK_ID)
            })
            .collect()
    }

    /// Out-of-range ids decode to `UNK`.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i).unwrap_or(UNK)).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(&format!("{i}\t{t}\n"));
        }
        out
    }

    /// Parses an `id<TAB>token` table and checks it against the hierarchy.
    pub fn from_tsv(source: &str, h: &LabelHierarchy) -> Result<Self> {
        let mut tokens: Vec<String> = Vec::new();
        for (lineno, line) in source.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (id, tok) = line.split_once('\t').ok_or_else(|| {
                Error::VocabMismatch(format!("line {}: expected `id<TAB>token`", lineno + 1))
            })?;
            let id: usize = id.trim().parse().map_err(|_| {
                Error::VocabMismatch(format!("line {}: bad id `{id}`", lineno + 1))
            })?;
            if id != tokens.len() {
                return Err(Error::VocabMismatch(format!(
                    "line {}: ids must be dense and ascending, got {id}",
                    lineno + 1
                )));
            }
            tokens.push(tok.to_string());
        }
        Self::from_tokens(tokens, h)
    }

    pub fn from_tokens(tokens: Vec<String>, h: &LabelHierarchy) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::VocabMismatch(format!("id {i} must be `{r}`")));
            }
        }
        for l in h.ids() {
            let id = FIRST_LABEL_ID + l.0;
            if tokens.get(id).map(String::as_str) != Some(h.name(l)) {
                return Err(Error::VocabMismatch(format!(
                    "id {id} must be label `{}`",
                    h.name(l)
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::VocabMismatch(format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocabulary {
            tokens,
            index,
            label_count: h.len(),
        })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, h: &LabelHierarchy) -> Result<Self> {
        Self::from_tsv(&std::fs::read_to_string(path)?, h)
    }
}

impl fmt::Display for MultiLevelSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            match t {
                SeqToken::Label(l) => write!(f, "{l}")?,
                SeqToken::Intra => f.write_str(INTRA)?,
                SeqToken::Inter => f.write_str(INTER)?,
                SeqToken::Eos => f.write_str(EOS)?,
            }
        }
        Ok(())
    }
}
