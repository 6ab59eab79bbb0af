//! Greedy decoding and hierarchical classification metrics.
//!
//! Macro-F1 averages over every label in the hierarchy, including labels
//! that never occur in gold or predictions (those score 0).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use ndarray::Array2;
use rayon::prelude::*;

use crate::autograd::Tape;
use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::hierarchy::{LabelHierarchy, LabelSet};
use crate::labelseq::{parse_sequence, ParseDiagnostics, TargetFormat, TokenId, Vocabulary, BOS, BOS_ID, EOS_ID};
use crate::model::{Dropout, Model};

/// Repeatedly appends the arg-max token (lowest id on ties) until `EOS` or
/// `max_len` generated tokens. The result excludes `BOS`.
pub fn greedy_decode(model: &Model, src: &[TokenId], max_len: usize) -> Result<Vec<TokenId>> {
    let limit = max_len.min(model.config().max_tgt_len);
    let mut tape = Tape::new(model.params());
    let memory = model.encode(&mut tape, src, &mut Dropout::off())?;
    let memory_value = tape.value(memory).clone();
    drop(tape);

    let mut input = vec![BOS_ID];
    let mut out = Vec::new();
    while out.len() < limit {
        let mut tape = Tape::new(model.params());
        let mem = tape.input(memory_value.clone(), false);
        let dec = model.decode(&mut tape, &input, mem, &mut Dropout::off())?;
        let logits = tape.value(dec.logits);
        let last = logits.row(logits.nrows() - 1);
        let mut best = 0;
        for (id, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = id;
            }
        }
        out.push(best);
        if best == EOS_ID {
            break;
        }
        input.push(best);
    }
    Ok(out)
}

fn check_aligned(gold: &[LabelSet], pred: &[LabelSet]) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(Error::Shape(format!(
            "{} gold sets vs {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    Ok(())
}

fn f1(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// Global TP/FP/FN over all (sample, label) decisions.
pub fn micro_f1(gold: &[LabelSet], pred: &[LabelSet]) -> Result<f64> {
    check_aligned(gold, pred)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        let hit = g.intersection(p).count();
        tp += hit;
        fp += p.len() - hit;
        fn_ += g.len() - hit;
    }
    Ok(f1(tp, fp, fn_).2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelScore {
    pub label: String,
    pub depth: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-label counts and scores for every hierarchy label, in hierarchy
/// order.
pub fn per_label_scores(gold: &[LabelSet], pred: &[LabelSet], h: &LabelHierarchy) -> Result<Vec<LabelScore>> {
    check_aligned(gold, pred)?;
    let k = h.len();
    let (mut tp, mut fp, mut fn_) = (vec![0; k], vec![0; k], vec![0; k]);
    for (g, p) in gold.iter().zip(pred) {
        for l in g.union(p) {
            if l.0 >= k {
                return Err(Error::UnknownLabel(l.to_string()));
            }
            match (g.contains(l), p.contains(l)) {
                (true, true) => tp[l.0] += 1,
                (false, true) => fp[l.0] += 1,
                (true, false) => fn_[l.0] += 1,
                (false, false) => {}
            }
        }
    }
    Ok(h.ids()
        .map(|l| {
            let (precision, recall, f) = f1(tp[l.0], fp[l.0], fn_[l.0]);
            LabelScore {
                label: h.name(l).to_string(),
                depth: h.depth(l),
                tp: tp[l.0],
                fp: fp[l.0],
                fn_: fn_[l.0],
                precision,
                recall,
                f1: f,
            }
        })
        .collect())
}

/// Unweighted mean of per-label F1 over all labels of the hierarchy.
pub fn macro_f1(gold: &[LabelSet], pred: &[LabelSet], h: &LabelHierarchy) -> Result<f64> {
    let scores = per_label_scores(gold, pred, h)?;
    Ok(scores.iter().map(|s| s.f1).sum::<f64>() / scores.len() as f64)
}

/// Macro-F1 restricted to the labels of each depth.
pub fn per_level_macro_f1(gold: &[LabelSet], pred: &[LabelSet], h: &LabelHierarchy) -> Result<BTreeMap<usize, f64>> {
    let scores = per_label_scores(gold, pred, h)?;
    Ok(level_means(&scores))
}

fn level_means(scores: &[LabelScore]) -> BTreeMap<usize, f64> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for s in scores {
        let e = acc.entry(s.depth).or_insert((0.0, 0));
        e.0 += s.f1;
        e.1 += 1;
    }
    acc.into_iter().map(|(d, (sum, n))| (d, sum / n as f64)).collect()
}

/// Fraction of predictions with a label whose ancestors are not all
/// predicted. Zero for an empty list.
pub fn inconsistency_rate(pred: &[LabelSet], h: &LabelHierarchy) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let bad = pred.iter().filter(|p| !h.is_consistent(p)).count();
    bad as f64 / pred.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub per_level_macro_f1: BTreeMap<usize, f64>,
    pub inconsistency_rate: f64,
    /// Unknown or duplicate label tokens over all emitted label tokens.
    pub malformed_token_rate: f64,
    /// Fraction of outputs with any parse diagnostic.
    pub unclean_output_rate: f64,
    pub per_label: Vec<LabelScore>,
}

impl EvalReport {
    pub fn from_sets(gold: &[LabelSet], pred: &[LabelSet], diags: &[ParseDiagnostics], h: &LabelHierarchy) -> Result<Self> {
        let per_label = per_label_scores(gold, pred, h)?;
        let emitted: usize = pred.iter().map(LabelSet::len).sum::<usize>()
            + diags.iter().map(ParseDiagnostics::malformed_tokens).sum::<usize>();
        let malformed: usize = diags.iter().map(ParseDiagnostics::malformed_tokens).sum();
        let unclean = diags.iter().filter(|d| !d.is_clean()).count();
        Ok(EvalReport {
            samples: gold.len(),
            micro_f1: micro_f1(gold, pred)?,
            macro_f1: per_label.iter().map(|s| s.f1).sum::<f64>() / per_label.len() as f64,
            per_level_macro_f1: level_means(&per_label),
            inconsistency_rate: inconsistency_rate(pred, h),
            malformed_token_rate: if emitted == 0 { 0.0 } else { malformed as f64 / emitted as f64 },
            unclean_output_rate: if diags.is_empty() { 0.0 } else { unclean as f64 / diags.len() as f64 },
            per_label,
        })
    }

    /// `key = value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "samples = {}", self.samples);
        let _ = writeln!(s, "micro_f1 = {:.6}", self.micro_f1);
        let _ = writeln!(s, "macro_f1 = {:.6}", self.macro_f1);
        for (level, v) in &self.per_level_macro_f1 {
            let _ = writeln!(s, "macro_f1.level{level} = {v:.6}");
        }
        let _ = writeln!(s, "inconsistency_rate = {:.6}", self.inconsistency_rate);
        let _ = writeln!(s, "malformed_token_rate = {:.6}", self.malformed_token_rate);
        let _ = writeln!(s, "unclean_output_rate = {:.6}", self.unclean_output_rate);
        s
    }

    pub fn write_label_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["label", "depth", "tp", "fp", "fn", "precision", "recall", "f1"])?;
        for s in &self.per_label {
            w.write_record([
                s.label.clone(),
                s.depth.to_string(),
                s.tp.to_string(),
                s.fp.to_string(),
                s.fn_.to_string(),
                format!("{:.6}", s.precision),
                format!("{:.6}", s.recall),
                format!("{:.6}", s.f1),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub tokens: Vec<TokenId>,
    pub labels: LabelSet,
    pub diagnostics: ParseDiagnostics,
}

/// Token strings for decoder ids: labels by name, symbols by their text.
pub fn decoder_tokens(h: &LabelHierarchy, ids: &[TokenId]) -> Vec<String> {
    use crate::labelseq::{FIRST_LABEL_ID, INTER_ID, INTRA_ID};
    ids.iter()
        .map(|&id| match id {
            EOS_ID => crate::labelseq::EOS.to_string(),
            INTRA_ID => crate::labelseq::INTRA.to_string(),
            INTER_ID => crate::labelseq::INTER.to_string(),
            BOS_ID => BOS.to_string(),
            id if id >= FIRST_LABEL_ID && id - FIRST_LABEL_ID < h.len() => {
                h.name(crate::hierarchy::LabelId(id - FIRST_LABEL_ID)).to_string()
            }
            other => format!("<{other}>"),
        })
        .collect()
}

/// Decodes every example greedily, parses the output and scores it.
/// Per-sample work runs on the current rayon pool; results keep input
/// order.
pub fn evaluate(
    model: &Model,
    h: &LabelHierarchy,
    examples: &[Example],
    format: TargetFormat,
    max_len: usize,
) -> Result<(EvalReport, Vec<Prediction>)> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus("nothing to evaluate".into()));
    }
    let preds = examples
        .par_iter()
        .map(|ex| {
            let tokens = greedy_decode(model, &ex.src, max_len)?;
            let strings = decoder_tokens(h, &tokens);
            let (labels, diagnostics) = parse_sequence(h, &strings, format);
            Ok(Prediction {
                tokens,
                labels,
                diagnostics,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let gold: Vec<LabelSet> = examples.iter().map(|e| e.gold.clone()).collect();
    let pred: Vec<LabelSet> = preds.iter().map(|p| p.labels.clone()).collect();
    let diags: Vec<ParseDiagnostics> = preds.iter().map(|p| p.diagnostics.clone()).collect();
    Ok((EvalReport::from_sets(&gold, &pred, &diags, h)?, preds))
}

/// Which score matrix to export.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSelect {
    Head(usize),
    Mean,
}

/// Writes one decoder block's self-attention scores (a single head or the
/// head average) as CSV with token headers.
pub fn export_attention<W: Write, S: AsRef<str>>(
    scores: &[Vec<Array2<f64>>],
    tokens: &[S],
    block: usize,
    head: HeadSelect,
    out: W,
) -> Result<()> {
    let blk = scores
        .get(block)
        .ok_or_else(|| Error::Config(format!("block {block} out of range ({} blocks)", scores.len())))?;
    let matrix = match head {
        HeadSelect::Head(h) => blk
            .get(h)
            .cloned()
            .ok_or_else(|| Error::Config(format!("head {h} out of range ({} heads)", blk.len())))?,
        HeadSelect::Mean => {
            let first = blk.first().ok_or_else(|| Error::Config("block has no heads".into()))?;
            let mut acc = Array2::zeros(first.raw_dim());
            for s in blk {
                acc += s;
            }
            acc / blk.len() as f64
        }
    };
    if matrix.nrows() != tokens.len() || matrix.ncols() != tokens.len() {
        return Err(Error::Shape(format!(
            "{} tokens for a {:?} score matrix",
            tokens.len(),
            matrix.dim()
        )));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut head_row = vec![String::new()];
    head_row.extend(tokens.iter().map(|t| t.as_ref().to_string()));
    w.write_record(&head_row)?;
    for (i, row) in matrix.rows().into_iter().enumerate() {
        let mut rec = vec![tokens[i].as_ref().to_string()];
        rec.extend(row.iter().map(|v| format!("{v:.6}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Vocabulary tokens for a decoder input sequence, used as CSV headers.
pub fn input_headers(vocab: &Vocabulary, input: &[TokenId]) -> Vec<String> {
    vocab.decode(input).into_iter().map(str::to_string).collect()
}
