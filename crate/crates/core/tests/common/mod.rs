//! Brute-force oracles and random instance builders shared by the
//! integration suites.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;

use pathmask_core::{LabelHierarchy, LabelSet};

/// A random forest of at most `max_labels` labels and `max_depth` levels,
/// as an edge list plus the child → parent map it encodes.
pub struct RandomTree {
    pub edges: String,
    pub parent: BTreeMap<String, Option<String>>,
}

pub fn random_tree<R: Rng>(rng: &mut R, max_labels: usize, max_depth: usize) -> RandomTree {
    let n = rng.random_range(1..=max_labels);
    let mut depth: Vec<usize> = Vec::new();
    let mut parent = BTreeMap::new();
    let mut lines = Vec::new();
    for i in 0..n {
        let candidates: Vec<usize> = (0..i).filter(|&p| depth[p] < max_depth).collect();
        let name = format!("n{i}");
        if candidates.is_empty() || rng.random_bool(0.3) {
            depth.push(1);
            lines.push(format!("ROOT\t{name}"));
            parent.insert(name, None);
        } else {
            let p = candidates[rng.random_range(0..candidates.len())];
            depth.push(depth[p] + 1);
            lines.push(format!("n{p}\t{name}"));
            parent.insert(name, Some(format!("n{p}")));
        }
    }
    // file order is the sibling order; shuffle to exercise it without
    // breaking parent-before-child, which the loader does not require
    lines.shuffle(rng);
    RandomTree {
        edges: lines.join("\n") + "\n",
        parent,
    }
}

/// A random non-empty ancestor-closed subset.
pub fn random_consistent_set<R: Rng>(rng: &mut R, h: &LabelHierarchy) -> LabelSet {
    let ids: Vec<_> = h.ids().collect();
    let mut seed = LabelSet::new();
    let k = rng.random_range(1..=ids.len().min(4));
    for _ in 0..k {
        seed.insert(ids[rng.random_range(0..ids.len())]);
    }
    h.closure(&seed)
}

/// Ancestor names of `name`, from the raw parent map.
pub fn oracle_ancestors(parent: &BTreeMap<String, Option<String>>, name: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut cur = parent.get(name).cloned().flatten();
    while let Some(p) = cur {
        cur = parent.get(&p).cloned().flatten();
        out.insert(p);
    }
    out
}

fn is_symbol(t: &str) -> bool {
    matches!(t, "_" | "/" | "EOS")
}

/// The mask case analysis applied cell by cell to a token string sequence.
pub fn oracle_mask(parent: &BTreeMap<String, Option<String>>, tokens: &[&str]) -> Vec<Vec<u8>> {
    let n = tokens.len();
    // columns of token k that rule (a) marks: its ancestors and the
    // separator right after each of them
    let ancestor_cols = |k: usize| -> BTreeSet<usize> {
        let mut cols = BTreeSet::new();
        if is_symbol(tokens[k]) {
            return cols;
        }
        let anc = oracle_ancestors(parent, tokens[k]);
        for j in 0..k {
            if anc.contains(tokens[j]) {
                cols.insert(j);
            }
            if j > 0 && is_symbol(tokens[j]) && tokens[j] != "EOS" && anc.contains(tokens[j - 1]) {
                cols.insert(j);
            }
        }
        cols
    };
    let mut m = vec![vec![0u8; n]; n];
    for i in 0..n {
        for (j, cell) in m[i].iter_mut().enumerate().take(i + 1) {
            let on = if j == i {
                true
            } else if !is_symbol(tokens[i]) {
                ancestor_cols(i).contains(&j)
            } else {
                j + 1 == i || ancestor_cols(i - 1).contains(&j)
            };
            *cell = u8::from(on);
        }
    }
    m
}

/// Per-label TP/FP/FN by scanning every (sample, label) decision.
pub fn oracle_counts(gold: &[LabelSet], pred: &[LabelSet], k: usize) -> Vec<(usize, usize, usize)> {
    let mut out = vec![(0, 0, 0); k];
    for (g, p) in gold.iter().zip(pred) {
        for (l, c) in out.iter_mut().enumerate() {
            let id = pathmask_core::LabelId(l);
            match (g.contains(&id), p.contains(&id)) {
                (true, true) => c.0 += 1,
                (false, true) => c.1 += 1,
                (true, false) => c.2 += 1,
                _ => {}
            }
        }
    }
    out
}

pub fn oracle_f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn oracle_micro(gold: &[LabelSet], pred: &[LabelSet], k: usize) -> f64 {
    let (tp, fp, fn_) = oracle_counts(gold, pred, k)
        .into_iter()
        .fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
    oracle_f1(tp, fp, fn_)
}

pub fn oracle_macro(gold: &[LabelSet], pred: &[LabelSet], k: usize) -> f64 {
    oracle_counts(gold, pred, k)
        .into_iter()
        .map(|(a, b, c)| oracle_f1(a, b, c))
        .sum::<f64>()
        / k as f64
}

/// A prediction is inconsistent if some label's parent is missing.
pub fn oracle_inconsistency(pred: &[LabelSet], h: &LabelHierarchy) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let bad = pred
        .iter()
        .filter(|p| p.iter().any(|&l| h.parent(l).is_some_and(|q| !p.contains(&q))))
        .count();
    bad as f64 / pred.len() as f64
}

/// A random subset of all labels (not necessarily consistent).
pub fn random_set<R: Rng>(rng: &mut R, k: usize) -> LabelSet {
    (0..k)
        .filter(|_| rng.random_bool(0.3))
        .map(pathmask_core::LabelId)
        .collect()
}
