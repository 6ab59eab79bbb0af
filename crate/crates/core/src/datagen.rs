//! Synthetic taxonomies and text corpora with identifiable label signal.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_corpus, Record};
use crate::error::{Error, Result};
use crate::hierarchy::{LabelHierarchy, LabelId, LabelSet, VIRTUAL_ROOT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Children per node at each level; its length is the number of levels.
    pub branching: Vec<usize>,
    /// Size of the word pool shared by signal and noise words.
    pub vocab_size: usize,
    /// Words owned exclusively by each label.
    pub signal_words: usize,
    /// Signal words emitted per gold label occurrence (drawn with replacement).
    pub words_per_label: usize,
    /// Noise words emitted per signal word.
    pub noise_rate: f64,
    /// Fraction of samples that draw more than one path.
    pub multi_path_rate: f64,
    pub max_paths: usize,
    /// Probability that a path stops above the leaves.
    pub truncation_rate: f64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            branching: vec![4, 3, 2],
            vocab_size: 500,
            signal_words: 3,
            words_per_label: 2,
            noise_rate: 1.0,
            multi_path_rate: 0.4,
            max_paths: 3,
            truncation_rate: 0.1,
            train: 2000,
            val: 200,
            test: 400,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn levels(&self) -> usize {
        self.branching.len()
    }

    pub fn label_count(&self) -> usize {
        let mut width = 1;
        let mut total = 0;
        for &b in &self.branching {
            width *= b;
            total += width;
        }
        total
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::SynthSpec(m));
        if self.levels() < 2 {
            return bad(format!("need at least 2 levels, got {}", self.levels()));
        }
        if self.branching.contains(&0) {
            return bad("branching factors must be positive".into());
        }
        if self.signal_words == 0 || self.words_per_label == 0 {
            return bad("each label needs at least one signal word".into());
        }
        if !(1..=3).contains(&self.max_paths) {
            return bad(format!("max_paths must be 1..=3, got {}", self.max_paths));
        }
        for (name, p) in [
            ("multi_path_rate", self.multi_path_rate),
            ("truncation_rate", self.truncation_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.noise_rate >= 0.0 && self.noise_rate.is_finite()) {
            return bad(format!("noise_rate must be non-negative, got {}", self.noise_rate));
        }
        let signal = self.label_count() * self.signal_words;
        let need = signal + usize::from(self.noise_rate > 0.0);
        if self.vocab_size < need {
            return bad(format!(
                "vocabulary of {} words cannot hold {} disjoint signal words{}",
                self.vocab_size,
                signal,
                if self.noise_rate > 0.0 { " plus noise" } else { "" }
            ));
        }
        if self.train == 0 {
            return bad("training split must be non-empty".into());
        }
        Ok(())
    }
}

fn word(i: usize) -> String {
    format!("w{i:04}")
}

/// Names follow the path: `c0`, `c0.1`, `c0.1.0`.
pub fn synth_hierarchy(branching: &[usize]) -> Result<LabelHierarchy> {
    let mut edges = String::new();
    let mut frontier = vec![(VIRTUAL_ROOT.to_string(), String::from("c"))];
    for &b in branching {
        let mut next = Vec::new();
        for (parent, prefix) in &frontier {
            for c in 0..b {
                let name = format!("{prefix}{c}");
                let _ = writeln!(edges, "{parent}\t{name}");
                next.push((name.clone(), format!("{name}.")));
            }
        }
        frontier = next;
    }
    LabelHierarchy::parse(&edges)
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub hierarchy: LabelHierarchy,
    pub train: Vec<Record>,
    pub val: Vec<Record>,
    pub test: Vec<Record>,
}

pub const HIERARCHY_FILE: &str = "hierarchy.tsv";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const TEST_FILE: &str = "test.jsonl";

impl SynthData {
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(HIERARCHY_FILE), self.hierarchy.to_edge_list())?;
        for (file, recs) in [(TRAIN_FILE, &self.train), (VAL_FILE, &self.val), (TEST_FILE, &self.test)] {
            let f = std::io::BufWriter::new(std::fs::File::create(dir.join(file))?);
            write_corpus(recs, f)?;
        }
        Ok(())
    }
}

struct Sampler<'a> {
    spec: &'a SynthSpec,
    h: &'a LabelHierarchy,
    leaves: Vec<LabelId>,
    noise: Vec<String>,
}

impl Sampler<'_> {
    fn gold(&self, rng: &mut ChaCha8Rng) -> LabelSet {
        let paths = if self.spec.max_paths > 1 && rng.random_bool(self.spec.multi_path_rate) {
            rng.random_range(2..=self.spec.max_paths)
        } else {
            1
        };
        let chosen: Vec<LabelId> = self.leaves.choose_multiple(rng, paths).copied().collect();
        let mut gold = LabelSet::new();
        for leaf in chosen {
            let mut path = self.h.ancestors(leaf);
            path.push(leaf);
            if rng.random_bool(self.spec.truncation_rate) {
                let keep = rng.random_range(1..path.len());
                path.truncate(keep);
            }
            gold.extend(path);
        }
        gold
    }

    fn text(&self, gold: &LabelSet, rng: &mut ChaCha8Rng) -> String {
        let mut words: Vec<String> = Vec::new();
        for l in gold {
            let base = l.0 * self.spec.signal_words;
            for _ in 0..self.spec.words_per_label {
                words.push(word(base + rng.random_range(0..self.spec.signal_words)));
            }
        }
        if !self.noise.is_empty() {
            let n = (words.len() as f64 * self.spec.noise_rate).round() as usize;
            for _ in 0..n {
                words.push(self.noise[rng.random_range(0..self.noise.len())].clone());
            }
        }
        words.shuffle(rng);
        words.join(" ")
    }
}

/// Builds the taxonomy and all three splits. Same spec, same output.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let h = synth_hierarchy(&spec.branching)?;
    let signal = h.len() * spec.signal_words;
    let sampler = Sampler {
        spec,
        h: &h,
        leaves: h.ids().filter(|&l| h.is_leaf(l)).collect(),
        noise: (signal..spec.vocab_size).map(word).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut split = |n: usize| -> Vec<Record> {
        (0..n)
            .map(|_| {
                let gold = sampler.gold(&mut rng);
                let text = sampler.text(&gold, &mut rng);
                Record {
                    text,
                    labels: h.names_of(&gold).into_iter().map(str::to_string).collect(),
                }
            })
            .collect()
    };
    let train = split(spec.train);
    let val = split(spec.val);
    let test = split(spec.test);
    Ok(SynthData {
        hierarchy: h.clone(),
        train,
        val,
        test,
    })
}

/// Label-occurrence counts and set sizes for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub samples: usize,
    /// Occurrences of labels at depth `i + 1`.
    pub per_level: Vec<usize>,
    /// Distinct labels seen at depth `i + 1`.
    pub distinct_per_level: Vec<usize>,
    pub avg_labels: f64,
    /// Samples whose gold set has more than one leaf-most label.
    pub multi_path: usize,
}

pub fn corpus_stats(records: &[Record], h: &LabelHierarchy) -> Result<CorpusStats> {
    let levels = h.max_depth();
    let mut per_level = vec![0; levels];
    let mut distinct = vec![BTreeSet::new(); levels];
    let mut total = 0;
    let mut multi = 0;
    for r in records {
        let set = h.label_set(r.labels.iter().map(String::as_str))?;
        total += set.len();
        for &l in &set {
            per_level[h.depth(l) - 1] += 1;
            distinct[h.depth(l) - 1].insert(l);
        }
        let ends = set
            .iter()
            .filter(|&&l| h.children(l).iter().all(|c| !set.contains(c)))
            .count();
        if ends > 1 {
            multi += 1;
        }
    }
    Ok(CorpusStats {
        samples: records.len(),
        per_level,
        distinct_per_level: distinct.iter().map(BTreeSet::len).collect(),
        avg_labels: if records.is_empty() { 0.0 } else { total as f64 / records.len() as f64 },
        multi_path: multi,
    })
}

/// A fixed-width table, one row per split.
pub fn stats_table(rows: &[(&str, CorpusStats)]) -> String {
    let levels = rows.iter().map(|(_, s)| s.per_level.len()).max().unwrap_or(0);
    let mut out = format!("{:<8}{:>9}{:>11}{:>12}", "split", "samples", "avg|L|", "multi-path");
    for d in 1..=levels {
        let _ = write!(out, "{:>10}", format!("level{d}"));
    }
    out.push('\n');
    for (name, s) in rows {
        let _ = write!(out, "{:<8}{:>9}{:>11.2}{:>12}", name, s.samples, s.avg_labels, s.multi_path);
        for d in 0..levels {
            let _ = write!(out, "{:>10}", s.per_level.get(d).copied().unwrap_or(0));
        }
        out.push('\n');
    }
    out
}
