//! Path-adaptive mask matrices and the off-path attention mass they induce.
//!
//! For a label at position `i` the mask row keeps the label itself, each of
//! its hierarchy ancestors, and the separator right after every ancestor.
//! For a symbol at position `i` the row keeps the symbol, the token before
//! it, and that token's ancestor set. Everything else is off-path.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::hierarchy::LabelHierarchy;
use crate::labelseq::{MultiLevelSequence, SeqToken};

/// Which mask rows contribute to the regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PammRows {
    /// Every timestep, separators and `EOS` included.
    #[default]
    All,
    /// Only timesteps whose input is a label.
    Labels,
}

impl PammRows {
    pub fn as_str(self) -> &'static str {
        match self {
            PammRows::All => "all",
            PammRows::Labels => "labels",
        }
    }
}

impl std::str::FromStr for PammRows {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(PammRows::All),
            "labels" => Ok(PammRows::Labels),
            other => Err(Error::Config(format!("unknown pamm row policy `{other}`"))),
        }
    }
}

/// Lower-triangular 0/1 mask stored as the sorted on-path column set of
/// every row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathAdaptiveMask {
    rows: Vec<Vec<usize>>,
    label_row: Vec<bool>,
}

impl PathAdaptiveMask {
    /// Every causal column on-path; rows count as label rows.
    pub fn full(n: usize) -> Self {
        PathAdaptiveMask {
            rows: (0..n).map(|i| (0..=i).collect()).collect(),
            label_row: vec![true; n],
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// On-path columns of row `i`, ascending.
    pub fn path_index_set(&self, i: usize) -> &[usize] {
        &self.rows[i]
    }

    pub fn is_label_row(&self, i: usize) -> bool {
        self.label_row[i]
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.rows[i].binary_search(&j).is_ok()
    }

    /// Rows selected by the policy.
    pub fn active_rows(&self, policy: PammRows) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&i| policy == PammRows::All || self.label_row[i])
    }

    /// Leading `n × n` block, used when a target is truncated.
    pub fn truncated(&self, n: usize) -> PathAdaptiveMask {
        let n = n.min(self.len());
        PathAdaptiveMask {
            rows: self.rows[..n].to_vec(),
            label_row: self.label_row[..n].to_vec(),
        }
    }

    pub fn to_dense(&self) -> Array2<u8> {
        let n = self.len();
        let mut m = Array2::zeros((n, n));
        for (i, row) in self.rows.iter().enumerate() {
            for &j in row {
                m[[i, j]] = 1;
            }
        }
        m
    }

    /// One line per row, cells separated by spaces.
    pub fn render_grid(&self) -> String {
        let dense = self.to_dense();
        let mut out = String::new();
        for row in dense.rows() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
        out
    }

    /// CSV with the sequence tokens as row and column headers.
    pub fn write_csv<W: std::io::Write, S: AsRef<str>>(&self, headers: &[S], out: W) -> Result<()> {
        if headers.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} headers for a {}-row mask",
                headers.len(),
                self.len()
            )));
        }
        let mut w = csv::Writer::from_writer(out);
        let mut head = vec![String::new()];
        head.extend(headers.iter().map(|h| h.as_ref().to_string()));
        w.write_record(&head)?;
        let dense = self.to_dense();
        for (i, row) in dense.rows().into_iter().enumerate() {
            let mut rec = vec![headers[i].as_ref().to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Positions of a label's ancestors together with the separator following
/// each of them.
fn ancestor_positions(
    h: &LabelHierarchy,
    ml: &MultiLevelSequence,
    pos: usize,
    at: &[Option<usize>],
) -> Result<Vec<usize>> {
    let SeqToken::Label(label) = ml.tokens()[pos] else {
        return Ok(Vec::new());
    };
    let mut cols = Vec::new();
    for anc in h.ancestors(label) {
        let p = at[anc.0].filter(|&p| p < pos).ok_or_else(|| {
            Error::SequenceMismatch(format!(
                "ancestor `{}` of `{}` does not precede it",
                h.name(anc),
                h.name(label)
            ))
        })?;
        cols.push(p);
        if ml.tokens()[p + 1].is_symbol() {
            cols.push(p + 1);
        }
    }
    Ok(cols)
}

pub fn build_mask(h: &LabelHierarchy, ml: &MultiLevelSequence) -> Result<PathAdaptiveMask> {
    let tokens = ml.tokens();
    let mut at: Vec<Option<usize>> = vec![None; h.len()];
    for (p, t) in tokens.iter().enumerate() {
        if let SeqToken::Label(l) = *t {
            if l.0 >= h.len() {
                return Err(Error::SequenceMismatch(format!("label {l} not in hierarchy")));
            }
            if at[l.0].replace(p).is_some() {
                return Err(Error::SequenceMismatch(format!(
                    "label `{}` occurs twice",
                    h.name(l)
                )));
            }
        }
    }

    let mut rows = Vec::with_capacity(tokens.len());
    let mut label_row = Vec::with_capacity(tokens.len());
    for (i, t) in tokens.iter().enumerate() {
        let mut cols = if t.is_label() {
            ancestor_positions(h, ml, i, &at)?
        } else if i > 0 {
            let mut c = ancestor_positions(h, ml, i - 1, &at)?;
            c.push(i - 1);
            c
        } else {
            Vec::new()
        };
        cols.push(i);
        cols.sort_unstable();
        cols.dedup();
        rows.push(cols);
        label_row.push(t.is_label());
    }
    Ok(PathAdaptiveMask { rows, label_row })
}

/// `1 − Σ_{j∈C_i} score[i, j]` for every row.
pub fn off_path_mass(score: ArrayView2<'_, f64>, mask: &PathAdaptiveMask) -> Result<Vec<f64>> {
    let n = mask.len();
    if score.dim() != (n, n) {
        return Err(Error::Shape(format!(
            "score is {:?}, mask is {n}x{n}",
            score.dim()
        )));
    }
    Ok((0..n)
        .map(|i| 1.0 - mask.rows[i].iter().map(|&j| score[[i, j]]).sum::<f64>())
        .collect())
}
