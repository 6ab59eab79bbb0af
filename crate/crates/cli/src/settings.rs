//! Training knobs shared by flags and `--config` TOML files. Flags win.

use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Deserialize;

use pathmask_core::labelseq::TargetFormat;
use pathmask_core::pamm::PammRows;
use pathmask_core::train::TrainConfig;
use pathmask_core::ModelConfig;

#[derive(Args, Deserialize, Debug, Clone, Default, PartialEq)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct Settings {
    /// Weight of the path-adaptive attention loss (0 disables it).
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub max_src_len: Option<usize>,
    #[arg(long)]
    pub max_tgt_len: Option<usize>,
    /// Train on unordered label sets joined by `_` (no hierarchy, no mask).
    #[arg(long)]
    pub flat_labels: bool,
    /// Rows regularized by the attention loss: `all` or `labels`.
    #[arg(long)]
    pub pamm_rows: Option<String>,
    /// Worker threads; 0 means all cores.
    #[arg(long)]
    pub jobs: Option<usize>,
}

impl Settings {
    pub fn from_toml(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Fields set here take precedence over `file`.
    pub fn over(self, file: Settings) -> Settings {
        Settings {
            rho: self.rho.or(file.rho),
            seed: self.seed.or(file.seed),
            epochs: self.epochs.or(file.epochs),
            batch: self.batch.or(file.batch),
            lr: self.lr.or(file.lr),
            d_model: self.d_model.or(file.d_model),
            heads: self.heads.or(file.heads),
            blocks: self.blocks.or(file.blocks),
            d_ff: self.d_ff.or(file.d_ff),
            dropout: self.dropout.or(file.dropout),
            max_src_len: self.max_src_len.or(file.max_src_len),
            max_tgt_len: self.max_tgt_len.or(file.max_tgt_len),
            flat_labels: self.flat_labels || file.flat_labels,
            pamm_rows: self.pamm_rows.or(file.pamm_rows),
            jobs: self.jobs.or(file.jobs),
        }
    }

    pub fn format(&self) -> TargetFormat {
        if self.flat_labels {
            TargetFormat::Flat
        } else {
            TargetFormat::Hierarchical
        }
    }

    pub fn model_config(&self, vocab_size: usize, out_size: usize) -> Result<ModelConfig> {
        let mut c = ModelConfig::new(vocab_size, out_size);
        c.d_model = self.d_model.unwrap_or(c.d_model);
        c.heads = self.heads.unwrap_or(c.heads);
        c.blocks = self.blocks.unwrap_or(c.blocks);
        c.d_ff = self.d_ff.unwrap_or(c.d_ff);
        c.dropout = self.dropout.unwrap_or(c.dropout);
        c.max_src_len = self.max_src_len.unwrap_or(c.max_src_len);
        c.max_tgt_len = self.max_tgt_len.unwrap_or(c.max_tgt_len);
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self, max_tgt_len: usize) -> Result<TrainConfig> {
        let mut c = TrainConfig::default();
        c.rho = self.rho.unwrap_or(c.rho);
        c.seed = self.seed.unwrap_or(c.seed);
        c.epochs = self.epochs.unwrap_or(c.epochs);
        c.batch_size = self.batch.unwrap_or(c.batch_size);
        c.lr = self.lr.unwrap_or(c.lr);
        c.jobs = self.jobs.unwrap_or(c.jobs);
        c.max_decode_len = max_tgt_len;
        if let Some(rows) = &self.pamm_rows {
            c.pamm_rows = rows.parse::<PammRows>()?;
        }
        if self.flat_labels && self.rho.is_some_and(|r| r != 0.0) {
            bail!("--flat-labels has no path mask; --rho must be 0 or unset");
        }
        if self.flat_labels {
            c.rho = 0.0;
        }
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let file: Settings = toml::from_str("rho = 10.0\nepochs = 7\nflat-labels = true\n").unwrap();
        let cli = Settings {
            rho: Some(0.0),
            ..Default::default()
        };
        let s = cli.over(file);
        assert_eq!(s.rho, Some(0.0));
        assert_eq!(s.epochs, Some(7));
        assert!(s.flat_labels);
        assert_eq!(s.format(), TargetFormat::Flat);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<Settings>("rhoo = 1.0\n").is_err());
    }

    #[test]
    fn defaults_and_validation() {
        let s = Settings::default();
        let t = s.train_config(60).unwrap();
        assert_eq!((t.rho, t.batch_size), (100.0, 10));
        let m = s.model_config(100, 20).unwrap();
        assert_eq!((m.d_model, m.heads, m.blocks, m.max_src_len), (64, 4, 2, 300));
        let bad = Settings {
            heads: Some(5),
            ..Default::default()
        };
        assert!(bad.model_config(100, 20).is_err());
        let flat = Settings {
            flat_labels: true,
            rho: Some(100.0),
            ..Default::default()
        };
        assert!(flat.train_config(60).is_err());
        let flat = Settings {
            flat_labels: true,
            ..Default::default()
        };
        assert_eq!(flat.train_config(60).unwrap().rho, 0.0);
    }
}
