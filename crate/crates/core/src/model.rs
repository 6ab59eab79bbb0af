//! Encoder-decoder transformer with traced decoder self-attention.
//!
//! Blocks are pre-norm: every sublayer reads a layer-normalized copy of the
//! residual stream and adds its (dropped-out) output back. A non-empty
//! stack ends with a final layer norm; an empty stack is the identity.
//! Positions use learned absolute embeddings.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::labelseq::DEFAULT_MAX_SRC_LEN;

/// Default decoder length limit.
pub const DEFAULT_MAX_TGT_LEN: usize = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub d_ff: usize,
    /// Rows of the shared token embedding table.
    pub vocab_size: usize,
    /// Classes of the output projection (decoder vocabulary).
    pub out_size: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Desk-scale defaults.
    pub fn new(vocab_size: usize, out_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            heads: 4,
            blocks: 2,
            d_ff: 128,
            vocab_size,
            out_size,
            max_src_len: DEFAULT_MAX_SRC_LEN,
            max_tgt_len: DEFAULT_MAX_TGT_LEN,
            dropout: 0.1,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("out_size", self.out_size),
            ("max_src_len", self.max_src_len),
            ("max_tgt_len", self.max_tgt_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.out_size > self.vocab_size {
            return Err(Error::Config("out_size exceeds vocab_size".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Per-head query/key/value projections and the output projection of one
/// attention sublayer.
#[derive(Debug, Clone)]
pub struct AttnParams {
    pub q: Vec<ParamId>,
    pub k: Vec<ParamId>,
    pub v: Vec<ParamId>,
    pub o: ParamId,
}

#[derive(Debug, Clone)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    attn_norm: NormParams,
    attn: AttnParams,
    ffn_norm: NormParams,
    ffn: FfnParams,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    self_norm: NormParams,
    self_attn: AttnParams,
    cross_norm: NormParams,
    cross_attn: AttnParams,
    ffn_norm: NormParams,
    ffn: FfnParams,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: ParamId,
    src_pos: ParamId,
    tgt_pos: ParamId,
    encoder: Vec<EncoderBlock>,
    enc_norm: Option<NormParams>,
    decoder: Vec<DecoderBlock>,
    dec_norm: Option<NormParams>,
    out_w: ParamId,
    out_b: ParamId,
}

/// Shape-only registration pass; initialization fills values afterwards.
struct Builder<'a> {
    store: &'a mut ParamStore,
}

impl Builder<'_> {
    fn add(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        self.store.add(name, Array2::zeros((rows, cols)))
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormParams {
        NormParams {
            gain: self.add(format!("{prefix}.gain"), 1, d),
            bias: self.add(format!("{prefix}.bias"), 1, d),
        }
    }

    fn attn(&mut self, prefix: &str, cfg: &ModelConfig) -> AttnParams {
        let dh = cfg.d_head();
        let mut proj = |kind: &str| -> Vec<ParamId> {
            (0..cfg.heads)
                .map(|h| self.add(format!("{prefix}.{kind}.{h}"), cfg.d_model, dh))
                .collect()
        };
        let q = proj("q");
        let k = proj("k");
        let v = proj("v");
        let o = self.add(format!("{prefix}.o"), cfg.d_model, cfg.d_model);
        AttnParams { q, k, v, o }
    }

    fn ffn(&mut self, prefix: &str, cfg: &ModelConfig) -> FfnParams {
        FfnParams {
            w1: self.add(format!("{prefix}.w1"), cfg.d_model, cfg.d_ff),
            b1: self.add(format!("{prefix}.b1"), 1, cfg.d_ff),
            w2: self.add(format!("{prefix}.w2"), cfg.d_ff, cfg.d_model),
            b2: self.add(format!("{prefix}.b2"), 1, cfg.d_model),
        }
    }
}

fn build_layout(cfg: &ModelConfig, store: &mut ParamStore) -> Layout {
    let mut b = Builder { store };
    let d = cfg.d_model;
    let embed = b.add("embed".into(), cfg.vocab_size, d);
    let src_pos = b.add("src_pos".into(), cfg.max_src_len, d);
    let tgt_pos = b.add("tgt_pos".into(), cfg.max_tgt_len, d);
    let encoder = (0..cfg.blocks)
        .map(|i| EncoderBlock {
            attn_norm: b.norm(&format!("enc.{i}.attn_norm"), d),
            attn: b.attn(&format!("enc.{i}.self"), cfg),
            ffn_norm: b.norm(&format!("enc.{i}.ffn_norm"), d),
            ffn: b.ffn(&format!("enc.{i}.ffn"), cfg),
        })
        .collect();
    let enc_norm = (cfg.blocks > 0).then(|| b.norm("enc.final_norm", d));
    let decoder = (0..cfg.blocks)
        .map(|i| DecoderBlock {
            self_norm: b.norm(&format!("dec.{i}.self_norm"), d),
            self_attn: b.attn(&format!("dec.{i}.self"), cfg),
            cross_norm: b.norm(&format!("dec.{i}.cross_norm"), d),
            cross_attn: b.attn(&format!("dec.{i}.cross"), cfg),
            ffn_norm: b.norm(&format!("dec.{i}.ffn_norm"), d),
            ffn: b.ffn(&format!("dec.{i}.ffn"), cfg),
        })
        .collect();
    let dec_norm = (cfg.blocks > 0).then(|| b.norm("dec.final_norm", d));
    let out_w = b.add("out.w".into(), d, cfg.out_size);
    let out_b = b.add("out.b".into(), 1, cfg.out_size);
    Layout {
        embed,
        src_pos,
        tgt_pos,
        encoder,
        enc_norm,
        decoder,
        dec_norm,
        out_w,
        out_b,
    }
}

/// Dropout applied to embeddings and sublayer outputs. Attention
/// probabilities are never dropped, so traced scores stay row-stochastic.
pub struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Dropout<'r> {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Dropout {
            rate,
            rng: Some(rng),
        }
    }

    fn apply(&mut self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let mask = Array2::from_shape_fn(tape.value(x).raw_dim(), |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        tape.mul_const(x, mask)
    }
}

/// `softmax(q kᵀ / √d_k) v`, optionally causal. Returns `(output, scores)`.
pub fn attention(tape: &mut Tape<'_>, q: Var, k: Var, v: Var, causal: bool) -> Result<(Var, Var)> {
    let (qv, kv, vv) = (tape.value(q), tape.value(k), tape.value(v));
    if qv.ncols() != kv.ncols() || kv.nrows() != vv.nrows() {
        return Err(Error::Shape(format!(
            "attention: q {:?}, k {:?}, v {:?}",
            qv.shape(),
            kv.shape(),
            vv.shape()
        )));
    }
    let d_k = kv.ncols() as f64;
    let logits = tape.matmul_t(q, k)?;
    let logits = tape.scale(logits, 1.0 / d_k.sqrt());
    let scores = tape.softmax(logits, causal);
    let out = tape.matmul(scores, v)?;
    Ok((out, scores))
}

/// Multi-head attention over projected inputs; returns the projected
/// concatenation and every head's score matrix.
pub fn multi_head(
    tape: &mut Tape<'_>,
    p: &AttnParams,
    x_q: Var,
    x_kv: Var,
    causal: bool,
) -> Result<(Var, Vec<Var>)> {
    let mut heads = Vec::with_capacity(p.q.len());
    let mut scores = Vec::with_capacity(p.q.len());
    for h in 0..p.q.len() {
        let wq = tape.param(p.q[h]);
        let wk = tape.param(p.k[h]);
        let wv = tape.param(p.v[h]);
        let q = tape.matmul(x_q, wq)?;
        let k = tape.matmul(x_kv, wk)?;
        let v = tape.matmul(x_kv, wv)?;
        let (out, score) = attention(tape, q, k, v, causal)?;
        heads.push(out);
        scores.push(score);
    }
    let cat = tape.concat_cols(&heads)?;
    let wo = tape.param(p.o);
    Ok((tape.matmul(cat, wo)?, scores))
}

/// `max(0, x W1 + b1) W2 + b2`
pub fn ffn(tape: &mut Tape<'_>, p: &FfnParams, x: Var) -> Result<Var> {
    let w1 = tape.param(p.w1);
    let b1 = tape.param(p.b1);
    let w2 = tape.param(p.w2);
    let b2 = tape.param(p.b2);
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h);
    let y = tape.matmul(h, w2)?;
    tape.add_row(y, b2)
}

fn norm(tape: &mut Tape<'_>, p: NormParams, x: Var) -> Result<Var> {
    let g = tape.param(p.gain);
    let b = tape.param(p.bias);
    tape.layer_norm(x, g, b)
}

/// Tape handles produced by a decoder pass.
#[derive(Debug, Clone)]
pub struct DecoderVars {
    /// `[block][head]` causal self-attention scores.
    pub scores: Vec<Vec<Var>>,
    pub hidden: Var,
    pub logits: Var,
}

/// Values captured from one decoder pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `[block][head]` causal self-attention score matrices.
    pub self_scores: Vec<Vec<Array2<f64>>>,
    /// Final decoder output.
    pub hidden: Array2<f64>,
    pub logits: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: LayoutIds,
}

// Layout holds only ids; wrap it so Model can derive PartialEq on params.
#[derive(Debug, Clone)]
struct LayoutIds(Layout);

impl PartialEq for LayoutIds {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), bound: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.random_range(-bound..=bound))
}

impl Model {
    /// Seeded random initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = build_layout(&config, &mut params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        for (name, value) in names.iter().zip(params.values_mut()) {
            let shape = value.dim();
            *value = if name.ends_with(".gain") {
                Array2::ones(shape)
            } else if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") || name == "out.b" {
                Array2::zeros(shape)
            } else if name == "embed" {
                uniform(&mut rng, shape, 0.5)
            } else if name.ends_with("_pos") {
                uniform(&mut rng, shape, 0.1)
            } else {
                let bound = (6.0 / (shape.0 + shape.1) as f64).sqrt();
                uniform(&mut rng, shape, bound)
            };
        }
        Ok(Model {
            config,
            params,
            layout: LayoutIds(layout),
        })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut expected = ParamStore::new();
        let layout = build_layout(&config, &mut expected);
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((en, ev), (pn, pv)) in expected.iter().zip(params.iter()) {
            if en != pn || ev.shape() != pv.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{pn}` {:?} does not match expected `{en}` {:?}",
                    pv.shape(),
                    ev.shape()
                )));
            }
        }
        Ok(Model {
            config,
            params,
            layout: LayoutIds(layout),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn embedding_id(&self) -> ParamId {
        self.layout.0.embed
    }

    pub fn output_ids(&self) -> (ParamId, ParamId) {
        (self.layout.0.out_w, self.layout.0.out_b)
    }

    fn embed(&self, tape: &mut Tape<'_>, ids: &[usize], pos: ParamId, drop: &mut Dropout<'_>) -> Result<Var> {
        let tok = tape.gather(self.layout.0.embed, ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let p = tape.gather(pos, &positions)?;
        let x = tape.add(tok, p)?;
        drop.apply(tape, x)
    }

    /// Encoder stack over source ids; returns `O_text`.
    pub fn encode(&self, tape: &mut Tape<'_>, src: &[usize], drop: &mut Dropout<'_>) -> Result<Var> {
        if src.len() > self.config.max_src_len {
            return Err(Error::Overlong {
                len: src.len(),
                max: self.config.max_src_len,
            });
        }
        let mut x = self.embed(tape, src, self.layout.0.src_pos, drop)?;
        for blk in &self.layout.0.encoder {
            let h = norm(tape, blk.attn_norm, x)?;
            let (a, _) = multi_head(tape, &blk.attn, h, h, false)?;
            let a = drop.apply(tape, a)?;
            x = tape.add(x, a)?;
            let h = norm(tape, blk.ffn_norm, x)?;
            let f = ffn(tape, &blk.ffn, h)?;
            let f = drop.apply(tape, f)?;
            x = tape.add(x, f)?;
        }
        match self.layout.0.enc_norm {
            Some(n) => norm(tape, n, x),
            None => Ok(x),
        }
    }

    /// Decoder stack over target-side input ids attending to `memory`.
    pub fn decode(
        &self,
        tape: &mut Tape<'_>,
        tgt: &[usize],
        memory: Var,
        drop: &mut Dropout<'_>,
    ) -> Result<DecoderVars> {
        if tgt.len() > self.config.max_tgt_len {
            return Err(Error::Overlong {
                len: tgt.len(),
                max: self.config.max_tgt_len,
            });
        }
        if let Some(&bad) = tgt.iter().find(|&&t| t >= self.config.out_size) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                size: self.config.out_size,
            });
        }
        let mut x = self.embed(tape, tgt, self.layout.0.tgt_pos, drop)?;
        let mut scores = Vec::with_capacity(self.layout.0.decoder.len());
        for blk in &self.layout.0.decoder {
            let h = norm(tape, blk.self_norm, x)?;
            let (a_label, s) = multi_head(tape, &blk.self_attn, h, h, true)?;
            scores.push(s);
            let a_label = drop.apply(tape, a_label)?;
            x = tape.add(x, a_label)?;
            let h = norm(tape, blk.cross_norm, x)?;
            let (a_cross, _) = multi_head(tape, &blk.cross_attn, h, memory, false)?;
            let a_cross = drop.apply(tape, a_cross)?;
            x = tape.add(x, a_cross)?;
            let h = norm(tape, blk.ffn_norm, x)?;
            let f = ffn(tape, &blk.ffn, h)?;
            let f = drop.apply(tape, f)?;
            x = tape.add(x, f)?;
        }
        let hidden = match self.layout.0.dec_norm {
            Some(n) => norm(tape, n, x)?,
            None => x,
        };
        let logits = self.project(tape, hidden)?;
        Ok(DecoderVars {
            scores,
            hidden,
            logits,
        })
    }

    /// `hidden W3 + b3`; softmax is left to the loss and the decoder.
    pub fn project(&self, tape: &mut Tape<'_>, hidden: Var) -> Result<Var> {
        let w = tape.param(self.layout.0.out_w);
        let b = tape.param(self.layout.0.out_b);
        let y = tape.matmul(hidden, w)?;
        tape.add_row(y, b)
    }

    pub fn encoder_forward(&self, src: &[usize]) -> Result<Array2<f64>> {
        let mut tape = Tape::new(&self.params);
        let out = self.encode(&mut tape, src, &mut Dropout::off())?;
        Ok(tape.value(out).clone())
    }

    pub fn decoder_forward(&self, tgt: &[usize], o_text: &Array2<f64>) -> Result<ForwardTrace> {
        if o_text.ncols() != self.config.d_model {
            return Err(Error::Shape(format!(
                "encoder output has {} columns, model width is {}",
                o_text.ncols(),
                self.config.d_model
            )));
        }
        let mut tape = Tape::new(&self.params);
        let memory = tape.input(o_text.clone(), false);
        let vars = self.decode(&mut tape, tgt, memory, &mut Dropout::off())?;
        Ok(ForwardTrace {
            self_scores: vars
                .scores
                .iter()
                .map(|blk| blk.iter().map(|&s| tape.value(s).clone()).collect())
                .collect(),
            hidden: tape.value(vars.hidden).clone(),
            logits: tape.value(vars.logits).clone(),
        })
    }

    /// Full deterministic pass (dropout off).
    pub fn forward_trace(&self, src: &[usize], tgt: &[usize]) -> Result<ForwardTrace> {
        let o_text = self.encoder_forward(src)?;
        self.decoder_forward(tgt, &o_text)
    }

    pub fn project_logits(&self, hidden: &Array2<f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::new(&self.params);
        let h = tape.input(hidden.clone(), false);
        let out = self.project(&mut tape, h)?;
        Ok(tape.value(out).clone())
    }
}
