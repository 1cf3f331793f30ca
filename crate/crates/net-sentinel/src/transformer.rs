//! Encoder-decoder Transformer over per-edge packet sequences.
//!
//! Trained self-supervised: the decoder predicts the future half of an edge
//! sequence from the observed half, starting from a learned start vector W0.
//! After training only the encoder is used; it maps packet rows to latent
//! z vectors that the aggregator sums into edge/node/global features.
//!
//! All math runs on the f64 autodiff tape. Per-sequence gradients may be
//! computed in parallel, but they are reduced in dataset index order and the
//! optimizer runs single-threaded, so training is bit-reproducible for a
//! fixed seed at any worker count.

use crate::autodiff::{softmax_rows_masked, Adam, AttnMask, Mat, Tape, Var};
use crate::packet::{PacketVector, Schema};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_z: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub ff_width: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            d_z: 64,
            n_heads: 4,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            ff_width: 128,
            max_seq_len: 256,
            dropout_rate: 0.1,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("d_z ({d_z}) must be divisible by n_heads ({n_heads})")]
    HeadSplit { d_z: usize, n_heads: usize },
    #[error("max_seq_len must be at least 2, got {0}")]
    MaxSeqLen(usize),
    #[error("dropout_rate must be in [0, 1), got {0}")]
    Dropout(f64),
    #[error("layer counts and widths must be nonzero")]
    ZeroDim,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.d_z == 0
            || self.n_heads == 0
            || self.n_encoder_layers == 0
            || self.n_decoder_layers == 0
            || self.ff_width == 0
        {
            return Err(ConfigError::ZeroDim);
        }
        if self.d_z % self.n_heads != 0 {
            return Err(ConfigError::HeadSplit { d_z: self.d_z, n_heads: self.n_heads });
        }
        if self.max_seq_len < 2 {
            return Err(ConfigError::MaxSeqLen(self.max_seq_len));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ConfigError::Dropout(self.dropout_rate));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_z / self.n_heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings { learning_rate: 1e-3, batch_size: 32, epochs: 10, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct LinearP {
    pub w: Mat,
    pub b: Mat,
}

#[derive(Clone, Debug)]
pub struct LayerNormP {
    pub gain: Mat,
    pub offset: Mat,
}

#[derive(Clone, Debug)]
pub struct MhaP {
    pub wq: Vec<Mat>,
    pub wk: Vec<Mat>,
    pub wv: Vec<Mat>,
    pub wo: Vec<Mat>,
}

#[derive(Clone, Debug)]
pub struct FeedForwardP {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

#[derive(Clone, Debug)]
pub struct EncoderLayerP {
    pub attn: MhaP,
    pub ln1: LayerNormP,
    pub ff: FeedForwardP,
    pub ln2: LayerNormP,
}

#[derive(Clone, Debug)]
pub struct DecoderLayerP {
    pub self_attn: MhaP,
    pub ln1: LayerNormP,
    pub cross_attn: MhaP,
    pub ln2: LayerNormP,
    pub ff: FeedForwardP,
    pub ln3: LayerNormP,
}

/// All trainable tensors. `feature_width` is the schema row width; the
/// output head predicts one score per schema column.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: TransformerConfig,
    pub feature_width: usize,
    pub embed: LinearP,
    pub encoder: Vec<EncoderLayerP>,
    pub decoder: Vec<DecoderLayerP>,
    pub output: LinearP,
    pub w0: Mat,
}

fn init_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Mat {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Mat::from_vec(rows, cols, data)
}

fn init_linear(rng: &mut ChaCha8Rng, inw: usize, outw: usize) -> LinearP {
    LinearP { w: init_mat(rng, inw, outw, inw), b: Mat::zeros(1, outw) }
}

fn init_ln(d: usize) -> LayerNormP {
    LayerNormP { gain: Mat::from_vec(1, d, vec![1.0; d]), offset: Mat::zeros(1, d) }
}

fn init_mha(rng: &mut ChaCha8Rng, cfg: &TransformerConfig) -> MhaP {
    let (d, dh) = (cfg.d_z, cfg.d_head());
    let proj = |rng: &mut ChaCha8Rng| init_mat(rng, d, dh, d);
    let mut m = MhaP { wq: vec![], wk: vec![], wv: vec![], wo: vec![] };
    for _ in 0..cfg.n_heads {
        m.wq.push(proj(rng));
        m.wk.push(proj(rng));
        m.wv.push(proj(rng));
        m.wo.push(init_mat(rng, dh, d, dh));
    }
    m
}

fn init_ff(rng: &mut ChaCha8Rng, cfg: &TransformerConfig) -> FeedForwardP {
    FeedForwardP {
        w1: init_mat(rng, cfg.d_z, cfg.ff_width, cfg.d_z),
        b1: Mat::zeros(1, cfg.ff_width),
        w2: init_mat(rng, cfg.ff_width, cfg.d_z, cfg.ff_width),
        b2: Mat::zeros(1, cfg.d_z),
    }
}

impl ModelParams {
    pub fn init(config: TransformerConfig, feature_width: usize, seed: u64) -> ModelParams {
        config.validate().expect("invalid transformer config");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = init_linear(&mut rng, feature_width, config.d_z);
        let encoder = (0..config.n_encoder_layers)
            .map(|_| EncoderLayerP {
                attn: init_mha(&mut rng, &config),
                ln1: init_ln(config.d_z),
                ff: init_ff(&mut rng, &config),
                ln2: init_ln(config.d_z),
            })
            .collect();
        let decoder = (0..config.n_decoder_layers)
            .map(|_| DecoderLayerP {
                self_attn: init_mha(&mut rng, &config),
                ln1: init_ln(config.d_z),
                cross_attn: init_mha(&mut rng, &config),
                ln2: init_ln(config.d_z),
                ff: init_ff(&mut rng, &config),
                ln3: init_ln(config.d_z),
            })
            .collect();
        let output = init_linear(&mut rng, config.d_z, feature_width);
        let w0 = init_mat(&mut rng, 1, config.d_z, config.d_z);
        ModelParams { config, feature_width, embed, encoder, decoder, output, w0 }
    }

    /// Every tensor with a stable name, in fixed traversal order. This order
    /// defines gradient/optimizer slot alignment and the checkpoint layout.
    pub fn named_params(&self) -> Vec<(String, &Mat)> {
        let mut out: Vec<(String, &Mat)> = Vec::new();
        out.push(("embed.w".into(), &self.embed.w));
        out.push(("embed.b".into(), &self.embed.b));
        for (i, l) in self.encoder.iter().enumerate() {
            mha_named(&format!("enc{i}.attn"), &l.attn, &mut out);
            out.push((format!("enc{i}.ln1.gain"), &l.ln1.gain));
            out.push((format!("enc{i}.ln1.offset"), &l.ln1.offset));
            out.push((format!("enc{i}.ff.w1"), &l.ff.w1));
            out.push((format!("enc{i}.ff.b1"), &l.ff.b1));
            out.push((format!("enc{i}.ff.w2"), &l.ff.w2));
            out.push((format!("enc{i}.ff.b2"), &l.ff.b2));
            out.push((format!("enc{i}.ln2.gain"), &l.ln2.gain));
            out.push((format!("enc{i}.ln2.offset"), &l.ln2.offset));
        }
        for (i, l) in self.decoder.iter().enumerate() {
            mha_named(&format!("dec{i}.self"), &l.self_attn, &mut out);
            out.push((format!("dec{i}.ln1.gain"), &l.ln1.gain));
            out.push((format!("dec{i}.ln1.offset"), &l.ln1.offset));
            mha_named(&format!("dec{i}.cross"), &l.cross_attn, &mut out);
            out.push((format!("dec{i}.ln2.gain"), &l.ln2.gain));
            out.push((format!("dec{i}.ln2.offset"), &l.ln2.offset));
            out.push((format!("dec{i}.ff.w1"), &l.ff.w1));
            out.push((format!("dec{i}.ff.b1"), &l.ff.b1));
            out.push((format!("dec{i}.ff.w2"), &l.ff.w2));
            out.push((format!("dec{i}.ff.b2"), &l.ff.b2));
            out.push((format!("dec{i}.ln3.gain"), &l.ln3.gain));
            out.push((format!("dec{i}.ln3.offset"), &l.ln3.offset));
        }
        out.push(("output.w".into(), &self.output.w));
        out.push(("output.b".into(), &self.output.b));
        out.push(("w0".into(), &self.w0));
        out
    }

    /// Mutable tensors in the same order as [`Self::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut out: Vec<&mut Mat> = Vec::new();
        out.push(&mut self.embed.w);
        out.push(&mut self.embed.b);
        for l in self.encoder.iter_mut() {
            mha_mut(&mut l.attn, &mut out);
            out.push(&mut l.ln1.gain);
            out.push(&mut l.ln1.offset);
            out.push(&mut l.ff.w1);
            out.push(&mut l.ff.b1);
            out.push(&mut l.ff.w2);
            out.push(&mut l.ff.b2);
            out.push(&mut l.ln2.gain);
            out.push(&mut l.ln2.offset);
        }
        for l in self.decoder.iter_mut() {
            mha_mut(&mut l.self_attn, &mut out);
            out.push(&mut l.ln1.gain);
            out.push(&mut l.ln1.offset);
            mha_mut(&mut l.cross_attn, &mut out);
            out.push(&mut l.ln2.gain);
            out.push(&mut l.ln2.offset);
            out.push(&mut l.ff.w1);
            out.push(&mut l.ff.b1);
            out.push(&mut l.ff.w2);
            out.push(&mut l.ff.b2);
            out.push(&mut l.ln3.gain);
            out.push(&mut l.ln3.offset);
        }
        out.push(&mut self.output.w);
        out.push(&mut self.output.b);
        out.push(&mut self.w0);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_params().iter().all(|(_, m)| m.all_finite())
    }
}

fn mha_named<'a>(prefix: &str, m: &'a MhaP, out: &mut Vec<(String, &'a Mat)>) {
    for h in 0..m.wq.len() {
        out.push((format!("{prefix}.wq{h}"), &m.wq[h]));
        out.push((format!("{prefix}.wk{h}"), &m.wk[h]));
        out.push((format!("{prefix}.wv{h}"), &m.wv[h]));
        out.push((format!("{prefix}.wo{h}"), &m.wo[h]));
    }
}

fn mha_mut<'a>(m: &'a mut MhaP, out: &mut Vec<&'a mut Mat>) {
    let heads = m
        .wq
        .iter_mut()
        .zip(m.wk.iter_mut())
        .zip(m.wv.iter_mut())
        .zip(m.wo.iter_mut());
    for (((wq, wk), wv), wo) in heads {
        out.push(wq);
        out.push(wk);
        out.push(wv);
        out.push(wo);
    }
}

/// Sinusoidal positional encoding row: even channels sin, odd channels cos.
pub fn positional_encoding(position: usize, d_z: usize) -> Vec<f64> {
    let mut row = vec![0.0; d_z];
    for i in 0..d_z {
        let pair = (i / 2) as f64;
        let angle = position as f64 / 10000f64.powf(2.0 * pair / d_z as f64);
        row[i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
    }
    row
}

fn pe_matrix(len: usize, d_z: usize) -> Mat {
    let rows: Vec<Vec<f64>> = (0..len).map(|p| positional_encoding(p, d_z)).collect();
    Mat::from_rows(&rows)
}

/// Pure scaled dot-product attention over raw matrices: softmax(QKᵀ/√dₖ)V
/// with masked keys excluded (fully masked rows yield zero vectors).
pub fn scaled_dot_attention(q: &Mat, k: &Mat, v: &Mat, mask: Option<&AttnMask>) -> Mat {
    assert_eq!(q.cols(), k.cols(), "query/key width mismatch");
    assert_eq!(k.rows(), v.rows(), "key/value count mismatch");
    let scale = 1.0 / (k.cols() as f64).sqrt();
    let mut logits = q.matmul(&k.transpose());
    for x in logits.data_mut() {
        *x *= scale;
    }
    softmax_rows_masked(&logits, mask).matmul(v)
}

/// Dropout bookkeeping: a deterministic mask source for one forward pass.
struct DropoutCtx {
    rng: ChaCha8Rng,
    rate: f64,
}

impl DropoutCtx {
    fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        if self.rate == 0.0 {
            return x;
        }
        let (rows, cols) = (tape.value(x).rows(), tape.value(x).cols());
        let keep = 1.0 - self.rate;
        let data = (0..rows * cols)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        tape.mul_const(x, Mat::from_vec(rows, cols, data))
    }
}

fn tape_linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

fn tape_layer_norm(tape: &mut Tape, x: Var, gain: Var, offset: Var) -> Var {
    let y = tape.layer_norm(x, LAYER_NORM_EPS);
    let y = tape.mul_row(y, gain);
    tape.add_row(y, offset)
}

struct BoundMha {
    wq: Vec<Var>,
    wk: Vec<Var>,
    wv: Vec<Var>,
    wo: Vec<Var>,
}

fn tape_mha(
    tape: &mut Tape,
    q_in: Var,
    kv_in: Var,
    p: &BoundMha,
    mask: &AttnMask,
    d_head: usize,
) -> Var {
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut total: Option<Var> = None;
    for h in 0..p.wq.len() {
        let q = tape.matmul(q_in, p.wq[h]);
        let k = tape.matmul(kv_in, p.wk[h]);
        let v = tape.matmul(kv_in, p.wv[h]);
        let kt = tape.transpose(k);
        let logits = tape.matmul(q, kt);
        let logits = tape.scale(logits, scale);
        let attn = tape.softmax_masked(logits, Some(mask.clone()));
        let ctx = tape.matmul(attn, v);
        let proj = tape.matmul(ctx, p.wo[h]);
        total = Some(match total {
            Some(t) => tape.add(t, proj),
            None => proj,
        });
    }
    total.expect("at least one head")
}

/// Tape bindings for every parameter, in named order.
struct Bound {
    flat: Vec<Var>,
    embed_w: Var,
    embed_b: Var,
    encoder: Vec<BoundEncLayer>,
    decoder: Vec<BoundDecLayer>,
    output_w: Var,
    output_b: Var,
    w0: Var,
}

struct BoundLn {
    gain: Var,
    offset: Var,
}

struct BoundFf {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

struct BoundEncLayer {
    attn: BoundMha,
    ln1: BoundLn,
    ff: BoundFf,
    ln2: BoundLn,
}

struct BoundDecLayer {
    self_attn: BoundMha,
    ln1: BoundLn,
    cross_attn: BoundMha,
    ln2: BoundLn,
    ff: BoundFf,
    ln3: BoundLn,
}

fn bind_leaf(tape: &mut Tape, flat: &mut Vec<Var>, m: &Mat) -> Var {
    let v = tape.leaf(m.clone());
    flat.push(v);
    v
}

fn bind_mha(tape: &mut Tape, flat: &mut Vec<Var>, m: &MhaP) -> BoundMha {
    let mut b = BoundMha { wq: vec![], wk: vec![], wv: vec![], wo: vec![] };
    for h in 0..m.wq.len() {
        b.wq.push(bind_leaf(tape, flat, &m.wq[h]));
        b.wk.push(bind_leaf(tape, flat, &m.wk[h]));
        b.wv.push(bind_leaf(tape, flat, &m.wv[h]));
        b.wo.push(bind_leaf(tape, flat, &m.wo[h]));
    }
    b
}

fn bind_ln(tape: &mut Tape, flat: &mut Vec<Var>, l: &LayerNormP) -> BoundLn {
    BoundLn { gain: bind_leaf(tape, flat, &l.gain), offset: bind_leaf(tape, flat, &l.offset) }
}

fn bind_ff(tape: &mut Tape, flat: &mut Vec<Var>, f: &FeedForwardP) -> BoundFf {
    BoundFf {
        w1: bind_leaf(tape, flat, &f.w1),
        b1: bind_leaf(tape, flat, &f.b1),
        w2: bind_leaf(tape, flat, &f.w2),
        b2: bind_leaf(tape, flat, &f.b2),
    }
}

fn bind(tape: &mut Tape, p: &ModelParams) -> Bound {
    let mut flat = Vec::new();
    let embed_w = bind_leaf(tape, &mut flat, &p.embed.w);
    let embed_b = bind_leaf(tape, &mut flat, &p.embed.b);
    let mut encoder = Vec::new();
    for l in &p.encoder {
        let attn = bind_mha(tape, &mut flat, &l.attn);
        let ln1 = bind_ln(tape, &mut flat, &l.ln1);
        let ff = bind_ff(tape, &mut flat, &l.ff);
        let ln2 = bind_ln(tape, &mut flat, &l.ln2);
        encoder.push(BoundEncLayer { attn, ln1, ff, ln2 });
    }
    let mut decoder = Vec::new();
    for l in &p.decoder {
        let self_attn = bind_mha(tape, &mut flat, &l.self_attn);
        let ln1 = bind_ln(tape, &mut flat, &l.ln1);
        let cross_attn = bind_mha(tape, &mut flat, &l.cross_attn);
        let ln2 = bind_ln(tape, &mut flat, &l.ln2);
        let ff = bind_ff(tape, &mut flat, &l.ff);
        let ln3 = bind_ln(tape, &mut flat, &l.ln3);
        decoder.push(BoundDecLayer { self_attn, ln1, cross_attn, ln2, ff, ln3 });
    }
    let output_w = bind_leaf(tape, &mut flat, &p.output.w);
    let output_b = bind_leaf(tape, &mut flat, &p.output.b);
    let w0 = bind_leaf(tape, &mut flat, &p.w0);
    Bound { flat, embed_w, embed_b, encoder, decoder, output_w, output_b, w0 }
}

fn rows_to_mat(rows: &[PacketVector]) -> Mat {
    let data: Vec<Vec<f64>> = rows.iter().map(|r| r.values.clone()).collect();
    Mat::from_rows(&data)
}

fn encoder_forward(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &TransformerConfig,
    input: &Mat,
    real: &[bool],
    dropout: &mut Option<DropoutCtx>,
) -> Var {
    let len = input.rows();
    let x = tape.leaf(input.clone());
    let x = tape_linear(tape, x, bound.embed_w, bound.embed_b);
    let mut x = tape.add_const(x, pe_matrix(len, cfg.d_z));
    let mask = AttnMask::from_key_flags(len, real);
    for layer in &bound.encoder {
        let a = tape_mha(tape, x, x, &layer.attn, &mask, cfg.d_head());
        let a = match dropout.as_mut() {
            Some(d) => d.apply(tape, a),
            None => a,
        };
        let res = tape.add(x, a);
        x = tape_layer_norm(tape, res, layer.ln1.gain, layer.ln1.offset);
        let f = tape_linear(tape, x, layer.ff.w1, layer.ff.b1);
        let f = tape.relu(f);
        let f = tape_linear(tape, f, layer.ff.w2, layer.ff.b2);
        let f = match dropout.as_mut() {
            Some(d) => d.apply(tape, f),
            None => f,
        };
        let res = tape.add(x, f);
        x = tape_layer_norm(tape, res, layer.ln2.gain, layer.ln2.offset);
    }
    x
}

/// Build the teacher-forced decoder input: W0 followed by the embeddings of
/// all future rows but the last, plus positional encoding.
fn decoder_input(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &TransformerConfig,
    future: &Mat,
) -> Var {
    let t = future.rows();
    let dec = if t > 1 {
        let shifted =
            Mat::from_vec(t - 1, future.cols(), future.data()[..(t - 1) * future.cols()].to_vec());
        let fut_in = tape.leaf(shifted);
        let emb = tape_linear(tape, fut_in, bound.embed_w, bound.embed_b);
        tape.concat_rows(bound.w0, emb)
    } else {
        // single target position: W0 alone
        let one = Mat::from_vec(1, 1, vec![1.0]);
        let one = tape.leaf(one);
        tape.matmul(one, bound.w0)
    };
    tape.add_const(dec, pe_matrix(t, cfg.d_z))
}

fn decoder_forward(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &TransformerConfig,
    dec_in: Var,
    enc_out: Var,
    enc_real: &[bool],
    dropout: &mut Option<DropoutCtx>,
) -> Var {
    let t = tape.value(dec_in).rows();
    let causal = AttnMask::causal(t);
    let cross = AttnMask::from_key_flags(t, enc_real);
    let mut x = dec_in;
    for layer in &bound.decoder {
        let a = tape_mha(tape, x, x, &layer.self_attn, &causal, cfg.d_head());
        let a = match dropout.as_mut() {
            Some(d) => d.apply(tape, a),
            None => a,
        };
        let res = tape.add(x, a);
        x = tape_layer_norm(tape, res, layer.ln1.gain, layer.ln1.offset);
        let c = tape_mha(tape, x, enc_out, &layer.cross_attn, &cross, cfg.d_head());
        let c = match dropout.as_mut() {
            Some(d) => d.apply(tape, c),
            None => c,
        };
        let res = tape.add(x, c);
        x = tape_layer_norm(tape, res, layer.ln2.gain, layer.ln2.offset);
        let f = tape_linear(tape, x, layer.ff.w1, layer.ff.b1);
        let f = tape.relu(f);
        let f = tape_linear(tape, f, layer.ff.w2, layer.ff.b2);
        let f = match dropout.as_mut() {
            Some(d) => d.apply(tape, f),
            None => f,
        };
        let res = tape.add(x, f);
        x = tape_layer_norm(tape, res, layer.ln3.gain, layer.ln3.offset);
    }
    let y = tape.matmul(x, bound.output_w);
    tape.add_row(y, bound.output_b)
}

/// Column classification driving the mixed loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LossSpec {
    pub binary: Vec<usize>,
    pub numerical: Vec<usize>,
    /// (start, len) of each one-hot group.
    pub categorical: Vec<(usize, usize)>,
}

impl LossSpec {
    pub fn from_schema(schema: &Schema) -> LossSpec {
        LossSpec {
            binary: schema.binary_cols(),
            numerical: schema.numerical_cols(),
            categorical: schema.categorical_groups().iter().map(|g| (g.start, g.len)).collect(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("no unmasked positions to average the loss over")]
    AllMasked,
}

/// Mixed loss on the tape: mean over unmasked rows of squared error on
/// numerical columns + BCE on binary columns + CE per categorical group.
fn tape_loss(
    tape: &mut Tape,
    pred: Var,
    target: &Mat,
    spec: &LossSpec,
    row_mask: &[bool],
) -> Result<Var, LossError> {
    let n_unmasked = row_mask.iter().filter(|&&m| m).count();
    if n_unmasked == 0 {
        return Err(LossError::AllMasked);
    }
    let w: Vec<f64> = row_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let mut total = tape.sq_err_sum(pred, target.clone(), spec.numerical.clone(), w.clone());
    if !spec.binary.is_empty() {
        let b = tape.bce_sum(pred, target.clone(), spec.binary.clone(), w.clone());
        total = tape.add(total, b);
    }
    for &(start, len) in &spec.categorical {
        let c = tape.ce_sum(pred, target.clone(), start, len, w.clone());
        total = tape.add(total, c);
    }
    Ok(tape.scale(total, 1.0 / n_unmasked as f64))
}

/// Mixed loss over plain matrices (no gradients).
pub fn mixed_loss(
    pred: &Mat,
    target: &Mat,
    spec: &LossSpec,
    row_mask: &[bool],
) -> Result<f64, LossError> {
    let mut tape = Tape::new();
    let p = tape.leaf(pred.clone());
    let l = tape_loss(&mut tape, p, target, spec, row_mask)?;
    Ok(tape.value(l).item())
}

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
}

/// Encoder output: one latent row per input position plus the padding mask.
#[derive(Clone, Debug)]
pub struct EncodedSequence {
    pub z: Mat,
    pub mask: Vec<bool>,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("loss became non-finite at epoch {epoch}, batch {batch} (loss {loss})")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("sequence {index} longer than max_seq_len {max}")]
    SequenceTooLong { index: usize, max: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Forward pass of the full model for one (observed, future) pair; returns
/// the scalar loss. Used directly by gradient checks.
pub fn forward_loss(
    params: &ModelParams,
    spec: &LossSpec,
    observed: &[PacketVector],
    future: &[PacketVector],
) -> Result<f64, LossError> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params);
    let obs_mat = rows_to_mat(observed);
    let obs_real: Vec<bool> = observed.iter().map(|p| p.mask).collect();
    let fut_mat = rows_to_mat(future);
    let fut_real: Vec<bool> = future.iter().map(|p| p.mask).collect();
    let mut dropout = None;
    let enc = encoder_forward(&mut tape, &bound, &params.config, &obs_mat, &obs_real, &mut dropout);
    let dec_in = decoder_input(&mut tape, &bound, &params.config, &fut_mat);
    let out =
        decoder_forward(&mut tape, &bound, &params.config, dec_in, enc, &obs_real, &mut dropout);
    let loss = tape_loss(&mut tape, out, &fut_mat, spec, &fut_real)?;
    Ok(tape.value(loss).item())
}

/// Loss and gradients (aligned with `named_params` order) for one sequence.
pub fn loss_and_grads(
    params: &ModelParams,
    spec: &LossSpec,
    observed: &[PacketVector],
    future: &[PacketVector],
    dropout_seed: Option<u64>,
) -> Result<(f64, Vec<Mat>), LossError> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params);
    let obs_mat = rows_to_mat(observed);
    let obs_real: Vec<bool> = observed.iter().map(|p| p.mask).collect();
    let fut_mat = rows_to_mat(future);
    let fut_real: Vec<bool> = future.iter().map(|p| p.mask).collect();
    let mut dropout = dropout_seed.and_then(|seed| {
        if params.config.dropout_rate > 0.0 {
            Some(DropoutCtx { rng: ChaCha8Rng::seed_from_u64(seed), rate: params.config.dropout_rate })
        } else {
            None
        }
    });
    let enc = encoder_forward(&mut tape, &bound, &params.config, &obs_mat, &obs_real, &mut dropout);
    let dec_in = decoder_input(&mut tape, &bound, &params.config, &fut_mat);
    let out =
        decoder_forward(&mut tape, &bound, &params.config, dec_in, enc, &obs_real, &mut dropout);
    let loss = tape_loss(&mut tape, out, &fut_mat, spec, &fut_real)?;
    tape.backward(loss);
    let grads = bound.flat.iter().map(|&v| tape.grad(v)).collect();
    Ok((tape.value(loss).item(), grads))
}

impl ModelParams {
    /// Run the encoder alone, producing the latent z vectors.
    pub fn encode(&self, seq: &[PacketVector]) -> Result<EncodedSequence, EncodeError> {
        if seq.len() > self.config.max_seq_len {
            return Err(EncodeError::SequenceTooLong {
                len: seq.len(),
                max: self.config.max_seq_len,
            });
        }
        let mut tape = Tape::new();
        let bound = bind(&mut tape, self);
        let mat = rows_to_mat(seq);
        let real: Vec<bool> = seq.iter().map(|p| p.mask).collect();
        let mut dropout = None;
        let out = encoder_forward(&mut tape, &bound, &self.config, &mat, &real, &mut dropout);
        Ok(EncodedSequence { z: tape.value(out).clone(), mask: real })
    }

    /// Teacher-forced decoder outputs for given future rows (training path).
    pub fn decode_teacher(&self, observed: &[PacketVector], future: &[PacketVector]) -> Mat {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, self);
        let obs_mat = rows_to_mat(observed);
        let obs_real: Vec<bool> = observed.iter().map(|p| p.mask).collect();
        let fut_mat = rows_to_mat(future);
        let mut dropout = None;
        let enc =
            encoder_forward(&mut tape, &bound, &self.config, &obs_mat, &obs_real, &mut dropout);
        let dec_in = decoder_input(&mut tape, &bound, &self.config, &fut_mat);
        let out = decoder_forward(
            &mut tape,
            &bound,
            &self.config,
            dec_in,
            enc,
            &obs_real,
            &mut dropout,
        );
        tape.value(out).clone()
    }

    /// Autoregressive prediction: feed each prediction back as the next
    /// decoder input. Returns raw head scores (logits for binary/categorical
    /// channels, reals for numerical), one row per target position.
    pub fn decode_predict(
        &self,
        observed: &[PacketVector],
        target_len: usize,
        spec: &LossSpec,
    ) -> Mat {
        assert!(target_len >= 1);
        let mut fed: Vec<PacketVector> = Vec::new();
        let mut out = Mat::zeros(target_len, self.feature_width);
        for t in 0..target_len {
            // teacher path with the fed-back rows plus one dummy target row;
            // only rows <= t are causal inputs, the dummy is never attended.
            let mut future = fed.clone();
            future.push(PacketVector { values: vec![0.0; self.feature_width], mask: true });
            let pred = self.decode_teacher(observed, &future);
            let row = pred.row(t).to_vec();
            for (c, v) in row.iter().enumerate() {
                out.set(t, c, *v);
            }
            fed.push(PacketVector { values: readout(&row, spec), mask: true });
        }
        out
    }
}

/// Map raw head scores to a feedable input row: sigmoid for binary columns,
/// softmax within each categorical group, identity for numerical.
pub fn readout(scores: &[f64], spec: &LossSpec) -> Vec<f64> {
    let mut row = scores.to_vec();
    for &c in &spec.binary {
        row[c] = 1.0 / (1.0 + (-scores[c]).exp());
    }
    for &(start, len) in &spec.categorical {
        let logits = &scores[start..start + len];
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (i, e) in exps.iter().enumerate() {
            row[start + i] = e / sum;
        }
    }
    row
}

fn dropout_seed_for(base: u64, epoch: usize, seq_index: usize) -> u64 {
    // splitmix-style mixing keeps per-sequence dropout streams independent
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(epoch as u64 + 1))
        .wrapping_add(0xBF58_476D_1CE4_E5B9u64.wrapping_mul(seq_index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Train with ADAM on mini-batches. Per-sequence gradients are computed in
/// parallel but reduced in index order; the loss history is per-epoch mean
/// sequence loss.
pub fn train(
    dataset: &[(Vec<PacketVector>, Vec<PacketVector>)],
    config: TransformerConfig,
    settings: TrainSettings,
    spec: &LossSpec,
    feature_width: usize,
) -> Result<(ModelParams, Vec<f64>), TrainError> {
    config.validate().expect("invalid transformer config");
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for (i, (obs, fut)) in dataset.iter().enumerate() {
        if obs.len() > config.max_seq_len || fut.len() > config.max_seq_len {
            return Err(TrainError::SequenceTooLong { index: i, max: config.max_seq_len });
        }
    }
    let mut params = ModelParams::init(config, feature_width, settings.seed);
    let sizes: Vec<usize> = params.named_params().iter().map(|(_, m)| m.len()).collect();
    let mut adam = Adam::new(settings.learning_rate, &sizes);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(settings.seed.wrapping_add(1));
    let mut history = Vec::with_capacity(settings.epochs);
    let batch_size = settings.batch_size.max(1);

    for epoch in 0..settings.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        // Fisher-Yates with the session RNG keeps epochs reproducible.
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(batch_size).enumerate() {
            let results: Vec<Result<(f64, Vec<Mat>), LossError>> = batch
                .par_iter()
                .map(|&si| {
                    let (obs, fut) = &dataset[si];
                    let dseed = if params.config.dropout_rate > 0.0 {
                        Some(dropout_seed_for(settings.seed, epoch, si))
                    } else {
                        None
                    };
                    loss_and_grads(&params, spec, obs, fut, dseed)
                })
                .collect();
            let mut batch_loss = 0.0;
            let mut summed: Option<Vec<Mat>> = None;
            for r in results {
                let (loss, grads) = r?;
                batch_loss += loss;
                match summed.as_mut() {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                    }
                    None => summed = Some(grads),
                }
            }
            let mut grads = summed.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            for g in grads.iter_mut() {
                for x in g.data_mut() {
                    *x *= inv;
                }
            }
            batch_loss *= inv;
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: batch_idx, loss: batch_loss });
            }
            epoch_loss += batch_loss * batch.len() as f64;
            let mut slots = params.params_mut();
            adam.step(&mut slots, &grads);
        }
        epoch_loss /= dataset.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, batch: 0, loss: epoch_loss });
        }
        history.push(epoch_loss);
    }
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::tcp_schema;

    fn tiny_config() -> TransformerConfig {
        TransformerConfig {
            d_z: 8,
            n_heads: 1,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            ff_width: 16,
            max_seq_len: 16,
            dropout_rate: 0.0,
        }
    }

    fn rand_rows(rng: &mut ChaCha8Rng, n: usize, w: usize) -> Vec<PacketVector> {
        (0..n)
            .map(|_| PacketVector {
                values: (0..w).map(|_| rng.random_range(-1.0..1.0)).collect(),
                mask: true,
            })
            .collect()
    }

    /// Minimal 4-column layout: binary, 2-class categorical, numerical.
    fn mini_spec() -> LossSpec {
        LossSpec { binary: vec![0], numerical: vec![3], categorical: vec![(1, 2)] }
    }

    #[test]
    fn config_validation() {
        assert!(TransformerConfig::default().validate().is_ok());
        let bad = TransformerConfig { d_z: 10, n_heads: 4, ..tiny_config() };
        assert_eq!(bad.validate(), Err(ConfigError::HeadSplit { d_z: 10, n_heads: 4 }));
        let bad = TransformerConfig { max_seq_len: 1, ..tiny_config() };
        assert_eq!(bad.validate(), Err(ConfigError::MaxSeqLen(1)));
        let bad = TransformerConfig { dropout_rate: 1.0, ..tiny_config() };
        assert_eq!(bad.validate(), Err(ConfigError::Dropout(1.0)));
    }

    #[test]
    fn positional_encoding_identities() {
        let d = 8;
        let p0 = positional_encoding(0, d);
        for (i, v) in p0.iter().enumerate() {
            if i % 2 == 0 {
                assert_eq!(*v, 0.0);
            } else {
                assert_eq!(*v, 1.0);
            }
        }
        for pos in [1usize, 7, 100] {
            let row = positional_encoding(pos, d);
            assert!((row[0] - (pos as f64).sin()).abs() < 1e-15);
            assert!(row.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn attention_uniform_and_singleton() {
        let q = Mat::from_rows(&[vec![0.3, -0.2], vec![1.0, 2.0]]);
        let k = Mat::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5], vec![0.5, 0.5]]);
        let v = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]]);
        let out = scaled_dot_attention(&q, &k, &v, None);
        // identical keys: every output row is the mean of V rows
        for r in 0..2 {
            assert!((out.at(r, 0) - 1.0).abs() < 1e-6);
            assert!((out.at(r, 1) - 1.0).abs() < 1e-6);
        }

        let k1 = Mat::from_rows(&[vec![0.9, -3.0]]);
        let v1 = Mat::from_rows(&[vec![4.0, 5.0]]);
        let out = scaled_dot_attention(&q, &k1, &v1, None);
        for r in 0..2 {
            assert_eq!(out.row(r), &[4.0, 5.0]);
        }
    }

    #[test]
    fn attention_hand_oracle() {
        // softmax(1/sqrt(2), 0) computed with scalar arithmetic
        let q = Mat::from_rows(&[vec![1.0, 0.0]]);
        let k = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let v = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let out = scaled_dot_attention(&q, &k, &v, None);
        let e = (1.0f64 / 2.0f64.sqrt()).exp();
        let w1 = e / (e + 1.0);
        let w2 = 1.0 / (e + 1.0);
        assert!((out.at(0, 0) - w1).abs() < 1e-12);
        assert!((out.at(0, 1) - w2).abs() < 1e-12);
        assert!((w1 - 0.6698).abs() < 2e-4);
        assert!((w2 - 0.3302).abs() < 2e-4);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 6;
        let q_rows: Vec<Vec<f64>> =
            (0..n).map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let q = Mat::from_rows(&q_rows);
        let logits = q.matmul(&q.transpose());
        let mut mask = AttnMask::all_allowed(n, n);
        mask.set(0, 3, false);
        mask.set(2, 0, false);
        let sm = softmax_rows_masked(&logits, Some(&mask));
        for r in 0..n {
            let mut sum = 0.0;
            for c in 0..n {
                assert!(sm.at(r, c) >= 0.0);
                if !mask.is_allowed(r, c) {
                    assert_eq!(sm.at(r, c), 0.0);
                }
                sum += sm.at(r, c);
            }
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn encode_shapes_and_padding_invariance() {
        let cfg = tiny_config();
        let params = ModelParams::init(cfg, 4, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let seq = rand_rows(&mut rng, 5, 4);
        let enc = params.encode(&seq).unwrap();
        assert_eq!(enc.z.rows(), 5);
        assert_eq!(enc.z.cols(), 8);
        assert!(enc.z.all_finite());

        let mut padded = seq.clone();
        padded.push(PacketVector::padding(4));
        padded.push(PacketVector::padding(4));
        let enc2 = params.encode(&padded).unwrap();
        for r in 0..5 {
            for c in 0..8 {
                assert!(
                    (enc.z.at(r, c) - enc2.z.at(r, c)).abs() < 1e-6,
                    "padding changed real z at ({r},{c})"
                );
            }
        }
        assert!(!enc2.mask[5]);
    }

    #[test]
    fn encode_rejects_overlong() {
        let cfg = tiny_config();
        let params = ModelParams::init(cfg, 4, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let seq = rand_rows(&mut rng, 17, 4);
        assert!(params.encode(&seq).is_err());
    }

    #[test]
    fn distinct_packets_distinct_latents() {
        let cfg = tiny_config();
        let params = ModelParams::init(cfg, 4, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = rand_rows(&mut rng, 3, 4);
        let mut b = a.clone();
        b[1].values[2] += 0.5;
        let za = params.encode(&a).unwrap().z;
        let zb = params.encode(&b).unwrap().z;
        let diff: f64 = (0..8).map(|c| (za.at(1, c) - zb.at(1, c)).abs()).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn encoder_rows_normalized_with_unit_gain() {
        // final encoder op is add&norm; with gain=1, offset=0 every output
        // row has mean ~0 and variance ~1
        let cfg = tiny_config();
        let params = ModelParams::init(cfg, 4, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seq = rand_rows(&mut rng, 4, 4);
        let z = params.encode(&seq).unwrap().z;
        for r in 0..z.rows() {
            let row = z.row(r);
            let mean: f64 = row.iter().sum::<f64>() / row.len() as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
            assert!(mean.abs() < 1e-9, "row {r} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "row {r} var {var}");
        }
    }

    #[test]
    fn decoder_causality_exact() {
        let cfg = tiny_config();
        let params = ModelParams::init(cfg, 4, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let obs = rand_rows(&mut rng, 4, 4);
        let fut = rand_rows(&mut rng, 4, 4);
        let base = params.decode_teacher(&obs, &fut);
        let mut edited = fut.clone();
        edited[3].values = vec![9.0, -9.0, 4.0, 4.0];
        let changed = params.decode_teacher(&obs, &edited);
        // the last future row is never a decoder input (inputs are W0 plus
        // future[..len-1]), so nothing may change
        for r in 0..4 {
            assert_eq!(base.row(r), changed.row(r), "row {r}");
        }
        // editing future[1] may change rows 2..3 but not rows 0..=1
        let mut edited = fut.clone();
        edited[1].values = vec![5.0, 5.0, -5.0, 0.5];
        let changed = params.decode_teacher(&obs, &edited);
        for r in 0..2 {
            assert_eq!(base.row(r), changed.row(r), "row {r}");
        }
        let moved: f64 = (0..4).map(|c| (base.at(2, c) - changed.at(2, c)).abs()).sum();
        assert!(moved > 0.0, "causal downstream rows should move");
    }

    #[test]
    fn first_prediction_uses_only_w0_and_encoder() {
        let cfg = tiny_config();
        let params = ModelParams::init(cfg, 4, 23);
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let obs = rand_rows(&mut rng, 3, 4);
        let fut_a = rand_rows(&mut rng, 2, 4);
        let fut_b = rand_rows(&mut rng, 2, 4);
        let pa = params.decode_teacher(&obs, &fut_a);
        let pb = params.decode_teacher(&obs, &fut_b);
        assert_eq!(pa.row(0), pb.row(0));
    }

    #[test]
    fn decode_predict_matches_first_teacher_row() {
        let cfg = tiny_config();
        let params = ModelParams::init(cfg, 4, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let obs = rand_rows(&mut rng, 3, 4);
        let spec = mini_spec();
        let pred = params.decode_predict(&obs, 3, &spec);
        assert_eq!(pred.rows(), 3);
        assert!(pred.all_finite());
        let fut = rand_rows(&mut rng, 1, 4);
        let teach = params.decode_teacher(&obs, &fut);
        assert_eq!(pred.row(0), teach.row(0));
    }

    #[test]
    fn loss_perfect_prediction_near_zero() {
        let spec = mini_spec();
        // target: binary 1, one-hot class 0, numerical 0.7
        let target = Mat::from_rows(&[vec![1.0, 1.0, 0.0, 0.7]]);
        let pred = Mat::from_rows(&[vec![40.0, 40.0, -40.0, 0.7]]);
        let loss = mixed_loss(&pred, &target, &spec, &[true]).unwrap();
        assert!(loss.abs() < 1e-10, "loss {loss}");
    }

    #[test]
    fn loss_known_values() {
        // single numerical channel: pred 0.5 vs target 0 -> 0.25
        let spec = LossSpec { binary: vec![], numerical: vec![0], categorical: vec![] };
        let loss = mixed_loss(
            &Mat::from_rows(&[vec![0.5]]),
            &Mat::from_rows(&[vec![0.0]]),
            &spec,
            &[true],
        )
        .unwrap();
        assert!((loss - 0.25).abs() < 1e-12);

        // 2-class categorical with uniform logits -> ln 2
        let spec = LossSpec { binary: vec![], numerical: vec![], categorical: vec![(0, 2)] };
        let loss = mixed_loss(
            &Mat::from_rows(&[vec![0.3, 0.3]]),
            &Mat::from_rows(&[vec![1.0, 0.0]]),
            &spec,
            &[true],
        )
        .unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_masked_rows_excluded() {
        let spec = LossSpec { binary: vec![], numerical: vec![0], categorical: vec![] };
        let pred = Mat::from_rows(&[vec![1.0], vec![100.0]]);
        let target = Mat::from_rows(&[vec![0.0], vec![0.0]]);
        let loss = mixed_loss(&pred, &target, &spec, &[true, false]).unwrap();
        assert!((loss - 1.0).abs() < 1e-12);
        assert_eq!(
            mixed_loss(&pred, &target, &spec, &[false, false]).unwrap_err(),
            LossError::AllMasked
        );
    }

    #[test]
    fn gradients_match_finite_differences_smoke() {
        // Small smoke version of the full acceptance gradient check.
        let cfg = tiny_config();
        let spec = mini_spec();
        let params = ModelParams::init(cfg, 4, 41);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let obs = rand_rows(&mut rng, 2, 4);
        let fut = rand_rows(&mut rng, 2, 4);
        let (_, grads) = loss_and_grads(&params, &spec, &obs, &fut, None).unwrap();
        let names: Vec<String> =
            params.named_params().iter().map(|(n, _)| n.clone()).collect();
        // probe a few entries of every few tensors
        let h = 1e-5;
        for (pi, name) in names.iter().enumerate() {
            if pi % 7 != 0 && name != "w0" {
                continue;
            }
            let len = params.named_params()[pi].1.len();
            for j in [0, len / 2] {
                let mut plus = params.clone();
                plus.params_mut()[pi].data_mut()[j] += h;
                let mut minus = params.clone();
                minus.params_mut()[pi].data_mut()[j] -= h;
                let lp = forward_loss(&plus, &spec, &obs, &fut).unwrap();
                let lm = forward_loss(&minus, &spec, &obs, &fut).unwrap();
                let num = (lp - lm) / (2.0 * h);
                let ana = grads[pi].data()[j];
                let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1.0);
                assert!(err < 1e-4, "{name}[{j}]: analytic {ana} vs numeric {num}");
            }
        }
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let cfg = TransformerConfig { max_seq_len: 8, ..tiny_config() };
        let spec = mini_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        // learnable structure: binary flag mirrors a simple pattern
        let dataset: Vec<(Vec<PacketVector>, Vec<PacketVector>)> = (0..20)
            .map(|i| {
                let bit = (i % 2) as f64;
                let mut mk = |_: usize| PacketVector {
                    values: vec![bit, 1.0 - bit, bit, 0.25 + 0.5 * bit + rng.random_range(-0.01..0.01)],
                    mask: true,
                };
                let observed: Vec<PacketVector> = (0..4).map(&mut mk).collect();
                let future: Vec<PacketVector> = (0..3).map(&mut mk).collect();
                (observed, future)
            })
            .collect();
        let settings =
            TrainSettings { learning_rate: 3e-3, batch_size: 8, epochs: 6, seed: 123 };
        let (params, history) = train(&dataset, cfg, settings, &spec, 4).unwrap();
        assert_eq!(history.len(), 6);
        assert!(history.iter().all(|l| l.is_finite()));
        assert!(history.last().unwrap() < history.first().unwrap());
        assert!(params.all_finite());

        let (_, history2) = train(&dataset, cfg, settings, &spec, 4).unwrap();
        assert_eq!(history, history2, "same seed must give identical histories");
    }

    #[test]
    fn train_rejects_empty_and_overlong() {
        let cfg = tiny_config();
        let spec = mini_spec();
        assert!(matches!(
            train(&[], cfg, TrainSettings::default(), &spec, 4),
            Err(TrainError::EmptyDataset)
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let long = rand_rows(&mut rng, 17, 4);
        let ds = vec![(long.clone(), long)];
        assert!(matches!(
            train(&ds, cfg, TrainSettings::default(), &spec, 4),
            Err(TrainError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn loss_spec_from_schema() {
        let schema = tcp_schema();
        let spec = LossSpec::from_schema(&schema);
        assert_eq!(spec.binary.len(), 5);
        assert_eq!(spec.numerical.len(), 9);
        assert_eq!(spec.categorical, vec![(5, 5), (10, 11)]);
        // widths line up with the schema
        let covered: usize =
            spec.binary.len() + spec.numerical.len() + spec.categorical.iter().map(|g| g.1).sum::<usize>();
        assert_eq!(covered, schema.total_width());
    }
}

