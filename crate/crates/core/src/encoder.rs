//! Toy text encoder and the masked-autoencoding decoder used to pretrain it.
//!
//! The encoder mean-pools token embeddings, applies a `d x d` linear map and
//! L2-normalizes:
//!
//! ```text
//! m = mean_i token_table[x_i]      z = m · P      e = z / |z|
//! ```
//!
//! The decoder reconstructs every clean token from the embedding of the
//! corrupted sequence, `logits_i = (e + position_table[i]) · W_out`, and the
//! pretraining loss is `Σ_i −log softmax(logits_i)[x_i]`.

use rand::seq::index;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::sim::{dot, Embedding};
use crate::tokenizer::{TokenSequence, MASK};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    vocab_size: usize,
    dim: usize,
    /// `vocab_size x dim`, row-major.
    token_table: Vec<f64>,
    /// `dim x dim`, row-major.
    projection: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct EncodeTrace {
    pooled: Vec<f64>,
    norm: f64,
    output: Embedding,
}

impl EncodeTrace {
    pub fn embedding(&self) -> &Embedding {
        &self.output
    }

    pub fn into_embedding(self) -> Embedding {
        self.output
    }
}

/// Gradient buffers matching [`ToyEncoder`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub token_table: Vec<f64>,
    pub projection: Vec<f64>,
}

impl ToyEncoder {
    /// Gaussian token table, identity projection.
    pub fn random<R: Rng>(vocab_size: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if vocab_size == 0 || dim == 0 {
            return Err(Error::invalid("encoder", "vocab_size and dim must be >= 1"));
        }
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let token_table = (0..vocab_size * dim).map(|_| normal.sample(rng)).collect();
        let mut projection = vec![0.0; dim * dim];
        for i in 0..dim {
            projection[i * dim + i] = 1.0;
        }
        Ok(Self {
            vocab_size,
            dim,
            token_table,
            projection,
        })
    }

    pub fn from_parts(
        vocab_size: usize,
        dim: usize,
        token_table: Vec<f64>,
        projection: Vec<f64>,
    ) -> Result<Self> {
        if vocab_size == 0 || dim == 0 {
            return Err(Error::invalid("encoder", "vocab_size and dim must be >= 1"));
        }
        if token_table.len() != vocab_size * dim || projection.len() != dim * dim {
            return Err(Error::Shape(format!(
                "token table has {} values (want {}), projection {} (want {})",
                token_table.len(),
                vocab_size * dim,
                projection.len(),
                dim * dim
            )));
        }
        Ok(Self {
            vocab_size,
            dim,
            token_table,
            projection,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn token_table(&self) -> &[f64] {
        &self.token_table
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    pub fn token_row(&self, id: u32) -> &[f64] {
        let i = id as usize * self.dim;
        &self.token_table[i..i + self.dim]
    }

    pub fn params_mut(&mut self) -> [&mut [f64]; 2] {
        [&mut self.token_table, &mut self.projection]
    }

    pub fn zero_grads(&self) -> EncoderGrads {
        EncoderGrads {
            token_table: vec![0.0; self.token_table.len()],
            projection: vec![0.0; self.projection.len()],
        }
    }

    pub fn encode(&self, seq: &TokenSequence) -> Result<Embedding> {
        self.trace(seq).map(EncodeTrace::into_embedding)
    }

    pub fn trace(&self, seq: &TokenSequence) -> Result<EncodeTrace> {
        seq.check_vocab(self.vocab_size)?;
        let d = self.dim;
        let mut pooled = vec![0.0; d];
        for &id in seq.tokens() {
            for (p, v) in pooled.iter_mut().zip(self.token_row(id)) {
                *p += v;
            }
        }
        let inv_len = 1.0 / seq.len() as f64;
        pooled.iter_mut().for_each(|p| *p *= inv_len);

        let mut projected = vec![0.0; d];
        for (i, &m) in pooled.iter().enumerate() {
            let row = &self.projection[i * d..(i + 1) * d];
            for (z, w) in projected.iter_mut().zip(row) {
                *z += m * w;
            }
        }
        let norm = dot(&projected, &projected).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroNorm("encoder output before normalization".into()));
        }
        projected.iter_mut().for_each(|z| *z /= norm);
        Ok(EncodeTrace {
            pooled,
            norm,
            output: Embedding::new(projected)?,
        })
    }

    /// Accumulates `∂L/∂params` into `grads` given `∂L/∂e` for the output of
    /// `trace` on `seq`.
    pub fn backward(
        &self,
        seq: &TokenSequence,
        trace: &EncodeTrace,
        grad_out: &[f64],
        grads: &mut EncoderGrads,
    ) {
        let d = self.dim;
        let e = trace.output.as_slice();
        // through the normalization: (g − (g·e)e) / |z|
        let ge = dot(grad_out, e);
        let grad_z: Vec<f64> = grad_out
            .iter()
            .zip(e)
            .map(|(g, ei)| (g - ge * ei) / trace.norm)
            .collect();

        let mut grad_pooled = vec![0.0; d];
        let rows = self.projection.chunks(d).zip(grads.projection.chunks_mut(d));
        for ((row, grow), (&m, gp)) in rows.zip(trace.pooled.iter().zip(&mut grad_pooled)) {
            let mut acc = 0.0;
            for ((g, &w), &gz) in grow.iter_mut().zip(row).zip(&grad_z) {
                *g += m * gz;
                acc += w * gz;
            }
            *gp = acc;
        }

        let inv_len = 1.0 / seq.len() as f64;
        for &id in seq.tokens() {
            let start = id as usize * d;
            for (g, gp) in grads.token_table[start..start + d].iter_mut().zip(&grad_pooled) {
                *g += gp * inv_len;
            }
        }
    }
}

/// Replaces `⌈mask_ratio · len⌉` positions, chosen without replacement, with
/// the `[MASK]` id.
pub fn corrupt(seq: &TokenSequence, mask_ratio: f64, seed: u64) -> Result<TokenSequence> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(Error::invalid("mask_ratio", format!("must lie in [0, 1), got {mask_ratio}")));
    }
    let len = seq.len();
    // the small offset keeps e.g. 0.3 * 10 from rounding up to 4
    let count = ((mask_ratio * len as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut tokens = seq.tokens().to_vec();
    if count > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in index::sample(&mut rng, len, count.min(len)) {
            tokens[i] = MASK;
        }
    }
    TokenSequence::new(tokens)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaeDecoder {
    positions: usize,
    dim: usize,
    vocab_size: usize,
    /// `positions x dim`, row-major.
    position_table: Vec<f64>,
    /// `dim x vocab_size`, row-major.
    output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderGrads {
    pub position_table: Vec<f64>,
    pub output: Vec<f64>,
}

impl MaeDecoder {
    pub fn random<R: Rng>(positions: usize, dim: usize, vocab_size: usize, rng: &mut R) -> Result<Self> {
        if positions == 0 || dim == 0 || vocab_size == 0 {
            return Err(Error::invalid("decoder", "positions, dim and vocab_size must be >= 1"));
        }
        let pos_dist = Normal::new(0.0, 0.1).expect("valid normal");
        let out_dist = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid normal");
        Ok(Self {
            positions,
            dim,
            vocab_size,
            position_table: (0..positions * dim).map(|_| pos_dist.sample(rng)).collect(),
            output: (0..dim * vocab_size).map(|_| out_dist.sample(rng)).collect(),
        })
    }

    pub fn from_parts(
        positions: usize,
        dim: usize,
        vocab_size: usize,
        position_table: Vec<f64>,
        output: Vec<f64>,
    ) -> Result<Self> {
        if positions == 0 || dim == 0 || vocab_size == 0 {
            return Err(Error::invalid("decoder", "positions, dim and vocab_size must be >= 1"));
        }
        if position_table.len() != positions * dim || output.len() != dim * vocab_size {
            return Err(Error::Shape(format!(
                "position table has {} values (want {}), output {} (want {})",
                position_table.len(),
                positions * dim,
                output.len(),
                dim * vocab_size
            )));
        }
        Ok(Self {
            positions,
            dim,
            vocab_size,
            position_table,
            output,
        })
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn position_table(&self) -> &[f64] {
        &self.position_table
    }

    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn params_mut(&mut self) -> [&mut [f64]; 2] {
        [&mut self.position_table, &mut self.output]
    }

    pub fn zero_grads(&self) -> DecoderGrads {
        DecoderGrads {
            position_table: vec![0.0; self.position_table.len()],
            output: vec![0.0; self.output.len()],
        }
    }

    fn logits(&self, hidden: &[f64]) -> Vec<f64> {
        let mut logits = vec![0.0; self.vocab_size];
        for (j, h) in hidden.iter().enumerate() {
            let row = &self.output[j * self.vocab_size..(j + 1) * self.vocab_size];
            for (l, w) in logits.iter_mut().zip(row) {
                *l += h * w;
            }
        }
        logits
    }
}

fn check_pair(enc: &ToyEncoder, dec: &MaeDecoder, clean: &TokenSequence, corrupted: &TokenSequence) -> Result<()> {
    if clean.len() != corrupted.len() {
        return Err(Error::Shape(format!(
            "clean sequence has {} tokens, corrupted {}",
            clean.len(),
            corrupted.len()
        )));
    }
    if clean.len() > dec.positions {
        return Err(Error::Shape(format!(
            "sequence length {} exceeds decoder positions {}",
            clean.len(),
            dec.positions
        )));
    }
    if enc.dim != dec.dim || enc.vocab_size != dec.vocab_size {
        return Err(Error::Shape("encoder and decoder disagree on dim or vocabulary".into()));
    }
    clean.check_vocab(dec.vocab_size)
}

/// Reconstruction loss of `clean` from the embedding of `corrupted`.
pub fn mae_loss(enc: &ToyEncoder, dec: &MaeDecoder, clean: &TokenSequence, corrupted: &TokenSequence) -> Result<f64> {
    mae_forward(enc, dec, clean, corrupted, None)
}

/// [`mae_loss`] plus gradients accumulated into the supplied buffers.
pub fn mae_loss_and_grads(
    enc: &ToyEncoder,
    dec: &MaeDecoder,
    clean: &TokenSequence,
    corrupted: &TokenSequence,
    enc_grads: &mut EncoderGrads,
    dec_grads: &mut DecoderGrads,
) -> Result<f64> {
    mae_forward(enc, dec, clean, corrupted, Some((enc_grads, dec_grads)))
}

fn mae_forward(
    enc: &ToyEncoder,
    dec: &MaeDecoder,
    clean: &TokenSequence,
    corrupted: &TokenSequence,
    mut grads: Option<(&mut EncoderGrads, &mut DecoderGrads)>,
) -> Result<f64> {
    check_pair(enc, dec, clean, corrupted)?;
    let trace = enc.trace(corrupted)?;
    let e = trace.output.as_slice();
    let d = dec.dim;
    let v = dec.vocab_size;
    let mut grad_e = vec![0.0; d];
    let mut loss = 0.0;

    for (i, &target) in clean.tokens().iter().enumerate() {
        let pos_row = &dec.position_table[i * d..(i + 1) * d];
        let hidden: Vec<f64> = e.iter().zip(pos_row).map(|(a, b)| a + b).collect();
        let logits = dec.logits(&hidden);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - logits[target as usize];

        if let Some((_, dg)) = grads.as_mut() {
            // dlogits = softmax − onehot
            let mut dlogits: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
            dlogits[target as usize] -= 1.0;
            for j in 0..d {
                let out_row = &dec.output[j * v..(j + 1) * v];
                let grow = &mut dg.output[j * v..(j + 1) * v];
                let mut acc = 0.0;
                for k in 0..v {
                    grow[k] += hidden[j] * dlogits[k];
                    acc += out_row[k] * dlogits[k];
                }
                dg.position_table[i * d + j] += acc;
                grad_e[j] += acc;
            }
        }
    }

    if let Some((eg, _)) = grads {
        enc.backward(corrupted, &trace, &grad_e, eg);
    }
    Ok(loss)
}
