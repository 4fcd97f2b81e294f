//! A one-block transformer language model, small enough to train from
//! scratch on a CPU, with hand-written backpropagation.
//!
//! Architecture: token embedding + learned positions, a pre-norm single-head
//! self-attention block, a pre-norm GELU feed-forward block, a final norm and
//! an output head tied to the token embedding. The same parameters run in
//! causal mode (next-token prediction) or masked mode (bidirectional
//! attention, predicting the token at each position).
//!
//! Every sequence-level probability in this crate is the mean per-token
//! log-probability in nats.

mod generate;
mod io;
mod model;
mod train;

pub use generate::{generate, GenerationConfig};
pub use io::{load, read_params, save, write_params, FORMAT_VERSION, MAGIC};
pub use model::{
    clm_loss, clm_loss_gradient, forward_logits, mlm_fill, perplexity, score_embeddings,
    sequence_logprob, token_logprobs, Logits,
};
pub use train::{train, TrainConfig, TrainReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelMode {
    Causal,
    Masked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub mode: ModelMode,
    pub vocab_size: usize,
    pub dim: usize,
    pub max_len: usize,
}

impl ModelShape {
    pub fn new(mode: ModelMode, vocab_size: usize, dim: usize, max_len: usize) -> Self {
        ModelShape {
            mode,
            vocab_size,
            dim,
            max_len,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.dim == 0 || self.max_len == 0 {
            return Err(Error::config(format!("degenerate model shape {self:?}")));
        }
        Ok(())
    }
}

/// Named parameter tensors, in storage (and file) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tensor {
    TokenEmbedding,
    Position,
    Query,
    Key,
    Value,
    AttnOutput,
    FfnIn,
    FfnInBias,
    FfnOut,
    FfnOutBias,
    AttnNormGain,
    AttnNormBias,
    FfnNormGain,
    FfnNormBias,
    OutNormGain,
    OutNormBias,
}

impl Tensor {
    pub const ALL: [Tensor; 16] = [
        Tensor::TokenEmbedding,
        Tensor::Position,
        Tensor::Query,
        Tensor::Key,
        Tensor::Value,
        Tensor::AttnOutput,
        Tensor::FfnIn,
        Tensor::FfnInBias,
        Tensor::FfnOut,
        Tensor::FfnOutBias,
        Tensor::AttnNormGain,
        Tensor::AttnNormBias,
        Tensor::FfnNormGain,
        Tensor::FfnNormBias,
        Tensor::OutNormGain,
        Tensor::OutNormBias,
    ];

    pub fn len(self, shape: &ModelShape) -> usize {
        let d = shape.dim;
        match self {
            Tensor::TokenEmbedding => shape.vocab_size * d,
            Tensor::Position => shape.max_len * d,
            Tensor::Query | Tensor::Key | Tensor::Value | Tensor::AttnOutput => d * d,
            Tensor::FfnIn | Tensor::FfnOut => d * 4 * d,
            Tensor::FfnInBias => 4 * d,
            _ => d,
        }
    }

    /// Matrices receive weight decay; biases and norm parameters do not.
    pub(crate) fn decays(self) -> bool {
        matches!(
            self,
            Tensor::TokenEmbedding
                | Tensor::Position
                | Tensor::Query
                | Tensor::Key
                | Tensor::Value
                | Tensor::AttnOutput
                | Tensor::FfnIn
                | Tensor::FfnOut
        )
    }

    fn index(self) -> usize {
        Tensor::ALL.iter().position(|&t| t == self).unwrap()
    }
}

/// All learnable tensors of one model, stored contiguously in [`Tensor::ALL`]
/// order. Values are kept exactly representable as `f32` so that the model
/// file round-trips bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroLmParams {
    shape: ModelShape,
    offsets: [usize; 17],
    data: Vec<f64>,
}

fn offsets_for(shape: &ModelShape) -> [usize; 17] {
    let mut offsets = [0; 17];
    for (i, t) in Tensor::ALL.iter().enumerate() {
        offsets[i + 1] = offsets[i] + t.len(shape);
    }
    offsets
}

impl MicroLmParams {
    pub fn zeros(shape: ModelShape) -> Result<Self> {
        shape.validate()?;
        let offsets = offsets_for(&shape);
        Ok(MicroLmParams {
            shape,
            offsets,
            data: vec![0.0; offsets[16]],
        })
    }

    /// Seeded initialization: matrices ~ N(0, 0.02²), norm gains 1, biases 0.
    pub fn init(shape: ModelShape, seed: u64) -> Result<Self> {
        Self::init_with_scale(shape, seed, 0.02)
    }

    pub fn init_with_scale(shape: ModelShape, seed: u64, scale: f64) -> Result<Self> {
        let mut p = Self::zeros(shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale).map_err(|e| Error::config(e.to_string()))?;
        for t in Tensor::ALL {
            let gain = matches!(
                t,
                Tensor::AttnNormGain | Tensor::FfnNormGain | Tensor::OutNormGain
            );
            for w in p.get_mut(t) {
                *w = if t.decays() {
                    f64::from(normal.sample(&mut rng) as f32)
                } else if gain {
                    1.0
                } else {
                    0.0
                };
            }
        }
        Ok(p)
    }

    pub(crate) fn from_raw(shape: ModelShape, data: Vec<f64>) -> Result<Self> {
        let offsets = offsets_for(&shape);
        if data.len() != offsets[16] {
            return Err(Error::ModelFormat(format!(
                "expected {} parameters for {shape:?}, found {}",
                offsets[16],
                data.len()
            )));
        }
        Ok(MicroLmParams {
            shape,
            offsets,
            data,
        })
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn mode(&self) -> ModelMode {
        self.shape.mode
    }

    pub fn get(&self, t: Tensor) -> &[f64] {
        let i = t.index();
        &self.data[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn get_mut(&mut self, t: Tensor) -> &mut [f64] {
        let i = t.index();
        &mut self.data[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub(crate) fn tensor_range(&self, t: Tensor) -> std::ops::Range<usize> {
        let i = t.index();
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    /// Same weights with a different attention mode.
    pub fn with_mode(&self, mode: ModelMode) -> Self {
        let mut p = self.clone();
        p.shape.mode = mode;
        p
    }

    pub fn embedding_matrix(&self) -> EmbeddingMatrix {
        EmbeddingMatrix {
            rows: self.shape.vocab_size,
            dim: self.shape.dim,
            data: self.get(Tensor::TokenEmbedding).to_vec(),
        }
    }

    pub(crate) fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.len() > self.shape.max_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max_len: self.shape.max_len,
            });
        }
        if let Some(&id) = tokens
            .iter()
            .find(|&&t| t as usize >= self.shape.vocab_size)
        {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.shape.vocab_size,
            });
        }
        Ok(())
    }
}

/// Row-major token embedding matrix `E` (one row per token id).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim || rows == 0 {
            return Err(Error::config(format!(
                "embedding matrix of {rows}x{dim} needs {} values, got {}",
                rows * dim,
                data.len()
            )));
        }
        Ok(EmbeddingMatrix { rows, dim, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, id: TokenId) -> &[f64] {
        let i = id as usize;
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Concatenated rows for a token sequence (`|x| × d`).
    pub fn embed(&self, tokens: &[TokenId]) -> Vec<f64> {
        tokens
            .iter()
            .flat_map(|&t| self.row(t).iter().copied())
            .collect()
    }

    /// Row with the smallest Euclidean distance to `query`; ties go to the
    /// lowest id.
    pub fn nearest_token(&self, query: &[f64]) -> TokenId {
        let mut best = (0, f64::INFINITY);
        for id in 0..self.rows {
            let d2: f64 = self
                .row(id as TokenId)
                .iter()
                .zip(query)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d2 < best.1 {
                best = (id, d2);
            }
        }
        best.0 as TokenId
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_token_cases() {
        let e = EmbeddingMatrix::new(3, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(e.nearest_token(&[0.9, 0.1]), 1);
        for k in 0..3 {
            assert_eq!(e.nearest_token(e.row(k)), k);
        }
        // [0.5, 0.5] is equidistant from all three rows.
        assert_eq!(e.nearest_token(&[0.5, 0.5]), 0);
        assert_eq!(e.nearest_token(&[0.6, 0.6]), 1);
        assert_eq!(e.nearest_token(&[-1.0, 0.0]), 0);
    }

    #[test]
    fn layout_covers_all_tensors() {
        let shape = ModelShape::new(ModelMode::Causal, 259, 32, 128);
        let p = MicroLmParams::zeros(shape).unwrap();
        let expected: usize = Tensor::ALL.iter().map(|t| t.len(&shape)).sum();
        assert_eq!(p.num_params(), expected);
        assert_eq!(p.get(Tensor::TokenEmbedding).len(), 259 * 32);
        assert_eq!(p.get(Tensor::FfnIn).len(), 32 * 128);
    }

    #[test]
    fn init_is_seeded_and_f32_exact() {
        let shape = ModelShape::new(ModelMode::Causal, 11, 8, 16);
        let a = MicroLmParams::init(shape, 5).unwrap();
        assert_eq!(a, MicroLmParams::init(shape, 5).unwrap());
        assert_ne!(a, MicroLmParams::init(shape, 6).unwrap());
        assert!(a.as_slice().iter().all(|&w| f64::from(w as f32) == w));
        assert!(a.get(Tensor::OutNormGain).iter().all(|&g| g == 1.0));
    }
}
