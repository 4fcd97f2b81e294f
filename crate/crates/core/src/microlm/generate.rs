use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{attend_row, head, post_attention, project, Weights};
use super::{MicroLmParams, ModelMode};
use crate::corpus::TokenId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    /// 0 selects greedy arg-max decoding.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            max_new_tokens: 128,
            temperature: 1.0,
            seed: 0,
        }
    }
}

/// Incremental causal decoder. Each step runs the same kernels as the
/// full forward pass, so its logits match `forward_logits` bitwise.
struct Decoder<'a> {
    w: Weights<'a>,
    keys: Vec<f64>,
    values: Vec<f64>,
    len: usize,
}

impl<'a> Decoder<'a> {
    fn new(params: &'a MicroLmParams) -> Self {
        Decoder {
            w: Weights::new(params),
            keys: Vec::new(),
            values: Vec::new(),
            len: 0,
        }
    }

    /// Appends `token` and returns the logits for the following position.
    fn step(&mut self, token: TokenId, logits: &mut [f64]) {
        let d = self.w.d;
        let i = self.len;
        let t = token as usize;
        let x0: Vec<f64> = self.w.e[t * d..(t + 1) * d]
            .iter()
            .zip(&self.w.pos[i * d..(i + 1) * d])
            .map(|(e, p)| e + p)
            .collect();
        let proj = project(&self.w, &x0);
        self.keys.extend_from_slice(&proj.k);
        self.values.extend_from_slice(&proj.v);
        self.len += 1;

        let mut att = vec![0.0; self.len];
        let mut o = vec![0.0; d];
        attend_row(&self.w, &proj.q, &self.keys, &self.values, &mut att, &mut o);
        let post = post_attention(&self.w, &x0, &o);
        head(&self.w, &post.f, logits);
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample(row: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = row
        .iter()
        .map(|l| ((l - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    argmax(row)
}

/// Autoregressive continuation of `prompt`; returns only the new tokens.
pub fn generate(
    params: &MicroLmParams,
    prompt: &[TokenId],
    config: &GenerationConfig,
) -> Result<Vec<TokenId>> {
    if params.mode() != ModelMode::Causal {
        return Err(Error::WrongMode { expected: "causal" });
    }
    if prompt.is_empty() {
        return Err(Error::config("prompt must hold at least one token"));
    }
    if !(config.temperature >= 0.0) {
        return Err(Error::config("temperature must be >= 0"));
    }
    let total = prompt.len() + config.max_new_tokens;
    if total > params.shape().max_len {
        return Err(Error::SequenceTooLong {
            len: total,
            max_len: params.shape().max_len,
        });
    }
    params.check_tokens(prompt)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dec = Decoder::new(params);
    let mut logits = vec![0.0; params.shape().vocab_size];
    for &t in prompt {
        dec.step(t, &mut logits);
    }
    let mut out = Vec::with_capacity(config.max_new_tokens);
    for n in 0..config.max_new_tokens {
        let next = if config.temperature == 0.0 {
            argmax(&logits)
        } else {
            sample(&logits, config.temperature, &mut rng)
        } as TokenId;
        out.push(next);
        if n + 1 < config.max_new_tokens {
            dec.step(next, &mut logits);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microlm::{forward_logits, ModelShape, Tensor};

    fn model() -> MicroLmParams {
        MicroLmParams::init_with_scale(ModelShape::new(ModelMode::Causal, 10, 8, 32), 4, 0.5)
            .unwrap()
    }

    #[test]
    fn decoder_matches_full_forward_bitwise() {
        let p = model();
        let tokens = [1, 4, 2, 8, 5, 7];
        let full = forward_logits(&p, &tokens).unwrap();
        let mut dec = Decoder::new(&p);
        let mut row = vec![0.0; 10];
        for (i, &t) in tokens.iter().enumerate() {
            dec.step(t, &mut row);
            assert_eq!(row.as_slice(), full.row(i));
        }
    }

    #[test]
    fn greedy_is_repeated_argmax() {
        let p = model();
        let cfg = GenerationConfig {
            max_new_tokens: 6,
            temperature: 0.0,
            seed: 1,
        };
        let out = generate(&p, &[3, 1], &cfg).unwrap();
        assert_eq!(
            out,
            generate(
                &p,
                &[3, 1],
                &GenerationConfig {
                    seed: 99,
                    ..cfg.clone()
                }
            )
            .unwrap()
        );
        let mut seq = vec![3, 1];
        for &t in &out {
            let l = forward_logits(&p, &seq).unwrap();
            assert_eq!(argmax(l.row(seq.len() - 1)) as TokenId, t);
            seq.push(t);
        }
    }

    #[test]
    fn constant_argmax_model_repeats_token() {
        let mut p = MicroLmParams::zeros(ModelShape::new(ModelMode::Causal, 5, 5, 16)).unwrap();
        p.get_mut(Tensor::OutNormBias)[0] = 1.0;
        p.get_mut(Tensor::TokenEmbedding)[3 * 5] = 4.0;
        let cfg = GenerationConfig {
            max_new_tokens: 8,
            temperature: 0.0,
            seed: 0,
        };
        assert_eq!(generate(&p, &[0], &cfg).unwrap(), vec![3; 8]);
    }

    #[test]
    fn sampling_is_seeded() {
        let p = model();
        let cfg = GenerationConfig {
            max_new_tokens: 20,
            temperature: 1.0,
            seed: 5,
        };
        let a = generate(&p, &[2], &cfg).unwrap();
        assert_eq!(a, generate(&p, &[2], &cfg).unwrap());
        let b = generate(&p, &[2], &GenerationConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn length_overflow() {
        let p = model();
        let cfg = GenerationConfig {
            max_new_tokens: 31,
            temperature: 0.0,
            seed: 0,
        };
        assert!(matches!(
            generate(&p, &[1, 2], &cfg),
            Err(Error::SequenceTooLong {
                len: 33,
                max_len: 32
            })
        ));
        assert!(generate(&p, &[], &cfg).is_err());
    }
}
