use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{examples_loss, loss_and_gradient, Example};
use super::{MicroLmParams, ModelMode, Tensor};
use crate::corpus::{TokenId, TokenSequence};
use crate::error::{Error, Result};

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_mask_rate() -> f64 {
    0.2
}

/// AdamW training settings. In masked mode each sequence gets a fresh random
/// mask (rate `mask_rate`, at least one position) every time it is visited.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_mask_rate")]
    pub mask_rate: f64,
}

impl TrainConfig {
    /// Target fine-tuning defaults: lr 1e-4, 10 epochs, batch 16.
    pub fn target(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 10,
            batch_size: 16,
            seed,
            weight_decay: default_weight_decay(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            mask_rate: default_mask_rate(),
        }
    }

    /// Reference fine-tuning defaults: as [`TrainConfig::target`] with 4 epochs.
    pub fn reference(seed: u64) -> Self {
        TrainConfig {
            epochs: 4,
            ..Self::target(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be > 0"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::config("mask rate must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss before any update, measured over the whole dataset.
    pub initial_loss: f64,
    /// Mean batch loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl AdamW {
    fn new(n: usize) -> Self {
        AdamW {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut MicroLmParams, grad: &[f64], cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step);
        let bc2 = 1.0 - cfg.beta2.powi(self.step);
        let lr = cfg.learning_rate;
        for t in Tensor::ALL {
            let range = params.tensor_range(t);
            let decay = if t.decays() { cfg.weight_decay } else { 0.0 };
            let data = &mut params.as_mut_slice()[range.clone()];
            for (k, w) in range.zip(data.iter_mut()) {
                let g = grad[k];
                self.m[k] = cfg.beta1 * self.m[k] + (1.0 - cfg.beta1) * g;
                self.v[k] = cfg.beta2 * self.v[k] + (1.0 - cfg.beta2) * g * g;
                let mhat = self.m[k] / bc1;
                let vhat = self.v[k] / bc2;
                let updated = *w - lr * (mhat / (vhat.sqrt() + cfg.eps) + decay * *w);
                // Parameters stay f32-representable.
                *w = f64::from(updated as f32);
            }
        }
    }
}

fn masked_example(
    tokens: &[TokenId],
    mask_id: TokenId,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Example {
    let mut input = tokens.to_vec();
    let mut targets = Vec::new();
    for (i, t) in input.iter_mut().enumerate() {
        if rng.random::<f64>() < rate {
            targets.push((i, *t));
            *t = mask_id;
        }
    }
    if targets.is_empty() {
        let i = rng.random_range(0..tokens.len());
        targets.push((i, tokens[i]));
        input[i] = mask_id;
    }
    Example { input, targets }
}

/// The mask id convention shared with [`crate::corpus::Vocabulary`]: the
/// second-to-last id.
pub(crate) fn mask_id_for(params: &MicroLmParams) -> TokenId {
    (params.shape().vocab_size - 2) as TokenId
}

/// Trains in place from the given initialization. Deterministic in
/// (initial params, dataset, config).
pub fn train(
    mut params: MicroLmParams,
    dataset: &[TokenSequence],
    config: &TrainConfig,
) -> Result<(MicroLmParams, TrainReport)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for s in dataset {
        params.check_tokens(&s.tokens)?;
        if s.tokens.len() < 2 {
            return Err(Error::config(format!(
                "sequence {} is shorter than 2 tokens",
                s.id
            )));
        }
    }
    let masked = params.mode() == ModelMode::Masked;
    let mask_id = mask_id_for(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let make = |s: &TokenSequence, rng: &mut ChaCha8Rng| {
        if masked {
            masked_example(&s.tokens, mask_id, config.mask_rate, rng)
        } else {
            Example::causal(&s.tokens)
        }
    };

    let initial: Vec<Example> = dataset.iter().map(|s| make(s, &mut rng)).collect();
    let initial_loss = examples_loss(&params, &initial);

    let mut opt = AdamW::new(params.num_params());
    let mut grad = vec![0.0; params.num_params()];
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let examples: Vec<Example> =
                chunk.iter().map(|&i| make(&dataset[i], &mut rng)).collect();
            grad.fill(0.0);
            let loss = loss_and_gradient(&params, &examples, &mut grad);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch });
            }
            opt.update(&mut params, &grad, config);
            sum += loss;
            batches += 1;
        }
        epoch_losses.push(sum / batches as f64);
    }
    Ok((
        params,
        TrainReport {
            initial_loss,
            epoch_losses,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SplitLabel;
    use crate::microlm::{clm_loss, mlm_fill, ModelShape};

    fn shape(mode: ModelMode) -> ModelShape {
        ModelShape::new(mode, 12, 8, 16)
    }

    fn data() -> Vec<TokenSequence> {
        (0..6)
            .map(|i| {
                let tokens = (0..16)
                    .map(|j| ((i * 3 + j * (i + 1)) % 9) as u32)
                    .collect();
                TokenSequence::new(format!("s{i}"), tokens, SplitLabel::Member)
            })
            .collect()
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-2,
            epochs,
            batch_size: 4,
            ..TrainConfig::target(9)
        }
    }

    #[test]
    fn defaults() {
        let t = TrainConfig::target(0);
        assert_eq!((t.learning_rate, t.epochs, t.batch_size), (1e-4, 10, 16));
        let r = TrainConfig::reference(0);
        assert_eq!((r.learning_rate, r.epochs, r.batch_size), (1e-4, 4, 16));
        assert_eq!(
            (t.beta1, t.beta2, t.eps, t.weight_decay),
            (0.9, 0.999, 1e-8, 0.01)
        );
    }

    #[test]
    fn zero_epochs_rejected() {
        let p = MicroLmParams::init(shape(ModelMode::Causal), 0).unwrap();
        let err = train(p, &data(), &quick(0)).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn empty_dataset_rejected() {
        let p = MicroLmParams::init(shape(ModelMode::Causal), 0).unwrap();
        assert!(matches!(train(p, &[], &quick(1)), Err(Error::EmptyBatch)));
    }

    #[test]
    fn loss_decreases_and_is_deterministic() {
        let p = MicroLmParams::init(shape(ModelMode::Causal), 0).unwrap();
        let (a, report) = train(p.clone(), &data(), &quick(20)).unwrap();
        let (b, _) = train(p, &data(), &quick(20)).unwrap();
        assert_eq!(a, b);
        let end = clm_loss(&a, &data()).unwrap();
        assert!(
            end < report.initial_loss,
            "{end} vs {}",
            report.initial_loss
        );
        assert!(report.epoch_losses.iter().all(|l| l.is_finite()));
        assert!(a.as_slice().iter().all(|&w| f64::from(w as f32) == w));
    }

    #[test]
    fn divergence_reports_epoch() {
        let mut p = MicroLmParams::init(shape(ModelMode::Causal), 0).unwrap();
        p.get_mut(Tensor::OutNormGain)[0] = f64::NAN;
        match train(p, &data(), &quick(2)) {
            Err(Error::Divergence { epoch: 0 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mlm_learns_constant_corpus() {
        let mask = mask_id_for(&MicroLmParams::zeros(shape(ModelMode::Masked)).unwrap());
        let corpus: Vec<TokenSequence> = (0..4)
            .map(|i| TokenSequence::new(format!("a{i}"), vec![0; 16], SplitLabel::Member))
            .collect();
        let p = MicroLmParams::init(shape(ModelMode::Masked), 2).unwrap();
        let (p, _) = train(
            p,
            &corpus,
            &TrainConfig {
                epochs: 40,
                ..quick(40)
            },
        )
        .unwrap();
        for pos in [0, 7, 15] {
            let mut input = vec![0; 16];
            input[pos] = mask;
            assert_eq!(mlm_fill(&p, &input, mask).unwrap()[pos], 0);
        }
    }
}
