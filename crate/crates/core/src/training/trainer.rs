use candle_core::{DType, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::log::{StopReason, TrainLog};
use super::{composite_loss, TrainConfig};
use crate::channel::{snr_to_sigma2, unit_noise_batch};
use crate::codec::VariantModel;
use crate::data::{PairDataset, StereoPair};
use crate::image_tensor::ImageTensor;
use crate::metrics::{psnr_from_mse, FeatureNet};
use crate::rng::stream_rng;
use crate::{Error, Result};

/// Uniform training-SNR draws, one per image.
#[derive(Debug, Clone)]
pub struct SnrSampler {
    rng: ChaCha8Rng,
    lo: f64,
    hi: f64,
}

impl SnrSampler {
    pub fn new(seed: u64, range_db: [f64; 2]) -> Self {
        Self {
            rng: stream_rng(seed, "train/snr", 0),
            lo: range_db[0],
            hi: range_db[1],
        }
    }

    pub fn sample(&mut self) -> f64 {
        self.rng.random_range(self.lo..self.hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub snr_db: Vec<f64>,
}

/// Single-writer optimizer loop over one model.
pub struct Trainer {
    model: VariantModel,
    config: TrainConfig,
    optimizer: AdamW,
    lpips: Option<FeatureNet>,
    snr: SnrSampler,
    images_seen: u64,
    steps: u64,
}

fn stack_side(batch: &[StereoPair], dtype: DType) -> Result<(Tensor, Tensor)> {
    let x = ImageTensor::stack(batch.iter().map(|p| &p.x), dtype)?;
    let s = ImageTensor::stack(batch.iter().map(|p| &p.x_side), dtype)?;
    Ok((x, s))
}

impl Trainer {
    pub fn new(model: VariantModel, config: TrainConfig, lpips: Option<FeatureNet>) -> Result<Self> {
        config.validate()?;
        if config.p_avg != model.config().p_avg {
            return Err(Error::Config(format!(
                "training p_avg {} differs from the model's p_avg {}",
                config.p_avg,
                model.config().p_avg
            )));
        }
        if config.lambda_lpips > 0.0 && lpips.is_none() {
            return Err(Error::Config("lambda_lpips > 0 needs a perceptual feature network".into()));
        }
        let vars: Vec<Var> = model.named_parameters().into_iter().map(|(_, v)| v).collect();
        let optimizer = AdamW::new(
            vars,
            ParamsAdamW {
                lr: config.learning_rate,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.0,
            },
        )?;
        Ok(Self {
            snr: SnrSampler::new(config.seed, config.snr_range_db),
            model,
            config,
            optimizer,
            lpips,
            images_seen: 0,
            steps: 0,
        })
    }

    pub fn model(&self) -> &VariantModel {
        &self.model
    }

    pub fn into_model(self) -> VariantModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One optimizer step on the composite loss.
    pub fn train_step(&mut self, batch: &[StereoPair]) -> Result<StepOutcome> {
        let lambda = self.config.lambda_lpips;
        let net = self.lpips.clone();
        self.train_step_with(batch, |x, x_hat| composite_loss(x, x_hat, lambda, net.as_ref()))
    }

    /// One optimizer step on an arbitrary objective of `(x, x_hat)`.
    pub fn train_step_with(
        &mut self,
        batch: &[StereoPair],
        loss_fn: impl Fn(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<StepOutcome> {
        if batch.is_empty() {
            return Err(Error::invalid("empty training batch"));
        }
        let dtype = self.model.dtype();
        let (x, x_side) = stack_side(batch, dtype)?;
        let snr_db: Vec<f64> = batch.iter().map(|_| self.snr.sample()).collect();
        let sigma2 = snr_db
            .iter()
            .map(|&s| snr_to_sigma2(s, self.config.p_avg))
            .collect::<Result<Vec<_>>>()?;
        let mut rngs: Vec<ChaCha8Rng> = (0..batch.len() as u64)
            .map(|i| stream_rng(self.config.seed, "train/noise", self.images_seen + i))
            .collect();
        let noise = unit_noise_batch(&mut rngs, self.model.channel_uses(), dtype)?;
        self.images_seen += batch.len() as u64;

        let side = self.model.variant().uses_side_info().then_some(&x_side);
        let out = self.model.transmit(&x, side, &sigma2, &noise)?;
        if self.config.check_power {
            self.check_power(&out.z)?;
        }
        let loss = loss_fn(&x, &out.x_hat)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            let ids: Vec<&str> = batch.iter().map(|p| p.pair_id.as_str()).collect();
            return Err(Error::Numerical(format!(
                "non-finite loss {value} at step {} (SNRs {snr_db:?}, pairs {ids:?})",
                self.steps + 1
            )));
        }
        let mut grads = loss.backward()?;
        if let Some(max_norm) = self.config.grad_clip_norm {
            self.clip(&mut grads, max_norm)?;
        }
        self.optimizer.step(&grads)?;
        self.steps += 1;
        Ok(StepOutcome { loss: value, snr_db })
    }

    fn clip(&self, grads: &mut candle_core::backprop::GradStore, max_norm: f64) -> Result<()> {
        let params = self.model.named_parameters();
        let mut total = 0.0;
        for (_, v) in &params {
            if let Some(g) = grads.get(v.as_tensor()) {
                total += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let norm = total.sqrt();
        if !norm.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient norm at step {}",
                self.steps + 1
            )));
        }
        if norm > max_norm {
            let scale = max_norm / norm;
            for (_, v) in &params {
                if let Some(g) = grads.remove(v.as_tensor()) {
                    grads.insert(v.as_tensor(), (g * scale)?);
                }
            }
        }
        Ok(())
    }

    fn check_power(&self, z: &Tensor) -> Result<()> {
        let k = self.model.channel_uses() as f64;
        let p = self.config.p_avg;
        let powers: Vec<f64> = (z.sqr()?.sum(D::Minus1)? / k)?.to_dtype(DType::F64)?.to_vec1()?;
        if let Some(bad) = powers.iter().find(|q| ((*q - p) / p).abs() > 1e-4) {
            return Err(Error::Numerical(format!(
                "power constraint violated at step {}: average power {bad}, expected {p}",
                self.steps + 1
            )));
        }
        Ok(())
    }
}

/// Mean PSNR over every validation pair and every SNR of the grid.
///
/// Noise for (pair `i`, grid point `j`) comes from its own stream, so the value
/// is a deterministic function of the parameters.
pub fn validation_psnr(model: &VariantModel, val: &dyn PairDataset, grid_db: &[f64], seed: u64) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    if grid_db.is_empty() {
        return Err(Error::invalid("validation SNR grid is empty"));
    }
    let pairs: Vec<StereoPair> = (0..val.len()).map(|i| val.pair(i)).collect::<Result<_>>()?;
    let dtype = model.dtype();
    let k = model.channel_uses();
    let mut total = 0.0;
    for (j, &snr) in grid_db.iter().enumerate() {
        let sigma2 = snr_to_sigma2(snr, model.config().p_avg)?;
        for (c, chunk) in pairs.chunks(32).enumerate() {
            let (x, x_side) = stack_side(chunk, dtype)?;
            let mut rngs: Vec<ChaCha8Rng> = (0..chunk.len())
                .map(|i| {
                    let pair = (c * 32 + i) as u64;
                    stream_rng(seed, "val/noise", pair * grid_db.len() as u64 + j as u64)
                })
                .collect();
            let noise = unit_noise_batch(&mut rngs, k, dtype)?;
            let side = model.variant().uses_side_info().then_some(&x_side);
            let out = model.transmit(&x, side, &vec![sigma2; chunk.len()], &noise)?;
            let mse: Vec<f64> = (out.x_hat - &x)?
                .sqr()?
                .flatten_from(1)?
                .mean(D::Minus1)?
                .to_dtype(DType::F64)?
                .to_vec1()?;
            total += mse.iter().map(|&m| psnr_from_mse(m, 1.0)).sum::<f64>();
        }
    }
    Ok(total / (pairs.len() * grid_db.len()) as f64)
}

pub struct FitOutcome {
    /// Parameters restored from the best validation epoch.
    pub model: VariantModel,
    pub log: TrainLog,
}

/// Algorithm-level training loop with the standard validator.
pub fn fit(
    model: VariantModel,
    train: &dyn PairDataset,
    val: &dyn PairDataset,
    config: &TrainConfig,
    lpips: Option<FeatureNet>,
) -> Result<FitOutcome> {
    if val.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    let grid = config.val_snr_grid_db.clone();
    let seed = config.seed;
    fit_with_validator(model, train, config, lpips, |m, _| validation_psnr(m, val, &grid, seed))
}

/// Training loop with a caller-supplied validation metric (higher is better).
///
/// Each epoch visits the training set in a seed-derived shuffled order with
/// `⌊n / batch_size⌋` full batches (one short batch if `n < batch_size`). Stops
/// after `patience_e` epochs without strict improvement or at `max_epochs`,
/// then restores the parameters of the best epoch.
pub fn fit_with_validator(
    model: VariantModel,
    train: &dyn PairDataset,
    config: &TrainConfig,
    lpips: Option<FeatureNet>,
    mut validator: impl FnMut(&VariantModel, usize) -> Result<f64>,
) -> Result<FitOutcome> {
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut trainer = Trainer::new(model, config.clone(), lpips)?;
    let mut log = TrainLog::default();
    let n = train.len();
    let batch_size = config.batch_size.min(n);
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;

    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(config.seed, "train/shuffle", epoch as u64));
        for idx in order.chunks_exact(batch_size) {
            let batch: Vec<StereoPair> = idx.iter().map(|&i| train.pair(i)).collect::<Result<_>>()?;
            let out = trainer.train_step(&batch)?;
            log.push_step(trainer.steps(), epoch, out.loss);
        }
        let score = validator(trainer.model(), epoch)?;
        log.push_epoch(trainer.steps(), epoch, score);
        ::log::info!("epoch {epoch}: validation PSNR {score:.4} dB after {} steps", trainer.steps());

        let improved = best.as_ref().is_none_or(|(_, b, _)| score > *b);
        if improved {
            let snapshot = trainer
                .model()
                .named_parameters()
                .iter()
                .map(|(_, v)| v.as_tensor().copy())
                .collect::<candle_core::Result<Vec<_>>>()?;
            best = Some((epoch, score, snapshot));
        } else if epoch - best.as_ref().map_or(0, |b| b.0) >= config.patience_e {
            log.stop_reason = Some(StopReason::PatienceExhausted);
            break;
        }
    }
    if log.stop_reason.is_none() {
        log.stop_reason = Some(StopReason::MaxEpochs);
    }
    let model = trainer.into_model();
    if let Some((epoch, score, snapshot)) = best {
        for ((_, var), value) in model.named_parameters().iter().zip(snapshot) {
            var.set(&value)?;
        }
        log.best_epoch = Some(epoch);
        log.best_val_psnr = Some(score);
    }
    Ok(FitOutcome { model, log })
}
