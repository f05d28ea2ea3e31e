//! SI-SNR objective with permutation-invariant training, Adam, synthetic data
//! and the training loop.
//!
//! Training is single-threaded and bit-reproducible for a fixed seed.

pub mod data;
pub mod loss;
pub mod optim;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockVariant, Dropout, Mode};
use crate::error::{Error, Result};
use crate::frontend::Waveform;
use crate::graph::Graph;
use crate::separator::{HyperParams, SeparatorModel};
use crate::tensor::Tensor;

pub use data::{gen_synthetic, MixtureExample, SignalKind, SyntheticConfig, SyntheticStream};
pub use loss::{
    pit_loss, pit_loss_var, si_snr, si_snr_clamped, si_snr_var, SiSnrOptions, CLAMP_DB,
};
pub use optim::{adam_step, clip_global_norm, lr_schedule, AdamConfig, LrSchedule, OptimState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    /// Stop after this many epochs without a lower validation loss.
    pub early_stop: usize,
    pub seed: u64,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub zero_mean: bool,
    /// Random training crops of this length; `None` uses whole examples.
    pub crop_seconds: Option<f64>,
    /// Wall-clock budget; training stops after the epoch that exceeds it.
    pub max_seconds: Option<f64>,
    /// Fail on the first non-finite activation instead of at the loss.
    pub finite_check: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch: 4,
            early_stop: 10,
            seed: 0,
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            zero_mean: false,
            crop_seconds: None,
            max_seconds: None,
            finite_check: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.schedule.initial > 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.schedule.initial
            )));
        }
        if self.crop_seconds.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("crop length must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub si_snri: Option<f64>,
    pub lr: f64,
}

impl EpochMetrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochMetrics>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Tracks the best validation loss and counts epochs without improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: f64,
    pub stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records a validation loss. Returns `(improved, stop)`.
    pub fn update(&mut self, val_loss: f64) -> (bool, bool) {
        if val_loss < self.best {
            self.best = val_loss;
            self.stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            (false, self.patience > 0 && self.stale >= self.patience)
        }
    }
}

/// Evaluation of separated outputs against references.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Negative mean unclamped SI-SNR under the best assignment.
    pub loss: f64,
    pub si_snr: f64,
    /// SI-SNR gain over using the mixture as every estimate.
    pub si_snri: f64,
}

/// Scores `estimates` for one mixture; the assignment maximizes mean SI-SNR.
pub fn score_separation(
    mixture: &Waveform,
    estimates: &[Waveform],
    targets: &[Waveform],
) -> Result<EvalMetrics> {
    if estimates.len() != targets.len() {
        return Err(Error::Usage(format!(
            "{} estimates for {} targets",
            estimates.len(),
            targets.len()
        )));
    }
    let score = estimates
        .iter()
        .map(|e| {
            targets
                .iter()
                .map(|t| si_snr(&e.samples, &t.samples))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let (mean, _) = loss::best_assignment(&score)?;
    let base = targets
        .iter()
        .map(|t| si_snr(&mixture.samples, &t.samples))
        .sum::<Result<f64>>()?
        / targets.len() as f64;
    Ok(EvalMetrics {
        loss: -mean,
        si_snr: mean,
        si_snri: mean - base,
    })
}

/// Mean metrics of inference over `examples`.
pub fn evaluate(model: &SeparatorModel<f32>, examples: &[MixtureExample]) -> Result<EvalMetrics> {
    if examples.is_empty() {
        return Err(Error::Usage("evaluation set is empty".into()));
    }
    let mut acc = EvalMetrics {
        loss: 0.0,
        si_snr: 0.0,
        si_snri: 0.0,
    };
    for ex in examples {
        let est = model.separate(&ex.mixture)?;
        let m = score_separation(&ex.mixture, &est, &ex.sources)?;
        acc.loss += m.loss;
        acc.si_snr += m.si_snr;
        acc.si_snri += m.si_snri;
    }
    let n = examples.len() as f64;
    Ok(EvalMetrics {
        loss: acc.loss / n,
        si_snr: acc.si_snr / n,
        si_snri: acc.si_snri / n,
    })
}

fn crop(ex: &MixtureExample, len: usize, rng: &mut ChaCha8Rng) -> MixtureExample {
    if len >= ex.mixture.len() {
        return ex.clone();
    }
    let start = rng.gen_range(0..=ex.mixture.len() - len);
    let cut = |w: &Waveform| Waveform::new(w.samples[start..start + len].to_vec(), w.sample_rate);
    MixtureExample {
        mixture: cut(&ex.mixture),
        sources: ex.sources.iter().map(cut).collect(),
        snr_db: ex.snr_db,
    }
}

/// Loss and parameter gradients for one example.
pub fn example_gradients(
    model: &SeparatorModel<f32>,
    ex: &MixtureExample,
    mode: &mut Mode<'_>,
    opts: SiSnrOptions,
    finite_check: bool,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut g = Graph::new().with_finite_check(finite_check);
    let vars = model.store.bind(&mut g, true);
    let est = model.forward_var(&mut g, &vars, &ex.mixture.samples, mode, None)?;
    let targets: Vec<_> = ex
        .sources
        .iter()
        .map(|s| g.constant(Tensor::new([s.len()], s.samples.clone()).expect("1-D")))
        .collect();
    let (loss, _) = pit_loss_var(&mut g, &est, &targets, opts)?;
    let value = f64::from(g.value(loss).data()[0]);
    g.backward(loss)?;
    Ok((value, model.store.collect_grads(&g, &vars)))
}

/// One optimizer step over `batch`. Returns the mean training loss before the update.
pub fn train_step(
    model: &mut SeparatorModel<f32>,
    batch: &[MixtureExample],
    state: &mut OptimState<f32>,
    rng: &mut ChaCha8Rng,
    cfg: &TrainConfig,
) -> Result<f64> {
    let opts = SiSnrOptions {
        zero_mean: cfg.zero_mean,
    };
    let mut total = 0.0;
    let mut sum: Option<Vec<Tensor<f32>>> = None;
    for ex in batch {
        let mut mode = Mode::Train(Dropout {
            rate: model.hp.dropout,
            rng,
        });
        let (l, grads) = example_gradients(model, ex, &mut mode, opts, cfg.finite_check)?;
        total += l;
        match sum.as_mut() {
            None => sum = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    let mut grads = sum.ok_or_else(|| Error::Usage("empty batch".into()))?;
    let scale = 1.0 / batch.len() as f32;
    grads
        .iter_mut()
        .for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= scale));
    adam_step(model.store.tensors_mut(), &mut grads, state)?;
    Ok(total / batch.len() as f64)
}

/// Trains `model` with PIT SI-SNR, keeping the parameters of the epoch with
/// the lowest validation loss. `on_epoch` receives each metrics record.
pub fn train(
    model: &mut SeparatorModel<f32>,
    train_set: &[MixtureExample],
    val_set: &[MixtureExample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Usage(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimState::new(model.store.tensors(), cfg.schedule.at(0), cfg.adam);
    let mut stopper = EarlyStopper::new(cfg.early_stop);
    let mut best_params = model.store.clone();
    let mut report = TrainReport {
        history: Vec::new(),
        epochs_run: 0,
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        stopped_early: false,
    };
    let crop_len = cfg
        .crop_seconds
        .map(|s| (s * f64::from(train_set[0].mixture.sample_rate)).round() as usize);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        state.lr = cfg.schedule.at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let batch: Vec<MixtureExample> = chunk
                .iter()
                .map(|&i| match crop_len {
                    Some(len) => crop(&train_set[i], len, &mut rng),
                    None => train_set[i].clone(),
                })
                .collect();
            let l = match train_step(model, &batch, &mut state, &mut rng, cfg) {
                Err(Error::NonFinite { op }) => {
                    return Err(Error::Divergence {
                        epoch,
                        step,
                        reason: format!("non-finite activation in {op}"),
                    })
                }
                r => r?,
            };
            if !l.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    reason: format!("training loss {l}"),
                });
            }
            loss_sum += l;
            steps += 1;
        }
        let train_metrics = EpochMetrics {
            epoch,
            split: "train".into(),
            loss: loss_sum / steps as f64,
            si_snri: None,
            lr: state.lr,
        };
        on_epoch(&train_metrics);
        report.history.push(train_metrics);

        let val = evaluate(model, val_set)?;
        if val.loss.is_nan() {
            return Err(Error::Divergence {
                epoch,
                step: steps,
                reason: "validation loss is NaN".into(),
            });
        }
        let val_metrics = EpochMetrics {
            epoch,
            split: "val".into(),
            loss: val.loss,
            si_snri: Some(val.si_snri),
            lr: state.lr,
        };
        on_epoch(&val_metrics);
        report.history.push(val_metrics);
        report.epochs_run = epoch + 1;

        let (improved, stop) = stopper.update(val.loss);
        if improved {
            best_params = model.store.clone();
            report.best_epoch = epoch;
            report.best_val_loss = val.loss;
        }
        if stop {
            report.stopped_early = true;
            break;
        }
        if cfg
            .max_seconds
            .is_some_and(|s| started.elapsed().as_secs_f64() > s)
        {
            break;
        }
    }
    model.store = best_params;
    Ok(report)
}

/// Outcome of training one block variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub variant: BlockVariant,
    pub params: usize,
    pub epochs_run: usize,
    /// Held-out SI-SNRi of the best epoch, in dB.
    pub si_snri: f64,
}

impl AblationResult {
    pub fn to_line(&self) -> String {
        format!(
            "local={} global={} lowdim={} params={} epochs={} si_snri_db={:.2}",
            self.variant.local,
            self.variant.global,
            self.variant.use_lowdim,
            self.params,
            self.epochs_run,
            self.si_snri
        )
    }
}

/// Trains each of the four block variants from the same seed on the same
/// data and scores them on `val_set`.
pub fn ablate(
    base: HyperParams,
    train_set: &[MixtureExample],
    val_set: &[MixtureExample],
    cfg: &TrainConfig,
    mut on_result: impl FnMut(&AblationResult),
) -> Result<Vec<AblationResult>> {
    let mut out = Vec::new();
    for variant in BlockVariant::table() {
        let hp = HyperParams { variant, ..base };
        let mut model = SeparatorModel::new(hp, cfg.seed)?;
        let report = train(&mut model, train_set, val_set, cfg, |_| {})?;
        let val = evaluate(&model, val_set)?;
        let r = AblationResult {
            variant,
            params: model.num_params(),
            epochs_run: report.epochs_run,
            si_snri: val.si_snri,
        };
        on_result(&r);
        out.push(r);
    }
    Ok(out)
}
