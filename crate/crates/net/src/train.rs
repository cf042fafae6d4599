//! Training loop, learning-rate schedule and dataset evaluation.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use bsnet_core::data::{epoch_order, preprocess_eval, preprocess_train, upsample_prediction, PreprocessSpec, SamplePair};
use bsnet_core::losses::{loss_terms, LossReport, DEFAULT_ALPHA};
use bsnet_core::metrics::{aggregate_over_dataset, ImageRecord, MetricConfig, MetricReport};
use bsnet_core::{DepthMap, RgbImage};
use candle_core::{DType, Tensor, WithDType};
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::layers::Mode;
use crate::network::{images_to_tensor, tensor_to_depths, Network};
use crate::optim::Adam;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Fraction removed from the rate every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr0: 1e-4,
            lr_decay: 0.1,
            decay_every: 5,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            alpha: DEFAULT_ALPHA,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1");
        }
        if self.decay_every == 0 {
            return bad("decay_every must be >= 1");
        }
        // A zero rate is allowed: it turns training into a pure forward check.
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad("learning rate must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.lr_decay) {
            return bad("lr_decay must lie in [0, 1)");
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("Adam eps must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight decay must be finite and >= 0");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        Ok(())
    }
}

/// Step schedule: `lr0 * (1 - lr_decay)^floor(epoch / decay_every)`, epochs from 0.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr0 * (1.0 - cfg.lr_decay).powi((epoch / cfg.decay_every) as i32)
}

/// `epoch<TAB>l_depth<TAB>l_grad<TAB>l_normal<TAB>l_overall<TAB>lr`
pub fn log_line(epoch: usize, r: &LossReport, lr: f64) -> String {
    format!(
        "{epoch}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}",
        r.l_depth, r.l_grad, r.l_normal, r.l_overall, lr
    )
}

/// Per-sample losses and `d(mean overall)/dp` for a batch prediction.
fn batch_loss<T: Float + WithDType>(
    pred: &Tensor,
    labels: &[DepthMap],
    alpha: f64,
) -> Result<(Vec<LossReport>, Vec<T>)> {
    let (n, _, h, w) = pred.dims4()?;
    let p: Vec<T> = pred.flatten_all()?.to_vec1()?;
    let alpha = T::from(alpha).expect("alpha fits");
    let inv_n = T::from(1.0 / n as f64).expect("batch fits");
    let mut reports = Vec::with_capacity(n);
    let mut grad = Vec::with_capacity(p.len());
    for (i, label) in labels.iter().enumerate() {
        let pi = ndarray::ArrayView2::from_shape((h, w), &p[i * h * w..(i + 1) * h * w]).expect("slice is h*w");
        let g = label.values().mapv(|v| T::from(v).unwrap_or_else(T::nan));
        let terms = loss_terms(pi, g.view(), label.valid(), alpha)?;
        reports.push(LossReport::new(terms.depth, terms.grad, terms.normal, terms.n_pixels));
        grad.extend(terms.d_overall().iter().map(|&d| d * inv_n));
    }
    Ok((reports, grad))
}

pub struct Trainer {
    net: Network,
    cfg: TrainConfig,
    preprocess: PreprocessSpec,
    adam: Adam,
    epoch: usize,
    history: Vec<LossReport>,
}

impl Trainer {
    pub fn new(net: Network, cfg: TrainConfig, preprocess: PreprocessSpec) -> Result<Self> {
        cfg.validate()?;
        preprocess.validate()?;
        let (ch, cw) = preprocess.crop_to;
        let out = net.config().output_size(ch, cw);
        if out != preprocess.label_size {
            return Err(Error::ResolutionMismatch(format!(
                "labels are {:?} but the network emits {out:?} for {ch}x{cw} inputs",
                preprocess.label_size
            )));
        }
        let adam = Adam::new(cfg.adam_betas, cfg.adam_eps, cfg.weight_decay);
        Ok(Self {
            net,
            cfg,
            preprocess,
            adam,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn config_mut(&mut self) -> &mut TrainConfig {
        &mut self.cfg
    }

    pub fn preprocess(&self) -> &PreprocessSpec {
        &self.preprocess
    }

    pub fn optimizer(&self) -> &Adam {
        &self.adam
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Mean losses of each completed epoch.
    pub fn history(&self) -> &[LossReport] {
        &self.history
    }

    /// One optimizer step on a preprocessed batch. `batch` only labels errors.
    pub fn step(&mut self, images: &[RgbImage], labels: &[DepthMap], lr: f64, batch: usize) -> Result<LossReport> {
        let x = images_to_tensor(images, self.net.dtype(), self.net.device())?;
        let pred = self.net.forward(&x, Mode::Train)?;
        let (_, _, h, w) = pred.dims4()?;
        if let Some(l) = labels.iter().find(|l| l.dim() != (h, w)) {
            return Err(Error::ResolutionMismatch(format!("label {:?} vs prediction {h}x{w}", l.dim())));
        }
        let (reports, grad) = match self.net.dtype() {
            DType::F64 => {
                let (r, g) = batch_loss::<f64>(&pred, labels, self.cfg.alpha)?;
                (r, Tensor::from_vec(g, pred.shape(), pred.device())?)
            }
            _ => {
                let (r, g) = batch_loss::<f32>(&pred, labels, self.cfg.alpha)?;
                (r, Tensor::from_vec(g, pred.shape(), pred.device())?)
            }
        };
        let report = LossReport::mean(&reports).ok_or(Error::Core(bsnet_core::Error::EmptyDataset))?;
        if let Some(term) = report.non_finite_term() {
            return Err(Error::Diverged {
                epoch: self.epoch + 1,
                batch,
                term: term.to_string(),
            });
        }
        // d/dp of sum(p * G) is G, the analytic loss gradient.
        let surrogate = (pred * grad)?.sum_all()?;
        let grads = surrogate.backward()?;
        self.adam.step(&self.net.store().vars(), &grads, lr)?;
        Ok(report)
    }

    /// Shuffles with `(seed, epoch)`, batches, steps; returns the epoch mean.
    pub fn train_epoch(&mut self, data: &[SamplePair]) -> Result<LossReport> {
        if data.is_empty() {
            return Err(Error::Core(bsnet_core::Error::EmptyDataset));
        }
        let lr = lr_at_epoch(&self.cfg, self.epoch);
        let order = epoch_order(data.len(), self.epoch, self.cfg.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x00a0_6a1e);
        rng.set_stream(self.epoch as u64);
        let mut reports = Vec::new();
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let mut images = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (img, label) = preprocess_train(&data[i], &self.preprocess, &mut rng)?;
                images.push(img);
                labels.push(label);
            }
            reports.push(self.step(&images, &labels, lr, b + 1)?);
        }
        let mean = LossReport::mean(&reports).expect("at least one batch");
        self.epoch += 1;
        self.history.push(mean);
        Ok(mean)
    }

    /// Trains until `epochs` are complete; `after_epoch` sees each finished epoch.
    pub fn fit(
        &mut self,
        data: &[SamplePair],
        mut after_epoch: impl FnMut(&Trainer, &LossReport) -> Result<()>,
    ) -> Result<()> {
        while self.epoch < self.cfg.epochs {
            let report = self.train_epoch(data)?;
            after_epoch(self, &report)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::capture(self).save(path)
    }

    /// Rebuilds a trainer from a checkpoint written by [`Trainer::save`].
    pub fn resume(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let cfg = ck
            .train
            .clone()
            .ok_or_else(|| Error::checkpoint(path, "no training state"))?;
        let preprocess = ck
            .preprocess
            .ok_or_else(|| Error::checkpoint(path, "no preprocessing spec"))?;
        let net = ck.restore_network()?;
        let mut t = Trainer::new(net, cfg, preprocess)?;
        let (m, v) = ck.adam_state(path)?;
        t.adam.restore(ck.adam_step, m, v);
        t.epoch = ck.epoch;
        t.history = ck.history;
        Ok(t)
    }

    pub(crate) fn parts(&self) -> (&Network, &TrainConfig, &PreprocessSpec, &Adam, usize, &[LossReport]) {
        (&self.net, &self.cfg, &self.preprocess, &self.adam, self.epoch, &self.history)
    }
}

/// Runs `trainer` to completion. With `out_dir`, appends one log line per
/// epoch to `train.log` and rewrites `checkpoint.safetensors` after each epoch.
pub fn train_loop(trainer: &mut Trainer, data: &[SamplePair], out_dir: Option<&Path>) -> Result<Vec<LossReport>> {
    if data.is_empty() {
        return Err(Error::Core(bsnet_core::Error::EmptyDataset));
    }
    trainer.fit(data, |t, report| {
        let done = t.epoch();
        let lr = lr_at_epoch(t.config(), done - 1);
        log::info!("{}", log_line(done, report, lr));
        if let Some(dir) = out_dir {
            let log_path = dir.join("train.log");
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&log_path)
                .map_err(|e| Error::io(&log_path, e))?;
            writeln!(f, "{}", log_line(done, report, lr)).map_err(|e| Error::io(&log_path, e))?;
            t.save(&dir.join("checkpoint.safetensors"))?;
        }
        Ok(())
    })?;
    Ok(trainer.history().to_vec())
}

/// Predictions for each pair at ground-truth (crop) resolution.
pub fn predict_dataset(net: &Network, data: &[SamplePair], spec: &PreprocessSpec) -> Result<Vec<(DepthMap, DepthMap)>> {
    data.iter()
        .map(|pair| {
            let (image, gt) = preprocess_eval(pair, spec)?;
            let pred = net.predict(&image)?;
            let pred = upsample_prediction(&pred, gt.height(), gt.width())?;
            Ok((pred, gt))
        })
        .collect()
}

/// Scores `(prediction, ground truth)` pairs. Predictions are not clipped;
/// only values that underflowed to zero are lifted to the smallest positive
/// float so ratio metrics stay defined.
pub fn evaluate_predictions(pairs: &[(DepthMap, DepthMap)], cfg: &MetricConfig) -> Result<MetricReport> {
    let records = pairs
        .iter()
        .map(|(p, g)| {
            let (values, valid) = p.clone().into_parts();
            let p = DepthMap::new(values.mapv(|v| v.max(f64::MIN_POSITIVE)), valid)?;
            Ok(ImageRecord::measure(&p, g, cfg)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate_over_dataset(&records)?)
}

pub fn evaluate(net: &Network, data: &[SamplePair], spec: &PreprocessSpec, cfg: &MetricConfig) -> Result<MetricReport> {
    if data.is_empty() {
        return Err(Error::Core(bsnet_core::Error::EmptyDataset));
    }
    evaluate_predictions(&predict_dataset(net, data, spec)?, cfg)
}

/// Prediction tensor for a batch of images, split into depth maps.
pub fn predict_batch(net: &Network, images: &[RgbImage]) -> Result<Vec<DepthMap>> {
    let x = images_to_tensor(images, net.dtype(), net.device())?;
    tensor_to_depths(&net.forward(&x, Mode::Eval)?)
}
