//! AdamW training loop over an in-memory dataset.
//!
//! Batches are drawn from a generator keyed on `(seed, iteration)`, so a run
//! resumed from a checkpoint at iteration `t` sees exactly the batches an
//! uninterrupted run would.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{self, ConfusionMatrix};
use crate::losses::{LossWeights, SegTarget};
use crate::model::{self, ModelConfig};
use crate::numerics::{Graph, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    /// Linear decay from the base rate to zero at the final iteration.
    Linear,
}

impl std::str::FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "linear" => Ok(Schedule::Linear),
            _ => Err(Error::config(format!("unknown schedule {s:?} (expected constant or linear)"))),
        }
    }
}

impl std::fmt::Display for Schedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Schedule::Constant => "constant",
            Schedule::Linear => "linear",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Schedule,
    /// Iterations of linear warm-up from zero.
    pub warmup: u64,
    pub iterations: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Loss lines are logged every `log_every` iterations (0 disables).
    pub log_every: u64,
    /// Train-split mIoU is logged every `eval_every` iterations (0 disables).
    pub eval_every: u64,
    /// Number of leading training images used for the periodic mIoU.
    pub eval_images: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: Schedule::Constant,
            warmup: 0,
            iterations: 2000,
            batch_size: 8,
            seed: 0,
            log_every: 50,
            eval_every: 500,
            eval_images: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("learning rate and weight decay must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::config("adam betas must lie in [0, 1) and eps must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        Ok(())
    }

    /// Learning rate used for the update that completes `iteration + 1`.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        let t = iteration as f64;
        let warm = if self.warmup > 0 { ((t + 1.0) / self.warmup as f64).min(1.0) } else { 1.0 };
        let decay = match self.schedule {
            Schedule::Constant => 1.0,
            Schedule::Linear => (1.0 - t / self.iterations.max(1) as f64).max(0.0),
        };
        self.lr * warm * decay
    }
}

/// Decoupled weight decay Adam. Decay applies to matrices and embeddings
/// (rank ≥ 2), not to biases or norm parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
    pub steps: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = || {
            let mut s = ParamStore::new();
            for (name, t) in params.iter() {
                s.insert(name, Tensor::zeros(t.shape())).expect("unique names");
            }
            s
        };
        AdamW {
            m: zeros(),
            v: zeros(),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[(String, Tensor<f32>)], lr: f64, cfg: &TrainConfig) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let (lr32, eps) = (lr as f32, cfg.eps as f32);
        for (name, g) in grads {
            let missing = || Error::Checkpoint(format!("optimizer has no state for {name}"));
            let p = params.get_mut(name).ok_or_else(missing)?;
            let m = self.m.get_mut(name).ok_or_else(missing)?;
            let v = self.v.get_mut(name).ok_or_else(missing)?;
            let wd = if p.rank() >= 2 { cfg.weight_decay as f32 } else { 0.0 };
            for (((pi, mi), vi), &gi) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = f64::from(*mi) / c1;
                let vhat = f64::from(*vi) / c2;
                let update = (mhat / (vhat.sqrt() + f64::from(eps))) as f32;
                *pi -= lr32 * (update + wd * *pi);
            }
        }
        Ok(())
    }
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore<f32>,
    pub optimizer: AdamW,
    /// Completed iterations.
    pub iteration: u64,
}

impl TrainState {
    pub fn new(model: &ModelConfig, seed: u64) -> Result<Self> {
        let params = model::init_params(model, seed)?;
        let optimizer = AdamW::new(&params);
        Ok(TrainState {
            params,
            optimizer,
            iteration: 0,
        })
    }
}

/// Indices of the images in the batch for `iteration`.
pub fn batch_indices(seed: u64, iteration: u64, batch: usize, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c_0000_0000);
    rng.set_stream(iteration);
    if batch >= len {
        return (0..len).collect();
    }
    sample(&mut rng, len, batch).into_vec()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
    pub cls: f64,
    pub focal: f64,
    pub dice: f64,
}

impl StepMetrics {
    pub fn log_line(&self) -> String {
        format!(
            "iter={} lr={:.6e} loss={:.6} cls={:.6} focal={:.6} dice={:.6}",
            self.iteration, self.lr, self.loss, self.cls, self.focal, self.dice
        )
    }
}

/// Dataset converted once into model inputs and loss targets.
pub struct PreparedData {
    pub images: Vec<Tensor<f32>>,
    pub targets: Vec<SegTarget<f32>>,
}

impl PreparedData {
    pub fn new(ds: &Dataset, classes: usize) -> Result<Self> {
        let images = ds.images.iter().map(|i| i.to_tensor()).collect();
        let targets = ds
            .labels
            .iter()
            .map(|l| SegTarget::new(l.clone(), classes))
            .collect::<Result<_>>()?;
        Ok(PreparedData { images, targets })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

pub struct Trainer<'a> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub data: &'a PreparedData,
    pub state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(model: ModelConfig, train: TrainConfig, weights: LossWeights, data: &'a PreparedData) -> Result<Self> {
        let state = TrainState::new(&model, train.seed)?;
        Self::resume(model, train, weights, data, state)
    }

    pub fn resume(model: ModelConfig, train: TrainConfig, weights: LossWeights, data: &'a PreparedData, state: TrainState) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        weights.validate()?;
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        Ok(Trainer {
            model,
            train,
            weights,
            data,
            state,
        })
    }

    /// One forward/backward/update on the batch for the current iteration.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let it = self.state.iteration;
        let batch = batch_indices(self.train.seed, it, self.train.batch_size, self.data.len());
        let scale = 1.0 / batch.len() as f64;
        let mut metrics = StepMetrics {
            iteration: it + 1,
            lr: self.train.lr_at(it),
            loss: 0.0,
            cls: 0.0,
            focal: 0.0,
            dice: 0.0,
        };
        let at_step = |e: Error| match e {
            Error::NonFinite { what } => Error::NonFinite {
                what: format!("step {}: {what}", it + 1),
            },
            other => other,
        };
        let graph = Graph::new();
        let p = self.state.params.bind(&graph);
        let mut total = None;
        for &i in &batch {
            let out = model::loss(&p, &self.model, &self.data.images[i], &self.data.targets[i], &self.weights).map_err(at_step)?;
            metrics.loss += out.value() * scale;
            for s in &out.stages {
                metrics.cls += s.cls * scale;
                metrics.focal += s.focal * scale;
                metrics.dice += s.dice * scale;
            }
            total = Some(match total {
                None => out.total,
                Some(t) => out.total.add(t).map_err(at_step)?,
            });
        }
        let mean = total.expect("non-empty batch").scale(scale as f32).map_err(at_step)?;
        let grads = graph.backward(mean).map_err(at_step)?.into_named();
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            return Err(Error::NonFinite {
                what: format!("step {}: gradient of {name}", it + 1),
            });
        }
        self.state.optimizer.step(&mut self.state.params, &grads, metrics.lr, &self.train)?;
        self.state.iteration += 1;
        Ok(metrics)
    }

    /// mIoU of the current parameters on `images`/`targets` pairs.
    pub fn evaluate(&self, data: &PreparedData, limit: usize) -> Result<f64> {
        evaluate(&self.state.params, &self.model, data, limit)
    }

    /// Train up to the configured iteration count, passing each log line to
    /// `log`.
    pub fn run(&mut self, mut log: impl FnMut(&str)) -> Result<()> {
        while self.state.iteration < self.train.iterations {
            let m = self.step()?;
            let it = self.state.iteration;
            if self.train.log_every > 0 && (it.is_multiple_of(self.train.log_every) || it == 1) {
                log(&m.log_line());
            }
            if self.train.eval_every > 0 && it.is_multiple_of(self.train.eval_every) {
                let miou = self.evaluate(self.data, self.train.eval_images)?;
                log(&format!("iter={it} train_miou={miou:.6}"));
            }
        }
        Ok(())
    }
}

/// mIoU over the first `limit` items of `data`.
pub fn evaluate(params: &ParamStore<f32>, model: &ModelConfig, data: &PreparedData, limit: usize) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(model.num_classes);
    for (img, tgt) in data.images.iter().zip(&data.targets).take(limit) {
        let pred = eval::infer(params, model, img)?;
        cm.add(&pred, &tgt.label_map)?;
    }
    Ok(cm.report().mean)
}
