//! Initialization, Adam, the training loop and checkpoints.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::tensor_file::{load_tensors, save_tensors};
use crate::data::DataError;
use crate::localizer::LossBreakdown;
use crate::model::{backward, forward, ModelConfig, ModelError, ModelParams, SampleInput};
use crate::params::ParamGroup;
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_HEADER: &str = "checkpoint.json";
pub const CHECKPOINT_TENSORS: &str = "params.omrn";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training needs at least one sample")]
    EmptyDataset,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("step {step}: {source}")]
    Step { step: usize, source: ModelError },
    #[error("step {step}: loss is not finite")]
    NonFiniteLoss { step: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Multiplier on the Xavier bound.
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 500,
            batch_size: 4,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            init_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.adam_epsilon > 0.0) || !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return bad("adam_epsilon and init_scale must be positive");
        }
        Ok(())
    }
}

fn is_bias(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    leaf == "b" || leaf.starts_with("b_")
}

/// Xavier-uniform weights with bound `scale * sqrt(6 / (fan_in + fan_out))`,
/// zero biases. Vectors such as attention rows count as `[1, len]`.
/// Tensors are drawn in registry order from one seeded stream.
pub fn init_params<F: Real>(template: &ModelParams<F>, seed: u64, scale: f64) -> ModelParams<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = template.zeros_like();
    params.for_each_mut("", &mut |name, t| {
        if is_bias(name) {
            return;
        }
        let (fan_out, fan_in) = match t.shape() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => panic!("unexpected parameter shape {s:?} for {name}"),
        };
        let bound = scale * (6.0 / (fan_in + fan_out) as f64).sqrt();
        for x in t.data_mut() {
            *x = F::lit(rng.random_range(-bound..=bound));
        }
    });
    params
}

/// Adam with bias correction, one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam<P> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m: P,
    v: P,
}

impl<P> Adam<P> {
    pub fn new<F: Real>(like: &P, cfg: &TrainConfig) -> Self
    where
        P: ParamGroup<F>,
    {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.adam_epsilon,
            step: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }

    pub fn update<F: Real>(&mut self, params: &mut P, grads: &P)
    where
        P: ParamGroup<F>,
    {
        self.step += 1;
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let c1 = F::lit(1.0 - self.beta1.powi(self.step as i32));
        let c2 = F::lit(1.0 - self.beta2.powi(self.step as i32));
        let (lr, eps) = (F::lit(self.lr), F::lit(self.epsilon));
        let g = grads.flat();
        let mut m = self.m.flat();
        let mut v = self.v.flat();
        let mut p = params.flat();
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (F::one() - b1) * g[i];
            v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        self.m.set_flat(&m);
        self.v.set_flat(&v);
        params.set_flat(&p);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub losses: LossBreakdown,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<F> {
    pub params: ModelParams<F>,
    /// Batch-mean losses measured before each update.
    pub history: Vec<StepRecord>,
}

/// Mean losses and gradients over a batch, reduced in batch order.
pub fn batch_loss_and_grad<F: Real>(
    inputs: &[&SampleInput<F>],
    params: &ModelParams<F>,
    cfg: &ModelConfig,
) -> Result<(LossBreakdown, ModelParams<F>), ModelError> {
    let scale = 1.0 / inputs.len() as f64;
    let mut grads = params.zeros_like();
    let mut losses = LossBreakdown::default();
    for input in inputs {
        let trace = forward(input, params, &cfg.localizer)?;
        losses.add(&trace.losses.scaled(scale));
        backward(input, params, &trace, &cfg.localizer, &cfg.localizer.weights, F::lit(scale), &mut grads);
    }
    if !grads.all_finite() {
        return Err(ModelError::NonFinite("gradients"));
    }
    Ok((losses, grads))
}

/// Runs `cfg.steps` Adam updates. Batches walk a fresh seeded permutation
/// of the dataset each epoch. `on_step` sees each record as it is produced.
pub fn train<F: Real>(
    inputs: &[SampleInput<F>],
    model: &ModelConfig,
    cfg: &TrainConfig,
    init: ModelParams<F>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome<F>, TrainError> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e_ed0f_ba7c);
    let mut params = init;
    let mut adam = Adam::new(&params, cfg);
    let mut history = Vec::with_capacity(cfg.steps);
    let mut order: Vec<usize> = Vec::new();
    let batch = cfg.batch_size.min(inputs.len());
    for step in 1..=cfg.steps {
        if order.len() < batch {
            let mut perm: Vec<usize> = (0..inputs.len()).collect();
            perm.shuffle(&mut rng);
            order = perm;
        }
        let picked: Vec<&SampleInput<F>> = order.drain(..batch).map(|i| &inputs[i]).collect();
        let (losses, grads) =
            batch_loss_and_grad(&picked, &params, model).map_err(|source| TrainError::Step { step, source })?;
        let total = losses.total(&model.localizer.weights);
        if !total.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        let record = StepRecord { step, losses, total };
        on_step(&record);
        history.push(record);
        adam.update(&mut params, &grads);
    }
    Ok(TrainOutcome { params, history })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub seed: u64,
    pub step: usize,
    /// Registry names in record order, with shapes.
    pub tensors: Vec<(String, Vec<usize>)>,
}

/// Writes `checkpoint.json` and `params.omrn` into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    params: &ModelParams<f32>,
    model: &ModelConfig,
    seed: u64,
    step: usize,
) -> Result<(), TrainError> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let named = params.named();
    let header = CheckpointHeader {
        model: model.clone(),
        seed,
        step,
        tensors: named.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(),
    };
    let path = dir.join(CHECKPOINT_HEADER);
    let json = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(&path, json + "\n").map_err(|e| DataError::io(&path, e))?;
    let tensors: Vec<&Tensor<f32>> = named.iter().map(|(_, t)| *t).collect();
    save_tensors(&dir.join(CHECKPOINT_TENSORS), tensors)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointHeader, ModelParams<f32>), TrainError> {
    let path = dir.join(CHECKPOINT_HEADER);
    let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
    let header: CheckpointHeader = serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let fail = |reason: String| TrainError::Checkpoint {
        path: dir.display().to_string(),
        reason,
    };
    header.model.validate().map_err(|e| fail(e.to_string()))?;
    let mut params = ModelParams::<f32>::zeros(&header.model.dims, header.model.localizer.widths.len());
    let tensors = load_tensors(&dir.join(CHECKPOINT_TENSORS))?;
    let expected = params.named().len();
    if tensors.len() != expected || header.tensors.len() != expected {
        return Err(fail(format!("expected {expected} tensors, found {}", tensors.len())));
    }
    let mut err = None;
    let mut i = 0;
    params.for_each_mut("", &mut |name, t| {
        let (hname, _) = &header.tensors[i];
        if err.is_none() && (hname != name || tensors[i].shape() != t.shape()) {
            err = Some(format!(
                "record {i} is `{hname}` {:?}, expected `{name}` {:?}",
                tensors[i].shape(),
                t.shape()
            ));
        } else {
            *t = tensors[i].clone();
        }
        i += 1;
    });
    if let Some(e) = err {
        return Err(fail(e));
    }
    Ok((header, params))
}
