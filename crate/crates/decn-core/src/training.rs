//! Training: the normalized-improvement loss, Adam with global gradient
//! clipping and stepped learning-rate decay, and the epoch loop that draws
//! fresh minibatch populations every epoch and resamples the surrogate
//! functions' parameters on a fixed period.

use rand::Rng;

use crate::error::{Error, Result};
use crate::evolution::{decn_run_taped, DecnModel, TrainedOn};
use crate::functions::{resample_shifts, FunctionSet, ObjectiveInstance};
use crate::population::PopulationGrid;
use crate::rng::substream;
use crate::tape::{grad, program_value_and_signature, ScalarProgram, Tape, Var};
use crate::tensor::Tensor;

/// Guard for the loss denominator when the initial population's mean fitness
/// is zero.
pub const LOSS_EPSILON: f64 = 1e-12;

/// Architecture of the model to train.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub depth: usize,
    pub share_weights: bool,
    pub kernel_sizes: Vec<usize>,
}

impl ModelConfig {
    /// Three weight-shared modules — the cheapest published configuration.
    pub fn ws3() -> Self {
        ModelConfig {
            depth: 3,
            share_weights: true,
            kernel_sizes: crate::evolution::DEFAULT_KERNEL_SIZES.to_vec(),
        }
    }

    /// Thirty weight-shared modules.
    pub fn ws30() -> Self {
        ModelConfig {
            depth: 30,
            share_weights: true,
            kernel_sizes: crate::evolution::DEFAULT_KERNEL_SIZES.to_vec(),
        }
    }

    /// Fifteen modules with per-module parameters.
    pub fn nws15() -> Self {
        ModelConfig {
            depth: 15,
            share_weights: false,
            kernel_sizes: crate::evolution::DEFAULT_KERNEL_SIZES.to_vec(),
        }
    }
}

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Populations drawn per function per epoch (the minibatch size K).
    pub minibatch: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Multiplier applied to the learning rate every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    /// Global 2-norm ceiling for the gradient.
    pub clip_norm: f64,
    /// Resample every function's parameters after this many epochs (T).
    pub resample_every: usize,
    pub side: usize,
    pub dim: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Published defaults shared by every configuration: gradients clipped to
    /// 2-norm 10, learning rate shrinking by 0.9 every 100 epochs, T = 10.
    pub fn new(side: usize, dim: usize, seed: u64) -> Self {
        TrainConfig {
            minibatch: 32,
            epochs: 5000,
            lr: 5e-4,
            lr_decay: 0.9,
            decay_every: 100,
            clip_norm: 10.0,
            resample_every: 10,
            side,
            dim,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.minibatch == 0
            || self.side == 0
            || self.dim == 0
            || self.decay_every == 0
            || self.resample_every == 0
        {
            return Err(Error::Config("training sizes must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.lr_decay > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config(
                "learning rate, decay, and clip norm must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate in force at the given epoch:
    /// `lr * decay^floor(epoch / decay_every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub per_function: Vec<f64>,
    pub grad_norm_pre: f64,
    pub grad_norm_post: f64,
    pub lr: f64,
}

/// Per-epoch trace of one training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    pub fn final_mean_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }

    /// CSV with header `epoch,mean_loss,grad_norm_pre,grad_norm_post,lr`.
    pub fn write_csv<W: std::io::Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "epoch,mean_loss,grad_norm_pre,grad_norm_post,lr")?;
        for (i, e) in self.epochs.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{}",
                i, e.mean_loss, e.grad_norm_pre, e.grad_norm_post, e.lr
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv is ascii")
    }
}

/// Normalized improvement loss: `(mean f(out) - mean f(init)) / max(|mean
/// f(init)|, epsilon)`. Minimizing it maximizes the relative fitness drop
/// from the initial population to the output population.
pub fn improvement_loss(initial_mean: f64, output_mean: f64) -> f64 {
    let denom = initial_mean.abs().max(LOSS_EPSILON);
    (output_mean + (-initial_mean)) * (1.0 / denom)
}

/// Taped twin of [`improvement_loss`] over a taped run's final fitness. Only
/// the output population's evaluations carry gradient; the initial mean is a
/// constant.
pub fn improvement_loss_taped<'t>(run: &crate::evolution::TapedRun<'t>) -> Var<'t> {
    let denom = run.initial_mean_fitness.abs().max(LOSS_EPSILON);
    run.fitness
        .mean_all()
        .add_scalar(-run.initial_mean_fitness)
        .scale(1.0 / denom)
}

/// Loss between two evaluated grids of one run.
pub fn loss(s0: &PopulationGrid, s_out: &PopulationGrid) -> Result<f64> {
    Ok(improvement_loss(s0.mean_fitness()?, s_out.mean_fitness()?))
}

/// First/second moment accumulators for Adam, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(Tensor::zeros_like).collect(),
            v: params.iter().map(Tensor::zeros_like).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::Shape(format!(
                "adam: param {:?} vs grad {:?} vs state {:?}",
                p.shape(),
                g.shape(),
                m.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for ((pi, &gi), (mi, vi)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mi = state.beta1 * *mi + (1.0 - state.beta1) * gi;
            *vi = state.beta2 * *vi + (1.0 - state.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// Global 2-norm across a list of tensors.
pub fn global_norm(tensors: &[Tensor]) -> f64 {
    tensors
        .iter()
        .flat_map(|t| t.data())
        .map(|&v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Scales gradients so their global 2-norm does not exceed `max_norm`,
/// preserving direction. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
    norm
}

fn flat_kernels(model: &DecnModel) -> Vec<Tensor> {
    model
        .ems()
        .iter()
        .flat_map(|em| em.kernel_set.kernels().iter().cloned())
        .collect()
}

fn write_back_kernels(model: &mut DecnModel, params: &[Tensor]) {
    let mut it = params.iter();
    for em in model.ems_mut() {
        for k in em.kernel_set.kernels_mut() {
            *k = it.next().expect("parameter count matches model").clone();
        }
    }
}

/// The full training objective of one population as a checkable program:
/// leaves are the flattened kernels, output is the improvement loss.
pub struct LossProgram<'a> {
    pub s0: &'a PopulationGrid,
    pub inst: &'a ObjectiveInstance,
    pub depth: usize,
    pub share_weights: bool,
    pub kernels_per_block: usize,
}

impl ScalarProgram for LossProgram<'_> {
    fn build<'t>(&self, tape: &'t Tape, params: &[Var<'t>]) -> Result<Var<'t>> {
        let blocks: Vec<Vec<Var<'t>>> = params
            .chunks(self.kernels_per_block)
            .map(|c| c.to_vec())
            .collect();
        let steps: Vec<Vec<Var<'t>>> = (0..self.depth)
            .map(|s| blocks[if self.share_weights { 0 } else { s }].clone())
            .collect();
        let run = decn_run_taped(tape, self.s0, &steps, self.inst)?;
        Ok(improvement_loss_taped(&run))
    }
}

fn suite_label(dataset: &FunctionSet) -> String {
    use crate::functions::{Fidelity, FunctionId};
    match (dataset.fidelity, dataset.target_id) {
        (_, FunctionId::ArmSc) => "arm-sc".into(),
        (_, FunctionId::ArmCc) => "arm-cc".into(),
        (Fidelity::High, id) => format!("high:{id}"),
        (Fidelity::Low, _) => "low".into(),
    }
}

/// Trains a freshly initialized model on the dataset.
///
/// Each epoch draws `K` fresh populations per function, runs the taped stack
/// on each, averages the per-function mean losses, clips the global gradient
/// norm, and applies one Adam update. Every `resample_every` epochs the
/// functions' shift parameters are redrawn. Fully deterministic given the
/// seed in `cfg`.
pub fn train(
    model_cfg: &ModelConfig,
    dataset: &FunctionSet,
    cfg: &TrainConfig,
) -> Result<(DecnModel, TrainLog)> {
    cfg.validate()?;
    if dataset.instances.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    for inst in &dataset.instances {
        if inst.dim != cfg.dim {
            return Err(Error::Config(format!(
                "dataset instance {} has dim {}, config says {}",
                inst.id, inst.dim, cfg.dim
            )));
        }
    }

    let mut init_rng = substream(cfg.seed, "kernel-init");
    let mut model = DecnModel::init(
        model_cfg.depth,
        model_cfg.share_weights,
        &model_cfg.kernel_sizes,
        &mut init_rng,
    )?;
    let kernels_per_block = model_cfg.kernel_sizes.len();
    let mut params = flat_kernels(&model);
    let mut adam = AdamState::new(&params);
    let mut pop_rng = substream(cfg.seed, "train-populations");
    let mut shift_rng = substream(cfg.seed, "train-shifts");
    let mut functions = dataset.clone();
    let mut log = TrainLog::default();

    let runs_per_function = cfg.minibatch as f64;
    let function_count = functions.instances.len() as f64;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut grad_acc: Vec<Tensor> = params.iter().map(Tensor::zeros_like).collect();
        let mut per_function = Vec::with_capacity(functions.instances.len());

        for inst in &functions.instances {
            let mut loss_sum = 0.0;
            for _ in 0..cfg.minibatch {
                let s0 = PopulationGrid::init(cfg.side, inst, &mut pop_rng);
                let tape = Tape::new();
                let leaves: Vec<Var<'_>> =
                    params.iter().map(|p| tape.leaf(p.clone())).collect();
                let program = LossProgram {
                    s0: &s0,
                    inst,
                    depth: model_cfg.depth,
                    share_weights: model_cfg.share_weights,
                    kernels_per_block,
                };
                let loss_var = program.build(&tape, &leaves)?;
                let loss_val = loss_var.value().item();
                if !loss_val.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss at epoch {epoch} on {} is {loss_val}",
                        inst.id
                    )));
                }
                loss_sum += loss_val;
                let grads = grad(loss_var, &leaves)?;
                for (acc, g) in grad_acc.iter_mut().zip(&grads) {
                    for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
            }
            per_function.push(loss_sum / runs_per_function);
        }

        let mean_loss = per_function.iter().sum::<f64>() / function_count;
        let scale = 1.0 / (function_count * runs_per_function);
        for g in &mut grad_acc {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
        let grad_norm_pre = clip_global_norm(&mut grad_acc, cfg.clip_norm);
        let grad_norm_post = global_norm(&grad_acc);
        adam_step(&mut params, &grad_acc, &mut adam, lr)?;

        log.epochs.push(EpochStats {
            mean_loss,
            per_function,
            grad_norm_pre,
            grad_norm_post,
            lr,
        });

        if (epoch + 1) % cfg.resample_every == 0 {
            functions = resample_shifts(&functions, &mut shift_rng)?;
        }
    }

    write_back_kernels(&mut model, &params);
    model.set_trained_on(TrainedOn {
        suite: suite_label(dataset),
        dim: cfg.dim,
        side: cfg.side,
        seed: cfg.seed,
    });
    Ok((model, log))
}

/// Result of one gradient-fidelity comparison.
#[derive(Clone, Copy, Debug)]
pub struct GradientFidelity {
    /// Worst `|ad - fd| / max(|ad|, 1e-8)` over all kernel weights.
    pub max_rel_error: f64,
    /// Configurations discarded because a probe flipped a gate decision.
    pub resamples: usize,
}

/// Compares the loss gradient of a freshly sampled configuration against
/// central finite differences, element by element.
///
/// Every probe's gate signature (sort permutations, selection masks, clamp
/// activity, kinks) is compared with the base point's; a configuration where
/// any probe flips a gate is discarded and redrawn, because the comparison
/// would straddle two smooth regions.
pub fn loss_gradient_fd_error<R: Rng>(
    objective: crate::functions::FunctionId,
    dim: usize,
    side: usize,
    depth: usize,
    share_weights: bool,
    h: f64,
    rng: &mut R,
) -> Result<GradientFidelity> {
    const MAX_ATTEMPTS: usize = 50;
    let mut resamples = 0;
    'attempt: for _ in 0..MAX_ATTEMPTS {
        let inst = crate::functions::sample_shift(objective, dim, rng)?;
        let model = DecnModel::init(
            depth,
            share_weights,
            &crate::evolution::DEFAULT_KERNEL_SIZES,
            rng,
        )?;
        let s0 = PopulationGrid::init(side, &inst, rng);
        let params = flat_kernels(&model);
        let program = LossProgram {
            s0: &s0,
            inst: &inst,
            depth,
            share_weights,
            kernels_per_block: crate::evolution::DEFAULT_KERNEL_SIZES.len(),
        };

        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss_var = program.build(&tape, &leaves)?;
        let base_signature = tape.gate_signature();
        let ad = grad(loss_var, &leaves)?;

        let mut worst = 0.0f64;
        for (pi, p) in params.iter().enumerate() {
            for ei in 0..p.len() {
                let probe = |delta: f64| -> Result<Option<f64>> {
                    let mut shifted = params.clone();
                    shifted[pi].data_mut()[ei] += delta;
                    let (value, signature) = program_value_and_signature(&program, &shifted)?;
                    Ok((signature == base_signature).then_some(value))
                };
                let (fp, fm) = match (probe(h)?, probe(-h)?) {
                    (Some(a), Some(b)) => (a, b),
                    _ => {
                        resamples += 1;
                        continue 'attempt;
                    }
                };
                let fd = (fp - fm) / (2.0 * h);
                let a = ad[pi].data()[ei];
                worst = worst.max((a - fd).abs() / a.abs().max(1e-8));
            }
        }
        return Ok(GradientFidelity {
            max_rel_error: worst,
            resamples,
        });
    }
    Err(Error::Config(format!(
        "no flip-free configuration found in {MAX_ATTEMPTS} attempts"
    )))
}
