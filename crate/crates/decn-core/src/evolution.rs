//! The learned evolution stack: convolution-based offspring generation,
//! mask-based survivor selection, their composition into evolution modules
//! (EMs), and the stacked model with optional weight sharing.
//!
//! Every step works on the fitness-sorted lattice layout: offspring are the
//! average of depthwise convolutions of the sorted decision channels, clamped
//! to bounds; selection compares parent and offspring fitness cellwise and
//! keeps the better individual. Both operations exist in a plain form used at
//! inference and a taped form used during training; they share the mask and
//! permutation code and perform identical arithmetic, so their outputs agree
//! bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functions::ObjectiveInstance;
use crate::population::PopulationGrid;
use crate::record::{RunMeta, RunRecord};
use crate::tape::{depthwise_conv2d, Tape, Var};
use crate::tensor::Tensor;

pub const MODEL_FILE_VERSION: u32 = 1;

/// Kernel sizes used by every published configuration.
pub const DEFAULT_KERNEL_SIZES: [usize; 3] = [3, 5, 7];

/// The square convolution kernels of one evolution module, one per size.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelSet {
    kernels: Vec<Tensor>,
}

impl KernelSet {
    pub fn new(kernels: Vec<Tensor>) -> Result<Self> {
        if kernels.is_empty() {
            return Err(Error::InvalidKernel("kernel set is empty".into()));
        }
        let mut sizes = Vec::new();
        for k in &kernels {
            if k.rank() != 2 || k.shape()[0] != k.shape()[1] {
                return Err(Error::InvalidKernel(format!(
                    "kernel must be square, got {:?}",
                    k.shape()
                )));
            }
            let side = k.shape()[0];
            if side % 2 == 0 {
                return Err(Error::InvalidKernel(format!("kernel side {side} must be odd")));
            }
            if sizes.contains(&side) {
                return Err(Error::InvalidKernel(format!("duplicate kernel size {side}")));
            }
            k.validate_finite("kernel")?;
            sizes.push(side);
        }
        Ok(KernelSet { kernels })
    }

    /// Kernels with entries drawn i.i.d. from a centered Gaussian.
    pub fn gaussian<R: Rng>(sizes: &[usize], std_dev: f64, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, std_dev)
            .map_err(|e| Error::Config(format!("bad kernel init std: {e}")))?;
        let kernels = sizes
            .iter()
            .map(|&s| {
                let data: Vec<f64> = (0..s * s).map(|_| normal.sample(rng)).collect();
                Tensor::from_vec(&[s, s], data)
            })
            .collect::<Result<Vec<_>>>()?;
        KernelSet::new(kernels)
    }

    pub fn kernels(&self) -> &[Tensor] {
        &self.kernels
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.kernels.iter().map(|k| k.shape()[0]).collect()
    }

    pub fn max_size(&self) -> usize {
        self.kernels.iter().map(|k| k.shape()[0]).max().unwrap_or(1)
    }

    pub(crate) fn kernels_mut(&mut self) -> &mut [Tensor] {
        &mut self.kernels
    }
}

/// Parameters of one evolution module.
#[derive(Clone, Debug, PartialEq)]
pub struct EmParams {
    pub kernel_set: KernelSet,
}

/// Where a model's kernels were trained, for provenance in the model file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedOn {
    pub suite: String,
    #[serde(rename = "D")]
    pub dim: usize,
    #[serde(rename = "L")]
    pub side: usize,
    pub seed: u64,
}

/// A stack of evolution modules. Weight-shared models store exactly one
/// parameter block and apply it `depth` times; unshared models store one
/// block per step.
#[derive(Clone, Debug, PartialEq)]
pub struct DecnModel {
    ems: Vec<EmParams>,
    share_weights: bool,
    depth: usize,
    trained_on: Option<TrainedOn>,
}

impl DecnModel {
    /// Fresh model with Gaussian-initialized kernels (mean 0, std 0.5).
    pub fn init<R: Rng>(
        depth: usize,
        share_weights: bool,
        kernel_sizes: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("model depth must be at least 1".into()));
        }
        let blocks = if share_weights { 1 } else { depth };
        let ems = (0..blocks)
            .map(|_| {
                Ok(EmParams {
                    kernel_set: KernelSet::gaussian(kernel_sizes, 0.5, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DecnModel {
            ems,
            share_weights,
            depth,
            trained_on: None,
        })
    }

    pub fn from_blocks(ems: Vec<EmParams>, share_weights: bool, depth: usize) -> Result<Self> {
        if ems.is_empty() {
            return Err(Error::Config("model has no parameter blocks".into()));
        }
        if share_weights && ems.len() != 1 {
            return Err(Error::Config(
                "weight-shared model must hold exactly one block".into(),
            ));
        }
        if !share_weights && ems.len() != depth {
            return Err(Error::Config(format!(
                "unshared model needs one block per step: {} blocks, depth {depth}",
                ems.len()
            )));
        }
        if depth == 0 {
            return Err(Error::Config("model depth must be at least 1".into()));
        }
        Ok(DecnModel {
            ems,
            share_weights,
            depth,
            trained_on: None,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn share_weights(&self) -> bool {
        self.share_weights
    }

    pub fn ems(&self) -> &[EmParams] {
        &self.ems
    }

    pub(crate) fn ems_mut(&mut self) -> &mut [EmParams] {
        &mut self.ems
    }

    /// Parameter block applied at the given step.
    pub fn em_params(&self, step: usize) -> &EmParams {
        if self.share_weights {
            &self.ems[0]
        } else {
            &self.ems[step]
        }
    }

    pub fn kernel_sizes(&self) -> Vec<usize> {
        self.ems[0].kernel_set.sizes()
    }

    /// Smallest lattice side the largest kernel's padding supports.
    pub fn min_side(&self) -> usize {
        let k = self.ems.iter().map(|em| em.kernel_set.max_size()).max().unwrap_or(1);
        (k + 1) / 2
    }

    /// Evaluations one run charges at lattice side `L`: the initial
    /// evaluation plus one offspring pass per step.
    pub fn evals_for_run(&self, side: usize) -> u64 {
        (side * side) as u64 * (self.depth as u64 + 1)
    }

    /// Same parameters applied for a different number of steps. Only
    /// weight-shared models can change depth.
    pub fn with_depth(mut self, depth: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("model depth must be at least 1".into()));
        }
        if !self.share_weights && depth != self.depth {
            return Err(Error::Config(
                "cannot change depth of a model without weight sharing".into(),
            ));
        }
        self.depth = depth;
        Ok(self)
    }

    pub fn trained_on(&self) -> Option<&TrainedOn> {
        self.trained_on.as_ref()
    }

    pub fn set_trained_on(&mut self, meta: TrainedOn) {
        self.trained_on = Some(meta);
    }

    pub fn to_json(&self) -> Result<String> {
        let ems = self
            .ems
            .iter()
            .map(|em| {
                em.kernel_set
                    .kernels()
                    .iter()
                    .map(|k| (format!("k{}", k.shape()[0]), k.data().to_vec()))
                    .collect()
            })
            .collect();
        let file = ModelFile {
            version: MODEL_FILE_VERSION,
            share_weights: self.share_weights,
            depth: self.depth,
            kernel_sizes: self.kernel_sizes(),
            ems,
            trained_on: self.trained_on.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(json)?;
        if file.version != MODEL_FILE_VERSION {
            return Err(Error::Version {
                found: file.version,
                expected: MODEL_FILE_VERSION,
            });
        }
        let ems = file
            .ems
            .iter()
            .map(|block| {
                let kernels = file
                    .kernel_sizes
                    .iter()
                    .map(|&size| {
                        let key = format!("k{size}");
                        let data = block.get(&key).ok_or_else(|| {
                            Error::Config(format!("model block is missing kernel '{key}'"))
                        })?;
                        Tensor::from_vec(&[size, size], data.clone())
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(EmParams {
                    kernel_set: KernelSet::new(kernels)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut model = DecnModel::from_blocks(ems, file.share_weights, file.depth)?;
        model.trained_on = file.trained_on;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        DecnModel::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    share_weights: bool,
    depth: usize,
    kernel_sizes: Vec<usize>,
    ems: Vec<BTreeMap<String, Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    trained_on: Option<TrainedOn>,
}

/// Survivor mask from pairwise fitness comparison, one flag per cell:
/// `true` keeps the parent (the offspring is strictly worse), `false` takes
/// the offspring. Exact ties go to the offspring because the indicator is
/// strict.
pub fn selection_mask(parent_fitness: &[f64], offspring_fitness: &[f64]) -> Vec<bool> {
    parent_fitness
        .iter()
        .zip(offspring_fitness)
        .map(|(&p, &o)| o - p > 0.0)
        .collect()
}

/// Offspring generation: the average of depthwise convolutions of the sorted
/// decision channels, one per kernel, clamped to the instance bounds. The
/// fitness channel does not participate; the returned grid is stale.
///
/// Caller contract: `pop` is evaluated and in the descending-sorted layout.
pub fn crm_forward(pop: PopulationGrid, params: &EmParams) -> Result<PopulationGrid> {
    let kernels = params.kernel_set.kernels();
    let mut acc = depthwise_conv2d(pop.decisions(), &kernels[0])?;
    for k in &kernels[1..] {
        let c = depthwise_conv2d(pop.decisions(), k)?;
        for (a, &v) in acc.data_mut().iter_mut().zip(c.data()) {
            *a += v;
        }
    }
    let factor = 1.0 / kernels.len() as f64;
    for v in acc.data_mut() {
        *v *= factor;
    }
    let (lower, upper) = pop.bounds();
    let dim = pop.dim();
    for (i, v) in acc.data_mut().iter_mut().enumerate() {
        let d = i % dim;
        *v = v.clamp(lower[d], upper[d]);
    }
    Ok(pop.with_decisions(acc))
}

/// Survivor selection: cellwise parent-vs-offspring comparison. The output
/// keeps the parent where the offspring is strictly worse and the offspring
/// otherwise; its fitness channel is the cellwise minimum of the two. The
/// evaluation count is inherited from the offspring grid, whose lineage
/// already includes the parent's charge.
pub fn sm_select(parent: &PopulationGrid, offspring: PopulationGrid) -> Result<PopulationGrid> {
    if parent.side() != offspring.side() || parent.dim() != offspring.dim() {
        return Err(Error::Shape(format!(
            "parent {}x{}x{} vs offspring {}x{}x{}",
            parent.side(),
            parent.side(),
            parent.dim(),
            offspring.side(),
            offspring.side(),
            offspring.dim()
        )));
    }
    let parent_fit = parent.fitness()?;
    let offspring_fit = offspring.fitness()?;
    let mask = selection_mask(parent_fit.data(), offspring_fit.data());

    let dim = parent.dim();
    let mut decisions = Vec::with_capacity(parent.decisions().len());
    let mut fitness = Vec::with_capacity(parent_fit.len());
    for (cell, &keep_parent) in mask.iter().enumerate() {
        let src = if keep_parent {
            parent.decisions().data()
        } else {
            offspring.decisions().data()
        };
        decisions.extend_from_slice(&src[cell * dim..(cell + 1) * dim]);
        fitness.push(if keep_parent {
            parent_fit.data()[cell]
        } else {
            offspring_fit.data()[cell]
        });
    }

    let evals = offspring.eval_count();
    let shape = parent.decisions().shape().to_vec();
    let fit_shape = parent_fit.shape().to_vec();
    Ok(offspring
        .with_decisions(Tensor::from_parts(shape, decisions))
        .with_fitness(Tensor::from_parts(fit_shape, fitness), evals))
}

/// One evolution module: evaluate if stale, sort, generate offspring,
/// evaluate them, select survivors. Charges exactly `L^2` new evaluations
/// (offspring only; parent fitness is carried over).
pub fn em_step(
    pop: PopulationGrid,
    params: &EmParams,
    inst: &ObjectiveInstance,
) -> Result<PopulationGrid> {
    let parent = pop.evaluate(inst)?.sort_descending()?;
    let offspring = crm_forward(parent.clone(), params)?.evaluate(inst)?;
    sm_select(&parent, offspring)
}

/// Runs the full stack: `depth` evolution modules applied to `s0`, recording
/// best/mean fitness and the evaluation count after the initial evaluation
/// and after every step.
pub fn decn_run(
    s0: PopulationGrid,
    model: &DecnModel,
    inst: &ObjectiveInstance,
) -> Result<(PopulationGrid, RunRecord)> {
    if model.ems().is_empty() {
        return Err(Error::Config("model has no parameter blocks".into()));
    }
    if s0.side() < model.min_side() {
        return Err(Error::Config(format!(
            "lattice side {} is below the kernel minimum {}",
            s0.side(),
            model.min_side()
        )));
    }
    let mut record = RunRecord::new(RunMeta {
        algorithm: "decn".into(),
        function: inst.id.to_string(),
        dim: inst.dim,
        side: s0.side(),
        seed: 0,
        model_path: None,
    });
    let mut pop = s0.evaluate(inst)?;
    record.push(0, pop.best_fitness()?, pop.mean_fitness()?, pop.eval_count());
    for step in 0..model.depth() {
        pop = em_step(pop, model.em_params(step), inst)?;
        record.push(
            step + 1,
            pop.best_fitness()?,
            pop.mean_fitness()?,
            pop.eval_count(),
        );
    }
    Ok((pop, record))
}

/// Taped twin of [`crm_forward`], differentiable in the kernels.
pub fn crm_forward_taped<'t>(
    sorted_decisions: Var<'t>,
    kernels: &[Var<'t>],
    lower: &[f64],
    upper: &[f64],
) -> Result<Var<'t>> {
    let mut acc = sorted_decisions.depthwise_conv(kernels[0])?;
    for &k in &kernels[1..] {
        acc = acc.add(sorted_decisions.depthwise_conv(k)?);
    }
    Ok(acc
        .scale(1.0 / kernels.len() as f64)
        .clamp_channels(lower, upper))
}

/// Final state of a taped run: decision and fitness tensors on the tape.
pub struct TapedRun<'t> {
    pub decisions: Var<'t>,
    pub fitness: Var<'t>,
    /// Mean fitness of the initial population, a constant for the loss.
    pub initial_mean_fitness: f64,
}

/// Taped twin of [`decn_run`]. `kernel_vars` holds the kernels to apply at
/// each step; a weight-shared model passes the same leaf handles for every
/// step, which makes their gradients accumulate across applications. Sort
/// permutations and selection masks are derived from recorded values and are
/// constants in backward; only the final population's evaluations carry
/// gradient back into the kernels through the surviving branches.
pub fn decn_run_taped<'t>(
    tape: &'t Tape,
    s0: &PopulationGrid,
    kernel_vars: &[Vec<Var<'t>>],
    inst: &ObjectiveInstance,
) -> Result<TapedRun<'t>> {
    let (lower, upper) = s0.bounds();
    let mut decisions = tape.leaf(s0.decisions().clone());
    let mut fitness = inst.eval_cells_taped(tape, decisions)?;
    let initial_mean_fitness = {
        let f = fitness.value_ref();
        let sum: f64 = f.data().iter().sum();
        sum * (1.0 / f.len() as f64)
    };
    for kernels in kernel_vars {
        let perm = {
            let f = fitness.value_ref();
            crate::population::descending_permutation_of(f.data())
        };
        let sorted_dec = decisions.gather_cells(&perm);
        let sorted_fit = fitness.gather_cells(&perm);
        let off_dec = crm_forward_taped(sorted_dec, kernels, lower, upper)?;
        let off_fit = inst.eval_cells_taped(tape, off_dec)?;
        let mask = {
            let pf = sorted_fit.value_ref();
            let of = off_fit.value_ref();
            selection_mask(pf.data(), of.data())
        };
        decisions = Var::select_cells(&mask, sorted_dec, off_dec);
        fitness = Var::select_cells(&mask, sorted_fit, off_fit);
    }
    Ok(TapedRun {
        decisions,
        fitness,
        initial_mean_fitness,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functions::{sample_shift, ArmCase, FunctionId};
    use crate::rng::substream;
    use crate::tensor::max_abs_diff;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn identity_kernels() -> EmParams {
        let kernels = DEFAULT_KERNEL_SIZES
            .iter()
            .map(|&s| {
                let mut k = Tensor::zeros(&[s, s]);
                k.data_mut()[(s / 2) * s + s / 2] = 1.0;
                k
            })
            .collect();
        EmParams {
            kernel_set: KernelSet::new(kernels).unwrap(),
        }
    }

    fn f4(dim: usize, seed: u64) -> ObjectiveInstance {
        let mut rng = substream(seed, "shifts");
        sample_shift(FunctionId::F4, dim, &mut rng).unwrap()
    }

    #[test]
    fn kernel_set_rejects_even_and_duplicate_sizes() {
        assert!(KernelSet::new(vec![Tensor::zeros(&[2, 2])]).is_err());
        assert!(KernelSet::new(vec![Tensor::zeros(&[3, 3]), Tensor::zeros(&[3, 3])]).is_err());
        assert!(KernelSet::new(vec![Tensor::zeros(&[3, 5])]).is_err());
    }

    #[test]
    fn identity_kernels_reproduce_parents() {
        let inst = f4(3, 1);
        let mut rng = substream(1, "init");
        let pop = PopulationGrid::init(6, &inst, &mut rng)
            .evaluate(&inst)
            .unwrap()
            .sort_descending()
            .unwrap();
        let offspring = crm_forward(pop.clone(), &identity_kernels()).unwrap();
        // The three-kernel average computes (x + x + x) / 3, so identity
        // kernels reproduce parents to rounding, not bit-exactly.
        assert!(max_abs_diff(offspring.decisions(), pop.decisions()) <= 1e-10);
        assert!(!offspring.is_evaluated());
    }

    #[test]
    fn averaging_kernel_preserves_constant_population() {
        let inst = f4(2, 2);
        let kernel = Tensor::filled(&[3, 3], 1.0 / 9.0);
        let params = EmParams {
            kernel_set: KernelSet::new(vec![kernel]).unwrap(),
        };
        let constant = vec![7.0; 5 * 5 * 2];
        let pop = PopulationGrid::from_parts(
            Tensor::from_vec(&[5, 5, 2], constant.clone()).unwrap(),
            None,
            inst.lower.clone(),
            inst.upper.clone(),
            0,
        )
        .unwrap();
        let offspring = crm_forward(pop, &params).unwrap();
        for (&got, &want) in offspring.decisions().data().iter().zip(&constant) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn crm_matches_conv_average_clamp_composition() {
        let inst = f4(3, 3);
        let mut rng = substream(4, "init");
        let mut krng = StdRng::seed_from_u64(5);
        let params = EmParams {
            kernel_set: KernelSet::gaussian(&DEFAULT_KERNEL_SIZES, 0.5, &mut krng).unwrap(),
        };
        let pop = PopulationGrid::init(6, &inst, &mut rng)
            .evaluate(&inst)
            .unwrap()
            .sort_descending()
            .unwrap();

        let convs: Vec<Tensor> = params
            .kernel_set
            .kernels()
            .iter()
            .map(|k| depthwise_conv2d(pop.decisions(), k).unwrap())
            .collect();
        let mut expect = Tensor::zeros(pop.decisions().shape());
        for c in &convs {
            for (e, &v) in expect.data_mut().iter_mut().zip(c.data()) {
                *e += v / 3.0;
            }
        }
        for (i, v) in expect.data_mut().iter_mut().enumerate() {
            *v = v.clamp(inst.lower[i % 3], inst.upper[i % 3]);
        }

        let offspring = crm_forward(pop, &params).unwrap();
        assert!(max_abs_diff(offspring.decisions(), &expect) <= 1e-10);
    }

    /// Cellwise reference for the selection rule: keep the parent where the
    /// offspring fitness is strictly larger, take the offspring otherwise.
    fn selection_oracle(
        parent: &PopulationGrid,
        offspring: &PopulationGrid,
    ) -> (Vec<f64>, Vec<f64>) {
        let dim = parent.dim();
        let pf = parent.fitness().unwrap().data();
        let of = offspring.fitness().unwrap().data();
        let mut dec = Vec::new();
        let mut fit = Vec::new();
        for cell in 0..parent.individuals() {
            let keep_parent = of[cell] - pf[cell] > 0.0;
            let src = if keep_parent {
                parent.decisions().data()
            } else {
                offspring.decisions().data()
            };
            dec.extend_from_slice(&src[cell * dim..(cell + 1) * dim]);
            fit.push(pf[cell].min(of[cell]));
        }
        (dec, fit)
    }

    #[test]
    fn sm_select_matches_cellwise_oracle_exactly() {
        let inst = f4(2, 6);
        for seed in 0..20 {
            let mut rng = substream(seed, "init");
            let parent = PopulationGrid::init(4, &inst, &mut rng).evaluate(&inst).unwrap();
            let mut offspring = PopulationGrid::init(4, &inst, &mut rng);
            // Force exact ties on a few cells by copying parent individuals.
            if seed % 2 == 0 {
                let mut data = offspring.decisions().data().to_vec();
                data[..2 * inst.dim]
                    .copy_from_slice(&parent.decisions().data()[..2 * inst.dim]);
                offspring = offspring
                    .with_decisions(Tensor::from_vec(&[4, 4, inst.dim], data).unwrap());
            }
            let offspring = offspring.evaluate(&inst).unwrap();
            let (want_dec, want_fit) = selection_oracle(&parent, &offspring);
            let selected = sm_select(&parent, offspring).unwrap();
            assert_eq!(selected.decisions().data(), &want_dec[..]);
            assert_eq!(selected.fitness().unwrap().data(), &want_fit[..]);
        }
    }

    #[test]
    fn sm_select_extremes_and_ties() {
        let inst = f4(1, 7);
        let b = inst.shift[0];
        let make = |offsets: &[f64]| {
            PopulationGrid::from_parts(
                Tensor::from_vec(&[2, 2, 1], offsets.iter().map(|o| b + o).collect()).unwrap(),
                None,
                inst.lower.clone(),
                inst.upper.clone(),
                0,
            )
            .unwrap()
            .evaluate(&inst)
            .unwrap()
        };
        let parent = make(&[1.0, 2.0, 3.0, 4.0]);

        // Strictly worse offspring everywhere: parent survives unchanged.
        let worse = make(&[2.0, 3.0, 4.0, 5.0]);
        let out = sm_select(&parent, worse).unwrap();
        assert_eq!(out.decisions(), parent.decisions());

        // Strictly better offspring everywhere: offspring replaces all.
        let better = make(&[0.5, 1.0, 1.5, 2.0]);
        let out = sm_select(&parent, better.clone()).unwrap();
        assert_eq!(out.decisions(), better.decisions());

        // Exact tie: the strict indicator keeps the offspring.
        let tied = make(&[-1.0, 2.0, 3.0, 4.0]);
        let out = sm_select(&parent, tied.clone()).unwrap();
        assert_eq!(out.individual(0, 0), tied.individual(0, 0));
    }

    #[test]
    fn crm_checks_padding_bound_for_every_kernel() {
        // L=2 admits a 3x3 kernel but not the 5x5 or 7x7 ones.
        let inst = f4(2, 60);
        let mut krng = StdRng::seed_from_u64(61);
        let params = EmParams {
            kernel_set: KernelSet::gaussian(&DEFAULT_KERNEL_SIZES, 0.5, &mut krng).unwrap(),
        };
        let mut rng = substream(62, "init");
        let pop = PopulationGrid::init(2, &inst, &mut rng)
            .evaluate(&inst)
            .unwrap()
            .sort_descending()
            .unwrap();
        assert!(matches!(
            crm_forward(pop, &params),
            Err(Error::PaddingOverflow { kernel: 5, side: 2 })
        ));
    }

    #[test]
    fn em_step_charges_one_lattice_of_evaluations() {
        let inst = f4(10, 8);
        let mut rng = substream(9, "init");
        let mut krng = StdRng::seed_from_u64(10);
        let params = EmParams {
            kernel_set: KernelSet::gaussian(&DEFAULT_KERNEL_SIZES, 0.5, &mut krng).unwrap(),
        };
        let pop = PopulationGrid::init(10, &inst, &mut rng);
        let one = em_step(pop, &params, &inst).unwrap();
        assert_eq!(one.eval_count(), 200); // init charge + one offspring pass
        let two = em_step(one, &params, &inst).unwrap();
        let three = em_step(two, &params, &inst).unwrap();
        assert_eq!(three.eval_count(), 400);
    }

    #[test]
    fn em_step_never_worsens_best_fitness() {
        let mut krng = StdRng::seed_from_u64(11);
        for seed in 0..10 {
            let inst = f4(5, 20 + seed);
            let params = EmParams {
                kernel_set: KernelSet::gaussian(&DEFAULT_KERNEL_SIZES, 0.5, &mut krng).unwrap(),
            };
            let mut rng = substream(seed, "init");
            let pop = PopulationGrid::init(8, &inst, &mut rng).evaluate(&inst).unwrap();
            let before = pop.best_fitness().unwrap();
            let after = em_step(pop, &params, &inst).unwrap().best_fitness().unwrap();
            assert!(after <= before, "seed {seed}: best rose {before} -> {after}");
        }
    }

    #[test]
    fn identity_em_only_resorts_population() {
        let inst = f4(2, 12);
        let mut rng = substream(13, "init");
        let pop = PopulationGrid::init(5, &inst, &mut rng).evaluate(&inst).unwrap();
        let sorted = pop.clone().sort_descending().unwrap();
        // Identity offspring match the sorted parent up to the rounding of
        // the three-way average, so the step only reorders the lattice.
        let out = em_step(pop, &identity_kernels(), &inst).unwrap();
        assert!(max_abs_diff(out.decisions(), sorted.decisions()) <= 1e-10);
        for (got, want) in out
            .fitness()
            .unwrap()
            .data()
            .iter()
            .zip(sorted.fitness().unwrap().data())
        {
            assert!((got - want).abs() <= 1e-9);
        }
    }

    #[test]
    fn decn_run_records_and_accounts_evaluations() {
        let inst = f4(10, 14);
        let mut krng = StdRng::seed_from_u64(15);
        let model = DecnModel::init(3, true, &DEFAULT_KERNEL_SIZES, &mut krng).unwrap();
        let mut rng = substream(16, "init");
        let s0 = PopulationGrid::init(10, &inst, &mut rng);
        let (final_pop, record) = decn_run(s0, &model, &inst).unwrap();
        assert_eq!(record.entries.len(), 4);
        assert_eq!(final_pop.eval_count(), 400);
        assert_eq!(record.final_evals(), Some(400));
        assert_eq!(model.evals_for_run(10), 400);
        assert!(record.is_elitist_curve());
    }

    #[test]
    fn shared_and_unshared_agree_at_depth_one() {
        let inst = f4(4, 17);
        let mut krng = StdRng::seed_from_u64(18);
        let shared = DecnModel::init(1, true, &DEFAULT_KERNEL_SIZES, &mut krng).unwrap();
        let unshared =
            DecnModel::from_blocks(shared.ems().to_vec(), false, 1).unwrap();
        let mut rng = substream(19, "init");
        let s0 = PopulationGrid::init(6, &inst, &mut rng);
        let (a, _) = decn_run(s0.clone(), &shared, &inst).unwrap();
        let (b, _) = decn_run(s0, &unshared, &inst).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn small_lattice_is_rejected_below_kernel_minimum() {
        let inst = f4(2, 21);
        let mut krng = StdRng::seed_from_u64(22);
        let model = DecnModel::init(1, true, &DEFAULT_KERNEL_SIZES, &mut krng).unwrap();
        assert_eq!(model.min_side(), 4);
        let mut rng = substream(23, "init");
        let s0 = PopulationGrid::init(3, &inst, &mut rng);
        assert!(matches!(
            decn_run(s0, &model, &inst),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn model_transfers_across_dimension_and_scale() {
        let mut krng = StdRng::seed_from_u64(24);
        let model = DecnModel::init(2, true, &DEFAULT_KERNEL_SIZES, &mut krng).unwrap();
        for (dim, side) in [(2usize, 6usize), (10, 10), (100, 6), (10, 20)] {
            let inst = f4(dim, 30 + dim as u64 + side as u64);
            let mut rng = substream(side as u64, "init");
            let s0 = PopulationGrid::init(side, &inst, &mut rng);
            let (pop, record) = decn_run(s0, &model, &inst).unwrap();
            assert_eq!(pop.dim(), dim);
            assert_eq!(pop.side(), side);
            assert!(record.is_elitist_curve());
        }
    }

    #[test]
    fn em_step_is_invariant_to_input_relabeling() {
        // Sorting canonicalizes the layout, so any fitness-preserving
        // relabeling of the input cells leaves the step's output unchanged
        // (bitwise, when fitness values are distinct).
        let inst = f4(3, 50);
        let mut krng = StdRng::seed_from_u64(51);
        let params = EmParams {
            kernel_set: KernelSet::gaussian(&DEFAULT_KERNEL_SIZES, 0.5, &mut krng).unwrap(),
        };
        let mut rng = substream(52, "init");
        let pop = PopulationGrid::init(5, &inst, &mut rng).evaluate(&inst).unwrap();

        let mut perm: Vec<usize> = (0..25).collect();
        // Deterministic shuffle.
        for i in (1..25).rev() {
            let j = (i * 7 + 3) % (i + 1);
            perm.swap(i, j);
        }
        let relabeled = pop.clone().permute_cells(&perm);

        let a = em_step(pop, &params, &inst).unwrap();
        let b = em_step(relabeled, &params, &inst).unwrap();
        assert_eq!(a.decisions(), b.decisions());
        assert_eq!(a.fitness().unwrap(), b.fitness().unwrap());
    }

    #[test]
    fn model_json_round_trips_bit_exact() {
        let mut krng = StdRng::seed_from_u64(25);
        let mut model = DecnModel::init(3, false, &DEFAULT_KERNEL_SIZES, &mut krng).unwrap();
        model.set_trained_on(TrainedOn {
            suite: "low".into(),
            dim: 2,
            side: 10,
            seed: 7,
        });
        let json = model.to_json().unwrap();
        let back = DecnModel::from_json(&json).unwrap();
        assert_eq!(model, back);
        assert_eq!(json, back.to_json().unwrap());
    }

    #[test]
    fn model_load_rejects_unknown_version() {
        let mut krng = StdRng::seed_from_u64(26);
        let model = DecnModel::init(1, true, &DEFAULT_KERNEL_SIZES, &mut krng).unwrap();
        let json = model.to_json().unwrap().replace("\"version\": 1", "\"version\": 9");
        assert!(matches!(
            DecnModel::from_json(&json),
            Err(Error::Version { found: 9, expected: 1 })
        ));
    }

    #[test]
    fn taped_run_matches_plain_run_bit_for_bit() {
        for (id, dim) in [
            (FunctionId::F4, 3),
            (FunctionId::F7, 2),
            (FunctionId::F9, 5),
        ] {
            let mut srng = substream(40, "shifts");
            let inst = sample_shift(id, dim, &mut srng).unwrap();
            let mut krng = StdRng::seed_from_u64(41);
            let model = DecnModel::init(3, true, &DEFAULT_KERNEL_SIZES, &mut krng).unwrap();
            let mut rng = substream(42, "init");
            let s0 = PopulationGrid::init(5, &inst, &mut rng);

            let (plain, _) = decn_run(s0.clone(), &model, &inst).unwrap();

            let tape = Tape::new();
            let kvars: Vec<Var<'_>> = model.ems()[0]
                .kernel_set
                .kernels()
                .iter()
                .map(|k| tape.leaf(k.clone()))
                .collect();
            let steps: Vec<Vec<Var<'_>>> = (0..3).map(|_| kvars.clone()).collect();
            let taped = decn_run_taped(&tape, &s0, &steps, &inst).unwrap();

            assert_eq!(taped.decisions.value().data(), plain.decisions().data());
            assert_eq!(
                taped.fitness.value().data(),
                plain.fitness().unwrap().data()
            );
        }
    }

    #[test]
    fn taped_run_on_arm_matches_plain() {
        let inst = crate::functions::ObjectiveInstance::arm(ArmCase::Cc, 3, [15.0, -10.0], 60.0)
            .unwrap();
        let mut krng = StdRng::seed_from_u64(43);
        let model = DecnModel::init(2, false, &DEFAULT_KERNEL_SIZES, &mut krng).unwrap();
        let mut rng = substream(44, "init");
        let s0 = PopulationGrid::init(4, &inst, &mut rng);
        let (plain, _) = decn_run(s0.clone(), &model, &inst).unwrap();

        let tape = Tape::new();
        let steps: Vec<Vec<Var<'_>>> = model
            .ems()
            .iter()
            .map(|em| {
                em.kernel_set
                    .kernels()
                    .iter()
                    .map(|k| tape.leaf(k.clone()))
                    .collect()
            })
            .collect();
        let taped = decn_run_taped(&tape, &s0, &steps, &inst).unwrap();
        assert_eq!(taped.decisions.value().data(), plain.decisions().data());
        assert_eq!(taped.fitness.value().data(), plain.fitness().unwrap().data());
    }
}
