//! Reference optimizers under the same evaluation accounting as the learned
//! stack: DE/rand/1/bin and uniform random search. One fitness query costs
//! one evaluation everywhere, so convergence curves are directly comparable.

use rand::Rng;

use crate::error::{Error, Result};
use crate::functions::ObjectiveInstance;
use crate::record::{RunMeta, RunRecord};

/// Configuration for DE/rand/1/bin.
#[derive(Clone, Debug, PartialEq)]
pub struct DeConfig {
    pub pop_size: usize,
    /// Differential weight applied to the difference vector.
    pub weight: f64,
    /// Crossover rate of the binomial crossover.
    pub crossover: f64,
    /// Maximum number of fitness evaluations, initial population included.
    pub budget: u64,
}

impl Default for DeConfig {
    fn default() -> Self {
        DeConfig {
            pop_size: 100,
            weight: 0.5,
            crossover: 0.9,
            budget: 400,
        }
    }
}

impl DeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pop_size < 4 {
            return Err(Error::Config(
                "DE needs at least 4 individuals to pick distinct donors".into(),
            ));
        }
        if !(self.crossover > 0.0 && self.crossover <= 1.0) {
            return Err(Error::Config(format!(
                "crossover rate must be in (0, 1], got {}",
                self.crossover
            )));
        }
        if !(self.weight >= 0.0) {
            return Err(Error::Config(format!(
                "differential weight must be non-negative, got {}",
                self.weight
            )));
        }
        if self.budget < self.pop_size as u64 {
            return Err(Error::Config(format!(
                "budget {} cannot cover the initial population of {}",
                self.budget, self.pop_size
            )));
        }
        Ok(())
    }
}

/// Best solution an optimizer found, together with its convergence record.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub best_x: Vec<f64>,
    pub best_fitness: f64,
    pub record: RunRecord,
}

fn sample_uniform<R: Rng>(inst: &ObjectiveInstance, rng: &mut R) -> Vec<f64> {
    (0..inst.dim)
        .map(|d| rng.gen_range(inst.lower[d]..inst.upper[d]))
        .collect()
}

/// Classic DE/rand/1/bin with greedy one-to-one survivor selection.
///
/// Per parent: mutant `x_r1 + F (x_r2 - x_r3)` with distinct donors, binomial
/// crossover with a forced dimension, clamp to bounds, replace the parent if
/// the trial is no worse. Stops before any evaluation would exceed the
/// budget, possibly mid-generation.
pub fn de_rand_1_bin<R: Rng>(
    inst: &ObjectiveInstance,
    cfg: &DeConfig,
    rng: &mut R,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let np = cfg.pop_size;
    let dim = inst.dim;

    let mut pop: Vec<Vec<f64>> = (0..np).map(|_| sample_uniform(inst, rng)).collect();
    let mut fit = Vec::with_capacity(np);
    for x in &pop {
        fit.push(inst.eval(x)?);
    }
    let mut evals = np as u64;

    let mut record = RunRecord::new(RunMeta {
        algorithm: "de-rand-1-bin".into(),
        function: inst.id.to_string(),
        dim,
        side: 0,
        seed: 0,
        model_path: None,
    });
    let push_entry = |record: &mut RunRecord, gen: usize, fit: &[f64], evals: u64| {
        let best = fit.iter().copied().fold(f64::INFINITY, f64::min);
        let mean = fit.iter().sum::<f64>() * (1.0 / fit.len() as f64);
        record.push(gen, best, mean, evals);
    };
    push_entry(&mut record, 0, &fit, evals);

    let mut gen = 0;
    while evals < cfg.budget {
        gen += 1;
        for i in 0..np {
            if evals >= cfg.budget {
                break;
            }
            let mut pick = || loop {
                let r = rng.gen_range(0..np);
                if r != i {
                    return r;
                }
            };
            let r1 = pick();
            let r2 = loop {
                let r = pick();
                if r != r1 {
                    break r;
                }
            };
            let r3 = loop {
                let r = pick();
                if r != r1 && r != r2 {
                    break r;
                }
            };
            let forced = rng.gen_range(0..dim);
            let mut trial = Vec::with_capacity(dim);
            for d in 0..dim {
                let from_mutant = rng.gen_range(0.0..1.0) < cfg.crossover || d == forced;
                let v = if from_mutant {
                    pop[r1][d] + cfg.weight * (pop[r2][d] - pop[r3][d])
                } else {
                    pop[i][d]
                };
                trial.push(v.clamp(inst.lower[d], inst.upper[d]));
            }
            let trial_fit = inst.eval(&trial)?;
            evals += 1;
            // Greedy selection; ties go to the trial.
            if trial_fit <= fit[i] {
                pop[i] = trial;
                fit[i] = trial_fit;
            }
        }
        push_entry(&mut record, gen, &fit, evals);
    }

    let (best_i, _) = fit
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).expect("fitness is finite"))
        .expect("population is non-empty");
    Ok(RunOutcome {
        best_x: pop[best_i].clone(),
        best_fitness: fit[best_i],
        record,
    })
}

/// Uniform in-bounds sampling with best-so-far tracking. One record entry per
/// sample: the running best and the running mean of everything drawn so far.
pub fn random_search<R: Rng>(
    inst: &ObjectiveInstance,
    budget: u64,
    rng: &mut R,
) -> Result<RunOutcome> {
    if budget == 0 {
        return Err(Error::Config("random search needs a positive budget".into()));
    }
    let mut record = RunRecord::new(RunMeta {
        algorithm: "random-search".into(),
        function: inst.id.to_string(),
        dim: inst.dim,
        side: 0,
        seed: 0,
        model_path: None,
    });
    let mut best_x = Vec::new();
    let mut best = f64::INFINITY;
    let mut sum = 0.0;
    for t in 1..=budget {
        let x = sample_uniform(inst, rng);
        let f = inst.eval(&x)?;
        sum += f;
        if f < best {
            best = f;
            best_x = x;
        }
        record.push(t as usize, best, sum / t as f64, t);
    }
    Ok(RunOutcome {
        best_x,
        best_fitness: best,
        record,
    })
}
