//! The population lattice: initialization, fitness evaluation, the
//! fitness-sorted layout the convolution kernels assume, and bound handling.
//!
//! Grids are immutable values; every operation consumes its input and returns
//! a new grid. A grid is either evaluated (fitness channel present) or stale.

use std::io::Write;

use rand::Rng;

use crate::error::{Error, Result};
use crate::functions::ObjectiveInstance;
use crate::tensor::Tensor;

/// An `L x L` lattice of `D`-dimensional individuals plus a fitness channel.
#[derive(Clone, Debug, PartialEq)]
pub struct PopulationGrid {
    side: usize,
    dim: usize,
    decisions: Tensor,
    fitness: Option<Tensor>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    eval_count: u64,
}

impl PopulationGrid {
    /// Uniform random population within the instance's bounds; fitness stale.
    pub fn init<R: Rng>(side: usize, inst: &ObjectiveInstance, rng: &mut R) -> Self {
        let dim = inst.dim;
        let mut data = Vec::with_capacity(side * side * dim);
        for _ in 0..side * side {
            for d in 0..dim {
                data.push(rng.gen_range(inst.lower[d]..inst.upper[d]));
            }
        }
        PopulationGrid {
            side,
            dim,
            decisions: Tensor::from_parts(vec![side, side, dim], data),
            fitness: None,
            lower: inst.lower.clone(),
            upper: inst.upper.clone(),
            eval_count: 0,
        }
    }

    /// Builds a grid from a decision tensor and bounds. Fitness, when given,
    /// must equal what evaluation would produce for those decisions.
    pub fn from_parts(
        decisions: Tensor,
        fitness: Option<Tensor>,
        lower: Vec<f64>,
        upper: Vec<f64>,
        eval_count: u64,
    ) -> Result<Self> {
        if decisions.rank() != 3 || decisions.shape()[0] != decisions.shape()[1] {
            return Err(Error::Shape(format!(
                "population lattice must be L x L x D, got {:?}",
                decisions.shape()
            )));
        }
        let side = decisions.shape()[0];
        let dim = decisions.shape()[2];
        if lower.len() != dim || upper.len() != dim {
            return Err(Error::Shape(format!(
                "bounds carry {}/{} entries for dim {dim}",
                lower.len(),
                upper.len()
            )));
        }
        if let Some(f) = &fitness {
            if f.shape() != [side, side, 1] {
                return Err(Error::Shape(format!(
                    "fitness channel must be {side} x {side} x 1, got {:?}",
                    f.shape()
                )));
            }
            f.validate_finite("fitness channel")?;
        }
        Ok(PopulationGrid {
            side,
            dim,
            decisions,
            fitness,
            lower,
            upper,
            eval_count,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn individuals(&self) -> usize {
        self.side * self.side
    }

    pub fn decisions(&self) -> &Tensor {
        &self.decisions
    }

    pub fn bounds(&self) -> (&[f64], &[f64]) {
        (&self.lower, &self.upper)
    }

    pub fn eval_count(&self) -> u64 {
        self.eval_count
    }

    pub fn is_evaluated(&self) -> bool {
        self.fitness.is_some()
    }

    pub fn fitness(&self) -> Result<&Tensor> {
        self.fitness.as_ref().ok_or(Error::NotEvaluated)
    }

    /// Decision vector of the individual at lattice cell `(row, col)`.
    pub fn individual(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.side + col) * self.dim;
        &self.decisions.data()[start..start + self.dim]
    }

    /// Fills the fitness channel, charging one evaluation per cell. Already
    /// evaluated grids pass through unchanged — re-evaluating an unchanged
    /// grid neither recharges nor alters fitness.
    pub fn evaluate(self, inst: &ObjectiveInstance) -> Result<Self> {
        if self.fitness.is_some() {
            return Ok(self);
        }
        let fitness = inst.eval_cells(&self.decisions)?;
        if let Some(pos) = fitness.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "fitness of individual at cell ({}, {}) is {}",
                pos / self.side,
                pos % self.side,
                fitness.data()[pos]
            )));
        }
        let charged = self.individuals() as u64;
        Ok(PopulationGrid {
            fitness: Some(fitness),
            eval_count: self.eval_count + charged,
            ..self
        })
    }

    /// Smallest fitness in the grid — the incumbent under minimization.
    pub fn best_fitness(&self) -> Result<f64> {
        let f = self.fitness()?;
        Ok(f.data().iter().copied().fold(f64::INFINITY, f64::min))
    }

    /// Mean fitness, summed in row-major cell order. The taped loss computes
    /// the same quantity with the same summation order.
    pub fn mean_fitness(&self) -> Result<f64> {
        let f = self.fitness()?;
        let sum: f64 = f.data().iter().sum();
        Ok(sum * (1.0 / f.len() as f64))
    }

    /// Cell order that reads fitness in descending row-major order: worst
    /// individual at `(0, 0)`, best at `(L-1, L-1)`. Stable on ties.
    pub fn descending_permutation(&self) -> Result<Vec<usize>> {
        Ok(descending_permutation_of(self.fitness()?.data()))
    }

    /// Reorders individuals into the descending-fitness layout. The kernels
    /// are trained against this layout, so it must be reapplied at the start
    /// of every evolution step.
    pub fn sort_descending(self) -> Result<Self> {
        let perm = self.descending_permutation()?;
        Ok(self.permute_cells(&perm))
    }

    pub(crate) fn permute_cells(self, perm: &[usize]) -> Self {
        let fitness = self.fitness.as_ref().map(|f| {
            let mut data = Vec::with_capacity(f.len());
            for &src in perm {
                data.push(f.data()[src]);
            }
            Tensor::from_parts(f.shape().to_vec(), data)
        });
        let mut data = Vec::with_capacity(self.decisions.len());
        for &src in perm {
            data.extend_from_slice(&self.decisions.data()[src * self.dim..(src + 1) * self.dim]);
        }
        PopulationGrid {
            decisions: Tensor::from_parts(self.decisions.shape().to_vec(), data),
            fitness,
            ..self
        }
    }

    /// Clamps every decision value into its per-dimension bounds. Fitness of
    /// a clamped grid is stale by construction unless nothing moved.
    pub fn clip_to_bounds(self) -> Self {
        let mut changed = false;
        let dim = self.dim;
        let mut data = self.decisions.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            let d = i % dim;
            let clamped = v.clamp(self.lower[d], self.upper[d]);
            if clamped != *v {
                changed = true;
                *v = clamped;
            }
        }
        if !changed {
            return self;
        }
        PopulationGrid {
            decisions: Tensor::from_parts(self.decisions.shape().to_vec(), data),
            fitness: None,
            ..self
        }
    }

    /// Replaces the decision tensor, marking fitness stale.
    pub(crate) fn with_decisions(self, decisions: Tensor) -> Self {
        PopulationGrid {
            decisions,
            fitness: None,
            ..self
        }
    }

    /// Installs a fitness channel computed elsewhere (offspring selection),
    /// together with the new evaluation count.
    pub(crate) fn with_fitness(self, fitness: Tensor, eval_count: u64) -> Self {
        PopulationGrid {
            fitness: Some(fitness),
            eval_count,
            ..self
        }
    }

    /// Snapshot as CSV with columns `row,col,x_1..x_D,fitness`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        let fitness = self.fitness()?;
        write!(out, "row,col")?;
        for d in 1..=self.dim {
            write!(out, ",x_{d}")?;
        }
        writeln!(out, ",fitness")?;
        for row in 0..self.side {
            for col in 0..self.side {
                write!(out, "{row},{col}")?;
                for v in self.individual(row, col) {
                    write!(out, ",{v}")?;
                }
                writeln!(out, ",{}", fitness.data()[row * self.side + col])?;
            }
        }
        Ok(())
    }
}

/// Stable descending sort order over finite fitness values. Both the plain
/// and the taped evolution pipelines derive their layout from this one
/// function, so they cannot drift apart.
pub(crate) fn descending_permutation_of(fitness: &[f64]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..fitness.len()).collect();
    perm.sort_by(|&a, &b| fitness[b].partial_cmp(&fitness[a]).expect("fitness is finite"));
    perm
}
