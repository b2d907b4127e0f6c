//! Shared fixtures for the criterion benchmarks.

use decn_core::evolution::{DecnModel, DEFAULT_KERNEL_SIZES};
use decn_core::functions::{sample_shift, FunctionId, ObjectiveInstance};
use decn_core::population::PopulationGrid;
use decn_core::rng::substream;

pub struct Fixture {
    pub inst: ObjectiveInstance,
    pub model: DecnModel,
    pub pop: PopulationGrid,
}

/// A sorted, evaluated population with a fresh weight-shared model.
pub fn fixture(side: usize, dim: usize, depth: usize) -> Fixture {
    let mut shift_rng = substream(1, "bench-shifts");
    let inst = sample_shift(FunctionId::F4, dim, &mut shift_rng).expect("valid instance");
    let mut model_rng = substream(1, "bench-model");
    let model =
        DecnModel::init(depth, true, &DEFAULT_KERNEL_SIZES, &mut model_rng).expect("valid model");
    let mut pop_rng = substream(1, "bench-pop");
    let pop = PopulationGrid::init(side, &inst, &mut pop_rng)
        .evaluate(&inst)
        .expect("finite fitness")
        .sort_descending()
        .expect("evaluated");
    Fixture { inst, model, pop }
}
