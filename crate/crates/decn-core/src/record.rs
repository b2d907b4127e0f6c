//! Per-run convergence records shared by every optimizer in the crate, so
//! curves from different algorithms are directly comparable at equal budgets.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// State of one optimization run after a generation: best and mean fitness of
/// the population, and the cumulative number of fitness queries charged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub gen: usize,
    pub best: f64,
    pub mean: f64,
    pub evals: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub algorithm: String,
    pub function: String,
    pub dim: usize,
    /// Population lattice side for grid algorithms, 0 when not applicable.
    pub side: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub model_path: Option<String>,
}

/// Convergence curve of one run: best/mean fitness and evaluation count per
/// generation, plus enough metadata to regenerate the run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub meta: RunMeta,
    pub entries: Vec<RunEntry>,
}

impl RunRecord {
    pub fn new(meta: RunMeta) -> Self {
        RunRecord {
            meta,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, gen: usize, best: f64, mean: f64, evals: u64) {
        self.entries.push(RunEntry {
            gen,
            best,
            mean,
            evals,
        });
    }

    pub fn final_best(&self) -> Option<f64> {
        self.entries.last().map(|e| e.best)
    }

    pub fn final_evals(&self) -> Option<u64> {
        self.entries.last().map(|e| e.evals)
    }

    /// True when evaluation counts strictly increase and the best-so-far
    /// curve never rises — the contract for elitist optimizers.
    pub fn is_elitist_curve(&self) -> bool {
        self.entries
            .windows(2)
            .all(|w| w[1].evals > w[0].evals && w[1].best <= w[0].best)
    }

    /// CSV with header `gen,best,mean,evals`, one row per generation.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "gen,best,mean,evals")?;
        for e in &self.entries {
            writeln!(out, "{},{},{},{}", e.gen, e.best, e.mean, e.evals)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv is ascii")
    }
}
