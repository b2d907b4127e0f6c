//! The objective-function zoo: training functions F1-F3, test functions
//! F4-F9, the planar mechanical arm, and surrogate dataset builders.
//!
//! Every function exists twice: a plain scalar evaluation used by inference
//! and baselines, and a taped evaluation used during training. The two are
//! written to perform identical floating-point operations in identical order,
//! and a test pins them bit-for-bit.

use std::f64::consts::{E, PI};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const TWO_PI: f64 = 2.0 * PI;

/// Arm segment length in the simple case (lengths fixed, only angles free).
pub const ARM_SEGMENT_LENGTH: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FunctionId {
    F1,
    F2,
    F3,
    F4,
    F5,
    F6,
    F7,
    F8,
    F9,
    #[serde(rename = "arm-sc")]
    ArmSc,
    #[serde(rename = "arm-cc")]
    ArmCc,
}

impl FunctionId {
    pub const TEST_SUITE: [FunctionId; 6] = [
        FunctionId::F4,
        FunctionId::F5,
        FunctionId::F6,
        FunctionId::F7,
        FunctionId::F8,
        FunctionId::F9,
    ];

    pub const LOW_FIDELITY_SUITE: [FunctionId; 3] =
        [FunctionId::F1, FunctionId::F2, FunctionId::F3];

    pub fn is_arm(self) -> bool {
        matches!(self, FunctionId::ArmSc | FunctionId::ArmCc)
    }

    /// Box constraint on every decision variable.
    pub fn variable_range(self) -> (f64, f64) {
        match self {
            FunctionId::F1 | FunctionId::F2 | FunctionId::F3 => (-10.0, 10.0),
            FunctionId::F4 | FunctionId::F5 | FunctionId::F6 => (-100.0, 100.0),
            FunctionId::F7 => (-5.0, 5.0),
            FunctionId::F8 => (-600.0, 600.0),
            FunctionId::F9 => (-32.0, 32.0),
            FunctionId::ArmSc | FunctionId::ArmCc => (-PI, PI),
        }
    }

    /// Range each shift component is drawn from.
    pub fn shift_range(self) -> Result<(f64, f64)> {
        match self {
            FunctionId::F1 | FunctionId::F2 | FunctionId::F3 => Ok((-10.0, 10.0)),
            FunctionId::F4 | FunctionId::F5 | FunctionId::F6 => Ok((-50.0, 50.0)),
            FunctionId::F7 => Ok((-2.5, 2.5)),
            FunctionId::F8 => Ok((-300.0, 300.0)),
            FunctionId::F9 => Ok((-16.0, 16.0)),
            FunctionId::ArmSc | FunctionId::ArmCc => Err(Error::Config(
                "arm objectives are parameterized by a target point, not a shift".into(),
            )),
        }
    }
}

impl fmt::Display for FunctionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            FunctionId::F1 => "F1",
            FunctionId::F2 => "F2",
            FunctionId::F3 => "F3",
            FunctionId::F4 => "F4",
            FunctionId::F5 => "F5",
            FunctionId::F6 => "F6",
            FunctionId::F7 => "F7",
            FunctionId::F8 => "F8",
            FunctionId::F9 => "F9",
            FunctionId::ArmSc => "arm-sc",
            FunctionId::ArmCc => "arm-cc",
        };
        f.write_str(name)
    }
}

impl FromStr for FunctionId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "F1" | "f1" => Ok(FunctionId::F1),
            "F2" | "f2" => Ok(FunctionId::F2),
            "F3" | "f3" => Ok(FunctionId::F3),
            "F4" | "f4" => Ok(FunctionId::F4),
            "F5" | "f5" => Ok(FunctionId::F5),
            "F6" | "f6" => Ok(FunctionId::F6),
            "F7" | "f7" => Ok(FunctionId::F7),
            "F8" | "f8" => Ok(FunctionId::F8),
            "F9" | "f9" => Ok(FunctionId::F9),
            "arm-sc" => Ok(FunctionId::ArmSc),
            "arm-cc" => Ok(FunctionId::ArmCc),
            other => Err(Error::Config(format!("unknown function id '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArmCase {
    /// Segment lengths fixed at [`ARM_SEGMENT_LENGTH`]; only angles are free.
    Sc,
    /// Lengths and angles are both decision variables: `(beta, alpha)`.
    Cc,
}

/// One concrete objective: a function id bound to a shift (or arm target)
/// and its box bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveInstance {
    pub id: FunctionId,
    pub dim: usize,
    /// Shift vector `b` for F1-F9, or the `[x, y]` target point for the arm.
    #[serde(rename = "b")]
    pub shift: Vec<f64>,
    /// Per-dimension weights, F1 only.
    #[serde(rename = "w", skip_serializing_if = "Option::is_none", default)]
    pub weights: Option<Vec<f64>>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Sampling radius the arm target was drawn from; used when resampling.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub radius: Option<f64>,
}

impl ObjectiveInstance {
    /// A shifted benchmark function. `weights` is required for F1 and
    /// rejected elsewhere.
    pub fn shifted(
        id: FunctionId,
        dim: usize,
        shift: Vec<f64>,
        weights: Option<Vec<f64>>,
    ) -> Result<Self> {
        if id.is_arm() {
            return Err(Error::Config("use arm() for arm objectives".into()));
        }
        if dim == 0 {
            return Err(Error::Config("dimension must be positive".into()));
        }
        if shift.len() != dim {
            return Err(Error::Shape(format!(
                "shift length {} != dim {dim}",
                shift.len()
            )));
        }
        let (blo, bhi) = id.shift_range()?;
        if shift.iter().any(|&b| !b.is_finite() || b < blo || b > bhi) {
            return Err(Error::Config(format!(
                "shift out of {id} range [{blo}, {bhi}]"
            )));
        }
        if id == FunctionId::F6 && dim < 2 {
            return Err(Error::Config("F6 needs at least two dimensions".into()));
        }
        match (id, &weights) {
            (FunctionId::F1, Some(w)) if w.len() == dim => {}
            (FunctionId::F1, _) => {
                return Err(Error::Config("F1 needs per-dimension weights".into()))
            }
            (_, None) => {}
            (_, Some(_)) => return Err(Error::Config(format!("{id} takes no weights"))),
        }
        let (lo, hi) = id.variable_range();
        Ok(ObjectiveInstance {
            id,
            dim,
            shift,
            weights,
            lower: vec![lo; dim],
            upper: vec![hi; dim],
            radius: None,
        })
    }

    /// A planar-arm objective with `segments` joints aiming at `target`,
    /// which must lie within `radius` of the origin.
    pub fn arm(case: ArmCase, segments: usize, target: [f64; 2], radius: f64) -> Result<Self> {
        if segments == 0 {
            return Err(Error::Config("arm needs at least one segment".into()));
        }
        let dist = (target[0] * target[0] + target[1] * target[1]).sqrt();
        if !(radius > 0.0) || dist > radius {
            return Err(Error::Config(format!(
                "target ({}, {}) lies outside sampling radius {radius}",
                target[0], target[1]
            )));
        }
        let (id, dim, lower, upper) = match case {
            ArmCase::Sc => (
                FunctionId::ArmSc,
                segments,
                vec![-PI; segments],
                vec![PI; segments],
            ),
            ArmCase::Cc => {
                let mut lower = vec![0.0; segments];
                lower.extend(vec![-PI; segments]);
                let mut upper = vec![ARM_SEGMENT_LENGTH; segments];
                upper.extend(vec![PI; segments]);
                (FunctionId::ArmCc, 2 * segments, lower, upper)
            }
        };
        Ok(ObjectiveInstance {
            id,
            dim,
            shift: target.to_vec(),
            weights: None,
            lower,
            upper,
            radius: Some(radius),
        })
    }

    pub fn segments(&self) -> Option<usize> {
        match self.id {
            FunctionId::ArmSc => Some(self.dim),
            FunctionId::ArmCc => Some(self.dim / 2),
            _ => None,
        }
    }

    /// A point attaining objective value 0, when one is known in closed form.
    /// All shifted functions reach 0; F6's optimum sits at `b + 1`, the rest
    /// at `b`. Arm objectives have no closed-form optimum recorded here.
    pub fn optimum_point(&self) -> Option<Vec<f64>> {
        match self.id {
            FunctionId::F6 => Some(self.shift.iter().map(|&b| b + 1.0).collect()),
            id if !id.is_arm() => Some(self.shift.clone()),
            _ => None,
        }
    }

    /// Exact objective value at `x`.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::Shape(format!(
                "point has {} coordinates, objective expects {}",
                x.len(),
                self.dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("evaluation point".into()));
        }
        Ok(self.eval_unchecked(x))
    }

    fn eval_unchecked(&self, x: &[f64]) -> f64 {
        let b = &self.shift;
        match self.id {
            FunctionId::F1 => {
                let w = self.weights.as_ref().expect("validated at construction");
                let mut acc = 0.0;
                for i in 0..self.dim {
                    acc += (w[i] * (x[i] - b[i]).sin()).abs();
                }
                acc
            }
            FunctionId::F2 => {
                let mut acc = 0.0;
                for i in 0..self.dim {
                    acc += (x[i] - b[i]).abs();
                }
                acc
            }
            FunctionId::F3 => {
                let mut first = 0.0;
                for i in 0..self.dim.saturating_sub(1) {
                    first += ((x[i] - b[i]) - (x[i + 1] - b[i + 1])).abs();
                }
                let mut second = 0.0;
                for i in 0..self.dim {
                    second += (x[i] - b[i]).abs();
                }
                if self.dim < 2 {
                    second
                } else {
                    first + second
                }
            }
            FunctionId::F4 => {
                let mut acc = 0.0;
                for i in 0..self.dim {
                    let z = x[i] - b[i];
                    acc += z * z;
                }
                acc
            }
            FunctionId::F5 => {
                let mut best = (x[0] - b[0]).abs();
                for i in 1..self.dim {
                    let v = (x[i] - b[i]).abs();
                    if v > best {
                        best = v;
                    }
                }
                best
            }
            FunctionId::F6 => {
                let mut acc = 0.0;
                for i in 0..self.dim - 1 {
                    let zi = x[i] - b[i];
                    let zn = x[i + 1] - b[i + 1];
                    let a = zi * zi - zn;
                    let c = zi + (-1.0);
                    acc += a * a * 100.0 + c * c;
                }
                acc
            }
            FunctionId::F7 => {
                let mut acc = 0.0;
                for i in 0..self.dim {
                    let z = x[i] - b[i];
                    acc += z * z - (z * TWO_PI).cos() * 10.0 + 10.0;
                }
                acc
            }
            FunctionId::F8 => {
                let inv = griewank_weights(self.dim);
                let mut s = 0.0;
                let mut p = 1.0;
                for i in 0..self.dim {
                    let z = x[i] - b[i];
                    s += z * z;
                    p *= (z * inv[i]).cos();
                }
                s * (1.0 / 4000.0) - p + 1.0
            }
            FunctionId::F9 => {
                let inv_d = 1.0 / self.dim as f64;
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for i in 0..self.dim {
                    let z = x[i] - b[i];
                    s1 += z * z;
                    s2 += (z * TWO_PI).cos();
                }
                let t1 = ((s1 * inv_d).sqrt() * -0.2).exp() * -20.0;
                let t2 = (s2 * inv_d).exp();
                t1 - t2 + (20.0 + E)
            }
            FunctionId::ArmSc => {
                let mut sx = 0.0;
                let mut sy = 0.0;
                for &a in x {
                    sx += a.cos() * ARM_SEGMENT_LENGTH;
                    sy += a.sin() * ARM_SEGMENT_LENGTH;
                }
                let dx = sx + (-b[0]);
                let dy = sy + (-b[1]);
                (dx * dx + dy * dy).sqrt()
            }
            FunctionId::ArmCc => {
                let n = self.dim / 2;
                let (beta, alpha) = x.split_at(n);
                let mut sx = 0.0;
                let mut sy = 0.0;
                for i in 0..n {
                    sx += beta[i] * alpha[i].cos();
                    sy += beta[i] * alpha[i].sin();
                }
                let dx = sx + (-b[0]);
                let dy = sy + (-b[1]);
                (dx * dx + dy * dy).sqrt()
            }
        }
    }

    /// Fitness of every lattice cell: `decisions` is `.. x dim` with the
    /// channel axis last, output has one channel per cell.
    pub fn eval_cells(&self, decisions: &Tensor) -> Result<Tensor> {
        if decisions.channels() != self.dim {
            return Err(Error::Shape(format!(
                "grid carries {} channels, objective expects {}",
                decisions.channels(),
                self.dim
            )));
        }
        let cells = decisions.cells();
        let mut out = Vec::with_capacity(cells);
        for cell in 0..cells {
            let x = &decisions.data()[cell * self.dim..(cell + 1) * self.dim];
            out.push(self.eval_unchecked(x));
        }
        let mut shape = decisions.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = 1;
        Ok(Tensor::from_parts(shape, out))
    }

    /// Taped twin of [`ObjectiveInstance::eval_cells`]: builds the fitness of
    /// every cell on the tape so gradients can flow into the decision values.
    pub fn eval_cells_taped<'t>(&self, tape: &'t Tape, decisions: Var<'t>) -> Result<Var<'t>> {
        let shape = decisions.shape();
        let channels = *shape.last().expect("rank >= 1");
        if channels != self.dim {
            return Err(Error::Shape(format!(
                "grid carries {channels} channels, objective expects {}",
                self.dim
            )));
        }
        let cells: usize = shape.iter().product::<usize>() / channels;
        let tile = |per_channel: &[f64]| -> Var<'t> {
            let mut data = Vec::with_capacity(cells * per_channel.len());
            for _ in 0..cells {
                data.extend_from_slice(per_channel);
            }
            let mut s = shape.clone();
            *s.last_mut().unwrap() = per_channel.len();
            tape.leaf(Tensor::from_parts(s, data))
        };

        let d = self.dim;
        let fitness = match self.id {
            FunctionId::F1 => {
                let z = decisions.sub(tile(&self.shift));
                let w = tile(self.weights.as_ref().expect("validated at construction"));
                w.mul(z.sin()).abs().sum_channels()
            }
            FunctionId::F2 => {
                let z = decisions.sub(tile(&self.shift));
                z.abs().sum_channels()
            }
            FunctionId::F3 => {
                let z = decisions.sub(tile(&self.shift));
                if d < 2 {
                    z.abs().sum_channels()
                } else {
                    let head = z.slice_channels(0, d - 1);
                    let tail = z.slice_channels(1, d - 1);
                    let first = head.sub(tail).abs().sum_channels();
                    let second = z.abs().sum_channels();
                    first.add(second)
                }
            }
            FunctionId::F4 => {
                let z = decisions.sub(tile(&self.shift));
                z.mul(z).sum_channels()
            }
            FunctionId::F5 => {
                let z = decisions.sub(tile(&self.shift));
                z.abs().max_channels()
            }
            FunctionId::F6 => {
                // dim >= 2 is enforced at construction.
                let z = decisions.sub(tile(&self.shift));
                let zi = z.slice_channels(0, d - 1);
                let zn = z.slice_channels(1, d - 1);
                let a = zi.mul(zi).sub(zn);
                let c = zi.add_scalar(-1.0);
                a.mul(a).scale(100.0).add(c.mul(c)).sum_channels()
            }
            FunctionId::F7 => {
                let z = decisions.sub(tile(&self.shift));
                z.mul(z)
                    .sub(z.scale(TWO_PI).cos().scale(10.0))
                    .add_scalar(10.0)
                    .sum_channels()
            }
            FunctionId::F8 => {
                let z = decisions.sub(tile(&self.shift));
                let s = z.mul(z).sum_channels().scale(1.0 / 4000.0);
                let p = z.mul(tile(&griewank_weights(d))).cos().prod_channels();
                s.sub(p).add_scalar(1.0)
            }
            FunctionId::F9 => {
                let inv_d = 1.0 / d as f64;
                let z = decisions.sub(tile(&self.shift));
                let t1 = z
                    .mul(z)
                    .sum_channels()
                    .scale(inv_d)
                    .sqrt()
                    .scale(-0.2)
                    .exp()
                    .scale(-20.0);
                let t2 = z.scale(TWO_PI).cos().sum_channels().scale(inv_d).exp();
                t1.sub(t2).add_scalar(20.0 + E)
            }
            FunctionId::ArmSc => {
                let sx = decisions
                    .cos()
                    .scale(ARM_SEGMENT_LENGTH)
                    .sum_channels()
                    .add_scalar(-self.shift[0]);
                let sy = decisions
                    .sin()
                    .scale(ARM_SEGMENT_LENGTH)
                    .sum_channels()
                    .add_scalar(-self.shift[1]);
                sx.mul(sx).add(sy.mul(sy)).sqrt()
            }
            FunctionId::ArmCc => {
                let n = d / 2;
                let beta = decisions.slice_channels(0, n);
                let alpha = decisions.slice_channels(n, n);
                let sx = beta
                    .mul(alpha.cos())
                    .sum_channels()
                    .add_scalar(-self.shift[0]);
                let sy = beta
                    .mul(alpha.sin())
                    .sum_channels()
                    .add_scalar(-self.shift[1]);
                sx.mul(sx).add(sy.mul(sy)).sqrt()
            }
        };
        Ok(fitness)
    }
}

fn griewank_weights(dim: usize) -> Vec<f64> {
    (1..=dim).map(|i| 1.0 / (i as f64).sqrt()).collect()
}

/// Draws a shifted instance of `id` with every shift component uniform in the
/// id's shift range. F1 additionally draws its weights uniform in [-10, 10].
pub fn sample_shift<R: Rng>(id: FunctionId, dim: usize, rng: &mut R) -> Result<ObjectiveInstance> {
    let (blo, bhi) = id.shift_range()?;
    let shift: Vec<f64> = (0..dim).map(|_| rng.gen_range(blo..bhi)).collect();
    let weights = if id == FunctionId::F1 {
        Some((0..dim).map(|_| rng.gen_range(-10.0..10.0)).collect())
    } else {
        None
    };
    ObjectiveInstance::shifted(id, dim, shift, weights)
}

/// Uniform point on the disk of the given radius, by rejection sampling.
pub fn sample_arm_target<R: Rng>(radius: f64, rng: &mut R) -> [f64; 2] {
    loop {
        let x = rng.gen_range(-radius..radius);
        let y = rng.gen_range(-radius..radius);
        if x * x + y * y <= radius * radius {
            return [x, y];
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fidelity {
    High,
    Low,
}

/// An ordered set of surrogate objectives used to train one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionSet {
    pub fidelity: Fidelity,
    pub target_id: FunctionId,
    pub instances: Vec<ObjectiveInstance>,
}

impl FunctionSet {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }
}

/// Builds a training set for `target_id`: `count` shifted copies of the
/// target itself (high fidelity), or `count` instances cycling over the
/// cheap F1-F3 functions (low fidelity).
pub fn make_dataset<R: Rng>(
    fidelity: Fidelity,
    target_id: FunctionId,
    count: usize,
    dim: usize,
    rng: &mut R,
) -> Result<FunctionSet> {
    if target_id.is_arm() {
        return Err(Error::Config(
            "arm training sets are built by arm_dataset".into(),
        ));
    }
    if count == 0 {
        return Err(Error::Config("dataset needs at least one instance".into()));
    }
    let mut instances = Vec::with_capacity(count);
    for i in 0..count {
        let id = match fidelity {
            Fidelity::High => target_id,
            Fidelity::Low => FunctionId::LOW_FIDELITY_SUITE[i % 3],
        };
        instances.push(sample_shift(id, dim, rng)?);
    }
    assert_distinct_shifts(&instances)?;
    Ok(FunctionSet {
        fidelity,
        target_id,
        instances,
    })
}

/// Builds an arm training set: `count` instances of the same arm geometry
/// aiming at targets drawn uniformly from the disk of the given radius.
pub fn arm_dataset<R: Rng>(
    case: ArmCase,
    segments: usize,
    count: usize,
    radius: f64,
    rng: &mut R,
) -> Result<FunctionSet> {
    if count == 0 {
        return Err(Error::Config("dataset needs at least one instance".into()));
    }
    let mut instances = Vec::with_capacity(count);
    for _ in 0..count {
        let target = sample_arm_target(radius, rng);
        instances.push(ObjectiveInstance::arm(case, segments, target, radius)?);
    }
    assert_distinct_shifts(&instances)?;
    Ok(FunctionSet {
        fidelity: Fidelity::High,
        target_id: instances[0].id,
        instances,
    })
}

/// Fresh parameters for every instance, keeping ids, dimensions, and order.
pub fn resample_shifts<R: Rng>(set: &FunctionSet, rng: &mut R) -> Result<FunctionSet> {
    let mut instances = Vec::with_capacity(set.instances.len());
    for inst in &set.instances {
        let fresh = match inst.id {
            FunctionId::ArmSc | FunctionId::ArmCc => {
                let radius = inst.radius.ok_or_else(|| {
                    Error::Config("arm instance lost its sampling radius".into())
                })?;
                let case = if inst.id == FunctionId::ArmSc {
                    ArmCase::Sc
                } else {
                    ArmCase::Cc
                };
                let segments = inst.segments().expect("arm instance");
                ObjectiveInstance::arm(case, segments, sample_arm_target(radius, rng), radius)?
            }
            id => sample_shift(id, inst.dim, rng)?,
        };
        instances.push(fresh);
    }
    Ok(FunctionSet {
        fidelity: set.fidelity,
        target_id: set.target_id,
        instances,
    })
}

fn assert_distinct_shifts(instances: &[ObjectiveInstance]) -> Result<()> {
    for (i, a) in instances.iter().enumerate() {
        for b in &instances[i + 1..] {
            if a.id == b.id && a.shift == b.shift {
                return Err(Error::Config(
                    "two instances share an identical shift vector".into(),
                ));
            }
        }
    }
    Ok(())
}
