//! Reverse-mode automatic differentiation over a fixed tensor operation set.
//!
//! A [`Tape`] is a Wengert list: the forward pass appends one node per tensor
//! operation, and [`grad`] replays the list in reverse, visiting each node
//! exactly once. Tapes are cheap and short-lived — one per training step —
//! while inference code uses the plain (untaped) routines.
//!
//! Non-differentiable gates (lattice sort permutations, survivor-selection
//! masks, bound clamps, `|.|` at zero) contribute as constants in backward.
//! [`Tape::gate_signature`] fingerprints every such gate decision so callers
//! can detect when a perturbation flipped one, which would invalidate a
//! finite-difference comparison.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mirrored lattice index for symmetric padding with edge duplication:
/// index -1 maps to 0, -2 to 1, `len` to `len - 1`, and so on, periodically.
pub(crate) fn mirror_index(pos: isize, len: usize) -> usize {
    let period = 2 * len as isize;
    let mut q = pos % period;
    if q < 0 {
        q += period;
    }
    if q < len as isize {
        q as usize
    } else {
        (period - 1 - q) as usize
    }
}

fn validate_conv_shapes(input: &[usize], kernel: &[usize]) -> Result<()> {
    if input.len() != 3 || input[0] != input[1] {
        return Err(Error::Shape(format!(
            "depthwise conv input must be L x L x C, got {input:?}"
        )));
    }
    if kernel.len() != 2 || kernel[0] != kernel[1] {
        return Err(Error::InvalidKernel(format!(
            "kernel must be square k x k, got {kernel:?}"
        )));
    }
    let (l, k) = (input[0], kernel[0]);
    if k % 2 == 0 {
        return Err(Error::InvalidKernel(format!("kernel side {k} must be odd")));
    }
    if k > 2 * l - 1 {
        return Err(Error::PaddingOverflow { kernel: k, side: l });
    }
    Ok(())
}

/// Depthwise 2-D convolution with symmetric mirror padding.
///
/// Every channel is convolved with the same `k x k` kernel, so the kernel is
/// agnostic to the problem dimension. Output spatial extent equals input.
pub fn depthwise_conv2d(input: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    validate_conv_shapes(input.shape(), kernel.shape())?;
    Ok(conv_forward_raw(input, kernel))
}

fn mirror_table(l: usize, k: usize) -> Vec<usize> {
    let r = (k as isize - 1) / 2;
    (0..l)
        .flat_map(|i| (0..k).map(move |a| mirror_index(i as isize + a as isize - r, l)))
        .collect()
}

pub(crate) fn conv_forward_raw(input: &Tensor, kernel: &Tensor) -> Tensor {
    let l = input.shape()[0];
    let c = input.shape()[2];
    let k = kernel.shape()[0];
    let table = mirror_table(l, k);
    let kd = kernel.data();
    let xd = input.data();
    let mut out = vec![0.0; xd.len()];
    for i in 0..l {
        for j in 0..l {
            let dst = (i * l + j) * c;
            for a in 0..k {
                let si = table[i * k + a];
                for b in 0..k {
                    let sj = table[j * k + b];
                    let w = kd[a * k + b];
                    let src = (si * l + sj) * c;
                    for ch in 0..c {
                        out[dst + ch] += w * xd[src + ch];
                    }
                }
            }
        }
    }
    Tensor::from_parts(input.shape().to_vec(), out)
}

fn conv_backward_raw(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &[f64],
    grad_input: &mut [f64],
    grad_kernel: &mut [f64],
) {
    let l = input.shape()[0];
    let c = input.shape()[2];
    let k = kernel.shape()[0];
    let table = mirror_table(l, k);
    let kd = kernel.data();
    let xd = input.data();
    for i in 0..l {
        for j in 0..l {
            let dst = (i * l + j) * c;
            for a in 0..k {
                let si = table[i * k + a];
                for b in 0..k {
                    let sj = table[j * k + b];
                    let w = kd[a * k + b];
                    let src = (si * l + sj) * c;
                    let mut kacc = 0.0;
                    for ch in 0..c {
                        let g = grad_out[dst + ch];
                        grad_input[src + ch] += w * g;
                        kacc += g * xd[src + ch];
                    }
                    grad_kernel[a * k + b] += kacc;
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Abs(usize),
    Sin(usize),
    Cos(usize),
    Sqrt(usize),
    Exp(usize),
    SumChannels(usize),
    ProdChannels(usize),
    MaxChannels { input: usize, argmax: Vec<usize> },
    SliceChannels { input: usize, start: usize, count: usize },
    SumAll(usize),
    DepthwiseConv { input: usize, kernel: usize },
    GatherCells { input: usize, perm: Vec<usize> },
    SelectCells { mask: Vec<bool>, when_true: usize, when_false: usize },
    ClampPerChannel { input: usize, lower: Vec<f64>, upper: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tensor recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Records an input tensor (trainable parameter or constant).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, op });
        Var { tape: self, id }
    }

    /// Hash of every non-differentiable gate decision recorded so far: sort
    /// permutations, selection masks, clamp activity, `|.|` and `sqrt` kinks,
    /// and channel-max winners. Two forward passes whose signatures agree took
    /// identical branches, so finite differences between them probe a single
    /// smooth region.
    pub fn gate_signature(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut feed = |x: u64| {
            for byte in x.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        let nodes = self.nodes.borrow();
        for node in nodes.iter() {
            match &node.op {
                Op::GatherCells { perm, .. } => {
                    feed(1);
                    for &p in perm {
                        feed(p as u64);
                    }
                }
                Op::SelectCells { mask, .. } => {
                    feed(2);
                    for &m in mask {
                        feed(m as u64);
                    }
                }
                Op::ClampPerChannel { input, lower, upper } => {
                    feed(3);
                    let ch = lower.len();
                    for (i, &v) in nodes[*input].value.data().iter().enumerate() {
                        let c = i % ch;
                        feed(if v < lower[c] {
                            1
                        } else if v > upper[c] {
                            2
                        } else {
                            0
                        });
                    }
                }
                Op::Abs(input) => {
                    feed(4);
                    for &v in nodes[*input].value.data() {
                        feed(if v < 0.0 {
                            1
                        } else if v > 0.0 {
                            2
                        } else {
                            0
                        });
                    }
                }
                Op::Sqrt(input) => {
                    feed(5);
                    for &v in nodes[*input].value.data() {
                        feed((v == 0.0) as u64);
                    }
                }
                Op::MaxChannels { argmax, .. } => {
                    feed(6);
                    for &p in argmax {
                        feed(p as u64);
                    }
                }
                _ => {}
            }
        }
        h
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Borrow of the stored value, avoiding a copy. Do not hold this across
    /// calls that record new operations.
    pub fn value_ref(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |nodes| &nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn unary(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.id].value;
            Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
        };
        self.tape.push(value, op)
    }

    fn zip(self, other: Var<'t>, f: impl Fn(f64, f64) -> f64, op: Op) -> Var<'t> {
        self.same_tape(&other);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            assert_eq!(a.shape(), b.shape(), "elementwise op on mismatched shapes");
            Tensor::from_parts(
                a.shape().to_vec(),
                a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
            )
        };
        self.tape.push(value, op)
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.zip(other, |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.zip(other, |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.zip(other, |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self)
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        self.unary(|v| v * factor, Op::Scale(self.id, factor))
    }

    pub fn add_scalar(self, offset: f64) -> Var<'t> {
        self.unary(|v| v + offset, Op::AddScalar(self.id))
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, Op::Abs(self.id))
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(f64::sin, Op::Sin(self.id))
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(f64::cos, Op::Cos(self.id))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, Op::Sqrt(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    /// Per-cell sum over the channel axis; output keeps rank with one channel.
    pub fn sum_channels(self) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            reduce_channels(&nodes[self.id].value, 0.0, |acc, v| acc + v)
        };
        self.tape.push(value, Op::SumChannels(self.id))
    }

    /// Per-cell product over the channel axis.
    pub fn prod_channels(self) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            reduce_channels(&nodes[self.id].value, 1.0, |acc, v| acc * v)
        };
        self.tape.push(value, Op::ProdChannels(self.id))
    }

    /// Per-cell maximum over the channel axis. The winner takes the full
    /// gradient; ties go to the lowest channel index.
    pub fn max_channels(self) -> Var<'t> {
        let (value, argmax) = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.id].value;
            let ch = t.channels();
            let cells = t.cells();
            let mut out = Vec::with_capacity(cells);
            let mut arg = Vec::with_capacity(cells);
            for cell in 0..cells {
                let row = &t.data()[cell * ch..(cell + 1) * ch];
                let mut best = row[0];
                let mut best_i = 0;
                for (i, &v) in row.iter().enumerate().skip(1) {
                    if v > best {
                        best = v;
                        best_i = i;
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
            (replace_channel_axis(t, 1, out), arg)
        };
        self.tape.push(value, Op::MaxChannels { input: self.id, argmax })
    }

    /// Channels `start .. start + count` of every cell.
    pub fn slice_channels(self, start: usize, count: usize) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.id].value;
            let ch = t.channels();
            assert!(count >= 1 && start + count <= ch, "channel slice out of range");
            let cells = t.cells();
            let mut out = Vec::with_capacity(cells * count);
            for cell in 0..cells {
                out.extend_from_slice(&t.data()[cell * ch + start..cell * ch + start + count]);
            }
            replace_channel_axis(t, count, out)
        };
        self.tape.push(value, Op::SliceChannels { input: self.id, start, count })
    }

    /// Sum of every element, as a single-element tensor.
    pub fn sum_all(self) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            Tensor::scalar(nodes[self.id].value.data().iter().sum())
        };
        self.tape.push(value, Op::SumAll(self.id))
    }

    /// Mean of every element, as a single-element tensor.
    pub fn mean_all(self) -> Var<'t> {
        let n = self.tape.nodes.borrow()[self.id].value.len();
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Depthwise convolution of an `L x L x C` tensor with a `k x k` kernel
    /// recorded on the same tape. Symmetric mirror padding; the kernel is
    /// shared across channels.
    pub fn depthwise_conv(self, kernel: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&kernel);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (input, kern) = (&nodes[self.id].value, &nodes[kernel.id].value);
            validate_conv_shapes(input.shape(), kern.shape())?;
            conv_forward_raw(input, kern)
        };
        Ok(self.tape.push(value, Op::DepthwiseConv { input: self.id, kernel: kernel.id }))
    }

    /// Reorders lattice cells: output cell `i` is input cell `perm[i]`.
    /// The permutation is a constant in backward.
    pub fn gather_cells(self, perm: &[usize]) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.id].value;
            let ch = t.channels();
            assert_eq!(perm.len(), t.cells(), "permutation length != cell count");
            let mut out = Vec::with_capacity(t.len());
            for &src in perm {
                out.extend_from_slice(&t.data()[src * ch..(src + 1) * ch]);
            }
            replace_channel_axis(t, ch, out)
        };
        self.tape.push(value, Op::GatherCells { input: self.id, perm: perm.to_vec() })
    }

    /// Per-cell branch: where `mask[cell]` take `when_true`, else `when_false`.
    /// The mask is a constant in backward; gradient flows only through the
    /// surviving branch.
    pub fn select_cells(mask: &[bool], when_true: Var<'t>, when_false: Var<'t>) -> Var<'t> {
        when_true.same_tape(&when_false);
        let value = {
            let nodes = when_true.tape.nodes.borrow();
            let (a, b) = (&nodes[when_true.id].value, &nodes[when_false.id].value);
            assert_eq!(a.shape(), b.shape(), "select on mismatched shapes");
            let ch = a.channels();
            assert_eq!(mask.len(), a.cells(), "mask length != cell count");
            let mut out = Vec::with_capacity(a.len());
            for (cell, &keep_true) in mask.iter().enumerate() {
                let src = if keep_true { a.data() } else { b.data() };
                out.extend_from_slice(&src[cell * ch..(cell + 1) * ch]);
            }
            replace_channel_axis(a, ch, out)
        };
        when_true.tape.push(
            value,
            Op::SelectCells {
                mask: mask.to_vec(),
                when_true: when_true.id,
                when_false: when_false.id,
            },
        )
    }

    /// Clamp channel `c` of every cell into `[lower[c], upper[c]]`. Clamped
    /// elements are gradient-blocked.
    pub fn clamp_channels(self, lower: &[f64], upper: &[f64]) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.id].value;
            let ch = t.channels();
            assert_eq!(lower.len(), ch, "lower bounds length != channels");
            assert_eq!(upper.len(), ch, "upper bounds length != channels");
            Tensor::from_parts(
                t.shape().to_vec(),
                t.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v.clamp(lower[i % ch], upper[i % ch]))
                    .collect(),
            )
        };
        self.tape.push(
            value,
            Op::ClampPerChannel {
                input: self.id,
                lower: lower.to_vec(),
                upper: upper.to_vec(),
            },
        )
    }
}

fn reduce_channels(t: &Tensor, init: f64, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let ch = t.channels();
    let cells = t.cells();
    let mut out = Vec::with_capacity(cells);
    for cell in 0..cells {
        let mut acc = init;
        for &v in &t.data()[cell * ch..(cell + 1) * ch] {
            acc = f(acc, v);
        }
        out.push(acc);
    }
    replace_channel_axis(t, 1, out)
}

/// New tensor shaped like `t` but with `count` channels, holding `data`.
fn replace_channel_axis(t: &Tensor, count: usize, data: Vec<f64>) -> Tensor {
    let mut shape = t.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = count;
    Tensor::from_parts(shape, data)
}

/// `d(output)/d(param)` for each requested leaf, by one reverse sweep.
///
/// `output` must hold a single element and every `param` must be a leaf of
/// the same tape. Gate decisions (permutations, masks, clamps) are constants.
pub fn grad(output: Var<'_>, params: &[Var<'_>]) -> Result<Vec<Tensor>> {
    let tape = output.tape;
    let nodes = tape.nodes.borrow();
    if nodes[output.id].value.len() != 1 {
        return Err(Error::Shape(format!(
            "gradient source must be a single element, got shape {:?}",
            nodes[output.id].value.shape()
        )));
    }
    for p in params {
        if !std::ptr::eq(p.tape, tape) || !matches!(nodes[p.id].op, Op::Leaf) {
            return Err(Error::UnknownLeaf);
        }
    }

    let mut grads: Vec<Vec<f64>> = nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
    grads[output.id][0] = 1.0;

    for id in (0..=output.id).rev() {
        // Detach this node's gradient so input gradients can be accumulated.
        let gout = std::mem::take(&mut grads[id]);
        if gout.iter().all(|&g| g == 0.0) {
            grads[id] = gout;
            continue;
        }
        let node = &nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(&mut grads[*a], &gout, |_i, g| g);
                accumulate(&mut grads[*b], &gout, |_i, g| g);
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[*a], &gout, |_i, g| g);
                accumulate(&mut grads[*b], &gout, |_i, g| -g);
            }
            Op::Mul(a, b) => {
                let bv = nodes[*b].value.data();
                accumulate(&mut grads[*a], &gout, |i, g| g * bv[i]);
                let av = nodes[*a].value.data();
                accumulate(&mut grads[*b], &gout, |i, g| g * av[i]);
            }
            Op::Scale(a, factor) => {
                let factor = *factor;
                accumulate(&mut grads[*a], &gout, move |_i, g| g * factor);
            }
            Op::AddScalar(a) => {
                accumulate(&mut grads[*a], &gout, |_i, g| g);
            }
            Op::Abs(a) => {
                let av = nodes[*a].value.data();
                // Subgradient 0 at exactly 0.
                accumulate(&mut grads[*a], &gout, |i, g| g * sign_or_zero(av[i]));
            }
            Op::Sin(a) => {
                let av = nodes[*a].value.data();
                accumulate(&mut grads[*a], &gout, |i, g| g * av[i].cos());
            }
            Op::Cos(a) => {
                let av = nodes[*a].value.data();
                accumulate(&mut grads[*a], &gout, |i, g| -g * av[i].sin());
            }
            Op::Sqrt(a) => {
                let yv = node.value.data();
                // Subgradient 0 at exactly 0, mirroring the |.| convention.
                accumulate(&mut grads[*a], &gout, |i, g| {
                    if yv[i] == 0.0 {
                        0.0
                    } else {
                        g / (2.0 * yv[i])
                    }
                });
            }
            Op::Exp(a) => {
                let yv = node.value.data();
                accumulate(&mut grads[*a], &gout, |i, g| g * yv[i]);
            }
            Op::SumChannels(a) => {
                let ch = nodes[*a].value.channels();
                let ga = &mut grads[*a];
                for (cell, &g) in gout.iter().enumerate() {
                    for target in &mut ga[cell * ch..(cell + 1) * ch] {
                        *target += g;
                    }
                }
            }
            Op::ProdChannels(a) => {
                let av = nodes[*a].value.data();
                let ch = nodes[*a].value.channels();
                let ga = &mut grads[*a];
                // Prefix/suffix products: exact even with zero elements.
                let mut suffix = vec![0.0; ch + 1];
                for (cell, &g) in gout.iter().enumerate() {
                    let row = &av[cell * ch..(cell + 1) * ch];
                    suffix[ch] = 1.0;
                    for i in (0..ch).rev() {
                        suffix[i] = suffix[i + 1] * row[i];
                    }
                    let mut prefix = 1.0;
                    for i in 0..ch {
                        ga[cell * ch + i] += g * prefix * suffix[i + 1];
                        prefix *= row[i];
                    }
                }
            }
            Op::MaxChannels { input, argmax } => {
                let ch = nodes[*input].value.channels();
                let ga = &mut grads[*input];
                for (cell, &g) in gout.iter().enumerate() {
                    ga[cell * ch + argmax[cell]] += g;
                }
            }
            Op::SliceChannels { input, start, count } => {
                let ch = nodes[*input].value.channels();
                let ga = &mut grads[*input];
                let cells = gout.len() / count;
                for cell in 0..cells {
                    for c in 0..*count {
                        ga[cell * ch + start + c] += gout[cell * count + c];
                    }
                }
            }
            Op::SumAll(a) => {
                let g = gout[0];
                for target in &mut grads[*a] {
                    *target += g;
                }
            }
            Op::DepthwiseConv { input, kernel } => {
                let mut gi = std::mem::take(&mut grads[*input]);
                let mut gk = std::mem::take(&mut grads[*kernel]);
                conv_backward_raw(&nodes[*input].value, &nodes[*kernel].value, &gout, &mut gi, &mut gk);
                grads[*input] = gi;
                grads[*kernel] = gk;
            }
            Op::GatherCells { input, perm } => {
                let ch = nodes[*input].value.channels();
                let ga = &mut grads[*input];
                for (cell, &src) in perm.iter().enumerate() {
                    for c in 0..ch {
                        ga[src * ch + c] += gout[cell * ch + c];
                    }
                }
            }
            Op::SelectCells { mask, when_true, when_false } => {
                let ch = nodes[*when_true].value.channels();
                for (cell, &keep_true) in mask.iter().enumerate() {
                    let target = if keep_true {
                        &mut grads[*when_true]
                    } else {
                        &mut grads[*when_false]
                    };
                    for c in 0..ch {
                        target[cell * ch + c] += gout[cell * ch + c];
                    }
                }
            }
            Op::ClampPerChannel { input, lower, upper } => {
                let av = nodes[*input].value.data();
                let ch = lower.len();
                accumulate(&mut grads[*input], &gout, |i, g| {
                    let c = i % ch;
                    if av[i] >= lower[c] && av[i] <= upper[c] {
                        g
                    } else {
                        0.0
                    }
                });
            }
        }
        grads[id] = gout;
    }

    Ok(params
        .iter()
        .map(|p| Tensor::from_parts(nodes[p.id].value.shape().to_vec(), grads[p.id].clone()))
        .collect())
}

fn accumulate(target: &mut [f64], gout: &[f64], f: impl Fn(usize, f64) -> f64) {
    for (i, (t, &g)) in target.iter_mut().zip(gout).enumerate() {
        *t += f(i, g);
    }
}

fn sign_or_zero(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// A scalar program whose gradients can be checked: given a tape and one leaf
/// per parameter tensor, it builds a single-element output on that tape.
pub trait ScalarProgram {
    fn build<'t>(&self, tape: &'t Tape, params: &[Var<'t>]) -> Result<Var<'t>>;
}

impl<F> ScalarProgram for F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    fn build<'t>(&self, tape: &'t Tape, params: &[Var<'t>]) -> Result<Var<'t>> {
        self(tape, params)
    }
}

/// Forward-only run of a program: output value plus the tape's gate signature.
pub fn program_value_and_signature<P: ScalarProgram + ?Sized>(
    program: &P,
    params: &[Tensor],
) -> Result<(f64, u64)> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = program.build(&tape, &vars)?;
    let value = out.value();
    if value.len() != 1 {
        return Err(Error::Shape(format!(
            "program output must be a single element, got shape {:?}",
            value.shape()
        )));
    }
    value.validate_finite("program output")?;
    Ok((value.item(), tape.gate_signature()))
}

/// Compares reverse-mode gradients of `program` against central finite
/// differences with step `h`, returning the worst relative error
/// `|ad - fd| / max(|ad|, 1e-8)` over all parameter elements.
///
/// The number is only meaningful when the perturbed points stay inside the
/// base point's smooth region; a kink or gate flip shows up as a large error,
/// which is exactly what callers should see rather than a silent pass.
pub fn finite_diff_check<P: ScalarProgram + ?Sized>(
    program: &P,
    params: &[Tensor],
    h: f64,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Config(format!(
            "finite difference step must be positive, got {h}"
        )));
    }
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = program.build(&tape, &vars)?;
    {
        let value = out.value();
        if value.len() != 1 {
            return Err(Error::Shape(format!(
                "program output must be a single element, got shape {:?}",
                value.shape()
            )));
        }
        value.validate_finite("program output")?;
    }
    let ad = grad(out, &vars)?;

    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.len() {
            let probe = |delta: f64| -> Result<f64> {
                let mut shifted = params.to_vec();
                shifted[pi].data_mut()[ei] += delta;
                Ok(program_value_and_signature(program, &shifted)?.0)
            };
            let fd = (probe(h)? - probe(-h)?) / (2.0 * h);
            let a = ad[pi].data()[ei];
            let rel = (a - fd).abs() / a.abs().max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
