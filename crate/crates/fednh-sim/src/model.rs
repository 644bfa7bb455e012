//! The MLP body with an L2-normalizing output layer, the scaled cosine
//! head and the unconstrained (free) head, exact analytic gradients of
//! the batch-mean cross-entropy for both, SGD with momentum and weight
//! decay, and a central finite-difference gradient checker.
//!
//! All arithmetic is f64; forward and backward passes are pure and
//! bitwise-deterministic.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::datagen::LabeledDataset;
use crate::hypersphere::PrototypeMatrix;
use crate::{Result, SimError};

/// Norm-denominator smoothing: r = z / (||z|| + EPS_NORM). Applied
/// unconditionally so the analytic Jacobian matches the computed map.
pub const EPS_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// out x in.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Layer-wise parameters of the body; `widths` is the full width list
/// including input and latent output, e.g. [2, 64, 64, 64, d]. ReLU
/// follows every layer except the last.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyParams {
    pub layers: Vec<DenseLayer>,
    widths: Vec<usize>,
}

impl BodyParams {
    /// He-style fan-in init: weights U(+-sqrt(6/fan_in)), biases
    /// U(+-1/sqrt(fan_in)). Draw order is layer-major, weights row-major
    /// before bias, which pins the RNG stream layout.
    pub fn init(widths: &[usize], rng: &mut ChaCha12Rng) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(SimError::InvalidArgument(format!(
                "architecture needs >= 2 nonzero widths, got {widths:?}"
            )));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let wb = (6.0 / fan_in as f64).sqrt();
            let bb = 1.0 / (fan_in as f64).sqrt();
            let weight =
                Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-wb..wb));
            let bias = Array1::from_shape_fn(fan_out, |_| rng.random_range(-bb..bb));
            layers.push(DenseLayer { weight, bias });
        }
        Ok(BodyParams {
            layers,
            widths: widths.to_vec(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        BodyParams {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
            widths: self.widths.clone(),
        }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn latent_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn assert_finite(&self) -> Result<()> {
        for l in &self.layers {
            if l.weight.iter().any(|v| !v.is_finite()) || l.bias.iter().any(|v| !v.is_finite()) {
                return Err(SimError::NonFinite("body parameter".into()));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }
}

/// Cosine head: fixed-direction unit prototypes W and the logit scale s.
#[derive(Debug, Clone)]
pub struct HeadState {
    pub w: PrototypeMatrix,
    pub s: f64,
    pub s_trainable: bool,
}

impl HeadState {
    pub fn new(w: PrototypeMatrix, s: f64, s_trainable: bool) -> Result<Self> {
        if !(s > 0.0) || !s.is_finite() {
            return Err(SimError::InvalidArgument(format!(
                "cosine scale must be positive and finite, got {s}"
            )));
        }
        Ok(HeadState { w, s, s_trainable })
    }
}

/// Unconstrained classification head: logits are plain <V_c, z> on the
/// un-normalized body output, rows trained by gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeHead {
    /// C x d.
    pub v: Array2<f64>,
}

impl FreeHead {
    /// U(+-1/sqrt(d)) init, the standard linear-layer scheme.
    pub fn init(classes: usize, d: usize, rng: &mut ChaCha12Rng) -> Result<Self> {
        if classes < 2 || d < 1 {
            return Err(SimError::InvalidArgument(format!(
                "free head needs C >= 2, d >= 1, got C={classes}, d={d}"
            )));
        }
        let b = 1.0 / (d as f64).sqrt();
        Ok(FreeHead {
            v: Array2::from_shape_fn((classes, d), |_| rng.random_range(-b..b)),
        })
    }
}

/// Forward activations cached for the backward pass.
struct ForwardCache {
    /// Layer inputs: h[0] = X, h[l] = relu(a[l-1]) for hidden layers.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations per layer.
    preacts: Vec<Array2<f64>>,
}

fn forward_cached(theta: &BodyParams, x: ArrayView2<f64>) -> ForwardCache {
    let layers = theta.layers.len();
    let mut inputs = Vec::with_capacity(layers);
    let mut preacts = Vec::with_capacity(layers);
    let mut h = x.to_owned();
    for (l, layer) in theta.layers.iter().enumerate() {
        inputs.push(h.clone());
        let mut a = h.dot(&layer.weight.t());
        a += &layer.bias;
        if l + 1 < layers {
            h = a.mapv(|v| if v > 0.0 { v } else { 0.0 });
        } else {
            h = a.clone();
        }
        preacts.push(a);
    }
    ForwardCache { inputs, preacts }
}

/// Un-normalized body output z = last pre-activation, B x d.
pub fn forward_body_raw(theta: &BodyParams, x: ArrayView2<f64>) -> Array2<f64> {
    forward_cached(theta, x).preacts.pop().unwrap()
}

/// Normalized representations r_i = z_i / (||z_i|| + eps), B x d; every
/// row has norm 1 within 1e-9.
pub fn forward_body(theta: &BodyParams, x: ArrayView2<f64>) -> Array2<f64> {
    let mut z = forward_body_raw(theta, x);
    for mut row in z.axis_iter_mut(Axis(0)) {
        let n = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v / (n + EPS_NORM));
    }
    z
}

/// Cosine logits s * <W_c, r_i> for unit representations, B x C.
pub fn logits_cosine(head: &HeadState, r: ArrayView2<f64>) -> Array2<f64> {
    r.dot(&head.w.as_array().t()).mapv(|v| head.s * v)
}

/// Free-head logits <V_c, z_i> on raw body outputs, B x C.
pub fn logits_free(head: &FreeHead, z: ArrayView2<f64>) -> Array2<f64> {
    z.dot(&head.v.t())
}

/// Numerically careful per-sample cross-entropy of `logits` row against
/// label y: ln(1 + sum_{j != y} exp(l_j - l_y)), exact to full relative
/// precision even for vanishing losses.
fn row_cross_entropy(logits: &[f64], y: usize) -> f64 {
    let ly = logits[y];
    let mut m = f64::NEG_INFINITY;
    for (j, &l) in logits.iter().enumerate() {
        if j != y {
            m = m.max(l - ly);
        }
    }
    if m <= 30.0 {
        // Sum of shifted exponentials is at most (C-1)e^30: no overflow,
        // and ln_1p keeps tiny losses exact.
        let q: f64 = logits
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != y)
            .map(|(_, &l)| (l - ly).exp())
            .sum();
        q.ln_1p()
    } else {
        let q: f64 = logits
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != y)
            .map(|(_, &l)| (l - ly - m).exp())
            .sum();
        m + (q + (-m).exp()).ln()
    }
}

/// Softmax minus one-hot, divided by the batch size: the gradient of the
/// batch-mean cross-entropy with respect to the logits.
fn softmax_grad(logits: &Array2<f64>, y: &[usize]) -> Array2<f64> {
    let b = logits.nrows() as f64;
    let mut g = logits.clone();
    for (mut row, &label) in g.axis_iter_mut(Axis(0)).zip(y.iter()) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum / b);
        row[label] -= 1.0 / b;
    }
    g
}

fn mean_loss(logits: &Array2<f64>, y: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &label) in logits.axis_iter(Axis(0)).zip(y.iter()) {
        total += row_cross_entropy(row.as_slice().unwrap(), label);
    }
    total / logits.nrows() as f64
}

/// Backpropagates dL/dz through the dense stack; returns layer gradients.
fn backprop_body(
    theta: &BodyParams,
    cache: &ForwardCache,
    mut delta: Array2<f64>,
) -> Vec<DenseLayer> {
    let mut grads: Vec<DenseLayer> = theta
        .layers
        .iter()
        .map(|l| DenseLayer {
            weight: Array2::zeros(l.weight.raw_dim()),
            bias: Array1::zeros(l.bias.raw_dim()),
        })
        .collect();
    for l in (0..theta.layers.len()).rev() {
        grads[l].weight = delta.t().dot(&cache.inputs[l]);
        grads[l].bias = delta.sum_axis(Axis(0));
        if l > 0 {
            let mut prev = delta.dot(&theta.layers[l].weight);
            prev.zip_mut_with(&cache.preacts[l - 1], |d, &a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            });
            delta = prev;
        }
    }
    grads
}

/// Loss and exact gradients of the scaled-cosine objective. W is never
/// differentiated; grad_s is Some iff the scale is trainable.
pub fn cosine_loss_and_grads(
    theta: &BodyParams,
    head: &HeadState,
    x: ArrayView2<f64>,
    y: &[usize],
) -> Result<(f64, Vec<DenseLayer>, Option<f64>)> {
    check_batch(theta, head.w.class_count(), x, y)?;
    let cache = forward_cached(theta, x);
    let z = cache.preacts.last().unwrap().clone();
    let (b, d) = z.dim();

    let mut r = z.clone();
    let mut norms = Vec::with_capacity(b);
    for mut row in r.axis_iter_mut(Axis(0)) {
        let n = row.dot(&row).sqrt();
        norms.push(n);
        row.mapv_inplace(|v| v / (n + EPS_NORM));
    }

    let cosines = r.dot(&head.w.as_array().t());
    let logits = cosines.mapv(|v| head.s * v);
    let loss = mean_loss(&logits, y);
    if !loss.is_finite() {
        return Err(SimError::NonFinite(format!("cosine loss = {loss}")));
    }
    let g = softmax_grad(&logits, y);

    let grad_s = if head.s_trainable {
        Some((&g * &cosines).sum())
    } else {
        None
    };

    // dL/dr, then through the normalization Jacobian:
    // dL/dz = u/(n+eps) - z * (z.u) / (n (n+eps)^2).
    let u = g.dot(head.w.as_array()).mapv(|v| head.s * v);
    let mut dz = Array2::<f64>::zeros((b, d));
    for (i, &n) in norms.iter().enumerate() {
        let zi = z.row(i);
        let ui = u.row(i);
        let zu = zi.dot(&ui);
        let coeff = if n > 0.0 {
            zu / (n * (n + EPS_NORM) * (n + EPS_NORM))
        } else {
            0.0
        };
        let mut out = dz.row_mut(i);
        for k in 0..d {
            out[k] = ui[k] / (n + EPS_NORM) - zi[k] * coeff;
        }
    }

    let grads = backprop_body(theta, &cache, dz);
    Ok((loss, grads, grad_s))
}

/// Loss and exact gradients of the free-head objective; the head rows
/// are trained, and the body output feeds the logits un-normalized.
pub fn free_loss_and_grads(
    theta: &BodyParams,
    head: &FreeHead,
    x: ArrayView2<f64>,
    y: &[usize],
) -> Result<(f64, Vec<DenseLayer>, Array2<f64>)> {
    check_batch(theta, head.v.nrows(), x, y)?;
    let cache = forward_cached(theta, x);
    let z = cache.preacts.last().unwrap().clone();

    let logits = z.dot(&head.v.t());
    let loss = mean_loss(&logits, y);
    if !loss.is_finite() {
        return Err(SimError::NonFinite(format!("free-head loss = {loss}")));
    }
    let g = softmax_grad(&logits, y);
    let grad_v = g.t().dot(&z);
    let dz = g.dot(&head.v);
    let grads = backprop_body(theta, &cache, dz);
    Ok((loss, grads, grad_v))
}

fn check_batch(theta: &BodyParams, classes: usize, x: ArrayView2<f64>, y: &[usize]) -> Result<()> {
    if x.nrows() == 0 {
        return Err(SimError::InvalidArgument("empty batch".into()));
    }
    if x.nrows() != y.len() {
        return Err(SimError::ShapeMismatch(format!(
            "batch has {} points but {} labels",
            x.nrows(),
            y.len()
        )));
    }
    if x.ncols() != theta.input_dim() {
        return Err(SimError::ShapeMismatch(format!(
            "input dim {} vs architecture input {}",
            x.ncols(),
            theta.input_dim()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
        return Err(SimError::InvalidArgument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// SGD with momentum and weight decay. Velocities live here, one buffer
/// per tensor; the learning rate is mutated per round by the caller.
#[derive(Debug, Clone)]
pub struct SgdOptimizer {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    vel: Vec<DenseLayer>,
    vel_s: f64,
    vel_head: Option<Array2<f64>>,
}

impl SgdOptimizer {
    pub fn new(theta: &BodyParams, lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0) {
            // lr = 0 is permitted only through the explicit no-op path in
            // training loops; the optimizer itself requires a usable rate.
            return Err(SimError::InvalidArgument(format!(
                "learning rate must be > 0, got {lr}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(SimError::InvalidArgument(format!(
                "momentum must be in [0,1), got {momentum}"
            )));
        }
        if weight_decay < 0.0 {
            return Err(SimError::InvalidArgument(format!(
                "weight decay must be >= 0, got {weight_decay}"
            )));
        }
        Ok(SgdOptimizer {
            lr,
            momentum,
            weight_decay,
            vel: theta.zeros_like().layers,
            vel_s: 0.0,
            vel_head: None,
        })
    }

    /// Per tensor: g <- grad + wd * param; v <- momentum * v + g;
    /// param <- param - lr * v. Applies to body tensors, the trainable
    /// scale, and the free head when gradients for them are given.
    pub fn step(
        &mut self,
        theta: &mut BodyParams,
        grads: &[DenseLayer],
        head: Option<&mut HeadState>,
        grad_s: Option<f64>,
        free: Option<(&mut FreeHead, &Array2<f64>)>,
    ) -> Result<()> {
        if grads.len() != theta.layers.len() {
            return Err(SimError::ShapeMismatch(format!(
                "{} layer grads for {} layers",
                grads.len(),
                theta.layers.len()
            )));
        }
        for ((layer, grad), vel) in theta.layers.iter_mut().zip(grads).zip(&mut self.vel) {
            tensor_step(
                &mut layer.weight,
                &grad.weight,
                &mut vel.weight,
                self.lr,
                self.momentum,
                self.weight_decay,
            );
            let gb = &grad.bias;
            for ((p, g), v) in layer.bias.iter_mut().zip(gb.iter()).zip(vel.bias.iter_mut()) {
                let g = g + self.weight_decay * *p;
                *v = self.momentum * *v + g;
                *p -= self.lr * *v;
            }
        }
        if let Some(gs) = grad_s {
            // grad_s is produced only in trainable-scale mode.
            let head = head.ok_or_else(|| {
                SimError::ShapeMismatch("scale gradient given without a cosine head".into())
            })?;
            let g = gs + self.weight_decay * head.s;
            self.vel_s = self.momentum * self.vel_s + g;
            head.s -= self.lr * self.vel_s;
            if !(head.s > 0.0) || !head.s.is_finite() {
                return Err(SimError::NonFinite(format!(
                    "trainable scale left the positive range: s = {}",
                    head.s
                )));
            }
        }
        if let Some((fh, gv)) = free {
            let vel = self
                .vel_head
                .get_or_insert_with(|| Array2::zeros(fh.v.raw_dim()));
            tensor_step(
                &mut fh.v,
                gv,
                vel,
                self.lr,
                self.momentum,
                self.weight_decay,
            );
        }
        Ok(())
    }
}

fn tensor_step(
    param: &mut Array2<f64>,
    grad: &Array2<f64>,
    vel: &mut Array2<f64>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((p, g), v) in param.iter_mut().zip(grad.iter()).zip(vel.iter_mut()) {
        let g = g + weight_decay * *p;
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// Which loss variant a finite-difference check exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossVariant {
    CosineFixedScale,
    CosineTrainableScale,
    FreeHead,
}

/// Central finite differences over every parameter coordinate (body
/// plus s or the free head, per variant). Returns the max over
/// coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 0.01);
/// the floor keeps the measure meaningful where the true gradient
/// vanishes without amplifying finite-difference round-off.
pub fn finite_diff_check(
    theta: &BodyParams,
    head: &HeadState,
    free: Option<&FreeHead>,
    variant: LossVariant,
    x: ArrayView2<f64>,
    y: &[usize],
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(SimError::InvalidArgument(format!(
            "finite-difference eps must be > 0, got {eps}"
        )));
    }
    let mut theta = theta.clone();
    let mut head = HeadState {
        w: head.w.clone(),
        s: head.s,
        s_trainable: matches!(variant, LossVariant::CosineTrainableScale),
    };
    let mut free = free.cloned();

    let (analytic_body, analytic_s, analytic_v) = match variant {
        LossVariant::FreeHead => {
            let fh = free.as_ref().ok_or_else(|| {
                SimError::InvalidArgument("free-head check needs a free head".into())
            })?;
            let (_, g, gv) = free_loss_and_grads(&theta, fh, x, y)?;
            (g, None, Some(gv))
        }
        _ => {
            let (_, g, gs) = cosine_loss_and_grads(&theta, &head, x, y)?;
            (g, gs, None)
        }
    };

    // Every differentiable coordinate, paired with its analytic gradient.
    enum Coord {
        Weight(usize, usize, usize),
        Bias(usize, usize),
        Scale,
        Head(usize, usize),
    }
    let mut coords: Vec<(Coord, f64)> = Vec::new();
    for (l, g) in analytic_body.iter().enumerate() {
        let (rows, cols) = g.weight.dim();
        for i in 0..rows {
            for j in 0..cols {
                coords.push((Coord::Weight(l, i, j), g.weight[[i, j]]));
            }
        }
        for i in 0..g.bias.len() {
            coords.push((Coord::Bias(l, i), g.bias[i]));
        }
    }
    if let Some(gs) = analytic_s {
        coords.push((Coord::Scale, gs));
    }
    if let Some(gv) = &analytic_v {
        let (rows, cols) = gv.dim();
        for i in 0..rows {
            for j in 0..cols {
                coords.push((Coord::Head(i, j), gv[[i, j]]));
            }
        }
    }

    fn shift(
        theta: &mut BodyParams,
        head: &mut HeadState,
        free: Option<&mut FreeHead>,
        coord: &Coord,
        delta: f64,
    ) {
        match *coord {
            Coord::Weight(l, i, j) => theta.layers[l].weight[[i, j]] += delta,
            Coord::Bias(l, i) => theta.layers[l].bias[i] += delta,
            Coord::Scale => head.s += delta,
            Coord::Head(i, j) => free.expect("free head present").v[[i, j]] += delta,
        }
    }

    let eval = |theta: &BodyParams, head: &HeadState, free: Option<&FreeHead>| -> Result<f64> {
        match variant {
            LossVariant::FreeHead => Ok(free_loss_and_grads(theta, free.unwrap(), x, y)?.0),
            _ => Ok(cosine_loss_and_grads(theta, head, x, y)?.0),
        }
    };

    let mut max_rel: f64 = 0.0;
    for (coord, analytic) in &coords {
        shift(&mut theta, &mut head, free.as_mut(), coord, eps);
        let up = eval(&theta, &head, free.as_ref())?;
        shift(&mut theta, &mut head, free.as_mut(), coord, -2.0 * eps);
        let down = eval(&theta, &head, free.as_ref())?;
        shift(&mut theta, &mut head, free.as_mut(), coord, eps);
        let numeric = (up - down) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(0.01);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

/// Converts dataset rows (optionally a subset) into a batch matrix plus
/// label vector.
pub fn gather(ds: &LabeledDataset, idx: Option<&[usize]>) -> (Array2<f64>, Vec<usize>) {
    match idx {
        None => {
            let mut x = Array2::zeros((ds.len(), ds.input_dim()));
            for (i, p) in ds.points.iter().enumerate() {
                for (j, &v) in p.iter().enumerate() {
                    x[[i, j]] = v;
                }
            }
            (x, ds.labels.clone())
        }
        Some(idx) => {
            let mut x = Array2::zeros((idx.len(), ds.input_dim()));
            let mut y = Vec::with_capacity(idx.len());
            for (row, &i) in idx.iter().enumerate() {
                for (j, &v) in ds.points[i].iter().enumerate() {
                    x[[row, j]] = v;
                }
                y.push(ds.labels[i]);
            }
            (x, y)
        }
    }
}

/// Argmax with ties broken toward the lowest class id.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// A complete classifier: body plus one of the two head kinds.
#[derive(Debug, Clone)]
pub enum Predictor<'a> {
    Cosine { theta: &'a BodyParams, head: &'a HeadState },
    Free { theta: &'a BodyParams, head: &'a FreeHead },
}

impl Predictor<'_> {
    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        let logits = match self {
            Predictor::Cosine { theta, head } => {
                let r = forward_body(theta, x);
                logits_cosine(head, r.view())
            }
            Predictor::Free { theta, head } => {
                let z = forward_body_raw(theta, x);
                logits_free(head, z.view())
            }
        };
        logits
            .axis_iter(Axis(0))
            .map(|row| argmax_row(row.as_slice().unwrap()))
            .collect()
    }
}
