//! Learned strategyproof deployment mechanism.
//!
//! Two independent monotonic max-min networks (one per axis) produce, for
//! every rank `j` in the sorted reports, a report-independent phantom value;
//! the mechanism output is `max_j min(phantom_j, x_(j))` over the ascending
//! order statistics, where rank `j` is paired with the set of workers whose
//! reports are at position `j` or above. Because the network weights are
//! exponentiated they are strictly positive, the activation is increasing,
//! and max/min preserve monotonicity, so the phantom sequence is
//! nonincreasing in `j` and the composition is a generalized median: the
//! mechanism is strategyproof and anonymous *by construction*, for any
//! parameter values. Training only moves its cost toward the unconstrained
//! optimum.
//!
//! Networks operate on `[0,1]`-normalized coordinates; training costs are
//! evaluated in original physical units (outputs are denormalized before
//! costing), keeping the loss commensurable with the deployment-phase
//! platform cost.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    platform_cost_phase2, platform_cost_phase2_grad, DeploymentInstance, Point, Rect,
    SystemConfig,
};
use crate::rng::stage_rng;

/// Checkpoint format tag accepted by [`load_model`].
pub const MODEL_VERSION: &str = "v1";

#[derive(Debug, Error)]
pub enum MdlError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unsupported model version `{0}` (expected `{MODEL_VERSION}`)")]
    Version(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("max/min ties persisted through {0} resamples")]
    PersistentTies(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Activation
// ---------------------------------------------------------------------------

/// Shifted log-sigmoid activation `s(t) = ln(1/(1+e^-t)) + 1`, computed as
/// `1 - softplus(-t)` with the overflow-safe softplus. Range `(-inf, 1]`,
/// strictly increasing.
pub fn shifted_log_sigmoid(t: f64) -> f64 {
    let u = -t;
    1.0 - (u.max(0.0) + (-u.abs()).exp().ln_1p())
}

/// Derivative of [`shifted_log_sigmoid`]: the logistic `1/(1+e^t)` of `-t`.
pub fn shifted_log_sigmoid_deriv(t: f64) -> f64 {
    1.0 / (1.0 + t.exp())
}

/// Inverse of [`shifted_log_sigmoid`] on `v < 1`.
pub fn shifted_log_sigmoid_inv(v: f64) -> f64 {
    debug_assert!(v < 1.0);
    -((1.0 - v).exp_m1().ln())
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Parameters of one per-axis monotonic network. Layer-1 log-weights `w1`
/// are flattened `J x K x N` (row-major), all other tensors `J x K`; the
/// effective weights are `e^w1`, `e^w2`, hence strictly positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisNet {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl AxisNet {
    fn zeros(j: usize, k: usize, n: usize) -> Self {
        AxisNet {
            w1: vec![0.0; j * k * n],
            b1: vec![0.0; j * k],
            w2: vec![0.0; j * k],
            b2: vec![0.0; j * k],
        }
    }

    fn check_shape(&self, j: usize, k: usize, n: usize) -> Result<(), MdlError> {
        let groups = j * k;
        if self.w1.len() != groups * n
            || self.b1.len() != groups
            || self.w2.len() != groups
            || self.b2.len() != groups
        {
            return Err(MdlError::Shape(format!(
                "axis tensors sized {}/{}/{}/{} do not match J={j} K={k} N={n}",
                self.w1.len(),
                self.b1.len(),
                self.w2.len(),
                self.b2.len()
            )));
        }
        let finite = self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2);
        if finite.into_iter().any(|v| !v.is_finite()) {
            return Err(MdlError::Malformed("non-finite parameter".into()));
        }
        Ok(())
    }
}

/// Which axis of the mechanism a network serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

/// A trained (or freshly initialized) two-axis mechanism model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdlModel {
    /// Max-branch count J.
    pub j: usize,
    /// Min-branch count K.
    pub k: usize,
    /// Worker count the model serves (rank encodings are `n_hat`-specific).
    pub n_hat: usize,
    pub x: AxisNet,
    pub y: AxisNet,
    /// Bounds used for the `[0,1]` coordinate normalization.
    pub norm: Rect,
    /// Seed the parameters were initialized from.
    pub seed: u64,
    /// Checkpoint format tag.
    pub version: String,
}

impl MdlModel {
    /// All-zero parameters (useful as a deterministic fixture).
    pub fn zeros(j: usize, k: usize, n_hat: usize, norm: Rect) -> Result<Self, MdlError> {
        if j == 0 || k == 0 || n_hat == 0 {
            return Err(MdlError::Shape("J, K, N must all be >= 1".into()));
        }
        if norm.is_degenerate() {
            return Err(MdlError::Invalid("degenerate normalization bounds".into()));
        }
        Ok(MdlModel {
            j,
            k,
            n_hat,
            x: AxisNet::zeros(j, k, n_hat),
            y: AxisNet::zeros(j, k, n_hat),
            norm,
            seed: 0,
            version: MODEL_VERSION.into(),
        })
    }

    /// Seed-deterministic initialization: log-weights uniform on `[-1, 0]`,
    /// layer-1 biases uniform on `[-0.5, 0.5]`, and layer-2 biases spread
    /// over the deciles of `[0,1]` mapped through the activation inverse
    /// (shuffled), so the initial phantom values cover the unit interval and
    /// no max/min branch starts dead.
    pub fn init(j: usize, k: usize, n_hat: usize, norm: Rect, seed: u64) -> Result<Self, MdlError> {
        let mut model = MdlModel::zeros(j, k, n_hat, norm)?;
        model.seed = seed;
        let mut rng = stage_rng(seed, "mdl-init");
        for net in [&mut model.x, &mut model.y] {
            for w in net.w1.iter_mut().chain(net.w2.iter_mut()) {
                *w = rng.gen_range(-1.0..0.0);
            }
            for b in net.b1.iter_mut() {
                *b = rng.gen_range(-0.5..0.5);
            }
            let groups = j * k;
            let mut levels: Vec<f64> = (0..groups)
                .map(|m| shifted_log_sigmoid_inv((m as f64 + 0.5) / groups as f64))
                .collect();
            levels.shuffle(&mut rng);
            net.b2.copy_from_slice(&levels);
        }
        Ok(model)
    }

    pub fn axis(&self, axis: Axis) -> &AxisNet {
        match axis {
            Axis::X => &self.x,
            Axis::Y => &self.y,
        }
    }

    /// Validate tensor shapes and parameter finiteness.
    pub fn validate(&self) -> Result<(), MdlError> {
        if self.j == 0 || self.k == 0 || self.n_hat == 0 {
            return Err(MdlError::Shape("J, K, N must all be >= 1".into()));
        }
        if self.version != MODEL_VERSION {
            return Err(MdlError::Version(self.version.clone()));
        }
        if self.norm.is_degenerate() {
            return Err(MdlError::Invalid("degenerate normalization bounds".into()));
        }
        self.x.check_shape(self.j, self.k, self.n_hat)?;
        self.y.check_shape(self.j, self.k, self.n_hat)
    }
}

/// Optimization hyperparameters. The optimizer is Adam with the standard
/// moment parameters (0.9, 0.999, 1e-8).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            learning_rate: 0.005,
            batch: 200,
            epochs: 50,
            seed: 0,
        }
    }
}

/// One training sample: normalized worker locations, their cost weights, and
/// the normalized unconstrained-optimum deployment point used as the label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub locations: Vec<Point>,
    pub weights: Vec<f64>,
    pub label: Point,
}

/// One entry of the recorded loss curve (means of the squared cost gap).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Best validation loss seen so far (nonincreasing by construction).
    pub best_val: f64,
}

// ---------------------------------------------------------------------------
// Forward evaluation
// ---------------------------------------------------------------------------

/// Subset indicator vector: `+1` for members, `-1` otherwise, ids `1..=n`.
pub fn encode_subset(t: &[usize], n: usize) -> Result<Vec<f64>, MdlError> {
    let mut z = vec![-1.0; n];
    for &id in t {
        if id == 0 || id > n {
            return Err(MdlError::Invalid(format!(
                "worker id {id} outside 1..={n}"
            )));
        }
        z[id - 1] = 1.0;
    }
    Ok(z)
}

/// Active branch and pre-activations of one phantom evaluation, kept for
/// backpropagation.
#[derive(Debug, Clone, Copy)]
struct PhantomTrace {
    group: usize, // flattened (j_sel * K + k_sel)
    t1: f64,
    a: f64,
    t2: f64,
}

fn nu_groups(net: &AxisNet, k: usize, inner: &[f64]) -> (f64, PhantomTrace) {
    // inner[g] = sum_n e^{w1[g,n]} z_n, precomputed per flattened group g.
    let mut best = f64::NEG_INFINITY;
    let mut best_trace = PhantomTrace { group: 0, t1: 0.0, a: 0.0, t2: 0.0 };
    let groups = net.b1.len();
    let j = groups / k;
    for jj in 0..j {
        let mut row_min = f64::INFINITY;
        let mut row_trace = best_trace;
        for kk in 0..k {
            let g = jj * k + kk;
            let t1 = net.b1[g] + inner[g];
            let a = shifted_log_sigmoid(t1);
            let t2 = net.b2[g] + net.w2[g].exp() * a;
            let v = shifted_log_sigmoid(t2);
            if v < row_min {
                row_min = v;
                row_trace = PhantomTrace { group: g, t1, a, t2 };
            }
        }
        if row_min > best {
            best = row_min;
            best_trace = row_trace;
        }
    }
    (best, best_trace)
}

/// Monotonic max-min network: `max_j min_k s(b2 + e^{w2} s(e^{w1} . z + b1))`.
/// Accepts any real-valued `z` of length `n`; nondecreasing in every entry.
pub fn monotonic_forward(
    net: &AxisNet,
    j: usize,
    k: usize,
    z: &[f64],
) -> Result<f64, MdlError> {
    let n = z.len();
    net.check_shape(j, k, n)?;
    if z.iter().any(|v| !v.is_finite()) {
        return Err(MdlError::Invalid("non-finite network input".into()));
    }
    let groups = j * k;
    let mut inner = vec![0.0; groups];
    for (g, slot) in inner.iter_mut().enumerate() {
        *slot = z
            .iter()
            .enumerate()
            .map(|(nn, &zv)| net.w1[g * n + nn].exp() * zv)
            .sum();
    }
    Ok(nu_groups(net, k, &inner).0)
}

/// Phantom values (and gradient traces) for every rank `1..=n`: rank `r`
/// uses the indicator of the suffix set `{r..n}` in the ascending sort, i.e.
/// `z_i = +1` for `i >= r`. Suffix sets shrink as `r` grows, so the phantom
/// sequence is nonincreasing. The encodings are fixed, so this depends only
/// on the parameters, not on any sample.
fn axis_phantoms(net: &AxisNet, j: usize, k: usize, n: usize) -> (Vec<f64>, Vec<PhantomTrace>) {
    let groups = j * k;
    // Per group: inner product with a suffix indicator = total - 2 * prefix.
    let mut values = Vec::with_capacity(n);
    let mut traces = Vec::with_capacity(n);
    let mut prefix = vec![0.0; groups];
    let expw: Vec<f64> = net.w1.iter().map(|w| w.exp()).collect();
    let inner: Vec<f64> = expw.chunks_exact(n).map(|row| row.iter().sum()).collect();
    for r in 0..n {
        if r > 0 {
            for g in 0..groups {
                prefix[g] += expw[g * n + (r - 1)];
            }
        }
        let shifted: Vec<f64> = (0..groups).map(|g| inner[g] - 2.0 * prefix[g]).collect();
        let (v, trace) = nu_groups(net, k, &shifted);
        values.push(v);
        traces.push(trace);
    }
    (values, traces)
}

#[derive(Debug, Clone, Copy)]
struct ComposeOut {
    value: f64,
    rank: usize,
    phantom_active: bool,
}

/// `max_r min(phantom_r, sorted_r)`; earliest rank wins ties, and on an exact
/// phantom/coordinate tie the phantom is treated as the active branch.
fn compose(phantoms: &[f64], sorted: &[f64]) -> ComposeOut {
    let mut out = ComposeOut { value: f64::NEG_INFINITY, rank: 0, phantom_active: true };
    for r in 0..sorted.len() {
        let (value, phantom_active) = if phantoms[r] <= sorted[r] {
            (phantoms[r], true)
        } else {
            (sorted[r], false)
        };
        if value > out.value {
            out = ComposeOut { value, rank: r, phantom_active };
        }
    }
    out
}

fn sorted_axis(locations: &[Point], axis: Axis) -> Vec<f64> {
    let mut v: Vec<f64> = locations
        .iter()
        .map(|p| match axis {
            Axis::X => p.x,
            Axis::Y => p.y,
        })
        .collect();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite coordinates"));
    v
}

/// Mechanism output in normalized coordinates for `n_hat` normalized reports.
pub fn mechanism_forward(model: &MdlModel, locations: &[Point]) -> Result<Point, MdlError> {
    model.validate()?;
    if locations.len() != model.n_hat {
        return Err(MdlError::Shape(format!(
            "model serves {} workers, got {}",
            model.n_hat,
            locations.len()
        )));
    }
    if locations.iter().any(|p| !p.is_finite()) {
        return Err(MdlError::Invalid("non-finite report".into()));
    }
    let mut out = [0.0; 2];
    for (slot, axis) in [Axis::X, Axis::Y].into_iter().enumerate() {
        let net = model.axis(axis);
        let (phantoms, _) = axis_phantoms(net, model.j, model.k, model.n_hat);
        let sorted = sorted_axis(locations, axis);
        out[slot] = compose(&phantoms, &sorted).value;
    }
    Ok(Point::new(out[0], out[1]))
}

/// Mechanism output for reports in original units: normalize by the model's
/// bounds, run the networks, denormalize the result.
pub fn mechanism_place(model: &MdlModel, reports: &[Point]) -> Result<Point, MdlError> {
    let normalized: Vec<Point> = reports.iter().map(|&p| model.norm.normalize(p)).collect();
    let out = mechanism_forward(model, &normalized)?;
    Ok(model.norm.denormalize(out))
}

// ---------------------------------------------------------------------------
// Labeling
// ---------------------------------------------------------------------------

/// Attach the unconstrained-optimum deployment point to each sample as its
/// label. Locations arrive normalized; the optimum is computed in original
/// units (denormalized by the task area) and the label stored normalized.
/// `weights` must hold either one vector (shared by all samples) or one per
/// sample.
pub fn label_dataset(
    samples: &[Vec<Point>],
    weights: &[Vec<f64>],
    cfg: &SystemConfig,
) -> Result<Vec<LabeledSample>, MdlError> {
    if samples.is_empty() {
        return Err(MdlError::Invalid("no samples to label".into()));
    }
    if weights.len() != 1 && weights.len() != samples.len() {
        return Err(MdlError::Shape(format!(
            "need 1 or {} weight vectors, got {}",
            samples.len(),
            weights.len()
        )));
    }
    let area = cfg.task_area;
    let mut out = Vec::with_capacity(samples.len());
    for (i, locs) in samples.iter().enumerate() {
        let w = if weights.len() == 1 { &weights[0] } else { &weights[i] };
        let denorm: Vec<Point> = locs.iter().map(|&p| area.denormalize(p)).collect();
        let inst = DeploymentInstance::new(denorm, w.clone(), cfg.clone())
            .map_err(|e| MdlError::Invalid(format!("sample {i}: {e}")))?;
        let opt = crate::deploy::opt_deploy(&inst);
        out.push(LabeledSample {
            locations: locs.clone(),
            weights: w.clone(),
            label: area.normalize(opt),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct AxisGrads {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl AxisGrads {
    fn zeros(j: usize, k: usize, n: usize) -> Self {
        AxisGrads {
            w1: vec![0.0; j * k * n],
            b1: vec![0.0; j * k],
            w2: vec![0.0; j * k],
            b2: vec![0.0; j * k],
        }
    }

    fn reset(&mut self) {
        for v in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    fn scale(&mut self, s: f64) {
        for v in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            v.iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Backpropagate `dl_dnu` (loss sensitivity to one phantom value) into the
/// parameter gradients, through the recorded active branch. Rank `r` implies
/// the suffix encoding `z_i = +1` iff `i >= r`.
fn accumulate_phantom_grad(
    net: &AxisNet,
    trace: &PhantomTrace,
    rank: usize,
    n: usize,
    dl_dnu: f64,
    grads: &mut AxisGrads,
) {
    let g = trace.group;
    let ds2 = shifted_log_sigmoid_deriv(trace.t2);
    let g2 = dl_dnu * ds2;
    grads.b2[g] += g2;
    let e_w2 = net.w2[g].exp();
    grads.w2[g] += g2 * e_w2 * trace.a;
    let g1 = g2 * e_w2 * shifted_log_sigmoid_deriv(trace.t1);
    grads.b1[g] += g1;
    for nn in 0..n {
        let z = if nn >= rank { 1.0 } else { -1.0 };
        grads.w1[g * n + nn] += g1 * net.w1[g * n + nn].exp() * z;
    }
}

struct SampleEnv {
    inst: DeploymentInstance,
    c_star: f64,
}

fn build_envs(
    dataset: &[LabeledSample],
    norm: &Rect,
    cfg: &SystemConfig,
) -> Result<Vec<SampleEnv>, MdlError> {
    dataset
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let denorm: Vec<Point> = s.locations.iter().map(|&p| norm.denormalize(p)).collect();
            let inst = DeploymentInstance::new(denorm, s.weights.clone(), cfg.clone())
                .map_err(|e| MdlError::Invalid(format!("sample {i}: {e}")))?;
            let c_star = platform_cost_phase2(norm.denormalize(s.label), &inst);
            Ok(SampleEnv { inst, c_star })
        })
        .collect()
}

struct AxisPhantoms {
    values: Vec<f64>,
    traces: Vec<PhantomTrace>,
}

fn model_phantoms(model: &MdlModel) -> [AxisPhantoms; 2] {
    let (vx, tx) = axis_phantoms(&model.x, model.j, model.k, model.n_hat);
    let (vy, ty) = axis_phantoms(&model.y, model.j, model.k, model.n_hat);
    [
        AxisPhantoms { values: vx, traces: tx },
        AxisPhantoms { values: vy, traces: ty },
    ]
}

/// Squared cost gap of one sample, optionally accumulating parameter
/// gradients through the active max/min branches.
fn sample_loss(
    model: &MdlModel,
    phantoms: &[AxisPhantoms; 2],
    sample: &LabeledSample,
    env: &SampleEnv,
    mut grads: Option<(&mut AxisGrads, &mut AxisGrads)>,
) -> f64 {
    let sorted = [
        sorted_axis(&sample.locations, Axis::X),
        sorted_axis(&sample.locations, Axis::Y),
    ];
    let outs = [
        compose(&phantoms[0].values, &sorted[0]),
        compose(&phantoms[1].values, &sorted[1]),
    ];
    let at = model
        .norm
        .denormalize(Point::new(outs[0].value, outs[1].value));
    let c_hat = platform_cost_phase2(at, &env.inst);
    let residual = c_hat - env.c_star;
    if let Some((gx, gy)) = grads.as_mut() {
        let cost_grad = platform_cost_phase2_grad(at, &env.inst);
        let extents = [model.norm.width(), model.norm.height()];
        for (slot, grads_axis) in [&mut **gx, &mut **gy].into_iter().enumerate() {
            if !outs[slot].phantom_active {
                continue; // output pinned to a reported coordinate
            }
            let dl_dnu = 2.0 * residual * cost_grad[slot] * extents[slot];
            let net = if slot == 0 { &model.x } else { &model.y };
            accumulate_phantom_grad(
                net,
                &phantoms[slot].traces[outs[slot].rank],
                outs[slot].rank,
                model.n_hat,
                dl_dnu,
                grads_axis,
            );
        }
    }
    residual * residual
}

struct AdamState {
    m: AxisGrads,
    v: AxisGrads,
}

fn adam_update(
    params: &mut AxisNet,
    grads: &AxisGrads,
    state: &mut AdamState,
    lr: f64,
    step: i32,
) {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    let bc1 = 1.0 - B1.powi(step);
    let bc2 = 1.0 - B2.powi(step);
    type TensorSlot<'a> = (&'a mut Vec<f64>, &'a [f64], &'a mut Vec<f64>, &'a mut Vec<f64>);
    let tensors: [TensorSlot; 4] = [
        (&mut params.w1, &grads.w1, &mut state.m.w1, &mut state.v.w1),
        (&mut params.b1, &grads.b1, &mut state.m.b1, &mut state.v.b1),
        (&mut params.w2, &grads.w2, &mut state.m.w2, &mut state.v.w2),
        (&mut params.b2, &grads.b2, &mut state.m.b2, &mut state.v.b2),
    ];
    for (p, g, m, v) in tensors {
        for i in 0..p.len() {
            m[i] = B1 * m[i] + (1.0 - B1) * g[i];
            v[i] = B2 * v[i] + (1.0 - B2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * mhat / (vhat.sqrt() + EPS);
        }
    }
}

/// Minimize the mean squared cost gap with mini-batch Adam. The dataset is
/// split 90/10 into train/validation (seed-deterministic shuffle) and the
/// parameters with the best validation loss are returned together with the
/// per-epoch loss curve. Aborts with [`MdlError::Diverged`] if the loss
/// leaves the finite range.
pub fn train(
    dataset: &[LabeledSample],
    settings: &TrainSettings,
    init: &MdlModel,
    cfg: &SystemConfig,
) -> Result<(MdlModel, Vec<LossPoint>), MdlError> {
    init.validate()?;
    if dataset.is_empty() {
        return Err(MdlError::Invalid("empty training dataset".into()));
    }
    if !(settings.learning_rate >= 0.0) || settings.batch == 0 {
        return Err(MdlError::Invalid(
            "learning rate must be >= 0 and batch >= 1".into(),
        ));
    }
    for (i, s) in dataset.iter().enumerate() {
        if s.locations.len() != init.n_hat || s.weights.len() != init.n_hat {
            return Err(MdlError::Shape(format!(
                "sample {i} has arity {}/{} but the model serves {}",
                s.locations.len(),
                s.weights.len(),
                init.n_hat
            )));
        }
    }

    let envs = build_envs(dataset, &init.norm, cfg)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = stage_rng(settings.seed, "mdl-train");
    order.shuffle(&mut rng);
    let n_val = dataset.len() / 10;
    let (train_idx, val_idx) = order.split_at(dataset.len() - n_val);
    let train_idx = train_idx.to_vec();
    let val_idx = val_idx.to_vec();

    let mut model = init.clone();
    let (j, k, n) = (model.j, model.k, model.n_hat);
    let mut gx = AxisGrads::zeros(j, k, n);
    let mut gy = AxisGrads::zeros(j, k, n);
    let mut adam_x = AdamState { m: AxisGrads::zeros(j, k, n), v: AxisGrads::zeros(j, k, n) };
    let mut adam_y = AdamState { m: AxisGrads::zeros(j, k, n), v: AxisGrads::zeros(j, k, n) };
    let mut step = 0i32;

    let val_loss_of = |model: &MdlModel, idx: &[usize]| -> f64 {
        if idx.is_empty() {
            return f64::NAN; // replaced by the train loss below
        }
        let phantoms = model_phantoms(model);
        idx.iter()
            .map(|&i| sample_loss(model, &phantoms, &dataset[i], &envs[i], None))
            .sum::<f64>()
            / idx.len() as f64
    };

    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut curve = Vec::with_capacity(settings.epochs);
    let mut epoch_order = train_idx.clone();

    for epoch in 0..settings.epochs {
        epoch_order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_no, batch) in epoch_order.chunks(settings.batch).enumerate() {
            let phantoms = model_phantoms(&model);
            gx.reset();
            gy.reset();
            let mut batch_loss = 0.0;
            for &i in batch {
                batch_loss +=
                    sample_loss(&model, &phantoms, &dataset[i], &envs[i], Some((&mut gx, &mut gy)));
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(MdlError::Diverged { epoch, batch: batch_no, loss: batch_loss });
            }
            epoch_loss += batch_loss * batch.len() as f64;
            let inv = 1.0 / batch.len() as f64;
            gx.scale(inv);
            gy.scale(inv);
            step += 1;
            adam_update(&mut model.x, &gx, &mut adam_x, settings.learning_rate, step);
            adam_update(&mut model.y, &gy, &mut adam_y, settings.learning_rate, step);
        }
        let train_loss = epoch_loss / train_idx.len().max(1) as f64;
        let mut val_loss = val_loss_of(&model, &val_idx);
        if !val_loss.is_finite() && val_idx.is_empty() {
            val_loss = train_loss;
        }
        if !val_loss.is_finite() {
            return Err(MdlError::Diverged { epoch, batch: 0, loss: val_loss });
        }
        if val_loss < best_val {
            best_val = val_loss;
            best = model.clone();
        }
        curve.push(LossPoint { epoch, train_loss, val_loss, best_val });
    }

    if curve.is_empty() {
        // zero epochs: the initial parameters are the result
        best = model;
    }
    Ok((best, curve))
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

/// Smallest separation between the selected max/min branch and its
/// competitors, over both axes, including the phantom-vs-coordinate margins
/// in the final composition. Finite-difference probes are only meaningful
/// when this gap is comfortably larger than the probe step.
fn tie_gap(model: &MdlModel, sample: &LabeledSample) -> f64 {
    let phantoms = model_phantoms(model);
    let mut gap = f64::INFINITY;
    for (slot, axis) in [Axis::X, Axis::Y].into_iter().enumerate() {
        let net = model.axis(axis);
        let sorted = sorted_axis(&sample.locations, axis);
        let out = compose(&phantoms[slot].values, &sorted);
        // margins inside the final composition
        for (r, (&ph, &sv)) in phantoms[slot].values.iter().zip(&sorted).enumerate() {
            gap = gap.min((ph - sv).abs());
            if r != out.rank {
                gap = gap.min((out.value - ph.min(sv)).abs());
            }
        }
        // margins inside the selected phantom's network evaluation
        if out.phantom_active {
            let trace = &phantoms[slot].traces[out.rank];
            let n = model.n_hat;
            let mut row_mins = Vec::with_capacity(model.j);
            for jj in 0..model.j {
                let mut row_min = f64::INFINITY;
                for kk in 0..model.k {
                    let g = jj * model.k + kk;
                    let inner: f64 = (0..n)
                        .map(|nn| {
                            let z = if nn >= out.rank { 1.0 } else { -1.0 };
                            net.w1[g * n + nn].exp() * z
                        })
                        .sum();
                    let v = shifted_log_sigmoid(
                        net.b2[g] + net.w2[g].exp() * shifted_log_sigmoid(net.b1[g] + inner),
                    );
                    if g != trace.group && g / model.k == trace.group / model.k {
                        gap = gap.min((v - out.value).abs());
                    }
                    row_min = row_min.min(v);
                }
                row_mins.push(row_min);
            }
            let sel_row = trace.group / model.k;
            for (jj, &m) in row_mins.iter().enumerate() {
                if jj != sel_row {
                    gap = gap.min((m - out.value).abs());
                }
            }
        }
    }
    gap
}

/// Compare analytic per-sample loss gradients against central finite
/// differences (step 1e-6) on `probes` randomly chosen parameters; returns
/// the maximum relative error. If the sample sits on a max/min tie it is
/// jittered (up to 10 resamples) so the loss is differentiable at the probe.
pub fn subgradient_check(
    model: &MdlModel,
    sample: &LabeledSample,
    cfg: &SystemConfig,
    probes: usize,
    seed: u64,
) -> Result<f64, MdlError> {
    model.validate()?;
    let mut rng = stage_rng(seed, "mdl-subgrad");
    let mut sample = sample.clone();
    let mut tries = 0;
    while tie_gap(model, &sample) < 1e-5 {
        tries += 1;
        if tries > 10 {
            return Err(MdlError::PersistentTies(10));
        }
        for p in sample.locations.iter_mut() {
            p.x = (p.x + rng.gen_range(-1e-3..1e-3)).clamp(0.0, 1.0);
            p.y = (p.y + rng.gen_range(-1e-3..1e-3)).clamp(0.0, 1.0);
        }
    }

    let envs = build_envs(std::slice::from_ref(&sample), &model.norm, cfg)?;
    let env = &envs[0];
    let (j, k, n) = (model.j, model.k, model.n_hat);
    let mut gx = AxisGrads::zeros(j, k, n);
    let mut gy = AxisGrads::zeros(j, k, n);
    let phantoms = model_phantoms(model);
    let base_loss = sample_loss(model, &phantoms, &sample, env, Some((&mut gx, &mut gy)));

    let loss_at = |m: &MdlModel| -> f64 {
        let phantoms = model_phantoms(m);
        sample_loss(m, &phantoms, &sample, env, None)
    };

    const STEP: f64 = 1e-6;
    let floor = 1e-9 * (1.0 + base_loss.abs());
    let mut max_err: f64 = 0.0;
    for _ in 0..probes {
        let axis_is_x = rng.gen_bool(0.5);
        let tensor = rng.gen_range(0..4usize);
        let grads_axis = if axis_is_x { &gx } else { &gy };
        let tensor_grads = match tensor {
            0 => &grads_axis.w1,
            1 => &grads_axis.b1,
            2 => &grads_axis.w2,
            _ => &grads_axis.b2,
        };
        let idx = rng.gen_range(0..tensor_grads.len());
        let analytic = tensor_grads[idx];
        let mut plus = model.clone();
        let mut minus = model.clone();
        {
            let (p, m) = if axis_is_x {
                (&mut plus.x, &mut minus.x)
            } else {
                (&mut plus.y, &mut minus.y)
            };
            let (pt, mt) = match tensor {
                0 => (&mut p.w1, &mut m.w1),
                1 => (&mut p.b1, &mut m.b1),
                2 => (&mut p.w2, &mut m.w2),
                _ => (&mut p.b2, &mut m.b2),
            };
            pt[idx] += STEP;
            mt[idx] -= STEP;
        }
        let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * STEP);
        let denom = analytic.abs().max(fd.abs());
        let err = if denom <= floor { 0.0 } else { (analytic - fd).abs() / denom };
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

fn write_block(out: &mut String, name: &str, values: &[f64], cols: usize) {
    out.push_str(name);
    out.push('\n');
    for row in values.chunks(cols) {
        let mut first = true;
        for v in row {
            if !first {
                out.push(' ');
            }
            let _ = write!(out, "{v:.16e}");
            first = false;
        }
        out.push('\n');
    }
}

/// Serialize a model to the versioned text checkpoint format.
pub fn save_model(model: &MdlModel, path: &Path) -> Result<(), MdlError> {
    model.validate()?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "MDLMODEL {} J={} K={} N={}",
        model.version, model.j, model.k, model.n_hat
    );
    for (suffix, net) in [("x", &model.x), ("y", &model.y)] {
        write_block(&mut out, &format!("w1.{suffix}"), &net.w1, model.n_hat);
        write_block(&mut out, &format!("b1.{suffix}"), &net.b1, model.k);
        write_block(&mut out, &format!("w2.{suffix}"), &net.w2, model.k);
        write_block(&mut out, &format!("b2.{suffix}"), &net.b2, model.k);
    }
    let _ = writeln!(
        out,
        "norm {:.16e} {:.16e} {:.16e} {:.16e}",
        model.norm.min.x, model.norm.max.x, model.norm.min.y, model.norm.max.y
    );
    let _ = writeln!(out, "seed {}", model.seed);
    std::fs::write(path, out)?;
    Ok(())
}

fn parse_floats(line: &str, want: usize, what: &str) -> Result<Vec<f64>, MdlError> {
    let vals: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
    let vals = vals.map_err(|e| MdlError::Malformed(format!("{what}: {e}")))?;
    if vals.len() != want {
        return Err(MdlError::Shape(format!(
            "{what}: expected {want} values, got {}",
            vals.len()
        )));
    }
    Ok(vals)
}

/// Parse a model from the versioned text checkpoint format.
pub fn load_model(path: &Path) -> Result<MdlModel, MdlError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| MdlError::Malformed("empty file".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 5 || fields[0] != "MDLMODEL" {
        return Err(MdlError::Malformed(format!("bad header `{header}`")));
    }
    if fields[1] != MODEL_VERSION {
        return Err(MdlError::Version(fields[1].to_string()));
    }
    let dim = |field: &str, tag: &str| -> Result<usize, MdlError> {
        field
            .strip_prefix(tag)
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&v| v >= 1)
            .ok_or_else(|| MdlError::Malformed(format!("bad dimension field `{field}`")))
    };
    let j = dim(fields[2], "J=")?;
    let k = dim(fields[3], "K=")?;
    let n = dim(fields[4], "N=")?;

    let mut read_block = |name: &str, rows: usize, cols: usize| -> Result<Vec<f64>, MdlError> {
        match lines.next() {
            Some(l) if l.trim() == name => {}
            other => {
                return Err(MdlError::Malformed(format!(
                    "expected block `{name}`, found `{}`",
                    other.unwrap_or("<eof>")
                )))
            }
        }
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let line = lines.next().ok_or_else(|| {
                MdlError::Shape(format!("{name}: truncated at row {r} of {rows}"))
            })?;
            values.extend(parse_floats(line, cols, name)?);
        }
        Ok(values)
    };

    let mut nets = Vec::with_capacity(2);
    for suffix in ["x", "y"] {
        let w1 = read_block(&format!("w1.{suffix}"), j * k, n)?;
        let b1 = read_block(&format!("b1.{suffix}"), j, k)?;
        let w2 = read_block(&format!("w2.{suffix}"), j, k)?;
        let b2 = read_block(&format!("b2.{suffix}"), j, k)?;
        nets.push(AxisNet { w1, b1, w2, b2 });
    }

    let norm_line = lines
        .next()
        .ok_or_else(|| MdlError::Malformed("missing norm line".into()))?;
    let norm_vals = norm_line
        .strip_prefix("norm ")
        .ok_or_else(|| MdlError::Malformed(format!("expected norm line, found `{norm_line}`")))?;
    let nv = parse_floats(norm_vals, 4, "norm")?;
    let norm = Rect::new(Point::new(nv[0], nv[2]), Point::new(nv[1], nv[3]))
        .map_err(|e| MdlError::Malformed(e.to_string()))?;

    let seed_line = lines
        .next()
        .ok_or_else(|| MdlError::Malformed("missing seed line".into()))?;
    let seed = seed_line
        .strip_prefix("seed ")
        .and_then(|v| v.trim().parse::<u64>().ok())
        .ok_or_else(|| MdlError::Malformed(format!("bad seed line `{seed_line}`")))?;

    if lines.any(|l| !l.trim().is_empty()) {
        return Err(MdlError::Malformed("trailing content after seed".into()));
    }

    let y = nets.pop().expect("two nets parsed");
    let x = nets.pop().expect("two nets parsed");
    let model = MdlModel {
        j,
        k,
        n_hat: n,
        x,
        y,
        norm,
        seed,
        version: MODEL_VERSION.into(),
    };
    model.validate()?;
    Ok(model)
}
