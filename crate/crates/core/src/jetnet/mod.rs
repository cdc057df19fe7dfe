//! Feed-forward Mish network with second-order input jets.
//!
//! A batch of `B` points is pushed through the network as a stacked matrix of
//! row blocks: value, `d/dtau`, `d/dz` and `d^2/dz^2` lanes, in that order.
//! The `tau` and `zz` lanes may cover only a leading prefix of the batch, for
//! points (boundary samples) whose loss terms never read them. Affine
//! layers act on every lane through the same weight matrix (the bias only
//! enters the value lane), and the activation mixes lanes through the chain
//! rule. The reverse pass walks the same stacked layout, so each layer costs
//! one matrix product forward and two backward.

mod adam;
mod checkpoint;
mod mish;

pub use adam::{Adam, AdamState};
pub use checkpoint::{Checkpoint, CheckpointError, LayerWeights, CANONICAL_LAYER_ORDER};
pub use mish::{mish, mish_jet, softplus, MishJet};

use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const INPUT_DIM: usize = 2;
pub const OUTPUT_DIM: usize = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum JetNetError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("parameter vector has length {actual}, network needs {expected}")]
    ParamLength { expected: usize, actual: usize },
    #[error("tape does not match network: {0}")]
    TapeMismatch(String),
}

/// Topology of the network. `depth` counts affine layers, so a depth-`d`
/// network has `d - 1` hidden Mish layers of `width` neurons.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub depth: usize,
    pub width: usize,
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    #[serde(default = "default_output_dim")]
    pub output_dim: usize,
    pub seed: u64,
    /// The first layer sees `(s_tau * tau, s_z * z)`; jets stay in `(tau, z)`.
    #[serde(default = "unit_scale")]
    pub input_scale: [f64; 2],
}

fn unit_scale() -> [f64; 2] {
    [1.0, 1.0]
}

fn default_input_dim() -> usize {
    INPUT_DIM
}

fn default_output_dim() -> usize {
    OUTPUT_DIM
}

impl NetworkConfig {
    pub fn new(depth: usize, width: usize, seed: u64) -> Self {
        Self {
            depth,
            width,
            input_dim: INPUT_DIM,
            output_dim: OUTPUT_DIM,
            seed,
            input_scale: unit_scale(),
        }
    }

    /// Scales inputs so that the training box `[0, tau_max] x [-c_z, c_z]`
    /// maps onto `[0, 1] x [-1, 1]`.
    pub fn with_domain_scaling(mut self, tau_max: f64, c_z: f64) -> Self {
        self.input_scale = [1.0 / tau_max, 1.0 / c_z];
        self
    }

    pub fn validate(&self) -> Result<(), JetNetError> {
        if self.depth < 2 {
            return Err(JetNetError::InvalidConfig(format!(
                "depth must be at least 2, got {}",
                self.depth
            )));
        }
        if self.width == 0 {
            return Err(JetNetError::InvalidConfig("width must be positive".into()));
        }
        if !self.input_scale.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(JetNetError::InvalidConfig(format!(
                "input scales must be positive, got {:?}",
                self.input_scale
            )));
        }
        if self.input_dim != INPUT_DIM || self.output_dim != OUTPUT_DIM {
            return Err(JetNetError::InvalidConfig(format!(
                "network maps (tau, z) to a scalar; got {} -> {}",
                self.input_dim, self.output_dim
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.depth);
        shapes.push((self.input_dim, self.width));
        for _ in 0..self.depth - 2 {
            shapes.push((self.width, self.width));
        }
        shapes.push((self.width, self.output_dim));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|&(fan_in, fan_out)| fan_in * fan_out + fan_out)
            .sum()
    }
}

/// Flat parameter (or gradient) storage.
///
/// Layers are laid out in order; each layer stores its `fan_out x fan_in`
/// weight matrix row-major followed by its `fan_out` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Value of the network output together with the input derivatives the
/// parabolic operator consumes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Jet2 {
    pub val: f64,
    pub d_tau: f64,
    pub d_z: f64,
    pub d_zz: f64,
}

impl Jet2 {
    pub fn new(val: f64, d_tau: f64, d_z: f64, d_zz: f64) -> Self {
        Self {
            val,
            d_tau,
            d_z,
            d_zz,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.val.is_finite() && self.d_tau.is_finite() && self.d_z.is_finite() && self.d_zz.is_finite()
    }

    pub fn scale(&self, c: f64) -> Self {
        Self::new(self.val * c, self.d_tau * c, self.d_z * c, self.d_zz * c)
    }
}

/// Anything that can evaluate jets of a scalar field `f(tau, z)`.
pub trait JetField {
    fn jets(&self, points: &[(f64, f64)]) -> Vec<Jet2>;

    fn jet(&self, tau: f64, z: f64) -> Jet2 {
        self.jets(&[(tau, z)])[0]
    }
}

/// A closed-form field, handy for synthetic surfaces.
pub struct AnalyticField<F>(pub F);

impl<F: Fn(f64, f64) -> Jet2> JetField for AnalyticField<F> {
    fn jets(&self, points: &[(f64, f64)]) -> Vec<Jet2> {
        points.iter().map(|&(tau, z)| (self.0)(tau, z)).collect()
    }
}

/// Everything the reverse pass needs from one batched forward evaluation.
#[derive(Debug, Clone)]
pub struct Tape {
    batch: usize,
    /// Leading points that carry the `tau` and `zz` lanes.
    full: usize,
    shapes: Vec<(usize, usize)>,
    /// Stacked input of each affine layer, `(2B + 2F) x fan_in`.
    inputs: Vec<Array2<f64>>,
    /// Stacked pre-activations of each hidden layer.
    pre_activations: Vec<Array2<f64>>,
    /// Mish derivatives at the value-lane pre-activations, `B x width`.
    mish_d1: Vec<Vec<f64>>,
    mish_d2: Vec<Vec<f64>>,
    mish_d3: Vec<Vec<f64>>,
    output: Vec<Jet2>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Output jets recorded in the forward pass.
    pub fn output(&self) -> &[Jet2] {
        &self.output
    }

    /// Re-runs the recorded layer inputs through `net` and returns the output
    /// jets; equals [`Self::output`] when the tape belongs to `net`.
    pub fn replay(&self, net: &Network) -> Result<Vec<Jet2>, JetNetError> {
        net.check_tape(self)?;
        let last = self.inputs.len() - 1;
        let (w, b) = net.layer(last);
        let out = affine(self.inputs[last].view(), w, b, self.batch);
        Ok(unstack_output(&out, Rows { batch: self.batch, full: self.full }))
    }
}

/// A fixed-topology feed-forward network with Mish hidden activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    shapes: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    params: ParamVector,
}

impl Network {
    /// Builds a network with Glorot-uniform weights and uniform biases.
    pub fn new(config: NetworkConfig) -> Result<Self, JetNetError> {
        let params = init_params(&config)?;
        Self::from_params(config, params)
    }

    pub fn from_params(config: NetworkConfig, params: ParamVector) -> Result<Self, JetNetError> {
        config.validate()?;
        let shapes = config.layer_shapes();
        let expected = config.param_count();
        if params.len() != expected {
            return Err(JetNetError::ParamLength {
                expected,
                actual: params.len(),
            });
        }
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for &(fan_in, fan_out) in &shapes {
            offsets.push(off);
            off += fan_in * fan_out + fan_out;
        }
        Ok(Self {
            config,
            shapes,
            offsets,
            params,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn num_layers(&self) -> usize {
        self.shapes.len()
    }

    /// Weight (`fan_out x fan_in`) and bias views of layer `l`.
    pub fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, &[f64]) {
        let (fan_in, fan_out) = self.shapes[l];
        let off = self.offsets[l];
        let w = ArrayView2::from_shape((fan_out, fan_in), &self.params.0[off..off + fan_in * fan_out])
            .expect("layer layout");
        let b = &self.params.0[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
        (w, b)
    }

    /// Jets at a single point.
    pub fn forward_jet(&self, tau: f64, z: f64) -> Jet2 {
        self.run(&[(tau, z)], 1, false).0[0]
    }

    /// Jets over a batch, without recording a tape.
    pub fn forward_batch(&self, points: &[(f64, f64)]) -> Vec<Jet2> {
        self.run(points, points.len(), false).0
    }

    /// Jets over a batch plus the tape for [`Self::backward`].
    pub fn forward_tape(&self, points: &[(f64, f64)]) -> (Vec<Jet2>, Tape) {
        self.forward_tape_partial(points, points.len())
    }

    /// Like [`Self::forward_tape`], but only the first `full` points get the
    /// `tau` and `zz` lanes; the rest come back with those entries zero and
    /// their adjoints are ignored by [`Self::backward`].
    pub fn forward_tape_partial(&self, points: &[(f64, f64)], full: usize) -> (Vec<Jet2>, Tape) {
        let (jets, tape) = self.run(points, full.min(points.len()), true);
        (jets, tape.expect("tape requested"))
    }

    fn run(&self, points: &[(f64, f64)], full: usize, record: bool) -> (Vec<Jet2>, Option<Tape>) {
        let batch = points.len();
        let rows = Rows { batch, full };
        let [s_tau, s_z] = self.config.input_scale;
        let mut h = Array2::<f64>::zeros((rows.total(), INPUT_DIM));
        for (i, &(tau, z)) in points.iter().enumerate() {
            h[[i, 0]] = s_tau * tau;
            h[[i, 1]] = s_z * z;
            if i < full {
                h[[rows.tau() + i, 0]] = s_tau;
            }
            h[[rows.z() + i, 1]] = s_z;
        }
        let hidden = self.num_layers() - 1;
        let mut tape = record.then(|| Tape {
            batch,
            full,
            shapes: self.shapes.clone(),
            inputs: Vec::with_capacity(hidden + 1),
            pre_activations: Vec::with_capacity(hidden),
            mish_d1: Vec::with_capacity(hidden),
            mish_d2: Vec::with_capacity(hidden),
            mish_d3: Vec::with_capacity(hidden),
            output: Vec::new(),
        });
        for l in 0..hidden {
            let (w, b) = self.layer(l);
            let a = affine(h.view(), w, b, batch);
            let width = a.ncols();
            let n = batch * width;
            let nf = full * width;
            let mut next = Array2::<f64>::zeros(a.raw_dim());
            let mut d1 = vec![0.0; n];
            let mut d2 = vec![0.0; n];
            let mut d3 = vec![0.0; n];
            {
                let src = a.as_slice().expect("standard layout");
                let (av, rest) = src.split_at(n);
                let (at, rest) = rest.split_at(nf);
                let (az, azz) = rest.split_at(n);
                let dst = next.as_slice_mut().expect("standard layout");
                let (nv, rest) = dst.split_at_mut(n);
                let (nt, rest) = rest.split_at_mut(nf);
                let (nz, nzz) = rest.split_at_mut(n);
                for e in 0..n {
                    let mj = mish_jet(av[e]);
                    nv[e] = mj.m;
                    nz[e] = mj.d1 * az[e];
                    d1[e] = mj.d1;
                    d2[e] = mj.d2;
                    d3[e] = mj.d3;
                }
                for e in 0..nf {
                    nt[e] = d1[e] * at[e];
                    nzz[e] = d1[e] * azz[e] + d2[e] * az[e] * az[e];
                }
            }
            if let Some(t) = tape.as_mut() {
                t.inputs.push(h);
                t.pre_activations.push(a);
                t.mish_d1.push(d1);
                t.mish_d2.push(d2);
                t.mish_d3.push(d3);
            }
            h = next;
        }
        let (w, b) = self.layer(hidden);
        let out = affine(h.view(), w, b, batch);
        let jets = unstack_output(&out, rows);
        if let Some(t) = tape.as_mut() {
            t.inputs.push(h);
            t.output = jets.clone();
        }
        (jets, tape)
    }

    fn check_tape(&self, tape: &Tape) -> Result<(), JetNetError> {
        if tape.shapes != self.shapes {
            return Err(JetNetError::TapeMismatch(format!(
                "tape layers {:?} vs network layers {:?}",
                tape.shapes, self.shapes
            )));
        }
        if tape.inputs.len() != self.shapes.len() {
            return Err(JetNetError::TapeMismatch("incomplete tape".into()));
        }
        Ok(())
    }

    /// Reverse pass: given `d loss / d jet` for every point of the taped batch,
    /// returns `d loss / d params` in canonical layout.
    pub fn backward(&self, tape: &Tape, seeds: &[Jet2]) -> Result<ParamVector, JetNetError> {
        self.check_tape(tape)?;
        let batch = tape.batch;
        if seeds.len() != batch {
            return Err(JetNetError::TapeMismatch(format!(
                "{} adjoint seeds for a batch of {batch}",
                seeds.len()
            )));
        }
        let rows = Rows { batch, full: tape.full };
        let mut grad = ParamVector::zeros(self.params.len());
        let mut g = Array2::<f64>::zeros((rows.total(), OUTPUT_DIM));
        for (i, s) in seeds.iter().enumerate() {
            g[[i, 0]] = s.val;
            g[[rows.z() + i, 0]] = s.d_z;
            if i < rows.full {
                g[[rows.tau() + i, 0]] = s.d_tau;
                g[[rows.zz() + i, 0]] = s.d_zz;
            }
        }
        for l in (0..self.num_layers()).rev() {
            let (fan_in, fan_out) = self.shapes[l];
            let off = self.offsets[l];
            {
                let (gw, gb) = grad.0[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                let mut gw = ArrayViewMut2::from_shape((fan_out, fan_in), gw).expect("layer layout");
                gw += &g.t().dot(&tape.inputs[l]);
                let val_rows = g.slice(s![0..batch, ..]).sum_axis(Axis(0));
                for (dst, src) in gb.iter_mut().zip(val_rows.iter()) {
                    *dst += src;
                }
            }
            if l == 0 {
                break;
            }
            let (w, _) = self.layer(l);
            let dh = g.dot(&w);
            g = mish_backward(&dh, tape, l - 1);
        }
        Ok(grad)
    }
}

impl JetField for Network {
    fn jets(&self, points: &[(f64, f64)]) -> Vec<Jet2> {
        self.forward_batch(points)
    }
}

/// Stacked affine map; the bias enters the value lane only.
fn affine(h: ArrayView2<'_, f64>, w: ArrayView2<'_, f64>, b: &[f64], batch: usize) -> Array2<f64> {
    let mut a = h.dot(&w.t());
    for mut row in a.slice_mut(s![0..batch, ..]).rows_mut() {
        for (x, bias) in row.iter_mut().zip(b) {
            *x += bias;
        }
    }
    a
}

/// Row offsets of the lane blocks for `batch` points, `full` of them with
/// every lane.
#[derive(Debug, Clone, Copy)]
struct Rows {
    batch: usize,
    full: usize,
}

impl Rows {
    fn tau(&self) -> usize {
        self.batch
    }
    fn z(&self) -> usize {
        self.batch + self.full
    }
    fn zz(&self) -> usize {
        2 * self.batch + self.full
    }
    fn total(&self) -> usize {
        2 * (self.batch + self.full)
    }
}

fn unstack_output(out: &Array2<f64>, rows: Rows) -> Vec<Jet2> {
    (0..rows.batch)
        .map(|i| {
            let (d_tau, d_zz) = if i < rows.full {
                (out[[rows.tau() + i, 0]], out[[rows.zz() + i, 0]])
            } else {
                (0.0, 0.0)
            };
            Jet2::new(out[[i, 0]], d_tau, out[[rows.z() + i, 0]], d_zz)
        })
        .collect()
}

/// Adjoint of the lane-mixing Mish layer `l`.
fn mish_backward(dh: &Array2<f64>, tape: &Tape, l: usize) -> Array2<f64> {
    let n = tape.batch * dh.ncols();
    let nf = tape.full * dh.ncols();
    let (d1, d2, d3) = (&tape.mish_d1[l], &tape.mish_d2[l], &tape.mish_d3[l]);
    let src = tape.pre_activations[l].as_slice().expect("standard layout");
    let (at, az, azz) = (&src[n..n + nf], &src[n + nf..2 * n + nf], &src[2 * n + nf..]);
    let adj = dh.as_slice().expect("standard layout");
    let (hv, ht, hz, hzz) = (&adj[..n], &adj[n..n + nf], &adj[n + nf..2 * n + nf], &adj[2 * n + nf..]);
    let mut g = Array2::<f64>::zeros(dh.raw_dim());
    let dst = g.as_slice_mut().expect("standard layout");
    let (gv, rest) = dst.split_at_mut(n);
    let (gt, rest) = rest.split_at_mut(nf);
    let (gz, gzz) = rest.split_at_mut(n);
    for e in 0..n {
        let (m1, m2) = (d1[e], d2[e]);
        gv[e] = hv[e] * m1 + hz[e] * m2 * az[e];
        gz[e] = hz[e] * m1;
    }
    for e in 0..nf {
        let (m1, m2, m3) = (d1[e], d2[e], d3[e]);
        gv[e] += ht[e] * m2 * at[e] + hzz[e] * (m2 * azz[e] + m3 * az[e] * az[e]);
        gt[e] = ht[e] * m1;
        gz[e] += 2.0 * hzz[e] * m2 * az[e];
        gzz[e] = hzz[e] * m1;
    }
    g
}

/// Glorot-uniform weights on `+-sqrt(6 / (fan_in + fan_out))`, biases on `+-1/sqrt(fan_in)`,
/// drawn from a ChaCha stream seeded by `config.seed`.
pub fn init_params(config: &NetworkConfig) -> Result<ParamVector, JetNetError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = Vec::with_capacity(config.param_count());
    for (fan_in, fan_out) in config.layer_shapes() {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        params.extend((0..fan_in * fan_out).map(|_| dist.sample(&mut rng)));
        // nonzero biases spread the activation bends across the input range
        let b = 1.0 / (fan_in as f64).sqrt();
        let bias = Uniform::new_inclusive(-b, b).expect("finite limit");
        params.extend((0..fan_out).map(|_| bias.sample(&mut rng)));
    }
    Ok(ParamVector(params))
}
