//! Monte-Carlo estimators of the scaled DGM loss and of the fractional
//! boundary-regularised loss, plus the training-point sampler.
//!
//! Every component is computed from output jets alone, so the same code
//! produces the loss value and its adjoint with respect to each jet. The
//! network reverse pass turns those adjoints into parameter gradients.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jetnet::{Jet2, JetField, JetNetError, Network, ParamVector};
use crate::market::{DerivedConstants, Payoff};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("fractional norm needs at least 2 lateral samples, got {0}")]
    TooFewLateral(usize),
    #[error("every lateral pair is closer than the singularity guard {delta:e}")]
    AllPairsExcluded { delta: f64 },
    #[error("{0} batch is empty")]
    EmptyBatch(&'static str),
    #[error(transparent)]
    Network(#[from] JetNetError),
}

/// Which training objective to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Interior residual plus L2 parabolic-boundary mismatch.
    Dgm,
    /// DGM plus H1 bottom and fractional Sobolev lateral norms.
    Fbr,
}

impl LossKind {
    pub fn label(&self) -> &'static str {
        match self {
            LossKind::Dgm => "DGM",
            LossKind::Fbr => "FBR-DGM",
        }
    }
}

/// Truncated computational domain in `(tau, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    /// Training half-width in `z`.
    pub c_z: f64,
    /// Transformed horizon `theta^2 T / 2`.
    pub tau_max: f64,
    /// Evaluation half-width in `z`.
    pub c_z_eval: f64,
}

impl DomainSpec {
    pub fn new(c_z: f64, tau_max: f64, c_z_eval: f64) -> Result<Self, LossError> {
        let spec = Self {
            c_z,
            tau_max,
            c_z_eval,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Training band 1.5, evaluation band 1.0.
    pub fn standard(consts: &DerivedConstants) -> Self {
        Self {
            c_z: 1.5,
            tau_max: consts.tau_max,
            c_z_eval: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.tau_max > 0.0 && self.tau_max.is_finite()) {
            return Err(LossError::InvalidDomain(format!("tau_max = {}", self.tau_max)));
        }
        if !(self.c_z_eval > 0.0 && self.c_z_eval < self.c_z && self.c_z.is_finite()) {
            return Err(LossError::InvalidDomain(format!(
                "need 0 < c_z_eval < c_z, got c_z_eval = {}, c_z = {}",
                self.c_z_eval, self.c_z
            )));
        }
        Ok(())
    }
}

/// Points drawn per epoch for each part of the domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSizes {
    pub interior: usize,
    /// Bottom points, drawn once for the L2 term and once for the H1 term.
    pub bottom: usize,
    /// `tau` samples per lateral wall; both walls share them.
    pub lateral: usize,
}

impl BatchSizes {
    pub const PAPER: BatchSizes = BatchSizes {
        interior: 5096,
        bottom: 2048,
        lateral: 1024,
    };
    pub const DESK: BatchSizes = BatchSizes {
        interior: 1024,
        bottom: 512,
        lateral: 256,
    };
}

/// One epoch's training points.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `(tau, z)` inside the domain, `z` truncated-normal.
    pub interior: Vec<(f64, f64)>,
    /// `z` at `tau = 0`, truncated-normal, for the L2 boundary term.
    pub bottom: Vec<f64>,
    /// `z` at `tau = 0`, uniform, for the H1 bottom term.
    pub bottom_uniform: Vec<f64>,
    /// `tau` samples evaluated at both `z = +c_z` and `z = -c_z`.
    pub lateral: Vec<f64>,
}

/// Draws a batch: `tau ~ U(0, tau_max)`, DGM-term `z` from a normal with
/// `sd = c_z / 3` truncated to `(-c_z, c_z)`, H1-term `z ~ U(-c_z, c_z)`.
pub fn sample_batch<R: Rng + ?Sized>(spec: &DomainSpec, sizes: &BatchSizes, rng: &mut R) -> Batch {
    let tau_dist = Uniform::new(0.0, spec.tau_max).expect("tau_max > 0");
    let z_uniform = Uniform::new(-spec.c_z, spec.c_z).expect("c_z > 0");
    let normal = Normal::new(0.0, spec.c_z / 3.0).expect("c_z > 0");
    let truncated = |rng: &mut R| loop {
        let z: f64 = normal.sample(rng);
        if z.abs() < spec.c_z {
            break z;
        }
    };
    let interior = (0..sizes.interior)
        .map(|_| {
            let tau = tau_dist.sample(rng);
            (tau, truncated(rng))
        })
        .collect();
    let bottom = (0..sizes.bottom).map(|_| truncated(rng)).collect();
    let bottom_uniform = (0..sizes.bottom).map(|_| z_uniform.sample(rng)).collect();
    let lateral = (0..sizes.lateral).map(|_| tau_dist.sample(rng)).collect();
    Batch {
        interior,
        bottom,
        bottom_uniform,
        lateral,
    }
}

/// Obstacle `g(z)` and `g'(z)` seen by the loss.
pub trait Obstacle {
    fn eval(&self, z: f64) -> (f64, f64);
}

impl Obstacle for Payoff {
    fn eval(&self, z: f64) -> (f64, f64) {
        self.g(z)
    }
}

impl<F: Fn(f64) -> (f64, f64)> Obstacle for F {
    fn eval(&self, z: f64) -> (f64, f64) {
        self(z)
    }
}

/// Everything the estimators need besides the batch and the jets.
#[derive(Clone, Copy)]
pub struct LossContext<'a> {
    pub consts: DerivedConstants,
    pub domain: DomainSpec,
    pub obstacle: &'a dyn Obstacle,
}

impl<'a> LossContext<'a> {
    pub fn new(consts: DerivedConstants, domain: DomainSpec, obstacle: &'a dyn Obstacle) -> Self {
        Self {
            consts,
            domain,
            obstacle,
        }
    }

    /// `G[f] = f_tau - f_zz + kappa f_z + rho f`.
    pub fn operator(&self, f: &Jet2) -> f64 {
        f.d_tau - f.d_zz + self.consts.kappa * f.d_z + self.consts.rho * f.val
    }

    fn kernel(&self, lateral: usize) -> PairKernel {
        PairKernel::new(self.domain.tau_max, self.domain.c_z, lateral)
    }
}

/// Per-component values of a loss evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub interior_residual: f64,
    pub l2_boundary: f64,
    pub h1_bottom: f64,
    pub frac_32_lateral: f64,
    pub frac_12_lateral: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `(name, value)` for every component, `total` last.
    pub fn components(&self) -> [(&'static str, f64); 6] {
        [
            ("interior_residual", self.interior_residual),
            ("l2_boundary", self.l2_boundary),
            ("h1_bottom", self.h1_bottom),
            ("frac_32_lateral", self.frac_32_lateral),
            ("frac_12_lateral", self.frac_12_lateral),
            ("total", self.total),
        ]
    }

    /// First non-finite component, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.components().iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
    }
}

/// Double-integral estimator settings on the lateral boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairKernel {
    pub tau_max: f64,
    pub c_z: f64,
    /// Pairs closer than this in `tau` are excluded.
    pub delta: f64,
}

impl PairKernel {
    /// Guard `delta = tau_max / (4 n)` for `n` lateral samples.
    pub fn new(tau_max: f64, c_z: f64, lateral: usize) -> Self {
        Self {
            tau_max,
            c_z,
            delta: tau_max / (4.0 * lateral.max(1) as f64),
        }
    }
}

/// A scalar estimate and its gradient with respect to the two walls' samples.
#[derive(Debug, Clone, PartialEq)]
pub struct WallEstimate {
    pub value: f64,
    pub grad_plus: Vec<f64>,
    pub grad_minus: Vec<f64>,
}

/// Pooled mean of squares over both walls.
fn wall_l2(plus: &[f64], minus: &[f64], est: &mut WallEstimate) {
    let n = (plus.len() + minus.len()) as f64;
    for (i, (&p, &m)) in plus.iter().zip(minus).enumerate() {
        est.value += (p * p + m * m) / n;
        est.grad_plus[i] += 2.0 * p / n;
        est.grad_minus[i] += 2.0 * m / n;
    }
}

/// U-statistic over ordered off-diagonal pairs of
/// `(|d+_i - d+_j|^2 + |d-_i - d-_j|^2) / |tau_i - tau_j|^exponent`, scaled by
/// `tau_max^2` so it targets the double integral over `(0, tau_max)^2`.
fn wall_pairs(
    plus: &[f64],
    minus: &[f64],
    taus: &[f64],
    exponent: f64,
    kernel: &PairKernel,
    est: &mut WallEstimate,
) -> Result<(), LossError> {
    let n = taus.len();
    let scale = kernel.tau_max * kernel.tau_max / (n * (n - 1)) as f64;
    let mut included = 0usize;
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let gap = (taus[i] - taus[j]).abs();
            if gap < kernel.delta {
                continue;
            }
            included += 1;
            let w = gap.powf(-exponent);
            let dp = plus[i] - plus[j];
            let dm = minus[i] - minus[j];
            // (i, j) and (j, i) contribute equally.
            sum += 2.0 * w * (dp * dp + dm * dm);
            let cp = 4.0 * w * dp * scale;
            let cm = 4.0 * w * dm * scale;
            est.grad_plus[i] += cp;
            est.grad_plus[j] -= cp;
            est.grad_minus[i] += cm;
            est.grad_minus[j] -= cm;
        }
    }
    if included == 0 {
        return Err(LossError::AllPairsExcluded {
            delta: kernel.delta,
        });
    }
    est.value += sum * scale;
    Ok(())
}

fn check_wall_inputs(plus: &[f64], minus: &[f64], taus: &[f64]) -> Result<(), LossError> {
    assert_eq!(plus.len(), taus.len(), "samples per tau on the + wall");
    assert_eq!(minus.len(), taus.len(), "samples per tau on the - wall");
    if taus.len() < 2 {
        return Err(LossError::TooFewLateral(taus.len()));
    }
    Ok(())
}

/// Squared `H^{3/4,3/2}` lateral norm estimate: L2 part plus the
/// exponent-2.5 Gagliardo term.
pub fn frac_norm_32_with_grad(
    plus: &[f64],
    minus: &[f64],
    taus: &[f64],
    kernel: &PairKernel,
) -> Result<WallEstimate, LossError> {
    check_wall_inputs(plus, minus, taus)?;
    let mut est = WallEstimate {
        value: 0.0,
        grad_plus: vec![0.0; taus.len()],
        grad_minus: vec![0.0; taus.len()],
    };
    wall_l2(plus, minus, &mut est);
    wall_pairs(plus, minus, taus, 2.5, kernel, &mut est)?;
    Ok(est)
}

/// Squared `H^{1/4,1/2}` lateral norm estimate: L2 part, cross-wall term
/// `|d(t,+c) - d(t,-c)|^2 / (4 c^2)` and the exponent-1.5 Gagliardo term.
pub fn frac_norm_12_with_grad(
    plus: &[f64],
    minus: &[f64],
    taus: &[f64],
    kernel: &PairKernel,
) -> Result<WallEstimate, LossError> {
    check_wall_inputs(plus, minus, taus)?;
    let n = taus.len();
    let mut est = WallEstimate {
        value: 0.0,
        grad_plus: vec![0.0; n],
        grad_minus: vec![0.0; n],
    };
    wall_l2(plus, minus, &mut est);
    let denom = 4.0 * kernel.c_z * kernel.c_z * n as f64;
    for i in 0..n {
        let diff = plus[i] - minus[i];
        est.value += diff * diff / denom;
        est.grad_plus[i] += 2.0 * diff / denom;
        est.grad_minus[i] -= 2.0 * diff / denom;
    }
    wall_pairs(plus, minus, taus, 1.5, kernel, &mut est)?;
    Ok(est)
}

pub fn frac_norm_32(plus: &[f64], minus: &[f64], taus: &[f64], kernel: &PairKernel) -> Result<f64, LossError> {
    frac_norm_32_with_grad(plus, minus, taus, kernel).map(|e| e.value)
}

pub fn frac_norm_12(plus: &[f64], minus: &[f64], taus: &[f64], kernel: &PairKernel) -> Result<f64, LossError> {
    frac_norm_12_with_grad(plus, minus, taus, kernel).map(|e| e.value)
}

/// Where each group of a batch lives in the flattened point list.
#[derive(Debug, Clone, Copy)]
struct Layout {
    interior: usize,
    bottom: usize,
    bottom_uniform: usize,
    lateral: usize,
}

impl Layout {
    fn of(batch: &Batch, kind: LossKind) -> Self {
        Self {
            interior: batch.interior.len(),
            bottom: batch.bottom.len(),
            bottom_uniform: if kind == LossKind::Fbr {
                batch.bottom_uniform.len()
            } else {
                0
            },
            lateral: batch.lateral.len(),
        }
    }

    fn bottom_start(&self) -> usize {
        self.interior
    }
    fn uniform_start(&self) -> usize {
        self.bottom_start() + self.bottom
    }
    fn plus_start(&self) -> usize {
        self.uniform_start() + self.bottom_uniform
    }
    fn minus_start(&self) -> usize {
        self.plus_start() + self.lateral
    }
    fn len(&self) -> usize {
        self.minus_start() + self.lateral
    }
}

/// Flattened `(tau, z)` points of a batch: interior, bottom, uniform bottom
/// (FBR only), `+c_z` wall, `-c_z` wall.
pub fn batch_points(batch: &Batch, kind: LossKind, c_z: f64) -> Vec<(f64, f64)> {
    let layout = Layout::of(batch, kind);
    let mut pts = Vec::with_capacity(layout.len());
    pts.extend_from_slice(&batch.interior);
    pts.extend(batch.bottom.iter().map(|&z| (0.0, z)));
    if layout.bottom_uniform > 0 {
        pts.extend(batch.bottom_uniform.iter().map(|&z| (0.0, z)));
    }
    pts.extend(batch.lateral.iter().map(|&t| (t, c_z)));
    pts.extend(batch.lateral.iter().map(|&t| (t, -c_z)));
    pts
}

fn scaled_gap(f: f64, g: f64) -> (f64, f64) {
    let s = 1.0 + g.abs();
    ((f - g) / s, 1.0 / s)
}

fn interior_term(ctx: &LossContext<'_>, pts: &[(f64, f64)], jets: &[Jet2], adj: &mut [Jet2]) -> f64 {
    let n = pts.len() as f64;
    let mut total = 0.0;
    for ((&(_, z), f), a) in pts.iter().zip(jets).zip(adj.iter_mut()) {
        let (g, _) = ctx.obstacle.eval(z);
        let s = 1.0 + g.abs();
        let op = ctx.operator(f);
        let gap = f.val - g;
        let m = op.min(gap);
        total += (m / s).powi(2) / n;
        let c = 2.0 * m / (s * s * n);
        if op <= gap {
            a.val += c * ctx.consts.rho;
            a.d_tau += c;
            a.d_z += c * ctx.consts.kappa;
            a.d_zz -= c;
        } else {
            a.val += c;
        }
    }
    total
}

fn evaluate(
    kind: LossKind,
    ctx: &LossContext<'_>,
    batch: &Batch,
    jets: &[Jet2],
) -> Result<(LossBreakdown, Vec<Jet2>), LossError> {
    let layout = Layout::of(batch, kind);
    assert_eq!(jets.len(), layout.len(), "one jet per batch point");
    if layout.interior == 0 {
        return Err(LossError::EmptyBatch("interior"));
    }
    if layout.bottom + 2 * layout.lateral == 0 {
        return Err(LossError::EmptyBatch("boundary"));
    }
    let c_z = ctx.domain.c_z;
    let mut adj = vec![Jet2::default(); jets.len()];
    let mut out = LossBreakdown {
        interior_residual: interior_term(
            ctx,
            &batch.interior,
            &jets[..layout.interior],
            &mut adj[..layout.interior],
        ),
        ..Default::default()
    };

    // L2 mismatch pooled over bottom and both walls.
    let n_boundary = (layout.bottom + 2 * layout.lateral) as f64;
    let boundary_z = batch
        .bottom
        .iter()
        .enumerate()
        .map(|(i, &z)| (layout.bottom_start() + i, z))
        .chain((0..layout.lateral).map(|i| (layout.plus_start() + i, c_z)))
        .chain((0..layout.lateral).map(|i| (layout.minus_start() + i, -c_z)));
    for (idx, z) in boundary_z {
        let (g, _) = ctx.obstacle.eval(z);
        let (d, ds) = scaled_gap(jets[idx].val, g);
        out.l2_boundary += d * d / n_boundary;
        adj[idx].val += 2.0 * d * ds / n_boundary;
    }

    if kind == LossKind::Fbr {
        if layout.bottom_uniform == 0 {
            return Err(LossError::EmptyBatch("uniform bottom"));
        }
        let nb = layout.bottom_uniform as f64;
        for (i, &z) in batch.bottom_uniform.iter().enumerate() {
            let idx = layout.uniform_start() + i;
            let (g, gp) = ctx.obstacle.eval(z);
            let (d, ds) = scaled_gap(jets[idx].val, g);
            let (e, es) = scaled_gap(jets[idx].d_z, gp);
            out.h1_bottom += (d * d + e * e) / nb;
            adj[idx].val += 2.0 * d * ds / nb;
            adj[idx].d_z += 2.0 * e * es / nb;
        }

        let kernel = ctx.kernel(layout.lateral);
        let (g_plus, gp_plus) = ctx.obstacle.eval(c_z);
        let (g_minus, gp_minus) = ctx.obstacle.eval(-c_z);
        let plus = &jets[layout.plus_start()..layout.minus_start()];
        let minus = &jets[layout.minus_start()..layout.len()];
        let lateral_gap = |wall: &[Jet2], g: f64| -> (Vec<f64>, f64) {
            let s = scaled_gap(0.0, g).1;
            (wall.iter().map(|f| (f.val - g) * s).collect(), s)
        };
        let slope_gap = |wall: &[Jet2], gp: f64| -> (Vec<f64>, f64) {
            let s = scaled_gap(0.0, gp).1;
            (wall.iter().map(|f| (f.d_z - gp) * s).collect(), s)
        };
        let (dp, sp) = lateral_gap(plus, g_plus);
        let (dm, sm) = lateral_gap(minus, g_minus);
        let frac32 = frac_norm_32_with_grad(&dp, &dm, &batch.lateral, &kernel)?;
        let (ep, esp) = slope_gap(plus, gp_plus);
        let (em, esm) = slope_gap(minus, gp_minus);
        let frac12 = frac_norm_12_with_grad(&ep, &em, &batch.lateral, &kernel)?;
        for i in 0..layout.lateral {
            let ip = layout.plus_start() + i;
            let im = layout.minus_start() + i;
            adj[ip].val += frac32.grad_plus[i] * sp;
            adj[im].val += frac32.grad_minus[i] * sm;
            adj[ip].d_z += frac12.grad_plus[i] * esp;
            adj[im].d_z += frac12.grad_minus[i] * esm;
        }
        out.frac_32_lateral = frac32.value;
        out.frac_12_lateral = frac12.value;
    }

    out.total = out.interior_residual + out.l2_boundary + out.h1_bottom + out.frac_32_lateral + out.frac_12_lateral;
    Ok((out, adj))
}

/// Loss value and jet adjoints from precomputed jets at [`batch_points`].
pub fn loss_from_jets(
    kind: LossKind,
    ctx: &LossContext<'_>,
    batch: &Batch,
    jets: &[Jet2],
) -> Result<(LossBreakdown, Vec<Jet2>), LossError> {
    evaluate(kind, ctx, batch, jets)
}

fn loss_of<F: JetField + ?Sized>(
    kind: LossKind,
    field: &F,
    batch: &Batch,
    ctx: &LossContext<'_>,
) -> Result<LossBreakdown, LossError> {
    let jets = field.jets(&batch_points(batch, kind, ctx.domain.c_z));
    Ok(evaluate(kind, ctx, batch, &jets)?.0)
}

/// Scaled DGM loss: interior residual plus L2 parabolic-boundary mismatch.
pub fn loss_j1<F: JetField + ?Sized>(field: &F, batch: &Batch, ctx: &LossContext<'_>) -> Result<LossBreakdown, LossError> {
    loss_of(LossKind::Dgm, field, batch, ctx)
}

/// Scaled FBR loss: DGM terms plus H1 bottom and both fractional lateral norms.
pub fn loss_j2<F: JetField + ?Sized>(field: &F, batch: &Batch, ctx: &LossContext<'_>) -> Result<LossBreakdown, LossError> {
    loss_of(LossKind::Fbr, field, batch, ctx)
}

/// Mean of `[min{G[f], f - g} / (1 + |g|)]^2` over interior points.
pub fn interior_residual<F: JetField + ?Sized>(field: &F, batch: &Batch, ctx: &LossContext<'_>) -> Result<f64, LossError> {
    if batch.interior.is_empty() {
        return Err(LossError::EmptyBatch("interior"));
    }
    let jets = field.jets(&batch.interior);
    let mut scratch = vec![Jet2::default(); jets.len()];
    Ok(interior_term(ctx, &batch.interior, &jets, &mut scratch))
}

/// Mean of `[(f - g) / (1 + |g|)]^2` over bottom and lateral points.
pub fn l2_parabolic_boundary<F: JetField + ?Sized>(field: &F, batch: &Batch, ctx: &LossContext<'_>) -> Result<f64, LossError> {
    Ok(loss_j1(field, batch, ctx)?.l2_boundary)
}

/// Scaled H1 mismatch at `tau = 0` over the uniform bottom points.
pub fn h1_bottom<F: JetField + ?Sized>(field: &F, batch: &Batch, ctx: &LossContext<'_>) -> Result<f64, LossError> {
    if batch.bottom_uniform.is_empty() {
        return Err(LossError::EmptyBatch("uniform bottom"));
    }
    let pts: Vec<_> = batch.bottom_uniform.iter().map(|&z| (0.0, z)).collect();
    let jets = field.jets(&pts);
    let n = pts.len() as f64;
    Ok(batch
        .bottom_uniform
        .iter()
        .zip(&jets)
        .map(|(&z, f)| {
            let (g, gp) = ctx.obstacle.eval(z);
            let d = scaled_gap(f.val, g).0;
            let e = scaled_gap(f.d_z, gp).0;
            (d * d + e * e) / n
        })
        .sum())
}

/// Loss and its parameter gradient for one batch.
pub fn loss_and_gradient(
    kind: LossKind,
    net: &Network,
    batch: &Batch,
    ctx: &LossContext<'_>,
) -> Result<(LossBreakdown, ParamVector), LossError> {
    let pts = batch_points(batch, kind, ctx.domain.c_z);
    // only interior points feed the operator, which needs the tau and zz lanes
    let (jets, tape) = net.forward_tape_partial(&pts, batch.interior.len());
    let (loss, adj) = evaluate(kind, ctx, batch, &jets)?;
    let grad = net.backward(&tape, &adj)?;
    Ok((loss, grad))
}
