//! Conditional normalizing flow over flattened ray bundles.
//!
//! Each step is actnorm, an LU-parameterized invertible linear map, and an
//! affine coupling whose conditioner sees the kept half and the condition
//! vector. Gradients are hand-derived; every layer exposes `forward`,
//! `inverse` and a backward pass that accumulates into a zero-initialized
//! copy of the parameters.
//!
//! Flat parameter order (used by Adam and for finite-difference checks), per
//! step in order: actnorm `log_scale`, `bias`; mixing `lower`, `upper`,
//! `log_diag`; coupling `w1`, `b1`, `w2`, `b2`. Mixing `perm` and `sign` are
//! fixed at initialization.

use std::f64::consts::{LN_2, PI};
use std::path::Path;

use log::{debug, warn};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adam::Adam;
use crate::error::{Error, Result};
use crate::grouping::Cluster;
use crate::projection::{rep25d_from_2d, Intrinsics, Keypoints2D, Rep25D};

/// Coupling log-scales are squashed into (−ln 4, ln 4).
const LOG_SCALE_BOUND: f64 = 2.0 * LN_2;
const ACTNORM_MIN_STD: f64 = 1e-4;
const CHECKPOINT_FORMAT: &str = "hoi-flow";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub depth: usize,
    pub width: usize,
    pub input_dim: usize,
    pub cond_dim: usize,
    pub dequant_sigma: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rng_seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            depth: 8,
            width: 64,
            input_dim: 93,
            cond_dim: 60,
            dequant_sigma: 0.01,
            lr: 1e-4,
            epochs: 30,
            batch_size: 16,
            rng_seed: 0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "depth, width, epochs and batch_size must be positive".into(),
            ));
        }
        if self.input_dim < 2 {
            return Err(Error::InvalidConfig(
                "input_dim must be at least 2 for coupling".into(),
            ));
        }
        if !(self.dequant_sigma >= 0.0 && self.lr >= 0.0) {
            return Err(Error::InvalidConfig(
                "dequant_sigma and lr must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConditionVector {
    pub values: Vec<f64>,
}

impl ConditionVector {
    pub fn new(values: Vec<f64>) -> Self {
        ConditionVector { values }
    }
}

/// Default per-image descriptor: 2D keypoints divided by half the larger image side.
pub fn condition_from_keypoints(kps: &Keypoints2D, intr: &Intrinsics) -> ConditionVector {
    let half = 0.5 * intr.width.max(intr.height) as f64;
    ConditionVector {
        values: kps
            .points
            .iter()
            .flat_map(|p| [p[0] / half, p[1] / half])
            .collect(),
    }
}

fn check_finite(v: &[f64], what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// `y = exp(log_scale) ⊙ (x + bias)`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActNorm {
    pub log_scale: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ActNorm {
    pub fn identity(d: usize) -> Self {
        ActNorm {
            log_scale: vec![0.0; d],
            bias: vec![0.0; d],
        }
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let y = x
            .iter()
            .zip(&self.bias)
            .zip(&self.log_scale)
            .map(|((x, b), ls)| ls.exp() * (x + b))
            .collect();
        (y, self.log_scale.iter().sum())
    }

    pub fn inverse(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(&self.bias)
            .zip(&self.log_scale)
            .map(|((y, b), ls)| y * (-ls).exp() - b)
            .collect()
    }

    /// Sets bias and scale so `xs` map to zero mean and unit variance per dimension.
    pub fn init_from(&mut self, xs: &[Vec<f64>]) {
        let n = xs.len() as f64;
        for i in 0..self.bias.len() {
            let mean = xs.iter().map(|x| x[i]).sum::<f64>() / n;
            let var = xs.iter().map(|x| (x[i] - mean).powi(2)).sum::<f64>() / n;
            self.bias[i] = -mean;
            self.log_scale[i] = -var.sqrt().max(ACTNORM_MIN_STD).ln();
        }
    }

    fn backward(&self, y: &[f64], gy: &[f64], c_ld: f64, grad: &mut ActNorm) -> Vec<f64> {
        let mut gx = vec![0.0; y.len()];
        for i in 0..y.len() {
            let s = self.log_scale[i].exp();
            gx[i] = gy[i] * s;
            grad.bias[i] += gy[i] * s;
            grad.log_scale[i] += gy[i] * y[i] + c_ld;
        }
        gx
    }
}

/// Invertible linear map `y = P·L·(U + diag(sign·exp(log_diag)))·x`.
///
/// `lower` and `upper` are full row-major d×d buffers of which only the strict
/// lower and strict upper parts are read; `L` has a unit diagonal. The
/// permutation is stored as `y[i] = c[perm[i]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixing {
    pub perm: Vec<usize>,
    pub sign: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub log_diag: Vec<f64>,
}

impl Mixing {
    pub fn identity(d: usize) -> Self {
        Mixing {
            perm: (0..d).collect(),
            sign: vec![1.0; d],
            lower: vec![0.0; d * d],
            upper: vec![0.0; d * d],
            log_diag: vec![0.0; d],
        }
    }

    /// LU factorization of a random orthogonal matrix.
    pub fn random_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let g = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
        let q = g.qr().q();
        let lu = q.lu();
        let (l, u) = (lu.l(), lu.u());
        let mut pm = DMatrix::<f64>::identity(d, d);
        lu.p().permute_rows(&mut pm);
        // pm·q = l·u, so q = pmᵀ·l·u
        let perm = (0..d)
            .map(|i| {
                (0..d)
                    .find(|&j| pm[(j, i)] == 1.0)
                    .expect("permutation matrix")
            })
            .collect();
        let mut m = Mixing::identity(d);
        m.perm = perm;
        for i in 0..d {
            for j in 0..d {
                if i > j {
                    m.lower[i * d + j] = l[(i, j)];
                } else if i < j {
                    m.upper[i * d + j] = u[(i, j)];
                }
            }
            m.sign[i] = if u[(i, i)] < 0.0 { -1.0 } else { 1.0 };
            m.log_diag[i] = u[(i, i)].abs().ln();
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    fn diag(&self, i: usize) -> f64 {
        self.sign[i] * self.log_diag[i].exp()
    }

    fn upper_apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|i| {
                self.diag(i) * x[i]
                    + (i + 1..d)
                        .map(|j| self.upper[i * d + j] * x[j])
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let d = self.dim();
        let a = self.upper_apply(x);
        let c: Vec<f64> = (0..d)
            .map(|i| a[i] + (0..i).map(|j| self.lower[i * d + j] * a[j]).sum::<f64>())
            .collect();
        let y = self.perm.iter().map(|&p| c[p]).collect();
        (y, self.log_diag.iter().sum())
    }

    pub fn inverse(&self, y: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut c = vec![0.0; d];
        for (i, &p) in self.perm.iter().enumerate() {
            c[p] = y[i];
        }
        let mut a = vec![0.0; d];
        for i in 0..d {
            a[i] = c[i] - (0..i).map(|j| self.lower[i * d + j] * a[j]).sum::<f64>();
        }
        let mut x = vec![0.0; d];
        for i in (0..d).rev() {
            let rest: f64 = (i + 1..d).map(|j| self.upper[i * d + j] * x[j]).sum();
            x[i] = (a[i] - rest) / self.diag(i);
        }
        x
    }

    /// The dense matrix `W` with `y = W x`.
    pub fn matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |r, c| {
            let mut e = vec![0.0; d];
            e[c] = 1.0;
            self.forward(&e).0[r]
        })
    }

    fn backward(&self, x: &[f64], gy: &[f64], c_ld: f64, grad: &mut Mixing) -> Vec<f64> {
        let d = self.dim();
        let a = self.upper_apply(x);
        let mut gc = vec![0.0; d];
        for (i, &p) in self.perm.iter().enumerate() {
            gc[p] = gy[i];
        }
        let mut ga = gc.clone();
        for i in 0..d {
            for j in 0..i {
                grad.lower[i * d + j] += gc[i] * a[j];
                ga[j] += self.lower[i * d + j] * gc[i];
            }
        }
        let mut gx = vec![0.0; d];
        for i in 0..d {
            let di = self.diag(i);
            grad.log_diag[i] += ga[i] * x[i] * di + c_ld;
            gx[i] += di * ga[i];
            for j in i + 1..d {
                grad.upper[i * d + j] += ga[i] * x[j];
                gx[j] += self.upper[i * d + j] * ga[i];
            }
        }
        gx
    }
}

/// Affine coupling: the first `split` coordinates pass through and condition
/// a scale and shift of the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub split: usize,
    pub cond_dim: usize,
    pub width: usize,
    /// width × (split + cond_dim), row-major
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// 2·(d − split) × width, row-major; log-scale rows first
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

struct CouplingCache {
    h: Vec<f64>,
    raw: Vec<f64>,
}

impl Coupling {
    pub fn new<R: Rng + ?Sized>(d: usize, cond_dim: usize, width: usize, rng: &mut R) -> Self {
        let split = d.div_ceil(2);
        let fan_in = split + cond_dim;
        let std = 1.0 / (fan_in as f64).sqrt();
        let hb = d - split;
        Coupling {
            split,
            cond_dim,
            width,
            w1: (0..width * fan_in)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            b1: vec![0.0; width],
            w2: vec![0.0; 2 * hb * width],
            b2: vec![0.0; 2 * hb],
        }
    }

    fn conditioner(&self, xa: &[f64], f: &[f64]) -> CouplingCache {
        let fan_in = self.split + self.cond_dim;
        let h: Vec<f64> = (0..self.width)
            .map(|k| {
                let row = &self.w1[k * fan_in..(k + 1) * fan_in];
                let pre = self.b1[k]
                    + row[..self.split]
                        .iter()
                        .zip(xa)
                        .map(|(w, x)| w * x)
                        .sum::<f64>()
                    + row[self.split..]
                        .iter()
                        .zip(f)
                        .map(|(w, x)| w * x)
                        .sum::<f64>();
                pre.tanh()
            })
            .collect();
        let raw = (0..self.b2.len())
            .map(|r| {
                let row = &self.w2[r * self.width..(r + 1) * self.width];
                self.b2[r] + row.iter().zip(&h).map(|(w, h)| w * h).sum::<f64>()
            })
            .collect();
        CouplingCache { h, raw }
    }

    fn log_scale(raw: f64) -> f64 {
        LOG_SCALE_BOUND * (raw / LOG_SCALE_BOUND).tanh()
    }

    fn forward_cached(&self, x: &[f64], f: &[f64]) -> (Vec<f64>, f64, CouplingCache) {
        let cache = self.conditioner(&x[..self.split], f);
        let hb = x.len() - self.split;
        let mut y = x.to_vec();
        let mut ld = 0.0;
        for i in 0..hb {
            let ls = Self::log_scale(cache.raw[i]);
            y[self.split + i] = x[self.split + i] * ls.exp() + cache.raw[hb + i];
            ld += ls;
        }
        (y, ld, cache)
    }

    pub fn forward(&self, x: &[f64], f: &[f64]) -> (Vec<f64>, f64) {
        let (y, ld, _) = self.forward_cached(x, f);
        (y, ld)
    }

    pub fn inverse(&self, y: &[f64], f: &[f64]) -> Vec<f64> {
        let cache = self.conditioner(&y[..self.split], f);
        let hb = y.len() - self.split;
        let mut x = y.to_vec();
        for i in 0..hb {
            let ls = Self::log_scale(cache.raw[i]);
            x[self.split + i] = (y[self.split + i] - cache.raw[hb + i]) * (-ls).exp();
        }
        x
    }

    fn backward(
        &self,
        x: &[f64],
        f: &[f64],
        cache: &CouplingCache,
        gy: &[f64],
        c_ld: f64,
        grad: &mut Coupling,
    ) -> Vec<f64> {
        let (sp, w) = (self.split, self.width);
        let hb = x.len() - sp;
        let fan_in = sp + self.cond_dim;
        let mut gx = gy.to_vec();
        let mut g_raw = vec![0.0; 2 * hb];
        for i in 0..hb {
            let t = (cache.raw[i] / LOG_SCALE_BOUND).tanh();
            let e = (LOG_SCALE_BOUND * t).exp();
            gx[sp + i] = gy[sp + i] * e;
            let g_ls = gy[sp + i] * x[sp + i] * e + c_ld;
            g_raw[i] = g_ls * (1.0 - t * t);
            g_raw[hb + i] = gy[sp + i];
        }
        let mut gh = vec![0.0; w];
        for (r, &g) in g_raw.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.b2[r] += g;
            let row = r * w;
            for k in 0..w {
                grad.w2[row + k] += g * cache.h[k];
                gh[k] += self.w2[row + k] * g;
            }
        }
        for k in 0..w {
            let gpre = gh[k] * (1.0 - cache.h[k] * cache.h[k]);
            if gpre == 0.0 {
                continue;
            }
            grad.b1[k] += gpre;
            let row = k * fan_in;
            for j in 0..sp {
                grad.w1[row + j] += gpre * x[j];
                gx[j] += self.w1[row + j] * gpre;
            }
            for j in 0..self.cond_dim {
                grad.w1[row + sp + j] += gpre * f[j];
            }
        }
        gx
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowStep {
    pub actnorm: ActNorm,
    pub mixing: Mixing,
    pub coupling: Coupling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    pub config: FlowConfig,
    pub steps: Vec<FlowStep>,
}

struct StepTrace {
    act_out: Vec<f64>,
    mix_out: Vec<f64>,
    coupling: CouplingCache,
}

struct Trace {
    steps: Vec<StepTrace>,
    z: Vec<f64>,
    log_det: f64,
}

impl FlowParams {
    /// Identity actnorm, random orthogonal mixing, zero-output couplings.
    pub fn new(config: &FlowConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let d = config.input_dim;
        let steps = (0..config.depth)
            .map(|_| FlowStep {
                actnorm: ActNorm::identity(d),
                mixing: Mixing::random_orthogonal(d, &mut rng),
                coupling: Coupling::new(d, config.cond_dim, config.width, &mut rng),
            })
            .collect();
        Ok(FlowParams {
            config: config.clone(),
            steps,
        })
    }

    /// Same shapes, every trainable value zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for b in z.blocks_mut() {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn blocks(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::with_capacity(self.steps.len() * 9);
        for s in &self.steps {
            out.extend([
                &s.actnorm.log_scale,
                &s.actnorm.bias,
                &s.mixing.lower,
                &s.mixing.upper,
                &s.mixing.log_diag,
                &s.coupling.w1,
                &s.coupling.b1,
                &s.coupling.w2,
                &s.coupling.b2,
            ]);
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::with_capacity(self.steps.len() * 9);
        for s in &mut self.steps {
            out.extend([
                &mut s.actnorm.log_scale,
                &mut s.actnorm.bias,
                &mut s.mixing.lower,
                &mut s.mixing.upper,
                &mut s.mixing.log_diag,
                &mut s.coupling.w1,
                &mut s.coupling.b1,
                &mut s.coupling.w2,
                &mut s.coupling.b2,
            ]);
        }
        out
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks().into_iter().flatten().copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for b in self.blocks_mut() {
            let n = b.len();
            b.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter length");
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    fn check_dims(&self, x: &[f64], f: &ConditionVector) -> Result<()> {
        if x.len() != self.config.input_dim {
            return Err(Error::DimensionMismatch {
                what: "flow input",
                expected: self.config.input_dim,
                got: x.len(),
            });
        }
        if f.values.len() != self.config.cond_dim {
            return Err(Error::DimensionMismatch {
                what: "condition",
                expected: self.config.cond_dim,
                got: f.values.len(),
            });
        }
        Ok(())
    }

    fn trace(&self, x: &[f64], f: &[f64]) -> Trace {
        let mut cur = x.to_vec();
        let mut log_det = 0.0;
        let mut steps = Vec::with_capacity(self.steps.len());
        for s in &self.steps {
            let (a, l1) = s.actnorm.forward(&cur);
            let (m, l2) = s.mixing.forward(&a);
            let (c, l3, cache) = s.coupling.forward_cached(&m, f);
            log_det += l1 + l2 + l3;
            steps.push(StepTrace {
                act_out: a,
                mix_out: m,
                coupling: cache,
            });
            cur = c;
        }
        Trace {
            steps,
            z: cur,
            log_det,
        }
    }

    /// Back-propagates `gz` (gradient of the loss w.r.t. z) with `c_ld` the
    /// loss coefficient of log_det; returns the gradient w.r.t. x.
    fn backward(
        &self,
        tr: &Trace,
        f: &[f64],
        gz: &[f64],
        c_ld: f64,
        grad: &mut FlowParams,
    ) -> Vec<f64> {
        let mut g = gz.to_vec();
        for ((s, st), gs) in self
            .steps
            .iter()
            .zip(&tr.steps)
            .zip(grad.steps.iter_mut())
            .rev()
        {
            g = s
                .coupling
                .backward(&st.mix_out, f, &st.coupling, &g, c_ld, &mut gs.coupling);
            g = s.mixing.backward(&st.act_out, &g, c_ld, &mut gs.mixing);
            g = s.actnorm.backward(&st.act_out, &g, c_ld, &mut gs.actnorm);
        }
        g
    }

    /// `z = F(x; f)` and `log|det ∂F/∂x|`.
    pub fn forward(&self, x: &[f64], f: &ConditionVector) -> Result<(Vec<f64>, f64)> {
        self.check_dims(x, f)?;
        let tr = self.trace(x, &f.values);
        check_finite(&tr.z, "flow forward")?;
        if !tr.log_det.is_finite() {
            return Err(Error::NonFinite("flow log-det"));
        }
        Ok((tr.z, tr.log_det))
    }

    pub fn inverse(&self, z: &[f64], f: &ConditionVector) -> Result<Vec<f64>> {
        self.check_dims(z, f)?;
        let mut cur = z.to_vec();
        for s in self.steps.iter().rev() {
            cur = s.coupling.inverse(&cur, &f.values);
            cur = s.mixing.inverse(&cur);
            cur = s.actnorm.inverse(&cur);
        }
        check_finite(&cur, "flow inverse")?;
        Ok(cur)
    }

    pub fn log_prob_flat(&self, x: &[f64], f: &ConditionVector) -> Result<f64> {
        let (z, ld) = self.forward(x, f)?;
        Ok(standard_normal_log_density(&z) + ld)
    }

    pub fn log_prob(&self, x25: &Rep25D, f: &ConditionVector) -> Result<f64> {
        self.log_prob_flat(&x25.flatten(), f)
    }

    /// Log-density and its gradient w.r.t. the flattened input.
    pub fn log_prob_grad(&self, x: &[f64], f: &ConditionVector) -> Result<(f64, Vec<f64>)> {
        self.check_dims(x, f)?;
        let tr = self.trace(x, &f.values);
        check_finite(&tr.z, "flow forward")?;
        let lp = standard_normal_log_density(&tr.z) + tr.log_det;
        let mut scratch = self.zeros_like();
        let gz: Vec<f64> = tr.z.iter().map(|z| -z).collect();
        let gx = self.backward(&tr, &f.values, &gz, 1.0, &mut scratch);
        Ok((lp, gx))
    }

    /// Negative log-likelihood of one sample; its parameter gradient is added
    /// to `grad` scaled by `weight`.
    pub fn nll_accumulate(
        &self,
        x: &[f64],
        f: &ConditionVector,
        weight: f64,
        grad: &mut FlowParams,
    ) -> Result<f64> {
        self.check_dims(x, f)?;
        let tr = self.trace(x, &f.values);
        check_finite(&tr.z, "flow forward")?;
        let nll = -(standard_normal_log_density(&tr.z) + tr.log_det);
        let gz: Vec<f64> = tr.z.iter().map(|z| weight * z).collect();
        self.backward(&tr, &f.values, &gz, -weight, grad);
        Ok(nll)
    }

    pub fn nll_and_grad(&self, x: &[f64], f: &ConditionVector) -> Result<(f64, FlowParams)> {
        let mut g = self.zeros_like();
        let nll = self.nll_accumulate(x, f, 1.0, &mut g)?;
        Ok((nll, g))
    }

    /// Draws `z ~ N(0, I)` and inverts; direction blocks come back unit length.
    pub fn sample<R: Rng + ?Sized>(&self, f: &ConditionVector, rng: &mut R) -> Result<Rep25D> {
        Rep25D::from_flat(&self.sample_flat(f, rng)?)
    }

    pub fn sample_flat<R: Rng + ?Sized>(
        &self,
        f: &ConditionVector,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let z: Vec<f64> = (0..self.config.input_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        self.inverse(&z, f)
    }

    /// Data-dependent actnorm initialization, layer by layer.
    pub fn init_actnorm(&mut self, batch: &[(Vec<f64>, &ConditionVector)]) {
        let mut cur: Vec<Vec<f64>> = batch.iter().map(|(x, _)| x.clone()).collect();
        for k in 0..self.steps.len() {
            self.steps[k].actnorm.init_from(&cur);
            let s = &self.steps[k];
            cur = cur
                .iter()
                .zip(batch)
                .map(|(x, (_, f))| {
                    let (a, _) = s.actnorm.forward(x);
                    let (m, _) = s.mixing.forward(&a);
                    s.coupling.forward(&m, &f.values).0
                })
                .collect();
        }
    }

    pub fn content_hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(&(&self.config, &self.steps))?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn to_checkpoint_json(&self) -> Result<String> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            content_hash: self.content_hash()?,
            config: self.config.clone(),
            steps: self.steps.clone(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let params = FlowParams {
            config: ck.config,
            steps: ck.steps,
        };
        params.validate_shapes()?;
        if params.content_hash()? != ck.content_hash {
            return Err(Error::Format("checkpoint content hash mismatch".into()));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_json(&std::fs::read_to_string(path)?)
    }

    fn validate_shapes(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let d = c.input_dim;
        let bad = |what: &str| {
            Err(Error::Format(format!(
                "checkpoint block {what} has the wrong shape"
            )))
        };
        if self.steps.len() != c.depth {
            return bad("steps");
        }
        for s in &self.steps {
            let sp = d.div_ceil(2);
            let hb = d - sp;
            let mut perm = s.mixing.perm.clone();
            perm.sort_unstable();
            if s.actnorm.log_scale.len() != d || s.actnorm.bias.len() != d {
                return bad("actnorm");
            }
            if perm != (0..d).collect::<Vec<_>>()
                || s.mixing.sign.len() != d
                || s.mixing.lower.len() != d * d
                || s.mixing.upper.len() != d * d
                || s.mixing.log_diag.len() != d
            {
                return bad("mixing");
            }
            let cp = &s.coupling;
            if cp.split != sp
                || cp.cond_dim != c.cond_dim
                || cp.width != c.width
                || cp.w1.len() != c.width * (sp + c.cond_dim)
                || cp.b1.len() != c.width
                || cp.w2.len() != 2 * hb * c.width
                || cp.b2.len() != 2 * hb
            {
                return bad("coupling");
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    content_hash: String,
    config: FlowConfig,
    steps: Vec<FlowStep>,
}

pub fn standard_normal_log_density(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * z.len() as f64 * (2.0 * PI).ln()
}

/// One training example: the target image's condition and its neighbor cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingItem {
    pub condition: ConditionVector,
    pub cluster: Cluster,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: FlowParams,
    /// Mean NLL of each epoch's batches.
    pub epoch_losses: Vec<f64>,
    pub diverged: bool,
}

/// Converts every cluster entry to its flattened representation.
pub fn cluster_targets(cluster: &Cluster) -> Vec<Vec<f64>> {
    cluster
        .entries
        .iter()
        .map(|e| rep25d_from_2d(&e.keypoints, &e.camera, &e.intrinsics).flatten())
        .collect()
}

/// Images whose clusters seed the data-dependent actnorm initialization.
const ACTNORM_INIT_IMAGES: usize = 16;

/// Maximum-likelihood training with Adam.
///
/// An epoch visits every image with a nonempty cluster once, in shuffled
/// order. A visit shuffles the image's neighbors and takes one step per
/// batch of `batch_size` of them.
pub fn train(items: &[TrainingItem], cfg: &FlowConfig) -> Result<TrainOutcome> {
    let data: Vec<(&ConditionVector, Vec<Vec<f64>>)> = items
        .iter()
        .filter(|it| !it.cluster.is_empty())
        .map(|it| (&it.condition, cluster_targets(&it.cluster)))
        .collect();
    train_flat(&data, cfg)
}

/// As [`train`] with targets already flattened.
pub fn train_flat(
    data: &[(&ConditionVector, Vec<Vec<f64>>)],
    cfg: &FlowConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data: Vec<_> = data.iter().filter(|(_, t)| !t.is_empty()).collect();
    if data.is_empty() {
        return Err(Error::Empty("training clusters"));
    }
    for (f, targets) in &data {
        if f.values.len() != cfg.cond_dim {
            return Err(Error::DimensionMismatch {
                what: "condition",
                expected: cfg.cond_dim,
                got: f.values.len(),
            });
        }
        if let Some(t) = targets.iter().find(|t| t.len() != cfg.input_dim) {
            return Err(Error::DimensionMismatch {
                what: "flow input",
                expected: cfg.input_dim,
                got: t.len(),
            });
        }
    }
    let mut params = FlowParams::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0x5eed_f10f);
    let noise = |rng: &mut ChaCha8Rng, x: &[f64]| -> Vec<f64> {
        x.iter()
            .map(|v| v + cfg.dequant_sigma * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut adam = Adam::new(cfg.lr, params.param_count());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        if epoch == 0 {
            let mut first = Vec::new();
            for &k in order.iter().take(ACTNORM_INIT_IMAGES) {
                let (f, targets) = data[k];
                first.extend(targets.iter().map(|t| (noise(&mut rng, t), *f)));
            }
            params.init_actnorm(&first);
        }
        let mut total = 0.0;
        let mut batches = 0usize;
        for &i in &order {
            let (f, targets) = data[i];
            let mut picks: Vec<usize> = (0..targets.len()).collect();
            picks.shuffle(&mut rng);
            for chunk in picks.chunks(cfg.batch_size) {
                let batch: Vec<(Vec<f64>, &ConditionVector)> = chunk
                    .iter()
                    .map(|&j| (noise(&mut rng, &targets[j]), *f))
                    .collect();
                let mut grad = params.zeros_like();
                let w = 1.0 / batch.len() as f64;
                let mut loss = 0.0;
                let mut failed = false;
                for (x, f) in &batch {
                    match params.nll_accumulate(x, f, w, &mut grad) {
                        Ok(l) => loss += w * l,
                        Err(_) => {
                            failed = true;
                            break;
                        }
                    }
                }
                let flat_grad = grad.to_flat();
                if failed || !loss.is_finite() || flat_grad.iter().any(|g| !g.is_finite()) {
                    warn!(
                        "flow training diverged in epoch {epoch}; keeping last finite parameters"
                    );
                    epoch_losses.push(if batches > 0 {
                        total / batches as f64
                    } else {
                        f64::NAN
                    });
                    return Ok(TrainOutcome {
                        params,
                        epoch_losses,
                        diverged: true,
                    });
                }
                let mut flat = params.to_flat();
                adam.step(&mut flat, &flat_grad);
                params.set_flat(&flat);
                total += loss;
                batches += 1;
            }
        }
        let mean = total / batches as f64;
        debug!("epoch {epoch}: mean nll {mean:.4}");
        epoch_losses.push(mean);
    }
    Ok(TrainOutcome {
        params,
        epoch_losses,
        diverged: false,
    })
}

/// Mean NLL over every (condition, target) pair, without noise.
pub fn mean_nll(params: &FlowParams, data: &[(&ConditionVector, Vec<Vec<f64>>)]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (f, targets) in data {
        for t in targets {
            total -= params.log_prob_flat(t, f)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("evaluation pairs"));
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(d: usize, c: usize, depth: usize, width: usize, seed: u64) -> FlowParams {
        let cfg = FlowConfig {
            depth,
            width,
            input_dim: d,
            cond_dim: c,
            rng_seed: seed,
            ..Default::default()
        };
        FlowParams::new(&cfg).unwrap()
    }

    /// Randomizes every trainable block so no layer is an identity.
    fn perturbed(
        d: usize,
        c: usize,
        depth: usize,
        width: usize,
        seed: u64,
        amp: f64,
    ) -> FlowParams {
        let mut p = small(d, c, depth, width, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for b in p.blocks_mut() {
            for v in b.iter_mut() {
                *v += amp * rng.sample::<f64, _>(StandardNormal);
            }
        }
        p
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn numeric_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> DMatrix<f64> {
        let d = x.len();
        let mut j = DMatrix::zeros(d, d);
        for c in 0..d {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[c] += h;
            xm[c] -= h;
            let (fp, fm) = (f(&xp), f(&xm));
            for r in 0..d {
                j[(r, c)] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
        j
    }

    #[test]
    fn mixing_reconstructs_an_orthogonal_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Mixing::random_orthogonal(7, &mut rng);
        let w = m.matrix();
        let wtw = w.transpose() * &w;
        assert!((wtw - DMatrix::<f64>::identity(7, 7)).amax() < 1e-12);
        assert!(m.log_diag.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn layers_invert_and_log_dets_match_numeric_jacobians() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for d in [2usize, 3, 5, 8] {
            let p = perturbed(d, 3, 1, 6, d as u64, 0.3);
            let s = &p.steps[0];
            let f = rand_vec(&mut rng, 3);
            let x = rand_vec(&mut rng, d);
            let checks: Vec<(
                Box<dyn Fn(&[f64]) -> (Vec<f64>, f64)>,
                Box<dyn Fn(&[f64]) -> Vec<f64>>,
            )> = vec![
                (
                    Box::new(|x| s.actnorm.forward(x)),
                    Box::new(|y| s.actnorm.inverse(y)),
                ),
                (
                    Box::new(|x| s.mixing.forward(x)),
                    Box::new(|y| s.mixing.inverse(y)),
                ),
                (
                    Box::new(|x| s.coupling.forward(x, &f)),
                    Box::new(|y| s.coupling.inverse(y, &f)),
                ),
            ];
            for (fwd, inv) in &checks {
                let (y, ld) = fwd(&x);
                let back = inv(&y);
                assert!(back.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-12));
                let j = numeric_jacobian(|v| fwd(v).0, &x, 1e-6);
                let det = j.determinant().abs();
                assert!(
                    (det / ld.exp() - 1.0).abs() < 1e-6,
                    "d={d}: {det} vs {}",
                    ld.exp()
                );
            }
        }
    }

    #[test]
    fn fresh_flow_is_a_volume_preserving_rotation() {
        let p = small(6, 2, 3, 8, 3);
        let f = ConditionVector::new(vec![0.3, -0.2]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_vec(&mut rng, 6);
        let (z, ld) = p.forward(&x, &f).unwrap();
        let nx: f64 = x.iter().map(|v| v * v).sum();
        let nz: f64 = z.iter().map(|v| v * v).sum();
        assert!((nx - nz).abs() < 1e-10);
        let expected: f64 = p
            .steps
            .iter()
            .map(|s| s.mixing.log_diag.iter().sum::<f64>())
            .sum();
        assert!((ld - expected).abs() < 1e-12);
        let lp0 = p.log_prob_flat(&[0.0; 6], &f).unwrap();
        assert!((lp0 + 3.0 * (2.0 * PI).ln()).abs() < 1e-10);
    }

    #[test]
    fn full_flow_log_det_matches_numeric_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = perturbed(9, 4, 3, 10, 5, 0.2);
        let f = ConditionVector::new(rand_vec(&mut rng, 4));
        for _ in 0..10 {
            let x = rand_vec(&mut rng, 9);
            let (_, ld) = p.forward(&x, &f).unwrap();
            let j = numeric_jacobian(|v| p.forward(v, &f).unwrap().0, &x, 1e-6);
            let det = j.determinant().abs();
            assert!((det / ld.exp() - 1.0).abs() < 1e-5);
        }
    }

    fn check_grad(p: &FlowParams, x: &[f64], f: &ConditionVector) {
        let (nll, g) = p.nll_and_grad(x, f).unwrap();
        let analytic = g.to_flat();
        let base = p.to_flat();
        let h = 1e-4;
        let scale = analytic
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-3);
        let mut q = p.clone();
        for i in (0..base.len()).step_by(3) {
            let mut v = base.clone();
            v[i] += h;
            q.set_flat(&v);
            let fp = q.nll_and_grad(x, f).unwrap().0;
            v[i] -= 2.0 * h;
            q.set_flat(&v);
            let fm = q.nll_and_grad(x, f).unwrap().0;
            let num = (fp - fm) / (2.0 * h);
            let err =
                (num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(1e-2 * scale);
            assert!(
                err < 1e-3,
                "param {i}: numeric {num} analytic {} (nll {nll})",
                analytic[i]
            );
        }
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = perturbed(5, 3, 2, 8, 6, 0.3);
        let f = ConditionVector::new(rand_vec(&mut rng, 3));
        for _ in 0..3 {
            check_grad(&p, &rand_vec(&mut rng, 5), &f);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = perturbed(6, 2, 3, 8, 7, 0.3);
        let f = ConditionVector::new(rand_vec(&mut rng, 2));
        let x = rand_vec(&mut rng, 6);
        let (_, g) = p.log_prob_grad(&x, &f).unwrap();
        for i in 0..6 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += 1e-5;
            xm[i] -= 1e-5;
            let num =
                (p.log_prob_flat(&xp, &f).unwrap() - p.log_prob_flat(&xm, &f).unwrap()) / 2e-5;
            assert!((num - g[i]).abs() < 1e-6 * (1.0 + num.abs()));
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let p = perturbed(7, 3, 2, 5, 8, 0.2);
        let f = ConditionVector::new(vec![0.1, 0.2, 0.3]);
        let x = [0.3, -1.0, 0.7, 0.1, 2.0, -0.4, 0.9];
        let back = FlowParams::from_checkpoint_json(&p.to_checkpoint_json().unwrap()).unwrap();
        assert_eq!(back, p);
        assert_eq!(
            back.log_prob_flat(&x, &f).unwrap().to_bits(),
            p.log_prob_flat(&x, &f).unwrap().to_bits()
        );
        let tampered = p
            .to_checkpoint_json()
            .unwrap()
            .replacen("\"bias\":[", "\"bias\":[1.5,", 1);
        assert!(FlowParams::from_checkpoint_json(&tampered).is_err());
    }

    #[test]
    fn dimension_errors() {
        let p = small(4, 2, 1, 4, 0);
        let f = ConditionVector::new(vec![0.0; 2]);
        assert!(p.forward(&[0.0; 3], &f).is_err());
        assert!(p
            .forward(&[0.0; 4], &ConditionVector::new(vec![0.0]))
            .is_err());
        assert!(FlowParams::new(&FlowConfig {
            input_dim: 1,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn sampling_is_reproducible() {
        let p = perturbed(6, 1, 2, 4, 9, 0.1);
        let f = ConditionVector::new(vec![0.5]);
        let a = p
            .sample_flat(&f, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        let b = p
            .sample_flat(&f, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        assert_eq!(a, b);
        let rep = p.sample(&f, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(rep
            .directions
            .iter()
            .all(|d| (crate::geometry::norm(d) - 1.0).abs() < 1e-12));
    }

    #[test]
    fn actnorm_init_standardizes_the_first_batch() {
        let mut p = small(4, 1, 2, 4, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = ConditionVector::new(vec![0.0]);
        let batch: Vec<(Vec<f64>, &ConditionVector)> = (0..50)
            .map(|_| {
                (
                    rand_vec(&mut rng, 4)
                        .iter()
                        .map(|v| 3.0 * v + 5.0)
                        .collect(),
                    &f,
                )
            })
            .collect();
        p.init_actnorm(&batch);
        let out: Vec<Vec<f64>> = batch
            .iter()
            .map(|(x, _)| p.steps[0].actnorm.forward(x).0)
            .collect();
        for i in 0..4 {
            let mean = out.iter().map(|o| o[i]).sum::<f64>() / 50.0;
            let var = out.iter().map(|o| (o[i] - mean).powi(2)).sum::<f64>() / 50.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_learning_rate_changes_only_actnorm() {
        let cfg = FlowConfig {
            depth: 2,
            width: 4,
            input_dim: 4,
            cond_dim: 1,
            lr: 0.0,
            epochs: 3,
            batch_size: 4,
            ..Default::default()
        };
        let f = ConditionVector::new(vec![0.2]);
        let targets = vec![vec![1.0, 2.0, 3.0, 4.0], vec![0.0, 1.0, -1.0, 2.0]];
        let data = vec![(&f, targets.clone()), (&f, targets)];
        let out = train_flat(&data, &cfg).unwrap();
        let fresh = FlowParams::new(&cfg).unwrap();
        for (a, b) in out.params.steps.iter().zip(&fresh.steps) {
            assert_eq!(a.mixing, b.mixing);
            assert_eq!(a.coupling, b.coupling);
        }
        assert_ne!(out.params.steps[0].actnorm, fresh.steps[0].actnorm);
    }
}
