//! Residual feed-forward noise predictor in `f32` with hand-written backprop.
//!
//! Input is `[x, emb(t), emb(ρ̃)]` where `ρ̃` is the risk level mapped to
//! `[0, 1]` over the training range, or a learned null vector for the
//! unconditional branch. One input layer, `depth` residual blocks
//! `h ← h + silu(Wh + b)` and a linear read-out.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::NoisePredictor;
use crate::ccp::rng_from_seed;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub dim: usize,
    pub width: usize,
    pub depth: usize,
    pub t_embed: usize,
    pub rho_embed: usize,
    /// Multiplier applied to the integer time step before embedding.
    pub t_scale: f64,
    /// Multiplier applied to the normalised risk level before embedding.
    pub rho_scale: f64,
}

impl NetworkConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            width: 256,
            depth: 4,
            t_embed: 32,
            rho_embed: 32,
            t_scale: 1.0,
            rho_scale: 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.width == 0 {
            return Err(Error::InvalidArgument("network dimensions must be positive".into()));
        }
        if !self.t_embed.is_multiple_of(2) || !self.rho_embed.is_multiple_of(2) || self.t_embed == 0 || self.rho_embed == 0 {
            return Err(Error::InvalidArgument("embedding sizes must be positive and even".into()));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.dim + self.t_embed + self.rho_embed
    }
}

/// Affine map of the observed risk range onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoNormalizer {
    pub lo: f64,
    pub hi: f64,
}

impl RhoNormalizer {
    pub fn from_risks(risks: &[f64]) -> Self {
        let lo = risks.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = risks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lo.is_finite() {
            Self { lo, hi }
        } else {
            Self { lo: 0.0, hi: 1.0 }
        }
    }

    /// A constant range maps every level to 0.
    pub fn apply(&self, rho: f64) -> f64 {
        if self.hi > self.lo {
            (rho - self.lo) / (self.hi - self.lo)
        } else {
            0.0
        }
    }
}

/// Transformer-style `[sin(v·s·ω_k), cos(v·s·ω_k)]`, `ω_k = 10000^{−k/half}`.
pub(crate) fn sinusoidal(value: f64, scale: f64, out: &mut [f32]) {
    let half = out.len() / 2;
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let angle = value * scale * freq;
        out[k] = angle.sin() as f32;
        out[half + k] = angle.cos() as f32;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Dense {
    pub w: DMatrix<f32>,
    pub b: DVector<f32>,
}

impl Dense {
    fn init(out: usize, inp: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inp as f32).sqrt();
        Self {
            w: DMatrix::from_fn(out, inp, |_, _| rng.random_range(-bound..bound)),
            b: DVector::from_fn(out, |_, _| rng.random_range(-bound..bound)),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w: DMatrix::zeros(self.w.nrows(), self.w.ncols()),
            b: DVector::zeros(self.b.len()),
        }
    }

    /// `W·a + b` for every column of `a`.
    fn forward(&self, a: &DMatrix<f32>) -> DMatrix<f32> {
        let mut z = DMatrix::zeros(self.w.nrows(), a.ncols());
        gemm(1.0, &self.w, false, a, false, 0.0, &mut z);
        for mut col in z.column_iter_mut() {
            col += &self.b;
        }
        z
    }
}

/// `c ← α·op(a)·op(b) + β·c` on column-major storage; transposition is a stride swap.
pub(crate) fn gemm(
    alpha: f32,
    a: &DMatrix<f32>,
    ta: bool,
    b: &DMatrix<f32>,
    tb: bool,
    beta: f32,
    c: &mut DMatrix<f32>,
) {
    let (m, k, rsa, csa) = if ta {
        (a.ncols(), a.nrows(), a.nrows() as isize, 1)
    } else {
        (a.nrows(), a.ncols(), 1, a.nrows() as isize)
    };
    let (k2, n, rsb, csb) = if tb {
        (b.ncols(), b.nrows(), b.nrows() as isize, 1)
    } else {
        (b.nrows(), b.ncols(), 1, b.nrows() as isize)
    };
    assert_eq!(k, k2, "inner dimensions differ");
    assert_eq!((c.nrows(), c.ncols()), (m, n), "output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    let rsc = 1;
    let csc = c.nrows() as isize;
    // SAFETY: the pointers come from live matrices whose extents match the
    // (m, k, n) dimensions and strides computed above; `c` is borrowed
    // mutably and cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f32) -> f32 {
    z * sigmoid(z)
}

fn silu_grad(z: f32) -> f32 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNetwork {
    pub(crate) config: NetworkConfig,
    pub(crate) normalizer: RhoNormalizer,
    pub(crate) layers: Vec<Dense>,
    pub(crate) null_token: DVector<f32>,
}

/// Gradients with the same layout as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub(crate) layers: Vec<Dense>,
    pub(crate) null_token: DVector<f32>,
}

impl Gradients {
    pub fn slices(&self) -> Vec<&[f32]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &self.layers {
            out.push(l.w.as_slice());
            out.push(l.b.as_slice());
        }
        out.push(self.null_token.as_slice());
        out
    }
}

pub(crate) struct ForwardCache {
    input: DMatrix<f32>,
    /// Pre-activations of the input layer and each residual block.
    pre: Vec<DMatrix<f32>>,
    /// Hidden state entering each residual block, then the read-out.
    hidden: Vec<DMatrix<f32>>,
}

impl ScoreNetwork {
    pub fn init(config: NetworkConfig, normalizer: RhoNormalizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut layers = Vec::with_capacity(config.depth + 2);
        layers.push(Dense::init(config.width, config.input_width(), &mut rng));
        for _ in 0..config.depth {
            layers.push(Dense::init(config.width, config.width, &mut rng));
        }
        layers.push(Dense::init(config.dim, config.width, &mut rng));
        let normal = Normal::new(0.0f32, 0.1).expect("valid scale");
        let null_token = DVector::from_fn(config.rho_embed, |_, _| normal.sample(&mut rng));
        Ok(Self {
            config,
            normalizer,
            layers,
            null_token,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn normalizer(&self) -> RhoNormalizer {
        self.normalizer
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum::<usize>() + self.null_token.len()
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
            null_token: DVector::zeros(self.null_token.len()),
        }
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &mut self.layers {
            out.push(l.w.as_mut_slice());
            out.push(l.b.as_mut_slice());
        }
        out.push(self.null_token.as_mut_slice());
        out
    }

    pub fn param_slices(&self) -> Vec<&[f32]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &self.layers {
            out.push(l.w.as_slice());
            out.push(l.b.as_slice());
        }
        out.push(self.null_token.as_slice());
        out
    }

    /// Builds the input matrix; column `j` uses the null token when `rho[j]` is `None`.
    pub(crate) fn assemble_input(&self, x: &DMatrix<f32>, t: &[usize], rho: &[Option<f64>]) -> DMatrix<f32> {
        let c = &self.config;
        let cols = x.ncols();
        let mut input = DMatrix::zeros(c.input_width(), cols);
        for j in 0..cols {
            let mut col = input.column_mut(j);
            let buf = col.as_mut_slice();
            buf[..c.dim].copy_from_slice(x.column(j).as_slice());
            sinusoidal(t[j] as f64, c.t_scale, &mut buf[c.dim..c.dim + c.t_embed]);
            let r = &mut buf[c.dim + c.t_embed..];
            match rho[j] {
                Some(v) => sinusoidal(self.normalizer.apply(v), c.rho_scale, r),
                None => r.copy_from_slice(self.null_token.as_slice()),
            }
        }
        input
    }

    pub(crate) fn forward(&self, input: DMatrix<f32>) -> (DMatrix<f32>, ForwardCache) {
        let depth = self.config.depth;
        let mut pre = Vec::with_capacity(depth + 1);
        let mut hidden = Vec::with_capacity(depth + 1);
        let z0 = self.layers[0].forward(&input);
        let mut h = z0.map(silu);
        pre.push(z0);
        for layer in &self.layers[1..=depth] {
            let z = layer.forward(&h);
            let next = &h + z.map(silu);
            hidden.push(h);
            pre.push(z);
            h = next;
        }
        let out = self.layers[depth + 1].forward(&h);
        hidden.push(h);
        (out, ForwardCache { input, pre, hidden })
    }

    /// Accumulates parameter gradients of a loss whose derivative with
    /// respect to the output is `d_out`.
    pub(crate) fn backward(
        &self,
        cache: &ForwardCache,
        d_out: &DMatrix<f32>,
        null_cols: &[bool],
        grads: &mut Gradients,
    ) {
        let depth = self.config.depth;
        let read_out = &self.layers[depth + 1];
        let g = &mut grads.layers[depth + 1];
        gemm(1.0, d_out, false, &cache.hidden[depth], true, 1.0, &mut g.w);
        g.b += row_sums(d_out);
        let mut dh = DMatrix::zeros(read_out.w.ncols(), d_out.ncols());
        gemm(1.0, &read_out.w, true, d_out, false, 0.0, &mut dh);

        for k in (1..=depth).rev() {
            let z = &cache.pre[k];
            let dz = dh.zip_map(z, |d, zz| d * silu_grad(zz));
            let g = &mut grads.layers[k];
            gemm(1.0, &dz, false, &cache.hidden[k - 1], true, 1.0, &mut g.w);
            g.b += row_sums(&dz);
            gemm(1.0, &self.layers[k].w, true, &dz, false, 1.0, &mut dh);
        }

        let dz0 = dh.zip_map(&cache.pre[0], |d, zz| d * silu_grad(zz));
        let g0 = &mut grads.layers[0];
        gemm(1.0, &dz0, false, &cache.input, true, 1.0, &mut g0.w);
        g0.b += row_sums(&dz0);

        if null_cols.iter().any(|u| *u) {
            let mut d_in = DMatrix::zeros(self.layers[0].w.ncols(), dz0.ncols());
            gemm(1.0, &self.layers[0].w, true, &dz0, false, 0.0, &mut d_in);
            let offset = self.config.dim + self.config.t_embed;
            for (j, _) in null_cols.iter().enumerate().filter(|(_, u)| **u) {
                for (k, v) in grads.null_token.iter_mut().enumerate() {
                    *v += d_in[(offset + k, j)];
                }
            }
        }
    }

    pub fn predict_f32(&self, x: &DMatrix<f32>, t: &[usize], rho: &[Option<f64>]) -> DMatrix<f32> {
        let input = self.assemble_input(x, t, rho);
        self.forward(input).0
    }
}

fn row_sums(m: &DMatrix<f32>) -> DVector<f32> {
    DVector::from_iterator(m.nrows(), m.row_iter().map(|r| r.sum()))
}

impl NoisePredictor for ScoreNetwork {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn predict_noise(&self, x: &DMatrix<f64>, t: &[usize], rho: &[Option<f64>]) -> DMatrix<f64> {
        let x32 = x.map(|v| v as f32);
        self.predict_f32(&x32, t, rho).map(f64::from)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ScoreNetwork {
        let cfg = NetworkConfig {
            dim: 3,
            width: 6,
            depth: 2,
            t_embed: 4,
            rho_embed: 4,
            t_scale: 0.01,
            rho_scale: 1.0,
        };
        ScoreNetwork::init(cfg, RhoNormalizer { lo: 0.0, hi: 0.5 }, 1).unwrap()
    }

    fn loss(net: &ScoreNetwork, x: &DMatrix<f32>, t: &[usize], rho: &[Option<f64>], target: &DMatrix<f32>) -> f64 {
        let out = net.predict_f32(x, t, rho);
        (out - target).iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / x.ncols() as f64
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = tiny();
        let x = DMatrix::from_fn(3, 4, |i, j| (i as f32 - 1.0) * 0.3 + j as f32 * 0.1);
        let target = DMatrix::from_fn(3, 4, |i, j| ((i + 2 * j) as f32).sin());
        let t = [3usize, 50, 200, 999];
        let rho = [Some(0.1), None, Some(0.4), None];
        let nulls: Vec<bool> = rho.iter().map(Option::is_none).collect();

        let input = net.assemble_input(&x, &t, &rho);
        let (out, cache) = net.forward(input);
        let d_out = (out - &target) * (2.0 / x.ncols() as f32);
        let mut grads = net.zero_gradients();
        net.backward(&cache, &d_out, &nulls, &mut grads);

        let analytic: Vec<Vec<f32>> = grads.slices().iter().map(|s| s.to_vec()).collect();
        let h = 1e-2f32;
        let mut checked = 0;
        for (ti, tensor) in analytic.iter().enumerate() {
            for (k, g) in tensor.iter().enumerate().step_by(3) {
                let mut plus = net.clone();
                plus.param_slices_mut()[ti][k] += h;
                let mut minus = net.clone();
                minus.param_slices_mut()[ti][k] -= h;
                let fd = (loss(&plus, &x, &t, &rho, &target) - loss(&minus, &x, &t, &rho, &target)) / (2.0 * h as f64);
                assert!(
                    (fd - *g as f64).abs() <= 2e-3 * (1.0 + fd.abs()),
                    "tensor {ti} entry {k}: fd {fd} vs {g}"
                );
                checked += 1;
            }
        }
        assert!(checked > 50);
        assert!(grads.null_token.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn evaluation_is_deterministic_and_shaped() {
        let net = tiny();
        let x = DMatrix::from_element(3, 5, 0.2f64);
        let t = [10usize; 5];
        let rho = [Some(0.2); 5];
        let a = net.predict_noise(&x, &t, &rho);
        assert_eq!(a.shape(), (3, 5));
        assert_eq!(a, net.predict_noise(&x, &t, &rho));
        assert_eq!(ScoreNetwork::init(net.config, net.normalizer, 1).unwrap(), net);
    }

    #[test]
    fn gemm_handles_transposes() {
        let a = DMatrix::from_fn(3, 2, |i, j| (i * 2 + j) as f32);
        let b = DMatrix::from_fn(3, 4, |i, j| (i + j) as f32 * 0.5);
        let mut c = DMatrix::zeros(2, 4);
        gemm(1.0, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, a.transpose() * &b);
        let mut d = DMatrix::zeros(3, 3);
        gemm(1.0, &a, false, &a, true, 0.0, &mut d);
        assert_eq!(d, &a * a.transpose());
    }

    #[test]
    fn normalizer_maps_range_to_unit_interval() {
        let n = RhoNormalizer::from_risks(&[0.3, 0.1, 0.2]);
        assert!((n.apply(0.1)).abs() < 1e-15);
        assert!((n.apply(0.3) - 1.0).abs() < 1e-15);
        assert_eq!(RhoNormalizer::from_risks(&[0.2, 0.2]).apply(0.9), 0.0);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = NetworkConfig::new(2);
        cfg.t_embed = 3;
        assert!(ScoreNetwork::init(cfg, RhoNormalizer { lo: 0.0, hi: 1.0 }, 0).is_err());
    }
}
