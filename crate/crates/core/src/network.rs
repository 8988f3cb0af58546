//! Bias-free-capable multilayer perceptron with manual backpropagation,
//! NTK/standard parameterizations, empirical tangent-kernel computation,
//! and verification of the homogeneity identities the flow theory rests on.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{dot, Mat, SymMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "linear" => Ok(Activation::Linear),
            other => Err(Error::UnknownMode(other.into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parameterization {
    /// Weights i.i.d. N(0,1); the forward pass multiplies each layer's
    /// pre-activation by sigma_w / sqrt(fan_in).
    Ntk,
    /// LeCun-style: weights i.i.d. N(0, sigma_w^2 / fan_in), plain forward.
    Standard,
}

impl std::str::FromStr for Parameterization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ntk" => Ok(Parameterization::Ntk),
            "standard" => Ok(Parameterization::Standard),
            other => Err(Error::UnknownMode(other.into())),
        }
    }
}

/// Dense feed-forward network. Weight matrices are (fan_out x fan_in);
/// hidden layers use the configured activation, the output layer is linear.
#[derive(Debug, Clone)]
pub struct MLPModel {
    pub layer_widths: Vec<usize>,
    pub weights: Vec<Mat>,
    pub biases: Option<Vec<Vec<f64>>>,
    pub activation: Activation,
    pub parameterization: Parameterization,
    pub sigma_w: f64,
    pub sigma_b: f64,
}

/// Per-parameter gradients, shaped like the model's weights.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub weights: Vec<Mat>,
    pub biases: Option<Vec<Vec<f64>>>,
}

impl GradientBundle {
    pub fn zeros_like(m: &MLPModel) -> Self {
        GradientBundle {
            weights: m.weights.iter().map(|w| Mat::zeros(w.rows(), w.cols())).collect(),
            biases: m.biases.as_ref().map(|bs| bs.iter().map(|b| vec![0.0; b.len()]).collect()),
        }
    }

    pub fn iter_flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights
            .iter()
            .flat_map(|w| w.as_slice().iter().copied())
            .chain(self.biases.iter().flatten().flatten().copied())
    }

    pub fn dot(&self, other: &GradientBundle) -> f64 {
        self.iter_flat().zip(other.iter_flat()).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.iter_flat().map(|x| x * x).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.iter_flat().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.iter_flat().all(|x| x.is_finite())
    }
}

/// Activations kept from a forward pass: `hs[0]` is the input batch,
/// `hs[l + 1]` the post-activation output of layer `l` (the last entry is
/// the network output). ReLU masks are recovered from the activations.
pub struct ForwardCache {
    pub hs: Vec<Mat>,
}

impl ForwardCache {
    pub fn output(&self) -> &Mat {
        self.hs.last().unwrap()
    }
}

impl MLPModel {
    /// Initialize with i.i.d. Gaussian weights, deterministically per seed.
    pub fn init(
        layer_widths: &[usize],
        activation: Activation,
        parameterization: Parameterization,
        sigma_w: f64,
        sigma_b: f64,
        use_bias: bool,
        seed: u64,
    ) -> Self {
        assert!(layer_widths.len() >= 2, "need at least input and output widths");
        assert!(layer_widths.iter().all(|&w| w >= 1), "widths must be >= 1");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(layer_widths.len() - 1);
        let mut biases = use_bias.then(Vec::new);
        for l in 0..layer_widths.len() - 1 {
            let (fan_in, fan_out) = (layer_widths[l], layer_widths[l + 1]);
            let w_sd = match parameterization {
                Parameterization::Ntk => 1.0,
                Parameterization::Standard => sigma_w / (fan_in as f64).sqrt(),
            };
            let mut w = Mat::zeros(fan_out, fan_in);
            for x in w.as_mut_slice() {
                *x = w_sd * rng.sample::<f64, _>(StandardNormal);
            }
            weights.push(w);
            if let Some(bs) = biases.as_mut() {
                let b_sd = match parameterization {
                    Parameterization::Ntk => 1.0,
                    Parameterization::Standard => sigma_b,
                };
                bs.push((0..fan_out).map(|_| b_sd * rng.sample::<f64, _>(StandardNormal)).collect());
            }
        }
        MLPModel {
            layer_widths: layer_widths.to_vec(),
            weights,
            biases,
            activation,
            parameterization,
            sigma_w,
            sigma_b,
        }
    }

    /// Number of weight layers (network depth).
    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    /// Homogeneity degree: bias-free ReLU/linear networks scale as
    /// f(a * theta) = a^depth * f(theta).
    pub fn homogeneity_degree(&self) -> u32 {
        self.depth() as u32
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.rows() * w.cols()).sum::<usize>()
            + self.biases.as_ref().map_or(0, |bs| bs.iter().map(Vec::len).sum())
    }

    /// Forward scale of layer `l` (1 in standard parameterization).
    fn layer_scale(&self, l: usize) -> f64 {
        match self.parameterization {
            Parameterization::Ntk => self.sigma_w / (self.layer_widths[l] as f64).sqrt(),
            Parameterization::Standard => 1.0,
        }
    }

    fn bias_scale(&self) -> f64 {
        match self.parameterization {
            Parameterization::Ntk => self.sigma_b,
            Parameterization::Standard => 1.0,
        }
    }

    pub fn forward_batch(&self, x: &Mat) -> ForwardCache {
        assert_eq!(x.cols(), self.input_dim(), "input dimension mismatch");
        let depth = self.depth();
        let mut hs = Vec::with_capacity(depth + 1);
        hs.push(x.clone());
        for l in 0..depth {
            let s = self.layer_scale(l);
            let mut z = hs[l].matmul_nt(&self.weights[l]);
            if s != 1.0 {
                z.scale_in_place(s);
            }
            if let Some(bs) = &self.biases {
                let sb = self.bias_scale();
                for i in 0..z.rows() {
                    for (zv, bv) in z.row_mut(i).iter_mut().zip(&bs[l]) {
                        *zv += sb * bv;
                    }
                }
            }
            if l + 1 < depth && self.activation == Activation::Relu {
                for v in z.as_mut_slice() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            hs.push(z);
        }
        ForwardCache { hs }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let xm = Mat::from_vec(1, x.len(), x.to_vec()).expect("input shape");
        self.forward_batch(&xm).output().row(0).to_vec()
    }

    /// Backpropagate `d_out = dL/d output` (N x C) through a cached forward
    /// pass, summing gradients over the batch.
    pub fn backward_batch(&self, cache: &ForwardCache, d_out: &Mat) -> GradientBundle {
        let depth = self.depth();
        assert_eq!(d_out.rows(), cache.hs[0].rows());
        assert_eq!(d_out.cols(), self.output_dim());
        let mut grads = GradientBundle::zeros_like(self);
        let mut delta = d_out.clone();
        for l in (0..depth).rev() {
            let s = self.layer_scale(l);
            // dW_l = s * delta^T h_{l-1}
            let mut dw = delta.matmul_tn(&cache.hs[l]);
            if s != 1.0 {
                dw.scale_in_place(s);
            }
            grads.weights[l] = dw;
            if let Some(gb) = grads.biases.as_mut() {
                let sb = self.bias_scale();
                for i in 0..delta.rows() {
                    for (g, d) in gb[l].iter_mut().zip(delta.row(i)) {
                        *g += sb * d;
                    }
                }
            }
            if l > 0 {
                let mut dh = delta.matmul(&self.weights[l]);
                if s != 1.0 {
                    dh.scale_in_place(s);
                }
                if self.activation == Activation::Relu {
                    let h = &cache.hs[l];
                    for (v, &hv) in dh.as_mut_slice().iter_mut().zip(h.as_slice()) {
                        if hv <= 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                delta = dh;
            }
        }
        grads
    }

    /// Per-sample deltas dZ_l (N x n_l) for every layer, seeded at the
    /// output. Nothing is summed over the batch; this is the ingredient the
    /// factorized tangent-kernel computation needs.
    fn backward_deltas(&self, cache: &ForwardCache, seed: &Mat) -> Vec<Mat> {
        let depth = self.depth();
        let mut deltas = vec![Mat::zeros(0, 0); depth];
        let mut delta = seed.clone();
        for l in (0..depth).rev() {
            deltas[l] = delta.clone();
            if l > 0 {
                let s = self.layer_scale(l);
                let mut dh = delta.matmul(&self.weights[l]);
                if s != 1.0 {
                    dh.scale_in_place(s);
                }
                if self.activation == Activation::Relu {
                    let h = &cache.hs[l];
                    for (v, &hv) in dh.as_mut_slice().iter_mut().zip(h.as_slice()) {
                        if hv <= 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                delta = dh;
            }
        }
        deltas
    }

    /// Gradient of the `output_index` component of f(x) with respect to
    /// every parameter (reverse mode).
    pub fn grad_param(&self, x: &[f64], output_index: usize) -> GradientBundle {
        assert!(output_index < self.output_dim(), "output index out of range");
        let xm = Mat::from_vec(1, x.len(), x.to_vec()).expect("input shape");
        let cache = self.forward_batch(&xm);
        let mut seed = Mat::zeros(1, self.output_dim());
        seed[(0, output_index)] = 1.0;
        self.backward_batch(&cache, &seed)
    }

    /// Default sample cap for [`MLPModel::empirical_ntk`].
    pub const NTK_SAMPLE_CAP: usize = 4096;

    /// Empirical tangent kernel of the `output_index` logit over the rows
    /// of `xs`: the Gram matrix of per-sample parameter gradients.
    ///
    /// Uses the layerwise factorization of per-sample gradients (each layer
    /// gradient is an outer product delta x activation), so the cost is a
    /// handful of N x N Gram products rather than N full gradient vectors.
    pub fn empirical_ntk(&self, xs: &Mat, output_index: usize) -> Result<SymMatrix> {
        self.empirical_ntk_capped(xs, output_index, Self::NTK_SAMPLE_CAP)
    }

    pub fn empirical_ntk_capped(&self, xs: &Mat, output_index: usize, cap: usize) -> Result<SymMatrix> {
        let n = xs.rows();
        if n > cap {
            return Err(Error::KernelCapExceeded { n, cap });
        }
        assert!(output_index < self.output_dim(), "output index out of range");
        let cache = self.forward_batch(xs);
        let mut seed = Mat::zeros(n, self.output_dim());
        for i in 0..n {
            seed[(i, output_index)] = 1.0;
        }
        let deltas = self.backward_deltas(&cache, &seed);

        let mut theta = Mat::zeros(n, n);
        for l in 0..self.depth() {
            let s = self.layer_scale(l);
            let dd = deltas[l].matmul_nt(&deltas[l]);
            let hh = cache.hs[l].matmul_nt(&cache.hs[l]);
            for i in 0..n * n {
                theta.as_mut_slice()[i] += s * s * dd.as_slice()[i] * hh.as_slice()[i];
            }
            if self.biases.is_some() {
                let sb = self.bias_scale();
                for i in 0..n * n {
                    theta.as_mut_slice()[i] += sb * sb * dd.as_slice()[i];
                }
            }
        }
        SymMatrix::symmetrize(theta)
    }

    /// Trace of the empirical tangent kernel: sum over samples of the
    /// squared gradient norm. Cheap enough to track during training.
    pub fn empirical_ntk_trace(&self, xs: &Mat, output_index: usize) -> f64 {
        let n = xs.rows();
        let cache = self.forward_batch(xs);
        let mut seed = Mat::zeros(n, self.output_dim());
        for i in 0..n {
            seed[(i, output_index)] = 1.0;
        }
        let deltas = self.backward_deltas(&cache, &seed);
        let mut tr = 0.0;
        for l in 0..self.depth() {
            let s = self.layer_scale(l);
            for i in 0..n {
                let dn = dot(deltas[l].row(i), deltas[l].row(i));
                let hn = dot(cache.hs[l].row(i), cache.hs[l].row(i));
                tr += s * s * dn * hn;
                if self.biases.is_some() {
                    let sb = self.bias_scale();
                    tr += sb * sb * dn;
                }
            }
        }
        tr
    }

    /// Clone with every parameter multiplied by `a`.
    pub fn scaled_params(&self, a: f64) -> MLPModel {
        let mut m = self.clone();
        for w in &mut m.weights {
            w.scale_in_place(a);
        }
        if let Some(bs) = &mut m.biases {
            for b in bs {
                for v in b {
                    *v *= a;
                }
            }
        }
        m
    }

    fn require_bias_free(&self) -> Result<()> {
        if self.biases.is_some() {
            return Err(Error::BiasedModel);
        }
        Ok(())
    }

    /// Relative residual of the degree-k scaling identity
    /// theta . grad f = k f (order 0), or of its once-differentiated form
    /// theta . d(grad f) = (k-1) grad f (order 1, via central differences
    /// of the gradient along the parameter ray).
    pub fn euler_residual(&self, x: &[f64], order: u8) -> Result<f64> {
        self.require_bias_free()?;
        let k = f64::from(self.homogeneity_degree());
        let f = self.forward(x)[0];
        let g = self.grad_param(x, 0);
        match order {
            0 => {
                let theta_dot_g: f64 = self
                    .weights
                    .iter()
                    .zip(&g.weights)
                    .map(|(w, gw)| dot(w.as_slice(), gw.as_slice()))
                    .sum();
                Ok((theta_dot_g - k * f).abs() / f.abs().max(1e-12))
            }
            1 => {
                let eps = 1e-5;
                let gp = self.scaled_params(1.0 + eps).grad_param(x, 0);
                let gm = self.scaled_params(1.0 - eps).grad_param(x, 0);
                let scale = g.max_abs().max(1e-12);
                let mut worst = 0.0f64;
                for ((p, m), gv) in gp.iter_flat().zip(gm.iter_flat()).zip(g.iter_flat()) {
                    let h_theta = (p - m) / (2.0 * eps);
                    worst = worst.max((h_theta - (k - 1.0) * gv).abs());
                }
                Ok(worst / scale)
            }
            other => panic!("unsupported derivative order {other}"),
        }
    }

    /// Relative residual of f(a * theta) = a^k f(theta).
    pub fn homogeneity_residual(&self, x: &[f64], a: f64) -> Result<f64> {
        self.require_bias_free()?;
        if a <= 0.0 {
            return Err(Error::NonPositiveScale(a));
        }
        let k = i32::try_from(self.homogeneity_degree()).unwrap();
        let f = self.forward(x)[0];
        let f_scaled = self.scaled_params(a).forward(x)[0];
        Ok((f_scaled - a.powi(k) * f).abs() / f.abs().max(1e-12))
    }

    /// Write a versioned checkpoint; round-trips bit-exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "l2flow-checkpoint v1")?;
        let widths: Vec<String> = self.layer_widths.iter().map(|w| w.to_string()).collect();
        writeln!(out, "widths {}", widths.join(" "))?;
        writeln!(
            out,
            "activation {}",
            match self.activation {
                Activation::Relu => "relu",
                Activation::Linear => "linear",
            }
        )?;
        writeln!(
            out,
            "parameterization {}",
            match self.parameterization {
                Parameterization::Ntk => "ntk",
                Parameterization::Standard => "standard",
            }
        )?;
        writeln!(out, "use_bias {}", u8::from(self.biases.is_some()))?;
        writeln!(out, "sigma {:016x} {:016x}", self.sigma_w.to_bits(), self.sigma_b.to_bits())?;
        writeln!(out, "data le-f64")?;
        for w in &self.weights {
            for v in w.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(bs) = &self.biases {
            for b in bs {
                for v in b {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<MLPModel> {
        let bytes = std::fs::read(path)?;
        let mut reader = std::io::BufReader::new(&bytes[..]);
        let mut header = String::new();
        // 7 header lines, then raw little-endian f64 data
        for _ in 0..7 {
            let mut line = Vec::new();
            let mut byte = [0u8; 1];
            loop {
                reader.read_exact(&mut byte).map_err(|_| bad("unexpected end of header"))?;
                if byte[0] == b'\n' {
                    break;
                }
                line.push(byte[0]);
            }
            header.push_str(std::str::from_utf8(&line).map_err(|_| bad("non-utf8 header"))?);
            header.push('\n');
        }
        let mut lines = header.lines();
        let magic = lines.next().ok_or_else(|| bad("missing magic"))?;
        if magic != "l2flow-checkpoint v1" {
            return Err(bad(&format!("unsupported checkpoint header `{magic}`")));
        }
        let widths: Vec<usize> = field(lines.next(), "widths")?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad("bad width")))
            .collect::<Result<_>>()?;
        let activation: Activation = field(lines.next(), "activation")?.parse()?;
        let parameterization: Parameterization = field(lines.next(), "parameterization")?.parse()?;
        let use_bias = field(lines.next(), "use_bias")? == "1";
        let sigma_line = field(lines.next(), "sigma")?;
        let mut sig = sigma_line.split_whitespace();
        let sigma_w = f64::from_bits(
            u64::from_str_radix(sig.next().ok_or_else(|| bad("missing sigma_w"))?, 16)
                .map_err(|_| bad("bad sigma_w bits"))?,
        );
        let sigma_b = f64::from_bits(
            u64::from_str_radix(sig.next().ok_or_else(|| bad("missing sigma_b"))?, 16)
                .map_err(|_| bad("bad sigma_b bits"))?,
        );
        if field(lines.next(), "data")? != "le-f64" {
            return Err(bad("unsupported data encoding"));
        }

        let mut read_f64s = |count: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; count * 8];
            reader.read_exact(&mut buf).map_err(|_| bad("truncated weight data"))?;
            Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let mut weights = Vec::new();
        for l in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            weights.push(Mat::from_vec(fan_out, fan_in, read_f64s(fan_out * fan_in)?)?);
        }
        let biases = if use_bias {
            let mut bs = Vec::new();
            for l in 0..widths.len() - 1 {
                bs.push(read_f64s(widths[l + 1])?);
            }
            Some(bs)
        } else {
            None
        };
        Ok(MLPModel {
            layer_widths: widths,
            weights,
            biases,
            activation,
            parameterization,
            sigma_w,
            sigma_b,
        })
    }
}

fn bad(msg: &str) -> Error {
    Error::Checkpoint(msg.into())
}

fn field<'a>(line: Option<&'a str>, key: &str) -> Result<&'a str> {
    let line = line.ok_or_else(|| bad(&format!("missing `{key}` line")))?;
    line.strip_prefix(key)
        .map(str::trim)
        .ok_or_else(|| bad(&format!("expected `{key}` line, got `{line}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(widths: &[usize], act: Activation, param: Parameterization, seed: u64) -> MLPModel {
        MLPModel::init(widths, act, param, 2.0_f64.sqrt(), 0.0, false, seed)
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = model(&[4, 8, 1], Activation::Relu, Parameterization::Ntk, 5);
        let b = model(&[4, 8, 1], Activation::Relu, Parameterization::Ntk, 5);
        assert_eq!(a.weights, b.weights);
        let c = model(&[4, 8, 1], Activation::Relu, Parameterization::Ntk, 6);
        assert_ne!(a.weights, c.weights);
    }

    #[test]
    fn single_layer_linear_is_dot_product() {
        let mut m = model(&[2, 1], Activation::Linear, Parameterization::Standard, 0);
        m.weights[0] = Mat::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        assert_eq!(m.forward(&[3.0, 4.0])[0], 11.0);

        let mut m = MLPModel::init(&[2, 1], Activation::Linear, Parameterization::Ntk, 1.0, 0.0, false, 0);
        m.weights[0] = Mat::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        // ntk mode multiplies by sigma_w / sqrt(fan_in) = 1/sqrt(2)
        assert!((m.forward(&[3.0, 4.0])[0] - 11.0 / 2.0_f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zero_input_bias_free_relu_gives_zero() {
        let m = model(&[5, 16, 16, 1], Activation::Relu, Parameterization::Ntk, 3);
        assert_eq!(m.forward(&[0.0; 5])[0], 0.0);
    }

    #[test]
    fn doubling_weights_of_depth3_scales_by_8() {
        let m = model(&[4, 8, 8, 1], Activation::Relu, Parameterization::Ntk, 7);
        let x = [0.3, -0.2, 0.9, 0.1];
        let f = m.forward(&x)[0];
        let f2 = m.scaled_params(2.0).forward(&x)[0];
        assert!((f2 - 8.0 * f).abs() < 1e-12 * f.abs().max(1.0));
    }

    #[test]
    fn linear_model_gradient_is_input() {
        let m = model(&[3, 1], Activation::Linear, Parameterization::Standard, 2);
        let g = m.grad_param(&[0.5, -1.5, 2.0], 0);
        assert_eq!(g.weights[0].as_slice(), &[0.5, -1.5, 2.0]);
    }

    fn finite_diff_grad(m: &MLPModel, x: &[f64], idx: usize) -> GradientBundle {
        let h = 1e-5;
        let mut g = GradientBundle::zeros_like(m);
        for l in 0..m.weights.len() {
            for p in 0..m.weights[l].rows() * m.weights[l].cols() {
                let mut mp = m.clone();
                mp.weights[l].as_mut_slice()[p] += h;
                let mut mm = m.clone();
                mm.weights[l].as_mut_slice()[p] -= h;
                g.weights[l].as_mut_slice()[p] =
                    (mp.forward(x)[idx] - mm.forward(x)[idx]) / (2.0 * h);
            }
        }
        g
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let m = model(&[4, 8, 8, 1], Activation::Relu, Parameterization::Ntk, 11);
        let x = [0.7, -0.3, 0.45, -0.8];
        let g = m.grad_param(&x, 0);
        let fd = finite_diff_grad(&m, &x, 0);
        for (a, b) in g.iter_flat().zip(fd.iter_flat()) {
            assert!(
                (a - b).abs() < 1e-6f64.max(1e-4 * a.abs()),
                "backprop {a} vs finite diff {b}"
            );
        }
    }

    #[test]
    fn backprop_matches_finite_differences_multioutput_standard() {
        let m = MLPModel::init(&[3, 6, 4], Activation::Relu, Parameterization::Standard, 1.2, 0.0, false, 13);
        let x = [0.2, -1.1, 0.6];
        for idx in 0..4 {
            let g = m.grad_param(&x, idx);
            let fd = finite_diff_grad(&m, &x, idx);
            for (a, b) in g.iter_flat().zip(fd.iter_flat()) {
                assert!((a - b).abs() < 1e-6f64.max(1e-4 * a.abs()));
            }
        }
    }

    #[test]
    fn biased_gradient_matches_finite_differences() {
        let m = MLPModel::init(&[3, 5, 2], Activation::Relu, Parameterization::Ntk, 1.0, 0.7, true, 17);
        let x = [0.4, 0.1, -0.9];
        let g = m.grad_param(&x, 1);
        let h = 1e-5;
        let bs = m.biases.as_ref().unwrap();
        for l in 0..bs.len() {
            for p in 0..bs[l].len() {
                let mut mp = m.clone();
                mp.biases.as_mut().unwrap()[l][p] += h;
                let mut mm = m.clone();
                mm.biases.as_mut().unwrap()[l][p] -= h;
                let fd = (mp.forward(&x)[1] - mm.forward(&x)[1]) / (2.0 * h);
                let bp = g.biases.as_ref().unwrap()[l][p];
                assert!((bp - fd).abs() < 1e-6f64.max(1e-4 * bp.abs()));
            }
        }
    }

    #[test]
    fn empirical_ntk_linear_model_is_scaled_gram() {
        let m = MLPModel::init(&[3, 1], Activation::Linear, Parameterization::Ntk, 1.5, 0.0, false, 0);
        let xs = Mat::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.5, -1.0, 1.0]]).unwrap();
        let theta = m.empirical_ntk(&xs, 0).unwrap();
        // gradient of (sigma_w/sqrt(3)) w.x is (sigma_w/sqrt(3)) x
        let s2 = 1.5 * 1.5 / 3.0;
        for i in 0..2 {
            for j in 0..2 {
                let want = s2 * dot(xs.row(i), xs.row(j));
                assert!((theta[(i, j)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empirical_ntk_matches_per_sample_gradients() {
        let m = model(&[4, 7, 6, 1], Activation::Relu, Parameterization::Ntk, 23);
        let mut xs = Mat::zeros(5, 4);
        for i in 0..5 {
            for j in 0..4 {
                xs[(i, j)] = ((i * 4 + j) as f64 * 0.37).sin();
            }
        }
        let theta = m.empirical_ntk(&xs, 0).unwrap();
        for i in 0..5 {
            let gi = m.grad_param(xs.row(i), 0);
            for j in 0..5 {
                let gj = m.grad_param(xs.row(j), 0);
                assert!(
                    (theta[(i, j)] - gi.dot(&gj)).abs() < 1e-10,
                    "factorized kernel disagrees with gradient dot at ({i},{j})"
                );
            }
            // diagonal is the squared gradient norm
            assert!((theta[(i, i)] - gi.norm_sq()).abs() < 1e-10);
            assert!(theta[(i, i)] >= 0.0);
        }
        let tr = m.empirical_ntk_trace(&xs, 0);
        let want: f64 = (0..5).map(|i| theta[(i, i)]).sum();
        assert!((tr - want).abs() < 1e-10);
    }

    #[test]
    fn empirical_ntk_is_psd() {
        use crate::numerics::eig_sym;
        let m = model(&[6, 12, 1], Activation::Relu, Parameterization::Ntk, 29);
        let mut xs = Mat::zeros(10, 6);
        for (i, v) in xs.as_mut_slice().iter_mut().enumerate() {
            *v = ((i as f64) * 0.61).cos();
        }
        let theta = m.empirical_ntk(&xs, 0).unwrap();
        let trace = theta.mat().trace();
        let es = eig_sym(&theta).unwrap();
        for &g in &es.values {
            assert!(g >= -1e-8 * trace, "kernel eigenvalue {g} below PSD tolerance");
        }
    }

    #[test]
    fn empirical_ntk_cap() {
        let m = model(&[2, 4, 1], Activation::Relu, Parameterization::Ntk, 0);
        let xs = Mat::zeros(9, 2);
        assert!(matches!(
            m.empirical_ntk_capped(&xs, 0, 8),
            Err(Error::KernelCapExceeded { n: 9, cap: 8 })
        ));
    }

    #[test]
    fn euler_identity_order0() {
        // linear f = theta . x: theta . grad f = f exactly (k = 1)
        let m = model(&[3, 1], Activation::Linear, Parameterization::Standard, 4);
        let r = m.euler_residual(&[1.0, 2.0, -0.5], 0).unwrap();
        assert!(r < 1e-12);

        // 2-layer bias-free relu: theta . grad f = 2 f
        let m = model(&[4, 16, 1], Activation::Relu, Parameterization::Ntk, 5);
        let r = m.euler_residual(&[0.9, -0.4, 0.2, 0.7], 0).unwrap();
        assert!(r < 1e-10, "order-0 residual {r}");
    }

    #[test]
    fn euler_identity_order1() {
        let m = model(&[3, 8, 8, 1], Activation::Relu, Parameterization::Ntk, 6);
        let r = m.euler_residual(&[0.8, -0.6, 0.3], 1).unwrap();
        assert!(r < 1e-4, "order-1 residual {r}");
    }

    #[test]
    fn homogeneity_residuals() {
        let m = model(&[4, 8, 1], Activation::Relu, Parameterization::Ntk, 8);
        let x = [0.2, 0.5, -0.7, 1.1];
        assert_eq!(m.homogeneity_residual(&x, 1.0).unwrap(), 0.0);
        // k = 2: scaling weights by 2 scales f by 4
        let f = m.forward(&x)[0];
        let f2 = m.scaled_params(2.0).forward(&x)[0];
        assert!((f2 - 4.0 * f).abs() < 1e-12 * f.abs().max(1.0));
        // k = 3 at a = 0.5: f / 8
        let m3 = model(&[4, 8, 8, 1], Activation::Relu, Parameterization::Ntk, 9);
        let f = m3.forward(&x)[0];
        let fh = m3.scaled_params(0.5).forward(&x)[0];
        assert!((fh - f / 8.0).abs() < 1e-12 * f.abs().max(1.0));
        assert!(m3.homogeneity_residual(&x, 0.5).unwrap() < 1e-12);
    }

    #[test]
    fn homogeneity_rejects_bias_and_bad_scale() {
        let m = MLPModel::init(&[2, 4, 1], Activation::Relu, Parameterization::Ntk, 1.0, 0.5, true, 0);
        assert!(matches!(m.homogeneity_residual(&[1.0, 1.0], 2.0), Err(Error::BiasedModel)));
        assert!(matches!(m.euler_residual(&[1.0, 1.0], 0), Err(Error::BiasedModel)));
        let m = model(&[2, 4, 1], Activation::Relu, Parameterization::Ntk, 0);
        assert!(matches!(
            m.homogeneity_residual(&[1.0, 1.0], 0.0),
            Err(Error::NonPositiveScale(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = MLPModel::init(&[5, 9, 3], Activation::Relu, Parameterization::Standard, 1.7, 0.3, true, 31);
        let path = std::env::temp_dir().join("l2flow_ckpt_test");
        m.save(&path).unwrap();
        let loaded = MLPModel::load(&path).unwrap();
        assert_eq!(m.layer_widths, loaded.layer_widths);
        assert_eq!(m.activation, loaded.activation);
        assert_eq!(m.parameterization, loaded.parameterization);
        assert_eq!(m.sigma_w.to_bits(), loaded.sigma_w.to_bits());
        assert_eq!(m.sigma_b.to_bits(), loaded.sigma_b.to_bits());
        assert_eq!(m.weights, loaded.weights);
        assert_eq!(m.biases, loaded.biases);
    }
}
