//! Fixed-topology multilayer perceptrons with exact reverse-mode gradients.
//!
//! Every network is a chain of dense layers. Hidden layers apply the
//! configured activation, the output layer is always linear. Batched entry
//! points take row-major `(batch, dim)` matrices; gradients with respect to
//! parameters are summed over the batch (a vector-Jacobian product with the
//! supplied upstream rows).
//!
//! Parameters flatten layer by layer: the `(in, out)` weight matrix in
//! row-major order followed by the bias vector. Gradient vectors use the same
//! layout.

use std::io::{BufRead, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{check_len, Error, Result};

/// Nonlinearity applied after every hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    /// `z / (1 + |z|)`; smooth like tanh at a fraction of the cost.
    Softsign,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Softsign => "softsign",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "softsign" => Ok(Activation::Softsign),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Parse(format!("unknown activation '{other}'"))),
        }
    }

    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Softsign => z / (1.0 + z.abs()),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Softsign => {
                let d = 1.0 + z.abs();
                1.0 / (d * d)
            }
            Activation::Identity => 1.0,
        }
    }
}

/// A dense feed-forward network.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    /// Per layer, shape `(in, out)`.
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    activation: Activation,
}

/// Intermediate values of a batched forward pass, consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::Contract(
            "layer_dims needs at least an input and an output size".into(),
        ));
    }
    if layer_dims.iter().any(|&d| d == 0) {
        return Err(Error::Contract("layer sizes must be positive".into()));
    }
    Ok(())
}

impl Mlp {
    /// Uniform fan-in initialization: every weight and bias of a layer with
    /// `n` inputs is drawn from `U(-1/sqrt(n), 1/sqrt(n))`.
    pub fn new<R: Rng + ?Sized>(
        layer_dims: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound));
            let b = Array1::from_shape_fn(fan_out, |_| rng.random_range(-bound..bound));
            weights.push(w);
            biases.push(b);
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            activation,
        })
    }

    pub fn zeros(layer_dims: &[usize], activation: Activation) -> Result<Self> {
        validate_dims(layer_dims)?;
        let weights = layer_dims
            .windows(2)
            .map(|p| Array2::zeros((p[0], p[1])))
            .collect();
        let biases = layer_dims.windows(2).map(|p| Array1::zeros(p[1])).collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            activation,
        })
    }

    /// Builds a network from explicit layers. Weight matrices are `(in, out)`.
    pub fn from_layers(
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Contract(
                "need one bias vector per weight matrix".into(),
            ));
        }
        let mut layer_dims = vec![weights[0].nrows()];
        for (w, b) in weights.iter().zip(&biases) {
            check_len("layer chaining", *layer_dims.last().unwrap(), w.nrows())?;
            check_len("bias length", w.ncols(), b.len())?;
            layer_dims.push(w.ncols());
        }
        validate_dims(&layer_dims)?;
        let net = Self {
            layer_dims,
            weights,
            biases,
            activation,
        };
        net.check_finite()?;
        Ok(net)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self, layer: usize) -> &Array2<f64> {
        &self.weights[layer]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut Array2<f64> {
        &mut self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &Array1<f64> {
        &self.biases[layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Array1<f64> {
        &mut self.biases[layer]
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims
            .windows(2)
            .map(|p| p[0] * p[1] + p[1])
            .sum()
    }

    fn check_finite(&self) -> Result<()> {
        let finite = self
            .weights
            .iter()
            .all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()));
        if finite {
            Ok(())
        } else {
            Err(Error::Numeric("network parameters contain NaN or inf".into()))
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    /// Overwrites every parameter from a flat vector in [`Mlp::flatten`] order.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_len("flat parameter vector", self.num_params(), flat.len())?;
        let mut it = flat.iter().copied();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.iter_mut().for_each(|x| *x = it.next().unwrap());
            b.iter_mut().for_each(|x| *x = it.next().unwrap());
        }
        Ok(())
    }

    pub fn unflatten(layer_dims: &[usize], activation: Activation, flat: &[f64]) -> Result<Self> {
        let mut net = Self::zeros(layer_dims, activation)?;
        net.set_flat(flat)?;
        Ok(net)
    }

    /// Visits every parameter in flatten order.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(usize, &mut f64)) {
        let mut i = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for x in w.iter_mut().chain(b.iter_mut()) {
                f(i, x);
                i += 1;
            }
        }
    }

    /// `self <- tau * online + (1 - tau) * self`, elementwise.
    pub fn lerp_towards(&mut self, online: &Mlp, tau: f64) -> Result<()> {
        if self.layer_dims != online.layer_dims {
            return Err(Error::Contract("networks differ in layer_dims".into()));
        }
        for (t, o) in self.weights.iter_mut().zip(&online.weights) {
            t.zip_mut_with(o, |t, &o| *t = tau * o + (1.0 - tau) * *t);
        }
        for (t, o) in self.biases.iter_mut().zip(&online.biases) {
            t.zip_mut_with(o, |t, &o| *t = tau * o + (1.0 - tau) * *t);
        }
        Ok(())
    }

    /// Single-input forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_len("mlp input", self.input_dim(), input.len())?;
        let x = ArrayView2::from_shape((1, input.len()), input).expect("contiguous row");
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_len("mlp input", self.input_dim(), x.ncols())?;
        let last = self.weights.len() - 1;
        let mut h = x.dot(&self.weights[0]) + &self.biases[0];
        if last > 0 {
            h.mapv_inplace(|z| self.activation.apply(z));
        }
        for l in 1..=last {
            h = h.dot(&self.weights[l]) + &self.biases[l];
            if l < last {
                h.mapv_inplace(|z| self.activation.apply(z));
            }
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<ForwardCache> {
        check_len("mlp input", self.input_dim(), x.ncols())?;
        let last = self.weights.len() - 1;
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut pre = Vec::with_capacity(self.weights.len());
        let mut h = x.to_owned();
        for l in 0..=last {
            let z = h.dot(&self.weights[l]) + &self.biases[l];
            let next = if l < last {
                z.mapv(|v| self.activation.apply(v))
            } else {
                z.clone()
            };
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        Ok(ForwardCache {
            inputs,
            pre,
            output: h,
        })
    }

    /// Vector-Jacobian products for a cached batch. Returns the parameter
    /// gradient summed over rows and the per-row input gradient.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<f64>,
    ) -> Result<(Vec<f64>, Array2<f64>)> {
        check_len("upstream rows", cache.output.nrows(), upstream.nrows())?;
        check_len("upstream width", self.output_dim(), upstream.ncols())?;
        let last = self.weights.len() - 1;
        let mut layer_grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(last + 1);
        let mut delta = upstream.to_owned();
        for l in (0..=last).rev() {
            if l < last {
                delta.zip_mut_with(&cache.pre[l], |d, &z| *d *= self.activation.derivative(z));
            }
            let gw = cache.inputs[l].t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            delta = delta.dot(&self.weights[l].t());
            layer_grads.push((gw, gb));
        }
        let mut flat = Vec::with_capacity(self.num_params());
        for (gw, gb) in layer_grads.iter().rev() {
            flat.extend(gw.iter().copied());
            flat.extend(gb.iter().copied());
        }
        Ok((flat, delta))
    }

    /// Gradients of `<upstream, f(input)>` with respect to parameters and input.
    pub fn vjp(&self, input: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len("mlp input", self.input_dim(), input.len())?;
        check_len("upstream width", self.output_dim(), upstream.len())?;
        let x = ArrayView2::from_shape((1, input.len()), input).expect("contiguous row");
        let u = ArrayView2::from_shape((1, upstream.len()), upstream).expect("contiguous row");
        let cache = self.forward_cached(x)?;
        let (gp, gx) = self.backward(&cache, u)?;
        Ok((gp, gx.into_raw_vec_and_offset().0))
    }

    /// Writes one network block of the text checkpoint format.
    pub fn write_block<W: Write>(&self, role: &str, out: &mut W) -> Result<()> {
        writeln!(out, "network {role}")?;
        writeln!(out, "activation {}", self.activation.name())?;
        let dims: Vec<String> = self.layer_dims.iter().map(|d| d.to_string()).collect();
        writeln!(out, "layer_dims {}", dims.join(" "))?;
        writeln!(out, "params {}", self.num_params())?;
        for x in self.flatten() {
            // `{:?}` prints the shortest representation that parses back exactly.
            writeln!(out, "{x:?}")?;
        }
        writeln!(out, "end")?;
        Ok(())
    }
}

/// Magic first line of the checkpoint format.
pub const CHECKPOINT_HEADER: &str = "qsm-mlp-checkpoint 1";

/// Serializes tagged networks into the versioned text checkpoint format:
///
/// ```text
/// qsm-mlp-checkpoint 1
/// network <role>
/// activation <relu|tanh|identity>
/// layer_dims <d0> <d1> ...
/// params <count>
/// <one double per line, flatten order>
/// end
/// ```
pub fn write_checkpoint<W: Write>(out: &mut W, nets: &[(&str, &Mlp)]) -> Result<()> {
    writeln!(out, "{CHECKPOINT_HEADER}")?;
    for (role, net) in nets {
        net.write_block(role, out)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Vec<(String, Mlp)>> {
    let mut lines = input.lines();
    let mut next = || -> Result<Option<String>> {
        match lines.next() {
            Some(line) => Ok(Some(line?.trim().to_string())),
            None => Ok(None),
        }
    };
    match next()? {
        Some(h) if h == CHECKPOINT_HEADER => {}
        other => {
            return Err(Error::Parse(format!(
                "bad checkpoint header {other:?}, expected '{CHECKPOINT_HEADER}'"
            )))
        }
    }
    let field = |line: Option<String>, key: &str| -> Result<String> {
        let line = line.ok_or_else(|| Error::Parse(format!("missing '{key}' line")))?;
        line.strip_prefix(key)
            .map(|rest| rest.trim().to_string())
            .ok_or_else(|| Error::Parse(format!("expected '{key}', found '{line}'")))
    };
    let mut nets = Vec::new();
    while let Some(line) = next()? {
        if line.is_empty() {
            continue;
        }
        let role = field(Some(line), "network")?;
        let activation = Activation::parse(&field(next()?, "activation")?)?;
        let dims = field(next()?, "layer_dims")?
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse(format!("layer_dims: {e}")))?;
        let count: usize = field(next()?, "params")?
            .parse()
            .map_err(|e| Error::Parse(format!("params: {e}")))?;
        let mut flat = Vec::with_capacity(count);
        for _ in 0..count {
            let tok = next()?.ok_or_else(|| Error::Parse("truncated parameter list".into()))?;
            flat.push(
                tok.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("parameter '{tok}': {e}")))?,
            );
        }
        if next()?.as_deref() != Some("end") {
            return Err(Error::Parse(format!("network '{role}' missing 'end'")));
        }
        let net = Mlp::unflatten(&dims, activation, &flat)?;
        net.check_finite()?;
        nets.push((role, net));
    }
    Ok(nets)
}

/// Adaptive-moment optimizer state for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn for_net(net: &Mlp, lr: f64) -> Self {
        Self::new(net.num_params(), lr)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// One bias-corrected descent step on `params` along `grads`.
    pub fn step(&mut self, params: &mut Mlp, grads: &[f64]) -> Result<()> {
        check_len("adam gradient", self.m.len(), grads.len())?;
        check_len("adam parameters", self.m.len(), params.num_params())?;
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "gradient coordinate {i} is {}",
                grads[i]
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        params.for_each_param_mut(|i, p| {
            let g = grads[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn affine() -> Mlp {
        Mlp::from_layers(vec![array![[2.0]]], vec![array![1.0]], Activation::Identity).unwrap()
    }

    /// Straightforward per-neuron forward pass, written independently of the
    /// batched matrix path.
    fn naive_forward(net: &Mlp, input: &[f64]) -> Vec<f64> {
        let mut h = input.to_vec();
        let last = net.num_layers() - 1;
        for l in 0..=last {
            let w = net.weights(l);
            let b = net.bias(l);
            let mut next = vec![0.0; w.ncols()];
            for (j, out) in next.iter_mut().enumerate() {
                let mut acc = b[j];
                for (i, hi) in h.iter().enumerate() {
                    acc += hi * w[[i, j]];
                }
                *out = if l < last {
                    match net.activation() {
                        Activation::Relu => acc.max(0.0),
                        Activation::Tanh => acc.tanh(),
                        Activation::Softsign => acc / (1.0 + acc.abs()),
                        Activation::Identity => acc,
                    }
                } else {
                    acc
                };
            }
            h = next;
        }
        h
    }

    #[test]
    fn zero_weights_output_bias() {
        let mut net = Mlp::zeros(&[3, 4, 2], Activation::Relu).unwrap();
        *net.bias_mut(1) = array![0.25, -1.5];
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.25, -1.5]);
    }

    #[test]
    fn affine_layer_forward() {
        assert_eq!(affine().forward(&[3.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn forward_matches_naive_reimplementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = Mlp::new(&[3, 8, 8, 2], Activation::Relu, &mut rng).unwrap();
        let input = [0.3, -1.2, 0.8];
        let got = net.forward(&input).unwrap();
        let want = naive_forward(&net, &input);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-14, "{g} vs {w}");
        }
    }

    #[test]
    fn input_dimension_mismatch_is_shape_error() {
        let net = affine();
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(Error::Shape { .. })));
        assert!(matches!(net.vjp(&[1.0], &[1.0, 1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn affine_gradients() {
        let (gp, gx) = affine().vjp(&[3.0], &[1.0]).unwrap();
        assert_eq!(gx, vec![2.0]);
        assert_eq!(gp, vec![3.0, 1.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[4, 6, 6, 3], Activation::Tanh, &mut rng).unwrap();
        let (gp, gx) = net.vjp(&[0.1, 0.2, -0.3, 0.4], &[0.0; 3]).unwrap();
        assert!(gp.iter().chain(&gx).all(|&g| g == 0.0));
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = Mlp::new(&[3, 5, 4, 2], Activation::Tanh, &mut rng).unwrap();
        let input = [0.4, -0.7, 1.1];
        let upstream = [0.6, -1.3];
        let (gp, gx) = net.vjp(&input, &upstream).unwrap();
        let objective = |n: &Mlp, x: &[f64]| -> f64 {
            naive_forward(n, x)
                .iter()
                .zip(&upstream)
                .map(|(a, b)| a * b)
                .sum()
        };
        let h = 1e-5;
        let flat = net.flatten();
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            plus[i] += h;
            let mut minus = flat.clone();
            minus[i] -= h;
            let fp = objective(&Mlp::unflatten(&[3, 5, 4, 2], Activation::Tanh, &plus).unwrap(), &input);
            let fm = objective(&Mlp::unflatten(&[3, 5, 4, 2], Activation::Tanh, &minus).unwrap(), &input);
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - gp[i]).abs() <= 1e-5 * fd.abs().max(1e-3), "param {i}: {fd} vs {}", gp[i]);
        }
        for i in 0..input.len() {
            let mut plus = input;
            plus[i] += h;
            let mut minus = input;
            minus[i] -= h;
            let fd = (objective(&net, &plus) - objective(&net, &minus)) / (2.0 * h);
            assert!((fd - gx[i]).abs() <= 1e-5 * fd.abs().max(1e-3));
        }
    }

    #[test]
    fn batch_gradient_is_sum_of_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[2, 4, 1], Activation::Relu, &mut rng).unwrap();
        let x = array![[0.5, -0.2], [1.0, 0.3]];
        let u = array![[1.0], [2.0]];
        let cache = net.forward_cached(x.view()).unwrap();
        let (gp, _) = net.backward(&cache, u.view()).unwrap();
        let (g0, _) = net.vjp(&[0.5, -0.2], &[1.0]).unwrap();
        let (g1, _) = net.vjp(&[1.0, 0.3], &[2.0]).unwrap();
        for i in 0..gp.len() {
            assert!((gp[i] - g0[i] - g1[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Mlp::new(&[3, 7, 2], Activation::Relu, &mut rng).unwrap();
        let b = Mlp::new(&[2, 1], Activation::Identity, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("q1", &a), ("psi", &b)]).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "q1");
        assert_eq!(back[0].1, a);
        assert_eq!(back[1].1, b);
    }

    #[test]
    fn checkpoint_rejects_wrong_header() {
        let err = read_checkpoint("qsm-mlp-checkpoint 9\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse(_)));
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = Mlp::new(&[2, 3, 1], Activation::Relu, &mut rng).unwrap();
        let before = net.clone();
        let mut opt = Adam::for_net(&net, 1e-3);
        let zeros = vec![0.0; net.num_params()];
        opt.step(&mut net, &zeros).unwrap();
        assert_eq!(net, before);
        assert_eq!(opt.step_count(), 1);
        assert!(opt.first_moment().iter().all(|&m| m == 0.0));
        assert!(opt.second_moment().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m = 0.1, v = 0.001; bias correction gives m_hat = v_hat = 1, so the
        // step is lr / (1 + eps).
        let mut net = Mlp::zeros(&[1, 1], Activation::Identity).unwrap();
        let mut opt = Adam::new(2, 1e-3);
        opt.step(&mut net, &[1.0, 0.0]).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((net.weights(0)[[0, 0]] - expected).abs() < 1e-15);
        assert_eq!(net.bias(0)[0], 0.0);
    }

    #[test]
    fn adam_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::new(&[2, 3, 1], Activation::Relu, &mut rng).unwrap();
        let grads: Vec<f64> = (0..net.num_params()).map(|i| (i as f64).sin()).collect();
        let run = || {
            let mut n = net.clone();
            let mut o = Adam::for_net(&n, 3e-4);
            o.step(&mut n, &grads).unwrap();
            (n, o)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut net = Mlp::zeros(&[1, 1], Activation::Identity).unwrap();
        let mut opt = Adam::new(2, 1e-3);
        let err = opt.step(&mut net, &[f64::NAN, 0.0]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn lerp_towards_rejects_shape_mismatch() {
        let mut a = Mlp::zeros(&[2, 1], Activation::Identity).unwrap();
        let b = Mlp::zeros(&[3, 1], Activation::Identity).unwrap();
        assert!(a.lerp_towards(&b, 0.5).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn flatten_unflatten_round_trip(seed in any::<u64>(), hidden in 1usize..6) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let dims = [3, hidden, hidden + 1, 2];
                let net = Mlp::new(&dims, Activation::Relu, &mut rng).unwrap();
                let back = Mlp::unflatten(&dims, Activation::Relu, &net.flatten()).unwrap();
                prop_assert_eq!(back, net);
            }

            #[test]
            fn forward_is_deterministic(seed in any::<u64>(), x in proptest::collection::vec(-3.0f64..3.0, 3)) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let net = Mlp::new(&[3, 6, 2], Activation::Tanh, &mut rng).unwrap();
                let a = net.forward(&x).unwrap();
                let b = net.forward(&x).unwrap();
                prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                                b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            }
        }
    }
}
