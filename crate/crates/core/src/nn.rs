//! Dense layers with explicit backward passes, plus parameter visiting.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;
use crate::tensor::{gemm, matmul, matmul_acc, Mat};

/// Visits every trainable tensor with a stable, unique, dotted name.
pub trait Parameters<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<T>));

    fn named(&self) -> Vec<(String, &Mat<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, m| out.push((n, m)));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Mat<T>)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |n, m| out.push((n, m)));
        out
    }

    fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }

    fn zero_all(&mut self) {
        self.visit_mut("", &mut |_, m| m.fill(T::zero()));
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn randn<T: Scalar, R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Mat<T> {
    Mat::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z * std)
    })
}

/// Low-rank update `scale * (x A) B` attached to a linear map.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T> {
    pub a: Mat<T>,
    pub b: Mat<T>,
    pub scale: T,
}

impl<T: Scalar> LoraAdapter<T> {
    /// `A` Gaussian, `B` zero, so the adapted map starts equal to the base.
    pub fn new<R: Rng>(d_in: usize, d_out: usize, rank: usize, alpha: f64, rng: &mut R) -> Self {
        assert!(rank >= 1, "LoRA rank must be at least 1");
        Self {
            a: randn(d_in, rank, 1.0 / (d_in as f64).sqrt(), rng),
            b: Mat::zeros(rank, d_out),
            scale: T::of(alpha / rank as f64),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.cols
    }

    /// Explicit `scale * A B`.
    pub fn delta(&self) -> Mat<T> {
        let mut d = matmul(self.a.view(), self.b.view());
        d.scale(self.scale);
        d
    }
}

/// `y = x W + b (+ scale * x A B)`, with `W` stored `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Mat<T>,
    pub bias: Mat<T>,
    pub lora: Option<LoraAdapter<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            weight: randn(d_in, d_out, 1.0 / (d_in as f64).sqrt(), rng),
            bias: Mat::zeros(1, d_out),
            lora: None,
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Mat::zeros(d_in, d_out),
            bias: Mat::zeros(1, d_out),
            lora: None,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols
    }

    /// Forward pass; also returns `x A` when an adapter is attached.
    pub fn forward(&self, x: &Mat<T>) -> (Mat<T>, Option<Mat<T>>) {
        let mut y = matmul(x.view(), self.weight.view());
        y.add_row_broadcast(&self.bias);
        let hidden = self.lora.as_ref().map(|l| {
            let xa = matmul(x.view(), l.a.view());
            gemm(l.scale, xa.view(), l.b.view(), T::one(), y.view_mut());
            xa
        });
        (y, hidden)
    }

    pub fn apply(&self, x: &Mat<T>) -> Mat<T> {
        self.forward(x).0
    }

    /// Accumulates parameter gradients into `grad`; returns `dL/dx` when
    /// requested.
    pub fn backward(
        &self,
        x: &Mat<T>,
        hidden: Option<&Mat<T>>,
        dy: &Mat<T>,
        grad: &mut Linear<T>,
        need_dx: bool,
    ) -> Option<Mat<T>> {
        matmul_acc(x.t(), dy.view(), &mut grad.weight);
        dy.col_sums_into(&mut grad.bias);
        let mut dx = need_dx.then(|| matmul(dy.view(), self.weight.t()));
        if let (Some(l), Some(gl)) = (&self.lora, grad.lora.as_mut()) {
            let xa = hidden.expect("adapter forward cache");
            // dB = s (xA)^T dy ; d(xA) = s dy B^T ; dA = x^T d(xA)
            gemm(l.scale, xa.t(), dy.view(), T::one(), gl.b.view_mut());
            let mut dxa = matmul(dy.view(), l.b.t());
            dxa.scale(l.scale);
            matmul_acc(x.t(), dxa.view(), &mut gl.a);
            if let Some(dx) = dx.as_mut() {
                matmul_acc(dxa.view(), l.a.t(), dx);
            }
        }
        dx
    }

    pub fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            lora: self.lora.as_ref().map(|l| LoraAdapter {
                a: l.a.cast(),
                b: l.b.cast(),
                scale: U::of(l.scale.as_f64()),
            }),
        }
    }

    /// Weight with the adapter folded in.
    pub fn merged_weight(&self) -> Mat<T> {
        let mut w = self.weight.clone();
        if let Some(l) = &self.lora {
            w.add_assign(&l.delta());
        }
        w
    }
}

impl<T: Scalar> Parameters<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
        if let Some(l) = &self.lora {
            f(join(prefix, "lora_a"), &l.a);
            f(join(prefix, "lora_b"), &l.b);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
        if let Some(l) = &mut self.lora {
            f(join(prefix, "lora_a"), &mut l.a);
            f(join(prefix, "lora_b"), &mut l.b);
        }
    }
}

/// Tiles a `k -> d` input projection to `2k -> d` so that
/// `W' [a; b] = W a + W b`.
pub fn tile_input_projection<T: Scalar>(base: &Linear<T>) -> Linear<T> {
    let (k, d) = (base.d_in(), base.d_out());
    let mut weight = Mat::zeros(2 * k, d);
    weight.data[..k * d].copy_from_slice(&base.weight.data);
    weight.data[k * d..].copy_from_slice(&base.weight.data);
    Linear {
        weight,
        bias: base.bias.clone(),
        lora: None,
    }
}

/// Widens a `d -> c` output projection to `d -> 2c`: the first `c` outputs
/// copy the base map, the remaining `c` start at zero.
pub fn widen_output_projection<T: Scalar>(base: &Linear<T>) -> Linear<T> {
    let (d, c) = (base.d_in(), base.d_out());
    let mut weight = Mat::zeros(d, 2 * c);
    for r in 0..d {
        weight.row_mut(r)[..c].copy_from_slice(base.weight.row(r));
    }
    let mut bias = Mat::zeros(1, 2 * c);
    bias.data[..c].copy_from_slice(&base.bias.data);
    Linear {
        weight,
        bias,
        lora: None,
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Mat<T>,
    pub beta: Mat<T>,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    pub xhat: Mat<T>,
    pub inv_std: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Mat::from_vec(1, d, vec![T::one(); d]),
            beta: Mat::zeros(1, d),
        }
    }

    pub fn cast<U: Scalar>(&self) -> LayerNorm<U> {
        LayerNorm {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
        }
    }

    pub fn forward(&self, x: &Mat<T>) -> (Mat<T>, LayerNormCache<T>) {
        let d = x.cols;
        let n = T::of(d as f64);
        let eps = T::of(LAYER_NORM_EPS);
        let mut xhat = Mat::zeros(x.rows, d);
        let mut y = Mat::zeros(x.rows, d);
        let mut inv_std = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
            let is = (var + eps).sqrt().recip();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for (o, v) in xh.iter_mut().zip(row) {
                *o = (*v - mean) * is;
            }
            let yr = &mut y.data[r * d..(r + 1) * d];
            for c in 0..d {
                yr[c] = xhat.data[r * d + c] * self.gamma.data[c] + self.beta.data[c];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: &Mat<T>, grad: &mut LayerNorm<T>) -> Mat<T> {
        let d = dy.cols;
        let n = T::of(d as f64);
        let mut dx = Mat::zeros(dy.rows, d);
        let mut dxhat = vec![T::zero(); d];
        for r in 0..dy.rows {
            let dyr = dy.row(r);
            let xh = cache.xhat.row(r);
            for c in 0..d {
                grad.gamma.data[c] += dyr[c] * xh[c];
                grad.beta.data[c] += dyr[c];
                dxhat[c] = dyr[c] * self.gamma.data[c];
            }
            let mean_d = dxhat.iter().copied().sum::<T>() / n;
            let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| *a * *b).sum::<T>() / n;
            let is = cache.inv_std[r];
            for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                *o = is * (dxhat[c] - mean_d - xh[c] * mean_dx);
            }
        }
        dx
    }
}

impl<T: Scalar> Parameters<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<T>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Columns of an orthonormal `rows x cols` matrix (`cols <= rows`) obtained
/// by Gram-Schmidt on Gaussian samples.
pub fn orthonormal_columns<T: Scalar, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Mat<T> {
    assert!(cols <= rows, "cannot fit {cols} orthonormal columns in R^{rows}");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    Mat::from_fn(rows, cols, |r, c| T::of(basis[c][r]))
}
