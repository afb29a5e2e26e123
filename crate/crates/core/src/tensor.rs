//! Dense row-major `f64` tensors and the differentiable primitives the
//! networks are built from.
//!
//! Every operation works on a single sample (`C×H×W` feature maps, `C`
//! vectors). Batching is handled by the callers. Reductions always run in
//! row-major order so results are reproducible bit for bit.

use rand::Rng;

use crate::error::{input_err, shape_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(shape_err!("extents must be positive, got {:?}", shape));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Panics if an extent is zero.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "extents must be positive, got {:?}",
            shape
        );
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Values drawn uniformly from `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        if bound > 0.0 {
            for v in t.data.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sub-tensor at index `i` of the leading axis.
    pub fn outer(&self, i: usize) -> Result<Tensor> {
        if self.shape.len() < 2 || i >= self.shape[0] {
            return Err(shape_err!("outer index {} out of range for {:?}", i, self.shape));
        }
        let inner: usize = self.shape[1..].iter().product();
        Ok(Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| shape_err!("cannot stack zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(shape_err!("stack: {:?} vs {:?}", t.shape, first.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        self.map(|v| v * alpha)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    fn chw(&self, what: &str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(shape_err!("{} expects C×H×W, got {:?}", what, self.shape)),
        }
    }
}

/// Spatial padding of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(k-1)/2` on every border; odd kernels keep the input size.
    Same,
    /// No padding; output shrinks by `k-1`.
    Valid,
}

impl Padding {
    pub fn amount(self, kernel_size: usize) -> usize {
        match self {
            Padding::Same => (kernel_size - 1) / 2,
            Padding::Valid => 0,
        }
    }

    pub fn output_size(self, input: usize, kernel_size: usize) -> usize {
        input + 2 * self.amount(kernel_size) + 1 - kernel_size
    }
}

/// Row-major `c = a·b + beta·c` with optional transposition of either operand.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m×k, k×n and m×n elements and the
    // strides above address only those elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeometry {
    c_in: usize,
    c_out: usize,
    size: usize,
    k: usize,
    pad: usize,
    out: usize,
}

fn conv_geometry(input: &Tensor, kernels: &Tensor, padding: Padding) -> Result<ConvGeometry> {
    let (c_in, h, w) = input.chw("conv2d input")?;
    if h != w {
        return Err(shape_err!("conv2d needs square maps, got {}×{}", h, w));
    }
    let [c_out, kc, kh, kw] = kernels.shape()[..] else {
        return Err(shape_err!(
            "conv2d kernels must be C_out×C_in×k×k, got {:?}",
            kernels.shape()
        ));
    };
    if kc != c_in {
        return Err(shape_err!(
            "conv2d: input has {} channels, kernels expect {}",
            c_in,
            kc
        ));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(shape_err!("conv2d kernels must be odd and square, got {}×{}", kh, kw));
    }
    if padding == Padding::Valid && kh > h {
        return Err(shape_err!("valid conv2d: kernel {} larger than map {}", kh, h));
    }
    Ok(ConvGeometry {
        c_in,
        c_out,
        size: h,
        k: kh,
        pad: padding.amount(kh),
        out: padding.output_size(h, kh),
    })
}

fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let n = g.out * g.out;
    let mut cols = vec![0.0; g.c_in * g.k * g.k * n];
    for c in 0..g.c_in {
        let plane = &input[c * g.size * g.size..(c + 1) * g.size * g.size];
        for a in 0..g.k {
            for b in 0..g.k {
                let row = ((c * g.k + a) * g.k + b) * n;
                for i in 0..g.out {
                    let si = (i + a) as isize - g.pad as isize;
                    if si < 0 || si >= g.size as isize {
                        continue;
                    }
                    for j in 0..g.out {
                        let sj = (j + b) as isize - g.pad as isize;
                        if sj >= 0 && sj < g.size as isize {
                            cols[row + i * g.out + j] =
                                plane[si as usize * g.size + sj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let n = g.out * g.out;
    let mut img = vec![0.0; g.c_in * g.size * g.size];
    for c in 0..g.c_in {
        let plane = &mut img[c * g.size * g.size..(c + 1) * g.size * g.size];
        for a in 0..g.k {
            for b in 0..g.k {
                let row = ((c * g.k + a) * g.k + b) * n;
                for i in 0..g.out {
                    let si = (i + a) as isize - g.pad as isize;
                    if si < 0 || si >= g.size as isize {
                        continue;
                    }
                    for j in 0..g.out {
                        let sj = (j + b) as isize - g.pad as isize;
                        if sj >= 0 && sj < g.size as isize {
                            plane[si as usize * g.size + sj as usize] += cols[row + i * g.out + j];
                        }
                    }
                }
            }
        }
    }
    img
}

/// Stride-1 cross-correlation of a `C_in×H×H` map with `C_out×C_in×k×k`
/// kernels plus a per-output-channel bias.
pub fn conv2d_forward(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    padding: Padding,
) -> Result<Tensor> {
    let g = conv_geometry(input, kernels, padding)?;
    if bias.shape() != [g.c_out] {
        return Err(shape_err!("conv2d bias must be [{}], got {:?}", g.c_out, bias.shape()));
    }
    let n = g.out * g.out;
    let cols = im2col(input.data(), &g);
    let mut out = vec![0.0; g.c_out * n];
    for (o, chunk) in out.chunks_mut(n).enumerate() {
        chunk.fill(bias.data()[o]);
    }
    gemm(
        g.c_out,
        g.c_in * g.k * g.k,
        n,
        kernels.data(),
        false,
        &cols,
        false,
        1.0,
        &mut out,
    );
    Tensor::new(vec![g.c_out, g.out, g.out], out)
}

/// Gradients of [`conv2d_forward`] with respect to input, kernels and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    padding: Padding,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = conv_geometry(input, kernels, padding)?;
    if grad_out.shape() != [g.c_out, g.out, g.out] {
        return Err(shape_err!(
            "conv2d grad_out must be {:?}, got {:?}",
            [g.c_out, g.out, g.out],
            grad_out.shape()
        ));
    }
    let n = g.out * g.out;
    let ckk = g.c_in * g.k * g.k;
    let cols = im2col(input.data(), &g);

    let grad_bias: Vec<f64> = grad_out.data().chunks(n).map(|c| c.iter().sum()).collect();

    let mut grad_k = vec![0.0; g.c_out * ckk];
    gemm(g.c_out, n, ckk, grad_out.data(), false, &cols, true, 0.0, &mut grad_k);

    let mut grad_cols = vec![0.0; ckk * n];
    gemm(ckk, g.c_out, n, kernels.data(), true, grad_out.data(), false, 0.0, &mut grad_cols);
    let grad_in = col2im(&grad_cols, &g);

    Ok((
        Tensor::new(input.shape().to_vec(), grad_in)?,
        Tensor::new(kernels.shape().to_vec(), grad_k)?,
        Tensor::new(vec![g.c_out], grad_bias)?,
    ))
}

/// Mean over non-overlapping 2×2 blocks.
pub fn avgpool2x2_forward(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.chw("avgpool2x2")?;
    if h != w || h % 2 != 0 {
        return Err(shape_err!("avgpool2x2 needs even square maps, got {}×{}", h, w));
    }
    let o = h / 2;
    let x = input.data();
    let mut out = Vec::with_capacity(c * o * o);
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..o {
            for j in 0..o {
                let p = base + 2 * i * w + 2 * j;
                out.push(0.25 * (x[p] + x[p + 1] + x[p + w] + x[p + w + 1]));
            }
        }
    }
    Tensor::new(vec![c, o, o], out)
}

pub fn avgpool2x2_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let [c, h, w] = input_shape[..] else {
        return Err(shape_err!("avgpool2x2 input shape must be C×H×W"));
    };
    if h != w || h % 2 != 0 || grad_out.shape() != [c, h / 2, w / 2] {
        return Err(shape_err!(
            "avgpool2x2 backward: input {:?}, grad {:?}",
            input_shape,
            grad_out.shape()
        ));
    }
    let o = h / 2;
    let g = grad_out.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[ch * h * w + i * w + j] = 0.25 * g[ch * o * o + (i / 2) * o + j / 2];
            }
        }
    }
    Tensor::new(input_shape.to_vec(), out)
}

/// Global average pooling: per-channel spatial mean.
pub fn gap_forward(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.chw("gap")?;
    let n = h * w;
    let out = input
        .data()
        .chunks(n)
        .map(|plane| plane.iter().sum::<f64>() / n as f64)
        .collect();
    Tensor::new(vec![c], out)
}

pub fn gap_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let [c, h, w] = input_shape[..] else {
        return Err(shape_err!("gap input shape must be C×H×W"));
    };
    if grad_out.shape() != [c] {
        return Err(shape_err!("gap backward: grad {:?} for {} channels", grad_out.shape(), c));
    }
    let n = h * w;
    let mut out = Vec::with_capacity(c * n);
    for &g in grad_out.data() {
        out.extend(std::iter::repeat_n(g / n as f64, n));
    }
    Tensor::new(input_shape.to_vec(), out)
}

fn fc_check(input: &Tensor, weight: &Tensor) -> Result<(usize, usize)> {
    let [k, c] = weight.shape()[..] else {
        return Err(shape_err!("fc weight must be K×C, got {:?}", weight.shape()));
    };
    if input.shape() != [c] {
        return Err(shape_err!("fc input must be [{}], got {:?}", c, input.shape()));
    }
    Ok((k, c))
}

/// `weight · input + bias`
pub fn fc_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (k, c) = fc_check(input, weight)?;
    if bias.shape() != [k] {
        return Err(shape_err!("fc bias must be [{}], got {:?}", k, bias.shape()));
    }
    let x = input.data();
    let out = weight
        .data()
        .chunks(c)
        .zip(bias.data())
        .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
        .collect();
    Tensor::new(vec![k], out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn fc_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (k, c) = fc_check(input, weight)?;
    if grad_out.shape() != [k] {
        return Err(shape_err!("fc grad_out must be [{}], got {:?}", k, grad_out.shape()));
    }
    let x = input.data();
    let g = grad_out.data();
    let mut grad_in = vec![0.0; c];
    let mut grad_w = Vec::with_capacity(k * c);
    for (row, &go) in weight.data().chunks(c).zip(g) {
        for (gi, w) in grad_in.iter_mut().zip(row) {
            *gi += go * w;
        }
        grad_w.extend(x.iter().map(|v| go * v));
    }
    Ok((
        Tensor::new(vec![c], grad_in)?,
        Tensor::new(vec![k, c], grad_w)?,
        grad_out.clone(),
    ))
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// `pre_activation` is the input that was fed to [`relu_forward`].
pub fn relu_backward(pre_activation: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if pre_activation.shape() != grad_out.shape() {
        return Err(shape_err!(
            "relu backward: {:?} vs {:?}",
            pre_activation.shape(),
            grad_out.shape()
        ));
    }
    let data = pre_activation
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(pre_activation.shape().to_vec(), data)
}

pub fn softmax(logits: &Tensor) -> Tensor {
    let max = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.map(|v| (v - max).exp());
    let z = exp.sum();
    exp.scale(1.0 / z)
}

/// Cross-entropy of `softmax(logits)` against `label`, with its gradient
/// `softmax(logits) - onehot(label)`.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    if logits.ndim() != 1 {
        return Err(shape_err!("logits must be a vector, got {:?}", logits.shape()));
    }
    let k = logits.len();
    if label >= k {
        return Err(input_err!("label {} out of range for {} classes", label, k));
    }
    let x = logits.data();
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let loss = lse - x[label];
    let mut grad = logits.map(|v| (v - lse).exp());
    grad.data_mut()[label] -= 1.0;
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, padding: Padding) -> Tensor {
        let (ci, n, _) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, k) = (w.shape()[0], w.shape()[2]);
        let p = padding.amount(k) as isize;
        let o = padding.output_size(n, k);
        let mut out = Tensor::zeros(&[co, o, o]);
        for oc in 0..co {
            for i in 0..o {
                for j in 0..o {
                    let mut s = b.data()[oc];
                    for c in 0..ci {
                        for a in 0..k {
                            for bb in 0..k {
                                let si = i as isize + a as isize - p;
                                let sj = j as isize + bb as isize - p;
                                if si >= 0 && sj >= 0 && (si as usize) < n && (sj as usize) < n {
                                    s += x.data()[(c * n + si as usize) * n + sj as usize]
                                        * w.data()[((oc * ci + c) * k + a) * k + bb];
                                }
                            }
                        }
                    }
                    out.data_mut()[(oc * o + i) * o + j] = s;
                }
            }
        }
        out
    }

    fn x1() -> Tensor {
        Tensor::new(vec![1, 3, 3], vec![1., 1., 1., 0., 0., 0., 0., 0., 0.]).unwrap()
    }

    #[test]
    fn valid_conv_of_row_pattern_with_itself() {
        let x = x1();
        let w = x.clone().reshape(vec![1, 1, 3, 3]).unwrap();
        let out = conv2d_forward(&x, &w, &Tensor::zeros(&[1]), Padding::Valid).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data()[0], 3.0);
    }

    #[test]
    fn zero_kernels_give_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[2, 5, 5], 1.0, &mut rng);
        let w = Tensor::zeros(&[3, 2, 3, 3]);
        let b = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let out = conv2d_forward(&x, &w, &b, Padding::Same).unwrap();
        for (c, plane) in out.data().chunks(25).enumerate() {
            assert!(plane.iter().all(|&v| v == b.data()[c]));
        }
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for padding in [Padding::Same, Padding::Valid] {
            let x = Tensor::uniform(&[2, 5, 5], 1.0, &mut rng);
            let w = Tensor::uniform(&[3, 2, 3, 3], 1.0, &mut rng);
            let b = Tensor::uniform(&[3], 1.0, &mut rng);
            let fast = conv2d_forward(&x, &w, &b, padding).unwrap();
            let slow = naive_conv(&x, &w, &b, padding);
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[2, 5, 5]);
        let w = Tensor::zeros(&[3, 4, 3, 3]);
        let err = conv2d_forward(&x, &w, &Tensor::zeros(&[3]), Padding::Same);
        assert!(matches!(err, Err(crate::Error::Shape(_))));
        let err = conv2d_backward(&x, &w, &Tensor::zeros(&[3, 5, 5]), Padding::Same);
        assert!(matches!(err, Err(crate::Error::Shape(_))));
    }

    #[test]
    fn conv_backward_zero_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[2, 4, 4], 1.0, &mut rng);
        let w = Tensor::uniform(&[3, 2, 3, 3], 1.0, &mut rng);
        let (gi, gk, gb) =
            conv2d_backward(&x, &w, &Tensor::zeros(&[3, 4, 4]), Padding::Same).unwrap();
        assert!(gi.data().iter().chain(gk.data()).chain(gb.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_grad_gives_receptive_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform(&[2, 5, 5], 1.0, &mut rng);
        let w = Tensor::uniform(&[1, 2, 3, 3], 1.0, &mut rng);
        let mut go = Tensor::zeros(&[1, 5, 5]);
        // interior pixel (2, 3): receptive field rows 1..=3, cols 2..=4
        go.data_mut()[2 * 5 + 3] = 1.0;
        let (_, gk, gb) = conv2d_backward(&x, &w, &go, Padding::Same).unwrap();
        for c in 0..2 {
            for a in 0..3 {
                for b in 0..3 {
                    let expect = x.data()[(c * 5 + 1 + a) * 5 + 2 + b];
                    assert_eq!(gk.data()[(c * 3 + a) * 3 + b], expect);
                }
            }
        }
        assert_eq!(gb.data(), &[1.0]);
    }

    #[test]
    fn pooling_basics() {
        let x = Tensor::full(&[2, 4, 4], 1.5);
        assert!(avgpool2x2_forward(&x).unwrap().data().iter().all(|&v| v == 1.5));
        let x = Tensor::new(vec![1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(avgpool2x2_forward(&x).unwrap().data(), &[2.5]);
        assert!(avgpool2x2_forward(&Tensor::zeros(&[1, 3, 3])).is_err());
    }

    #[test]
    fn gap_is_channel_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform(&[2, 4, 4], 1.0, &mut rng);
        let g = gap_forward(&x).unwrap();
        for c in 0..2 {
            let m: f64 = x.data()[c * 16..(c + 1) * 16].iter().sum::<f64>() / 16.0;
            assert!((g.data()[c] - m).abs() < 1e-15);
        }
        let g = gap_forward(&Tensor::full(&[1, 3, 3], -2.0)).unwrap();
        assert!((g.data()[0] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn fc_cases() {
        let x = Tensor::new(vec![2], vec![0.0, 3.0]).unwrap();
        let id = Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap();
        assert_eq!(fc_forward(&x, &id, &Tensor::zeros(&[2])).unwrap(), x);
        let swap = Tensor::new(vec![2, 2], vec![0., 1., 1., 0.]).unwrap();
        assert_eq!(fc_forward(&x, &swap, &Tensor::zeros(&[2])).unwrap().data(), &[3.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::uniform(&[4], 1.0, &mut rng);
        let w = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let b = Tensor::uniform(&[3], 1.0, &mut rng);
        let y = fc_forward(&x, &w, &b).unwrap();
        for r in 0..3 {
            let mut s = b.data()[r];
            for c in 0..4 {
                s += w.data()[r * 4 + c] * x.data()[c];
            }
            assert!((y.data()[r] - s).abs() < 1e-14);
        }
        assert!(fc_forward(&Tensor::zeros(&[5]), &w, &b).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let (l, _) = softmax_cross_entropy(&Tensor::zeros(&[7]), 3).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-14);
        let logits = Tensor::new(vec![2], vec![3.0, 0.0]).unwrap();
        let (l, g) = softmax_cross_entropy(&logits, 0).unwrap();
        assert!((l - (1.0 + (-3f64).exp()).ln()).abs() < 1e-14);
        assert!((l - 0.04859).abs() < 1e-5);
        assert!((g.sum()).abs() < 1e-15);
        assert!(matches!(
            softmax_cross_entropy(&logits, 2),
            Err(crate::Error::Input(_))
        ));
    }

    #[test]
    fn tensor_construction_checks() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        let t = Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.outer(1).unwrap().data(), &[3., 4., 5.]);
        let s = Tensor::stack(&[t.clone(), t.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 3]);
    }
}
