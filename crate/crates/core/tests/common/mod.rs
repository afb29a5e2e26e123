//! Oracles and generators shared by the integration tests.

#![allow(dead_code)]

use rand::Rng;
use transnet::model::{Architecture, LayerSpec, ModelParams};
use transnet::{Padding, Tensor};

/// `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-12)` over the whole gradient.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

/// Central differences of a scalar function, step `h`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn with_data(t: &Tensor, data: &[f64]) -> Tensor {
    Tensor::new(t.shape().to_vec(), data.to_vec()).unwrap()
}

/// Direct nested-loop cross-correlation with zero padding `pad`; `C×H×W`
/// input, `O×C×k×k` kernels.
pub fn naive_conv(x: &Tensor, k: &Tensor, b: &Tensor, pad: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, ks) = (k.shape()[0], k.shape()[2]);
    let oh = h + 2 * pad - ks + 1;
    let ow = w + 2 * pad - ks + 1;
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for i in 0..oh {
            for j in 0..ow {
                let mut s = b.data()[oc];
                for ic in 0..c {
                    for u in 0..ks {
                        for v in 0..ks {
                            let (y, z) = ((i + u) as isize - pad as isize, (j + v) as isize - pad as isize);
                            if y < 0 || z < 0 || y >= h as isize || z >= w as isize {
                                continue;
                            }
                            s += x.data()[(ic * h + y as usize) * w + z as usize]
                                * k.data()[((oc * c + ic) * ks + u) * ks + v];
                        }
                    }
                }
                out[(oc * oh + i) * ow + j] = s;
            }
        }
    }
    Tensor::new(vec![o, oh, ow], out).unwrap()
}

/// Rotation by 90° counter-clockwise of the last two axes, written directly.
pub fn rot90_ccw(x: &Tensor) -> Tensor {
    let s = x.shape();
    let n = s[s.len() - 1];
    let outer = x.len() / (n * n);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..n {
            for j in 0..n {
                out[o * n * n + i * n + j] = x.data()[o * n * n + j * n + (n - 1 - i)];
            }
        }
    }
    Tensor::new(s.to_vec(), out).unwrap()
}

/// Mirror of the last axis.
pub fn mirror(x: &Tensor) -> Tensor {
    let s = x.shape();
    let n = s[s.len() - 1];
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        row.reverse();
    }
    Tensor::new(s.to_vec(), out).unwrap()
}

/// Random architecture with `1..=4` conv layers and `0..=2` pooling stages
/// that accepts `input_size` inputs.
pub fn random_architecture<R: Rng>(rng: &mut R, input_size: usize) -> Architecture {
    loop {
        let n_layers = rng.gen_range(1..=4);
        let n_pools = rng.gen_range(0..=2usize.min(n_layers));
        let mut pool_at: Vec<usize> = (0..n_layers).collect();
        for i in (1..pool_at.len()).rev() {
            pool_at.swap(i, rng.gen_range(0..=i));
        }
        pool_at.truncate(n_pools);
        let layers = (0..n_layers)
            .map(|l| LayerSpec {
                out_channels: rng.gen_range(1..=4),
                kernel_size: [1, 3, 5][rng.gen_range(0..3)],
                padding: if rng.gen_bool(0.25) { Padding::Valid } else { Padding::Same },
                relu: rng.gen_bool(0.8),
                pool_after: pool_at.contains(&l),
            })
            .collect();
        let arch = Architecture {
            in_channels: rng.gen_range(1..=3),
            input_size,
            layers,
            num_classes: rng.gen_range(2..=4),
        };
        if let Ok(probe) = arch.init_params(1, rng) {
            if probe.output_size(input_size).is_ok() {
                return arch;
            }
        }
    }
}

/// Parameters with every tensor entry uniform in `[-1, 1]` (biases included).
pub fn random_params<R: Rng>(arch: &Architecture, heads: usize, rng: &mut R) -> ModelParams {
    let mut p = arch.init_params(heads, rng).unwrap();
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    p
}
