//! Convolutional backbone, fully connected heads, and the multi-head model
//! that pairs every head with an input transformation.

use rand::Rng;

use crate::dihedral::{DihedralElement, TransformationSet};
use crate::error::{input_err, shape_err, Result};
use crate::tensor::{self, Padding, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `C_out×C_in×k×k`
    pub kernels: Tensor,
    pub bias: Tensor,
    pub padding: Padding,
    pub relu: bool,
    pub pool_after: bool,
}

impl ConvLayer {
    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.shape()[2]
    }

    /// The 3D kernel (`C_in×k×k`) producing output channel `o`.
    pub fn kernel(&self, o: usize) -> Tensor {
        self.kernels.outer(o).expect("output channel in range")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    /// `K×C_last`
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Convolution stack followed by global average pooling and one or more
/// fully connected heads of identical shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    conv_layers: Vec<ConvLayer>,
    heads: Vec<Head>,
}

impl ModelParams {
    pub fn new(conv_layers: Vec<ConvLayer>, heads: Vec<Head>) -> Result<Self> {
        if conv_layers.is_empty() {
            return Err(input_err!("model needs at least one convolution layer"));
        }
        if heads.is_empty() {
            return Err(input_err!("model needs at least one head"));
        }
        for (i, l) in conv_layers.iter().enumerate() {
            let s = l.kernels.shape();
            if s.len() != 4 || s[2] != s[3] || s[2] % 2 == 0 {
                return Err(shape_err!("layer {}: kernels must be C_out×C_in×k×k, k odd, got {:?}", i, s));
            }
            if l.bias.shape() != [s[0]] {
                return Err(shape_err!("layer {}: bias {:?} for {} outputs", i, l.bias.shape(), s[0]));
            }
            if i > 0 && conv_layers[i - 1].out_channels() != s[1] {
                return Err(shape_err!(
                    "layer {} expects {} input channels, previous layer gives {}",
                    i,
                    s[1],
                    conv_layers[i - 1].out_channels()
                ));
            }
        }
        let c_last = conv_layers.last().unwrap().out_channels();
        let head_shape = heads[0].weight.shape().to_vec();
        for (j, h) in heads.iter().enumerate() {
            let ws = h.weight.shape();
            if ws.len() != 2 || ws[1] != c_last || ws != head_shape.as_slice() {
                return Err(shape_err!("head {}: weight {:?}, expected [K, {}] shared by all heads", j, ws, c_last));
            }
            if h.bias.shape() != [ws[0]] {
                return Err(shape_err!("head {}: bias {:?} for {} classes", j, h.bias.shape(), ws[0]));
            }
        }
        Ok(Self { conv_layers, heads })
    }

    pub fn conv_layers(&self) -> &[ConvLayer] {
        &self.conv_layers
    }

    /// Kernel shapes may not change through this handle.
    pub fn conv_layers_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.conv_layers
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [Head] {
        &mut self.heads
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn num_classes(&self) -> usize {
        self.heads[0].weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.conv_layers[0].in_channels()
    }

    pub fn feature_dim(&self) -> usize {
        self.conv_layers.last().unwrap().out_channels()
    }

    /// Same backbone with the given heads.
    pub fn with_heads(&self, heads: Vec<Head>) -> Result<Self> {
        Self::new(self.conv_layers.clone(), heads)
    }

    /// All parameter tensors in declaration order: per layer kernels then
    /// bias, then per head weight then bias.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.conv_layers {
            out.push(&l.kernels);
            out.push(&l.bias);
        }
        for h in &self.heads {
            out.push(&h.weight);
            out.push(&h.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.conv_layers {
            out.push(&mut l.kernels);
            out.push(&mut l.bias);
        }
        for h in &mut self.heads {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        out
    }

    /// Parallel to [`tensors`](Self::tensors): true for bias vectors.
    pub fn bias_mask(&self) -> Vec<bool> {
        let n = 2 * (self.conv_layers.len() + self.heads.len());
        (0..n).map(|i| i % 2 == 1).collect()
    }

    /// Same structure, every value zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        z
    }

    /// `self += alpha * other`; both must share a structure.
    pub fn axpy(&mut self, alpha: f64, other: &ModelParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(alpha, b);
        }
    }

    pub fn scale_mut(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn count_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Parameters contributed by one head: `K×C_last + K`.
    pub fn per_head_overhead(&self) -> usize {
        let k = self.num_classes();
        k * self.feature_dim() + k
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    /// Spatial size after the backbone for an `input_size` square input.
    pub fn output_size(&self, input_size: usize) -> Result<usize> {
        let mut s = input_size;
        for (i, l) in self.conv_layers.iter().enumerate() {
            let k = l.kernel_size();
            if l.padding == Padding::Valid && k > s {
                return Err(shape_err!("layer {}: kernel {} exceeds map {}", i, k, s));
            }
            s = l.padding.output_size(s, k);
            if l.pool_after {
                if !s.is_multiple_of(2) {
                    return Err(shape_err!("layer {}: pooling needs an even map, got {}", i, s));
                }
                s /= 2;
            }
        }
        Ok(s)
    }

    /// Multiply-adds for one forward pass through the backbone and `heads` heads.
    pub fn forward_macs(&self, input_size: usize, heads: usize) -> Result<u64> {
        self.output_size(input_size)?;
        let mut s = input_size;
        let mut macs = 0u64;
        for l in &self.conv_layers {
            let k = l.kernel_size();
            s = l.padding.output_size(s, k);
            macs += (l.out_channels() * l.in_channels() * k * k * s * s) as u64;
            if l.pool_after {
                s /= 2;
            }
        }
        macs += (heads * self.num_classes() * self.feature_dim()) as u64;
        Ok(macs)
    }
}

/// One convolution stage of an [`Architecture`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub out_channels: usize,
    pub kernel_size: usize,
    pub padding: Padding,
    pub relu: bool,
    pub pool_after: bool,
}

impl LayerSpec {
    pub fn same(out_channels: usize, kernel_size: usize, pool_after: bool) -> Self {
        Self {
            out_channels,
            kernel_size,
            padding: Padding::Same,
            relu: true,
            pool_after,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub in_channels: usize,
    pub input_size: usize,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
}

impl Architecture {
    /// 3→32→64→128→128 channels, 3×3 kernels, ReLU, pooling after the first two layers.
    pub fn desk_default(in_channels: usize, input_size: usize, num_classes: usize) -> Self {
        Self {
            in_channels,
            input_size,
            layers: vec![
                LayerSpec::same(32, 3, true),
                LayerSpec::same(64, 3, true),
                LayerSpec::same(128, 3, false),
                LayerSpec::same(128, 3, false),
            ],
            num_classes,
        }
    }

    /// Parses a compact layer list such as `32p,64p,128,128`: output channels
    /// with a `p` suffix for pooling after the layer, 3×3 same kernels, ReLU.
    pub fn parse_layers(spec: &str) -> Result<Vec<LayerSpec>> {
        spec.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                let (digits, pool) = match s.strip_suffix('p') {
                    Some(d) => (d, true),
                    None => (s, false),
                };
                let c: usize = digits
                    .parse()
                    .map_err(|_| input_err!("bad layer spec {:?}", s))?;
                if c == 0 {
                    return Err(input_err!("layer with zero channels"));
                }
                Ok(LayerSpec::same(c, 3, pool))
            })
            .collect()
    }

    pub fn layers_string(&self) -> String {
        let parts: Vec<String> = self
            .layers
            .iter()
            .map(|l| format!("{}{}", l.out_channels, if l.pool_after { "p" } else { "" }))
            .collect();
        parts.join(",")
    }

    /// Conv kernels and head weights uniform in `±1/√fan_in`, biases zero.
    pub fn init_params<R: Rng + ?Sized>(&self, num_heads: usize, rng: &mut R) -> Result<ModelParams> {
        if self.layers.is_empty() {
            return Err(input_err!("architecture has no convolution layers"));
        }
        if num_heads == 0 || self.num_classes == 0 || self.in_channels == 0 {
            return Err(input_err!("heads, classes and input channels must be positive"));
        }
        let mut c_in = self.in_channels;
        let mut conv_layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            if l.kernel_size % 2 == 0 || l.out_channels == 0 {
                return Err(input_err!("kernel size must be odd and channels positive"));
            }
            let fan_in = (c_in * l.kernel_size * l.kernel_size) as f64;
            conv_layers.push(ConvLayer {
                kernels: Tensor::uniform(
                    &[l.out_channels, c_in, l.kernel_size, l.kernel_size],
                    1.0 / fan_in.sqrt(),
                    rng,
                ),
                bias: Tensor::zeros(&[l.out_channels]),
                padding: l.padding,
                relu: l.relu,
                pool_after: l.pool_after,
            });
            c_in = l.out_channels;
        }
        let heads = (0..num_heads)
            .map(|_| Head {
                weight: Tensor::uniform(&[self.num_classes, c_in], 1.0 / (c_in as f64).sqrt(), rng),
                bias: Tensor::zeros(&[self.num_classes]),
            })
            .collect();
        let params = ModelParams::new(conv_layers, heads)?;
        params.output_size(self.input_size)?;
        Ok(params)
    }
}

/// Intermediate values of one backbone pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BackboneTrace {
    stages: Vec<StageTrace>,
    final_map_shape: Vec<usize>,
}

#[derive(Clone, Debug)]
struct StageTrace {
    input: Tensor,
    conv_out: Tensor,
    act_shape: Vec<usize>,
}

fn check_input(params: &ModelParams, x: &Tensor) -> Result<()> {
    match x.shape() {
        [c, h, w] if *c == params.in_channels() && h == w => Ok(()),
        s => Err(shape_err!(
            "input must be {}×H×H, got {:?}",
            params.in_channels(),
            s
        )),
    }
}

/// Conv stack and global average pooling: the shared feature extractor.
pub fn backbone_forward(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    check_input(params, x)?;
    let mut h = x.clone();
    for l in &params.conv_layers {
        h = tensor::conv2d_forward(&h, &l.kernels, &l.bias, l.padding)?;
        if l.relu {
            h = tensor::relu_forward(&h);
        }
        if l.pool_after {
            h = tensor::avgpool2x2_forward(&h)?;
        }
    }
    tensor::gap_forward(&h)
}

pub fn backbone_forward_traced(params: &ModelParams, x: &Tensor) -> Result<(Tensor, BackboneTrace)> {
    check_input(params, x)?;
    let mut stages = Vec::with_capacity(params.conv_layers.len());
    let mut h = x.clone();
    for l in &params.conv_layers {
        let conv_out = tensor::conv2d_forward(&h, &l.kernels, &l.bias, l.padding)?;
        let act = if l.relu {
            tensor::relu_forward(&conv_out)
        } else {
            conv_out.clone()
        };
        let act_shape = act.shape().to_vec();
        let next = if l.pool_after {
            tensor::avgpool2x2_forward(&act)?
        } else {
            act
        };
        stages.push(StageTrace {
            input: std::mem::replace(&mut h, next),
            conv_out,
            act_shape,
        });
    }
    let features = tensor::gap_forward(&h)?;
    Ok((
        features,
        BackboneTrace {
            stages,
            final_map_shape: h.shape().to_vec(),
        },
    ))
}

/// Accumulates `scale ×` the backbone gradient for `grad_features` into `grads`.
pub fn backbone_backward(
    params: &ModelParams,
    trace: &BackboneTrace,
    grad_features: &Tensor,
    scale: f64,
    grads: &mut ModelParams,
) -> Result<()> {
    let mut g = tensor::gap_backward(&trace.final_map_shape, grad_features)?;
    for (i, (l, st)) in params.conv_layers.iter().zip(&trace.stages).enumerate().rev() {
        if l.pool_after {
            g = tensor::avgpool2x2_backward(&st.act_shape, &g)?;
        }
        if l.relu {
            g = tensor::relu_backward(&st.conv_out, &g)?;
        }
        let (gi, gk, gb) = tensor::conv2d_backward(&st.input, &l.kernels, &g, l.padding)?;
        let gl = &mut grads.conv_layers[i];
        gl.kernels.axpy(scale, &gk);
        gl.bias.axpy(scale, &gb);
        g = gi;
    }
    Ok(())
}

pub fn head_forward(params: &ModelParams, head: usize, features: &Tensor) -> Result<Tensor> {
    let h = params
        .heads
        .get(head)
        .ok_or_else(|| input_err!("head {} out of range ({} heads)", head, params.num_heads()))?;
    tensor::fc_forward(features, &h.weight, &h.bias)
}

/// Logits of a single-head model on `x`.
pub fn base_forward(params: &ModelParams, head: usize, x: &Tensor) -> Result<Tensor> {
    let f = backbone_forward(params, x)?;
    head_forward(params, head, &f)
}

/// How [`TransNetModel::forward_full`] combines the heads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HeadCombine {
    #[default]
    Logits,
    Probabilities,
}

impl std::str::FromStr for HeadCombine {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logits" => Ok(Self::Logits),
            "probs" | "probabilities" => Ok(Self::Probabilities),
            _ => Err(input_err!("head combine must be logits or probs, got {:?}", s)),
        }
    }
}

impl std::fmt::Display for HeadCombine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Logits => "logits",
            Self::Probabilities => "probs",
        })
    }
}

/// Parameters plus the transformation each head classifies.
#[derive(Clone, Debug, PartialEq)]
pub struct TransNetModel {
    params: ModelParams,
    transforms: TransformationSet,
    pub combine: HeadCombine,
}

impl TransNetModel {
    pub fn new(params: ModelParams, transforms: TransformationSet) -> Result<Self> {
        if params.num_heads() != transforms.len() {
            return Err(input_err!(
                "{} heads but {} transformations",
                params.num_heads(),
                transforms.len()
            ));
        }
        Ok(Self {
            params,
            transforms,
            combine: HeadCombine::Logits,
        })
    }

    /// Single identity head.
    pub fn base(params: ModelParams) -> Result<Self> {
        Self::new(params, TransformationSet::identity())
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn transforms(&self) -> &TransformationSet {
        &self.transforms
    }

    pub fn num_heads(&self) -> usize {
        self.params.num_heads()
    }

    pub fn transform(&self, head: usize) -> Result<DihedralElement> {
        self.transforms
            .get(head)
            .ok_or_else(|| input_err!("head {} out of range ({} heads)", head, self.num_heads()))
    }

    /// Head `head` on an input the caller has already transformed.
    pub fn forward_head(&self, head: usize, x: &Tensor) -> Result<Tensor> {
        self.transform(head)?;
        base_forward(&self.params, head, x)
    }

    /// Every head on its own transform of `x`, in head order.
    pub fn head_logits(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.transforms
            .elements()
            .iter()
            .enumerate()
            .map(|(j, t)| base_forward(&self.params, j, &t.apply_spatial(x)?))
            .collect()
    }

    /// Mean over heads of head `j` applied to `t_j(x)`.
    pub fn forward_full(&self, x: &Tensor) -> Result<Tensor> {
        let per_head = self.head_logits(x)?;
        let m = per_head.len() as f64;
        let mut acc = Tensor::zeros(per_head[0].shape());
        for l in &per_head {
            match self.combine {
                HeadCombine::Logits => acc.axpy(1.0, l),
                HeadCombine::Probabilities => acc.axpy(1.0, &tensor::softmax(l)),
            }
        }
        Ok(acc.scale(1.0 / m))
    }

    /// `0.5·(forward_full(x) + forward_full(m(x)))` with `m` the horizontal flip.
    pub fn predict_with_flip_averaging(&self, x: &Tensor) -> Result<Tensor> {
        let a = self.forward_full(x)?;
        let b = self.forward_full(&DihedralElement::M.apply_spatial(x)?)?;
        Ok(a.add(&b).scale(0.5))
    }

    /// Keeps one head. With `compile`, the head's transformation is folded
    /// into the kernels so the result takes untransformed inputs.
    pub fn prune(&self, keep_head: usize, compile: bool) -> Result<TransNetModel> {
        let t = self.transform(keep_head)?;
        let head = self.params.heads[keep_head].clone();
        let single = self.params.with_heads(vec![head])?;
        let (params, transform) = if compile && !t.is_identity() {
            (compile_transformation(&single, t), DihedralElement::IDENTITY)
        } else {
            (single, t)
        };
        let mut out = TransNetModel::new(params, TransformationSet::new(vec![transform])?)?;
        out.combine = self.combine;
        Ok(out)
    }

    pub fn count_parameters(&self) -> usize {
        self.params.count_parameters()
    }
}

/// Rewrites `θ` so that evaluating on `x` equals evaluating the original on
/// `t(x)`: returns `t⁻¹(θ)`.
pub fn compile_transformation(params: &ModelParams, t: DihedralElement) -> ModelParams {
    t.inverse().apply_to_params(params)
}
