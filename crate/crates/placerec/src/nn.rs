//! Neural network building blocks on top of the autodiff tape.
//!
//! Initialization is deterministic given an RNG: weights are uniform in
//! `±1/sqrt(fan_in)`, biases start at zero, layer-norm gains at one.

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{concat_cols, Tensor};

/// Named parameter list used by the optimizer and the checkpoint writer.
pub type ParamList = Vec<(String, Tensor)>;

fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], bound: f32) -> ArrayD<f32> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Gaussian init via Box-Muller; used for the learnable queries.
pub fn normal_init(rng: &mut ChaCha8Rng, shape: &[usize], std: f32) -> ArrayD<f32> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f32 = rng.random_range(1e-7f32..1.0);
        let u2: f32 = rng.random_range(0.0f32..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f32::consts::PI * u2;
        data.push(r * theta.cos() * std);
        if data.len() < n {
            data.push(r * theta.sin() * std);
        }
    }
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Affine map `y = x W + b` with `W: [in, out]`.
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, bias: bool) -> Linear {
        let bound = 1.0 / (fan_in as f32).sqrt();
        Linear {
            weight: Tensor::param(uniform_init(rng, &[fan_in, fan_out], bound)),
            bias: bias.then(|| Tensor::param(Array1::<f32>::zeros(fan_out).into_dyn())),
        }
    }

    pub fn from_parts(weight: Tensor, bias: Option<Tensor>) -> Linear {
        Linear { weight, bias }
    }

    /// `x: [n, in] -> [n, out]`
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let y = x.matmul(&self.weight);
        match &self.bias {
            Some(b) => y.add_bias(b),
            None => y,
        }
    }

    pub fn collect_params(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f32,
}

impl LayerNorm {
    pub fn new(dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: Tensor::param(Array1::<f32>::ones(dim).into_dyn()),
            beta: Tensor::param(Array1::<f32>::zeros(dim).into_dyn()),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.layer_norm(&self.gamma, &self.beta, self.eps)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

// ---------------------------------------------------------------------------
// Multi-head attention
// ---------------------------------------------------------------------------

pub struct MhaOutput {
    pub out: Tensor,
    /// Head-averaged attention weights `[n_query, n_key]` (detached values;
    /// each row sums to one).
    pub attn: Array2<f32>,
}

/// Standard multi-head attention with separate Q/K/V/output projections.
pub struct Mha {
    pub heads: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl Mha {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, heads: usize) -> Mha {
        assert!(heads >= 1 && dim % heads == 0, "dim must divide by heads");
        Mha {
            heads,
            wq: Linear::new(rng, dim, dim, true),
            wk: Linear::new(rng, dim, dim, true),
            wv: Linear::new(rng, dim, dim, true),
            wo: Linear::new(rng, dim, dim, true),
        }
    }

    /// `query: [nq, d]`, `key/value: [nk, d]` -> `[nq, d]` plus averaged
    /// attention weights.
    pub fn forward(&self, query: &Tensor, key: &Tensor, value: &Tensor) -> MhaOutput {
        let d = query.shape()[1];
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f32).sqrt();

        let q = self.wq.forward(query);
        let k = self.wk.forward(key);
        let v = self.wv.forward(value);

        let nq = q.shape()[0];
        let nk = k.shape()[0];
        let mut head_outs = Vec::with_capacity(self.heads);
        let mut attn_sum = Array2::<f32>::zeros((nq, nk));
        for h in 0..self.heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let qh = q.slice_cols(s, e);
            let kh = k.slice_cols(s, e);
            let vh = v.slice_cols(s, e);
            let scores = qh.matmul(&kh.transpose()).scale(scale);
            let attn = scores.softmax_rows();
            attn_sum += &attn.value2();
            head_outs.push(attn.matmul(&vh));
        }
        attn_sum /= self.heads as f32;
        let merged = concat_cols(&head_outs);
        MhaOutput {
            out: self.wo.forward(&merged),
            attn: attn_sum,
        }
    }

    pub fn collect_params(&self, prefix: &str, out: &mut ParamList) {
        self.wq.collect_params(&format!("{prefix}.wq"), out);
        self.wk.collect_params(&format!("{prefix}.wk"), out);
        self.wv.collect_params(&format!("{prefix}.wv"), out);
        self.wo.collect_params(&format!("{prefix}.wo"), out);
    }
}

// ---------------------------------------------------------------------------
// Transformer encoder layer (pre-norm)
// ---------------------------------------------------------------------------

/// Pre-norm encoder layer: `x + SelfAttn(LN(x))`, then `x + FFN(LN(x))`
/// with a ReLU feed-forward.
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: Mha,
    pub ln2: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
}

impl EncoderLayer {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, heads: usize, ffn_dim: usize) -> EncoderLayer {
        EncoderLayer {
            ln1: LayerNorm::new(dim),
            attn: Mha::new(rng, dim, heads),
            ln2: LayerNorm::new(dim),
            ffn1: Linear::new(rng, dim, ffn_dim, true),
            ffn2: Linear::new(rng, ffn_dim, dim, true),
        }
    }

    /// `x: [n, d] -> [n, d]`
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let h = self.ln1.forward(x);
        let x = x.add(&self.attn.forward(&h, &h, &h).out);
        let h = self.ln2.forward(&x);
        let ff = self.ffn2.forward(&self.ffn1.forward(&h).relu());
        x.add(&ff)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut ParamList) {
        self.ln1.collect_params(&format!("{prefix}.ln1"), out);
        self.attn.collect_params(&format!("{prefix}.attn"), out);
        self.ln2.collect_params(&format!("{prefix}.ln2"), out);
        self.ffn1.collect_params(&format!("{prefix}.ffn1"), out);
        self.ffn2.collect_params(&format!("{prefix}.ffn2"), out);
    }
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

/// Odd-kernel convolution with same padding and stride 1 over `[C,H,W]` maps.
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv2d {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, k: usize) -> Conv2d {
        assert!(k % 2 == 1, "conv kernel must be odd");
        let bound = 1.0 / ((c_in * k * k) as f32).sqrt();
        Conv2d {
            weight: Tensor::param(uniform_init(rng, &[c_out, c_in, k, k], bound)),
            bias: Tensor::param(Array1::<f32>::zeros(c_out).into_dyn()),
        }
    }

    /// 3x3 kernel acting as the identity map on channels: center tap of the
    /// diagonal is one, everything else zero.
    pub fn identity_3x3(dim: usize) -> Conv2d {
        let mut w = ndarray::Array4::<f32>::zeros((dim, dim, 3, 3));
        for c in 0..dim {
            w[[c, c, 1, 1]] = 1.0;
        }
        Conv2d {
            weight: Tensor::param(w.into_dyn()),
            bias: Tensor::param(Array1::<f32>::zeros(dim).into_dyn()),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.conv2d_same(&self.weight, &self.bias)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}
