//! Named parameter store and the layer primitives used by the model: real
//! convolutions, layer normalization, PReLU, linear maps and (bi)LSTM.
//!
//! Layers are lightweight descriptors; parameters live in a [`Params`] store
//! keyed by dotted names, so counting, checkpointing and the optimizer all
//! operate on one flat map.

use indexmap::IndexMap;
use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;

use crate::kernels::{Conv2dSpec, Conv3dSpec};
use crate::tape::{Tape, Var};

pub const LN_EPS: f64 = 1e-5;

/// Ordered name -> array parameter store.
#[derive(Debug, Clone, Default)]
pub struct Params {
    entries: IndexMap<String, ArrayD<f64>>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        assert!(
            self.entries.insert(name.to_string(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.entries.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    /// Total number of trainable scalars.
    pub fn count_scalars(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }

    /// Load a parameter onto a tape as a named leaf.
    pub fn leaf(&self, tape: &mut Tape, name: &str) -> Var {
        tape.named_leaf(name, self.get(name).clone())
    }
}

/// Uniform fan-in initialization, bound 1/sqrt(fan_in).
pub fn init_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-bound..bound))
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Orthogonal square blocks stacked along the first axis: shape (blocks*n, n).
pub fn init_orthogonal_blocks(rng: &mut impl Rng, blocks: usize, n: usize) -> ArrayD<f64> {
    let mut out = Array2::zeros((blocks * n, n));
    for b in 0..blocks {
        // Gram-Schmidt on a random Gaussian matrix.
        let mut q: Vec<ndarray::Array1<f64>> = Vec::with_capacity(n);
        for _ in 0..n {
            let mut v = ndarray::Array1::from_shape_fn(n, |_| gaussian(rng));
            for u in &q {
                let proj = v.dot(u);
                v = &v - &(u * proj);
            }
            let norm = v.dot(&v).sqrt();
            q.push(v / norm.max(1e-12));
        }
        for (i, row) in q.iter().enumerate() {
            out.row_mut(b * n + i).assign(row);
        }
    }
    out.into_dyn()
}

// ---------------------------------------------------------------------------
// Real layers
// ---------------------------------------------------------------------------

/// Real 2-D convolution with optional bias over (C, F, T).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub cout: usize,
    pub cin: usize,
    pub kernel: (usize, usize),
    pub spec: Conv2dSpec,
    pub bias: bool,
}

impl Conv2d {
    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        let fan_in = self.cin / self.spec.groups * self.kernel.0 * self.kernel.1;
        params.insert(
            &format!("{}.w", self.name),
            init_uniform(rng, &[self.cout, self.cin / self.spec.groups, self.kernel.0, self.kernel.1], fan_in),
        );
        if self.bias {
            params.insert(&format!("{}.b", self.name), ArrayD::zeros(IxDyn(&[self.cout])));
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var) -> Var {
        let w = params.leaf(tape, &format!("{}.w", self.name));
        let y = tape.conv2d(x, w, self.spec);
        if self.bias {
            let b = params.leaf(tape, &format!("{}.b", self.name));
            let bb = tape.reshape(b, &[self.cout, 1, 1]);
            tape.add(y, bb)
        } else {
            y
        }
    }
}

/// Real transposed 2-D convolution; output spatial size supplied per call.
#[derive(Debug, Clone)]
pub struct ConvT2d {
    pub name: String,
    pub cout: usize,
    pub cin: usize,
    pub kernel: (usize, usize),
    pub spec: Conv2dSpec,
    pub bias: bool,
}

impl ConvT2d {
    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        let fan_in = self.cin * self.kernel.0 * self.kernel.1 / self.spec.groups;
        params.insert(
            &format!("{}.w", self.name),
            init_uniform(rng, &[self.cin, self.cout / self.spec.groups, self.kernel.0, self.kernel.1], fan_in),
        );
        if self.bias {
            params.insert(&format!("{}.b", self.name), ArrayD::zeros(IxDyn(&[self.cout])));
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var, out_hw: (usize, usize)) -> Var {
        let w = params.leaf(tape, &format!("{}.w", self.name));
        let y = tape.conv_transpose2d(x, w, self.spec, out_hw);
        if self.bias {
            let b = params.leaf(tape, &format!("{}.b", self.name));
            let bb = tape.reshape(b, &[self.cout, 1, 1]);
            tape.add(y, bb)
        } else {
            y
        }
    }
}

/// 3-D convolution over (C, D, F, T).
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub name: String,
    pub cout: usize,
    pub cin: usize,
    pub kernel: (usize, usize, usize),
    pub spec: Conv3dSpec,
    pub bias: bool,
}

impl Conv3d {
    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        let fan_in = self.cin * self.kernel.0 * self.kernel.1 * self.kernel.2;
        params.insert(
            &format!("{}.w", self.name),
            init_uniform(
                rng,
                &[self.cout, self.cin, self.kernel.0, self.kernel.1, self.kernel.2],
                fan_in,
            ),
        );
        if self.bias {
            params.insert(&format!("{}.b", self.name), ArrayD::zeros(IxDyn(&[self.cout])));
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var) -> Var {
        let w = params.leaf(tape, &format!("{}.w", self.name));
        let y = tape.conv3d(x, w, self.spec);
        if self.bias {
            let b = params.leaf(tape, &format!("{}.b", self.name));
            let bb = tape.reshape(b, &[self.cout, 1, 1, 1]);
            tape.add(y, bb)
        } else {
            y
        }
    }
}

/// Dense layer y = x·Wᵀ + b for x of shape (T, in).
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub dim_out: usize,
    pub dim_in: usize,
    pub bias: bool,
}

impl Linear {
    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        params.insert(
            &format!("{}.w", self.name),
            init_uniform(rng, &[self.dim_in, self.dim_out], self.dim_in),
        );
        if self.bias {
            params.insert(&format!("{}.b", self.name), ArrayD::zeros(IxDyn(&[self.dim_out])));
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var) -> Var {
        let w = params.leaf(tape, &format!("{}.w", self.name));
        let y = tape.matmul(x, w);
        if self.bias {
            let b = params.leaf(tape, &format!("{}.b", self.name));
            let bb = tape.reshape(b, &[1, self.dim_out]);
            tape.add(y, bb)
        } else {
            y
        }
    }
}

/// Layer normalization over every axis except the trailing time axis, with a
/// per-channel affine. Normalizing per frame keeps the layer causal.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub channels: usize,
}

impl LayerNorm {
    pub fn init(&self, params: &mut Params) {
        params.insert(&format!("{}.g", self.name), ArrayD::from_elem(IxDyn(&[self.channels]), 1.0));
        params.insert(&format!("{}.b", self.name), ArrayD::zeros(IxDyn(&[self.channels])));
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var) -> Var {
        let nd = tape.value(x).ndim();
        let mut mean = x;
        for ax in 0..nd - 1 {
            mean = tape.mean_axis(mean, ax);
        }
        let centered = tape.sub(x, mean);
        let sq = tape.mul(centered, centered);
        let mut var = sq;
        for ax in 0..nd - 1 {
            var = tape.mean_axis(var, ax);
        }
        let var_eps = tape.add_scalar(var, LN_EPS);
        let std = tape.sqrt(var_eps);
        let normed = tape.div(centered, std);
        let mut shape = vec![1usize; nd];
        shape[0] = self.channels;
        let g = params.leaf(tape, &format!("{}.g", self.name));
        let g = tape.reshape(g, &shape);
        let b = params.leaf(tape, &format!("{}.b", self.name));
        let b = tape.reshape(b, &shape);
        let scaled = tape.mul(normed, g);
        tape.add(scaled, b)
    }
}

/// Per-channel PReLU (channel axis 0).
#[derive(Debug, Clone)]
pub struct PRelu {
    pub name: String,
    pub channels: usize,
}

impl PRelu {
    pub fn init(&self, params: &mut Params) {
        params.insert(&format!("{}.a", self.name), ArrayD::from_elem(IxDyn(&[self.channels]), 0.25));
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var) -> Var {
        let a = params.leaf(tape, &format!("{}.a", self.name));
        tape.prelu(x, a)
    }
}

/// Single-layer LSTM over (T, in) -> (T, hidden). Gate order is (i, f, g, o).
#[derive(Debug, Clone)]
pub struct Lstm {
    pub name: String,
    pub dim_in: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        params.insert(
            &format!("{}.w_ih", self.name),
            init_uniform(rng, &[self.dim_in, 4 * self.hidden], self.dim_in),
        );
        params.insert(
            &format!("{}.w_hh", self.name),
            init_orthogonal_blocks(rng, 4, self.hidden)
                .into_shape(IxDyn(&[4 * self.hidden, self.hidden]))
                .unwrap()
                .permuted_axes(IxDyn(&[1, 0]))
                .as_standard_layout()
                .to_owned(),
        );
        params.insert(&format!("{}.b", self.name), ArrayD::zeros(IxDyn(&[4 * self.hidden])));
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var) -> Var {
        let t_len = tape.value(x).shape()[0];
        let h = self.hidden;
        let w_ih = params.leaf(tape, &format!("{}.w_ih", self.name));
        let w_hh = params.leaf(tape, &format!("{}.w_hh", self.name));
        let b = params.leaf(tape, &format!("{}.b", self.name));
        let bb = tape.reshape(b, &[1, 4 * h]);
        // Input projections for all frames at once.
        let xg = tape.matmul(x, w_ih);
        let xg = tape.add(xg, bb);
        let mut hs: Vec<Var> = Vec::with_capacity(t_len);
        let mut h_prev = tape.leaf(ArrayD::zeros(IxDyn(&[1, h])));
        let mut c_prev = tape.leaf(ArrayD::zeros(IxDyn(&[1, h])));
        for t in 0..t_len {
            let xt = tape.slice_axis(xg, 0, t, t + 1);
            let hg = tape.matmul(h_prev, w_hh);
            let gates = tape.add(xt, hg);
            let i_g = tape.slice_axis(gates, 1, 0, h);
            let f_g = tape.slice_axis(gates, 1, h, 2 * h);
            let g_g = tape.slice_axis(gates, 1, 2 * h, 3 * h);
            let o_g = tape.slice_axis(gates, 1, 3 * h, 4 * h);
            let i_s = tape.sigmoid(i_g);
            let f_s = tape.sigmoid(f_g);
            let g_t = tape.tanh(g_g);
            let o_s = tape.sigmoid(o_g);
            let fc = tape.mul(f_s, c_prev);
            let ig = tape.mul(i_s, g_t);
            let c = tape.add(fc, ig);
            let ct = tape.tanh(c);
            let h_new = tape.mul(o_s, ct);
            hs.push(h_new);
            h_prev = h_new;
            c_prev = c;
        }
        tape.concat(0, &hs)
    }
}

/// Bidirectional LSTM: forward and reversed passes concatenated to (T, 2*hidden).
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

impl BiLstm {
    pub fn new(name: &str, dim_in: usize, hidden: usize) -> Self {
        BiLstm {
            fwd: Lstm { name: format!("{name}.fwd"), dim_in, hidden },
            bwd: Lstm { name: format!("{name}.bwd"), dim_in, hidden },
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        self.fwd.init(params, rng);
        self.bwd.init(params, rng);
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var) -> Var {
        let f = self.fwd.forward(tape, params, x);
        let xr = tape.flip(x, 0);
        let br = self.bwd.forward(tape, params, xr);
        let b = tape.flip(br, 0);
        tape.concat(1, &[f, b])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_blocks_are_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = init_orthogonal_blocks(&mut rng, 4, 16);
        let m = m.into_dimensionality::<ndarray::Ix2>().unwrap();
        for b in 0..4 {
            let blk = m.slice(ndarray::s![b * 16..(b + 1) * 16, ..]);
            let gram = blk.dot(&blk.t());
            for i in 0..16 {
                for j in 0..16 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((gram[[i, j]] - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn layernorm_normalizes_per_frame() {
        let mut params = Params::new();
        let ln = LayerNorm { name: "ln".into(), channels: 3 };
        ln.init(&mut params);
        let mut tape = Tape::new();
        let x = tape.leaf(ArrayD::from_shape_fn(IxDyn(&[3, 4, 5]), |ix| {
            (ix[0] * 20 + ix[1] * 5 + ix[2]) as f64 * 0.37 - 2.0
        }));
        let y = ln.forward(&mut tape, &params, x);
        let yv = tape.value(y);
        for t in 0..5 {
            let frame: Vec<f64> = (0..3)
                .flat_map(|c| (0..4).map(move |f| (c, f)))
                .map(|(c, f)| yv[[c, f, t]])
                .collect();
            let mean: f64 = frame.iter().sum::<f64>() / frame.len() as f64;
            let var: f64 = frame.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / frame.len() as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn lstm_shapes_and_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = Params::new();
        let lstm = Lstm { name: "l".into(), dim_in: 6, hidden: 8 };
        lstm.init(&mut params, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(ArrayD::zeros(IxDyn(&[5, 6])));
        let y = lstm.forward(&mut tape, &params, x);
        assert_eq!(tape.value(y).shape(), &[5, 8]);
        // Zero input with zero bias keeps the state at exactly zero.
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_gradients_flow_to_all_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = Params::new();
        let lstm = Lstm { name: "l".into(), dim_in: 3, hidden: 4 };
        lstm.init(&mut params, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(ArrayD::from_shape_fn(IxDyn(&[6, 3]), |_| rng.gen_range(-1.0..1.0)));
        let y = lstm.forward(&mut tape, &params, x);
        let sq = tape.mul(y, y);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss);
        let named = tape.named_gradients(&grads);
        for name in ["l.w_ih", "l.w_hh", "l.b"] {
            let g = named.get(name).unwrap();
            assert!(g.iter().any(|&v| v != 0.0), "no gradient for {name}");
        }
    }

    #[test]
    fn bilstm_output_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = Params::new();
        let bl = BiLstm::new("b", 3, 5);
        bl.init(&mut params, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(ArrayD::from_shape_fn(IxDyn(&[7, 3]), |_| rng.gen_range(-1.0..1.0)));
        let y = bl.forward(&mut tape, &params, x);
        assert_eq!(tape.value(y).shape(), &[7, 10]);
    }

    #[test]
    fn conv_layer_bias_and_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = Params::new();
        let conv = Conv2d {
            name: "c".into(),
            cout: 4,
            cin: 2,
            kernel: (3, 2),
            spec: Conv2dSpec { stride: (1, 1), dilation: (1, 1), groups: 1, pad: ((1, 1), (1, 0)) },
            bias: true,
        };
        conv.init(&mut params, &mut rng);
        assert_eq!(params.count_scalars(), 4 * 2 * 3 * 2 + 4);
        let mut tape = Tape::new();
        let x = tape.leaf(ArrayD::zeros(IxDyn(&[2, 5, 6])));
        let y = conv.forward(&mut tape, &params, x);
        assert_eq!(tape.value(y).shape(), &[4, 5, 6]);
    }
}
