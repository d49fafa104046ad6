//! Complex-valued building blocks: grouped complex (transposed) convolutions,
//! dilated dense blocks on stacked real/imag channels, and the complex feature
//! encoder/decoder (CFE/CFD) that frame the core network.
//!
//! A complex feature map with `C` channel pairs is carried as two real arrays
//! of shape `(C, F, T)`. Channel counts quoted in configs follow the stacked
//! convention: "32 channels" means 16 complex pairs.

use rand::Rng;

use crate::kernels::Conv2dSpec;
use crate::nn::{Conv2d, ConvT2d, LayerNorm, PRelu, Params};
use crate::tape::{Tape, Var};

/// A complex tensor on the tape: real and imaginary planes of equal shape.
#[derive(Debug, Clone, Copy)]
pub struct Cplx {
    pub re: Var,
    pub im: Var,
}

impl Cplx {
    pub fn shape<'t>(&self, tape: &'t Tape) -> &'t [usize] {
        tape.value(self.re).shape()
    }

    /// Stack (re, im) along the channel axis: (2C, F, T).
    pub fn stack(&self, tape: &mut Tape) -> Var {
        tape.concat(0, &[self.re, self.im])
    }

    /// Split a stacked (2C, F, T) tensor back into a complex pair.
    pub fn unstack(tape: &mut Tape, x: Var) -> Cplx {
        let c2 = tape.value(x).shape()[0];
        debug_assert_eq!(c2 % 2, 0);
        let re = tape.slice_axis(x, 0, 0, c2 / 2);
        let im = tape.slice_axis(x, 0, c2 / 2, c2);
        Cplx { re, im }
    }
}

/// Time padding policy for layers with a time-extent kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimePad {
    /// Left-only padding: output frame t sees input frames <= t.
    Causal,
    /// One-future-frame lookahead per layer (kernel 2 -> (0,1), kernel 3 -> (d,d)).
    Lookahead,
}

impl TimePad {
    pub fn pads(&self, kt: usize, dilation: usize) -> (usize, usize) {
        let span = dilation * (kt - 1);
        match self {
            TimePad::Causal => (span, 0),
            TimePad::Lookahead => (span / 2, span - span / 2),
        }
    }
}

fn conv_spec(kernel: (usize, usize), stride: (usize, usize), dilation_t: usize, groups: usize, freq_pad: usize, tpad: TimePad) -> Conv2dSpec {
    Conv2dSpec {
        stride,
        dilation: (1, dilation_t),
        groups,
        pad: ((freq_pad, freq_pad), tpad.pads(kernel.1, dilation_t)),
    }
}

/// Grouped complex 2-D convolution with shared-geometry real/imag kernels.
#[derive(Debug, Clone)]
pub struct ComplexConv2d {
    pub conv_r: Conv2d,
    pub conv_i: Conv2d,
    pub bias: bool,
    pub name: String,
    pub cout: usize,
}

impl ComplexConv2d {
    /// `kernel` is (freq, time); channel counts are complex pairs.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        cout: usize,
        cin: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        dilation_t: usize,
        groups: usize,
        freq_pad: usize,
        tpad: TimePad,
        bias: bool,
    ) -> Self {
        let spec = conv_spec(kernel, stride, dilation_t, groups, freq_pad, tpad);
        let base = |suffix: &str| Conv2d {
            name: format!("{name}.{suffix}"),
            cout,
            cin,
            kernel: (kernel.0, kernel.1),
            spec,
            bias: false,
        };
        ComplexConv2d { conv_r: base("wr"), conv_i: base("wi"), bias, name: name.into(), cout }
    }

    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        self.conv_r.init(params, rng);
        self.conv_i.init(params, rng);
        if self.bias {
            params.insert(&format!("{}.br", self.name), ndarray::ArrayD::zeros(ndarray::IxDyn(&[self.cout])));
            params.insert(&format!("{}.bi", self.name), ndarray::ArrayD::zeros(ndarray::IxDyn(&[self.cout])));
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Cplx) -> Cplx {
        let rr = self.conv_r.forward(tape, params, x.re);
        let ii = self.conv_i.forward(tape, params, x.im);
        let ri = self.conv_i.forward(tape, params, x.re);
        let ir = self.conv_r.forward(tape, params, x.im);
        let mut re = tape.sub(rr, ii);
        let mut im = tape.add(ri, ir);
        if self.bias {
            let br = params.leaf(tape, &format!("{}.br", self.name));
            let br = tape.reshape(br, &[self.cout, 1, 1]);
            let bi = params.leaf(tape, &format!("{}.bi", self.name));
            let bi = tape.reshape(bi, &[self.cout, 1, 1]);
            re = tape.add(re, br);
            im = tape.add(im, bi);
        }
        Cplx { re, im }
    }
}

/// Grouped complex transposed 2-D convolution.
#[derive(Debug, Clone)]
pub struct ComplexConvT2d {
    pub conv_r: ConvT2d,
    pub conv_i: ConvT2d,
    pub bias: bool,
    pub name: String,
    pub cout: usize,
    /// Time-kernel extent; output frames are trimmed to keep causality.
    pub kt: usize,
    pub tpad: TimePad,
}

impl ComplexConvT2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        cout: usize,
        cin: usize,
        kernel: (usize, usize),
        stride_f: usize,
        groups: usize,
        freq_pad: usize,
        tpad: TimePad,
        bias: bool,
    ) -> Self {
        // Time axis runs at stride 1; the transposed conv inverts only the
        // frequency stride. Time trimming happens in `forward`.
        let spec = Conv2dSpec {
            stride: (stride_f, 1),
            dilation: (1, 1),
            groups,
            pad: ((freq_pad, freq_pad), (0, 0)),
        };
        let base = |suffix: &str| ConvT2d {
            name: format!("{name}.{suffix}"),
            cout,
            cin,
            kernel,
            spec,
            bias: false,
        };
        ComplexConvT2d {
            conv_r: base("wr"),
            conv_i: base("wi"),
            bias,
            name: name.into(),
            cout,
            kt: kernel.1,
            tpad,
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        self.conv_r.init(params, rng);
        self.conv_i.init(params, rng);
        if self.bias {
            params.insert(&format!("{}.br", self.name), ndarray::ArrayD::zeros(ndarray::IxDyn(&[self.cout])));
            params.insert(&format!("{}.bi", self.name), ndarray::ArrayD::zeros(ndarray::IxDyn(&[self.cout])));
        }
    }

    /// `out_f` is the target frequency size (recorded from the encoder chain).
    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Cplx, out_f: usize) -> Cplx {
        let t_in = x.shape(tape)[2];
        let t_full = t_in + self.kt - 1;
        let one = |tape: &mut Tape, conv: &ConvT2d, v: Var| conv.forward(tape, params, v, (out_f, t_full));
        let rr = one(tape, &self.conv_r, x.re);
        let ii = one(tape, &self.conv_i, x.im);
        let ri = one(tape, &self.conv_i, x.re);
        let ir = one(tape, &self.conv_r, x.im);
        let mut re = tape.sub(rr, ii);
        let mut im = tape.add(ri, ir);
        // Full transposed output has kt-1 extra frames. Causal: keep the first
        // t frames (frame t depends on inputs <= t). Lookahead: drop from the
        // front, which shifts dependence one frame into the future.
        let (front, _) = match self.tpad {
            TimePad::Causal => (0, 0),
            TimePad::Lookahead => {
                let span = self.kt - 1;
                (span - span / 2, 0)
            }
        };
        re = tape.slice_axis(re, 2, front, front + t_in);
        im = tape.slice_axis(im, 2, front, front + t_in);
        if self.bias {
            let br = params.leaf(tape, &format!("{}.br", self.name));
            let br = tape.reshape(br, &[self.cout, 1, 1]);
            let bi = params.leaf(tape, &format!("{}.bi", self.name));
            let bi = tape.reshape(bi, &[self.cout, 1, 1]);
            re = tape.add(re, br);
            im = tape.add(im, bi);
        }
        Cplx { re, im }
    }
}

/// LayerNorm over stacked (real, imag) features, affine per stacked channel.
#[derive(Debug, Clone)]
pub struct ComplexLayerNorm {
    pub ln: LayerNorm,
}

impl ComplexLayerNorm {
    pub fn new(name: &str, pairs: usize) -> Self {
        ComplexLayerNorm { ln: LayerNorm { name: name.into(), channels: 2 * pairs } }
    }

    pub fn init(&self, params: &mut Params) {
        self.ln.init(params);
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Cplx) -> Cplx {
        let stacked = x.stack(tape);
        let normed = self.ln.forward(tape, params, stacked);
        Cplx::unstack(tape, normed)
    }
}

/// PReLU applied to real and imaginary parts with a shared per-pair slope.
#[derive(Debug, Clone)]
pub struct ComplexPRelu {
    pub act: PRelu,
}

impl ComplexPRelu {
    pub fn new(name: &str, pairs: usize) -> Self {
        ComplexPRelu { act: PRelu { name: name.into(), channels: pairs } }
    }

    pub fn init(&self, params: &mut Params) {
        self.act.init(params);
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Cplx) -> Cplx {
        Cplx {
            re: self.act.forward(tape, params, x.re),
            im: self.act.forward(tape, params, x.im),
        }
    }
}

/// Dilated dense block over stacked real channels; layer k consumes the
/// concatenation of the block input and all previous layer outputs.
#[derive(Debug, Clone)]
pub struct DenseBlock {
    pub layers: Vec<(Conv2d, LayerNorm, PRelu)>,
    pub kernel: (usize, usize),
    pub dilations: Vec<usize>,
}

impl DenseBlock {
    /// `channels` are stacked real channels; `kernel` is (freq, time).
    pub fn new(name: &str, channels: usize, depth: usize, kernel: (usize, usize), tpad: TimePad) -> Self {
        assert!(depth >= 1);
        assert_eq!(kernel.0 % 2, 1, "dense freq kernel must be odd for same-padding");
        let dilations: Vec<usize> = (0..depth).map(|k| 1usize << k).collect();
        let layers = (0..depth)
            .map(|k| {
                let conv = Conv2d {
                    name: format!("{name}.l{k}.conv"),
                    cout: channels,
                    cin: channels * (k + 1),
                    kernel,
                    spec: conv_spec(kernel, (1, 1), dilations[k], 1, kernel.0 / 2, tpad),
                    bias: false,
                };
                let ln = LayerNorm { name: format!("{name}.l{k}.ln"), channels };
                let act = PRelu { name: format!("{name}.l{k}.act"), channels };
                (conv, ln, act)
            })
            .collect();
        DenseBlock { layers, kernel, dilations }
    }

    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        for (conv, ln, act) in &self.layers {
            conv.init(params, rng);
            ln.init(params);
            act.init(params);
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var) -> Var {
        let mut feats = vec![x];
        let mut out = x;
        for (conv, ln, act) in &self.layers {
            let cat = if feats.len() == 1 { feats[0] } else { tape.concat(0, &feats) };
            let y = conv.forward(tape, params, cat);
            let y = ln.forward(tape, params, y);
            out = act.forward(tape, params, y);
            feats.push(out);
        }
        out
    }

    /// Time receptive field: 1 + sum(dilation_k * (kt - 1)).
    pub fn receptive_field(&self) -> usize {
        1 + self.dilations.iter().map(|d| d * (self.kernel.1 - 1)).sum::<usize>()
    }
}

/// Complex feature encoder/decoder configuration shared by CFE and CFD.
#[derive(Debug, Clone)]
pub struct CfeConfig {
    /// Hidden width in complex pairs ("32 channels" = 16 pairs).
    pub hidden_pairs: usize,
    pub dense_depth: usize,
    /// Dense kernel (freq, time) on stacked channels.
    pub dense_kernel: (usize, usize),
    pub tpad: TimePad,
}

/// Complex feature encoder: 1x1 complex conv -> dense block -> 1x1 complex
/// conv, LayerNorm+PReLU after each convolution.
#[derive(Debug, Clone)]
pub struct Cfe {
    conv_in: ComplexConv2d,
    ln_in: ComplexLayerNorm,
    act_in: ComplexPRelu,
    dense: DenseBlock,
    conv_out: ComplexConv2d,
    ln_out: ComplexLayerNorm,
    act_out: ComplexPRelu,
}

impl Cfe {
    pub fn new(name: &str, in_pairs: usize, cfg: &CfeConfig) -> Self {
        let h = cfg.hidden_pairs;
        Cfe {
            conv_in: ComplexConv2d::new(&format!("{name}.in"), h, in_pairs, (1, 1), (1, 1), 1, 1, 0, cfg.tpad, false),
            ln_in: ComplexLayerNorm::new(&format!("{name}.in_ln"), h),
            act_in: ComplexPRelu::new(&format!("{name}.in_act"), h),
            dense: DenseBlock::new(&format!("{name}.dense"), 2 * h, cfg.dense_depth, cfg.dense_kernel, cfg.tpad),
            conv_out: ComplexConv2d::new(&format!("{name}.out"), h, h, (1, 1), (1, 1), 1, 1, 0, cfg.tpad, false),
            ln_out: ComplexLayerNorm::new(&format!("{name}.out_ln"), h),
            act_out: ComplexPRelu::new(&format!("{name}.out_act"), h),
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        self.conv_in.init(params, rng);
        self.ln_in.init(params);
        self.act_in.init(params);
        self.dense.init(params, rng);
        self.conv_out.init(params, rng);
        self.ln_out.init(params);
        self.act_out.init(params);
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Cplx) -> Cplx {
        let y = self.conv_in.forward(tape, params, x);
        let y = self.ln_in.forward(tape, params, y);
        let y = self.act_in.forward(tape, params, y);
        let stacked = y.stack(tape);
        let d = self.dense.forward(tape, params, stacked);
        let y = Cplx::unstack(tape, d);
        let y = self.conv_out.forward(tape, params, y);
        let y = self.ln_out.forward(tape, params, y);
        self.act_out.forward(tape, params, y)
    }
}

/// Complex feature decoder: mirrors the CFE back to the spectrum channel
/// count; the last convolution carries no LayerNorm/PReLU.
#[derive(Debug, Clone)]
pub struct Cfd {
    conv_in: ComplexConv2d,
    ln_in: ComplexLayerNorm,
    act_in: ComplexPRelu,
    dense: DenseBlock,
    conv_out: ComplexConv2d,
}

impl Cfd {
    pub fn new(name: &str, out_pairs: usize, cfg: &CfeConfig) -> Self {
        let h = cfg.hidden_pairs;
        Cfd {
            conv_in: ComplexConv2d::new(&format!("{name}.in"), h, h, (1, 1), (1, 1), 1, 1, 0, cfg.tpad, false),
            ln_in: ComplexLayerNorm::new(&format!("{name}.in_ln"), h),
            act_in: ComplexPRelu::new(&format!("{name}.in_act"), h),
            dense: DenseBlock::new(&format!("{name}.dense"), 2 * h, cfg.dense_depth, cfg.dense_kernel, cfg.tpad),
            conv_out: ComplexConv2d::new(&format!("{name}.out"), out_pairs, h, (1, 1), (1, 1), 1, 1, 0, cfg.tpad, true),
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        self.conv_in.init(params, rng);
        self.ln_in.init(params);
        self.act_in.init(params);
        self.dense.init(params, rng);
        self.conv_out.init(params, rng);
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Cplx) -> Cplx {
        let y = self.conv_in.forward(tape, params, x);
        let y = self.ln_in.forward(tape, params, y);
        let y = self.act_in.forward(tape, params, y);
        let stacked = y.stack(tape);
        let d = self.dense.forward(tape, params, stacked);
        let y = Cplx::unstack(tape, d);
        self.conv_out.forward(tape, params, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rnd(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    fn leaf_pair(tape: &mut Tape, rng: &mut ChaCha8Rng, shape: &[usize]) -> Cplx {
        let re = tape.leaf(rnd(rng, shape));
        let im = tape.leaf(rnd(rng, shape));
        Cplx { re, im }
    }

    #[test]
    fn purely_real_weights_act_independently() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = Params::new();
        let conv = ComplexConv2d::new("c", 3, 2, (3, 2), (1, 1), 1, 1, 1, TimePad::Causal, false);
        conv.init(&mut params, &mut rng);
        // Zero the imaginary kernel.
        params.get_mut("c.wi.w").fill(0.0);
        let mut tape = Tape::new();
        let x = leaf_pair(&mut tape, &mut rng, &[2, 6, 5]);
        let y = conv.forward(&mut tape, &params, x);
        // Real conv applied independently to both planes.
        let wr = tape.named_leaf("c.wr.w", params.get("c.wr.w").clone());
        let want_re = tape.conv2d(x.re, wr, conv.conv_r.spec);
        let want_im = tape.conv2d(x.im, wr, conv.conv_r.spec);
        let dre = (tape.value(y.re) - tape.value(want_re)).iter().map(|v| v.abs()).fold(0.0, f64::max);
        let dim = (tape.value(y.im) - tape.value(want_im)).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(dre < 1e-12 && dim < 1e-12);
    }

    #[test]
    fn imaginary_identity_kernel_rotates() {
        // w = i * identity on a real input: output re = 0, im = x.
        let mut params = Params::new();
        params.insert("c.wr.w", ArrayD::zeros(IxDyn(&[1, 1, 1, 1])));
        params.insert("c.wi.w", ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 1.0));
        let conv = ComplexConv2d::new("c", 1, 1, (1, 1), (1, 1), 1, 1, 0, TimePad::Causal, false);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let xr = tape.leaf(rnd(&mut rng, &[1, 4, 3]));
        let xi = tape.leaf(ArrayD::zeros(IxDyn(&[1, 4, 3])));
        let y = conv.forward(&mut tape, &params, Cplx { re: xr, im: xi });
        assert!(tape.value(y.re).iter().all(|&v| v == 0.0));
        let diff = (tape.value(y.im) - tape.value(xr)).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn group_conv_equals_blockwise_complex_convs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = 2usize;
        let (cin, cout) = (4usize, 6usize);
        let mut params = Params::new();
        let conv = ComplexConv2d::new("c", cout, cin, (3, 2), (2, 1), 1, g, 1, TimePad::Causal, false);
        conv.init(&mut params, &mut rng);
        let mut tape = Tape::new();
        let x = leaf_pair(&mut tape, &mut rng, &[cin, 9, 6]);
        let y = conv.forward(&mut tape, &params, x);

        // Per-group brute force: run each slice through its own conv.
        for gi in 0..g {
            let mut sub = Params::new();
            let wr = params.get("c.wr.w");
            let wi = params.get("c.wi.w");
            let rows = cout / g;
            sub.insert(
                &format!("s{gi}.wr.w"),
                wr.slice_axis(ndarray::Axis(0), ndarray::Slice::from(gi * rows..(gi + 1) * rows)).to_owned(),
            );
            sub.insert(
                &format!("s{gi}.wi.w"),
                wi.slice_axis(ndarray::Axis(0), ndarray::Slice::from(gi * rows..(gi + 1) * rows)).to_owned(),
            );
            let sconv = ComplexConv2d::new(&format!("s{gi}"), rows, cin / g, (3, 2), (2, 1), 1, 1, 1, TimePad::Causal, false);
            let xr = tape.slice_axis(x.re, 0, gi * (cin / g), (gi + 1) * (cin / g));
            let xi = tape.slice_axis(x.im, 0, gi * (cin / g), (gi + 1) * (cin / g));
            let ys = sconv.forward(&mut tape, &sub, Cplx { re: xr, im: xi });
            let yr = tape.slice_axis(y.re, 0, gi * rows, (gi + 1) * rows);
            let diff = (tape.value(ys.re) - tape.value(yr)).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "group {gi} mismatch {diff}");
        }
    }

    #[test]
    fn complex_linearity_under_complex_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = Params::new();
        let conv = ComplexConv2d::new("c", 2, 2, (3, 2), (1, 1), 1, 1, 1, TimePad::Causal, false);
        conv.init(&mut params, &mut rng);
        let (ar, ai) = (0.6, -1.1); // complex scalar a
        let mut tape = Tape::new();
        let x = leaf_pair(&mut tape, &mut rng, &[2, 5, 4]);
        let y = conv.forward(&mut tape, &params, x);
        // a*x
        let xr_s = tape.scale(x.re, ar);
        let xi_s = tape.scale(x.im, ai);
        let axr = tape.sub(xr_s, xi_s);
        let xr_i = tape.scale(x.re, ai);
        let xi_r = tape.scale(x.im, ar);
        let axi = tape.add(xr_i, xi_r);
        let ya = conv.forward(&mut tape, &params, Cplx { re: axr, im: axi });
        // a*y
        let yr_s = tape.scale(y.re, ar);
        let yi_s = tape.scale(y.im, ai);
        let ayr = tape.sub(yr_s, yi_s);
        let yr_i = tape.scale(y.re, ai);
        let yi_r = tape.scale(y.im, ar);
        let ayi = tape.add(yr_i, yi_r);
        let dre = (tape.value(ya.re) - tape.value(ayr)).iter().map(|v| v.abs()).fold(0.0, f64::max);
        let dim = (tape.value(ya.im) - tape.value(ayi)).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(dre < 1e-9 && dim < 1e-9);
    }

    #[test]
    fn transposed_conv_inverts_shape_and_adjoint_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = Params::new();
        let fwd = ComplexConv2d::new("f", 4, 2, (5, 2), (2, 1), 1, 2, 1, TimePad::Causal, false);
        fwd.init(&mut params, &mut rng);
        let tconv = ComplexConvT2d::new("t", 2, 4, (5, 2), 2, 2, 1, TimePad::Causal, false);
        tconv.init(&mut params, &mut rng);

        let f_in = 12usize;
        let mut tape = Tape::new();
        let x = leaf_pair(&mut tape, &mut rng, &[2, f_in, 7]);
        let y = fwd.forward(&mut tape, &params, x);
        let f_mid = y.shape(&tape)[1];
        let back = tconv.forward(&mut tape, &params, y, f_in);
        assert_eq!(back.shape(&tape), &[2, f_in, 7]);

        // Adjoint: a transposed conv sharing the forward spec and conjugated
        // weights (wr, -wi) satisfies Re<conv(x), y> = Re<x, convT(y)>.
        let spec = fwd.conv_r.spec;
        let wr = tape.named_leaf("f.wr.w", params.get("f.wr.w").clone());
        let wi_neg = tape.leaf(params.get("f.wi.w").mapv(|v| -v));
        let yr = leaf_pair(&mut tape, &mut rng, &[4, f_mid, 7]);
        let x_hw = (f_in, 7);
        let t_rr = tape.conv_transpose2d(yr.re, wr, spec, x_hw);
        let t_ii = tape.conv_transpose2d(yr.im, wi_neg, spec, x_hw);
        let t_ri = tape.conv_transpose2d(yr.re, wi_neg, spec, x_hw);
        let t_ir = tape.conv_transpose2d(yr.im, wr, spec, x_hw);
        let xt_re = tape.sub(t_rr, t_ii);
        let xt_im = tape.add(t_ri, t_ir);
        let lhs: f64 = (tape.value(y.re) * tape.value(yr.re)).sum()
            + (tape.value(y.im) * tape.value(yr.im)).sum();
        let rhs: f64 = (tape.value(x.re) * tape.value(xt_re)).sum()
            + (tape.value(x.im) * tape.value(xt_im)).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn transposed_purely_real_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = Params::new();
        let tconv = ComplexConvT2d::new("t", 2, 2, (3, 2), 1, 1, 1, TimePad::Causal, false);
        tconv.init(&mut params, &mut rng);
        params.get_mut("t.wi.w").fill(0.0);
        let mut tape = Tape::new();
        let x = leaf_pair(&mut tape, &mut rng, &[2, 6, 5]);
        let y = tconv.forward(&mut tape, &params, x, 6);
        // Imag plane of a zero-imag input stays the real conv of the imag plane.
        let zero_im = tape.leaf(ArrayD::zeros(IxDyn(&[2, 6, 5])));
        let y2 = tconv.forward(&mut tape, &params, Cplx { re: x.re, im: zero_im }, 6);
        let d = (tape.value(y2.im)).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(d < 1e-12);
        let dre = (tape.value(y.re) - tape.value(y2.re)).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(dre < 1e-12);
    }

    #[test]
    fn dense_block_depth_one_is_single_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = Params::new();
        let block = DenseBlock::new("d", 4, 1, (3, 2), TimePad::Causal);
        block.init(&mut params, &mut rng);
        assert_eq!(block.layers.len(), 1);
        assert_eq!(block.receptive_field(), 2);
        let mut tape = Tape::new();
        let x = tape.leaf(rnd(&mut rng, &[4, 6, 5]));
        let y = block.forward(&mut tape, &params, x);
        assert_eq!(tape.value(y).shape(), &[4, 6, 5]);
    }

    #[test]
    fn dense_block_is_causal_and_receptive_field_matches_probe() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut params = Params::new();
        let block = DenseBlock::new("d", 3, 3, (3, 2), TimePad::Causal);
        block.init(&mut params, &mut rng);
        let t_len = 24usize;
        let base = rnd(&mut rng, &[3, 4, t_len]);

        let run = |inp: ArrayD<f64>| {
            let mut tape = Tape::new();
            let x = tape.leaf(inp);
            let y = block.forward(&mut tape, &params, x);
            tape.value(y).clone()
        };
        let y0 = run(base.clone());

        // Causality: perturb frame t+1, frames <= t unchanged.
        let t_perturb = 10usize;
        let mut pert = base.clone();
        pert[[1, 2, t_perturb + 1]] += 1.0;
        let y1 = run(pert);
        for t in 0..=t_perturb {
            for c in 0..3 {
                for f in 0..4 {
                    assert_eq!(y0[[c, f, t]], y1[[c, f, t]], "future leak at frame {t}");
                }
            }
        }

        // Receptive field by impulse probing: perturbing frame t0 changes
        // outputs only in [t0, t0 + rf - 1].
        let rf = block.receptive_field(); // 1 + (1+2+4) = 8
        assert_eq!(rf, 8);
        let t0 = 5usize;
        let mut imp = base.clone();
        imp[[0, 1, t0]] += 1.0;
        let y2 = run(imp);
        let mut changed = vec![false; t_len];
        for t in 0..t_len {
            for c in 0..3 {
                for f in 0..4 {
                    if (y2[[c, f, t]] - y0[[c, f, t]]).abs() > 1e-12 {
                        changed[t] = true;
                    }
                }
            }
        }
        assert!(changed[t0]);
        for (t, &ch) in changed.iter().enumerate() {
            assert!(!ch || (t >= t0 && t < t0 + rf), "unexpected change at {t}");
        }
        assert!(changed[t0 + rf - 1], "receptive field shorter than declared");
    }

    #[test]
    fn cfe_output_channels_and_zero_propagation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = CfeConfig { hidden_pairs: 16, dense_depth: 5, dense_kernel: (5, 2), tpad: TimePad::Causal };
        let cfe = Cfe::new("cfe", 4, &cfg);
        let mut params = Params::new();
        cfe.init(&mut params, &mut rng);
        let mut tape = Tape::new();
        let x = leaf_pair(&mut tape, &mut rng, &[4, 33, 6]);
        let y = cfe.forward(&mut tape, &params, x);
        // 16 pairs = 32 stacked channels.
        assert_eq!(y.shape(&tape), &[16, 33, 6]);

        // Zero input, zero biases (LN beta initialized to zero) -> zero output.
        let mut tape2 = Tape::new();
        let zr = tape2.leaf(ArrayD::zeros(IxDyn(&[4, 33, 6])));
        let zi = tape2.leaf(ArrayD::zeros(IxDyn(&[4, 33, 6])));
        let z = cfe.forward(&mut tape2, &params, Cplx { re: zr, im: zi });
        assert!(tape2.value(z.re).iter().all(|&v| v == 0.0));
        assert!(tape2.value(z.im).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cfe_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cfg = CfeConfig { hidden_pairs: 2, dense_depth: 2, dense_kernel: (3, 2), tpad: TimePad::Causal };
        let cfe = Cfe::new("cfe", 1, &cfg);
        let mut params = Params::new();
        cfe.init(&mut params, &mut rng);
        let xr = rnd(&mut rng, &[1, 5, 4]);
        let xi = rnd(&mut rng, &[1, 5, 4]);

        let eval = |params: &Params| -> (f64, std::collections::HashMap<String, ArrayD<f64>>) {
            let mut tape = Tape::new();
            let re = tape.leaf(xr.clone());
            let im = tape.leaf(xi.clone());
            let y = cfe.forward(&mut tape, params, Cplx { re, im });
            let sr = tape.mul(y.re, y.re);
            let si = tape.mul(y.im, y.im);
            let s = tape.add(sr, si);
            let loss = tape.sum_all(s);
            let grads = tape.backward(loss);
            (tape.scalar_value(loss), tape.named_gradients(&grads))
        };
        let (_, grads) = eval(&params);
        let eps = 1e-5;
        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        let names = params.names();
        for _ in 0..12 {
            let name = &names[rng2.gen_range(0..names.len())];
            let len = params.get(name).len();
            let flat = rng2.gen_range(0..len);
            let mut hi = params.clone();
            hi.get_mut(name).as_slice_mut().unwrap()[flat] += eps;
            let mut lo = params.clone();
            lo.get_mut(name).as_slice_mut().unwrap()[flat] -= eps;
            let fd = (eval(&hi).0 - eval(&lo).0) / (2.0 * eps);
            let an = grads.get(name).map(|g| g.as_slice().unwrap()[flat]).unwrap_or(0.0);
            let denom = fd.abs().max(an.abs());
            assert!((fd - an).abs() < 1e-4 * denom + 1e-7, "{name}[{flat}]: fd {fd} vs {an}");
        }
    }
}
