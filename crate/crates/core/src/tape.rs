//! Reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! replays it in reverse and accumulates gradients. Values are kept as
//! dynamic-dimension arrays; binary operations broadcast NumPy-style and the
//! backward pass sums gradients over the broadcast axes.
//!
//! The tape is single-threaded by design. Data-parallel training runs one tape
//! per batch item and sums the named gradients afterwards.

use ndarray::{ArrayD, Axis, IxDyn};
use std::collections::HashMap;

use crate::kernels::{self, Conv2dSpec, Conv3dSpec};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Magnitudes below this contribute zero gradient through `mag_pow` to avoid
/// the m^(e-1) blow-up near the origin.
const MAG_GRAD_FLOOR: f64 = 1e-8;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var, #[allow(dead_code)] f64),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    /// Per-channel parametric ReLU; slope broadcasts along axis 0.
    Prelu { x: Var, slope: Var },
    Matmul(Var, Var),
    Conv2d { x: Var, w: Var, spec: Conv2dSpec },
    /// Transposed convolution: forward is the adjoint of `spec`'s conv.
    ConvT2d { x: Var, w: Var, spec: Conv2dSpec, #[allow(dead_code)] out_hw: (usize, usize) },
    Conv3d { x: Var, w: Var, spec: Conv3dSpec },
    Concat { axis: usize, parts: Vec<Var> },
    SliceAxis { x: Var, axis: usize, start: usize, end: usize },
    PadZero { x: Var, axis: usize, before: usize, #[allow(dead_code)] after: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Flip { x: Var, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    SumAxis { x: Var, #[allow(dead_code)] axis: usize },
    MeanAxis { x: Var, axis: usize },
    /// signal (N) -> frames (T, win) at the given hop.
    Frame { x: Var, win: usize, hop: usize },
    /// frames (T, win) -> signal ((T-1)*hop + win) by overlap-add.
    OverlapAdd { x: Var, hop: usize },
    /// 1-D zero stuffing: out[i*factor] = x[i].
    ZeroStuff { x: Var, factor: usize },
    /// 1-D strided pick: out[i] = x[offset + i*step].
    Downsample { x: Var, step: usize, offset: usize },
    /// Magnitude power law |z|^(e-1) * u where u is `re` or `im` of z and the
    /// exponent is a per-frequency-bin vector broadcast over (P, F, T).
    MagPow { re: Var, im: Var, expo: Var, imag_component: bool },
    /// Expand per-band values (B) to per-bin values (F) via a band map.
    BandExpand { x: Var, map: Vec<usize> },
}

pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<ArrayD<f64>>,
    named: Vec<(String, Var)>,
    named_lookup: HashMap<String, Var>,
}

/// Result of a backward pass: gradients indexed by `Var`.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { ops: Vec::new(), vals: Vec::new(), named: Vec::new(), named_lookup: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    fn push(&mut self, op: Op, val: ArrayD<f64>) -> Var {
        self.ops.push(op);
        self.vals.push(val);
        Var(self.vals.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.vals[v.0]
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = &self.vals[v.0];
        assert_eq!(a.len(), 1, "expected scalar value");
        *a.iter().next().unwrap()
    }

    /// Insert a leaf value (input or parameter).
    pub fn leaf(&mut self, val: ArrayD<f64>) -> Var {
        self.push(Op::Leaf, val)
    }

    /// Insert a leaf and remember it under `name` for gradient extraction.
    /// Re-registering the same name returns the existing leaf, so a parameter
    /// used in several places accumulates one gradient.
    pub fn named_leaf(&mut self, name: &str, val: ArrayD<f64>) -> Var {
        if let Some(&v) = self.named_lookup.get(name) {
            assert_eq!(
                self.vals[v.0], val,
                "named leaf '{name}' re-registered with a different value"
            );
            return v;
        }
        let v = self.leaf(val);
        self.named.push((name.to_string(), v));
        self.named_lookup.insert(name.to_string(), v);
        v
    }

    pub fn named_vars(&self) -> &[(String, Var)] {
        &self.named
    }

    // ----- elementwise -----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let val = binary_broadcast(&self.vals[a.0], &self.vals[b.0], |x, y| x + y);
        self.push(Op::Add(a, b), val)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let val = binary_broadcast(&self.vals[a.0], &self.vals[b.0], |x, y| x - y);
        self.push(Op::Sub(a, b), val)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let val = binary_broadcast(&self.vals[a.0], &self.vals[b.0], |x, y| x * y);
        self.push(Op::Mul(a, b), val)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let val = binary_broadcast(&self.vals[a.0], &self.vals[b.0], |x, y| x / y);
        self.push(Op::Div(a, b), val)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].mapv(|x| -x);
        self.push(Op::Neg(a), val)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let val = self.vals[a.0].mapv(|x| c * x);
        self.push(Op::Scale(a, c), val)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let val = self.vals[a.0].mapv(|x| x + c);
        self.push(Op::AddScalar(a, c), val)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].mapv(f64::exp);
        self.push(Op::Exp(a), val)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].mapv(f64::ln);
        self.push(Op::Ln(a), val)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].mapv(f64::sqrt);
        self.push(Op::Sqrt(a), val)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(Op::Sigmoid(a), val)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].mapv(f64::tanh);
        self.push(Op::Tanh(a), val)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].mapv(|x| x.max(0.0));
        self.push(Op::Relu(a), val)
    }

    pub fn prelu(&mut self, x: Var, slope: Var) -> Var {
        let s = &self.vals[slope.0];
        let xs = &self.vals[x.0];
        assert_eq!(s.ndim(), 1);
        assert_eq!(s.len(), xs.shape()[0], "prelu slope must match channel axis");
        let mut out = xs.clone();
        for (c, mut lane) in out.axis_iter_mut(Axis(0)).enumerate() {
            let a = s[[c]];
            lane.mapv_inplace(|v| if v > 0.0 { v } else { a * v });
        }
        self.push(Op::Prelu { x, slope }, out)
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let am = as2(&self.vals[a.0]);
        let bm = as2(&self.vals[b.0]);
        let val = am.dot(&bm).into_dyn();
        self.push(Op::Matmul(a, b), val)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, spec: Conv2dSpec) -> Var {
        let xv = as3(&self.vals[x.0]);
        let wv = as4(&self.vals[w.0]);
        let val = kernels::conv2d(&xv.view(), &wv.view(), &spec).into_dyn();
        self.push(Op::Conv2d { x, w, spec }, val)
    }

    /// Transposed 2-D convolution. `w` has shape `(Cin, Cout/g, kh, kw)`;
    /// `out_hw` fixes the output spatial size (resolves stride ambiguity).
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, spec: Conv2dSpec, out_hw: (usize, usize)) -> Var {
        let xv = as3(&self.vals[x.0]);
        let wv = as4(&self.vals[w.0]);
        let (cin, h, w_in) = xv.dim();
        let (cin_w, cout_g, kh, kw) = wv.dim();
        assert_eq!(cin, cin_w, "transposed conv input-channel mismatch");
        let cout = cout_g * spec.groups;
        // The declared output size must map back onto the input size under the
        // forward conv arithmetic, otherwise the adjoint is ill-posed.
        let back = spec.out_size(out_hw.0, out_hw.1, kh, kw);
        assert_eq!(back, (h, w_in), "transposed conv output size {out_hw:?} does not invert to input {:?}", (h, w_in));
        let val = kernels::conv2d_dx(&wv.view(), &xv.view(), &spec, (cout, out_hw.0, out_hw.1)).into_dyn();
        self.push(Op::ConvT2d { x, w, spec, out_hw }, val)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, spec: Conv3dSpec) -> Var {
        let xv = self.vals[x.0].clone().into_dimensionality::<ndarray::Ix4>().unwrap();
        let wv = self.vals[w.0].clone().into_dimensionality::<ndarray::Ix5>().unwrap();
        let val = kernels::conv3d(&xv.view(), &wv.view(), &spec).into_dyn();
        self.push(Op::Conv3d { x, w, spec }, val)
    }

    // ----- shape -----

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.vals[v.0].view()).collect();
        let val = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        self.push(Op::Concat { axis, parts: parts.to_vec() }, val)
    }

    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Var {
        let val = self.vals[x.0]
            .slice_axis(Axis(axis), ndarray::Slice::from(start..end))
            .to_owned();
        self.push(Op::SliceAxis { x, axis, start, end }, val)
    }

    pub fn pad_zero(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Var {
        let xv = &self.vals[x.0];
        let mut shape = xv.shape().to_vec();
        shape[axis] += before + after;
        let mut out = ArrayD::zeros(IxDyn(&shape));
        out.slice_axis_mut(Axis(axis), ndarray::Slice::from(before..before + xv.shape()[axis]))
            .assign(xv);
        self.push(Op::PadZero { x, axis, before, after }, out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let val = self.vals[x.0]
            .clone()
            .into_shape(IxDyn(shape))
            .expect("reshape element-count mismatch");
        self.push(Op::Reshape(x), val)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let val = self.vals[x.0].clone().permuted_axes(IxDyn(perm)).as_standard_layout().to_owned();
        self.push(Op::Permute { x, perm: perm.to_vec() }, val)
    }

    pub fn flip(&mut self, x: Var, axis: usize) -> Var {
        let mut val = self.vals[x.0].clone();
        val.invert_axis(Axis(axis));
        let val = val.as_standard_layout().to_owned();
        self.push(Op::Flip { x, axis }, val)
    }

    // ----- reductions -----

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.vals[x.0].sum();
        self.push(Op::SumAll(x), ArrayD::from_elem(IxDyn(&[1]), s))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let m = self.vals[x.0].mean().unwrap();
        self.push(Op::MeanAll(x), ArrayD::from_elem(IxDyn(&[1]), m))
    }

    /// Sum along `axis`, keeping it as a length-1 dimension.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let val = self.vals[x.0].sum_axis(Axis(axis)).insert_axis(Axis(axis));
        self.push(Op::SumAxis { x, axis }, val)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let val = self.vals[x.0].mean_axis(Axis(axis)).unwrap().insert_axis(Axis(axis));
        self.push(Op::MeanAxis { x, axis }, val)
    }

    // ----- signal ops -----

    pub fn frame(&mut self, x: Var, win: usize, hop: usize) -> Var {
        let xv = &self.vals[x.0];
        assert_eq!(xv.ndim(), 1);
        let n = xv.len();
        assert!(n >= win, "signal shorter than window");
        let t = (n - win) / hop + 1;
        let mut out = ArrayD::zeros(IxDyn(&[t, win]));
        for ti in 0..t {
            for j in 0..win {
                out[[ti, j]] = xv[[ti * hop + j]];
            }
        }
        self.push(Op::Frame { x, win, hop }, out)
    }

    pub fn overlap_add(&mut self, x: Var, hop: usize) -> Var {
        let xv = &self.vals[x.0];
        assert_eq!(xv.ndim(), 2);
        let (t, win) = (xv.shape()[0], xv.shape()[1]);
        let n = (t - 1) * hop + win;
        let mut out = ArrayD::zeros(IxDyn(&[n]));
        for ti in 0..t {
            for j in 0..win {
                out[[ti * hop + j]] += xv[[ti, j]];
            }
        }
        self.push(Op::OverlapAdd { x, hop }, out)
    }

    pub fn zero_stuff(&mut self, x: Var, factor: usize) -> Var {
        let xv = &self.vals[x.0];
        assert_eq!(xv.ndim(), 1);
        let n = xv.len();
        let mut out = ArrayD::zeros(IxDyn(&[n * factor]));
        for i in 0..n {
            out[[i * factor]] = xv[[i]];
        }
        self.push(Op::ZeroStuff { x, factor }, out)
    }

    pub fn downsample(&mut self, x: Var, step: usize, offset: usize) -> Var {
        let xv = &self.vals[x.0];
        assert_eq!(xv.ndim(), 1);
        let n = xv.len();
        let m = if n > offset { (n - offset - 1) / step + 1 } else { 0 };
        let mut out = ArrayD::zeros(IxDyn(&[m]));
        for i in 0..m {
            out[[i]] = xv[[offset + i * step]];
        }
        self.push(Op::Downsample { x, step, offset }, out)
    }

    /// `|z|^(expo-1) * u` where `z = re + i*im` over `(P, F, T)`, `u` is the
    /// real (or imaginary) plane and `expo` is per-bin of shape `(F,)`.
    /// Zero magnitude maps to zero output.
    pub fn mag_pow(&mut self, re: Var, im: Var, expo: Var, imag_component: bool) -> Var {
        let rev = &self.vals[re.0];
        let imv = &self.vals[im.0];
        let ev = &self.vals[expo.0];
        assert_eq!(rev.shape(), imv.shape());
        assert_eq!(ev.ndim(), 1);
        assert_eq!(ev.len(), rev.shape()[1], "exponent must be per frequency bin");
        let mut out = ArrayD::zeros(rev.raw_dim());
        let (p, f, t) = (rev.shape()[0], rev.shape()[1], rev.shape()[2]);
        for pi in 0..p {
            for fi in 0..f {
                let e = ev[[fi]];
                for ti in 0..t {
                    let (r, i) = (rev[[pi, fi, ti]], imv[[pi, fi, ti]]);
                    let m = r.hypot(i);
                    if m > 0.0 {
                        let u = if imag_component { i } else { r };
                        out[[pi, fi, ti]] = m.powf(e) * (u / m);
                    }
                }
            }
        }
        self.push(Op::MagPow { re, im, expo, imag_component }, out)
    }

    pub fn band_expand(&mut self, x: Var, map: &[usize]) -> Var {
        let xv = &self.vals[x.0];
        assert_eq!(xv.ndim(), 1);
        let mut out = ArrayD::zeros(IxDyn(&[map.len()]));
        for (i, &b) in map.iter().enumerate() {
            out[[i]] = xv[[b]];
        }
        self.push(Op::BandExpand { x, map: map.to_vec() }, out)
    }

    // ----- backward -----

    /// Backpropagate from a scalar loss. Returns per-var gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.vals.len()];
        assert_eq!(self.vals[loss.0].len(), 1, "loss must be scalar");
        grads[loss.0] = Some(ArrayD::from_elem(self.vals[loss.0].raw_dim(), 1.0));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.ops[idx] {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, reduce_to(&g, self.vals[a.0].shape()));
                    self.acc(&mut grads, *b, reduce_to(&g, self.vals[b.0].shape()));
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, reduce_to(&g, self.vals[a.0].shape()));
                    self.acc(&mut grads, *b, reduce_to(&g.mapv(|v| -v), self.vals[b.0].shape()));
                }
                Op::Mul(a, b) => {
                    let ga = binary_broadcast(&g, &self.vals[b.0], |x, y| x * y);
                    let gb = binary_broadcast(&g, &self.vals[a.0], |x, y| x * y);
                    self.acc(&mut grads, *a, reduce_to(&ga, self.vals[a.0].shape()));
                    self.acc(&mut grads, *b, reduce_to(&gb, self.vals[b.0].shape()));
                }
                Op::Div(a, b) => {
                    let ga = binary_broadcast(&g, &self.vals[b.0], |x, y| x / y);
                    let out = &self.vals[idx];
                    let gy = binary_broadcast(&g, out, |x, y| x * y);
                    let gb = binary_broadcast(&gy, &self.vals[b.0], |x, y| -x / y);
                    self.acc(&mut grads, *a, reduce_to(&ga, self.vals[a.0].shape()));
                    self.acc(&mut grads, *b, reduce_to(&gb, self.vals[b.0].shape()));
                }
                Op::Neg(a) => self.acc(&mut grads, *a, g.mapv(|v| -v)),
                Op::Scale(a, c) => self.acc(&mut grads, *a, g.mapv(|v| c * v)),
                Op::AddScalar(a, _) => self.acc(&mut grads, *a, g),
                Op::Exp(a) => self.acc(&mut grads, *a, &g * &self.vals[idx]),
                Op::Ln(a) => self.acc(&mut grads, *a, &g / &self.vals[a.0]),
                Op::Sqrt(a) => {
                    let d = self.vals[idx].mapv(|y| if y > 0.0 { 0.5 / y } else { 0.0 });
                    self.acc(&mut grads, *a, &g * &d);
                }
                Op::Sigmoid(a) => {
                    let d = self.vals[idx].mapv(|y| y * (1.0 - y));
                    self.acc(&mut grads, *a, &g * &d);
                }
                Op::Tanh(a) => {
                    let d = self.vals[idx].mapv(|y| 1.0 - y * y);
                    self.acc(&mut grads, *a, &g * &d);
                }
                Op::Relu(a) => {
                    let d = self.vals[a.0].mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    self.acc(&mut grads, *a, &g * &d);
                }
                Op::Prelu { x, slope } => {
                    let xs = &self.vals[x.0];
                    let s = &self.vals[slope.0];
                    let mut gx = g.clone();
                    let mut gs = ArrayD::zeros(s.raw_dim());
                    for (c, mut lane) in gx.axis_iter_mut(Axis(0)).enumerate() {
                        let a = s[[c]];
                        let xlane = xs.index_axis(Axis(0), c);
                        let glane = g.index_axis(Axis(0), c);
                        let mut acc = 0.0;
                        ndarray::Zip::from(&mut lane).and(&xlane).for_each(|gv, &xv| {
                            if xv <= 0.0 {
                                *gv *= a;
                            }
                        });
                        ndarray::Zip::from(&glane).and(&xlane).for_each(|&gv, &xv| {
                            if xv <= 0.0 {
                                acc += gv * xv;
                            }
                        });
                        gs[[c]] = acc;
                    }
                    self.acc(&mut grads, *x, gx);
                    self.acc(&mut grads, *slope, gs);
                }
                Op::Matmul(a, b) => {
                    let gm = as2(&g);
                    let am = as2(&self.vals[a.0]);
                    let bm = as2(&self.vals[b.0]);
                    self.acc(&mut grads, *a, gm.dot(&bm.t()).into_dyn());
                    self.acc(&mut grads, *b, am.t().dot(&gm).into_dyn());
                }
                Op::Conv2d { x, w, spec } => {
                    let xv = as3(&self.vals[x.0]);
                    let wv = as4(&self.vals[w.0]);
                    let gv = as3(&g);
                    let dx = kernels::conv2d_dx(&wv.view(), &gv.view(), spec, xv.dim());
                    let dw = kernels::conv2d_dw(&xv.view(), &gv.view(), spec, wv.dim());
                    self.acc(&mut grads, *x, dx.into_dyn());
                    self.acc(&mut grads, *w, dw.into_dyn());
                }
                Op::ConvT2d { x, w, spec, .. } => {
                    let xv = as3(&self.vals[x.0]);
                    let wv = as4(&self.vals[w.0]);
                    let gv = as3(&g);
                    // Forward was conv2d_dx, so input grad is the plain conv and
                    // the weight grad swaps the roles of input and output.
                    let dx = kernels::conv2d(&gv.view(), &wv.view(), spec);
                    let dw = kernels::conv2d_dw(&gv.view(), &xv.view(), spec, wv.dim());
                    self.acc(&mut grads, *x, dx.into_dyn());
                    self.acc(&mut grads, *w, dw.into_dyn());
                }
                Op::Conv3d { x, w, spec } => {
                    let xv = self.vals[x.0].clone().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let wv = self.vals[w.0].clone().into_dimensionality::<ndarray::Ix5>().unwrap();
                    let gv = g.clone().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let dx = kernels::conv3d_dx(&wv.view(), &gv.view(), spec, xv.dim());
                    let dw = kernels::conv3d_dw(&xv.view(), &gv.view(), spec, wv.dim());
                    self.acc(&mut grads, *x, dx.into_dyn());
                    self.acc(&mut grads, *w, dw.into_dyn());
                }
                Op::Concat { axis, parts } => {
                    let mut start = 0;
                    for p in parts {
                        let len = self.vals[p.0].shape()[*axis];
                        let gp = g
                            .slice_axis(Axis(*axis), ndarray::Slice::from(start..start + len))
                            .to_owned();
                        self.acc(&mut grads, *p, gp);
                        start += len;
                    }
                }
                Op::SliceAxis { x, axis, start, end } => {
                    let mut gx = ArrayD::zeros(self.vals[x.0].raw_dim());
                    gx.slice_axis_mut(Axis(*axis), ndarray::Slice::from(*start..*end))
                        .assign(&g);
                    self.acc(&mut grads, *x, gx);
                }
                Op::PadZero { x, axis, before, .. } => {
                    let len = self.vals[x.0].shape()[*axis];
                    let gx = g
                        .slice_axis(Axis(*axis), ndarray::Slice::from(*before..*before + len))
                        .to_owned();
                    self.acc(&mut grads, *x, gx);
                }
                Op::Reshape(x) => {
                    let gx = g.clone().into_shape(self.vals[x.0].raw_dim()).unwrap();
                    self.acc(&mut grads, *x, gx);
                }
                Op::Permute { x, perm } => {
                    let mut inv = vec![0usize; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let gx = g.clone().permuted_axes(IxDyn(&inv)).as_standard_layout().to_owned();
                    self.acc(&mut grads, *x, gx);
                }
                Op::Flip { x, axis } => {
                    let mut gx = g.clone();
                    gx.invert_axis(Axis(*axis));
                    self.acc(&mut grads, *x, gx.as_standard_layout().to_owned());
                }
                Op::SumAll(x) => {
                    let gv = g[[0]];
                    self.acc(&mut grads, *x, ArrayD::from_elem(self.vals[x.0].raw_dim(), gv));
                }
                Op::MeanAll(x) => {
                    let n = self.vals[x.0].len() as f64;
                    let gv = g[[0]] / n;
                    self.acc(&mut grads, *x, ArrayD::from_elem(self.vals[x.0].raw_dim(), gv));
                }
                Op::SumAxis { x, .. } => {
                    let shape = self.vals[x.0].shape();
                    let gx = g.broadcast(IxDyn(shape)).unwrap().to_owned();
                    self.acc(&mut grads, *x, gx);
                }
                Op::MeanAxis { x, axis } => {
                    let shape = self.vals[x.0].shape().to_vec();
                    let n = shape[*axis] as f64;
                    let gx = g.broadcast(IxDyn(&shape)).unwrap().mapv(|v| v / n);
                    self.acc(&mut grads, *x, gx);
                }
                Op::Frame { x, win, hop } => {
                    let mut gx = ArrayD::zeros(self.vals[x.0].raw_dim());
                    let t = g.shape()[0];
                    for ti in 0..t {
                        for j in 0..*win {
                            gx[[ti * hop + j]] += g[[ti, j]];
                        }
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::OverlapAdd { x, hop } => {
                    let shape = self.vals[x.0].shape();
                    let (t, win) = (shape[0], shape[1]);
                    let mut gx = ArrayD::zeros(IxDyn(&[t, win]));
                    for ti in 0..t {
                        for j in 0..win {
                            gx[[ti, j]] = g[[ti * hop + j]];
                        }
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::ZeroStuff { x, factor } => {
                    let n = self.vals[x.0].len();
                    let mut gx = ArrayD::zeros(IxDyn(&[n]));
                    for i in 0..n {
                        gx[[i]] = g[[i * factor]];
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::Downsample { x, step, offset } => {
                    let mut gx = ArrayD::zeros(self.vals[x.0].raw_dim());
                    for i in 0..g.len() {
                        gx[[offset + i * step]] = g[[i]];
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::MagPow { re, im, expo, imag_component } => {
                    let rev = &self.vals[re.0];
                    let imv = &self.vals[im.0];
                    let ev = &self.vals[expo.0];
                    let out = &self.vals[idx];
                    let mut gre = ArrayD::zeros(rev.raw_dim());
                    let mut gim = ArrayD::zeros(imv.raw_dim());
                    let mut ge = ArrayD::zeros(ev.raw_dim());
                    let (p, f, t) = (rev.shape()[0], rev.shape()[1], rev.shape()[2]);
                    for pi in 0..p {
                        for fi in 0..f {
                            let e = ev[[fi]];
                            for ti in 0..t {
                                let (r, i) = (rev[[pi, fi, ti]], imv[[pi, fi, ti]]);
                                let m = r.hypot(i);
                                if m < MAG_GRAD_FLOOR {
                                    continue;
                                }
                                let gv = g[[pi, fi, ti]];
                                let (u, v) = if *imag_component { (i, r) } else { (r, i) };
                                let s = m.powf(e - 1.0);
                                let du = s * (1.0 + (e - 1.0) * u * u / (m * m));
                                let dv = s * (e - 1.0) * u * v / (m * m);
                                if *imag_component {
                                    gim[[pi, fi, ti]] += gv * du;
                                    gre[[pi, fi, ti]] += gv * dv;
                                } else {
                                    gre[[pi, fi, ti]] += gv * du;
                                    gim[[pi, fi, ti]] += gv * dv;
                                }
                                ge[[fi]] += gv * out[[pi, fi, ti]] * m.ln();
                            }
                        }
                    }
                    self.acc(&mut grads, *re, gre);
                    self.acc(&mut grads, *im, gim);
                    self.acc(&mut grads, *expo, ge);
                }
                Op::BandExpand { x, map } => {
                    let mut gx = ArrayD::zeros(self.vals[x.0].raw_dim());
                    for (i, &b) in map.iter().enumerate() {
                        gx[[b]] += g[[i]];
                    }
                    self.acc(&mut grads, *x, gx);
                }
            }
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<ArrayD<f64>>], v: Var, g: ArrayD<f64>) {
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Gradients for every named leaf, keyed by name.
    pub fn named_gradients(&self, grads: &Gradients) -> HashMap<String, ArrayD<f64>> {
        let mut out = HashMap::new();
        for (name, v) in &self.named {
            if let Some(g) = grads.wrt(*v) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

fn as2(a: &ArrayD<f64>) -> ndarray::Array2<f64> {
    a.clone().into_dimensionality::<ndarray::Ix2>().expect("expected 2-d array")
}

fn as3(a: &ArrayD<f64>) -> ndarray::Array3<f64> {
    a.clone().into_dimensionality::<ndarray::Ix3>().expect("expected 3-d array")
}

fn as4(a: &ArrayD<f64>) -> ndarray::Array4<f64> {
    a.clone().into_dimensionality::<ndarray::Ix4>().expect("expected 4-d array")
}

/// NumPy-style broadcast of a binary op.
fn binary_broadcast(a: &ArrayD<f64>, b: &ArrayD<f64>, f: impl Fn(f64, f64) -> f64) -> ArrayD<f64> {
    let shape = broadcast_shape(a.shape(), b.shape());
    let ab = a.broadcast(IxDyn(&shape)).expect("broadcast lhs");
    let bb = b.broadcast(IxDyn(&shape)).expect("broadcast rhs");
    let mut out = ArrayD::zeros(IxDyn(&shape));
    ndarray::Zip::from(&mut out).and(&ab).and(&bb).for_each(|o, &x, &y| *o = f(x, y));
    out
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let av = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let bv = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(av == bv || av == 1 || bv == 1, "incompatible broadcast {a:?} vs {b:?}");
        out[i] = av.max(bv);
    }
    out
}

/// Sum a gradient down to `shape` (undo broadcasting).
fn reduce_to(g: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (ax, (&have, &want)) in out.shape().to_vec().iter().zip(shape.iter()).enumerate() {
        if have != want {
            debug_assert_eq!(want, 1);
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}
