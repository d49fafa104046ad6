//! Dense convolution kernels shared by the autodiff tape and the streaming path.
//!
//! All convolutions are correlation-style (no kernel flip). Feature maps are
//! channel-major: 2-D inputs are `(C, H, W)` with `H` = frequency and `W` = time,
//! 3-D inputs are `(C, D, H, W)` with `D` the pair-depth axis.

use ndarray::{Array2, Array3, Array4, Array5, ArrayView3, ArrayView4, ArrayView5};

/// Geometry of a 2-D (grouped) convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
    /// ((h_before, h_after), (w_before, w_after)) zero padding.
    pub pad: ((usize, usize), (usize, usize)),
}

impl Conv2dSpec {
    pub fn unit() -> Self {
        Conv2dSpec { stride: (1, 1), dilation: (1, 1), groups: 1, pad: ((0, 0), (0, 0)) }
    }

    pub fn out_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> (usize, usize) {
        let ho = conv_out_len(h + self.pad.0 .0 + self.pad.0 .1, kh, self.stride.0, self.dilation.0);
        let wo = conv_out_len(w + self.pad.1 .0 + self.pad.1 .1, kw, self.stride.1, self.dilation.1);
        (ho, wo)
    }
}

pub fn conv_out_len(padded: usize, k: usize, stride: usize, dilation: usize) -> usize {
    let span = dilation * (k - 1) + 1;
    assert!(padded >= span, "input length {padded} shorter than kernel span {span}");
    (padded - span) / stride + 1
}

fn pad2(x: &ArrayView3<f64>, pad: ((usize, usize), (usize, usize))) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((c, h + pad.0 .0 + pad.0 .1, w + pad.1 .0 + pad.1 .1));
    out.slice_mut(ndarray::s![.., pad.0 .0..pad.0 .0 + h, pad.1 .0..pad.1 .0 + w])
        .assign(x);
    out
}

/// im2col on an already padded input: rows are (c, kh, kw), columns are (ho, wo).
fn im2col(
    xp: &Array3<f64>,
    kh: usize,
    kw: usize,
    spec: &Conv2dSpec,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (c, _, _) = xp.dim();
    let mut col = Array2::zeros((c * kh * kw, ho * wo));
    let (sh, sw) = spec.stride;
    let (dh, dw) = spec.dilation;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let mut dst = col.row_mut(row);
                for oh in 0..ho {
                    let ih = oh * sh + ki * dh;
                    let src = xp.slice(ndarray::s![ci, ih, kj * dw..]);
                    for ow in 0..wo {
                        dst[oh * wo + ow] = src[ow * sw];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add of im2col columns back into a padded input gradient.
fn col2im(
    col: &Array2<f64>,
    c: usize,
    hp: usize,
    wp: usize,
    kh: usize,
    kw: usize,
    spec: &Conv2dSpec,
    ho: usize,
    wo: usize,
) -> Array3<f64> {
    let mut xp = Array3::zeros((c, hp, wp));
    let (sh, sw) = spec.stride;
    let (dh, dw) = spec.dilation;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = col.row(row);
                for oh in 0..ho {
                    let ih = oh * sh + ki * dh;
                    for ow in 0..wo {
                        xp[[ci, ih, ow * sw + kj * dw]] += src[oh * wo + ow];
                    }
                }
            }
        }
    }
    xp
}

/// Grouped 2-D convolution. `x` is `(Cin, H, W)`, `w` is `(Cout, Cin/g, kh, kw)`.
pub fn conv2d(x: &ArrayView3<f64>, w: &ArrayView4<f64>, spec: &Conv2dSpec) -> Array3<f64> {
    let (cin, h, win) = x.dim();
    let (cout, cin_g, kh, kw) = w.dim();
    let g = spec.groups;
    assert_eq!(cin % g, 0, "input channels not divisible by groups");
    assert_eq!(cout % g, 0, "output channels not divisible by groups");
    assert_eq!(cin / g, cin_g, "weight input-channel extent mismatch");
    let (ho, wo) = spec.out_size(h, win, kh, kw);
    let xp = pad2(x, spec.pad);
    let col = im2col(&xp, kh, kw, spec, ho, wo);
    let mut out = Array3::zeros((cout, ho, wo));
    let rows_per_g = cin_g * kh * kw;
    let couts_per_g = cout / g;
    for gi in 0..g {
        let wg = w
            .slice(ndarray::s![gi * couts_per_g..(gi + 1) * couts_per_g, .., .., ..])
            .to_owned()
            .into_shape((couts_per_g, rows_per_g))
            .unwrap();
        let colg = col.slice(ndarray::s![gi * rows_per_g..(gi + 1) * rows_per_g, ..]);
        let og = wg.dot(&colg);
        out.slice_mut(ndarray::s![gi * couts_per_g..(gi + 1) * couts_per_g, .., ..])
            .assign(&og.into_shape((couts_per_g, ho, wo)).unwrap());
    }
    out
}

/// Gradient of `conv2d` with respect to its input. Also used as the forward pass
/// of the transposed convolution, which makes the two exact adjoints.
pub fn conv2d_dx(
    w: &ArrayView4<f64>,
    dout: &ArrayView3<f64>,
    spec: &Conv2dSpec,
    x_shape: (usize, usize, usize),
) -> Array3<f64> {
    let (cin, h, win) = x_shape;
    let (cout, cin_g, kh, kw) = w.dim();
    let g = spec.groups;
    let (dc, ho, wo) = dout.dim();
    assert_eq!(dc, cout);
    let rows_per_g = cin_g * kh * kw;
    let couts_per_g = cout / g;
    let mut dcol = Array2::zeros((cin * kh * kw, ho * wo));
    for gi in 0..g {
        let wg = w
            .slice(ndarray::s![gi * couts_per_g..(gi + 1) * couts_per_g, .., .., ..])
            .to_owned()
            .into_shape((couts_per_g, rows_per_g))
            .unwrap();
        let dg = dout
            .slice(ndarray::s![gi * couts_per_g..(gi + 1) * couts_per_g, .., ..])
            .to_owned()
            .into_shape((couts_per_g, ho * wo))
            .unwrap();
        let dcolg = wg.t().dot(&dg);
        dcol.slice_mut(ndarray::s![gi * rows_per_g..(gi + 1) * rows_per_g, ..])
            .assign(&dcolg);
    }
    let hp = h + spec.pad.0 .0 + spec.pad.0 .1;
    let wp = win + spec.pad.1 .0 + spec.pad.1 .1;
    let dxp = col2im(&dcol, cin, hp, wp, kh, kw, spec, ho, wo);
    dxp.slice(ndarray::s![
        ..,
        spec.pad.0 .0..spec.pad.0 .0 + h,
        spec.pad.1 .0..spec.pad.1 .0 + win
    ])
    .to_owned()
}

/// Gradient of `conv2d` with respect to its weights.
pub fn conv2d_dw(
    x: &ArrayView3<f64>,
    dout: &ArrayView3<f64>,
    spec: &Conv2dSpec,
    w_shape: (usize, usize, usize, usize),
) -> Array4<f64> {
    let (cout, cin_g, kh, kw) = w_shape;
    let g = spec.groups;
    let (_, ho, wo) = dout.dim();
    let xp = pad2(x, spec.pad);
    let col = im2col(&xp, kh, kw, spec, ho, wo);
    let rows_per_g = cin_g * kh * kw;
    let couts_per_g = cout / g;
    let mut dw = Array4::zeros(w_shape);
    for gi in 0..g {
        let dg = dout
            .slice(ndarray::s![gi * couts_per_g..(gi + 1) * couts_per_g, .., ..])
            .to_owned()
            .into_shape((couts_per_g, ho * wo))
            .unwrap();
        let colg = col.slice(ndarray::s![gi * rows_per_g..(gi + 1) * rows_per_g, ..]);
        let dwg = dg.dot(&colg.t());
        dw.slice_mut(ndarray::s![gi * couts_per_g..(gi + 1) * couts_per_g, .., .., ..])
            .assign(&dwg.into_shape((couts_per_g, cin_g, kh, kw)).unwrap());
    }
    dw
}

/// Geometry of a 3-D convolution (groups fixed to 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: (usize, usize, usize),
    /// ((d_b, d_a), (h_b, h_a), (w_b, w_a)) zero padding.
    pub pad: ((usize, usize), (usize, usize), (usize, usize)),
}

impl Conv3dSpec {
    pub fn out_size(
        &self,
        d: usize,
        h: usize,
        w: usize,
        kd: usize,
        kh: usize,
        kw: usize,
    ) -> (usize, usize, usize) {
        (
            conv_out_len(d + self.pad.0 .0 + self.pad.0 .1, kd, self.stride.0, 1),
            conv_out_len(h + self.pad.1 .0 + self.pad.1 .1, kh, self.stride.1, 1),
            conv_out_len(w + self.pad.2 .0 + self.pad.2 .1, kw, self.stride.2, 1),
        )
    }
}

fn pad3(x: &ArrayView4<f64>, pad: ((usize, usize), (usize, usize), (usize, usize))) -> Array4<f64> {
    let (c, d, h, w) = x.dim();
    let mut out = Array4::zeros((
        c,
        d + pad.0 .0 + pad.0 .1,
        h + pad.1 .0 + pad.1 .1,
        w + pad.2 .0 + pad.2 .1,
    ));
    out.slice_mut(ndarray::s![
        ..,
        pad.0 .0..pad.0 .0 + d,
        pad.1 .0..pad.1 .0 + h,
        pad.2 .0..pad.2 .0 + w
    ])
    .assign(x);
    out
}

fn im2col3(
    xp: &Array4<f64>,
    k: (usize, usize, usize),
    spec: &Conv3dSpec,
    o: (usize, usize, usize),
) -> Array2<f64> {
    let (c, _, _, _) = xp.dim();
    let (kd, kh, kw) = k;
    let (od, oh, ow) = o;
    let mut col = Array2::zeros((c * kd * kh * kw, od * oh * ow));
    for ci in 0..c {
        for zd in 0..kd {
            for zh in 0..kh {
                for zw in 0..kw {
                    let row = ((ci * kd + zd) * kh + zh) * kw + zw;
                    let mut dst = col.row_mut(row);
                    for a in 0..od {
                        for b in 0..oh {
                            for e in 0..ow {
                                dst[(a * oh + b) * ow + e] = xp[[
                                    ci,
                                    a * spec.stride.0 + zd,
                                    b * spec.stride.1 + zh,
                                    e * spec.stride.2 + zw,
                                ]];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// 3-D convolution. `x` is `(Cin, D, H, W)`, `w` is `(Cout, Cin, kd, kh, kw)`.
pub fn conv3d(x: &ArrayView4<f64>, w: &ArrayView5<f64>, spec: &Conv3dSpec) -> Array4<f64> {
    let (cin, d, h, win) = x.dim();
    let (cout, cin_w, kd, kh, kw) = w.dim();
    assert_eq!(cin, cin_w);
    let o = spec.out_size(d, h, win, kd, kh, kw);
    let xp = pad3(x, spec.pad);
    let col = im2col3(&xp, (kd, kh, kw), spec, o);
    let wm = w.to_owned().into_shape((cout, cin * kd * kh * kw)).unwrap();
    let out = wm.dot(&col);
    out.into_shape((cout, o.0, o.1, o.2)).unwrap()
}

pub fn conv3d_dx(
    w: &ArrayView5<f64>,
    dout: &ArrayView4<f64>,
    spec: &Conv3dSpec,
    x_shape: (usize, usize, usize, usize),
) -> Array4<f64> {
    let (cin, d, h, win) = x_shape;
    let (cout, _, kd, kh, kw) = w.dim();
    let (_, od, oh, ow) = dout.dim();
    let wm = w.to_owned().into_shape((cout, cin * kd * kh * kw)).unwrap();
    let dm = dout.to_owned().into_shape((cout, od * oh * ow)).unwrap();
    let dcol = wm.t().dot(&dm);
    let dp = (
        d + spec.pad.0 .0 + spec.pad.0 .1,
        h + spec.pad.1 .0 + spec.pad.1 .1,
        win + spec.pad.2 .0 + spec.pad.2 .1,
    );
    let mut dxp = Array4::zeros((cin, dp.0, dp.1, dp.2));
    for ci in 0..cin {
        for zd in 0..kd {
            for zh in 0..kh {
                for zw in 0..kw {
                    let row = ((ci * kd + zd) * kh + zh) * kw + zw;
                    let src = dcol.row(row);
                    for a in 0..od {
                        for b in 0..oh {
                            for e in 0..ow {
                                dxp[[
                                    ci,
                                    a * spec.stride.0 + zd,
                                    b * spec.stride.1 + zh,
                                    e * spec.stride.2 + zw,
                                ]] += src[(a * oh + b) * ow + e];
                            }
                        }
                    }
                }
            }
        }
    }
    dxp.slice(ndarray::s![
        ..,
        spec.pad.0 .0..spec.pad.0 .0 + d,
        spec.pad.1 .0..spec.pad.1 .0 + h,
        spec.pad.2 .0..spec.pad.2 .0 + win
    ])
    .to_owned()
}

pub fn conv3d_dw(
    x: &ArrayView4<f64>,
    dout: &ArrayView4<f64>,
    spec: &Conv3dSpec,
    w_shape: (usize, usize, usize, usize, usize),
) -> Array5<f64> {
    let (cout, _cin, kd, kh, kw) = w_shape;
    let (_, od, oh, ow) = dout.dim();
    let xp = pad3(x, spec.pad);
    let col = im2col3(&xp, (kd, kh, kw), spec, (od, oh, ow));
    let dm = dout.to_owned().into_shape((cout, od * oh * ow)).unwrap();
    let dw = dm.dot(&col.t());
    dw.into_shape(w_shape).unwrap()
}
