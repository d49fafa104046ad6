//! Spatial features: cosine inter-channel phase differences (cosIPD) and the
//! learnable angle-feature-extraction (AFE) block that turns them into a
//! frame-level embedding for the recurrent bottlenecks.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::complex::{DenseBlock, TimePad};
use crate::error::{Error, Result};
use crate::kernels::conv_out_len;
use crate::nn::{Conv2d, LayerNorm, PRelu, Params};
use crate::stft::ComplexSpectrogram;
use crate::tape::{Tape, Var};

/// cosIPD planes over (pair, frequency, frame); values in [-1, 1].
#[derive(Debug, Clone)]
pub struct CosIpdFeature {
    pub values: Array3<f64>,
    pub pairs: Vec<(usize, usize)>,
}

/// Frame-level spatial embedding (frames x embedding_dim).
#[derive(Debug, Clone)]
pub struct AngleEmbedding {
    pub values: Array2<f64>,
}

/// AFE hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AfeConfig {
    pub hidden_channels: usize,
    pub dense_depth: usize,
    /// Output channels of the final convolution.
    pub out_channels: usize,
    /// Frequency kernel/stride of the final convolution; reduces F so the
    /// embedding stays narrow enough for the LSTM fusion.
    pub freq_kernel: usize,
    pub freq_stride: usize,
}

impl Default for AfeConfig {
    fn default() -> Self {
        AfeConfig { hidden_channels: 16, dense_depth: 2, out_channels: 8, freq_kernel: 16, freq_stride: 16 }
    }
}

impl AfeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_channels == 0 || self.dense_depth == 0 || self.out_channels == 0 {
            return Err(Error::config("AFE channel counts and depth must be positive"));
        }
        if self.freq_kernel == 0 || self.freq_stride == 0 {
            return Err(Error::config("AFE final conv geometry must be positive"));
        }
        Ok(())
    }

    /// Reduced frequency size after the final convolution.
    pub fn reduced_f(&self, bins: usize) -> usize {
        conv_out_len(bins, self.freq_kernel, self.freq_stride, 1)
    }

    /// Embedding width D = out_channels x reduced_F.
    pub fn embedding_dim(&self, bins: usize) -> usize {
        self.out_channels * self.reduced_f(bins)
    }
}

/// Default pair list: (0, k) for k = 1..P-1.
pub fn default_pairs(channels: usize) -> Vec<(usize, usize)> {
    (1..channels).map(|k| (0, k)).collect()
}

/// cosIPD of selected channel pairs. Zero-magnitude bins use a zero phase
/// difference by convention (cosIPD = 1).
pub fn cos_ipd(spec: &ComplexSpectrogram, pairs: &[(usize, usize)]) -> Result<CosIpdFeature> {
    let (p, f, t) = spec.values.dim();
    if pairs.is_empty() {
        return Err(Error::Index("pair list must not be empty".into()));
    }
    for &(a, b) in pairs {
        if a >= p || b >= p {
            return Err(Error::Index(format!("pair ({a},{b}) out of range for {p} channels")));
        }
    }
    let mut values = Array3::zeros((pairs.len(), f, t));
    for (q, &(a, b)) in pairs.iter().enumerate() {
        for fi in 0..f {
            for ti in 0..t {
                let za = spec.values[[a, fi, ti]];
                let zb = spec.values[[b, fi, ti]];
                let denom = za.norm() * zb.norm();
                values[[q, fi, ti]] = if denom > 0.0 {
                    ((za.re * zb.re + za.im * zb.im) / denom).clamp(-1.0, 1.0)
                } else {
                    1.0
                };
            }
        }
    }
    Ok(CosIpdFeature { values, pairs: pairs.to_vec() })
}

/// The AFE network: 1x1 conv -> dilated dense block (depth 2) -> strided
/// conv, LayerNorm+PReLU after each convolution, causal in time.
#[derive(Debug, Clone)]
pub struct AfeBlock {
    conv_in: Conv2d,
    ln_in: LayerNorm,
    act_in: PRelu,
    dense: DenseBlock,
    conv_out: Conv2d,
    ln_out: LayerNorm,
    act_out: PRelu,
    pub cfg: AfeConfig,
}

impl AfeBlock {
    pub fn new(name: &str, num_pairs: usize, cfg: &AfeConfig, tpad: TimePad) -> Self {
        let h = cfg.hidden_channels;
        let kt = match tpad {
            TimePad::Causal => 2,
            TimePad::Lookahead => 3,
        };
        let conv_in = Conv2d {
            name: format!("{name}.in"),
            cout: h,
            cin: num_pairs,
            kernel: (1, 1),
            spec: crate::kernels::Conv2dSpec::unit(),
            bias: false,
        };
        let dense = DenseBlock::new(&format!("{name}.dense"), h, cfg.dense_depth, (3, kt), tpad);
        let conv_out = Conv2d {
            name: format!("{name}.out"),
            cout: cfg.out_channels,
            cin: h,
            kernel: (cfg.freq_kernel, kt),
            spec: crate::kernels::Conv2dSpec {
                stride: (cfg.freq_stride, 1),
                dilation: (1, 1),
                groups: 1,
                pad: ((0, 0), tpad.pads(kt, 1)),
            },
            bias: false,
        };
        AfeBlock {
            conv_in,
            ln_in: LayerNorm { name: format!("{name}.in_ln"), channels: h },
            act_in: PRelu { name: format!("{name}.in_act"), channels: h },
            dense,
            conv_out,
            ln_out: LayerNorm { name: format!("{name}.out_ln"), channels: cfg.out_channels },
            act_out: PRelu { name: format!("{name}.out_act"), channels: cfg.out_channels },
            cfg: cfg.clone(),
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

    /// cosIPD (Q, F, T) -> embedding (T, D).
    pub fn forward(&self, tape: &mut Tape, params: &Params, feat: Var) -> Var {
        let bins = tape.value(feat).shape()[1];
        let t_len = tape.value(feat).shape()[2];
        let y = self.conv_in.forward(tape, params, feat);
        let y = self.ln_in.forward(tape, params, y);
        let y = self.act_in.forward(tape, params, y);
        let y = self.dense.forward(tape, params, y);
        let y = self.conv_out.forward(tape, params, y);
        let y = self.ln_out.forward(tape, params, y);
        let y = self.act_out.forward(tape, params, y); // (C, F', T)
        let f_red = self.cfg.reduced_f(bins);
        let flat = tape.reshape(y, &[self.cfg.out_channels * f_red, t_len]);
        tape.permute(flat, &[1, 0]) // (T, D)
    }
}

/// Convenience wrapper producing an [`AngleEmbedding`] outside any tape.
pub fn afe_forward(feat: &CosIpdFeature, params: &Params, block: &AfeBlock) -> AngleEmbedding {
    let mut tape = Tape::new();
    let v = tape.leaf(feat.values.clone().into_dyn());
    let out = block.forward(&mut tape, params, v);
    let values = tape
        .value(out)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    AngleEmbedding { values }
}
