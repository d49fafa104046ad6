//! Waveform <-> spectrogram conversion.
//!
//! Analysis uses a periodic square-root Hann window at 75% overlap (25 ms
//! window, 6.25 ms hop at 16 kHz), frames zero-padded to the FFT size. The
//! inverse normalizes by the accumulated squared-window envelope, which makes
//! the round trip exact on every original sample, not just the interior.

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// P-channel time-domain audio.
#[derive(Debug, Clone)]
pub struct MultiChannelWaveform {
    /// (channels, samples)
    pub samples: Array2<f64>,
    pub sample_rate: u32,
}

impl MultiChannelWaveform {
    pub fn new(samples: Array2<f64>, sample_rate: u32) -> Result<Self> {
        if samples.nrows() == 0 || samples.ncols() == 0 {
            return Err(Error::shape("waveform must have at least one channel and one sample"));
        }
        if sample_rate == 0 {
            return Err(Error::config("sample rate must be positive"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("waveform contains non-finite samples".into()));
        }
        Ok(MultiChannelWaveform { samples, sample_rate })
    }

    pub fn channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.ncols() == 0
    }

    pub fn channel(&self, p: usize) -> Array1<f64> {
        self.samples.row(p).to_owned()
    }
}

/// Complex spectrogram over (channel, frequency, frame).
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    pub values: Array3<Complex64>,
}

impl ComplexSpectrogram {
    pub fn channels(&self) -> usize {
        self.values.dim().0
    }
    pub fn bins(&self) -> usize {
        self.values.dim().1
    }
    pub fn frames(&self) -> usize {
        self.values.dim().2
    }
}

/// STFT framing parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StftConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub lookahead_frames: usize,
    pub window_fn: String,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            window_ms: 25.0,
            hop_ms: 6.25,
            fft_size: 512,
            lookahead_frames: 1,
            window_fn: "sqrt_hann".into(),
            sample_rate: 16_000,
        }
    }
}

impl StftConfig {
    pub fn win_len(&self) -> usize {
        (self.window_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        let win = self.win_len();
        let hop = self.hop_len();
        if win == 0 || hop == 0 {
            return Err(Error::config("window and hop must be positive"));
        }
        if win % hop != 0 {
            return Err(Error::config(format!("hop {hop} must divide window {win} evenly")));
        }
        if self.fft_size < win {
            return Err(Error::config(format!(
                "fft size {} smaller than window {win}",
                self.fft_size
            )));
        }
        if self.window_fn != "sqrt_hann" {
            return Err(Error::config(format!("unsupported window '{}'", self.window_fn)));
        }
        let w = sqrt_hann(win);
        // Constant-overlap-add of w^2 over the fully overlapped interior.
        let frames = 4 * (win / hop);
        let total = (frames - 1) * hop + win;
        let mut env = vec![0.0; total];
        for m in 0..frames {
            for (j, &wj) in w.iter().enumerate() {
                env[m * hop + j] += wj * wj;
            }
        }
        let interior = &env[win..total - win];
        let target = win as f64 / hop as f64 / 2.0;
        if interior.iter().any(|&v| (v - target).abs() > 1e-9) {
            return Err(Error::config("window/hop pair does not satisfy COLA"));
        }
        Ok(())
    }

    /// Number of analysis frames for a signal of `n` samples.
    pub fn num_frames(&self, n: usize) -> usize {
        let layout = FrameLayout::new(self);
        layout.num_frames(n)
    }
}

/// Periodic square-root Hann window.
pub fn sqrt_hann(len: usize) -> Array1<f64> {
    Array1::from_shape_fn(len, |n| {
        (0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos()).sqrt()
    })
}

/// Shared framing arithmetic for analysis, synthesis and streaming.
#[derive(Debug, Clone)]
pub struct FrameLayout {
    pub win: usize,
    pub hop: usize,
    pub fft: usize,
    /// Reflect padding prepended to the signal (half a window).
    pub pad_start: usize,
}

impl FrameLayout {
    pub fn new(cfg: &StftConfig) -> Self {
        let win = cfg.win_len();
        FrameLayout { win, hop: cfg.hop_len(), fft: cfg.fft_size, pad_start: win / 2 }
    }

    pub fn num_frames(&self, n: usize) -> usize {
        let covered = self.pad_start + n;
        if covered <= self.win {
            1
        } else {
            (covered - self.win + self.hop - 1) / self.hop + 1
        }
    }

    pub fn padded_len(&self, n: usize) -> usize {
        (self.num_frames(n) - 1) * self.hop + self.win
    }

    /// Signal with reflect padding at the start and zeros at the end.
    pub fn pad_signal(&self, x: &Array1<f64>) -> Array1<f64> {
        let n = x.len();
        let total = self.padded_len(n);
        let mut out = Array1::zeros(total);
        for i in 0..self.pad_start {
            // Reflect around sample 0; degenerate signals fall back to zero.
            let src = self.pad_start - i;
            out[i] = if src < n { x[src] } else { 0.0 };
        }
        out.slice_mut(ndarray::s![self.pad_start..self.pad_start + n]).assign(x);
        out
    }

    /// Squared-window overlap envelope over the padded length for `t` frames.
    pub fn envelope(&self, t: usize) -> Array1<f64> {
        let w = sqrt_hann(self.win);
        let mut env = Array1::zeros((t - 1) * self.hop + self.win);
        for m in 0..t {
            for j in 0..self.win {
                env[m * self.hop + j] += w[j] * w[j];
            }
        }
        env
    }
}

/// Short-time Fourier transform of a multi-channel waveform.
pub fn stft(wave: &MultiChannelWaveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    if wave.sample_rate != cfg.sample_rate {
        return Err(Error::config(format!(
            "waveform rate {} does not match config rate {}",
            wave.sample_rate, cfg.sample_rate
        )));
    }
    let layout = FrameLayout::new(cfg);
    let bins = cfg.bins();
    let t = layout.num_frames(wave.len());
    let w = sqrt_hann(layout.win);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(layout.fft);
    let mut out = Array3::zeros((wave.channels(), bins, t));
    let mut buf = vec![Complex64::new(0.0, 0.0); layout.fft];
    for p in 0..wave.channels() {
        let padded = layout.pad_signal(&wave.channel(p));
        for m in 0..t {
            for j in 0..layout.fft {
                buf[j] = if j < layout.win {
                    Complex64::new(padded[m * layout.hop + j] * w[j], 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                };
            }
            fft.process(&mut buf);
            for k in 0..bins {
                out[[p, k, m]] = buf[k];
            }
            // Real input: DC and Nyquist are exactly real.
            out[[p, 0, m]].im = 0.0;
            out[[p, bins - 1, m]].im = 0.0;
        }
    }
    Ok(ComplexSpectrogram { values: out })
}

/// Inverse STFT. `length` truncates (or caps) the output to the original
/// sample count; `None` returns everything after the start padding.
pub fn istft(spec: &ComplexSpectrogram, cfg: &StftConfig, length: Option<usize>) -> Result<MultiChannelWaveform> {
    cfg.validate()?;
    let bins = cfg.bins();
    if spec.bins() != bins {
        return Err(Error::shape(format!(
            "spectrogram has {} bins, config expects {bins}",
            spec.bins()
        )));
    }
    let layout = FrameLayout::new(cfg);
    let t = spec.frames();
    let w = sqrt_hann(layout.win);
    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(layout.fft);
    let total = (t - 1) * layout.hop + layout.win;
    let env = layout.envelope(t);
    let full_out = total.saturating_sub(layout.pad_start);
    let n = length.unwrap_or(full_out).min(full_out);
    if n == 0 {
        return Err(Error::shape("spectrogram too short to reconstruct any samples"));
    }
    let mut out = Array2::zeros((spec.channels(), n));
    let mut buf = vec![Complex64::new(0.0, 0.0); layout.fft];
    for p in 0..spec.channels() {
        let mut acc = Array1::<f64>::zeros(total);
        for m in 0..t {
            buf[0] = spec.values[[p, 0, m]];
            for k in 1..bins - 1 {
                buf[k] = spec.values[[p, k, m]];
                buf[layout.fft - k] = spec.values[[p, k, m]].conj();
            }
            buf[bins - 1] = spec.values[[p, bins - 1, m]];
            ifft.process(&mut buf);
            let scale = 1.0 / layout.fft as f64;
            for j in 0..layout.win {
                acc[m * layout.hop + j] += buf[j].re * scale * w[j];
            }
        }
        for i in 0..n {
            let pos = layout.pad_start + i;
            let e = env[pos];
            out[[p, i]] = if e > 1e-12 { acc[pos] / e } else { 0.0 };
        }
    }
    MultiChannelWaveform::new(out, cfg.sample_rate)
}

/// Inverse real-DFT matrices `(A, B)` with `x = A·Re(X) + B·Im(X)` for a
/// one-sided spectrum of `fft/2 + 1` bins.
pub fn idft_matrices(fft: usize) -> (Array2<f64>, Array2<f64>) {
    let bins = fft / 2 + 1;
    let mut a = Array2::zeros((fft, bins));
    let mut b = Array2::zeros((fft, bins));
    for n in 0..fft {
        for k in 0..bins {
            let wk = if k == 0 || k == bins - 1 { 1.0 } else { 2.0 };
            let ang = 2.0 * std::f64::consts::PI * (k * n) as f64 / fft as f64;
            a[[n, k]] = wk * ang.cos() / fft as f64;
            b[[n, k]] = -wk * ang.sin() / fft as f64;
        }
    }
    (a, b)
}

/// Forward real-DFT matrices `(C, D)` with `Re(X) = C·x`, `Im(X) = D·x` for a
/// frame of `frame_len` samples zero-padded to `fft`.
pub fn dft_matrices(fft: usize, frame_len: usize) -> (Array2<f64>, Array2<f64>) {
    let bins = fft / 2 + 1;
    let mut c = Array2::zeros((bins, frame_len));
    let mut d = Array2::zeros((bins, frame_len));
    for k in 0..bins {
        for n in 0..frame_len {
            let ang = 2.0 * std::f64::consts::PI * (k * n) as f64 / fft as f64;
            c[[k, n]] = ang.cos();
            d[[k, n]] = -ang.sin();
        }
    }
    (c, d)
}

/// Differentiable iSTFT of a single-channel spectrum held on the tape.
///
/// `re`/`im` have shape (F, T). Returns a Var of shape (n,). Matches [`istft`]
/// numerically (same window, padding and envelope normalization).
pub fn tape_istft(tape: &mut Tape, re: Var, im: Var, cfg: &StftConfig, n: usize) -> Var {
    let layout = FrameLayout::new(cfg);
    let t = tape.value(re).shape()[1];
    let (a, b) = idft_matrices(layout.fft);
    // Only the first `win` output samples are used; trim the matrices.
    let a = a.slice(ndarray::s![..layout.win, ..]).to_owned();
    let b = b.slice(ndarray::s![..layout.win, ..]).to_owned();
    let av = tape.leaf(a.into_dyn());
    let bv = tape.leaf(b.into_dyn());
    let xa = tape.matmul(av, re); // (win, T)
    let xb = tape.matmul(bv, im);
    let frames_tw = tape.add(xa, xb);
    let w = sqrt_hann(layout.win);
    let wv = tape.leaf(w.clone().into_shape(IxDyn(&[layout.win, 1])).unwrap());
    let windowed = tape.mul(frames_tw, wv);
    let frames = tape.permute(windowed, &[1, 0]); // (T, win)
    let acc = tape.overlap_add(frames, layout.hop);
    let env = layout.envelope(t).mapv(|e| if e > 1e-12 { 1.0 / e } else { 0.0 });
    let envv = tape.leaf(env.into_dyn());
    let norm = tape.mul(acc, envv);
    tape.slice_axis(norm, 0, layout.pad_start, layout.pad_start + n)
}

/// Convert a spectrogram into tape leaves (re, im) of shape (P, F, T).
pub fn spec_to_leaves(tape: &mut Tape, spec: &ComplexSpectrogram) -> (Var, Var) {
    let (p, f, t) = spec.values.dim();
    let mut re = ArrayD::zeros(IxDyn(&[p, f, t]));
    let mut im = ArrayD::zeros(IxDyn(&[p, f, t]));
    for pi in 0..p {
        for fi in 0..f {
            for ti in 0..t {
                let v = spec.values[[pi, fi, ti]];
                re[[pi, fi, ti]] = v.re;
                im[[pi, fi, ti]] = v.im;
            }
        }
    }
    (tape.leaf(re), tape.leaf(im))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn noise(rng: &mut ChaCha8Rng, p: usize, n: usize) -> MultiChannelWaveform {
        let samples = Array2::from_shape_fn((p, n), |_| rng.gen_range(-0.9..0.9));
        MultiChannelWaveform::new(samples, 16_000).unwrap()
    }

    #[test]
    fn zero_input_gives_zero_spectrogram() {
        let cfg = StftConfig::default();
        let wave = MultiChannelWaveform::new(Array2::zeros((1, 16_000)), 16_000).unwrap();
        let spec = stft(&wave, &cfg).unwrap();
        assert_eq!(spec.channels(), 1);
        assert_eq!(spec.bins(), 257);
        assert!(spec.values.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn identical_channels_give_identical_spectra() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let one = noise(&mut rng, 1, 4000);
        let mut two = Array2::zeros((2, 4000));
        two.row_mut(0).assign(&one.samples.row(0));
        two.row_mut(1).assign(&one.samples.row(0));
        let wave = MultiChannelWaveform::new(two, 16_000).unwrap();
        let spec = stft(&wave, &StftConfig::default()).unwrap();
        for f in 0..spec.bins() {
            for t in 0..spec.frames() {
                assert_eq!(spec.values[[0, f, t]], spec.values[[1, f, t]]);
            }
        }
    }

    #[test]
    fn sinusoid_matches_direct_dft_and_concentrates() {
        let cfg = StftConfig::default();
        let layout = FrameLayout::new(&cfg);
        let bin = 40usize;
        let freq = bin as f64 * 16_000.0 / cfg.fft_size as f64;
        let n = 8000;
        let samples = Array2::from_shape_fn((1, n), |(_, i)| {
            (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin()
        });
        let wave = MultiChannelWaveform::new(samples, 16_000).unwrap();
        let spec = stft(&wave, &cfg).unwrap();

        // Direct per-frame DFT oracle.
        let w = sqrt_hann(layout.win);
        let padded = layout.pad_signal(&wave.channel(0));
        for m in [5usize, 20, 40] {
            for k in [0usize, bin, 100, 256] {
                let mut acc = Complex64::new(0.0, 0.0);
                for j in 0..layout.win {
                    let ang = -2.0 * std::f64::consts::PI * (k * j) as f64 / cfg.fft_size as f64;
                    acc += Complex64::from_polar(1.0, ang) * padded[m * layout.hop + j] * w[j];
                }
                if k == 0 || k == 256 {
                    acc.im = 0.0;
                }
                let got = spec.values[[0, k, m]];
                assert!((got - acc).norm() < 1e-9, "bin {k} frame {m}: {got} vs {acc}");
            }
            // Peak energy lands on the driving bin for interior frames.
            let mags: Vec<f64> = (0..spec.bins()).map(|k| spec.values[[0, k, m]].norm()).collect();
            let peak = mags.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(peak, bin);
        }
    }

    #[test]
    fn roundtrip_is_exact_on_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = StftConfig::default();
        for p in [1usize, 4] {
            let wave = noise(&mut rng, p, 12345);
            let spec = stft(&wave, &cfg).unwrap();
            let back = istft(&spec, &cfg, Some(wave.len())).unwrap();
            assert_eq!(back.len(), wave.len());
            let num: f64 = (&back.samples - &wave.samples).iter().map(|v| v * v).sum();
            let den: f64 = wave.samples.iter().map(|v| v * v).sum();
            assert!((num / den).sqrt() < 1e-9, "rel rms {}", (num / den).sqrt());
        }
    }

    #[test]
    fn zero_spectrogram_gives_zero_waveform() {
        let cfg = StftConfig::default();
        let spec = ComplexSpectrogram { values: Array3::zeros((1, 257, 30)) };
        let wave = istft(&spec, &cfg, None).unwrap();
        assert!(wave.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_frame_matches_direct_inverse_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = StftConfig::default();
        let layout = FrameLayout::new(&cfg);
        let mut values = Array3::zeros((1, 257, 1));
        for k in 0..257 {
            let im = if k == 0 || k == 256 { 0.0 } else { rng.gen_range(-1.0..1.0) };
            values[[0, k, 0]] = Complex64::new(rng.gen_range(-1.0..1.0), im);
        }
        let spec = ComplexSpectrogram { values: values.clone() };
        let wave = istft(&spec, &cfg, None).unwrap();

        // Direct inverse DFT oracle for the lone frame.
        let w = sqrt_hann(layout.win);
        let env = layout.envelope(1);
        for i in 0..wave.len() {
            let pos = layout.pad_start + i;
            let mut x = 0.0;
            for k in 0..257 {
                let wk = if k == 0 || k == 256 { 1.0 } else { 2.0 };
                let ang = 2.0 * std::f64::consts::PI * (k * pos) as f64 / 512.0;
                x += wk * (values[[0, k, 0]].re * ang.cos() - values[[0, k, 0]].im * ang.sin());
            }
            x = x / 512.0 * w[pos];
            let expect = if env[pos] > 1e-12 { x / env[pos] } else { 0.0 };
            assert!((wave.samples[[0, i]] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn stft_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = StftConfig::default();
        let x = noise(&mut rng, 2, 5000);
        let y = noise(&mut rng, 2, 5000);
        let (a, b) = (0.7, -1.3);
        let mixed = MultiChannelWaveform::new(a * &x.samples + b * &y.samples, 16_000).unwrap();
        let sx = stft(&x, &cfg).unwrap();
        let sy = stft(&y, &cfg).unwrap();
        let sm = stft(&mixed, &cfg).unwrap();
        let expect = sx.values.mapv(|v| v * a) + sy.values.mapv(|v| v * b);
        let err = (&sm.values - &expect).iter().map(|v| v.norm()).fold(0.0, f64::max);
        let scale = sm.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(err < 1e-9 * scale.max(1.0));
    }

    #[test]
    fn mismatched_sample_rate_is_rejected() {
        let wave = MultiChannelWaveform::new(Array2::zeros((1, 100)), 8_000).unwrap();
        assert!(matches!(stft(&wave, &StftConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn tape_istft_matches_plain_istft() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = StftConfig::default();
        let wave = noise(&mut rng, 1, 3000);
        let spec = stft(&wave, &cfg).unwrap();
        let plain = istft(&spec, &cfg, Some(wave.len())).unwrap();

        let mut tape = Tape::new();
        let (re3, im3) = spec_to_leaves(&mut tape, &spec);
        let re = tape.reshape(re3, &[spec.bins(), spec.frames()]);
        let im = tape.reshape(im3, &[spec.bins(), spec.frames()]);
        let out = tape_istft(&mut tape, re, im, &cfg, wave.len());
        let got = tape.value(out);
        for i in 0..wave.len() {
            assert!((got[[i]] - plain.samples[[0, i]]).abs() < 1e-9);
        }
    }
}
