//! Learnable spectrum compression: per-band magnitude power law with learned
//! exponents, applied before the network and inverted after it.

use ndarray::Array1;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stft::ComplexSpectrogram;
use crate::tape::{Tape, Var};

/// Per-band compression exponents over a partition of the frequency axis.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CompressionProfile {
    /// One exponent per band, each in (0, 1].
    pub ratios: Vec<f64>,
    /// B+1 strictly increasing bin indices spanning [0, F].
    pub band_edges: Vec<usize>,
}

impl CompressionProfile {
    /// Equal-width bands with a common initial exponent.
    pub fn equal_bands(num_bands: usize, bins: usize, init: f64) -> Result<Self> {
        if num_bands == 0 || num_bands > bins {
            return Err(Error::config(format!("invalid band count {num_bands} for {bins} bins")));
        }
        let mut edges = Vec::with_capacity(num_bands + 1);
        for b in 0..=num_bands {
            edges.push(b * bins / num_bands);
        }
        let profile = CompressionProfile { ratios: vec![init; num_bands], band_edges: edges };
        profile.validate(bins)?;
        Ok(profile)
    }

    pub fn num_bands(&self) -> usize {
        self.ratios.len()
    }

    pub fn validate(&self, bins: usize) -> Result<()> {
        if self.band_edges.len() != self.ratios.len() + 1 {
            return Err(Error::config("band_edges must have one more entry than ratios"));
        }
        if self.band_edges[0] != 0 || *self.band_edges.last().unwrap() != bins {
            return Err(Error::config(format!("band edges must span [0, {bins}]")));
        }
        if self.band_edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("band edges must be strictly increasing"));
        }
        if self.ratios.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return Err(Error::config("compression ratios must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Band index of every frequency bin.
    pub fn bin_map(&self) -> Vec<usize> {
        let bins = *self.band_edges.last().unwrap();
        let mut map = vec![0usize; bins];
        for b in 0..self.num_bands() {
            for item in map
                .iter_mut()
                .take(self.band_edges[b + 1])
                .skip(self.band_edges[b])
            {
                *item = b;
            }
        }
        map
    }

    pub fn exponent_per_bin(&self) -> Array1<f64> {
        let map = self.bin_map();
        Array1::from_iter(map.iter().map(|&b| self.ratios[b]))
    }
}

fn apply_power(spec: &ComplexSpectrogram, expo: &Array1<f64>) -> ComplexSpectrogram {
    let mut out = spec.values.clone();
    let (p, f, t) = out.dim();
    for pi in 0..p {
        for fi in 0..f {
            let e = expo[fi];
            for ti in 0..t {
                let z = out[[pi, fi, ti]];
                let m = z.norm();
                out[[pi, fi, ti]] = if m > 0.0 { z * (m.powf(e) / m) } else { Complex64::new(0.0, 0.0) };
            }
        }
    }
    ComplexSpectrogram { values: out }
}

/// Raise each bin magnitude to the band's exponent; phase is untouched.
pub fn compress_spectrum(spec: &ComplexSpectrogram, profile: &CompressionProfile) -> Result<ComplexSpectrogram> {
    profile.validate(spec.bins())?;
    Ok(apply_power(spec, &profile.exponent_per_bin()))
}

/// Exact inverse of [`compress_spectrum`] for nonzero magnitudes.
pub fn decompress_spectrum(spec: &ComplexSpectrogram, profile: &CompressionProfile) -> Result<ComplexSpectrogram> {
    profile.validate(spec.bins())?;
    Ok(apply_power(spec, &profile.exponent_per_bin().mapv(|r| 1.0 / r)))
}

/// Tape-side compression of (re, im) of shape (P, F, T) using a learnable
/// per-band exponent leaf `ratios` of shape (B,).
pub fn tape_compress(tape: &mut Tape, re: Var, im: Var, ratios: Var, profile: &CompressionProfile) -> (Var, Var) {
    let map = profile.bin_map();
    let expo = tape.band_expand(ratios, &map);
    let out_re = tape.mag_pow(re, im, expo, false);
    let out_im = tape.mag_pow(re, im, expo, true);
    (out_re, out_im)
}

/// Tape-side inverse compression (exponent 1/r per band).
pub fn tape_decompress(tape: &mut Tape, re: Var, im: Var, ratios: Var, profile: &CompressionProfile) -> (Var, Var) {
    let map = profile.bin_map();
    let ones = tape.leaf(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[profile.num_bands()]), 1.0));
    let inv = tape.div(ones, ratios);
    let expo = tape.band_expand(inv, &map);
    let out_re = tape.mag_pow(re, im, expo, false);
    let out_im = tape.mag_pow(re, im, expo, true);
    (out_re, out_im)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_spec(rng: &mut ChaCha8Rng, p: usize, f: usize, t: usize) -> ComplexSpectrogram {
        ComplexSpectrogram {
            values: Array3::from_shape_fn((p, f, t), |_| {
                Complex64::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0))
            }),
        }
    }

    #[test]
    fn unit_ratio_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = random_spec(&mut rng, 2, 16, 5);
        let profile = CompressionProfile::equal_bands(4, 16, 1.0).unwrap();
        let out = compress_spectrum(&spec, &profile).unwrap();
        let err = (&out.values - &spec.values).iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(err < 1e-12);
        let back = decompress_spectrum(&spec, &profile).unwrap();
        let err = (&back.values - &spec.values).iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(err < 1e-12);
    }

    #[test]
    fn scalar_power_law() {
        // Magnitude 4 at ratio 0.5 -> magnitude 2 with the same phase;
        // decompressing magnitude 2 restores 4.
        let mut values = Array3::zeros((1, 2, 1));
        values[[0, 0, 0]] = Complex64::from_polar(4.0, 0.7);
        values[[0, 1, 0]] = Complex64::from_polar(2.0, -1.1);
        let spec = ComplexSpectrogram { values };
        let profile = CompressionProfile::equal_bands(1, 2, 0.5).unwrap();
        let out = compress_spectrum(&spec, &profile).unwrap();
        assert!((out.values[[0, 0, 0]].norm() - 2.0).abs() < 1e-12);
        assert!((out.values[[0, 0, 0]].arg() - 0.7).abs() < 1e-12);
        let back = decompress_spectrum(&spec, &profile).unwrap();
        assert!((back.values[[0, 1, 0]].norm() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_magnitude_stays_zero() {
        let spec = ComplexSpectrogram { values: Array3::zeros((1, 8, 3)) };
        let profile = CompressionProfile::equal_bands(2, 8, 0.5).unwrap();
        let out = compress_spectrum(&spec, &profile).unwrap();
        assert!(out.values.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn roundtrip_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut spec = random_spec(&mut rng, 3, 32, 7);
        // Cover the specified magnitude range, including extremes.
        spec.values[[0, 0, 0]] = Complex64::from_polar(1e-8, 0.3);
        spec.values[[0, 1, 0]] = Complex64::from_polar(1e3, -0.4);
        let mut profile = CompressionProfile::equal_bands(8, 32, 0.5).unwrap();
        for (i, r) in profile.ratios.iter_mut().enumerate() {
            *r = 0.3 + 0.08 * i as f64;
        }
        let out = decompress_spectrum(&compress_spectrum(&spec, &profile).unwrap(), &profile).unwrap();
        for (a, b) in out.values.iter().zip(spec.values.iter()) {
            assert!((a - b).norm() <= 1e-6 * b.norm().max(1e-12), "{a} vs {b}");
        }
    }

    #[test]
    fn phase_preserved_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let profile = CompressionProfile::equal_bands(4, 16, 0.5).unwrap();
        let spec = random_spec(&mut rng, 1, 16, 4);
        let out = compress_spectrum(&spec, &profile).unwrap();
        for (a, b) in out.values.iter().zip(spec.values.iter()) {
            if b.norm() > 0.0 {
                let pa = a / a.norm();
                let pb = b / b.norm();
                assert!((pa - pb).norm() < 1e-7);
            }
        }
        // Monotone in magnitude per bin.
        for m in [0.1f64, 0.5, 1.0, 2.0, 7.0] {
            let lo = m.powf(0.5);
            let hi = (m * 1.5).powf(0.5);
            assert!(hi > lo);
        }
    }

    #[test]
    fn invalid_ratio_rejected() {
        let profile = CompressionProfile { ratios: vec![1.5], band_edges: vec![0, 8] };
        assert!(profile.validate(8).is_err());
        let profile = CompressionProfile { ratios: vec![0.0], band_edges: vec![0, 8] };
        assert!(profile.validate(8).is_err());
    }

    #[test]
    fn tape_compress_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = random_spec(&mut rng, 2, 16, 3);
        let profile = CompressionProfile::equal_bands(4, 16, 0.6).unwrap();
        let plain = compress_spectrum(&spec, &profile).unwrap();

        let mut tape = Tape::new();
        let (re, im) = crate::stft::spec_to_leaves(&mut tape, &spec);
        let ratios = tape.leaf(
            ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[4]), profile.ratios.clone()).unwrap(),
        );
        let (cre, cim) = tape_compress(&mut tape, re, im, ratios, &profile);
        let gre = tape.value(cre);
        let gim = tape.value(cim);
        for pi in 0..2 {
            for fi in 0..16 {
                for ti in 0..3 {
                    let want = plain.values[[pi, fi, ti]];
                    assert!((gre[[pi, fi, ti]] - want.re).abs() < 1e-12);
                    assert!((gim[[pi, fi, ti]] - want.im).abs() < 1e-12);
                }
            }
        }
    }
}
