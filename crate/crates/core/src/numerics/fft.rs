//! Real-input discrete Fourier transform pair.
//!
//! Convention: the forward transform is unnormalized,
//! `X[k] = sum_n x[n] exp(-2 pi i k n / L)`, and the inverse carries `1/L`,
//! so `irfft(rfft(x)) == x`. Only the `floor(L/2) + 1` non-redundant bins are
//! stored. Power-of-two lengths go through an iterative radix-2 FFT, all other
//! lengths through a table-driven direct DFT. Arithmetic is carried out in
//! `f64` regardless of the element type.

use std::f64::consts::PI;

use super::real::Real;
use crate::error::{Error, Result};

/// Half spectrum of a real sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum<T> {
    re: Vec<T>,
    im: Vec<T>,
    origin_length: usize,
}

impl<T: Real> ComplexSpectrum<T> {
    pub fn new(re: Vec<T>, im: Vec<T>, origin_length: usize) -> Result<Self> {
        let spec = Self {
            re,
            im,
            origin_length,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn zeros(origin_length: usize) -> Self {
        let n = num_bins(origin_length);
        Self {
            re: vec![T::zero(); n],
            im: vec![T::zero(); n],
            origin_length,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.origin_length;
        if l < 2 {
            return Err(Error::MalformedSpectrum(format!(
                "origin length {l} is below 2"
            )));
        }
        let n = num_bins(l);
        if self.re.len() != n || self.im.len() != n {
            return Err(Error::MalformedSpectrum(format!(
                "length {l} needs {n} bins, got {} real / {} imaginary",
                self.re.len(),
                self.im.len()
            )));
        }
        if self.im[0] != T::zero() {
            return Err(Error::MalformedSpectrum(format!(
                "DC bin has imaginary part {}",
                self.im[0]
            )));
        }
        if l.is_multiple_of(2) && self.im[n - 1] != T::zero() {
            return Err(Error::MalformedSpectrum(format!(
                "Nyquist bin has imaginary part {}",
                self.im[n - 1]
            )));
        }
        Ok(())
    }

    pub fn re(&self) -> &[T] {
        &self.re
    }

    pub fn im(&self) -> &[T] {
        &self.im
    }

    pub fn origin_length(&self) -> usize {
        self.origin_length
    }

    pub fn num_bins(&self) -> usize {
        self.re.len()
    }

    /// Sets one bin. The DC and Nyquist imaginary parts must stay zero.
    pub fn set_bin(&mut self, k: usize, re: T, im: T) -> Result<()> {
        if k >= self.re.len() {
            return Err(Error::MalformedSpectrum(format!(
                "bin {k} out of range for {} bins",
                self.re.len()
            )));
        }
        self.re[k] = re;
        self.im[k] = im;
        self.validate()
    }
}

/// Number of non-redundant bins for a real signal of length `len`.
pub fn num_bins(len: usize) -> usize {
    len / 2 + 1
}

/// Forward real FFT of a whole sequence.
pub fn rfft<T: Real>(x: &[T]) -> Result<ComplexSpectrum<T>> {
    if x.len() < 2 {
        return Err(Error::precondition(
            "rfft",
            format!("sequence length {} is below 2", x.len()),
        ));
    }
    let plan = RealFft::new(x.len());
    let n = plan.bins();
    let mut re = vec![T::zero(); n];
    let mut im = vec![T::zero(); n];
    plan.forward(x, &mut re, &mut im);
    Ok(ComplexSpectrum {
        re,
        im,
        origin_length: x.len(),
    })
}

/// Inverse real FFT; rejects spectra that violate the Hermitian invariants.
pub fn irfft<T: Real>(spec: &ComplexSpectrum<T>) -> Result<Vec<T>> {
    spec.validate()?;
    let plan = RealFft::new(spec.origin_length);
    let mut out = vec![T::zero(); spec.origin_length];
    plan.inverse(&spec.re, &spec.im, &mut out);
    Ok(out)
}

/// Precomputed transform of one length, reusable across rows.
#[derive(Clone, Debug)]
pub(crate) struct RealFft {
    len: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
    radix2: bool,
}

impl RealFft {
    pub(crate) fn new(len: usize) -> Self {
        assert!(len >= 2, "transform length must be at least 2");
        let (cos, sin) = (0..len)
            .map(|j| {
                let a = 2.0 * PI * j as f64 / len as f64;
                (a.cos(), a.sin())
            })
            .unzip();
        Self {
            len,
            cos,
            sin,
            radix2: len.is_power_of_two(),
        }
    }

    pub(crate) fn bins(&self) -> usize {
        num_bins(self.len)
    }

    /// `re`/`im` receive the `bins()` coefficients of `x`.
    pub(crate) fn forward<T: Real>(&self, x: &[T], re: &mut [T], im: &mut [T]) {
        let l = self.len;
        let n = self.bins();
        debug_assert_eq!(x.len(), l);
        if self.radix2 {
            let mut buf_re: Vec<f64> = x.iter().map(|v| v.to_f64_lossy()).collect();
            let mut buf_im = vec![0.0; l];
            self.fft_in_place(&mut buf_re, &mut buf_im, false);
            for k in 0..n {
                re[k] = T::from_f64_lossy(buf_re[k]);
                im[k] = T::from_f64_lossy(buf_im[k]);
            }
        } else {
            let xs: Vec<f64> = x.iter().map(|v| v.to_f64_lossy()).collect();
            for k in 0..n {
                let (mut sr, mut si) = (0.0, 0.0);
                let mut idx = 0;
                for &v in &xs {
                    sr += v * self.cos[idx];
                    si -= v * self.sin[idx];
                    idx += k;
                    if idx >= l {
                        idx -= l;
                    }
                }
                re[k] = T::from_f64_lossy(sr);
                im[k] = T::from_f64_lossy(si);
            }
        }
        im[0] = T::zero();
        if l.is_multiple_of(2) {
            im[n - 1] = T::zero();
        }
    }

    /// Inverse transform. Imaginary parts of the DC and (even length) Nyquist
    /// bins are ignored, matching the usual `irfft` behaviour.
    pub(crate) fn inverse<T: Real>(&self, re: &[T], im: &[T], out: &mut [T]) {
        let l = self.len;
        let n = self.bins();
        debug_assert_eq!(re.len(), n);
        let inv_l = 1.0 / l as f64;
        if self.radix2 {
            let mut buf_re = vec![0.0; l];
            let mut buf_im = vec![0.0; l];
            for k in 0..n {
                buf_re[k] = re[k].to_f64_lossy();
                buf_im[k] = im[k].to_f64_lossy();
            }
            buf_im[0] = 0.0;
            buf_im[n - 1] = 0.0;
            for k in n..l {
                buf_re[k] = buf_re[l - k];
                buf_im[k] = -buf_im[l - k];
            }
            self.fft_in_place(&mut buf_re, &mut buf_im, true);
            for (o, v) in out.iter_mut().zip(&buf_re) {
                *o = T::from_f64_lossy(v * inv_l);
            }
        } else {
            let rs: Vec<f64> = re.iter().map(|v| v.to_f64_lossy()).collect();
            let is: Vec<f64> = im.iter().map(|v| v.to_f64_lossy()).collect();
            let even = l.is_multiple_of(2);
            // bins 1..upper appear twice in the full spectrum
            let upper = if even { n - 1 } else { n };
            for (t, o) in out.iter_mut().enumerate() {
                let mut acc = rs[0];
                if even {
                    acc += if t % 2 == 0 { rs[n - 1] } else { -rs[n - 1] };
                }
                let mut idx = t;
                for k in 1..upper {
                    acc += 2.0 * (rs[k] * self.cos[idx] - is[k] * self.sin[idx]);
                    idx += t;
                    if idx >= l {
                        idx -= l;
                    }
                }
                *o = T::from_f64_lossy(acc * inv_l);
            }
        }
    }

    /// Adjoint of [`forward`](Self::forward): maps bin cotangents back to
    /// sequence cotangents, `g[n] = sum_k gre[k] cos(2 pi k n / L) - gim[k] sin(2 pi k n / L)`.
    pub(crate) fn forward_adjoint<T: Real>(&self, gre: &[T], gim: &[T], out: &mut [T]) {
        let l = self.len;
        let n = self.bins();
        let scaled_re: Vec<T> = (0..n)
            .map(|k| gre[k] * T::from_f64_lossy(l as f64 / self.multiplicity(k)))
            .collect();
        let scaled_im: Vec<T> = (0..n)
            .map(|k| gim[k] * T::from_f64_lossy(l as f64 / self.multiplicity(k)))
            .collect();
        self.inverse(&scaled_re, &scaled_im, out);
    }

    /// Adjoint of [`inverse`](Self::inverse).
    pub(crate) fn inverse_adjoint<T: Real>(&self, g: &[T], gre: &mut [T], gim: &mut [T]) {
        let l = self.len as f64;
        self.forward(g, gre, gim);
        for k in 0..self.bins() {
            let c = T::from_f64_lossy(self.multiplicity(k) / l);
            gre[k] *= c;
            gim[k] *= c;
        }
    }

    /// How many times bin `k` appears in the full length-L spectrum.
    fn multiplicity(&self, k: usize) -> f64 {
        if k == 0 || (self.len.is_multiple_of(2) && k == self.bins() - 1) {
            1.0
        } else {
            2.0
        }
    }

    fn fft_in_place(&self, re: &mut [f64], im: &mut [f64], inverse: bool) {
        let l = self.len;
        let mut j = 0;
        for i in 1..l {
            let mut bit = l >> 1;
            while j & bit != 0 {
                j ^= bit;
                bit >>= 1;
            }
            j |= bit;
            if i < j {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let sign = if inverse { 1.0 } else { -1.0 };
        let mut size = 2;
        while size <= l {
            let half = size / 2;
            let step = l / size;
            for start in (0..l).step_by(size) {
                for m in 0..half {
                    let wr = self.cos[m * step];
                    let wi = sign * self.sin[m * step];
                    let (a, b) = (start + m, start + m + half);
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            size <<= 1;
        }
    }
}
