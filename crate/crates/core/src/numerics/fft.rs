//! 1-D/2-D discrete Fourier transforms.
//!
//! Power-of-two lengths run through an iterative radix-2 Cooley-Tukey;
//! everything else falls back to Bluestein's chirp-z algorithm, so arbitrary
//! token-grid sizes (e.g. 14x14) are supported. The forward transform is
//! unnormalized; the inverse carries the `1/n` factor.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use std::f64::consts::PI;

fn bit_reverse_permute(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    let mut j = 0usize;
    for i in 0..n {
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
        let mut m = n >> 1;
        while m >= 1 && j & m != 0 {
            j ^= m;
            m >>= 1;
        }
        j |= m;
    }
}

/// Radix-2 in-place transform; `n` must be a power of two.
fn fft_radix2(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    bit_reverse_permute(re, im);
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * PI / len as f64;
        let (wr, wi) = (ang.cos(), ang.sin());
        let mut start = 0;
        while start < n {
            let (mut cr, mut ci) = (1.0f64, 0.0f64);
            for k in 0..len / 2 {
                let a = start + k;
                let b = a + len / 2;
                let tr = cr * re[b] - ci * im[b];
                let ti = cr * im[b] + ci * re[b];
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
            start += len;
        }
        len <<= 1;
    }
}

/// Bluestein chirp-z transform for arbitrary `n`, built on a radix-2 convolution.
fn fft_bluestein(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    // chirp[k] = exp(sign * i * pi * k^2 / n)
    let mut chirp_r = vec![0.0; n];
    let mut chirp_i = vec![0.0; n];
    for k in 0..n {
        // k^2 mod 2n keeps the angle argument bounded
        let sq = (k * k) % (2 * n);
        let ang = sign * PI * sq as f64 / n as f64;
        chirp_r[k] = ang.cos();
        chirp_i[k] = ang.sin();
    }
    let m = (2 * n - 1).next_power_of_two();
    let mut ar = vec![0.0; m];
    let mut ai = vec![0.0; m];
    for k in 0..n {
        // a[k] = x[k] * chirp[k]
        ar[k] = re[k] * chirp_r[k] - im[k] * chirp_i[k];
        ai[k] = re[k] * chirp_i[k] + im[k] * chirp_r[k];
    }
    let mut br = vec![0.0; m];
    let mut bi = vec![0.0; m];
    // b[k] = conj(chirp[|k|]) wrapped to make the linear convolution circular
    for k in 0..n {
        br[k] = chirp_r[k];
        bi[k] = -chirp_i[k];
        if k > 0 {
            br[m - k] = chirp_r[k];
            bi[m - k] = -chirp_i[k];
        }
    }
    fft_radix2(&mut ar, &mut ai, false);
    fft_radix2(&mut br, &mut bi, false);
    for k in 0..m {
        let tr = ar[k] * br[k] - ai[k] * bi[k];
        ai[k] = ar[k] * bi[k] + ai[k] * br[k];
        ar[k] = tr;
    }
    fft_radix2(&mut ar, &mut ai, true);
    let scale = 1.0 / m as f64;
    for k in 0..n {
        let cr = ar[k] * scale;
        let ci = ai[k] * scale;
        re[k] = cr * chirp_r[k] - ci * chirp_i[k];
        im[k] = cr * chirp_i[k] + ci * chirp_r[k];
    }
}

/// In-place 1-D transform of split complex data. Forward is unnormalized;
/// `inverse` applies the conjugate kernel and divides by `n`.
pub fn fft_inplace(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    assert_eq!(n, im.len());
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        fft_radix2(re, im, inverse);
    } else {
        fft_bluestein(re, im, inverse);
    }
    if inverse {
        let s = 1.0 / n as f64;
        for v in re.iter_mut() {
            *v *= s;
        }
        for v in im.iter_mut() {
            *v *= s;
        }
    }
}

/// 2-D transform over the trailing `(h, w)` axes of an interleaved complex
/// buffer holding `batch` planes.
pub(crate) fn fft2_batched(data: &mut [f64], batch: usize, h: usize, w: usize, inverse: bool) {
    debug_assert_eq!(data.len(), 2 * batch * h * w);
    let plane = h * w;
    let mut row_re = vec![0.0; w.max(h)];
    let mut row_im = vec![0.0; w.max(h)];
    for b in 0..batch {
        let base = 2 * b * plane;
        // rows
        for r in 0..h {
            for c in 0..w {
                let o = base + 2 * (r * w + c);
                row_re[c] = data[o];
                row_im[c] = data[o + 1];
            }
            fft_inplace(&mut row_re[..w], &mut row_im[..w], inverse);
            for c in 0..w {
                let o = base + 2 * (r * w + c);
                data[o] = row_re[c];
                data[o + 1] = row_im[c];
            }
        }
        // columns
        for c in 0..w {
            for r in 0..h {
                let o = base + 2 * (r * w + c);
                row_re[r] = data[o];
                row_im[r] = data[o + 1];
            }
            fft_inplace(&mut row_re[..h], &mut row_im[..h], inverse);
            for r in 0..h {
                let o = base + 2 * (r * w + c);
                data[o] = row_re[r];
                data[o + 1] = row_im[r];
            }
        }
    }
}

fn check_hw(t: &Tensor) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(Error::Shape(format!(
            "fft2 needs at least 2 axes, got {:?}",
            s
        )));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let batch: usize = s[..s.len() - 2].iter().product();
    Ok((batch.max(1), h, w))
}

/// Forward 2-D DFT over the trailing two axes. Real input is promoted to
/// complex; output is always complex.
pub fn fft2(t: &Tensor) -> Result<Tensor> {
    let (batch, h, w) = check_hw(t)?;
    let mut buf = if t.is_complex() {
        t.data().to_vec()
    } else {
        let mut b = vec![0.0; 2 * t.numel()];
        for (i, &v) in t.data().iter().enumerate() {
            b[2 * i] = v;
        }
        b
    };
    fft2_batched(&mut buf, batch, h, w, false);
    Tensor::new_complex(t.shape().to_vec(), buf)
}

/// Inverse 2-D DFT (with the `1/(h*w)` factor) over the trailing two axes.
pub fn ifft2(t: &Tensor) -> Result<Tensor> {
    if !t.is_complex() {
        return Err(Error::Shape("ifft2 expects a complex tensor".into()));
    }
    let (batch, h, w) = check_hw(t)?;
    let mut buf = t.data().to_vec();
    fft2_batched(&mut buf, batch, h, w, true);
    Tensor::new_complex(t.shape().to_vec(), buf)
}

/// Real part of a complex tensor.
pub fn real_part(t: &Tensor) -> Tensor {
    assert!(t.is_complex());
    let data: Vec<f64> = t.data().iter().step_by(2).copied().collect();
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}

/// Largest absolute imaginary component, used to assert real-valuedness
/// after complementary-mask reconstruction.
pub fn max_imag_abs(t: &Tensor) -> f64 {
    assert!(t.is_complex());
    t.data()
        .iter()
        .skip(1)
        .step_by(2)
        .fold(0.0f64, |m, v| m.max(v.abs()))
}
