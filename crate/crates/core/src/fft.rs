//! Two-dimensional DFT kernels over row-major `h x w` planes.
//!
//! Forward transforms are unnormalized; inverse transforms carry the `1/(hw)`
//! factor. The half-spectrum routines keep columns `0..w/2+1` and treat the
//! dropped columns as the Hermitian mirror of the stored ones.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

/// Number of stored columns of a half spectrum for width `w`.
pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Weight of stored column `l` when expanding a half spectrum: self-conjugate
/// columns count once, every other column stands for itself and its mirror.
pub fn hermitian_weight(l: usize, w: usize) -> f64 {
    if l == 0 || (w.is_multiple_of(2) && l == w / 2) {
        1.0
    } else {
        2.0
    }
}

/// In-place unnormalized 2D transform of a row-major `h x w` plane.
pub fn fft2_in_place(data: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    debug_assert_eq!(data.len(), h * w);
    let row = plan(w, inverse);
    for chunk in data.chunks_exact_mut(w) {
        row.process(chunk);
    }
    let col = plan(h, inverse);
    let mut buf = vec![Complex64::new(0.0, 0.0); h];
    for l in 0..w {
        for k in 0..h {
            buf[k] = data[k * w + l];
        }
        col.process(&mut buf);
        for k in 0..h {
            data[k * w + l] = buf[k];
        }
    }
}

/// Full forward transform of a real plane.
pub fn fft2_real(x: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let mut data: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_in_place(&mut data, h, w, false);
    data
}

/// Half-spectrum forward transform of a real plane; returns `(re, im)` of
/// shape `h x (w/2+1)`.
pub fn rfft2(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let full = fft2_real(x, h, w);
    let wf = half_width(w);
    let mut re = Vec::with_capacity(h * wf);
    let mut im = Vec::with_capacity(h * wf);
    for k in 0..h {
        for l in 0..wf {
            let z = full[k * w + l];
            re.push(z.re);
            im.push(z.im);
        }
    }
    (re, im)
}

/// Inverse of [`rfft2`]: `x = Re(sum_{k,l<wf} c_l Y[k,l] e^{+i theta}) / (hw)`
/// with `c_l` from [`hermitian_weight`]. Exact inverse on Hermitian-consistent
/// input and a real-linear map on any input.
pub fn irfft2(re: &[f64], im: &[f64], h: usize, w: usize) -> Vec<f64> {
    let wf = half_width(w);
    let mut data = vec![Complex64::new(0.0, 0.0); h * w];
    for k in 0..h {
        for l in 0..wf {
            let c = hermitian_weight(l, w);
            data[k * w + l] = Complex64::new(c * re[k * wf + l], c * im[k * wf + l]);
        }
    }
    fft2_in_place(&mut data, h, w, true);
    let norm = 1.0 / (h * w) as f64;
    data.iter().map(|z| z.re * norm).collect()
}

/// Adjoint of [`rfft2`] as a real-linear map `R^{hw} -> R^{2 h wf}`.
pub fn rfft2_adjoint(g_re: &[f64], g_im: &[f64], h: usize, w: usize) -> Vec<f64> {
    let wf = half_width(w);
    let mut data = vec![Complex64::new(0.0, 0.0); h * w];
    for k in 0..h {
        for l in 0..wf {
            data[k * w + l] = Complex64::new(g_re[k * wf + l], g_im[k * wf + l]);
        }
    }
    fft2_in_place(&mut data, h, w, true);
    data.iter().map(|z| z.re).collect()
}

/// Adjoint of [`irfft2`]; returns `(re, im)` gradients on the half spectrum.
pub fn irfft2_adjoint(g: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let full = fft2_real(g, h, w);
    let wf = half_width(w);
    let norm = 1.0 / (h * w) as f64;
    let mut re = Vec::with_capacity(h * wf);
    let mut im = Vec::with_capacity(h * wf);
    for k in 0..h {
        for l in 0..wf {
            let c = hermitian_weight(l, w) * norm;
            let z = full[k * w + l];
            re.push(c * z.re);
            im.push(c * z.im);
        }
    }
    (re, im)
}
