//! Graph building blocks shared by the trainable modules.

use ndarray::ArrayView3;

use crate::autodiff::{Graph, Tensor, Var, ZERO};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// im2col gather index for a 3x3 same-padded convolution over `[b, h, w, c]`.
/// Column layout is `(dy * 3 + dx) * c + ci`.
fn im2col3x3(b: usize, h: usize, w: usize, c: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(b * h * w * 9 * c);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                for dy in 0..3 {
                    for dx in 0..3 {
                        let (sy, sx) = (y as isize + dy as isize - 1, x as isize + dx as isize - 1);
                        let inside = sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize;
                        for ci in 0..c {
                            idx.push(if inside {
                                ((bi * h + sy as usize) * w + sx as usize) * c + ci
                            } else {
                                ZERO
                            });
                        }
                    }
                }
            }
        }
    }
    idx
}

/// 3x3 same-padded convolution. `x: [b, h, w, cin]`, `weight: [9 cin, cout]`,
/// `bias: [cout]`; returns `[b, h, w, cout]`.
pub fn conv3x3(g: &mut Graph, x: Var, weight: Var, bias: Var) -> Var {
    let s = g.shape(x).to_vec();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let cout = g.shape(weight)[1];
    let cols = g.gather(x, im2col3x3(b, h, w, c), &[b * h * w, 9 * c]);
    let y = g.affine(cols, weight, bias);
    g.reshape(y, &[b, h, w, cout])
}

/// Global spatial mean of `[b, h, w, c]`, giving `[b, c]`.
pub fn spatial_mean(g: &mut Graph, x: Var) -> Var {
    g.mean_axes(x, 1, 2)
}

/// Conv3x3 followed by a global spatial mean: `[b, h, w, c]` to `[b, cout]`.
pub fn pooled_descriptor(g: &mut Graph, x: Var, weight: Var, bias: Var) -> Var {
    let y = conv3x3(g, x, weight, bias);
    spatial_mean(g, y)
}

/// Direct (graph-free) conv3x3 plus spatial mean of one `[h, w, c]` field.
pub fn pooled_descriptor_direct(x: ArrayView3<f64>, weight: &Tensor, bias: &Tensor) -> Vec<f64> {
    let (h, w, c) = x.dim();
    let cout = weight.shape()[1];
    let wd = weight.data();
    let mut acc = vec![0.0; cout];
    for y in 0..h {
        for xx in 0..w {
            for dy in 0..3 {
                for dx in 0..3 {
                    let (sy, sx) = (y as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    for ci in 0..c {
                        let v = x[[sy as usize, sx as usize, ci]];
                        let row = ((dy * 3 + dx) * c + ci) * cout;
                        for (o, a) in acc.iter_mut().enumerate() {
                            *a += v * wd[row + o];
                        }
                    }
                }
            }
        }
    }
    let n = (h * w) as f64;
    acc.iter().zip(bias.data()).map(|(a, b)| a / n + b).collect()
}

/// Layer norm over the last axis with a learned scale and shift.
pub fn layer_norm_affine(g: &mut Graph, x: Var, gamma: Var, beta: Var) -> Var {
    let n = g.layer_norm(x, LAYER_NORM_EPS);
    let s = g.mul_bcast(n, gamma);
    g.add_bcast(s, beta)
}

/// Two-layer GELU feed-forward network on the last axis.
pub fn ffn(g: &mut Graph, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Var {
    let hdn = g.affine(x, w1, b1);
    let act = g.gelu(hdn);
    g.affine(act, w2, b2)
}

/// Tokenizes `[h, w, c]` into non-overlapping `ph x pw` patches, zero-padding
/// the bottom and right edges. Returns `[ceil(h/ph) * ceil(w/pw), ph pw c]`
/// with column layout `(dy * pw + dx) * c + ci`.
pub fn patchify(g: &mut Graph, x: Var, ph: usize, pw: usize) -> (Var, usize, usize) {
    let s = g.shape(x).to_vec();
    let (h, w, c) = (s[0], s[1], s[2]);
    let (th, tw) = (h.div_ceil(ph), w.div_ceil(pw));
    let mut idx = Vec::with_capacity(th * tw * ph * pw * c);
    for ty in 0..th {
        for tx in 0..tw {
            for dy in 0..ph {
                for dx in 0..pw {
                    let (y, xx) = (ty * ph + dy, tx * pw + dx);
                    for ci in 0..c {
                        idx.push(if y < h && xx < w { (y * w + xx) * c + ci } else { ZERO });
                    }
                }
            }
        }
    }
    (g.gather(x, idx, &[th * tw, ph * pw * c]), th, tw)
}

/// Inverse layout of [`patchify`]: `[th * tw, ph pw c]` back to `[h, w, c]`,
/// dropping the padded cells.
#[allow(clippy::too_many_arguments)]
pub fn unpatchify(g: &mut Graph, z: Var, th: usize, tw: usize, ph: usize, pw: usize, h: usize, w: usize) -> Var {
    let c = g.shape(z)[1] / (ph * pw);
    debug_assert!(th * ph >= h && tw * pw >= w);
    let mut idx = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let tok = (y / ph) * tw + x / pw;
            let within = ((y % ph) * pw + x % pw) * c;
            for ci in 0..c {
                idx.push(tok * ph * pw * c + within + ci);
            }
        }
    }
    g.gather(z, idx, &[h, w, c])
}

/// Stacks `[h, w, c]` regions of a grid into `[r, a_h, a_w, c]` (row-major
/// region order).
pub fn partition(g: &mut Graph, x: Var, a_h: usize, a_w: usize) -> Var {
    let s = g.shape(x).to_vec();
    let (h, w, c) = (s[0], s[1], s[2]);
    let (rows, cols) = (h / a_h, w / a_w);
    let mut idx = Vec::with_capacity(h * w * c);
    for r in 0..rows * cols {
        let (oy, ox) = ((r / cols) * a_h, (r % cols) * a_w);
        for y in 0..a_h {
            for xx in 0..a_w {
                for ci in 0..c {
                    idx.push(((oy + y) * w + ox + xx) * c + ci);
                }
            }
        }
    }
    g.gather(x, idx, &[rows * cols, a_h, a_w, c])
}

/// Inverse of [`partition`].
pub fn merge(g: &mut Graph, regions: Var, h: usize, w: usize) -> Var {
    let s = g.shape(regions).to_vec();
    let (a_h, a_w, c) = (s[1], s[2], s[3]);
    let cols = w / a_w;
    let mut idx = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let r = (y / a_h) * cols + x / a_w;
            for ci in 0..c {
                idx.push(((r * a_h + y % a_h) * a_w + x % a_w) * c + ci);
            }
        }
    }
    g.gather(regions, idx, &[h, w, c])
}
