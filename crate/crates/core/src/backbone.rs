//! Patch embedding, shifted-window attention blocks and the projection back
//! to the grid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{check_params, param_set, Gradients, Graph, Init, ParamSet, Tensor, Var, ZERO};
use crate::error::{Result, UxError};
use crate::layers;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub window: usize,
    pub patch_height: usize,
    pub patch_width: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(UxError::Config(format!(
                "embedding width {} must be a positive multiple of the head count {}",
                self.embed_dim, self.heads
            )));
        }
        if self.window == 0 || self.patch_height == 0 || self.patch_width == 0 {
            return Err(UxError::Config("window and patch sizes must be positive".into()));
        }
        Ok(())
    }

    /// Token grid for an `h x w` field.
    pub fn token_grid(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.patch_height), w.div_ceil(self.patch_width))
    }
}

param_set! {
    /// Patch embedding and output head.
    pub struct EdgeParams / EdgeVars { patch_w, patch_b, patch_ln_g, patch_ln_b, out_w, out_b }
}

param_set! {
    /// One pre-norm attention + FFN block.
    pub struct BlockParams / BlockVars {
        ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b, rel_bias,
        ln2_g, ln2_b, ffn_w1, ffn_b1, ffn_w2, ffn_b2,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub edge: EdgeParams,
    pub blocks: Vec<BlockParams>,
}

#[derive(Debug, Clone)]
pub struct BackboneVars {
    pub edge: EdgeVars,
    pub blocks: Vec<BlockVars>,
}

impl BackboneVars {
    pub fn grads(&self, g: &Gradients) -> BackboneParams {
        BackboneParams { edge: self.edge.grads(g), blocks: self.blocks.iter().map(|b| b.grads(g)).collect() }
    }
}

impl ParamSet for BackboneParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.edge.visit(&mut |n, t| f(&format!("edge.{n}"), t));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&mut |n, t| f(&format!("block{i}.{n}"), t));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.edge.visit_mut(&mut |n, t| f(&format!("edge.{n}"), t));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&mut |n, t| f(&format!("block{i}.{n}"), t));
        }
    }
}

impl BackboneParams {
    fn build(cfg: &BackboneConfig, channels: usize, mut make: impl FnMut(&[usize], Init) -> Tensor) -> Self {
        let d = cfg.embed_dim;
        let pix = cfg.patch_height * cfg.patch_width * channels;
        let rel = (2 * cfg.window - 1).pow(2);
        let edge = EdgeParams {
            patch_w: make(&[pix, d], Init::FanIn(pix, 1.0)),
            patch_b: make(&[d], Init::Zeros),
            patch_ln_g: make(&[d], Init::Ones),
            patch_ln_b: make(&[d], Init::Zeros),
            out_w: make(&[d, pix], Init::FanIn(d, 1.0)),
            out_b: make(&[pix], Init::Zeros),
        };
        let blocks = (0..cfg.depth)
            .map(|_| BlockParams {
                ln1_g: make(&[d], Init::Ones),
                ln1_b: make(&[d], Init::Zeros),
                qkv_w: make(&[d, 3 * d], Init::FanIn(d, 1.0)),
                qkv_b: make(&[3 * d], Init::Zeros),
                proj_w: make(&[d, d], Init::FanIn(d, 0.5)),
                proj_b: make(&[d], Init::Zeros),
                rel_bias: make(&[rel, cfg.heads], Init::Normal(0.02)),
                ln2_g: make(&[d], Init::Ones),
                ln2_b: make(&[d], Init::Zeros),
                ffn_w1: make(&[d, 4 * d], Init::FanIn(d, 1.0)),
                ffn_b1: make(&[4 * d], Init::Zeros),
                ffn_w2: make(&[4 * d, d], Init::FanIn(4 * d, 0.5)),
                ffn_b2: make(&[d], Init::Zeros),
            })
            .collect();
        BackboneParams { edge, blocks }
    }

    pub fn init<R: Rng + ?Sized>(cfg: &BackboneConfig, channels: usize, rng: &mut R) -> Self {
        Self::build(cfg, channels, |s, i| i.make(s, rng))
    }

    pub fn zeros(cfg: &BackboneConfig, channels: usize) -> Self {
        Self::build(cfg, channels, |s, _| Tensor::zeros(s))
    }

    pub fn validate(&self, cfg: &BackboneConfig, channels: usize) -> Result<()> {
        check_params(self, &Self::zeros(cfg, channels))
    }

    pub fn bind(&self, g: &mut Graph) -> BackboneVars {
        BackboneVars { edge: self.edge.bind(g), blocks: self.blocks.iter().map(|b| b.bind(g)).collect() }
    }
}

/// `[h, w, C]` to `[h_bar, w_bar, D]` tokens: zero-padded non-overlapping patch
/// projection followed by layer norm.
pub fn patch_embed(g: &mut Graph, x: Var, v: &EdgeVars, cfg: &BackboneConfig) -> Var {
    let (cols, th, tw) = layers::patchify(g, x, cfg.patch_height, cfg.patch_width);
    let z = g.affine(cols, v.patch_w, v.patch_b);
    let z = layers::layer_norm_affine(g, z, v.patch_ln_g, v.patch_ln_b);
    g.reshape(z, &[th, tw, cfg.embed_dim])
}

/// Tokens back to an `h x w x C` field, dropping padded cells.
pub fn project_output(g: &mut Graph, tokens: Var, v: &EdgeVars, cfg: &BackboneConfig, h: usize, w: usize) -> Var {
    let s = g.shape(tokens).to_vec();
    let (th, tw, d) = (s[0], s[1], s[2]);
    let flat = g.reshape(tokens, &[th * tw, d]);
    let z = g.affine(flat, v.out_w, v.out_b);
    layers::unpatchify(g, z, th, tw, cfg.patch_height, cfg.patch_width, h, w)
}

/// Index bookkeeping for windowed attention over an `h x w` token grid.
struct WindowPlan {
    /// Gather index taking `[h, w, D]` to `[windows, T, D]` (pad = `ZERO`).
    forward: Vec<usize>,
    windows: usize,
    tokens: usize,
    /// For each original token, its `(window, slot)`.
    placement: Vec<(usize, usize)>,
    /// Additive mask `[windows, T, T]`.
    mask: Vec<f64>,
}

fn window_plan(h: usize, w: usize, d: usize, win: usize, shift: usize) -> WindowPlan {
    let (hp, wp) = (h.div_ceil(win) * win, w.div_ceil(win) * win);
    let (nh, nw) = (hp / win, wp / win);
    let windows = nh * nw;
    let t = win * win;
    // label of each padded-grid cell: shifted-region id, with pads apart
    let band = |p: usize, n: usize| {
        if shift == 0 || p < n - win {
            0
        } else if p < n - shift {
            1
        } else {
            2
        }
    };
    let mut forward = Vec::with_capacity(windows * t * d);
    let mut placement = vec![(0, 0); h * w];
    let mut labels = vec![0usize; windows * t];
    for wy in 0..nh {
        for wx in 0..nw {
            let widx = wy * nw + wx;
            for oy in 0..win {
                for ox in 0..win {
                    let (py, px) = (wy * win + oy, wx * win + ox);
                    let (sy, sx) = ((py + shift) % hp, (px + shift) % wp);
                    let slot = oy * win + ox;
                    let real = sy < h && sx < w;
                    labels[widx * t + slot] = (band(py, hp) * 3 + band(px, wp)) * 2 + usize::from(!real);
                    if real {
                        placement[sy * w + sx] = (widx, slot);
                    }
                    for e in 0..d {
                        forward.push(if real { (sy * w + sx) * d + e } else { ZERO });
                    }
                }
            }
        }
    }
    let mut mask = vec![0.0; windows * t * t];
    for wi in 0..windows {
        for i in 0..t {
            for j in 0..t {
                if labels[wi * t + i] != labels[wi * t + j] {
                    mask[(wi * t + i) * t + j] = f64::NEG_INFINITY;
                }
            }
        }
    }
    WindowPlan { forward, windows, tokens: t, placement, mask }
}

fn relative_index(win: usize, heads: usize) -> Vec<usize> {
    let t = win * win;
    let span = 2 * win - 1;
    let mut idx = Vec::with_capacity(heads * t * t);
    for hd in 0..heads {
        for i in 0..t {
            for j in 0..t {
                let dy = (i / win) as isize - (j / win) as isize + win as isize - 1;
                let dx = (i % win) as isize - (j % win) as isize + win as isize - 1;
                idx.push((dy as usize * span + dx as usize) * heads + hd);
            }
        }
    }
    idx
}

/// One block on `[h, w, D]` tokens; odd `index` uses shifted windows.
pub fn swin_block(g: &mut Graph, x: Var, index: usize, v: &BlockVars, cfg: &BackboneConfig) -> Var {
    let s = g.shape(x).to_vec();
    let (h, w, d) = (s[0], s[1], s[2]);
    let (win, heads) = (cfg.window, cfg.heads);
    let dh = d / heads;
    let shift = if index % 2 == 1 { win / 2 } else { 0 };
    let plan = window_plan(h, w, d, win, shift);
    let (nw, t) = (plan.windows, plan.tokens);

    let ln = layers::layer_norm_affine(g, x, v.ln1_g, v.ln1_b);
    let win_x = g.gather(ln, plan.forward.clone(), &[nw, t, d]);
    let qkv = g.affine(win_x, v.qkv_w, v.qkv_b);
    // [nw, t, 3, heads, dh] -> three [nw * heads, t, dh] tensors
    let qkv = g.reshape(qkv, &[nw, t, 3, heads, dh]);
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4]);
    let part = nw * heads * t * dh;
    let q = g.gather(qkv, (0..part).collect(), &[nw * heads, t, dh]);
    let k = g.gather(qkv, (part..2 * part).collect(), &[nw * heads, t, dh]);
    let vv = g.gather(qkv, (2 * part..3 * part).collect(), &[nw * heads, t, dh]);

    let scores = g.bmm(q, k, true);
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let bias = g.gather(v.rel_bias, relative_index(win, heads), &[heads, t, t]);
    let bias = g.broadcast(bias, &[nw, heads, t, t]);
    let bias = g.reshape(bias, &[nw * heads, t, t]);
    let scores = g.add(scores, bias);
    let mut mask = Vec::with_capacity(nw * heads * t * t);
    for wi in 0..nw {
        for _ in 0..heads {
            mask.extend_from_slice(&plan.mask[wi * t * t..(wi + 1) * t * t]);
        }
    }
    let scores = g.add_const(scores, &Tensor::new(vec![nw * heads, t, t], mask).unwrap());
    let attn = g.softmax(scores);
    let out = g.bmm(attn, vv, false);

    // [nw * heads, t, dh] back to [h, w, D]
    let mut back = Vec::with_capacity(h * w * d);
    for &(wi, slot) in &plan.placement {
        for hd in 0..heads {
            for e in 0..dh {
                back.push(((wi * heads + hd) * t + slot) * dh + e);
            }
        }
    }
    let out = g.gather(out, back, &[h, w, d]);
    let out = g.affine(out, v.proj_w, v.proj_b);
    let x = g.add(x, out);

    let ln2 = layers::layer_norm_affine(g, x, v.ln2_g, v.ln2_b);
    let f = layers::ffn(g, ln2, v.ffn_w1, v.ffn_b1, v.ffn_w2, v.ffn_b2);
    g.add(x, f)
}

/// Full backbone on one `[h, w, C]` field.
pub fn backbone_graph(g: &mut Graph, x: Var, v: &BackboneVars, cfg: &BackboneConfig) -> Var {
    let s = g.shape(x).to_vec();
    let mut z = patch_embed(g, x, &v.edge, cfg);
    for (i, b) in v.blocks.iter().enumerate() {
        z = swin_block(g, z, i, b, cfg);
    }
    project_output(g, z, &v.edge, cfg, s[0], s[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(d: usize, depth: usize, heads: usize, win: usize, p: usize) -> BackboneConfig {
        BackboneConfig { embed_dim: d, depth, heads, window: win, patch_height: p, patch_width: p }
    }

    #[test]
    fn token_grid_ceilings() {
        let c = cfg(8, 1, 1, 1, 8);
        assert_eq!(c.token_grid(16, 16), (2, 2));
        assert_eq!(c.token_grid(530, 900), (67, 113));
        let mut g = Graph::new();
        let p = BackboneParams::init(&c, 1, &mut ChaCha8Rng::seed_from_u64(0));
        let v = p.bind(&mut g);
        let x = g.input(Tensor::zeros(&[530, 900, 1]));
        let z = patch_embed(&mut g, x, &v.edge, &c);
        assert_eq!(g.shape(z), &[67, 113, 8]);
    }

    #[test]
    fn zero_patch_weights_leave_normalized_bias() {
        let c = cfg(4, 0, 1, 1, 2);
        let mut p = BackboneParams::zeros(&c, 2);
        p.edge.patch_b = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        p.edge.patch_ln_g.fill(1.0);
        let mut g = Graph::new();
        let v = p.bind(&mut g);
        let x = g.input(Tensor::randn(&[4, 6, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let z = patch_embed(&mut g, x, &v.edge, &c);
        let (mean, var) = (3.0, (4.0 + 1.0 + 0.0 + 9.0) / 4.0);
        let want: Vec<f64> = [1.0, 2.0, 3.0, 6.0].iter().map(|b| (b - mean) / (var + 1e-5f64).sqrt()).collect();
        for tok in g.value(z).data().chunks(4) {
            for (a, b) in tok.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_blocks_are_identity() {
        let c = cfg(8, 2, 2, 2, 1);
        let p = BackboneParams::zeros(&c, 1);
        let mut g = Graph::new();
        let v = p.bind(&mut g);
        let x = g.input(Tensor::randn(&[5, 6, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
        let mut z = x;
        for (i, b) in v.blocks.iter().enumerate() {
            z = swin_block(&mut g, z, i, b, &c);
        }
        assert_eq!(g.value(z), g.value(x));
    }

    fn ln(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
        x.iter().enumerate().map(|(i, a)| (a - m) / (v + 1e-5).sqrt() * g[i] + b[i]).collect()
    }

    fn matvec(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
        let n = w.shape()[1];
        (0..n).map(|j| b.data()[j] + x.iter().enumerate().map(|(i, v)| v * w.data()[i * n + j]).sum::<f64>()).collect()
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    #[test]
    fn full_window_matches_dense_attention() {
        let (h, w, d) = (3, 3, 4);
        let c = cfg(d, 1, 1, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = BackboneParams::init(&c, 1, &mut rng);
        let b = &mut p.blocks[0];
        b.rel_bias = Tensor::randn(b.rel_bias.shape(), 0.5, &mut rng);
        b.qkv_b = Tensor::randn(b.qkv_b.shape(), 0.5, &mut rng);
        let xt = Tensor::randn(&[h, w, d], 1.0, &mut rng);
        let mut g = Graph::new();
        let v = p.bind(&mut g);
        let x = g.input(xt.clone());
        let y = swin_block(&mut g, x, 0, &v.blocks[0], &c);

        let b = &p.blocks[0];
        let toks: Vec<Vec<f64>> = xt.data().chunks(d).map(|c| c.to_vec()).collect();
        let n = toks.len();
        let qkv: Vec<Vec<f64>> = toks.iter().map(|t| matvec(&ln(t, b.ln1_g.data(), b.ln1_b.data()), &b.qkv_w, &b.qkv_b)).collect();
        let mut out = Vec::new();
        for i in 0..n {
            let (yi, xi) = (i / w, i % w);
            let mut sc: Vec<f64> = (0..n)
                .map(|j| {
                    let (yj, xj) = (j / w, j % w);
                    let rel = (yi + 2 - yj) * 5 + (xi + 2 - xj);
                    (0..d).map(|e| qkv[i][e] * qkv[j][d + e]).sum::<f64>() / (d as f64).sqrt() + b.rel_bias.data()[rel]
                })
                .collect();
            let m = sc.iter().cloned().fold(f64::MIN, f64::max);
            sc.iter_mut().for_each(|s| *s = (*s - m).exp());
            let z: f64 = sc.iter().sum();
            let att: Vec<f64> = (0..d).map(|e| (0..n).map(|j| sc[j] / z * qkv[j][2 * d + e]).sum()).collect();
            let proj = matvec(&att, &b.proj_w, &b.proj_b);
            let x1: Vec<f64> = toks[i].iter().zip(&proj).map(|(a, b)| a + b).collect();
            let hid: Vec<f64> = matvec(&ln(&x1, b.ln2_g.data(), b.ln2_b.data()), &b.ffn_w1, &b.ffn_b1).into_iter().map(gelu).collect();
            let f = matvec(&hid, &b.ffn_w2, &b.ffn_b2);
            out.extend(x1.iter().zip(&f).map(|(a, b)| a + b));
        }
        for (a, b) in g.value(y).data().iter().zip(&out) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    fn roll(t: &Tensor, dy: usize, dx: usize) -> Tensor {
        let s = t.shape();
        let (h, w, d) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; t.len()];
        for y in 0..h {
            for x in 0..w {
                for e in 0..d {
                    out[(((y + dy) % h) * w + (x + dx) % w) * d + e] = t.data()[(y * w + x) * d + e];
                }
            }
        }
        Tensor::new(s.to_vec(), out).unwrap()
    }

    #[test]
    fn whole_window_roll_commutes_with_block() {
        let c = cfg(4, 1, 2, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = BackboneParams::init(&c, 1, &mut rng);
        let xt = Tensor::randn(&[4, 6, 4], 1.0, &mut rng);
        let run = |t: Tensor| {
            let mut g = Graph::new();
            let v = p.bind(&mut g);
            let x = g.input(t);
            let y = swin_block(&mut g, x, 0, &v.blocks[0], &c);
            g.value(y).clone()
        };
        let a = roll(&run(xt.clone()), 2, 2);
        let b = run(roll(&xt, 2, 2));
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn shifted_windows_do_not_mix_across_the_wrap() {
        // a 4x4 grid with window 4 and shift 2: the top-left token may only see
        // tokens from its own quadrant-shaped region after the roll
        let plan = window_plan(4, 4, 2, 4, 2);
        assert_eq!(plan.windows, 1);
        let allowed = (0..16).filter(|&j| plan.mask[j] == 0.0).count();
        assert_eq!(allowed, 4);
        // padding: 3x3 grid with window 2 pads to 4x4 and masks pad keys
        let plan = window_plan(3, 3, 1, 2, 0);
        assert_eq!(plan.windows, 4);
        let last = 3 * 4 * 4;
        let allowed: Vec<usize> = (0..4).filter(|&j| plan.mask[last + j] == 0.0).collect();
        assert_eq!(allowed, vec![0]);
    }

    #[test]
    fn output_projection_crops_by_coordinates() {
        let c = cfg(3, 0, 1, 1, 2);
        let mut p = BackboneParams::zeros(&c, 2);
        p.edge.out_b = Tensor::new(vec![8], (0..8).map(|v| v as f64).collect()).unwrap();
        let mut g = Graph::new();
        let v = p.bind(&mut g);
        let tok = g.input(Tensor::randn(&[3, 2, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(5)));
        let out = project_output(&mut g, tok, &v.edge, &c, 5, 3);
        assert_eq!(g.shape(out), &[5, 3, 2]);
        let data = g.value(out).data();
        for y in 0..5 {
            for x in 0..3 {
                for ch in 0..2 {
                    let want = (((y % 2) * 2 + x % 2) * 2 + ch) as f64;
                    assert_eq!(data[(y * 3 + x) * 2 + ch], want);
                }
            }
        }
    }

    #[test]
    fn backbone_preserves_shape() {
        for (h, w) in [(7, 9), (8, 8), (5, 12)] {
            let c = cfg(8, 2, 2, 2, 2);
            let p = BackboneParams::init(&c, 3, &mut ChaCha8Rng::seed_from_u64(6));
            let mut g = Graph::new();
            let v = p.bind(&mut g);
            let x = g.input(Tensor::randn(&[h, w, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(7)));
            let y = backbone_graph(&mut g, x, &v, &c);
            assert_eq!(g.shape(y), &[h, w, 3]);
            assert!(g.value(y).is_finite());
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let c = cfg(8, 2, 2, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = BackboneParams::init(&c, 2, &mut rng);
        p.visit_mut(&mut |name, t| {
            if name.ends_with("_b") || name.contains("rel_bias") {
                *t = Tensor::randn(t.shape(), 0.2, &mut rng);
            }
        });
        let x = Tensor::randn(&[16, 16, 2], 1.0, &mut rng);
        let proj = Tensor::randn(&[16, 16, 2], 1.0, &mut rng);
        let opts = GradCheckOptions { max_entries: Some(24), ..Default::default() };
        let report = gradcheck(&p, &opts, |q: &BackboneParams| {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let vars = q.bind(&mut g);
            let y = backbone_graph(&mut g, xv, &vars, &c);
            let pv = g.input(proj.clone());
            let m = g.mul(y, pv);
            let loss = g.sum(m);
            let grads = g.backward(loss);
            Ok((g.value(loss).item(), vars.grads(&grads)))
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-4, "{report:?}");
    }
}
