//! Multi-head self-attention: full context, limited context (a band of
//! `left`/`right` neighbours around each step), and limited context plus one
//! global token.
//!
//! Two routes compute the banded variants. The masked oracle builds a dense
//! `T x T` score matrix and blocks everything outside the band. The chunked
//! route splits queries into chunks of `round_up(left + right + 1, 8)` and
//! scores each chunk only against its overlapping key window, so score storage
//! is `heads * T * (chunk + left + right)` and never quadratic. Both routes
//! visit keys in the same order and agree bit-for-bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, dot_f64, linear, softmax_row_in_place, Mask, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub head_dim: usize,
    pub left_context: usize,
    pub right_context: usize,
    pub use_global_token: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            num_heads: 4,
            head_dim: 16,
            left_context: 128,
            right_context: 128,
            use_global_token: false,
        }
    }
}

impl AttentionConfig {
    pub fn model_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.head_dim == 0 {
            return Err(Error::Config(
                "attention needs at least one head of non-zero width".into(),
            ));
        }
        Ok(())
    }

    /// Query chunk length of the chunked implementation.
    pub fn chunk_size(&self) -> usize {
        (self.left_context + self.right_context + 1).div_ceil(8) * 8
    }
}

/// Borrowed view of one attention layer's parameters. Projections are
/// `[D, D]` and map row vectors as `x * W^T + b`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights<'a> {
    pub w_q: &'a Tensor,
    pub b_q: &'a Tensor,
    pub w_k: &'a Tensor,
    pub b_k: &'a Tensor,
    pub w_v: &'a Tensor,
    pub b_v: &'a Tensor,
    pub w_o: &'a Tensor,
    pub b_o: &'a Tensor,
    pub global_token: Option<&'a Tensor>,
}

fn check_input(x: &Tensor, w: &AttentionWeights<'_>, cfg: &AttentionConfig) -> Result<(usize, usize)> {
    cfg.validate()?;
    let (t, d) = x.dims2()?;
    if d != cfg.model_dim() {
        return Err(Error::dim("attention", "model_dim", cfg.model_dim(), d));
    }
    for (name, m) in [("w_q", w.w_q), ("w_k", w.w_k), ("w_v", w.w_v), ("w_o", w.w_o)] {
        if m.shape() != [d, d] {
            return Err(Error::dim("attention", name, d * d, m.numel()));
        }
    }
    for (name, b) in [("b_q", w.b_q), ("b_k", w.b_k), ("b_v", w.b_v), ("b_o", w.b_o)] {
        if b.numel() != d {
            return Err(Error::dim("attention", name, d, b.numel()));
        }
    }
    if let Some(g) = w.global_token {
        if g.numel() != d {
            return Err(Error::dim("attention", "global_token", d, g.numel()));
        }
    }
    Ok((t, d))
}

#[inline]
fn head(m: &Tensor, row: usize, h: usize, hd: usize) -> &[f32] {
    &m.row(row)[h * hd..(h + 1) * hd]
}

/// Dense scaled dot-product attention over all rows of `x`, optionally masked.
fn dense_attention(x: &Tensor, w: &AttentionWeights<'_>, cfg: &AttentionConfig, mask: Option<&Mask>) -> Result<Tensor> {
    let (t, d) = x.dims2()?;
    if let Some(m) = mask {
        if m.dims() != (t, t) {
            return Err(Error::dim("attention", "mask", t * t, m.dims().0 * m.dims().1));
        }
    }
    let (heads, hd) = (cfg.num_heads, cfg.head_dim);
    let scale = 1.0 / (hd as f64).sqrt();
    let open = |i: usize, j: usize| mask.is_none_or(|m| !m.is_blocked(i, j));

    let q = linear(x, w.w_q, Some(w.b_q))?;
    let k = linear(x, w.w_k, Some(w.b_k))?;
    let mut scores = Tensor::zeros(&[heads, t, t]);
    {
        let sd = scores.data_mut();
        for h in 0..heads {
            for i in 0..t {
                let qi = head(&q, i, h, hd);
                let row = &mut sd[(h * t + i) * t..(h * t + i + 1) * t];
                for (j, s) in row.iter_mut().enumerate() {
                    if open(i, j) {
                        *s = (dot_f64(qi, head(&k, j, h, hd)) * scale) as f32;
                    }
                }
                if !softmax_row_in_place(row, mask.map(|m| m.row(i))) {
                    return Err(Error::EmptyAttentionRow { row: i });
                }
            }
        }
    }
    drop(q);
    drop(k);

    let v = linear(x, w.w_v, Some(w.b_v))?;
    let mut ctx = Tensor::zeros(&[t, d]);
    {
        let cd = ctx.data_mut();
        let sd = scores.data();
        let mut acc = vec![0.0f64; hd];
        for h in 0..heads {
            for i in 0..t {
                acc.iter_mut().for_each(|a| *a = 0.0);
                let probs = &sd[(h * t + i) * t..(h * t + i + 1) * t];
                for (j, &p) in probs.iter().enumerate() {
                    if open(i, j) {
                        for (a, &vv) in acc.iter_mut().zip(head(&v, j, h, hd)) {
                            *a += p as f64 * vv as f64;
                        }
                    }
                }
                for (dst, a) in cd[i * d + h * hd..i * d + (h + 1) * hd].iter_mut().zip(&acc) {
                    *dst = *a as f32;
                }
            }
        }
    }
    drop(scores);
    drop(v);
    linear(&ctx, w.w_o, Some(w.b_o))
}

/// Full-context multi-head attention (no residual).
pub fn mha_full(x: &Tensor, w: &AttentionWeights<'_>, cfg: &AttentionConfig) -> Result<Tensor> {
    check_input(x, w, cfg)?;
    dense_attention(x, w, cfg, None)
}

/// `true` where key `j` lies outside `[i - left, i + right]`.
pub fn band_mask(t: usize, left: usize, right: usize) -> Mask {
    Mask::from_fn(t, t, |i, j| j + left < i || j > i + right)
}

/// `(T+1) x (T+1)` mask for a global token at index 0 followed by the `T`
/// sequence positions under a band.
pub fn global_token_mask(t: usize, left: usize, right: usize) -> Mask {
    Mask::from_fn(t + 1, t + 1, |i, j| {
        if i == 0 || j == 0 {
            false
        } else {
            let (i, j) = (i - 1, j - 1);
            j + left < i || j > i + right
        }
    })
}

/// Limited-context attention via an explicit `T x T` mask. Quadratic memory;
/// used as the correctness reference for [`lca_chunked`].
pub fn lca_masked_oracle(x: &Tensor, w: &AttentionWeights<'_>, cfg: &AttentionConfig) -> Result<Tensor> {
    let (t, _) = check_input(x, w, cfg)?;
    let mask = band_mask(t, cfg.left_context, cfg.right_context);
    dense_attention(x, w, cfg, Some(&mask))
}

fn prepend_global(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (t, d) = x.dims2()?;
    let mut data = Vec::with_capacity((t + 1) * d);
    data.extend_from_slice(g.data());
    data.extend_from_slice(x.data());
    Tensor::new(&[t + 1, d], data)
}

fn drop_first_row(y: Tensor) -> Result<Tensor> {
    let (t1, d) = y.dims2()?;
    Tensor::new(&[t1 - 1, d], y.data()[d..].to_vec())
}

fn require_global<'a>(w: &AttentionWeights<'a>, cfg: &AttentionConfig) -> Result<&'a Tensor> {
    if !cfg.use_global_token {
        return Err(Error::Config(
            "global-token attention called with use_global_token = false".into(),
        ));
    }
    w.global_token
        .ok_or_else(|| Error::Config("global token embedding missing".into()))
}

/// Global-token attention via the dense `(T+1) x (T+1)` mask over the
/// augmented sequence; the global row is dropped from the result.
pub fn lca_global_token_oracle(x: &Tensor, w: &AttentionWeights<'_>, cfg: &AttentionConfig) -> Result<Tensor> {
    let (t, _) = check_input(x, w, cfg)?;
    let g = require_global(w, cfg)?;
    let aug = prepend_global(x, g)?;
    let mask = global_token_mask(t, cfg.left_context, cfg.right_context);
    drop_first_row(dense_attention(&aug, w, cfg, Some(&mask))?)
}

/// Full attention over the augmented `(T+1)` sequence with the global row
/// dropped.
pub fn mha_full_with_global(x: &Tensor, w: &AttentionWeights<'_>, cfg: &AttentionConfig) -> Result<Tensor> {
    check_input(x, w, cfg)?;
    let g = require_global(w, cfg)?;
    let aug = prepend_global(x, g)?;
    drop_first_row(dense_attention(&aug, w, cfg, None)?)
}

/// Geometry of the per-chunk key window.
#[derive(Clone, Copy, Debug)]
struct Window {
    chunk: usize,
    width: usize,
    left: usize,
    right: usize,
    global: bool,
}

impl Window {
    fn new(cfg: &AttentionConfig, global: bool) -> Self {
        let chunk = cfg.chunk_size();
        Window {
            chunk,
            width: chunk + cfg.left_context + cfg.right_context + usize::from(global),
            left: cfg.left_context,
            right: cfg.right_context,
            global,
        }
    }

    /// Key index behind `slot` of query `i`: slot `m` of chunk `c` maps to
    /// key `c * chunk - left + m`, shifted by one when the global slot leads.
    /// `None` for the global slot and for keys outside `[0, t)`.
    fn key(&self, i: usize, slot: usize, t: usize) -> Option<usize> {
        let band_slot = if self.global { slot.checked_sub(1)? } else { slot };
        let start = (i / self.chunk) * self.chunk;
        let key = (start + band_slot).checked_sub(self.left)?;
        (key < t).then_some(key)
    }

    fn is_global_slot(&self, slot: usize) -> bool {
        self.global && slot == 0
    }

    fn blocked(&self, i: usize, slot: usize, t: usize) -> bool {
        if self.is_global_slot(slot) {
            return false;
        }
        match self.key(i, slot, t) {
            Some(j) => j + self.left < i || j > i + self.right,
            None => true,
        }
    }
}

/// `[heads, chunks * chunk, width]` banded probabilities.
fn chunked_scores(q: &Tensor, k: &Tensor, gk: Option<&[f32]>, cfg: &AttentionConfig) -> Result<(Tensor, Window)> {
    let (t, _) = q.dims2()?;
    let (heads, hd) = (cfg.num_heads, cfg.head_dim);
    let win = Window::new(cfg, gk.is_some());
    let rows = t.div_ceil(win.chunk) * win.chunk;
    let scale = 1.0 / (hd as f64).sqrt();

    let mut probs = Tensor::zeros(&[heads, rows, win.width]);
    let pd = probs.data_mut();
    let mut blocked = vec![false; win.width];
    for i in 0..t {
        for (slot, b) in blocked.iter_mut().enumerate() {
            *b = win.blocked(i, slot, t);
        }
        for h in 0..heads {
            let qi = head(q, i, h, hd);
            let base = (h * rows + i) * win.width;
            let row = &mut pd[base..base + win.width];
            for slot in 0..win.width {
                if blocked[slot] {
                    continue;
                }
                let kv = match gk {
                    Some(g) if slot == 0 => &g[h * hd..(h + 1) * hd],
                    _ => head(k, win.key(i, slot, t).expect("open slot has a key"), h, hd),
                };
                row[slot] = (dot_f64(qi, kv) * scale) as f32;
            }
            if !softmax_row_in_place(row, Some(&blocked)) {
                return Err(Error::EmptyAttentionRow { row: i });
            }
        }
    }
    Ok((probs, win))
}

fn chunked_attention(
    x: &Tensor,
    w: &AttentionWeights<'_>,
    cfg: &AttentionConfig,
    global: Option<&Tensor>,
) -> Result<Tensor> {
    let (t, d) = x.dims2()?;
    let (heads, hd) = (cfg.num_heads, cfg.head_dim);

    // The global query row is never computed: its output is discarded, so
    // only its key and value projections matter.
    let (gk, gv) = match global {
        Some(g) => {
            let mut gk = vec![0.0f32; d];
            let mut gv = vec![0.0f32; d];
            tensor::linear_row(g.data(), w.w_k, Some(w.b_k), &mut gk);
            tensor::linear_row(g.data(), w.w_v, Some(w.b_v), &mut gv);
            (Some(gk), Some(gv))
        }
        None => (None, None),
    };

    let q = linear(x, w.w_q, Some(w.b_q))?;
    let k = linear(x, w.w_k, Some(w.b_k))?;
    let (probs, win) = chunked_scores(&q, &k, gk.as_deref(), cfg)?;
    drop(q);
    drop(k);

    let v = linear(x, w.w_v, Some(w.b_v))?;
    let rows = probs.shape()[1];
    let pd = probs.data();
    let mut ctx = Tensor::zeros(&[t, d]);
    {
        let cd = ctx.data_mut();
        let mut acc = vec![0.0f64; hd];
        for i in 0..t {
            for h in 0..heads {
                acc.iter_mut().for_each(|a| *a = 0.0);
                let base = (h * rows + i) * win.width;
                for slot in 0..win.width {
                    if win.blocked(i, slot, t) {
                        continue;
                    }
                    let vv = match &gv {
                        Some(g) if slot == 0 => &g[h * hd..(h + 1) * hd],
                        _ => head(&v, win.key(i, slot, t).expect("open slot has a key"), h, hd),
                    };
                    let p = pd[base + slot] as f64;
                    for (a, &val) in acc.iter_mut().zip(vv) {
                        *a += p * val as f64;
                    }
                }
                for (dst, a) in cd[i * d + h * hd..i * d + (h + 1) * hd].iter_mut().zip(&acc) {
                    *dst = *a as f32;
                }
            }
        }
    }
    drop(probs);
    drop(v);
    linear(&ctx, w.w_o, Some(w.b_o))
}

/// Limited-context attention computed with overlapping query chunks.
pub fn lca_chunked(x: &Tensor, w: &AttentionWeights<'_>, cfg: &AttentionConfig) -> Result<Tensor> {
    check_input(x, w, cfg)?;
    chunked_attention(x, w, cfg, None)
}

/// Limited-context attention plus a single global token that every position
/// attends to. Chunked route; matches [`lca_global_token_oracle`].
pub fn lca_global_token(x: &Tensor, w: &AttentionWeights<'_>, cfg: &AttentionConfig) -> Result<Tensor> {
    check_input(x, w, cfg)?;
    let g = require_global(w, cfg)?;
    chunked_attention(x, w, cfg, Some(g))
}

/// Attention probabilities of the chunked route re-laid as `[heads, T, T]`
/// (dense, for inspection in tests on small inputs).
pub fn lca_chunked_probabilities(x: &Tensor, w: &AttentionWeights<'_>, cfg: &AttentionConfig) -> Result<Tensor> {
    let (t, _) = check_input(x, w, cfg)?;
    let q = linear(x, w.w_q, Some(w.b_q))?;
    let k = linear(x, w.w_k, Some(w.b_k))?;
    let (probs, win) = chunked_scores(&q, &k, None, cfg)?;
    let rows = probs.shape()[1];
    let mut dense = Tensor::zeros(&[cfg.num_heads, t, t]);
    let dd = dense.data_mut();
    for h in 0..cfg.num_heads {
        for i in 0..t {
            for slot in 0..win.width {
                if let Some(j) = win.key(i, slot, t) {
                    dd[(h * t + i) * t + j] = probs.data()[(h * rows + i) * win.width + slot];
                }
            }
        }
    }
    Ok(dense)
}
