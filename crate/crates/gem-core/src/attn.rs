//! Boundary-aware attention on the latent lat-lon grid.
//!
//! Two operators share the same geometric conventions: periodic
//! shifted-window attention (windows wrap in longitude, zero-pad in
//! latitude, mask forbids coupling through pole padding, relative
//! position bias) and boundary neighborhood attention (anisotropic
//! neighborhoods, periodic longitude wrap, polar masking, 2D rotary
//! encoding on queries and keys).
//!
//! Tokens are row-major over the latent grid, channels `[token, D]` with
//! `D = heads * head_dim`.

use std::sync::Arc;

use crate::error::{GemError, Result};
use crate::tape::{Graph, NodeId, Tensor};

/// Window geometry. Width is twice the height; the shift staggers window
/// boundaries on alternating blocks.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WindowConfig {
    pub w_h: usize,
    pub w_w: usize,
    pub shift: (usize, usize),
}

impl WindowConfig {
    /// Canonical config: `w_w = 2 w_h`, half-window shift.
    pub fn new(w_h: usize) -> Self {
        WindowConfig {
            w_h,
            w_w: 2 * w_h,
            shift: (w_h / 2, w_h),
        }
    }

    pub fn window_len(&self) -> usize {
        self.w_h * self.w_w
    }

    pub fn validate(&self, latent_h: usize, latent_w: usize) -> Result<()> {
        if self.w_w != 2 * self.w_h {
            return Err(GemError::Config(format!(
                "window width {} must be twice the height {}",
                self.w_w, self.w_h
            )));
        }
        if latent_h % self.w_h != 0 || latent_w % self.w_w != 0 {
            return Err(GemError::IndivisibleDims(format!(
                "latent {latent_h}x{latent_w} not divisible by window {}x{}",
                self.w_h, self.w_w
            )));
        }
        if self.shift.0 >= self.w_h || self.shift.1 >= self.w_w {
            return Err(GemError::Config(format!(
                "shift {:?} must be smaller than the window {}x{}",
                self.shift, self.w_h, self.w_w
            )));
        }
        Ok(())
    }
}

/// Anisotropic neighborhood extents, both odd, wider than tall.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NeighborhoodConfig {
    pub k_h: usize,
    pub k_w: usize,
}

impl NeighborhoodConfig {
    pub fn new(k_h: usize, k_w: usize) -> Result<Self> {
        if k_h % 2 == 0 || k_w % 2 == 0 || k_w < k_h {
            return Err(GemError::Config(format!(
                "neighborhood extents must be odd with k_w >= k_h, got ({k_h}, {k_w})"
            )));
        }
        Ok(NeighborhoodConfig { k_h, k_w })
    }

    pub fn len(&self) -> usize {
        self.k_h * self.k_w
    }

    pub fn validate(&self, latent_h: usize, latent_w: usize) -> Result<()> {
        if self.k_h > latent_h || self.k_w > latent_w {
            return Err(GemError::NeighborhoodExceedsGrid {
                k_h: self.k_h,
                k_w: self.k_w,
                nlat: latent_h,
                nlon: latent_w,
            });
        }
        Ok(())
    }
}

/// Projection weights for one attention operator.
#[derive(Debug, Clone)]
pub struct AttnParams {
    pub heads: usize,
    pub head_dim: usize,
    /// Fused query/key/value projection, `[3D, D]`.
    pub qkv_w: Tensor,
    pub qkv_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
    /// Relative-position bias, `[heads, (2 w_h - 1)(2 w_w - 1)]`;
    /// window variant only.
    pub bias_table: Option<Tensor>,
}

impl AttnParams {
    pub fn embed_dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

// ---------------------------------------------------------------------
// 2D rotary position encoding
// ---------------------------------------------------------------------

/// Cos/sin tables for 2D RoPE at explicit (row, col) token positions.
///
/// Per head, the first `head_dim/4` channel pairs rotate with standard
/// non-periodic row phases; the remaining pairs rotate with column
/// phases whose frequencies are integer multiples of `2 pi / nlon`, so
/// the encoding is exactly periodic in longitude.
pub fn rope2d_tables(
    positions: &[(i64, i64)],
    nlon_latent: usize,
    heads: usize,
    head_dim: usize,
) -> Result<(Arc<Vec<f64>>, Arc<Vec<f64>>)> {
    if head_dim % 4 != 0 {
        return Err(GemError::IndivisibleDims(format!(
            "head_dim {head_dim} must be divisible by 4 for 2D RoPE"
        )));
    }
    let np = head_dim / 2;
    let nrow = np / 2;
    let row_freq: Vec<f64> = (0..nrow)
        .map(|j| 10000f64.powf(-(j as f64) / nrow as f64))
        .collect();
    let col_freq: Vec<f64> = (0..np - nrow)
        .map(|j| (j as f64 + 1.0) * 2.0 * std::f64::consts::PI / nlon_latent as f64)
        .collect();
    let mut cos = Vec::with_capacity(positions.len() * heads * np);
    let mut sin = Vec::with_capacity(positions.len() * heads * np);
    for &(row, col) in positions {
        for _ in 0..heads {
            for (j, f) in row_freq.iter().enumerate() {
                let _ = j;
                let a = row as f64 * f;
                cos.push(a.cos());
                sin.push(a.sin());
            }
            for f in &col_freq {
                let a = col as f64 * f;
                cos.push(a.cos());
                sin.push(a.sin());
            }
        }
    }
    Ok((Arc::new(cos), Arc::new(sin)))
}

/// Latent-grid token positions in row-major order.
pub fn latent_positions(h: usize, w: usize) -> Vec<(i64, i64)> {
    let mut p = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            p.push((r as i64, c as i64));
        }
    }
    p
}

/// Apply 2D RoPE to a `[ntok, heads*head_dim]` tensor outside the tape.
pub fn rope2d_apply(
    x: &[f64],
    positions: &[(i64, i64)],
    nlon_latent: usize,
    heads: usize,
    head_dim: usize,
) -> Result<Vec<f64>> {
    let (cos, sin) = rope2d_tables(positions, nlon_latent, heads, head_dim)?;
    assert_eq!(x.len(), positions.len() * heads * head_dim);
    let mut out = vec![0.0; x.len()];
    for p in 0..cos.len() {
        let (a, b) = (x[2 * p], x[2 * p + 1]);
        out[2 * p] = cos[p] * a - sin[p] * b;
        out[2 * p + 1] = sin[p] * a + cos[p] * b;
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// Polar masks
// ---------------------------------------------------------------------

/// Either attention geometry, for mask construction and export.
pub enum AttnGeometry<'a> {
    Window {
        cfg: &'a WindowConfig,
        shifted: bool,
    },
    Neighborhood(&'a NeighborhoodConfig),
}

/// Boolean attention mask grouped by window (window variant) or by token
/// (neighborhood variant). `allowed[(g * q_len + q) * k_len + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarMask {
    pub groups: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub allowed: Vec<bool>,
}

/// Forbid every (query, key) pair that would couple through latitude
/// padding beyond the poles; longitude wrap pairs stay allowed.
pub fn build_polar_mask(
    geometry: AttnGeometry,
    latent_h: usize,
    latent_w: usize,
) -> Result<PolarMask> {
    match geometry {
        AttnGeometry::Window { cfg, shifted } => {
            cfg.validate(latent_h, latent_w)?;
            let layout = WindowLayout::new(cfg, latent_h, latent_w, shifted);
            let wlen = cfg.window_len();
            let mut allowed = vec![false; layout.nwin * wlen * wlen];
            for win in 0..layout.nwin {
                for q in 0..wlen {
                    let qv = layout.token(win, q).is_some();
                    for k in 0..wlen {
                        let kv = layout.token(win, k).is_some();
                        allowed[(win * wlen + q) * wlen + k] = qv && kv;
                    }
                }
            }
            Ok(PolarMask {
                groups: layout.nwin,
                q_len: wlen,
                k_len: wlen,
                allowed,
            })
        }
        AttnGeometry::Neighborhood(cfg) => {
            cfg.validate(latent_h, latent_w)?;
            let nbh = cfg.len();
            let ntok = latent_h * latent_w;
            let rh = (cfg.k_h as i64 - 1) / 2;
            let mut allowed = vec![false; ntok * nbh];
            for r in 0..latent_h as i64 {
                for c in 0..latent_w {
                    let tok = r as usize * latent_w + c;
                    for i in 0..cfg.k_h as i64 {
                        let row = r + i - rh;
                        let ok = row >= 0 && row < latent_h as i64;
                        for j in 0..cfg.k_w {
                            allowed[tok * nbh + (i as usize * cfg.k_w + j)] = ok;
                        }
                    }
                }
            }
            Ok(PolarMask {
                groups: ntok,
                q_len: 1,
                k_len: nbh,
                allowed,
            })
        }
    }
}

// ---------------------------------------------------------------------
// Window attention
// ---------------------------------------------------------------------

/// Maps window slots to latent tokens for one (possibly shifted)
/// partition. Windows wrap cyclically in longitude; latitude slots
/// outside the grid are padding.
struct WindowLayout {
    nwc: usize,
    nwin: usize,
    w_h: usize,
    w_w: usize,
    row0: i64,
    col0: i64,
    h: usize,
    w: usize,
}

impl WindowLayout {
    fn new(cfg: &WindowConfig, h: usize, w: usize, shifted: bool) -> Self {
        let (dh, dw) = if shifted { cfg.shift } else { (0, 0) };
        let nwr = h / cfg.w_h + usize::from(shifted && cfg.shift.0 > 0);
        let nwc = w / cfg.w_w;
        WindowLayout {
            nwc,
            nwin: nwr * nwc,
            w_h: cfg.w_h,
            w_w: cfg.w_w,
            row0: -(dh as i64),
            col0: -(dw as i64),
            h,
            w,
        }
    }

    /// Latent token behind `pos` of window `win`, or None for padding.
    fn token(&self, win: usize, pos: usize) -> Option<usize> {
        let (wr, wc) = (win / self.nwc, win % self.nwc);
        let (a, b) = (pos / self.w_w, pos % self.w_w);
        let row = wr as i64 * self.w_h as i64 + self.row0 + a as i64;
        if row < 0 || row >= self.h as i64 {
            return None;
        }
        let col =
            (wc as i64 * self.w_w as i64 + self.col0 + b as i64).rem_euclid(self.w as i64);
        Some(row as usize * self.w + col as usize)
    }

    /// Inverse lookup: window and slot containing a real token.
    fn locate(&self, row: usize, col: usize) -> (usize, usize) {
        let a = (row as i64 - self.row0) as usize;
        let (wr, ar) = (a / self.w_h, a % self.w_h);
        let b = ((col as i64 - self.col0).rem_euclid(self.w as i64)) as usize;
        let (wc, bc) = (b / self.w_w, b % self.w_w);
        (wr * self.nwc + wc, ar * self.w_w + bc)
    }
}

/// Precomputed gather maps, masks, and bias indices for one window
/// partition on fixed latent dims.
pub struct WindowGeometry {
    pub h: usize,
    pub w: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub cfg: WindowConfig,
    pub shifted: bool,
    nwin: usize,
    wlen: usize,
    q_map: Arc<Vec<i64>>,
    k_map: Arc<Vec<i64>>,
    v_map: Arc<Vec<i64>>,
    out_map: Arc<Vec<i64>>,
    mask: Arc<Vec<bool>>,
    bias_map: Arc<Vec<i64>>,
}

impl WindowGeometry {
    pub fn new(
        cfg: &WindowConfig,
        h: usize,
        w: usize,
        heads: usize,
        head_dim: usize,
        shifted: bool,
    ) -> Result<Self> {
        cfg.validate(h, w)?;
        let layout = WindowLayout::new(cfg, h, w, shifted);
        let d = heads * head_dim;
        let wlen = cfg.window_len();
        let nwin = layout.nwin;

        // qkv rows are [token, 3D]; targets are [nwin*heads, wlen, hd].
        let build = |ch_offset: usize| -> Vec<i64> {
            let mut map = vec![-1i64; nwin * heads * wlen * head_dim];
            let mut idx = 0;
            for win in 0..nwin {
                for hh in 0..heads {
                    for pos in 0..wlen {
                        match layout.token(win, pos) {
                            Some(tok) => {
                                let base = tok * 3 * d + ch_offset + hh * head_dim;
                                for dd in 0..head_dim {
                                    map[idx] = (base + dd) as i64;
                                    idx += 1;
                                }
                            }
                            None => idx += head_dim,
                        }
                    }
                }
            }
            map
        };
        let q_map = build(0);
        let k_map = build(d);
        let v_map = build(2 * d);

        // Context [nwin*heads, wlen, hd] back to [ntok, D].
        let mut out_map = vec![-1i64; h * w * d];
        for row in 0..h {
            for col in 0..w {
                let tok = row * w + col;
                let (win, pos) = layout.locate(row, col);
                for hh in 0..heads {
                    for dd in 0..head_dim {
                        out_map[tok * d + hh * head_dim + dd] =
                            (((win * heads + hh) * wlen + pos) * head_dim + dd) as i64;
                    }
                }
            }
        }

        let polar = build_polar_mask(AttnGeometry::Window { cfg, shifted }, h, w)?;
        let mut mask = vec![false; nwin * heads * wlen * wlen];
        for win in 0..nwin {
            for hh in 0..heads {
                let dst = ((win * heads + hh) * wlen) * wlen;
                let src = (win * wlen) * wlen;
                mask[dst..dst + wlen * wlen]
                    .copy_from_slice(&polar.allowed[src..src + wlen * wlen]);
            }
        }

        // Relative-position bias lookups into a [heads, (2wh-1)(2ww-1)] table.
        let npair = (2 * cfg.w_h - 1) * (2 * cfg.w_w - 1);
        let mut bias_map = vec![0i64; nwin * heads * wlen * wlen];
        let mut idx = 0;
        for _win in 0..nwin {
            for hh in 0..heads {
                for q in 0..wlen {
                    let (qr, qc) = (q / cfg.w_w, q % cfg.w_w);
                    for k in 0..wlen {
                        let (kr, kc) = (k / cfg.w_w, k % cfg.w_w);
                        let dr = qr as i64 - kr as i64 + cfg.w_h as i64 - 1;
                        let dc = qc as i64 - kc as i64 + cfg.w_w as i64 - 1;
                        bias_map[idx] =
                            hh as i64 * npair as i64 + dr * (2 * cfg.w_w as i64 - 1) + dc;
                        idx += 1;
                    }
                }
            }
        }

        Ok(WindowGeometry {
            h,
            w,
            heads,
            head_dim,
            cfg: cfg.clone(),
            shifted,
            nwin,
            wlen,
            q_map: Arc::new(q_map),
            k_map: Arc::new(k_map),
            v_map: Arc::new(v_map),
            out_map: Arc::new(out_map),
            mask: Arc::new(mask),
            bias_map: Arc::new(bias_map),
        })
    }

    pub fn mask(&self) -> Arc<Vec<bool>> {
        Arc::clone(&self.mask)
    }
}

/// Graph-level parameter handles for one attention operator.
pub struct AttnParamNodes {
    pub qkv_w: NodeId,
    pub qkv_b: NodeId,
    pub out_w: NodeId,
    pub out_b: NodeId,
    pub bias_table: Option<NodeId>,
}

/// Windowed self-attention with periodic longitude wrap, zero-padded
/// latitude, polar mask, and relative position bias.
pub fn window_attention_node(
    g: &mut Graph,
    x: NodeId,
    p: &AttnParamNodes,
    geo: &WindowGeometry,
) -> NodeId {
    let (b, wlen, hd) = (geo.nwin * geo.heads, geo.wlen, geo.head_dim);
    let qkv = g.linear(x, p.qkv_w, p.qkv_b);
    let q = g.gather_pad(qkv, Arc::clone(&geo.q_map), vec![b, wlen, hd]);
    let k = g.gather_pad(qkv, Arc::clone(&geo.k_map), vec![b, wlen, hd]);
    let v = g.gather_pad(qkv, Arc::clone(&geo.v_map), vec![b, wlen, hd]);
    let qs = g.scale(q, 1.0 / (hd as f64).sqrt());
    let scores = g.bmm_nt(qs, k);
    let bias = p
        .bias_table
        .expect("window attention requires a bias table");
    let bias_full = g.gather_pad(bias, Arc::clone(&geo.bias_map), vec![b, wlen, wlen]);
    let scores = g.add(scores, bias_full);
    let probs = g.softmax_masked(scores, Arc::clone(&geo.mask));
    let ctx = g.bmm(probs, v);
    let d = geo.heads * geo.head_dim;
    let merged = g.gather_pad(ctx, Arc::clone(&geo.out_map), vec![geo.h * geo.w, d]);
    g.linear(merged, p.out_w, p.out_b)
}

// ---------------------------------------------------------------------
// Neighborhood attention
// ---------------------------------------------------------------------

/// Precomputed maps for boundary neighborhood attention.
pub struct NeighborhoodGeometry {
    pub h: usize,
    pub w: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub cfg: NeighborhoodConfig,
    nbh: usize,
    q_split: Arc<Vec<i64>>,
    k_split: Arc<Vec<i64>>,
    v_split: Arc<Vec<i64>>,
    q_map: Arc<Vec<i64>>,
    kv_map: Arc<Vec<i64>>,
    out_map: Arc<Vec<i64>>,
    mask: Arc<Vec<bool>>,
    rope_cos: Arc<Vec<f64>>,
    rope_sin: Arc<Vec<f64>>,
}

impl NeighborhoodGeometry {
    pub fn new(
        cfg: &NeighborhoodConfig,
        h: usize,
        w: usize,
        heads: usize,
        head_dim: usize,
    ) -> Result<Self> {
        cfg.validate(h, w)?;
        let d = heads * head_dim;
        let ntok = h * w;
        let nbh = cfg.len();

        // Channel splits from the fused [ntok, 3D] projection.
        let split = |off: usize| -> Vec<i64> {
            (0..ntok * d)
                .map(|i| ((i / d) * 3 * d + off + i % d) as i64)
                .collect()
        };

        // Neighborhood gather over roped keys/values [ntok, D] into
        // [ntok*heads, nbh, hd].
        let rh = (cfg.k_h as i64 - 1) / 2;
        let rw = (cfg.k_w as i64 - 1) / 2;
        let mut kv_map = vec![-1i64; ntok * heads * nbh * head_dim];
        let mut idx = 0;
        for r in 0..h as i64 {
            for c in 0..w as i64 {
                for hh in 0..heads {
                    for i in 0..cfg.k_h as i64 {
                        let row = r + i - rh;
                        for j in 0..cfg.k_w as i64 {
                            if row >= 0 && row < h as i64 {
                                let col = (c + j - rw).rem_euclid(w as i64);
                                let tok2 = row as usize * w + col as usize;
                                let base = tok2 * d + hh * head_dim;
                                for dd in 0..head_dim {
                                    kv_map[idx] = (base + dd) as i64;
                                    idx += 1;
                                }
                            } else {
                                idx += head_dim;
                            }
                        }
                    }
                }
            }
        }

        let mut q_map = vec![0i64; ntok * heads * head_dim];
        let mut idx = 0;
        for tok in 0..ntok {
            for hh in 0..heads {
                for dd in 0..head_dim {
                    q_map[idx] = (tok * d + hh * head_dim + dd) as i64;
                    idx += 1;
                }
            }
        }
        // The inverse regroup has identical ordering.
        let out_map = q_map.clone();

        let polar = build_polar_mask(AttnGeometry::Neighborhood(cfg), h, w)?;
        let mut mask = vec![false; ntok * heads * nbh];
        for tok in 0..ntok {
            for hh in 0..heads {
                let dst = (tok * heads + hh) * nbh;
                mask[dst..dst + nbh]
                    .copy_from_slice(&polar.allowed[tok * nbh..(tok + 1) * nbh]);
            }
        }

        let (rope_cos, rope_sin) =
            rope2d_tables(&latent_positions(h, w), w, heads, head_dim)?;

        Ok(NeighborhoodGeometry {
            h,
            w,
            heads,
            head_dim,
            cfg: cfg.clone(),
            nbh,
            q_split: Arc::new(split(0)),
            k_split: Arc::new(split(d)),
            v_split: Arc::new(split(2 * d)),
            q_map: Arc::new(q_map),
            kv_map: Arc::new(kv_map),
            out_map: Arc::new(out_map),
            mask: Arc::new(mask),
            rope_cos,
            rope_sin,
        })
    }

    pub fn mask(&self) -> Arc<Vec<bool>> {
        Arc::clone(&self.mask)
    }
}

/// Anisotropic neighborhood attention with 2D RoPE and polar masking.
pub fn neighborhood_attention_node(
    g: &mut Graph,
    x: NodeId,
    p: &AttnParamNodes,
    geo: &NeighborhoodGeometry,
) -> NodeId {
    let d = geo.heads * geo.head_dim;
    let ntok = geo.h * geo.w;
    let (bt, nbh, hd) = (ntok * geo.heads, geo.nbh, geo.head_dim);

    let qkv = g.linear(x, p.qkv_w, p.qkv_b);
    let q = g.gather_pad(qkv, Arc::clone(&geo.q_split), vec![ntok, d]);
    let k = g.gather_pad(qkv, Arc::clone(&geo.k_split), vec![ntok, d]);
    let v = g.gather_pad(qkv, Arc::clone(&geo.v_split), vec![ntok, d]);
    let q = g.rope(q, Arc::clone(&geo.rope_cos), Arc::clone(&geo.rope_sin));
    let k = g.rope(k, Arc::clone(&geo.rope_cos), Arc::clone(&geo.rope_sin));

    let qg = g.gather_pad(q, Arc::clone(&geo.q_map), vec![bt, 1, hd]);
    let kg = g.gather_pad(k, Arc::clone(&geo.kv_map), vec![bt, nbh, hd]);
    let vg = g.gather_pad(v, Arc::clone(&geo.kv_map), vec![bt, nbh, hd]);

    let qs = g.scale(qg, 1.0 / (hd as f64).sqrt());
    let scores = g.bmm_nt(qs, kg);
    let probs = g.softmax_masked(scores, Arc::clone(&geo.mask));
    let ctx = g.bmm(probs, vg);
    let merged = g.gather_pad(ctx, Arc::clone(&geo.out_map), vec![ntok, d]);
    g.linear(merged, p.out_w, p.out_b)
}

// ---------------------------------------------------------------------
// Plain wrappers
// ---------------------------------------------------------------------

fn params_to_nodes(g: &mut Graph, p: &AttnParams) -> AttnParamNodes {
    AttnParamNodes {
        qkv_w: g.constant(p.qkv_w.clone()),
        qkv_b: g.constant(p.qkv_b.clone()),
        out_w: g.constant(p.out_w.clone()),
        out_b: g.constant(p.out_b.clone()),
        bias_table: p.bias_table.as_ref().map(|t| g.constant(t.clone())),
    }
}

/// One windowed-attention pass over `[h*w, D]` latent values.
pub fn periodic_window_attention(
    x: &[f64],
    h: usize,
    w: usize,
    params: &AttnParams,
    cfg: &WindowConfig,
    shifted: bool,
) -> Result<Vec<f64>> {
    let geo = WindowGeometry::new(cfg, h, w, params.heads, params.head_dim, shifted)?;
    let mut g = Graph::new();
    let d = params.embed_dim();
    let xn = g.constant(Tensor::new(vec![h * w, d], x.to_vec()));
    let pn = params_to_nodes(&mut g, params);
    let out = window_attention_node(&mut g, xn, &pn, &geo);
    Ok(g.value(out).data.clone())
}

/// One neighborhood-attention pass over `[h*w, D]` latent values.
pub fn boundary_neighborhood_attention(
    x: &[f64],
    h: usize,
    w: usize,
    params: &AttnParams,
    cfg: &NeighborhoodConfig,
) -> Result<Vec<f64>> {
    let geo = NeighborhoodGeometry::new(cfg, h, w, params.heads, params.head_dim)?;
    let mut g = Graph::new();
    let d = params.embed_dim();
    let xn = g.constant(Tensor::new(vec![h * w, d], x.to_vec()));
    let pn = params_to_nodes(&mut g, params);
    let out = neighborhood_attention_node(&mut g, xn, &pn, &geo);
    Ok(g.value(out).data.clone())
}
