//! The single-shot stochastic transformer: patch embedding, attention
//! blocks with AdaLN-Zero noise conditioning and gated residuals, and a
//! joint decoder emitting prognostic residuals and diagnostics.
//!
//! The network maps `(X_prev, C, z) -> (X_hat, Y_hat)` in one pass.
//! The prognostic branch is a residual on the previous state, so a
//! freshly initialized model (zero gates, zero modulation maps, zero
//! decoder heads) is exactly the identity on `X`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attn::{
    neighborhood_attention_node, window_attention_node, AttnParamNodes, AttnParams,
    NeighborhoodConfig, NeighborhoodGeometry, WindowConfig, WindowGeometry,
};
use crate::error::{GemError, Result};
use crate::grid::{make_grid, Field, GridSpec};
use crate::scoring::ChannelStats;
use crate::tape::{Graph, NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnKind {
    Window,
    Neighborhood,
}

/// Architecture and channel layout. Grid dims are part of the config so
/// checkpoints pin the geometry they were trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub nlat: usize,
    pub nlon: usize,
    pub patch: (usize, usize),
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub noise_dim: usize,
    pub attn_kind: AttnKind,
    pub window_h: usize,
    pub neighborhood: (usize, usize),
    pub prognostic_channels: Vec<String>,
    pub diagnostic_channels: Vec<String>,
    pub conditioning_channels: Vec<String>,
    pub condition_on_diagnostics: bool,
    pub decoder_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            nlat: 32,
            nlon: 64,
            patch: (4, 4),
            embed_dim: 64,
            depth: 4,
            heads: 4,
            noise_dim: 16,
            attn_kind: AttnKind::Window,
            window_h: 4,
            neighborhood: (3, 5),
            prognostic_channels: vec!["temperature".into(), "anomaly".into(), "sst".into()],
            diagnostic_channels: vec!["tmin".into(), "tmax".into(), "tmean".into()],
            conditioning_channels: vec!["land".into(), "season".into()],
            condition_on_diagnostics: false,
            decoder_channels: 16,
        }
    }
}

impl ModelConfig {
    pub fn c_x(&self) -> usize {
        self.prognostic_channels.len()
    }

    pub fn c_y(&self) -> usize {
        self.diagnostic_channels.len()
    }

    pub fn c_c(&self) -> usize {
        self.conditioning_channels.len()
    }

    /// Input channels to the patch embed.
    pub fn c_in(&self) -> usize {
        self.c_x() + self.c_c() + if self.condition_on_diagnostics { self.c_y() } else { 0 }
    }

    pub fn latent_h(&self) -> usize {
        self.nlat / self.patch.0
    }

    pub fn latent_w(&self) -> usize {
        self.nlon / self.patch.1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn grid(&self) -> Result<GridSpec> {
        make_grid(self.nlat, self.nlon)
    }

    pub fn validate(&self) -> Result<()> {
        make_grid(self.nlat, self.nlon)?;
        if self.nlat % self.patch.0 != 0 || self.nlon % self.patch.1 != 0 {
            return Err(GemError::IndivisibleDims(format!(
                "grid {}x{} not divisible by patch {:?}",
                self.nlat, self.nlon, self.patch
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(GemError::IndivisibleDims(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.noise_dim == 0 {
            return Err(GemError::Config("noise_dim must be >= 1".to_string()));
        }
        match self.attn_kind {
            AttnKind::Window => {
                WindowConfig::new(self.window_h).validate(self.latent_h(), self.latent_w())?
            }
            AttnKind::Neighborhood => {
                let cfg = NeighborhoodConfig::new(self.neighborhood.0, self.neighborhood.1)?;
                cfg.validate(self.latent_h(), self.latent_w())?;
                if self.head_dim() % 4 != 0 {
                    return Err(GemError::IndivisibleDims(format!(
                        "head_dim {} must be divisible by 4 for 2D RoPE",
                        self.head_dim()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-block weights.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub attn: AttnParams,
    /// Noise-embedding to (gamma1, beta1, gamma2, beta2), zero-initialized.
    pub adaln_w: Tensor,
    pub adaln_b: Tensor,
    pub gate_attn: Tensor,
    pub gate_mlp: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

/// All trainable weights.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub noise_w1: Tensor,
    pub noise_b1: Tensor,
    pub noise_w2: Tensor,
    pub noise_b2: Tensor,
    pub blocks: Vec<BlockParams>,
    pub unembed_w: Tensor,
    pub unembed_b: Tensor,
    pub conv_w: Tensor,
    pub conv_b: Tensor,
    pub head_x_w: Tensor,
    pub head_x_b: Tensor,
    pub head_y_w: Tensor,
    pub head_y_b: Tensor,
}

fn gaussian(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Tensor {
    let std = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v * std
        })
        .collect();
    Tensor::new(vec![rows, cols], data)
}

impl ModelParams {
    /// Scaled-Gaussian projections (variance 1/fan_in); AdaLN maps,
    /// residual gates, and both decoder heads start at zero.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let d = cfg.embed_dim;
        let (p_h, p_w) = cfg.patch;
        let c_in = cfg.c_in();
        let c_dec = cfg.decoder_channels;
        let wcfg = WindowConfig::new(cfg.window_h);

        let blocks = (0..cfg.depth)
            .map(|_| {
                let bias_table = match cfg.attn_kind {
                    AttnKind::Window => {
                        let npair = (2 * wcfg.w_h - 1) * (2 * wcfg.w_w - 1);
                        Some(Tensor::zeros(vec![cfg.heads, npair]))
                    }
                    AttnKind::Neighborhood => None,
                };
                BlockParams {
                    attn: AttnParams {
                        heads: cfg.heads,
                        head_dim: cfg.head_dim(),
                        qkv_w: gaussian(&mut rng, 3 * d, d),
                        qkv_b: Tensor::zeros(vec![3 * d]),
                        out_w: gaussian(&mut rng, d, d),
                        out_b: Tensor::zeros(vec![d]),
                        bias_table,
                    },
                    adaln_w: Tensor::zeros(vec![4 * d, d]),
                    adaln_b: Tensor::zeros(vec![4 * d]),
                    gate_attn: Tensor::zeros(vec![1]),
                    gate_mlp: Tensor::zeros(vec![1]),
                    mlp_w1: gaussian(&mut rng, 4 * d, d),
                    mlp_b1: Tensor::zeros(vec![4 * d]),
                    mlp_w2: gaussian(&mut rng, d, 4 * d),
                    mlp_b2: Tensor::zeros(vec![d]),
                }
            })
            .collect();

        Ok(ModelParams {
            patch_w: gaussian(&mut rng, d, p_h * p_w * c_in),
            patch_b: Tensor::zeros(vec![d]),
            noise_w1: gaussian(&mut rng, d, cfg.noise_dim),
            noise_b1: Tensor::zeros(vec![d]),
            noise_w2: gaussian(&mut rng, d, d),
            noise_b2: Tensor::zeros(vec![d]),
            blocks,
            unembed_w: gaussian(&mut rng, p_h * p_w * c_dec, d),
            unembed_b: Tensor::zeros(vec![p_h * p_w * c_dec]),
            conv_w: gaussian(&mut rng, c_dec, 9 * c_dec),
            conv_b: Tensor::zeros(vec![c_dec]),
            head_x_w: Tensor::zeros(vec![cfg.c_x(), c_dec]),
            head_x_b: Tensor::zeros(vec![cfg.c_x()]),
            head_y_w: Tensor::zeros(vec![cfg.c_y(), c_dec]),
            head_y_b: Tensor::zeros(vec![cfg.c_y()]),
        })
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.numel());
        n
    }

    /// Visit tensors in a stable order (checkpoint format and optimizer
    /// state both rely on it).
    pub fn for_each(&self, mut f: impl FnMut(&str, &Tensor)) {
        f("patch.w", &self.patch_w);
        f("patch.b", &self.patch_b);
        f("noise.w1", &self.noise_w1);
        f("noise.b1", &self.noise_b1);
        f("noise.w2", &self.noise_w2);
        f("noise.b2", &self.noise_b2);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("block{i}.{s}");
            f(&p("qkv_w"), &b.attn.qkv_w);
            f(&p("qkv_b"), &b.attn.qkv_b);
            f(&p("out_w"), &b.attn.out_w);
            f(&p("out_b"), &b.attn.out_b);
            if let Some(bias) = &b.attn.bias_table {
                f(&p("bias"), bias);
            }
            f(&p("adaln_w"), &b.adaln_w);
            f(&p("adaln_b"), &b.adaln_b);
            f(&p("gate_attn"), &b.gate_attn);
            f(&p("gate_mlp"), &b.gate_mlp);
            f(&p("mlp_w1"), &b.mlp_w1);
            f(&p("mlp_b1"), &b.mlp_b1);
            f(&p("mlp_w2"), &b.mlp_w2);
            f(&p("mlp_b2"), &b.mlp_b2);
        }
        f("unembed.w", &self.unembed_w);
        f("unembed.b", &self.unembed_b);
        f("conv.w", &self.conv_w);
        f("conv.b", &self.conv_b);
        f("head_x.w", &self.head_x_w);
        f("head_x.b", &self.head_x_b);
        f("head_y.w", &self.head_y_w);
        f("head_y.b", &self.head_y_b);
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        f("patch.w", &mut self.patch_w);
        f("patch.b", &mut self.patch_b);
        f("noise.w1", &mut self.noise_w1);
        f("noise.b1", &mut self.noise_b1);
        f("noise.w2", &mut self.noise_w2);
        f("noise.b2", &mut self.noise_b2);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = |s: &str| format!("block{i}.{s}");
            f(&p("qkv_w"), &mut b.attn.qkv_w);
            f(&p("qkv_b"), &mut b.attn.qkv_b);
            f(&p("out_w"), &mut b.attn.out_w);
            f(&p("out_b"), &mut b.attn.out_b);
            if let Some(bias) = &mut b.attn.bias_table {
                f(&p("bias"), bias);
            }
            f(&p("adaln_w"), &mut b.adaln_w);
            f(&p("adaln_b"), &mut b.adaln_b);
            f(&p("gate_attn"), &mut b.gate_attn);
            f(&p("gate_mlp"), &mut b.gate_mlp);
            f(&p("mlp_w1"), &mut b.mlp_w1);
            f(&p("mlp_b1"), &mut b.mlp_b1);
            f(&p("mlp_w2"), &mut b.mlp_w2);
            f(&p("mlp_b2"), &mut b.mlp_b2);
        }
        f("unembed.w", &mut self.unembed_w);
        f("unembed.b", &mut self.unembed_b);
        f("conv.w", &mut self.conv_w);
        f("conv.b", &mut self.conv_b);
        f("head_x.w", &mut self.head_x_w);
        f("head_x.b", &mut self.head_x_b);
        f("head_y.w", &mut self.head_y_w);
        f("head_y.b", &mut self.head_y_b);
    }
}

/// A single standard-normal draw, tied to its (seed, member, lead)
/// provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub z: Vec<f64>,
    pub seed: u64,
    pub member: usize,
    pub lead: usize,
}

/// Counter-style noise: a ChaCha stream keyed by (seed, member, lead).
/// Identical triples reproduce identical draws; distinct triples give
/// independent streams.
pub fn sample_noise(seed: u64, member: usize, lead: usize, noise_dim: usize) -> NoiseDraw {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(member as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(lead as u64).to_le_bytes());
    key[24..32].copy_from_slice(b"gem-nois");
    let mut rng = ChaCha12Rng::from_seed(key);
    let z = (0..noise_dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    NoiseDraw {
        z,
        seed,
        member,
        lead,
    }
}

/// Standardization constants carried in checkpoints. The model operates
/// on standardized values internally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardStats {
    pub x: ChannelStats,
    pub y: ChannelStats,
    pub c: ChannelStats,
}

impl StandardStats {
    pub fn identity(cfg: &ModelConfig) -> Self {
        StandardStats {
            x: ChannelStats::identity(cfg.c_x()),
            y: ChannelStats::identity(cfg.c_y()),
            c: ChannelStats::identity(cfg.c_c()),
        }
    }
}

enum AttnGeo {
    Window {
        unshifted: WindowGeometry,
        shifted: WindowGeometry,
    },
    Neighborhood(NeighborhoodGeometry),
}

/// Precomputed index maps for one config: patch embed, decoder scatter,
/// 3x3 stencil, head transposes, and the attention geometries.
pub struct ModelGeometry {
    pub cfg: ModelConfig,
    patch_map: Arc<Vec<i64>>,
    unembed_map: Arc<Vec<i64>>,
    conv_map: Arc<Vec<i64>>,
    head_x_t: Arc<Vec<i64>>,
    head_y_t: Arc<Vec<i64>>,
    attn: AttnGeo,
}

impl ModelGeometry {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (nlat, nlon) = (cfg.nlat, cfg.nlon);
        let ncell = nlat * nlon;
        let (p_h, p_w) = cfg.patch;
        let (lh, lw) = (cfg.latent_h(), cfg.latent_w());
        let ntok = lh * lw;
        let c_in = cfg.c_in();
        let c_dec = cfg.decoder_channels;

        // Patch extraction from channel-major [C_in * ncell] input into
        // [ntok, p_h*p_w*C_in] rows.
        let mut patch_map = vec![0i64; ntok * p_h * p_w * c_in];
        let mut idx = 0;
        for tr in 0..lh {
            for tc in 0..lw {
                for ci in 0..c_in {
                    for a in 0..p_h {
                        for b in 0..p_w {
                            let cell = (tr * p_h + a) * nlon + (tc * p_w + b);
                            patch_map[idx] = (ci * ncell + cell) as i64;
                            idx += 1;
                        }
                    }
                }
            }
        }

        // Patch unembedding [ntok, p*p*C_dec] back to cell-major
        // [ncell, C_dec] rows.
        let mut unembed_map = vec![0i64; ncell * c_dec];
        for r in 0..nlat {
            for c in 0..nlon {
                let tok = (r / p_h) * lw + (c / p_w);
                let within = (r % p_h) * p_w + (c % p_w);
                for ch in 0..c_dec {
                    unembed_map[(r * nlon + c) * c_dec + ch] =
                        (tok * (p_h * p_w * c_dec) + ch * (p_h * p_w) + within) as i64;
                }
            }
        }

        // 3x3 stencil over [ncell, C_dec]: periodic in longitude,
        // zero-padded in latitude.
        let mut conv_map = vec![-1i64; ncell * 9 * c_dec];
        let mut idx = 0;
        for r in 0..nlat as i64 {
            for c in 0..nlon as i64 {
                for ch in 0..c_dec {
                    for dr in -1..=1i64 {
                        for dc in -1..=1i64 {
                            let rr = r + dr;
                            if rr >= 0 && rr < nlat as i64 {
                                let cc = (c + dc).rem_euclid(nlon as i64);
                                let cell = rr as usize * nlon + cc as usize;
                                conv_map[idx] = (cell * c_dec + ch) as i64;
                            }
                            idx += 1;
                        }
                    }
                }
            }
        }

        let transpose = |nchan: usize| -> Vec<i64> {
            let mut m = vec![0i64; nchan * ncell];
            for ch in 0..nchan {
                for cell in 0..ncell {
                    m[ch * ncell + cell] = (cell * nchan + ch) as i64;
                }
            }
            m
        };

        let attn = match cfg.attn_kind {
            AttnKind::Window => {
                let wcfg = WindowConfig::new(cfg.window_h);
                AttnGeo::Window {
                    unshifted: WindowGeometry::new(&wcfg, lh, lw, cfg.heads, cfg.head_dim(), false)?,
                    shifted: WindowGeometry::new(&wcfg, lh, lw, cfg.heads, cfg.head_dim(), true)?,
                }
            }
            AttnKind::Neighborhood => {
                let ncfg = NeighborhoodConfig::new(cfg.neighborhood.0, cfg.neighborhood.1)?;
                AttnGeo::Neighborhood(NeighborhoodGeometry::new(
                    &ncfg,
                    lh,
                    lw,
                    cfg.heads,
                    cfg.head_dim(),
                )?)
            }
        };

        Ok(ModelGeometry {
            cfg: cfg.clone(),
            patch_map: Arc::new(patch_map),
            unembed_map: Arc::new(unembed_map),
            conv_map: Arc::new(conv_map),
            head_x_t: Arc::new(transpose(cfg.c_x())),
            head_y_t: Arc::new(transpose(cfg.c_y())),
            attn,
        })
    }

    /// Attention masks for debug export: (name, groups, q_len, k_len, mask).
    pub fn masks_for_dump(&self) -> Vec<(String, Arc<Vec<bool>>)> {
        match &self.attn {
            AttnGeo::Window { unshifted, shifted } => vec![
                ("window_unshifted".to_string(), unshifted.mask()),
                ("window_shifted".to_string(), shifted.mask()),
            ],
            AttnGeo::Neighborhood(geo) => {
                vec![("neighborhood".to_string(), geo.mask())]
            }
        }
    }
}

/// Graph handles for every parameter, in visitor order.
pub struct ParamNodes {
    pub ordered: Vec<NodeId>,
    patch_w: NodeId,
    patch_b: NodeId,
    noise_w1: NodeId,
    noise_b1: NodeId,
    noise_w2: NodeId,
    noise_b2: NodeId,
    blocks: Vec<BlockNodes>,
    unembed_w: NodeId,
    unembed_b: NodeId,
    conv_w: NodeId,
    conv_b: NodeId,
    head_x_w: NodeId,
    head_x_b: NodeId,
    head_y_w: NodeId,
    head_y_b: NodeId,
}

struct BlockNodes {
    attn: AttnParamNodes,
    adaln_w: NodeId,
    adaln_b: NodeId,
    gate_attn: NodeId,
    gate_mlp: NodeId,
    mlp_w1: NodeId,
    mlp_b1: NodeId,
    mlp_w2: NodeId,
    mlp_b2: NodeId,
}

/// Put all parameters on the tape. The `ordered` list matches the
/// `for_each` visitation order, so gradients can be read back
/// positionally.
pub fn params_to_graph(g: &mut Graph, params: &ModelParams) -> ParamNodes {
    let mut ordered = Vec::new();
    let mut add = |g: &mut Graph, t: &Tensor| {
        let id = g.param(t.clone());
        ordered.push(id);
        id
    };
    let patch_w = add(g, &params.patch_w);
    let patch_b = add(g, &params.patch_b);
    let noise_w1 = add(g, &params.noise_w1);
    let noise_b1 = add(g, &params.noise_b1);
    let noise_w2 = add(g, &params.noise_w2);
    let noise_b2 = add(g, &params.noise_b2);
    let blocks = params
        .blocks
        .iter()
        .map(|b| {
            let qkv_w = add(g, &b.attn.qkv_w);
            let qkv_b = add(g, &b.attn.qkv_b);
            let out_w = add(g, &b.attn.out_w);
            let out_b = add(g, &b.attn.out_b);
            let bias_table = b.attn.bias_table.as_ref().map(|t| add(g, t));
            BlockNodes {
                attn: AttnParamNodes {
                    qkv_w,
                    qkv_b,
                    out_w,
                    out_b,
                    bias_table,
                },
                adaln_w: add(g, &b.adaln_w),
                adaln_b: add(g, &b.adaln_b),
                gate_attn: add(g, &b.gate_attn),
                gate_mlp: add(g, &b.gate_mlp),
                mlp_w1: add(g, &b.mlp_w1),
                mlp_b1: add(g, &b.mlp_b1),
                mlp_w2: add(g, &b.mlp_w2),
                mlp_b2: add(g, &b.mlp_b2),
            }
        })
        .collect();
    ParamNodes {
        patch_w,
        patch_b,
        noise_w1,
        noise_b1,
        noise_w2,
        noise_b2,
        blocks,
        unembed_w: add(g, &params.unembed_w),
        unembed_b: add(g, &params.unembed_b),
        conv_w: add(g, &params.conv_w),
        conv_b: add(g, &params.conv_b),
        head_x_w: add(g, &params.head_x_w),
        head_x_b: add(g, &params.head_x_b),
        head_y_w: add(g, &params.head_y_w),
        head_y_b: add(g, &params.head_y_b),
        ordered,
    }
}

/// Outputs of one forward pass on the tape, all in standardized units
/// and channel-major `[C * ncell]` layout.
pub struct ForwardNodes {
    pub x_hat_std: NodeId,
    pub delta_x_std: NodeId,
    pub y_hat_std: NodeId,
}

/// One deterministic pass through the network on the tape.
///
/// `x_prev_std` is `[C_x * ncell]`, `cond_std` carries the conditioning
/// channels (plus standardized previous diagnostics when the config
/// conditions on them), `z` is `[1, noise_dim]`.
pub fn forward_graph(
    g: &mut Graph,
    p: &ParamNodes,
    geo: &ModelGeometry,
    x_prev_std: NodeId,
    cond_std: NodeId,
    z: NodeId,
) -> ForwardNodes {
    let cfg = &geo.cfg;
    let d = cfg.embed_dim;
    let ncell = cfg.nlat * cfg.nlon;
    let ntok = cfg.latent_h() * cfg.latent_w();
    let (p_h, p_w) = cfg.patch;
    let eps = 1e-6;

    let input = g.concat(x_prev_std, cond_std);
    let patches = g.gather_pad(
        input,
        Arc::clone(&geo.patch_map),
        vec![ntok, p_h * p_w * cfg.c_in()],
    );
    let mut h = g.linear(patches, p.patch_w, p.patch_b);

    // Noise embedding: 2-layer MLP shared across blocks.
    let ne = {
        let h1 = g.linear(z, p.noise_w1, p.noise_b1);
        let a1 = g.gelu(h1);
        g.linear(a1, p.noise_w2, p.noise_b2)
    };

    for (i, b) in p.blocks.iter().enumerate() {
        let modv = g.linear(ne, b.adaln_w, b.adaln_b); // [1, 4D]
        let slice = |g: &mut Graph, k: usize| {
            let map: Vec<i64> = (k * d..(k + 1) * d).map(|v| v as i64).collect();
            g.gather_pad(modv, Arc::new(map), vec![d])
        };
        let gamma1 = slice(g, 0);
        let beta1 = slice(g, 1);
        let gamma2 = slice(g, 2);
        let beta2 = slice(g, 3);

        // Attention branch under AdaLN modulation and a zero-init gate.
        let t = g.layer_norm(h, eps);
        let s1 = g.add_scalar(gamma1, 1.0);
        let t = g.mul_bcast_row(t, s1);
        let t = g.add_bcast_row(t, beta1);
        let a = match &geo.attn {
            AttnGeo::Window { unshifted, shifted } => {
                let w = if i % 2 == 1 { shifted } else { unshifted };
                window_attention_node(g, t, &b.attn, w)
            }
            AttnGeo::Neighborhood(ngeo) => neighborhood_attention_node(g, t, &b.attn, ngeo),
        };
        let a = g.scale_by_scalar_var(a, b.gate_attn);
        h = g.add(h, a);

        // MLP branch.
        let t2 = g.layer_norm(h, eps);
        let s2 = g.add_scalar(gamma2, 1.0);
        let t2 = g.mul_bcast_row(t2, s2);
        let t2 = g.add_bcast_row(t2, beta2);
        let m1 = g.linear(t2, b.mlp_w1, b.mlp_b1);
        let m1 = g.gelu(m1);
        let m2 = g.linear(m1, b.mlp_w2, b.mlp_b2);
        let m2 = g.scale_by_scalar_var(m2, b.gate_mlp);
        h = g.add(h, m2);
    }

    // Decode: unembed to cells, residual 3x3 stencil trunk, two heads.
    let hf = g.layer_norm(h, eps);
    let u = g.linear(hf, p.unembed_w, p.unembed_b);
    let cells = g.gather_pad(
        u,
        Arc::clone(&geo.unembed_map),
        vec![ncell, cfg.decoder_channels],
    );
    let im2col = g.gather_pad(
        cells,
        Arc::clone(&geo.conv_map),
        vec![ncell, 9 * cfg.decoder_channels],
    );
    let cv = g.linear(im2col, p.conv_w, p.conv_b);
    let cva = g.gelu(cv);
    let trunk = g.add(cells, cva);

    let dx = g.linear(trunk, p.head_x_w, p.head_x_b); // [ncell, C_x]
    let delta_x_std = g.gather_pad(
        dx,
        Arc::clone(&geo.head_x_t),
        vec![cfg.c_x() * ncell],
    );
    let x_hat_std = g.add(x_prev_std, delta_x_std);

    let dy = g.linear(trunk, p.head_y_w, p.head_y_b);
    let y_hat_std = g.gather_pad(dy, Arc::clone(&geo.head_y_t), vec![cfg.c_y() * ncell]);

    ForwardNodes {
        x_hat_std,
        delta_x_std,
        y_hat_std,
    }
}

/// Standardize a field's channels into a flat `[C * ncell]` f64 vector.
pub fn standardize(field: &Field, stats: &ChannelStats) -> Vec<f64> {
    let ncell = field.grid().ncell();
    let mut out = Vec::with_capacity(field.nchan() * ncell);
    for c in 0..field.nchan() {
        let (mu, sd) = (stats.mean[c], stats.std[c]);
        out.extend(field.channel(c).iter().map(|&v| (v as f64 - mu) / sd));
    }
    out
}

/// One forward pass in physical units. The prognostic output is
/// `x_prev + sigma_c * delta`, which keeps the identity at
/// initialization bit-exact.
pub fn forward(
    x_prev: &Field,
    cond: &Field,
    y_prev: Option<&Field>,
    z: &NoiseDraw,
    params: &ModelParams,
    geo: &ModelGeometry,
    stats: &StandardStats,
) -> Result<(Field, Field)> {
    let cfg = &geo.cfg;
    if x_prev.channels() != cfg.prognostic_channels.as_slice() {
        return Err(GemError::ChannelMismatch(
            "prognostic channels differ from model config".to_string(),
        ));
    }
    if cond.channels() != cfg.conditioning_channels.as_slice() {
        return Err(GemError::ChannelMismatch(
            "conditioning channels differ from model config".to_string(),
        ));
    }
    if x_prev.grid().nlat() != cfg.nlat || x_prev.grid().nlon() != cfg.nlon {
        return Err(GemError::GridMismatch(format!(
            "input grid {}x{} differs from model grid {}x{}",
            x_prev.grid().nlat(),
            x_prev.grid().nlon(),
            cfg.nlat,
            cfg.nlon
        )));
    }
    if z.z.len() != cfg.noise_dim {
        return Err(GemError::ShapeMismatch(format!(
            "noise dim {} != config {}",
            z.z.len(),
            cfg.noise_dim
        )));
    }

    let mut g = Graph::new();
    let p = params_to_graph(&mut g, params);
    let ncell = cfg.nlat * cfg.nlon;

    let x_std = g.constant(Tensor::new(
        vec![cfg.c_x() * ncell],
        standardize(x_prev, &stats.x),
    ));
    let mut cond_vec = standardize(cond, &stats.c);
    if cfg.condition_on_diagnostics {
        let yp = y_prev.ok_or_else(|| {
            GemError::Config(
                "model conditions on diagnostics but no previous diagnostics given".to_string(),
            )
        })?;
        cond_vec.extend(standardize(yp, &stats.y));
    }
    let n_cond = cond_vec.len();
    let c_std = g.constant(Tensor::new(vec![n_cond], cond_vec));
    let zn = g.constant(Tensor::new(vec![1, cfg.noise_dim], z.z.clone()));

    let out = forward_graph(&mut g, &p, geo, x_std, c_std, zn);
    let delta = &g.value(out.delta_x_std).data;
    let y_std = &g.value(out.y_hat_std).data;

    let grid = x_prev.grid().clone();
    let mut x_data = Vec::with_capacity(cfg.c_x() * ncell);
    for c in 0..cfg.c_x() {
        let sd = stats.x.std[c];
        let prev = x_prev.channel(c);
        for (k, &pv) in prev.iter().enumerate() {
            x_data.push((pv as f64 + sd * delta[c * ncell + k]) as f32);
        }
    }
    let mut y_data = Vec::with_capacity(cfg.c_y() * ncell);
    for c in 0..cfg.c_y() {
        let (mu, sd) = (stats.y.mean[c], stats.y.std[c]);
        for k in 0..ncell {
            y_data.push((mu + sd * y_std[c * ncell + k]) as f32);
        }
    }
    if x_data.iter().any(|v| !v.is_finite()) || y_data.iter().any(|v| !v.is_finite()) {
        return Err(GemError::NonFinite {
            context: "forward pass output".to_string(),
        });
    }

    let tag = x_prev.time_tag() + 24;
    let x_hat = Field::new(grid.clone(), cfg.prognostic_channels.clone(), x_data, tag)?;
    let y_hat = Field::new(grid, cfg.diagnostic_channels.clone(), y_data, tag)?;
    Ok((x_hat, y_hat))
}

// ---------------------------------------------------------------------
// Checkpoint format (GEMW)
// ---------------------------------------------------------------------

pub const GEMW_MAGIC: &[u8; 4] = b"GEMW";
pub const GEMW_VERSION: u32 = 1;

/// A trained model: config, standardization stats, weights.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub cfg: ModelConfig,
    pub stats: StandardStats,
    pub params: ModelParams,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    stats: StandardStats,
}

/// Write a checkpoint. Payloads are f32, so saving canonicalizes the
/// weights to f32 precision; a second save/load round-trips bit-exactly.
pub fn save_checkpoint<P: AsRef<Path>>(ck: &Checkpoint, path: P) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(GEMW_MAGIC)?;
    w.write_all(&GEMW_VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(&CheckpointHeader {
        config: ck.cfg.clone(),
        stats: ck.stats.clone(),
    })?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;

    let mut count = 0u32;
    ck.params.for_each(|_, _| count += 1);
    w.write_all(&count.to_le_bytes())?;

    let mut err = None;
    ck.params.for_each(|name, t| {
        if err.is_some() {
            return;
        }
        let r = (|| -> Result<()> {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in &t.data {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
            Ok(())
        })();
        if let Err(e) = r {
            err = Some(e);
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != GEMW_MAGIC {
        return Err(GemError::BadMagic {
            expected: String::from_utf8_lossy(GEMW_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let version = read_u32(&mut r)?;
    if version != GEMW_VERSION {
        return Err(GemError::VersionMismatch {
            expected: GEMW_VERSION,
            found: version,
        });
    }
    let hlen = read_u32(&mut r)? as usize;
    let mut hbuf = vec![0u8; hlen];
    read_exact(&mut r, &mut hbuf)?;
    let header: CheckpointHeader = serde_json::from_slice(&hbuf)?;
    let cfg = header.config;
    cfg.validate()?;

    // Read named tensors into a skeleton built from the config; any
    // mismatch in names or shapes is a config incompatibility.
    let mut params = ModelParams::init(&cfg, 0)?;
    let count = read_u32(&mut r)? as usize;
    let mut expected = 0usize;
    params.for_each(|_, _| expected += 1);
    if count != expected {
        return Err(GemError::CfgMismatch(format!(
            "checkpoint has {count} tensors, config implies {expected}"
        )));
    }

    struct Entry {
        shape: Vec<usize>,
        data: Vec<f64>,
    }
    let mut entries: Vec<(String, Entry)> = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = read_u32(&mut r)? as usize;
        if nlen > 4096 {
            return Err(GemError::MalformedHeader(format!(
                "unreasonable tensor name length {nlen}"
            )));
        }
        let mut nbuf = vec![0u8; nlen];
        read_exact(&mut r, &mut nbuf)?;
        let name = String::from_utf8(nbuf)
            .map_err(|_| GemError::MalformedHeader("tensor name is not UTF-8".to_string()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut buf = [0u8; 4];
            read_exact(&mut r, &mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        entries.push((name, Entry { shape, data }));
    }

    let mut i = 0;
    let mut err: Option<GemError> = None;
    params.for_each_mut(|name, t| {
        if err.is_some() {
            return;
        }
        let (ename, entry) = &entries[i];
        i += 1;
        if ename != name {
            err = Some(GemError::CfgMismatch(format!(
                "tensor {i} named {ename:?}, expected {name:?}"
            )));
            return;
        }
        if entry.shape != t.shape {
            err = Some(GemError::CfgMismatch(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                entry.shape, t.shape
            )));
            return;
        }
        t.data.copy_from_slice(&entry.data);
    });
    if let Some(e) = err {
        return Err(e);
    }

    Ok(Checkpoint {
        cfg,
        stats: header.stats,
        params,
    })
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| GemError::Truncated {
        expected: buf.len(),
        got: 0,
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            nlat: 8,
            nlon: 16,
            patch: (2, 2),
            embed_dim: 16,
            depth: 1,
            heads: 2,
            noise_dim: 4,
            window_h: 2,
            ..ModelConfig::default()
        }
    }

    fn random_field(cfg: &ModelConfig, channels: Vec<String>, seed: u64, tag: i64) -> Field {
        let grid = cfg.grid().unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let data = (0..channels.len() * grid.ncell())
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v as f32
            })
            .collect();
        Field::new(grid, channels, data, tag).unwrap()
    }

    #[test]
    fn noise_is_deterministic_and_distinct() {
        let a = sample_noise(7, 0, 0, 16);
        let b = sample_noise(7, 0, 0, 16);
        assert_eq!(a, b);
        let c = sample_noise(7, 1, 0, 16);
        assert_ne!(a.z, c.z);
        let d = sample_noise(7, 0, 1, 16);
        assert_ne!(a.z, d.z);
    }

    #[test]
    fn noise_moments_are_standard_normal() {
        let n = 100_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for i in 0..n / 10 {
            let d = sample_noise(11, i, 3, 10);
            for v in d.z {
                sum += v;
                sq += v * v;
            }
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn gates_and_heads_start_at_zero() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 1).unwrap();
        for b in &params.blocks {
            assert!(b.gate_attn.data.iter().all(|&v| v == 0.0));
            assert!(b.gate_mlp.data.iter().all(|&v| v == 0.0));
            assert!(b.adaln_w.data.iter().all(|&v| v == 0.0));
            assert!(b.adaln_b.data.iter().all(|&v| v == 0.0));
        }
        assert!(params.head_x_w.data.iter().all(|&v| v == 0.0));
        assert!(params.head_y_w.data.iter().all(|&v| v == 0.0));
        let other = ModelParams::init(&cfg, 2).unwrap();
        assert_ne!(params.patch_w.data, other.patch_w.data);
    }

    #[test]
    fn identity_at_initialization_bit_exact() {
        for kind in [AttnKind::Window, AttnKind::Neighborhood] {
            let cfg = ModelConfig {
                attn_kind: kind,
                ..tiny_cfg()
            };
            let geo = ModelGeometry::new(&cfg).unwrap();
            let params = ModelParams::init(&cfg, 3).unwrap();
            let stats = StandardStats {
                x: ChannelStats {
                    mean: vec![280.0, 0.0, 290.0],
                    std: vec![7.0, 2.0, 3.0],
                },
                y: ChannelStats {
                    mean: vec![275.0, 285.0, 280.0],
                    std: vec![6.0, 6.0, 5.0],
                },
                c: ChannelStats::identity(cfg.c_c()),
            };
            for trial in 0..20 {
                let x = random_field(&cfg, cfg.prognostic_channels.clone(), 100 + trial, 0);
                let c = random_field(&cfg, cfg.conditioning_channels.clone(), 200 + trial, 0);
                let z = sample_noise(5, trial as usize, 0, cfg.noise_dim);
                let (x_hat, y_hat) =
                    forward(&x, &c, None, &z, &params, &geo, &stats).unwrap();
                assert_eq!(x_hat.data(), x.data(), "kind {kind:?} trial {trial}");
                // Diagnostics sit at the climatological mean at init.
                for ch in 0..cfg.c_y() {
                    for &v in y_hat.channel(ch) {
                        assert_eq!(v, stats.y.mean[ch] as f32);
                    }
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg();
        let geo = ModelGeometry::new(&cfg).unwrap();
        let mut params = ModelParams::init(&cfg, 4).unwrap();
        // Break the identity so the test is not vacuous.
        for b in &mut params.blocks {
            b.gate_attn.data[0] = 0.3;
            b.gate_mlp.data[0] = 0.2;
        }
        params.head_x_w.data.iter_mut().enumerate().for_each(|(i, v)| {
            *v = 0.01 * (i as f64).sin();
        });
        let stats = StandardStats::identity(&cfg);
        let x = random_field(&cfg, cfg.prognostic_channels.clone(), 300, 0);
        let c = random_field(&cfg, cfg.conditioning_channels.clone(), 301, 0);
        let z = sample_noise(6, 0, 0, cfg.noise_dim);
        let (x1, y1) = forward(&x, &c, None, &z, &params, &geo, &stats).unwrap();
        let (x2, y2) = forward(&x, &c, None, &z, &params, &geo, &stats).unwrap();
        assert_eq!(x1, x2);
        assert_eq!(y1, y2);
        assert_ne!(x1.data(), x.data());
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let cfg = tiny_cfg();
        let mut params = ModelParams::init(&cfg, 5).unwrap();
        // Give zero-init groups nonzero values so the round trip is
        // informative.
        params.head_x_w.data.iter_mut().enumerate().for_each(|(i, v)| {
            *v = (i as f64) * 0.125 - 1.0;
        });
        let ck = Checkpoint {
            cfg: cfg.clone(),
            stats: StandardStats::identity(&cfg),
            params,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gemw");
        save_checkpoint(&ck, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.cfg, ck.cfg);

        // Saving is f32-canonicalizing: a second round trip is
        // bit-exact, and forward outputs of the two loads agree.
        let path2 = dir.path().join("m2.gemw");
        save_checkpoint(&loaded, &path2).unwrap();
        let loaded2 = load_checkpoint(&path2).unwrap();
        let mut t1 = Vec::new();
        loaded.params.for_each(|_, t| t1.extend_from_slice(&t.data));
        let mut t2 = Vec::new();
        loaded2.params.for_each(|_, t| t2.extend_from_slice(&t.data));
        assert_eq!(t1, t2);

        let geo = ModelGeometry::new(&cfg).unwrap();
        let x = random_field(&cfg, cfg.prognostic_channels.clone(), 400, 0);
        let c = random_field(&cfg, cfg.conditioning_channels.clone(), 401, 0);
        let z = sample_noise(8, 0, 0, cfg.noise_dim);
        let (xa, ya) = forward(&x, &c, None, &z, &loaded.params, &geo, &loaded.stats).unwrap();
        let (xb, yb) = forward(&x, &c, None, &z, &loaded2.params, &geo, &loaded2.stats).unwrap();
        assert_eq!(xa, xb);
        assert_eq!(ya, yb);

        // Incompatible config: different embed dim.
        let other_cfg = ModelConfig {
            embed_dim: 32,
            ..tiny_cfg()
        };
        let other = Checkpoint {
            cfg: other_cfg.clone(),
            stats: StandardStats::identity(&other_cfg),
            params: ModelParams::init(&other_cfg, 6).unwrap(),
        };
        let path3 = dir.path().join("m3.gemw");
        save_checkpoint(&other, &path3).unwrap();
        let bytes_a = std::fs::read(&path).unwrap();
        let bytes_b = std::fs::read(&path3).unwrap();
        assert_ne!(bytes_a.len(), bytes_b.len());

        // Truncation is a structured error.
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(GemError::Truncated { .. })
        ));
    }

    #[test]
    fn mask_dump_names_follow_attention_kind() {
        let geo = ModelGeometry::new(&tiny_cfg()).unwrap();
        let names: Vec<String> = geo.masks_for_dump().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["window_unshifted", "window_shifted"]);
        let ncfg = ModelConfig {
            attn_kind: AttnKind::Neighborhood,
            ..tiny_cfg()
        };
        let geo = ModelGeometry::new(&ncfg).unwrap();
        assert_eq!(geo.masks_for_dump()[0].0, "neighborhood");
    }
}
