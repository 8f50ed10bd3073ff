//! Diffusion-transformer velocity network.
//!
//! Latents `(C, H, W)` are cut into `p×p` patches, projected to width `D`,
//! offset by a fixed 2-D sin/cos table, and pushed through `L` residual
//! blocks. Each block modulates its normalized inputs with six vectors
//! (shift, scale and gate for the attention and feed-forward branches) derived
//! from the timestep embedding, either by a per-block projection or by one
//! global projection plus a learned per-block offset table. Gates and the
//! output projection start at zero, so an untrained network is the zero map
//! and every block starts as the identity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{gaussian, label_hash, Expand, Graph, RngStream, Tensor, Var};
use crate::params::{ParamSet, ParamVars};

/// Scale applied to `t ∈ [0, 1]` before the frequency embedding.
pub const TIME_SCALE: f64 = 1000.0;
const MAX_PERIOD: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaLnMode {
    PerBlock,
    Single,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextConfig {
    /// Width of each incoming text embedding vector.
    pub dim: usize,
    /// Fixed number of text tokens per sample.
    pub tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_ratio: f64,
    /// Width of the sinusoidal timestep features fed to the time MLP.
    pub freq_dim: usize,
    pub adaln: AdaLnMode,
    pub cross_attention: Option<TextConfig>,
}

impl DenoiserConfig {
    /// Desk-scale default: 8×8×4 latents, D=64, L=4, 4 heads, patch 2.
    pub fn dit_nano() -> Self {
        Self {
            channels: 4,
            height: 8,
            width: 8,
            patch_size: 2,
            hidden_dim: 64,
            depth: 4,
            heads: 4,
            ffn_ratio: 4.0,
            freq_dim: 64,
            adaln: AdaLnMode::PerBlock,
            cross_attention: None,
        }
    }

    /// Small config for the multi-expert toy benchmark.
    pub fn dit_toy() -> Self {
        Self {
            channels: 2,
            height: 4,
            width: 4,
            patch_size: 2,
            hidden_dim: 32,
            depth: 2,
            heads: 2,
            ffn_ratio: 4.0,
            freq_dim: 32,
            adaln: AdaLnMode::PerBlock,
            cross_attention: None,
        }
    }

    fn latent32(hidden_dim: usize, depth: usize, heads: usize) -> Self {
        Self {
            channels: 4,
            height: 32,
            width: 32,
            patch_size: 2,
            hidden_dim,
            depth,
            heads,
            ffn_ratio: 4.0,
            freq_dim: 256,
            adaln: AdaLnMode::PerBlock,
            cross_attention: None,
        }
    }

    pub fn dit_s2() -> Self {
        Self::latent32(384, 12, 6)
    }

    pub fn dit_b2() -> Self {
        Self::latent32(768, 12, 12)
    }

    pub fn dit_xl2() -> Self {
        Self::latent32(1152, 28, 16)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "dit-nano" => Ok(Self::dit_nano()),
            "dit-toy" => Ok(Self::dit_toy()),
            "dit-s2" => Ok(Self::dit_s2()),
            "dit-b2" => Ok(Self::dit_b2()),
            "dit-xl2" => Ok(Self::dit_xl2()),
            other => Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || !self.height.is_multiple_of(p) || !self.width.is_multiple_of(p) {
            return Err(Error::Config(format!(
                "latent {}x{} not divisible by patch size {p}",
                self.height, self.width
            )));
        }
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden dim {} not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        if !self.hidden_dim.is_multiple_of(4) {
            return Err(Error::Config("hidden dim must be a multiple of 4".into()));
        }
        if self.freq_dim == 0 || !self.freq_dim.is_multiple_of(2) {
            return Err(Error::Config("frequency embedding width must be even".into()));
        }
        if self.channels == 0 || self.depth == 0 || !(self.ffn_ratio > 0.0) {
            return Err(Error::Config("channels, depth and ffn ratio must be positive".into()));
        }
        if let Some(tc) = self.cross_attention {
            if tc.dim == 0 || tc.tokens == 0 {
                return Err(Error::Config("text dim and token count must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn latent_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch_size, self.width / self.patch_size)
    }

    pub fn tokens(&self) -> usize {
        let (a, b) = self.grid();
        a * b
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn ffn_dim(&self) -> usize {
        (self.hidden_dim as f64 * self.ffn_ratio).round() as usize
    }

    fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    /// Parameters shared by experts and router backbones (no output layer).
    pub(crate) fn backbone_param_count(&self) -> usize {
        let d = self.hidden_dim;
        let h = self.ffn_dim();
        let patch = self.patch_len() * d + d;
        let time = self.freq_dim * d + d + d * d + d;
        let text = self.cross_attention.map_or(0, |t| t.dim * d + d);
        let modulation = match self.adaln {
            AdaLnMode::PerBlock => self.depth * (d * 6 * d + 6 * d),
            AdaLnMode::Single => d * 6 * d + 6 * d + self.depth * 6 * d,
        };
        let attn = 4 * d * d + 4 * d;
        let cross = if self.cross_attention.is_some() {
            4 * d * d + 4 * d
        } else {
            0
        };
        let ffn = 2 * d * h + h + d;
        patch + time + text + modulation + self.depth * (attn + cross + ffn)
    }

    /// Closed-form parameter count of the full velocity network.
    pub fn param_count(&self) -> usize {
        let d = self.hidden_dim;
        let p = self.patch_len();
        self.backbone_param_count() + (d * 2 * d + 2 * d) + (d * p + p)
    }
}

/// `[cos(τ·f_i), sin(τ·f_i)]` with `τ = 1000·t` and geometric frequencies
/// `f_i = 10000^(-i/(dim/2))`.
pub fn sinusoidal_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("embedding width {dim} must be even")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(MAX_PERIOD.ln()) * i as f64 / half as f64).exp();
        let a = TIME_SCALE * t * f;
        out[i] = a.cos();
        out[half + i] = a.sin();
    }
    Ok(out)
}

fn sincos_1d(dim: usize, pos: f64, out: &mut [f64]) {
    let half = dim / 2;
    for i in 0..half {
        let omega = 1.0 / MAX_PERIOD.powf(i as f64 / half as f64);
        out[i] = (pos * omega).sin();
        out[half + i] = (pos * omega).cos();
    }
}

/// Fixed `[tokens, D]` table: first half encodes the patch row, second half the column.
pub fn positional_table(config: &DenoiserConfig) -> Tensor {
    let d = config.hidden_dim;
    let (gh, gw) = config.grid();
    let mut t = Tensor::zeros(&[gh * gw, d]);
    for r in 0..gh {
        for c in 0..gw {
            let row = &mut t.data_mut()[(r * gw + c) * d..(r * gw + c + 1) * d];
            sincos_1d(d / 2, r as f64, &mut row[..d / 2]);
            sincos_1d(d / 2, c as f64, &mut row[d / 2..]);
        }
    }
    t
}

/// `[B, C·H·W]` latents → `[B·T, p·p·C]` patch rows (grid row-major,
/// patch entries ordered channel, row, column).
pub fn patchify(config: &DenoiserConfig, x: &Tensor) -> Result<Tensor> {
    let n = config.latent_len();
    if !x.len().is_multiple_of(n) || x.is_empty() {
        return Err(Error::contract(
            "patchify",
            format!(
                "input shape {:?} is not a batch of {}x{}x{} latents",
                x.shape(),
                config.channels,
                config.height,
                config.width
            ),
        ));
    }
    let b = x.len() / n;
    let (p, c, h, w) = (config.patch_size, config.channels, config.height, config.width);
    let (gh, gw) = config.grid();
    let pl = config.patch_len();
    let mut out = vec![0.0; b * gh * gw * pl];
    let src = x.data();
    for s in 0..b {
        for gr in 0..gh {
            for gc in 0..gw {
                let tok = (s * gh * gw + gr * gw + gc) * pl;
                let mut k = 0;
                for ch in 0..c {
                    for i in 0..p {
                        for j in 0..p {
                            out[tok + k] = src[s * n + ch * h * w + (gr * p + i) * w + gc * p + j];
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[b * gh * gw, pl], out)
}

/// Inverse of [`patchify`]; returns `[B, C, H, W]`.
pub fn unpatchify(config: &DenoiserConfig, tokens: &Tensor) -> Result<Tensor> {
    let t = config.tokens();
    let pl = config.patch_len();
    if tokens.cols() != pl || !tokens.rows().is_multiple_of(t) {
        return Err(Error::contract(
            "unpatchify",
            format!(
                "token matrix {:?} does not match {t} tokens of width {pl}",
                tokens.shape()
            ),
        ));
    }
    let b = tokens.rows() / t;
    let (p, c, h, w) = (config.patch_size, config.channels, config.height, config.width);
    let (gh, gw) = config.grid();
    let n = config.latent_len();
    let mut out = vec![0.0; b * n];
    let src = tokens.data();
    for s in 0..b {
        for gr in 0..gh {
            for gc in 0..gw {
                let tok = (s * gh * gw + gr * gw + gc) * pl;
                let mut k = 0;
                for ch in 0..c {
                    for i in 0..p {
                        for j in 0..p {
                            out[s * n + ch * h * w + (gr * p + i) * w + gc * p + j] = src[tok + k];
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[b, c, h, w], out)
}

/// Deterministic stand-in for a frozen text encoder: `[tokens, dim]` normals
/// keyed by the label.
pub fn synthetic_text_embedding(label: &str, text: TextConfig) -> Tensor {
    let mut s = RngStream::new(label_hash("text-embedding"), label_hash(label));
    gaussian(&mut s, &[text.tokens, text.dim])
}

/// `gamma ⊙ LayerNorm(h) + beta`; `gamma`/`beta` rows broadcast over
/// consecutive groups of `h` rows.
pub fn adaln_modulate(g: &mut Graph, h: Var, gamma: Var, beta: Var) -> Result<Var> {
    let rows = g.shape(h).0;
    if g.shape(gamma) != g.shape(beta) || g.shape(gamma).1 != g.shape(h).1 {
        return Err(Error::contract(
            "adaln_modulate",
            format!(
                "h {:?}, gamma {:?}, beta {:?}",
                g.shape(h),
                g.shape(gamma),
                g.shape(beta)
            ),
        ));
    }
    let n = g.layer_norm(h);
    let ge = g.expand_rows(gamma, rows, Expand::Repeat)?;
    let be = g.expand_rows(beta, rows, Expand::Repeat)?;
    let scaled = g.mul(n, ge)?;
    g.add(scaled, be)
}

fn linear(g: &mut Graph, p: &ParamVars, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    let y = g.matmul(x, w)?;
    let rows = g.shape(y).0;
    let be = g.expand_rows(b, rows, Expand::Tile)?;
    g.add(y, be)
}

/// Per-sample scaled dot-product attention. `q` is `[B·Tq, D]` with head
/// columns at `q_off`, keys/values `[B·Tk, ·]` at `k_off` / `v_off`.
#[allow(clippy::too_many_arguments)]
fn attention(
    g: &mut Graph,
    q: Var,
    q_off: usize,
    tq: usize,
    kv: Var,
    k_off: usize,
    v_off: usize,
    tk: usize,
    batch: usize,
    heads: usize,
    head_dim: usize,
) -> Result<Var> {
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut samples = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut per_head = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice(q, b * tq, tq, q_off + h * head_dim, head_dim)?;
            let kh = g.slice(kv, b * tk, tk, k_off + h * head_dim, head_dim)?;
            let vh = g.slice(kv, b * tk, tk, v_off + h * head_dim, head_dim)?;
            let s = g.matmul_t(qh, kh)?;
            let s = g.scale(s, scale);
            let a = g.softmax(s);
            per_head.push(g.matmul(a, vh)?);
        }
        samples.push(if heads == 1 {
            per_head[0]
        } else {
            g.concat_cols(&per_head)?
        });
    }
    if batch == 1 {
        Ok(samples[0])
    } else {
        g.concat_rows(&samples)
    }
}

/// Six `[B, D]` modulation vectors of one block.
pub struct Modulation {
    pub shift_attn: Var,
    pub scale_attn: Var,
    pub gate_attn: Var,
    pub shift_ffn: Var,
    pub scale_ffn: Var,
    pub gate_ffn: Var,
}

impl Modulation {
    /// Splits a `[B, 6D]` matrix in the order shift, scale, gate (attention)
    /// then shift, scale, gate (feed-forward).
    pub fn split(g: &mut Graph, m: Var, d: usize) -> Result<Self> {
        let b = g.shape(m).0;
        let mut parts = Vec::with_capacity(6);
        for i in 0..6 {
            parts.push(g.slice(m, 0, b, i * d, d)?);
        }
        Ok(Self {
            shift_attn: parts[0],
            scale_attn: parts[1],
            gate_attn: parts[2],
            shift_ffn: parts[3],
            scale_ffn: parts[4],
            gate_ffn: parts[5],
        })
    }
}

/// Intermediate conditioning shared by all blocks of one forward pass.
pub struct Conditioning {
    /// `c = τ(t)`, `[B, D]`.
    pub c: Var,
    /// `[B, 6D]` per block.
    pub block_mods: Vec<Var>,
    /// Projected text tokens `[B·S, D]`, when cross-attention is configured.
    pub text: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamSet,
}

fn xavier(stream: &mut RngStream, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(&[fan_in, fan_out]);
    t.data_mut().iter_mut().for_each(|v| *v = stream.uniform(-bound, bound));
    t
}

fn normal_init(stream: &mut RngStream, shape: &[usize], std: f64) -> Tensor {
    gaussian(stream, shape).scale(std)
}

/// Backbone parameters (everything before the output head).
pub(crate) fn init_backbone(config: &DenoiserConfig, stream: &RngStream) -> Result<ParamSet> {
    config.validate()?;
    let d = config.hidden_dim;
    let h = config.ffn_dim();
    let mut p = ParamSet::new();
    let s = |name: &str| stream.derive(name);
    p.push("patch.weight", xavier(&mut s("patch.weight"), config.patch_len(), d));
    p.push("patch.bias", Tensor::zeros(&[d]));
    p.push(
        "time.fc1.weight",
        normal_init(&mut s("time.fc1.weight"), &[config.freq_dim, d], 0.02),
    );
    p.push("time.fc1.bias", Tensor::zeros(&[d]));
    p.push("time.fc2.weight", normal_init(&mut s("time.fc2.weight"), &[d, d], 0.02));
    p.push("time.fc2.bias", Tensor::zeros(&[d]));
    if let Some(tc) = config.cross_attention {
        p.push("text.weight", xavier(&mut s("text.weight"), tc.dim, d));
        p.push("text.bias", Tensor::zeros(&[d]));
    }
    if config.adaln == AdaLnMode::Single {
        p.push("adaln.global.weight", Tensor::zeros(&[d, 6 * d]));
        p.push("adaln.global.bias", Tensor::zeros(&[6 * d]));
        p.push("adaln.blocks", Tensor::zeros(&[config.depth, 6 * d]));
    }
    for l in 0..config.depth {
        let pre = format!("blocks.{l}");
        if config.adaln == AdaLnMode::PerBlock {
            p.push(format!("{pre}.adaln.weight"), Tensor::zeros(&[d, 6 * d]));
            p.push(format!("{pre}.adaln.bias"), Tensor::zeros(&[6 * d]));
        }
        let lin = |p: &mut ParamSet, name: String, i: usize, o: usize| {
            p.push(
                format!("{name}.weight"),
                xavier(&mut s(&format!("{name}.weight")), i, o),
            );
            p.push(format!("{name}.bias"), Tensor::zeros(&[o]));
        };
        lin(&mut p, format!("{pre}.attn.qkv"), d, 3 * d);
        lin(&mut p, format!("{pre}.attn.out"), d, d);
        if config.cross_attention.is_some() {
            lin(&mut p, format!("{pre}.cross.q"), d, d);
            lin(&mut p, format!("{pre}.cross.kv"), d, 2 * d);
            lin(&mut p, format!("{pre}.cross.out"), d, d);
        }
        lin(&mut p, format!("{pre}.ffn.fc1"), d, h);
        lin(&mut p, format!("{pre}.ffn.fc2"), h, d);
    }
    Ok(p)
}

fn check_batch(config: &DenoiserConfig, x: &Tensor, ts: &[f64]) -> Result<usize> {
    let n = config.latent_len();
    if x.is_empty() || !x.len().is_multiple_of(n) || x.len() / n != ts.len() {
        return Err(Error::contract(
            "denoiser",
            format!(
                "input {:?} with {} timesteps does not match latent {}x{}x{}",
                x.shape(),
                ts.len(),
                config.channels,
                config.height,
                config.width
            ),
        ));
    }
    if let Some(&bad) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Range {
            op: "denoiser",
            value: bad,
            range: "[0, 1]",
        });
    }
    Ok(ts.len())
}

/// Embeds patches and positions: `[B·T, D]`.
pub(crate) fn embed_tokens(g: &mut Graph, config: &DenoiserConfig, p: &ParamVars, x: &Tensor) -> Result<Var> {
    let patches = patchify(config, x)?;
    let rows = patches.rows();
    let pv = g.constant(patches);
    let h = linear(g, p, "patch", pv)?;
    let pos = g.constant(positional_table(config));
    let pos = g.expand_rows(pos, rows, Expand::Tile)?;
    g.add(h, pos)
}

/// `τ(t)`: frequency features → linear → GELU → linear, `[B, D]`.
pub(crate) fn time_embedding(g: &mut Graph, config: &DenoiserConfig, p: &ParamVars, ts: &[f64]) -> Result<Var> {
    let mut feats = Vec::with_capacity(ts.len() * config.freq_dim);
    for &t in ts {
        feats.extend(sinusoidal_embed(t, config.freq_dim)?);
    }
    let f = g.constant(Tensor::new(&[ts.len(), config.freq_dim], feats)?);
    let h = linear(g, p, "time.fc1", f)?;
    let h = g.gelu(h);
    linear(g, p, "time.fc2", h)
}

/// Per-block `[B, 6D]` modulation for per-block mode.
fn per_block_params(g: &mut Graph, config: &DenoiserConfig, p: &ParamVars, c_act: Var) -> Result<Vec<Var>> {
    (0..config.depth)
        .map(|l| linear(g, p, &format!("blocks.{l}.adaln"), c_act))
        .collect()
}

/// Global projection of the conditioning plus the learned per-block table.
pub fn adaln_single_params(g: &mut Graph, config: &DenoiserConfig, p: &ParamVars, c: Var) -> Result<Vec<Var>> {
    if config.adaln != AdaLnMode::Single {
        return Err(Error::contract(
            "adaln_single_params",
            "model is configured with per-block modulation",
        ));
    }
    let b = g.shape(c).0;
    let c_act = g.gelu(c);
    let global = linear(g, p, "adaln.global", c_act)?;
    let table = p.get("adaln.blocks")?;
    let six_d = 6 * config.hidden_dim;
    (0..config.depth)
        .map(|l| {
            let row = g.slice(table, l, 1, 0, six_d)?;
            let row = g.expand_rows(row, b, Expand::Tile)?;
            g.add(global, row)
        })
        .collect()
}

pub(crate) fn conditioning(
    g: &mut Graph,
    config: &DenoiserConfig,
    p: &ParamVars,
    ts: &[f64],
    text: Option<&Tensor>,
) -> Result<Conditioning> {
    let c = time_embedding(g, config, p, ts)?;
    let block_mods = match config.adaln {
        AdaLnMode::PerBlock => {
            let c_act = g.gelu(c);
            per_block_params(g, config, p, c_act)?
        }
        AdaLnMode::Single => adaln_single_params(g, config, p, c)?,
    };
    let text = match (config.cross_attention, text) {
        (None, None) => None,
        (Some(tc), Some(e)) => {
            if e.len() != ts.len() * tc.tokens * tc.dim {
                return Err(Error::contract(
                    "block_forward",
                    format!(
                        "text embedding {:?} does not match {} samples of {}x{}",
                        e.shape(),
                        ts.len(),
                        tc.tokens,
                        tc.dim
                    ),
                ));
            }
            let ev = g.constant(e.clone().reshape(&[ts.len() * tc.tokens, tc.dim])?);
            Some(linear(g, p, "text", ev)?)
        }
        (None, Some(_)) => {
            return Err(Error::contract(
                "block_forward",
                "text embedding given but cross-attention is not configured",
            ))
        }
        (Some(_), None) => {
            return Err(Error::contract(
                "block_forward",
                "cross-attention is configured but no text embedding was given",
            ))
        }
    };
    Ok(Conditioning { c, block_mods, text })
}

fn gated_residual(g: &mut Graph, h: Var, gate: Var, branch: Var) -> Result<Var> {
    let rows = g.shape(h).0;
    let ge = g.expand_rows(gate, rows, Expand::Repeat)?;
    let gb = g.mul(ge, branch)?;
    g.add(h, gb)
}

/// Modulated normalization with `gamma = 1 + scale`.
fn modulate(g: &mut Graph, h: Var, shift: Var, scale: Var) -> Result<Var> {
    let (b, d) = g.shape(scale);
    let ones = g.constant(Tensor::full(&[b, d], 1.0));
    let gamma = g.add(ones, scale)?;
    adaln_modulate(g, h, gamma, shift)
}

/// One residual block on `[B·T, D]` tokens.
///
/// Self-attention, optional cross-attention and feed-forward branches each see
/// modulated normalized inputs and are added back through their gate.
/// Cross-attention reuses the attention shift/scale/gate triple.
pub fn block_forward(
    g: &mut Graph,
    config: &DenoiserConfig,
    p: &ParamVars,
    layer: usize,
    h: Var,
    mods: Var,
    text: Option<Var>,
) -> Result<Var> {
    if text.is_some() != config.cross_attention.is_some() {
        return Err(Error::contract(
            "block_forward",
            "text embedding presence does not match the cross-attention setting",
        ));
    }
    let d = config.hidden_dim;
    let t = config.tokens();
    let batch = g.shape(h).0 / t;
    let (heads, hd) = (config.heads, config.head_dim());
    let m = Modulation::split(g, mods, d)?;
    let pre = format!("blocks.{layer}");

    let x = modulate(g, h, m.shift_attn, m.scale_attn)?;
    let qkv = linear(g, p, &format!("{pre}.attn.qkv"), x)?;
    let a = attention(g, qkv, 0, t, qkv, d, 2 * d, t, batch, heads, hd)?;
    let a = linear(g, p, &format!("{pre}.attn.out"), a)?;
    let mut h = gated_residual(g, h, m.gate_attn, a)?;

    if let (Some(e), Some(tc)) = (text, config.cross_attention) {
        let x = modulate(g, h, m.shift_attn, m.scale_attn)?;
        let q = linear(g, p, &format!("{pre}.cross.q"), x)?;
        let kv = linear(g, p, &format!("{pre}.cross.kv"), e)?;
        let a = attention(g, q, 0, t, kv, 0, d, tc.tokens, batch, heads, hd)?;
        let a = linear(g, p, &format!("{pre}.cross.out"), a)?;
        h = gated_residual(g, h, m.gate_attn, a)?;
    }

    let x = modulate(g, h, m.shift_ffn, m.scale_ffn)?;
    let f = linear(g, p, &format!("{pre}.ffn.fc1"), x)?;
    let f = g.gelu(f);
    let f = linear(g, p, &format!("{pre}.ffn.fc2"), f)?;
    gated_residual(g, h, m.gate_ffn, f)
}

/// Embedding plus all blocks; returns final tokens and the conditioning.
pub(crate) fn backbone(
    g: &mut Graph,
    config: &DenoiserConfig,
    p: &ParamVars,
    x: &Tensor,
    ts: &[f64],
    text: Option<&Tensor>,
) -> Result<(Var, Conditioning)> {
    check_batch(config, x, ts)?;
    let mut h = embed_tokens(g, config, p, x)?;
    let cond = conditioning(g, config, p, ts, text)?;
    for (l, &mods) in cond.block_mods.iter().enumerate() {
        h = block_forward(g, config, p, l, h, mods, cond.text)?;
    }
    Ok((h, cond))
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, stream: &RngStream) -> Result<Self> {
        let mut params = init_backbone(&config, stream)?;
        let d = config.hidden_dim;
        params.push("final.adaln.weight", Tensor::zeros(&[d, 2 * d]));
        params.push("final.adaln.bias", Tensor::zeros(&[2 * d]));
        params.push("final.linear.weight", Tensor::zeros(&[d, config.patch_len()]));
        params.push("final.linear.bias", Tensor::zeros(&[config.patch_len()]));
        Ok(Self { config, params })
    }

    pub fn from_params(config: DenoiserConfig, params: ParamSet) -> Result<Self> {
        let reference = Self::new(config.clone(), &RngStream::new(0, 0))?;
        reference.params.check_layout(&params, "denoiser")?;
        Ok(Self { config, params })
    }

    /// Token-space velocity `[B·T, p·p·C]` built into `g`.
    pub fn build(&self, g: &mut Graph, p: &ParamVars, x: &Tensor, ts: &[f64], text: Option<&Tensor>) -> Result<Var> {
        let (h, cond) = backbone(g, &self.config, p, x, ts, text)?;
        let d = self.config.hidden_dim;
        let b = ts.len();
        let c_act = g.gelu(cond.c);
        let fm = linear(g, p, "final.adaln", c_act)?;
        let shift = g.slice(fm, 0, b, 0, d)?;
        let scale = g.slice(fm, 0, b, d, d)?;
        let x = modulate(g, h, shift, scale)?;
        linear(g, p, "final.linear", x)
    }

    /// Predicted velocity for a batch `[B, C, H, W]` (or `[B, C·H·W]`).
    pub fn forward(&self, x: &Tensor, ts: &[f64], text: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.load(&mut g, false);
        let out = self.build(&mut g, &p, x, ts, text)?;
        let v = unpatchify(&self.config, g.value(out))?;
        v.reshape(x.shape())
    }
}
