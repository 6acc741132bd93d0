//! Decoder-only transformer with per-layer hidden-state capture and
//! intervention hook points.
//!
//! Architecture: learned absolute position embeddings, pre-norm residual
//! blocks with RMS normalization, multi-head causal attention, GELU
//! feedforward, a final pre-unembedding RMS norm, and untied input/output
//! embeddings by default.
//!
//! The residual stream after block `l` is `states[l]` of a [`HiddenTrace`];
//! index 0 is the post-embedding state, so traces have `n_layers + 1`
//! entries per position.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{HubError, Result};
use crate::rng;
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub ff_mult: usize,
    pub rms_eps: f32,
    pub tied_embeddings: bool,
}

impl ModelConfig {
    /// Desk-scale default: trains in minutes on CPU while keeping distinct
    /// early/middle/late layer regimes.
    pub fn desk_default(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 8,
            d_model: 128,
            n_heads: 4,
            vocab_size,
            max_seq_len: 64,
            ff_mult: 4,
            rms_eps: 1e-5,
            tied_embeddings: false,
        }
    }

    /// Tiny configuration for smoke tests and examples.
    pub fn smoke(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            vocab_size,
            max_seq_len: 64,
            ff_mult: 2,
            rms_eps: 1e-5,
            tied_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            return Err(HubError::usage(
                "n_layers must be >= 2 (distinct middle and final layers)",
            ));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(HubError::usage(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 || self.ff_mult == 0 {
            return Err(HubError::usage("zero-sized model dimension"));
        }
        Ok(())
    }

    pub fn ff_dim(&self) -> usize {
        self.d_model * self.ff_mult
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub attn_norm: Vec<f32>,
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub ffn_norm: Vec<f32>,
    pub w1: Vec<f32>,
    pub w2: Vec<f32>,
}

/// All trainable arrays. `unembed` is empty when embeddings are tied.
#[derive(Debug, Clone)]
pub struct Parameters {
    pub embed: Vec<f32>,
    pub pos: Vec<f32>,
    pub unembed: Vec<f32>,
    pub layers: Vec<LayerParams>,
    pub final_norm: Vec<f32>,
}

impl Parameters {
    /// Gaussian init (std 0.02), residual-output projections scaled down by
    /// `1/sqrt(2·n_layers)`, norm weights at one.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut r = rng::stream(seed, "model/init");
        let d = cfg.d_model;
        let ff = cfg.ff_dim();
        let mut take = |n: usize, std: f32| -> Vec<f32> {
            (0..n).map(|_| rng::normal_f32(&mut r) * std).collect()
        };
        let out_std = 0.02 / (2.0 * cfg.n_layers as f32).sqrt();
        let embed = take(cfg.vocab_size * d, 0.02);
        let pos = take(cfg.max_seq_len * d, 0.02);
        let unembed = if cfg.tied_embeddings {
            Vec::new()
        } else {
            take(cfg.vocab_size * d, 0.02)
        };
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                attn_norm: vec![1.0; d],
                wq: take(d * d, 0.02),
                wk: take(d * d, 0.02),
                wv: take(d * d, 0.02),
                wo: take(d * d, out_std),
                ffn_norm: vec![1.0; d],
                w1: take(d * ff, 0.02),
                w2: take(ff * d, out_std),
            })
            .collect();
        Parameters {
            embed,
            pos,
            unembed,
            layers,
            final_norm: vec![1.0; d],
        }
    }

    /// Rows of the unembedding matrix (aliases the embedding when tied).
    pub fn unembedding(&self) -> &[f32] {
        if self.unembed.is_empty() {
            &self.embed
        } else {
            &self.unembed
        }
    }

    pub fn unembedding_row(&self, cfg: &ModelConfig, token: u32) -> &[f32] {
        let d = cfg.d_model;
        &self.unembedding()[token as usize * d..(token as usize + 1) * d]
    }

    /// Named views over every array, in checkpoint order.
    pub fn named(&self, cfg: &ModelConfig) -> Vec<(String, &[f32], Vec<usize>)> {
        let d = cfg.d_model;
        let ff = cfg.ff_dim();
        let mut out: Vec<(String, &[f32], Vec<usize>)> = vec![(
            "embed".into(),
            &self.embed[..],
            vec![cfg.vocab_size, d],
        )];
        out.push(("pos".into(), &self.pos[..], vec![cfg.max_seq_len, d]));
        if !cfg.tied_embeddings {
            out.push(("unembed".into(), &self.unembed[..], vec![cfg.vocab_size, d]));
        }
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.attn_norm"), &l.attn_norm[..], vec![d]));
            out.push((format!("layer{i}.wq"), &l.wq[..], vec![d, d]));
            out.push((format!("layer{i}.wk"), &l.wk[..], vec![d, d]));
            out.push((format!("layer{i}.wv"), &l.wv[..], vec![d, d]));
            out.push((format!("layer{i}.wo"), &l.wo[..], vec![d, d]));
            out.push((format!("layer{i}.ffn_norm"), &l.ffn_norm[..], vec![d]));
            out.push((format!("layer{i}.w1"), &l.w1[..], vec![d, ff]));
            out.push((format!("layer{i}.w2"), &l.w2[..], vec![ff, d]));
        }
        out.push(("final_norm".into(), &self.final_norm[..], vec![d]));
        out
    }

    /// Mutable references in the same order as [`Parameters::named`].
    pub fn named_mut(&mut self, cfg: &ModelConfig) -> Vec<&mut Vec<f32>> {
        let mut out: Vec<&mut Vec<f32>> = vec![&mut self.embed, &mut self.pos];
        if !cfg.tied_embeddings {
            out.push(&mut self.unembed);
        }
        for l in &mut self.layers {
            out.push(&mut l.attn_norm);
            out.push(&mut l.wq);
            out.push(&mut l.wk);
            out.push(&mut l.wv);
            out.push(&mut l.wo);
            out.push(&mut l.ffn_norm);
            out.push(&mut l.w1);
            out.push(&mut l.w2);
        }
        out.push(&mut self.final_norm);
        out
    }
}

/// Per-layer, per-position hidden states from one forward pass.
///
/// `states[0]` is the post-embedding state; `states[l]` for `l >= 1` is the
/// residual stream after block `l`. Each entry is a `[T × d]` buffer.
#[derive(Debug, Clone)]
pub struct HiddenTrace {
    pub states: Vec<Vec<f32>>,
    pub tokens: Vec<u32>,
    pub d_model: usize,
}

impl HiddenTrace {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    /// Residual-stream vector at (layer, position).
    pub fn state(&self, layer: usize, pos: usize) -> &[f32] {
        &self.states[layer][pos * self.d_model..(pos + 1) * self.d_model]
    }

    pub fn n_points(&self) -> usize {
        self.states.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HookMode {
    Add,
    Replace,
}

/// One intervention directive: at `layer` (1-based residual index, i.e. the
/// stream after that block), for each listed position, either add
/// `coefficient * vector` to the hidden state or replace it with
/// `coefficient * vector`.
#[derive(Debug, Clone)]
pub struct HookDirective {
    pub layer: usize,
    pub positions: Vec<usize>,
    pub vector: Vec<f32>,
    pub coefficient: f32,
    pub mode: HookMode,
}

/// Ordered list of directives, applied in sequence.
#[derive(Debug, Clone, Default)]
pub struct HookSet {
    pub directives: Vec<HookDirective>,
}

impl HookSet {
    pub fn empty() -> Self {
        HookSet::default()
    }

    pub fn is_empty(&self) -> bool {
        self.directives.is_empty()
    }

    pub fn push(&mut self, d: HookDirective) {
        self.directives.push(d);
    }

    pub fn validate(&self, cfg: &ModelConfig, seq_len: usize) -> Result<()> {
        for d in &self.directives {
            if d.layer < 1 || d.layer > cfg.n_layers {
                return Err(HubError::usage(format!(
                    "hook layer {} outside [1, {}]",
                    d.layer, cfg.n_layers
                )));
            }
            if d.vector.len() != cfg.d_model {
                return Err(HubError::shape(format!(
                    "hook vector has {} entries, d_model is {}",
                    d.vector.len(),
                    cfg.d_model
                )));
            }
            if !d.coefficient.is_finite() {
                return Err(HubError::usage("hook coefficient must be finite"));
            }
            if let Some(&p) = d.positions.iter().find(|&&p| p >= seq_len) {
                return Err(HubError::usage(format!(
                    "hook position {p} outside sequence of length {seq_len}"
                )));
            }
        }
        Ok(())
    }
}

/// Parameter handles bound onto a graph, either as constants (inference) or
/// as gradient-tracked leaves (training).
pub struct BoundParams {
    pub embed: Tensor,
    pub pos: Tensor,
    pub unembed: Tensor,
    layers: Vec<BoundLayer>,
    pub final_norm: Tensor,
    flat: Vec<Tensor>,
}

struct BoundLayer {
    attn_norm: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    ffn_norm: Tensor,
    w1: Tensor,
    w2: Tensor,
}

impl BoundParams {
    /// Handles in [`Parameters::named`] order, for gradient readout.
    pub fn flat(&self) -> &[Tensor] {
        &self.flat
    }
}

pub fn bind_params(
    g: &mut Graph,
    params: &Parameters,
    cfg: &ModelConfig,
    trainable: bool,
) -> Result<BoundParams> {
    let mut flat = Vec::new();
    let mut bind = |g: &mut Graph, data: &[f32], shape: &[usize]| -> Result<Tensor> {
        let t = if trainable {
            g.param(data, shape)?
        } else {
            g.constant(data.to_vec(), shape)?
        };
        flat.push(t);
        Ok(t)
    };
    let d = cfg.d_model;
    let ff = cfg.ff_dim();
    let embed = bind(g, &params.embed, &[cfg.vocab_size, d])?;
    let pos = bind(g, &params.pos, &[cfg.max_seq_len, d])?;
    let unembed = if cfg.tied_embeddings {
        embed
    } else {
        bind(g, &params.unembed, &[cfg.vocab_size, d])?
    };
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in &params.layers {
        layers.push(BoundLayer {
            attn_norm: bind(g, &l.attn_norm, &[d])?,
            wq: bind(g, &l.wq, &[d, d])?,
            wk: bind(g, &l.wk, &[d, d])?,
            wv: bind(g, &l.wv, &[d, d])?,
            wo: bind(g, &l.wo, &[d, d])?,
            ffn_norm: bind(g, &l.ffn_norm, &[d])?,
            w1: bind(g, &l.w1, &[d, ff])?,
            w2: bind(g, &l.w2, &[ff, d])?,
        });
    }
    let final_norm = bind(g, &params.final_norm, &[d])?;
    Ok(BoundParams {
        embed,
        pos,
        unembed,
        layers,
        final_norm,
        flat,
    })
}

fn check_tokens(cfg: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(HubError::usage("empty token sequence"));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(HubError::usage(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| (t as usize) >= cfg.vocab_size) {
        return Err(HubError::index(format!(
            "token id {bad} >= vocab size {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// Build the forward computation for several sequences of equal length `T`
/// on one tape. Returns the `[B·T × V]` logits and, when requested, the
/// per-layer residual handles (`n_layers + 1` of them, each `[B·T × d]`).
///
/// Hooks apply to the residual stream after their layer's block, before the
/// next block, and only to the first sequence (hooked forward passes are
/// single-sequence in practice).
pub fn build_forward(
    g: &mut Graph,
    bound: &BoundParams,
    cfg: &ModelConfig,
    sequences: &[&[u32]],
    hooks: Option<&HookSet>,
    capture: bool,
) -> Result<(Tensor, Vec<Tensor>)> {
    if sequences.is_empty() {
        return Err(HubError::usage("no sequences"));
    }
    let t_len = sequences[0].len();
    for s in sequences {
        if s.len() != t_len {
            return Err(HubError::usage("sequences in one batch must share a length"));
        }
        check_tokens(cfg, s)?;
    }
    if let Some(h) = hooks {
        if sequences.len() != 1 {
            return Err(HubError::usage("hooked forward passes take one sequence"));
        }
        h.validate(cfg, t_len)?;
    }
    let b = sequences.len();
    let mut all_tokens = Vec::with_capacity(b * t_len);
    let mut pos_ids = Vec::with_capacity(b * t_len);
    for s in sequences {
        all_tokens.extend_from_slice(s);
        pos_ids.extend(0..t_len as u32);
    }

    let tok_e = g.gather_rows(bound.embed, &all_tokens)?;
    let pos_e = g.gather_rows(bound.pos, &pos_ids)?;
    let mut h = g.add(tok_e, pos_e)?;
    let mut trace = Vec::new();
    if capture {
        trace.push(h);
    }

    for (li, layer) in bound.layers.iter().enumerate() {
        let x = g.rms_norm(h, layer.attn_norm, cfg.rms_eps)?;
        let q = g.matmul(x, layer.wq)?;
        let k = g.matmul(x, layer.wk)?;
        let v = g.matmul(x, layer.wv)?;
        let attn = if b == 1 {
            g.causal_attention(q, k, v, cfg.n_heads)?
        } else {
            let mut parts = Vec::with_capacity(b);
            for s in 0..b {
                let qs = g.slice_rows(q, s * t_len, t_len)?;
                let ks = g.slice_rows(k, s * t_len, t_len)?;
                let vs = g.slice_rows(v, s * t_len, t_len)?;
                parts.push(g.causal_attention(qs, ks, vs, cfg.n_heads)?);
            }
            g.concat_rows(&parts)?
        };
        let proj = g.matmul(attn, layer.wo)?;
        h = g.add(h, proj)?;
        let x2 = g.rms_norm(h, layer.ffn_norm, cfg.rms_eps)?;
        let up = g.matmul(x2, layer.w1)?;
        let act = g.gelu(up)?;
        let down = g.matmul(act, layer.w2)?;
        h = g.add(h, down)?;
        if let Some(hs) = hooks {
            h = apply_hooks_at_layer(g, h, hs, li + 1, t_len, cfg.d_model)?;
        }
        if capture {
            trace.push(h);
        }
    }

    let normed = g.rms_norm(h, bound.final_norm, cfg.rms_eps)?;
    let logits = g.matmul_nt(normed, bound.unembed)?;
    Ok((logits, trace))
}

fn apply_hooks_at_layer(
    g: &mut Graph,
    h: Tensor,
    hooks: &HookSet,
    layer: usize,
    t_len: usize,
    d: usize,
) -> Result<Tensor> {
    let mut out = h;
    for dir in hooks.directives.iter().filter(|d| d.layer == layer) {
        match dir.mode {
            HookMode::Add => {
                let mut patch = vec![0.0f32; t_len * d];
                for &p in &dir.positions {
                    for (slot, &v) in patch[p * d..(p + 1) * d].iter_mut().zip(&dir.vector) {
                        *slot += dir.coefficient * v;
                    }
                }
                let patch = g.constant(patch, &[t_len, d])?;
                out = g.add(out, patch)?;
            }
            HookMode::Replace => {
                let mut mask = vec![1.0f32; t_len * d];
                let mut patch = vec![0.0f32; t_len * d];
                for &p in &dir.positions {
                    mask[p * d..(p + 1) * d].fill(0.0);
                    for (slot, &v) in patch[p * d..(p + 1) * d].iter_mut().zip(&dir.vector) {
                        *slot = dir.coefficient * v;
                    }
                }
                let mask = g.constant(mask, &[t_len, d])?;
                let patch = g.constant(patch, &[t_len, d])?;
                let kept = g.mul(out, mask)?;
                out = g.add(kept, patch)?;
            }
        }
    }
    Ok(out)
}

/// Forward pass over one sequence, returning logits and the full trace.
pub fn forward_with_trace(
    params: &Parameters,
    cfg: &ModelConfig,
    tokens: &[u32],
) -> Result<(Vec<f32>, HiddenTrace)> {
    let mut g = Graph::new();
    let bound = bind_params(&mut g, params, cfg, false)?;
    let (logits, trace) = build_forward(&mut g, &bound, cfg, &[tokens], None, true)?;
    let states = trace.iter().map(|&t| g.data(t).to_vec()).collect();
    Ok((
        g.data(logits).to_vec(),
        HiddenTrace {
            states,
            tokens: tokens.to_vec(),
            d_model: cfg.d_model,
        },
    ))
}

/// Forward pass with interventions applied; returns logits only.
pub fn forward_with_hooks(
    params: &Parameters,
    cfg: &ModelConfig,
    tokens: &[u32],
    hooks: &HookSet,
) -> Result<Vec<f32>> {
    let mut g = Graph::new();
    let bound = bind_params(&mut g, params, cfg, false)?;
    let (logits, _) = build_forward(&mut g, &bound, cfg, &[tokens], Some(hooks), false)?;
    Ok(g.data(logits).to_vec())
}

/// Hooked forward pass that also captures the (post-hook) trace.
pub fn forward_with_hooks_traced(
    params: &Parameters,
    cfg: &ModelConfig,
    tokens: &[u32],
    hooks: &HookSet,
) -> Result<(Vec<f32>, HiddenTrace)> {
    let mut g = Graph::new();
    let bound = bind_params(&mut g, params, cfg, false)?;
    let (logits, trace) = build_forward(&mut g, &bound, cfg, &[tokens], Some(hooks), true)?;
    let states = trace.iter().map(|&t| g.data(t).to_vec()).collect();
    Ok((
        g.data(logits).to_vec(),
        HiddenTrace {
            states,
            tokens: tokens.to_vec(),
            d_model: cfg.d_model,
        },
    ))
}

/// Greedy argmax over the last position, ties broken toward the smaller id.
pub fn argmax_token(row: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding. Hooks, when present, are re-applied at their absolute
/// positions on every decoding step.
pub fn generate_greedy(
    params: &Parameters,
    cfg: &ModelConfig,
    prompt: &[u32],
    max_new: usize,
    hooks: Option<&HookSet>,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(HubError::usage("empty prompt"));
    }
    if prompt.len() + max_new > cfg.max_seq_len {
        return Err(HubError::usage(format!(
            "prompt of {} plus {max_new} new tokens exceeds max_seq_len {}",
            prompt.len(),
            cfg.max_seq_len
        )));
    }
    let mut tokens = prompt.to_vec();
    let empty = HookSet::empty();
    let hooks = hooks.unwrap_or(&empty);
    for _ in 0..max_new {
        let logits = forward_with_hooks(params, cfg, &tokens, hooks)?;
        let v = cfg.vocab_size;
        let last = &logits[(tokens.len() - 1) * v..tokens.len() * v];
        tokens.push(argmax_token(last));
    }
    Ok(tokens)
}

// ── checkpoint io ───────────────────────────────────────────────────────
//
// Format: a textual header of `key=value` lines (the config), a blank line,
// then for each array a `name dim0 dim1 ...` line followed by raw
// little-endian f32 bytes. Round trips are bit-exact.

pub fn save_checkpoint(params: &Parameters, cfg: &ModelConfig, path: &Path) -> Result<()> {
    let ctx = || path.display().to_string();
    let file = std::fs::File::create(path).map_err(|e| HubError::io(ctx(), e))?;
    let mut w = BufWriter::new(file);
    let header = format!(
        "n_layers={}\nd_model={}\nn_heads={}\nvocab_size={}\nmax_seq_len={}\nff_mult={}\nrms_eps={}\ntied_embeddings={}\n\n",
        cfg.n_layers,
        cfg.d_model,
        cfg.n_heads,
        cfg.vocab_size,
        cfg.max_seq_len,
        cfg.ff_mult,
        cfg.rms_eps,
        cfg.tied_embeddings
    );
    w.write_all(header.as_bytes())
        .map_err(|e| HubError::io(ctx(), e))?;
    for (name, data, shape) in params.named(cfg) {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        writeln!(w, "{} {}", name, dims.join(" ")).map_err(|e| HubError::io(ctx(), e))?;
        for &v in data {
            w.write_all(&v.to_le_bytes())
                .map_err(|e| HubError::io(ctx(), e))?;
        }
    }
    w.flush().map_err(|e| HubError::io(ctx(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Parameters, ModelConfig)> {
    let ctx = || path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| HubError::io(ctx(), e))?;
    let mut r = BufReader::new(file);

    let mut header = std::collections::HashMap::new();
    loop {
        let mut line = String::new();
        let n = r.read_line(&mut line).map_err(|e| HubError::io(ctx(), e))?;
        if n == 0 {
            return Err(HubError::format(format!(
                "{}: truncated header",
                path.display()
            )));
        }
        let line = line.trim_end_matches('\n');
        if line.is_empty() {
            break;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            HubError::format(format!("{}: bad header line `{line}`", path.display()))
        })?;
        header.insert(k.to_string(), v.to_string());
    }
    fn get<T: std::str::FromStr>(
        header: &std::collections::HashMap<String, String>,
        key: &str,
        path: &Path,
    ) -> Result<T> {
        header
            .get(key)
            .ok_or_else(|| HubError::format(format!("{}: missing field {key}", path.display())))?
            .parse::<T>()
            .map_err(|_| HubError::format(format!("{}: bad value for {key}", path.display())))
    }
    let cfg = ModelConfig {
        n_layers: get(&header, "n_layers", path)?,
        d_model: get(&header, "d_model", path)?,
        n_heads: get(&header, "n_heads", path)?,
        vocab_size: get(&header, "vocab_size", path)?,
        max_seq_len: get(&header, "max_seq_len", path)?,
        ff_mult: get(&header, "ff_mult", path)?,
        rms_eps: get(&header, "rms_eps", path)?,
        tied_embeddings: get(&header, "tied_embeddings", path)?,
    };
    cfg.validate()?;

    let mut arrays = std::collections::HashMap::new();
    loop {
        let mut line = String::new();
        let n = r.read_line(&mut line).map_err(|e| HubError::io(ctx(), e))?;
        if n == 0 {
            break;
        }
        let line = line.trim_end_matches('\n');
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        let name = parts.next().unwrap().to_string();
        let shape: Vec<usize> = parts
            .map(|p| {
                p.parse::<usize>().map_err(|_| {
                    HubError::format(format!("{}: bad shape for array {name}", path.display()))
                })
            })
            .collect::<Result<_>>()?;
        let count: usize = shape.iter().product();
        let mut bytes = vec![0u8; count * 4];
        r.read_exact(&mut bytes).map_err(|_| {
            HubError::format(format!(
                "{}: truncated data for array {name}",
                path.display()
            ))
        })?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        arrays.insert(name, (data, shape));
    }

    let mut take = |name: &str, want: Vec<usize>| -> Result<Vec<f32>> {
        let (data, shape) = arrays.remove(name).ok_or_else(|| {
            HubError::format(format!("{}: missing array {name}", path.display()))
        })?;
        if shape != want {
            return Err(HubError::format(format!(
                "{}: array {name} has shape {shape:?}, expected {want:?}",
                path.display()
            )));
        }
        Ok(data)
    };
    let d = cfg.d_model;
    let ff = cfg.ff_dim();
    let embed = take("embed", vec![cfg.vocab_size, d])?;
    let pos = take("pos", vec![cfg.max_seq_len, d])?;
    let unembed = if cfg.tied_embeddings {
        Vec::new()
    } else {
        take("unembed", vec![cfg.vocab_size, d])?
    };
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        layers.push(LayerParams {
            attn_norm: take(&format!("layer{i}.attn_norm"), vec![d])?,
            wq: take(&format!("layer{i}.wq"), vec![d, d])?,
            wk: take(&format!("layer{i}.wk"), vec![d, d])?,
            wv: take(&format!("layer{i}.wv"), vec![d, d])?,
            wo: take(&format!("layer{i}.wo"), vec![d, d])?,
            ffn_norm: take(&format!("layer{i}.ffn_norm"), vec![d])?,
            w1: take(&format!("layer{i}.w1"), vec![d, ff])?,
            w2: take(&format!("layer{i}.w2"), vec![ff, d])?,
        });
    }
    let final_norm = take("final_norm", vec![d])?;
    if let Some(extra) = arrays.keys().next() {
        return Err(HubError::format(format!(
            "{}: unexpected array {extra}",
            path.display()
        )));
    }
    Ok((
        Parameters {
            embed,
            pos,
            unembed,
            layers,
            final_norm,
        },
        cfg,
    ))
}
