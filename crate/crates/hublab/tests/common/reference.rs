//! f64 re-implementations of every differentiable operation and of the full
//! transformer forward pass, written as plain loops with no shared code with
//! the production kernels. Finite differences on these functions are the
//! ground truth the f32 autograd is checked against.

use hublab::model::{ModelConfig, Parameters};

pub fn ref_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for kk in 0..k {
                s += a[i * k + kk] * b[kk * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

pub fn ref_matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for kk in 0..k {
                s += a[i * k + kk] * b[j * k + kk];
            }
            c[i * n + j] = s;
        }
    }
    c
}

pub fn ref_softmax(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = x.to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut m = f64::NEG_INFINITY;
            for j in 0..n {
                m = m.max(x[base + j * inner]);
            }
            let mut z = 0.0;
            for j in 0..n {
                z += (x[base + j * inner] - m).exp();
            }
            for j in 0..n {
                out[base + j * inner] = (x[base + j * inner] - m).exp() / z;
            }
        }
    }
    out
}

pub fn ref_rms_norm(x: &[f64], w: &[f64], d: usize, eps: f64) -> Vec<f64> {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        for i in 0..d {
            out[r * d + i] = w[i] * row[i] * inv;
        }
    }
    out
}

pub fn ref_gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn ref_cross_entropy(logits: &[f64], targets: &[u32], v: usize) -> f64 {
    let t_len = targets.len();
    let mut total = 0.0;
    for t in 0..t_len {
        let row = &logits[t * v..(t + 1) * v];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        total += lse - row[targets[t] as usize];
    }
    total / t_len as f64
}

pub fn ref_causal_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    t_len: usize,
    d: usize,
    n_heads: usize,
) -> Vec<f64> {
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; t_len * d];
    for h in 0..n_heads {
        let col = h * hd;
        for t in 0..t_len {
            let mut scores = vec![0.0; t + 1];
            for (j, slot) in scores.iter_mut().enumerate() {
                let mut s = 0.0;
                for c in 0..hd {
                    s += q[t * d + col + c] * k[j * d + col + c];
                }
                *slot = s * scale;
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for j in 0..=t {
                let p = (scores[j] - m).exp() / z;
                for c in 0..hd {
                    out[t * d + col + c] += p * v[j * d + col + c];
                }
            }
        }
    }
    out
}

/// f64 mirror of the whole model, with parameters stored in
/// [`Parameters::named`] order for finite-difference perturbation.
pub struct RefModel {
    pub cfg: ModelConfig,
    pub arrays: Vec<Vec<f64>>,
}

struct Slots {
    embed: usize,
    pos: usize,
    unembed: usize,
    first_layer: usize,
    final_norm: usize,
}

impl RefModel {
    pub fn from_params(params: &Parameters, cfg: &ModelConfig) -> Self {
        let arrays = params
            .named(cfg)
            .into_iter()
            .map(|(_, data, _)| data.iter().map(|&v| f64::from(v)).collect())
            .collect();
        RefModel {
            cfg: cfg.clone(),
            arrays,
        }
    }

    fn slots(&self) -> Slots {
        let tied = self.cfg.tied_embeddings;
        Slots {
            embed: 0,
            pos: 1,
            unembed: if tied { 0 } else { 2 },
            first_layer: if tied { 2 } else { 3 },
            final_norm: self.arrays.len() - 1,
        }
    }

    /// Mean cross-entropy over all positions of all sequences, exactly the
    /// training objective composition.
    pub fn loss(&self, sequences: &[&[u32]], targets: &[&[u32]]) -> f64 {
        let cfg = &self.cfg;
        let s = self.slots();
        let d = cfg.d_model;
        let vsz = cfg.vocab_size;
        let mut total = 0.0;
        let mut count = 0usize;
        for (seq, tgt) in sequences.iter().zip(targets) {
            let t_len = seq.len();
            let mut h = vec![0.0f64; t_len * d];
            for (t, &tok) in seq.iter().enumerate() {
                for c in 0..d {
                    h[t * d + c] = self.arrays[s.embed][tok as usize * d + c]
                        + self.arrays[s.pos][t * d + c];
                }
            }
            for li in 0..cfg.n_layers {
                let base = s.first_layer + li * 8;
                let attn_norm = &self.arrays[base];
                let wq = &self.arrays[base + 1];
                let wk = &self.arrays[base + 2];
                let wv = &self.arrays[base + 3];
                let wo = &self.arrays[base + 4];
                let ffn_norm = &self.arrays[base + 5];
                let w1 = &self.arrays[base + 6];
                let w2 = &self.arrays[base + 7];

                let x = ref_rms_norm(&h, attn_norm, d, f64::from(cfg.rms_eps));
                let q = ref_matmul(&x, wq, t_len, d, d);
                let k = ref_matmul(&x, wk, t_len, d, d);
                let v = ref_matmul(&x, wv, t_len, d, d);
                let attn = ref_causal_attention(&q, &k, &v, t_len, d, cfg.n_heads);
                let proj = ref_matmul(&attn, wo, t_len, d, d);
                for i in 0..h.len() {
                    h[i] += proj[i];
                }
                let x2 = ref_rms_norm(&h, ffn_norm, d, f64::from(cfg.rms_eps));
                let ff = cfg.ff_dim();
                let up = ref_matmul(&x2, w1, t_len, d, ff);
                let act: Vec<f64> = up.iter().map(|&u| ref_gelu(u)).collect();
                let down = ref_matmul(&act, w2, t_len, ff, d);
                for i in 0..h.len() {
                    h[i] += down[i];
                }
            }
            let normed = ref_rms_norm(
                &h,
                &self.arrays[s.final_norm],
                d,
                f64::from(cfg.rms_eps),
            );
            let logits = ref_matmul_nt(&normed, &self.arrays[s.unembed], t_len, d, vsz);
            for (t, &tok) in tgt.iter().enumerate() {
                let row = &logits[t * vsz..(t + 1) * vsz];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                total += lse - row[tok as usize];
                count += 1;
            }
        }
        total / count as f64
    }
}
