//! Set encoder that predicts a parameter shift from shots and `theta_e`.

use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{EcpSample, DEFAULT_N_MAX};
use crate::diffable::{Array, Axis, Graph, Var};
use crate::error::{ensure, Result};
use crate::gmm::{SphericalGmm, SIGMA_FLOOR};
use crate::seed;

pub const DATE_VOCAB: usize = 366;
pub const KIND_VOCAB: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaShiftSpace {
    AdditiveFloored,
    LogAdditive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "J")]
    pub j: usize,
    pub n_max: usize,
    pub sigma_floor: f64,
    pub sigma_shift_space: SigmaShiftSpace,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            t: 24,
            j: 6,
            n_max: DEFAULT_N_MAX,
            sigma_floor: SIGMA_FLOOR,
            sigma_shift_space: SigmaShiftSpace::AdditiveFloored,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.d_model >= 1 && self.n_heads >= 1 && self.d_model % self.n_heads == 0,
            InvalidArgument,
            "d_model {} must be a positive multiple of n_heads {}",
            self.d_model,
            self.n_heads
        );
        ensure!(self.n_max >= 1, InvalidArgument, "n_max must be at least 1");
        ensure!(
            self.t >= 1 && self.j >= 1 && self.d_ff >= 1,
            InvalidArgument,
            "T, J and d_ff must be at least 1"
        );
        ensure!(
            self.sigma_floor > 0.0 && self.sigma_floor.is_finite(),
            InvalidArgument,
            "sigma_floor must be positive"
        );
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.n_max + 2 * self.j
    }

    /// `3Td + 3d + 370d + Jd + L(4d^2 + 2d*d_ff + 6d + d_ff) + d + 2dT + 2T`.
    pub fn param_count(&self) -> usize {
        let (d, t, j, l, f) = (self.d_model, self.t, self.j, self.n_layers, self.d_ff);
        3 * t * d
            + 3 * d
            + (DATE_VOCAB + KIND_VOCAB) * d
            + j * d
            + l * (4 * d * d + 2 * d * f + 6 * d + f)
            + d
            + 2 * d * t
            + 2 * t
    }

    /// Names and shapes of every parameter block, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, t, f) = (self.d_model, self.t, self.d_ff);
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
        for kind in ["sample", "mu", "sigma"] {
            push(format!("proj_{kind}.w"), vec![t, d]);
            push(format!("proj_{kind}.b"), vec![d]);
        }
        push("date_emb".into(), vec![DATE_VOCAB, d]);
        push("comp_emb".into(), vec![self.j, d]);
        push("kind_emb".into(), vec![KIND_VOCAB, d]);
        for l in 0..self.n_layers {
            push(format!("layer{l}.attn_norm"), vec![d]);
            push(format!("layer{l}.wqkv"), vec![d, 3 * d]);
            push(format!("layer{l}.bq"), vec![d]);
            push(format!("layer{l}.bv"), vec![d]);
            push(format!("layer{l}.wo"), vec![d, d]);
            push(format!("layer{l}.bo"), vec![d]);
            push(format!("layer{l}.ffn_norm"), vec![d]);
            push(format!("layer{l}.w1"), vec![d, f]);
            push(format!("layer{l}.b1"), vec![f]);
            push(format!("layer{l}.w2"), vec![f, d]);
            push(format!("layer{l}.b2"), vec![d]);
        }
        push("final_norm".into(), vec![d]);
        for head in ["mu", "sigma"] {
            push(format!("head_{head}.w"), vec![d, t]);
            push(format!("head_{head}.b"), vec![t]);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Sample = 0,
    Mu = 1,
    Sigma = 2,
    Pad = 3,
}

/// Raw token inputs before embedding.
///
/// Order: `n_max` sample slots (shots first, then pads), `J` mean tokens,
/// `J` sigma tokens. A compacted sequence drops the pad slots.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// One length-`T` vector per token.
    pub values: Vec<Vec<f64>>,
    pub kinds: Vec<TokenKind>,
    /// `false` for pads.
    pub attn_mask: Vec<bool>,
    /// Day of year per token, 0 where it does not apply.
    pub date_ids: Vec<u16>,
    /// Component 1..=J per parameter token, 0 elsewhere.
    pub component_ids: Vec<usize>,
    pub n_slots: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_shots(&self) -> usize {
        self.kinds[..self.n_slots]
            .iter()
            .filter(|k| **k == TokenKind::Sample)
            .count()
    }

    /// Same sequence with the masked pad slots removed.
    pub fn compacted(&self) -> TokenSequence {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.attn_mask[i]).collect();
        let n_slots = keep.iter().filter(|&&i| i < self.n_slots).count();
        TokenSequence {
            values: keep.iter().map(|&i| self.values[i].clone()).collect(),
            kinds: keep.iter().map(|&i| self.kinds[i]).collect(),
            attn_mask: vec![true; keep.len()],
            date_ids: keep.iter().map(|&i| self.date_ids[i]).collect(),
            component_ids: keep.iter().map(|&i| self.component_ids[i]).collect(),
            n_slots,
        }
    }
}

pub fn tokenize(
    shots: &[EcpSample],
    theta_e: &SphericalGmm,
    config: &EncoderConfig,
) -> Result<TokenSequence> {
    let (t, j, n_max) = (config.t, config.j, config.n_max);
    ensure!(
        shots.len() <= n_max,
        InvalidArgument,
        "{} shots exceed n_max {n_max}",
        shots.len()
    );
    ensure!(
        theta_e.t() == t && theta_e.j() == j,
        Shape,
        "theta_e is J={} T={}, encoder expects J={j} T={t}",
        theta_e.j(),
        theta_e.t()
    );
    ensure!(
        shots.iter().all(|s| s.len() == t),
        Shape,
        "shots must have length {t}"
    );
    let len = config.seq_len();
    let mut seq = TokenSequence {
        values: Vec::with_capacity(len),
        kinds: Vec::with_capacity(len),
        attn_mask: Vec::with_capacity(len),
        date_ids: Vec::with_capacity(len),
        component_ids: Vec::with_capacity(len),
        n_slots: n_max,
    };
    for s in shots {
        seq.values.push(s.values.clone());
        seq.kinds.push(TokenKind::Sample);
        seq.attn_mask.push(true);
        seq.date_ids.push(s.day_of_year);
        seq.component_ids.push(0);
    }
    for _ in shots.len()..n_max {
        seq.values.push(vec![0.0; t]);
        seq.kinds.push(TokenKind::Pad);
        seq.attn_mask.push(false);
        seq.date_ids.push(0);
        seq.component_ids.push(0);
    }
    for (kind, rows) in [
        (TokenKind::Mu, theta_e.means()),
        (TokenKind::Sigma, theta_e.sigmas()),
    ] {
        for (k, row) in rows.iter().enumerate() {
            seq.values.push(row.clone());
            seq.kinds.push(kind);
            seq.attn_mask.push(true);
            seq.date_ids.push(0);
            seq.component_ids.push(k + 1);
        }
    }
    Ok(seq)
}

/// Predicted correction to `theta_e`, one row per component.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftVector {
    pub d_mu: Vec<Vec<f64>>,
    pub d_sigma: Vec<Vec<f64>>,
}

impl ShiftVector {
    pub fn zeros(j: usize, t: usize) -> Self {
        ShiftVector {
            d_mu: vec![vec![0.0; t]; j],
            d_sigma: vec![vec![0.0; t]; j],
        }
    }

    pub fn max_abs_diff(&self, other: &ShiftVector) -> f64 {
        let rows = self.d_mu.iter().zip(&other.d_mu);
        let rows = rows.chain(self.d_sigma.iter().zip(&other.d_sigma));
        rows.flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

fn shift_sigma(s: f64, d: f64, config: &EncoderConfig) -> f64 {
    let shifted = match config.sigma_shift_space {
        SigmaShiftSpace::AdditiveFloored => s + d,
        SigmaShiftSpace::LogAdditive if d == 0.0 => s,
        SigmaShiftSpace::LogAdditive => (s.ln() + d).exp(),
    };
    shifted.max(config.sigma_floor)
}

/// `theta_e` moved by `er`; weights are unchanged.
pub fn apply_shift(
    theta_e: &SphericalGmm,
    er: &ShiftVector,
    config: &EncoderConfig,
) -> Result<SphericalGmm> {
    let (j, t) = (theta_e.j(), theta_e.t());
    ensure!(
        er.d_mu.len() == j
            && er.d_sigma.len() == j
            && er.d_mu.iter().chain(&er.d_sigma).all(|r| r.len() == t),
        Shape,
        "shift does not match a J={j} T={t} mixture"
    );
    let means = theta_e
        .means()
        .iter()
        .zip(&er.d_mu)
        .map(|(m, d)| m.iter().zip(d).map(|(a, b)| a + b).collect())
        .collect();
    let sigmas = theta_e
        .sigmas()
        .iter()
        .zip(&er.d_sigma)
        .map(|(s, d)| s.iter().zip(d).map(|(a, b)| shift_sigma(*a, *b, config)).collect())
        .collect();
    SphericalGmm::new(means, sigmas)
}

/// The same shift on the tape; returns `[J, T]` mean and sigma nodes.
pub fn apply_shift_graph(
    g: &mut Graph,
    theta_e: &SphericalGmm,
    d_mu: Var,
    d_sigma: Var,
    config: &EncoderConfig,
) -> Result<(Var, Var)> {
    let (j, t) = (theta_e.j(), theta_e.t());
    let mu = g.constant(Array::matrix(j, t, theta_e.means_flat())?);
    let sd = g.constant(Array::matrix(j, t, theta_e.sigmas_flat())?);
    let mu_hat = g.add(mu, d_mu)?;
    let raw = match config.sigma_shift_space {
        SigmaShiftSpace::AdditiveFloored => g.add(sd, d_sigma)?,
        SigmaShiftSpace::LogAdditive => {
            let log_sd = g.ln(sd)?;
            let moved = g.add(log_sd, d_sigma)?;
            g.exp(moved)?
        }
    };
    let sd_hat = g.clamp_min(raw, config.sigma_floor)?;
    Ok((mu_hat, sd_hat))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    names: Vec<String>,
    params: Vec<Arc<Array>>,
}

/// Parameter indices for one encoder layer. Keys carry no bias: softmax
/// ignores a per-row constant, so its gradient would be identically zero.
struct LayerIdx {
    attn_norm: usize,
    wqkv: usize,
    bq: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ffn_norm: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

const PROJ_SAMPLE: usize = 0;
const PROJ_MU: usize = 2;
const PROJ_SIGMA: usize = 4;
const DATE_EMB: usize = 6;
const COMP_EMB: usize = 7;
const KIND_EMB: usize = 8;
const FIRST_LAYER: usize = 9;
const PER_LAYER: usize = 11;

fn layer_idx(l: usize) -> LayerIdx {
    let b = FIRST_LAYER + l * PER_LAYER;
    LayerIdx {
        attn_norm: b,
        wqkv: b + 1,
        bq: b + 2,
        bv: b + 3,
        wo: b + 4,
        bo: b + 5,
        ffn_norm: b + 6,
        w1: b + 7,
        b1: b + 8,
        w2: b + 9,
        b2: b + 10,
    }
}

/// Rounds through `f32`, the checkpoint storage precision.
pub fn to_f32_grid(x: f64) -> f64 {
    x as f32 as f64
}

/// Scaled-uniform projections, small-normal embeddings, unit norm gains,
/// zero biases and zero output heads. Values lie on the `f32` grid.
pub fn init_model(config: &EncoderConfig, seed: u64) -> Result<EncoderModel> {
    config.validate()?;
    let layout = config.layout();
    let normal = Normal::new(0.0, 0.02).expect("valid normal");
    let head_start = layout.len() - 4;
    let mut params = Vec::with_capacity(layout.len());
    for (i, (name, shape)) in layout.iter().enumerate() {
        let mut rng = seed::rng(seed, &[0xe17c, i as u64]);
        let mut a = Array::zeros(shape);
        if i >= head_start {
            // zero heads
        } else if shape.len() == 1 {
            if name.contains("norm") {
                a.data_mut().iter_mut().for_each(|v| *v = 1.0);
            }
        } else if name.ends_with("_emb") {
            a.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        } else {
            let bound = 1.0 / (shape[0] as f64).sqrt();
            a.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-bound..bound));
        }
        a.data_mut().iter_mut().for_each(|v| *v = to_f32_grid(*v));
        params.push(Arc::new(a));
    }
    Ok(EncoderModel {
        config: *config,
        names: layout.into_iter().map(|(n, _)| n).collect(),
        params,
    })
}

impl EncoderModel {
    /// Rebuilds a model from named blocks in layout order.
    pub fn from_params(config: EncoderConfig, params: Vec<Array>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        ensure!(
            params.len() == layout.len(),
            Format,
            "expected {} parameter blocks, got {}",
            layout.len(),
            params.len()
        );
        for ((name, shape), p) in layout.iter().zip(&params) {
            ensure!(
                p.shape() == shape.as_slice(),
                Format,
                "block {name} has shape {:?}, expected {shape:?}",
                p.shape()
            );
            ensure!(p.all_finite(), Numeric, "block {name} is not finite");
        }
        Ok(EncoderModel {
            config,
            names: layout.into_iter().map(|(n, _)| n).collect(),
            params: params.into_iter().map(Arc::new).collect(),
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Arc<Array>] {
        &self.params
    }

    pub fn param_mut(&mut self, i: usize) -> &mut Array {
        Arc::make_mut(&mut self.params[i])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Array> {
        self.params.iter_mut().map(Arc::make_mut)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Records every parameter on `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.param_shared(p.clone())).collect()
    }

    /// Runs the encoder on the tape; returns `[J, T]` shift nodes.
    pub fn forward(&self, g: &mut Graph, p: &[Var], tokens: &TokenSequence) -> Result<(Var, Var)> {
        let c = &self.config;
        let (t, j, d) = (c.t, c.j, c.d_model);
        ensure!(
            tokens.len() == tokens.n_slots + 2 * j
                && tokens.values.iter().all(|v| v.len() == t),
            Shape,
            "token sequence does not fit this encoder"
        );
        ensure!(
            tokens.kinds[tokens.n_slots..].iter().enumerate().all(|(i, k)| {
                *k == if i < j { TokenKind::Mu } else { TokenKind::Sigma }
            }),
            Shape,
            "parameter tokens out of order"
        );
        let n_slots = tokens.n_slots;

        let mut parts = Vec::with_capacity(3);
        if n_slots > 0 {
            let x = g.constant(Array::from_rows(&tokens.values[..n_slots])?);
            let proj = g.matmul(x, p[PROJ_SAMPLE])?;
            let mut h = g.add_row(proj, p[PROJ_SAMPLE + 1])?;
            let kinds: Vec<usize> = tokens.kinds[..n_slots].iter().map(|k| *k as usize).collect();
            let kind = g.embedding(p[KIND_EMB], &kinds)?;
            h = g.add(h, kind)?;
            let days: Vec<usize> = tokens.date_ids[..n_slots]
                .iter()
                .map(|&day| (day as usize).saturating_sub(1))
                .collect();
            let mut date = g.embedding(p[DATE_EMB], &days)?;
            if tokens.kinds[..n_slots].iter().any(|k| *k != TokenKind::Sample) {
                let keep: Vec<f64> = tokens.kinds[..n_slots]
                    .iter()
                    .flat_map(|k| {
                        let on = if *k == TokenKind::Sample { 1.0 } else { 0.0 };
                        std::iter::repeat_n(on, d)
                    })
                    .collect();
                let keep = g.constant(Array::matrix(n_slots, d, keep)?);
                date = g.mul(date, keep)?;
            }
            parts.push(g.add(h, date)?);
        }
        let comps: Vec<usize> = (0..j).collect();
        for (offset, proj_idx, kind) in [
            (n_slots, PROJ_MU, TokenKind::Mu),
            (n_slots + j, PROJ_SIGMA, TokenKind::Sigma),
        ] {
            let x = g.constant(Array::from_rows(&tokens.values[offset..offset + j])?);
            let proj = g.matmul(x, p[proj_idx])?;
            let h = g.add_row(proj, p[proj_idx + 1])?;
            let comp = g.embedding(p[COMP_EMB], &comps)?;
            let kind = g.embedding(p[KIND_EMB], &vec![kind as usize; j])?;
            let h = g.add(h, comp)?;
            parts.push(g.add(h, kind)?);
        }
        let mut h = g.concat(&parts, Axis::Rows)?;

        let mask = if tokens.attn_mask.iter().all(|m| *m) {
            None
        } else {
            Some(Array::vector(
                tokens
                    .attn_mask
                    .iter()
                    .map(|m| if *m { 0.0 } else { f64::NEG_INFINITY })
                    .collect(),
            ))
        };
        let no_key_bias = g.constant(Array::zeros(&[1, d]));
        let dh = d / c.n_heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for l in 0..c.n_layers {
            let li = layer_idx(l);
            let a = g.rms_norm(h, p[li.attn_norm])?;
            let qkv = g.matmul(a, p[li.wqkv])?;
            let bias = g.concat(&[p[li.bq], no_key_bias, p[li.bv]], Axis::Cols)?;
            let qkv = g.add_row(qkv, bias)?;
            // Only the parameter rows are read after the last layer, so its
            // queries and everything downstream skip the sample rows.
            let last = l + 1 == c.n_layers;
            let queries = if last && n_slots > 0 {
                h = g.slice(h, Axis::Rows, n_slots, 2 * j)?;
                g.slice(qkv, Axis::Rows, n_slots, 2 * j)?
            } else {
                qkv
            };
            let mut heads = Vec::with_capacity(c.n_heads);
            for head in 0..c.n_heads {
                let q = g.slice(queries, Axis::Cols, head * dh, dh)?;
                let k = g.slice(qkv, Axis::Cols, d + head * dh, dh)?;
                let v = g.slice(qkv, Axis::Cols, 2 * d + head * dh, dh)?;
                let kt = g.transpose(k)?;
                let scores = g.matmul(q, kt)?;
                let scores = g.scale(scores, inv_sqrt)?;
                let attn = g.softmax_masked(scores, mask.as_ref())?;
                heads.push(g.matmul(attn, v)?);
            }
            let o = if heads.len() == 1 {
                heads[0]
            } else {
                g.concat(&heads, Axis::Cols)?
            };
            let o = g.matmul(o, p[li.wo])?;
            let o = g.add_row(o, p[li.bo])?;
            h = g.add(h, o)?;

            let f = g.rms_norm(h, p[li.ffn_norm])?;
            let f = g.matmul(f, p[li.w1])?;
            let f = g.add_row(f, p[li.b1])?;
            let f = g.gelu(f)?;
            let f = g.matmul(f, p[li.w2])?;
            let f = g.add_row(f, p[li.b2])?;
            h = g.add(h, f)?;
        }
        if c.n_layers == 0 {
            h = g.slice(h, Axis::Rows, n_slots, 2 * j)?;
        }
        debug_assert_eq!(g.shape(h), &[2 * j, d]);

        let final_norm = FIRST_LAYER + c.n_layers * PER_LAYER;
        let params = g.rms_norm(h, p[final_norm])?;
        let mut out = [params; 2];
        for (i, o) in out.iter_mut().enumerate() {
            let rows = g.slice(params, Axis::Rows, i * j, j)?;
            let w = final_norm + 1 + 2 * i;
            let y = g.matmul(rows, p[w])?;
            *o = g.add_row(y, p[w + 1])?;
        }
        Ok((out[0], out[1]))
    }

    pub fn encode(&self, tokens: &TokenSequence) -> Result<ShiftVector> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|a| g.constant_shared(a.clone()))
            .collect();
        let (d_mu, d_sigma) = self.forward(&mut g, &vars, tokens)?;
        let shift = ShiftVector {
            d_mu: g.value(d_mu).to_rows(),
            d_sigma: g.value(d_sigma).to_rows(),
        };
        ensure!(
            shift.d_mu.iter().chain(&shift.d_sigma).flatten().all(|v| v.is_finite()),
            Numeric,
            "encoder produced a non-finite shift"
        );
        Ok(shift)
    }
}

/// `apply_shift(theta_e, encode(model, tokenize(shots, theta_e)))`.
pub fn predict(model: &EncoderModel, shots: &[EcpSample], theta_e: &SphericalGmm) -> Result<SphericalGmm> {
    let tokens = tokenize(shots, theta_e, &model.config)?.compacted();
    let er = model.encode(&tokens)?;
    apply_shift(theta_e, &er, &model.config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffable::{finite_diff_check_with, Stencil};
    use crate::gmm::fixed_weights;
    use rand::seq::SliceRandom;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            t: 4,
            j: 2,
            n_max: 5,
            ..EncoderConfig::default()
        }
    }

    fn random_shots(rng: &mut seed::Rng, n: usize, t: usize) -> Vec<EcpSample> {
        (0..n)
            .map(|_| {
                let v = (0..t).map(|_| rng.random_range(0.0..2.0)).collect();
                EcpSample::new(v, rng.random_range(1..=366)).unwrap()
            })
            .collect()
    }

    fn random_gmm(rng: &mut seed::Rng, j: usize, t: usize) -> SphericalGmm {
        let means = (0..j)
            .map(|_| (0..t).map(|_| rng.random_range(0.0..2.0)).collect())
            .collect();
        let sigmas = (0..j)
            .map(|_| (0..t).map(|_| rng.random_range(0.2..1.0)).collect())
            .collect();
        SphericalGmm::new(means, sigmas).unwrap()
    }

    /// Every parameter perturbed at random. Heads stay small so shifted
    /// sigmas keep clear of the floor.
    fn randomized(config: &EncoderConfig, seed_: u64) -> EncoderModel {
        let mut m = init_model(config, seed_).unwrap();
        let mut rng = seed::rng(seed_, &[99]);
        let heads = m.params().len() - 4;
        for i in 0..m.params().len() {
            let p = m.param_mut(i);
            let bound = 1.0 / (p.shape()[0] as f64).sqrt();
            let size = if i >= heads { 0.02 } else { 0.5 };
            for v in p.data_mut() {
                *v += rng.random_range(-bound..bound) * size;
            }
        }
        m
    }

    #[test]
    fn desk_parameter_count() {
        let c = EncoderConfig::default();
        let by_hand = 3 * (24 * 64 + 64)
            + (366 + 6 + 4) * 64
            + 2 * (64 + 64 * 192 + 64 + 64 + 64 * 64 + 64 + 64 + 64 * 256 + 256 + 256 * 64 + 64)
            + 64
            + 2 * (64 * 24 + 24);
        assert_eq!(by_hand, 131_632);
        assert_eq!(c.param_count(), by_hand);
        let m = init_model(&c, 1).unwrap();
        assert_eq!(m.param_count(), by_hand);
        assert_eq!(tiny().param_count(), init_model(&tiny(), 1).unwrap().param_count());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = EncoderConfig {
            n_heads: 3,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig {
            n_max: 0,
            ..EncoderConfig::default()
        };
        assert!(init_model(&bad, 0).is_err());
    }

    #[test]
    fn init_is_seeded_and_starts_at_zero_shift() {
        let c = EncoderConfig::default();
        let a = init_model(&c, 5).unwrap();
        assert_eq!(a, init_model(&c, 5).unwrap());
        assert_ne!(a, init_model(&c, 6).unwrap());
        let mut rng = seed::rng(1, &[]);
        let theta = random_gmm(&mut rng, c.j, c.t);
        let shots = random_shots(&mut rng, 7, c.t);
        let tokens = tokenize(&shots, &theta, &c).unwrap();
        let er = a.encode(&tokens).unwrap();
        assert_eq!(er, ShiftVector::zeros(c.j, c.t));
        assert_eq!(apply_shift(&theta, &er, &c).unwrap(), theta);
        assert_eq!(predict(&a, &shots, &theta).unwrap(), theta);
    }

    #[test]
    fn tokenize_layout() {
        let c = EncoderConfig::default();
        let mut rng = seed::rng(2, &[]);
        let theta = random_gmm(&mut rng, 6, 24);

        let full = tokenize(&random_shots(&mut rng, 25, 24), &theta, &c).unwrap();
        assert_eq!(full.len(), 37);
        assert!(full.attn_mask.iter().all(|m| *m));
        assert!(!full.kinds.contains(&TokenKind::Pad));

        let one = tokenize(&random_shots(&mut rng, 1, 24), &theta, &c).unwrap();
        assert_eq!(one.len(), 25 + 12);
        assert_eq!(one.attn_mask.iter().filter(|m| !**m).count(), 24);
        assert_eq!(one.n_shots(), 1);
        let mu = one.kinds.iter().filter(|k| **k == TokenKind::Mu).count();
        let sd = one.kinds.iter().filter(|k| **k == TokenKind::Sigma).count();
        assert_eq!((mu, sd), (6, 6));
        assert_eq!(&one.component_ids[25..], &[1, 2, 3, 4, 5, 6, 1, 2, 3, 4, 5, 6]);

        let compact = one.compacted();
        assert_eq!(compact.len(), 13);
        assert_eq!(compact.n_slots, 1);

        assert!(tokenize(&random_shots(&mut rng, 26, 24), &theta, &c).is_err());
        let wrong = random_gmm(&mut rng, 5, 24);
        assert!(tokenize(&random_shots(&mut rng, 3, 24), &wrong, &c).is_err());
    }

    #[test]
    fn permutation_and_pad_invariance() {
        let c = EncoderConfig::default();
        let model = randomized(&c, 3);
        let mut rng = seed::rng(4, &[]);
        for _ in 0..5 {
            let n = rng.random_range(1..=c.n_max);
            let theta = random_gmm(&mut rng, c.j, c.t);
            let mut shots = random_shots(&mut rng, n, c.t);
            let tokens = tokenize(&shots, &theta, &c).unwrap();
            let base = model.encode(&tokens).unwrap();
            assert!(base.d_mu.iter().flatten().any(|v| *v != 0.0));

            shots.shuffle(&mut rng);
            let permuted = model.encode(&tokenize(&shots, &theta, &c).unwrap()).unwrap();
            assert!(base.max_abs_diff(&permuted) < 1e-9);

            let mut padded = tokens.clone();
            for i in n..c.n_max {
                padded.values[i] = (0..c.t).map(|_| rng.random_range(-50.0..50.0)).collect();
                padded.date_ids[i] = rng.random_range(1..=366);
            }
            assert_eq!(model.encode(&padded).unwrap(), base);

            let compact = model.encode(&tokens.compacted()).unwrap();
            assert!(base.max_abs_diff(&compact) < 1e-9);
        }
    }

    #[test]
    fn extra_masked_pad_changes_nothing() {
        let c = tiny();
        let wider = EncoderConfig { n_max: c.n_max + 1, ..c };
        let model = randomized(&c, 8);
        let mut rng = seed::rng(8, &[]);
        let theta = random_gmm(&mut rng, c.j, c.t);
        let shots = random_shots(&mut rng, 3, c.t);
        let a = model.encode(&tokenize(&shots, &theta, &c).unwrap()).unwrap();
        let b = model.encode(&tokenize(&shots, &theta, &wider).unwrap()).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn shift_rules() {
        let theta = SphericalGmm::new(vec![vec![1.0, 2.0]], vec![vec![0.01, 0.5]]).unwrap();
        let c = EncoderConfig {
            t: 2,
            j: 1,
            ..EncoderConfig::default()
        };
        let er = ShiftVector {
            d_mu: vec![vec![0.5, -1.0]],
            d_sigma: vec![vec![-0.05, 0.25]],
        };
        let out = apply_shift(&theta, &er, &c).unwrap();
        assert_eq!(out.means()[0], vec![1.5, 1.0]);
        assert_eq!(out.sigmas()[0], vec![1e-3, 0.75]);
        assert_eq!(out.weights(), theta.weights());

        let log = EncoderConfig {
            sigma_shift_space: SigmaShiftSpace::LogAdditive,
            ..c
        };
        let er = ShiftVector {
            d_mu: vec![vec![0.0, 0.0]],
            d_sigma: vec![vec![2f64.ln(), 0.0]],
        };
        let out = apply_shift(&theta, &er, &log).unwrap();
        assert!((out.sigmas()[0][0] - 0.02).abs() < 1e-15);
        assert_eq!(out.sigmas()[0][1], 0.5);
        assert_eq!(
            apply_shift(&theta, &ShiftVector::zeros(1, 2), &log).unwrap(),
            theta
        );
        assert!(apply_shift(&theta, &ShiftVector::zeros(2, 2), &c).is_err());
    }

    #[test]
    fn graph_shift_matches_direct_shift() {
        for space in [SigmaShiftSpace::AdditiveFloored, SigmaShiftSpace::LogAdditive] {
            let c = EncoderConfig {
                sigma_shift_space: space,
                ..tiny()
            };
            let model = randomized(&c, 12);
            let mut rng = seed::rng(12, &[]);
            let theta = random_gmm(&mut rng, c.j, c.t);
            let shots = random_shots(&mut rng, 3, c.t);
            let tokens = tokenize(&shots, &theta, &c).unwrap();
            let direct = apply_shift(&theta, &model.encode(&tokens).unwrap(), &c).unwrap();
            let mut g = Graph::new();
            let vars = model.bind(&mut g);
            let (dm, ds) = model.forward(&mut g, &vars, &tokens).unwrap();
            let (m, s) = apply_shift_graph(&mut g, &theta, dm, ds, &c).unwrap();
            assert!((g.value(m).data().iter().zip(direct.means_flat()))
                .all(|(a, b)| (a - b).abs() < 1e-12));
            assert!((g.value(s).data().iter().zip(direct.sigmas_flat()))
                .all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn composed_loss_gradients_match_finite_differences() {
        let c = tiny();
        let weights = fixed_weights(c.j).unwrap();
        for trial in 0..3 {
            let model = randomized(&c, 20 + trial);
            let mut rng = seed::rng(30 + trial, &[]);
            let theta = random_gmm(&mut rng, c.j, c.t);
            let shots = random_shots(&mut rng, 3, c.t);
            let data: Vec<Vec<f64>> = (0..12)
                .map(|_| (0..c.t).map(|_| rng.random_range(0.0..2.0)).collect())
                .collect();
            let data = Arc::new(Array::from_rows(&data).unwrap());
            let tokens = tokenize(&shots, &theta, &c).unwrap();
            let point: Vec<Array> = model.params().iter().map(|p| (**p).clone()).collect();
            let report = finite_diff_check_with(
                |g, vars| {
                    let (dm, ds) = model.forward(g, vars, &tokens)?;
                    let (m, s) = apply_shift_graph(g, &theta, dm, ds, &c)?;
                    g.gmm_nll(m, s, data.clone(), &weights)
                },
                &point,
                Stencil::Ridders { h: 1e-2 },
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "trial {trial}: {report:?}");
        }
    }
}
