//! Parameterized building blocks: dense layers, GRUs and a post-norm
//! Transformer encoder. Each block has a `*_specs` function listing the
//! parameters it reads, so models can initialize a [`ParamStore`] up front.
//!
//! [`ParamStore`]: super::ParamStore

use super::{Init, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub type ParamSpec = (String, Vec<usize>, Init);

fn spec(prefix: &str, name: &str, shape: &[usize], init: Init) -> ParamSpec {
    (format!("{prefix}.{name}"), shape.to_vec(), init)
}

pub fn linear_specs(prefix: &str, d_in: usize, d_out: usize) -> Vec<ParamSpec> {
    vec![
        spec(prefix, "weight", &[d_in, d_out], Init::Xavier),
        spec(prefix, "bias", &[d_out], Init::Zeros),
    ]
}

/// `x W + b` for `x: [t, d_in]`.
pub fn linear(tape: &mut Tape<'_>, x: Var, prefix: &str) -> Result<Var> {
    let w = tape.param(&format!("{prefix}.weight"))?;
    let b = tape.param(&format!("{prefix}.bias"))?;
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

pub fn gru_specs(prefix: &str, d_in: usize, d_h: usize) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    for gate in ["z", "r", "h"] {
        out.push(spec(prefix, &format!("w_{gate}"), &[d_in, d_h], Init::Xavier));
        out.push(spec(prefix, &format!("u_{gate}"), &[d_h, d_h], Init::Xavier));
        out.push(spec(prefix, &format!("b_{gate}"), &[d_h], Init::Zeros));
    }
    out
}

fn gate(tape: &mut Tape<'_>, x: Var, h: Var, prefix: &str, g: &str) -> Result<Var> {
    let w = tape.param(&format!("{prefix}.w_{g}"))?;
    let u = tape.param(&format!("{prefix}.u_{g}"))?;
    let b = tape.param(&format!("{prefix}.b_{g}"))?;
    let xw = tape.matmul(x, w)?;
    let hu = tape.matmul(h, u)?;
    let s = tape.add(xw, hu)?;
    tape.add(s, b)
}

/// One GRU step on row vectors `x: [1, d_in]`, `h_prev: [1, d_h]`.
///
/// z = σ(x W_z + h U_z + b_z), r = σ(x W_r + h U_r + b_r),
/// h̃ = tanh(x W_h + (r ⊙ h) U_h + b_h), output (1 − z) ⊙ h + z ⊙ h̃.
pub fn gru_cell(tape: &mut Tape<'_>, x: Var, h_prev: Var, prefix: &str) -> Result<Var> {
    let z_pre = gate(tape, x, h_prev, prefix, "z")?;
    let z = tape.sigmoid(z_pre);
    let r_pre = gate(tape, x, h_prev, prefix, "r")?;
    let r = tape.sigmoid(r_pre);
    let rh = tape.mul(r, h_prev)?;
    let cand_pre = gate(tape, x, rh, prefix, "h")?;
    let cand = tape.tanh(cand_pre);
    let keep = tape.one_minus(z);
    let old = tape.mul(keep, h_prev)?;
    let new = tape.mul(z, cand)?;
    tape.add(old, new)
}

/// Runs a GRU from a zero state over the rows of `xs: [t, d_in]`,
/// returning every hidden state as `[t, d_h]`.
pub fn gru_sequence(tape: &mut Tape<'_>, xs: Var, prefix: &str, d_h: usize) -> Result<Var> {
    let t = tape.value(xs).rows();
    let mut h = tape.constant(Tensor::zeros(&[1, d_h]));
    let mut states = Vec::with_capacity(t);
    for i in 0..t {
        let x = tape.row(xs, i)?;
        h = gru_cell(tape, x, h, prefix)?;
        states.push(h);
    }
    tape.concat_rows(&states)
}

pub fn layer_norm_specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
    vec![
        spec(prefix, "gamma", &[d], Init::Ones),
        spec(prefix, "beta", &[d], Init::Zeros),
    ]
}

/// Row-wise layer norm followed by the learned affine map.
pub fn layer_norm(tape: &mut Tape<'_>, x: Var, prefix: &str) -> Result<Var> {
    let g = tape.param(&format!("{prefix}.gamma"))?;
    let b = tape.param(&format!("{prefix}.beta"))?;
    let n = tape.layer_norm(x);
    let scaled = tape.mul(n, g)?;
    tape.add(scaled, b)
}

pub fn encoder_layer_specs(prefix: &str, d: usize, d_ff: usize) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    for proj in ["q", "k", "v", "o"] {
        out.extend(linear_specs(&format!("{prefix}.attn.{proj}"), d, d));
    }
    out.extend(layer_norm_specs(&format!("{prefix}.ln1"), d));
    out.extend(linear_specs(&format!("{prefix}.ffn.in"), d, d_ff));
    out.extend(linear_specs(&format!("{prefix}.ffn.out"), d_ff, d));
    out.extend(layer_norm_specs(&format!("{prefix}.ln2"), d));
    out
}

/// Multi-head bidirectional self-attention over the rows of `x: [t, d]`.
pub fn self_attention(tape: &mut Tape<'_>, x: Var, prefix: &str, heads: usize) -> Result<Var> {
    let d = tape.value(x).cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "model width {d} is not divisible by {heads} heads"
        )));
    }
    let dk = d / heads;
    let q = linear(tape, x, &format!("{prefix}.q"))?;
    let k = linear(tape, x, &format!("{prefix}.k"))?;
    let v = linear(tape, x, &format!("{prefix}.v"))?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dk, (h + 1) * dk);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scores);
        outs.push(tape.matmul(weights, vh)?);
    }
    let joined = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    linear(tape, joined, &format!("{prefix}.o"))
}

/// Post-norm encoder layer: attention, residual, norm, then a relu
/// feed-forward block, residual, norm.
pub fn transformer_encoder_layer(tape: &mut Tape<'_>, x: Var, prefix: &str, heads: usize) -> Result<Var> {
    let attn = self_attention(tape, x, &format!("{prefix}.attn"), heads)?;
    let res1 = tape.add(x, attn)?;
    let x1 = layer_norm(tape, res1, &format!("{prefix}.ln1"))?;
    let hidden = linear(tape, x1, &format!("{prefix}.ffn.in"))?;
    let hidden = tape.relu(hidden);
    let ff = linear(tape, hidden, &format!("{prefix}.ffn.out"))?;
    let res2 = tape.add(x1, ff)?;
    layer_norm(tape, res2, &format!("{prefix}.ln2"))
}

/// Sinusoidal position table `[t, d]`: sin on even columns, cos on odd ones.
pub fn sinusoidal_positions(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let pair = (i / 2) as f64 * 2.0;
            let angle = pos as f64 / 10000f64.powf(pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![t, d], data).expect("positive extents")
}

pub fn encoder_specs(prefix: &str, layers: usize, d: usize, d_ff: usize) -> Vec<ParamSpec> {
    (0..layers)
        .flat_map(|l| encoder_layer_specs(&format!("{prefix}.layer{l}"), d, d_ff))
        .collect()
}

/// Stack of encoder layers, with position encodings added to the input
/// when `positional` is set.
pub fn transformer_encoder(
    tape: &mut Tape<'_>,
    x: Var,
    prefix: &str,
    layers: usize,
    heads: usize,
    positional: bool,
) -> Result<Var> {
    let mut h = x;
    if positional {
        let (t, d) = tape.value(x).dims2();
        let pe = tape.constant(sinusoidal_positions(t, d));
        h = tape.add(h, pe)?;
    }
    for l in 0..layers {
        h = transformer_encoder_layer(tape, h, &format!("{prefix}.layer{l}"), heads)?;
    }
    Ok(h)
}
