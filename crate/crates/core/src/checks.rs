//! Named gradient checks over every differentiable building block.

use crate::csa::{channel_attention, csa_block, csa_fe_stage, spatial_attention, CsaConfig};
use crate::error::Result;
use crate::gradcheck::{grad_check, project, random_tensor, GradCheckOptions, GradCheckReport};
use crate::network::{forward, ModelConfig};
use crate::params::{Bindings, ModelParams, ParamSpec, Scope, SpecBuilder};
use crate::tensor::{PoolMode, Tape, Tensor, Var};
use crate::transformer::{
    decoder_stack, encoder_stack, multi_head_attention, patch_embed, patch_unembed, sgfn, TokenSequence,
    TransformerConfig,
};

/// Per-operation tolerance.
pub const OP_TOL: f64 = 1e-4;
/// Tolerance for the whole network.
pub const MODEL_TOL: f64 = 1e-3;

type CaseFn = fn() -> Result<GradCheckReport>;

/// Checks in execution order.
pub const CASES: &[(&str, CaseFn)] = &[
    ("matmul", matmul),
    ("matmul_shared_weight", matmul_shared),
    ("conv2d", conv2d),
    ("conv2d_depthwise", conv2d_depthwise),
    ("relu", relu),
    ("gelu", gelu),
    ("sigmoid", sigmoid),
    ("layer_norm", layer_norm),
    ("softmax", softmax),
    ("pool_channel_max", || pool("pool_channel_max", PoolMode::ChannelMax)),
    ("pool_channel_avg", || pool("pool_channel_avg", PoolMode::ChannelAvg)),
    ("pool_spatial_max", || pool("pool_spatial_max", PoolMode::SpatialMax)),
    ("pool_spatial_avg", || pool("pool_spatial_avg", PoolMode::SpatialAvg)),
    ("pixel_shuffle", pixel_shuffle),
    ("pixel_unshuffle", pixel_unshuffle),
    ("broadcast_mul", broadcast_mul),
    ("l1_mean", l1_mean),
    ("channel_attention", channel_att),
    ("spatial_attention", spatial_att),
    ("csa_block", csa_blk),
    ("csa_fe_stage", csa_stage),
    ("patch_embed_unembed", embed_unembed),
    ("self_attention", self_attention),
    ("cross_attention", cross_attention),
    ("sgfn", sgfn_case),
    ("encoder_block", encoder),
    ("decoder_block", decoder),
    ("full_model", full_model),
];

/// Runs every case whose name contains `filter`.
pub fn gradcheck_suite(filter: Option<&str>) -> Result<Vec<GradCheckReport>> {
    CASES
        .iter()
        .filter(|(name, _)| filter.is_none_or(|f| name.contains(f)))
        .map(|(_, case)| case())
        .collect()
}

fn opts() -> GradCheckOptions {
    GradCheckOptions::default().with_tol(OP_TOL)
}

fn simple<F>(name: &str, inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check(name, inputs, |t, v| {
        let out = f(t, v)?;
        project(t, out, 7)
    }, &opts())
}

/// Parameters with small random biases so every tensor contributes.
fn init(specs: &[ParamSpec], seed: u64) -> Result<ModelParams<f64>> {
    let mut p = ModelParams::initialize(specs, seed)?;
    for (i, (name, t)) in p.iter_mut().enumerate() {
        if name.ends_with(".bias") || name.ends_with(".beta") {
            let noise = random_tensor(t.shape(), 0.1, seed + 100 + i as u64);
            t.data_mut().copy_from_slice(noise.data());
        }
    }
    Ok(p)
}

/// Checks `f` against `x_inputs` followed by every parameter of `specs`.
fn module<F>(
    name: &str,
    specs: Vec<ParamSpec>,
    x_inputs: Vec<Tensor<f64>>,
    opts: GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var], &Scope) -> Result<Var>,
{
    let params = init(&specs, 5)?;
    let names: Vec<String> = params.names().cloned().collect();
    let nx = x_inputs.len();
    let mut inputs = x_inputs;
    inputs.extend(params.iter().map(|(_, t)| t.clone()));
    grad_check(
        name,
        &inputs,
        |tape, vars| {
            let b = Bindings::from_pairs(names.iter().cloned().zip(vars[nx..].iter().copied()));
            let out = f(tape, &vars[..nx], &b.root())?;
            project(tape, out, 3)
        },
        &opts,
    )
}

fn specs(f: impl FnOnce(&mut SpecBuilder)) -> Vec<ParamSpec> {
    let mut b = SpecBuilder::new();
    f(&mut b);
    b.into_specs()
}

fn matmul() -> Result<GradCheckReport> {
    let a = random_tensor(&[2, 3, 4], 1.0, 1);
    let b = random_tensor(&[2, 4, 5], 1.0, 2);
    simple("matmul", &[a, b], |t, v| t.matmul(v[0], v[1]))
}

fn matmul_shared() -> Result<GradCheckReport> {
    let a = random_tensor(&[2, 3, 4], 1.0, 3);
    let w = random_tensor(&[4, 5], 1.0, 4);
    let b = random_tensor(&[5], 1.0, 5);
    simple("matmul_shared_weight", &[a, w, b], |t, v| t.linear(v[0], v[1], Some(v[2])))
}

fn conv2d() -> Result<GradCheckReport> {
    let x = random_tensor(&[2, 3, 5, 6], 1.0, 6);
    let w = random_tensor(&[4, 3, 3, 3], 0.5, 7);
    let b = random_tensor(&[4], 0.5, 8);
    simple("conv2d", &[x, w, b], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1))
}

fn conv2d_depthwise() -> Result<GradCheckReport> {
    let x = random_tensor(&[1, 4, 5, 5], 1.0, 9);
    let w = random_tensor(&[4, 1, 3, 3], 0.5, 10);
    let b = random_tensor(&[4], 0.5, 11);
    simple("conv2d_depthwise", &[x, w, b], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 4))
}

/// Inputs bounded away from the ReLU kink.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut x = random_tensor(shape, 1.0, seed);
    x.data_mut().iter_mut().for_each(|v| *v += 0.05 * v.signum());
    x
}

fn relu() -> Result<GradCheckReport> {
    simple("relu", &[away_from_zero(&[3, 7], 12)], |t, v| t.relu(v[0]))
}

fn gelu() -> Result<GradCheckReport> {
    simple("gelu", &[random_tensor(&[3, 7], 3.0, 13)], |t, v| t.gelu(v[0]))
}

fn sigmoid() -> Result<GradCheckReport> {
    simple("sigmoid", &[random_tensor(&[3, 7], 3.0, 14)], |t, v| t.sigmoid(v[0]))
}

fn layer_norm() -> Result<GradCheckReport> {
    let x = random_tensor(&[2, 3, 6], 1.0, 15);
    let g = random_tensor(&[6], 1.0, 16);
    let b = random_tensor(&[6], 1.0, 17);
    simple("layer_norm", &[x, g, b], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-6))
}

fn softmax() -> Result<GradCheckReport> {
    simple("softmax", &[random_tensor(&[2, 3, 5], 2.0, 18)], |t, v| t.softmax_last_axis(v[0]))
}

fn pool(name: &str, mode: PoolMode) -> Result<GradCheckReport> {
    simple(name, &[random_tensor(&[2, 3, 4, 5], 1.0, 19)], move |t, v| t.pool(v[0], mode))
}

fn pixel_shuffle() -> Result<GradCheckReport> {
    simple("pixel_shuffle", &[random_tensor(&[1, 8, 3, 2], 1.0, 20)], |t, v| t.pixel_shuffle(v[0], 2))
}

fn pixel_unshuffle() -> Result<GradCheckReport> {
    simple("pixel_unshuffle", &[random_tensor(&[1, 2, 6, 3], 1.0, 21)], |t, v| t.pixel_unshuffle(v[0], 3))
}

fn broadcast_mul() -> Result<GradCheckReport> {
    let x = random_tensor(&[2, 3, 4, 4], 1.0, 22);
    let c = random_tensor(&[2, 3, 1, 1], 1.0, 23);
    let s = random_tensor(&[2, 1, 4, 4], 1.0, 24);
    simple("broadcast_mul", &[x, c, s], |t, v| {
        let y = t.mul(v[0], v[1])?;
        let y = t.mul(y, v[2])?;
        t.add(y, v[2])
    })
}

fn l1_mean() -> Result<GradCheckReport> {
    let a = random_tensor(&[2, 3, 4], 1.0, 25);
    let mut b = a.clone();
    let offsets = away_from_zero(&[2, 3, 4], 26);
    b.data_mut().iter_mut().zip(offsets.data()).for_each(|(v, o)| *v += o);
    grad_check("l1_mean", &[a, b], |t, v| t.l1_mean(v[0], v[1]), &opts())
}

fn csa_cfg() -> CsaConfig {
    CsaConfig { reduction: 4, ..CsaConfig::new(8) }
}

fn channel_att() -> Result<GradCheckReport> {
    let cfg = csa_cfg();
    let s = specs(|b| cfg.block_specs(b));
    module("channel_attention", s, vec![random_tensor(&[2, 8, 4, 4], 1.0, 27)], opts(), |t, x, sc| {
        channel_attention(t, x[0], &cfg, &sc.sub("ca"))
    })
}

fn spatial_att() -> Result<GradCheckReport> {
    let cfg = csa_cfg();
    let s = specs(|b| cfg.block_specs(b));
    module("spatial_attention", s, vec![random_tensor(&[2, 8, 5, 5], 1.0, 28)], opts(), |t, x, sc| {
        spatial_attention(t, x[0], &cfg, &sc.sub("sa"))
    })
}

fn csa_blk() -> Result<GradCheckReport> {
    let cfg = csa_cfg();
    let s = specs(|b| cfg.block_specs(b));
    module("csa_block", s, vec![random_tensor(&[1, 8, 5, 5], 1.0, 29)], opts(), |t, x, sc| {
        csa_block(t, x[0], &cfg, sc)
    })
}

fn csa_stage() -> Result<GradCheckReport> {
    let cfg = csa_cfg();
    let s = specs(|b| cfg.stage_specs(b));
    module("csa_fe_stage", s, vec![random_tensor(&[1, 8, 5, 5], 1.0, 30)], opts(), |t, x, sc| {
        csa_fe_stage(t, x[0], &cfg, sc)
    })
}

fn tcfg() -> TransformerConfig {
    TransformerConfig {
        patch_h: 2,
        patch_w: 2,
        embed_dim: 8,
        num_heads: 2,
        num_encoders: 1,
        num_decoders: 1,
        sgfn_expand: 2,
        use_positional_embedding: true,
        pos_grid: 4,
    }
}

fn tokens(x: Var, grid: (usize, usize), d: usize) -> TokenSequence {
    TokenSequence { tokens: x, grid, source_shape: (d, grid.0, grid.1) }
}

fn embed_unembed() -> Result<GradCheckReport> {
    let cfg = tcfg();
    let s = specs(|b| {
        b.scope("embed", |b| cfg.embed_specs(b, 3, (2, 2)));
        b.scope("unembed", |b| cfg.unembed_specs(b, 3, (2, 2)));
    });
    module("patch_embed_unembed", s, vec![random_tensor(&[1, 3, 4, 6], 1.0, 31)], opts(), |t, x, sc| {
        let seq = patch_embed(t, x[0], (2, 2), &cfg, &sc.sub("embed"))?;
        patch_unembed(t, &seq, (2, 2), &sc.sub("unembed"))
    })
}

fn self_attention() -> Result<GradCheckReport> {
    let cfg = tcfg();
    let s = specs(|b| cfg.attention_specs(b));
    module("self_attention", s, vec![random_tensor(&[2, 5, 8], 1.0, 32)], opts(), |t, x, sc| {
        multi_head_attention(t, x[0], x[0], &cfg, sc)
    })
}

fn cross_attention() -> Result<GradCheckReport> {
    let cfg = tcfg();
    let s = specs(|b| cfg.attention_specs(b));
    let q = random_tensor(&[2, 4, 8], 1.0, 33);
    let kv = random_tensor(&[2, 6, 8], 1.0, 34);
    module("cross_attention", s, vec![q, kv], opts(), |t, x, sc| multi_head_attention(t, x[0], x[1], &cfg, sc))
}

fn sgfn_case() -> Result<GradCheckReport> {
    let cfg = tcfg();
    let s = specs(|b| cfg.sgfn_specs(b));
    module("sgfn", s, vec![random_tensor(&[2, 6, 8], 1.0, 35)], opts(), |t, x, sc| sgfn(t, x[0], (2, 3), &cfg, sc))
}

fn encoder() -> Result<GradCheckReport> {
    let cfg = tcfg();
    let s = specs(|b| cfg.encoder_specs(b));
    module("encoder_block", s, vec![random_tensor(&[1, 6, 8], 1.0, 36)], opts().sampled(40), |t, x, sc| {
        let seq = tokens(x[0], (2, 3), 8);
        Ok(encoder_stack(t, &seq, &cfg, sc)?.tokens)
    })
}

fn decoder() -> Result<GradCheckReport> {
    let cfg = tcfg();
    let s = specs(|b| cfg.decoder_specs(b));
    let d = random_tensor(&[1, 6, 8], 1.0, 37);
    let m = random_tensor(&[1, 4, 8], 1.0, 38);
    module("decoder_block", s, vec![d, m], opts().sampled(40), |t, x, sc| {
        let q = tokens(x[0], (2, 3), 8);
        let mem = tokens(x[1], (2, 2), 8);
        Ok(decoder_stack(t, &q, &mem, &cfg, sc)?.tokens)
    })
}

/// Toy network, ×2, on a `(1,3,8,8)` input; coordinates are sampled.
///
/// The deeper graph has a larger output, so a step of 1e-4 keeps
/// difference roundoff under the comparison floor.
fn full_model() -> Result<GradCheckReport> {
    let cfg = ModelConfig::toy(2);
    module(
        "full_model",
        cfg.param_specs(),
        vec![random_tensor(&[1, 3, 8, 8], 0.5, 39)],
        GradCheckOptions::default().with_tol(MODEL_TOL).with_h(1e-4).sampled(6),
        |t, x, sc| forward(t, x[0], &cfg, sc),
    )
}
