//! Worked examples from every module, runnable from the command line.

use std::collections::BTreeMap;

use crate::csa::{csa_block_with_gates, csa_fe_stage, CsaConfig};
use crate::dataset::split_counts;
use crate::error::Result;
use crate::gradcheck::{grad_check, random_tensor, GradCheckOptions};
use crate::imaging::{bicubic_resize, cubic_weight, degrade, psnr, ssim, ImageF32};
use crate::network::{build_model, infer, ModelConfig};
use crate::params::{ModelParams, SpecBuilder};
use crate::tensor::{fault, PoolMode, Tape, Tensor};
use crate::trainer::{adam_step, AdamConfig, OptimState};
use crate::transformer::{
    encoder_stack, multi_head_attention, patch_embed, patch_unembed, sgfn, TokenSequence, TransformerConfig,
};

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub module: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn() -> std::result::Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).expect("valid literal tensor")
}

fn ok<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

const CHECKS: &[(&str, &str, Check)] = &[
    ("tensor", "matmul identity", matmul_identity),
    ("tensor", "matmul 1x2 by 2x1", matmul_dot),
    ("tensor", "matmul vs triple loop", matmul_loop),
    ("tensor", "conv2d ones 3x3 pad 1", conv_ones),
    ("tensor", "conv2d identity and zero kernels", conv_identity_zero),
    ("tensor", "activation values", activations),
    ("tensor", "gelu vs erf closed form", gelu_erf),
    ("tensor", "layer_norm cases", layer_norm_cases),
    ("tensor", "softmax cases", softmax_cases),
    ("tensor", "pool arithmetic", pool_cases),
    ("tensor", "pixel shuffle layout and inverse", shuffle_cases),
    ("tensor", "backward of sum and square", backward_cases),
    ("tensor", "gradcheck matmul h=1e-3", gradcheck_matmul),
    ("tensor", "gradcheck detects corrupted sigmoid", gradcheck_fault),
    ("csa", "zero weights give half gates", csa_half_gates),
    ("csa", "block output bounded by input", csa_bounded),
    ("csa", "stage with zero weights is identity", csa_stage_identity),
    ("transformer", "embed token count and raw length", embed_counts),
    ("transformer", "zero projection gives positional table", embed_zero_projection),
    ("transformer", "embed/unembed round trip", embed_round_trip),
    ("transformer", "single key attention", single_key),
    ("transformer", "key permutation invariance", key_permutation),
    ("transformer", "sgfn zero depthwise gives fc2 bias", sgfn_zero_gate),
    ("transformer", "zeroed projections give identity encoder", encoder_identity),
    ("network", "same seed same parameters", same_seed),
    ("network", "scale 5 rejected", scale_rejected),
    ("network", "output shapes for x2 x3 x4", output_shapes),
    ("network", "l1 loss values", l1_values),
    ("imaging", "byte rounding", byte_rounding),
    ("imaging", "psnr closed forms", psnr_cases),
    ("imaging", "ssim cases", ssim_cases),
    ("imaging", "bicubic constants and identity", bicubic_cases),
    ("imaging", "bicubic ramp vs direct summation", bicubic_ramp),
    ("imaging", "degrade crop rule", degrade_cases),
    ("dataset", "split counts for 100 images", split_cases),
    ("trainer", "adam first step and zero gradient", adam_cases),
    ("trainer", "adam vs scripted reference", adam_reference),
];

/// Runs every example check; each reports pass or fail independently.
pub fn run_selftest() -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|&(module, name, check)| {
            let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
            CheckOutcome { module, name, passed: result.is_ok(), detail: result.err().unwrap_or_default() }
        })
        .collect()
}

fn matmul_identity() -> std::result::Result<(), String> {
    let mut t = Tape::<f64>::new();
    let i = t.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let a = t.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = ok(t.matmul(i, a))?;
    ensure!(t.value(y).data() == [1.0, 2.0, 3.0, 4.0], "{:?}", t.value(y).data());
    Ok(())
}

fn matmul_dot() -> std::result::Result<(), String> {
    let mut t = Tape::<f64>::new();
    let a = t.constant(t64(&[1, 2], &[1.0, 2.0]));
    let b = t.constant(t64(&[2, 1], &[3.0, 4.0]));
    let y = ok(t.matmul(a, b))?;
    ensure!(t.value(y).data() == [11.0], "{:?}", t.value(y).data());
    Ok(())
}

fn matmul_loop() -> std::result::Result<(), String> {
    let a = random_tensor(&[4, 5], 1.0, 1);
    let b = random_tensor(&[5, 3], 1.0, 2);
    let mut t = Tape::<f64>::new();
    let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
    let y = ok(t.matmul(va, vb))?;
    for i in 0..4 {
        for j in 0..3 {
            let mut s = 0.0;
            for k in 0..5 {
                s += a.data()[i * 5 + k] * b.data()[k * 3 + j];
            }
            ensure!(close(t.value(y).data()[i * 3 + j], s, 1e-6), "entry ({i},{j})");
        }
    }
    Ok(())
}

fn conv_ones() -> std::result::Result<(), String> {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::full([1, 1, 3, 3], 1.0));
    let w = t.constant(Tensor::full([1, 1, 3, 3], 1.0));
    let y = ok(t.conv2d(x, w, None, 1, 1))?;
    let d = t.value(y).data();
    ensure!(d[4] == 9.0 && d[0] == 4.0 && d[2] == 4.0 && d[6] == 4.0 && d[8] == 4.0 && d[1] == 6.0, "{d:?}");
    Ok(())
}

fn conv_identity_zero() -> std::result::Result<(), String> {
    let x = random_tensor(&[2, 1, 4, 5], 1.0, 3);
    let mut t = Tape::<f64>::new();
    let vx = t.constant(x.clone());
    let w = t.constant(Tensor::full([1, 1, 1, 1], 1.0));
    let y = ok(t.conv2d(vx, w, None, 0, 1))?;
    ensure!(t.value(y) == &x, "identity kernel changed the input");
    let z = t.constant(Tensor::zeros([3, 1, 3, 3]));
    let b = t.constant(Tensor::zeros([3]));
    let y = ok(t.conv2d(vx, z, Some(b), 1, 1))?;
    ensure!(t.value(y).data().iter().all(|&v| v == 0.0), "zero kernel gave nonzero output");
    Ok(())
}

fn activations() -> std::result::Result<(), String> {
    let mut t = Tape::<f64>::new();
    let x = t.constant(t64(&[3], &[0.0, -2.0, 3.0]));
    let s = ok(t.sigmoid(x))?;
    let r = ok(t.relu(x))?;
    let g = ok(t.gelu(x))?;
    ensure!(t.value(s).data()[0] == 0.5, "sigmoid(0)");
    ensure!(t.value(r).data()[1..] == [0.0, 3.0], "relu");
    ensure!(t.value(g).data()[0] == 0.0, "gelu(0)");
    Ok(())
}

fn gelu_erf() -> std::result::Result<(), String> {
    // 0.5·x·(1 + erf(x/√2)) with erf from a 40-term Maclaurin series
    let erf = |z: f64| {
        let mut term = z;
        let mut sum = z;
        for n in 1..40 {
            term *= -z * z / n as f64;
            sum += term / (2 * n + 1) as f64;
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    };
    let xs = [-2.0, -1.0, 1.0, 2.0];
    let mut t = Tape::<f64>::new();
    let x = t.constant(t64(&[4], &xs));
    let g = ok(t.gelu(x))?;
    for (i, &x) in xs.iter().enumerate() {
        let want = 0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2));
        ensure!(close(t.value(g).data()[i], want, 1e-12), "gelu({x})");
    }
    Ok(())
}

fn layer_norm_cases() -> std::result::Result<(), String> {
    let mut t = Tape::<f64>::new();
    let ones = t.constant(Tensor::full([2], 1.0));
    let zeros = t.constant(Tensor::zeros([2]));
    let c = t.constant(Tensor::full([1, 2], 3.5));
    let y = ok(t.layer_norm(c, ones, zeros, 1e-6))?;
    ensure!(t.value(y).data() == [0.0, 0.0], "constant row");
    let x = t.constant(t64(&[1, 2], &[1.0, -1.0]));
    let y = ok(t.layer_norm(x, ones, zeros, 1e-6))?;
    let want = 1.0 / (1.0f64 + 1e-6).sqrt();
    ensure!(close(t.value(y).data()[0], want, 1e-12) && close(t.value(y).data()[1], -want, 1e-12), "[1,-1]");
    let beta = t.constant(t64(&[2], &[0.3, -0.7]));
    let y = ok(t.layer_norm(x, zeros, beta, 1e-6))?;
    ensure!(t.value(y).data() == [0.3, -0.7], "gamma = 0");
    Ok(())
}

fn softmax_cases() -> std::result::Result<(), String> {
    let mut t = Tape::<f64>::new();
    for (input, want) in [(vec![0.0, 0.0], vec![0.5, 0.5]), (vec![1000.0, 1000.0], vec![0.5, 0.5]), (vec![7.0], vec![1.0])] {
        let x = t.constant(t64(&[1, input.len()], &input));
        let y = ok(t.softmax_last_axis(x))?;
        ensure!(t.value(y).data() == want.as_slice(), "{input:?} -> {:?}", t.value(y).data());
    }
    Ok(())
}

fn pool_cases() -> std::result::Result<(), String> {
    let mut t = Tape::<f64>::new();
    let x = t.constant(t64(&[1, 1, 2, 2], &[1.0, 3.0, 5.0, 7.0]));
    let mx = ok(t.pool(x, PoolMode::ChannelMax))?;
    let av = ok(t.pool(x, PoolMode::ChannelAvg))?;
    ensure!(t.value(mx).data() == [7.0] && t.value(av).data() == [4.0], "channel pools");
    let p = t.constant(t64(&[1, 2, 1, 1], &[2.0, -4.0]));
    let mx = ok(t.pool(p, PoolMode::SpatialMax))?;
    let av = ok(t.pool(p, PoolMode::SpatialAvg))?;
    ensure!(t.value(mx).data() == [2.0] && t.value(av).data() == [-1.0], "spatial pools");
    let c = t.constant(Tensor::full([1, 3, 2, 2], 0.25));
    for mode in [PoolMode::ChannelMax, PoolMode::ChannelAvg, PoolMode::SpatialMax, PoolMode::SpatialAvg] {
        let y = ok(t.pool(c, mode))?;
        ensure!(t.value(y).data().iter().all(|&v| v == 0.25), "{mode:?} on constant");
    }
    Ok(())
}

fn shuffle_cases() -> std::result::Result<(), String> {
    let mut t = Tape::<f64>::new();
    let x = t.constant(t64(&[1, 4, 1, 1], &[1.0, 2.0, 3.0, 4.0]));
    let y = ok(t.pixel_shuffle(x, 2))?;
    ensure!(t.value(y).shape() == [1, 1, 2, 2] && t.value(y).data() == [1.0, 2.0, 3.0, 4.0], "layout");
    let r = random_tensor(&[2, 18, 3, 4], 1.0, 5);
    let v = t.constant(r.clone());
    let same = ok(t.pixel_shuffle(v, 1))?;
    ensure!(t.value(same) == &r, "r = 1");
    let up = ok(t.pixel_shuffle(v, 3))?;
    let back = ok(t.pixel_unshuffle(up, 3))?;
    ensure!(t.value(back) == &r, "round trip");
    Ok(())
}

fn backward_cases() -> std::result::Result<(), String> {
    let mut t = Tape::<f64>::new();
    let x = t.param(t64(&[3], &[0.3, -1.0, 2.0]));
    let s = ok(t.sum(x))?;
    ok(t.backward(s))?;
    ensure!(t.grad(x) == Some(&[1.0, 1.0, 1.0][..]), "sum");
    let mut t = Tape::<f64>::new();
    let x = t.param(t64(&[2], &[1.0, 2.0]));
    let sq = ok(t.mul(x, x))?;
    let s = ok(t.sum(sq))?;
    ok(t.backward(s))?;
    ensure!(t.grad(x) == Some(&[2.0, 4.0][..]), "square");
    Ok(())
}

fn gradcheck_matmul() -> std::result::Result<(), String> {
    let inputs = [random_tensor(&[3, 4], 1.0, 6), random_tensor(&[4, 2], 1.0, 7)];
    let opts = GradCheckOptions::default().with_h(1e-3).with_tol(1e-4);
    let r = ok(grad_check("matmul", &inputs, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        t.sum(y)
    }, &opts))?;
    ensure!(r.passed, "{r}");
    Ok(())
}

fn gradcheck_fault() -> std::result::Result<(), String> {
    let inputs = [random_tensor(&[5], 2.0, 8)];
    let f = |t: &mut Tape<f64>, v: &[crate::tensor::Var]| {
        let y = t.sigmoid(v[0])?;
        let y = t.mul(y, y)?;
        t.sum(y)
    };
    let clean = ok(grad_check("sigmoid", &inputs, f, &GradCheckOptions::default()))?;
    let _guard = fault::SigmoidFault::inject(1.01);
    let broken = ok(grad_check("sigmoid", &inputs, f, &GradCheckOptions::default()))?;
    ensure!(clean.passed && !broken.passed, "clean {clean}; corrupted {broken}");
    Ok(())
}

fn block_params(cfg: &CsaConfig, stage: bool, seed: u64) -> std::result::Result<ModelParams<f64>, String> {
    let mut b = SpecBuilder::new();
    if stage {
        cfg.stage_specs(&mut b);
    } else {
        cfg.block_specs(&mut b);
    }
    ok(ModelParams::initialize(&b.into_specs(), seed))
}

fn csa_half_gates() -> std::result::Result<(), String> {
    let cfg = CsaConfig::new(16);
    let mut p = block_params(&cfg, false, 1)?;
    p.iter_mut().for_each(|(_, t)| t.data_mut().fill(0.0));
    let mut t = Tape::new();
    let b = p.bind(&mut t, false);
    let f = random_tensor(&[1, 16, 5, 5], 1.0, 2);
    let x = t.constant(f.clone());
    let (out, g) = ok(csa_block_with_gates(&mut t, x, &cfg, &b.root()))?;
    ensure!(t.value(g.m_c).data().iter().all(|&v| v == 0.5), "M_c");
    ensure!(t.value(g.m_s).data().iter().all(|&v| v == 0.5), "M_s");
    let quarter = t.value(out).data().iter().zip(f.data()).all(|(&o, &i)| o == 0.25 * i);
    ensure!(quarter, "output != 0.25 f");
    Ok(())
}

fn csa_bounded() -> std::result::Result<(), String> {
    let cfg = CsaConfig::new(16);
    let p = block_params(&cfg, false, 3)?;
    let mut t = Tape::new();
    let b = p.bind(&mut t, false);
    let f = random_tensor(&[2, 16, 6, 6], 3.0, 4);
    let x = t.constant(f.clone());
    let (out, _) = ok(csa_block_with_gates(&mut t, x, &cfg, &b.root()))?;
    ensure!(t.value(out).data().iter().zip(f.data()).all(|(o, i)| o.abs() <= i.abs()), "gate exceeded 1");
    let z = t.constant(Tensor::zeros([1, 16, 4, 4]));
    let (zo, _) = ok(csa_block_with_gates(&mut t, z, &cfg, &b.root()))?;
    ensure!(t.value(zo).data().iter().all(|&v| v == 0.0), "f = 0");
    Ok(())
}

fn csa_stage_identity() -> std::result::Result<(), String> {
    let cfg = CsaConfig::new(8);
    let mut p = block_params(&cfg, true, 5)?;
    p.iter_mut().for_each(|(_, t)| t.data_mut().fill(0.0));
    let mut t = Tape::new();
    let b = p.bind(&mut t, false);
    let f = random_tensor(&[1, 8, 9, 7], 1.0, 6);
    let x = t.constant(f.clone());
    let y = ok(csa_fe_stage(&mut t, x, &cfg, &b.root()))?;
    ensure!(t.value(y) == &f, "stage changed its input");
    Ok(())
}

fn tcfg(d: usize, pos: bool) -> TransformerConfig {
    TransformerConfig {
        patch_h: 4,
        patch_w: 4,
        embed_dim: d,
        num_heads: 2,
        num_encoders: 2,
        num_decoders: 1,
        sgfn_expand: 2,
        use_positional_embedding: pos,
        pos_grid: 4,
    }
}

fn embed_params(cfg: &TransformerConfig, c: usize) -> std::result::Result<ModelParams<f64>, String> {
    let mut b = SpecBuilder::new();
    b.scope("embed", |b| cfg.embed_specs(b, c, (4, 4)));
    b.scope("unembed", |b| cfg.unembed_specs(b, c, (4, 4)));
    ok(ModelParams::initialize(&b.into_specs(), 7))
}

fn embed_counts() -> std::result::Result<(), String> {
    let cfg = tcfg(16, true);
    let p = embed_params(&cfg, 8)?;
    ensure!(ok(p.get("embed.proj"))?.shape() == [128, 16], "raw patch length");
    let mut t = Tape::new();
    let b = p.bind(&mut t, false);
    let x = t.constant(random_tensor(&[1, 8, 8, 8], 1.0, 8));
    let seq = ok(patch_embed(&mut t, x, (4, 4), &cfg, &b.root().sub("embed")))?;
    ensure!(t.value(seq.tokens).shape() == [1, 4, 16], "{:?}", t.value(seq.tokens).shape());
    Ok(())
}

fn embed_zero_projection() -> std::result::Result<(), String> {
    let cfg = tcfg(16, true);
    let mut p = embed_params(&cfg, 8)?;
    ok(p.get_mut("embed.proj"))?.data_mut().fill(0.0);
    let pos = ok(p.get("embed.pos"))?.clone();
    let mut t = Tape::new();
    let b = p.bind(&mut t, false);
    let x = t.constant(random_tensor(&[1, 8, 8, 8], 1.0, 9));
    let seq = ok(patch_embed(&mut t, x, (4, 4), &cfg, &b.root().sub("embed")))?;
    let tok = t.value(seq.tokens);
    for (k, (gy, gx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
        for d in 0..16 {
            ensure!(tok.at(&[0, k, d]) == pos.at(&[gy, gx, d]), "token {k} dim {d}");
        }
    }
    Ok(())
}

fn embed_round_trip() -> std::result::Result<(), String> {
    let cfg = tcfg(48, false);
    let mut p = embed_params(&cfg, 3)?;
    for name in ["embed.proj", "unembed.proj"] {
        let w = ok(p.get_mut(name))?;
        w.data_mut().fill(0.0);
        for i in 0..48 {
            w.data_mut()[i * 48 + i] = 1.0;
        }
    }
    let f = random_tensor(&[2, 3, 8, 12], 1.0, 10);
    let mut t = Tape::new();
    let b = p.bind(&mut t, false);
    let x = t.constant(f.clone());
    let seq = ok(patch_embed(&mut t, x, (4, 4), &cfg, &b.root().sub("embed")))?;
    let y = ok(patch_unembed(&mut t, &seq, (4, 4), &b.root().sub("unembed")))?;
    ensure!(t.value(y) == &f, "round trip changed the map");
    Ok(())
}

fn attn_params(cfg: &TransformerConfig, seed: u64) -> std::result::Result<ModelParams<f64>, String> {
    let mut b = SpecBuilder::new();
    cfg.attention_specs(&mut b);
    let mut p = ok(ModelParams::initialize(&b.into_specs(), seed))?;
    for (i, (_, t)) in p.iter_mut().enumerate() {
        if t.ndim() == 1 {
            let noise = random_tensor(t.shape(), 0.2, 50 + i as u64);
            t.data_mut().copy_from_slice(noise.data());
        }
    }
    Ok(p)
}

fn single_key() -> std::result::Result<(), String> {
    let cfg = tcfg(8, false);
    let p = attn_params(&cfg, 11)?;
    let mut t = Tape::new();
    let b = p.bind(&mut t, false);
    let kv = t.constant(random_tensor(&[1, 1, 8], 1.0, 12));
    let q1 = t.constant(random_tensor(&[1, 3, 8], 1.0, 13));
    let q2 = t.constant(random_tensor(&[1, 3, 8], 5.0, 14));
    let a = ok(multi_head_attention(&mut t, q1, kv, &cfg, &b.root()))?;
    let c = ok(multi_head_attention(&mut t, q2, kv, &cfg, &b.root()))?;
    ensure!(t.value(a).max_abs_diff(t.value(c)) < 1e-12, "output depends on the query");
    let row = &t.value(a).data()[..8];
    ensure!(t.value(a).data().chunks(8).all(|r| r == row), "rows differ");
    Ok(())
}

fn key_permutation() -> std::result::Result<(), String> {
    let cfg = tcfg(8, false);
    let p = attn_params(&cfg, 15)?;
    let tokens = random_tensor(&[1, 4, 8], 1.0, 16);
    let perm = [2, 0, 3, 1];
    let mut shuffled = tokens.clone();
    for (dst, &src) in perm.iter().enumerate() {
        shuffled.data_mut()[dst * 8..dst * 8 + 8].copy_from_slice(&tokens.data()[src * 8..src * 8 + 8]);
    }
    let mut t = Tape::new();
    let b = p.bind(&mut t, false);
    let q = t.constant(tokens.clone());
    let kv1 = t.constant(tokens);
    let kv2 = t.constant(shuffled);
    let a = ok(multi_head_attention(&mut t, q, kv1, &cfg, &b.root()))?;
    let c = ok(multi_head_attention(&mut t, q, kv2, &cfg, &b.root()))?;
    ensure!(t.value(a).max_abs_diff(t.value(c)) < 1e-12, "key order changed the output");
    Ok(())
}

fn sgfn_zero_gate() -> std::result::Result<(), String> {
    let cfg = tcfg(8, false);
    let mut b = SpecBuilder::new();
    cfg.sgfn_specs(&mut b);
    let mut p = ok(ModelParams::initialize(&b.into_specs(), 17))?;
    ok(p.get_mut("dw.weight"))?.data_mut().fill(0.0);
    ok(p.get_mut("dw.bias"))?.data_mut().fill(0.0);
    let bias: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 - 0.3).collect();
    ok(p.get_mut("fc2.bias"))?.data_mut().copy_from_slice(&bias);
    let mut t = Tape::new();
    let bind = p.bind(&mut t, false);
    let x = t.constant(random_tensor(&[2, 6, 8], 1.0, 18));
    let y = ok(sgfn(&mut t, x, (2, 3), &cfg, &bind.root()))?;
    ensure!(t.value(y).data().chunks(8).all(|r| r == bias.as_slice()), "output != fc2 bias");
    Ok(())
}

fn encoder_identity() -> std::result::Result<(), String> {
    let cfg = tcfg(8, false);
    let mut b = SpecBuilder::new();
    cfg.encoder_specs(&mut b);
    let mut p = ok(ModelParams::initialize(&b.into_specs(), 19))?;
    p.zero_matching(&TransformerConfig::OUTPUT_PROJECTIONS);
    let x = random_tensor(&[1, 4, 8], 1.0, 20);
    let mut t = Tape::new();
    let bind = p.bind(&mut t, false);
    let v = t.constant(x.clone());
    let seq = TokenSequence { tokens: v, grid: (2, 2), source_shape: (8, 2, 2) };
    let out = ok(encoder_stack(&mut t, &seq, &cfg, &bind.root()))?;
    ensure!(t.value(out.tokens).max_abs_diff(&x) <= 1e-6, "stack is not the identity");
    Ok(())
}

fn tiny_model(scale: usize) -> ModelConfig {
    let mut cfg = ModelConfig::toy(scale);
    cfg.feat_channels = 4;
    cfg.csa = CsaConfig { reduction: 2, ..CsaConfig::new(4) };
    cfg.transformer = TransformerConfig { pos_grid: 16, ..tcfg(8, true) };
    cfg.num_stages = 2;
    cfg
}

fn same_seed() -> std::result::Result<(), String> {
    let cfg = ModelConfig::toy(2);
    let a = ok(build_model::<f32>(&cfg, 42))?;
    let b = ok(build_model::<f32>(&cfg, 42))?;
    ensure!(a == b, "parameters differ");
    Ok(())
}

fn scale_rejected() -> std::result::Result<(), String> {
    ensure!(build_model::<f32>(&ModelConfig::toy(5), 0).is_err(), "scale 5 accepted");
    Ok(())
}

fn output_shapes() -> std::result::Result<(), String> {
    for scale in [2, 3, 4] {
        let cfg = tiny_model(scale);
        let p = ok(build_model::<f32>(&cfg, 1))?;
        let y = ok(infer(&p, &cfg, Tensor::full([1, 3, 48, 48], 0.5)))?;
        let s = 48 * scale;
        ensure!(y.shape() == [1, 3, s, s], "x{scale}: {:?}", y.shape());
    }
    Ok(())
}

fn l1_values() -> std::result::Result<(), String> {
    let mut t = Tape::<f64>::new();
    let sr = t.param(t64(&[1, 1, 1, 2], &[1.0, 3.0]));
    let hr = t.constant(t64(&[1, 1, 1, 2], &[0.0, 0.0]));
    let l = ok(t.l1_mean(sr, hr))?;
    ensure!(t.value(l).data() == [2.0], "diffs [1,3]");
    let same = ok(t.l1_mean(sr, sr))?;
    ensure!(t.value(same).data() == [0.0], "sr == hr");
    let mut t = Tape::<f64>::new();
    let sr = t.param(t64(&[1, 1, 1, 2], &[0.5, -0.5]));
    let hr = t.constant(Tensor::zeros([1, 1, 1, 2]));
    let l = ok(t.l1_mean(sr, hr))?;
    ok(t.backward(l))?;
    ensure!(t.grad(sr) == Some(&[0.5, -0.5][..]), "{:?}", t.grad(sr));
    Ok(())
}

fn byte_rounding() -> std::result::Result<(), String> {
    let img = ok(ImageF32::new(1, 1, 1, vec![0.5]).map_err(Into::into))?;
    ensure!(img.to_u8().pixels == [128], "0.5 -> {:?}", img.to_u8().pixels);
    Ok(())
}

fn psnr_cases() -> std::result::Result<(), String> {
    let a = ImageF32::filled(3, 8, 8, 100.0);
    let b = ImageF32::filled(3, 8, 8, 101.0);
    let p = ok(psnr(&a, &b, 255.0).map_err(Into::into))?;
    ensure!(close(p, 48.1308, 1e-3), "uniform difference 1: {p}");
    ensure!(ok(psnr(&a, &a, 255.0).map_err(Into::into))?.is_infinite(), "identical");
    let c = ImageF32::filled(3, 8, 8, 0.3);
    let d1 = ImageF32::filled(3, 8, 8, 0.5);
    let d2 = ImageF32::filled(3, 8, 8, 0.4);
    let gain = ok(psnr(&c, &d2, 1.0).map_err(Into::into))? - ok(psnr(&c, &d1, 1.0).map_err(Into::into))?;
    ensure!(close(gain, 10.0 * 4f64.log10(), 1e-4), "halved error gained {gain}");
    Ok(())
}

fn ssim_cases() -> std::result::Result<(), String> {
    let x = random_tensor(&[3, 16, 16], 0.5, 21);
    let a = ImageF32 { channels: 3, height: 16, width: 16, data: x.data().iter().map(|&v| (v + 0.5) as f32).collect() };
    let y = random_tensor(&[3, 16, 16], 0.5, 22);
    let b = ImageF32 { data: y.data().iter().map(|&v| (v + 0.5) as f32).collect(), ..a.clone() };
    ensure!(ok(ssim(&a, &a).map_err(Into::into))? == 1.0, "ssim(a,a)");
    let ab = ok(ssim(&a, &b).map_err(Into::into))?;
    let ba = ok(ssim(&b, &a).map_err(Into::into))?;
    ensure!(close(ab, ba, 1e-9), "asymmetric");
    let c1 = ImageF32::filled(3, 11, 11, 0.5);
    let c2 = ImageF32::filled(3, 11, 11, 0.25);
    let v = ok(ssim(&c1, &c2).map_err(Into::into))?;
    ensure!(close(v, 0.8001, 1e-3), "constant images {v}");
    Ok(())
}

fn bicubic_cases() -> std::result::Result<(), String> {
    let c = ImageF32::filled(3, 10, 7, 0.6);
    for (h, w) in [(5, 3), (20, 21), (1, 1)] {
        ensure!(bicubic_resize(&c, h, w).data.iter().all(|&v| (v - 0.6).abs() <= 1e-6), "constant {h}x{w}");
    }
    let x = random_tensor(&[3, 6, 9], 0.5, 23);
    let img = ImageF32 { channels: 3, height: 6, width: 9, data: x.data().iter().map(|&v| v as f32).collect() };
    let same = bicubic_resize(&img, 6, 9);
    ensure!(same.data.iter().zip(&img.data).all(|(a, b)| (a - b).abs() <= 1e-6), "unit scale");
    Ok(())
}

fn bicubic_ramp() -> std::result::Result<(), String> {
    let data: Vec<f32> = (0..64).map(|i| ((i / 8) * 8 + i % 8) as f32 / 63.0).collect();
    let img = ImageF32 { channels: 1, height: 8, width: 8, data };
    let out = bicubic_resize(&img, 4, 4);
    for oy in 0..4 {
        for ox in 0..4 {
            let sy = (oy as f64 + 0.5) * 2.0 - 0.5;
            let sx = (ox as f64 + 0.5) * 2.0 - 0.5;
            let mut acc = 0.0;
            for iy in sy.floor() as i64 - 1..=sy.floor() as i64 + 2 {
                for ix in sx.floor() as i64 - 1..=sx.floor() as i64 + 2 {
                    let v = img.at(0, iy.clamp(0, 7) as usize, ix.clamp(0, 7) as usize) as f64;
                    acc += v * cubic_weight(sy - iy as f64) * cubic_weight(sx - ix as f64);
                }
            }
            ensure!(close(out.at(0, oy, ox) as f64, acc, 1e-5), "({oy},{ox})");
        }
    }
    Ok(())
}

fn degrade_cases() -> std::result::Result<(), String> {
    let hr = ImageF32::filled(3, 256, 256, 0.7);
    let p = ok(degrade(&hr, 3).map_err(Into::into))?;
    ensure!((p.lr.height, p.lr.width, p.hr.height, p.hr.width) == (85, 85, 255, 255), "x3 shapes");
    ensure!(p.lr.data.iter().all(|&v| (v - 0.7).abs() < 1e-6), "constant preserved");
    let p = ok(degrade(&hr, 2).map_err(Into::into))?;
    ensure!((p.lr.height, p.hr.height) == (128, 256), "x2 shapes");
    Ok(())
}

fn split_cases() -> std::result::Result<(), String> {
    ensure!(split_counts(100) == (40, 10, 50), "{:?}", split_counts(100));
    Ok(())
}

fn adam_cases() -> std::result::Result<(), String> {
    let cfg = AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.99, eps: 1e-8 };
    let mut p = ModelParams::from_map(BTreeMap::from([("w".to_string(), t64(&[1], &[0.0]))]));
    let mut s = OptimState::new(&p);
    ok(adam_step(&mut p, BTreeMap::from([("w".to_string(), vec![1.0])]), &mut s, &cfg))?;
    let w = ok(p.get("w"))?.data()[0];
    ensure!(close(-w, 1e-4 / (1.0 + 1e-8), 1e-15), "first step {w}");
    let mut q = ModelParams::from_map(BTreeMap::from([("w".to_string(), t64(&[1], &[0.7]))]));
    let mut s = OptimState::new(&q);
    for _ in 0..10 {
        ok(adam_step(&mut q, BTreeMap::from([("w".to_string(), vec![0.0])]), &mut s, &cfg))?;
    }
    ensure!(ok(q.get("w"))?.data()[0] == 0.7, "zero gradient moved the weight");
    Ok(())
}

fn adam_reference() -> std::result::Result<(), String> {
    let cfg = AdamConfig { lr: 1e-2, beta1: 0.9, beta2: 0.99, eps: 1e-8 };
    let trace = [0.5, -1.0, 2.0, 0.1, -0.3, 0.0, 1.5, -2.5, 0.7, 0.2];
    let mut p = ModelParams::from_map(BTreeMap::from([("w".to_string(), t64(&[1], &[1.0]))]));
    let mut s = OptimState::new(&p);
    let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for (k, &g) in trace.iter().enumerate() {
        ok(adam_step(&mut p, BTreeMap::from([("w".to_string(), vec![g])]), &mut s, &cfg))?;
        m = 0.9 * m + 0.1 * g;
        v = 0.99 * v + 0.01 * g * g;
        let t = (k + 1) as i32;
        w -= 1e-2 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.99f64.powi(t))).sqrt() + 1e-8);
        ensure!(close(ok(p.get("w"))?.data()[0], w, 1e-10), "step {t}");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    #[test]
    fn every_example_holds() {
        let failed: Vec<_> = super::run_selftest().into_iter().filter(|c| !c.passed).collect();
        assert!(failed.is_empty(), "{failed:#?}");
    }
}
