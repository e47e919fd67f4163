//! Channel and spatial attention feature extraction.
//!
//! A stage is a 3×3 convolution followed by two multiplicative gates:
//! a per-channel gate computed from the summed global max and mean pools
//! through a shared bottleneck MLP, then a per-pixel gate computed from the
//! summed cross-channel max and mean maps through a single 7×7 convolution.

use crate::error::{Error, Result};
use crate::params::{apply_conv, apply_linear, Scope, SpecBuilder};
use crate::tensor::{PoolMode, Real, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct CsaConfig {
    pub channels: usize,
    pub reduction: usize,
    pub spatial_kernel: usize,
    /// Add the stage input to the gated output.
    pub stage_residual: bool,
}

impl CsaConfig {
    pub fn new(channels: usize) -> Self {
        Self { channels, reduction: 16, spatial_kernel: 7, stage_residual: true }
    }

    pub fn hidden(&self) -> usize {
        (self.channels / self.reduction.max(1)).max(1)
    }

    pub fn validate(&self, errors: &mut Vec<String>) {
        if self.channels == 0 {
            errors.push("csa.channels must be >= 1".into());
        }
        if self.reduction == 0 {
            errors.push("csa.reduction must be >= 1".into());
        }
        if self.spatial_kernel % 2 == 0 {
            errors.push(format!("csa.spatial_kernel must be odd, got {}", self.spatial_kernel));
        }
    }

    /// Declares `ca.fc1`, `ca.fc2` and `sa.conv`.
    pub fn block_specs(&self, b: &mut SpecBuilder) {
        let (c, hidden, k) = (self.channels, self.hidden(), self.spatial_kernel);
        b.scope("ca", |b| {
            b.linear("fc1", c, hidden);
            b.linear("fc2", hidden, c);
        });
        b.scope("sa", |b| b.conv("conv", 1, 1, k));
    }

    /// Declares the stage convolution plus the attention block.
    pub fn stage_specs(&self, b: &mut SpecBuilder) {
        b.conv("conv", self.channels, self.channels, 3);
        self.block_specs(b);
    }
}

/// Gate tensors produced while applying a block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionGates {
    /// `[N,C,1,1]`
    pub m_c: Var,
    /// `[N,1,H,W]`
    pub m_s: Var,
}

/// Per-channel gate `σ(FC(ReLU(FC(MP + AP))))`, shape `[N,C,1,1]`.
pub fn channel_attention<T: Real>(tape: &mut Tape<T>, f: Var, cfg: &CsaConfig, scope: &Scope) -> Result<Var> {
    let s = tape.shape(f).to_vec();
    if s.len() != 4 || s[1] != cfg.channels {
        return Err(Error::ShapeMismatch {
            op: "channel_attention",
            left: s,
            right: vec![cfg.channels],
        });
    }
    let (n, c) = (s[0], s[1]);
    let mp = tape.pool(f, PoolMode::ChannelMax)?;
    let ap = tape.pool(f, PoolMode::ChannelAvg)?;
    let pooled = tape.add(mp, ap)?;
    let v = tape.reshape(pooled, [n, c])?;
    let h = apply_linear(tape, scope, "fc1", v)?;
    let h = tape.relu(h)?;
    let fc = apply_linear(tape, scope, "fc2", h)?;
    let gate = tape.sigmoid(fc)?;
    tape.reshape(gate, [n, c, 1, 1])
}

/// Per-pixel gate `σ(Conv(MP + AP))` over channels, shape `[N,1,H,W]`.
pub fn spatial_attention<T: Real>(tape: &mut Tape<T>, f: Var, cfg: &CsaConfig, scope: &Scope) -> Result<Var> {
    let mp = tape.pool(f, PoolMode::SpatialMax)?;
    let ap = tape.pool(f, PoolMode::SpatialAvg)?;
    let pooled = tape.add(mp, ap)?;
    let conv = apply_conv(tape, scope, "conv", pooled, cfg.spatial_kernel / 2, 1)?;
    tape.sigmoid(conv)
}

/// `F' = M_c·F`, `F'' = M_s·F'` with `M_s` computed from `F'`.
pub fn csa_block_with_gates<T: Real>(
    tape: &mut Tape<T>,
    f: Var,
    cfg: &CsaConfig,
    scope: &Scope,
) -> Result<(Var, AttentionGates)> {
    let m_c = channel_attention(tape, f, cfg, &scope.sub("ca"))?;
    let f1 = tape.mul(f, m_c)?;
    let m_s = spatial_attention(tape, f1, cfg, &scope.sub("sa"))?;
    let f2 = tape.mul(f1, m_s)?;
    Ok((f2, AttentionGates { m_c, m_s }))
}

pub fn csa_block<T: Real>(tape: &mut Tape<T>, f: Var, cfg: &CsaConfig, scope: &Scope) -> Result<Var> {
    csa_block_with_gates(tape, f, cfg, scope).map(|(out, _)| out)
}

/// 3×3 convolution, attention block, optional residual from the input.
pub fn csa_fe_stage<T: Real>(tape: &mut Tape<T>, f: Var, cfg: &CsaConfig, scope: &Scope) -> Result<Var> {
    let conv = apply_conv(tape, scope, "conv", f, 1, 1)?;
    let gated = csa_block(tape, conv, cfg, scope)?;
    if cfg.stage_residual {
        tape.add(gated, f)
    } else {
        Ok(gated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, project, random_tensor, GradCheckOptions};
    use crate::params::{Bindings, ModelParams};
    use crate::tensor::Tensor;

    fn setup(cfg: &CsaConfig, seed: u64, stage: bool) -> ModelParams<f64> {
        let mut b = SpecBuilder::new();
        if stage {
            cfg.stage_specs(&mut b);
        } else {
            cfg.block_specs(&mut b);
        }
        let mut p = ModelParams::initialize(&b.into_specs(), seed).unwrap();
        // nonzero biases so they take part in the checks
        for (i, (_, t)) in p.iter_mut().enumerate() {
            if t.ndim() == 1 && t.shape()[0] > 0 {
                t.data_mut().iter_mut().enumerate().for_each(|(j, v)| *v = 0.05 * ((i + j) as f64).sin());
            }
        }
        p
    }

    #[test]
    fn zero_weights_give_half_gates() {
        let cfg = CsaConfig::new(8);
        let mut p = setup(&cfg, 1, false);
        p.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let x = tape.constant(random_tensor(&[2, 8, 5, 5], 1.0, 3));
        let (out, gates) = csa_block_with_gates(&mut tape, x, &cfg, &b.root()).unwrap();
        assert!(tape.value(gates.m_c).data().iter().all(|&v| v == 0.5));
        assert!(tape.value(gates.m_s).data().iter().all(|&v| v == 0.5));
        let xs = tape.value(x).data().to_vec();
        for (o, xv) in tape.value(out).data().iter().zip(xs) {
            assert_eq!(*o, 0.25 * xv);
        }
    }

    #[test]
    fn identical_channels_give_equal_channel_gates() {
        // Identical channels pool to a constant vector; with the output
        // layer treating channels alike (equal columns, equal bias) every
        // gate entry must then coincide.
        let cfg = CsaConfig::new(6);
        let mut p = setup(&cfg, 2, false);
        let hidden = cfg.hidden();
        let w2 = p.get_mut("ca.fc2.weight").unwrap();
        for r in 0..hidden {
            let v = w2.data()[r * 6];
            w2.data_mut()[r * 6..(r + 1) * 6].iter_mut().for_each(|x| *x = v);
        }
        p.get_mut("ca.fc2.bias").unwrap().data_mut().iter_mut().for_each(|x| *x = 0.3);
        let plane = random_tensor(&[1, 1, 4, 4], 1.0, 5);
        let x = Tensor::from_fn([1, 6, 4, 4], |i| plane.data()[i % 16]);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let xv = tape.constant(x);
        let mc = channel_attention(&mut tape, xv, &cfg, &b.root().sub("ca")).unwrap();
        let g = tape.value(mc).data();
        assert_eq!(tape.shape(mc), &[1, 6, 1, 1]);
        assert!(g.iter().all(|&v| v == g[0]));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let cfg = CsaConfig::new(8);
        let p = setup(&cfg, 1, false);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros([1, 4, 3, 3]));
        assert!(matches!(
            channel_attention(&mut tape, x, &cfg, &b.root().sub("ca")),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn stage_with_zero_conv_is_identity() {
        let cfg = CsaConfig::new(8);
        let mut p = setup(&cfg, 4, true);
        p.zero_matching(&["conv.weight", "conv.bias"]);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let x = tape.constant(random_tensor(&[1, 8, 7, 9], 1.0, 8));
        let out = csa_fe_stage(&mut tape, x, &cfg, &b.root()).unwrap();
        assert_eq!(tape.value(out), tape.value(x));
    }

    #[test]
    fn stage_gradcheck() {
        let cfg = CsaConfig::new(8);
        let p = setup(&cfg, 6, true);
        let names: Vec<String> = p.names().cloned().collect();
        let mut inputs = vec![random_tensor(&[1, 8, 8, 8], 1.0, 11)];
        inputs.extend(p.iter().map(|(_, t)| t.clone()));
        let report = grad_check(
            "csa_fe_stage",
            &inputs,
            |tape, vars| {
                let b = Bindings::from_pairs(names.iter().cloned().zip(vars[1..].iter().copied()));
                let out = csa_fe_stage(tape, vars[0], &cfg, &b.root())?;
                project(tape, out, 1)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{report} {:?}", report.worst);
    }
}
