//! The complete super-resolution network and its L1 objective.
//!
//! Pipeline: shallow 3×3 conv → `num_stages` attention stages (each output
//! kept) → subpixel upsampling of the last stage → per-stage encoders on
//! the LR grid and one encoder on the HR grid → a chain of decoders with
//! the HR tokens as queries, cross-attending to stage memories in order →
//! unembedding → 1×1 conv → 3×3 reconstruction conv.

use crate::csa::{csa_fe_stage, CsaConfig};
use crate::error::{Error, Result};
use crate::imaging::resize::bicubic_planar;
use crate::params::{apply_conv, Bindings, ModelParams, ParamSpec, Scope, SpecBuilder};
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::transformer::{decoder_stack, encoder_stack, patch_embed, patch_unembed, TransformerConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub scale: usize,
    pub in_channels: usize,
    pub feat_channels: usize,
    pub num_stages: usize,
    pub csa: CsaConfig,
    pub transformer: TransformerConfig,
    /// Add the bicubic-upscaled input to the output.
    pub global_residual: bool,
}

impl ModelConfig {
    /// Small configuration used by tests and desk-scale runs.
    pub fn toy(scale: usize) -> Self {
        Self {
            scale,
            in_channels: 3,
            feat_channels: 16,
            num_stages: 3,
            csa: CsaConfig::new(16),
            transformer: TransformerConfig::toy(),
            global_residual: false,
        }
    }

    pub fn paper_scale(scale: usize) -> Self {
        Self {
            feat_channels: 64,
            csa: CsaConfig::new(64),
            transformer: TransformerConfig::paper_scale(),
            ..Self::toy(scale)
        }
    }

    pub fn lr_patch(&self) -> (usize, usize) {
        (self.transformer.patch_h, self.transformer.patch_w)
    }

    /// HR patches are the LR ones scaled up, so both grids hold the same
    /// number of tokens.
    pub fn hr_patch(&self) -> (usize, usize) {
        (self.transformer.patch_h * self.scale, self.transformer.patch_w * self.scale)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if !(2..=4).contains(&self.scale) {
            errors.push(format!("model.scale must be 2, 3 or 4, got {}", self.scale));
        }
        if self.num_stages == 0 {
            errors.push("model.num_stages must be >= 1".into());
        }
        if self.in_channels == 0 || self.feat_channels == 0 {
            errors.push("model channel counts must be >= 1".into());
        }
        if self.csa.channels != self.feat_channels {
            errors.push(format!(
                "csa.channels ({}) must equal model.feat_channels ({})",
                self.csa.channels, self.feat_channels
            ));
        }
        self.csa.validate(&mut errors);
        self.transformer.validate(&mut errors);
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Every parameter of the network in a fixed order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = self.feat_channels;
        let t = &self.transformer;
        let mut b = SpecBuilder::new();
        b.conv("shallow", c, self.in_channels, 3);
        for i in 0..self.num_stages {
            b.scope(&format!("stages.{i}"), |b| self.csa.stage_specs(b));
        }
        b.scope("upsample", |b| {
            for (j, r) in upsample_factors(self.scale).iter().enumerate() {
                b.conv(&format!("{j}"), c * r * r, c, 3);
            }
        });
        b.scope("fusion", |b| {
            for i in 0..self.num_stages {
                b.scope(&format!("stage_embed.{i}"), |b| t.embed_specs(b, c, self.lr_patch()));
                b.scope(&format!("stage_encoder.{i}"), |b| t.encoder_specs(b));
            }
            b.scope("hr_embed", |b| t.embed_specs(b, c, self.hr_patch()));
            b.scope("hr_encoder", |b| t.encoder_specs(b));
            for i in 0..self.num_stages {
                b.scope(&format!("decoder.{i}"), |b| t.decoder_specs(b));
            }
            b.scope("unembed", |b| t.unembed_specs(b, c, self.hr_patch()));
        });
        b.conv("reduce", c, c, 1);
        b.conv("reconstruct", self.in_channels, c, 3);
        b.into_specs()
    }
}

/// Subpixel stages: one ×2/×3 shuffle, or two cascaded ×2 for ×4.
pub fn upsample_factors(scale: usize) -> Vec<usize> {
    match scale {
        4 => vec![2, 2],
        s => vec![s],
    }
}

/// Allocates and initializes all parameters; deterministic for `seed`.
pub fn build_model<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    ModelParams::initialize(&cfg.param_specs(), seed)
}

/// Convolution to `C·r²` channels and pixel shuffle, per factor.
pub fn subpixel_upsample<T: Real>(tape: &mut Tape<T>, f: Var, scale: usize, scope: &Scope) -> Result<Var> {
    if !(2..=4).contains(&scale) {
        return Err(Error::Config(vec![format!("unsupported upsampling scale {scale}")]));
    }
    let mut x = f;
    for (j, r) in upsample_factors(scale).into_iter().enumerate() {
        x = apply_conv(tape, scope, &format!("{j}"), x, 1, 1)?;
        x = tape.pixel_shuffle(x, r)?;
    }
    Ok(x)
}

/// Super-resolves `lr: [N,C,h,w]` to `[N,C,s·h,s·w]`.
pub fn forward<T: Real>(tape: &mut Tape<T>, lr: Var, cfg: &ModelConfig, scope: &Scope) -> Result<Var> {
    let s = tape.shape(lr).to_vec();
    if s.len() != 4 || s[1] != cfg.in_channels {
        return Err(Error::ShapeMismatch {
            op: "forward",
            left: s,
            right: vec![cfg.in_channels],
        });
    }
    let (ph, pw) = cfg.lr_patch();
    if s[2] % ph != 0 || s[3] % pw != 0 {
        return Err(Error::PatchDivisibility { h: s[2], w: s[3], ph, pw });
    }
    let t = &cfg.transformer;
    let fusion = scope.sub("fusion");

    let mut f = apply_conv(tape, scope, "shallow", lr, 1, 1)?;
    let mut stage_outputs = Vec::with_capacity(cfg.num_stages);
    for i in 0..cfg.num_stages {
        f = csa_fe_stage(tape, f, &cfg.csa, &scope.sub(&format!("stages.{i}")))?;
        stage_outputs.push(f);
    }
    let hr_feat = subpixel_upsample(tape, f, cfg.scale, &scope.sub("upsample"))?;

    let mut memories = Vec::with_capacity(cfg.num_stages);
    for (i, &fi) in stage_outputs.iter().enumerate() {
        let seq = patch_embed(tape, fi, cfg.lr_patch(), t, &fusion.sub(&format!("stage_embed.{i}")))?;
        memories.push(encoder_stack(tape, &seq, t, &fusion.sub(&format!("stage_encoder.{i}")))?);
    }
    let hr_seq = patch_embed(tape, hr_feat, cfg.hr_patch(), t, &fusion.sub("hr_embed"))?;
    let mut d = encoder_stack(tape, &hr_seq, t, &fusion.sub("hr_encoder"))?;
    for (i, mem) in memories.iter().enumerate() {
        d = decoder_stack(tape, &d, mem, t, &fusion.sub(&format!("decoder.{i}")))?;
    }
    let fused = patch_unembed(tape, &d, cfg.hr_patch(), &fusion.sub("unembed"))?;
    let reduced = apply_conv(tape, scope, "reduce", fused, 0, 1)?;
    let mut out = apply_conv(tape, scope, "reconstruct", reduced, 1, 1)?;

    if cfg.global_residual {
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h * cfg.scale, w * cfg.scale);
        let src: Vec<f64> = tape.value(lr).data().iter().map(|v| v.as_f64()).collect();
        let mut up = Vec::with_capacity(n * c * oh * ow);
        for img in src.chunks(c * h * w) {
            up.extend(bicubic_planar(img, c, h, w, oh, ow).into_iter().map(T::from_f64));
        }
        let up = tape.constant(Tensor::new([n, c, oh, ow], up)?);
        out = tape.add(out, up)?;
    }
    Ok(out)
}

/// Mean absolute error over every element.
pub fn l1_loss<T: Real>(tape: &mut Tape<T>, sr: Var, hr: Var) -> Result<Var> {
    tape.l1_mean(sr, hr)
}

/// Inference without gradient bookkeeping.
pub fn infer<T: Real>(params: &ModelParams<T>, cfg: &ModelConfig, lr: Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bindings = params.bind(&mut tape, false);
    let x = tape.constant(lr);
    let out = forward(&mut tape, x, cfg, &bindings.root())?;
    Ok(tape.value(out).clone())
}

/// Forward, L1 loss and backward for one batch.
///
/// Returns the loss and the gradient of every parameter.
pub fn loss_and_grads<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    lr: Tensor<T>,
    hr: Tensor<T>,
) -> Result<(f64, Vec<(String, Vec<T>)>)> {
    let mut tape = Tape::new();
    let bindings: Bindings = params.bind(&mut tape, true);
    let x = tape.constant(lr);
    let y = tape.constant(hr);
    let sr = forward(&mut tape, x, cfg, &bindings.root())?;
    let loss = l1_loss(&mut tape, sr, y)?;
    tape.backward(loss)?;
    let value = tape.value(loss).data()[0].as_f64();
    let grads = bindings
        .iter()
        .map(|(name, &v)| {
            let g = tape
                .take_grad(v)
                .ok_or_else(|| Error::MissingGradient(name.clone()))?;
            Ok((name.clone(), g))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;

    fn tiny(scale: usize) -> ModelConfig {
        let mut cfg = ModelConfig::toy(scale);
        cfg.feat_channels = 4;
        cfg.csa = CsaConfig { reduction: 2, ..CsaConfig::new(4) };
        cfg.transformer = TransformerConfig {
            patch_h: 2,
            patch_w: 2,
            embed_dim: 8,
            num_heads: 2,
            num_encoders: 1,
            num_decoders: 1,
            pos_grid: 4,
            ..TransformerConfig::toy()
        };
        cfg
    }

    #[test]
    fn rejects_unsupported_scale() {
        let err = build_model::<f32>(&ModelConfig::toy(5), 0).unwrap_err();
        assert!(err.to_string().contains("model.scale"), "{err}");
    }

    #[test]
    fn same_seed_same_params() {
        let cfg = tiny(2);
        let a = build_model::<f32>(&cfg, 7).unwrap();
        let b = build_model::<f32>(&cfg, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, build_model::<f32>(&cfg, 8).unwrap());
    }

    #[test]
    fn output_shapes_for_every_scale() {
        for scale in [2, 3, 4] {
            let cfg = tiny(scale);
            let p = build_model::<f64>(&cfg, 1).unwrap();
            let out = infer(&p, &cfg, random_tensor(&[2, 3, 4, 6], 0.5, 2)).unwrap();
            assert_eq!(out.shape(), &[2, 3, 4 * scale, 6 * scale]);
        }
    }

    #[test]
    fn upsample_shapes_and_zero_weights() {
        let mut b = SpecBuilder::new();
        b.scope("up", |b| b.conv("0", 8 * 9, 8, 3));
        let p = ModelParams::<f64>::initialize(&b.into_specs(), 0).unwrap();
        let mut zeroed = p.clone();
        zeroed.zero_matching(&["weight"]);
        let mut tape = Tape::new();
        let bind = zeroed.bind(&mut tape, false);
        let x = tape.constant(random_tensor(&[1, 8, 6, 6], 1.0, 0));
        let y = subpixel_upsample(&mut tape, x, 3, &bind.root().sub("up")).unwrap();
        assert_eq!(tape.shape(y), &[1, 8, 18, 18]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert!(subpixel_upsample(&mut tape, x, 5, &bind.root().sub("up")).is_err());
    }

    #[test]
    fn scale_four_is_two_doublings() {
        let specs = tiny(4).param_specs();
        let up: Vec<_> = specs.iter().filter(|s| s.name.starts_with("upsample.")).collect();
        assert_eq!(up.len(), 4);
        assert_eq!(up[0].shape, vec![16, 4, 3, 3]);
        assert_eq!(up[2].shape, up[0].shape);
    }

    #[test]
    fn every_parameter_receives_a_gradient() {
        let cfg = tiny(2);
        let p = build_model::<f64>(&cfg, 3).unwrap();
        let (loss, grads) = loss_and_grads(
            &p,
            &cfg,
            random_tensor(&[1, 3, 4, 4], 0.5, 1),
            random_tensor(&[1, 3, 8, 8], 0.5, 2),
        )
        .unwrap();
        assert!(loss > 0.0);
        assert_eq!(grads.len(), p.len());
    }

    #[test]
    fn l1_loss_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::new([1, 1, 1, 2], vec![1.0, 5.0]).unwrap());
        let b = tape.constant(Tensor::new([1, 1, 1, 2], vec![0.0, 2.0]).unwrap());
        let l = l1_loss(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(l).data()[0], 2.0);
        let same = l1_loss(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(same).data()[0], 0.0);
        let c = tape.param(Tensor::new([2], vec![0.5, -0.5]).unwrap());
        let z = tape.constant(Tensor::zeros([2]));
        let l = l1_loss(&mut tape, c, z).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(c).unwrap(), &[0.5, -0.5]);
    }
}
