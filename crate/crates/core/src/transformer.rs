//! Patch embedding, multi-head attention, the spatial-gate feed-forward
//! network and the pre-norm encoder/decoder stacks.

use crate::error::{Error, Result};
use crate::params::{apply_conv, apply_layer_norm, apply_linear, Init, Scope, SpecBuilder};
use crate::tensor::{Real, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub patch_h: usize,
    pub patch_w: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_encoders: usize,
    pub num_decoders: usize,
    pub sgfn_expand: usize,
    pub use_positional_embedding: bool,
    /// Side of the learned positional table; a token grid up to
    /// `pos_grid × pos_grid` can be embedded.
    pub pos_grid: usize,
}

impl TransformerConfig {
    pub fn toy() -> Self {
        Self {
            patch_h: 4,
            patch_w: 4,
            embed_dim: 64,
            num_heads: 4,
            num_encoders: 2,
            num_decoders: 2,
            sgfn_expand: 2,
            use_positional_embedding: true,
            pos_grid: 32,
        }
    }

    pub fn paper_scale() -> Self {
        Self {
            embed_dim: 256,
            num_heads: 8,
            num_encoders: 8,
            num_decoders: 1,
            ..Self::toy()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads.max(1)
    }

    pub fn sgfn_hidden(&self) -> usize {
        self.sgfn_expand * self.embed_dim
    }

    pub fn validate(&self, errors: &mut Vec<String>) {
        if self.patch_h == 0 || self.patch_w == 0 {
            errors.push("transformer patch size must be >= 1".into());
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            errors.push(format!(
                "transformer.embed_dim ({}) must be a positive multiple of num_heads ({})",
                self.embed_dim, self.num_heads
            ));
        }
        if self.sgfn_hidden() == 0 || self.sgfn_hidden() % 2 != 0 {
            errors.push(format!("sgfn hidden width {} must be even and positive", self.sgfn_hidden()));
        }
        if self.use_positional_embedding && self.pos_grid == 0 {
            errors.push("transformer.pos_grid must be >= 1".into());
        }
    }

    /// Patch embedding for `channels`-deep maps cut into `patch` tiles.
    pub fn embed_specs(&self, b: &mut SpecBuilder, channels: usize, patch: (usize, usize)) {
        let raw = channels * patch.0 * patch.1;
        b.push("proj", [raw, self.embed_dim], Init::KaimingUniform { fan_in: raw });
        if self.use_positional_embedding {
            b.push("pos", [self.pos_grid, self.pos_grid, self.embed_dim], Init::Normal { std: 0.02 });
        }
    }

    pub fn unembed_specs(&self, b: &mut SpecBuilder, channels: usize, patch: (usize, usize)) {
        let raw = channels * patch.0 * patch.1;
        b.push("proj", [self.embed_dim, raw], Init::KaimingUniform { fan_in: self.embed_dim });
    }

    pub fn attention_specs(&self, b: &mut SpecBuilder) {
        let d = self.embed_dim;
        for name in ["q", "k", "v", "o"] {
            b.linear(name, d, d);
        }
    }

    pub fn sgfn_specs(&self, b: &mut SpecBuilder) {
        let (d, hidden) = (self.embed_dim, self.sgfn_hidden());
        b.linear("fc1", d, hidden);
        b.conv("dw", hidden / 2, 1, 3);
        b.linear("fc2", hidden / 2, d);
    }

    pub fn encoder_specs(&self, b: &mut SpecBuilder) {
        for i in 0..self.num_encoders {
            b.scope(&format!("blocks.{i}"), |b| {
                b.layer_norm("ln1", self.embed_dim);
                b.scope("attn", |b| self.attention_specs(b));
                b.layer_norm("ln2", self.embed_dim);
                b.scope("sgfn", |b| self.sgfn_specs(b));
            });
        }
    }

    pub fn decoder_specs(&self, b: &mut SpecBuilder) {
        for i in 0..self.num_decoders {
            b.scope(&format!("blocks.{i}"), |b| {
                b.layer_norm("ln1", self.embed_dim);
                b.scope("self_attn", |b| self.attention_specs(b));
                b.layer_norm("ln2", self.embed_dim);
                b.layer_norm("ln_mem", self.embed_dim);
                b.scope("cross_attn", |b| self.attention_specs(b));
                b.layer_norm("ln3", self.embed_dim);
                b.scope("sgfn", |b| self.sgfn_specs(b));
            });
        }
    }

    /// Parameter-name suffixes of every block's output projection; zeroing
    /// them turns each residual block into the identity.
    pub const OUTPUT_PROJECTIONS: [&'static str; 4] =
        ["attn.o.weight", "attn.o.bias", "sgfn.fc2.weight", "sgfn.fc2.bias"];
}

/// Tokens `[N,T,D]` plus the layout needed to undo the patching.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    /// Token grid `(H/P_h, W/P_w)`.
    pub grid: (usize, usize),
    /// `(C, H, W)` of the embedded feature map.
    pub source_shape: (usize, usize, usize),
}

impl TokenSequence {
    pub fn with_tokens(self, tokens: Var) -> Self {
        Self { tokens, ..self }
    }

    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Cuts `f: [N,C,H,W]` into non-overlapping patches and projects them.
///
/// Each patch is flattened channel-major (channel, then row, then column)
/// and tokens are numbered row-major over the patch grid.
pub fn patch_embed<T: Real>(
    tape: &mut Tape<T>,
    f: Var,
    patch: (usize, usize),
    cfg: &TransformerConfig,
    scope: &Scope,
) -> Result<TokenSequence> {
    let s = tape.shape(f).to_vec();
    if s.len() != 4 {
        return Err(Error::InvalidShape { shape: s, reason: "patch_embed expects [N,C,H,W]".into() });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ph, pw) = patch;
    if ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0 {
        return Err(Error::PatchDivisibility { h, w, ph, pw });
    }
    let (gh, gw) = (h / ph, w / pw);
    let x = tape.reshape(f, [n, c, gh, ph, gw, pw])?;
    let x = tape.permute(x, &[0, 2, 4, 1, 3, 5])?;
    let x = tape.reshape(x, [n, gh * gw, c * ph * pw])?;
    let mut tokens = tape.matmul(x, scope.get("proj")?)?;
    if cfg.use_positional_embedding {
        if gh > cfg.pos_grid || gw > cfg.pos_grid {
            return Err(Error::PositionalGrid { gh, gw, max: cfg.pos_grid });
        }
        let pos = tape.grid_crop(scope.get("pos")?, gh, gw)?;
        tokens = tape.add_bias(tokens, pos)?;
    }
    Ok(TokenSequence { tokens, grid: (gh, gw), source_shape: (c, h, w) })
}

/// Projects tokens back to patches and reassembles `[N,C,H,W]`.
pub fn patch_unembed<T: Real>(
    tape: &mut Tape<T>,
    seq: &TokenSequence,
    patch: (usize, usize),
    scope: &Scope,
) -> Result<Var> {
    let s = tape.shape(seq.tokens).to_vec();
    let (c, h, w) = seq.source_shape;
    let (ph, pw) = patch;
    let (gh, gw) = seq.grid;
    if s.len() != 3 || s[1] != gh * gw || gh * ph != h || gw * pw != w {
        return Err(Error::ShapeMismatch { op: "patch_unembed", left: s, right: vec![c, h, w] });
    }
    let n = s[0];
    let x = tape.matmul(seq.tokens, scope.get("proj")?)?;
    let x = tape.reshape(x, [n, gh, gw, c, ph, pw])?;
    let x = tape.permute(x, &[0, 3, 1, 4, 2, 5])?;
    tape.reshape(x, [n, c, h, w])
}

/// Attention output and the `[N,heads,T_q,T_k]` weight tensor.
pub fn multi_head_attention_with_weights<T: Real>(
    tape: &mut Tape<T>,
    q_src: Var,
    kv_src: Var,
    cfg: &TransformerConfig,
    scope: &Scope,
) -> Result<(Var, Var)> {
    let sq = tape.shape(q_src).to_vec();
    let sk = tape.shape(kv_src).to_vec();
    if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] {
        return Err(Error::ShapeMismatch { op: "multi_head_attention", left: sq, right: sk });
    }
    let (n, tq, d) = (sq[0], sq[1], sq[2]);
    let tk = sk[1];
    let heads = cfg.num_heads;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(vec![format!("embed dim {d} is not divisible by {heads} heads")]));
    }
    let dh = d / heads;
    let q = apply_linear(tape, scope, "q", q_src)?;
    let k = apply_linear(tape, scope, "k", kv_src)?;
    let v = apply_linear(tape, scope, "v", kv_src)?;
    let q = tape.reshape(q, [n, tq, heads, dh])?;
    let q = tape.permute(q, &[0, 2, 1, 3])?;
    let k = tape.reshape(k, [n, tk, heads, dh])?;
    let kt = tape.permute(k, &[0, 2, 3, 1])?;
    let v = tape.reshape(v, [n, tk, heads, dh])?;
    let v = tape.permute(v, &[0, 2, 1, 3])?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (dh as f64).sqrt())?;
    let weights = tape.softmax_last_axis(logits)?;
    let ctx = tape.matmul(weights, v)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, [n, tq, d])?;
    let out = apply_linear(tape, scope, "o", ctx)?;
    Ok((out, weights))
}

pub fn multi_head_attention<T: Real>(
    tape: &mut Tape<T>,
    q_src: Var,
    kv_src: Var,
    cfg: &TransformerConfig,
    scope: &Scope,
) -> Result<Var> {
    multi_head_attention_with_weights(tape, q_src, kv_src, cfg, scope).map(|(out, _)| out)
}

/// Spatial-gate feed-forward network.
///
/// `fc1` then GeLU; the hidden state is split in half along channels, the
/// second half runs through a 3×3 depth-wise convolution on the token grid
/// and gates the first half elementwise; `fc2` maps back to `D`.
pub fn sgfn<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    grid: (usize, usize),
    cfg: &TransformerConfig,
    scope: &Scope,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (gh, gw) = grid;
    if s.len() != 3 || s[1] != gh * gw {
        return Err(Error::InvalidShape {
            shape: s,
            reason: format!("token count is not a full {gh}x{gw} grid"),
        });
    }
    let n = s[0];
    let hidden = cfg.sgfn_hidden();
    let half = hidden / 2;
    let h = apply_linear(tape, scope, "fc1", x)?;
    let h = tape.gelu(h)?;
    let x1 = tape.slice(h, 2, 0, half)?;
    let x2 = tape.slice(h, 2, half, half)?;
    let x2 = tape.reshape(x2, [n, gh, gw, half])?;
    let x2 = tape.permute(x2, &[0, 3, 1, 2])?;
    let x2 = apply_conv(tape, scope, "dw", x2, 1, half)?;
    let x2 = tape.permute(x2, &[0, 2, 3, 1])?;
    let x2 = tape.reshape(x2, [n, gh * gw, half])?;
    let gated = tape.mul(x1, x2)?;
    apply_linear(tape, scope, "fc2", gated)
}

/// Pre-norm encoder blocks: `E' = MSA(LN(E)) + E`, `E = SGFN(LN(E')) + E'`.
pub fn encoder_stack<T: Real>(
    tape: &mut Tape<T>,
    e0: &TokenSequence,
    cfg: &TransformerConfig,
    scope: &Scope,
) -> Result<TokenSequence> {
    let mut e = e0.tokens;
    for i in 0..cfg.num_encoders {
        let blk = scope.sub(&format!("blocks.{i}"));
        let normed = apply_layer_norm(tape, &blk, "ln1", e)?;
        let attn = multi_head_attention(tape, normed, normed, cfg, &blk.sub("attn"))?;
        let e1 = tape.add(attn, e)?;
        let normed = apply_layer_norm(tape, &blk, "ln2", e1)?;
        let ff = sgfn(tape, normed, e0.grid, cfg, &blk.sub("sgfn"))?;
        e = tape.add(ff, e1)?;
    }
    Ok(e0.with_tokens(e))
}

/// Pre-norm decoder blocks with self-attention, cross-attention to the
/// normalized `memory`, and SGFN, each wrapped in a residual.
pub fn decoder_stack<T: Real>(
    tape: &mut Tape<T>,
    d0: &TokenSequence,
    memory: &TokenSequence,
    cfg: &TransformerConfig,
    scope: &Scope,
) -> Result<TokenSequence> {
    let sd = tape.shape(d0.tokens).to_vec();
    let sm = tape.shape(memory.tokens).to_vec();
    if sd.len() != 3 || sm.len() != 3 || sd[0] != sm[0] || sd[2] != sm[2] {
        return Err(Error::ShapeMismatch { op: "decoder_stack", left: sd, right: sm });
    }
    let mut d = d0.tokens;
    for i in 0..cfg.num_decoders {
        let blk = scope.sub(&format!("blocks.{i}"));
        let normed = apply_layer_norm(tape, &blk, "ln1", d)?;
        let sa = multi_head_attention(tape, normed, normed, cfg, &blk.sub("self_attn"))?;
        let d1 = tape.add(sa, d)?;
        let q = apply_layer_norm(tape, &blk, "ln2", d1)?;
        let mem = apply_layer_norm(tape, &blk, "ln_mem", memory.tokens)?;
        let ca = multi_head_attention(tape, q, mem, cfg, &blk.sub("cross_attn"))?;
        let d2 = tape.add(ca, d1)?;
        let normed = apply_layer_norm(tape, &blk, "ln3", d2)?;
        let ff = sgfn(tape, normed, d0.grid, cfg, &blk.sub("sgfn"))?;
        d = tape.add(ff, d2)?;
    }
    Ok(d0.with_tokens(d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, project, random_tensor, GradCheckOptions};
    use crate::params::{Bindings, ModelParams};
    use crate::tensor::Tensor;

    fn tiny() -> TransformerConfig {
        TransformerConfig {
            patch_h: 2,
            patch_w: 2,
            embed_dim: 8,
            num_heads: 2,
            num_encoders: 2,
            num_decoders: 2,
            sgfn_expand: 2,
            use_positional_embedding: false,
            pos_grid: 4,
        }
    }

    fn params(f: impl FnOnce(&mut SpecBuilder), seed: u64) -> ModelParams<f64> {
        let mut b = SpecBuilder::new();
        f(&mut b);
        let mut p = ModelParams::initialize(&b.into_specs(), seed).unwrap();
        for (i, (name, t)) in p.iter_mut().enumerate() {
            if name.ends_with("bias") || name.ends_with("beta") {
                t.data_mut().iter_mut().enumerate().for_each(|(j, v)| *v = 0.1 * ((3 * i + j) as f64).cos());
            }
        }
        p
    }

    #[test]
    fn embed_unembed_round_trip_with_identity_projection() {
        let cfg = TransformerConfig { embed_dim: 32, ..tiny() };
        // C=8, 2x2 patches: raw token width 32 = D
        let eye = Tensor::from_fn([32, 32], |i| if i / 32 == i % 32 { 1.0 } else { 0.0 });
        let p = ModelParams::from_map(
            [("embed.proj".to_string(), eye.clone()), ("unembed.proj".to_string(), eye)].into(),
        );
        let x = random_tensor(&[2, 8, 4, 6], 1.0, 3);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let seq = patch_embed(&mut tape, xv, (2, 2), &cfg, &b.root().sub("embed")).unwrap();
        assert_eq!(tape.shape(seq.tokens), &[2, 6, 32]);
        let back = patch_unembed(&mut tape, &seq, (2, 2), &b.root().sub("unembed")).unwrap();
        assert_eq!(tape.value(back), &x);
    }

    #[test]
    fn patch_divisibility_error_names_extents() {
        let cfg = tiny();
        let p = params(|b| b.scope("embed", |b| cfg.embed_specs(b, 3, (2, 2))), 0);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros([1, 3, 5, 4]));
        let err = patch_embed(&mut tape, x, (2, 2), &cfg, &b.root().sub("embed")).unwrap_err();
        assert!(err.to_string().contains("5x4"), "{err}");
    }

    #[test]
    fn single_key_attention_ignores_query() {
        let cfg = tiny();
        let p = params(|b| cfg.attention_specs(b), 4);
        let mut outs = Vec::new();
        for seed in [1, 2] {
            let mut tape = Tape::new();
            let b = p.bind(&mut tape, false);
            let q = tape.constant(random_tensor(&[1, 3, 8], 1.0, seed));
            let kv = tape.constant(random_tensor(&[1, 1, 8], 1.0, 99));
            let out = multi_head_attention(&mut tape, q, kv, &cfg, &b.root()).unwrap();
            outs.push(tape.value(out).clone());
        }
        assert!(outs[0].max_abs_diff(&outs[1]) < 1e-12);
        let row = &outs[0].data()[..8];
        assert!(outs[0].data().chunks(8).all(|r| r.iter().zip(row).all(|(a, b)| (a - b).abs() < 1e-12)));
    }

    #[test]
    fn sgfn_zero_depthwise_gives_bias() {
        let cfg = tiny();
        let mut p = params(|b| cfg.sgfn_specs(b), 5);
        p.zero_matching(&["dw.weight", "dw.bias"]);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let x = tape.constant(random_tensor(&[1, 6, 8], 1.0, 2));
        let out = sgfn(&mut tape, x, (2, 3), &cfg, &b.root()).unwrap();
        let bias = p.get("fc2.bias").unwrap().data();
        for row in tape.value(out).data().chunks(8) {
            assert_eq!(row, bias);
        }
        let x = tape.constant(random_tensor(&[1, 5, 8], 1.0, 2));
        assert!(sgfn(&mut tape, x, (2, 3), &cfg, &b.root()).is_err());
    }

    #[test]
    fn zeroed_output_projections_make_stacks_identity() {
        let cfg = tiny();
        let mut p = params(
            |b| {
                b.scope("enc", |b| cfg.encoder_specs(b));
                b.scope("dec", |b| cfg.decoder_specs(b));
            },
            6,
        );
        p.zero_matching(&TransformerConfig::OUTPUT_PROJECTIONS);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let x = tape.constant(random_tensor(&[1, 4, 8], 1.0, 7));
        let m = tape.constant(random_tensor(&[1, 4, 8], 1.0, 8));
        let seq = TokenSequence { tokens: x, grid: (2, 2), source_shape: (2, 4, 4) };
        let mem = seq.with_tokens(m);
        let e = encoder_stack(&mut tape, &seq, &cfg, &b.root().sub("enc")).unwrap();
        let d = decoder_stack(&mut tape, &seq, &mem, &cfg, &b.root().sub("dec")).unwrap();
        assert!(tape.value(e.tokens).max_abs_diff(tape.value(x)) < 1e-12);
        assert!(tape.value(d.tokens).max_abs_diff(tape.value(x)) < 1e-12);
    }

    #[test]
    fn encoder_gradcheck() {
        let cfg = tiny();
        let p = params(|b| cfg.encoder_specs(b), 9);
        let names: Vec<String> = p.names().cloned().collect();
        let mut inputs = vec![random_tensor(&[1, 4, 8], 1.0, 10)];
        inputs.extend(p.iter().map(|(_, t)| t.clone()));
        let report = grad_check(
            "encoder_stack",
            &inputs,
            |tape, vars| {
                let b = Bindings::from_pairs(names.iter().cloned().zip(vars[1..].iter().copied()));
                let seq = TokenSequence { tokens: vars[0], grid: (2, 2), source_shape: (2, 4, 4) };
                let out = encoder_stack(tape, &seq, &cfg, &b.root())?;
                project(tape, out.tokens, 2)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{report} {:?}", report.worst);
    }
}
