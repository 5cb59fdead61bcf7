//! The network: a four-stage ConvNeXt backbone with overlapped strided
//! downsampling, a conformer encoder over the last feature map, a sex-feature
//! branch and an MLP regression head.

mod checkpoint;
mod config;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use params::{
    init_params, param_count, AttentionIds, ConformerIds, ConvModuleIds, ConvNextIds,
    DownsampleIds, FeedForwardIds, Layout, LinearIds, NormIds, ParamId, ParamStore, SfcNextParams,
    StageIds,
};

use config::LN_EPS;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

const TO_LAST: [usize; 5] = [0, 2, 3, 4, 1];
const TO_FIRST: [usize; 5] = [0, 4, 1, 2, 3];

/// Parameters recorded on a tape as leaves, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Records every parameter on `tape`, converted to `T`.
pub fn bind<T: Real>(tape: &mut Tape<T>, params: &SfcNextParams, trainable: bool) -> Bound {
    let vars = params
        .store
        .tensors()
        .iter()
        .map(|t| tape.leaf(t.cast::<T>().with_requires_grad(trainable)))
        .collect();
    Bound { vars }
}

fn norm<T: Real>(tape: &mut Tape<T>, b: &Bound, ids: NormIds, x: Var) -> Result<Var> {
    tape.layer_norm(x, b.var(ids.gamma), b.var(ids.beta), LN_EPS)
}

fn linear<T: Real>(tape: &mut Tape<T>, b: &Bound, ids: LinearIds, x: Var) -> Result<Var> {
    tape.linear(x, b.var(ids.weight), Some(b.var(ids.bias)))
}

/// Layer norm over the channel axis of `[N, C, D, H, W]`.
fn channel_norm<T: Real>(tape: &mut Tape<T>, b: &Bound, ids: NormIds, x: Var) -> Result<Var> {
    let last = tape.permute(x, &TO_LAST)?;
    let n = norm(tape, b, ids, last)?;
    tape.permute(n, &TO_FIRST)
}

fn check_channels<T: Real>(tape: &Tape<T>, x: Var, expected: usize) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 5 || s[1] != expected {
        return Err(Error::dim(
            "C_in",
            format!("expected [N, {expected}, D, H, W], got {s:?}"),
        ));
    }
    Ok(())
}

/// Depthwise conv, channel norm, pointwise MLP, residual add.
pub fn convnext_block<T: Real>(
    tape: &mut Tape<T>,
    b: &Bound,
    ids: &ConvNextIds,
    params: &SfcNextParams,
    x: Var,
) -> Result<Var> {
    let c = params.store.get(ids.dw_weight).shape()[0];
    check_channels(tape, x, c)?;
    let h = tape.depthwise_conv3d(x, b.var(ids.dw_weight), Some(b.var(ids.dw_bias)))?;
    let h = tape.permute(h, &TO_LAST)?;
    let h = norm(tape, b, ids.norm, h)?;
    let h = linear(tape, b, ids.expand, h)?;
    let h = tape.gelu(h)?;
    let h = linear(tape, b, ids.project, h)?;
    let h = tape.permute(h, &TO_FIRST)?;
    tape.add(x, h)
}

/// Strided convolution whose kernel exceeds its stride. Stages after the first
/// normalize channels before the convolution; the stem normalizes after it.
pub fn overlapped_downsample<T: Real>(
    tape: &mut Tape<T>,
    b: &Bound,
    ids: &DownsampleIds,
    params: &SfcNextParams,
    x: Var,
) -> Result<Var> {
    let cfg = &params.config;
    let c_in = params.store.get(ids.weight).shape()[1];
    check_channels(tape, x, c_in)?;
    for (axis, &d) in tape.shape(x)[2..].iter().enumerate() {
        if d < cfg.down_kernel {
            return Err(Error::dim(
                ["D", "H", "W"][axis],
                format!("size {d} is smaller than the downsampling kernel {}", cfg.down_kernel),
            ));
        }
    }
    let mut h = x;
    if let Some(n) = ids.pre_norm {
        h = channel_norm(tape, b, n, h)?;
    }
    h = tape.conv3d(
        h,
        b.var(ids.weight),
        Some(b.var(ids.bias)),
        cfg.down_stride,
        cfg.down_padding(),
        1,
    )?;
    if let Some(n) = ids.post_norm {
        h = channel_norm(tape, b, n, h)?;
    }
    Ok(h)
}

fn feed_forward<T: Real>(tape: &mut Tape<T>, b: &Bound, ids: &FeedForwardIds, x: Var) -> Result<Var> {
    let h = norm(tape, b, ids.norm, x)?;
    let h = linear(tape, b, ids.expand, h)?;
    let h = tape.gelu(h)?;
    linear(tape, b, ids.project, h)
}

/// Multi-head self-attention over `[N, T, Dm]`. Returns the branch output
/// and the attention weights `[N * heads, T, T]`.
pub fn self_attention<T: Real>(
    tape: &mut Tape<T>,
    b: &Bound,
    ids: &AttentionIds,
    heads: usize,
    x: Var,
) -> Result<(Var, Var)> {
    let s = tape.shape(x).to_vec();
    let (n, t, dm) = (s[0], s[1], s[2]);
    if dm % heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "model_dim {dm} is not divisible by {heads} heads"
        )));
    }
    let dh = dm / heads;
    let h = norm(tape, b, ids.norm, x)?;
    let split = |tape: &mut Tape<T>, lin: LinearIds| -> Result<Var> {
        let p = linear(tape, b, lin, h)?;
        let p = tape.reshape(p, vec![n, t, heads, dh])?;
        let p = tape.permute(p, &[0, 2, 1, 3])?;
        tape.reshape(p, vec![n * heads, t, dh])
    };
    let q = split(tape, ids.query)?;
    let k = split(tape, ids.key)?;
    let v = split(tape, ids.value)?;
    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.mul_scalar(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = tape.softmax(scores, 2)?;
    let ctx = tape.batch_matmul(attn, v, false)?;
    let ctx = tape.reshape(ctx, vec![n, heads, t, dh])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, vec![n, t, dm])?;
    Ok((linear(tape, b, ids.out, ctx)?, attn))
}

fn conv_module<T: Real>(tape: &mut Tape<T>, b: &Bound, ids: &ConvModuleIds, x: Var) -> Result<Var> {
    let h = norm(tape, b, ids.norm, x)?;
    let h = linear(tape, b, ids.expand, h)?;
    let h = tape.gelu(h)?;
    let h = tape.depthwise_conv1d(h, b.var(ids.dw_weight), b.var(ids.dw_bias))?;
    let h = norm(tape, b, ids.mid_norm, h)?;
    linear(tape, b, ids.project, h)
}

/// Half-step feed-forward, self-attention, convolution module, half-step
/// feed-forward (each residual), then a layer norm.
pub fn conformer_block<T: Real>(
    tape: &mut Tape<T>,
    b: &Bound,
    ids: &ConformerIds,
    heads: usize,
    x: Var,
) -> Result<Var> {
    let f = feed_forward(tape, b, &ids.ff1, x)?;
    let f = tape.mul_scalar(f, 0.5)?;
    let x = tape.add(x, f)?;
    let (a, _) = self_attention(tape, b, &ids.attention, heads, x)?;
    let x = tape.add(x, a)?;
    let c = conv_module(tape, b, &ids.conv, x)?;
    let x = tape.add(x, c)?;
    let f = feed_forward(tape, b, &ids.ff2, x)?;
    let f = tape.mul_scalar(f, 0.5)?;
    let x = tape.add(x, f)?;
    norm(tape, b, ids.norm, x)
}

/// Forward pass recorded on a tape.
pub struct Forward {
    /// Predicted ages, shape `[N]`.
    pub output: Var,
    pub params: Bound,
}

/// Runs the network on `volume` `[N, 1, D, H, W]` and `sex` `[N, 1]`.
/// Parameters are bound as trainable leaves when `trainable` is set.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    params: &SfcNextParams,
    volume: Tensor<T>,
    sex: Tensor<T>,
    trainable: bool,
) -> Result<Forward> {
    let cfg = &params.config;
    let vs = volume.shape().to_vec();
    if vs.len() != 5 || vs[1] != 1 {
        return Err(Error::Shape(format!("volume must be [N, 1, D, H, W], got {vs:?}")));
    }
    let n = vs[0];
    if sex.shape() != [n, 1] {
        return Err(Error::Shape(format!(
            "sex must be [{n}, 1], got {:?}",
            sex.shape()
        )));
    }
    if sex.values().iter().any(|&s| s != T::zero() && s != T::one()) {
        return Err(Error::InvalidArgument("sex values must be 0 or 1".into()));
    }
    let probe = cfg.clone().with_input_dims([vs[2], vs[3], vs[4]]);
    probe.stage_dims()?;

    let b = bind(tape, params, trainable);
    let mut x = tape.constant(volume);
    for stage in &params.layout.stages {
        x = overlapped_downsample(tape, &b, &stage.downsample, params, x)?;
        for block in &stage.blocks {
            x = convnext_block(tape, &b, block, params, x)?;
        }
    }
    let s = tape.shape(x).to_vec();
    let tokens = s[2] * s[3] * s[4];
    let x = tape.permute(x, &TO_LAST)?;
    let mut x = tape.reshape(x, vec![n, tokens, s[1]])?;
    for block in &params.layout.conformer {
        x = conformer_block(tape, &b, block, cfg.attention_heads, x)?;
    }
    let mut features = tape.mean_axis(x, 1)?;
    if let Some([fc1, fc2]) = params.layout.sex {
        let sv = tape.constant(sex);
        let e = linear(tape, &b, fc1, sv)?;
        let e = tape.gelu(e)?;
        let e = linear(tape, &b, fc2, e)?;
        features = tape.concat(&[features, e], 1)?;
    }
    let [h1, h2] = params.layout.head;
    let h = linear(tape, &b, h1, features)?;
    let h = tape.gelu(h)?;
    let h = linear(tape, &b, h2, h)?;
    let h = tape.reshape(h, vec![n])?;
    let h = tape.mul_scalar(h, params.target_std)?;
    let output = tape.add_scalar(h, params.target_mean)?;
    Ok(Forward { output, params: b })
}

/// Forward pass without gradient tracking; returns one age per sample.
pub fn predict(params: &SfcNextParams, volume: Tensor<f32>, sex: Tensor<f32>) -> Result<Vec<f64>> {
    let mut tape = Tape::<f32>::new();
    let f = forward(&mut tape, params, volume, sex, false)?;
    Ok(tape.value(f.output).to_f64_vec())
}

/// Copies gradients of the bound parameters from `tape` into the store.
/// Parameters the loss does not reach get a zero gradient.
pub fn collect_grads(tape: &Tape<f32>, bound: &Bound, store: &mut ParamStore) -> Result<()> {
    for (i, t) in store.tensors_mut().iter_mut().enumerate() {
        let g = match tape.grad(bound.vars[i]) {
            Some(g) => g.to_vec(),
            None => vec![0.0; t.numel()],
        };
        t.set_grad(Some(g))?;
    }
    Ok(())
}
