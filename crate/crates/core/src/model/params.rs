use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub(crate) fn insert(&mut self, name: String, tensor: Tensor<f32>) -> Result<ParamId> {
        if self.names.contains(&name) {
            return Err(Error::Integrity(format!("parameter {name} registered twice")));
        }
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(ParamId(self.tensors.len() - 1))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct DownsampleIds {
    /// Channel norm before the convolution (stages 2 to 4).
    pub pre_norm: Option<NormIds>,
    pub weight: ParamId,
    pub bias: ParamId,
    /// Channel norm after the convolution (stem only).
    pub post_norm: Option<NormIds>,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvNextIds {
    pub dw_weight: ParamId,
    pub dw_bias: ParamId,
    pub norm: NormIds,
    pub expand: LinearIds,
    pub project: LinearIds,
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForwardIds {
    pub norm: NormIds,
    pub expand: LinearIds,
    pub project: LinearIds,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionIds {
    pub norm: NormIds,
    pub query: LinearIds,
    pub key: LinearIds,
    pub value: LinearIds,
    pub out: LinearIds,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvModuleIds {
    pub norm: NormIds,
    pub expand: LinearIds,
    pub dw_weight: ParamId,
    pub dw_bias: ParamId,
    pub mid_norm: NormIds,
    pub project: LinearIds,
}

#[derive(Clone, Copy, Debug)]
pub struct ConformerIds {
    pub ff1: FeedForwardIds,
    pub attention: AttentionIds,
    pub conv: ConvModuleIds,
    pub ff2: FeedForwardIds,
    pub norm: NormIds,
}

#[derive(Clone, Debug)]
pub struct StageIds {
    pub downsample: DownsampleIds,
    pub blocks: Vec<ConvNextIds>,
}

/// Handles into the store, arranged like the network.
#[derive(Clone, Debug)]
pub struct Layout {
    pub stages: Vec<StageIds>,
    pub conformer: Vec<ConformerIds>,
    pub sex: Option<[LinearIds; 2]>,
    pub head: [LinearIds; 2],
}

/// Model parameters plus the target scaling applied to the head output.
#[derive(Clone, Debug)]
pub struct SfcNextParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub layout: Layout,
    /// Prediction is `target_mean + target_std * head_output`.
    pub target_mean: f64,
    pub target_std: f64,
}

const INIT_STD: f64 = 0.02;

enum Init {
    Normal,
    Zeros,
    Ones,
}

struct Builder<'a> {
    store: ParamStore,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl Builder<'_> {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let values = match (init, self.rng.as_deref_mut()) {
            (Init::Normal, Some(rng)) => {
                let normal = Normal::new(0.0, INIT_STD).expect("valid std");
                (0..n)
                    .map(|_| truncated(&normal, rng) as f32)
                    .collect()
            }
            (Init::Ones, _) => vec![1.0; n],
            _ => vec![0.0; n],
        };
        self.store.insert(name, Tensor::new(shape, values)?)
    }

    fn linear(&mut self, name: &str, f_in: usize, f_out: usize, zero: bool) -> Result<LinearIds> {
        let init = if zero { Init::Zeros } else { Init::Normal };
        Ok(LinearIds {
            weight: self.add(format!("{name}.weight"), vec![f_out, f_in], init)?,
            bias: self.add(format!("{name}.bias"), vec![f_out], Init::Zeros)?,
        })
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<NormIds> {
        Ok(NormIds {
            gamma: self.add(format!("{name}.gamma"), vec![c], Init::Ones)?,
            beta: self.add(format!("{name}.beta"), vec![c], Init::Zeros)?,
        })
    }
}

/// Draws from `normal` conditioned on lying within two standard deviations.
fn truncated(normal: &Normal<f64>, rng: &mut impl Rng) -> f64 {
    loop {
        let v = normal.sample(rng);
        if v.abs() <= 2.0 * INIT_STD {
            return v;
        }
    }
}

fn build(config: &ModelConfig, rng: Option<&mut ChaCha8Rng>) -> Result<(ParamStore, Layout)> {
    config.validate()?;
    let mut b = Builder {
        store: ParamStore::default(),
        rng,
    };
    let ch = config.stage_channels;
    let (k, dk) = (config.dw_kernel, config.down_kernel);
    let mut stages = Vec::with_capacity(4);
    for s in 0..4 {
        let c_in = if s == 0 { 1 } else { ch[s - 1] };
        let pre_norm = if s == 0 {
            None
        } else {
            Some(b.norm(&format!("stage{s}.down.norm"), c_in)?)
        };
        let weight = b.add(
            format!("stage{s}.down.weight"),
            vec![ch[s], c_in, dk, dk, dk],
            Init::Normal,
        )?;
        let bias = b.add(format!("stage{s}.down.bias"), vec![ch[s]], Init::Zeros)?;
        let post_norm = if s == 0 {
            Some(b.norm("stage0.down.post_norm", ch[s])?)
        } else {
            None
        };
        let downsample = DownsampleIds {
            pre_norm,
            weight,
            bias,
            post_norm,
        };
        let mut blocks = Vec::with_capacity(config.stage_blocks[s]);
        for j in 0..config.stage_blocks[s] {
            let p = format!("stage{s}.block{j}");
            let hidden = ch[s] * config.block_expansion;
            blocks.push(ConvNextIds {
                dw_weight: b.add(format!("{p}.dw.weight"), vec![ch[s], 1, k, k, k], Init::Normal)?,
                dw_bias: b.add(format!("{p}.dw.bias"), vec![ch[s]], Init::Zeros)?,
                norm: b.norm(&format!("{p}.norm"), ch[s])?,
                expand: b.linear(&format!("{p}.expand"), ch[s], hidden, false)?,
                project: b.linear(&format!("{p}.project"), hidden, ch[s], true)?,
            });
        }
        stages.push(StageIds { downsample, blocks });
    }

    let dm = config.model_dim();
    let mut conformer = Vec::new();
    if config.use_conformer {
        let hidden = dm * config.ff_expansion;
        for j in 0..config.conformer_blocks {
            let p = format!("conformer{j}");
            let ff = |b: &mut Builder, name: &str| -> Result<FeedForwardIds> {
                Ok(FeedForwardIds {
                    norm: b.norm(&format!("{p}.{name}.norm"), dm)?,
                    expand: b.linear(&format!("{p}.{name}.expand"), dm, hidden, false)?,
                    project: b.linear(&format!("{p}.{name}.project"), hidden, dm, true)?,
                })
            };
            let ff1 = ff(&mut b, "ff1")?;
            let attention = AttentionIds {
                norm: b.norm(&format!("{p}.attn.norm"), dm)?,
                query: b.linear(&format!("{p}.attn.query"), dm, dm, false)?,
                key: b.linear(&format!("{p}.attn.key"), dm, dm, false)?,
                value: b.linear(&format!("{p}.attn.value"), dm, dm, false)?,
                out: b.linear(&format!("{p}.attn.out"), dm, dm, true)?,
            };
            let wide = 2 * dm;
            let conv = ConvModuleIds {
                norm: b.norm(&format!("{p}.conv.norm"), dm)?,
                expand: b.linear(&format!("{p}.conv.expand"), dm, wide, false)?,
                dw_weight: b.add(
                    format!("{p}.conv.dw.weight"),
                    vec![wide, config.token_kernel],
                    Init::Normal,
                )?,
                dw_bias: b.add(format!("{p}.conv.dw.bias"), vec![wide], Init::Zeros)?,
                mid_norm: b.norm(&format!("{p}.conv.mid_norm"), wide)?,
                project: b.linear(&format!("{p}.conv.project"), wide, dm, true)?,
            };
            let ff2 = ff(&mut b, "ff2")?;
            let norm = b.norm(&format!("{p}.norm"), dm)?;
            conformer.push(ConformerIds {
                ff1,
                attention,
                conv,
                ff2,
                norm,
            });
        }
    }

    let sex = if config.use_sex_branch {
        let e = config.sex_embed_dim;
        Some([b.linear("sex.fc1", 1, e, false)?, b.linear("sex.fc2", e, e, false)?])
    } else {
        None
    };
    let head = [
        b.linear("head.fc1", config.head_input_dim(), config.head_hidden, false)?,
        b.linear("head.fc2", config.head_hidden, 1, false)?,
    ];
    Ok((
        b.store,
        Layout {
            stages,
            conformer,
            sex,
            head,
        },
    ))
}

/// Number of trainable scalars for `config`.
pub fn param_count(config: &ModelConfig) -> Result<usize> {
    build(config, None).map(|(store, _)| store.numel())
}

/// Seeded initialization: truncated normal (std 0.02) weights, zero biases,
/// unit norm gains, and zero output projections on every residual branch.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<SfcNextParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (store, layout) = build(config, Some(&mut rng))?;
    Ok(SfcNextParams {
        config: config.clone(),
        store,
        layout,
        target_mean: 0.0,
        target_std: 1.0,
    })
}

/// Rebuilds the layout for `config` around tensors loaded from elsewhere,
/// checking names and shapes.
pub(crate) fn assemble(
    config: &ModelConfig,
    tensors: Vec<(String, Tensor<f32>)>,
    target_mean: f64,
    target_std: f64,
) -> Result<SfcNextParams> {
    let (template, layout) = build(config, None)?;
    if template.len() != tensors.len() {
        return Err(Error::Integrity(format!(
            "expected {} parameter arrays, found {}",
            template.len(),
            tensors.len()
        )));
    }
    let mut store = ParamStore::default();
    for ((name, t), (want_name, want)) in tensors
        .into_iter()
        .zip(template.names().iter().zip(template.tensors()))
    {
        if &name != want_name || t.shape() != want.shape() {
            return Err(Error::Integrity(format!(
                "parameter {name} {:?} does not match expected {want_name} {:?}",
                t.shape(),
                want.shape()
            )));
        }
        store.insert(name, t)?;
    }
    Ok(SfcNextParams {
        config: config.clone(),
        store,
        layout,
        target_mean,
        target_std,
    })
}
