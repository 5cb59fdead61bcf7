use std::fmt;

use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub stage_blocks: [usize; 4],
    pub stage_channels: [usize; 4],
    pub dw_kernel: usize,
    /// Hidden width multiplier of the ConvNeXt pointwise MLP.
    pub block_expansion: usize,
    pub down_kernel: usize,
    pub down_stride: usize,
    pub conformer_blocks: usize,
    pub attention_heads: usize,
    /// Hidden width multiplier of the conformer feed-forward modules.
    pub ff_expansion: usize,
    /// Kernel of the depthwise 1-D convolution in the conformer.
    pub token_kernel: usize,
    pub sex_embed_dim: usize,
    pub head_hidden: usize,
    pub use_sex_branch: bool,
    pub use_conformer: bool,
    pub input_dims: [usize; 3],
}

pub(crate) const LN_EPS: f64 = 1e-6;

impl ModelConfig {
    /// Small widths for tests and desk-scale training on 24^3 volumes.
    pub fn tiny() -> Self {
        ModelConfig {
            stage_blocks: [1, 1, 3, 1],
            stage_channels: [8, 16, 32, 64],
            dw_kernel: 3,
            block_expansion: 4,
            down_kernel: 3,
            down_stride: 2,
            conformer_blocks: 3,
            attention_heads: 2,
            ff_expansion: 4,
            token_kernel: 3,
            sex_embed_dim: 16,
            head_hidden: 32,
            use_sex_branch: true,
            use_conformer: true,
            input_dims: [24, 24, 24],
        }
    }

    /// Widths for 91x109x91 volumes.
    pub fn full() -> Self {
        ModelConfig {
            stage_channels: [32, 64, 128, 256],
            dw_kernel: 5,
            head_hidden: 64,
            input_dims: [91, 109, 91],
            ..Self::tiny()
        }
    }

    pub fn with_input_dims(mut self, dims: [usize; 3]) -> Self {
        self.input_dims = dims;
        self
    }

    pub fn model_dim(&self) -> usize {
        self.stage_channels[3]
    }

    /// Padding of every downsampling convolution.
    pub fn down_padding(&self) -> usize {
        (self.down_kernel - self.down_stride).div_ceil(2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.down_kernel <= self.down_stride || self.down_stride == 0 {
            return bad(format!(
                "down_kernel {} must exceed down_stride {}",
                self.down_kernel, self.down_stride
            ));
        }
        if self.dw_kernel.is_multiple_of(2) || self.token_kernel.is_multiple_of(2) {
            return bad("depthwise kernels must be odd".into());
        }
        if self.stage_channels.contains(&0)
            || self.block_expansion == 0
            || self.ff_expansion == 0
            || self.sex_embed_dim == 0
            || self.head_hidden == 0
            || self.attention_heads == 0
        {
            return bad("widths and head counts must be positive".into());
        }
        if !self.model_dim().is_multiple_of(self.attention_heads) {
            return bad(format!(
                "model_dim {} is not divisible by {} attention heads",
                self.model_dim(),
                self.attention_heads
            ));
        }
        self.stage_dims().map(|_| ())
    }

    /// Spatial dims after each of the four downsamplings.
    pub fn stage_dims(&self) -> Result<[[usize; 3]; 4]> {
        let mut dims = self.input_dims;
        let mut out = [[0; 3]; 4];
        let (k, s, p) = (self.down_kernel, self.down_stride, self.down_padding());
        for (stage, slot) in out.iter_mut().enumerate() {
            for (axis, d) in dims.iter_mut().enumerate() {
                if *d < k {
                    return Err(Error::dim(
                        ["D", "H", "W"][axis],
                        format!(
                            "stage {} input size {} is smaller than the downsampling kernel {k}",
                            stage + 1,
                            *d
                        ),
                    ));
                }
                *d = (*d + 2 * p - k) / s + 1;
            }
            *slot = dims;
        }
        Ok(out)
    }

    /// Tokens fed to the conformer: positions of the last feature map.
    pub fn token_count(&self) -> Result<usize> {
        Ok(self.stage_dims()?[3].iter().product())
    }

    pub fn head_input_dim(&self) -> usize {
        self.model_dim() + if self.use_sex_branch { self.sex_embed_dim } else { 0 }
    }

    /// `key = value` lines, one per field.
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let four = |a: [usize; 4]| format!("{},{},{},{}", a[0], a[1], a[2], a[3]);
        vec![
            ("stage_blocks".into(), four(self.stage_blocks)),
            ("stage_channels".into(), four(self.stage_channels)),
            ("dw_kernel".into(), self.dw_kernel.to_string()),
            ("block_expansion".into(), self.block_expansion.to_string()),
            ("down_kernel".into(), self.down_kernel.to_string()),
            ("down_stride".into(), self.down_stride.to_string()),
            ("conformer_blocks".into(), self.conformer_blocks.to_string()),
            ("attention_heads".into(), self.attention_heads.to_string()),
            ("ff_expansion".into(), self.ff_expansion.to_string()),
            ("token_kernel".into(), self.token_kernel.to_string()),
            ("sex_embed_dim".into(), self.sex_embed_dim.to_string()),
            ("head_hidden".into(), self.head_hidden.to_string()),
            ("use_sex_branch".into(), self.use_sex_branch.to_string()),
            ("use_conformer".into(), self.use_conformer.to_string()),
            (
                "input_dims".into(),
                format!(
                    "{},{},{}",
                    self.input_dims[0], self.input_dims[1], self.input_dims[2]
                ),
            ),
        ]
    }

    /// Applies one `key = value` setting. Returns `Ok(false)` for keys that are
    /// not model fields.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "profile" => {
                *self = match value {
                    "tiny" => Self::tiny(),
                    "full" => Self::full(),
                    other => return Err(Error::Config(format!("unknown profile {other:?}"))),
                }
            }
            "stage_blocks" => self.stage_blocks = parse_array(key, value)?,
            "stage_channels" => self.stage_channels = parse_array(key, value)?,
            "input_dims" => self.input_dims = parse_array(key, value)?,
            "dw_kernel" => self.dw_kernel = parse(key, value)?,
            "block_expansion" => self.block_expansion = parse(key, value)?,
            "down_kernel" => self.down_kernel = parse(key, value)?,
            "down_stride" => self.down_stride = parse(key, value)?,
            "conformer_blocks" => self.conformer_blocks = parse(key, value)?,
            "attention_heads" => self.attention_heads = parse(key, value)?,
            "ff_expansion" => self.ff_expansion = parse(key, value)?,
            "token_kernel" => self.token_kernel = parse(key, value)?,
            "sex_embed_dim" => self.sex_embed_dim = parse(key, value)?,
            "head_hidden" => self.head_hidden = parse(key, value)?,
            "use_sex_branch" => self.use_sex_branch = parse(key, value)?,
            "use_conformer" => self.use_conformer = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_key_values() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

pub(crate) fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_array<const K: usize>(key: &str, value: &str) -> Result<[usize; K]> {
    let parts: Vec<usize> = value
        .split(|c: char| c == ',' || c == 'x' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("{key} needs {K} comma-separated values, got {value:?}")))
}
