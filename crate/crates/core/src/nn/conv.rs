use super::{kaiming_uniform, ParamId, ParamStore, Session};
use crate::error::{config_err, Result};
use crate::tensor::{ConvGeometry, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Kernel layout of one representation-layer convolution.
///
/// Stride defaults to the kernel size so windows tile the input without
/// overlap; `stride` overrides that.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conv1dSpec {
    pub kernel: usize,
    #[serde(default = "one")]
    pub dilation: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default = "one")]
    pub groups: usize,
}

fn one() -> usize {
    1
}

impl Conv1dSpec {
    pub fn new(kernel: usize, dilation: usize) -> Self {
        Conv1dSpec { kernel, dilation, stride: None, groups: 1 }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = Some(stride);
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.kernel)
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry { kernel: self.kernel, dilation: self.dilation, stride: self.stride(), groups: self.groups }
    }

    pub fn receptive_field(&self) -> usize {
        self.dilation * (self.kernel.max(1) - 1) + 1
    }

    /// Validates positivity and that `groups` divides `channels`.
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.kernel == 0 || self.dilation == 0 || self.stride() == 0 || self.groups == 0 {
            return Err(config_err!("conv spec {:?}: kernel, dilation, stride and groups must be positive", self));
        }
        if channels % self.groups != 0 {
            return Err(config_err!("conv groups {} do not divide {} channels", self.groups, channels));
        }
        Ok(())
    }
}

/// Output length `D_j` of a convolution over `len` positions.
pub fn conv1d_out_len(len: usize, spec: &Conv1dSpec) -> Result<usize> {
    spec.geometry().out_len(len)
}

/// 1-D convolution over `[n, len, channels]` sequences.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv1dSpec,
}

impl Conv1d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, spec: Conv1dSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate(channels)?;
        let cg = channels / spec.groups;
        let fan_in = cg * spec.kernel;
        let weight = store.add(format!("{name}.weight"), kaiming_uniform(&[channels, cg, spec.kernel], fan_in, rng), true);
        let bias = store.add(format!("{name}.bias"), kaiming_uniform(&[channels], fan_in, rng), true);
        Ok(Conv1d { weight, bias, spec })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.tape.conv1d(x, w, Some(b), self.spec.geometry())
    }
}

/// Transposed twin of [`Conv1d`], zero-padded on the right to a target length.
#[derive(Clone, Debug)]
pub struct ConvTranspose1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv1dSpec,
}

impl ConvTranspose1d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, spec: Conv1dSpec, trainable: bool, rng: &mut impl Rng) -> Result<Self> {
        spec.validate(channels)?;
        let og = channels / spec.groups;
        let fan_in = og * spec.kernel;
        let weight = store.add(format!("{name}.weight"), kaiming_uniform(&[channels, og, spec.kernel], fan_in, rng), trainable);
        let bias = store.add(format!("{name}.bias"), kaiming_uniform(&[channels], fan_in, rng), trainable);
        Ok(ConvTranspose1d { weight, bias, spec })
    }

    pub fn forward(&self, s: &mut Session, x: Var, target_len: usize) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.tape.conv_transpose1d(x, w, Some(b), self.spec.geometry(), target_len)
    }
}
