use crate::error::{config_err, Result};
use crate::nn::{check_dropout, conv1d_out_len, AttentionKind, Conv1dSpec};
use crate::tensor::Scalar;
use serde::{Deserialize, Serialize};

pub const LAYER_RANGE: std::ops::RangeInclusive<usize> = 0..=12;
pub const HEAD_CHOICES: [usize; 5] = [2, 4, 8, 16, 32];
pub const DIM_CHOICES: [usize; 5] = [8, 16, 32, 64, 128];
pub const CONV_COUNT_RANGE: std::ops::RangeInclusive<usize> = 1..=4;

/// Full architecture description of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of stacked encoding layers (N).
    pub layers: usize,
    /// Attention heads (h).
    pub heads: usize,
    /// Embedding dimension (d).
    pub dim: usize,
    /// Representation-layer convolutions, one per branch (K = `convs.len()`).
    pub convs: Vec<Conv1dSpec>,
    #[serde(default)]
    pub attention: AttentionKind,
    /// Inter-feature variant: the second middle block mixes all channels.
    #[serde(default)]
    pub ifc: bool,
    /// When false the merge layer is frozen at its initialization.
    #[serde(default = "default_true")]
    pub merge_trainable: bool,
    #[serde(default = "default_dropout")]
    pub dropout: Scalar,
    /// Lookback window T.
    pub lookback: usize,
    /// Output length H; equals `lookback` for imputation.
    pub horizon: usize,
    /// Number of input channels F.
    pub features: usize,
    /// Accept hyperparameters outside the searched ranges.
    #[serde(default)]
    pub force_ranges: bool,
}

fn default_true() -> bool {
    true
}

fn default_dropout() -> Scalar {
    0.1
}

impl ModelConfig {
    /// A config with auto-generated convolutions and default flags.
    pub fn new(layers: usize, heads: usize, dim: usize, conv_count: usize, lookback: usize, horizon: usize, features: usize) -> Self {
        ModelConfig {
            layers,
            heads,
            dim,
            convs: auto_conv_specs(lookback, conv_count),
            attention: AttentionKind::Vanilla,
            ifc: false,
            merge_trainable: true,
            dropout: default_dropout(),
            lookback,
            horizon,
            features,
            force_ranges: false,
        }
    }

    pub fn conv_count(&self) -> usize {
        self.convs.len()
    }

    /// Rows `D_j` produced by each convolution and their sum `D`.
    pub fn representation_lens(&self) -> Result<(Vec<usize>, usize)> {
        let lens = self
            .convs
            .iter()
            .map(|c| conv1d_out_len(self.lookback, c))
            .collect::<Result<Vec<_>>>()?;
        let total = lens.iter().sum();
        Ok((lens, total))
    }

    pub fn validate(&self) -> Result<()> {
        if !self.force_ranges {
            if !LAYER_RANGE.contains(&self.layers) {
                return Err(config_err!(
                    "layers N={} is outside the supported range 0..=12 (pass force_ranges to override)",
                    self.layers
                ));
            }
            if !HEAD_CHOICES.contains(&self.heads) {
                return Err(config_err!(
                    "heads h={} must be one of {:?} (pass force_ranges to override)",
                    self.heads,
                    HEAD_CHOICES
                ));
            }
            if !DIM_CHOICES.contains(&self.dim) {
                return Err(config_err!(
                    "dim d={} must be one of {:?} (pass force_ranges to override)",
                    self.dim,
                    DIM_CHOICES
                ));
            }
            if !CONV_COUNT_RANGE.contains(&self.convs.len()) {
                return Err(config_err!(
                    "{} representation convolutions given; between 1 and 4 are supported (pass force_ranges to override)",
                    self.convs.len()
                ));
            }
        }
        if self.convs.is_empty() {
            return Err(config_err!("at least one representation convolution is required"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(config_err!("dim d={} is not divisible by h={} heads", self.dim, self.heads));
        }
        if self.dim % 2 != 0 {
            return Err(config_err!("dim d={} must be even for the positional encoding", self.dim));
        }
        if self.lookback == 0 || self.horizon == 0 || self.features == 0 {
            return Err(config_err!("lookback, horizon and features must all be positive"));
        }
        check_dropout(self.dropout)?;
        for spec in &self.convs {
            spec.validate(self.dim)?;
            conv1d_out_len(self.lookback, spec)?;
            let geo = spec.geometry();
            let d = geo.out_len(self.lookback)?;
            let natural = geo.transposed_len(d);
            if natural > self.lookback {
                return Err(config_err!(
                    "conv {:?} cannot be inverted to length {}: transposed output is {} long",
                    spec,
                    self.lookback,
                    natural
                ));
            }
        }
        Ok(())
    }

    /// Single `s=3, dilation=1` convolution.
    pub fn ablation_r1(&self) -> Self {
        ModelConfig { convs: vec![Conv1dSpec::new(3, 1)], ..self.clone() }
    }

    /// Single kernel-size-one convolution: position-wise weighting only.
    pub fn ablation_r0(&self) -> Self {
        ModelConfig { convs: vec![Conv1dSpec::new(1, 1)], ..self.clone() }
    }

    /// Frozen merge layer.
    pub fn ablation_no_merge(&self) -> Self {
        ModelConfig { merge_trainable: false, ..self.clone() }
    }
}

/// Convolution layout that spans from ~3 input values up to roughly two
/// thirds of the lookback, with geometrically spaced coverage in between.
pub fn auto_conv_specs(lookback: usize, count: usize) -> Vec<Conv1dSpec> {
    const MAX_KERNEL: usize = 8;
    let smallest = 3.min(lookback).max(1);
    let largest = ((lookback as f64 * 0.65).round() as usize).clamp(smallest, lookback);
    (0..count)
        .map(|j| {
            let coverage = if count == 1 {
                smallest
            } else {
                let frac = j as f64 / (count - 1) as f64;
                (smallest as f64 * (largest as f64 / smallest as f64).powf(frac)).round() as usize
            };
            let kernel = coverage.clamp(1, MAX_KERNEL);
            let dilation = if kernel > 1 { (coverage - 1).div_ceil(kernel - 1).max(1) } else { 1 };
            // Keep the field inside the lookback after rounding up the dilation.
            let dilation = if dilation * (kernel - 1) + 1 > lookback { (lookback - 1) / (kernel - 1).max(1) } else { dilation };
            Conv1dSpec::new(kernel, dilation.max(1))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auto_specs_span_small_to_large() {
        for t in [32, 96, 192, 336] {
            for k in 2..=4 {
                let specs = auto_conv_specs(t, k);
                assert_eq!(specs.len(), k);
                assert_eq!(specs[0].receptive_field(), 3);
                let big = specs.last().unwrap().receptive_field() as f64 / t as f64;
                assert!((0.5..=0.8).contains(&big), "T={t} K={k}: largest covers {big}");
                let cfg = ModelConfig::new(1, 2, 8, k, t, 8, 1);
                cfg.validate().unwrap();
            }
        }
    }

    #[test]
    fn range_checks_and_force_flag() {
        let mut cfg = ModelConfig::new(13, 4, 16, 2, 96, 96, 7);
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("0..=12"), "{err}");
        cfg.force_ranges = true;
        cfg.validate().unwrap();

        let mut cfg = ModelConfig::new(2, 3, 16, 2, 96, 96, 7);
        assert!(cfg.validate().is_err());
        cfg.force_ranges = true;
        // Still not divisible.
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn oversized_conv_is_rejected() {
        let mut cfg = ModelConfig::new(1, 2, 8, 1, 20, 4, 1);
        cfg.convs = vec![Conv1dSpec::new(8, 4)];
        assert!(cfg.validate().unwrap_err().to_string().contains("T=20"));
    }

    #[test]
    fn ablations_only_touch_their_fields() {
        let base = ModelConfig::new(2, 4, 16, 3, 96, 96, 7);
        let r0 = base.ablation_r0();
        assert_eq!(r0.convs, vec![Conv1dSpec::new(1, 1)]);
        assert_eq!(r0.convs[0].stride(), 1);
        assert_eq!(base.ablation_r1().convs, vec![Conv1dSpec::new(3, 1)]);
        let nm = base.ablation_no_merge();
        assert!(!nm.merge_trainable);
        assert_eq!(nm.convs, base.convs);
    }
}
