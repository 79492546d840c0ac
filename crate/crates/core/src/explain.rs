//! Attention back-mapping onto the input timeline.
//!
//! Each EL's attention `[h, D, D]` is reduced to one importance per key
//! (mean over heads and queries), split into the K convolution blocks, and
//! spread back over the input positions each key's window covered with a
//! fixed transposed convolution of uniform weight `1/s_j`. The per-EL
//! timelines are min-max normalized, summed, and normalized again.

use crate::error::{contract_err, dim_err, Result};
use crate::model::{ForwardOutput, Tsrm};
use crate::nn::{Conv1dSpec, Session};
use crate::tensor::{Scalar, Tape, Tensor};
use serde::{Deserialize, Serialize};

pub const DEFAULT_THRESHOLD: f64 = 0.85;

/// Detached attention of one batch element: `[layer][feature]`, each `[h, D, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CapturedAttention {
    pub per_layer: Vec<Vec<Tensor>>,
}

/// Copies the captured weights of batch element `index` off the tape.
pub fn collect_attention(tape: &Tape, out: &ForwardOutput, features: usize, index: usize) -> Result<CapturedAttention> {
    let per_layer = out
        .attention()?
        .iter()
        .map(|&w| {
            let all = tape.value(w);
            if all.shape()[0] < (index + 1) * features {
                return Err(dim_err!("attention {:?} has no batch element {index} with {features} features", all.shape()));
            }
            Ok((0..features).map(|f| all.index0(index * features + f)).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CapturedAttention { per_layer })
}

/// Mean over heads and queries: one importance per key, `[D]`.
pub fn key_importance(weights: &Tensor) -> Result<Vec<f64>> {
    let s = weights.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(dim_err!("attention weights must be [heads, D, D], got {:?}", s));
    }
    let (h, d) = (s[0], s[1]);
    let mut imp = vec![0.0f64; d];
    for row in weights.data().chunks(d) {
        for (acc, &w) in imp.iter_mut().zip(row) {
            *acc += w as f64;
        }
    }
    let scale = 1.0 / (h * d) as f64;
    imp.iter_mut().for_each(|v| *v *= scale);
    Ok(imp)
}

/// Maps per-key importance `[D]` back to a timeline of length `lookback`.
pub fn backmap_importance(importance: &[f64], specs: &[Conv1dSpec], lookback: usize) -> Result<Vec<f64>> {
    let lens = specs
        .iter()
        .map(|s| crate::nn::conv1d_out_len(lookback, s))
        .collect::<Result<Vec<_>>>()?;
    let total: usize = lens.iter().sum();
    if total != importance.len() {
        return Err(dim_err!("attention covers {} keys but the convolutions produce D = {total}", importance.len()));
    }
    let mut timeline = vec![0.0f64; lookback];
    let mut tape = Tape::new();
    let mut offset = 0;
    for (spec, &len) in specs.iter().zip(&lens) {
        let block: Vec<Scalar> = importance[offset..offset + len].iter().map(|&v| v as Scalar).collect();
        offset += len;
        let x = tape.constant(Tensor::new(vec![1, len, 1], block)?);
        let w = tape.constant(Tensor::full(&[1, 1, spec.kernel], 1.0 / spec.kernel as Scalar));
        let geo = Conv1dSpec { groups: 1, ..*spec }.geometry();
        let y = tape.conv_transpose1d(x, w, None, geo, lookback)?;
        for (t, &v) in timeline.iter_mut().zip(tape.value(y).data()) {
            *t += v as f64;
        }
    }
    Ok(timeline)
}

/// [`key_importance`] followed by [`backmap_importance`].
pub fn backmap_attention(weights: &Tensor, specs: &[Conv1dSpec], lookback: usize) -> Result<Vec<f64>> {
    backmap_importance(&key_importance(weights)?, specs, lookback)
}

/// One timeline per head instead of the head mean.
pub fn backmap_attention_per_head(weights: &Tensor, specs: &[Conv1dSpec], lookback: usize) -> Result<Vec<Vec<f64>>> {
    let s = weights.shape();
    if s.len() != 3 {
        return Err(dim_err!("attention weights must be [heads, D, D], got {:?}", s));
    }
    (0..s[0])
        .map(|h| {
            let head = weights.index0(h).reshape(&[1, s[1], s[2]])?;
            backmap_attention(&head, specs, lookback)
        })
        .collect()
}

/// `(x - min) / (max - min)`; an (almost) constant input maps to zeros.
pub fn min_max(x: &[f64]) -> Vec<f64> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 1e-12 * hi.abs().max(lo.abs()).max(1e-300)) {
        return vec![0.0; x.len()];
    }
    x.iter().map(|v| (v - lo) / range).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureReport {
    pub feature: usize,
    pub name: String,
    /// Per EL, normalized to `[0, 1]`.
    pub layers: Vec<Vec<f64>>,
    pub combined: Vec<f64>,
    pub highlights: Vec<usize>,
    /// Input values of the window, when known.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub threshold: f64,
    pub lookback: usize,
    pub layer_count: usize,
    /// Shape of each EL's raw attention for one feature.
    pub raw_shapes: Vec<Vec<usize>>,
    pub features: Vec<FeatureReport>,
}

/// Builds the report from `timelines[layer][feature]`.
pub fn build_report(timelines: &[Vec<Vec<f64>>], threshold: f64, names: &[String]) -> Result<AttentionReport> {
    let layer_count = timelines.len();
    let features = timelines.first().map_or(0, |l| l.len());
    let lookback = timelines.first().and_then(|l| l.first()).map_or(0, |t| t.len());
    if timelines.iter().any(|l| l.len() != features || l.iter().any(|t| t.len() != lookback)) {
        return Err(dim_err!("all timelines must share one feature count and length"));
    }
    let reports = (0..features)
        .map(|f| {
            let layers: Vec<Vec<f64>> = timelines.iter().map(|l| min_max(&l[f])).collect();
            let mut sum = vec![0.0; lookback];
            for l in &layers {
                for (s, v) in sum.iter_mut().zip(l) {
                    *s += v;
                }
            }
            let combined = min_max(&sum);
            let highlights = combined.iter().enumerate().filter(|(_, &v)| v >= threshold).map(|(t, _)| t).collect();
            FeatureReport {
                feature: f,
                name: names.get(f).cloned().unwrap_or_else(|| format!("c{f}")),
                layers,
                combined,
                highlights,
                values: Vec::new(),
            }
        })
        .collect();
    Ok(AttentionReport { threshold, lookback, layer_count, raw_shapes: Vec::new(), features: reports })
}

/// Runs `model` on one window `x: [T, F]` with attention capture and builds
/// the report. `mask` marks imputation cells (already holding the sentinel).
pub fn explain_window(model: &Tsrm, x: &Tensor, mask: Option<&Tensor>, threshold: f64, names: &[String]) -> Result<AttentionReport> {
    let cfg = &model.config;
    if cfg.layers == 0 {
        return Err(contract_err!("a model without encoding layers has no attention to explain"));
    }
    let (t, f) = (cfg.lookback, cfg.features);
    let xb = x.reshape(&[1, t, f])?;
    let mb = mask.map(|m| m.reshape(&[1, t, f])).transpose()?;
    let mut s = Session::eval(&model.params);
    let out = model.forward(&mut s, &xb, mb.as_ref(), true)?;
    let captured = collect_attention(&s.tape, &out, f, 0)?;
    let timelines = captured
        .per_layer
        .iter()
        .map(|layer| layer.iter().map(|w| backmap_attention(w, &cfg.convs, t)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let mut report = build_report(&timelines, threshold, names)?;
    report.raw_shapes = captured.per_layer.iter().map(|l| l[0].shape().to_vec()).collect();
    for fr in &mut report.features {
        fr.values = (0..t).map(|i| x.data()[i * f + fr.feature] as f64).collect();
    }
    Ok(report)
}

impl AttentionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Flat CSV: `t, feature, value, score_EL0.., combined, highlighted`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let err = |e: csv::Error| crate::Error::Data(format!("writing report CSV: {e}"));
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string(), "feature".into(), "value".into()];
        header.extend((0..self.layer_count).map(|n| format!("score_EL{n}")));
        header.extend(["combined".to_string(), "highlighted".into()]);
        w.write_record(&header).map_err(err)?;
        for fr in &self.features {
            for t in 0..self.lookback {
                let mut row = vec![t.to_string(), fr.name.clone(), fr.values.get(t).map_or(String::new(), |v| v.to_string())];
                row.extend(fr.layers.iter().map(|l| l[t].to_string()));
                row.push(fr.combined[t].to_string());
                row.push((fr.highlights.binary_search(&t).is_ok() as u8).to_string());
                w.write_record(&row).map_err(err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
