//! Parameter and FLOP accounting.
//!
//! A multiply-add counts as [`CostModel::mac_flops`] operations (2 by default).
//! Elementwise costs per value: ReLU 1, ReLU6 2, Swish 4 (exp, add, divide,
//! multiply), LayerNorm 8 (mean, variance, normalize, affine), residual add 1,
//! sinusoid 1. Bias adds are 1 per output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::DbnPredictor;
use crate::nn::{Activation, LayerSpec, Sequential};
use crate::score::{ScoreArch, ScoreNetwork};
use crate::teacher::{ClassifierArch, ClassifierModel};

const LAYER_NORM_FLOPS: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvKind {
    Standard,
    DepthwiseSeparable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: String,
    pub params: u64,
    pub flops: u64,
}

impl LayerCost {
    fn new(layer: impl Into<String>, params: u64, flops: u64) -> Self {
        Self {
            layer: layer.into(),
            params,
            flops,
        }
    }
}

/// Sum of layer costs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelCost {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

impl ModelCost {
    pub fn from_layers(name: impl Into<String>, layers: &[LayerCost]) -> Self {
        Self {
            name: name.into(),
            params: layers.iter().map(|l| l.params).sum(),
            flops: layers.iter().map(|l| l.flops).sum(),
        }
    }

    /// FLOPs relative to `baseline`.
    pub fn relative_to(&self, baseline: &ModelCost) -> f64 {
        self.flops as f64 / baseline.flops as f64
    }

    pub fn params_relative_to(&self, baseline: &ModelCost) -> f64 {
        self.params as f64 / baseline.params as f64
    }

    pub fn scaled(&self, name: impl Into<String>, times: u64) -> ModelCost {
        ModelCost {
            name: name.into(),
            params: self.params * times,
            flops: self.flops * times,
        }
    }

    pub fn plus(&self, name: impl Into<String>, other: &ModelCost) -> ModelCost {
        ModelCost {
            name: name.into(),
            params: self.params + other.params,
            flops: self.flops + other.flops,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostModel {
    pub mac_flops: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { mac_flops: 2 }
    }
}

fn act_flops(kind: Activation) -> u64 {
    match kind {
        Activation::Relu => 1,
        Activation::Relu6 => 2,
        Activation::Swish => 4,
    }
}

impl CostModel {
    pub fn new(mac_flops: u64) -> Result<Self> {
        if mac_flops == 0 {
            return Err(Error::Config("a multiply-add must cost at least one FLOP".into()));
        }
        Ok(Self { mac_flops })
    }

    /// Dense `d -> h` with bias.
    pub fn dense(&self, d: usize, h: usize) -> LayerCost {
        let (d, h) = (d as u64, h as u64);
        LayerCost::new(format!("dense {d}->{h}"), d * h + h, self.mac_flops * d * h + h)
    }

    /// Stride-1, fully padded, bias-free convolution of an `H x W x C_in` map
    /// with an `h x w` kernel.
    #[allow(clippy::too_many_arguments)]
    pub fn conv(&self, big_h: usize, big_w: usize, h: usize, w: usize, c_in: usize, c_out: usize, kind: ConvKind) -> Result<LayerCost> {
        if [big_h, big_w, h, w, c_in, c_out].contains(&0) {
            return Err(Error::Config("convolution dimensions must be >= 1".into()));
        }
        let [bh, bw, h, w, ci, co] = [big_h, big_w, h, w, c_in, c_out].map(|v| v as u64);
        let hw = h * w;
        let (params, macs, name) = match kind {
            ConvKind::Standard => (hw * ci * co, bh * bw * hw * ci * co, "conv"),
            ConvKind::DepthwiseSeparable => ((hw + co) * ci, (hw + co) * bh * bw * ci, "ds-conv"),
        };
        Ok(LayerCost::new(
            format!("{name} {h}x{w} {ci}->{co} @{bh}x{bw}"),
            params,
            self.mac_flops * macs,
        ))
    }

    /// Cost of one layer given the width of its input.
    pub fn layer(&self, spec: &LayerSpec, width: usize) -> LayerCost {
        match *spec {
            LayerSpec::Dense { input, output, .. } => self.dense(input, output),
            LayerSpec::LayerNorm { dim, affine } => LayerCost::new(
                format!("layer_norm {dim}"),
                if affine { 2 * dim as u64 } else { 0 },
                LAYER_NORM_FLOPS * dim as u64,
            ),
            LayerSpec::Activation { kind } => LayerCost::new(format!("{kind:?} {width}").to_lowercase(), 0, act_flops(kind) * width as u64),
        }
    }

    /// Cost of a layer described in a manifest; unknown layer types are an error.
    pub fn layer_from_json(&self, desc: &serde_json::Value, width: usize) -> Result<LayerCost> {
        match serde_json::from_value::<LayerSpec>(desc.clone()) {
            Ok(spec) => Ok(self.layer(&spec, width)),
            Err(e) => Err(Error::Config(format!(
                "unknown layer type {} ({e})",
                desc.get("type").map_or_else(|| desc.to_string(), |t| t.to_string())
            ))),
        }
    }

    pub fn sequential(&self, seq: &Sequential) -> Vec<LayerCost> {
        let mut width = seq.input_dim();
        seq.specs()
            .iter()
            .map(|s| {
                let c = self.layer(s, width);
                if let LayerSpec::Dense { output, .. } = s {
                    width = *output;
                }
                c
            })
            .collect()
    }

    pub fn classifier_layers(&self, arch: &ClassifierArch) -> Result<Vec<LayerCost>> {
        let model = ClassifierModel::new(arch.clone(), 0)?;
        Ok(self.classifier(&model))
    }

    pub fn classifier(&self, model: &ClassifierModel) -> Vec<LayerCost> {
        let arch = model.arch();
        let mut out = Vec::new();
        let mut width = arch.input;
        for &h in &arch.hidden {
            out.push(self.dense(width, h));
            out.push(self.layer(&LayerSpec::act(arch.activation), h));
            width = h;
        }
        out.push(self.dense(width, arch.classes));
        out
    }

    pub fn score_layers(&self, arch: &ScoreArch) -> Result<Vec<LayerCost>> {
        let net = ScoreNetwork::<f32>::new(arch.clone(), 0)?;
        Ok(self.score(&net))
    }

    /// One evaluation of the score network, including the sinusoid and residual adds.
    pub fn score(&self, net: &ScoreNetwork<f32>) -> Vec<LayerCost> {
        let a = net.arch();
        let mut out = vec![LayerCost::new(format!("sinusoid {}", a.time_sinusoid), 0, a.time_sinusoid as u64)];
        for seq in net.layers() {
            out.extend(self.sequential(seq));
        }
        let adds = (a.blocks + 1) * a.embed;
        out.push(LayerCost::new(format!("residual adds {adds}"), 0, adds as u64));
        out
    }

    pub fn model(&self, name: &str, layers: &[LayerCost]) -> ModelCost {
        ModelCost::from_layers(name, layers)
    }

    /// One source pass plus, per bridge, `steps` score-network evaluations.
    pub fn predictor(&self, p: &DbnPredictor, steps: usize) -> ModelCost {
        let mut total = self.model("source", &self.classifier(&p.source));
        for b in &p.bridges {
            let s = self.model("bridge", &self.score(&b.net)).scaled("bridge", steps as u64);
            total = total.plus("dbn", &s);
        }
        total.name = format!("dbn-{}x{}", p.bridges.len(), steps);
        total
    }

    /// `k` independent copies of the classifier.
    pub fn deep_ensemble(&self, arch: &ClassifierArch, k: usize) -> Result<ModelCost> {
        Ok(self
            .model("member", &self.classifier_layers(arch)?)
            .scaled(format!("de-{k}"), k as u64))
    }
}

/// Whether depthwise-separable over standard equals `1/C_out + 1/(h w)` exactly,
/// for both parameters and FLOPs (integer cross-multiplication).
pub fn separable_ratio_exact(model: &CostModel, big_h: usize, big_w: usize, h: usize, w: usize, c_in: usize, c_out: usize) -> Result<bool> {
    let std = model.conv(big_h, big_w, h, w, c_in, c_out, ConvKind::Standard)?;
    let ds = model.conv(big_h, big_w, h, w, c_in, c_out, ConvKind::DepthwiseSeparable)?;
    let hw = (h * w) as u128;
    let co = c_out as u128;
    // ds / std == (hw + co) / (hw * co)
    let ok = |d: u64, s: u64| d as u128 * hw * co == s as u128 * (hw + co);
    Ok(ok(ds.params, std.params) && ok(ds.flops, std.flops))
}
