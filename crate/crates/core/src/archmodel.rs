//! Data-level description of the 3D U-Net used for benchmarking.
//!
//! Nothing here runs a network. The descriptor is an ordered layer list
//! (with skip links expressed as concat layers pointing back at encoder
//! outputs) from which shapes, parameter counts and activation memory are
//! derived.
//!
//! The published total of 406,793 parameters does not come out of any
//! combination of the counting toggles exposed here. With batch
//! normalization present, the closest combination is no conv bias, no
//! running statistics and transposed convolutions that keep their input
//! width: 409,192 (+2,399). The default descriptor (bias on, transposed
//! convolutions halving the width, running statistics counted) totals
//! 352,513. See [`convention_search`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Total parameter count reported for the benchmark network.
pub const REFERENCE_PARAM_TOTAL: u64 = 406_793;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArchError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("shape error at layer {layer} ({name}): spatial axis {axis} has size {size}, {reason}")]
    Shape {
        layer: usize,
        name: String,
        axis: usize,
        size: usize,
        reason: &'static str,
    },
    #[error("unresolved channel count at layer {layer} ({name})")]
    Unresolved { layer: usize, name: String },
    #[error("invalid count {0}: must be at least 1")]
    InvalidCount(u64),
    #[error("memory estimate exceeds the representable range")]
    Range,
}

/// Channels-first tensor shape for one sample: `(C, d0, d1, d2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub channels: usize,
    pub spatial: [usize; 3],
}

impl TensorShape {
    pub fn new(channels: usize, d0: usize, d1: usize, d2: usize) -> Result<Self, ArchError> {
        if channels == 0 || d0 == 0 || d1 == 0 || d2 == 0 {
            return Err(ArchError::InvalidArch(format!(
                "tensor dims must be positive, got ({channels},{d0},{d1},{d2})"
            )));
        }
        Ok(Self {
            channels,
            spatial: [d0, d1, d2],
        })
    }

    pub fn elements(&self) -> u128 {
        self.channels as u128 * self.spatial.iter().map(|&d| d as u128).product::<u128>()
    }
}

impl std::fmt::Display for TensorShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let [a, b, c] = self.spatial;
        write!(f, "{}x{}x{}x{}", self.channels, a, b, c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv3d,
    TransposedConv3d,
    Maxpool3d,
    Concat,
    Batchnorm,
    Relu,
    Sigmoid,
}

impl LayerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::Conv3d => "conv3d",
            LayerKind::TransposedConv3d => "transposed_conv3d",
            LayerKind::Maxpool3d => "maxpool3d",
            LayerKind::Concat => "concat",
            LayerKind::Batchnorm => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::Sigmoid => "sigmoid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    /// Output channels; only meaningful for the two convolution kinds.
    pub out_filters: Option<usize>,
    pub bias: bool,
    /// Index of the earlier layer whose output is appended (concat only).
    pub concat_source: Option<usize>,
}

impl LayerSpec {
    fn simple(name: String, kind: LayerKind) -> Self {
        Self {
            name,
            kind,
            kernel: [1; 3],
            stride: [1; 3],
            out_filters: None,
            bias: false,
            concat_source: None,
        }
    }

    pub fn conv(name: impl Into<String>, k: usize, out_filters: usize, bias: bool) -> Self {
        Self {
            kernel: [k; 3],
            out_filters: Some(out_filters),
            bias,
            ..Self::simple(name.into(), LayerKind::Conv3d)
        }
    }

    pub fn transposed(name: impl Into<String>, out_filters: usize, bias: bool) -> Self {
        Self {
            kernel: [2; 3],
            stride: [2; 3],
            out_filters: Some(out_filters),
            bias,
            ..Self::simple(name.into(), LayerKind::TransposedConv3d)
        }
    }

    pub fn maxpool(name: impl Into<String>) -> Self {
        Self {
            kernel: [2; 3],
            stride: [2; 3],
            ..Self::simple(name.into(), LayerKind::Maxpool3d)
        }
    }

    pub fn concat(name: impl Into<String>, source: usize) -> Self {
        Self {
            concat_source: Some(source),
            ..Self::simple(name.into(), LayerKind::Concat)
        }
    }

    pub fn batchnorm(name: impl Into<String>) -> Self {
        Self::simple(name.into(), LayerKind::Batchnorm)
    }

    pub fn relu(name: impl Into<String>) -> Self {
        Self::simple(name.into(), LayerKind::Relu)
    }

    pub fn sigmoid(name: impl Into<String>) -> Self {
        Self::simple(name.into(), LayerKind::Sigmoid)
    }
}

/// Width of the transposed convolution that opens each synthesis step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransposedWidth {
    /// Output the filter count of the finer step (half the input width).
    Halved,
    /// Keep the input width.
    Preserved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetOptions {
    pub base_filters: usize,
    pub steps: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub bias: bool,
    pub transposed_width: TransposedWidth,
}

impl Default for UNetOptions {
    fn default() -> Self {
        Self {
            base_filters: 8,
            steps: 4,
            in_channels: 4,
            out_channels: 1,
            bias: true,
            transposed_width: TransposedWidth::Halved,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    layers: Vec<LayerSpec>,
    /// (encoder layer, decoder concat layer) pairs.
    skip_links: Vec<(usize, usize)>,
    resolution_steps: usize,
    base_filters: usize,
    in_channels: usize,
    out_channels: usize,
}

impl ArchDescriptor {
    /// Assembles and validates a descriptor from raw parts.
    pub fn from_parts(
        layers: Vec<LayerSpec>,
        resolution_steps: usize,
        base_filters: usize,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self, ArchError> {
        let skip_links = layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.concat_source.map(|s| (s, i)))
            .collect();
        let desc = Self {
            layers,
            skip_links,
            resolution_steps,
            base_filters,
            in_channels,
            out_channels,
        };
        desc.validate()?;
        Ok(desc)
    }

    pub fn from_json(text: &str) -> Result<Self, ArchError> {
        let desc: Self =
            serde_json::from_str(text).map_err(|e| ArchError::InvalidArch(format!("descriptor json: {e}")))?;
        desc.validate()?;
        Ok(desc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("descriptor serializes")
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn skip_links(&self) -> &[(usize, usize)] {
        &self.skip_links
    }

    pub fn resolution_steps(&self) -> usize {
        self.resolution_steps
    }

    pub fn base_filters(&self) -> usize {
        self.base_filters
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn count_kind(&self, kind: LayerKind) -> usize {
        self.layers.iter().filter(|l| l.kind == kind).count()
    }

    pub fn validate(&self) -> Result<(), ArchError> {
        let invalid = |msg: String| Err(ArchError::InvalidArch(msg));
        if self.layers.is_empty() {
            return invalid("descriptor has no layers".into());
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.base_filters == 0 {
            return invalid("channel counts must be positive".into());
        }
        if self.resolution_steps < 2 {
            return invalid(format!(
                "need at least 2 resolution steps, got {}",
                self.resolution_steps
            ));
        }
        for (i, l) in self.layers.iter().enumerate() {
            match l.kind {
                LayerKind::Conv3d => {
                    if l.kernel != [3; 3] && l.kernel != [1; 3] {
                        return invalid(format!("layer {i} ({}): conv kernel must be 3x3x3 or 1x1x1", l.name));
                    }
                    if l.stride != [1; 3] {
                        return invalid(format!("layer {i} ({}): conv stride must be 1", l.name));
                    }
                }
                LayerKind::TransposedConv3d | LayerKind::Maxpool3d if l.kernel != [2; 3] || l.stride != [2; 3] => {
                    return invalid(format!("layer {i} ({}): kernel and stride must be 2x2x2", l.name));
                }
                _ => {}
            }
            let is_conv = matches!(l.kind, LayerKind::Conv3d | LayerKind::TransposedConv3d);
            if is_conv && l.out_filters.is_none_or(|f| f == 0) {
                return Err(ArchError::Unresolved {
                    layer: i,
                    name: l.name.clone(),
                });
            }
            match (l.kind, l.concat_source) {
                (LayerKind::Concat, Some(src)) if src < i => {}
                (LayerKind::Concat, _) => {
                    return invalid(format!(
                        "layer {i} ({}): concat source must be an earlier layer",
                        l.name
                    ))
                }
                (_, Some(_)) => return invalid(format!("layer {i} ({}): only concat layers take a source", l.name)),
                _ => {}
            }
        }
        let transitions = self.resolution_steps - 1;
        let pools = self.count_kind(LayerKind::Maxpool3d);
        let ups = self.count_kind(LayerKind::TransposedConv3d);
        if pools != transitions || ups != transitions {
            return invalid(format!(
                "{} resolution steps need {transitions} pools and {transitions} transposed convs, found {pools} and {ups}",
                self.resolution_steps
            ));
        }
        if self.skip_links.len() != transitions {
            return invalid(format!(
                "expected {transitions} skip links, found {}",
                self.skip_links.len()
            ));
        }
        Ok(())
    }

    /// Filter count of the analysis path at 1-based resolution step `s`.
    pub fn step_filters(&self, s: usize) -> usize {
        self.base_filters << (s - 1)
    }
}

/// Builds the U-Net: per analysis step two 3x3x3 conv + batchnorm + relu
/// blocks, 2x2x2 pooling between steps, per synthesis step a transposed
/// conv, concat with the matching encoder output and two conv blocks, then
/// a 1x1x1 conv and sigmoid.
pub fn build_unet3d(opts: UNetOptions) -> Result<ArchDescriptor, ArchError> {
    if opts.base_filters < 1 {
        return Err(ArchError::InvalidArch("base_filters must be at least 1".into()));
    }
    if opts.steps < 2 {
        return Err(ArchError::InvalidArch(format!(
            "need at least 2 resolution steps, got {}",
            opts.steps
        )));
    }
    let filters = |s: usize| opts.base_filters << (s - 1);
    let mut layers = Vec::new();
    let conv_block = |layers: &mut Vec<LayerSpec>, tag: &str, f: usize| {
        for j in 0..2 {
            layers.push(LayerSpec::conv(format!("{tag}_conv{j}"), 3, f, opts.bias));
            layers.push(LayerSpec::batchnorm(format!("{tag}_bn{j}")));
            layers.push(LayerSpec::relu(format!("{tag}_relu{j}")));
        }
    };

    let mut encoder_out = Vec::with_capacity(opts.steps);
    for s in 1..=opts.steps {
        conv_block(&mut layers, &format!("enc{s}"), filters(s));
        encoder_out.push(layers.len() - 1);
        if s < opts.steps {
            layers.push(LayerSpec::maxpool(format!("pool{s}")));
        }
    }
    let mut width = filters(opts.steps);
    for s in (1..opts.steps).rev() {
        let up_width = match opts.transposed_width {
            TransposedWidth::Halved => filters(s),
            TransposedWidth::Preserved => width,
        };
        layers.push(LayerSpec::transposed(format!("up{s}"), up_width, opts.bias));
        layers.push(LayerSpec::concat(format!("concat{s}"), encoder_out[s - 1]));
        conv_block(&mut layers, &format!("dec{s}"), filters(s));
        width = filters(s);
    }
    layers.push(LayerSpec::conv("head_conv", 1, opts.out_channels, opts.bias));
    layers.push(LayerSpec::sigmoid("head_sigmoid"));

    ArchDescriptor::from_parts(
        layers,
        opts.steps,
        opts.base_filters,
        opts.in_channels,
        opts.out_channels,
    )
}

/// Output channel count of every layer, given the descriptor's input width.
fn propagate_channels(desc: &ArchDescriptor) -> Result<Vec<usize>, ArchError> {
    let mut out = Vec::with_capacity(desc.layers.len());
    let mut c = desc.in_channels;
    for (i, l) in desc.layers.iter().enumerate() {
        c = match l.kind {
            LayerKind::Conv3d | LayerKind::TransposedConv3d => l.out_filters.ok_or_else(|| ArchError::Unresolved {
                layer: i,
                name: l.name.clone(),
            })?,
            LayerKind::Concat => {
                let src = l
                    .concat_source
                    .filter(|&s| s < i)
                    .ok_or_else(|| ArchError::Unresolved {
                        layer: i,
                        name: l.name.clone(),
                    })?;
                c + out[src]
            }
            _ => c,
        };
        out.push(c);
    }
    Ok(out)
}

/// Output shape of every layer for one sample of shape `input`.
pub fn propagate_shapes(desc: &ArchDescriptor, input: TensorShape) -> Result<Vec<TensorShape>, ArchError> {
    if input.channels != desc.in_channels {
        return Err(ArchError::InvalidArch(format!(
            "input has {} channels, network expects {}",
            input.channels, desc.in_channels
        )));
    }
    let mut shapes: Vec<TensorShape> = Vec::with_capacity(desc.layers.len());
    let mut cur = input;
    for (i, l) in desc.layers.iter().enumerate() {
        cur = match l.kind {
            LayerKind::Conv3d => TensorShape {
                channels: l.out_filters.unwrap_or(0),
                ..cur
            },
            LayerKind::Maxpool3d => {
                let mut spatial = cur.spatial;
                for (axis, d) in spatial.iter_mut().enumerate() {
                    if *d % 2 != 0 || *d < 2 {
                        return Err(ArchError::Shape {
                            layer: i,
                            name: l.name.clone(),
                            axis,
                            size: *d,
                            reason: "not divisible by the pooling stride 2",
                        });
                    }
                    *d /= 2;
                }
                TensorShape { spatial, ..cur }
            }
            LayerKind::TransposedConv3d => TensorShape {
                channels: l.out_filters.unwrap_or(0),
                spatial: cur.spatial.map(|d| d * 2),
            },
            LayerKind::Concat => {
                let src = shapes[l.concat_source.expect("validated concat source")];
                if let Some(axis) = (0..3).find(|&a| src.spatial[a] != cur.spatial[a]) {
                    return Err(ArchError::Shape {
                        layer: i,
                        name: l.name.clone(),
                        axis,
                        size: cur.spatial[axis],
                        reason: "does not match the skip-link source",
                    });
                }
                TensorShape {
                    channels: cur.channels + src.channels,
                    ..cur
                }
            }
            LayerKind::Batchnorm | LayerKind::Relu | LayerKind::Sigmoid => cur,
        };
        shapes.push(cur);
    }
    Ok(shapes)
}

/// Parameters attributed to a single layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weights: u64,
    pub biases: u64,
    /// Batchnorm scale and shift.
    pub bn_affine: u64,
    /// Batchnorm moving mean and variance.
    pub bn_running: u64,
}

impl LayerParams {
    pub fn total(&self) -> u64 {
        self.weights + self.biases + self.bn_affine + self.bn_running
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub layers: Vec<LayerParams>,
    pub weights: u64,
    pub biases: u64,
    pub bn_affine: u64,
    pub bn_running: u64,
    pub total: u64,
}

pub fn count_params(desc: &ArchDescriptor, include_bn_running_stats: bool) -> Result<ParamBreakdown, ArchError> {
    let out_channels = propagate_channels(desc)?;
    let mut layers = Vec::with_capacity(desc.layers.len());
    let mut c_in = desc.in_channels as u64;
    for (l, &c_out) in desc.layers.iter().zip(&out_channels) {
        let c_out = c_out as u64;
        let k: u64 = l.kernel.iter().map(|&k| k as u64).product();
        let p = match l.kind {
            LayerKind::Conv3d | LayerKind::TransposedConv3d => LayerParams {
                weights: k * c_in * c_out,
                biases: if l.bias { c_out } else { 0 },
                ..Default::default()
            },
            LayerKind::Batchnorm => LayerParams {
                bn_affine: 2 * c_out,
                bn_running: if include_bn_running_stats { 2 * c_out } else { 0 },
                ..Default::default()
            },
            _ => LayerParams::default(),
        };
        layers.push(p);
        c_in = c_out;
    }
    let sum = |f: fn(&LayerParams) -> u64| layers.iter().map(f).sum::<u64>();
    let (weights, biases, bn_affine, bn_running) = (
        sum(|p| p.weights),
        sum(|p| p.biases),
        sum(|p| p.bn_affine),
        sum(|p| p.bn_running),
    );
    Ok(ParamBreakdown {
        layers,
        weights,
        biases,
        bn_affine,
        bn_running,
        total: weights + biases + bn_affine + bn_running,
    })
}

/// Upper-bound training memory for `batch` samples: every layer output is
/// assumed live at once, plus one copy of the parameters.
pub fn estimate_activation_memory(
    desc: &ArchDescriptor,
    input: TensorShape,
    batch: u64,
    bytes_per_element: u64,
) -> Result<u64, ArchError> {
    if batch == 0 {
        return Err(ArchError::InvalidCount(batch));
    }
    if bytes_per_element == 0 {
        return Err(ArchError::InvalidCount(bytes_per_element));
    }
    let shapes = propagate_shapes(desc, input)?;
    let per_sample: u128 = shapes.iter().map(TensorShape::elements).sum();
    let params = count_params(desc, true)?.total as u128;
    let bytes = (batch as u128)
        .checked_mul(per_sample)
        .and_then(|x| x.checked_add(params))
        .and_then(|x| x.checked_mul(bytes_per_element as u128))
        .ok_or(ArchError::Range)?;
    if bytes > i64::MAX as u128 {
        return Err(ArchError::Range);
    }
    Ok(bytes as u64)
}

/// One point of the parameter-counting toggle space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamConvention {
    pub bias: bool,
    pub bn_running_stats: bool,
    pub transposed_width: TransposedWidth,
    pub total: u64,
    pub delta: i64,
}

/// Evaluates every toggle combination for the given base network and
/// returns them ordered by distance to `target`.
pub fn convention_search(base: UNetOptions, target: u64) -> Result<Vec<ParamConvention>, ArchError> {
    let mut found = Vec::new();
    for bias in [true, false] {
        for transposed_width in [TransposedWidth::Halved, TransposedWidth::Preserved] {
            let desc = build_unet3d(UNetOptions {
                bias,
                transposed_width,
                ..base
            })?;
            for bn_running_stats in [true, false] {
                let total = count_params(&desc, bn_running_stats)?.total;
                found.push(ParamConvention {
                    bias,
                    bn_running_stats,
                    transposed_width,
                    total,
                    delta: total as i64 - target as i64,
                });
            }
        }
    }
    found.sort_by_key(|c| (c.delta.unsigned_abs(), c.total));
    Ok(found)
}

/// Layer table as aligned text.
pub fn layer_table(desc: &ArchDescriptor, shapes: &[TensorShape], params: &ParamBreakdown) -> String {
    let mut out = format!(
        "{:>4}  {:<16} {:<18} {:<18} {:>10}\n",
        "#", "layer", "kind", "output", "params"
    );
    for (i, ((l, s), p)) in desc.layers.iter().zip(shapes).zip(&params.layers).enumerate() {
        out.push_str(&format!(
            "{:>4}  {:<16} {:<18} {:<18} {:>10}\n",
            i,
            l.name,
            l.kind.as_str(),
            s.to_string(),
            p.total()
        ));
    }
    out.push_str(&format!("total parameters: {}\n", params.total));
    out
}

pub fn layer_csv(desc: &ArchDescriptor, shapes: &[TensorShape], params: &ParamBreakdown) -> String {
    let mut out = String::from("index,layer,kind,output_shape,params\n");
    for (i, ((l, s), p)) in desc.layers.iter().zip(shapes).zip(&params.layers).enumerate() {
        out.push_str(&format!("{i},{},{},{s},{}\n", l.name, l.kind.as_str(), p.total()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_net() -> ArchDescriptor {
        build_unet3d(UNetOptions::default()).unwrap()
    }

    fn single_conv(c_in: usize, c_out: usize) -> ArchDescriptor {
        // one-off descriptor that bypasses the U-Net structural checks
        ArchDescriptor {
            layers: vec![LayerSpec::conv("c", 3, c_out, true)],
            skip_links: vec![],
            resolution_steps: 2,
            base_filters: c_out,
            in_channels: c_in,
            out_channels: c_out,
        }
    }

    #[test]
    fn default_filters_and_counts() {
        let d = default_net();
        assert_eq!(d.resolution_steps(), 4);
        let enc: Vec<usize> = (1..=4).map(|s| d.step_filters(s)).collect();
        assert_eq!(enc, vec![8, 16, 32, 64]);
        assert_eq!(d.count_kind(LayerKind::Maxpool3d), 3);
        assert_eq!(d.count_kind(LayerKind::TransposedConv3d), 3);
        assert_eq!(d.skip_links().len(), 3);
        // encoder conv filters come in pairs per step
        let convs: Vec<usize> = d
            .layers()
            .iter()
            .filter(|l| l.kind == LayerKind::Conv3d && l.name.starts_with("enc"))
            .map(|l| l.out_filters.unwrap())
            .collect();
        assert_eq!(convs, vec![8, 8, 16, 16, 32, 32, 64, 64]);
        // synthesis halves step to step
        let dec: Vec<usize> = d
            .layers()
            .iter()
            .filter(|l| l.kind == LayerKind::Conv3d && l.name.starts_with("dec"))
            .map(|l| l.out_filters.unwrap())
            .collect();
        assert_eq!(dec, vec![32, 32, 16, 16, 8, 8]);
    }

    #[test]
    fn minimal_u() {
        let d = build_unet3d(UNetOptions {
            base_filters: 8,
            steps: 2,
            in_channels: 1,
            out_channels: 1,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(d.count_kind(LayerKind::Maxpool3d), 1);
        assert_eq!(d.count_kind(LayerKind::TransposedConv3d), 1);
        assert_eq!(d.skip_links().len(), 1);
    }

    #[test]
    fn rejects_single_step() {
        let err = build_unet3d(UNetOptions {
            steps: 1,
            ..Default::default()
        });
        assert!(matches!(err, Err(ArchError::InvalidArch(_))));
    }

    #[test]
    fn reference_tiles() {
        let d = default_net();
        let shapes = propagate_shapes(&d, TensorShape::new(4, 240, 240, 152).unwrap()).unwrap();
        assert_eq!(*shapes.last().unwrap(), TensorShape::new(1, 240, 240, 152).unwrap());

        let err = propagate_shapes(&d, TensorShape::new(4, 240, 240, 155).unwrap()).unwrap_err();
        match err {
            ArchError::Shape { name, axis, size, .. } => {
                assert_eq!(name, "pool1");
                assert_eq!(axis, 2);
                assert_eq!(size, 155);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn small_symmetric() {
        let d = build_unet3d(UNetOptions {
            steps: 2,
            ..Default::default()
        })
        .unwrap();
        let shapes = propagate_shapes(&d, TensorShape::new(4, 8, 8, 8).unwrap()).unwrap();
        assert_eq!(*shapes.last().unwrap(), TensorShape::new(1, 8, 8, 8).unwrap());
    }

    #[test]
    fn concat_widths() {
        let d = default_net();
        let shapes = propagate_shapes(&d, TensorShape::new(4, 16, 16, 16).unwrap()).unwrap();
        for &(_, concat) in d.skip_links() {
            let up = shapes[concat - 1];
            assert_eq!(shapes[concat].channels, 2 * up.channels);
        }
    }

    #[test]
    fn single_conv_params() {
        let p = count_params(&single_conv(4, 8), true).unwrap();
        assert_eq!(p.weights, 864);
        assert_eq!(p.biases, 8);
        assert_eq!(p.total, 872);
    }

    #[test]
    fn single_batchnorm_params() {
        let d = ArchDescriptor {
            layers: vec![LayerSpec::batchnorm("bn")],
            skip_links: vec![],
            resolution_steps: 2,
            base_filters: 8,
            in_channels: 8,
            out_channels: 8,
        };
        assert_eq!(count_params(&d, true).unwrap().total, 32);
        assert_eq!(count_params(&d, false).unwrap().total, 16);
    }

    #[test]
    fn default_param_total_is_documented_value() {
        let p = count_params(&default_net(), true).unwrap();
        assert_eq!(p.total, 352_513);
        assert_eq!(p.total, p.layers.iter().map(LayerParams::total).sum::<u64>());
    }

    #[test]
    fn closest_convention() {
        let found = convention_search(UNetOptions::default(), REFERENCE_PARAM_TOTAL).unwrap();
        assert_eq!(found.len(), 8);
        let best = found[0];
        assert_eq!(best.total, 409_192);
        assert_eq!(best.delta, 2_399);
        assert!(!best.bias);
        assert!(!best.bn_running_stats);
        assert_eq!(best.transposed_width, TransposedWidth::Preserved);
        assert!(found.iter().all(|c| c.delta != 0));
    }

    #[test]
    fn memory_layer_term() {
        // one conv 4->8 on the reference tile: output term is 8*240*240*152*4
        let d = single_conv(4, 8);
        let input = TensorShape::new(4, 240, 240, 152).unwrap();
        let bytes = estimate_activation_memory(&d, input, 1, 4).unwrap();
        assert_eq!(bytes, 280_166_400 + 872 * 4);
        assert_eq!(
            estimate_activation_memory(&d, input, 0, 4),
            Err(ArchError::InvalidCount(0))
        );
    }

    #[test]
    fn memory_linear_in_batch() {
        let d = default_net();
        let input = TensorShape::new(4, 240, 240, 152).unwrap();
        let param_bytes = count_params(&d, true).unwrap().total * 4;
        let m2 = estimate_activation_memory(&d, input, 2, 4).unwrap();
        let m4 = estimate_activation_memory(&d, input, 4, 4).unwrap();
        assert_eq!(m4, 2 * m2 - param_bytes);
    }

    #[test]
    fn memory_overflow() {
        let d = default_net();
        let input = TensorShape::new(4, 240, 240, 152).unwrap();
        assert_eq!(
            estimate_activation_memory(&d, input, u64::MAX / 2, 4),
            Err(ArchError::Range)
        );
    }

    #[test]
    fn json_roundtrip_and_validation() {
        let d = default_net();
        let back = ArchDescriptor::from_json(&d.to_json()).unwrap();
        assert_eq!(back, d);

        let mut broken = d.clone();
        broken.layers[0].kernel = [5; 3];
        assert!(ArchDescriptor::from_json(&broken.to_json()).is_err());

        let mut forward = d.clone();
        let idx = forward.skip_links[0].1;
        forward.layers[idx].concat_source = Some(idx + 1);
        assert!(forward.validate().is_err());
    }

    #[test]
    fn empty_descriptor_rejected() {
        let r = ArchDescriptor::from_parts(vec![], 4, 8, 4, 1);
        assert!(matches!(r, Err(ArchError::InvalidArch(_))));
    }
}
