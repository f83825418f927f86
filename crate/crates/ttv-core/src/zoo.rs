//! Declarative construction of the five regression architectures (DNN, CNN,
//! DNN-TT, CNN-TT, CNN-Tucker), exact parameter accounting, and compression
//! of trained models into their factored counterparts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    BatchNormLayer, Conv2DLayer, FCLayer, FlattenLayer, ImageLayer, Layer, Mode, ReluLayer,
};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::tt::{tt_svd, TTLayer, TTShape};
use crate::tucker::{hosvd_decompose, TuckerConvLayer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Dnn,
    Cnn,
    DnnTt,
    CnnTt,
    CnnTucker,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Dnn => "dnn",
            ModelKind::Cnn => "cnn",
            ModelKind::DnnTt => "dnn_tt",
            ModelKind::CnnTt => "cnn_tt",
            ModelKind::CnnTucker => "cnn_tucker",
        }
    }
}

/// Input geometry: per-frame bins x total context frames x channels, plus
/// whether a NAT estimate block is appended.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputSpec {
    pub freq_bins: usize,
    /// Total frames seen at once (2M+1); must be odd.
    pub context_frames: usize,
    #[serde(default = "one")]
    pub channels: usize,
    #[serde(default)]
    pub nat: bool,
}

fn one() -> usize {
    1
}

impl InputSpec {
    pub fn width(&self) -> usize {
        self.freq_bins * self.context_frames * self.channels
            + self.freq_bins * usize::from(self.nat)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    /// (time-axis, frequency-axis) strides.
    #[serde(default = "unit_stride")]
    pub stride: (usize, usize),
}

fn unit_stride() -> (usize, usize) {
    (1, 1)
}

/// TT replacement for one dense layer: output factors m, input factors n,
/// internal ranks r_2..r_K (the boundary ranks are always 1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TtLayerSpec {
    pub m: Vec<usize>,
    pub n: Vec<usize>,
    pub ranks: Vec<usize>,
}

impl TtLayerSpec {
    pub fn shape(&self) -> Result<TTShape> {
        let mut r = Vec::with_capacity(self.ranks.len() + 2);
        r.push(1);
        r.extend(&self.ranks);
        r.push(1);
        TTShape::new(self.m.clone(), self.n.clone(), r)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TuckerRankSpec {
    pub rc: usize,
    pub rs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub input: InputSpec,
    pub output_dim: usize,
    /// Hidden widths for the DNN family.
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    /// Conv blocks for the CNN family (conv -> ReLU -> BatchNorm each).
    #[serde(default)]
    pub conv: Vec<ConvSpec>,
    /// Dense widths stacked after the conv blocks.
    #[serde(default)]
    pub fc_dims: Vec<usize>,
    /// DNN-TT: one spec per hidden layer.
    #[serde(default)]
    pub tt_hidden: Vec<TtLayerSpec>,
    /// CNN-TT, default variant: one spec per fc_dims entry.
    #[serde(default)]
    pub tt_fc: Vec<TtLayerSpec>,
    /// CNN-TT, output-only variant: replace the final linear layer.
    #[serde(default)]
    pub tt_output: Option<TtLayerSpec>,
    /// CNN-Tucker: ranks for the first conv.len()-1 conv layers; the top
    /// conv layer always stays dense.
    #[serde(default)]
    pub tucker_ranks: Vec<TuckerRankSpec>,
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn input_width(&self) -> usize {
        self.input.width()
    }

    fn is_cnn_family(&self) -> bool {
        matches!(
            self.kind,
            ModelKind::Cnn | ModelKind::CnnTt | ModelKind::CnnTucker
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dim == 0 {
            return Err(Error::Validation("output_dim must be >= 1".into()));
        }
        if self.input.freq_bins == 0 || self.input.channels == 0 {
            return Err(Error::Validation("input extents must be >= 1".into()));
        }
        if self.input.context_frames % 2 == 0 {
            return Err(Error::Validation(
                "context_frames must be odd (2M+1)".into(),
            ));
        }
        match self.kind {
            ModelKind::Dnn | ModelKind::DnnTt => {
                if self.hidden_dims.is_empty() {
                    return Err(Error::Validation("dnn needs hidden_dims".into()));
                }
                if self.kind == ModelKind::DnnTt && self.tt_hidden.len() != self.hidden_dims.len()
                {
                    return Err(Error::Validation(format!(
                        "dnn_tt needs one tt spec per hidden layer ({} != {})",
                        self.tt_hidden.len(),
                        self.hidden_dims.len()
                    )));
                }
            }
            ModelKind::Cnn | ModelKind::CnnTt | ModelKind::CnnTucker => {
                if self.conv.is_empty() || self.fc_dims.is_empty() {
                    return Err(Error::Validation("cnn needs conv blocks and fc_dims".into()));
                }
                if self.input.nat {
                    return Err(Error::Validation(
                        "NAT features are not representable as conv input images; use a dnn kind"
                            .into(),
                    ));
                }
                if self.kind == ModelKind::CnnTt {
                    let both = !self.tt_fc.is_empty();
                    let out_only = self.tt_output.is_some();
                    if !both && !out_only {
                        return Err(Error::Validation(
                            "cnn_tt needs tt_fc specs or a tt_output spec".into(),
                        ));
                    }
                    if both && self.tt_fc.len() != self.fc_dims.len() {
                        return Err(Error::Validation(format!(
                            "cnn_tt needs one tt spec per fc layer ({} != {})",
                            self.tt_fc.len(),
                            self.fc_dims.len()
                        )));
                    }
                }
                if self.kind == ModelKind::CnnTucker
                    && self.tucker_ranks.len() != self.conv.len().saturating_sub(1)
                {
                    return Err(Error::Validation(format!(
                        "cnn_tucker factors all conv layers except the top one: \
                         need {} rank pairs, got {}",
                        self.conv.len().saturating_sub(1),
                        self.tucker_ranks.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// An architecture instantiated as an ordered layer stack.
pub struct BuiltModel {
    pub config: ModelConfig,
    layers: Vec<Box<dyn Layer>>,
}

fn check_tt_dims(spec: &TtLayerSpec, in_dim: usize, out_dim: usize, at: &str) -> Result<TTShape> {
    let shape = spec.shape()?;
    if shape.in_dim() != in_dim || shape.out_dim() != out_dim {
        return Err(Error::Validation(format!(
            "{at}: tt factors ({} x {}) do not match layer dims ({out_dim} x {in_dim})",
            shape.out_dim(),
            shape.in_dim(),
        )));
    }
    Ok(shape)
}

/// Deterministic construction from config and seed.
pub fn build_model(config: &ModelConfig, rng: &mut RngState) -> Result<BuiltModel> {
    config.validate()?;
    let mut layers: Vec<Box<dyn Layer>> = Vec::new();

    if config.is_cnn_family() {
        let w = config.input.context_frames;
        let h = config.input.freq_bins;
        let c = config.input.channels;
        layers.push(Box::new(ImageLayer::new(w, h, c)));

        let mut extents = vec![w, h, c];
        for (i, spec) in config.conv.iter().enumerate() {
            let at = format!("conv{i}");
            let tucker = config.kind == ModelKind::CnnTucker && i < config.tucker_ranks.len();
            if spec.kernel > extents[0].min(extents[1]) {
                return Err(Error::Validation(format!(
                    "{at}: kernel {} exceeds spatial extents {:?}",
                    spec.kernel, extents
                )));
            }
            if tucker {
                let ranks = config.tucker_ranks[i];
                // start from a dense random kernel and factor it, so the
                // factors are orthonormal from the first step
                let dense = Conv2DLayer::init(spec.kernel, extents[2], spec.channels, spec.stride, rng);
                let (tk, _) = hosvd_decompose(dense.kernel(), ranks.rc, ranks.rs).map_err(
                    |e| Error::Validation(format!("{at}: {e}")),
                )?;
                let layer =
                    TuckerConvLayer::new(tk, Tensor::zeros(&[spec.channels]), spec.stride, true)?;
                extents = layer.out_shape(&extents)?;
                layers.push(Box::new(layer));
            } else {
                let layer =
                    Conv2DLayer::init(spec.kernel, extents[2], spec.channels, spec.stride, rng);
                extents = layer.out_shape(&extents)?;
                layers.push(Box::new(layer));
            }
            layers.push(Box::new(ReluLayer::new()));
            layers.push(Box::new(BatchNormLayer::new(spec.channels)));
        }

        layers.push(Box::new(FlattenLayer::new()));
        let mut width = extents.iter().product::<usize>();
        for (i, &dim) in config.fc_dims.iter().enumerate() {
            let at = format!("fc{i}");
            if config.kind == ModelKind::CnnTt && !config.tt_fc.is_empty() {
                let shape = check_tt_dims(&config.tt_fc[i], width, dim, &at)?;
                layers.push(Box::new(TTLayer::init(shape, rng)?));
            } else {
                layers.push(Box::new(FCLayer::init(width, dim, rng)));
            }
            layers.push(Box::new(ReluLayer::new()));
            width = dim;
        }
        // linear output layer
        if config.kind == ModelKind::CnnTt {
            if let Some(spec) = &config.tt_output {
                let shape = check_tt_dims(spec, width, config.output_dim, "output")?;
                layers.push(Box::new(TTLayer::init(shape, rng)?));
            } else {
                layers.push(Box::new(FCLayer::init(width, config.output_dim, rng)));
            }
        } else {
            layers.push(Box::new(FCLayer::init(width, config.output_dim, rng)));
        }
    } else {
        let mut width = config.input_width();
        for (i, &dim) in config.hidden_dims.iter().enumerate() {
            let at = format!("hidden{i}");
            if config.kind == ModelKind::DnnTt {
                let shape = check_tt_dims(&config.tt_hidden[i], width, dim, &at)?;
                layers.push(Box::new(TTLayer::init(shape, rng)?));
            } else {
                layers.push(Box::new(FCLayer::init(width, dim, rng)));
            }
            layers.push(Box::new(ReluLayer::new()));
            width = dim;
        }
        layers.push(Box::new(FCLayer::init(width, config.output_dim, rng)));
    }

    Ok(BuiltModel {
        config: config.clone(),
        layers,
    })
}

impl BuiltModel {
    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut x = input.clone();
        for layer in &mut self.layers {
            x = layer.forward(&x, mode)?;
        }
        Ok(x)
    }

    /// Reverse pass; parameter gradients come back namespaced
    /// `"{layer index}.{kind}.{param}"` in `params()` order.
    pub fn backward(&mut self, out_grad: &Tensor) -> Result<Vec<(String, Tensor)>> {
        let mut grad = out_grad.clone();
        let mut all: Vec<Vec<(String, Tensor)>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            let bw = layer.backward(&grad)?;
            grad = bw.input_grad;
            let kind = layer.kind();
            all.push(
                bw.param_grads
                    .into_iter()
                    .map(|(name, g)| (format!("{i:02}.{kind}.{name}"), g))
                    .collect(),
            );
        }
        all.reverse();
        Ok(all.into_iter().flatten().collect())
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, layer)| {
                let kind = layer.kind();
                layer
                    .params()
                    .into_iter()
                    .map(move |(name, t)| (format!("{i:02}.{kind}.{name}"), t))
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, layer)| {
                let kind = layer.kind();
                layer
                    .params_mut()
                    .into_iter()
                    .map(move |(name, t)| (format!("{i:02}.{kind}.{name}"), t))
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    pub fn state(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, layer)| {
                let kind = layer.kind();
                layer
                    .state()
                    .into_iter()
                    .map(move |(name, t)| (format!("{i:02}.{kind}.{name}"), t))
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    pub fn state_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, layer)| {
                let kind = layer.kind();
                layer
                    .state_mut()
                    .into_iter()
                    .map(move |(name, t)| (format!("{i:02}.{kind}.{name}"), t))
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Exact count of trainable scalars, by enumeration of `params()`.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    pub fn per_layer_counts(&self) -> Vec<(String, usize)> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.param_count() > 0)
            .map(|(i, l)| (format!("{i:02}.{}", l.kind()), l.param_count()))
            .collect()
    }

    pub fn layers(&self) -> &[Box<dyn Layer>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Box<dyn Layer>] {
        &mut self.layers
    }

    /// Load parameter and state tensors by namespaced name. Every tensor in
    /// the model must be present with a matching shape.
    pub fn load_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let lookup: std::collections::HashMap<&str, &Tensor> = tensors
            .iter()
            .map(|(name, t)| (name.as_str(), t))
            .collect();
        let fill = |slots: Vec<(String, &mut Tensor)>| -> Result<()> {
            for (name, slot) in slots {
                let src = lookup.get(name.as_str()).ok_or_else(|| {
                    Error::Validation(format!("checkpoint is missing tensor `{name}`"))
                })?;
                if src.shape() != slot.shape() {
                    return Err(Error::shape_mismatch("load", src.shape(), slot.shape()));
                }
                slot.data_mut().copy_from_slice(src.data());
            }
            Ok(())
        };
        let params = self.params_mut();
        fill(params)?;
        let state = self.state_mut();
        fill(state)?;
        Ok(())
    }

    /// All persistent tensors (parameters plus state), cloned out.
    pub fn dump_tensors(&self) -> Vec<(String, Tensor)> {
        self.params()
            .into_iter()
            .chain(self.state())
            .map(|(name, t)| (name, t.clone()))
            .collect()
    }
}

/// Parameter-count formula oracle, computed from the configuration alone:
/// FC = in*out + out, conv = L^2*C*S + S, BN = 2C,
/// TT = sum m_k n_k r_k r_{k+1} + prod m_k, Tucker = staged kernel + S.
pub fn count_params_formula(config: &ModelConfig) -> Result<usize> {
    config.validate()?;
    let mut total = 0usize;

    if config.is_cnn_family() {
        let mut extents = vec![
            config.input.context_frames,
            config.input.freq_bins,
            config.input.channels,
        ];
        for (i, spec) in config.conv.iter().enumerate() {
            let c_in = extents[2];
            let tucker = config.kind == ModelKind::CnnTucker && i < config.tucker_ranks.len();
            if tucker {
                let r = config.tucker_ranks[i];
                total += crate::tucker::tucker_param_count(
                    spec.kernel,
                    c_in,
                    spec.channels,
                    r.rc,
                    r.rs,
                ) + spec.channels;
            } else {
                total += spec.kernel * spec.kernel * c_in * spec.channels + spec.channels;
            }
            total += 2 * spec.channels; // batchnorm gamma/beta
            extents = vec![
                (extents[0] - spec.kernel) / spec.stride.0 + 1,
                (extents[1] - spec.kernel) / spec.stride.1 + 1,
                spec.channels,
            ];
        }
        let mut width: usize = extents.iter().product();
        for (i, &dim) in config.fc_dims.iter().enumerate() {
            if config.kind == ModelKind::CnnTt && !config.tt_fc.is_empty() {
                let shape = config.tt_fc[i].shape()?;
                total += crate::tt::tt_param_count(&shape) + shape.out_dim();
            } else {
                total += width * dim + dim;
            }
            width = dim;
        }
        if config.kind == ModelKind::CnnTt {
            if let Some(spec) = &config.tt_output {
                let shape = spec.shape()?;
                total += crate::tt::tt_param_count(&shape) + shape.out_dim();
            } else {
                total += width * config.output_dim + config.output_dim;
            }
        } else {
            total += width * config.output_dim + config.output_dim;
        }
    } else {
        let mut width = config.input_width();
        for (i, &dim) in config.hidden_dims.iter().enumerate() {
            if config.kind == ModelKind::DnnTt {
                let shape = config.tt_hidden[i].shape()?;
                total += crate::tt::tt_param_count(&shape) + shape.out_dim();
            } else {
                total += width * dim + dim;
            }
            width = dim;
        }
        total += width * config.output_dim + config.output_dim;
    }
    Ok(total)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerCompressionReport {
    pub layer: String,
    pub old_params: usize,
    pub new_params: usize,
    /// Frobenius reconstruction error of the factored weight.
    pub recon_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressionReport {
    pub old_total: usize,
    pub new_total: usize,
    pub layers: Vec<LayerCompressionReport>,
}

/// Per-layer factorization settings for `compress_model`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressSpec {
    /// TT settings, one per hidden dense layer being replaced (hidden layers
    /// for a DNN, the post-flatten dense stack for a CNN). Either empty or
    /// one entry per such layer.
    #[serde(default)]
    pub tt: Vec<TtCompressLayer>,
    /// TT settings for the final linear layer (the output-only CNN-TT
    /// variant, combinable with `tt`).
    #[serde(default)]
    pub tt_output: Option<TtCompressLayer>,
    /// Tucker ranks, one per factored conv layer (all but the top one).
    #[serde(default)]
    pub tucker: Vec<TuckerRankSpec>,
    /// Truncation tolerance for TT (0 = exact).
    #[serde(default)]
    pub tol: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TtCompressLayer {
    pub m: Vec<usize>,
    pub n: Vec<usize>,
    /// None = unbounded (exact factorization).
    #[serde(default)]
    pub max_ranks: Option<Vec<usize>>,
}

/// Factor designated layers of a trained model, copying everything else
/// bitwise. dnn -> dnn_tt, cnn -> cnn_tt, cnn -> cnn_tucker.
pub fn compress_model(
    trained: &BuiltModel,
    target: ModelKind,
    spec: &CompressSpec,
) -> Result<(BuiltModel, CompressionReport)> {
    let source = trained.config.kind;
    match (source, target) {
        (ModelKind::Dnn, ModelKind::DnnTt)
        | (ModelKind::Cnn, ModelKind::CnnTt)
        | (ModelKind::Cnn, ModelKind::CnnTucker) => {}
        _ => {
            return Err(Error::Validation(format!(
                "unsupported compression {} -> {}",
                source.as_str(),
                target.as_str()
            )))
        }
    }
    match target {
        ModelKind::DnnTt => {
            if spec.tt.len() != trained.config.hidden_dims.len() {
                return Err(Error::Validation(format!(
                    "dnn -> dnn_tt needs one tt spec per hidden layer ({} != {})",
                    spec.tt.len(),
                    trained.config.hidden_dims.len()
                )));
            }
        }
        ModelKind::CnnTt => {
            if !spec.tt.is_empty() && spec.tt.len() != trained.config.fc_dims.len() {
                return Err(Error::Validation(format!(
                    "cnn -> cnn_tt needs one tt spec per fc layer ({} != {})",
                    spec.tt.len(),
                    trained.config.fc_dims.len()
                )));
            }
            if spec.tt.is_empty() && spec.tt_output.is_none() {
                return Err(Error::Validation(
                    "cnn -> cnn_tt needs tt specs and/or a tt_output spec".into(),
                ));
            }
        }
        ModelKind::CnnTucker => {
            let want = trained.config.conv.len().saturating_sub(1);
            if spec.tucker.len() != want {
                return Err(Error::Validation(format!(
                    "cnn -> cnn_tucker factors all conv layers except the top one: \
                     need {want} rank pairs, got {}",
                    spec.tucker.len()
                )));
            }
        }
        _ => unreachable!(),
    }

    let mut report = CompressionReport {
        old_total: trained.param_count(),
        new_total: 0,
        layers: Vec::new(),
    };
    let mut new_config = trained.config.clone();
    new_config.kind = target;

    let mut layers: Vec<Box<dyn Layer>> = Vec::new();
    let mut tt_used = 0usize;
    let mut conv_seen = 0usize;
    let n_model_layers = trained.layers().len();

    for (i, layer) in trained.layers().iter().enumerate() {
        let at = format!("{i:02}.{}", layer.kind());
        match layer.kind() {
            "fc" => {
                let params = layer.params();
                let weight = params[0].1;
                let bias = params[1].1;
                // hidden dense layers consume `tt` specs in order; the final
                // linear layer is factored only when `tt_output` is given
                let is_output = i == n_model_layers - 1;
                let chosen = if is_output {
                    spec.tt_output.as_ref()
                } else if tt_used < spec.tt.len() {
                    let ts = &spec.tt[tt_used];
                    tt_used += 1;
                    Some(ts)
                } else {
                    None
                };
                if let Some(ts) = chosen {
                    let (in_dim, out_dim) = (weight.shape()[0], weight.shape()[1]);
                    let m_prod: usize = ts.m.iter().product();
                    let n_prod: usize = ts.n.iter().product();
                    if m_prod != out_dim || n_prod != in_dim {
                        return Err(Error::Validation(format!(
                            "{at}: tt factors ({m_prod} x {n_prod}) do not match weight ({out_dim} x {in_dim})"
                        )));
                    }
                    // the TT carries W^T: y = W_tt x with x the layer input
                    let wt = weight.transposed()?;
                    let res = tt_svd(&wt, &ts.m, &ts.n, ts.max_ranks.as_deref(), spec.tol)?;
                    let old = weight.len() + bias.len();
                    let new = res.cores.param_count() + bias.len();
                    report.layers.push(LayerCompressionReport {
                        layer: at.clone(),
                        old_params: old,
                        new_params: new,
                        recon_error: res.error_bound,
                    });
                    let tt_layer = TTLayer::new(res.cores, bias.clone())?;
                    record_tt_spec(&mut new_config, ts, tt_layer.cores().shape(), is_output);
                    layers.push(Box::new(tt_layer));
                } else {
                    layers.push(Box::new(FCLayer::new(weight.clone(), bias.clone())?));
                }
            }
            "conv2d" => {
                let conv_index = conv_seen;
                let params = layer.params();
                let kernel = params[0].1;
                let bias = params[1].1;
                let stride = conv_stride(&trained.config, conv_index);
                let factor =
                    target == ModelKind::CnnTucker && conv_index < spec.tucker.len();
                if factor {
                    let r = spec.tucker[conv_index];
                    let (tk, err) = hosvd_decompose(kernel, r.rc, r.rs)
                        .map_err(|e| Error::Validation(format!("{at}: {e}")))?;
                    let old = kernel.len() + bias.len();
                    let new = tk.param_count() + bias.len();
                    report.layers.push(LayerCompressionReport {
                        layer: at.clone(),
                        old_params: old,
                        new_params: new,
                        recon_error: err,
                    });
                    layers.push(Box::new(TuckerConvLayer::new(
                        tk,
                        bias.clone(),
                        stride,
                        false,
                    )?));
                } else {
                    layers.push(Box::new(Conv2DLayer::new(
                        kernel.clone(),
                        bias.clone(),
                        stride,
                    )?));
                }
                conv_seen += 1;
            }
            "relu" => layers.push(Box::new(ReluLayer::new())),
            "flatten" => layers.push(Box::new(FlattenLayer::new())),
            "image" => {
                let cfg = &trained.config.input;
                layers.push(Box::new(ImageLayer::new(
                    cfg.context_frames,
                    cfg.freq_bins,
                    cfg.channels,
                )));
            }
            "batchnorm" => {
                let params = layer.params();
                let c = params[0].1.shape()[0];
                let mut bn = BatchNormLayer::new(c);
                for (slot, (_, src)) in bn.params_mut().into_iter().zip(params.iter()) {
                    slot.1.data_mut().copy_from_slice(src.data());
                }
                let state = layer.state();
                for (slot, (_, src)) in bn.state_mut().into_iter().zip(state.iter()) {
                    slot.1.data_mut().copy_from_slice(src.data());
                }
                layers.push(Box::new(bn));
            }
            other => {
                return Err(Error::Validation(format!(
                    "{at}: cannot compress a model containing `{other}` layers"
                )))
            }
        }
    }

    if target == ModelKind::CnnTucker {
        new_config.tucker_ranks = spec.tucker.clone();
    }

    let built = BuiltModel {
        config: new_config,
        layers,
    };
    report.new_total = built.param_count();
    Ok((built, report))
}

fn conv_stride(config: &ModelConfig, conv_index: usize) -> (usize, usize) {
    config
        .conv
        .get(conv_index)
        .map(|c| c.stride)
        .unwrap_or((1, 1))
}

/// Keep the config in sync with an actual factorization so compressed models
/// round-trip through config + tensors.
fn record_tt_spec(config: &mut ModelConfig, ts: &TtCompressLayer, shape: &TTShape, output: bool) {
    let spec = TtLayerSpec {
        m: ts.m.clone(),
        n: ts.n.clone(),
        ranks: shape.r[1..shape.r.len() - 1].to_vec(),
    };
    match config.kind {
        ModelKind::DnnTt => config.tt_hidden.push(spec),
        ModelKind::CnnTt => {
            if output {
                config.tt_output = Some(spec);
            } else {
                config.tt_fc.push(spec);
            }
        }
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn edinburgh_dnn_config() -> ModelConfig {
        ModelConfig {
            kind: ModelKind::Dnn,
            input: InputSpec {
                freq_bins: 257,
                context_frames: 3,
                channels: 1,
                nat: false,
            },
            output_dim: 257,
            hidden_dims: vec![1024, 1024, 1024, 2048],
            conv: vec![],
            fc_dims: vec![],
            tt_hidden: vec![],
            tt_fc: vec![],
            tt_output: None,
            tucker_ranks: vec![],
        }
    }

    fn small_dnn() -> ModelConfig {
        ModelConfig {
            kind: ModelKind::Dnn,
            input: InputSpec {
                freq_bins: 8,
                context_frames: 3,
                channels: 1,
                nat: false,
            },
            output_dim: 8,
            hidden_dims: vec![12, 16],
            conv: vec![],
            fc_dims: vec![],
            tt_hidden: vec![],
            tt_fc: vec![],
            tt_output: None,
            tucker_ranks: vec![],
        }
    }

    fn small_cnn() -> ModelConfig {
        ModelConfig {
            kind: ModelKind::Cnn,
            input: InputSpec {
                freq_bins: 17,
                context_frames: 5,
                channels: 1,
                nat: false,
            },
            output_dim: 17,
            conv: vec![
                ConvSpec {
                    channels: 4,
                    kernel: 3,
                    stride: (1, 2),
                },
                ConvSpec {
                    channels: 6,
                    kernel: 2,
                    stride: (1, 1),
                },
            ],
            fc_dims: vec![24, 16],
            hidden_dims: vec![],
            tt_hidden: vec![],
            tt_fc: vec![],
            tt_output: None,
            tucker_ranks: vec![],
        }
    }

    #[test]
    fn edinburgh_dnn_parameter_count() {
        let config = edinburgh_dnn_config();
        assert_eq!(config.input_width(), 771);
        assert_eq!(count_params_formula(&config).unwrap(), 5_515_521);
        // enumeration agrees
        let model = build_model(&config, &mut RngState::new(0)).unwrap();
        assert_eq!(model.param_count(), 5_515_521);
        // 5 weight matrices
        assert_eq!(model.per_layer_counts().len(), 5);
    }

    #[test]
    fn single_fc_count() {
        let config = ModelConfig {
            kind: ModelKind::Dnn,
            input: InputSpec {
                freq_bins: 4,
                context_frames: 1,
                channels: 1,
                nat: false,
            },
            output_dim: 2,
            hidden_dims: vec![4],
            conv: vec![],
            fc_dims: vec![],
            tt_hidden: vec![],
            tt_fc: vec![],
            tt_output: None,
            tucker_ranks: vec![],
        };
        // 4*4+4 hidden + 4*2+2 output
        assert_eq!(count_params_formula(&config).unwrap(), 30);
        let single = build_model(&config, &mut RngState::new(1)).unwrap();
        assert_eq!(single.per_layer_counts()[1].1, 10); // the 4->2 output
    }

    #[test]
    fn tt_replacement_reduces_count() {
        let dense_in = 1024 * (1024 + 1); // one FC 1024 -> 1024... reference only
        let spec = TtLayerSpec {
            m: vec![8, 8, 8, 4],
            n: vec![8, 8, 4, 4],
            ranks: vec![4, 4, 4],
        };
        let shape = spec.shape().unwrap();
        assert_eq!(shape.out_dim(), 2048);
        assert_eq!(shape.in_dim(), 1024);
        let tt_count = crate::tt::tt_param_count(&shape) + 2048;
        let full = 1024 * 2048 + 2048;
        assert!(tt_count < full / 10, "tt {tt_count} vs dense {full}");
        let _ = dense_in;
    }

    #[test]
    fn build_determinism() {
        let config = small_cnn();
        let a = build_model(&config, &mut RngState::new(9)).unwrap();
        let b = build_model(&config, &mut RngState::new(9)).unwrap();
        for ((na, ta), (nb, tb)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn forward_shapes_for_all_kinds() {
        let mut rng = RngState::new(2);
        for config in [small_dnn(), small_cnn()] {
            let mut model = build_model(&config, &mut rng).unwrap();
            let x = RngState::new(5).normal_tensor(&[3, config.input_width()], 1.0);
            let out = model.forward(&x, Mode::Infer).unwrap();
            assert_eq!(out.shape(), &[3, config.output_dim]);
        }
    }

    #[test]
    fn invalid_tt_widths_are_rejected() {
        let mut config = small_dnn();
        config.kind = ModelKind::DnnTt;
        config.tt_hidden = vec![
            TtLayerSpec {
                m: vec![3, 4],
                n: vec![5, 5], // 25 != 24 incoming
                ranks: vec![2],
            },
            TtLayerSpec {
                m: vec![4, 4],
                n: vec![3, 4],
                ranks: vec![2],
            },
        ];
        let msg = match build_model(&config, &mut RngState::new(0)) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("expected a validation error"),
        };
        assert!(msg.contains("hidden0"), "{msg}");
    }

    #[test]
    fn count_matches_enumeration_for_factored_kinds() {
        let mut rng = RngState::new(3);
        // DNN-TT
        let mut config = small_dnn();
        config.kind = ModelKind::DnnTt;
        config.tt_hidden = vec![
            TtLayerSpec {
                m: vec![3, 4],
                n: vec![4, 6],
                ranks: vec![2],
            },
            TtLayerSpec {
                m: vec![4, 4],
                n: vec![3, 4],
                ranks: vec![3],
            },
        ];
        let model = build_model(&config, &mut rng).unwrap();
        assert_eq!(model.param_count(), count_params_formula(&config).unwrap());

        // CNN-TT both-fc variant
        let mut config = small_cnn();
        config.kind = ModelKind::CnnTt;
        config.tt_fc = vec![
            TtLayerSpec {
                m: vec![4, 6],
                n: vec![7, 12], // flatten width = 84
                ranks: vec![2],
            },
            TtLayerSpec {
                m: vec![4, 4],
                n: vec![4, 6],
                ranks: vec![2],
            },
        ];
        let model = build_model(&config, &mut rng).unwrap();
        assert_eq!(model.param_count(), count_params_formula(&config).unwrap());

        // CNN-Tucker: first conv factored, top conv dense
        let mut config = small_cnn();
        config.kind = ModelKind::CnnTucker;
        config.tucker_ranks = vec![TuckerRankSpec { rc: 1, rs: 3 }];
        let model = build_model(&config, &mut rng).unwrap();
        assert_eq!(model.param_count(), count_params_formula(&config).unwrap());
        // structural wiring: layer kinds in order
        let kinds: Vec<&str> = model.layers().iter().map(|l| l.kind()).collect();
        assert_eq!(
            kinds,
            vec![
                "image",
                "tucker_conv",
                "relu",
                "batchnorm",
                "conv2d",
                "relu",
                "batchnorm",
                "flatten",
                "fc",
                "relu",
                "fc",
                "relu",
                "fc"
            ]
        );
    }

    #[test]
    fn json_round_trip() {
        let config = small_cnn();
        let text = config.to_json();
        let back = ModelConfig::from_json(&text).unwrap();
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn compress_dnn_to_tt_is_lossless_at_full_rank() {
        let mut rng = RngState::new(4);
        let config = small_dnn();
        let trained = build_model(&config, &mut rng).unwrap();
        let spec = CompressSpec {
            tt: vec![
                TtCompressLayer {
                    m: vec![3, 4],
                    n: vec![4, 6],
                    max_ranks: None,
                },
                TtCompressLayer {
                    m: vec![4, 4],
                    n: vec![3, 4],
                    max_ranks: None,
                },
            ],
            tt_output: None,
            tucker: vec![],
            tol: 0.0,
        };
        let (mut compressed, report) = compress_model(&trained, ModelKind::DnnTt, &spec).unwrap();
        assert_eq!(report.layers.len(), 2);
        let mut trained = trained;
        for seed in 0..20 {
            let x = RngState::new(100 + seed).normal_tensor(&[2, config.input_width()], 1.0);
            let a = trained.forward(&x, Mode::Infer).unwrap();
            let b = compressed.forward(&x, Mode::Infer).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-8, "seed {seed}");
        }
        assert_eq!(compressed.config.kind, ModelKind::DnnTt);
        assert_eq!(compressed.config.tt_hidden.len(), 2);
    }

    #[test]
    fn compress_cnn_to_tucker_full_rank_is_lossless() {
        let mut rng = RngState::new(6);
        let config = small_cnn();
        let mut trained = build_model(&config, &mut rng).unwrap();
        let spec = CompressSpec {
            tt: vec![],
            tt_output: None,
            tucker: vec![TuckerRankSpec { rc: 1, rs: 4 }], // full ranks (c_in = 1, s = 4)
            tol: 0.0,
        };
        let (mut compressed, report) = compress_model(&trained, ModelKind::CnnTucker, &spec).unwrap();
        assert_eq!(report.layers.len(), 1);
        assert!(report.layers[0].recon_error < 1e-10);
        for seed in 0..10 {
            let x = RngState::new(200 + seed).normal_tensor(&[2, config.input_width()], 1.0);
            let a = trained.forward(&x, Mode::Infer).unwrap();
            let b = compressed.forward(&x, Mode::Infer).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-8, "seed {seed}");
        }
    }

    #[test]
    fn compress_with_infeasible_rank_reports_layer() {
        let mut rng = RngState::new(7);
        let trained = build_model(&small_cnn(), &mut rng).unwrap();
        let spec = CompressSpec {
            tt: vec![],
            tt_output: None,
            tucker: vec![TuckerRankSpec { rc: 9, rs: 9 }],
            tol: 0.0,
        };
        let msg = match compress_model(&trained, ModelKind::CnnTucker, &spec) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("expected a validation error"),
        };
        assert!(msg.contains("01.conv2d"), "{msg}");
    }

    #[test]
    fn compress_wrong_direction_is_rejected() {
        let trained = build_model(&small_dnn(), &mut RngState::new(8)).unwrap();
        let spec = CompressSpec {
            tt: vec![],
            tt_output: None,
            tucker: vec![],
            tol: 0.0,
        };
        assert!(compress_model(&trained, ModelKind::CnnTucker, &spec).is_err());
    }

    #[test]
    fn dump_and_load_round_trip() {
        let config = small_cnn();
        let model = build_model(&config, &mut RngState::new(10)).unwrap();
        let tensors = model.dump_tensors();
        let mut fresh = build_model(&config, &mut RngState::new(11)).unwrap();
        fresh.load_tensors(&tensors).unwrap();
        for ((_, a), (_, b)) in model.params().iter().zip(fresh.params().iter()) {
            assert_eq!(a, b);
        }
    }
}
