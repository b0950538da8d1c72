//! Parameter layout, initialization and the forward passes of the
//! encoders and the training-only multimodal network.

use ndarray::Array2;
use rand::Rng;

use super::batch::{stack_all, TripletBatch};
use super::config::{FusionMode, ZsihConfig};
use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{FeatureSet, Modality};
use crate::error::{Error, Result};
use crate::layers::{
    self, Activation, AttentionPool, ConcatFusion, GaussianDecoder, GraphConvLayer, HashEncoder,
    KroneckerFusion, MfbFusion, ParamVisit,
};

#[derive(Clone, Debug, PartialEq)]
pub enum Fusion<T = Tensor> {
    Kronecker(KroneckerFusion<T>),
    Concat(ConcatFusion<T>),
    Mfb(MfbFusion<T>),
}

impl<T> Fusion<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Fusion<U> {
        match self {
            Fusion::Kronecker(p) => Fusion::Kronecker(p.map(f)),
            Fusion::Concat(p) => Fusion::Concat(p.map(f)),
            Fusion::Mfb(p) => Fusion::Mfb(p.map(f)),
        }
    }

    pub fn mode(&self) -> FusionMode {
        match self {
            Fusion::Kronecker(_) => FusionMode::Kronecker,
            Fusion::Concat(_) => FusionMode::Concat,
            Fusion::Mfb(_) => FusionMode::Mfb,
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        match self {
            Fusion::Kronecker(p) => p.visit("fusion", f),
            Fusion::Concat(p) => p.visit("fusion", f),
            Fusion::Mfb(p) => p.visit("fusion", f),
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut T)) {
        match self {
            Fusion::Kronecker(p) => p.visit_mut("fusion", f),
            Fusion::Concat(p) => p.visit_mut("fusion", f),
            Fusion::Mfb(p) => p.visit_mut("fusion", f),
        }
    }
}

/// Every trainable weight of the model.
///
/// The image encoder is `f(·)` and the sketch encoder `g(·)`; both read the
/// attention pools that also feed the fusion layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub sketch_attention: AttentionPool<T>,
    pub image_attention: AttentionPool<T>,
    pub fusion: Fusion<T>,
    pub gcn1: GraphConvLayer<T>,
    pub gcn2: GraphConvLayer<T>,
    pub image_encoder: HashEncoder<T>,
    pub sketch_encoder: HashEncoder<T>,
    pub decoder: GaussianDecoder<T>,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            sketch_attention: self.sketch_attention.map(&mut f),
            image_attention: self.image_attention.map(&mut f),
            fusion: self.fusion.map(&mut f),
            gcn1: self.gcn1.map(&mut f),
            gcn2: self.gcn2.map(&mut f),
            image_encoder: self.image_encoder.map(&mut f),
            sketch_encoder: self.sketch_encoder.map(&mut f),
            decoder: self.decoder.map(&mut f),
        }
    }

    /// Visits parameters in canonical order with dotted names.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(String, &'a T)) {
        self.sketch_attention.visit("sketch_attention", &mut f);
        self.image_attention.visit("image_attention", &mut f);
        self.fusion.visit(&mut f);
        self.gcn1.visit("gcn1", &mut f);
        self.gcn2.visit("gcn2", &mut f);
        self.image_encoder.visit("image_encoder", &mut f);
        self.sketch_encoder.visit("sketch_encoder", &mut f);
        self.decoder.visit("decoder", &mut f);
    }

    pub fn visit_mut<'a>(&'a mut self, mut f: impl FnMut(String, &'a mut T)) {
        self.sketch_attention.visit_mut("sketch_attention", &mut f);
        self.image_attention.visit_mut("image_attention", &mut f);
        self.fusion.visit_mut(&mut f);
        self.gcn1.visit_mut("gcn1", &mut f);
        self.gcn2.visit_mut("gcn2", &mut f);
        self.image_encoder.visit_mut("image_encoder", &mut f);
        self.sketch_encoder.visit_mut("sketch_encoder", &mut f);
        self.decoder.visit_mut("decoder", &mut f);
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit(|name, t| out.push((name, t)));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        self.visit_mut(|name, t| out.push((name, t)));
        out
    }
}

fn is_bias(name: &str) -> bool {
    let field = name.rsplit('.').next().unwrap_or(name);
    field == "b" || field.starts_with("b_") || field.ends_with("bias")
}

impl ModelParams<Tensor> {
    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: &ZsihConfig) -> Result<Self> {
        config.validate_dims()?;
        let d_f = config.feature_dim;
        let m = config.code_bits;
        let fused = config.fused_dim();
        let z = |r: usize, c: usize| Array2::zeros((r, c));
        let attention = |c: usize| AttentionPool {
            score_weights: z(c, 1),
            score_bias: z(1, 1),
            proj_weights: z(c, d_f),
            proj_bias: z(1, d_f),
        };
        let fusion = match config.fusion_mode {
            FusionMode::Kronecker => Fusion::Kronecker(KroneckerFusion {
                w_sk: z(d_f, d_f),
                w_im: z(d_f, d_f),
            }),
            FusionMode::Concat => Fusion::Concat(ConcatFusion {
                proj: z(2 * d_f, fused),
                bias: z(1, fused),
            }),
            FusionMode::Mfb => Fusion::Mfb(MfbFusion {
                u: z(d_f, config.mfb_factor * d_f),
                v: z(d_f, config.mfb_factor * d_f),
                proj: z(d_f, fused),
                bias: z(1, fused),
                factor: config.mfb_factor,
            }),
        };
        let encoder = || HashEncoder {
            w: z(d_f, m),
            b: z(1, m),
        };
        Ok(Self {
            sketch_attention: attention(config.sketch_channels),
            image_attention: attention(config.image_channels),
            fusion,
            gcn1: GraphConvLayer {
                w_theta: z(fused, config.gcn_hidden),
                activation: Activation::Relu,
            },
            gcn2: GraphConvLayer {
                w_theta: z(config.gcn_hidden, m),
                activation: Activation::Sigmoid,
            },
            image_encoder: encoder(),
            sketch_encoder: encoder(),
            decoder: GaussianDecoder {
                w_mu: z(m, config.semantic_dim),
                b_mu: z(1, config.semantic_dim),
                w_logvar: z(m, config.semantic_dim),
                b_logvar: z(1, config.semantic_dim),
            },
        })
    }

    /// Weights uniform in `±√(6/(fan_in+fan_out))`, biases zero.
    pub fn init(config: &ZsihConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        params.visit_mut(|name, t| {
            if is_bias(&name) {
                return;
            }
            let (fan_in, fan_out) = t.dim();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            t.mapv_inplace(|_| rng.random_range(-limit..limit));
        });
        Ok(params)
    }

    /// Registers every tensor as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> ModelParams<Var> {
        self.map(|t| g.param(t.clone()))
    }

    /// Registers every tensor as a constant (inference).
    pub fn bind_constant(&self, g: &mut Graph) -> ModelParams<Var> {
        self.map(|t| g.constant(t.clone()))
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.len());
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, t| ok &= t.iter().all(|v| v.is_finite()));
        ok
    }
}

impl ModelParams<Var> {
    /// Reads accumulated gradients back into tensor form.
    pub fn grads(&self, g: &Graph) -> ModelParams<Tensor> {
        self.map(|v| g.grad(*v).clone())
    }
}

/// Everything computed before the stochastic neurons.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub h_sk: Var,
    pub h_im: Var,
    pub fused: Var,
    pub hidden: Var,
    /// Code probabilities `b`, `N_B × M`.
    pub probs: Var,
    /// `f(x)` on the images.
    pub f_out: Var,
    /// `g(y)` on the sketches.
    pub g_out: Var,
}

/// Attention, fusion and the two graph (or dense) layers for a batch.
pub fn encode_batch(
    g: &mut Graph,
    batch: &TripletBatch,
    params: &ModelParams<Var>,
    adjacency: &Tensor,
    use_gcn: bool,
) -> Result<Encoded> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::Config(format!("batch of {n} items; at least 2 are required")));
    }
    if adjacency.dim() != (n, n) {
        return Err(Error::Config(format!(
            "adjacency is {:?} for a batch of {n}",
            adjacency.dim()
        )));
    }
    let sk = g.constant(batch.sketch_feats.clone());
    let im = g.constant(batch.image_feats.clone());
    let h_sk = layers::attention_pool(g, sk, batch.sketch_locations, &params.sketch_attention)?.output;
    let h_im = layers::attention_pool(g, im, batch.image_locations, &params.image_attention)?.output;

    let fused = match &params.fusion {
        Fusion::Kronecker(p) => layers::fuse(g, h_sk, h_im, p)?,
        Fusion::Concat(p) => layers::fuse_concat(g, h_sk, h_im, p)?,
        Fusion::Mfb(p) => layers::fuse_mfb(g, h_sk, h_im, p)?,
    };
    let (hidden, probs) = if use_gcn {
        let h1 = layers::graph_conv(g, fused, adjacency, &params.gcn1)?;
        (h1, layers::graph_conv(g, h1, adjacency, &params.gcn2)?)
    } else {
        let h1 = layers::dense(g, fused, &params.gcn1)?;
        (h1, layers::dense(g, h1, &params.gcn2)?)
    };

    let f_out = layers::encode_soft(g, h_im, &params.image_encoder)?;
    let g_out = layers::encode_soft(g, h_sk, &params.sketch_encoder)?;
    Ok(Encoded {
        h_sk,
        h_im,
        fused,
        hidden,
        probs,
        f_out,
        g_out,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct MultimodalOutput {
    pub b: Var,
    pub b_tilde: Var,
    pub f_out: Var,
    pub g_out: Var,
}

/// Full training-time forward pass with one threshold draw per bit.
pub fn forward_multimodal(
    g: &mut Graph,
    batch: &TripletBatch,
    params: &ModelParams<Var>,
    adjacency: &Tensor,
    eps: &Tensor,
    use_gcn: bool,
) -> Result<MultimodalOutput> {
    let enc = encode_batch(g, batch, params, adjacency, use_gcn)?;
    let b_tilde = layers::stochastic_neurons(g, enc.probs, eps)?;
    Ok(MultimodalOutput {
        b: enc.probs,
        b_tilde,
        f_out: enc.f_out,
        g_out: enc.g_out,
    })
}

/// Soft codes `f(x)` for images or `g(y)` for sketches, `N × M`.
///
/// Only the single-modality encoder runs; no semantics are needed.
pub fn encode_features(params: &ModelParams, set: &FeatureSet) -> Result<Tensor> {
    const CHUNK: usize = 512;
    let (attention, encoder) = match set.modality {
        Modality::Sketch => (&params.sketch_attention, &params.sketch_encoder),
        Modality::Image => (&params.image_attention, &params.image_encoder),
    };
    let expected = attention.score_weights.nrows();
    if set.channels != expected {
        return Err(Error::dim(
            "encode",
            format!(
                "{} features have {} channels, checkpoint expects {expected}",
                set.modality, set.channels
            ),
        ));
    }
    let m = encoder.w.ncols();
    let mut out = Array2::zeros((set.len(), m));
    let mut start = 0;
    while start < set.len() {
        let end = (start + CHUNK).min(set.len());
        let mut g = Graph::new();
        let att = attention.map(&mut |t: &Tensor| g.constant(t.clone()));
        let enc = encoder.map(&mut |t: &Tensor| g.constant(t.clone()));
        let feats = g.constant(stack_all(set, start..end));
        let pooled = layers::attention_pool(&mut g, feats, set.locations, &att)?;
        let soft = layers::encode_soft(&mut g, pooled.output, &enc)?;
        out.slice_mut(ndarray::s![start..end, ..]).assign(g.value(soft));
        start = end;
    }
    Ok(out)
}
