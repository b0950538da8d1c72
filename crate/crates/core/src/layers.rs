//! Model building blocks: attention pooling, fusion, graph convolution,
//! sigmoid hash heads, stochastic binary neurons and the Gaussian decoder.
//!
//! Every parameterized layer is generic over its storage `T`. With
//! `T = Tensor` it holds weights; mapped onto a [`Graph`] it holds [`Var`]
//! handles, and the same shape is reused for gradients and optimizer moments.

use std::f64::consts::PI;

use ndarray::Array2;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Probability clamp used before taking logs of code probabilities.
pub const PROB_CLAMP: f64 = 1e-7;

/// Uniform visitor over the named parameters of a layer.
pub trait ParamVisit<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T));
}

macro_rules! param_struct {
    ($(#[$meta:meta])* $name:ident { $($field:ident),+ $(,)? } $(extra { $($xf:ident : $xt:ty),* })?) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T = Tensor> {
            $(pub $field: T,)+
            $($(pub $xf: $xt,)*)?
        }

        impl<T> $name<T> {
            pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> $name<U> {
                $name {
                    $($field: f(&self.$field),)+
                    $($($xf: self.$xf.clone(),)*)?
                }
            }

            pub fn try_map<U, E>(&self, f: &mut impl FnMut(&T) -> std::result::Result<U, E>) -> std::result::Result<$name<U>, E> {
                Ok($name {
                    $($field: f(&self.$field)?,)+
                    $($($xf: self.$xf.clone(),)*)?
                })
            }
        }

        impl<T> ParamVisit<T> for $name<T> {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
                $(f(format!("{prefix}.{}", stringify!($field)), &self.$field);)+
            }

            fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
                $(f(format!("{prefix}.{}", stringify!($field)), &mut self.$field);)+
            }
        }
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

param_struct! {
    /// Single-score-per-location softmax pooling followed by a ReLU
    /// projection. `score_weights` is `C × 1`, `score_bias` `1 × 1`,
    /// `proj_weights` `C × d_f`, `proj_bias` `1 × d_f`.
    AttentionPool { score_weights, score_bias, proj_weights, proj_bias }
}

param_struct! {
    /// Kronecker fusion. Both matrices are `d_f × d_f`.
    KroneckerFusion { w_sk, w_im }
}

param_struct! {
    /// Concatenation ablation: `[h_sk, h_im]` projected to `d_f²`.
    ConcatFusion { proj, bias }
}

param_struct! {
    /// Factorized bilinear pooling ablation. `u`, `v` are `d_f × (k·d_f)`;
    /// the sum-pooled `d_f` vector is projected to `d_f²`.
    MfbFusion { u, v, proj, bias } extra { factor: usize }
}

param_struct! {
    /// Propagation `δ(D^-½ A D^-½ H W)`; `w_theta` is `d_in × d_out`.
    GraphConvLayer { w_theta } extra { activation: Activation }
}

param_struct! {
    /// Sigmoid hash head, `w` is `d_f × M` and `b` is `1 × M`.
    HashEncoder { w, b }
}

param_struct! {
    /// Linear heads for the mean and log-variance of the semantic decoder.
    GaussianDecoder { w_mu, b_mu, w_logvar, b_logvar }
}

/// Softmax-pooled features and the attention weights that produced them.
#[derive(Clone, Copy, Debug)]
pub struct Pooled {
    pub output: Var,
    pub weights: Var,
}

/// Attention pooling over a batch of feature maps.
///
/// `feats` stacks `n` maps of `locations` rows each, so it is
/// `(n·locations) × C`. Returns `n × d_f`.
pub fn attention_pool(
    g: &mut Graph,
    feats: Var,
    locations: usize,
    params: &AttentionPool<Var>,
) -> Result<Pooled> {
    if locations == 0 {
        return Err(Error::EmptyInput("attention pooling over zero locations".into()));
    }
    let (rows, channels) = g.shape(feats);
    if rows % locations != 0 {
        return Err(Error::dim(
            "attention_pool",
            format!("{rows} rows is not a multiple of {locations} locations"),
        ));
    }
    if g.shape(params.score_weights).0 != channels {
        return Err(Error::dim(
            "attention_pool",
            format!(
                "feature maps have {channels} channels, layer expects {}",
                g.shape(params.score_weights).0
            ),
        ));
    }
    let n = rows / locations;
    let raw = g.matmul(feats, params.score_weights)?;
    let raw = g.add(raw, params.score_bias)?;
    let raw = g.reshape(raw, n, locations)?;
    let weights = g.softmax_rows(raw)?;
    let pooled = g.pool_rows(weights, feats)?;
    let proj = g.matmul(pooled, params.proj_weights)?;
    let proj = g.add(proj, params.proj_bias)?;
    Ok(Pooled {
        output: g.relu(proj),
        weights,
    })
}

fn check_pair(g: &Graph, op: &'static str, h_sk: Var, h_im: Var, d_f: usize) -> Result<()> {
    let (n1, a) = g.shape(h_sk);
    let (n2, b) = g.shape(h_im);
    if n1 != n2 || a != d_f || b != d_f {
        return Err(Error::dim(
            op,
            format!("expected two n x {d_f} inputs, got {n1}x{a} and {n2}x{b}"),
        ));
    }
    Ok(())
}

/// `(h_sk W_sk) ⊗ (h_im W_im)` row by row, before the ReLU.
pub fn fuse_pre_activation(
    g: &mut Graph,
    h_sk: Var,
    h_im: Var,
    params: &KroneckerFusion<Var>,
) -> Result<Var> {
    let d_f = g.shape(params.w_sk).0;
    check_pair(g, "fuse", h_sk, h_im, d_f)?;
    let a = g.matmul(h_sk, params.w_sk)?;
    let b = g.matmul(h_im, params.w_im)?;
    g.kron_rows(a, b)
}

/// Kronecker fusion layer, `n × d_f` twice to `n × d_f²`.
pub fn fuse(g: &mut Graph, h_sk: Var, h_im: Var, params: &KroneckerFusion<Var>) -> Result<Var> {
    let pre = fuse_pre_activation(g, h_sk, h_im, params)?;
    Ok(g.relu(pre))
}

pub fn fuse_concat(g: &mut Graph, h_sk: Var, h_im: Var, params: &ConcatFusion<Var>) -> Result<Var> {
    let d_f = g.shape(params.proj).0 / 2;
    check_pair(g, "fuse_concat", h_sk, h_im, d_f)?;
    let cat = g.concat_cols(h_sk, h_im)?;
    let proj = g.matmul(cat, params.proj)?;
    let proj = g.add(proj, params.bias)?;
    Ok(g.relu(proj))
}

pub fn fuse_mfb(g: &mut Graph, h_sk: Var, h_im: Var, params: &MfbFusion<Var>) -> Result<Var> {
    let d_f = g.shape(params.u).0;
    check_pair(g, "fuse_mfb", h_sk, h_im, d_f)?;
    let k = params.factor;
    let u = g.matmul(h_sk, params.u)?;
    let v = g.matmul(h_im, params.v)?;
    let joint = g.mul(u, v)?;
    // sum-pool consecutive windows of k
    let width = g.shape(joint).1;
    let out = width / k;
    let mut pool = Array2::zeros((width, out));
    for c in 0..width {
        pool[[c, c / k]] = 1.0;
    }
    let pool = g.constant(pool);
    let pooled = g.matmul(joint, pool)?;
    let proj = g.matmul(pooled, params.proj)?;
    let proj = g.add(proj, params.bias)?;
    Ok(g.relu(proj))
}

/// `D^-½ A D^-½` with `D = diag(A·1)`.
///
/// `A` must be square, symmetric, finite and nonnegative with positive row
/// sums.
pub fn normalize_adjacency(adjacency: &Tensor) -> Result<Tensor> {
    let (n, m) = adjacency.dim();
    if n != m {
        return Err(Error::Adjacency(format!("adjacency is {n}x{m}, not square")));
    }
    for j in 0..n {
        for k in 0..n {
            let v = adjacency[[j, k]];
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Adjacency(format!("entry ({j},{k}) = {v} is invalid")));
            }
            if v != adjacency[[k, j]] {
                return Err(Error::Adjacency(format!("not symmetric at ({j},{k})")));
            }
        }
    }
    let mut inv_sqrt = Vec::with_capacity(n);
    for (j, row) in adjacency.rows().into_iter().enumerate() {
        let degree = row.sum();
        if degree <= 0.0 {
            return Err(Error::Adjacency(format!("row {j} has zero degree")));
        }
        inv_sqrt.push(1.0 / degree.sqrt());
    }
    let mut out = adjacency.clone();
    for ((j, k), v) in out.indexed_iter_mut() {
        *v *= inv_sqrt[j] * inv_sqrt[k];
    }
    Ok(out)
}

/// Graph convolution over a batch treated as an `N_B`-vertex graph.
///
/// The adjacency is a constant; no gradient flows into it.
pub fn graph_conv(
    g: &mut Graph,
    h: Var,
    adjacency: &Tensor,
    layer: &GraphConvLayer<Var>,
) -> Result<Var> {
    let n = g.shape(h).0;
    if adjacency.dim() != (n, n) {
        return Err(Error::Adjacency(format!(
            "adjacency is {}x{}, batch has {n} rows",
            adjacency.nrows(),
            adjacency.ncols()
        )));
    }
    let norm = g.constant(normalize_adjacency(adjacency)?);
    let mixed = g.matmul(norm, h)?;
    let lin = g.matmul(mixed, layer.w_theta)?;
    Ok(layer.activation.apply(g, lin))
}

/// The same layer without graph propagation, `δ(H W)`.
pub fn dense(g: &mut Graph, h: Var, layer: &GraphConvLayer<Var>) -> Result<Var> {
    let lin = g.matmul(h, layer.w_theta)?;
    Ok(layer.activation.apply(g, lin))
}

/// `sigmoid(h W + b)`.
pub fn encode_soft(g: &mut Graph, h: Var, enc: &HashEncoder<Var>) -> Result<Var> {
    let lin = g.matmul(h, enc.w)?;
    let lin = g.add(lin, enc.b)?;
    Ok(g.sigmoid(lin))
}

/// Bits `b̃ = [b ≥ ε]` with a straight-through backward rule.
///
/// Probabilities that sit outside `[τ, 1−τ]` (sigmoid saturation) pass no
/// gradient, matching the clamp in [`log_q`].
pub fn stochastic_neurons(g: &mut Graph, b: Var, eps: &Tensor) -> Result<Var> {
    let probs = g.value(b);
    if probs.dim() != eps.dim() {
        return Err(Error::dim(
            "stochastic_neurons",
            format!("probabilities {:?} vs thresholds {:?}", probs.dim(), eps.dim()),
        ));
    }
    if let Some(bad) = probs.iter().find(|&&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::domain(
            "stochastic_neurons",
            format!("probability {bad} outside (0,1)"),
        ));
    }
    if let Some(bad) = eps.iter().find(|&&e| !(0.0..=1.0).contains(&e)) {
        return Err(Error::domain(
            "stochastic_neurons",
            format!("threshold {bad} outside [0,1]"),
        ));
    }
    let mut bits = Array2::zeros(probs.raw_dim());
    let mut mask = Array2::zeros(probs.raw_dim());
    ndarray::Zip::from(&mut bits)
        .and(&mut mask)
        .and(probs)
        .and(eps)
        .for_each(|bit, m, &p, &e| {
            *bit = if p >= e { 1.0 } else { 0.0 };
            *m = if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                1.0
            } else {
                0.0
            };
        });
    g.straight_through(b, bits, mask)
}

/// `Σ b̃ log b + (1 − b̃) log(1 − b)` over every entry, with `b` clamped to
/// `[τ, 1−τ]`. The bits are constants here.
pub fn log_q(g: &mut Graph, b: Var, b_tilde: &Tensor) -> Result<Var> {
    if g.shape(b) != b_tilde.dim() {
        return Err(Error::dim("log_q", "bits must match probabilities"));
    }
    if let Some(bad) = b_tilde.iter().find(|&&x| x != 0.0 && x != 1.0) {
        return Err(Error::domain("log_q", format!("bit value {bad} is not binary")));
    }
    if let Some(bad) = g.value(b).iter().find(|&&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::domain("log_q", format!("probability {bad} outside (0,1)")));
    }
    let bc = g.clamp(b, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let ones = g.scalar(1.0);
    let bits = g.constant(b_tilde.clone());
    let flipped = g.constant(b_tilde.mapv(|x| 1.0 - x));

    let log_b = g.log(bc)?;
    let one_minus = g.sub(ones, bc)?;
    let log_1mb = g.log(one_minus)?;
    let on = g.mul(bits, log_b)?;
    let off = g.mul(flipped, log_1mb)?;
    let both = g.add(on, off)?;
    g.sum(both, None)
}

/// Decoder heads `(μ, log σ²)` for a batch of bit rows.
pub fn decode(g: &mut Graph, b_tilde: Var, dec: &GaussianDecoder<Var>) -> Result<(Var, Var)> {
    let mu = g.matmul(b_tilde, dec.w_mu)?;
    let mu = g.add(mu, dec.b_mu)?;
    let logvar = g.matmul(b_tilde, dec.w_logvar)?;
    let logvar = g.add(logvar, dec.b_logvar)?;
    Ok((mu, logvar))
}

/// `Σ_i log N(s_i | μ(b̃_i), diag exp(logvar(b̃_i)))` over the batch.
pub fn log_p_gaussian(
    g: &mut Graph,
    semantics: &Tensor,
    b_tilde: Var,
    dec: &GaussianDecoder<Var>,
) -> Result<Var> {
    let (mu, logvar) = decode(g, b_tilde, dec)?;
    if g.shape(mu) != semantics.dim() {
        return Err(Error::dim(
            "log_p_gaussian",
            format!("decoder gives {:?}, semantics are {:?}", g.shape(mu), semantics.dim()),
        ));
    }
    gaussian_log_density(g, semantics, mu, logvar)
}

/// `−½ Σ [log 2π + logvar + (s − μ)² e^{−logvar}]`.
pub fn gaussian_log_density(g: &mut Graph, s: &Tensor, mu: Var, logvar: Var) -> Result<Var> {
    let s = g.constant(s.clone());
    let resid = g.sub(s, mu)?;
    let sq = g.square(resid);
    let neg_lv = g.scale(logvar, -1.0);
    let precision = g.exp(neg_lv);
    let quad = g.mul(sq, precision)?;
    let log2pi = g.scalar((2.0 * PI).ln());
    let with_lv = g.add(quad, logvar)?;
    let terms = g.add(with_lv, log2pi)?;
    let total = g.sum(terms, None)?;
    Ok(g.scale(total, -0.5))
}
