//! Training objective, its Monte-Carlo gradient estimate and Adam.
//!
//! Per batch the loss is
//! `Σ log q(b̃|x,y) − log p(s|b̃) + (‖f(x) − b̃‖² + ‖g(y) − b̃‖²) / 2M`,
//! averaged over the `K` threshold draws.

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers;
use crate::pipeline::batch::TripletBatch;
use crate::pipeline::model::{encode_batch, Encoded, ModelParams};

/// Scalar loss terms, already averaged over the Monte-Carlo draws.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// `Σ log q`.
    pub entropy: f64,
    /// `−log p(s|b̃)`.
    pub decode: f64,
    pub code_reg: f64,
}

/// Bits and probabilities at which a linearized sampler is anchored.
#[derive(Clone, Debug, PartialEq)]
pub struct Anchor {
    pub bits: Tensor,
    pub probs: Tensor,
}

/// How `b̃` is produced from the code probabilities for each draw.
#[derive(Clone, Copy, Debug)]
pub enum BitSampler<'a> {
    /// `b̃ = [b ≥ ε]` with straight-through gradients, one `ε` per draw.
    Threshold(&'a [Tensor]),
    /// `b̃ = bits + mask ⊙ (b − probs)`: equal to the thresholded bits at the
    /// anchor, with the straight-through gradient, but differentiable in the
    /// ordinary sense around it. Used for finite-difference checks.
    Linearized(&'a [Anchor]),
}

impl BitSampler<'_> {
    fn draws(&self) -> usize {
        match self {
            BitSampler::Threshold(e) => e.len(),
            BitSampler::Linearized(a) => a.len(),
        }
    }
}

/// Uniform thresholds, one `N × M` matrix per draw.
pub fn draw_thresholds(rng: &mut impl Rng, n: usize, m: usize, k: usize) -> Vec<Tensor> {
    (0..k)
        .map(|_| Array2::from_shape_simple_fn((n, m), || rng.random::<f64>()))
        .collect()
}

/// Graph handles produced by [`batch_loss`].
#[derive(Clone, Debug)]
pub struct LossGraph {
    pub loss: Var,
    pub encoded: Encoded,
    /// Forward bit values for each draw.
    pub bits: Vec<Tensor>,
    pub breakdown: LossBreakdown,
}

impl LossGraph {
    /// Anchors that reproduce this forward pass under [`BitSampler::Linearized`].
    pub fn anchors(&self, g: &Graph) -> Vec<Anchor> {
        let probs = g.value(self.encoded.probs);
        self.bits
            .iter()
            .map(|b| Anchor {
                bits: b.clone(),
                probs: probs.clone(),
            })
            .collect()
    }
}

fn sample_bits(g: &mut Graph, probs: Var, sampler: BitSampler, k: usize) -> Result<Var> {
    match sampler {
        BitSampler::Threshold(eps) => layers::stochastic_neurons(g, probs, &eps[k]),
        BitSampler::Linearized(anchors) => {
            let a = &anchors[k];
            if a.bits.dim() != g.shape(probs) || a.probs.dim() != a.bits.dim() {
                return Err(Error::dim("linearized sampler", "anchor shape mismatch"));
            }
            let mask = a.probs.mapv(|p| {
                if (layers::PROB_CLAMP..=1.0 - layers::PROB_CLAMP).contains(&p) {
                    1.0
                } else {
                    0.0
                }
            });
            let anchor = g.constant(a.probs.clone());
            let delta = g.sub(probs, anchor)?;
            let mask = g.constant(mask);
            let delta = g.mul(mask, delta)?;
            let bits = g.constant(a.bits.clone());
            g.add(bits, delta)
        }
    }
}

/// Builds the full batch objective on `g`.
pub fn batch_loss(
    g: &mut Graph,
    batch: &TripletBatch,
    params: &ModelParams<Var>,
    adjacency: &Tensor,
    use_gcn: bool,
    sampler: BitSampler,
) -> Result<LossGraph> {
    if batch.len() < 2 {
        return Err(Error::Config(format!(
            "batch of {} items; the objective needs at least 2",
            batch.len()
        )));
    }
    let k_draws = sampler.draws();
    if k_draws == 0 {
        return Err(Error::Config("at least one Monte-Carlo draw is required".into()));
    }
    let encoded = encode_batch(g, batch, params, adjacency, use_gcn)?;
    let m = g.shape(encoded.probs).1;
    let reg_scale = 1.0 / (2.0 * m as f64);

    let mut total: Option<Var> = None;
    let mut bits = Vec::with_capacity(k_draws);
    let mut breakdown = LossBreakdown::default();
    for k in 0..k_draws {
        let b_tilde = sample_bits(g, encoded.probs, sampler, k)?;
        let hard = match sampler {
            BitSampler::Threshold(_) => g.value(b_tilde).clone(),
            BitSampler::Linearized(a) => a[k].bits.clone(),
        };
        let entropy = layers::log_q(g, encoded.probs, &hard)?;
        let log_p = layers::log_p_gaussian(g, &batch.semantics, b_tilde, &params.decoder)?;

        let df = g.sub(encoded.f_out, b_tilde)?;
        let df = g.square(df);
        let df = g.sum(df, None)?;
        let dg = g.sub(encoded.g_out, b_tilde)?;
        let dg = g.square(dg);
        let dg = g.sum(dg, None)?;
        let reg = g.add(df, dg)?;
        let reg = g.scale(reg, reg_scale);

        let kl = g.sub(entropy, log_p)?;
        let draw = g.add(kl, reg)?;
        total = Some(match total {
            None => draw,
            Some(t) => g.add(t, draw)?,
        });

        breakdown.entropy += g.item(entropy);
        breakdown.decode -= g.item(log_p);
        breakdown.code_reg += g.item(reg);
        bits.push(hard);
    }
    let inv_k = 1.0 / k_draws as f64;
    let loss = g.scale(total.expect("k_draws > 0"), inv_k);
    breakdown.entropy *= inv_k;
    breakdown.decode *= inv_k;
    breakdown.code_reg *= inv_k;
    breakdown.total = g.item(loss);
    Ok(LossGraph {
        loss,
        encoded,
        bits,
        breakdown,
    })
}

/// One stochastic gradient estimate at `params`.
pub fn estimate_gradients(
    params: &ModelParams,
    batch: &TripletBatch,
    adjacency: &Tensor,
    use_gcn: bool,
    sampler: BitSampler,
) -> Result<(LossBreakdown, ModelParams)> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let out = batch_loss(&mut g, batch, &vars, adjacency, use_gcn, sampler)?;
    if !out.breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!("loss ({})", out.breakdown.total)));
    }
    g.backward(out.loss)?;
    Ok((out.breakdown, vars.grads(&g)))
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    grads.visit(|_, t| sq += t.iter().map(|v| v * v).sum::<f64>());
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let f = max_norm / norm;
        grads.visit_mut(|_, t| t.mapv_inplace(|v| v * f));
    }
    norm
}

/// Adam moments and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: ModelParams,
    pub v: ModelParams,
}

impl AdamState {
    pub fn new(params: &ModelParams, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = params.map(|t| Array2::zeros(t.raw_dim()));
        Self {
            step: 0,
            lr,
            beta1,
            beta2,
            eps,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Bias-corrected Adam update. Non-finite gradients abort before any
/// parameter or moment is touched.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState) -> Result<()> {
    let grads = grads.named();
    for (name, g) in &grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    let params = params.named_mut();
    let ms = state.m.named_mut();
    let vs = state.v.named_mut();
    if params.len() != grads.len() || ms.len() != grads.len() || vs.len() != grads.len() {
        return Err(Error::Contract("gradient layout does not match parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (((p, g), m), v) in params.into_iter().zip(grads).zip(ms).zip(vs) {
        if p.1.dim() != g.1.dim() {
            return Err(Error::dim("adam_step", format!("{} shape mismatch", p.0)));
        }
        ndarray::Zip::from(p.1)
            .and(m.1)
            .and(v.1)
            .and(g.1)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::config::ZsihConfig;
    use ndarray::array;

    fn tiny() -> ModelParams {
        let cfg = ZsihConfig {
            code_bits: 2,
            feature_dim: 2,
            gcn_hidden: 3,
            sketch_channels: 2,
            image_channels: 2,
            semantic_dim: 2,
            ..Default::default()
        };
        ModelParams::zeros(&cfg).unwrap()
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = tiny();
        let mut g = p.map(|t| Array2::zeros(t.raw_dim()));
        g.decoder.b_mu = array![[0.5, -2.0]];
        let mut st = AdamState::new(&p, 1e-3, 0.9, 0.999, 1e-8);
        adam_step(&mut p, &g, &mut st).unwrap();
        assert!((p.decoder.b_mu[[0, 0]] + 1e-3).abs() < 1e-10);
        assert!((p.decoder.b_mu[[0, 1]] - 1e-3).abs() < 1e-10);
        assert_eq!(p.decoder.w_mu, Array2::<f64>::zeros((2, 2)));
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_rejects_nan_without_update() {
        let mut p = tiny();
        let before = p.clone();
        let mut g = p.map(|t| Array2::zeros(t.raw_dim()));
        g.gcn1.w_theta[[0, 0]] = f64::NAN;
        let mut st = AdamState::new(&p, 1e-3, 0.9, 0.999, 1e-8);
        assert!(matches!(adam_step(&mut p, &g, &mut st), Err(Error::NonFinite(_))));
        assert_eq!(p, before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn clip_scales_to_norm() {
        let p = tiny();
        let mut g = p.map(|t| Array2::zeros(t.raw_dim()));
        g.decoder.b_mu = array![[3.0, 4.0]];
        assert_eq!(clip_gradients(&mut g, 1.0), 5.0);
        assert!((g.decoder.b_mu[[0, 0]] - 0.6).abs() < 1e-15);
        let mut h = g.clone();
        clip_gradients(&mut h, 0.0);
        assert_eq!(h, g);
    }

    #[test]
    fn thresholds_are_unit_interval() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let e = draw_thresholds(&mut rng, 4, 3, 2);
        assert_eq!(e.len(), 2);
        assert!(e.iter().flatten().all(|v| (0.0..1.0).contains(v)));
    }
}
