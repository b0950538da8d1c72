//! Randomized instances for the layer and objective gradient checks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use zsih::autodiff::{Graph, Tensor, Var};
use zsih::layers::{self, Activation, AttentionPool, ConcatFusion, GaussianDecoder, GraphConvLayer};
use zsih::layers::{HashEncoder, KroneckerFusion, MfbFusion};
use zsih::objective::{batch_loss, Anchor, BitSampler};
use zsih::pipeline::{build_adjacency, FusionMode, ModelParams, TripletBatch, ZsihConfig};

use super::{project, randn, uniform, Builder, Case};

pub type Maker = fn(&mut ChaCha8Rng) -> Case;

pub fn layer_cases() -> Vec<(&'static str, Maker)> {
    vec![
        ("attention_pool", attention_pool),
        ("kronecker_fusion", kronecker_fusion),
        ("concat_fusion", concat_fusion),
        ("mfb_fusion", mfb_fusion),
        ("graph_conv_relu", |r| graph_conv(r, Activation::Relu)),
        ("graph_conv_sigmoid", |r| graph_conv(r, Activation::Sigmoid)),
        ("dense", dense),
        ("hash_encoder", hash_encoder),
        ("stochastic_neurons", stochastic_neurons),
        ("log_q", log_q),
        ("gaussian_decoder", gaussian_decoder),
    ]
}

fn attention_pool(rng: &mut ChaCha8Rng) -> Case {
    let (n, l, c, d) = (3, 4, 5, 3);
    let r = randn(rng, n, d, 1.0);
    let inputs = vec![
        randn(rng, n * l, c, 1.0),
        randn(rng, c, 1, 1.0),
        randn(rng, 1, 1, 1.0),
        randn(rng, c, d, 1.0),
        randn(rng, 1, d, 1.0),
    ];
    Case::plain(
        inputs,
        Box::new(move |g, v| {
            let p = AttentionPool {
                score_weights: v[1],
                score_bias: v[2],
                proj_weights: v[3],
                proj_bias: v[4],
            };
            let out = layers::attention_pool(g, v[0], l, &p)?.output;
            project(g, out, &r)
        }),
    )
}

fn kronecker_fusion(rng: &mut ChaCha8Rng) -> Case {
    let (n, d) = (3, 3);
    let r = randn(rng, n, d * d, 1.0);
    let inputs = vec![
        randn(rng, n, d, 1.0),
        randn(rng, n, d, 1.0),
        randn(rng, d, d, 1.0),
        randn(rng, d, d, 1.0),
    ];
    Case::plain(
        inputs,
        Box::new(move |g, v| {
            let p = KroneckerFusion { w_sk: v[2], w_im: v[3] };
            let out = layers::fuse(g, v[0], v[1], &p)?;
            project(g, out, &r)
        }),
    )
}

fn concat_fusion(rng: &mut ChaCha8Rng) -> Case {
    let (n, d) = (3, 2);
    let r = randn(rng, n, d * d, 1.0);
    let inputs = vec![
        randn(rng, n, d, 1.0),
        randn(rng, n, d, 1.0),
        randn(rng, 2 * d, d * d, 1.0),
        randn(rng, 1, d * d, 1.0),
    ];
    Case::plain(
        inputs,
        Box::new(move |g, v| {
            let p = ConcatFusion { proj: v[2], bias: v[3] };
            let out = layers::fuse_concat(g, v[0], v[1], &p)?;
            project(g, out, &r)
        }),
    )
}

fn mfb_fusion(rng: &mut ChaCha8Rng) -> Case {
    let (n, d, k) = (3, 2, 2);
    let r = randn(rng, n, d * d, 1.0);
    let inputs = vec![
        randn(rng, n, d, 1.0),
        randn(rng, n, d, 1.0),
        randn(rng, d, k * d, 1.0),
        randn(rng, d, k * d, 1.0),
        randn(rng, d, d * d, 1.0),
        randn(rng, 1, d * d, 1.0),
    ];
    Case::plain(
        inputs,
        Box::new(move |g, v| {
            let p = MfbFusion {
                u: v[2],
                v: v[3],
                proj: v[4],
                bias: v[5],
                factor: k,
            };
            let out = layers::fuse_mfb(g, v[0], v[1], &p)?;
            project(g, out, &r)
        }),
    )
}

fn graph_conv(rng: &mut ChaCha8Rng, activation: Activation) -> Case {
    let (n, d_in, d_out) = (4, 3, 2);
    let t = rng.random_range(0.2..2.0);
    let adjacency = build_adjacency(&randn(rng, n, 3, 0.5), t).unwrap();
    let r = randn(rng, n, d_out, 1.0);
    let inputs = vec![randn(rng, n, d_in, 1.0), randn(rng, d_in, d_out, 1.0)];
    Case::plain(
        inputs,
        Box::new(move |g, v| {
            let layer = GraphConvLayer { w_theta: v[1], activation };
            let out = layers::graph_conv(g, v[0], &adjacency, &layer)?;
            project(g, out, &r)
        }),
    )
}

fn dense(rng: &mut ChaCha8Rng) -> Case {
    let r = randn(rng, 4, 2, 1.0);
    let inputs = vec![randn(rng, 4, 3, 1.0), randn(rng, 3, 2, 1.0)];
    Case::plain(
        inputs,
        Box::new(move |g, v| {
            let layer = GraphConvLayer {
                w_theta: v[1],
                activation: Activation::Relu,
            };
            let out = layers::dense(g, v[0], &layer)?;
            project(g, out, &r)
        }),
    )
}

fn hash_encoder(rng: &mut ChaCha8Rng) -> Case {
    let r = randn(rng, 3, 4, 1.0);
    let inputs = vec![randn(rng, 3, 2, 1.0), randn(rng, 2, 4, 1.0), randn(rng, 1, 4, 1.0)];
    Case::plain(
        inputs,
        Box::new(move |g, v| {
            let enc = HashEncoder { w: v[1], b: v[2] };
            let out = layers::encode_soft(g, v[0], &enc)?;
            project(g, out, &r)
        }),
    )
}

/// Threshold bits with straight-through gradients, checked against the
/// linearization `bits + mask ⊙ (σ(x) − σ(x₀))` around the drawn instance.
fn stochastic_neurons(rng: &mut ChaCha8Rng) -> Case {
    let (n, m) = (3, 5);
    let logits = randn(rng, n, m, 1.5);
    let eps = uniform(rng, n, m, 0.0, 1.0);
    let r = randn(rng, n, m, 1.0);
    let probs = logits.mapv(zsih::autodiff::sigmoid);
    let bits = ndarray::Zip::from(&probs)
        .and(&eps)
        .map_collect(|&p, &e| if p >= e { 1.0 } else { 0.0 });
    let mask = probs.mapv(|p| {
        if (layers::PROB_CLAMP..=1.0 - layers::PROB_CLAMP).contains(&p) {
            1.0
        } else {
            0.0
        }
    });
    let r2 = r.clone();
    Case {
        inputs: vec![logits],
        analytic: Box::new(move |g, v| {
            let b = g.sigmoid(v[0]);
            let out = layers::stochastic_neurons(g, b, &eps)?;
            project(g, out, &r)
        }),
        numeric: Some(Box::new(move |g, v| {
            let b = g.sigmoid(v[0]);
            let anchor = g.constant(probs.clone());
            let delta = g.sub(b, anchor)?;
            let mask = g.constant(mask.clone());
            let delta = g.mul(mask, delta)?;
            let bits = g.constant(bits.clone());
            let out = g.add(bits, delta)?;
            project(g, out, &r2)
        })),
    }
}

fn log_q(rng: &mut ChaCha8Rng) -> Case {
    let (n, m) = (3, 6);
    let bits = uniform(rng, n, m, 0.0, 1.0).mapv(|u| if u < 0.5 { 0.0 } else { 1.0 });
    Case::plain(
        vec![randn(rng, n, m, 2.0)],
        Box::new(move |g, v| {
            let b = g.sigmoid(v[0]);
            layers::log_q(g, b, &bits)
        }),
    )
}

fn gaussian_decoder(rng: &mut ChaCha8Rng) -> Case {
    let (n, m, d) = (3, 4, 3);
    let s = randn(rng, n, d, 1.0);
    let inputs = vec![
        uniform(rng, n, m, 0.0, 1.0),
        randn(rng, m, d, 0.5),
        randn(rng, 1, d, 0.5),
        randn(rng, m, d, 0.3),
        randn(rng, 1, d, 0.3),
    ];
    Case::plain(
        inputs,
        Box::new(move |g, v| {
            let dec = GaussianDecoder {
                w_mu: v[1],
                b_mu: v[2],
                w_logvar: v[3],
                b_logvar: v[4],
            };
            layers::log_p_gaussian(g, &s, v[0], &dec)
        }),
    )
}

fn rebind(template: &ModelParams, vars: &[Var]) -> ModelParams<Var> {
    let mut it = vars.iter();
    template.map(|_| *it.next().expect("one var per tensor"))
}

/// Small random problem for the full objective. The fusion variant, graph
/// switch and draw count rotate with `variant`.
pub struct ObjectiveInstance {
    pub params: ModelParams,
    pub batch: TripletBatch,
    pub adjacency: Tensor,
    pub eps: Vec<Tensor>,
    pub use_gcn: bool,
}

pub fn objective_instance(rng: &mut ChaCha8Rng, variant: usize) -> ObjectiveInstance {
    let (n, l_sk, l_im) = (4, 2, 3);
    let fusion_mode = [FusionMode::Kronecker, FusionMode::Concat, FusionMode::Mfb][variant % 3];
    let config = ZsihConfig {
        code_bits: 5,
        feature_dim: 2,
        gcn_hidden: 4,
        mfb_factor: 2,
        sketch_channels: 3,
        image_channels: 4,
        semantic_dim: 3,
        fusion_mode,
        ..Default::default()
    };
    let mut params = ModelParams::init(&config, rng).unwrap();
    // Nonzero biases so their gradients are exercised too.
    params.visit_mut(|name, t| {
        if name.contains("bias") || name.ends_with(".b") || name.contains(".b_") {
            *t = randn(rng, t.nrows(), t.ncols(), 0.3);
        }
    });
    let semantics = randn(rng, n, config.semantic_dim, 0.6);
    let batch = TripletBatch {
        sketch_feats: randn(rng, n * l_sk, config.sketch_channels, 1.0),
        sketch_locations: l_sk,
        image_feats: randn(rng, n * l_im, config.image_channels, 1.0),
        image_locations: l_im,
        semantics: semantics.clone(),
        labels: vec![0, 1, 0, 2],
        sketch_items: vec![0; n],
        image_items: vec![0; n],
    };
    let t = [0.5, 1.0, 2.0][(variant / 3) % 3];
    let adjacency = build_adjacency(&semantics, t).unwrap();
    let draws = 1 + variant % 2;
    let eps = (0..draws).map(|_| uniform(rng, n, config.code_bits, 0.0, 1.0)).collect();
    ObjectiveInstance {
        params,
        batch,
        adjacency,
        eps,
        use_gcn: variant % 4 != 3,
    }
}

impl ObjectiveInstance {
    /// Anchors of the threshold pass at the current parameters.
    pub fn anchors(&self) -> Vec<Anchor> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let out = batch_loss(
            &mut g,
            &self.batch,
            &vars,
            &self.adjacency,
            self.use_gcn,
            BitSampler::Threshold(&self.eps),
        )
        .unwrap();
        out.anchors(&g)
    }

    pub fn threshold_builder(&self) -> Builder {
        let (template, batch, adj, eps, gcn) = (
            self.params.clone(),
            self.batch.clone(),
            self.adjacency.clone(),
            self.eps.clone(),
            self.use_gcn,
        );
        Box::new(move |g, v| {
            let p = rebind(&template, v);
            Ok(batch_loss(g, &batch, &p, &adj, gcn, BitSampler::Threshold(&eps))?.loss)
        })
    }

    pub fn linearized_builder(&self) -> Builder {
        let anchors = self.anchors();
        let (template, batch, adj, gcn) = (
            self.params.clone(),
            self.batch.clone(),
            self.adjacency.clone(),
            self.use_gcn,
        );
        Box::new(move |g, v| {
            let p = rebind(&template, v);
            Ok(batch_loss(g, &batch, &p, &adj, gcn, BitSampler::Linearized(&anchors))?.loss)
        })
    }

    pub fn inputs(&self) -> Vec<Tensor> {
        self.params.named().into_iter().map(|(_, t)| t.clone()).collect()
    }
}

/// Full objective with frozen thresholds: straight-through autodiff against
/// finite differences of the linearized sampler.
pub fn objective(rng: &mut ChaCha8Rng, variant: usize) -> Case {
    let inst = objective_instance(rng, variant);
    Case {
        inputs: inst.inputs(),
        analytic: inst.threshold_builder(),
        numeric: Some(inst.linearized_builder()),
    }
}
