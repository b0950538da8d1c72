//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod gradcases;

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use zsih::autodiff::{Graph, Tensor, Var};
use zsih::retrieval::CodeMatrix;

// ---------------------------------------------------------------- gradients

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Relative tolerance between autodiff and finite differences.
pub const FD_RTOL: f64 = 1e-4;
/// Absolute floor so exact zeros compare against rounding noise.
pub const FD_ATOL: f64 = 1e-8;
/// Instances closer than this to a ReLU/clamp kink are redrawn.
pub const KINK_MARGIN: f64 = 1e-4;

pub type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> zsih::Result<Var>>;

pub enum GradCheck {
    /// Too close to a non-differentiable point; draw another instance.
    Kink,
    /// `worst` is the largest `|a − n| / (rtol·max(|a|,|n|) + atol)`; the
    /// instance passes when it is at most 1.
    Checked { worst: f64, entries: usize },
}

/// One randomized instance. Autodiff runs on `analytic`; finite differences
/// run on `numeric` when given (a smooth surrogate that agrees with
/// `analytic` in value at the inputs), otherwise on `analytic` itself.
pub struct Case {
    pub inputs: Vec<Tensor>,
    pub analytic: Builder,
    pub numeric: Option<Builder>,
}

impl Case {
    pub fn plain(inputs: Vec<Tensor>, analytic: Builder) -> Self {
        Self {
            inputs,
            analytic,
            numeric: None,
        }
    }
}

fn eval(build: &Builder, inputs: &[Tensor]) -> (f64, f64) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars).expect("forward");
    (g.item(out), g.min_kink_distance())
}

/// Compares reverse-mode gradients of a scalar function with central
/// differences over every input entry.
pub fn grad_check(case: &Case) -> GradCheck {
    let inputs = &case.inputs;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.analytic)(&mut g, &vars).expect("forward");
    if g.min_kink_distance() < KINK_MARGIN {
        return GradCheck::Kink;
    }
    let value = g.item(out);
    g.backward(out).expect("backward");
    let analytic: Vec<Tensor> = vars.iter().map(|v| g.grad(*v).clone()).collect();

    let numeric_fn = case.numeric.as_ref().unwrap_or(&case.analytic);
    let mut worst = 0.0f64;
    if case.numeric.is_some() {
        let (base, kink) = eval(numeric_fn, inputs);
        if kink < KINK_MARGIN {
            return GradCheck::Kink;
        }
        // The surrogate must reproduce the forward value.
        if (base - value).abs() > 1e-12 * value.abs().max(1.0) {
            worst = f64::INFINITY;
        }
    }
    let mut entries = 0;
    let mut probe = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        for (idx, &x) in t.indexed_iter() {
            probe[k][idx] = x + FD_STEP;
            let (up, _) = eval(numeric_fn, &probe);
            probe[k][idx] = x - FD_STEP;
            let (down, _) = eval(numeric_fn, &probe);
            probe[k][idx] = x;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[k][idx];
            let scale = FD_RTOL * a.abs().max(numeric.abs()) + FD_ATOL;
            worst = worst.max((a - numeric).abs() / scale);
            entries += 1;
        }
    }
    GradCheck::Checked { worst, entries }
}

#[derive(Debug, Clone, Copy)]
pub struct TrialSummary {
    pub checked: usize,
    pub redrawn: usize,
    pub failures: usize,
    pub worst: f64,
}

/// Runs `n` kink-free instances; `make` draws one instance.
pub fn run_trials(
    n: usize,
    rng: &mut ChaCha8Rng,
    mut make: impl FnMut(&mut ChaCha8Rng) -> Case,
) -> TrialSummary {
    let mut s = TrialSummary {
        checked: 0,
        redrawn: 0,
        failures: 0,
        worst: 0.0,
    };
    while s.checked < n {
        let case = make(rng);
        match grad_check(&case) {
            GradCheck::Kink => {
                s.redrawn += 1;
                assert!(s.redrawn < 50 * n, "instances keep landing on kinks");
            }
            GradCheck::Checked { worst, .. } => {
                s.checked += 1;
                s.worst = s.worst.max(worst);
                if worst > 1.0 {
                    s.failures += 1;
                }
            }
        }
    }
    s
}

pub fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = rng.sample(StandardNormal);
        z * scale
    })
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(lo..hi))
}

/// `Σ out ⊙ r` for a fixed random `r`, so every output entry is weighted.
pub fn project(g: &mut Graph, out: Var, r: &Tensor) -> zsih::Result<Var> {
    let r = g.constant(r.clone());
    let w = g.mul(out, r)?;
    g.sum(w, None)
}

// ---------------------------------------------------------------- retrieval

/// Per-query metrics from a naive scan: per-bit Hamming distance and a
/// stable sort by `(distance, index)`.
pub struct NaiveQuery {
    pub ranking: Vec<usize>,
    pub ap: Option<f64>,
    pub precision: Vec<f64>,
    pub interpolated: [f64; 11],
    pub raw: Vec<(f64, f64)>,
}

pub fn naive_distance(a: &CodeMatrix, i: usize, b: &CodeMatrix, j: usize) -> u32 {
    (0..a.bits()).filter(|&k| a.bit(i, k) != b.bit(j, k)).count() as u32
}

pub fn naive_query(queries: &CodeMatrix, q: usize, gallery: &CodeMatrix, ks: &[usize]) -> NaiveQuery {
    let mut order: Vec<(u32, usize)> = (0..gallery.len())
        .map(|j| (naive_distance(queries, q, gallery, j), j))
        .collect();
    order.sort();
    let ranking: Vec<usize> = order.iter().map(|&(_, j)| j).collect();
    let rel: Vec<bool> = ranking
        .iter()
        .map(|&j| gallery.labels[j] == queries.labels[q])
        .collect();
    let total = rel.iter().filter(|&&r| r).count();

    let mut ap_sum = 0.0;
    let mut hits = 0usize;
    let mut raw = Vec::new();
    for (i, &r) in rel.iter().enumerate() {
        if r {
            hits += 1;
            ap_sum += hits as f64 / (i + 1) as f64;
        }
        raw.push((hits as f64 / total as f64, hits as f64 / (i + 1) as f64));
    }
    let ap = (total > 0).then(|| ap_sum / total as f64);

    let precision = ks
        .iter()
        .map(|&k| {
            let k = k.min(rel.len());
            rel[..k].iter().filter(|&&r| r).count() as f64 / k as f64
        })
        .collect();

    let mut interpolated = [0.0; 11];
    if total > 0 {
        for (level, slot) in interpolated.iter_mut().enumerate() {
            let lv = level as f64 / 10.0;
            for &(r, p) in &raw {
                if r >= lv && p > *slot {
                    *slot = p;
                }
            }
        }
    }
    NaiveQuery {
        ranking,
        ap,
        precision,
        interpolated,
        raw,
    }
}

/// Report fields computed from naive per-query results, averaged in query
/// order over queries that have a relevant item.
pub struct NaiveReport {
    pub map_all: f64,
    pub precision_at: BTreeMap<usize, f64>,
    pub pr_curve: Vec<(f64, f64)>,
    pub pr_raw: Vec<(f64, f64)>,
    pub per_query_ap: Vec<f64>,
    pub excluded: Vec<usize>,
}

pub fn naive_evaluate(queries: &CodeMatrix, gallery: &CodeMatrix, ks: &[usize]) -> NaiveReport {
    let mut aps = Vec::new();
    let mut excluded = Vec::new();
    let mut prec = vec![0.0; ks.len()];
    let mut interp = [0.0; 11];
    let mut raw = vec![(0.0, 0.0); gallery.len()];
    for q in 0..queries.len() {
        let r = naive_query(queries, q, gallery, ks);
        let Some(ap) = r.ap else {
            excluded.push(q);
            continue;
        };
        aps.push(ap);
        for (acc, p) in prec.iter_mut().zip(&r.precision) {
            *acc += p;
        }
        for (acc, p) in interp.iter_mut().zip(&r.interpolated) {
            *acc += p;
        }
        for (acc, (rc, p)) in raw.iter_mut().zip(&r.raw) {
            acc.0 += rc;
            acc.1 += p;
        }
    }
    let n = aps.len() as f64;
    let mut map_sum = 0.0;
    for ap in &aps {
        map_sum += ap;
    }
    NaiveReport {
        map_all: map_sum / n,
        precision_at: ks.iter().zip(&prec).map(|(&k, &s)| (k, s / n)).collect(),
        pr_curve: (0..11).map(|i| (i as f64 / 10.0, interp[i] / n)).collect(),
        pr_raw: raw.iter().map(|&(r, p)| (r / n, p / n)).collect(),
        per_query_ap: aps,
        excluded,
    }
}

pub fn random_codes(
    rng: &mut ChaCha8Rng,
    n: usize,
    bits: usize,
    classes: u32,
    modality: zsih::data::Modality,
) -> CodeMatrix {
    let rows: Vec<Vec<u8>> = (0..n)
        .map(|_| (0..bits).map(|_| rng.random_range(0..2u8)).collect())
        .collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    CodeMatrix::from_bits(&rows, labels, bits, modality).unwrap()
}

/// Balanced labels `i % classes`.
pub fn random_codes_balanced(
    rng: &mut ChaCha8Rng,
    n: usize,
    bits: usize,
    classes: u32,
    modality: zsih::data::Modality,
) -> CodeMatrix {
    let rows: Vec<Vec<u8>> = (0..n)
        .map(|_| (0..bits).map(|_| rng.random_range(0..2u8)).collect())
        .collect();
    let labels = (0..n as u32).map(|i| i % classes).collect();
    CodeMatrix::from_bits(&rows, labels, bits, modality).unwrap()
}
