//! The training loop: sample a batch, build its adjacency, estimate the
//! gradient with fresh thresholds, take an Adam step.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::batch::{build_adjacency, sample_batch, TrainingSet};
use super::checkpoint::Checkpoint;
use super::config::ZsihConfig;
use super::model::ModelParams;
use crate::error::{Error, Result};
use crate::objective::{
    adam_step, clip_gradients, draw_thresholds, estimate_gradients, AdamState, BitSampler,
    LossBreakdown,
};

#[derive(Clone, Debug, PartialEq)]
pub enum StopReason {
    MaxIters,
    Converged,
    /// The loss or a gradient went non-finite; the checkpoint is the state
    /// before the failing step.
    NonFinite(String),
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StopReason::MaxIters => f.write_str("reached max iterations"),
            StopReason::Converged => f.write_str("converged"),
            StopReason::NonFinite(what) => write!(f, "non-finite {what}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub stop: StopReason,
    /// Steps taken by this call.
    pub steps: u64,
}

/// One metrics-log line: `iter total entropy decode code_reg`, tab-separated.
pub fn metrics_line(iteration: u64, loss: &LossBreakdown) -> String {
    format!(
        "{iteration}\t{}\t{}\t{}\t{}",
        loss.total, loss.entropy, loss.decode, loss.code_reg
    )
}

/// Relative change between consecutive non-overlapping loss windows.
#[derive(Clone, Debug, Default)]
struct Convergence {
    window: usize,
    tol: f64,
    current: Vec<f64>,
    previous: Option<f64>,
}

impl Convergence {
    fn push(&mut self, loss: f64) -> bool {
        if self.window == 0 {
            return false;
        }
        self.current.push(loss);
        if self.current.len() < self.window {
            return false;
        }
        let mean = self.current.iter().sum::<f64>() / self.window as f64;
        self.current.clear();
        let done = self
            .previous
            .is_some_and(|prev| (prev - mean).abs() <= self.tol * prev.abs().max(f64::MIN_POSITIVE));
        self.previous = Some(mean);
        done
    }
}

pub struct Trainer {
    set: TrainingSet,
    state: Checkpoint,
    convergence: Convergence,
}

impl Trainer {
    /// Fresh run. The config's data widths are filled from the training set
    /// when left at zero; weights are drawn from the seeded generator first.
    pub fn new(mut config: ZsihConfig, set: TrainingSet) -> Result<Self> {
        fill_dims(&mut config, &set)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = ModelParams::init(&config, &mut rng)?;
        let adam = AdamState::new(&params, config.lr, config.beta1, config.beta2, config.eps_hat);
        let state = Checkpoint {
            config,
            params,
            adam,
            iteration: 0,
            rng,
        };
        Self::from_checkpoint(state, set)
    }

    /// Resumes from a checkpoint. The loss window restarts empty.
    pub fn from_checkpoint(state: Checkpoint, set: TrainingSet) -> Result<Self> {
        let mut config = state.config.clone();
        fill_dims(&mut config, &set)?;
        if config != state.config {
            return Err(Error::Config("checkpoint does not match the training data".into()));
        }
        let convergence = Convergence {
            window: config.convergence_window,
            tol: config.convergence_tol,
            ..Default::default()
        };
        Ok(Self {
            set,
            state,
            convergence,
        })
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.state
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.state
    }

    pub fn config(&self) -> &ZsihConfig {
        &self.state.config
    }

    /// One optimizer step. On error nothing but the generator has moved.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let cfg = &self.state.config;
        let rng = &mut self.state.rng;
        let batch = sample_batch(&self.set, cfg.batch_size, rng)?;
        let adjacency = build_adjacency(&batch.semantics, cfg.bandwidth)?;
        let eps = draw_thresholds(rng, batch.len(), cfg.code_bits, cfg.mc_samples);
        let (loss, mut grads) = estimate_gradients(
            &self.state.params,
            &batch,
            &adjacency,
            cfg.use_gcn,
            BitSampler::Threshold(&eps),
        )?;
        if cfg.clip_norm > 0.0 {
            clip_gradients(&mut grads, cfg.clip_norm);
        }
        adam_step(&mut self.state.params, &grads, &mut self.state.adam)?;
        self.state.iteration += 1;
        Ok(loss)
    }

    /// Steps until `config.max_iters` total iterations, convergence or a
    /// non-finite value. `on_step` sees each completed iteration.
    pub fn run(&mut self, mut on_step: impl FnMut(u64, &LossBreakdown)) -> Result<StopReason> {
        while self.state.iteration < self.state.config.max_iters as u64 {
            let saved = self.state.rng.clone();
            let loss = match self.step() {
                Ok(loss) => loss,
                Err(Error::NonFinite(what)) => {
                    self.state.rng = saved;
                    log::warn!("stopping at iteration {}: non-finite {what}", self.state.iteration);
                    return Ok(StopReason::NonFinite(what));
                }
                Err(e) => return Err(e),
            };
            on_step(self.state.iteration, &loss);
            if self.convergence.push(loss.total) {
                log::info!("converged at iteration {}", self.state.iteration);
                return Ok(StopReason::Converged);
            }
        }
        Ok(StopReason::MaxIters)
    }
}

fn fill_dims(config: &mut ZsihConfig, set: &TrainingSet) -> Result<()> {
    for (slot, actual, what) in [
        (&mut config.sketch_channels, set.sketches.channels, "sketch_channels"),
        (&mut config.image_channels, set.images.channels, "image_channels"),
        (&mut config.semantic_dim, set.semantics.dim, "semantic_dim"),
    ] {
        if *slot == 0 {
            *slot = actual;
        } else if *slot != actual {
            return Err(Error::Config(format!("{what} = {slot} but the data has {actual}")));
        }
    }
    config.validate_dims()
}

/// Trains from scratch and returns the final state.
pub fn train(config: ZsihConfig, set: TrainingSet, on_step: impl FnMut(u64, &LossBreakdown)) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, set)?;
    let stop = trainer.run(on_step)?;
    let checkpoint = trainer.into_checkpoint();
    Ok(TrainOutcome {
        steps: checkpoint.iteration,
        checkpoint,
        stop,
    })
}
