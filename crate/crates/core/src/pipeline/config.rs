use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    Kronecker,
    Concat,
    Mfb,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Kronecker => "kronecker",
            FusionMode::Concat => "concat",
            FusionMode::Mfb => "mfb",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kronecker" | "kron" => Ok(FusionMode::Kronecker),
            "concat" => Ok(FusionMode::Concat),
            "mfb" => Ok(FusionMode::Mfb),
            other => Err(Error::Config(format!("unknown fusion_mode {other:?}"))),
        }
    }
}

/// Hyper-parameters and model dimensions.
///
/// The channel and semantic widths describe the ingested data. They are
/// normally filled in from the dataset before training and stored with the
/// checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct ZsihConfig {
    /// Code length `M` in bits.
    pub code_bits: usize,
    /// Attended feature width `d_f`; Kronecker fusion yields `d_f²`.
    pub feature_dim: usize,
    pub gcn_hidden: usize,
    /// Adjacency bandwidth `t`.
    pub bandwidth: f64,
    /// Batch size `N_B`.
    pub batch_size: usize,
    /// Monte-Carlo samples `K` of the bit vector per item and step.
    pub mc_samples: usize,
    /// Iteration cap `T`.
    pub max_iters: usize,
    pub seed: u64,
    pub fusion_mode: FusionMode,
    pub use_gcn: bool,
    pub mfb_factor: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
    /// Global gradient-norm clip; `0` disables.
    pub clip_norm: f64,
    /// Trailing window for the convergence test; `0` disables it.
    pub convergence_window: usize,
    pub convergence_tol: f64,
    pub sketch_channels: usize,
    pub image_channels: usize,
    pub semantic_dim: usize,
}

impl Default for ZsihConfig {
    fn default() -> Self {
        Self {
            code_bits: 32,
            feature_dim: 16,
            gcn_hidden: 64,
            bandwidth: 0.1,
            batch_size: 32,
            mc_samples: 1,
            max_iters: 3000,
            seed: 0,
            fusion_mode: FusionMode::Kronecker,
            use_gcn: true,
            mfb_factor: 4,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
            clip_norm: 0.0,
            convergence_window: 200,
            convergence_tol: 1e-5,
            sketch_channels: 0,
            image_channels: 0,
            semantic_dim: 0,
        }
    }
}

/// Config keys in file order.
pub const CONFIG_KEYS: &[&str] = &[
    "M",
    "d_f",
    "gcn_hidden",
    "t",
    "N_B",
    "K",
    "T",
    "seed",
    "fusion_mode",
    "use_gcn",
    "mfb_factor",
    "lr",
    "beta1",
    "beta2",
    "eps_hat",
    "clip_norm",
    "convergence_window",
    "convergence_tol",
    "sketch_channels",
    "image_channels",
    "semantic_dim",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl ZsihConfig {
    /// Sets one field by its config-file key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "M" => self.code_bits = parse(key, value)?,
            "d_f" => self.feature_dim = parse(key, value)?,
            "gcn_hidden" => self.gcn_hidden = parse(key, value)?,
            "t" => self.bandwidth = parse(key, value)?,
            "N_B" => self.batch_size = parse(key, value)?,
            "K" => self.mc_samples = parse(key, value)?,
            "T" => self.max_iters = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "fusion_mode" => self.fusion_mode = value.parse()?,
            "use_gcn" => self.use_gcn = parse(key, value)?,
            "mfb_factor" => self.mfb_factor = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps_hat" => self.eps_hat = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "convergence_window" => self.convergence_window = parse(key, value)?,
            "convergence_tol" => self.convergence_tol = parse(key, value)?,
            "sketch_channels" => self.sketch_channels = parse(key, value)?,
            "image_channels" => self.image_channels = parse(key, value)?,
            "semantic_dim" => self.semantic_dim = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "M" => self.code_bits.to_string(),
            "d_f" => self.feature_dim.to_string(),
            "gcn_hidden" => self.gcn_hidden.to_string(),
            "t" => self.bandwidth.to_string(),
            "N_B" => self.batch_size.to_string(),
            "K" => self.mc_samples.to_string(),
            "T" => self.max_iters.to_string(),
            "seed" => self.seed.to_string(),
            "fusion_mode" => self.fusion_mode.to_string(),
            "use_gcn" => self.use_gcn.to_string(),
            "mfb_factor" => self.mfb_factor.to_string(),
            "lr" => self.lr.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "eps_hat" => self.eps_hat.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "convergence_window" => self.convergence_window.to_string(),
            "convergence_tol" => self.convergence_tol.to_string(),
            "sketch_channels" => self.sketch_channels.to_string(),
            "image_channels" => self.image_channels.to_string(),
            "semantic_dim" => self.semantic_dim.to_string(),
            _ => return None,
        })
    }

    /// Parses `key = value` lines; `#` starts a comment. Unlisted keys keep
    /// their defaults.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&self.get(key).expect("listed key"));
            out.push('\n');
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if !self.bandwidth.is_finite() || self.bandwidth <= 0.0 {
            return Err(Error::Config(format!("t must be positive, got {}", self.bandwidth)));
        }
        if self.code_bits == 0 {
            return Err(Error::Config("M must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("N_B must be at least 2, got {}", self.batch_size)));
        }
        if self.feature_dim == 0 || self.gcn_hidden == 0 || self.mc_samples == 0 {
            return Err(Error::Config("d_f, gcn_hidden and K must be positive".into()));
        }
        if self.mfb_factor == 0 {
            return Err(Error::Config("mfb_factor must be positive".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("invalid optimizer parameters".into()));
        }
        if self.clip_norm < 0.0 {
            return Err(Error::Config("clip_norm must be nonnegative".into()));
        }
        Ok(())
    }

    /// Checks that the data widths have been filled in.
    pub fn validate_dims(&self) -> Result<()> {
        self.validate()?;
        if self.sketch_channels == 0 || self.image_channels == 0 || self.semantic_dim == 0 {
            return Err(Error::Config(
                "sketch_channels, image_channels and semantic_dim must be set".into(),
            ));
        }
        Ok(())
    }

    /// Width of the fused representation fed to the first graph layer.
    pub fn fused_dim(&self) -> usize {
        self.feature_dim * self.feature_dim
    }
}
