use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which ranking loss drives the recommendation term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecLoss {
    /// max(0, 1 − ŷ_pos + ŷ_neg), the default.
    Hinge,
    /// −log σ(ŷ_pos − ŷ_neg).
    Bpr,
}

/// Which factorized contrastive views participate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// MF and SVD streams fused.
    Full,
    /// MF stream only.
    MfOnly,
    /// SVD stream only.
    SvdOnly,
    /// No factorized view and no contrastive loss.
    None,
}

impl Variant {
    /// Row label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "HMFGCL",
            Variant::MfOnly => "HMFGCL-M",
            Variant::SvdOnly => "HMFGCL-S",
            Variant::None => "HMFGCL-R",
        }
    }

    pub fn uses_mf(self) -> bool {
        matches!(self, Variant::Full | Variant::MfOnly)
    }

    pub fn uses_svd(self) -> bool {
        matches!(self, Variant::Full | Variant::SvdOnly)
    }
}

/// How the MF and SVD view streams combine (full variant only).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    Hadamard,
    Sum,
    Mean,
}

/// Propagation activation σ.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    /// Leaky rectifier with fixed negative slope 0.5.
    Leaky,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Leaky => {
                if x >= 0.0 {
                    x
                } else {
                    0.5 * x
                }
            }
        }
    }

    /// Subgradient; 1 is chosen at the leaky kink.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Leaky => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.5
                }
            }
        }
    }
}

/// How per-layer embeddings combine into the final representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Readout {
    Sum,
    Mean,
    Last,
}

macro_rules! enum_from_str {
    ($ty:ty, $($s:literal => $v:expr),+) => {
        impl std::str::FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<$ty> {
                match s {
                    $($s => Ok($v),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " '{}' (expected one of: ", $($s, " ",)+ ")"),
                        other
                    ))),
                }
            }
        }
    };
}

enum_from_str!(RecLoss, "hinge" => RecLoss::Hinge, "bpr" => RecLoss::Bpr);
enum_from_str!(Variant, "full" => Variant::Full, "mf-only" => Variant::MfOnly,
    "svd-only" => Variant::SvdOnly, "none" => Variant::None);
enum_from_str!(Fusion, "hadamard" => Fusion::Hadamard, "sum" => Fusion::Sum, "mean" => Fusion::Mean);
enum_from_str!(Activation, "identity" => Activation::Identity, "leaky" => Activation::Leaky);
enum_from_str!(Readout, "sum" => Readout::Sum, "mean" => Readout::Mean, "last" => Readout::Last);

/// Every hyperparameter of a training run. One value of this struct plus
/// a prepared dataset fully determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Embedding size.
    pub d: usize,
    /// Propagation layers L.
    pub layers: usize,
    /// Adam learning rate for the embedding tables.
    pub lr: f64,
    /// L2 regularization weight λ₂.
    pub l2: f64,
    /// Contrastive loss weight λ₁.
    pub cl_weight: f64,
    /// Target L2 norm ε of each propagation-noise row.
    pub epsilon: f64,
    /// Uniform component weight in the noise mix (l1).
    pub noise_uniform: f64,
    /// Gaussian component weight in the noise mix (l2).
    pub noise_gaussian: f64,
    /// MF factorization rank k.
    pub mf_rank: usize,
    /// Truncated SVD rank q.
    pub svd_rank: usize,
    /// InfoNCE temperature τ.
    pub tau: f64,
    pub batch_size: usize,
    /// Negatives sampled per positive (S).
    pub negatives: usize,
    pub rec_loss: RecLoss,
    pub variant: Variant,
    pub fusion: Fusion,
    pub activation: Activation,
    pub readout: Readout,
    pub max_epochs: usize,
    /// Early-stopping patience on validation Recall@20.
    pub patience: usize,
    pub seed: u64,
    /// InfoNCE over all nodes instead of in-batch nodes.
    pub cl_full_set: bool,
    /// MF inner-loop iteration cap.
    pub mf_iters: usize,
    /// MF inner-loop Adam learning rate.
    pub mf_lr: f64,
    /// MF relative-improvement stopping tolerance.
    pub mf_tol: f64,
    /// Extra sketch columns for the randomized SVD.
    pub svd_oversample: usize,
    /// Subspace iterations for the randomized SVD.
    pub svd_power_iters: usize,
    /// Cutoffs for evaluation metrics.
    pub eval_ks: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 64,
            layers: 2,
            lr: 1e-3,
            l2: 1e-5,
            cl_weight: 0.003,
            epsilon: 0.1,
            noise_uniform: 0.2,
            noise_gaussian: 0.8,
            mf_rank: 5,
            svd_rank: 5,
            tau: 0.2,
            batch_size: 2048,
            negatives: 1,
            rec_loss: RecLoss::Hinge,
            variant: Variant::Full,
            fusion: Fusion::Hadamard,
            activation: Activation::Identity,
            readout: Readout::Sum,
            max_epochs: 500,
            patience: 10,
            seed: 42,
            cl_full_set: false,
            mf_iters: 300,
            mf_lr: 0.01,
            mf_tol: 1e-5,
            svd_oversample: 8,
            svd_power_iters: 4,
            eval_ks: vec![10, 20],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        fn req(ok: bool, msg: &str) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.into()))
            }
        }
        req(self.d >= 1, "d must be >= 1")?;
        req(self.layers >= 1, "layers must be >= 1")?;
        req(self.lr > 0.0 && self.lr.is_finite(), "lr must be positive")?;
        req(self.l2 >= 0.0 && self.l2.is_finite(), "l2 must be >= 0")?;
        req(
            self.cl_weight >= 0.0 && self.cl_weight.is_finite(),
            "cl_weight must be >= 0",
        )?;
        req(
            self.epsilon >= 0.0 && self.epsilon.is_finite(),
            "epsilon must be >= 0",
        )?;
        req(
            (0.0..=1.0).contains(&self.noise_uniform) && (0.0..=1.0).contains(&self.noise_gaussian),
            "noise weights must lie in [0,1]",
        )?;
        req(
            (self.noise_uniform + self.noise_gaussian - 1.0).abs() <= 1e-9,
            "noise weights must sum to 1",
        )?;
        req(self.mf_rank >= 1, "mf_rank must be >= 1")?;
        req(self.svd_rank >= 1, "svd_rank must be >= 1")?;
        req(self.tau > 0.0 && self.tau.is_finite(), "tau must be positive")?;
        req(self.batch_size >= 1, "batch_size must be >= 1")?;
        req(self.negatives >= 1, "negatives must be >= 1")?;
        req(self.max_epochs >= 1, "max_epochs must be >= 1")?;
        req(self.patience >= 1, "patience must be >= 1")?;
        req(self.mf_iters >= 1, "mf_iters must be >= 1")?;
        req(
            self.mf_lr > 0.0 && self.mf_lr.is_finite(),
            "mf_lr must be positive",
        )?;
        req(
            self.mf_tol >= 0.0 && self.mf_tol.is_finite(),
            "mf_tol must be >= 0",
        )?;
        req(!self.eval_ks.is_empty(), "eval_ks must be non-empty")?;
        req(self.eval_ks.iter().all(|&k| k >= 1), "eval ks must be >= 1")?;
        Ok(())
    }

    /// Parse one `key=value` override (flag or sweep-grid form). `k` and
    /// `q` alias the two factorization ranks.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{value}' for '{key}'")))
        }
        match key {
            "d" => self.d = num(key, value)?,
            "layers" => self.layers = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "l2" => self.l2 = num(key, value)?,
            "cl_weight" => self.cl_weight = num(key, value)?,
            "epsilon" => self.epsilon = num(key, value)?,
            "noise_uniform" => self.noise_uniform = num(key, value)?,
            "noise_gaussian" => self.noise_gaussian = num(key, value)?,
            "mf_rank" | "k" => self.mf_rank = num(key, value)?,
            "svd_rank" | "q" => self.svd_rank = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "negatives" => self.negatives = num(key, value)?,
            "rec_loss" => self.rec_loss = value.parse()?,
            "variant" => self.variant = value.parse()?,
            "fusion" => self.fusion = value.parse()?,
            "activation" => self.activation = value.parse()?,
            "readout" => self.readout = value.parse()?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "cl_full_set" => self.cl_full_set = num(key, value)?,
            "mf_iters" => self.mf_iters = num(key, value)?,
            "mf_lr" => self.mf_lr = num(key, value)?,
            "mf_tol" => self.mf_tol = num(key, value)?,
            "svd_oversample" => self.svd_oversample = num(key, value)?,
            "svd_power_iters" => self.svd_power_iters = num(key, value)?,
            "eval_ks" => {
                let ks: Result<Vec<usize>> = value.split(',').map(|s| num("eval_ks", s)).collect();
                self.eval_ks = ks?;
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown config key '{other}'"
                )))
            }
        }
        Ok(())
    }

    /// Canonical field name of a `set_key` key (resolves the `k`/`q`
    /// aliases), for provenance records keyed by struct field.
    pub fn canonical_key(key: &str) -> &str {
        match key {
            "k" => "mf_rank",
            "q" => "svd_rank",
            other => other,
        }
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<TrainConfig> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Content hash of the complete resolved config (canonical JSON of
    /// the struct in declaration order).
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn noise_spec(&self) -> crate::model::NoiseSpec {
        crate::model::NoiseSpec {
            epsilon: self.epsilon,
            uniform_weight: self.noise_uniform,
            gaussian_weight: self.noise_gaussian,
        }
    }
}
