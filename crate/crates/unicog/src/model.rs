//! The full model: posterior encoder transformer, sparse latent head,
//! prefix-conditioned decoder transformer, and their configuration.

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamSet, Tensor, TransformerConfig, TransformerParams};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentConfig {
    /// Latent dimensionality; must equal `alpha * hidden_dim`.
    pub d: usize,
    /// Expansion factor over the encoder hidden dimension.
    pub alpha: usize,
    /// Sparsity level: at most this many active latent dimensions.
    pub k: usize,
    /// Prior standard deviation (fixed isotropic Gaussian).
    pub sigma_prior: f64,
    /// Posterior standard deviation (reparameterization noise scale).
    pub sigma_post: f64,
    /// Number of decoder prefix slots the latent is mapped onto.
    pub prefix_count: usize,
}

impl LatentConfig {
    pub fn validate(&self, hidden_dim: usize) -> Result<()> {
        if self.d != self.alpha * hidden_dim {
            return Err(Error::config(format!(
                "latent d={} must equal alpha*h = {}*{}",
                self.d, self.alpha, hidden_dim
            )));
        }
        if self.k == 0 || self.k > self.d {
            return Err(Error::config(format!(
                "sparsity k={} out of range 1..={}",
                self.k, self.d
            )));
        }
        if self.sigma_prior <= 0.0 || self.sigma_post <= 0.0 {
            return Err(Error::config("sigma_prior and sigma_post must be positive"));
        }
        if self.prefix_count == 0 {
            return Err(Error::config("prefix_count must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: TransformerConfig,
    pub decoder: TransformerConfig,
    pub latent: LatentConfig,
}

impl ModelConfig {
    /// Desk-scale defaults: h=64, 2 layers, 4 heads, d=1024, K=64, P=4,
    /// sigma 0.01 for both prior and posterior.
    pub fn desk_default() -> Self {
        let h = 64;
        ModelConfig {
            encoder: TransformerConfig {
                hidden_dim: h,
                num_layers: 2,
                num_heads: 4,
                max_seq_len: 160,
                vocab_size: crate::corpus::VOCAB_SIZE,
                causal: false,
            },
            decoder: TransformerConfig {
                hidden_dim: h,
                num_layers: 2,
                num_heads: 4,
                max_seq_len: 160,
                vocab_size: crate::corpus::VOCAB_SIZE,
                causal: true,
            },
            latent: LatentConfig {
                d: 16 * h,
                alpha: 16,
                k: 64,
                sigma_prior: 0.01,
                sigma_post: 0.01,
                prefix_count: 4,
            },
        }
    }

    /// Tiny configuration for gradient checks and fast tests.
    pub fn tiny(seq: usize) -> Self {
        let h = 16;
        ModelConfig {
            encoder: TransformerConfig {
                hidden_dim: h,
                num_layers: 2,
                num_heads: 2,
                max_seq_len: seq,
                vocab_size: crate::corpus::VOCAB_SIZE,
                causal: false,
            },
            decoder: TransformerConfig {
                hidden_dim: h,
                num_layers: 2,
                num_heads: 2,
                max_seq_len: seq,
                vocab_size: crate::corpus::VOCAB_SIZE,
                causal: true,
            },
            latent: LatentConfig {
                d: 16 * h,
                alpha: 16,
                k: 16,
                sigma_prior: 0.01,
                sigma_post: 0.01,
                prefix_count: 2,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.latent.validate(self.encoder.hidden_dim)?;
        if self.encoder.hidden_dim != self.decoder.hidden_dim {
            return Err(Error::config(
                "encoder and decoder hidden dims must match (shared latent head)",
            ));
        }
        if !self.decoder.causal {
            return Err(Error::config("decoder must be causal"));
        }
        Ok(())
    }
}

/// Parameter ids of every model component; the structure of the model as
/// opposed to its values, which live in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct ModelArch {
    pub encoder: TransformerParams,
    pub decoder: TransformerParams,
    /// Latent head: mu pre-activation = W1 * pooled + b1.
    pub w1: ParamId,
    pub b1: ParamId,
    /// Prefix map: prefix rows = reshape(Wz * z + bz, [P, h]).
    pub wz: ParamId,
    pub bz: ParamId,
}

impl ModelArch {
    /// Registers all model tensors into `params` with fresh random values.
    pub fn init(cfg: &ModelConfig, params: &mut ParamSet, rng: &mut Rng) -> Self {
        let encoder = TransformerParams::init(&cfg.encoder, "enc", params, rng);
        let decoder = TransformerParams::init(&cfg.decoder, "dec", params, rng);
        let h = cfg.encoder.hidden_dim;
        let d = cfg.latent.d;
        let p = cfg.latent.prefix_count;
        // Latent head spread: rows ~ N(0, 1/sqrt(h)) gives O(1) pre-activations
        // over normalized pooled states, so ReLU+top-k starts well-populated.
        let w1 = params.register(
            "latent.w1",
            Tensor::randn(&[d, h], 1.0 / (h as f64).sqrt(), rng),
        );
        let b1 = params.register("latent.b1", Tensor::zeros(&[d]));
        let wz = params.register("latent.wz", Tensor::randn(&[p * h, d], 0.02, rng));
        let bz = params.register("latent.bz", Tensor::zeros(&[p * h]));
        ModelArch {
            encoder,
            decoder,
            w1,
            b1,
            wz,
            bz,
        }
    }
}

pub struct UniCogModel {
    pub cfg: ModelConfig,
    pub arch: ModelArch,
    pub params: ParamSet,
}

impl UniCogModel {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let mut params = ParamSet::new();
        let arch = ModelArch::init(&cfg, &mut params, &mut rng);
        Ok(UniCogModel { cfg, arch, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_validates() {
        ModelConfig::desk_default().validate().unwrap();
    }

    #[test]
    fn latent_config_rejects_mismatched_d() {
        let mut cfg = ModelConfig::desk_default();
        cfg.latent.d = 100;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn latent_config_rejects_bad_k() {
        let mut cfg = ModelConfig::desk_default();
        cfg.latent.k = 0;
        assert!(cfg.validate().is_err());
        cfg.latent.k = cfg.latent.d + 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = UniCogModel::init(ModelConfig::tiny(32), 5).unwrap();
        let b = UniCogModel::init(ModelConfig::tiny(32), 5).unwrap();
        assert_eq!(a.params.len(), b.params.len());
        for ((_, ea), (_, eb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(ea.name, eb.name);
            assert_eq!(ea.tensor.data(), eb.tensor.data());
        }
    }
}
