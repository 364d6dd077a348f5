//! JSON run configuration: one document with `model`, `train`, and `synth`
//! sections, exhaustive key validation, documented defaults, and an echo of
//! the effective (post-default) config into the run directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use san_core::model::{EncoderKind, ModelConfig};
use san_core::optim::AdamConfig;
use san_core::siamese::TrainSettings;
use san_core::synth::SynthConfig;
use san_core::tape::KlDirection;

use crate::errors::{CmdError, CmdResult};

fn default_feature_dim() -> usize {
    8
}
fn default_model_dim() -> usize {
    16
}
fn default_encoder() -> String {
    "self_attention".into()
}
fn default_encoder_layers() -> usize {
    2
}
fn default_decoder_layers() -> usize {
    1
}
fn default_heads() -> usize {
    2
}
fn default_dropout() -> f64 {
    0.1
}
fn default_subsample() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_model_dim")]
    pub model_dim: usize,
    #[serde(default = "default_encoder")]
    pub encoder: String,
    #[serde(default = "default_encoder_layers")]
    pub encoder_layers: usize,
    #[serde(default = "default_decoder_layers")]
    pub decoder_layers: usize,
    #[serde(default = "default_heads")]
    pub attention_heads: usize,
    #[serde(default = "default_dropout")]
    pub dropout_p: f64,
    #[serde(default = "default_subsample")]
    pub subsample: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

fn default_peak_lr() -> f64 {
    0.002
}
fn default_warmup() -> u64 {
    400
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.98
}
fn default_adam_eps() -> f64 {
    1e-9
}
fn default_grad_clip() -> f64 {
    5.0
}
fn default_batch_size() -> usize {
    16
}
fn default_epochs() -> usize {
    15
}
fn default_lambda1() -> f64 {
    0.5
}
fn default_lambda2() -> f64 {
    0.5
}
fn default_lambda3() -> f64 {
    2.0
}
fn default_kl_direction() -> String {
    "symmetric".into()
}
fn default_true() -> bool {
    true
}
fn default_average_last_n() -> usize {
    5
}
fn default_master_seed() -> u64 {
    42
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lambda1")]
    pub lambda1: f64,
    #[serde(default = "default_lambda2")]
    pub lambda2: f64,
    #[serde(default = "default_lambda3")]
    pub lambda3: f64,
    #[serde(default = "default_kl_direction")]
    pub kl_direction: String,
    #[serde(default = "default_true")]
    pub kl_on_ctc: bool,
    #[serde(default = "default_true")]
    pub kl_on_attn: bool,
    #[serde(default)]
    pub kl_stop_grad_pass2: bool,
    #[serde(default = "default_average_last_n")]
    pub average_last_n: usize,
    #[serde(default = "default_master_seed")]
    pub master_seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

fn default_n_tokens() -> usize {
    12
}
fn default_frames_per_token() -> (usize, usize) {
    (3, 4)
}
fn default_confusable_pairs() -> Vec<(usize, usize, f64)> {
    vec![
        (0, 1, 0.25),
        (2, 3, 0.25),
        (4, 5, 0.25),
        (6, 7, 0.25),
    ]
}
fn default_noise_sigma() -> f64 {
    0.5
}
fn default_utterance_len() -> (usize, usize) {
    (2, 5)
}
fn default_n_train() -> usize {
    2000
}
fn default_n_dev() -> usize {
    200
}
fn default_n_test() -> usize {
    400
}
fn default_synth_seed() -> u64 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    #[serde(default = "default_n_tokens")]
    pub n_tokens: usize,
    #[serde(default = "default_frames_per_token")]
    pub frames_per_token: (usize, usize),
    #[serde(default = "default_confusable_pairs")]
    pub confusable_pairs: Vec<(usize, usize, f64)>,
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    #[serde(default = "default_utterance_len")]
    pub utterance_len: (usize, usize),
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_dev")]
    pub n_dev: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default = "default_synth_seed")]
    pub seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

/// The whole run configuration. `vocab_size` is always derived:
/// synth.n_tokens + 2 reserved ids (blank, sentinel).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub synth: SynthSection,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> CmdResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CmdError::io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| CmdError::usage(format!("{}: {e}", path.display())))
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn vocab_size(&self) -> usize {
        self.synth.n_tokens + san_core::synth::FIRST_TOKEN_ID
    }

    pub fn model_config(&self) -> CmdResult<ModelConfig> {
        let encoder_kind = match self.model.encoder.as_str() {
            "self_attention" => EncoderKind::SelfAttention,
            "recurrent" => EncoderKind::Recurrent,
            other => {
                return Err(CmdError::usage(format!(
                    "model.encoder must be \"self_attention\" or \"recurrent\", got \"{other}\""
                )))
            }
        };
        let cfg = ModelConfig {
            feature_dim: self.model.feature_dim,
            model_dim: self.model.model_dim,
            vocab_size: self.vocab_size(),
            encoder_kind,
            encoder_layers: self.model.encoder_layers,
            decoder_layers: self.model.decoder_layers,
            attention_heads: self.model.attention_heads,
            dropout_p: self.model.dropout_p,
            subsample: self.model.subsample,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_settings(&self) -> CmdResult<TrainSettings> {
        let kl_direction = match self.train.kl_direction.as_str() {
            "forward" => KlDirection::Forward,
            "reverse" => KlDirection::Reverse,
            "symmetric" => KlDirection::Symmetric,
            other => {
                return Err(CmdError::usage(format!(
                    "train.kl_direction must be forward|reverse|symmetric, got \"{other}\""
                )))
            }
        };
        let settings = TrainSettings {
            adam: AdamConfig {
                peak_lr: self.train.peak_lr,
                warmup_steps: self.train.warmup_steps,
                beta1: self.train.beta1,
                beta2: self.train.beta2,
                eps: self.train.adam_eps,
                grad_clip: self.train.grad_clip,
            },
            lambda1: self.train.lambda1,
            lambda2: self.train.lambda2,
            lambda3: self.train.lambda3,
            kl_direction,
            kl_on_ctc: self.train.kl_on_ctc,
            kl_on_attn: self.train.kl_on_attn,
            kl_stop_grad_pass2: self.train.kl_stop_grad_pass2,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            average_last_n: self.train.average_last_n,
            master_seed: self.train.master_seed,
        };
        settings.validate()?;
        Ok(settings)
    }

    pub fn synth_config(&self) -> CmdResult<SynthConfig> {
        let cfg = SynthConfig {
            n_tokens: self.synth.n_tokens,
            feature_dim: self.model.feature_dim,
            frames_per_token: self.synth.frames_per_token,
            confusable_pairs: self.synth.confusable_pairs.clone(),
            noise_sigma: self.synth.noise_sigma,
            utterance_len: self.synth.utterance_len,
            n_train: self.synth.n_train,
            n_dev: self.synth.n_dev,
            n_test: self.synth.n_test,
            seed: self.synth.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Writes the effective (post-default) configuration.
    pub fn echo(&self, path: &Path) -> CmdResult<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CmdError::io(format!("serializing config: {e}")))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    /// The reference configuration used by gradcheck when no file is given:
    /// feature_dim 8, model_dim 16, 2+1 layers, vocabulary of 6, dropout off.
    pub fn tiny_reference() -> Self {
        let mut cfg = RunConfig::default();
        cfg.model.dropout_p = 0.0;
        cfg.synth.n_tokens = 4;
        cfg
    }
}
