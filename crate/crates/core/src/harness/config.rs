//! Experiment configuration: a flat-key TOML schema. Unknown keys are
//! rejected so typos cannot silently fall back to defaults. Cross-field
//! rules are validated with messages naming the offending fields.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channelgen::SceneConfig;
use crate::csinet::ModelConfig;
use crate::error::{Error, Result};
use crate::mueval::LinkBudget;
use crate::training::{LossMode, TrainConfig};
use crate::typeii::{feedback_bit_length, SortMethod, TypeIIQuantConfig};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    // scene geometry and propagation
    pub ue_count: usize,
    pub horizontal_antennas: usize,
    pub vertical_antennas: usize,
    pub subbands: usize,
    pub rb_per_subband: usize,
    pub ul_carrier_ghz: f64,
    pub dl_carrier_ghz: f64,
    pub cell_radius_m: f64,
    pub cluster_count: usize,
    pub delay_spread_ns: f64,
    pub seed: u64,

    // feedback / codebook
    pub port_count: usize,
    pub qn_bits: u32,
    pub qa_bits: u32,
    pub qp_bits: u32,
    pub sorting: String,

    // model
    pub latent_bits_per_unit: u32,
    pub hidden_width: usize,
    pub conv_channels: usize,
    pub conv_blocks: usize,
    pub encoder_lrelu_slope: f64,
    pub decoder_lrelu_slope: f64,
    pub decoder_dropout: f64,
    pub surrogate_temperature: f64,

    // training
    pub epochs: usize,
    pub stage1_epochs: usize,
    pub batch_size: usize,
    pub microbatch: usize,
    pub learning_rate: f64,
    pub mix_weight_mu: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub loss_mode: String,
    pub train_scenes: usize,
    pub val_scenes: usize,

    // link budget
    pub transmit_power_dbm: f64,
    pub noise_figure_db: f64,

    // evaluation / outputs
    pub eval_scenes: usize,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    /// Desk-scale defaults: paper geometry, CI-sized scene counts and
    /// epochs scaled proportionally (paper-scale values live in
    /// `configs/paper.toml`).
    fn default() -> Self {
        ExperimentConfig {
            ue_count: 5,
            horizontal_antennas: 4,
            vertical_antennas: 4,
            subbands: 16,
            rb_per_subband: 4,
            ul_carrier_ghz: 3.4,
            dl_carrier_ghz: 3.5,
            cell_radius_m: 250.0,
            cluster_count: 6,
            delay_spread_ns: 300.0,
            seed: 1,
            port_count: 32,
            qn_bits: 5,
            qa_bits: 2,
            qp_bits: 3,
            sorting: "amplitude".into(),
            latent_bits_per_unit: 2,
            hidden_width: 1024,
            conv_channels: 128,
            conv_blocks: 10,
            encoder_lrelu_slope: 0.3,
            decoder_lrelu_slope: 0.1,
            decoder_dropout: 0.02,
            surrogate_temperature: 25.0,
            epochs: 60,
            stage1_epochs: 24,
            batch_size: 32,
            microbatch: 8,
            learning_rate: 3e-2,
            mix_weight_mu: 1e-3,
            lr_decay_every: 50,
            lr_decay_factor: 0.5,
            loss_mode: "two-stage".into(),
            train_scenes: 8192,
            val_scenes: 512,
            transmit_power_dbm: 35.0,
            noise_figure_db: 5.0,
            eval_scenes: 512,
            output_dir: "out".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dump(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn n_t(&self) -> usize {
        2 * self.horizontal_antennas * self.vertical_antennas
    }

    pub fn feedback_bits(&self) -> usize {
        feedback_bit_length(&self.quant_config(), self.port_count)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene_config().validate()?;
        self.quant_config().validate()?;
        if self.port_count == 0 || self.port_count > self.n_t() * self.subbands {
            return Err(Error::Config(format!(
                "port_count ({}) must lie in [1, n_t*subbands = {}]",
                self.port_count,
                self.n_t() * self.subbands
            )));
        }
        self.sort_method()?;
        self.loss()?;
        self.model_config().validate()?;
        self.train_config().validate()?;
        if self.val_scenes >= self.train_scenes {
            return Err(Error::Config(format!(
                "val_scenes ({}) must be smaller than train_scenes ({})",
                self.val_scenes, self.train_scenes
            )));
        }
        if self.eval_scenes == 0 {
            return Err(Error::Config("eval_scenes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            ue_count: self.ue_count,
            n_h: self.horizontal_antennas,
            n_v: self.vertical_antennas,
            subbands: self.subbands,
            rb_per_subband: self.rb_per_subband,
            f_ul_hz: self.ul_carrier_ghz * 1e9,
            f_dl_hz: self.dl_carrier_ghz * 1e9,
            cell_radius_m: self.cell_radius_m,
            cluster_count: self.cluster_count,
            delay_spread_s: self.delay_spread_ns * 1e-9,
            seed: self.seed,
        }
    }

    pub fn quant_config(&self) -> TypeIIQuantConfig {
        TypeIIQuantConfig {
            q_n: self.qn_bits,
            q_a: self.qa_bits,
            q_p: self.qp_bits,
        }
    }

    pub fn sort_method(&self) -> Result<SortMethod> {
        SortMethod::parse(&self.sorting, self.seed)
    }

    pub fn loss(&self) -> Result<LossMode> {
        LossMode::parse(&self.loss_mode)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_p: self.port_count,
            n_t: self.n_t(),
            m: self.subbands,
            feedback_bits: self.feedback_bits(),
            latent_bits_per_unit: self.latent_bits_per_unit,
            hidden_width: self.hidden_width,
            conv_channels: self.conv_channels,
            conv_blocks: self.conv_blocks,
            lrelu_enc: self.encoder_lrelu_slope,
            lrelu_dec: self.decoder_lrelu_slope,
            dropout_dec: self.decoder_dropout,
            surrogate_temp: self.surrogate_temperature,
            ablation_no_fill: false,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            stage1_epochs: self.stage1_epochs,
            batch_size: self.batch_size,
            microbatch: self.microbatch,
            lr: self.learning_rate,
            mu: self.mix_weight_mu,
            seed: self.seed,
            loss: self.loss().unwrap_or(LossMode::TwoStage),
            lr_decay_every: self.lr_decay_every,
            lr_decay_factor: self.lr_decay_factor,
        }
    }

    pub fn link_budget(&self) -> LinkBudget {
        LinkBudget::from_system(
            self.transmit_power_dbm,
            self.noise_figure_db,
            self.ue_count,
            self.subbands,
            self.rb_per_subband,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_roundtrips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.n_t(), 32);
        assert_eq!(cfg.feedback_bits(), 165);
        let text = cfg.dump();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<ExperimentConfig>("typo_key = 3").unwrap_err();
        assert!(err.to_string().contains("typo_key"));
    }

    #[test]
    fn cross_field_violations_name_fields() {
        let cfg = ExperimentConfig {
            port_count: 1000,
            ..ExperimentConfig::default()
        };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("port_count"), "{msg}");

        let cfg = ExperimentConfig {
            val_scenes: 8192,
            ..ExperimentConfig::default()
        };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("val_scenes"), "{msg}");

        let cfg = ExperimentConfig {
            stage1_epochs: 100,
            epochs: 50,
            ..ExperimentConfig::default()
        };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("stage1_epochs"), "{msg}");
    }
}
