//! Flat `key = value` run configuration. Command-line flags override it.

use std::path::Path;

use serde::Deserialize;

use memtree::data::ModelConfig;
use memtree::eval::EvalConfig;
use memtree::model::LossConfig;
use memtree::synth::GenConfig;
use memtree::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub workers: Option<usize>,

    pub n_patients: Option<usize>,
    pub n_trials: Option<usize>,
    pub noise_rate: Option<f64>,

    pub n_m: Option<usize>,
    pub n_e: Option<usize>,
    pub attention_heads: Option<usize>,
    pub ffn_multiplier: Option<usize>,
    pub head_hidden: Option<usize>,
    pub inference_beam: Option<usize>,
    pub embed_seed: Option<u64>,

    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub beam_start: Option<usize>,
    pub beam_end: Option<usize>,
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,

    pub resamples: Option<usize>,
    pub confidence: Option<f64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let body = std::fs::read_to_string(path)?;
        Ok(toml::from_str(&body)?)
    }

    pub fn gen(&self, seed: u64) -> GenConfig {
        let mut c = GenConfig {
            seed,
            ..GenConfig::default()
        };
        set(&mut c.n_patients, self.n_patients);
        set(&mut c.n_trials, self.n_trials);
        set(&mut c.noise_rate, self.noise_rate);
        c
    }

    pub fn model(&self) -> ModelConfig {
        let mut c = ModelConfig::desk();
        set(&mut c.n_m, self.n_m);
        set(&mut c.n_e, self.n_e);
        set(&mut c.attention_heads, self.attention_heads);
        set(&mut c.ffn_multiplier, self.ffn_multiplier);
        set(&mut c.head_hidden, self.head_hidden);
        set(&mut c.inference_beam, self.inference_beam);
        c
    }

    pub fn loss(&self) -> LossConfig {
        let mut c = LossConfig::desk();
        set(&mut c.lambda, self.lambda);
        set(&mut c.alpha, self.alpha);
        c
    }

    pub fn train(&self, seed: u64, workers: usize) -> TrainConfig {
        let mut c = TrainConfig {
            seed,
            workers,
            ..TrainConfig::desk()
        };
        set(&mut c.epochs, self.epochs);
        set(&mut c.batch_size, self.batch_size);
        set(&mut c.learning_rate, self.learning_rate);
        set(&mut c.beam_start, self.beam_start);
        set(&mut c.beam_end, self.beam_end);
        c
    }

    pub fn eval(&self, seed: u64) -> EvalConfig {
        let mut c = EvalConfig {
            seed,
            ..EvalConfig::default()
        };
        set(&mut c.resamples, self.resamples);
        set(&mut c.level, self.confidence);
        c
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_keys_and_rejects_unknown_ones() {
        let c: FileConfig = toml::from_str("epochs = 3\nlearning_rate = 0.01\nn_m = 8\n").unwrap();
        assert_eq!(c.train(0, 1).epochs, 3);
        assert_eq!(c.train(0, 1).learning_rate, 0.01);
        assert_eq!(c.model().n_m, 8);
        assert_eq!(c.model().n_e, ModelConfig::desk().n_e);
        assert!(toml::from_str::<FileConfig>("epoch = 3\n").is_err());
        assert!(toml::from_str::<FileConfig>("[train]\nepochs = 3\n").is_err());
    }
}
