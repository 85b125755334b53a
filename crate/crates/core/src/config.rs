//! Flat key-value experiment configs.
//!
//! One `key = value` pair per line, `#` comments. Unknown keys are errors:
//! a silent typo in an experiment config is a reproducibility bug, so the
//! parser fails fast and names the offender.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synthgen::GeneratorConfig;
use crate::training::{LossMode, TrainConfig};

/// Parsed key-value pairs with consumption tracking.
pub struct FlatConfig {
    entries: BTreeMap<String, String>,
    consumed: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl FlatConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            if entries.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("duplicate key `{key}`")));
            }
        }
        Ok(FlatConfig {
            entries,
            consumed: Default::default(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    fn raw(&self, key: &str) -> Option<&str> {
        let found = self.entries.get(key).map(String::as_str);
        if found.is_some() {
            self.consumed.borrow_mut().insert(key.to_string());
        }
        found
    }

    pub fn required<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        match self.raw(key) {
            None => Err(Error::Config(format!("missing required key `{key}`"))),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{v}`"))),
        }
    }

    pub fn optional<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{v}`"))),
        }
    }

    pub fn optional_str(&self, key: &str) -> Option<String> {
        self.raw(key).map(str::to_string)
    }

    /// Every key must have been consumed by now; leftovers are typos.
    pub fn finish(&self) -> Result<()> {
        let consumed = self.consumed.borrow();
        let unknown: Vec<&String> = self
            .entries
            .keys()
            .filter(|k| !consumed.contains(*k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown key(s): {}",
                unknown
                    .iter()
                    .map(|k| format!("`{k}`"))
                    .collect::<Vec<_>>()
                    .join(", ")
            )))
        }
    }
}

/// Generator config file. Only `seed` is required; everything else follows
/// the documented desk-scale defaults.
pub fn generator_config_from_file(path: &Path) -> Result<GeneratorConfig> {
    let flat = FlatConfig::load(path)?;
    let d = GeneratorConfig::default();
    let config = GeneratorConfig {
        seed: flat.required("seed")?,
        num_images: flat.optional("num_images", d.num_images)?,
        image_offset: flat.optional("image_offset", d.image_offset)?,
        objects_min: flat.optional("objects_min", d.objects_min)?,
        objects_max: flat.optional("objects_max", d.objects_max)?,
        num_object_classes: flat.optional("num_object_classes", d.num_object_classes)?,
        num_predicates: flat.optional("num_predicates", d.num_predicates)?,
        zipf_exponent: flat.optional("zipf_exponent", d.zipf_exponent)?,
        confusability: flat.optional("confusability", d.confusability)?,
        feature_dim: flat.optional("feature_dim", d.feature_dim)?,
        union_dim: flat.optional("union_dim", d.union_dim)?,
        noise_scale: flat.optional("noise_scale", d.noise_scale)?,
        relations_per_image: flat.optional("relations_per_image", d.relations_per_image)?,
        image_size: flat.optional("image_size", d.image_size)?,
        theme_strength: flat.optional("theme_strength", d.theme_strength)?,
        taily_fraction: flat.optional("taily_fraction", d.taily_fraction)?,
        tail_boost: flat.optional("tail_boost", d.tail_boost)?,
        jitter: flat.optional("jitter", d.jitter)?,
        score_sharpness: flat.optional("score_sharpness", d.score_sharpness)?,
        score_noise: flat.optional("score_noise", d.score_noise)?,
    };
    flat.finish()?;
    config.validate()?;
    Ok(config)
}

/// Training config file: optimizer and loop knobs plus optional model
/// dimension overrides applied on top of the dataset-derived defaults.
pub fn train_config_from_file(path: &Path) -> Result<(TrainConfig, ModelOverrides)> {
    let flat = FlatConfig::load(path)?;
    let d = TrainConfig::default();
    let config = TrainConfig {
        seed: flat.required("seed")?,
        learning_rate: flat.optional("learning_rate", d.learning_rate)?,
        batch_size: flat.optional("batch_size", d.batch_size)?,
        max_epochs: flat.optional("max_epochs", d.max_epochs)?,
        patience: flat.optional("patience", d.patience)?,
        lr_decay: flat.optional("lr_decay", d.lr_decay)?,
        max_decays: flat.optional("max_decays", d.max_decays)?,
        loss_mode: match flat.optional_str("loss") {
            None => d.loss_mode,
            Some(s) => LossMode::parse(&s)?,
        },
        ohem_t: flat.optional("ohem_t", d.ohem_t)?,
        ohem_tau: flat.optional("ohem_tau", d.ohem_tau)?,
        val_fraction: flat.optional("val_fraction", d.val_fraction)?,
        negative_ratio: flat.optional("negative_ratio", d.negative_ratio)?,
        ema_decay: flat.optional("ema_decay", d.ema_decay)?,
        weight_decay: flat.optional("weight_decay", d.weight_decay)?,
    };
    let overrides = ModelOverrides {
        object_dim: flat.optional_str("object_dim").map(|v| parse_key("object_dim", &v)).transpose()?,
        hidden_dim: flat.optional_str("hidden_dim").map(|v| parse_key("hidden_dim", &v)).transpose()?,
        relation_dim: flat.optional_str("relation_dim").map(|v| parse_key("relation_dim", &v)).transpose()?,
        spatial_dim: flat.optional_str("spatial_dim").map(|v| parse_key("spatial_dim", &v)).transpose()?,
        spatial_hidden: flat.optional_str("spatial_hidden").map(|v| parse_key("spatial_hidden", &v)).transpose()?,
        attention_dim: flat.optional_str("attention_dim").map(|v| parse_key("attention_dim", &v)).transpose()?,
        context_dim: flat.optional_str("context_dim").map(|v| parse_key("context_dim", &v)).transpose()?,
        per_class_dim: flat.optional_str("per_class_dim").map(|v| parse_key("per_class_dim", &v)).transpose()?,
        prior_steps: flat.optional_str("prior_steps").map(|v| parse_key("prior_steps", &v)).transpose()?,
    };
    flat.finish()?;
    config.validate()?;
    Ok((config, overrides))
}

fn parse_key(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{value}`")))
}

/// Optional model dimension overrides from the training config file.
#[derive(Debug, Clone, Default)]
pub struct ModelOverrides {
    pub object_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub relation_dim: Option<usize>,
    pub spatial_dim: Option<usize>,
    pub spatial_hidden: Option<usize>,
    pub attention_dim: Option<usize>,
    pub context_dim: Option<usize>,
    pub per_class_dim: Option<usize>,
    pub prior_steps: Option<usize>,
}

impl ModelOverrides {
    pub fn apply(&self, config: &mut ModelConfig) {
        let set = |slot: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut config.object_dim, self.object_dim);
        set(&mut config.hidden_dim, self.hidden_dim);
        set(&mut config.relation_dim, self.relation_dim);
        set(&mut config.spatial_dim, self.spatial_dim);
        set(&mut config.spatial_hidden, self.spatial_hidden);
        set(&mut config.attention_dim, self.attention_dim);
        set(&mut config.context_dim, self.context_dim);
        set(&mut config.per_class_dim, self.per_class_dim);
        set(&mut config.prior_steps, self.prior_steps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_config(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn defaults_fill_in_missing_generator_keys() {
        let f = write_config("seed = 7\n");
        let config = generator_config_from_file(f.path()).unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.num_predicates, 11);
        assert_eq!(config.num_images, 200);
    }

    #[test]
    fn missing_seed_is_an_error_naming_the_key() {
        let f = write_config("num_images = 10\n");
        let err = generator_config_from_file(f.path()).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn unknown_keys_fail_fast() {
        let f = write_config("seed = 1\nnum_imagez = 10\n");
        let err = generator_config_from_file(f.path()).unwrap_err();
        assert!(err.to_string().contains("num_imagez"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let f = write_config("# corpus\nseed = 3   # rng\n\nnum_images = 4\n");
        let config = generator_config_from_file(f.path()).unwrap();
        assert_eq!(config.seed, 3);
        assert_eq!(config.num_images, 4);
    }

    #[test]
    fn train_config_parses_loss_mode_and_overrides() {
        let f = write_config("seed = 2\nloss = ohem\nohem_t = 0.5\nobject_dim = 16\n");
        let (config, overrides) = train_config_from_file(f.path()).unwrap();
        assert_eq!(config.loss_mode, LossMode::Ohem);
        assert_eq!(config.ohem_t, 0.5);
        assert_eq!(overrides.object_dim, Some(16));
        let mut mc = ModelConfig::tiny(3, 4);
        overrides.apply(&mut mc);
        assert_eq!(mc.object_dim, 16);
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let f = write_config("seed = 1\nseed = 2\n");
        assert!(generator_config_from_file(f.path()).is_err());
    }
}
