//! Plain-text run configuration: one `key=value` per line, `#` comments,
//! mirroring the model and training fields plus a `preset` shortcut.
//! Command-line overrides beat file values; an environment seed is the
//! fallback of last resort. The resolved form is echoed into run
//! directories so every run records exactly what it used.

use crate::error::{Error, Result};
use crate::harness::TrainConfig;
use crate::model::ModelConfig;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::toy(),
            train: TrainConfig::default(),
        }
    }
}

fn split_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: `{line}` is not key=value", lineno + 1))
        })?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

impl RunConfig {
    /// Builds a run configuration from an optional file, override pairs
    /// (winning over the file), and an optional fallback seed used only
    /// when nothing else sets `seed`. `preset` is applied before other
    /// keys no matter where it appears.
    pub fn resolve(
        file_text: Option<&str>,
        overrides: &[(String, String)],
        fallback_seed: Option<u64>,
    ) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut file_pairs = match file_text {
            Some(text) => split_pairs(text)?,
            None => Vec::new(),
        };
        let mut seen: Vec<String> = Vec::new();
        for (k, _) in &file_pairs {
            if seen.contains(k) {
                return Err(Error::Config(format!("duplicate key `{k}`")));
            }
            seen.push(k.clone());
        }
        // Overrides replace file values outright.
        for (k, v) in overrides {
            file_pairs.retain(|(fk, _)| fk != k);
            file_pairs.push((k.clone(), v.clone()));
        }
        let mut seed_set = false;
        if let Some(pos) = file_pairs.iter().position(|(k, _)| k == "preset") {
            let (_, name) = file_pairs.remove(pos);
            cfg.model = ModelConfig::preset(&name)?;
        }
        for (k, v) in &file_pairs {
            if k == "preset" {
                return Err(Error::Config("duplicate key `preset`".into()));
            }
            if ModelConfig::is_model_key(k) {
                cfg.model.apply_kv(k, v)?;
            } else if TrainConfig::is_train_key(k) {
                cfg.train.apply_kv(k, v)?;
                if k == "seed" {
                    seed_set = true;
                }
            } else {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
        }
        if !seed_set {
            if let Some(seed) = fallback_seed {
                cfg.train.seed = seed;
            }
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// One seed drives both weight initialization and the training loop;
    /// disjoint RNG streams keep the two independent.
    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    /// Fully resolved echo; re-parses to an identical configuration.
    pub fn resolved(&self) -> String {
        format!(
            "# resolved run configuration\n{}{}",
            self.model.to_kv(),
            self.train.to_kv()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Factorization;

    #[test]
    fn defaults_are_the_toy_recipe() {
        let cfg = RunConfig::resolve(None, &[], None).unwrap();
        assert_eq!(cfg.model, ModelConfig::toy());
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.train.weight_decay, 1e-5);
    }

    #[test]
    fn preset_applies_first_regardless_of_position() {
        let text = "depth=3\npreset=vidtr-s\n";
        let cfg = RunConfig::resolve(Some(text), &[], None).unwrap();
        // depth overrides the preset's 12 even though it appears earlier.
        assert_eq!(cfg.model.depth, 3);
        assert_eq!(cfg.model.embed_dim, 768);
    }

    #[test]
    fn comments_blanks_and_whitespace_are_tolerated() {
        let text = "\n# a comment\n  epochs = 4  # trailing\n\nmilestones=\nlr=0.5\n";
        let cfg = RunConfig::resolve(Some(text), &[], None).unwrap();
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.train.lr, 0.5);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed_keys() {
        assert!(matches!(
            RunConfig::resolve(Some("bogus=1\n"), &[], None),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::resolve(Some("epochs=1\nepochs=2\n"), &[], None),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::resolve(Some("no equals sign\n"), &[], None),
            Err(Error::Config(_))
        ));
        // Validation still runs on the merged result.
        assert!(RunConfig::resolve(Some("heads=5\n"), &[], None).is_err());
        assert!(RunConfig::resolve(Some("epochs=5\n"), &[], None).is_err()); // milestones 50,80
    }

    #[test]
    fn overrides_beat_file_and_fallback_seed_is_last() {
        let text = "epochs=10\nmilestones=\nseed=7\n";
        let over = vec![("epochs".to_string(), "20".to_string())];
        let cfg = RunConfig::resolve(Some(text), &over, Some(99)).unwrap();
        assert_eq!(cfg.train.epochs, 20);
        assert_eq!(cfg.seed(), 7); // file seed beats the fallback

        let text = "epochs=10\nmilestones=\n";
        let cfg = RunConfig::resolve(Some(text), &[], Some(99)).unwrap();
        assert_eq!(cfg.seed(), 99); // fallback used when nothing sets seed

        let over = vec![("seed".to_string(), "3".to_string())];
        let cfg = RunConfig::resolve(Some(text), &over, Some(99)).unwrap();
        assert_eq!(cfg.seed(), 3); // override beats the fallback
    }

    #[test]
    fn resolved_echo_round_trips() {
        let text = "preset=c-vidtr-s\nepochs=60\nmilestones=30,48\nlr=0.003\n";
        let cfg = RunConfig::resolve(Some(text), &[], None).unwrap();
        let echo = cfg.resolved();
        let back = RunConfig::resolve(Some(&echo), &[], None).unwrap();
        assert_eq!(back.model, cfg.model);
        assert_eq!(back.model.factorization, Factorization::Separable);
        assert_eq!(back.train.epochs, 60);
        assert_eq!(back.train.milestones, vec![30, 48]);
        assert_eq!(back.train.lr, 0.003);
        assert_eq!(back.resolved(), echo);
    }
}
