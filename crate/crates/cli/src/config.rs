//! Experiment configuration: a sectioned key=value text file with every
//! default embedded, parseable and dumpable without loss.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};

use domainpriv_core::corpus::CorpusSpec;
use domainpriv_core::lm::{GenerationConfig, LmDims};
use domainpriv_core::optim::{AdamWConfig, DpConfig};
use domainpriv_core::policy::ClassifierConfig;
use domainpriv_core::trainer::ScheduleKind;
use domainpriv_core::vocab::Vocabulary;

/// Which policy families a run exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyChoice {
    Keyword,
    Classifier,
    Both,
}

impl PolicyChoice {
    pub fn families(self) -> Vec<&'static str> {
        match self {
            PolicyChoice::Keyword => vec!["keyword"],
            PolicyChoice::Classifier => vec!["classifier"],
            PolicyChoice::Both => vec!["keyword", "classifier"],
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            PolicyChoice::Keyword => "keyword",
            PolicyChoice::Classifier => "classifier",
            PolicyChoice::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Result<PolicyChoice> {
        match s {
            "keyword" => Ok(PolicyChoice::Keyword),
            "classifier" => Ok(PolicyChoice::Classifier),
            "both" => Ok(PolicyChoice::Both),
            other => bail!("unknown policy choice '{other}' (keyword|classifier|both)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    // [corpus]
    pub dialogs_per_domain: usize,
    pub min_turns: usize,
    pub max_turns: usize,
    pub chunk_len: usize,

    // [model]
    pub window: usize,
    pub embed: usize,
    pub hidden: usize,

    // [optim]
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,

    // [dp]
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    /// 0 means "derive as batch_size / n_train_chunks".
    pub sampling_rate: f64,
    pub delta: f64,

    // [train]
    pub steps: usize,
    pub schedule: String,
    pub eta: f64,

    // [policy]
    pub policy: PolicyChoice,
    pub classifier_window: usize,
    pub classifier_epochs: usize,
    pub classifier_lr: f64,
    pub threshold: f64,
    pub tune_thresholds: bool,
    pub lexicon_dir: Option<PathBuf>,

    // [attack]
    pub attack_domain: String,
    pub n_prompts: usize,
    pub gens_per_prompt: usize,
    pub max_new_tokens: usize,
    pub temperature: f64,

    // [run]
    pub master_seed: u64,
    pub no_domain_tokens: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dialogs_per_domain: 60,
            min_turns: 4,
            max_turns: 8,
            chunk_len: 64,
            window: 8,
            embed: 32,
            hidden: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 8,
            clip_norm: 1.0,
            noise_multiplier: 1.0,
            sampling_rate: 0.0,
            delta: 1e-5,
            steps: 2000,
            schedule: "expconcave".to_string(),
            eta: 4.0,
            policy: PolicyChoice::Both,
            classifier_window: 8,
            classifier_epochs: 300,
            classifier_lr: 1.0,
            threshold: 0.7,
            tune_thresholds: true,
            lexicon_dir: None,
            attack_domain: "AIRLINE".to_string(),
            n_prompts: 100,
            gens_per_prompt: 10,
            max_new_tokens: 24,
            temperature: 1.0,
            master_seed: 0,
            no_domain_tokens: false,
        }
    }
}

impl ExperimentConfig {
    /// Parse the sectioned key=value format over the defaults. Unknown
    /// sections or keys are errors so typos cannot silently disappear.
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| anyhow!("line {}: unterminated section header", lineno + 1))?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value", lineno + 1))?;
            let key = key.trim();
            let value = value.trim();
            cfg.set(&section, key, value)
                .with_context(|| format!("line {}", lineno + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        ExperimentConfig::parse(&text)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        macro_rules! num {
            () => {
                value.parse().map_err(|e| anyhow!("{key} = {value}: {e}"))?
            };
        }
        match (section, key) {
            ("corpus", "dialogs_per_domain") => self.dialogs_per_domain = num!(),
            ("corpus", "min_turns") => self.min_turns = num!(),
            ("corpus", "max_turns") => self.max_turns = num!(),
            ("corpus", "chunk_len") => self.chunk_len = num!(),
            ("model", "window") => self.window = num!(),
            ("model", "embed") => self.embed = num!(),
            ("model", "hidden") => self.hidden = num!(),
            ("optim", "learning_rate") => self.learning_rate = num!(),
            ("optim", "beta1") => self.beta1 = num!(),
            ("optim", "beta2") => self.beta2 = num!(),
            ("optim", "adam_eps") => self.adam_eps = num!(),
            ("optim", "weight_decay") => self.weight_decay = num!(),
            ("optim", "batch_size") => self.batch_size = num!(),
            ("dp", "clip_norm") => self.clip_norm = num!(),
            ("dp", "noise_multiplier") => self.noise_multiplier = num!(),
            ("dp", "sampling_rate") => self.sampling_rate = num!(),
            ("dp", "delta") => self.delta = num!(),
            ("train", "steps") => self.steps = num!(),
            ("train", "schedule") => self.schedule = value.to_string(),
            ("train", "eta") => self.eta = num!(),
            ("policy", "kind") => self.policy = PolicyChoice::parse(value)?,
            ("policy", "classifier_window") => self.classifier_window = num!(),
            ("policy", "classifier_epochs") => self.classifier_epochs = num!(),
            ("policy", "classifier_lr") => self.classifier_lr = num!(),
            ("policy", "threshold") => self.threshold = num!(),
            ("policy", "tune_thresholds") => self.tune_thresholds = num!(),
            ("policy", "lexicon_dir") => {
                self.lexicon_dir = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            ("attack", "source_domain") => self.attack_domain = value.to_string(),
            ("attack", "prompts") => self.n_prompts = num!(),
            ("attack", "gens_per_prompt") => self.gens_per_prompt = num!(),
            ("attack", "max_new_tokens") => self.max_new_tokens = num!(),
            ("attack", "temperature") => self.temperature = num!(),
            ("run", "master_seed") => self.master_seed = num!(),
            ("run", "no_domain_tokens") => self.no_domain_tokens = num!(),
            _ => bail!("unknown config key [{section}] {key}"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_turns == 0 || self.min_turns > self.max_turns {
            bail!("bad turns range ({}, {})", self.min_turns, self.max_turns);
        }
        if self.chunk_len < 2 {
            bail!("chunk_len must be >= 2");
        }
        if self.steps < 2 {
            bail!("train steps must be >= 2");
        }
        self.schedule_kind()?;
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            bail!("temperature must be > 0");
        }
        if self.threshold.is_nan() || self.threshold <= 0.0 || self.threshold >= 1.0 {
            bail!("threshold must be in (0, 1)");
        }
        Ok(())
    }

    pub fn schedule_kind(&self) -> Result<ScheduleKind> {
        match self.schedule.as_str() {
            "step" => Ok(ScheduleKind::Step),
            "linear" => Ok(ScheduleKind::Linear),
            "expconvex" => Ok(ScheduleKind::ExpConvex { eta: self.eta }),
            "expconcave" => Ok(ScheduleKind::ExpConcave { eta: self.eta }),
            other => bail!("unknown schedule '{other}' (step|linear|expconvex|expconcave)"),
        }
    }

    /// Canonical dump: same section/key order every time, so the config
    /// hash is stable.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let mut kv: Vec<(&str, BTreeMap<&str, String>)> = vec![(
            "corpus",
            BTreeMap::from([
                ("dialogs_per_domain", self.dialogs_per_domain.to_string()),
                ("min_turns", self.min_turns.to_string()),
                ("max_turns", self.max_turns.to_string()),
                ("chunk_len", self.chunk_len.to_string()),
            ]),
        )];
        kv.push((
            "model",
            BTreeMap::from([
                ("window", self.window.to_string()),
                ("embed", self.embed.to_string()),
                ("hidden", self.hidden.to_string()),
            ]),
        ));
        kv.push((
            "optim",
            BTreeMap::from([
                ("learning_rate", self.learning_rate.to_string()),
                ("beta1", self.beta1.to_string()),
                ("beta2", self.beta2.to_string()),
                ("adam_eps", self.adam_eps.to_string()),
                ("weight_decay", self.weight_decay.to_string()),
                ("batch_size", self.batch_size.to_string()),
            ]),
        ));
        kv.push((
            "dp",
            BTreeMap::from([
                ("clip_norm", self.clip_norm.to_string()),
                ("noise_multiplier", self.noise_multiplier.to_string()),
                ("sampling_rate", self.sampling_rate.to_string()),
                ("delta", self.delta.to_string()),
            ]),
        ));
        kv.push((
            "train",
            BTreeMap::from([
                ("steps", self.steps.to_string()),
                ("schedule", self.schedule.clone()),
                ("eta", self.eta.to_string()),
            ]),
        ));
        kv.push((
            "policy",
            BTreeMap::from([
                ("kind", self.policy.as_str().to_string()),
                ("classifier_window", self.classifier_window.to_string()),
                ("classifier_epochs", self.classifier_epochs.to_string()),
                ("classifier_lr", self.classifier_lr.to_string()),
                ("threshold", self.threshold.to_string()),
                ("tune_thresholds", self.tune_thresholds.to_string()),
                (
                    "lexicon_dir",
                    self.lexicon_dir
                        .as_ref()
                        .map(|p| p.display().to_string())
                        .unwrap_or_default(),
                ),
            ]),
        ));
        kv.push((
            "attack",
            BTreeMap::from([
                ("source_domain", self.attack_domain.clone()),
                ("prompts", self.n_prompts.to_string()),
                ("gens_per_prompt", self.gens_per_prompt.to_string()),
                ("max_new_tokens", self.max_new_tokens.to_string()),
                ("temperature", self.temperature.to_string()),
            ]),
        ));
        kv.push((
            "run",
            BTreeMap::from([
                ("master_seed", self.master_seed.to_string()),
                ("no_domain_tokens", self.no_domain_tokens.to_string()),
            ]),
        ));
        for (section, entries) in kv {
            let _ = writeln!(out, "[{section}]");
            for (k, v) in entries {
                let _ = writeln!(out, "{k} = {v}");
            }
            let _ = writeln!(out);
        }
        out
    }

    /// Corpus recipe for this config (embedded default domains, overridden
    /// turn counts and seed).
    pub fn corpus_spec(&self) -> CorpusSpec {
        let mut spec = CorpusSpec::default_spec();
        spec.dialogs_per_domain = self.dialogs_per_domain;
        spec.turns_per_dialog = (self.min_turns, self.max_turns);
        spec.seed = domainpriv_core::seeding::derive(self.master_seed, "corpus", 0);
        spec
    }

    pub fn lm_dims(&self, vocab_size: usize) -> LmDims {
        LmDims {
            vocab: vocab_size,
            window: self.window,
            embed: self.embed,
            hidden: self.hidden,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    /// DP settings with the sampling rate resolved against the realized
    /// training-set size when the config leaves it on auto.
    pub fn dp_config(&self, n_train: usize) -> DpConfig {
        let q = if self.sampling_rate > 0.0 {
            self.sampling_rate
        } else {
            (self.batch_size as f64 / n_train.max(1) as f64).min(1.0)
        };
        DpConfig {
            clip_norm: self.clip_norm,
            noise_multiplier: self.noise_multiplier,
            sampling_rate: q,
            seed: domainpriv_core::seeding::derive(self.master_seed, "dp", 0),
            delta: self.delta,
        }
    }

    pub fn classifier_config(&self) -> ClassifierConfig {
        ClassifierConfig {
            window: self.classifier_window,
            epochs: self.classifier_epochs,
            learning_rate: self.classifier_lr,
            l2: 1e-5,
            seed: domainpriv_core::seeding::derive(self.master_seed, "classifier", 0),
        }
    }

    pub fn generation_config(&self, vocab: &Vocabulary) -> GenerationConfig {
        GenerationConfig {
            max_new_tokens: self.max_new_tokens,
            temperature: self.temperature,
            seed: 0,
            stop_tokens: vocab.stop_token_ids(),
            suppressed_tokens: vec![domainpriv_core::vocab::REDACTED_ID],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_dump_and_parse() {
        let cfg = ExperimentConfig::default();
        let text = cfg.dump();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back.dump(), text);
    }

    #[test]
    fn parse_overrides_and_comments() {
        let text = "# experiment\n[train]\nsteps = 500 # shorter\n\n[run]\nmaster_seed = 9\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.steps, 500);
        assert_eq!(cfg.master_seed, 9);
        assert_eq!(cfg.batch_size, ExperimentConfig::default().batch_size);
    }

    #[test]
    fn unknown_key_is_an_error() {
        assert!(ExperimentConfig::parse("[train]\nstepz = 5\n").is_err());
        assert!(ExperimentConfig::parse("[nope]\nsteps = 5\n").is_err());
    }

    #[test]
    fn bad_values_are_errors() {
        assert!(ExperimentConfig::parse("[train]\nsteps = 1\n").is_err());
        assert!(ExperimentConfig::parse("[train]\nschedule = bogus\n").is_err());
        assert!(ExperimentConfig::parse("[attack]\ntemperature = 0\n").is_err());
    }

    #[test]
    fn auto_sampling_rate_uses_train_size() {
        let cfg = ExperimentConfig::default();
        let dp = cfg.dp_config(160);
        assert!((dp.sampling_rate - 8.0 / 160.0).abs() < 1e-12);
        let mut fixed = cfg.clone();
        fixed.sampling_rate = 0.25;
        assert_eq!(fixed.dp_config(160).sampling_rate, 0.25);
    }
}
