//! Experiment stages: corpus generation, policy construction and
//! threshold tuning, the training matrix, perplexity evaluation, attacks,
//! and the domain-privacy estimates. Every stage is a deterministic
//! function of (config, master seed); expensive artifacts (model
//! snapshots) are written to and reloaded from the output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use domainpriv_core::accountant::{default_orders, PrivacySpend, StepKind};
use domainpriv_core::attack::{
    build_prompts, estimate_domain_privacy, lira_attack, AttackConfig, DomainPrivacyEstimate,
    LiraReport,
};
use domainpriv_core::corpus::{
    chunk, generate_synthetic, load_jsonl_file, preprocess, save_jsonl_file, split, CorpusSpec,
    Dialog, SplitCorpus, TokenSequence, Turn,
};
use domainpriv_core::lm::{self, GenerationConfig, TinyLmParams};
use domainpriv_core::optim::PrivacyEvent;
use domainpriv_core::policy::{
    redact, threshold_grid, tune_threshold, write_lexicon, ClassifierConfig, DomainClassifier,
    KeywordPolicy, Policy,
};
use domainpriv_core::seeding;
use domainpriv_core::trainer::{train_target, Recipe, StepRecord, TrainPlan, TrainedTarget};
use domainpriv_core::vocab::{DomainId, Vocabulary, REDACTED_ID, SYS_ID, USR_ID};

use crate::config::ExperimentConfig;

/// Everything derivable from the config before any training happens.
pub struct Prepared {
    pub cfg: ExperimentConfig,
    pub spec: CorpusSpec,
    pub vocab: Vocabulary,
    pub dialogs: Vec<Dialog>,
    pub data: SplitCorpus,
    pub keyword_policies: Vec<KeywordPolicy>,
    pub source_domain: DomainId,
    pub foreign_domains: Vec<DomainId>,
}

impl Prepared {
    pub fn n_train(&self) -> usize {
        self.data.train.len()
    }

    pub fn dims(&self) -> domainpriv_core::lm::LmDims {
        self.cfg.lm_dims(self.vocab.len())
    }
}

/// Load the corpus from `corpus.jsonl` when present (so hand-supplied
/// corpora are honored), otherwise generate it; then preprocess, chunk,
/// and split.
pub fn prepare(cfg: &ExperimentConfig, out: &Path) -> Result<Prepared> {
    let spec = cfg.corpus_spec();
    let names = spec.domain_names();
    let corpus_path = out.join("corpus.jsonl");
    let dialogs = if corpus_path.exists() {
        load_jsonl_file(&corpus_path, &names)?
    } else {
        generate_synthetic(&spec)?
    };

    // Vocabulary covers the recipe's template words plus anything observed.
    let mut content: Vec<String> = spec.content_tokens();
    for d in &dialogs {
        for t in &d.turns {
            content.extend(t.tokens.iter().cloned());
        }
    }
    let vocab = Vocabulary::build(&names, content);

    let sequences: Vec<TokenSequence> = dialogs
        .iter()
        .map(|d| preprocess(d, &vocab, !cfg.no_domain_tokens))
        .collect();
    let chunks = chunk(&sequences, cfg.chunk_len)?;
    let data = split(
        &chunks,
        seeding::derive(cfg.master_seed, "split", 0),
        &names,
    )?;

    let keyword_policies = load_keyword_policies(cfg, &spec, &vocab)?;

    let source_domain = vocab
        .domain_by_name(&cfg.attack_domain)
        .ok_or_else(|| anyhow!("unknown attack source domain {}", cfg.attack_domain))?;
    let foreign_domains: Vec<DomainId> = (0..vocab.n_domains())
        .map(DomainId)
        .filter(|d| *d != source_domain)
        .collect();

    Ok(Prepared {
        cfg: cfg.clone(),
        spec,
        vocab,
        dialogs,
        data,
        keyword_policies,
        source_domain,
        foreign_domains,
    })
}

fn load_keyword_policies(
    cfg: &ExperimentConfig,
    spec: &CorpusSpec,
    vocab: &Vocabulary,
) -> Result<Vec<KeywordPolicy>> {
    let mut policies = Vec::new();
    for (i, dom) in spec.domains.iter().enumerate() {
        let tokens: Vec<String> = match &cfg.lexicon_dir {
            Some(dir) => {
                let path = dir.join(format!("{}.txt", dom.name));
                let file =
                    fs::File::open(&path).with_context(|| format!("lexicon {}", path.display()))?;
                domainpriv_core::policy::parse_lexicon(std::io::BufReader::new(file))?
            }
            None => dom.keywords.clone(),
        };
        policies.push(KeywordPolicy::from_tokens(DomainId(i), &tokens, vocab)?);
    }
    Ok(policies)
}

/// Stage 1 artifact: the corpus and the active lexicons.
pub fn gen_corpus_stage(prepared: &Prepared, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let corpus_path = out.join("corpus.jsonl");
    save_jsonl_file(
        &prepared.dialogs,
        &prepared.spec.domain_names(),
        &corpus_path,
    )?;
    written.push(corpus_path);
    let lex_dir = out.join("lexicons");
    fs::create_dir_all(&lex_dir)?;
    for (i, dom) in prepared.spec.domains.iter().enumerate() {
        let path = lex_dir.join(format!("{}.txt", dom.name));
        let mut tokens: Vec<String> = prepared.keyword_policies[i]
            .keywords
            .iter()
            .map(|&id| prepared.vocab.token(id).unwrap().to_string())
            .collect();
        tokens.sort();
        let file = fs::File::create(&path)?;
        write_lexicon(&tokens, std::io::BufWriter::new(file))?;
        written.push(path);
    }
    Ok(written)
}

/// Redact every preprocessed sequence with the union of all domains'
/// masks under one policy family.
fn redact_sequences(
    sequences: &[TokenSequence],
    policies: &[Policy],
    vocab: &Vocabulary,
) -> Result<Vec<TokenSequence>> {
    let mut out = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let mut current = seq.clone();
        for p in policies {
            let mask = p.mask(&current, vocab)?;
            current = redact(&current, &mask)?;
        }
        out.push(current);
    }
    Ok(out)
}

/// Redacted train split for a policy family. Redaction preserves length,
/// so chunk boundaries and the split assignment line up with the raw data
/// chunk for chunk.
pub fn redacted_train_split(
    prepared: &Prepared,
    policies: &[Policy],
) -> Result<Vec<TokenSequence>> {
    let sequences: Vec<TokenSequence> = prepared
        .dialogs
        .iter()
        .map(|d| preprocess(d, &prepared.vocab, !prepared.cfg.no_domain_tokens))
        .collect();
    let redacted = redact_sequences(&sequences, policies, &prepared.vocab)?;
    let chunks = chunk(&redacted, prepared.cfg.chunk_len)?;
    let data = split(
        &chunks,
        seeding::derive(prepared.cfg.master_seed, "split", 0),
        &prepared.spec.domain_names(),
    )?;
    Ok(data.train)
}

/// Rebuild dialogs from redacted full sequences so the redacted corpus
/// can be inspected in the same JSONL schema.
pub fn redacted_dialogs(prepared: &Prepared, policies: &[Policy]) -> Result<Vec<Dialog>> {
    let vocab = &prepared.vocab;
    let mut out = Vec::with_capacity(prepared.dialogs.len());
    for dialog in &prepared.dialogs {
        let seq = preprocess(dialog, vocab, !prepared.cfg.no_domain_tokens);
        let redacted = {
            let mut current = seq;
            for p in policies {
                let mask = p.mask(&current, vocab)?;
                current = redact(&current, &mask)?;
            }
            current
        };
        let mut turns: Vec<Turn> = Vec::new();
        for &tok in &redacted.tokens {
            if tok == SYS_ID || tok == USR_ID {
                let speaker = if tok == SYS_ID {
                    domainpriv_core::corpus::Speaker::Sys
                } else {
                    domainpriv_core::corpus::Speaker::Usr
                };
                turns.push(Turn {
                    speaker,
                    tokens: Vec::new(),
                });
            } else if tok == REDACTED_ID {
                if let Some(turn) = turns.last_mut() {
                    turn.tokens.push(vocab.token(REDACTED_ID)?.to_string());
                }
            } else if !vocab.is_reserved(tok) {
                if let Some(turn) = turns.last_mut() {
                    turn.tokens.push(vocab.token(tok)?.to_string());
                }
            }
        }
        out.push(Dialog {
            domain: dialog.domain,
            turns,
        });
    }
    Ok(out)
}

/// Policy set of one family, for redaction and leak checking.
pub fn family_policies(
    prepared: &Prepared,
    family: &str,
    classifier: Option<&DomainClassifier>,
) -> Result<Vec<Policy>> {
    match family {
        "keyword" => Ok(prepared
            .keyword_policies
            .iter()
            .cloned()
            .map(Policy::Keyword)
            .collect()),
        "classifier" => {
            let clf = classifier
                .ok_or_else(|| anyhow!("classifier policy requested but no classifier built"))?;
            Ok((0..prepared.vocab.n_domains())
                .map(|d| Policy::Classifier {
                    classifier: clf.clone(),
                    domain: DomainId(d),
                })
                .collect())
        }
        other => bail!("unknown policy family {other}"),
    }
}

pub fn classifier_path(out: &Path) -> PathBuf {
    out.join("classifier.json")
}

/// Train the window classifier on the train split and optionally tune its
/// per-domain thresholds by maximizing the Public-minus-DomainOnly leak
/// rate over the grid, using fixed generations from the two models.
pub fn build_classifier(
    prepared: &Prepared,
    out: &Path,
    public: Option<&TinyLmParams>,
    domain_only: Option<&TinyLmParams>,
) -> Result<DomainClassifier> {
    let cfg = &prepared.cfg;
    let clf_cfg: ClassifierConfig = cfg.classifier_config();
    let mut clf = DomainClassifier::train(
        &prepared.data.train,
        prepared.vocab.n_domains(),
        &prepared.vocab,
        &clf_cfg,
    )?;
    clf.thresholds = vec![cfg.threshold; prepared.vocab.n_domains()];

    if cfg.tune_thresholds {
        if let (Some(public), Some(domain_only)) = (public, domain_only) {
            let gens_public = tuning_generations(prepared, public)?;
            let gens_domain_only = tuning_generations(prepared, domain_only)?;
            for domain in 0..prepared.vocab.n_domains() {
                let d = DomainId(domain);
                if d == prepared.source_domain {
                    continue; // own-domain text is fair game in prompts
                }
                let z = tune_threshold(&threshold_grid(), |z| {
                    let mut probe = clf.clone();
                    probe.thresholds = vec![z; prepared.vocab.n_domains()];
                    let rate = |gens: &[TokenSequence]| -> domainpriv_core::Result<f64> {
                        let mut hits = 0usize;
                        let mut total = 0usize;
                        for g in gens.iter().filter(|g| !g.is_empty()) {
                            total += 1;
                            if probe.mask(g, d, &prepared.vocab)?.any() {
                                hits += 1;
                            }
                        }
                        Ok(if total == 0 {
                            0.0
                        } else {
                            hits as f64 / total as f64
                        })
                    };
                    Ok((rate(&gens_public)?, rate(&gens_domain_only)?))
                })
                .map_err(|e| anyhow!("threshold tuning failed: {e}"))?;
                clf.thresholds[domain] = z;
            }
        }
    }

    let path = classifier_path(out);
    let file = fs::File::create(&path)?;
    clf.save_json(std::io::BufWriter::new(file))?;
    Ok(clf)
}

/// Fixed generations used by threshold tuning: the attack prompts, one
/// dedicated seed stream, leak policies not involved.
fn tuning_generations(prepared: &Prepared, model: &TinyLmParams) -> Result<Vec<TokenSequence>> {
    let cfg = &prepared.cfg;
    let held: Vec<&TokenSequence> = prepared.data.test.iter().collect();
    let prompts = build_prompts(
        &held,
        prepared.source_domain,
        cfg.n_prompts,
        seeding::derive(cfg.master_seed, "prompts", 0),
    )?;
    let gen_cfg: GenerationConfig = cfg.generation_config(&prepared.vocab);
    let mut out = Vec::with_capacity(prompts.len() * cfg.gens_per_prompt);
    for (p, prompt) in prompts.iter().enumerate() {
        for g in 0..cfg.gens_per_prompt {
            let seed = seeding::derive(
                cfg.master_seed,
                "tune-gen",
                (p * cfg.gens_per_prompt + g) as u64,
            );
            out.push(lm::generate(model, prompt, &gen_cfg.with_seed(seed))?);
        }
    }
    Ok(out)
}

/// One trainable entry of the experiment matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelKey {
    pub alias: String,
    /// Policy family for recipes that consume redacted data.
    pub family: Option<String>,
}

impl ModelKey {
    pub fn shared(alias: &str) -> ModelKey {
        ModelKey {
            alias: alias.to_string(),
            family: None,
        }
    }

    pub fn with_family(alias: &str, family: &str) -> ModelKey {
        ModelKey {
            alias: alias.to_string(),
            family: Some(family.to_string()),
        }
    }

    pub fn file_stem(&self) -> String {
        match &self.family {
            Some(f) => format!("{}__{}", self.alias, f),
            None => self.alias.clone(),
        }
    }
}

/// The matrix of models a full run trains: policy-independent targets and
/// references, plus one redacted-recipe set per policy family.
pub fn model_matrix(prepared: &Prepared) -> Vec<ModelKey> {
    let mut keys = vec![
        ModelKey::shared("public"),
        ModelKey::shared("domain_only"),
        ModelKey::shared("private"),
    ];
    for d in &prepared.foreign_domains {
        keys.push(ModelKey::shared(&format!(
            "ref_no_{}",
            prepared.vocab.domain_name(*d)
        )));
    }
    for family in prepared.cfg.policy.families() {
        for alias in ["pub_redacted", "jft", "jft_half", "rs"] {
            keys.push(ModelKey::with_family(alias, family));
        }
    }
    keys
}

fn recipe_for(key: &ModelKey, prepared: &Prepared) -> Result<(Recipe, Option<DomainId>)> {
    let alias = key.alias.as_str();
    if let Some(name) = alias.strip_prefix("ref_no_") {
        let d = prepared
            .vocab
            .domain_by_name(name)
            .ok_or_else(|| anyhow!("unknown reference domain {name}"))?;
        return Ok((Recipe::Public, Some(d)));
    }
    let recipe = match alias {
        "public" => Recipe::Public,
        "domain_only" => Recipe::DomainOnly(prepared.source_domain),
        "private" => Recipe::Private,
        "pub_redacted" => Recipe::PubRedacted,
        "jft" => Recipe::Jft,
        "jft_half" => Recipe::JftHalf,
        "rs" => Recipe::RedactionSchedule,
        other => bail!("unknown model alias {other}"),
    };
    Ok((recipe, None))
}

pub fn plan_for(key: &ModelKey, prepared: &Prepared) -> Result<TrainPlan> {
    let (recipe, _) = recipe_for(key, prepared)?;
    let cfg = &prepared.cfg;
    Ok(TrainPlan {
        recipe,
        steps: cfg.steps,
        schedule: if recipe == Recipe::RedactionSchedule {
            Some(cfg.schedule_kind().map_err(|e| anyhow!("{e}"))?)
        } else {
            None
        },
        policy_tag: key.family.clone(),
        batch_size: cfg.batch_size,
        optimizer: cfg.adamw(),
        dp: cfg.dp_config(prepared.n_train()),
        data_seed: seeding::derive(cfg.master_seed, "data-order", 0),
    })
}

/// Per-run accounting record saved next to each snapshot; epsilon is
/// always recomputable from it.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub key: ModelKey,
    pub step_kinds: Vec<StepKind>,
    pub events: Vec<PrivacyEvent>,
    pub delta: f64,
}

impl RunRecord {
    pub fn recompute_spend(&self) -> Result<PrivacySpend> {
        PrivacySpend::for_run(
            &self.step_kinds,
            &self.events,
            self.delta,
            &default_orders(),
        )
        .map_err(|e| anyhow!("{e}"))
    }
}

pub fn models_dir(out: &Path) -> PathBuf {
    out.join("models")
}

pub fn model_path(out: &Path, key: &ModelKey) -> PathBuf {
    models_dir(out).join(format!("{}.lmbin", key.file_stem()))
}

pub fn events_path(out: &Path, key: &ModelKey) -> PathBuf {
    models_dir(out).join(format!("{}.events.json", key.file_stem()))
}

pub fn trace_path(out: &Path, key: &ModelKey) -> PathBuf {
    models_dir(out).join(format!("{}.trace.csv", key.file_stem()))
}

fn write_trace(trace: &[StepRecord], path: &Path) -> Result<()> {
    let mut text = String::from("step,branch,loss\n");
    for r in trace {
        let branch = match r.kind {
            StepKind::PlainOnRedacted => "adamw_redacted",
            StepKind::PlainOnRaw => "adamw_raw",
            StepKind::DpOnRaw => "dp_raw",
        };
        let loss = r.loss.map(|l| format!("{l:.12}")).unwrap_or_default();
        text.push_str(&format!("{},{},{}\n", r.step, branch, loss));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Train one model of the matrix and persist snapshot, trace, and the
/// privacy-event record.
pub fn train_one(
    prepared: &Prepared,
    key: &ModelKey,
    redacted_by_family: &BTreeMap<String, Vec<TokenSequence>>,
    out: &Path,
) -> Result<TrainedTarget> {
    let (_, drop_domain) = recipe_for(key, prepared)?;
    let plan = plan_for(key, prepared)?;
    let init_seed = seeding::derive(prepared.cfg.master_seed, "init", 0);

    let trained = match drop_domain {
        Some(d) => {
            let filtered = prepared.data.without_domain(d);
            train_target(&plan, prepared.dims(), &filtered, None, init_seed)
                .map_err(|e| anyhow!("training {}: {e}", key.file_stem()))?
        }
        None => {
            let redacted = match &key.family {
                Some(f) => Some(
                    redacted_by_family
                        .get(f)
                        .ok_or_else(|| anyhow!("no redacted data for family {f}"))?
                        .as_slice(),
                ),
                None => None,
            };
            train_target(&plan, prepared.dims(), &prepared.data, redacted, init_seed)
                .map_err(|e| anyhow!("training {}: {e}", key.file_stem()))?
        }
    };

    fs::create_dir_all(models_dir(out))?;
    lm::save_params_file(&trained.params, &model_path(out, key))?;
    write_trace(&trained.trace, &trace_path(out, key))?;
    let record = RunRecord {
        key: key.clone(),
        step_kinds: trained.trace.iter().map(|r| r.kind).collect(),
        events: trained.events.clone(),
        delta: plan.dp.delta,
    };
    let file = fs::File::create(events_path(out, key))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &record)?;
    Ok(trained)
}

pub fn load_model(out: &Path, key: &ModelKey) -> Result<TinyLmParams> {
    let path = model_path(out, key);
    lm::load_params_file(&path)
        .map_err(|e| anyhow!("loading model {}: {e} (train it first?)", path.display()))
}

pub fn load_run_record(out: &Path, key: &ModelKey) -> Result<RunRecord> {
    let path = events_path(out, key);
    let file = fs::File::open(&path)
        .with_context(|| format!("run record {} (train it first?)", path.display()))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

/// Attack configuration for this experiment.
pub fn attack_config(prepared: &Prepared) -> AttackConfig {
    let cfg = &prepared.cfg;
    AttackConfig {
        source_domain: prepared.source_domain,
        n_prompts: cfg.n_prompts,
        gens_per_prompt: cfg.gens_per_prompt,
        generation: cfg.generation_config(&prepared.vocab),
        seed: seeding::derive(cfg.master_seed, "attack", 0),
    }
}

pub fn attack_prompts(prepared: &Prepared) -> Result<Vec<TokenSequence>> {
    let held: Vec<&TokenSequence> = prepared.data.test.iter().collect();
    build_prompts(
        &held,
        prepared.source_domain,
        prepared.cfg.n_prompts,
        seeding::derive(prepared.cfg.master_seed, "prompts", 0),
    )
    .map_err(|e| anyhow!("{e}"))
}

pub fn run_attack_cell(
    prepared: &Prepared,
    target: &TinyLmParams,
    reference: &TinyLmParams,
    foreign: DomainId,
    policy: &Policy,
    cfg: &AttackConfig,
) -> Result<LiraReport> {
    let prompts = attack_prompts(prepared)?;
    let foreign_policies = vec![(foreign, policy)];
    lira_attack(
        target,
        reference,
        &prompts,
        cfg,
        &foreign_policies,
        &prepared.vocab,
    )
    .map_err(|e| anyhow!("{e}"))
}

pub fn run_domain_privacy_estimate(
    prepared: &Prepared,
    target: &TinyLmParams,
    reference: &TinyLmParams,
    foreign: DomainId,
    policy: &Policy,
    cfg: &AttackConfig,
) -> Result<DomainPrivacyEstimate> {
    let prompts = attack_prompts(prepared)?;
    estimate_domain_privacy(
        target,
        reference,
        &prompts,
        foreign,
        policy,
        cfg,
        &prepared.vocab,
    )
    .map_err(|e| anyhow!("{e}"))
}
