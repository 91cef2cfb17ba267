//! Subcommand implementations and the end-to-end run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};

use domainpriv_core::attack::eval_ppl;
use domainpriv_core::corpus::{save_jsonl_file, TokenSequence};
use domainpriv_core::lm::TinyLmParams;
use domainpriv_core::policy::DomainClassifier;
use domainpriv_core::vocab::DomainId;

use crate::config::ExperimentConfig;
use crate::pipeline::{
    attack_config, build_classifier, classifier_path, family_policies, gen_corpus_stage,
    load_model, load_run_record, model_matrix, prepare, redacted_dialogs, redacted_train_split,
    run_attack_cell, run_domain_privacy_estimate, train_one, ModelKey, Prepared,
};
use crate::report::{
    write_attack_summary, write_domain_privacy_csv, write_plot_data, write_results_csv,
    write_transcript, AttackSummaryRow, ResultRow, RunManifest,
};

pub fn gen_corpus(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let prepared = prepare(cfg, out)?;
    let files = gen_corpus_stage(&prepared, out)?;
    for f in &files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

/// Load the classifier snapshot if present; otherwise build one. Tuned
/// thresholds need the public and domain_only snapshots; without them the
/// configured default threshold applies.
fn classifier_for(prepared: &Prepared, out: &Path) -> Result<DomainClassifier> {
    let path = classifier_path(out);
    if path.exists() {
        let file = fs::File::open(&path)?;
        return DomainClassifier::load_json(std::io::BufReader::new(file))
            .map_err(|e| anyhow!("{e}"));
    }
    let public = load_model(out, &ModelKey::shared("public")).ok();
    let domain_only = load_model(out, &ModelKey::shared("domain_only")).ok();
    if prepared.cfg.tune_thresholds && (public.is_none() || domain_only.is_none()) {
        bail!(
            "threshold tuning needs the public and domain_only models on disk; \
             run `train --plan public` and `train --plan domain-only` first, or set \
             [policy] tune_thresholds = false"
        );
    }
    build_classifier(prepared, out, public.as_ref(), domain_only.as_ref())
        .map_err(|e| anyhow!("{e}"))
}

pub fn redact_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let prepared = prepare(cfg, out)?;
    for family in cfg.policy.families() {
        let classifier = if family == "classifier" {
            Some(classifier_for(&prepared, out)?)
        } else {
            None
        };
        let policies = family_policies(&prepared, family, classifier.as_ref())?;
        let dialogs = redacted_dialogs(&prepared, &policies)?;
        let path = out.join(format!("redacted_{family}.jsonl"));
        save_jsonl_file(&dialogs, &prepared.spec.domain_names(), &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn normalize_alias(name: &str) -> String {
    name.replace('-', "_")
}

/// Redacted train splits per requested family, tuning/loading the
/// classifier as needed.
fn redacted_splits(
    prepared: &Prepared,
    out: &Path,
    families: &[&str],
) -> Result<BTreeMap<String, Vec<TokenSequence>>> {
    let mut map = BTreeMap::new();
    for family in families {
        let classifier = if *family == "classifier" {
            Some(classifier_for(prepared, out)?)
        } else {
            None
        };
        let policies = family_policies(prepared, family, classifier.as_ref())?;
        map.insert(
            family.to_string(),
            redacted_train_split(prepared, &policies)?,
        );
    }
    Ok(map)
}

pub fn train_cmd(cfg: &ExperimentConfig, out: &Path, plan: &str) -> Result<()> {
    fs::create_dir_all(out)?;
    let prepared = prepare(cfg, out)?;
    let plan = normalize_alias(plan);
    let matrix = model_matrix(&prepared);

    let keys: Vec<ModelKey> = if plan == "all" {
        matrix
    } else {
        let matched: Vec<ModelKey> = matrix.into_iter().filter(|k| k.alias == plan).collect();
        if matched.is_empty() {
            bail!("unknown plan '{plan}'");
        }
        matched
    };

    // Shared models first: threshold tuning reads public/domain_only.
    let mut ordered = keys;
    ordered.sort_by_key(|k| k.family.is_some());

    let families_needed: Vec<&str> = {
        let mut fams: Vec<&str> = ordered.iter().filter_map(|k| k.family.as_deref()).collect();
        fams.sort();
        fams.dedup();
        fams
    };

    let mut redacted: BTreeMap<String, Vec<TokenSequence>> = BTreeMap::new();
    for key in &ordered {
        if redacted.is_empty() && key.family.is_some() {
            redacted = redacted_splits(&prepared, out, &families_needed)?;
        }
        let started = Instant::now();
        let trained = train_one(&prepared, key, &redacted, out)?;
        println!(
            "trained {:<28} eps={:<12} dp_steps={:<6} ({:.1}s)",
            key.file_stem(),
            if trained.spend.epsilon.is_infinite() {
                "inf".to_string()
            } else {
                format!("{:.4}", trained.spend.epsilon)
            },
            trained.spend.dp_steps,
            started.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

fn eval_path(out: &Path) -> PathBuf {
    out.join("eval").join("ppl.csv")
}

pub fn eval_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let prepared = prepare(cfg, out)?;
    let mut rows = Vec::new();
    for key in model_matrix(&prepared) {
        let model = load_model(out, &key)?;
        let ppl = eval_ppl(&model, &prepared.data.test).map_err(|e| anyhow!("{e}"))?;
        rows.push((key.file_stem(), ppl));
    }
    fs::create_dir_all(out.join("eval"))?;
    let mut text = String::from("model,test_ppl\n");
    for (stem, ppl) in &rows {
        text.push_str(&format!("{stem},{ppl:.6}\n"));
        println!("{stem:<28} test_ppl {ppl:.3}");
    }
    fs::write(eval_path(out), text)?;
    Ok(())
}

fn read_eval(out: &Path) -> Result<BTreeMap<String, f64>> {
    let text = fs::read_to_string(eval_path(out))
        .with_context(|| "eval/ppl.csv missing; run `eval` first")?;
    let mut map = BTreeMap::new();
    for line in text.lines().skip(1) {
        if let Some((stem, ppl)) = line.split_once(',') {
            map.insert(stem.to_string(), ppl.parse()?);
        }
    }
    Ok(map)
}

/// Targets of the attack matrix: every trained model except references.
fn attack_targets(prepared: &Prepared) -> Vec<ModelKey> {
    model_matrix(prepared)
        .into_iter()
        .filter(|k| !k.alias.starts_with("ref_no_"))
        .collect()
}

fn summary_path(out: &Path) -> PathBuf {
    out.join("attacks").join("summary.csv")
}

pub fn attack_cmd(cfg: &ExperimentConfig, out: &Path, target_filter: Option<&str>) -> Result<()> {
    let prepared = prepare(cfg, out)?;
    let acfg = attack_config(&prepared);
    let attacks_dir = out.join("attacks");
    fs::create_dir_all(&attacks_dir)?;

    let references: BTreeMap<DomainId, TinyLmParams> = prepared
        .foreign_domains
        .iter()
        .map(|&d| {
            let key = ModelKey::shared(&format!("ref_no_{}", prepared.vocab.domain_name(d)));
            load_model(out, &key).map(|m| (d, m))
        })
        .collect::<Result<_>>()?;

    let filter = target_filter.map(normalize_alias);
    let mut summary: Vec<AttackSummaryRow> = Vec::new();
    let mut estimates = Vec::new();

    for family in cfg.policy.families() {
        let classifier = if family == "classifier" {
            Some(classifier_for(&prepared, out)?)
        } else {
            None
        };
        let policies = family_policies(&prepared, family, classifier.as_ref())?;
        for key in attack_targets(&prepared) {
            // family-bound targets only attack under their own family
            if let Some(f) = &key.family {
                if f != family {
                    continue;
                }
            }
            if let Some(f) = &filter {
                if key.alias != *f {
                    continue;
                }
            }
            let target = load_model(out, &key)?;
            for &foreign in &prepared.foreign_domains {
                let reference = &references[&foreign];
                let report = run_attack_cell(
                    &prepared,
                    &target,
                    reference,
                    foreign,
                    &policies[foreign.0],
                    &acfg,
                )?;
                let foreign_name = prepared.vocab.domain_name(foreign).to_string();
                let transcript = attacks_dir.join(format!(
                    "{}__{}__vs_{}.jsonl",
                    key.file_stem(),
                    family,
                    foreign_name
                ));
                write_transcript(&report, &prepared.vocab, &transcript)?;
                println!(
                    "attack {:<28} policy={:<10} foreign={:<10} rate={}",
                    key.file_stem(),
                    family,
                    foreign_name,
                    report
                        .success_rate
                        .map(|r| format!("{r:.3}"))
                        .unwrap_or_else(|| "n/a".into())
                );
                summary.push(AttackSummaryRow {
                    target: key.file_stem(),
                    policy: family.to_string(),
                    source_domain: prepared
                        .vocab
                        .domain_name(prepared.source_domain)
                        .to_string(),
                    foreign_domain: foreign_name,
                    success_count: report.success_count,
                    non_empty_count: report.non_empty_count,
                    success_rate: report.success_rate,
                });
            }

            // The leak-ratio estimator needs a reference with the same
            // recipe as the target; the stock references are public-recipe
            // models, so the estimate runs for the public target.
            if key.alias == "public" {
                for &foreign in &prepared.foreign_domains {
                    let est = run_domain_privacy_estimate(
                        &prepared,
                        &target,
                        &references[&foreign],
                        foreign,
                        &policies[foreign.0],
                        &acfg,
                    )?;
                    estimates.push((key.file_stem(), family.to_string(), est));
                }
            }
        }
    }

    if filter.is_none() {
        write_attack_summary(&summary, &summary_path(out))?;
        write_domain_privacy_csv(&estimates, &prepared.vocab, &out.join("domain_privacy.csv"))?;
    }
    Ok(())
}

fn read_attack_summary(out: &Path) -> Result<Vec<AttackSummaryRow>> {
    let text = fs::read_to_string(summary_path(out))
        .with_context(|| "attacks/summary.csv missing; run `attack` first")?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            continue;
        }
        rows.push(AttackSummaryRow {
            target: parts[0].to_string(),
            policy: parts[1].to_string(),
            source_domain: parts[2].to_string(),
            foreign_domain: parts[3].to_string(),
            success_count: parts[4].parse()?,
            non_empty_count: parts[5].parse()?,
            success_rate: if parts[6].is_empty() {
                None
            } else {
                Some(parts[6].parse()?)
            },
        });
    }
    Ok(rows)
}

pub fn build_result_rows(prepared: &Prepared, out: &Path) -> Result<Vec<ResultRow>> {
    let ppl = read_eval(out)?;
    let summary = read_attack_summary(out)?;
    let mut rows = Vec::new();
    for family in prepared.cfg.policy.families() {
        for key in attack_targets(prepared) {
            if let Some(f) = &key.family {
                if f != family {
                    continue;
                }
            }
            let stem = key.file_stem();
            let record = load_run_record(out, &key)?;
            let spend = record.recompute_spend()?;
            let mut lira_rates = BTreeMap::new();
            for &foreign in &prepared.foreign_domains {
                let name = prepared.vocab.domain_name(foreign).to_string();
                let rate = summary
                    .iter()
                    .find(|r| r.target == stem && r.policy == family && r.foreign_domain == name)
                    .ok_or_else(|| anyhow!("no attack summary for {stem}/{family}/{name}"))?
                    .success_rate;
                lira_rates.insert(name, rate);
            }
            rows.push(ResultRow {
                model: key.alias.clone(),
                policy: family.to_string(),
                test_ppl: *ppl
                    .get(&stem)
                    .ok_or_else(|| anyhow!("no eval entry for {stem}"))?,
                lira_rates,
                epsilon: spend.epsilon,
                delta: record.delta,
                best_alpha: spend.best_order,
                dp_steps: spend.dp_steps,
                cost_tag: match key.alias.as_str() {
                    "jft" => "2x".to_string(),
                    _ => "1x".to_string(),
                },
            });
        }
    }
    Ok(rows)
}

pub fn report_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let prepared = prepare(cfg, out)?;
    let rows = build_result_rows(&prepared, out)?;
    let foreign_names: Vec<String> = prepared
        .foreign_domains
        .iter()
        .map(|&d| prepared.vocab.domain_name(d).to_string())
        .collect();
    let results = out.join("results.csv");
    write_results_csv(&rows, &foreign_names, &results)?;
    let (fig1, fig2) = write_plot_data(&rows, out)?;
    println!("wrote {}", results.display());
    println!("wrote {}", fig1.display());
    println!("wrote {}", fig2.display());
    Ok(())
}

/// Every stage in order, with a manifest over the produced files.
pub fn run_all(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut manifest = RunManifest::new(&cfg.dump(), cfg.master_seed);
    let stage =
        |name: &str, manifest: &mut RunManifest, f: &mut dyn FnMut() -> Result<()>| -> Result<()> {
            let started = Instant::now();
            f().with_context(|| format!("stage {name} (master_seed {})", cfg.master_seed))?;
            let secs = started.elapsed().as_secs_f64();
            manifest.record_stage(name, secs);
            println!("stage {name} done in {secs:.1}s");
            Ok(())
        };

    stage("gen-corpus", &mut manifest, &mut || {
        let prepared = prepare(cfg, out)?;
        gen_corpus_stage(&prepared, out)?;
        Ok(())
    })?;
    stage("train", &mut manifest, &mut || train_cmd(cfg, out, "all"))?;
    stage("redact", &mut manifest, &mut || redact_cmd(cfg, out))?;
    stage("eval", &mut manifest, &mut || eval_cmd(cfg, out))?;
    stage("attack", &mut manifest, &mut || attack_cmd(cfg, out, None))?;
    stage("report", &mut manifest, &mut || report_cmd(cfg, out))?;

    for entry in walk_files(out)? {
        if entry
            .file_name()
            .map(|n| n == "manifest.json")
            .unwrap_or(false)
        {
            continue;
        }
        manifest.record_file(out, &entry)?;
    }
    manifest.finalize();
    manifest.save(&out.join("manifest.json"))?;
    println!("wrote {}", out.join("manifest.json").display());
    Ok(())
}

fn walk_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let mut entries: Vec<PathBuf> = fs::read_dir(&d)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for path in entries {
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}
