//! Result rows, plot-data CSVs, attack transcripts, and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use domainpriv_core::attack::{DomainPrivacyEstimate, LiraReport};
use domainpriv_core::vocab::Vocabulary;

pub const RESULTS_SCHEMA_VERSION: &str = "v1";

/// One row of `results.csv`: a (model, policy) cell of the matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRow {
    pub model: String,
    pub policy: String,
    pub test_ppl: f64,
    /// LiRa success rate per foreign domain, keyed by domain name.
    pub lira_rates: BTreeMap<String, Option<f64>>,
    pub epsilon: f64,
    pub delta: f64,
    /// Order that minimized the conversion; absent for the sentinels.
    pub best_alpha: Option<f64>,
    pub dp_steps: usize,
    pub cost_tag: String,
}

impl ResultRow {
    pub fn mean_rate(&self) -> Option<f64> {
        let rates: Vec<f64> = self.lira_rates.values().flatten().copied().collect();
        if rates.is_empty() {
            None
        } else {
            Some(rates.iter().sum::<f64>() / rates.len() as f64)
        }
    }

    /// Sentinel formatting: "inf" for no guarantee, "0" for the ideal one.
    pub fn epsilon_display(&self) -> String {
        if self.epsilon.is_infinite() {
            "inf".to_string()
        } else if self.epsilon == 0.0 {
            "0".to_string()
        } else {
            format!("{:.6}", self.epsilon)
        }
    }

    fn epsilon_numeric(&self) -> String {
        if self.epsilon.is_infinite() {
            String::new()
        } else {
            format!("{:.6}", self.epsilon)
        }
    }
}

fn fmt_rate(rate: Option<f64>) -> String {
    rate.map(|r| format!("{r:.6}")).unwrap_or_default()
}

/// Fixed, versioned column set. The epsilon sentinels live in
/// `eps_display` ("inf" / "0" / decimal); `eps` is numeric and empty for
/// the infinite case.
pub fn write_results_csv(rows: &[ResultRow], foreign_names: &[String], path: &Path) -> Result<()> {
    let mut text = String::new();
    text.push_str("schema_version,model,policy,test_ppl,lira_rate_mean");
    for name in foreign_names {
        text.push_str(&format!(",lira_rate_{name}"));
    }
    text.push_str(",eps,eps_display,delta,best_alpha,dp_steps,cost_tag\n");
    for row in rows {
        text.push_str(&format!(
            "{},{},{},{:.6},{}",
            RESULTS_SCHEMA_VERSION,
            row.model,
            row.policy,
            row.test_ppl,
            fmt_rate(row.mean_rate()),
        ));
        for name in foreign_names {
            let rate = row.lira_rates.get(name).copied().flatten();
            text.push_str(&format!(",{}", fmt_rate(rate)));
        }
        text.push_str(&format!(
            ",{},{},{},{},{},{}\n",
            row.epsilon_numeric(),
            row.epsilon_display(),
            row.delta,
            row.best_alpha.map(|a| a.to_string()).unwrap_or_default(),
            row.dp_steps,
            row.cost_tag
        ));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Scatter data behind the two headline figures: success rate vs test
/// perplexity, and epsilon vs test perplexity (with the infinite spend in
/// a sentinel column so finite-axis plots can drop it).
pub fn write_plot_data(rows: &[ResultRow], out: &Path) -> Result<(PathBuf, PathBuf)> {
    let fig1 = out.join("fig1_rate_vs_ppl.csv");
    let mut text = String::from("series,test_ppl,lira_rate\n");
    for row in rows {
        if let Some(rate) = row.mean_rate() {
            text.push_str(&format!(
                "{}__{},{:.6},{:.6}\n",
                row.model, row.policy, row.test_ppl, rate
            ));
        }
    }
    fs::write(&fig1, text)?;

    let fig2 = out.join("fig2_eps_vs_ppl.csv");
    let mut text = String::from("series,test_ppl,eps,eps_display\n");
    for row in rows {
        text.push_str(&format!(
            "{}__{},{:.6},{},{}\n",
            row.model,
            row.policy,
            row.test_ppl,
            row.epsilon_numeric(),
            row.epsilon_display()
        ));
    }
    fs::write(&fig2, text)?;
    Ok((fig1, fig2))
}

/// One transcript record per generation, decoded for inspection. Records
/// keep the report's descending-score order, so the head of the file is
/// the high-confidence slice of the attack.
pub fn write_transcript(report: &LiraReport, vocab: &Vocabulary, path: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Record {
        score: Option<f64>,
        context: String,
        output: String,
        flags: BTreeMap<String, bool>,
        empty: bool,
    }
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    for g in &report.generations {
        let decode = |ids: &[u32]| -> String {
            ids.iter()
                .map(|&t| vocab.token(t).unwrap_or("<?>"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let rec = Record {
            score: g.score,
            context: decode(&g.context),
            output: decode(&g.output),
            flags: g
                .leak_flags
                .iter()
                .map(|(d, f)| (vocab.domain_name(*d).to_string(), *f))
                .collect(),
            empty: g.empty,
        };
        serde_json::to_writer(&mut file, &rec)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Summary row per (target, policy, domain pair).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSummaryRow {
    pub target: String,
    pub policy: String,
    pub source_domain: String,
    pub foreign_domain: String,
    pub success_count: usize,
    pub non_empty_count: usize,
    pub success_rate: Option<f64>,
}

pub fn write_attack_summary(rows: &[AttackSummaryRow], path: &Path) -> Result<()> {
    let mut text = String::from(
        "target,policy,source_domain,foreign_domain,success_count,non_empty_count,success_rate\n",
    );
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.target,
            r.policy,
            r.source_domain,
            r.foreign_domain,
            r.success_count,
            r.non_empty_count,
            fmt_rate(r.success_rate)
        ));
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn write_domain_privacy_csv(
    estimates: &[(String, String, DomainPrivacyEstimate)],
    vocab: &Vocabulary,
    path: &Path,
) -> Result<()> {
    let mut text = String::from(
        "target,policy,source_domain,foreign_domain,p_target,p_reference,c_hat,\
         target_leaks,reference_leaks,target_samples,reference_samples,indeterminate\n",
    );
    for (target, policy, e) in estimates {
        text.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{},{},{},{},{}\n",
            target,
            policy,
            vocab.domain_name(e.source_domain),
            vocab.domain_name(e.foreign_domain),
            e.p_target,
            e.p_reference,
            e.c_hat,
            e.target_leaks,
            e.reference_leaks,
            e.target_samples,
            e.reference_samples,
            e.indeterminate
        ));
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn file_checksum(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Reproducibility record for one run: config hash, per-stage seeds and
/// wall clocks, and a checksum inventory of every produced file. The
/// `determinism_digest` hashes (config hash + sorted inventory) and is
/// stable across reruns; wall clocks are informational only.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub results_schema: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub stage_seconds: BTreeMap<String, f64>,
    pub files: BTreeMap<String, String>,
    pub determinism_digest: String,
}

impl RunManifest {
    pub fn new(config_text: &str, master_seed: u64) -> RunManifest {
        RunManifest {
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            results_schema: RESULTS_SCHEMA_VERSION.to_string(),
            config_hash: sha256_hex(config_text.as_bytes()),
            master_seed,
            stage_seconds: BTreeMap::new(),
            files: BTreeMap::new(),
            determinism_digest: String::new(),
        }
    }

    pub fn record_stage(&mut self, name: &str, seconds: f64) {
        self.stage_seconds.insert(name.to_string(), seconds);
    }

    pub fn record_file(&mut self, out: &Path, path: &Path) -> Result<()> {
        let rel = path.strip_prefix(out).unwrap_or(path).display().to_string();
        self.files.insert(rel, file_checksum(path)?);
        Ok(())
    }

    pub fn finalize(&mut self) {
        let mut acc = self.config_hash.clone();
        for (name, sum) in &self.files {
            acc.push_str(name);
            acc.push_str(sum);
        }
        self.determinism_digest = sha256_hex(acc.as_bytes());
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }
}
