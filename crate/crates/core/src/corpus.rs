//! Multi-domain dialog corpora: synthetic generation, control-token
//! preprocessing, fixed-length chunking, train/validation/test splitting,
//! and JSONL round trips.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;
use crate::vocab::{DomainId, TokenId, Vocabulary, EOC_ID, SOC_ID, SYS_ID, USR_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Speaker {
    Sys,
    Usr,
}

impl Speaker {
    pub fn tag(self) -> &'static str {
        match self {
            Speaker::Sys => "SYS",
            Speaker::Usr => "USR",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Speaker> {
        match tag {
            "SYS" => Ok(Speaker::Sys),
            "USR" => Ok(Speaker::Usr),
            other => Err(Error::UnknownSpeaker(other.to_string())),
        }
    }

    pub fn token_id(self) -> TokenId {
        match self {
            Speaker::Sys => SYS_ID,
            Speaker::Usr => USR_ID,
        }
    }
}

/// One turn: a speaker and its whitespace tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub tokens: Vec<String>,
}

/// A dialog belonging to a single domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialog {
    pub domain: DomainId,
    pub turns: Vec<Turn>,
}

/// An id sequence tagged with the domain it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<TokenId>,
    pub source_domain: DomainId,
}

impl TokenSequence {
    pub fn new(tokens: Vec<TokenId>, source_domain: DomainId) -> Self {
        TokenSequence {
            tokens,
            source_domain,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Keyword lexicon and name for one synthetic domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub keywords: Vec<String>,
}

/// Recipe for the synthetic corpus. Templates are whitespace patterns
/// whose `{kw}` slots draw from the dialog's own domain lexicon and
/// `{filler}` slots draw from the shared filler lexicon; all other
/// template words are literals shared across domains.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub domains: Vec<DomainSpec>,
    pub dialogs_per_domain: usize,
    pub turns_per_dialog: (usize, usize),
    pub filler: Vec<String>,
    pub templates: Vec<String>,
    pub seed: u64,
}

impl CorpusSpec {
    /// Three customer-service domains with twelve exclusive keywords each
    /// and shared greeting/filler templates.
    pub fn default_spec() -> CorpusSpec {
        let domains = vec![
            DomainSpec {
                name: "AIRLINE".to_string(),
                keywords: [
                    "flight",
                    "seat",
                    "boarding",
                    "gate",
                    "layover",
                    "runway",
                    "pilot",
                    "luggage",
                    "airfare",
                    "departure",
                    "terminal",
                    "itinerary",
                ]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            },
            DomainSpec {
                name: "MEDIA".to_string(),
                keywords: [
                    "cable",
                    "router",
                    "bandwidth",
                    "modem",
                    "channel",
                    "streaming",
                    "broadband",
                    "gigabit",
                    "subscription",
                    "outage",
                    "signal",
                    "installer",
                ]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            },
            DomainSpec {
                name: "INSURANCE".to_string(),
                keywords: [
                    "claim",
                    "ssn",
                    "premium",
                    "deductible",
                    "coverage",
                    "beneficiary",
                    "liability",
                    "adjuster",
                    "copay",
                    "underwriter",
                    "payout",
                    "appraisal",
                ]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            },
        ];
        let filler = [
            "hello", "hi", "good", "morning", "thanks", "please", "help", "me", "with", "my", "i",
            "want", "to", "know", "about", "the", "your", "you", "may", "how", "assist", "today",
            "sure", "can", "number", "name", "is", "check", "need", "update", "new", "status",
            "service", "account", "great", "ok", "yes", "welcome",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let templates = [
            "hello good morning you have reached {kw} and {kw} service how may i help with your {kw} today",
            "hi i want to know about my {kw} and the {kw} status",
            "sure i can help with your {kw} please share the {kw} number",
            "i need to update the {kw} and {kw} on my account",
            "thanks for the help with my {kw} and {kw}",
            "can you check the {kw} for my {kw} please",
            "my {filler} name is {filler} and i need help with a {kw} and a {kw}",
            "welcome may i assist with your {kw} or your {kw} today",
            "yes please update my {kw} number and my {kw} status",
            "ok great thanks for checking the {kw} and the {kw}",
            "hi there i have a {kw} question about {kw} and {kw} options",
            "good morning may i know your {filler} number to check the {kw} and the {kw}",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        CorpusSpec {
            domains,
            dialogs_per_domain: 40,
            turns_per_dialog: (4, 8),
            filler,
            templates,
            seed: 0,
        }
    }

    /// Lexicon disjointness and template well-formedness.
    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::InvalidSpec("no domains".into()));
        }
        if self.dialogs_per_domain == 0 {
            return Err(Error::InvalidSpec("dialogs_per_domain is zero".into()));
        }
        let (lo, hi) = self.turns_per_dialog;
        if lo == 0 || lo > hi {
            return Err(Error::InvalidSpec(format!(
                "bad turns_per_dialog range ({lo}, {hi})"
            )));
        }
        let mut names = HashSet::new();
        for d in &self.domains {
            if !names.insert(&d.name) {
                return Err(Error::InvalidSpec(format!("duplicate domain {}", d.name)));
            }
            if d.keywords.is_empty() {
                return Err(Error::InvalidSpec(format!(
                    "domain {} has no keywords",
                    d.name
                )));
            }
        }
        for (i, a) in self.domains.iter().enumerate() {
            let ka: HashSet<&String> = a.keywords.iter().collect();
            for b in &self.domains[i + 1..] {
                if let Some(t) = b.keywords.iter().find(|t| ka.contains(t)) {
                    return Err(Error::InvalidSpec(format!(
                        "keyword '{t}' shared by domains {} and {}",
                        a.name, b.name
                    )));
                }
            }
            if let Some(t) = self.filler.iter().find(|t| ka.contains(t)) {
                return Err(Error::InvalidSpec(format!(
                    "filler token '{t}' collides with {} keywords",
                    a.name
                )));
            }
            for tpl in &self.templates {
                for w in tpl.split_whitespace() {
                    if w != "{kw}" && w != "{filler}" && ka.contains(&w.to_string()) {
                        return Err(Error::InvalidSpec(format!(
                            "template literal '{w}' collides with {} keywords",
                            a.name
                        )));
                    }
                }
            }
        }
        if self.templates.is_empty() {
            return Err(Error::InvalidSpec("no templates".into()));
        }
        if self.filler.is_empty() {
            return Err(Error::InvalidSpec("no filler tokens".into()));
        }
        Ok(())
    }

    pub fn domain_names(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.name.clone()).collect()
    }

    /// All words that can appear in generated dialogs.
    pub fn content_tokens(&self) -> Vec<String> {
        let mut words: Vec<String> = self.filler.clone();
        for d in &self.domains {
            words.extend(d.keywords.iter().cloned());
        }
        for tpl in &self.templates {
            for w in tpl.split_whitespace() {
                if w != "{kw}" && w != "{filler}" {
                    words.push(w.to_string());
                }
            }
        }
        words.sort();
        words.dedup();
        words
    }
}

/// Generate the synthetic corpus: `dialogs_per_domain` dialogs per domain,
/// every keyword drawn from the dialog's own lexicon, deterministic in the
/// spec seed.
pub fn generate_synthetic(spec: &CorpusSpec) -> Result<Vec<Dialog>> {
    spec.validate()?;
    let mut dialogs = Vec::with_capacity(spec.domains.len() * spec.dialogs_per_domain);
    for (d_idx, domain) in spec.domains.iter().enumerate() {
        let mut rng = seeding::stream(spec.seed, "corpus", d_idx as u64);
        for _ in 0..spec.dialogs_per_domain {
            let n_turns = rng.random_range(spec.turns_per_dialog.0..=spec.turns_per_dialog.1);
            let mut turns = Vec::with_capacity(n_turns);
            for t in 0..n_turns {
                let speaker = if t % 2 == 0 {
                    Speaker::Usr
                } else {
                    Speaker::Sys
                };
                let template = &spec.templates[rng.random_range(0..spec.templates.len())];
                let tokens = template
                    .split_whitespace()
                    .map(|w| match w {
                        "{kw}" => {
                            domain.keywords[rng.random_range(0..domain.keywords.len())].clone()
                        }
                        "{filler}" => spec.filler[rng.random_range(0..spec.filler.len())].clone(),
                        lit => lit.to_string(),
                    })
                    .collect();
                turns.push(Turn { speaker, tokens });
            }
            dialogs.push(Dialog {
                domain: DomainId(d_idx),
                turns,
            });
        }
    }
    Ok(dialogs)
}

/// Build the vocabulary covering a corpus spec.
pub fn build_vocabulary(spec: &CorpusSpec) -> Vocabulary {
    Vocabulary::build(&spec.domain_names(), spec.content_tokens())
}

/// Encode one dialog: `<_soc_>`, then per turn an optional `<DOMAIN>`
/// control token, the speaker token, and the turn's words; closed by
/// `<_eoc_>`. Unknown words map to `<unk>`.
pub fn preprocess(
    dialog: &Dialog,
    vocab: &Vocabulary,
    include_domain_tokens: bool,
) -> TokenSequence {
    let mut tokens = vec![SOC_ID];
    let domain_token = vocab.domain_token_id(dialog.domain);
    for turn in &dialog.turns {
        if include_domain_tokens {
            tokens.push(domain_token);
        }
        tokens.push(turn.speaker.token_id());
        for w in &turn.tokens {
            tokens.push(vocab.id_or_unk(w));
        }
    }
    tokens.push(EOC_ID);
    TokenSequence::new(tokens, dialog.domain)
}

/// Concatenate sequences per domain (input order) and cut consecutive
/// windows of exactly `chunk_len` tokens; the trailing remainder is
/// dropped. Chunks keep their source domain.
pub fn chunk(sequences: &[TokenSequence], chunk_len: usize) -> Result<Vec<TokenSequence>> {
    if chunk_len < 2 {
        return Err(Error::ChunkTooShort(chunk_len));
    }
    let max_domain = sequences
        .iter()
        .map(|s| s.source_domain.0)
        .max()
        .map_or(0, |m| m + 1);
    let mut concat: Vec<Vec<TokenId>> = vec![Vec::new(); max_domain];
    for seq in sequences {
        concat[seq.source_domain.0].extend_from_slice(&seq.tokens);
    }
    let mut chunks = Vec::new();
    for (d, stream) in concat.iter().enumerate() {
        for window in stream.chunks_exact(chunk_len) {
            chunks.push(TokenSequence::new(window.to_vec(), DomainId(d)));
        }
    }
    Ok(chunks)
}

/// Per-domain 60-20-20 split of chunked sequences.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitCorpus {
    pub train: Vec<TokenSequence>,
    pub validation: Vec<TokenSequence>,
    pub test: Vec<TokenSequence>,
}

impl SplitCorpus {
    pub fn train_for_domain(&self, domain: DomainId) -> Vec<&TokenSequence> {
        self.train
            .iter()
            .filter(|s| s.source_domain == domain)
            .collect()
    }

    pub fn test_for_domain(&self, domain: DomainId) -> Vec<&TokenSequence> {
        self.test
            .iter()
            .filter(|s| s.source_domain == domain)
            .collect()
    }

    /// Copy with every sequence of `domain` removed from all splits.
    pub fn without_domain(&self, domain: DomainId) -> SplitCorpus {
        let drop = |seqs: &[TokenSequence]| {
            seqs.iter()
                .filter(|s| s.source_domain != domain)
                .cloned()
                .collect()
        };
        SplitCorpus {
            train: drop(&self.train),
            validation: drop(&self.validation),
            test: drop(&self.test),
        }
    }
}

const MIN_CHUNKS_PER_DOMAIN: usize = 5;

/// Shuffle chunks per domain and partition 60/20/20. Validation and test
/// take `floor(n/5)` each; the remainder goes to train.
pub fn split(chunks: &[TokenSequence], seed: u64, domain_names: &[String]) -> Result<SplitCorpus> {
    let n_domains = domain_names.len();
    let mut per_domain: Vec<Vec<&TokenSequence>> = vec![Vec::new(); n_domains];
    for c in chunks {
        per_domain[c.source_domain.0].push(c);
    }
    let mut out = SplitCorpus {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (d, group) in per_domain.iter().enumerate() {
        if group.len() < MIN_CHUNKS_PER_DOMAIN {
            return Err(Error::TooFewChunks {
                domain: domain_names[d].clone(),
                got: group.len(),
                need: MIN_CHUNKS_PER_DOMAIN,
            });
        }
        let mut order: Vec<usize> = (0..group.len()).collect();
        order.shuffle(&mut seeding::stream(seed, "split", d as u64));
        let n = group.len();
        let n_val = n / 5;
        let n_test = n / 5;
        let n_train = n - n_val - n_test;
        for (pos, &idx) in order.iter().enumerate() {
            let seq = group[idx].clone();
            if pos < n_train {
                out.train.push(seq);
            } else if pos < n_train + n_val {
                out.validation.push(seq);
            } else {
                out.test.push(seq);
            }
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct JsonTurn {
    spk: String,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct JsonDialog {
    domain: String,
    turns: Vec<JsonTurn>,
}

/// Write dialogs as JSONL: one `{"domain", "turns": [{"spk", "text"}]}`
/// object per line, UTF-8, LF endings.
pub fn save_jsonl<W: Write>(dialogs: &[Dialog], domain_names: &[String], mut w: W) -> Result<()> {
    for d in dialogs {
        let rec = JsonDialog {
            domain: domain_names[d.domain.0].clone(),
            turns: d
                .turns
                .iter()
                .map(|t| JsonTurn {
                    spk: t.speaker.tag().to_string(),
                    text: t.tokens.join(" "),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Read dialogs back; errors carry the 1-based line number.
pub fn load_jsonl<R: BufRead>(r: R, domain_names: &[String]) -> Result<Vec<Dialog>> {
    let mut dialogs = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonDialog = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let domain = domain_names
            .iter()
            .position(|n| *n == rec.domain)
            .map(DomainId)
            .ok_or_else(|| Error::MalformedRecord {
                line: i + 1,
                msg: format!("unknown domain {}", rec.domain),
            })?;
        let mut turns = Vec::with_capacity(rec.turns.len());
        for t in rec.turns {
            let speaker = Speaker::from_tag(&t.spk).map_err(|e| Error::MalformedRecord {
                line: i + 1,
                msg: e.to_string(),
            })?;
            turns.push(Turn {
                speaker,
                tokens: t.text.split_whitespace().map(str::to_string).collect(),
            });
        }
        dialogs.push(Dialog { domain, turns });
    }
    Ok(dialogs)
}

pub fn save_jsonl_file(dialogs: &[Dialog], domain_names: &[String], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    save_jsonl(dialogs, domain_names, std::io::BufWriter::new(file))
}

pub fn load_jsonl_file(path: &Path, domain_names: &[String]) -> Result<Vec<Dialog>> {
    let file = std::fs::File::open(path)?;
    load_jsonl(BufReader::new(file), domain_names)
}
