//! Policy functions: per-token private/public annotation, redaction, and
//! the two policy families (hand-picked keywords, windowed domain
//! classifier with a probability threshold).

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::vocab::{DomainId, TokenId, Vocabulary, REDACTED_ID};

/// 0/1 privacy labels, one per token of the annotated sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyMask(pub Vec<bool>);

impl PolicyMask {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn any(&self) -> bool {
        self.0.iter().any(|&b| b)
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// Pointwise `self <= other`.
    pub fn covered_by(&self, other: &PolicyMask) -> bool {
        self.len() == other.len() && self.0.iter().zip(&other.0).all(|(&a, &b)| !a || b)
    }
}

/// Hand-picked sensitive keywords for one domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeywordPolicy {
    pub domain: DomainId,
    pub keywords: HashSet<TokenId>,
}

impl KeywordPolicy {
    pub fn new(domain: DomainId, keywords: HashSet<TokenId>, vocab: &Vocabulary) -> Result<Self> {
        if keywords.is_empty() {
            return Err(Error::InvalidPolicy(format!(
                "keyword set for domain {domain} is empty"
            )));
        }
        if let Some(&id) = keywords.iter().find(|&&id| vocab.is_reserved(id)) {
            return Err(Error::InvalidPolicy(format!(
                "keyword set contains reserved token id {id}"
            )));
        }
        Ok(KeywordPolicy { domain, keywords })
    }

    /// Build from token strings, resolving ids through the vocabulary.
    pub fn from_tokens(domain: DomainId, tokens: &[String], vocab: &Vocabulary) -> Result<Self> {
        let mut ids = HashSet::new();
        for t in tokens {
            let id = vocab.id(t).ok_or_else(|| Error::UnknownToken(t.clone()))?;
            ids.insert(id);
        }
        KeywordPolicy::new(domain, ids, vocab)
    }

    /// mask[k] = 1 iff token k is in the keyword set.
    pub fn mask(&self, seq: &TokenSequence) -> PolicyMask {
        PolicyMask(
            seq.tokens
                .iter()
                .map(|t| self.keywords.contains(t))
                .collect(),
        )
    }
}

/// Parse a lexicon file: one token per line, `#` starts a comment.
pub fn parse_lexicon<R: BufRead>(r: R) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
    for line in r.lines() {
        let line = line?;
        let entry = line.split('#').next().unwrap_or("").trim();
        if !entry.is_empty() {
            tokens.push(entry.to_string());
        }
    }
    Ok(tokens)
}

pub fn write_lexicon<W: Write>(tokens: &[String], mut w: W) -> Result<()> {
    for t in tokens {
        writeln!(w, "{t}")?;
    }
    Ok(())
}

/// Multinomial logistic regression over bag-of-content-token windows.
/// Reserved/control tokens contribute no features, so the classifier is
/// unaffected by the presence or absence of domain control tokens.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainClassifier {
    /// Snapshot format version.
    pub version: u32,
    pub window: usize,
    pub n_domains: usize,
    pub vocab_size: usize,
    /// `weights[d]` is the |V|-length weight vector of domain d.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    /// Per-domain decision threshold in (0, 1).
    pub thresholds: Vec<f64>,
    /// Accuracy on the training windows, recorded at fit time.
    pub train_accuracy: f64,
}

pub const CLASSIFIER_SNAPSHOT_VERSION: u32 = 1;

/// Default classifier window width.
pub const DEFAULT_CLASSIFIER_WINDOW: usize = 8;

/// Threshold grid searched by [`tune_threshold`].
pub fn threshold_grid() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone)]
pub struct ClassifierConfig {
    pub window: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            window: DEFAULT_CLASSIFIER_WINDOW,
            epochs: 300,
            learning_rate: 1.0,
            l2: 1e-5,
            seed: 0,
        }
    }
}

fn softmax_inplace(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in logits.iter_mut() {
        *l /= sum;
    }
}

impl DomainClassifier {
    /// Fit on the training split: non-overlapping width-`window` spans of
    /// each sequence become one bag-of-tokens example labeled with the
    /// sequence's domain. Full-batch gradient descent from zero init, so
    /// the fit is deterministic.
    pub fn train(
        sequences: &[TokenSequence],
        n_domains: usize,
        vocab: &Vocabulary,
        config: &ClassifierConfig,
    ) -> Result<DomainClassifier> {
        if n_domains < 2 {
            return Err(Error::SingleDomain(n_domains));
        }
        let present: HashSet<usize> = sequences.iter().map(|s| s.source_domain.0).collect();
        if present.len() < 2 {
            return Err(Error::SingleDomain(present.len()));
        }
        let vocab_size = vocab.len();

        // (bag counts, label) per window
        let mut examples: Vec<(Vec<(usize, f64)>, usize)> = Vec::new();
        for seq in sequences {
            for span in seq.tokens.chunks(config.window) {
                let mut counts = vec![0.0f64; vocab_size];
                let mut any = false;
                for &t in span {
                    if !vocab.is_reserved(t) {
                        counts[t as usize] += 1.0;
                        any = true;
                    }
                }
                if any {
                    let sparse: Vec<(usize, f64)> = counts
                        .iter()
                        .enumerate()
                        .filter(|(_, &c)| c > 0.0)
                        .map(|(i, &c)| (i, c))
                        .collect();
                    examples.push((sparse, seq.source_domain.0));
                }
            }
        }
        if examples.is_empty() {
            return Err(Error::InvalidPolicy(
                "no classifier training windows".into(),
            ));
        }

        let mut weights = vec![vec![0.0f64; vocab_size]; n_domains];
        let mut bias = vec![0.0f64; n_domains];
        let n = examples.len() as f64;
        for _ in 0..config.epochs {
            let mut grad_w = vec![vec![0.0f64; vocab_size]; n_domains];
            let mut grad_b = vec![0.0f64; n_domains];
            for (bag, label) in &examples {
                let mut logits: Vec<f64> = (0..n_domains)
                    .map(|d| bias[d] + bag.iter().map(|&(i, c)| weights[d][i] * c).sum::<f64>())
                    .collect();
                softmax_inplace(&mut logits);
                for d in 0..n_domains {
                    let delta = logits[d] - if d == *label { 1.0 } else { 0.0 };
                    grad_b[d] += delta;
                    for &(i, c) in bag {
                        grad_w[d][i] += delta * c;
                    }
                }
            }
            for d in 0..n_domains {
                bias[d] -= config.learning_rate * grad_b[d] / n;
                for i in 0..vocab_size {
                    weights[d][i] -=
                        config.learning_rate * (grad_w[d][i] / n + config.l2 * weights[d][i]);
                }
            }
        }

        let mut clf = DomainClassifier {
            version: CLASSIFIER_SNAPSHOT_VERSION,
            window: config.window,
            n_domains,
            vocab_size,
            weights,
            bias,
            thresholds: vec![0.7; n_domains],
            train_accuracy: 0.0,
        };
        let correct = examples
            .iter()
            .filter(|(bag, label)| clf.predict_sparse(bag) == *label)
            .count();
        clf.train_accuracy = correct as f64 / n;
        Ok(clf)
    }

    fn posterior_sparse(&self, bag: &[(usize, f64)]) -> Vec<f64> {
        let mut logits: Vec<f64> = (0..self.n_domains)
            .map(|d| {
                self.bias[d]
                    + bag
                        .iter()
                        .map(|&(i, c)| self.weights[d][i] * c)
                        .sum::<f64>()
            })
            .collect();
        softmax_inplace(&mut logits);
        logits
    }

    fn predict_sparse(&self, bag: &[(usize, f64)]) -> usize {
        let p = self.posterior_sparse(bag);
        p.iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap()
    }

    fn bag_of(&self, span: &[TokenId], vocab: &Vocabulary) -> Vec<(usize, f64)> {
        let mut counts: Vec<(usize, f64)> = Vec::new();
        for &t in span {
            if vocab.is_reserved(t) {
                continue;
            }
            match counts.iter_mut().find(|(i, _)| *i == t as usize) {
                Some((_, c)) => *c += 1.0,
                None => counts.push((t as usize, 1.0)),
            }
        }
        counts
    }

    /// Posterior over domains for one token span.
    pub fn window_posterior(&self, span: &[TokenId], vocab: &Vocabulary) -> Vec<f64> {
        self.posterior_sparse(&self.bag_of(span, vocab))
    }

    /// Window accuracy on held-out sequences.
    pub fn accuracy(&self, sequences: &[TokenSequence], vocab: &Vocabulary) -> f64 {
        let mut total = 0usize;
        let mut correct = 0usize;
        for seq in sequences {
            for span in seq.tokens.chunks(self.window) {
                let bag = self.bag_of(span, vocab);
                if bag.is_empty() {
                    continue;
                }
                total += 1;
                if self.predict_sparse(&bag) == seq.source_domain.0 {
                    correct += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    }

    /// Slide stride-1 windows over the sequence; wherever the posterior
    /// for `domain` exceeds its threshold, every token in the window is
    /// labeled private. Reserved/control tokens are never labeled.
    pub fn mask(
        &self,
        seq: &TokenSequence,
        domain: DomainId,
        vocab: &Vocabulary,
    ) -> Result<PolicyMask> {
        if domain.0 >= self.n_domains {
            return Err(Error::InvalidPolicy(format!(
                "domain {domain} out of range for classifier with {} domains",
                self.n_domains
            )));
        }
        let n = seq.len();
        let mut mask = vec![false; n];
        if n > 0 {
            let width = self.window.min(n);
            let z = self.thresholds[domain.0];
            for start in 0..=(n - width) {
                let span = &seq.tokens[start..start + width];
                let posterior = self.window_posterior(span, vocab);
                if posterior[domain.0] > z {
                    for m in mask.iter_mut().skip(start).take(width) {
                        *m = true;
                    }
                }
            }
            for (k, m) in mask.iter_mut().enumerate() {
                if vocab.is_reserved(seq.tokens[k]) {
                    *m = false;
                }
            }
        }
        Ok(PolicyMask(mask))
    }

    pub fn save_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn load_json<R: std::io::Read>(r: R) -> Result<DomainClassifier> {
        let clf: DomainClassifier = serde_json::from_reader(r)?;
        if clf.version != CLASSIFIER_SNAPSHOT_VERSION {
            return Err(Error::SnapshotFormat(format!(
                "classifier snapshot version {} unsupported",
                clf.version
            )));
        }
        Ok(clf)
    }
}

/// Either policy family, applied uniformly during redaction and leak
/// checking.
#[derive(Debug, Clone)]
pub enum Policy {
    Keyword(KeywordPolicy),
    Classifier {
        classifier: DomainClassifier,
        domain: DomainId,
    },
}

impl Policy {
    pub fn domain(&self) -> DomainId {
        match self {
            Policy::Keyword(k) => k.domain,
            Policy::Classifier { domain, .. } => *domain,
        }
    }

    pub fn mask(&self, seq: &TokenSequence, vocab: &Vocabulary) -> Result<PolicyMask> {
        match self {
            Policy::Keyword(k) => Ok(k.mask(seq)),
            Policy::Classifier { classifier, domain } => classifier.mask(seq, *domain, vocab),
        }
    }
}

/// Maximize `rate_public - rate_domain_only` over the threshold grid; the
/// callback evaluates both rates at a candidate threshold. Ties break
/// toward the larger threshold.
pub fn tune_threshold<F>(grid: &[f64], mut lira_rates: F) -> Result<f64>
where
    F: FnMut(f64) -> Result<(f64, f64)>,
{
    if grid.is_empty() {
        return Err(Error::InvalidPolicy("empty threshold grid".into()));
    }
    let mut best_z = grid[0];
    let mut best_diff = f64::NEG_INFINITY;
    for &z in grid {
        let (rate_public, rate_domain_only) = lira_rates(z)?;
        let diff = rate_public - rate_domain_only;
        if diff >= best_diff {
            best_diff = diff;
            best_z = z;
        }
    }
    Ok(best_z)
}

/// Replace every masked position with `<REDACTED>`; unmasked tokens and
/// the sequence length are untouched.
pub fn redact(seq: &TokenSequence, mask: &PolicyMask) -> Result<TokenSequence> {
    if mask.len() != seq.len() {
        return Err(Error::MaskLengthMismatch {
            mask: mask.len(),
            seq: seq.len(),
        });
    }
    let tokens = seq
        .tokens
        .iter()
        .zip(&mask.0)
        .map(|(&t, &m)| if m { REDACTED_ID } else { t })
        .collect();
    Ok(TokenSequence::new(tokens, seq.source_domain))
}
