//! Likelihood-ratio membership attacks and the empirical domain-privacy
//! estimator: prompt a target model, score its generations against a
//! reference model, and flag generations whose tokens trip a foreign
//! domain's policy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::lm::{conditional_perplexity, generate, perplexity, GenerationConfig, TinyLmParams};
use crate::par;
use crate::policy::Policy;
use crate::seeding;
use crate::vocab::{DomainId, Vocabulary, SYS_ID, USR_ID};

/// Attack shape: how many prompts, how many generations per prompt, and
/// how to sample.
#[derive(Debug, Clone)]
pub struct AttackConfig {
    pub source_domain: DomainId,
    pub n_prompts: usize,
    pub gens_per_prompt: usize,
    pub generation: GenerationConfig,
    /// Master seed; per-generation streams derive from
    /// (seed, role, prompt index, generation index).
    pub seed: u64,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_prompts < 1 || self.gens_per_prompt < 1 {
            return Err(Error::InvalidAttack(
                "prompt and generation counts must be >= 1".into(),
            ));
        }
        self.generation
            .validate()
            .map_err(|e| Error::InvalidAttack(e.to_string()))
    }
}

/// One scored generation of the attack.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredGeneration {
    pub prompt_index: usize,
    pub context: Vec<u32>,
    pub output: Vec<u32>,
    /// `PPL_target(x|c) / PPL_reference(x|c)`; absent for empty outputs.
    pub score: Option<f64>,
    /// Per foreign domain: did the policy fire on the generated tokens?
    pub leak_flags: Vec<(DomainId, bool)>,
    pub empty: bool,
}

impl ScoredGeneration {
    pub fn leaked_any(&self) -> bool {
        self.leak_flags.iter().any(|(_, f)| *f)
    }
}

/// Ranked generations plus the success tally for one (target, reference,
/// domain) attack.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LiraReport {
    pub generations: Vec<ScoredGeneration>,
    pub success_count: usize,
    pub non_empty_count: usize,
    /// `success / non-empty`; undefined when every generation was empty.
    pub success_rate: Option<f64>,
}

/// Leak-probability ratio estimate for one (source, foreign) domain pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainPrivacyEstimate {
    pub source_domain: DomainId,
    pub foreign_domain: DomainId,
    pub target_leaks: usize,
    pub reference_leaks: usize,
    pub target_samples: usize,
    pub reference_samples: usize,
    /// Raw leak fractions.
    pub p_target: f64,
    pub p_reference: f64,
    /// `(leaks_t + 0.5)/n_t / ((leaks_r + 0.5)/n_r)`; the +0.5 continuity
    /// correction keeps the ratio finite, raw counts stay recoverable.
    pub c_hat: f64,
    /// Both raw leak counts were zero.
    pub indeterminate: bool,
}

/// Apply each foreign policy to the generated tokens only; a flag is set
/// when the policy labels any generated token private. Prompts never
/// enter the check.
pub fn leak_check(
    generated: &TokenSequence,
    foreign_policies: &[(DomainId, &Policy)],
    vocab: &Vocabulary,
) -> Result<Vec<(DomainId, bool)>> {
    let mut flags = Vec::with_capacity(foreign_policies.len());
    for (domain, policy) in foreign_policies {
        let fired = if generated.is_empty() {
            false
        } else {
            policy.mask(generated, vocab)?.any()
        };
        flags.push((*domain, fired));
    }
    Ok(flags)
}

/// Conditional perplexity of a continuation; thin re-export of the model
/// op so attack code reads uniformly.
pub fn conditional_ppl(model: &TinyLmParams, context: &[u32], continuation: &[u32]) -> Result<f64> {
    conditional_perplexity(model, context, continuation)
}

/// Cut prompts from held-out sequences of the source domain: each prompt
/// is the prefix ending right after the 1st-3rd speaker token, so the
/// model is asked to continue an utterance.
pub fn build_prompts(
    held_out: &[&TokenSequence],
    domain: DomainId,
    count: usize,
    seed: u64,
) -> Result<Vec<TokenSequence>> {
    let pool: Vec<&&TokenSequence> = held_out
        .iter()
        .filter(|s| s.source_domain == domain && s.len() >= 2)
        .collect();
    if pool.is_empty() {
        return Err(Error::InvalidAttack(format!(
            "no held-out sequences for domain {domain}"
        )));
    }
    let mut rng = seeding::stream(seed, "prompts", 0);
    let mut prompts = Vec::with_capacity(count);
    for i in 0..count {
        let seq = pool[i % pool.len()];
        let utterances = 1 + (rng.random_range(0..3u32) as usize);
        let mut cut = None;
        let mut seen = 0;
        for (k, &t) in seq.tokens.iter().enumerate() {
            if t == SYS_ID || t == USR_ID {
                seen += 1;
                cut = Some(k + 1);
                if seen == utterances {
                    break;
                }
            }
        }
        // fewer speaker boundaries than drawn: keep the last one; none
        // at all: a short fixed prefix
        let end = cut.unwrap_or_else(|| seq.len().min(8));
        prompts.push(TokenSequence::new(seq.tokens[..end].to_vec(), domain));
    }
    Ok(prompts)
}

fn generate_for_role(
    model: &TinyLmParams,
    prompts: &[TokenSequence],
    cfg: &AttackConfig,
    role: &str,
) -> Result<Vec<(usize, TokenSequence)>> {
    // One independent stream per (role, prompt, generation): order of
    // evaluation cannot change any output.
    let jobs: Vec<(usize, usize)> = (0..prompts.len())
        .flat_map(|p| (0..cfg.gens_per_prompt).map(move |g| (p, g)))
        .collect();
    let outputs = par::map_collect(&jobs, |&(p, g)| {
        let seed = seeding::derive(cfg.seed, role, (p * cfg.gens_per_prompt + g) as u64);
        let gen_cfg = cfg.generation.with_seed(seed);
        generate(model, &prompts[p], &gen_cfg).map(|out| (p, out))
    });
    outputs.into_iter().collect()
}

/// The full likelihood-ratio attack: generate `gens_per_prompt` outputs
/// per prompt from the target, score non-empty ones against the
/// reference, sort by descending score (stable), and count a success for
/// every non-empty generation that leaks any foreign domain.
pub fn lira_attack(
    target: &TinyLmParams,
    reference: &TinyLmParams,
    prompts: &[TokenSequence],
    cfg: &AttackConfig,
    foreign_policies: &[(DomainId, &Policy)],
    vocab: &Vocabulary,
) -> Result<LiraReport> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(Error::InvalidAttack("no prompts".into()));
    }
    let raw = generate_for_role(target, prompts, cfg, "target-gen")?;
    let mut generations = Vec::with_capacity(raw.len());
    for (prompt_index, output) in raw {
        let context = &prompts[prompt_index];
        let empty = output.is_empty();
        let (score, leak_flags) = if empty {
            (
                None,
                foreign_policies.iter().map(|(d, _)| (*d, false)).collect(),
            )
        } else {
            let ppl_t = conditional_ppl(target, &context.tokens, &output.tokens)?;
            let ppl_r = conditional_ppl(reference, &context.tokens, &output.tokens)?;
            let flags = leak_check(&output, foreign_policies, vocab)?;
            (Some(ppl_t / ppl_r), flags)
        };
        generations.push(ScoredGeneration {
            prompt_index,
            context: context.tokens.clone(),
            output: output.tokens,
            score,
            leak_flags,
            empty,
        });
    }
    // Descending by score; stable, so ties keep input order.
    generations.sort_by(|a, b| {
        let sa = a.score.unwrap_or(f64::NEG_INFINITY);
        let sb = b.score.unwrap_or(f64::NEG_INFINITY);
        sb.partial_cmp(&sa).unwrap_or(std::cmp::Ordering::Equal)
    });
    let non_empty_count = generations.iter().filter(|g| !g.empty).count();
    let success_count = generations
        .iter()
        .filter(|g| !g.empty && g.leaked_any())
        .count();
    let success_rate = if non_empty_count > 0 {
        Some(success_count as f64 / non_empty_count as f64)
    } else {
        None
    };
    Ok(LiraReport {
        generations,
        success_count,
        non_empty_count,
        success_rate,
    })
}

/// Estimate the leak-probability ratio for the pair (source, foreign):
/// the target and the reference each answer the same prompts with their
/// own derived sampling streams, and leak fractions of domain `foreign`
/// are compared.
pub fn estimate_domain_privacy(
    target: &TinyLmParams,
    reference: &TinyLmParams,
    prompts: &[TokenSequence],
    foreign: DomainId,
    policy: &Policy,
    cfg: &AttackConfig,
    vocab: &Vocabulary,
) -> Result<DomainPrivacyEstimate> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(Error::InvalidAttack("no prompts".into()));
    }
    let count_leaks = |outputs: &[(usize, TokenSequence)]| -> Result<(usize, usize)> {
        let mut leaks = 0;
        let mut non_empty = 0;
        for (_, out) in outputs {
            if out.is_empty() {
                continue;
            }
            non_empty += 1;
            if policy.mask(out, vocab)?.any() {
                leaks += 1;
            }
        }
        Ok((leaks, non_empty))
    };
    let target_out = generate_for_role(target, prompts, cfg, "target-gen")?;
    let reference_out = generate_for_role(reference, prompts, cfg, "reference-gen")?;
    let (target_leaks, target_samples) = count_leaks(&target_out)?;
    let (reference_leaks, reference_samples) = count_leaks(&reference_out)?;
    if target_samples == 0 || reference_samples == 0 {
        return Err(Error::InvalidAttack("all generations empty".into()));
    }
    let p_target = target_leaks as f64 / target_samples as f64;
    let p_reference = reference_leaks as f64 / reference_samples as f64;
    let c_hat = ((target_leaks as f64 + 0.5) / target_samples as f64)
        / ((reference_leaks as f64 + 0.5) / reference_samples as f64);
    Ok(DomainPrivacyEstimate {
        source_domain: cfg.source_domain,
        foreign_domain: foreign,
        target_leaks,
        reference_leaks,
        target_samples,
        reference_samples,
        p_target,
        p_reference,
        c_hat,
        indeterminate: target_leaks == 0 && reference_leaks == 0,
    })
}

/// Mean per-sequence perplexity over a test split.
pub fn eval_ppl(model: &TinyLmParams, test: &[TokenSequence]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidAttack("empty test split".into()));
    }
    let ppls = par::map_collect(test, |seq| perplexity(model, seq));
    let mut total = 0.0;
    for p in ppls {
        total += p?;
    }
    Ok(total / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{
        build_vocabulary, chunk, generate_synthetic, preprocess, split, CorpusSpec, SplitCorpus,
    };
    use crate::lm::LmDims;
    use crate::policy::KeywordPolicy;
    use crate::vocab::{TokenId, EOC_ID};

    struct Fixture {
        vocab: Vocabulary,
        data: SplitCorpus,
        policies: Vec<Policy>,
        spec: CorpusSpec,
    }

    fn fixture() -> Fixture {
        let mut spec = CorpusSpec::default_spec();
        spec.dialogs_per_domain = 10;
        spec.seed = 31;
        let vocab = build_vocabulary(&spec);
        let dialogs = generate_synthetic(&spec).unwrap();
        let seqs: Vec<TokenSequence> = dialogs
            .iter()
            .map(|d| preprocess(d, &vocab, true))
            .collect();
        let chunks = chunk(&seqs, 24).unwrap();
        let data = split(&chunks, 7, &spec.domain_names()).unwrap();
        let policies = (0..3)
            .map(|i| {
                Policy::Keyword(
                    KeywordPolicy::from_tokens(DomainId(i), &spec.domains[i].keywords, &vocab)
                        .unwrap(),
                )
            })
            .collect();
        Fixture {
            vocab,
            data,
            policies,
            spec,
        }
    }

    fn dims(vocab: &Vocabulary) -> LmDims {
        LmDims {
            vocab: vocab.len(),
            window: 6,
            embed: 8,
            hidden: 10,
        }
    }

    fn attack_cfg(vocab: &Vocabulary, n_prompts: usize, k: usize) -> AttackConfig {
        AttackConfig {
            source_domain: DomainId(0),
            n_prompts,
            gens_per_prompt: k,
            generation: GenerationConfig {
                max_new_tokens: 8,
                temperature: 1.0,
                seed: 0,
                stop_tokens: vocab.stop_token_ids(),
                suppressed_tokens: vec![crate::vocab::REDACTED_ID],
            },
            seed: 123,
        }
    }

    #[test]
    fn leak_check_fires_on_foreign_keyword_only() {
        let f = fixture();
        let cable = f.vocab.id("cable").unwrap();
        let hello = f.vocab.id("hello").unwrap();
        let gen = TokenSequence::new(vec![hello, cable], DomainId(0));
        let foreign: Vec<(DomainId, &Policy)> =
            vec![(DomainId(1), &f.policies[1]), (DomainId(2), &f.policies[2])];
        let flags = leak_check(&gen, &foreign, &f.vocab).unwrap();
        assert_eq!(flags, vec![(DomainId(1), true), (DomainId(2), false)]);

        let filler_only = TokenSequence::new(vec![hello, hello], DomainId(0));
        let flags = leak_check(&filler_only, &foreign, &f.vocab).unwrap();
        assert!(flags.iter().all(|(_, fired)| !fired));
    }

    // Per-token membership oracle over the keyword sets.
    #[test]
    fn leak_flags_match_bruteforce_rescan() {
        let f = fixture();
        let mut rng = seeding::stream(5, "t", 0);
        let ids: Vec<TokenId> = (0..40)
            .map(|_| rng.random_range(0..f.vocab.len() as u32))
            .collect();
        let gen = TokenSequence::new(ids.clone(), DomainId(0));
        let foreign: Vec<(DomainId, &Policy)> =
            vec![(DomainId(1), &f.policies[1]), (DomainId(2), &f.policies[2])];
        let flags = leak_check(&gen, &foreign, &f.vocab).unwrap();
        for (slot, j) in [(0usize, 1usize), (1, 2)] {
            let kw = match &f.policies[j] {
                Policy::Keyword(k) => &k.keywords,
                _ => unreachable!(),
            };
            let expect = ids.iter().any(|t| kw.contains(t));
            assert_eq!(flags[slot].1, expect);
        }
    }

    #[test]
    fn prompts_come_from_domain_and_end_on_speaker_boundary() {
        let f = fixture();
        let held: Vec<&TokenSequence> = f.data.test.iter().collect();
        let prompts = build_prompts(&held, DomainId(0), 12, 9).unwrap();
        assert_eq!(prompts.len(), 12);
        for p in &prompts {
            assert_eq!(p.source_domain, DomainId(0));
            assert!(!p.is_empty());
            let last = *p.tokens.last().unwrap();
            assert!(
                last == SYS_ID || last == USR_ID || p.len() <= 8,
                "prompt should end after a speaker token"
            );
        }
        let again = build_prompts(&held, DomainId(0), 12, 9).unwrap();
        assert_eq!(prompts, again);
    }

    #[test]
    fn self_attack_all_scores_one_and_stable_order() {
        let f = fixture();
        let model = TinyLmParams::init(dims(&f.vocab), 3);
        let held: Vec<&TokenSequence> = f.data.test.iter().collect();
        let prompts = build_prompts(&held, DomainId(0), 6, 1).unwrap();
        let foreign: Vec<(DomainId, &Policy)> =
            vec![(DomainId(1), &f.policies[1]), (DomainId(2), &f.policies[2])];
        let cfg = attack_cfg(&f.vocab, 6, 2);
        let report = lira_attack(&model, &model, &prompts, &cfg, &foreign, &f.vocab).unwrap();
        for g in report.generations.iter().filter(|g| !g.empty) {
            assert_eq!(g.score.unwrap(), 1.0);
        }
        // stable sort on equal scores keeps input (prompt, gen) order
        let nonempty: Vec<usize> = report
            .generations
            .iter()
            .filter(|g| !g.empty)
            .map(|g| g.prompt_index)
            .collect();
        let mut sorted = nonempty.clone();
        sorted.sort();
        assert_eq!(nonempty, sorted);
    }

    #[test]
    fn attack_bounds_and_recount() {
        let f = fixture();
        let target = TinyLmParams::init(dims(&f.vocab), 5);
        let reference = TinyLmParams::init(dims(&f.vocab), 6);
        let held: Vec<&TokenSequence> = f.data.test.iter().collect();
        let prompts = build_prompts(&held, DomainId(0), 10, 11).unwrap();
        let foreign: Vec<(DomainId, &Policy)> =
            vec![(DomainId(1), &f.policies[1]), (DomainId(2), &f.policies[2])];
        let cfg = attack_cfg(&f.vocab, 10, 10);
        let report = lira_attack(&target, &reference, &prompts, &cfg, &foreign, &f.vocab).unwrap();
        assert!(report.generations.len() <= 100);

        // Independent recount from the serialized raw records.
        let json = serde_json::to_string(&report).unwrap();
        let back: LiraReport = serde_json::from_str(&json).unwrap();
        let non_empty = back.generations.iter().filter(|g| !g.empty).count();
        let successes = back
            .generations
            .iter()
            .filter(|g| !g.empty && g.leak_flags.iter().any(|(_, x)| *x))
            .count();
        assert_eq!(non_empty, report.non_empty_count);
        assert_eq!(successes, report.success_count);
        if let Some(rate) = report.success_rate {
            assert!((rate - successes as f64 / non_empty as f64).abs() < 1e-15);
            assert!((0.0..=1.0).contains(&rate));
        }
    }

    #[test]
    fn attack_is_deterministic() {
        let f = fixture();
        let target = TinyLmParams::init(dims(&f.vocab), 5);
        let reference = TinyLmParams::init(dims(&f.vocab), 6);
        let held: Vec<&TokenSequence> = f.data.test.iter().collect();
        let prompts = build_prompts(&held, DomainId(0), 5, 11).unwrap();
        let foreign: Vec<(DomainId, &Policy)> = vec![(DomainId(1), &f.policies[1])];
        let cfg = attack_cfg(&f.vocab, 5, 3);
        let a = lira_attack(&target, &reference, &prompts, &cfg, &foreign, &f.vocab).unwrap();
        let b = lira_attack(&target, &reference, &prompts, &cfg, &foreign, &f.vocab).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn self_estimate_c_hat_near_one() {
        let f = fixture();
        let model = TinyLmParams::init(dims(&f.vocab), 7);
        let held: Vec<&TokenSequence> = f.data.test.iter().collect();
        let prompts = build_prompts(&held, DomainId(0), 20, 13).unwrap();
        let cfg = attack_cfg(&f.vocab, 20, 5);
        let est = estimate_domain_privacy(
            &model,
            &model,
            &prompts,
            DomainId(1),
            &f.policies[1],
            &cfg,
            &f.vocab,
        )
        .unwrap();
        // same distribution on both sides: ratio within binomial noise
        assert!(
            est.c_hat > 0.3 && est.c_hat < 3.0,
            "c_hat {} out of range",
            est.c_hat
        );
        // recount oracle
        let expect = (est.target_leaks as f64 + 0.5)
            / est.target_samples as f64
            / ((est.reference_leaks as f64 + 0.5) / est.reference_samples as f64);
        assert!((est.c_hat - expect).abs() < 1e-15);
    }

    #[test]
    fn suppressing_foreign_keywords_floors_target_leaks() {
        let f = fixture();
        let model = TinyLmParams::init(dims(&f.vocab), 8);
        let held: Vec<&TokenSequence> = f.data.test.iter().collect();
        let prompts = build_prompts(&held, DomainId(0), 10, 17).unwrap();
        let mut cfg = attack_cfg(&f.vocab, 10, 4);
        if let Policy::Keyword(k) = &f.policies[1] {
            cfg.generation.suppressed_tokens.extend(k.keywords.iter());
        }
        let est = estimate_domain_privacy(
            &model,
            &model,
            &prompts,
            DomainId(1),
            &f.policies[1],
            &cfg,
            &f.vocab,
        );
        // reference uses the same suppression, so both leak counts are 0
        let est = est.unwrap();
        assert_eq!(est.target_leaks, 0);
        assert!(est.c_hat <= 1.0);
        assert!(est.indeterminate);
    }

    #[test]
    fn eval_ppl_uniform_model_is_vocab_size() {
        let f = fixture();
        let params = TinyLmParams::zeros(dims(&f.vocab));
        let ppl = eval_ppl(&params, &f.data.test).unwrap();
        assert!((ppl - f.vocab.len() as f64).abs() < 1e-9);
    }

    #[test]
    fn eval_ppl_single_sequence_equals_its_ppl() {
        let f = fixture();
        let params = TinyLmParams::init(dims(&f.vocab), 9);
        let one = &f.data.test[..1];
        let mean = eval_ppl(&params, one).unwrap();
        let direct = perplexity(&params, &one[0]).unwrap();
        assert_eq!(mean, direct);
    }

    // Recount oracle: arithmetic mean of independently recomputed values.
    #[test]
    fn eval_ppl_matches_recomputed_mean() {
        let f = fixture();
        let params = TinyLmParams::init(dims(&f.vocab), 10);
        let mean = eval_ppl(&params, &f.data.test).unwrap();
        let recomputed: f64 = f
            .data
            .test
            .iter()
            .map(|s| perplexity(&params, s).unwrap())
            .sum::<f64>()
            / f.data.test.len() as f64;
        assert!((mean - recomputed).abs() < 1e-12);
    }

    #[test]
    fn leak_monotone_in_keyword_set_extension() {
        let f = fixture();
        let mut rng = seeding::stream(6, "t", 0);
        // fixed generations
        let gens: Vec<TokenSequence> = (0..30)
            .map(|_| {
                TokenSequence::new(
                    (0..10)
                        .map(|_| rng.random_range(0..f.vocab.len() as u32))
                        .collect(),
                    DomainId(0),
                )
            })
            .collect();
        let small = match &f.policies[1] {
            Policy::Keyword(k) => k.clone(),
            _ => unreachable!(),
        };
        let mut big_set = small.keywords.clone();
        big_set.insert(f.vocab.id("hello").unwrap());
        let big = KeywordPolicy::new(DomainId(1), big_set, &f.vocab).unwrap();
        let count = |pol: &KeywordPolicy| gens.iter().filter(|g| pol.mask(g).any()).count();
        assert!(count(&small) <= count(&big));
        let _ = &f.spec;
    }

    #[test]
    fn empty_generation_carries_no_score() {
        // A model locked onto an immediate stop token yields empty
        // generations; the report must flag them and leave the rate
        // undefined.
        let f = fixture();
        let mut params = TinyLmParams::zeros(dims(&f.vocab));
        let d = params.dims.embed;
        for j in 0..d {
            params.data[EOC_ID as usize * d + j] = 50.0;
            params.data[params.dims.b2_off() + j] = 1.0;
        }
        let held: Vec<&TokenSequence> = f.data.test.iter().collect();
        let prompts = build_prompts(&held, DomainId(0), 3, 19).unwrap();
        let foreign: Vec<(DomainId, &Policy)> = vec![(DomainId(1), &f.policies[1])];
        let cfg = attack_cfg(&f.vocab, 3, 2);
        let report = lira_attack(&params, &params, &prompts, &cfg, &foreign, &f.vocab).unwrap();
        assert_eq!(report.non_empty_count, 0);
        assert!(report.success_rate.is_none());
        assert!(report
            .generations
            .iter()
            .all(|g| g.empty && g.score.is_none()));
    }
}
