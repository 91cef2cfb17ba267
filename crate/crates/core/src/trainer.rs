//! The target-model zoo: five fine-tuning recipes plus probabilistic
//! redaction schedules, driving AdamW / DP-AdamW and recording one
//! privacy event per noisy step.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::accountant::{default_orders, PrivacySpend, StepKind};
use crate::corpus::{SplitCorpus, TokenSequence};
use crate::error::{Error, Result};
use crate::lm::{per_example_grads_and_losses, Batch, LmDims, TinyLmParams};
use crate::optim::{adamw_step, dp_adamw_step, AdamWConfig, AdamWState, DpConfig, PrivacyEvent};
use crate::seeding;
use crate::vocab::DomainId;

/// Redaction-probability schedules. `p` decays from 1 toward 0 over the
/// horizon; the step kind mirrors the two-stage recipe (p = 1 for the
/// first half, 0 for the second).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScheduleKind {
    Step,
    Linear,
    ExpConvex { eta: f64 },
    ExpConcave { eta: f64 },
}

impl ScheduleKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            ScheduleKind::ExpConvex { eta } | ScheduleKind::ExpConcave { eta } if *eta <= 0.0 => {
                Err(Error::InvalidPlan(format!(
                    "schedule temperature {eta} must be > 0"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Redaction probability at step `t` of a `horizon`-step run:
/// step `1` then `0` after the halfway point, linear `1 - t/T`,
/// expconvex `exp(-eta t)`, expconcave `1 - exp((eta/T)(t - T))`.
/// Values are clamped to `[0, 1]`.
pub fn schedule_p(kind: ScheduleKind, t: usize, horizon: usize) -> Result<f64> {
    kind.validate()?;
    if t > horizon {
        return Err(Error::StepBeyondHorizon { t, horizon });
    }
    if horizon == 0 {
        return Err(Error::InvalidPlan("schedule horizon must be > 0".into()));
    }
    let tf = t as f64;
    let hf = horizon as f64;
    let p = match kind {
        ScheduleKind::Step => {
            if 2 * t < horizon {
                1.0
            } else {
                0.0
            }
        }
        ScheduleKind::Linear => 1.0 - tf / hf,
        ScheduleKind::ExpConvex { eta } => (-eta * tf).exp(),
        ScheduleKind::ExpConcave { eta } => 1.0 - ((eta / hf) * (tf - hf)).exp(),
    };
    Ok(p.clamp(0.0, 1.0))
}

/// The trainable target models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Recipe {
    /// Plain AdamW on one domain's raw data.
    DomainOnly(DomainId),
    /// Plain AdamW on all raw data.
    Public,
    /// Plain AdamW on redacted data only.
    PubRedacted,
    /// DP-AdamW on raw data.
    Private,
    /// Two stages: AdamW on redacted, then DP-AdamW on raw from those
    /// weights (fresh optimizer state). Costs 2x.
    Jft,
    /// Jft with each stage halved.
    JftHalf,
    /// One stage: at each step train on redacted with AdamW w.p. `p_t`,
    /// else on raw with DP-AdamW.
    RedactionSchedule,
}

impl Recipe {
    pub fn needs_redacted_data(&self) -> bool {
        matches!(
            self,
            Recipe::PubRedacted | Recipe::Jft | Recipe::JftHalf | Recipe::RedactionSchedule
        )
    }

    /// Fine-tuning cost relative to the one-stage recipes.
    pub fn cost_tag(&self) -> &'static str {
        match self {
            Recipe::Jft => "2x",
            _ => "1x",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainPlan {
    pub recipe: Recipe,
    /// Step budget T. Jft runs 2T, JftHalf runs T/2 + T/2.
    pub steps: usize,
    pub schedule: Option<ScheduleKind>,
    /// Which policy produced the redacted data (echoed into reports).
    pub policy_tag: Option<String>,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub dp: DpConfig,
    pub data_seed: u64,
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::InvalidPlan(format!(
                "steps {} must be >= 2",
                self.steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidPlan("batch_size must be >= 1".into()));
        }
        self.dp.validate()?;
        if self.recipe == Recipe::RedactionSchedule {
            match self.schedule {
                None => {
                    return Err(Error::InvalidPlan(
                        "redaction schedule recipe needs a schedule kind".into(),
                    ))
                }
                Some(kind) => kind.validate()?,
            }
        }
        Ok(())
    }
}

/// What one training step did.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub kind: StepKind,
    /// Batch loss before the update; absent when a Poisson draw was empty.
    pub loss: Option<f64>,
}

/// A trained model plus its realized privacy accounting.
#[derive(Debug, Clone)]
pub struct TrainedTarget {
    pub params: TinyLmParams,
    pub spend: PrivacySpend,
    pub trace: Vec<StepRecord>,
    pub events: Vec<PrivacyEvent>,
    pub plan: TrainPlan,
}

/// Fixed-size batches over a shuffled index order, reshuffled per epoch.
struct ShuffledBatcher {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl ShuffledBatcher {
    fn new(n: usize, batch: usize, rng: ChaCha8Rng) -> ShuffledBatcher {
        ShuffledBatcher {
            rng,
            order: (0..n).collect(),
            pos: n, // trigger shuffle on first draw
            batch: batch.min(n),
        }
    }

    fn next(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

fn poisson_sample<R: Rng>(n: usize, rate: f64, rng: &mut R) -> Vec<usize> {
    (0..n).filter(|_| rng.random::<f64>() < rate).collect()
}

fn gather(data: &[TokenSequence], idx: &[usize]) -> Vec<TokenSequence> {
    idx.iter().map(|&i| data[i].clone()).collect()
}

struct Run<'a> {
    plan: &'a TrainPlan,
    params: TinyLmParams,
    state: AdamWState,
    trace: Vec<StepRecord>,
    events: Vec<PrivacyEvent>,
    noise_rng: ChaCha8Rng,
    step: usize,
}

impl<'a> Run<'a> {
    fn new(plan: &'a TrainPlan, params: TinyLmParams) -> Run<'a> {
        let n = params.dims.n_params();
        Run {
            plan,
            params,
            state: AdamWState::new(n, plan.optimizer.clone()),
            trace: Vec::new(),
            events: Vec::new(),
            noise_rng: seeding::stream(plan.dp.seed, "dp-noise", 0),
            step: 0,
        }
    }

    /// Fresh moment accumulators (stage boundaries re-initialize).
    fn reset_optimizer(&mut self) {
        self.state = AdamWState::new(self.params.dims.n_params(), self.plan.optimizer.clone());
    }

    fn plain_step(&mut self, data: &[TokenSequence], idx: &[usize], kind: StepKind) -> Result<()> {
        let examples = gather(data, idx);
        let batch = Batch::new(&examples)?;
        let grads_losses = per_example_grads_and_losses(&self.params, &batch)?;
        let dim = self.params.data.len();
        let inv = 1.0 / grads_losses.len() as f64;
        let mut mean = vec![0.0; dim];
        let mut loss = 0.0;
        for (g, l) in &grads_losses {
            for (m, x) in mean.iter_mut().zip(g) {
                *m += x;
            }
            loss += l;
        }
        for m in mean.iter_mut() {
            *m *= inv;
        }
        loss *= inv;
        adamw_step(&mut self.params.data, &mut self.state, &mean)?;
        self.trace.push(StepRecord {
            step: self.step,
            kind,
            loss: Some(loss),
        });
        self.step += 1;
        Ok(())
    }

    fn dp_step(&mut self, data: &[TokenSequence], poisson_rng: &mut ChaCha8Rng) -> Result<()> {
        let idx = poisson_sample(data.len(), self.plan.dp.sampling_rate, poisson_rng);
        // An empty Poisson draw still queries the data: the event is
        // recorded and only the (post-processing) update is skipped.
        if idx.is_empty() {
            self.events.push(PrivacyEvent {
                sampling_rate: self.plan.dp.sampling_rate,
                noise_multiplier: self.plan.dp.noise_multiplier,
            });
            self.trace.push(StepRecord {
                step: self.step,
                kind: StepKind::DpOnRaw,
                loss: None,
            });
            self.step += 1;
            return Ok(());
        }
        let examples = gather(data, &idx);
        let batch = Batch::new(&examples)?;
        let grads_losses = per_example_grads_and_losses(&self.params, &batch)?;
        let loss = grads_losses.iter().map(|(_, l)| l).sum::<f64>() / grads_losses.len() as f64;
        let grads: Vec<Vec<f64>> = grads_losses.into_iter().map(|(g, _)| g).collect();
        let event = dp_adamw_step(
            &mut self.params.data,
            &mut self.state,
            &grads,
            &self.plan.dp,
            &mut self.noise_rng,
        )?;
        self.events.push(event);
        self.trace.push(StepRecord {
            step: self.step,
            kind: StepKind::DpOnRaw,
            loss: Some(loss),
        });
        self.step += 1;
        Ok(())
    }

    fn finish(self) -> Result<TrainedTarget> {
        let kinds: Vec<StepKind> = self.trace.iter().map(|r| r.kind).collect();
        let spend =
            PrivacySpend::for_run(&kinds, &self.events, self.plan.dp.delta, &default_orders())?;
        Ok(TrainedTarget {
            params: self.params,
            spend,
            trace: self.trace,
            events: self.events,
            plan: self.plan.clone(),
        })
    }
}

fn adamw_phase(
    run: &mut Run,
    data: &[TokenSequence],
    steps: usize,
    batcher_tag: &str,
    kind: StepKind,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidPlan("training split is empty".into()));
    }
    let mut batcher = ShuffledBatcher::new(
        data.len(),
        run.plan.batch_size,
        seeding::stream(run.plan.data_seed, batcher_tag, 0),
    );
    for _ in 0..steps {
        let idx = batcher.next();
        run.plain_step(data, &idx, kind)?;
    }
    Ok(())
}

fn dp_phase(run: &mut Run, data: &[TokenSequence], steps: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidPlan("training split is empty".into()));
    }
    let mut poisson_rng = seeding::stream(run.plan.data_seed, "poisson", 0);
    for _ in 0..steps {
        run.dp_step(data, &mut poisson_rng)?;
    }
    Ok(())
}

/// Train one target model. All recipes start from the same seeded
/// initialization, so differences between them come only from the recipe
/// itself. Redacted recipes require `redacted_train`.
pub fn train_target(
    plan: &TrainPlan,
    dims: LmDims,
    data: &SplitCorpus,
    redacted_train: Option<&[TokenSequence]>,
    init_seed: u64,
) -> Result<TrainedTarget> {
    plan.validate()?;
    if plan.recipe.needs_redacted_data() && redacted_train.is_none() {
        return Err(Error::InvalidPlan(format!(
            "recipe {:?} requires redacted training data",
            plan.recipe
        )));
    }
    let params = TinyLmParams::init(dims, init_seed);
    let mut run = Run::new(plan, params);
    let t = plan.steps;

    match plan.recipe {
        Recipe::Public => {
            adamw_phase(&mut run, &data.train, t, "batch-raw", StepKind::PlainOnRaw)?;
        }
        Recipe::DomainOnly(domain) => {
            let subset: Vec<TokenSequence> = data
                .train
                .iter()
                .filter(|s| s.source_domain == domain)
                .cloned()
                .collect();
            if subset.is_empty() {
                return Err(Error::InvalidPlan(format!(
                    "no training data for domain {domain}"
                )));
            }
            adamw_phase(&mut run, &subset, t, "batch-raw", StepKind::PlainOnRaw)?;
        }
        Recipe::PubRedacted => {
            let red = redacted_train.unwrap();
            adamw_phase(&mut run, red, t, "batch-red", StepKind::PlainOnRedacted)?;
        }
        Recipe::Private => {
            dp_phase(&mut run, &data.train, t)?;
        }
        Recipe::Jft => {
            let red = redacted_train.unwrap();
            adamw_phase(&mut run, red, t, "batch-red", StepKind::PlainOnRedacted)?;
            run.reset_optimizer();
            dp_phase(&mut run, &data.train, t)?;
        }
        Recipe::JftHalf => {
            let red = redacted_train.unwrap();
            let half = t / 2;
            adamw_phase(&mut run, red, half, "batch-red", StepKind::PlainOnRedacted)?;
            run.reset_optimizer();
            dp_phase(&mut run, &data.train, half)?;
        }
        Recipe::RedactionSchedule => {
            let red = redacted_train.unwrap();
            let kind = plan.schedule.unwrap();
            run_schedule(&mut run, &data.train, red, |step| schedule_p(kind, step, t))?;
        }
    }
    run.finish()
}

/// One-stage schedule runner: at step t draw Bernoulli(p_t) from a
/// dedicated stream; heads trains on redacted data with AdamW, tails on
/// raw data with DP-AdamW. A single optimizer state spans both branches.
fn run_schedule<F>(
    run: &mut Run,
    raw: &[TokenSequence],
    redacted: &[TokenSequence],
    p_of: F,
) -> Result<()>
where
    F: Fn(usize) -> Result<f64>,
{
    if raw.is_empty() || redacted.is_empty() {
        return Err(Error::InvalidPlan("training split is empty".into()));
    }
    let plan = run.plan;
    let mut branch_rng = seeding::stream(plan.data_seed, "branch", 0);
    let mut poisson_rng = seeding::stream(plan.data_seed, "poisson", 0);
    let mut batcher = ShuffledBatcher::new(
        redacted.len(),
        plan.batch_size,
        seeding::stream(plan.data_seed, "batch-red", 0),
    );
    for step in 0..plan.steps {
        let p = p_of(step)?;
        if branch_rng.random::<f64>() < p {
            let idx = batcher.next();
            run.plain_step(redacted, &idx, StepKind::PlainOnRedacted)?;
        } else {
            run.dp_step(raw, &mut poisson_rng)?;
        }
    }
    Ok(())
}

/// Train a redaction-schedule plan; thin wrapper kept as its own entry
/// point because the schedule is the one-stage replacement for Jft.
pub fn train_redaction_schedule(
    plan: &TrainPlan,
    dims: LmDims,
    data: &SplitCorpus,
    redacted_train: &[TokenSequence],
    init_seed: u64,
) -> Result<TrainedTarget> {
    if plan.recipe != Recipe::RedactionSchedule {
        return Err(Error::InvalidPlan(
            "plan recipe is not a redaction schedule".into(),
        ));
    }
    train_target(plan, dims, data, Some(redacted_train), init_seed)
}

#[cfg(test)]
pub(crate) fn run_schedule_with_constant_p(
    plan: &TrainPlan,
    dims: LmDims,
    data: &SplitCorpus,
    redacted_train: &[TokenSequence],
    init_seed: u64,
    p: f64,
) -> Result<TrainedTarget> {
    let params = TinyLmParams::init(dims, init_seed);
    let mut run = Run::new(plan, params);
    run_schedule(&mut run, &data.train, redacted_train, |_| Ok(p))?;
    run.finish()
}
