//! Training loops and the shared-trajectory variance probe.
//!
//! Every random draw is addressed by `(seed, trial, step, site)`, so results
//! do not depend on how trials are scheduled across threads.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use rebar_core::autodiff::Tensor;
use rebar_core::estimators::{
    estimate, Baseline, BaselineNet, ControlVariateState, EstimatorConfig, EstimatorKind, GradEstimate, GroupRole,
    Noise, Sense, StochasticObjective,
};
use rebar_core::models::{multisample_bound, Nonlinearity, Sbn, SbnSpec, ToyProblem};
use rebar_core::optim::{AdamConfig, AdamState, GroupId, VarianceTracker, FAST_GROUP_MULTIPLIER};
use rebar_core::rng::StreamKey;

use crate::config::{BaselineChoice, DataSource, Deterministic, EstimatorSpec, RunConfig, Task};
use crate::data::{binarize, load_idx, split_80_10_10, synthetic_dataset, DataSplits, Dataset, Split};
use crate::telemetry::{write_csv, write_jsonl, RunRecord, TrialStatus, TrialSummary};

pub const SITE_INIT: u64 = 0;
pub const SITE_BATCH: u64 = 1;
pub const SITE_NOISE: u64 = 2;
pub const SITE_EVAL: u64 = 3;
/// Baseline initialisation of probe `i` uses site `SITE_BASELINE + i`.
pub const SITE_BASELINE: u64 = 16;

/// Means are clamped this far from 0 and 1 before they set output biases.
pub const MEAN_EPS: f64 = 1e-2;

pub type Model = Box<dyn StochasticObjective + Send>;

#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub records: Vec<RunRecord>,
    pub summaries: Vec<TrialSummary>,
}

impl RunOutput {
    /// Writes `telemetry.csv` and `summary.jsonl` under `dir`.
    pub fn write(&self, config: &RunConfig, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir)?;
        write_csv(
            std::io::BufWriter::new(std::fs::File::create(dir.join("telemetry.csv"))?),
            config,
            &self.records,
        )?;
        write_jsonl(
            std::io::BufWriter::new(std::fs::File::create(dir.join("summary.jsonl"))?),
            config,
            &self.summaries,
        )?;
        Ok(())
    }

    pub fn failed(&self) -> usize {
        self.summaries.iter().filter(|s| s.status == TrialStatus::Failed).count()
    }
}

pub fn load_data(config: &RunConfig) -> anyhow::Result<Option<DataSplits>> {
    if config.task == Task::Toy {
        return Ok(None);
    }
    let d = &config.data;
    let splits = match d.source {
        DataSource::Synthetic => synthetic_dataset(d.dim, d.count, d.data_seed)?,
        DataSource::Idx => {
            let path = d.path.as_deref().expect("validated");
            let raw = load_idx(Path::new(path))?;
            let mut all = binarize(&raw, d.binarize, d.binarize_seed, Split::Train)?;
            all.meta.source = path.to_string();
            split_80_10_10(all)
        }
    };
    if splits.train.len() < 2 {
        anyhow::bail!("training split has {} rows", splits.train.len());
    }
    Ok(Some(splits))
}

fn context_dim(dim: usize) -> usize {
    dim / 2
}

/// Fresh model for one trial.
pub fn build_model(config: &RunConfig, data: Option<&DataSplits>, trial: usize) -> anyhow::Result<Model> {
    let mut rng = StreamKey::new(config.seed, trial as u64, 0, SITE_INIT).rng();
    let m = &config.model;
    let deterministic = match m.deterministic {
        Deterministic::Linear => Nonlinearity::Linear,
        Deterministic::Nonlinear => Nonlinearity::Tanh2 { width: m.width },
    };
    Ok(match config.task {
        Task::Toy => Box::new(ToyProblem::scalar(config.toy.t, config.toy.theta0)?),
        Task::Gen => {
            let train = &data.expect("data loaded").train;
            let spec = SbnSpec {
                stochastic_layers: m.layers,
                units_per_layer: m.units,
                deterministic,
                observation_dim: train.dim,
            };
            Box::new(Sbn::generative(spec, &train.pixel_means(MEAN_EPS), &mut rng)?)
        }
        Task::Structpred => {
            let train = &data.expect("data loaded").train;
            let ctx = context_dim(train.dim);
            let spec = SbnSpec {
                stochastic_layers: m.layers,
                units_per_layer: m.units,
                deterministic,
                observation_dim: train.dim - ctx,
            };
            Box::new(Sbn::structured(spec, ctx, &train.pixel_means(MEAN_EPS)[ctx..], &mut rng)?)
        }
    })
}

/// Minibatch for `step`, drawn with replacement from the training split.
pub fn batch(config: &RunConfig, data: Option<&DataSplits>, trial: usize, step: u64) -> Tensor {
    match data {
        None => ToyProblem::input(),
        Some(d) => {
            let mut rng = StreamKey::new(config.seed, trial as u64, step, SITE_BATCH).rng();
            let n = d.train.len();
            let rows: Vec<usize> = (0..config.optim.minibatch).map(|_| rng.random_range(0..n)).collect();
            d.train.batch(&rows)
        }
    }
}

pub fn step_noise(config: &RunConfig, model: &dyn StochasticObjective, rows: usize, trial: usize, step: u64) -> Noise {
    let mut rng = StreamKey::new(config.seed, trial as u64, step, SITE_NOISE).rng();
    Noise::draw(&mut rng, rows, &model.layer_sizes())
}

/// Model parameters with their own Adam state; each group at the base rate.
pub struct ModelOptimizer {
    adam: AdamState,
    ids: Vec<GroupId>,
    sign: f64,
}

impl ModelOptimizer {
    pub fn new(model: &dyn StochasticObjective, adam: AdamConfig) -> Self {
        let mut state = AdamState::new(adam);
        let ids = model
            .params()
            .groups()
            .iter()
            .map(|g| state.register(g.name.clone(), g.value.len(), 1.0))
            .collect();
        // Estimates are ascent directions of f; Adam descends.
        let sign = match model.sense() {
            Sense::Minimize => 1.0,
            Sense::Maximize => -1.0,
        };
        ModelOptimizer { adam: state, ids, sign }
    }

    pub fn apply(&mut self, model: &mut dyn StochasticObjective, est: &GradEstimate) -> rebar_core::Result<()> {
        for (i, id) in self.ids.iter().enumerate() {
            let grad: Vec<f64> = est.grads[i].data().iter().map(|g| self.sign * g).collect();
            self.adam.step(*id, model.params_mut().group_mut(i).value.data_mut(), &grad)?;
        }
        Ok(())
    }
}

/// One estimator with everything it adapts: `η`, `λ`, its baseline, and
/// the EMA variance of its estimates on the sampling parameters.
pub struct Learner {
    pub spec: EstimatorSpec,
    pub cfg: EstimatorConfig,
    cv: ControlVariateState,
    baseline: Option<Baseline>,
    baseline_opt: Option<(AdamState, Vec<GroupId>)>,
    tracker: VarianceTracker,
    tracked_groups: Vec<usize>,
}

impl Learner {
    pub fn new(
        spec: &EstimatorSpec,
        config: &RunConfig,
        model: &dyn StochasticObjective,
        feature_dim: usize,
        baseline_seed: StreamKey,
    ) -> anyhow::Result<Self> {
        let s = &config.estimator;
        let groups = model.params().len();
        let mut cfg = EstimatorConfig::new(spec.kind, groups)
            .with_lambda(spec.lambda(s))?
            .with_eta(s.eta);
        cfg.modified_relaxation = s.modified;
        cfg.adapt_eta = s.adapt_eta && spec.kind.uses_eta();
        cfg.adapt_lambda = spec.adapt_lambda(s);
        cfg.lambda_fd_step = s.fd_step;
        cfg.validate(groups)?;
        let adam = config.optim.adam();
        // Baselines are input-dependent; a task without inputs gets none.
        let wants_baseline = !matches!(spec.kind, EstimatorKind::Reinforce | EstimatorKind::Concrete) && feature_dim > 0;
        let (baseline, baseline_opt) = if wants_baseline && s.baseline == BaselineChoice::Auto {
            let net = BaselineNet::new(feature_dim, s.baseline_hidden, &mut baseline_seed.rng());
            let mut opt = AdamState::new(adam);
            let ids = net
                .params
                .groups()
                .iter()
                .map(|g| opt.register(g.name.clone(), g.value.len(), FAST_GROUP_MULTIPLIER))
                .collect();
            (Some(Baseline::Net(net)), Some((opt, ids)))
        } else {
            (None, None)
        };
        let tracked_groups: Vec<usize> = model
            .params()
            .groups()
            .iter()
            .enumerate()
            .filter(|(_, g)| g.role == GroupRole::Sampling)
            .map(|(i, _)| i)
            .collect();
        let len = tracked_groups.iter().map(|&i| model.params().group(i).value.len()).sum();
        Ok(Learner {
            spec: spec.clone(),
            cv: ControlVariateState::from_config(&cfg, adam),
            cfg,
            baseline,
            baseline_opt,
            tracker: VarianceTracker::new(len, config.variance.decay)?,
            tracked_groups,
        })
    }

    pub fn label(&self) -> String {
        self.spec.to_string()
    }

    /// Estimate on the given noise, then adapt and track. Never touches the model.
    pub fn observe(
        &mut self,
        model: &dyn StochasticObjective,
        input: &Tensor,
        noise: &Noise,
    ) -> rebar_core::Result<GradEstimate> {
        let est = estimate(model, input, noise, &self.cfg, self.baseline.as_ref())?;
        if self.cfg.adapt_lambda {
            self.cv
                .lambda_update(model, input, noise, &self.cfg, self.baseline.as_ref(), &est)?;
        }
        if self.cfg.adapt_eta {
            self.cv.eta_update(&est.base, &est.cv)?;
        }
        if let (Some(Baseline::Net(net)), Some((opt, ids))) = (self.baseline.as_mut(), self.baseline_opt.as_mut()) {
            for (g, id) in ids.iter().enumerate() {
                opt.step(*id, net.params.group_mut(g).value.data_mut(), est.baseline_grads[g].data())?;
            }
        }
        self.cv.apply_to(&mut self.cfg);
        let tracked: Vec<f64> = self
            .tracked_groups
            .iter()
            .flat_map(|&g| est.grads[g].data().iter().copied())
            .collect();
        self.tracker.update(&tracked);
        Ok(est)
    }

    pub fn baseline(&self) -> Option<&Baseline> {
        self.baseline.as_ref()
    }

    pub fn ln_variance(&self) -> f64 {
        self.tracker.ln_variance()
    }

    pub fn lambda(&self) -> f64 {
        if self.spec.kind.uses_temperature() {
            self.cfg.lambda()
        } else {
            f64::NAN
        }
    }

    pub fn eta_mean(&self) -> f64 {
        if self.spec.kind.uses_eta() {
            self.cfg.eta.iter().sum::<f64>() / self.cfg.eta.len() as f64
        } else {
            f64::NAN
        }
    }
}

fn feature_dim(model: &dyn StochasticObjective, input: &Tensor) -> usize {
    model.baseline_features(input).cols()
}

/// Running mean of the hard objective between log points.
#[derive(Default)]
struct Interval {
    sum: f64,
    n: u64,
}

impl Interval {
    fn push(&mut self, x: f64) {
        self.sum += x;
        self.n += 1;
    }

    fn take(&mut self) -> f64 {
        let m = self.sum / self.n.max(1) as f64;
        *self = Interval::default();
        m
    }
}

fn is_log_step(config: &RunConfig, done: u64) -> bool {
    done % config.log_interval == 0 || done == config.steps
}

fn wall_ms(config: &RunConfig, start: Instant) -> f64 {
    if config.wall_clock {
        start.elapsed().as_secs_f64() * 1e3
    } else {
        0.0
    }
}

fn better(sense: Sense, a: f64, b: f64) -> bool {
    match sense {
        Sense::Minimize => a < b,
        Sense::Maximize => a > b,
    }
}

fn summarize(
    config: &RunConfig,
    trial: usize,
    label: String,
    sense: Sense,
    records: &[RunRecord],
    steps: u64,
    error: Option<String>,
) -> TrialSummary {
    let final_objective = records.last().map_or(f64::NAN, |r| r.objective);
    let best_objective = records
        .iter()
        .map(|r| r.objective)
        .filter(|x| x.is_finite())
        .fold(f64::NAN, |acc, x| if acc.is_nan() || better(sense, x, acc) { x } else { acc });
    TrialSummary {
        trial,
        estimator: label,
        status: if error.is_some() { TrialStatus::Failed } else { TrialStatus::Ok },
        steps,
        final_objective,
        best_objective,
        config_hash: config.hash(),
        error,
        extra: BTreeMap::new(),
    }
}

/// Values reported after a trial: exact loss for the toy problem, held-out
/// bounds for SBNs when `evaluate` is set.
fn final_extras(
    config: &RunConfig,
    data: Option<&DataSplits>,
    model: &dyn StochasticObjective,
    trial: usize,
    evaluate: bool,
) -> anyhow::Result<BTreeMap<String, f64>> {
    let mut extra = BTreeMap::new();
    if config.task == Task::Toy {
        let alpha = model.params().group(0).value.item();
        let theta = rebar_core::autodiff::sigmoid(alpha);
        extra.insert("theta".into(), theta);
        extra.insert(
            "expected_loss".into(),
            rebar_core::models::toy_expected_loss(theta, config.toy.t),
        );
        return Ok(extra);
    }
    if evaluate {
        let d = data.expect("data loaded");
        let k = config.eval.samples.max(1);
        for (name, split) in [("valid", &d.valid), ("test", &d.test)] {
            let (single, multi) = heldout_bounds(config, model, split, k, trial)?;
            extra.insert(format!("{name}_bound_1"), single);
            extra.insert(format!("{name}_bound_{k}"), multi);
        }
    }
    Ok(extra)
}

/// Mean single-sample and `k`-sample bounds over a split, in chunks of 100 rows.
pub fn heldout_bounds(
    config: &RunConfig,
    model: &dyn StochasticObjective,
    split: &Dataset,
    k: usize,
    trial: usize,
) -> anyhow::Result<(f64, f64)> {
    let n = split.len();
    if n == 0 {
        return Ok((f64::NAN, f64::NAN));
    }
    let (mut s1, mut sk) = (0.0, 0.0);
    for (chunk, lo) in (0..n).step_by(100).enumerate() {
        let rows: Vec<usize> = (lo..(lo + 100).min(n)).collect();
        let input = split.batch(&rows);
        let mut rng = StreamKey::new(config.seed, trial as u64, chunk as u64, SITE_EVAL).rng();
        s1 += multisample_bound(model, &input, 1, &mut rng)?.iter().sum::<f64>();
        sk += multisample_bound(model, &input, k, &mut rng)?.iter().sum::<f64>();
    }
    Ok((s1 / n as f64, sk / n as f64))
}

struct TrialRun {
    records: Vec<RunRecord>,
    summaries: Vec<TrialSummary>,
}

fn train_trial(
    config: &RunConfig,
    data: Option<&DataSplits>,
    spec: &EstimatorSpec,
    trial: usize,
    evaluate: bool,
) -> anyhow::Result<TrialRun> {
    let mut model = build_model(config, data, trial)?;
    let first = batch(config, data, trial, 0);
    let mut learner = Learner::new(
        spec,
        config,
        &*model,
        feature_dim(&*model, &first),
        StreamKey::new(config.seed, trial as u64, 0, SITE_BASELINE),
    )?;
    let mut opt = ModelOptimizer::new(&*model, config.optim.adam());
    let label = learner.label();
    let start = Instant::now();
    let mut records = Vec::new();
    let mut interval = Interval::default();
    let mut error = None;
    let mut done = 0;
    for step in 0..config.steps {
        let input = batch(config, data, trial, step);
        let noise = step_noise(config, &*model, input.rows(), trial, step);
        let outcome = learner
            .observe(&*model, &input, &noise)
            .and_then(|est| opt.apply(&mut *model, &est).map(|_| est.objective));
        match outcome {
            Ok(obj) => interval.push(obj),
            Err(e) => {
                error = Some(format!("step {step}: {e}"));
                break;
            }
        }
        done = step + 1;
        if is_log_step(config, done) {
            records.push(RunRecord {
                step: done,
                trial,
                estimator: label.clone(),
                objective: interval.take(),
                ln_var: learner.ln_variance(),
                lambda: learner.lambda(),
                eta_mean: learner.eta_mean(),
                wall_ms: wall_ms(config, start),
            });
        }
    }
    let mut summary = summarize(config, trial, label, model.sense(), &records, done, error.clone());
    if error.is_none() {
        summary.extra = final_extras(config, data, &*model, trial, evaluate)?;
    }
    Ok(TrialRun {
        records,
        summaries: vec![summary],
    })
}

/// The shared-trajectory protocol: the first estimator drives the updates,
/// and every estimator (driver included) sees the same noise on the same
/// parameters at each probe step.
fn probe_trial(
    config: &RunConfig,
    data: Option<&DataSplits>,
    specs: &[EstimatorSpec],
    trial: usize,
) -> anyhow::Result<TrialRun> {
    let mut model = build_model(config, data, trial)?;
    let first = batch(config, data, trial, 0);
    let fdim = feature_dim(&*model, &first);
    let mut learners = specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Learner::new(
                s,
                config,
                &*model,
                fdim,
                StreamKey::new(config.seed, trial as u64, 0, SITE_BASELINE + i as u64),
            )
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut probe_errors: Vec<Option<String>> = vec![None; specs.len()];
    let mut opt = ModelOptimizer::new(&*model, config.optim.adam());
    let start = Instant::now();
    let mut records = Vec::new();
    let mut per_probe: Vec<Vec<RunRecord>> = vec![Vec::new(); specs.len()];
    let mut interval = Interval::default();
    let mut done = 0;
    for step in 0..config.steps {
        let input = batch(config, data, trial, step);
        let noise = step_noise(config, &*model, input.rows(), trial, step);
        if step % config.variance.probe_every == 0 {
            for (i, l) in learners.iter_mut().enumerate().skip(1) {
                if probe_errors[i].is_none() {
                    if let Err(e) = l.observe(&*model, &input, &noise) {
                        probe_errors[i] = Some(format!("step {step}: {e}"));
                    }
                }
            }
        }
        let outcome = learners[0]
            .observe(&*model, &input, &noise)
            .and_then(|est| opt.apply(&mut *model, &est).map(|_| est.objective));
        match outcome {
            Ok(obj) => interval.push(obj),
            Err(e) => {
                probe_errors[0] = Some(format!("step {step}: {e}"));
                break;
            }
        }
        done = step + 1;
        if is_log_step(config, done) {
            let objective = interval.take();
            let ms = wall_ms(config, start);
            for (i, l) in learners.iter().enumerate() {
                let r = RunRecord {
                    step: done,
                    trial,
                    estimator: l.label(),
                    objective,
                    ln_var: if probe_errors[i].is_some() { f64::NAN } else { l.ln_variance() },
                    lambda: l.lambda(),
                    eta_mean: l.eta_mean(),
                    wall_ms: ms,
                };
                per_probe[i].push(r.clone());
                records.push(r);
            }
        }
    }
    let sense = model.sense();
    let summaries = learners
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mut s = summarize(config, trial, l.label(), sense, &per_probe[i], done, probe_errors[i].clone());
            s.extra.insert("ln_var".into(), l.ln_variance());
            s.extra.insert("driver".into(), if i == 0 { 1.0 } else { 0.0 });
            s
        })
        .collect();
    Ok(TrialRun { records, summaries })
}

fn collect(runs: Vec<anyhow::Result<TrialRun>>) -> anyhow::Result<RunOutput> {
    let mut out = RunOutput::default();
    for run in runs {
        let run = run?;
        out.records.extend(run.records);
        out.summaries.extend(run.summaries);
    }
    Ok(out)
}

/// Trains every configured estimator for every trial. Output is ordered by
/// trial, then estimator, then step.
pub fn run_training(config: &RunConfig) -> anyhow::Result<RunOutput> {
    run_training_with(config, false)
}

/// `run_training` plus held-out bounds in each trial summary.
pub fn run_eval(config: &RunConfig) -> anyhow::Result<RunOutput> {
    run_training_with(config, true)
}

fn run_training_with(config: &RunConfig, evaluate: bool) -> anyhow::Result<RunOutput> {
    config.validate()?;
    let data = load_data(config)?;
    let specs = config.estimator_specs()?;
    let jobs: Vec<(usize, &EstimatorSpec)> = (0..config.trials)
        .flat_map(|t| specs.iter().map(move |s| (t, s)))
        .collect();
    let runs: Vec<_> = jobs
        .par_iter()
        .map(|&(trial, spec)| train_trial(config, data.as_ref(), spec, trial, evaluate))
        .collect();
    collect(runs)
}

/// One shared trajectory per trial, driven by the first estimator.
pub fn run_variance_probe(config: &RunConfig) -> anyhow::Result<RunOutput> {
    config.validate()?;
    let data = load_data(config)?;
    let specs = config.estimator_specs()?;
    let runs: Vec<_> = (0..config.trials)
        .into_par_iter()
        .map(|trial| probe_trial(config, data.as_ref(), &specs, trial))
        .collect();
    collect(runs)
}
