use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::corpus::Corpus;
use super::report::ExperimentReport;
use crate::error::{Error, Result};
use crate::model::{
    cross_entropy, forward_plain, init_lora, init_params, loss_and_grads_plain, loss_plain,
    LoraAdapters, LoraSet, Mode, ModelConfig, PlainParams, TokenBatch,
};
use crate::numerics::{Precision, Scalar};
use crate::obfmat::{generate_key, KeySpec, ObfuscationKey};
use crate::partition::{partition_model, KeyPolicy, PartitionReport};
use crate::zones::{measure_slowdown, serve_zones, DataOwner, ServeMode, TeeSession};

/// Standard deviation used to make fresh adapters non-trivial in
/// equivalence checks (standard init has `B = 0`).
const EQUIVALENCE_B_STD: f64 = 0.02;

/// Default max abs logit difference for the equivalence check.
pub fn default_tolerance(p: Precision) -> f64 {
    match p {
        Precision::F32 => 1e-4,
        Precision::F64 => 1e-10,
    }
}

macro_rules! dispatch {
    ($p:expr, $f:ident($($a:expr),*)) => {
        match $p {
            Precision::F32 => $f::<f32>($($a),*),
            Precision::F64 => $f::<f64>($($a),*),
        }
    };
}

fn owner_for(session: &mut TeeSession<impl Scalar>) -> DataOwner {
    let owner = DataOwner::new("experiment", b"experiment-secret".to_vec());
    session.register_owner(owner.token());
    owner
}

fn serve<T: Scalar>(
    params: &PlainParams<T>,
    adapters: Option<&LoraAdapters<T>>,
    policy: KeyPolicy,
    spec: KeySpec,
    seed: u64,
    mode: &ServeMode,
) -> Result<(TeeSession<T>, DataOwner, f64)> {
    let (model, _) = partition_model(params, adapters, policy, spec, seed)?;
    let kappa = model.tee.max_key_kappa();
    let mut session = serve_zones(model, mode)?;
    let owner = owner_for(&mut session);
    Ok((session, owner, kappa))
}

fn protected_eval_loss<T: Scalar>(
    session: &mut TeeSession<T>,
    owner: &mut DataOwner,
    windows: &[TokenBatch],
) -> Result<f64> {
    let mut total = 0.0;
    for w in windows {
        let env = owner.seal(w);
        let (logits, _) = session.forward_protected(&env, &owner.token().clone(), Mode::Eval)?;
        total += cross_entropy(&logits, w.targets.as_ref().ok_or(Error::MissingTargets)?)?.0;
    }
    Ok(total / windows.len() as f64)
}

// ---------------------------------------------------------------- equivalence

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceOutcome {
    pub report: ExperimentReport,
    /// Largest max-abs logit difference over all seeds.
    pub max_diff: f64,
    pub tolerance: f64,
}

impl EquivalenceOutcome {
    pub fn passed(&self) -> bool {
        self.max_diff <= self.tolerance
    }
}

fn equivalence_typed<T: Scalar>(
    cfg: &ExperimentConfig,
    mode: &ServeMode,
) -> Result<EquivalenceOutcome> {
    let m = cfg.model_config()?.with_precision(T::PRECISION);
    let corpus = Corpus::resolve(cfg.corpus.as_deref())?;
    let digest = cfg.digest();
    let label = cfg.key_kind.label();
    let mut report = ExperimentReport::default();
    let mut max_diff = 0.0f64;
    for &seed in &cfg.seeds {
        let params = init_params::<T>(&m, seed)?;
        let mut adapters = init_lora::<T>(&m, cfg.lora, seed)?;
        adapters.randomize_b(seed, EQUIVALENCE_B_STD);
        let (mut session, mut owner, _) = serve(
            &params,
            Some(&adapters),
            cfg.key_policy,
            cfg.key_kind,
            seed,
            mode,
        )?;
        let batch = corpus.eval_windows(seed, 1, cfg.seq_len)?.remove(0);
        let env = owner.seal(&batch);
        let (protected, _) = session.forward_protected(&env, &owner.token().clone(), Mode::Eval)?;
        session.shutdown()?;
        let plain = forward_plain(&params, Some(&adapters), &batch, Mode::Eval)?;
        let diff = protected.max_abs_diff(&plain);
        let targets = batch.targets.as_ref().ok_or(Error::MissingTargets)?;
        let loss_diff =
            (cross_entropy(&protected, targets)?.0 - cross_entropy(&plain, targets)?.0).abs();
        max_diff = if diff.is_nan() {
            f64::NAN
        } else {
            max_diff.max(diff)
        };
        report.push(
            "equivalence",
            &digest,
            seed,
            label.as_str(),
            "max_abs_logit_diff",
            diff,
        );
        report.push(
            "equivalence",
            &digest,
            seed,
            label.as_str(),
            "loss_abs_diff",
            loss_diff,
        );
    }
    Ok(EquivalenceOutcome {
        report,
        max_diff,
        tolerance: cfg
            .tolerance
            .unwrap_or_else(|| default_tolerance(T::PRECISION)),
    })
}

/// Protected vs plain logits for every seed, with fresh non-zero adapters.
pub fn run_equivalence(cfg: &ExperimentConfig, mode: &ServeMode) -> Result<EquivalenceOutcome> {
    cfg.validate()?;
    dispatch!(cfg.precision, equivalence_typed(cfg, mode))
}

// ------------------------------------------------------------------- training

/// Losses of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    /// Mean training loss of each protected step.
    pub protected: Vec<f64>,
    /// The same steps on the plain model, when requested.
    pub plain: Option<Vec<f64>>,
    pub initial_eval: f64,
    pub final_eval: f64,
    pub max_key_kappa: f64,
}

impl TrainingRun {
    /// Largest per-step `|protected − plain| / |plain|`.
    pub fn max_rel_diff(&self) -> Option<f64> {
        self.plain.as_ref().map(|plain| {
            self.protected
                .iter()
                .zip(plain)
                .map(|(p, q)| (p - q).abs() / q.abs())
                .fold(0.0, f64::max)
        })
    }
}

fn plain_step<T: Scalar>(
    params: &PlainParams<T>,
    adapters: &mut LoraAdapters<T>,
    batches: &[TokenBatch],
    modes: &[Mode],
    lr: f64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut sum: Option<LoraSet<T>> = None;
    for (b, &mode) in batches.iter().zip(modes) {
        let (loss, g) = loss_and_grads_plain(params, adapters, b, mode)?;
        total += loss;
        match &mut sum {
            None => sum = Some(g),
            Some(s) => {
                for (acc, x) in s.tensors_mut().zip(g.tensors()) {
                    acc.add_assign(x)?;
                }
            }
        }
    }
    let n = batches.len() as f64;
    crate::model::sgd_step_in_place(&mut adapters.set, &sum.expect("at least one batch"), lr / n)?;
    Ok(total / n)
}

fn training_typed<T: Scalar>(
    cfg: &ExperimentConfig,
    seed: u64,
    spec: KeySpec,
    mode: &ServeMode,
    compare_plain: bool,
) -> Result<TrainingRun> {
    let m = cfg.model_config()?.with_precision(T::PRECISION);
    let corpus = Corpus::resolve(cfg.corpus.as_deref())?;
    let params = init_params::<T>(&m, seed)?;
    let adapters = init_lora::<T>(&m, cfg.lora, seed)?;
    let (mut session, mut owner, max_key_kappa) =
        serve(&params, Some(&adapters), cfg.key_policy, spec, seed, mode)?;
    let token = owner.token().clone();
    let eval = corpus.eval_windows(seed, cfg.eval_windows, cfg.seq_len)?;
    let initial_eval = protected_eval_loss(&mut session, &mut owner, &eval)?;

    let mut plain_adapters = adapters.clone();
    let mut protected = Vec::with_capacity(cfg.steps);
    let mut plain = compare_plain.then(|| Vec::with_capacity(cfg.steps));
    let b = cfg.batch_size;
    for step in 0..cfg.steps {
        let batches = (0..b)
            .map(|i| corpus.train_window(seed, step, i, b, cfg.seq_len))
            .collect::<Result<Vec<_>>>()?;
        let modes: Vec<Mode> = (0..b)
            .map(|i| Mode::Train {
                seed: (step * b + i) as u64,
            })
            .collect();
        let envs: Vec<_> = batches.iter().map(|x| owner.seal(x)).collect();
        let loss = match session.train_step_accumulated(&envs, &token, cfg.lr, &modes) {
            Err(Error::Diverged { loss, kappa, .. }) => {
                return Err(Error::Diverged { step, loss, kappa });
            }
            other => other?.0,
        };
        protected.push(loss);
        if let Some(p) = plain.as_mut() {
            p.push(plain_step(
                &params,
                &mut plain_adapters,
                &batches,
                &modes,
                cfg.lr,
            )?);
        }
    }
    let final_eval = protected_eval_loss(&mut session, &mut owner, &eval)?;
    session.shutdown()?;
    Ok(TrainingRun {
        protected,
        plain,
        initial_eval,
        final_eval,
        max_key_kappa,
    })
}

/// Trains the adapters through the protected path for `cfg.steps` steps.
/// With `compare_plain`, the plain model is trained on the same windows and
/// dropout masks alongside.
pub fn run_training(
    cfg: &ExperimentConfig,
    seed: u64,
    spec: KeySpec,
    mode: &ServeMode,
    compare_plain: bool,
) -> Result<TrainingRun> {
    cfg.validate()?;
    dispatch!(
        cfg.precision,
        training_typed(cfg, seed, spec, mode, compare_plain)
    )
}

/// `train-toy`: one training run per seed with the configured key kind.
pub fn run_train_toy(
    cfg: &ExperimentConfig,
    mode: &ServeMode,
    compare_plain: bool,
) -> Result<ExperimentReport> {
    let digest = cfg.digest();
    let label = cfg.key_kind.label();
    let mut report = ExperimentReport::default();
    for &seed in &cfg.seeds {
        let run = run_training(cfg, seed, cfg.key_kind, mode, compare_plain)?;
        let mut push =
            |metric: String, v: f64| report.push("train", &digest, seed, label.as_str(), metric, v);
        push("initial_eval_loss".into(), run.initial_eval);
        push("final_eval_loss".into(), run.final_eval);
        for (i, l) in run.protected.iter().enumerate() {
            push(format!("loss.{i}"), *l);
        }
        if let Some(plain) = &run.plain {
            for (i, l) in plain.iter().enumerate() {
                push(format!("plain_loss.{i}"), *l);
            }
            push(
                "max_rel_loss_diff".into(),
                run.max_rel_diff().unwrap_or(f64::NAN),
            );
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------- kappa sweep

/// Metrics recorded for every `(κ, seed)` point, in row order.
pub const SWEEP_METRICS: [&str; 5] = [
    "measured_kappa",
    "divergence",
    "initial_loss",
    "final_loss",
    "diverged",
];

#[derive(Debug, Clone, PartialEq)]
struct SweepPoint {
    measured_kappa: f64,
    divergence: f64,
    initial_loss: f64,
    final_loss: f64,
    diverged: bool,
}

fn sweep_point_typed<T: Scalar>(
    cfg: &ExperimentConfig,
    spec: KeySpec,
    seed: u64,
    corpus: &Corpus,
) -> Result<SweepPoint> {
    let m = cfg.model_config()?.with_precision(T::PRECISION);
    let params = init_params::<T>(&m, seed)?;
    let adapters = init_lora::<T>(&m, cfg.lora, seed)?;
    let (mut session, mut owner, measured_kappa) = serve(
        &params,
        Some(&adapters),
        cfg.key_policy,
        spec,
        seed,
        &ServeMode::InProcess,
    )?;
    let token = owner.token().clone();
    let eval = corpus.eval_windows(seed, cfg.eval_windows, cfg.seq_len)?;

    let mut divergence = 0.0f64;
    let mut initial = 0.0;
    for w in &eval {
        let (protected, _) = session.forward_protected(&owner.seal(w), &token, Mode::Eval)?;
        let plain = forward_plain(&params, Some(&adapters), w, Mode::Eval)?;
        let d = protected.max_abs_diff(&plain);
        divergence = if d.is_nan() || divergence.is_nan() {
            f64::NAN
        } else {
            divergence.max(d)
        };
        initial += cross_entropy(&protected, w.targets.as_ref().ok_or(Error::MissingTargets)?)?.0;
    }
    let initial_loss = initial / eval.len() as f64;

    let b = cfg.batch_size;
    let mut diverged = false;
    for step in 0..cfg.steps {
        let envs = (0..b)
            .map(|i| {
                corpus
                    .train_window(seed, step, i, b, cfg.seq_len)
                    .map(|x| owner.seal(&x))
            })
            .collect::<Result<Vec<_>>>()?;
        let modes: Vec<Mode> = (0..b)
            .map(|i| Mode::Train {
                seed: (step * b + i) as u64,
            })
            .collect();
        match session.train_step_accumulated(&envs, &token, cfg.lr, &modes) {
            Ok(_) => {}
            Err(Error::Diverged { .. }) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let final_loss = if diverged {
        f64::INFINITY
    } else {
        let l = protected_eval_loss(&mut session, &mut owner, &eval)?;
        if l.is_finite() {
            l
        } else {
            diverged = true;
            f64::INFINITY
        }
    };
    session.shutdown()?;
    Ok(SweepPoint {
        measured_kappa,
        divergence,
        initial_loss,
        final_loss,
        diverged,
    })
}

/// Forward divergence and post-training loss for every `(κ, seed)` pair.
///
/// Points run in parallel and are merged in `(κ, seed)` order, so the
/// report is identical for any thread count. A run whose loss stops being
/// finite is recorded with `final_loss = inf` and `diverged = 1`.
pub fn run_kappa_sweep(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let corpus = Corpus::resolve(cfg.corpus.as_deref())?;
    let digest = cfg.digest();
    let points: Vec<(KeySpec, u64)> = cfg
        .kappas
        .iter()
        .flat_map(|&k| cfg.seeds.iter().map(move |&s| (k, s)))
        .collect();
    let results: Vec<Result<SweepPoint>> = points
        .par_iter()
        .map(|&(k, s)| dispatch!(cfg.precision, sweep_point_typed(cfg, k, s, &corpus)))
        .collect();
    let mut report = ExperimentReport::default();
    for ((spec, seed), r) in points.into_iter().zip(results) {
        let p = r?;
        let label = spec.label();
        let values = [
            p.measured_kappa,
            p.divergence,
            p.initial_loss,
            p.final_loss,
            f64::from(u8::from(p.diverged)),
        ];
        for (metric, v) in SWEEP_METRICS.iter().zip(values) {
            report.push("kappa_sweep", &digest, seed, label.as_str(), *metric, v);
        }
    }
    Ok(report)
}

/// Checks that divergence does not decrease with κ within each seed. Only
/// numeric κ points take part; `raw` and `orthogonal` have no target.
pub fn check_divergence_monotone(
    report: &ExperimentReport,
    cfg: &ExperimentConfig,
) -> std::result::Result<(), String> {
    let mut grid: Vec<f64> = cfg
        .kappas
        .iter()
        .filter_map(|k| match k {
            KeySpec::Kappa(x) => Some(*x),
            _ => None,
        })
        .collect();
    grid.sort_by(f64::total_cmp);
    for &seed in &cfg.seeds {
        let mut prev: Option<(f64, f64)> = None;
        for &k in &grid {
            let label = KeySpec::Kappa(k).label();
            let d = report
                .value("divergence", seed, &label)
                .ok_or_else(|| format!("no divergence row for seed {seed}, kappa {label}"))?;
            if let Some((pk, pd)) = prev {
                if d.is_nan() || d < pd {
                    return Err(format!(
                        "seed {seed}: divergence {d:e} at kappa {label} is below {pd:e} at kappa {pk}"
                    ));
                }
            }
            prev = Some((k, d));
        }
    }
    Ok(())
}

/// Mean of `metric` over seeds for one κ label; non-finite values propagate.
pub fn mean_over_seeds(report: &ExperimentReport, metric: &str, kappa: &str) -> Option<f64> {
    let v: Vec<f64> = report
        .rows
        .iter()
        .filter(|r| r.metric == metric && r.kappa == kappa)
        .map(|r| r.value)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

// ------------------------------------------------------------- partition etc.

/// Parameter split for a preset, with or without adapters.
pub fn run_partition_report(
    model: &ModelConfig,
    lora: Option<&crate::model::LoraConfig>,
    policy: KeyPolicy,
) -> PartitionReport {
    PartitionReport::for_config(model, lora, policy)
}

pub fn partition_rows(report: &PartitionReport, digest: &str) -> ExperimentReport {
    let mut out = ExperimentReport::default();
    for (metric, v) in [
        ("tee_param_count", report.tee_param_count as f64),
        ("host_param_count", report.host_param_count as f64),
        ("tee_fraction", report.tee_fraction),
        ("key_scalars", report.key_scalars as f64),
    ] {
        out.push("partition", digest, 0, "-", metric, v);
    }
    out
}

fn bench_typed<T: Scalar>(cfg: &ExperimentConfig, mode: &ServeMode) -> Result<ExperimentReport> {
    let m = cfg.model_config()?.with_precision(T::PRECISION);
    let corpus = Corpus::resolve(cfg.corpus.as_deref())?;
    let digest = cfg.digest();
    let label = cfg.key_kind.label();
    let mut report = ExperimentReport::default();
    for &seed in &cfg.seeds {
        let params = init_params::<T>(&m, seed)?;
        let adapters = init_lora::<T>(&m, cfg.lora, seed)?;
        let batch = corpus.eval_windows(seed, 1, cfg.seq_len)?.remove(0);
        let s = measure_slowdown(
            &params,
            Some(&adapters),
            &batch,
            cfg.repetitions,
            cfg.key_kind,
            mode,
        )?;
        for (metric, v) in [
            ("t_protected", s.t_protected),
            ("t_plain", s.t_plain),
            ("ratio", s.ratio),
        ] {
            report.push("bench", &digest, seed, label.as_str(), metric, v);
        }
    }
    Ok(report)
}

/// Median forward wall time of the protected and plain paths.
pub fn run_bench(cfg: &ExperimentConfig, mode: &ServeMode) -> Result<ExperimentReport> {
    cfg.validate()?;
    dispatch!(cfg.precision, bench_typed(cfg, mode))
}

/// One key of the requested family.
pub fn gen_matrix(spec: KeySpec, n: usize, seed: u64) -> Result<ObfuscationKey> {
    if n == 0 {
        return Err(Error::InvalidArgument("matrix size must be >= 1".into()));
    }
    generate_key(spec, n, seed, 0)
}

/// Eval loss of the plain model; a reference for the protected numbers.
pub fn plain_eval_loss<T: Scalar>(
    params: &PlainParams<T>,
    adapters: Option<&LoraAdapters<T>>,
    windows: &[TokenBatch],
) -> Result<f64> {
    let mut total = 0.0;
    for w in windows {
        total += loss_plain(params, adapters, w, Mode::Eval)?;
    }
    Ok(total / windows.len() as f64)
}
