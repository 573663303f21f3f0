use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use obft_core::harness::{
    check_divergence_monotone, container, gen_matrix, load_config, mean_over_seeds, parse_kappas,
    partition_rows, run_bench, run_equivalence, run_kappa_sweep, run_partition_report,
    run_train_toy, write_report, ExperimentConfig, ExperimentReport,
};
use obft_core::model::{LoraConfig, ModelConfig};
use obft_core::numerics::Precision;
use obft_core::obfmat::KeySpec;
use obft_core::partition::KeyPolicy;
use obft_core::zones::{run_host_process, ServeMode, TransportConfig};
use obft_core::Error;

const EXIT_ASSERT: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "obft",
    version,
    about = "Split-execution simulator for obfuscated LoRA finetuning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare protected and plain logits for every seed.
    Equivalence(Common),
    /// Forward divergence and final training loss per key condition number.
    KappaSweep {
        #[command(flatten)]
        common: Common,
        /// Exit 1 if divergence decreases with kappa for any seed.
        #[arg(long)]
        assert: bool,
    },
    /// Parameter split between the trusted and host zones.
    PartitionReport {
        #[arg(long, default_value = "toy")]
        preset: String,
        #[arg(long, default_value = "per_block")]
        key_policy: KeyPolicy,
        /// Count the base model only.
        #[arg(long)]
        no_lora: bool,
        #[arg(long, default_value_t = 16)]
        lora_rank: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Protected adapter training on the byte corpus.
    TrainToy {
        #[command(flatten)]
        common: Common,
        /// Train the plain model alongside and report per-step differences.
        #[arg(long)]
        compare_plain: bool,
    },
    /// Protected/plain forward time ratio for each preset.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated presets; defaults to the configured model.
        #[arg(long, value_delimiter = ',')]
        presets: Vec<String>,
    },
    /// Draw one key and report its measured condition number.
    GenMatrix {
        /// `orthogonal`, `raw`, `identity` or a target condition number.
        #[arg(long, alias = "kappa", default_value = "orthogonal")]
        kind: KeySpec,
        #[arg(short, long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the key to an OBFT container.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Host zone over stdin/stdout (spawned by two-process runs).
    #[command(hide = true)]
    HostZone,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    InProcess,
    TwoProcess,
}

/// Settings shared by the experiment subcommands; flags override the
/// config file.
#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, alias = "preset")]
    model: Option<String>,
    /// Seed list: `0,1,2` or `0..10`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    kappas: Option<String>,
    #[arg(long)]
    key_kind: Option<KeySpec>,
    #[arg(long)]
    key_policy: Option<KeyPolicy>,
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    eval_windows: Option<usize>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "in-process")]
    mode: ModeArg,
}

enum Failure {
    Usage(String),
    Assert(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::Config { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => {
                let mut c = ExperimentConfig::default();
                c.apply_env()?;
                c
            }
        };
        let set =
            |cfg: &mut ExperimentConfig, k: &str, v: String| cfg.set(k, &v).map_err(Failure::Usage);
        if let Some(v) = &self.model {
            set(&mut cfg, "model", v.clone())?;
        }
        if let Some(v) = &self.seeds {
            set(&mut cfg, "seeds", v.clone())?;
        }
        if let Some(v) = &self.kappas {
            cfg.kappas = parse_kappas(v).map_err(Failure::Usage)?;
        }
        if let Some(v) = self.key_kind {
            cfg.key_kind = v;
        }
        if let Some(v) = self.key_policy {
            cfg.key_policy = v;
        }
        if let Some(v) = self.precision {
            cfg.precision = v;
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.seq_len {
            cfg.seq_len = v;
        }
        if let Some(v) = self.eval_windows {
            cfg.eval_windows = v;
        }
        if let Some(v) = self.repetitions {
            cfg.repetitions = v;
        }
        if let Some(v) = self.tolerance {
            cfg.tolerance = Some(v);
        }
        if let Some(v) = &self.corpus {
            cfg.corpus = Some(v.clone());
        }
        if let Some(v) = &self.output {
            cfg.output = Some(v.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn serve_mode(&self) -> Result<ServeMode, Failure> {
        Ok(match self.mode {
            ModeArg::InProcess => ServeMode::InProcess,
            ModeArg::TwoProcess => {
                let exe = std::env::current_exe()?;
                ServeMode::TwoProcess(TransportConfig::new(exe).arg("host-zone"))
            }
        })
    }
}

fn emit(report: &ExperimentReport, cfg: &ExperimentConfig) -> Outcome {
    match &cfg.output {
        Some(p) => write_report(report, p)?,
        None => print!("{}", report.to_csv_string()),
    }
    Ok(())
}

fn equivalence(common: &Common) -> Outcome {
    let cfg = common.resolve()?;
    let out = run_equivalence(&cfg, &common.serve_mode()?)?;
    emit(&out.report, &cfg)?;
    eprintln!(
        "max abs logit diff {:e} over {} seeds (tolerance {:e})",
        out.max_diff,
        cfg.seeds.len(),
        out.tolerance
    );
    if out.passed() {
        Ok(())
    } else {
        Err(Failure::Assert(format!(
            "max abs logit diff {:e} exceeds {:e}",
            out.max_diff, out.tolerance
        )))
    }
}

fn kappa_sweep(common: &Common, assert: bool) -> Outcome {
    let cfg = common.resolve()?;
    let report = run_kappa_sweep(&cfg)?;
    emit(&report, &cfg)?;
    for k in &cfg.kappas {
        let label = k.label();
        eprintln!(
            "kappa {label:>10}: mean divergence {:e}, mean final loss {:.4}",
            mean_over_seeds(&report, "divergence", &label).unwrap_or(f64::NAN),
            mean_over_seeds(&report, "final_loss", &label).unwrap_or(f64::NAN),
        );
    }
    if assert {
        check_divergence_monotone(&report, &cfg).map_err(Failure::Assert)?;
    }
    Ok(())
}

fn partition_report(
    preset: &str,
    policy: KeyPolicy,
    no_lora: bool,
    rank: usize,
    output: Option<&PathBuf>,
) -> Outcome {
    let model = ModelConfig::preset(preset).ok_or_else(|| {
        Failure::Usage(format!(
            "unknown preset {preset:?}; choose from {}",
            ModelConfig::PRESETS.join(", ")
        ))
    })?;
    let lora = LoraConfig {
        rank,
        ..LoraConfig::default()
    };
    lora.validate()?;
    let report = run_partition_report(&model, (!no_lora).then_some(&lora), policy);
    println!("preset: {preset}");
    print!("{}", report.to_record());
    if let Some(p) = output {
        let mut cfg = ExperimentConfig::default();
        cfg.model = preset.into();
        cfg.key_policy = policy;
        cfg.lora = lora;
        write_report(&partition_rows(&report, &cfg.digest()), p)?;
    }
    Ok(())
}

fn train_toy(common: &Common, compare_plain: bool) -> Outcome {
    let cfg = common.resolve()?;
    let report = run_train_toy(&cfg, &common.serve_mode()?, compare_plain)?;
    emit(&report, &cfg)?;
    for &seed in &cfg.seeds {
        let label = cfg.key_kind.label();
        let init = report
            .value("initial_eval_loss", seed, &label)
            .unwrap_or(f64::NAN);
        let fin = report
            .value("final_eval_loss", seed, &label)
            .unwrap_or(f64::NAN);
        eprintln!("seed {seed}: eval loss {init:.4} -> {fin:.4}");
        if let Some(d) = report.value("max_rel_loss_diff", seed, &label) {
            eprintln!("seed {seed}: max per-step relative loss difference {d:e}");
        }
    }
    Ok(())
}

fn bench(common: &Common, presets: &[String]) -> Outcome {
    let base = common.resolve()?;
    let mode = common.serve_mode()?;
    let presets = if presets.is_empty() {
        vec![base.model.clone()]
    } else {
        presets.to_vec()
    };
    let mut all = ExperimentReport::default();
    for p in &presets {
        let mut cfg = base.clone();
        cfg.set("model", p).map_err(Failure::Usage)?;
        let m = cfg.model_config()?;
        if m.vocab_size * m.d_model > 1 << 24 {
            return Err(Failure::Usage(format!(
                "preset {p:?} is for parameter accounting only; bench needs a model with weights"
            )));
        }
        cfg.seq_len = cfg.seq_len.min(m.context_len);
        let report = run_bench(&cfg, &mode)?;
        for r in report.rows.iter().filter(|r| r.metric == "ratio") {
            eprintln!("{p} seed {}: protected/plain ratio {:.3}", r.seed, r.value);
        }
        for mut r in report.rows {
            r.experiment = format!("bench.{p}");
            all.rows.push(r);
        }
    }
    emit(&all, &base)
}

fn gen_matrix_cmd(kind: KeySpec, n: usize, seed: u64, output: Option<&PathBuf>) -> Outcome {
    let key = gen_matrix(kind, n, seed)?;
    println!("kind: {}", kind.label());
    println!("n: {n}");
    println!("seed: {seed}");
    if let Some(t) = key.target_kappa {
        println!("target_kappa: {t}");
    }
    println!("measured_kappa: {}", key.measured_kappa);
    println!("inversion_error: {:e}", key.inversion_error());
    println!("redraws: {}", key.redraws);
    if let Some(p) = output {
        container::save_container(p, &container::key_to_tensors(&key))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Equivalence(c) => equivalence(&c),
        Command::KappaSweep { common, assert } => kappa_sweep(&common, assert),
        Command::PartitionReport {
            preset,
            key_policy,
            no_lora,
            lora_rank,
            output,
        } => partition_report(&preset, key_policy, no_lora, lora_rank, output.as_ref()),
        Command::TrainToy {
            common,
            compare_plain,
        } => train_toy(&common, compare_plain),
        Command::Bench { common, presets } => bench(&common, &presets),
        Command::GenMatrix {
            kind,
            n,
            seed,
            output,
        } => gen_matrix_cmd(kind, n, seed, output.as_ref()),
        Command::HostZone => unreachable!("handled before dispatch"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if matches!(cli.command, Command::HostZone) {
        return ExitCode::from(run_host_process().clamp(0, 255) as u8);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Assert(m)) => {
            eprintln!("assertion failed: {m}");
            ExitCode::from(EXIT_ASSERT)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_ASSERT)
        }
    }
}
