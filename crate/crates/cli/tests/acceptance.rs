//! One PASS/FAIL line per acceptance criterion.

use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use obft_core::harness::{
    mean_over_seeds, run_equivalence, run_kappa_sweep, run_training, ExperimentConfig,
    ExperimentReport,
};
use obft_core::model::{init_lora, init_params, LoraConfig, Mode, ModelConfig, TokenBatch};
use obft_core::numerics::{Precision, Scalar};
use obft_core::obfmat::{
    condition_number, random_orthogonal_at, random_prescribed_kappa_at, KeySpec,
};
use obft_core::partition::{partition_model, KeyPolicy};
use obft_core::zones::wire::{self, Message};
use obft_core::zones::{serve_zones, DataOwner, ServeMode, TransportConfig, SESSION_TOKEN_ENV};

const BIN: &str = env!("CARGO_BIN_EXE_obft");

type Check = Result<String, String>;

fn two_process() -> ServeMode {
    ServeMode::TwoProcess(TransportConfig::new(BIN).arg("host-zone"))
}

fn toy_config(precision: Precision) -> ExperimentConfig {
    ExperimentConfig {
        precision,
        ..ExperimentConfig::default()
    }
}

fn within(elapsed: Duration, budget: Duration, what: &str) -> Result<(), String> {
    if elapsed <= budget {
        Ok(())
    } else {
        Err(format!("{what} took {elapsed:.1?}, budget {budget:?}"))
    }
}

fn equivalence() -> Check {
    let mut notes = Vec::new();
    for (p, tol) in [(Precision::F32, 1e-4), (Precision::F64, 1e-10)] {
        let mut cfg = toy_config(p);
        cfg.seeds = (0..100).collect();
        cfg.key_kind = KeySpec::Orthogonal;
        let t0 = Instant::now();
        let out = run_equivalence(&cfg, &ServeMode::InProcess).map_err(|e| e.to_string())?;
        let dt = t0.elapsed();
        if !(out.max_diff <= tol) {
            return Err(format!(
                "{p}: max abs logit diff {:e} > {tol:e}",
                out.max_diff
            ));
        }
        within(dt, Duration::from_secs(120), &format!("{p} run"))?;
        notes.push(format!("{p} max diff {:.2e} ({dt:.1?})", out.max_diff));
    }
    Ok(notes.join(", "))
}

fn training() -> Check {
    let mut cfg = toy_config(Precision::F32);
    cfg.steps = 200;
    cfg.lr = SWEEP_LR;
    let t0 = Instant::now();
    let run = run_training(&cfg, 0, KeySpec::Orthogonal, &ServeMode::InProcess, true)
        .map_err(|e| e.to_string())?;
    let dt = t0.elapsed();
    let rel = run.max_rel_diff().expect("plain run requested");
    if !(rel <= 1e-3) {
        return Err(format!("per-step relative loss difference {rel:e} > 1e-3"));
    }
    let (first, last) = (run.protected[0], *run.protected.last().unwrap());
    if !(run.final_eval < run.initial_eval) {
        return Err(format!(
            "eval loss did not fall: {} -> {}",
            run.initial_eval, run.final_eval
        ));
    }
    within(dt, Duration::from_secs(600), "training")?;
    Ok(format!(
        "max rel diff {rel:.2e}; eval loss {:.4} -> {:.4}; step loss {first:.4} -> {last:.4} ({dt:.1?})",
        run.initial_eval, run.final_eval
    ))
}

fn gradients() -> Check {
    let cfg = ModelConfig::tiny().with_precision(Precision::F64);
    let h = 1e-3;
    let mut worst = 0.0f64;
    for draw in 0..20u64 {
        let params = init_params::<f64>(&cfg, draw).map_err(|e| e.to_string())?;
        let mut lora = init_lora::<f64>(
            &cfg,
            LoraConfig {
                rank: 4,
                ..Default::default()
            },
            draw,
        )
        .map_err(|e| e.to_string())?;
        lora.randomize_b(draw, 0.05);
        let (model, _) = partition_model(
            &params,
            Some(&lora),
            KeyPolicy::PerBlock,
            KeySpec::Orthogonal,
            draw,
        )
        .map_err(|e| e.to_string())?;
        let mut s = serve_zones(model, &ServeMode::InProcess).map_err(|e| e.to_string())?;
        let mut owner = DataOwner::new("fd", b"fd".to_vec());
        s.register_owner(owner.token());
        let token = owner.token().clone();
        let ids: Vec<u32> = (0..9u64)
            .map(|i| ((i * 2654435761 + draw * 131) % 256) as u32)
            .collect();
        let batch = TokenBatch::with_targets(ids[..8].to_vec(), ids[1..].to_vec())
            .map_err(|e| e.to_string())?;
        let env = owner.seal(&batch);
        let mode = Mode::Train { seed: draw };
        let (_, grads, _) = s
            .loss_and_grads_protected(&env, &token, mode)
            .map_err(|e| e.to_string())?;
        let g = grads.flatten();
        let base = s.export_lora_host().map_err(|e| e.to_string())?;
        let flat = base.flatten();
        let mut loss_at = |v: &[f64]| -> Result<f64, String> {
            let mut set = base.clone();
            set.assign_flat(v).map_err(|e| e.to_string())?;
            s.import_lora_host(&set).map_err(|e| e.to_string())?;
            Ok(s.loss_and_grads_protected(&env, &token, mode)
                .map_err(|e| e.to_string())?
                .0)
        };
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..flat.len() {
            let mut v = flat.clone();
            v[i] = flat[i] + h;
            let lp = loss_at(&v)?;
            v[i] = flat[i] - h;
            let lm = loss_at(&v)?;
            let fd = (lp - lm) / (2.0 * h);
            num += (g[i] - fd).powi(2);
            den += fd * fd;
        }
        let rel = (num / den).sqrt();
        worst = worst.max(rel);
        if !(rel <= 1e-4) {
            return Err(format!("draw {draw}: relative error {rel:e} > 1e-4"));
        }
    }
    Ok(format!("worst relative error {worst:.2e} over 20 draws"))
}

fn partition_fraction() -> Check {
    let out = Command::new(BIN)
        .args(["partition-report", "--preset", "gpt2-xl"])
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("exit {:?}", out.status.code()));
    }
    let text = String::from_utf8_lossy(&out.stdout);
    let f: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("tee_fraction: "))
        .ok_or("no tee_fraction line")?
        .trim()
        .parse()
        .map_err(|e| format!("{e}"))?;
    if (0.049..=0.055).contains(&f) {
        Ok(format!("tee_fraction {f}"))
    } else {
        Err(format!("tee_fraction {f} outside [0.049, 0.055]"))
    }
}

/// Toy-training step size for the sweep and the training check.
const SWEEP_LR: f64 = 0.1;

fn kappa_monotonicity() -> Check {
    let grid = [1.0, 8.0, 32.0, 128.0, 1e3, 1e4];
    let mut cfg = toy_config(Precision::F32);
    cfg.kappas = grid
        .iter()
        .map(|&k| KeySpec::Kappa(k))
        .chain([KeySpec::Raw])
        .collect();
    cfg.seeds = (0..10).collect();
    cfg.steps = 100;
    cfg.lr = SWEEP_LR;
    cfg.seq_len = 32;
    let t0 = Instant::now();
    let report = run_kappa_sweep(&cfg).map_err(|e| e.to_string())?;
    let dt = t0.elapsed();
    let mean = |m: &str, k: &str| mean_over_seeds(&report, m, k).unwrap_or(f64::NAN);
    let labels: Vec<String> = grid.iter().map(|&k| KeySpec::Kappa(k).label()).collect();
    let div: Vec<f64> = labels.iter().map(|k| mean("divergence", k)).collect();
    let fin: Vec<f64> = labels.iter().map(|k| mean("final_loss", k)).collect();
    let raw = mean("final_loss", "raw");
    let summary = format!(
        "divergence {}; final loss {}; raw {raw:.4} ({dt:.0?})",
        div.iter()
            .map(|d| format!("{d:.1e}"))
            .collect::<Vec<_>>()
            .join(" "),
        fin.iter()
            .map(|l| format!("{l:.4}"))
            .collect::<Vec<_>>()
            .join(" "),
    );
    print_sweep(&report, &labels);
    if let Some(i) = (1..div.len()).find(|&i| !(div[i] >= div[i - 1])) {
        return Err(format!(
            "mean divergence drops at kappa {}: {summary}",
            labels[i]
        ));
    }
    for (k, l) in grid.iter().zip(&fin).filter(|(k, _)| **k >= 1e3) {
        if !(*l >= 1.1 * fin[0]) {
            return Err(format!(
                "final loss at kappa {k} is {l:.4}, under 1.1 x {:.4}: {summary}",
                fin[0]
            ));
        }
    }
    let worst = fin.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(raw >= worst) {
        return Err(format!(
            "raw keys ({raw:.4}) beat the worst prescribed point ({worst:.4}): {summary}"
        ));
    }
    within(dt, Duration::from_secs(1800), "sweep")?;
    Ok(summary)
}

fn print_sweep(report: &ExperimentReport, labels: &[String]) {
    for k in labels.iter().map(String::as_str).chain(["raw"]) {
        println!(
            "    kappa {k:>6}: measured {:>9.1}  divergence {:.2e}  final loss {:.4}",
            mean_over_seeds(report, "measured_kappa", k).unwrap_or(f64::NAN),
            mean_over_seeds(report, "divergence", k).unwrap_or(f64::NAN),
            mean_over_seeds(report, "final_loss", k).unwrap_or(f64::NAN),
        );
    }
}

fn generators() -> Check {
    for n in [8usize, 64, 256] {
        for seed in 0..3 {
            let k = random_orthogonal_at(n, seed, 0).map_err(|e| e.to_string())?;
            if !k.r_inv.bitwise_eq(&k.r.transpose()) {
                return Err(format!("orthogonal n={n}: r_inv is not r^T"));
            }
            let kappa = condition_number(&k.r).map_err(|e| e.to_string())?;
            if !((kappa - 1.0).abs() <= 1e-6) {
                return Err(format!("orthogonal n={n}: kappa {kappa}"));
            }
        }
    }
    let mut worst = 0.0f64;
    for n in [64usize, 256] {
        for target in [8.0, 32.0, 128.0, 160.0] {
            let k = random_prescribed_kappa_at(n, target, 11, 0).map_err(|e| e.to_string())?;
            let kappa = condition_number(&k.r).map_err(|e| e.to_string())?;
            let rel = (kappa / target - 1.0).abs();
            worst = worst.max(rel);
            if !(rel <= 0.01) {
                return Err(format!("n={n} target {target}: measured {kappa}"));
            }
        }
    }
    Ok(format!(
        "orthogonal exact; worst prescribed-kappa error {worst:.1e}"
    ))
}

fn ledger_for<T: Scalar>(n_layer: usize) -> Result<(), String> {
    let cfg = ModelConfig::new(n_layer, 2, 16, 64, 32).with_precision(T::PRECISION);
    let params = init_params::<T>(&cfg, 3).map_err(|e| e.to_string())?;
    let (model, _) = partition_model(&params, None, KeyPolicy::PerBlock, KeySpec::Orthogonal, 3)
        .map_err(|e| e.to_string())?;
    let mut s = serve_zones(model, &ServeMode::InProcess).map_err(|e| e.to_string())?;
    let mut owner = DataOwner::new("l", b"l".to_vec());
    s.register_owner(owner.token());
    let seq = 10;
    let env = owner.seal(&TokenBatch::new((0..seq as u32).collect()));
    let (_, ledger) = s
        .forward_protected(&env, &owner.token().clone(), Mode::Eval)
        .map_err(|e| e.to_string())?;
    let size = T::PRECISION.size_of() as u64;
    if ledger.crossing_count() != 4 * n_layer {
        return Err(format!(
            "n_layer {n_layer}: {} crossings",
            ledger.crossing_count()
        ));
    }
    let expected = (4 * n_layer * seq * cfg.d_model) as u64;
    if ledger.total_elements() != expected {
        return Err(format!(
            "n_layer {n_layer}: {} elements, expected {expected}",
            ledger.total_elements()
        ));
    }
    if ledger.total_bytes() != expected * size
        || ledger
            .crossings
            .iter()
            .any(|c| c.bytes != c.elements * size)
    {
        return Err(format!(
            "n_layer {n_layer}: bytes do not match elements x {size}"
        ));
    }
    Ok(())
}

fn ledger() -> Check {
    for n in [1, 2, 4, 8] {
        ledger_for::<f32>(n)?;
        ledger_for::<f64>(n)?;
    }
    Ok("4 x n_layer crossings and exact byte totals for n_layer 1, 2, 4, 8 (f32 and f64)".into())
}

fn logits_for(seed: u64, mode: &ServeMode) -> Result<obft_core::numerics::Matrix<f32>, String> {
    let cfg = ModelConfig::toy();
    let params = init_params::<f32>(&cfg, seed).map_err(|e| e.to_string())?;
    let mut lora =
        init_lora::<f32>(&cfg, LoraConfig::default(), seed).map_err(|e| e.to_string())?;
    lora.randomize_b(seed, 0.02);
    let (model, _) = partition_model(
        &params,
        Some(&lora),
        KeyPolicy::PerBlock,
        KeySpec::Orthogonal,
        seed,
    )
    .map_err(|e| e.to_string())?;
    let mut s = serve_zones(model, mode).map_err(|e| e.to_string())?;
    let mut owner = DataOwner::new("m", b"m".to_vec());
    s.register_owner(owner.token());
    let batch = obft_core::harness::Corpus::default()
        .window(seed, 0, 64)
        .map_err(|e| e.to_string())?;
    let env = owner.seal(&batch);
    let (logits, _) = s
        .forward_protected(&env, &owner.token().clone(), Mode::Eval)
        .map_err(|e| e.to_string())?;
    s.shutdown().map_err(|e| e.to_string())?;
    Ok(logits)
}

fn truncated_frame() -> Result<(), String> {
    let token = b"fault-injection";
    let mut child = Command::new(BIN)
        .arg("host-zone")
        .env(SESSION_TOKEN_ENV, hex_encode(token))
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| e.to_string())?;
    {
        let mut stdin = child.stdin.take().unwrap();
        let hello = wire::encode_frame(&Message::Hello {
            version: wire::PROTOCOL_VERSION,
            precision: Precision::F32.code(),
        });
        stdin.write_all(&hello).map_err(|e| e.to_string())?;
        stdin
            .write_all(&wire::encode_frame(&Message::Auth(token.to_vec())))
            .map_err(|e| e.to_string())?;
        let tensor = wire::encode_frame(&Message::Tensor(wire::WireTensor::from_slice(
            "x",
            vec![4],
            &[1f32; 4],
        )));
        stdin
            .write_all(&tensor[..tensor.len() - 5])
            .map_err(|e| e.to_string())?;
    }
    let deadline = Instant::now() + Duration::from_secs(10);
    let status = loop {
        if let Some(st) = child.try_wait().map_err(|e| e.to_string())? {
            break st;
        }
        if Instant::now() > deadline {
            let _ = child.kill();
            return Err("host did not exit after a truncated frame".into());
        }
        std::thread::sleep(Duration::from_millis(10));
    };
    let mut out = Vec::new();
    child
        .stdout
        .take()
        .unwrap()
        .read_to_end(&mut out)
        .map_err(|e| e.to_string())?;
    let mut r = &out[..];
    let mut saw_decode_error = false;
    while let Ok(msg) = wire::read_frame(&mut r) {
        if let Message::Error { code, .. } = msg {
            saw_decode_error |= code == wire::code::DECODE;
        }
    }
    if status.success() {
        return Err("host exited 0 after a truncated frame".into());
    }
    if !saw_decode_error {
        return Err("no DECODE error frame before exit".into());
    }
    Ok(())
}

fn hex_encode(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

fn modes() -> Check {
    for seed in 0..10 {
        let a = logits_for(seed, &ServeMode::InProcess)?;
        let b = logits_for(seed, &two_process())?;
        if !a.bitwise_eq(&b) {
            return Err(format!(
                "seed {seed}: logits differ by {:e}",
                a.max_abs_diff(&b)
            ));
        }
    }
    truncated_frame()?;
    Ok(
        "bitwise-identical logits for 10 seeds; truncated frame gives DECODE error and exit != 0"
            .into(),
    )
}

fn bench() -> Check {
    let out = Command::new(BIN)
        .args([
            "bench",
            "--presets",
            "tiny,toy",
            "--repetitions",
            "5",
            "--seq-len",
            "64",
        ])
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "exit {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    let report = ExperimentReport::read_csv(&out.stdout[..]).map_err(|e| e.to_string())?;
    let ratios: Vec<(String, f64)> = report
        .rows
        .iter()
        .filter(|r| r.metric == "ratio")
        .map(|r| (r.experiment.clone(), r.value))
        .collect();
    if ratios.len() != 2 {
        return Err(format!("expected 2 ratio rows, got {}", ratios.len()));
    }
    if let Some((p, r)) = ratios.iter().find(|(_, r)| !(*r >= 1.0)) {
        return Err(format!("{p}: ratio {r} < 1"));
    }
    Ok(ratios
        .iter()
        .map(|(p, r)| format!("{p} ratio {r:.2}"))
        .collect::<Vec<_>>()
        .join(", "))
}

fn main() {
    // `cargo test -- --list` and filters should not run the suite.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let only: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Check); 9] = [
        ("1 equivalence", equivalence),
        ("2 training", training),
        ("3 gradients", gradients),
        ("4 partition", partition_fraction),
        ("5 kappa", kappa_monotonicity),
        ("6 generators", generators),
        ("7 ledger", ledger),
        ("8 modes", modes),
        ("9 bench", bench),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        match f() {
            Ok(msg) => println!("PASS [{name}] {msg} [{:.1?}]", t0.elapsed()),
            Err(msg) => {
                failed += 1;
                println!("FAIL [{name}] {msg} [{:.1?}]", t0.elapsed());
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
