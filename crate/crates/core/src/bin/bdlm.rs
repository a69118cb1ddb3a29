//! Command-line entry points for the blockwise diffusion LM pipeline:
//! dataset generation, SFT, RL, evaluation, serving, and the two
//! benchmark commands. All outputs are flat CSV/JSON under the run
//! directory.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use bdlm_core::config::{RunConfig, RunManifest};
use bdlm_core::decoder::{DecodeMode, DecodePolicy};
use bdlm_core::tensor::{AdamConfig, AdamW};
use bdlm_core::{bench, diffusion, dipo, model, service, tasks};

#[derive(Parser)]
#[command(name = "bdlm", about = "blockwise diffusion LM training pipeline", version)]
struct Cli {
    /// JSON config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. --set sft.lr=3e-4. Repeatable.
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
    /// Seed applied to every stage RNG.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; env BDLM_OUT wins over this flag.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/eval task datasets as JSONL.
    GenData,
    /// Supervised blockwise-diffusion training from scratch.
    Sft,
    /// DiPO reinforcement learning from the SFT checkpoint.
    Rl {
        /// Use a running remote service instead of an in-process one.
        #[arg(long)]
        remote: bool,
    },
    /// Verifier-scored evaluation with a threshold sweep.
    Eval {
        /// Checkpoint to evaluate; defaults to rl.ckpt, then sft.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the rollout service on the configured address.
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Expanded-mask loss vs sequential per-block forwards.
    BenchMask,
    /// Persistent-service RL loop vs save/reload baseline.
    BenchLoop,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> bdlm_core::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg = cfg.apply_overrides(&cli.overrides)?;
    let seed = cli.seed.unwrap_or(cfg.data.seed);
    if cli.seed.is_some() {
        cfg.reseed(seed);
    }
    let out = std::env::var_os("BDLM_OUT").map(PathBuf::from).unwrap_or(cli.out.clone());
    std::fs::create_dir_all(&out)?;

    match cli.command {
        Command::GenData => cmd_gen_data(&cfg, &out, seed),
        Command::Sft => cmd_sft(&cfg, &out, seed),
        Command::Rl { remote } => cmd_rl(&cfg, &out, seed, remote),
        Command::Eval { checkpoint } => cmd_eval(&cfg, &out, seed, checkpoint),
        Command::Serve { checkpoint } => cmd_serve(&cfg, &out, checkpoint),
        Command::BenchMask => cmd_bench_mask(&cfg, &out, seed),
        Command::BenchLoop => cmd_bench_loop(&cfg, &out, seed),
    }
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> bdlm_core::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{header}")?;
    for row in rows {
        writeln!(f, "{row}")?;
    }
    Ok(())
}

fn load_or_gen_data(cfg: &RunConfig, out: &Path) -> bdlm_core::Result<(Vec<tasks::TaskSample>, Vec<tasks::TaskSample>)> {
    let train_path = out.join("train.jsonl");
    let eval_path = out.join("eval.jsonl");
    if train_path.exists() && eval_path.exists() {
        return Ok((tasks::read_jsonl(&train_path)?, tasks::read_jsonl(&eval_path)?));
    }
    let total = cfg.data.train_n + cfg.data.eval_n;
    let all = tasks::gen_dataset(cfg.data.seed, total, cfg.data.digits)?;
    let (train, eval) = all.split_at(cfg.data.train_n);
    tasks::write_jsonl(train, &train_path)?;
    tasks::write_jsonl(eval, &eval_path)?;
    Ok((train.to_vec(), eval.to_vec()))
}

fn cmd_gen_data(cfg: &RunConfig, out: &Path, seed: u64) -> bdlm_core::Result<()> {
    let (train, eval) = load_or_gen_data(cfg, out)?;
    RunManifest::new("gen-data", cfg, seed).write(out)?;
    println!("wrote {} train / {} eval samples to {}", train.len(), eval.len(), out.display());
    Ok(())
}

fn cmd_sft(cfg: &RunConfig, out: &Path, seed: u64) -> bdlm_core::Result<()> {
    let (train, _) = load_or_gen_data(cfg, out)?;
    let params = model::init_params(&cfg.model)?;
    let (params, metrics) = diffusion::sft_train(&cfg.model, &cfg.sft, &train, params)?;
    model::save_checkpoint(&params, &out.join("sft.ckpt"))?;
    let rows: Vec<String> = metrics
        .iter()
        .map(|m| format!("{},{},{},{},{:.3}", m.step, m.loss, m.lr, m.masked_frac, m.wall_ms))
        .collect();
    write_csv(&out.join("sft_metrics.csv"), "step,loss,lr,masked_frac,wall_ms", &rows)?;
    RunManifest::new("sft", cfg, seed).write(out)?;
    if let Some(last) = metrics.last() {
        println!("sft done: {} steps, final loss {:.4}", cfg.sft.steps, last.loss);
    }
    Ok(())
}

fn cmd_rl(cfg: &RunConfig, out: &Path, seed: u64, remote: bool) -> bdlm_core::Result<()> {
    let (train, _) = load_or_gen_data(cfg, out)?;
    let mut params = model::load_checkpoint(&out.join("sft.ckpt"))?;
    let rl = &cfg.rl;
    rl.validate()?;

    let mut handle = if remote {
        let mut client = service::Client::connect(&cfg.service.addr)?;
        // the remote service may hold stale weights; push ours first
        client.update_weights(&model::params_to_bytes(&params)?)?;
        service::ServiceHandle::Remote(client)
    } else {
        service::ServiceHandle::InProcess(std::sync::Arc::new(
            service::ServiceState::from_params(params.clone()),
        ))
    };
    let refs = dipo::PolicyRefs {
        reference: (rl.objective == dipo::Objective::Eq7WithKl).then(|| params.clone()),
    };
    let mut opt = AdamW::new(AdamConfig { lr: rl.lr, ..Default::default() });
    let mut rows = Vec::with_capacity(rl.steps);
    for step in 0..rl.steps {
        let start = (step * rl.batch_prompts) % train.len();
        let batch: Vec<tasks::TaskSample> = (0..rl.batch_prompts)
            .map(|i| train[(start + i) % train.len()].clone())
            .collect();
        let r = dipo::rl_train_step(&mut handle, &mut params, &mut opt, &refs, rl, &batch, step)?;
        println!(
            "step {:>3}  reward {:.3}  pass {:.3}  clip {:.3}  kl {:.4}  |g| {:.3}",
            r.step, r.mean_reward, r.pass_rate, r.clip_frac, r.kl, r.grad_norm
        );
        rows.push(format!(
            "{},{},{},{},{},{},{:.3},{:.3},{:.3}",
            r.step, r.mean_reward, r.pass_rate, r.clip_frac, r.kl, r.grad_norm,
            r.rollout_ms, r.train_ms, r.update_ms
        ));
    }
    model::save_checkpoint(&params, &out.join("rl.ckpt"))?;
    write_csv(
        &out.join("rl_metrics.csv"),
        "step,mean_reward,pass_rate,clip_frac,kl,grad_norm,rollout_ms,train_ms,update_ms",
        &rows,
    )?;
    RunManifest::new("rl", cfg, seed).write(out)?;
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, out: &Path, seed: u64, checkpoint: Option<PathBuf>) -> bdlm_core::Result<()> {
    let (_, eval) = load_or_gen_data(cfg, out)?;
    let path = checkpoint.unwrap_or_else(|| {
        let rl = out.join("rl.ckpt");
        if rl.exists() { rl } else { out.join("sft.ckpt") }
    });
    let params = model::load_checkpoint(&path)?;
    let mut rows = Vec::new();

    let static_policy = DecodePolicy {
        mode: DecodeMode::Static,
        temperature: 0.0,
        ..cfg.decode.clone()
    };
    let r = dipo::evaluate(&params, &eval, &static_policy)?;
    rows.push(format!("static,,{},{},{}", r.accuracy, r.avg_tokens_per_step, r.avg_output_len));

    for tau in [0.5, 0.7, 0.9, 0.99] {
        let policy = DecodePolicy {
            mode: DecodeMode::Dynamic,
            threshold: tau,
            temperature: 0.0,
            ..cfg.decode.clone()
        };
        let r = dipo::evaluate(&params, &eval, &policy)?;
        rows.push(format!("dynamic,{tau},{},{},{}", r.accuracy, r.avg_tokens_per_step, r.avg_output_len));
    }
    write_csv(&out.join("eval.csv"), "policy,tau,accuracy,tokens_per_step,avg_len", &rows)?;
    RunManifest::new("eval", cfg, seed).write(out)?;
    for row in &rows {
        println!("{row}");
    }
    Ok(())
}

fn cmd_serve(cfg: &RunConfig, out: &Path, checkpoint: Option<PathBuf>) -> bdlm_core::Result<()> {
    let path = checkpoint.unwrap_or_else(|| out.join("sft.ckpt"));
    let state = std::sync::Arc::new(service::ServiceState::load(&path)?);
    let mut server = service::Server::spawn(state, &cfg.service.addr)?;
    println!("serving {} on {}", path.display(), server.addr);
    // Server::spawn owns the accept loop; block until SHUTDOWN arrives
    server.wait();
    Ok(())
}

fn cmd_bench_mask(cfg: &RunConfig, out: &Path, seed: u64) -> bdlm_core::Result<()> {
    let rows = bench::run_mask_bench(&[1, 2, 4], &[1, 2, 3], 50, 1e-5, cfg.data.seed)?;
    let lines: Vec<String> = rows
        .iter()
        .map(|r| format!("{},{},{},{},{:.3}", r.mode, r.b, r.k, r.forward_calls, r.wall_ms))
        .collect();
    write_csv(&out.join("bench_mask.csv"), "mode,B,K,forward_calls,wall_ms", &lines)?;
    RunManifest::new("bench-mask", cfg, seed).write(out)?;
    let worst = rows.iter().map(|r| r.max_abs_diff).fold(0.0f32, f32::max);
    println!("all logit gaps <= {worst:.2e} (tolerance 1e-5); table in bench_mask.csv");
    Ok(())
}

fn cmd_bench_loop(cfg: &RunConfig, out: &Path, seed: u64) -> bdlm_core::Result<()> {
    let ckpt = out.join("sft.ckpt");
    let params = if ckpt.exists() {
        model::load_checkpoint(&ckpt)?
    } else {
        model::init_params(&cfg.model)?
    };
    let samples = tasks::gen_dataset(cfg.data.seed, cfg.rl.batch_prompts.max(2), cfg.data.digits)?;
    let rl = bdlm_core::dipo::DipoConfig {
        steps: 1,
        rollout: DecodePolicy { max_new_tokens: 16, ..cfg.rl.rollout.clone() },
        ..cfg.rl.clone()
    };
    let report = bench::run_loop_bench(&params, &samples, &rl, out, 10)?;
    let mut lines = Vec::new();
    for (name, table) in [("baseline", &report.baseline), ("persistent", &report.persistent)] {
        for (op, ms) in table {
            lines.push(format!("{name},{op},{ms:.3}"));
        }
    }
    write_csv(&out.join("bench_loop.csv"), "loop,operation,wall_ms", &lines)?;
    RunManifest::new("bench-loop", cfg, seed).write(out)?;
    println!(
        "baseline {:.1} ms ({} loads, {} saves)  persistent {:.1} ms ({} loads)  update {:.3} ms vs save+load {:.3} ms ({:.1}x)",
        report.baseline_total(),
        report.baseline_loads,
        report.baseline_saves,
        report.persistent_total(),
        report.persistent_loads,
        report.update_ms,
        report.save_load_ms,
        report.save_load_ms / report.update_ms.max(1e-9),
    );
    Ok(())
}
