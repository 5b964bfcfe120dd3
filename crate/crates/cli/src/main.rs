//! `mixer` command-line interface: inspection, training, evaluation, weight
//! surgery and verification for the from-scratch Mixer toolkit.
//!
//! Every command is non-interactive, prints machine-parseable `key=value`
//! lines to stdout, and exits 0 on success, 2 on usage/config/data errors,
//! 3 when training diverges.

mod fdcheck;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use mixer_core::checkpoint::{self, Checkpoint};
use mixer_core::data::{load_cifar10, load_mnist, build_perm_pipeline, synthetic, Dataset, PermKind};
use mixer_core::model::{
    self, flops_breakdown, flops_per_image, init_params, param_count, MixerConfig,
};
use mixer_core::probe::{few_shot_eval, LAMBDA_GRID};
use mixer_core::rng;
use mixer_core::surgery::{expand_for_resolution, permute_input, permute_weights, PermSpec};
use mixer_core::train::{self, train_loop, CsvSink, Optimizer, Schedule, TrainPlan, VecSink};
use mixer_core::Error;

#[derive(Parser)]
#[command(name = "mixer", about = "From-scratch MLP-Mixer toolkit", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArg {
    /// Named configuration (S/32, S/16, B/32, B/16, L/32, L/16, H/14, toy,
    /// tiny-cifar) or a path to a JSON config file.
    #[arg(long)]
    config: String,
    /// Override the input resolution, e.g. 224x224.
    #[arg(long)]
    image: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print sequence length, parameter count and forward MACs.
    Params(ConfigArg),
    /// Alias of `params` focused on the MAC accounting.
    Flops(ConfigArg),
    /// Train a model and write a checkpoint plus a metrics CSV.
    Train(TrainArgs),
    /// Top-1 accuracy of a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Few-shot linear probe of frozen features.
    Probe(ProbeArgs),
    /// Block-diagonal resolution expansion of a checkpoint.
    Expand(ExpandArgs),
    /// Verify permutation equivalence of weights and inputs.
    PermCheck(PermCheckArgs),
    /// Verify model gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Measure eval-mode throughput.
    Bench(BenchArgs),
    /// Export weight visualizations as PGM images.
    Viz(VizArgs),
    /// Write a synthetic dataset in the CIFAR-10 binary format.
    MakeSynthetic(MakeSyntheticArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, value_parser = ["cifar10", "mnist"])]
    dataset: String,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    epochs: u64,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Mixup strength p (Beta(p, p)); 0 disables.
    #[arg(long, default_value_t = 0.0)]
    mixup: f64,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long, default_value_t = 0.0)]
    stochdepth: f64,
    /// Fixed input permutation pipeline applied to every image.
    #[arg(long, default_value = "none", value_parser = ["none", "patch", "global"])]
    perm: String,
    #[arg(long, default_value_t = 0)]
    perm_seed: u64,
    /// Checkpoint output path.
    #[arg(long, default_value = "mixer.ckpt")]
    out: PathBuf,
    /// Metrics CSV output path.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_parser = ["cifar10", "mnist"])]
    dataset: String,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value_t = 256)]
    batch: usize,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_parser = ["cifar10", "mnist"])]
    dataset: String,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value_t = 5)]
    shots: usize,
    /// Comma-separated ridge strengths, e.g. 1e-6,1e-4,1e-2,1.
    #[arg(long)]
    l2: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExpandArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    factor: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PermCheckArgs {
    /// Checkpoint to verify; a fresh random model is used when omitted.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Config for the fresh-model path.
    #[arg(long, default_value = "toy")]
    config: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 10)]
    iters: usize,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Token-mixing block to export; stem units are always exported.
    #[arg(long, default_value_t = 0)]
    block: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MakeSyntheticArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Diverged { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Cmd) -> Result<(), Error> {
    match cmd {
        Cmd::Params(a) | Cmd::Flops(a) => cmd_params(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Probe(a) => cmd_probe(a),
        Cmd::Expand(a) => cmd_expand(a),
        Cmd::PermCheck(a) => cmd_perm_check(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Viz(a) => cmd_viz(a),
        Cmd::MakeSynthetic(a) => {
            synthetic::write_cifar10_dir(&a.out, a.seed)?;
            println!("out={}", a.out.display());
            Ok(())
        }
    }
}

fn resolve_config(arg: &ConfigArg) -> Result<MixerConfig, Error> {
    let mut cfg = if let Some(named) = MixerConfig::named(&arg.config) {
        named
    } else if Path::new(&arg.config).exists() {
        let text = std::fs::read_to_string(&arg.config)?;
        serde_json::from_str(&text)?
    } else {
        return Err(Error::Config(format!(
            "unknown config '{}'; valid names: {}",
            arg.config,
            MixerConfig::names().join(", ")
        )));
    };
    if let Some(image) = &arg.image {
        let (h, w) = parse_image(image)?;
        cfg = cfg.with_image(h, w);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_image(s: &str) -> Result<(usize, usize), Error> {
    let parts: Vec<&str> = s.split('x').collect();
    let err = || Error::Config(format!("--image expects HxW, got '{s}'"));
    if parts.len() != 2 {
        return Err(err());
    }
    let h = parts[0].parse().map_err(|_| err())?;
    let w = parts[1].parse().map_err(|_| err())?;
    Ok((h, w))
}

fn cmd_params(arg: ConfigArg) -> Result<(), Error> {
    let cfg = resolve_config(&arg)?;
    let s = cfg.sequence_length()?;
    let exact = param_count(&cfg)?;
    let b = flops_breakdown(&cfg)?;
    println!("config={}", arg.config);
    println!("image={}x{}", cfg.image.h, cfg.image.w);
    println!("sequence_length={s}");
    println!("params_exact={exact}");
    println!("params_millions={:.1}", exact as f64 / 1e6);
    println!("macs_forward={}", flops_per_image(&cfg)?);
    println!("macs_stem={}", b.stem);
    println!("macs_per_block={}", b.per_block);
    println!("macs_head={}", b.head);
    Ok(())
}

fn load_dataset(name: &str, dir: &Path) -> Result<(Dataset, Dataset), Error> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!(
            "data directory not found: {}",
            dir.display()
        )));
    }
    match name {
        "cifar10" => load_cifar10(dir),
        "mnist" => load_mnist(dir),
        other => Err(Error::Config(format!("unknown dataset '{other}'"))),
    }
}

fn perm_spec_for(
    kind: &str,
    cfg: &MixerConfig,
    seed: u64,
) -> Result<Option<PermSpec>, Error> {
    let kind = PermKind::parse(kind)
        .ok_or_else(|| Error::Config(format!("unknown permutation kind '{kind}'")))?;
    if kind == PermKind::None {
        return Ok(None);
    }
    Ok(Some(build_perm_pipeline(kind, cfg, seed)?))
}

fn cmd_train(a: TrainArgs) -> Result<(), Error> {
    let cfg = resolve_config(&a.config)?;
    let (train, val) = load_dataset(&a.dataset, &a.data_dir)?;
    let perm = perm_spec_for(&a.perm, &cfg, a.perm_seed)?;

    let steps_per_epoch = (train.len() / a.batch) as u64;
    let total_steps = a.epochs * steps_per_epoch;
    let plan = TrainPlan {
        optimizer: Optimizer::adam(0.1),
        schedule: Schedule::LinearWarmupLinearDecay {
            warmup_steps: total_steps / 20,
            total_steps,
            peak_lr: 1e-3,
        },
        clip_norm: 1.0,
        batch: a.batch,
        mixup_p: a.mixup,
        drop_rate: a.dropout,
        stoch_depth: a.stochdepth,
        seed: a.seed,
        log_every: Some(steps_per_epoch.max(1)),
    };

    let ckpt = match &a.metrics {
        Some(path) => {
            let file = std::fs::File::create(path)?;
            let mut sink = CsvSink::new(std::io::BufWriter::new(file))?;
            train_loop(&cfg, &plan, &train, Some(&val), perm.as_ref(), &mut sink)?
        }
        None => {
            let mut sink = VecSink::default();
            train_loop(&cfg, &plan, &train, Some(&val), perm.as_ref(), &mut sink)?
        }
    };
    checkpoint::save(&ckpt, &a.out)?;
    let (val_loss, val_acc) = train::evaluate(&cfg, &ckpt.params, &val, perm.as_ref(), 256)?;
    println!("steps={}", ckpt.step);
    println!("val_loss={val_loss:.6}");
    println!("val_top1={val_acc:.4}");
    println!("checkpoint={}", a.out.display());
    if let Some(m) = &a.metrics {
        println!("metrics={}", m.display());
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), Error> {
    let ckpt = checkpoint::load(&a.ckpt)?;
    let (_, test) = load_dataset(&a.dataset, &a.data_dir)?;
    let (loss, top1) = train::evaluate(&ckpt.config, &ckpt.params, &test, None, a.batch)?;
    println!("examples={}", test.len());
    println!("loss={loss:.6}");
    println!("top1={top1:.4}");
    Ok(())
}

fn cmd_probe(a: ProbeArgs) -> Result<(), Error> {
    let ckpt = checkpoint::load(&a.ckpt)?;
    let (train, test) = load_dataset(&a.dataset, &a.data_dir)?;
    let lambdas: Vec<f64> = match &a.l2 {
        Some(spec) => spec
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad --l2 entry '{s}'")))
            })
            .collect::<Result<_, _>>()?,
        None => LAMBDA_GRID.to_vec(),
    };
    let acc = few_shot_eval(
        &ckpt.config,
        &ckpt.params,
        &train,
        &test,
        a.shots,
        &lambdas,
        a.seed,
        None,
    )?;
    println!("shots={}", a.shots);
    println!(
        "lambda_grid={}",
        lambdas
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(",")
    );
    println!("few_shot_top1={acc:.4}");
    Ok(())
}

fn cmd_expand(a: ExpandArgs) -> Result<(), Error> {
    let ckpt = checkpoint::load(&a.ckpt)?;
    let (cfg2, params2) = expand_for_resolution(&ckpt.config, &ckpt.params, a.factor)?;
    let delta = param_count(&cfg2)? - param_count(&ckpt.config)?;
    checkpoint::save(
        &Checkpoint {
            config: cfg2.clone(),
            params: params2,
            step: ckpt.step,
        },
        &a.out,
    )?;
    println!("factor={}", a.factor);
    println!("new_image={}x{}", cfg2.image.h, cfg2.image.w);
    println!("new_sequence_length={}", cfg2.sequence_length()?);
    println!("params_delta={delta}");
    println!("out={}", a.out.display());
    Ok(())
}

fn cmd_perm_check(a: PermCheckArgs) -> Result<(), Error> {
    let (cfg, params) = match &a.ckpt {
        Some(path) => {
            let ckpt = checkpoint::load(path)?;
            (ckpt.config, ckpt.params)
        }
        None => {
            let cfg = resolve_config(&ConfigArg {
                config: a.config.clone(),
                image: None,
            })?;
            let mut params = init_params::<f32>(&cfg, a.seed)?;
            // a zero head would make the check vacuous on a fresh model
            let mut r = rng::stream(a.seed, 31);
            for v in params.head_w.data_mut() {
                *v = rand::Rng::random_range(&mut r, -0.3..0.3f32);
            }
            (cfg, params)
        }
    };
    let mut r = rng::stream(a.seed, 32);
    let images = rng::uniform_tensor::<f32>(
        &[32, cfg.image.h, cfg.image.w, cfg.image.channels],
        0.0,
        1.0,
        &mut r,
    );
    let base = model::forward_eval(&cfg, &params, &images)?;
    let mut worst = 0.0f32;
    for _ in 0..10 {
        let spec = PermSpec::random_patch(&cfg, &mut r)?;
        let pw = permute_weights(&cfg, &params, &spec)?;
        let pi = permute_input(&cfg, &images, &spec)?;
        let out = model::forward_eval(&cfg, &pw, &pi)?;
        for (x, y) in base.data().iter().zip(out.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    println!("specs=10");
    println!("images=32");
    println!("max_logit_delta={worst:e}");
    println!("threshold=1e-5");
    let ok = worst < 1e-5;
    println!("result={}", if ok { "PASS" } else { "FAIL" });
    if !ok {
        return Err(Error::Contract(format!(
            "permutation equivalence violated: {worst:e}"
        )));
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<(), Error> {
    let report = fdcheck::run(a.seed)?;
    println!("seed={}", a.seed);
    println!("parameters={}", report.parameters);
    println!("max_rel_err={:e}", report.max_rel);
    println!("threshold=1e-5");
    let ok = report.max_rel < 1e-5;
    println!("result={}", if ok { "PASS" } else { "FAIL" });
    if !ok {
        return Err(Error::Contract(format!(
            "gradient check failed: {:e}",
            report.max_rel
        )));
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<(), Error> {
    let cfg = resolve_config(&a.config)?;
    let mut params = init_params::<f32>(&cfg, 0)?;
    let mut r = rng::seeded(0);
    for v in params.head_w.data_mut() {
        *v = rand::Rng::random_range(&mut r, -0.3..0.3f32);
    }
    let images = rng::uniform_tensor::<f32>(
        &[a.batch, cfg.image.h, cfg.image.w, cfg.image.channels],
        0.0,
        1.0,
        &mut r,
    );
    // warmup
    model::forward_eval(&cfg, &params, &images)?;
    mixer_core::tensor::gemm::reset_mac_count();
    let t = Instant::now();
    for _ in 0..a.iters {
        model::forward_eval(&cfg, &params, &images)?;
    }
    let dt = t.elapsed().as_secs_f64();
    let macs = mixer_core::tensor::gemm::mac_count();
    let imgs = (a.batch * a.iters) as f64;
    println!("batch={}", a.batch);
    println!("iters={}", a.iters);
    println!("threads={}", mixer_core::tensor::gemm::threads());
    println!("img_per_sec={:.2}", imgs / dt);
    println!("macs_per_sec={:.3e}", macs as f64 / dt);
    println!("macs_per_image_analytic={}", flops_per_image(&cfg)?);
    println!("macs_per_image_measured={:.0}", macs as f64 / imgs);
    Ok(())
}

fn cmd_viz(a: VizArgs) -> Result<(), Error> {
    let ckpt = checkpoint::load(&a.ckpt)?;
    let token_files =
        mixer_core::viz::export_token_units(&ckpt.config, &ckpt.params, a.block, &a.out)?;
    let stem_files = mixer_core::viz::export_stem_units(&ckpt.config, &ckpt.params, &a.out)?;
    println!("block={}", a.block);
    println!("token_unit_files={}", token_files.len() - 1);
    println!("stem_unit_files={}", stem_files.len() - 1);
    println!("dir={}", a.out.display());
    Ok(())
}
