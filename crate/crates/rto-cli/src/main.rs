//! `rto`: the robust topology optimization pipeline as subcommands.
//!
//! generate-data -> train-vae / train-surrogate -> optimize, plus evaluate
//! for scoring any saved topology. Every command echoes its resolved
//! configuration next to its outputs and is byte-reproducible per seed.

mod config;

use clap::{Parser, Subcommand};
use config::RunConfig;
use rto_core::dataset::{
    export_pgm, generate_corpus, rank_and_split, read_manifest, read_topology, spec_hash,
    write_manifest, CorpusManifest, SplitTag,
};
use rto_core::grid::{make_cantilever, make_heat_sink, make_l_bracket, ProblemSpec};
use rto_core::latent::{optimize, DescentConfig};
use rto_core::nn::{load_mlp, save_mlp};
use rto_core::robust::{robust_compliance, Estimator, RobustConfig};
use rto_core::simp::SimpConfig;
use rto_core::surrogate::{train_surrogate, SurrogateModel, SurrogateTrainConfig};
use rto_core::vae::{train_vae, VaeArchitecture, VaeModel, VaeTrainConfig};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "rto", version, about = "Robust topology optimization laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Config file of key = value lines, merged over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset: l-bracket-100, l-bracket-30 or heat-sink-32.
    #[arg(long)]
    preset: Option<String>,
    /// Individual key=value overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled corpus of deterministic designs.
    GenerateData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Corpus size (overrides corpus_n).
        #[arg(long)]
        n: Option<usize>,
        /// Corpus seed (overrides corpus_seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for the generation pool (overrides workers).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Train the design-space autoencoder on a corpus.
    TrainVae {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Corpus directory (the one holding manifest.csv).
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Latent dimension (overrides latent_dim).
        #[arg(long)]
        latent_dim: Option<usize>,
        /// Epoch count (overrides vae_epochs).
        #[arg(long)]
        epochs: Option<usize>,
        /// Training seed (overrides vae_seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the robust-compliance surrogate on a corpus.
    TrainSurrogate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Epoch count (overrides surrogate_epochs).
        #[arg(long)]
        epochs: Option<usize>,
        /// Training seed (overrides surrogate_seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Search the latent space for a robust design and verify it by FE.
    Optimize {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        /// Models directory holding vae_encoder.rtom / vae_decoder.rtom.
        #[arg(long)]
        vae: PathBuf,
        /// Models directory holding surrogate.rtom.
        #[arg(long)]
        surrogate: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report the robust compliance of a saved topology.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Topology file (.rtod).
        #[arg(long)]
        design: PathBuf,
        /// Cross-check the quadrature result with n Monte Carlo samples.
        #[arg(long)]
        mc: Option<usize>,
    },
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<rto_core::RtoError> for CliError {
    fn from(e: rto_core::RtoError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> CmdResult {
    match command {
        Command::GenerateData { cfg, out, n, seed, workers } => {
            let mut cfg = resolve(&cfg)?;
            if let Some(n) = n {
                cfg.set("corpus_n", &n.to_string()).map_err(CliError::Usage)?;
            }
            if let Some(seed) = seed {
                cfg.set("corpus_seed", &seed.to_string()).map_err(CliError::Usage)?;
            }
            if let Some(w) = workers {
                cfg.set("workers", &w.to_string()).map_err(CliError::Usage)?;
            }
            cmd_generate_data(&cfg, &out)
        }
        Command::TrainVae { cfg, corpus, out, latent_dim, epochs, seed } => {
            let mut cfg = resolve(&cfg)?;
            if let Some(d) = latent_dim {
                cfg.set("latent_dim", &d.to_string()).map_err(CliError::Usage)?;
            }
            if let Some(e) = epochs {
                cfg.set("vae_epochs", &e.to_string()).map_err(CliError::Usage)?;
            }
            if let Some(s) = seed {
                cfg.set("vae_seed", &s.to_string()).map_err(CliError::Usage)?;
            }
            cmd_train_vae(&cfg, &corpus, &out)
        }
        Command::TrainSurrogate { cfg, corpus, out, epochs, seed } => {
            let mut cfg = resolve(&cfg)?;
            if let Some(e) = epochs {
                cfg.set("surrogate_epochs", &e.to_string()).map_err(CliError::Usage)?;
            }
            if let Some(s) = seed {
                cfg.set("surrogate_seed", &s.to_string()).map_err(CliError::Usage)?;
            }
            cmd_train_surrogate(&cfg, &corpus, &out)
        }
        Command::Optimize { cfg, corpus, vae, surrogate, out } => {
            let cfg = resolve(&cfg)?;
            cmd_optimize(&cfg, &corpus, &vae, &surrogate, &out)
        }
        Command::Evaluate { cfg, design, mc } => {
            let cfg = resolve(&cfg)?;
            cmd_evaluate(&cfg, &design, mc)
        }
    }
}

/// Preset + optional file + overrides; at least one of --config/--preset.
fn resolve(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    if args.config.is_none() && args.preset.is_none() {
        return Err(CliError::Usage("one of --config or --preset is required".into()));
    }
    let preset = args.preset.as_deref().unwrap_or("l-bracket-30");
    let mut cfg = RunConfig::preset(preset).map_err(CliError::Usage)?;
    if let Some(path) = &args.config {
        cfg.merge_file(path).map_err(CliError::Usage)?;
    }
    cfg.apply_overrides(&args.sets).map_err(CliError::Usage)?;
    Ok(cfg)
}

fn usage(e: String) -> CliError {
    CliError::Usage(e)
}

fn runtime(e: String) -> CliError {
    CliError::Runtime(e)
}

fn build_spec(cfg: &RunConfig) -> Result<ProblemSpec, CliError> {
    let n = cfg.get_usize("grid_n").map_err(usage)?;
    let mut spec = match cfg.get("problem") {
        "l-bracket" => make_l_bracket(
            n,
            cfg.get_f64("arm_fraction").map_err(usage)?,
            cfg.get_f64("magnitude").map_err(usage)?,
        )?,
        "heat-sink" => make_heat_sink(
            n,
            cfg.get_f64("sink_fraction").map_err(usage)?,
            cfg.get_u64("field_seed").map_err(usage)?,
        )?,
        "cantilever" => make_cantilever(
            n,
            cfg.get_usize("grid_ny").map_err(usage)?,
            cfg.get_f64("magnitude").map_err(usage)?,
        )?,
        other => return Err(usage(format!("unknown problem '{other}'"))),
    };
    spec.volume_fraction = cfg.get_f64("volume_fraction").map_err(usage)?;
    spec.penalty = cfg.get_f64("penalty").map_err(usage)?;
    spec.theta_min = cfg.get_f64("theta_min").map_err(usage)?;
    spec.validate()?;
    Ok(spec)
}

fn robust_config(cfg: &RunConfig) -> Result<RobustConfig, CliError> {
    Ok(RobustConfig::quadrature(
        cfg.get_f64("lambda").map_err(usage)?,
        cfg.get_usize("quadrature_points").map_err(usage)?,
    )?)
}

fn init_workers(cfg: &RunConfig) -> Result<(), CliError> {
    let workers = cfg.get_usize("workers").map_err(usage)?;
    if workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| runtime(format!("worker pool: {e}")))?;
    }
    Ok(())
}

fn cmd_generate_data(cfg: &RunConfig, out: &Path) -> CmdResult {
    init_workers(cfg)?;
    let spec = build_spec(cfg)?;
    let robust = robust_config(cfg)?;
    let simp = SimpConfig {
        penalty: cfg.get_f64("penalty").map_err(usage)?,
        filter_radius: cfg.get_f64("filter_radius").map_err(usage)?,
        move_limit: cfg.get_f64("move_limit").map_err(usage)?,
        oc_exponent: cfg.get_f64("oc_exponent").map_err(usage)?,
        max_iters: cfg.get_usize("simp_max_iters").map_err(usage)?,
        change_tol: cfg.get_f64("change_tol").map_err(usage)?,
    };
    let corpus_dir = out.join("corpus");
    std::fs::create_dir_all(&corpus_dir)?;
    let manifest = generate_corpus(
        &spec,
        cfg.get_usize("corpus_n").map_err(usage)?,
        &robust,
        &simp,
        cfg.get_u64("corpus_seed").map_err(usage)?,
        &corpus_dir,
    )?;
    let manifest = rank_and_split(
        &manifest,
        cfg.get_usize("k_exclude").map_err(usage)?,
        cfg.get_usize("n_test").map_err(usage)?,
        cfg.get_u64("split_seed").map_err(usage)?,
    )?;
    write_manifest(&manifest, &corpus_dir.join("manifest.csv"))?;
    cfg.write_resolved(&out.join("generate-data.resolved.config")).map_err(runtime)?;
    println!(
        "generated {} samples into {} (spec {})",
        manifest.rows.len(),
        corpus_dir.display(),
        manifest.spec_hash
    );
    Ok(())
}

/// Loads the flattened f32 design fields of one split, plus their labels.
fn load_rows(
    manifest: &CorpusManifest,
    corpus: &Path,
    tag: SplitTag,
) -> Result<(Vec<Vec<f32>>, Vec<f64>), CliError> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for row in manifest.rows_with_tag(tag) {
        let theta = read_topology(&corpus.join(&row.path))?;
        rows.push(theta.values.iter().map(|&v| v as f32).collect());
        labels.push(row.q_rob);
    }
    Ok((rows, labels))
}

fn field_shape(manifest: &CorpusManifest, corpus: &Path) -> Result<(usize, usize), CliError> {
    let first = manifest
        .rows
        .first()
        .ok_or_else(|| runtime("corpus manifest has no rows".into()))?;
    let theta = read_topology(&corpus.join(&first.path))?;
    Ok((theta.grid.ny, theta.grid.nx))
}

fn write_history_csv(path: &Path, header: &str, rows: &[String]) -> CmdResult {
    let mut doc = String::from(header);
    doc.push('\n');
    for row in rows {
        doc.push_str(row);
        doc.push('\n');
    }
    std::fs::write(path, doc)?;
    Ok(())
}

fn cmd_train_vae(cfg: &RunConfig, corpus: &Path, out: &Path) -> CmdResult {
    init_workers(cfg)?;
    let manifest = read_manifest(&corpus.join("manifest.csv"))?;
    let (train, _) = load_rows(&manifest, corpus, SplitTag::Train)?;
    let (test, _) = load_rows(&manifest, corpus, SplitTag::Test)?;
    let (height, width) = field_shape(&manifest, corpus)?;
    let arch = VaeArchitecture {
        height,
        width,
        latent_dim: cfg.get_usize("latent_dim").map_err(usage)?,
        hidden: cfg.get_usize_list("hidden").map_err(usage)?,
        pool_window: cfg.get_usize("pool_window").map_err(usage)?,
    };
    let mut model: VaeModel<f32> =
        VaeModel::init(arch, cfg.get_u64("vae_init_seed").map_err(usage)?)?;
    let train_cfg = VaeTrainConfig {
        epochs: cfg.get_usize("vae_epochs").map_err(usage)?,
        batch_size: cfg.get_usize("vae_batch").map_err(usage)?,
        learning_rate: cfg.get_f64("vae_lr").map_err(usage)?,
        seed: cfg.get_u64("vae_seed").map_err(usage)?,
    };
    let history = train_vae(&mut model, &train, &test, &train_cfg)?;

    let models = out.join("models");
    std::fs::create_dir_all(&models)?;
    save_mlp(&model.encoder, &models.join("vae_encoder.rtom"))?;
    save_mlp(&model.decoder, &models.join("vae_decoder.rtom"))?;
    let rows: Vec<String> = history
        .iter()
        .map(|s| format!("{},{:.17e},{:.17e}", s.epoch, s.train_loss, s.test_loss))
        .collect();
    write_history_csv(&models.join("vae_history.csv"), "epoch,train_loss,test_loss", &rows)?;
    cfg.write_resolved(&out.join("train-vae.resolved.config")).map_err(runtime)?;
    let last = history.last().unwrap();
    println!(
        "trained autoencoder for {} epochs: train loss {:.4}, test loss {:.4}",
        last.epoch, last.train_loss, last.test_loss
    );
    Ok(())
}

fn cmd_train_surrogate(cfg: &RunConfig, corpus: &Path, out: &Path) -> CmdResult {
    init_workers(cfg)?;
    let manifest = read_manifest(&corpus.join("manifest.csv"))?;
    let (train, train_labels) = load_rows(&manifest, corpus, SplitTag::Train)?;
    let (test, test_labels) = load_rows(&manifest, corpus, SplitTag::Test)?;
    let (height, width) = field_shape(&manifest, corpus)?;
    let mut model: SurrogateModel<f32> = SurrogateModel::init_with_hidden(
        height * width,
        &cfg.get_usize_list("surrogate_hidden").map_err(usage)?,
        cfg.get_u64("surrogate_init_seed").map_err(usage)?,
    )?;
    let train_cfg = SurrogateTrainConfig {
        epochs: cfg.get_usize("surrogate_epochs").map_err(usage)?,
        batch_size: cfg.get_usize("surrogate_batch").map_err(usage)?,
        learning_rate: cfg.get_f64("surrogate_lr").map_err(usage)?,
        seed: cfg.get_u64("surrogate_seed").map_err(usage)?,
    };
    let history = train_surrogate(&mut model, &train, &train_labels, &test, &test_labels, &train_cfg)?;

    let models = out.join("models");
    std::fs::create_dir_all(&models)?;
    save_mlp(&model.net, &models.join("surrogate.rtom"))?;
    std::fs::write(
        models.join("surrogate_scale.csv"),
        format!("label_mean,label_std\n{:.17e},{:.17e}\n", model.label_mean, model.label_std),
    )?;
    let rows: Vec<String> = history
        .iter()
        .enumerate()
        .map(|(epoch, mse)| format!("{epoch},{mse:.17e}"))
        .collect();
    write_history_csv(&models.join("surrogate_history.csv"), "epoch,held_out_mse", &rows)?;
    cfg.write_resolved(&out.join("train-surrogate.resolved.config")).map_err(runtime)?;
    let report = rto_core::surrogate::evaluate(&model, &test, &test_labels)?;
    println!(
        "trained surrogate: held-out mse {:.4}, pearson {:.4}",
        report.mse, report.pearson
    );
    Ok(())
}

fn load_surrogate(dir: &Path) -> Result<SurrogateModel<f32>, CliError> {
    let net = load_mlp(&dir.join("surrogate.rtom"))?;
    let scale = std::fs::read_to_string(dir.join("surrogate_scale.csv"))?;
    let line = scale
        .lines()
        .nth(1)
        .ok_or_else(|| runtime("surrogate_scale.csv has no data row".into()))?;
    let mut parts = line.split(',');
    let parse = |s: Option<&str>| -> Result<f64, CliError> {
        s.and_then(|t| t.trim().parse().ok())
            .ok_or_else(|| runtime("malformed surrogate_scale.csv".into()))
    };
    let label_mean = parse(parts.next())?;
    let label_std = parse(parts.next())?;
    Ok(SurrogateModel { net, label_mean, label_std })
}

fn cmd_optimize(
    cfg: &RunConfig,
    corpus: &Path,
    vae_dir: &Path,
    surrogate_dir: &Path,
    out: &Path,
) -> CmdResult {
    init_workers(cfg)?;
    let spec = build_spec(cfg)?;
    let manifest = read_manifest(&corpus.join("manifest.csv"))?;
    if manifest.spec_hash != spec_hash(&spec) {
        return Err(runtime(format!(
            "corpus was generated for spec {} but the resolved config describes {}",
            manifest.spec_hash,
            spec_hash(&spec)
        )));
    }
    let (height, width) = field_shape(&manifest, corpus)?;
    let encoder = load_mlp(&vae_dir.join("vae_encoder.rtom"))?;
    let decoder = load_mlp(&vae_dir.join("vae_decoder.rtom"))?;
    let arch = VaeArchitecture {
        height,
        width,
        latent_dim: decoder.input_dim(),
        hidden: encoder.layers[..encoder.layers.len() - 1]
            .iter()
            .map(|l| l.out_dim)
            .collect(),
        pool_window: cfg.get_usize("pool_window").map_err(usage)?,
    };
    let vae = VaeModel { arch, encoder, decoder };
    let surrogate = load_surrogate(surrogate_dir)?;

    let robust = robust_config(cfg)?;
    let descent = DescentConfig {
        learning_rate: cfg.get_f64("descent_lr").map_err(usage)?,
        max_iters: cfg.get_usize("descent_max_iters").map_err(usage)?,
        stall_tol: cfg.get_f64("stall_tol").map_err(usage)?,
        stall_patience: cfg.get_usize("stall_patience").map_err(usage)?,
        n_init: cfg.get_usize("n_init").map_err(usage)?,
        n_restarts: cfg.get_usize("n_restarts").map_err(usage)?,
        seed: cfg.get_u64("descent_seed").map_err(usage)?,
    };
    let result = optimize(&spec, &robust, &vae, &surrogate, &descent)?;

    let traces = out.join("traces");
    let figures = out.join("figures");
    std::fs::create_dir_all(&traces)?;
    std::fs::create_dir_all(&figures)?;
    let frame_every = cfg.get_usize("frame_every").map_err(usage)?.max(1);
    let mut trace_idx = 0;
    for cand in &result.candidates {
        let Some(trace) = &cand.trace else { continue };
        let i = trace_idx;
        trace_idx += 1;
        let rows: Vec<String> = trace
            .surrogate_values
            .iter()
            .enumerate()
            .map(|(iter, q)| format!("{iter},{q:.17e}"))
            .collect();
        write_history_csv(&traces.join(format!("trace_{i}.csv")), "iter,q_surrogate", &rows)?;
        for (iter, z) in trace.z_path.iter().enumerate() {
            if iter % frame_every == 0 || iter + 1 == trace.z_path.len() {
                let theta = vae.decode(z, 1)?;
                let values: Vec<f64> = theta.iter().map(|&v| v as f64).collect();
                let field = rto_core::grid::DensityField::new(spec.grid, values)?;
                export_pgm(&field, &figures.join(format!("cand{i}_iter{iter:04}.pgm")))?;
            }
        }
    }
    let best = result.best();
    export_pgm(&best.design, &figures.join("best.pgm"))?;

    let best_row = manifest
        .rows_with_tag(SplitTag::Train)
        .min_by(|a, b| a.q_rob.total_cmp(&b.q_rob))
        .ok_or_else(|| runtime("manifest has no training rows".into()))?;
    // candidates are scored after 0/1 projection, so the fair baseline is the
    // best training design pushed through the same projection
    let train_design = read_topology(&corpus.join(&best_row.path))?;
    let projected = rto_core::latent::threshold_design(&train_design.values, &spec)?;
    let baseline = robust_compliance(&projected, &spec, &robust)?.q_rob;
    let improvement = 100.0 * (baseline - best.fe.q_rob) / baseline;
    let mut summary = String::new();
    writeln!(summary, "best_training_q_rob = {:.6}", best_row.q_rob).unwrap();
    writeln!(summary, "best_training_projected_q_rob = {baseline:.6}").unwrap();
    writeln!(summary, "optimized_fe_q_rob = {:.6}", best.fe.q_rob).unwrap();
    writeln!(summary, "optimized_surrogate_q = {:.6}", best.surrogate_q).unwrap();
    writeln!(summary, "improvement_percent = {improvement:.3}").unwrap();
    writeln!(summary, "strict_improvement = {}", best.fe.q_rob < baseline).unwrap();
    writeln!(summary, "candidates_evaluated = {}", result.candidates.len()).unwrap();
    std::fs::write(traces.join("summary.txt"), &summary)?;
    cfg.write_resolved(&out.join("optimize.resolved.config")).map_err(runtime)?;
    print!("{summary}");
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, design: &Path, mc: Option<usize>) -> CmdResult {
    init_workers(cfg)?;
    let spec = build_spec(cfg)?;
    let theta = read_topology(design)?;
    if theta.grid.nx != spec.grid.nx || theta.grid.ny != spec.grid.ny {
        return Err(runtime(format!(
            "design is {}x{} but the config describes a {}x{} grid",
            theta.grid.nx, theta.grid.ny, spec.grid.nx, spec.grid.ny
        )));
    }
    let robust = robust_config(cfg)?;
    let quad = robust_compliance(&theta, &spec, &robust)?;
    println!("q_rob = {:.6}", quad.q_rob);
    println!("mean = {:.6}", quad.mean);
    println!("std = {:.6}", quad.std);
    if let Some(n) = mc {
        let mc_cfg = RobustConfig {
            lambda: robust.lambda,
            estimator: Estimator::MonteCarlo { n, seed: 12345 },
        };
        let sampled = robust_compliance(&theta, &spec, &mc_cfg)?;
        let rel = (sampled.q_rob - quad.q_rob).abs() / quad.q_rob.abs().max(1e-12);
        println!("mc_q_rob = {:.6} ({n} samples, relative difference {rel:.5})", sampled.q_rob);
    }
    Ok(())
}
