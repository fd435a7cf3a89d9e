//! `idp3`: one binary driving the whole pipeline. Every numeric experiment
//! parameter lives in the manifest file; flags only pick paths, evaluation
//! perturbations, and parallelism. Artifacts land in the output directory
//! under manifest-hash-prefixed names, and rerunning a command with the same
//! inputs rewrites them byte for byte.

use clap::{Parser, Subcommand};
use idp3_core::harness::{
    collect_demos, evaluate, load_dataset, rows_to_csv, run_ablation, save_dataset, train,
    AblationGrid, CollectConfig, EvalConfig, HarnessError, Policy, RunManifest,
};
use idp3_core::encoders::EncoderVariant;
use idp3_core::geom::PointCloud;
use idp3_core::sampling::{bench_samplers, SamplingConfig};
use idp3_core::tensornet::{load_checkpoint, TensornetError};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "idp3", version, about = "Egocentric 3D diffusion-policy pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads for episode/grid fan-out; 0 uses all cores. Does not
    /// change any result, only wall time.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Print more detail (loss curves, per-cell rows).
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Collect scripted-expert demonstrations into a dataset file.
    Collect {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Train a policy on a collected dataset.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Dataset file; defaults to the manifest's own under --out.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run closed-loop evaluation episodes against a checkpoint.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Checkpoint file; defaults to the manifest's own under --out.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Rotate the camera about the vertical axis through its target,
        /// degrees. Evaluation-time only.
        #[arg(long, default_value_t = 0.0)]
        view_yaw_deg: f64,
        /// Shift the camera laterally, meters. Evaluation-time only.
        #[arg(long, default_value_t = 0.0)]
        view_shift_m: f64,
        /// Override the table height, meters.
        #[arg(long)]
        table_height_m: Option<f64>,
        /// Scatter this many distractor boxes on the table.
        #[arg(long)]
        distractors: Option<usize>,
    },
    /// Train and evaluate every cell of a grid manifest.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Time the point samplers on a synthetic cloud.
    Bench {
        /// Synthetic cloud size.
        #[arg(long, default_value_t = 50_000)]
        points: usize,
        /// Sampling target.
        #[arg(long, default_value_t = 4096)]
        target: usize,
        /// Timing repetitions per strategy.
        #[arg(long, default_value_t = 21)]
        reps: usize,
        /// Write the timing CSV here instead of stdout only.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a dataset, checkpoint, or manifest file.
    Inspect { path: PathBuf },
}

enum Failure {
    BadManifest(String),
    MissingFile(String),
    Numerical(String),
    Other(String),
}

impl Failure {
    fn category(&self) -> &'static str {
        match self {
            Failure::BadManifest(_) => "bad_manifest",
            Failure::MissingFile(_) => "missing_file",
            Failure::Numerical(_) => "numerical_abort",
            Failure::Other(_) => "error",
        }
    }

    fn code(&self) -> u8 {
        match self {
            Failure::BadManifest(_) => 2,
            Failure::MissingFile(_) => 3,
            Failure::Numerical(_) => 4,
            Failure::Other(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::BadManifest(m)
            | Failure::MissingFile(m)
            | Failure::Numerical(m)
            | Failure::Other(m) => m,
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match &e {
            HarnessError::Manifest(_) => Failure::BadManifest(e.to_string()),
            HarnessError::NonFiniteLoss { .. } => Failure::Numerical(e.to_string()),
            HarnessError::Net(TensornetError::NonFinite(_)) => Failure::Numerical(e.to_string()),
            HarnessError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                Failure::MissingFile(e.to_string())
            }
            _ => Failure::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            Failure::MissingFile(e.to_string())
        } else {
            Failure::Other(e.to_string())
        }
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Failure::MissingFile(format!("{}: no such file", path.display()))
            }
            _ => Failure::Other(format!("{}: {e}", path.display())),
        })
}

fn parse_manifest(path: &Path) -> Result<RunManifest, Failure> {
    let m = RunManifest::parse(&read_text(path)?)?;
    Ok(m)
}

fn require(path: &Path, hint: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::MissingFile(format!("{}: no such file ({hint})", path.display())))
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    if cli.workers > 0 {
        // Fan-out width only; every episode and grid cell is independently
        // seeded, so results cannot depend on this.
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global() {
            eprintln!("error: error: could not size the worker pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}: {}", f.category(), f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Collect { manifest, out } => cmd_collect(cli, manifest, out),
        Command::Train { manifest, out, dataset } => cmd_train(cli, manifest, out, dataset.as_deref()),
        Command::Eval {
            manifest,
            out,
            checkpoint,
            view_yaw_deg,
            view_shift_m,
            table_height_m,
            distractors,
        } => cmd_eval(
            manifest,
            out,
            checkpoint.as_deref(),
            *view_yaw_deg,
            *view_shift_m,
            *table_height_m,
            *distractors,
        ),
        Command::Ablate { manifest, out } => cmd_ablate(cli, manifest, out),
        Command::Bench { points, target, reps, out } => {
            cmd_bench(*points, *target, *reps, out.as_deref())
        }
        Command::Inspect { path } => cmd_inspect(path),
    }
}

fn dataset_path(out: &Path, m: &RunManifest) -> PathBuf {
    out.join(format!("{}.dataset.bin", m.short_hash()))
}

fn checkpoint_path(out: &Path, m: &RunManifest) -> PathBuf {
    out.join(format!("{}.ckpt", m.short_hash()))
}

fn cmd_collect(cli: &Cli, manifest: &Path, out: &Path) -> Result<(), Failure> {
    let m = parse_manifest(manifest)?;
    let include_image = m.encoder == EncoderVariant::ImageBaseline;
    let ds = collect_demos(&CollectConfig::from_manifest(&m, include_image))?;
    std::fs::create_dir_all(out)?;
    let path = dataset_path(out, &m);
    save_dataset(&path, &ds)?;
    println!(
        "wrote {}  {} trajectories, {} steps",
        path.display(),
        ds.trajectories.len(),
        ds.total_steps()
    );
    if cli.verbose {
        for (i, t) in ds.trajectories.iter().enumerate() {
            println!("  traj {i}: {} steps, scene_seed {}", t.len(), t.scene_seed);
        }
    }
    Ok(())
}

fn cmd_train(
    cli: &Cli,
    manifest: &Path,
    out: &Path,
    dataset: Option<&Path>,
) -> Result<(), Failure> {
    let m = parse_manifest(manifest)?;
    let ds_path = dataset.map(Path::to_path_buf).unwrap_or_else(|| dataset_path(out, &m));
    require(&ds_path, "run `idp3 collect` first")?;
    let ds = load_dataset(&ds_path)?;
    let outcome = train(&ds, &m, out)?;
    let mut curve = String::from("epoch,loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        writeln!(curve, "{i},{l}").expect("writing to a String cannot fail");
    }
    let curve_path = out.join(format!("{}.losses.csv", m.short_hash()));
    std::fs::write(&curve_path, curve)?;
    println!(
        "wrote {}  {} epochs, loss {:.4} -> {:.4}",
        outcome.checkpoint.display(),
        outcome.losses.len(),
        outcome.losses.first().unwrap_or(&f64::NAN),
        outcome.losses.last().unwrap_or(&f64::NAN),
    );
    println!("wrote {}", curve_path.display());
    if cli.verbose {
        let stride = (outcome.losses.len() / 20).max(1);
        for (i, l) in outcome.losses.iter().enumerate().step_by(stride) {
            println!("  epoch {i}: loss {l:.6}");
        }
    }
    Ok(())
}

/// Evaluation-time perturbations become part of the artifact name, so a
/// perturbed report never overwrites the clean one.
fn eval_suffix(yaw: f64, shift: f64, table: Option<f64>, distractors: Option<usize>) -> String {
    let mut parts = Vec::new();
    if yaw != 0.0 {
        parts.push(format!("yaw{yaw}"));
    }
    if shift != 0.0 {
        parts.push(format!("shift{shift}"));
    }
    if let Some(t) = table {
        parts.push(format!("table{t}"));
    }
    if let Some(d) = distractors {
        parts.push(format!("dist{d}"));
    }
    if parts.is_empty() {
        String::new()
    } else {
        format!(".{}", parts.join("_"))
    }
}

fn cmd_eval(
    manifest: &Path,
    out: &Path,
    checkpoint: Option<&Path>,
    view_yaw_deg: f64,
    view_shift_m: f64,
    table_height_m: Option<f64>,
    distractors: Option<usize>,
) -> Result<(), Failure> {
    let m = parse_manifest(manifest)?;
    let ckpt = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| checkpoint_path(out, &m));
    require(&ckpt, "run `idp3 train` first")?;
    let mut policy = Policy::from_manifest(&m)?;
    let tag = policy.load_weights(&ckpt)?;
    if tag != m.tag64() {
        return Err(Failure::BadManifest(format!(
            "{} was trained under a different manifest (tag mismatch)",
            ckpt.display()
        )));
    }
    let mut cfg = EvalConfig::from_manifest(&m);
    cfg.view_yaw_deg = view_yaw_deg;
    cfg.view_shift = [view_shift_m, 0.0, 0.0];
    if let Some(t) = table_height_m {
        cfg.scene.table_height = t;
    }
    if let Some(d) = distractors {
        cfg.scene.n_distractors = d;
    }
    let report = evaluate(&policy, &cfg)?;

    let suffix = eval_suffix(view_yaw_deg, view_shift_m, table_height_m, distractors);
    let json_path = out.join(format!("{}{suffix}.eval.json", m.short_hash()));
    let mut json = serde_json::to_vec_pretty(&report).map_err(|e| Failure::Other(e.to_string()))?;
    json.push(b'\n');
    std::fs::write(&json_path, json)?;
    let csv_path = out.join(format!("{}{suffix}.eval.csv", m.short_hash()));
    let csv = format!(
        "manifest_hash,variant,points,h_pred,successes,attempts,episodes\n{},{},{},{},{},{},{}\n",
        m.short_hash(),
        m.encoder,
        m.target_points,
        m.h_pred,
        report.successes,
        report.attempts,
        report.episodes
    );
    std::fs::write(&csv_path, csv)?;
    println!(
        "wrote {}  {} grasps/attempts, {:.1}% of {} episodes",
        json_path.display(),
        report.cell(),
        100.0 * report.episode_success_rate(),
        report.episodes
    );
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn cmd_ablate(cli: &Cli, manifest: &Path, out: &Path) -> Result<(), Failure> {
    let text = read_text(manifest)?;
    let grid = AblationGrid::parse(&text)?;
    let grid_hash = {
        let digest = Sha256::digest(text.as_bytes());
        let mut s = String::new();
        for b in &digest[..6] {
            write!(s, "{b:02x}").expect("writing to a String cannot fail");
        }
        s
    };
    std::fs::create_dir_all(out)?;
    let rows = run_ablation(&grid, out)?;
    let csv = rows_to_csv(&rows);
    let csv_path = out.join(format!("{grid_hash}.grid.csv"));
    std::fs::write(&csv_path, &csv)?;
    println!("wrote {}  {} cells", csv_path.display(), rows.len());
    if cli.verbose {
        print!("{csv}");
    }
    Ok(())
}

fn cmd_bench(points: usize, target: usize, reps: usize, out: Option<&Path>) -> Result<(), Failure> {
    if points == 0 || target == 0 || reps == 0 {
        return Err(Failure::Other("points, target, and reps must all be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let positions = (0..points)
        .map(|_| {
            [
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(0.2..1.2),
            ]
        })
        .collect();
    let pc = PointCloud::from_positions(positions);
    let cfg = SamplingConfig { target_points: target, ..SamplingConfig::default() };
    let report = bench_samplers(&pc, &cfg, reps, 0).map_err(|e| Failure::Other(e.to_string()))?;
    let mut csv = String::from("strategy,input_n,target_n,median_ns,min_ns,max_ns\n");
    for r in &report.rows {
        writeln!(csv, "{},{},{},{},{},{}", r.strategy, r.input_n, r.target_n, r.median_ns, r.min_ns, r.max_ns)
            .expect("writing to a String cannot fail");
    }
    print!("{csv}");
    if let Some(path) = out {
        std::fs::write(path, csv)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<(), Failure> {
    require(path, "nothing to inspect")?;
    let head = {
        let bytes = std::fs::read(path)?;
        bytes.get(..4).map(<[u8]>::to_vec).unwrap_or_default()
    };
    if head == *b"IDPD" {
        let ds = load_dataset(path)?;
        let first = ds
            .trajectories
            .first()
            .and_then(|t| t.observations.first());
        println!("dataset {}", path.display());
        println!("  trajectories: {}", ds.trajectories.len());
        println!("  steps: {}", ds.total_steps());
        println!("  points per cloud: {}", first.map_or(0, |o| o.cloud.len()));
        println!("  action dims: {}", ds.stats.action_min.len());
        println!("  proprio dims: {}", ds.stats.proprio_mean.len());
        println!("  depth grids: {}", first.is_some_and(|o| o.image.is_some()));
        println!("  action min: {:?}", ds.stats.action_min);
        println!("  action max: {:?}", ds.stats.action_max);
    } else if head == *b"TNCK" {
        let (params, tag) = load_checkpoint(path).map_err(HarnessError::from)?;
        let numel: usize = params.iter().map(|p| p.value.numel()).sum();
        let trainable: usize =
            params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum();
        println!("checkpoint {}", path.display());
        println!("  tensors: {}", params.len());
        println!("  values: {numel} ({trainable} trainable)");
        println!("  manifest tag: {tag:016x}");
    } else {
        let m = parse_manifest(path)?;
        println!("manifest {}", path.display());
        println!("  hash: {}", m.hash_hex());
        println!("  artifact prefix: {}", m.short_hash());
        print!("{}", m.to_canonical_string());
    }
    Ok(())
}
