//! `physfusion` command line: dataset generation, training, evaluation,
//! gradient checks, ablation grids and plots.
//!
//! Exit codes: 0 ok, 1 runtime failure, 2 configuration or usage error.

mod plot;

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use physfusion::ablation::{gate_tqa_grid, module_grid, run_grid, summarize, VariantResult};
use physfusion::checkpoint::Checkpoint;
use physfusion::diagnostics::gradient_suite;
use physfusion::scene_sim::{
    clutter_rcs_moments, excess_kurtosis, generate_sequence, read_dataset, target_rcs_moments, write_dataset, Dataset,
    SceneSample, SimConfig,
};
use physfusion::setpred::evaluate_ap;
use physfusion::train::{gate_dump, predict_windows, window_ranges, RunConfig, Trainer};
use physfusion::{Error, Result};

/// Points within this distance of a truth box count as target returns.
const TARGET_MARGIN: f64 = 0.5;

#[derive(Parser)]
#[command(name = "physfusion", version, about = "Radar-image fusion detector on synthetic water-surface scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML run configuration; omitted fields keep their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone, Default)]
struct ToggleArgs {
    /// image-only model: no radar branch at all
    #[arg(long)]
    no_radar: bool,
    #[arg(long)]
    no_pir: bool,
    #[arg(long)]
    no_sasa: bool,
    #[arg(long)]
    no_gate: bool,
    #[arg(long)]
    no_tqa: bool,
    /// window length T
    #[arg(long)]
    history: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Grid {
    Module,
    GateTqa,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate sequences and write a dataset file; prints RCS statistics
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// frames per sequence
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, default_value_t = 1)]
        sequences: usize,
        /// heavy clutter rate
        #[arg(long)]
        clutter_heavy: bool,
    },
    /// Train on a dataset; writes log.jsonl, checkpoint.json and gates.json to --out
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        toggles: ToggleArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// train on the first N windows only
        #[arg(long)]
        windows: Option<usize>,
    },
    /// AP metrics of a checkpoint on a dataset, as JSON
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// evaluate the first N windows only
        #[arg(long)]
        windows: Option<usize>,
        /// also write the report here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the registered micro-instances
    Gradcheck {
        #[arg(long, default_value_t = 17)]
        seed: u64,
    },
    /// Train and evaluate every variant of a toggle grid over several seeds
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Grid::All)]
        grid: Grid,
        /// comma-separated variant names to keep
        #[arg(long)]
        only: Option<String>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value_t = 100)]
        train_sequences: usize,
        #[arg(long, default_value_t = 20)]
        eval_sequences: usize,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Render SVG plots from training logs, ablation results, datasets and gate dumps
    Plot {
        #[arg(long = "log")]
        logs: Vec<PathBuf>,
        #[arg(long)]
        ablation: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        gates: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply_toggles(cfg: &mut RunConfig, t: &ToggleArgs) {
    let toggles = &mut cfg.model.toggles;
    toggles.radar &= !t.no_radar;
    toggles.pir &= !t.no_pir;
    toggles.sasa &= !t.no_sasa;
    toggles.gate &= !t.no_gate;
    toggles.tqa &= !t.no_tqa;
    if let Some(h) = t.history {
        cfg.model.history = h;
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

#[derive(Serialize)]
struct GenerateStats {
    samples: usize,
    sequences: usize,
    target_points: usize,
    clutter_points: usize,
    target_rcs_excess_kurtosis: f64,
    clutter_rcs_excess_kurtosis: f64,
    /// closed-form values of the configured distributions; `null` when the
    /// fourth moment does not exist
    model_target_rcs_excess_kurtosis: f64,
    model_clutter_rcs_excess_kurtosis: f64,
}

/// Splits every point's RCS by whether it falls inside a truth box.
fn rcs_by_membership(samples: &[SceneSample]) -> (Vec<f64>, Vec<f64>) {
    let (mut target, mut clutter) = (Vec::new(), Vec::new());
    for s in samples {
        for p in &s.points {
            if s.truths.iter().any(|t| t.contains(p.x, p.y, TARGET_MARGIN)) {
                target.push(p.rcs);
            } else {
                clutter.push(p.rcs);
            }
        }
    }
    (target, clutter)
}

/// Sequence `i` is drawn with seed `seed * 1000 + i`.
fn generate(cfg: RunConfig, out: &Path, frames: Option<usize>, sequences: usize, heavy: bool) -> Result<()> {
    let mut sim = cfg.sim;
    if let Some(f) = frames {
        sim.frames = f;
    }
    if heavy {
        sim.clutter_rate = SimConfig::clutter_heavy().clutter_rate;
    }
    sim.validate()?;
    if sequences == 0 {
        return Err(Error::Usage("--sequences must be at least 1".into()));
    }
    let mut samples = Vec::new();
    for i in 0..sequences as u64 {
        samples.extend(generate_sequence(&sim, cfg.seed * 1000 + i)?);
    }
    let (target, clutter) = rcs_by_membership(&samples);
    let stats = GenerateStats {
        samples: samples.len(),
        sequences,
        target_points: target.len(),
        clutter_points: clutter.len(),
        target_rcs_excess_kurtosis: excess_kurtosis(&target),
        clutter_rcs_excess_kurtosis: excess_kurtosis(&clutter),
        model_target_rcs_excess_kurtosis: target_rcs_moments(&sim).excess_kurtosis,
        model_clutter_rcs_excess_kurtosis: clutter_rcs_moments(&sim).excess_kurtosis,
    };
    write_dataset(&Dataset::new(sim, samples), out)?;
    print_json(&stats)
}

fn first_windows(samples: &[SceneSample], history: usize, limit: Option<usize>) -> Result<Vec<std::ops::Range<usize>>> {
    let mut windows = window_ranges(samples, history);
    if let Some(n) = limit {
        if n == 0 || n > windows.len() {
            return Err(Error::Usage(format!("--windows {n} outside 1..={}", windows.len())));
        }
        windows.truncate(n);
    }
    Ok(windows)
}

/// Validates everything that does not depend on the dataset's simulator
/// settings, so configuration mistakes surface before any file is read.
fn validate_without_sim(cfg: &RunConfig) -> Result<()> {
    let mut probe = cfg.clone();
    probe.sim.image_size = probe.model.image.size;
    probe.sim.half_extent = probe.model.image.half_extent;
    probe.validate()
}

fn train(mut cfg: RunConfig, data: &Path, out: &Path, steps: Option<usize>, lr: Option<f64>, limit: Option<usize>) -> Result<()> {
    if let Some(s) = steps {
        cfg.optim.steps = s;
    }
    if let Some(lr) = lr {
        cfg.optim.lr = lr;
    }
    validate_without_sim(&cfg)?;
    let dataset = read_dataset(data)?;
    cfg.sim = dataset.config.clone();
    cfg.validate()?;
    let windows = first_windows(&dataset.samples, cfg.model.history, limit)?;
    fs::create_dir_all(out)?;
    let mut log = BufWriter::new(File::create(out.join("log.jsonl"))?);
    let mut trainer = Trainer::new(cfg, &dataset.samples)?;
    let entries = trainer.fit_windows(&dataset.samples, &windows, |e| {
        serde_json::to_writer(&mut log, e)?;
        log.write_all(b"\n")?;
        Ok(())
    })?;
    log.flush()?;
    Checkpoint::from_trainer(&trainer).save(out.join("checkpoint.json"))?;
    let gates = gate_dump(&trainer.model, &trainer.norm, &dataset.samples, TARGET_MARGIN)?;
    write_json(&out.join("gates.json"), &gates)?;
    match entries.last() {
        Some(last) => print_json(last),
        None => Ok(()),
    }
}

fn eval(data: &Path, checkpoint: &Path, limit: Option<usize>, out: Option<&Path>) -> Result<()> {
    let dataset = read_dataset(data)?;
    let trainer = Checkpoint::load(checkpoint)?.into_trainer()?;
    let model = &trainer.model;
    if dataset.config.image_size != model.config.image.size {
        return Err(Error::Usage(format!(
            "dataset images are {}px, checkpoint expects {}px",
            dataset.config.image_size, model.config.image.size
        )));
    }
    let windows = first_windows(&dataset.samples, model.config.history, limit)?;
    let frames = predict_windows(model, &trainer.norm, &dataset.samples, &windows)?;
    let report = evaluate_ap(&frames, model.config.num_classes)?;
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    print_json(&report)
}

fn gradcheck(seed: u64) -> Result<bool> {
    let suite = gradient_suite(seed)?;
    for entry in &suite {
        print_json(entry)?;
    }
    Ok(suite.iter().all(|e| e.passed))
}

#[allow(clippy::too_many_arguments)]
fn ablate(
    mut cfg: RunConfig,
    out: &Path,
    grid: Grid,
    only: Option<&str>,
    seeds: u64,
    train_sequences: usize,
    eval_sequences: usize,
    steps: Option<usize>,
) -> Result<()> {
    if let Some(s) = steps {
        cfg.optim.steps = s;
    }
    cfg.validate()?;
    let mut variants = match grid {
        Grid::Module => module_grid(),
        Grid::GateTqa => gate_tqa_grid(),
        Grid::All => module_grid().into_iter().chain(gate_tqa_grid()).collect(),
    };
    if let Some(names) = only {
        let keep: Vec<&str> = names.split(',').map(str::trim).collect();
        if let Some(bad) = keep.iter().find(|n| !variants.iter().any(|v| v.name == **n)) {
            return Err(Error::Usage(format!("unknown variant {bad}")));
        }
        variants.retain(|v| keep.contains(&v.name.as_str()));
    }
    if seeds == 0 || train_sequences == 0 || eval_sequences == 0 {
        return Err(Error::Usage("--seeds and sequence counts must be positive".into()));
    }
    fs::create_dir_all(out)?;
    let mut results_file = BufWriter::new(File::create(out.join("ablation.jsonl"))?);
    let mut io_error = None;
    let results = run_grid(&cfg, &variants, seeds, train_sequences, eval_sequences, |r| {
        eprintln!("{} seed {}: mAP50 {:.2}", r.name, r.seed, r.map50);
        let written = serde_json::to_writer(&mut results_file, r)
            .map_err(Error::from)
            .and_then(|_| results_file.write_all(b"\n").map_err(Error::from));
        if let Err(e) = written {
            io_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_error {
        return Err(e);
    }
    results_file.flush()?;
    let summary = summarize(&results);
    write_json(&out.join("summary.json"), &summary)?;
    print_json(&summary)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?);
    }
    Ok(out)
}

fn plot_all(logs: &[PathBuf], ablation: Option<&Path>, dataset: Option<&Path>, gates: Option<&Path>, out: &Path) -> Result<()> {
    if logs.is_empty() && ablation.is_none() && dataset.is_none() && gates.is_none() {
        return Err(Error::Usage("plot needs at least one of --log, --ablation, --dataset, --gates".into()));
    }
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    if !logs.is_empty() {
        let mut runs = Vec::new();
        for path in logs {
            let entries: Vec<plot::LogEntry> = read_jsonl(path)?;
            if entries.is_empty() {
                return Err(Error::Usage(format!("{} has no log entries", path.display())));
            }
            let label = path.parent().and_then(Path::file_name).or(path.file_stem()).map_or("run".into(), |s| s.to_string_lossy().into_owned());
            runs.push((label, entries));
        }
        written.extend(plot::training_curves(&runs, out)?);
    }
    if let Some(path) = ablation {
        let results: Vec<VariantResult> = read_jsonl(path)?;
        if results.is_empty() {
            return Err(Error::Usage(format!("{} has no ablation results", path.display())));
        }
        written.push(plot::ap_vs_history(&results, out)?);
    }
    if let Some(path) = dataset {
        let data = read_dataset(path)?;
        let (target, clutter) = rcs_by_membership(&data.samples);
        if target.is_empty() && clutter.is_empty() {
            return Err(Error::Usage(format!("{} has no radar points", path.display())));
        }
        written.extend(plot::radar_statistics(&data.samples, &target, &clutter, TARGET_MARGIN, out)?);
    }
    if let Some(path) = gates {
        let dump: Vec<(f64, f64, bool)> = serde_json::from_str(&fs::read_to_string(path)?)?;
        if dump.is_empty() {
            return Err(Error::Usage(format!("{} has no gate samples", path.display())));
        }
        written.push(plot::gate_scatter(&dump, out)?);
    }
    for p in &written {
        println!("{}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate { config, out, frames, sequences, clutter_heavy } => {
            generate(load_config(&config)?, &out, frames, sequences, clutter_heavy)?
        }
        Command::Train { config, toggles, data, out, steps, lr, windows } => {
            let mut cfg = load_config(&config)?;
            apply_toggles(&mut cfg, &toggles);
            train(cfg, &data, &out, steps, lr, windows)?
        }
        Command::Eval { data, checkpoint, windows, out } => eval(&data, &checkpoint, windows, out.as_deref())?,
        Command::Gradcheck { seed } => return gradcheck(seed),
        Command::Ablate { config, out, grid, only, seeds, train_sequences, eval_sequences, steps } => {
            ablate(load_config(&config)?, &out, grid, only.as_deref(), seeds, train_sequences, eval_sequences, steps)?
        }
        Command::Plot { logs, ablation, dataset, gates, out } => {
            plot_all(&logs, ablation.as_deref(), dataset.as_deref(), gates.as_deref(), &out)?
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Usage(_) | Error::NotImplemented(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
