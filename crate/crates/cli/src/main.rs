//! Command-line front end: dataset generation, two-stage training,
//! evaluation, single-image inference, and semantic-feature export.
//! Exit codes: 0 success, 1 runtime failure, 2 usage error (including
//! input paths that do not exist).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use textrec_core::archive::Archive;
use textrec_core::data::{Dataset, Domain, Manifest, Split};
use textrec_core::decoder::Variant;
use textrec_core::eval;
use textrec_core::model::Branch;
use textrec_core::pgm;
use textrec_core::tensor::Tensor;
use textrec_core::train::{self, load_checkpoint, TrainConfig};

const EVAL_CHUNK: usize = 32;

#[derive(Parser)]
#[command(
    name = "textrec",
    about = "Synthetic-glyph scene text recognizer: generate data, train, evaluate, infer"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a two-domain glyph dataset from a manifest file.
    Gen {
        /// Manifest file (flat key = value text).
        #[arg(long)]
        manifest: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing dataset in the output directory.
        #[arg(long)]
        force: bool,
        /// Override the manifest's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the two-stage training schedule.
    Train {
        /// Training config file (flat key = value text).
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory from `gen`, or a manifest file to render
        /// in memory.
        #[arg(long)]
        manifest: PathBuf,
        /// Run directory for metrics.csv and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's decoder variant.
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Score a checkpoint on every split and domain of a dataset.
    Eval {
        /// Checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory or manifest file.
        #[arg(long)]
        manifest: PathBuf,
        /// Decoder variant to score; repeat for several, default all four.
        #[arg(long = "variant")]
        variants: Vec<Variant>,
        /// Also write the report as CSV to this path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Read text from one grayscale image (binary P5 PGM).
    Infer {
        /// Checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Override the checkpoint config's decoder variant.
        #[arg(long)]
        variant: Option<Variant>,
        /// Write per-step attention artifacts (CSV + PGM heatmaps) here.
        #[arg(long)]
        dump_dir: Option<PathBuf>,
        /// Image to read.
        image: PathBuf,
    },
    /// Export semantic features of test samples as a tensor archive.
    DumpFeatures {
        /// Checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory or manifest file.
        #[arg(long)]
        manifest: PathBuf,
        /// Output archive path.
        #[arg(long)]
        out: PathBuf,
        /// Samples per domain; default every test sample.
        count: Option<usize>,
    },
}

// ── error plumbing ──────────────────────────────────────────────────

enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Inputs the user names on the command line must exist up front; a
/// bad path is a usage error, not a runtime one.
fn require_input(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} not found: {}", path.display())))
    }
}

/// A dataset argument is either a directory written by `gen` or a
/// manifest file, which is rendered in memory (generation is
/// deterministic, so both routes agree).
fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    require_input(path, "dataset")?;
    if path.is_dir() {
        Ok(Dataset::load(path)?)
    } else {
        let m = Manifest::parse(&fs::read_to_string(path)?)?;
        Ok(Dataset::generate(&m)?)
    }
}

// ── commands ────────────────────────────────────────────────────────

fn cmd_gen(manifest: &Path, out: &Path, force: bool, seed: Option<u64>) -> Result<(), CliError> {
    require_input(manifest, "manifest")?;
    let mut m = Manifest::parse(&fs::read_to_string(manifest)?)?;
    if let Some(s) = seed {
        m.seed = s;
    }
    let occupied = out.join("manifest.txt").exists() || out.join("samples.bin").exists();
    if occupied && !force {
        return Err(CliError::Runtime(format!(
            "{} already holds a dataset; pass --force to overwrite",
            out.display()
        )));
    }
    let ds = Dataset::generate(&m)?;
    ds.save(out)?;
    let per_domain = m.train_count + m.val_count + m.test_count;
    println!(
        "wrote {} samples ({} per domain) to {}",
        2 * per_domain,
        per_domain,
        out.display()
    );
    Ok(())
}

fn cmd_train(
    config: &Path,
    manifest: &Path,
    out: &Path,
    checkpoint: Option<&Path>,
    seed: Option<u64>,
    variant: Option<Variant>,
) -> Result<(), CliError> {
    require_input(config, "config")?;
    let mut cfg = TrainConfig::parse(&fs::read_to_string(config)?)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(v) = variant {
        cfg.variant = v;
    }
    if let Some(ck) = checkpoint {
        require_input(ck, "checkpoint")?;
    }
    let ds = load_dataset(manifest)?;
    let outcome = train::train(&cfg, &ds, out, checkpoint)?;
    println!("metrics: {}", outcome.metrics_path.display());
    if let Some(d) = &outcome.stage1_dir {
        println!("stage1 checkpoint: {}", d.display());
    }
    if let Some(d) = &outcome.partial_dir {
        println!("partial checkpoint: {}", d.display());
    }
    if let Some(d) = &outcome.final_dir {
        println!("final checkpoint: {}", d.display());
    }
    println!("steps: {}", outcome.global_step);
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    manifest: &Path,
    variants: &[Variant],
    out: Option<&Path>,
) -> Result<(), CliError> {
    require_input(checkpoint, "checkpoint")?;
    let ds = load_dataset(manifest)?;
    let (cfg, model, _, _) = load_checkpoint(checkpoint, None)?;
    cfg.check_dataset(&ds.manifest)?;
    let variants: Vec<Variant> = if variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        variants.to_vec()
    };
    let report = eval::evaluate(
        &model,
        &ds,
        &variants,
        &Split::ALL,
        cfg.confidence_rule,
        EVAL_CHUNK,
    )?;
    print!("{}", report.render());
    if let Some(p) = out {
        fs::write(p, report.to_csv())?;
        println!("report: {}", p.display());
    }
    Ok(())
}

fn cmd_infer(
    checkpoint: &Path,
    image: &Path,
    variant: Option<Variant>,
    dump_dir: Option<&Path>,
) -> Result<(), CliError> {
    require_input(checkpoint, "checkpoint")?;
    require_input(image, "image")?;
    let (cfg, model, _, _) = load_checkpoint(checkpoint, None)?;
    let img = pgm::load_image(image)?;
    let (h, w) = (img.shape[1], img.shape[2]);
    if h % 8 != 0 || w % 8 != 0 || h < 16 || w < 16 {
        return Err(CliError::Runtime(format!(
            "image is {h}x{w}; each side must be a multiple of 8 and at least 16"
        )));
    }
    let variant = variant.unwrap_or(cfg.variant);
    let batch = Tensor::new(vec![1, 1, h, w], img.data).expect("image tensor");
    let outcome = model.infer(&batch, variant, cfg.confidence_rule)?.remove(0);
    println!("text: {}", outcome.text);
    println!("confidence: {}", outcome.confidence);
    println!("branch: {}", outcome.branch.as_str());
    println!("confidence_bilstm: {}", outcome.conf_bilstm);
    println!("confidence_generator: {}", outcome.conf_generator);
    if let Some(dir) = dump_dir {
        fs::create_dir_all(dir)?;
        let traces = model.decode_both(&batch, variant, cfg.confidence_rule)?;
        let (rnn_trace, gen_trace) = &traces[0];
        let trace = match outcome.branch {
            Branch::BiLstm => rnn_trace,
            Branch::Generator => gen_trace,
        };
        fs::write(dir.join("attention.csv"), eval::attention_csv(trace))?;
        for (t, map) in eval::attention_heatmaps(trace).iter().enumerate() {
            pgm::save_image(&dir.join(format!("step_{t:02}.pgm")), map)?;
        }
        println!("dumps: {}", dir.display());
    }
    Ok(())
}

fn cmd_dump_features(
    checkpoint: &Path,
    manifest: &Path,
    out: &Path,
    count: Option<usize>,
) -> Result<(), CliError> {
    require_input(checkpoint, "checkpoint")?;
    let ds = load_dataset(manifest)?;
    let (cfg, model, _, _) = load_checkpoint(checkpoint, None)?;
    cfg.check_dataset(&ds.manifest)?;
    let avail = ds.manifest.test_count;
    let n = count.unwrap_or(avail);
    if n == 0 || n > avail {
        return Err(CliError::Runtime(format!(
            "count {n} outside 1..={avail} test samples per domain"
        )));
    }
    let mut ar = Archive::new();
    for (domain, branch, tag) in [
        (Domain::Support, Branch::BiLstm, "support"),
        (Domain::Target, Branch::Generator, "generated"),
    ] {
        let samples = ds.get(Split::Test, domain);
        let feats = eval::semantic_features(&model, &samples[..n], branch, EVAL_CHUNK)?;
        for (k, f) in feats.into_iter().enumerate() {
            ar.push(&format!("{tag}/{k}"), f)?;
        }
    }
    ar.save(out)?;
    println!("wrote {} feature maps to {}", 2 * n, out.display());
    Ok(())
}

// ── entry ───────────────────────────────────────────────────────────

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Gen { manifest, out, force, seed } => cmd_gen(&manifest, &out, force, seed),
        Cmd::Train { config, manifest, out, checkpoint, seed, variant } => {
            cmd_train(&config, &manifest, &out, checkpoint.as_deref(), seed, variant)
        }
        Cmd::Eval { checkpoint, manifest, variants, out } => {
            cmd_eval(&checkpoint, &manifest, &variants, out.as_deref())
        }
        Cmd::Infer { checkpoint, variant, dump_dir, image } => {
            cmd_infer(&checkpoint, &image, variant, dump_dir.as_deref())
        }
        Cmd::DumpFeatures { checkpoint, manifest, out, count } => {
            cmd_dump_features(&checkpoint, &manifest, &out, count)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
