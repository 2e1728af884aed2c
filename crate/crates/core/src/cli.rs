//! Command-line pipeline. Every command writes its outputs and a
//! `manifest.json` into one run directory.
//!
//! Exit codes: 0 success, 2 usage, then [`Error::exit_code`] by category
//! (3 missing file, 4 format or version, 5 config, 6 numeric abort, 7 other
//! I/O, 8 data). Failures print one line `error[<category>]: <message>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{
    generate_targets, load_image_set, read_idx_padded, save_image_set, synth_glyphs, GlyphConfig,
    LabeledImage, Provenance,
};
use crate::error::{Error, Result};
use crate::generator::{build_generator, GeneratorCheckpoint, GeneratorSpec};
use crate::imageio;
use crate::metrics::{
    aggregate, config_digest, median, read_trace_csv, write_records_csv, write_svg_curves,
    write_trace_csv, AggregateReport, EvalRecord, Series,
};
use crate::recovery::{recover_batch, RecoveryConfig, RecoveryResult, RecoveryTrace, TracePoint};
use crate::trainer::{sample_grid, train, DiscriminatorSpec, TrainConfig};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const RESULTS_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "cgan-inversion",
    version,
    about = "Recover (z, y) from conditional GAN images"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a randomly initialised generator checkpoint.
    MakeGenerator(MakeGeneratorArgs),
    /// Render a labeled glyph set (or convert IDX files) to an image set.
    SynthData(SynthDataArgs),
    /// Train a conditional generator on an image set.
    Train(TrainArgs),
    /// Sample generated targets with their ground truth.
    Generate(GenerateArgs),
    /// Recover (z, y) for every target in an image set.
    Recover(RecoverArgs),
    /// Aggregate one or more recovery runs into a report.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct MakeGeneratorArgs {
    /// `compact`, `desk`, or a JSON generator spec file.
    #[arg(long, default_value = "compact")]
    pub spec: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthDataArgs {
    /// JSON glyph config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Convert an IDX image file instead of rendering glyphs.
    #[arg(long, requires = "idx_labels")]
    pub idx_images: Option<PathBuf>,
    #[arg(long, requires = "idx_images")]
    pub idx_labels: Option<PathBuf>,
    /// Canvas size IDX images are centred on.
    #[arg(long, default_value_t = 32)]
    pub canvas: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Image-set index (`images.json`).
    #[arg(long)]
    pub data: PathBuf,
    /// `compact`, `desk`, or a JSON generator spec file.
    #[arg(long, default_value = "compact")]
    pub generator: String,
    /// `compact` or a JSON discriminator spec file.
    #[arg(long, default_value = "compact")]
    pub discriminator: String,
    /// JSON training config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RecoverArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Image-set index of the targets.
    #[arg(long)]
    pub targets: PathBuf,
    /// JSON recovery config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Drop the penalty term.
    #[arg(long)]
    pub no_reg: bool,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Iteration at which both step sizes halve.
    #[arg(long)]
    pub schedule: Option<u64>,
    #[arg(long)]
    pub max_iters: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trace_stride: Option<u64>,
    /// Stop a target once its total loss reaches this value.
    #[arg(long)]
    pub loss_tolerance: Option<f64>,
    /// Only the first N targets.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// `results.json` files written by `recover`.
    #[arg(long, required = true, num_args = 1..)]
    pub results: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_digest: String,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
}

struct Run {
    command: &'static str,
    out: PathBuf,
    started: Instant,
    started_unix: u64,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    digest: String,
}

impl Run {
    fn start(command: &'static str, out: &Path) -> Result<Self> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        Ok(Run {
            command,
            out: out.to_path_buf(),
            started: Instant::now(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            digest: String::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.outputs.push(PathBuf::from(name));
        p
    }

    fn finish(self) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            args: std::env::args().skip(1).collect(),
            config_digest: self.digest,
            seeds: self.seeds,
            inputs: self.inputs,
            outputs: self.outputs,
            tool_version: TOOL_VERSION.to_string(),
            started_unix: self.started_unix,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        write_json(&self.out.join("manifest.json"), &manifest)?;
        Ok(manifest)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn generator_spec(name: &str) -> Result<GeneratorSpec> {
    match name {
        "compact" => Ok(GeneratorSpec::compact()),
        "desk" => Ok(GeneratorSpec::desk_default()),
        path => read_json(Path::new(path)),
    }
}

fn discriminator_spec(name: &str) -> Result<DiscriminatorSpec> {
    match name {
        "compact" => Ok(DiscriminatorSpec::compact()),
        path => read_json(Path::new(path)),
    }
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn run(cli: Cli) -> Result<RunManifest> {
    match cli.command {
        Command::MakeGenerator(a) => cmd_make_generator(&a),
        Command::SynthData(a) => cmd_synth_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Generate(a) => cmd_generate(&a),
        Command::Recover(a) => cmd_recover(&a),
        Command::Eval(a) => cmd_eval(&a),
    }
}

pub fn cmd_make_generator(args: &MakeGeneratorArgs) -> Result<RunManifest> {
    let spec = generator_spec(&args.spec)?;
    let mut run = Run::start("make-generator", &args.out)?;
    run.digest = config_digest(&spec)?;
    run.seeds.insert("init".into(), args.seed);
    let ckpt = build_generator(spec, args.seed)?;
    ckpt.save(run.path("generator.ckpt"))?;
    run.finish()
}

pub fn cmd_synth_data(args: &SynthDataArgs) -> Result<RunManifest> {
    let mut run = Run::start("synth-data", &args.out)?;
    let images = if let (Some(ip), Some(lp)) = (&args.idx_images, &args.idx_labels) {
        run.inputs.extend([ip.clone(), lp.clone()]);
        run.digest = config_digest(&("idx", args.canvas))?;
        read_idx_padded(ip, lp, args.canvas)?
    } else {
        let config: GlyphConfig = match &args.config {
            Some(p) => {
                run.inputs.push(p.clone());
                read_json(p)?
            }
            None => GlyphConfig::default(),
        };
        run.digest = config_digest(&(&config, args.per_class))?;
        run.seeds.insert("glyphs".into(), args.seed);
        synth_glyphs(&config, args.per_class, args.seed)?
    };
    save_image_set(run.path("images.json"), &images)?;
    run.outputs.push("images.f64".into());
    write_preview(&images, &run.path("preview.pgm"))?;
    run.finish()
}

fn write_preview(images: &[LabeledImage], path: &Path) -> Result<()> {
    let tiles: Vec<_> = images.iter().take(100).map(|i| i.pixels.clone()).collect();
    let cols = tiles.len().min(10);
    let rows = tiles.len().div_ceil(cols.max(1));
    imageio::write_pnm(path, &imageio::mosaic(&tiles, rows, cols)?)
}

pub fn cmd_train(args: &TrainArgs) -> Result<RunManifest> {
    let gen_spec = generator_spec(&args.generator)?;
    let disc_spec = discriminator_spec(&args.discriminator)?;
    let mut config: TrainConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if let Some(b) = args.batch_size {
        config.batch_size = b;
    }
    if let Some(s) = args.seed {
        config.generator_seed = s;
        config.discriminator_seed = s.wrapping_add(1);
        config.data_seed = s.wrapping_add(2);
    }
    config.validate()?;
    let data = load_image_set(&args.data)?;
    let mut run = Run::start("train", &args.out)?;
    run.inputs.push(args.data.clone());
    run.digest = config_digest(&(&gen_spec, &disc_spec, &config))?;
    run.seeds.extend([
        ("generator".to_string(), config.generator_seed),
        ("discriminator".to_string(), config.discriminator_seed),
        ("data".to_string(), config.data_seed),
    ]);
    let (ckpt, report) = train(
        gen_spec,
        &disc_spec,
        &data,
        &config,
        Some(&args.out),
        &mut |e| {
            eprintln!(
                "epoch {} d_loss {:.4} g_loss {:.4} D(real) {:.3} D(fake) {:.3}",
                e.epoch + 1,
                e.d_loss,
                e.g_loss,
                e.d_real,
                e.d_fake
            )
        },
    )?;
    for p in report.sample_grids.iter().chain(&report.final_checkpoint) {
        if let Some(name) = p.file_name() {
            run.outputs.push(PathBuf::from(name));
        }
    }
    run.outputs.push("training.csv".into());
    ckpt.save(run.path("generator.ckpt"))?;
    run.finish()
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<RunManifest> {
    let ckpt = GeneratorCheckpoint::load(&args.ckpt)?;
    if args.n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    let mut run = Run::start("generate", &args.out)?;
    run.inputs.push(args.ckpt.clone());
    run.digest = config_digest(&(file_digest(&args.ckpt)?, args.n))?;
    run.seeds.insert("targets".into(), args.seed);
    let targets = generate_targets(&ckpt, args.n, args.seed)?;
    save_image_set(run.path("targets.json"), &targets)?;
    run.outputs.push("targets.f64".into());
    write_preview(&targets, &run.path("preview.pgm"))?;
    sample_grid(&ckpt, ckpt.cond_dim(), 8, args.seed, run.path("grid.pgm"))?;
    run.finish()
}

/// Recovery outcome for one target as stored in `results.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryEntry {
    pub id: String,
    pub record: Option<EvalRecord>,
    pub z_p: Vec<f64>,
    pub y_p: Vec<f64>,
    pub trace_file: Option<PathBuf>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRunFile {
    pub format_version: u32,
    pub generator_digest: String,
    pub config: RecoveryConfig,
    pub config_digest: String,
    pub entries: Vec<RecoveryEntry>,
}

impl RecoveryRunFile {
    pub fn load(path: &Path) -> Result<Self> {
        let file: RecoveryRunFile = read_json(path)?;
        if file.format_version != RESULTS_VERSION {
            return Err(Error::Version {
                found: file.format_version,
                expected: RESULTS_VERSION,
            });
        }
        Ok(file)
    }

    pub fn records(&self) -> Vec<EvalRecord> {
        self.entries
            .iter()
            .filter_map(|e| e.record.clone())
            .collect()
    }
}

/// Resolves the recovery config from an optional file and flag overrides.
pub fn recovery_config(args: &RecoverArgs) -> Result<RecoveryConfig> {
    let mut c: RecoveryConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => RecoveryConfig::default(),
    };
    if args.no_reg {
        c.use_regularizer = false;
    }
    c.lambda = args.lambda.or(c.lambda);
    c.alpha = args.alpha.unwrap_or(c.alpha);
    c.beta = args.beta.unwrap_or(c.beta);
    c.schedule = args.schedule.unwrap_or(c.schedule);
    c.max_iterations = args.max_iters.unwrap_or(c.max_iterations);
    c.rng_seed = args.seed.unwrap_or(c.rng_seed);
    c.trace_stride = args.trace_stride.unwrap_or(c.trace_stride);
    c.loss_tolerance = args.loss_tolerance.or(c.loss_tolerance);
    c.validate()?;
    Ok(c)
}

pub fn eval_record(
    target: &LabeledImage,
    result: &RecoveryResult,
    regularizer: bool,
) -> Result<EvalRecord> {
    let z_error = match (&target.latent, target.provenance) {
        (Some(z), Provenance::Generated) => Some(crate::metrics::z_recovery_error(z, &result.z_p)?),
        _ => None,
    };
    Ok(EvalRecord {
        id: target.id.clone(),
        provenance: target.provenance,
        reconstruction_loss: result.recon_mse,
        initial_loss: result.initial_recon_mse,
        z_error,
        label_true: target.label,
        label_decoded: result.label,
        label_tie: result.label_tie,
        regularizer,
        iterations: result.iterations,
    })
}

fn trace_file_name(index: usize, id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{index:05}-{safe}.csv")
}

pub fn cmd_recover(args: &RecoverArgs) -> Result<RunManifest> {
    let config = recovery_config(args)?;
    let ckpt = GeneratorCheckpoint::load(&args.ckpt)?;
    let mut targets = load_image_set(&args.targets)?;
    if let Some(n) = args.limit {
        targets.truncate(n);
    }
    if targets.is_empty() {
        return Err(Error::Empty("targets".into()));
    }
    let mut run = Run::start("recover", &args.out)?;
    run.inputs.extend([args.ckpt.clone(), args.targets.clone()]);
    run.digest = config_digest(&config)?;
    run.seeds.insert("recovery".into(), config.rng_seed);

    let results = match args.jobs {
        Some(jobs) => rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| Error::Config(format!("--jobs: {e}")))?
            .install(|| recover_batch(&targets, &ckpt, &config))?,
        None => recover_batch(&targets, &ckpt, &config)?,
    };

    let trace_dir = args.out.join("traces");
    fs::create_dir_all(&trace_dir).map_err(|e| Error::io(&trace_dir, e))?;
    let regularizer = config.use_regularizer;
    let mut entries = Vec::with_capacity(targets.len());
    for (i, (target, result)) in targets.iter().zip(results).enumerate() {
        match result {
            Ok(r) => {
                let name = PathBuf::from("traces").join(trace_file_name(i, &target.id));
                write_trace_csv(args.out.join(&name), &r.trace)?;
                entries.push(RecoveryEntry {
                    id: target.id.clone(),
                    record: Some(eval_record(target, &r, regularizer)?),
                    z_p: r.z_p.data().to_vec(),
                    y_p: r.y_p.data().to_vec(),
                    trace_file: Some(name),
                    error: None,
                });
            }
            Err(e) => entries.push(RecoveryEntry {
                id: target.id.clone(),
                record: None,
                z_p: Vec::new(),
                y_p: Vec::new(),
                trace_file: None,
                error: Some(format!("{}: {e}", e.category())),
            }),
        }
    }
    run.outputs.push("traces".into());
    let file = RecoveryRunFile {
        format_version: RESULTS_VERSION,
        generator_digest: file_digest(&args.ckpt)?,
        config_digest: run.digest.clone(),
        config,
        entries,
    };
    let records = file.records();
    write_json(&run.path("results.json"), &file)?;
    if !records.is_empty() {
        write_records_csv(run.path("records.csv"), &records)?;
    }
    run.finish()
}

/// One Table-1 style row: loss (initial) and accuracy for a group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub provenance: Provenance,
    pub regularizer: bool,
    pub report: AggregateReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub failed: usize,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s =
            String::from("recovered_from regularizer reconstruction_loss (initial) accuracy n\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{} {} {} {}\n",
                r.provenance.as_str(),
                if r.regularizer { "yes" } else { "no" },
                r.report.table_row(),
                r.report.count
            ));
        }
        s
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// A per-iteration quantity reduced across traces, on the first trace's grid.
fn curve(
    traces: &[RecoveryTrace],
    value: impl Fn(&TracePoint) -> Option<f64>,
    reduce: fn(&[f64]) -> Option<f64>,
) -> Vec<(f64, f64)> {
    let Some(first) = traces.first() else {
        return Vec::new();
    };
    first
        .points
        .iter()
        .filter_map(|p| {
            let vals: Vec<f64> = traces
                .iter()
                .filter_map(|t| t.at(p.iteration).and_then(&value))
                .collect();
            reduce(&vals).map(|m| (p.iteration as f64, m))
        })
        .collect()
}

pub fn cmd_eval(args: &EvalArgs) -> Result<RunManifest> {
    let mut run = Run::start("eval", &args.out)?;
    let mut records = Vec::new();
    let mut failed = 0;
    let mut loss_curves = Vec::new();
    let mut acc_curves = Vec::new();
    let mut digests = Vec::new();
    for path in &args.results {
        let file = RecoveryRunFile::load(path)?;
        run.inputs.push(path.clone());
        digests.push(file.config_digest.clone());
        failed += file.entries.iter().filter(|e| e.record.is_none()).count();
        records.extend(file.records());
        let base = path.parent().unwrap_or(Path::new("."));
        let traces = file
            .entries
            .iter()
            .filter_map(|e| e.trace_file.as_ref())
            .map(|t| read_trace_csv(base.join(t)))
            .collect::<Result<Vec<_>>>()?;
        let label = format!(
            "{} ({})",
            base.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            if file.config.use_regularizer {
                "with regularizer"
            } else {
                "without regularizer"
            }
        );
        loss_curves.push(Series {
            name: label.clone(),
            points: curve(&traces, |p| Some(p.recon_mse), median),
        });
        acc_curves.push(Series {
            name: label,
            points: curve(
                &traces,
                |p| p.label_correct.map(|c| if c { 1.0 } else { 0.0 }),
                mean,
            ),
        });
    }
    if records.is_empty() {
        return Err(Error::Empty(
            "no successful recoveries in the given results".into(),
        ));
    }
    run.digest = config_digest(&digests)?;

    let mut groups: BTreeMap<(Provenance, bool), Vec<EvalRecord>> = BTreeMap::new();
    for r in &records {
        groups
            .entry((r.provenance, r.regularizer))
            .or_default()
            .push(r.clone());
    }
    let rows = groups
        .into_iter()
        .map(|((provenance, regularizer), recs)| {
            Ok(ReportRow {
                provenance,
                regularizer,
                report: aggregate(&recs, &run.digest)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport { rows, failed };
    write_json(&run.path("report.json"), &report)?;
    let table = run.path("summary.txt");
    fs::write(&table, report.table()).map_err(|e| Error::io(&table, e))?;
    write_records_csv(run.path("records.csv"), &records)?;
    write_svg_curves(
        run.path("loss.svg"),
        "median per-pixel reconstruction loss",
        &loss_curves,
        true,
    )?;
    if acc_curves.iter().any(|s| !s.points.is_empty()) {
        write_svg_curves(
            run.path("accuracy.svg"),
            "label accuracy",
            &acc_curves,
            false,
        )?;
    }
    print!("{}", report.table());
    run.finish()
}
