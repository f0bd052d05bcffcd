//! The `mambo` command line. Every command writes its outputs and a
//! `manifest.json` (resolved configuration, arguments, output checksums)
//! into `--out`; the same manifest inputs give byte-identical outputs.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub use config::{Profile, RunConfig};

use crate::anomaly::{build_anomaly_map, native_lambda, renoise_denoise, AnomalyConfig};
use crate::dataset::{downscale, read_manifest, ImageSet, Label, Stage};
use crate::denoiser::{Checkpoint, GaussianField, UNet};
use crate::error::{Error, Result};
use crate::io::{read_image, read_mask, write_image, write_mask, BitDepth};
use crate::metrics::{iou, nearest_neighbors, seam_mse, FeatureMetric, FeatureSet, Frechet};
use crate::pipeline::{prepare_low_res, reference_contexts, stage_seed, stitch_full, StageModels};
use crate::plane::{Mask, Plane};
use crate::preprocess::{breast_mask, normalize_and_orient, pad_to_multiple, preprocess, OrientedImage};
use crate::sampler::plan_patch_grid;
use crate::schedule::NoiseSchedule;
use crate::synth::{blob_mean, lesion_phantom, raw_mammogram, striped_breast};
use crate::training::{format_log, Trainer};

#[derive(Debug, Parser)]
#[command(name = "mambo", version, about = "Patch-conditioned diffusion for large grayscale images")]
pub struct Cli {
    /// TOML run configuration; keys override the profile values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub profile: Option<Profile>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Upper bound on worker threads for per-image work.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Orient, pad and segment raw images.
    Preprocess(PreprocessArgs),
    /// Train one stage.
    Train(TrainArgs),
    /// Sample a full-resolution image through all three stages.
    Generate(GenerateArgs),
    /// Super-resolve a low-resolution image with stages 2 and 3.
    Sr(SrArgs),
    /// Segment anomalies with a model trained on healthy images.
    Anomaly(AnomalyArgs),
    /// Seam, IoU and Fréchet measurements.
    #[command(subcommand)]
    Metrics(MetricsCommand),
    /// Nearest training images of each query in pixel space.
    NnCheck(NnArgs),
    /// Write synthetic images for demos and tests.
    Synth(SynthArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct Out {
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PreprocessArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[command(flatten)]
    #[serde(skip)]
    pub out: Out,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub stage: u8,
    /// Manifest of `path<TAB>split<TAB>label` lines; `train` entries are used.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    pub data: Option<PathBuf>,
    /// Train on this many synthetic images instead.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Skip manifest entries labelled `lesion`.
    #[arg(long)]
    pub healthy_only: bool,
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Continue from a checkpoint (weights, optimizer and iteration count).
    #[arg(long, conflicts_with = "init_from")]
    pub resume: Option<PathBuf>,
    /// Start from these weights with a fresh optimizer.
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    #[command(flatten)]
    #[serde(skip)]
    pub out: Out,
}

#[derive(Debug, Args, Serialize)]
pub struct Models {
    #[arg(long)]
    pub global: Option<PathBuf>,
    #[arg(long)]
    pub local: Option<PathBuf>,
    #[arg(long)]
    pub patch: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub models: Models,
    #[command(flatten)]
    #[serde(skip)]
    pub out: Out,
}

#[derive(Debug, Args, Serialize)]
pub struct SrArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub models: Models,
    #[command(flatten)]
    #[serde(skip)]
    pub out: Out,
}

#[derive(Debug, Args, Serialize)]
pub struct AnomalyArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Ground-truth lesion mask, for IoU.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Noising steps in units of the 1000-step reference schedule.
    #[arg(long)]
    pub lambda: Option<usize>,
    #[arg(long)]
    pub dark_lesions: bool,
    #[command(flatten)]
    pub models: Models,
    #[command(flatten)]
    #[serde(skip)]
    pub out: Out,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricsCommand {
    /// Seam MSE of stage-3 stitching for each overlap in a sweep.
    Seam(SeamArgs),
    /// Seam MSE of an existing full-resolution image.
    SeamImage(SeamImageArgs),
    Iou(IouArgs),
    /// Fréchet distance between two feature files.
    Frechet(FrechetArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SeamArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub overlap_sweep: Vec<usize>,
    #[arg(long)]
    pub patch: Option<PathBuf>,
    /// Image providing the conditioning contexts; synthetic when absent.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub samples: u64,
    #[command(flatten)]
    #[serde(skip)]
    pub out: Out,
}

#[derive(Debug, Args, Serialize)]
pub struct SeamImageArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub overlap: Option<usize>,
    #[command(flatten)]
    #[serde(skip)]
    pub out: Out,
}

#[derive(Debug, Args, Serialize)]
pub struct IouArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[command(flatten)]
    #[serde(skip)]
    pub out: Out,
}

#[derive(Debug, Args, Serialize)]
pub struct FrechetArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[command(flatten)]
    #[serde(skip)]
    pub out: Out,
}

#[derive(Debug, Args, Serialize)]
pub struct NnArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub query: Vec<PathBuf>,
    /// Manifest file or directory of images.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub topk: usize,
    #[command(flatten)]
    #[serde(skip)]
    pub out: Out,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    /// Raw-looking mammograms at the full side, randomly mirrored/inverted.
    Mammogram,
    /// Stage-1-sized phantoms with a bright disc and its mask.
    Lesion,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub kind: SynthKind,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    #[command(flatten)]
    #[serde(skip)]
    pub out: Out,
}

/// Parses arguments and runs; returns the process exit code. Errors are
/// printed to stderr as one `error: category=<c> message=<m>` line.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let text = text.strip_prefix("error: ").unwrap_or(&text);
            eprintln!("error: category=config message={}", config::one_line(text));
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let c = e.category();
            eprintln!("error: category={} message={}", c.as_str(), config::one_line(&e.to_string()));
            c.exit_code()
        }
    }
}

pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut table: toml::Table = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            text.parse().map_err(|e: toml::de::Error| Error::Config(config::one_line(&e.to_string())))?
        }
        None => toml::Table::new(),
    };
    if let Some(p) = cli.profile {
        table.insert("profile".into(), toml::Value::try_from(p).expect("profile serializes"));
    }
    if let Some(seed) = cli.seed {
        let seed = i64::try_from(seed).map_err(|_| Error::Config(format!("seed {seed} exceeds {}", i64::MAX)))?;
        table.insert("seed".into(), toml::Value::Integer(seed));
    }
    RunConfig::parse(&toml::to_string(&table).expect("table serializes"))
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    if cli.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let ctx = Ctx { cfg, jobs: cli.jobs };
    let (name, out) = command_info(&cli.command);
    let mut run = RunDir::create(out)?;
    let record = match &cli.command {
        Command::Preprocess(a) => ctx.preprocess(a, &mut run)?,
        Command::Train(a) => ctx.train(a, &mut run)?,
        Command::Generate(a) => ctx.generate(a, &mut run)?,
        Command::Sr(a) => ctx.sr(a, &mut run)?,
        Command::Anomaly(a) => ctx.anomaly(a, &mut run)?,
        Command::Metrics(m) => ctx.metrics(m, &mut run)?,
        Command::NnCheck(a) => ctx.nn_check(a, &mut run)?,
        Command::Synth(a) => ctx.synth(a, &mut run)?,
    };
    println!("{record}");
    run.finish(name, &cli.command, &ctx.cfg)
}

fn command_info(c: &Command) -> (&'static str, &Path) {
    match c {
        Command::Preprocess(a) => ("preprocess", &a.out.out),
        Command::Train(a) => ("train", &a.out.out),
        Command::Generate(a) => ("generate", &a.out.out),
        Command::Sr(a) => ("sr", &a.out.out),
        Command::Anomaly(a) => ("anomaly", &a.out.out),
        Command::Metrics(MetricsCommand::Seam(a)) => ("metrics seam", &a.out.out),
        Command::Metrics(MetricsCommand::SeamImage(a)) => ("metrics seam-image", &a.out.out),
        Command::Metrics(MetricsCommand::Iou(a)) => ("metrics iou", &a.out.out),
        Command::Metrics(MetricsCommand::Frechet(a)) => ("metrics frechet", &a.out.out),
        Command::NnCheck(a) => ("nn-check", &a.out.out),
        Command::Synth(a) => ("synth", &a.out.out),
    }
}

/// Output directory that remembers what was written, for the manifest.
struct RunDir {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl RunDir {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), files: BTreeMap::new() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Records a file already written under the directory.
    fn track(&mut self, name: &str) -> Result<()> {
        let path = self.path(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.files.insert(name.to_string(), format!("{:x}", Sha256::digest(&bytes)));
        Ok(())
    }

    fn image(&mut self, name: &str, p: &Plane) -> Result<()> {
        write_image(self.path(name), p, BitDepth::Sixteen)?;
        self.track(name)
    }

    fn mask(&mut self, name: &str, m: &Mask) -> Result<()> {
        write_mask(self.path(name), m)?;
        self.track(name)
    }

    fn text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.track(name)
    }

    fn json_lines(&mut self, name: &str, rows: &[Value]) -> Result<()> {
        let text: String = rows.iter().map(|r| format!("{r}\n")).collect();
        self.text(name, &text)
    }

    fn finish(self, command: &str, args: &Command, cfg: &RunConfig) -> Result<()> {
        let sched = cfg.schedule.build()?;
        let manifest = json!({
            "tool": "mambo",
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "args": args,
            "config": cfg,
            "schedule": {
                "steps": sched.steps(),
                "alpha_bar_final": sched.alpha_bar(sched.steps()),
                "reference_alpha_bar_final": NoiseSchedule::reference().alpha_bar(1000),
            },
            "outputs": self.files,
        });
        let path = self.path("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Order-preserving map over `items` on at most `jobs` threads.
pub fn par_map<T, R, F>(jobs: usize, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| scope.spawn(|| c.iter().map(&f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

fn load_model(path: Option<&PathBuf>, fallback: Option<&PathBuf>, what: &str, arity: usize) -> Result<(UNet, NoiseSchedule)> {
    let path = path
        .or(fallback)
        .ok_or_else(|| Error::Config(format!("no {what} model: pass --{what} or set models.{what}")))?;
    let ck = Checkpoint::load(path)?;
    if ck.net.in_channels != arity {
        return Err(Error::Checkpoint(format!(
            "{}: {what} model needs {arity} input channels, checkpoint has {}",
            path.display(),
            ck.net.in_channels
        )));
    }
    Ok((ck.network()?, ck.schedule.build()?))
}

/// Oriented, squared image reduced to `side`.
fn square_at(o: &OrientedImage, multiple: usize, side: usize) -> Result<Plane> {
    let sq = pad_to_multiple(o, multiple)?;
    let n = sq.plane.height();
    if n < side {
        return Err(Error::DegenerateInput(format!("image side {n} is below the required {side}")));
    }
    downscale(&sq.plane, side)
}

/// Raw image to an `N x N` training plane and its breast mask.
fn training_pair(raw: &Plane, cfg: &RunConfig) -> Result<(Plane, Mask)> {
    let o = normalize_and_orient(raw)?;
    let plane = square_at(&o, cfg.geometry.s, cfg.geometry.n)?;
    let mask = breast_mask(&plane)?.mask;
    Ok((plane, mask))
}

struct Ctx {
    cfg: RunConfig,
    jobs: usize,
}

impl Ctx {
    fn preprocess(&self, a: &PreprocessArgs, run: &mut RunDir) -> Result<String> {
        let s = self.cfg.geometry.s;
        let results = par_map(self.jobs, &a.input, |path| preprocess(&read_image(path)?, s))?;
        let mut rows = Vec::new();
        for (path, (img, mask)) in a.input.iter().zip(results) {
            let name = stem(path);
            run.image(&format!("{name}.png"), &img.plane)?;
            run.mask(&format!("{name}_mask.pgm"), &mask.mask)?;
            rows.push(json!({
                "input": path,
                "side": img.plane.height(),
                "was_inverted": img.was_inverted,
                "was_flipped": img.was_flipped,
                "pad": img.pad,
                "mask_area_px": mask.area_px,
                "mask_bbox": mask.bbox,
            }));
        }
        run.json_lines("records.jsonl", &rows)?;
        Ok(json!({ "images": rows.len() }).to_string())
    }

    fn train(&self, a: &TrainArgs, run: &mut RunDir) -> Result<String> {
        let cfg = &self.cfg;
        let stage = Stage::from_index(a.stage)?;
        let images: Vec<(Plane, Mask)> = match (&a.data, a.synthetic) {
            (Some(manifest), _) => {
                let entries: Vec<_> = read_manifest(manifest)?
                    .into_iter()
                    .filter(|e| e.split == "train" && !(a.healthy_only && e.label == Label::Lesion))
                    .collect();
                if entries.is_empty() {
                    return Err(Error::DegenerateInput(format!("{}: no training entries", manifest.display())));
                }
                par_map(self.jobs, &entries, |e| training_pair(&read_image(&e.path)?, cfg))?
            }
            (None, Some(count)) => {
                let seeds: Vec<u64> = (0..count as u64).collect();
                par_map(self.jobs, &seeds, |&i| {
                    let p = striped_breast(cfg.geometry.n, stage_seed(cfg.seed, 100 + i));
                    let m = breast_mask(&p)?.mask;
                    Ok((p, m))
                })?
            }
            (None, None) => return Err(Error::Config("pass --data or --synthetic".into())),
        };
        let data = ImageSet::new(images, cfg.geometry, stage, stage_seed(cfg.seed, 10 + a.stage as u64))?;
        let mut tc = cfg.train_config(a.stage)?;
        if let Some(n) = a.iterations {
            tc.max_iterations = n;
        }
        tc.init_from.clone_from(&a.init_from);
        let mut trainer = match &a.resume {
            Some(path) => {
                let ck = Checkpoint::load(path)?;
                if ck.stage != a.stage {
                    return Err(Error::Checkpoint(format!("checkpoint is for stage {}, not {}", ck.stage, a.stage)));
                }
                Trainer::resume(&ck, tc.clone())?
            }
            None => Trainer::new(cfg.net_config(stage.arity()), tc.clone(), cfg.schedule.build()?)?,
        };
        trainer.run_until(&data, tc.max_iterations, Some(&run.dir))?;
        for entry in fs::read_dir(&run.dir).map_err(|e| Error::io(&run.dir, e))? {
            let name = entry.map_err(|e| Error::io(&run.dir, e))?.file_name().to_string_lossy().into_owned();
            if name.starts_with("ckpt-") {
                run.track(&name)?;
            }
        }
        trainer.checkpoint().save(run.path("final.mambo"))?;
        run.track("final.mambo")?;
        run.text("train.log", &format_log(&trainer.log))?;
        let last = trainer.log.last().map(|&(_, l)| l);
        Ok(json!({ "stage": a.stage, "iterations": trainer.iteration, "final_loss": last }).to_string())
    }

    fn generate(&self, a: &GenerateArgs, run: &mut RunDir) -> Result<String> {
        let m = &self.cfg.models;
        let (global, sched) = load_model(a.models.global.as_ref(), m.global.as_ref(), "global", 1)?;
        let (local, _) = load_model(a.models.local.as_ref(), m.local.as_ref(), "local", 3)?;
        let (patch, _) = load_model(a.models.patch.as_ref(), m.patch.as_ref(), "patch", 3)?;
        let models = StageModels {
            global: &global,
            local: &local,
            patch: &patch,
            geometry: self.cfg.geometry,
            schedule: &sched,
            plan: self.cfg.sampler,
        };
        let out = models.generate_mammogram(self.cfg.seed)?;
        run.image("global.png", &out.global)?;
        run.image("mid.png", &out.mid)?;
        run.image("full.png", &out.full)?;
        Ok(json!({ "seed": self.cfg.seed, "side": out.full.height() }).to_string())
    }

    fn sr(&self, a: &SrArgs, run: &mut RunDir) -> Result<String> {
        let m = &self.cfg.models;
        let (local, sched) = load_model(a.models.local.as_ref(), m.local.as_ref(), "local", 3)?;
        let (patch, _) = load_model(a.models.patch.as_ref(), m.patch.as_ref(), "patch", 3)?;
        let no_global = crate::denoiser::ConstantPredictor::new(0.0, 1);
        let models = StageModels {
            global: &no_global,
            local: &local,
            patch: &patch,
            geometry: self.cfg.geometry,
            schedule: &sched,
            plan: self.cfg.sampler,
        };
        let oriented = normalize_and_orient(&read_image(&a.input)?)?;
        let low = prepare_low_res(&oriented.plane, self.cfg.geometry.s)?;
        let out = models.super_resolve(&low, self.cfg.seed)?;
        run.image("low_res.png", &out.global)?;
        run.image("mid.png", &out.mid)?;
        run.image("full.png", &out.full)?;
        Ok(json!({ "seed": self.cfg.seed, "factor": self.cfg.geometry.n / self.cfg.geometry.s }).to_string())
    }

    fn anomaly(&self, a: &AnomalyArgs, run: &mut RunDir) -> Result<String> {
        let cfg = &self.cfg;
        let s = cfg.geometry.s;
        let (net, sched) = load_model(a.models.global.as_ref(), cfg.models.global.as_ref(), "global", 1)?;
        let oriented = normalize_and_orient(&read_image(&a.input)?)?;
        let image = square_at(&oriented, 1, s)?;
        let mask = breast_mask(&image)?;
        let truth = match &a.gt {
            Some(path) => {
                let gt = read_mask(path)?;
                if gt.shape() != oriented.plane.shape() {
                    return Err(Error::ShapeMismatch { expected: oriented.plane.shape(), found: gt.shape() });
                }
                let gt = if oriented.was_flipped { gt.flip_horizontal() } else { gt };
                let as_image = OrientedImage { plane: gt.to_plane(), ..oriented.clone() };
                Some(Mask::above(&square_at(&as_image, 1, s)?, 0.5))
            }
            None => None,
        };
        let reference_lambda = a.lambda.unwrap_or(cfg.anomaly.lambda);
        let lambda = native_lambda(reference_lambda, &sched)?;
        let mut acfg = AnomalyConfig::new(lambda, s);
        acfg.threshold_frac = cfg.anomaly.threshold_frac;
        acfg.binarize_eps = cfg.anomaly.binarize_eps;
        acfg.dark_lesions = a.dark_lesions || cfg.anomaly.dark_lesions;
        if let Some(sigma) = cfg.anomaly.blur_sigma {
            acfg.blur_sigma = sigma;
        }
        let denoised = renoise_denoise(&image, &net, &sched, &acfg, cfg.seed)?;
        let result = build_anomaly_map(&image, &denoised, &mask, &acfg, truth.as_ref())?;
        let peak = result.map.max();
        run.image("input.png", &image)?;
        run.image("denoised.png", &denoised)?;
        run.image("map.png", &if peak > 0.0 { result.map.map(|v| v / peak) } else { result.map.clone() })?;
        run.mask("mask.png", &result.mask)?;
        let record = json!({
            "iou": result.iou,
            "lesion_area_px": result.lesion_area_px,
            "bucket": result.bucket_id,
            "lambda_reference": reference_lambda,
            "lambda_native": lambda,
            "map_peak": peak,
        });
        run.text("record.json", &format!("{record}\n"))?;
        Ok(record.to_string())
    }

    fn metrics(&self, m: &MetricsCommand, run: &mut RunDir) -> Result<String> {
        match m {
            MetricsCommand::Seam(a) => self.seam_sweep(a, run),
            MetricsCommand::SeamImage(a) => {
                let mut g = self.cfg.geometry;
                g.overlap = a.overlap.unwrap_or(g.overlap);
                let plane = read_image(&a.input)?;
                let report = seam_mse(&plane, &plan_patch_grid(g.n, g.s, g.overlap)?)?;
                let row = json!({ "overlap": g.overlap, "seam_mse": report.mse, "no_seams": report.no_seams, "seams": report.seams });
                run.json_lines("seam.jsonl", std::slice::from_ref(&row))?;
                Ok(row.to_string())
            }
            MetricsCommand::Iou(a) => {
                let value = iou(&read_mask(&a.pred)?, &read_mask(&a.gt)?)?;
                let row = json!({ "metric": "iou", "value": value });
                run.json_lines("iou.jsonl", std::slice::from_ref(&row))?;
                Ok(row.to_string())
            }
            MetricsCommand::Frechet(a) => {
                let value = Frechet.compute(&FeatureSet::load(&a.a)?, &FeatureSet::load(&a.b)?)?;
                let row = json!({ "metric": Frechet.name(), "value": value });
                run.json_lines("frechet.jsonl", std::slice::from_ref(&row))?;
                Ok(row.to_string())
            }
        }
    }

    fn seam_sweep(&self, a: &SeamArgs, run: &mut RunDir) -> Result<String> {
        let cfg = &self.cfg;
        let (patch, sched) = load_model(a.patch.as_ref(), cfg.models.patch.as_ref(), "patch", 3)?;
        let full = match &a.reference {
            Some(path) => training_pair(&read_image(path)?, cfg)?.0,
            None => striped_breast(cfg.geometry.n, stage_seed(cfg.seed, 7)),
        };
        let (global, mid) = reference_contexts(&full, &cfg.geometry)?;
        let rows = par_map(self.jobs, &a.overlap_sweep, |&overlap| {
            let g = crate::dataset::GeometryConfig { overlap, ..cfg.geometry };
            let grid = plan_patch_grid(g.n, g.s, g.overlap)?;
            let mut total = 0.0;
            for j in 0..a.samples {
                let plane = stitch_full(&patch, &g, &sched, cfg.sampler, &mid, &global, stage_seed(cfg.seed, 1000 + j), &mut |_| {})?;
                total += seam_mse(&plane, &grid)?.mse;
            }
            Ok(json!({ "overlap": overlap, "seam_mse": total / a.samples.max(1) as f64, "samples": a.samples }))
        })?;
        let values: Vec<f64> = rows.iter().map(|r| r["seam_mse"].as_f64().unwrap_or(f64::NAN)).collect();
        let non_increasing = values.windows(2).all(|w| w[1] <= w[0]);
        run.json_lines("seam.jsonl", &rows)?;
        Ok(json!({ "overlaps": a.overlap_sweep, "seam_mse": values, "non_increasing": non_increasing }).to_string())
    }

    fn nn_check(&self, a: &NnArgs, run: &mut RunDir) -> Result<String> {
        let paths: Vec<PathBuf> = if a.corpus.is_dir() {
            let mut v: Vec<PathBuf> = fs::read_dir(&a.corpus)
                .map_err(|e| Error::io(&a.corpus, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("png" | "pgm")))
                .collect();
            v.sort();
            v
        } else {
            read_manifest(&a.corpus)?.into_iter().map(|e| e.path).collect()
        };
        let corpus = par_map(self.jobs, &paths, |p| read_image(p))?;
        let rows = par_map(self.jobs, &a.query, |q| {
            let nn = nearest_neighbors(&read_image(q)?, &corpus, a.topk)?;
            let list: Vec<Value> = nn
                .iter()
                .map(|n| json!({ "index": n.index, "path": paths[n.index], "similarity": n.similarity }))
                .collect();
            Ok(json!({ "query": q, "neighbors": list }))
        })?;
        run.json_lines("nn.jsonl", &rows)?;
        Ok(json!({ "queries": rows.len(), "corpus": corpus.len() }).to_string())
    }

    fn synth(&self, a: &SynthArgs, run: &mut RunDir) -> Result<String> {
        let cfg = &self.cfg;
        let idx: Vec<u64> = (0..a.count as u64).collect();
        let mut manifest = String::new();
        match a.kind {
            SynthKind::Mammogram => {
                let n = cfg.geometry.n;
                let images = par_map(self.jobs, &idx, |&i| {
                    let seed = stage_seed(cfg.seed, 200 + i);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let width = n * rng.random_range(70..=100) / 100;
                    let (flip, invert) = (rng.random_bool(0.5), rng.random_bool(0.3));
                    let raw = raw_mammogram(n, width, seed, flip, invert);
                    let (lo, hi) = raw.min_max().expect("non-empty image");
                    Ok(raw.map(|v| (v - lo) / (hi - lo)))
                })?;
                for (i, img) in images.iter().enumerate() {
                    let name = format!("mammogram_{i:04}.png");
                    run.image(&name, img)?;
                    manifest.push_str(&format!("{name}\ttrain\thealthy\n"));
                }
            }
            SynthKind::Lesion => {
                let s = cfg.geometry.s;
                let sched = cfg.schedule.build()?;
                let field = GaussianField::smooth(blob_mean(s), 0.0005, s as f64 / 32.0, &sched, 1)?;
                let phantoms = par_map(self.jobs, &idx, |&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, 300 + i));
                    let area = (s * s) as f64 * rng.random_range(0.005..0.03);
                    lesion_phantom(&field, area, 0.3, &mut rng)
                })?;
                for (i, ph) in phantoms.iter().enumerate() {
                    let name = format!("lesion_{i:04}.png");
                    run.image(&name, &ph.image)?;
                    run.mask(&format!("lesion_{i:04}_gt.pgm"), &ph.lesion)?;
                    manifest.push_str(&format!("{name}\ttest\tlesion\n"));
                }
            }
        }
        run.text("manifest.tsv", &manifest)?;
        Ok(json!({ "kind": a.kind, "count": a.count }).to_string())
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_keeps_order_and_errors() {
        let items: Vec<u32> = (0..17).collect();
        for jobs in [1, 2, 5, 32] {
            let out = par_map(jobs, &items, |&x| Ok(x * 2)).unwrap();
            assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
        }
        let err = par_map(4, &items, |&x| if x == 9 { Err(Error::EmptyMask) } else { Ok(x) });
        assert!(matches!(err, Err(Error::EmptyMask)));
    }

    #[test]
    fn flags_override_profile() {
        let cli = Cli::try_parse_from(["mambo", "--profile", "paper", "--seed", "5", "synth", "--kind", "lesion", "--out", "x"]).unwrap();
        let cfg = resolve_config(&cli).unwrap();
        assert_eq!((cfg.profile, cfg.seed, cfg.geometry.s), (Profile::Paper, 5, 256));
        let cli = Cli::try_parse_from(["mambo", "--seed", "18446744073709551615", "synth", "--kind", "lesion", "--out", "x"]).unwrap();
        assert!(matches!(resolve_config(&cli), Err(Error::Config(_))));
    }

    #[test]
    fn exit_codes_by_category() {
        assert_eq!(main_with_args(["mambo", "train", "--stage", "9", "--synthetic", "1", "--out", "x"]), 2);
        assert_eq!(main_with_args(["mambo", "--version"]), 0);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let missing = dir.path().join("none.png");
        let args = ["mambo", "metrics", "iou", "--pred", missing.to_str().unwrap(), "--gt", missing.to_str().unwrap(), "--out", out.to_str().unwrap()];
        assert_eq!(main_with_args(args), 3);
    }

    #[test]
    fn synth_manifest_lists_outputs_with_checksums() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("s");
        assert_eq!(main_with_args(["mambo", "synth", "--kind", "lesion", "--count", "2", "--out", out.to_str().unwrap()]), 0);
        let m: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
        let outputs = m["outputs"].as_object().unwrap();
        assert_eq!(outputs.len(), 5);
        let bytes = fs::read(out.join("lesion_0001_gt.pgm")).unwrap();
        assert_eq!(outputs["lesion_0001_gt.pgm"], format!("{:x}", Sha256::digest(&bytes)));
        assert_eq!(m["command"], "synth");
    }
}
