//! Command-line front end. `run` returns the process exit code:
//! 0 on success, 1 for invalid input, 2 for runtime failures.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::collage::DEFAULT_ALPHA;
use crate::error::{Error, Result};
use crate::estimators::{init_weights, save_weights};
use crate::eval::{evaluate, Metrics};
use crate::geometry::coverage_counts;
use crate::numerics::Tensor;
use crate::pnm::{decode, encode, encode_gray, DisplayMap};
use crate::sampler::{generate_with, RunOptions, RunReport, SceneSpec};
use crate::scene::{BackendKind, SceneFile};
use crate::scheduler::{StepKind, DEFAULT_GUIDANCE, DEFAULT_STEPS};

#[derive(Debug, Parser)]
#[command(
    name = "noisecollage",
    version,
    about = "Layout-aware diffusion sampling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BackendArg {
    Analytic,
    Unet,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum KindArg {
    Ddim,
    Ancestral,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a scene file and report the first problem.
    Validate { scene: PathBuf },
    /// Sample an image for a scene.
    Generate {
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        backend: Option<BackendArg>,
        #[arg(long, value_enum)]
        kind: Option<KindArg>,
        #[arg(long, env = "NC_WORKERS")]
        workers: Option<usize>,
        /// UNet weight file (overrides the scene's).
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Write the merged noise of every step.
        #[arg(long)]
        dump_noise: bool,
    },
    /// Score an image (sample.json or PGM/PPM) against a scene's targets.
    Eval {
        image: PathBuf,
        scene: PathBuf,
        /// Write the metrics here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write every region mask and the coverage-count map as PGM files.
    DumpMasks {
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write freshly initialized UNet weights.
    InitWeights {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Defaults {
    pub alpha: f64,
    pub steps: usize,
    pub guidance: f64,
}

impl Default for Defaults {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            steps: DEFAULT_STEPS,
            guidance: DEFAULT_GUIDANCE,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ReportDocument<'a> {
    #[serde(flatten)]
    pub run: &'a RunReport,
    pub defaults: Defaults,
    pub display_map: DisplayMap,
    pub image: String,
    pub noise_files: Vec<String>,
    pub notes: Vec<&'static str>,
}

/// `metrics.json`: region scores when the scene has analytic object targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsDocument {
    pub metrics: Option<Metrics>,
    pub unavailable_reason: Option<String>,
}

fn base_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

fn load_scene(path: &Path) -> Result<(SceneFile, SceneSpec)> {
    let file = SceneFile::load(path)?;
    let spec = file.to_spec(base_dir(path))?;
    Ok((file, spec))
}

pub fn cmd_validate(scene: &Path) -> Result<SceneSpec> {
    load_scene(scene).map(|(_, s)| s)
}

pub struct GenerateFlags {
    pub alpha: Option<f64>,
    pub steps: Option<usize>,
    pub guidance: Option<f64>,
    pub seed: Option<u64>,
    pub backend: Option<BackendKind>,
    pub kind: Option<StepKind>,
    pub workers: Option<usize>,
    pub weights: Option<PathBuf>,
    pub dump_noise: bool,
}

/// Removes every file written so far unless `keep` is called.
struct Written {
    dir: PathBuf,
    created_dir: bool,
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
    keep: bool,
}

impl Written {
    fn new(dir: &Path) -> Result<Self> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            created_dir,
            files: Vec::new(),
            dirs: Vec::new(),
            keep: false,
        })
    }

    fn subdir(&mut self, name: &str) -> Result<PathBuf> {
        let p = self.dir.join(name);
        if !p.exists() {
            fs::create_dir_all(&p)?;
            self.dirs.push(p.clone());
        }
        Ok(p)
    }

    fn write(&mut self, path: PathBuf, bytes: &[u8]) -> Result<()> {
        self.files.push(path.clone());
        fs::write(&path, bytes)?;
        Ok(())
    }
}

impl Drop for Written {
    fn drop(&mut self) {
        if self.keep {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = fs::remove_dir(d);
        }
        if self.created_dir {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("documents always serialize");
    s.push('\n');
    s.into_bytes()
}

fn metrics_for(image: &Tensor, spec: &SceneSpec) -> MetricsDocument {
    match evaluate(image, spec) {
        Ok(m) => MetricsDocument {
            metrics: Some(m),
            unavailable_reason: None,
        },
        Err(e) => MetricsDocument {
            metrics: None,
            unavailable_reason: Some(e.to_string()),
        },
    }
}

pub fn cmd_generate(scene: &Path, out: &Path, flags: &GenerateFlags) -> Result<RunReport> {
    let mut file = SceneFile::load(scene)?;
    let s = &mut file.sampler;
    if let Some(v) = flags.alpha {
        s.alpha = v;
    }
    if let Some(v) = flags.steps {
        s.steps = v;
    }
    if let Some(v) = flags.guidance {
        s.guidance = v;
    }
    if let Some(v) = flags.seed {
        s.seed = v;
    }
    if let Some(v) = flags.backend {
        s.backend = v;
        if v == BackendKind::Analytic {
            s.weights = None;
        }
    }
    if let Some(v) = flags.kind {
        s.kind = v;
    }
    let mut base = base_dir(scene).to_path_buf();
    if let Some(w) = &flags.weights {
        s.weights = Some(std::path::absolute(w)?);
        base = PathBuf::from(".");
    }
    let workers = flags.workers.or(s.workers).unwrap_or(1);
    let spec = file.to_spec(&base)?;

    let (image, report) = generate_with(
        &spec,
        &RunOptions {
            workers,
            dump_noise: flags.dump_noise,
        },
    )?;

    let map = DisplayMap::for_scene(&spec);
    let image_name = if spec.channels == 1 {
        "sample.pgm"
    } else {
        "sample.ppm"
    };
    let pixels = if matches!(spec.channels, 1 | 3) {
        Some(encode(&image, &map)?)
    } else {
        None
    };

    let mut w = Written::new(out)?;
    let mut noise_files = Vec::new();
    if flags.dump_noise {
        let dir = w.subdir("noise")?;
        let steps = report.noise_dumps.len();
        for (k, eps) in report.noise_dumps.iter().enumerate() {
            let name = format!("noise/eps_t{:04}.json", steps - k);
            w.write(
                dir.join(format!("eps_t{:04}.json", steps - k)),
                &to_json(eps),
            )?;
            noise_files.push(name);
        }
    }
    let mut notes = vec!["layout accuracy skips pixels covered by more than one region"];
    match pixels {
        Some(bytes) => w.write(out.join(image_name), &bytes)?,
        None => notes.push("no PGM/PPM written: images need 1 or 3 channels"),
    }
    w.write(out.join("sample.json"), &to_json(&image))?;
    w.write(
        out.join("metrics.json"),
        &to_json(&metrics_for(&image, &spec)),
    )?;
    let doc = ReportDocument {
        run: &report,
        defaults: Defaults::default(),
        display_map: map,
        image: image_name.into(),
        noise_files,
        notes,
    };
    w.write(out.join("report.json"), &to_json(&doc))?;
    w.keep = true;
    Ok(report)
}

/// Reads `sample.json` tensors directly; PGM/PPM pixels are mapped back with
/// the scene's display map.
pub fn load_image(path: &Path, spec: &SceneSpec) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let image = if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        decode(&bytes)?.to_tensor(&DisplayMap::for_scene(spec))
    } else {
        let t: Tensor = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            offset: 0,
            message: format!("{}: {e}", path.display()),
        })?;
        Tensor::new(t.shape().to_vec(), t.into_values())?
    };
    if image.shape() != spec.shape() {
        return Err(Error::shape(format!(
            "image is {:?} but the scene canvas is {:?}",
            image.shape(),
            spec.shape()
        )));
    }
    Ok(image)
}

pub fn cmd_eval(image: &Path, scene: &Path) -> Result<Metrics> {
    let (_, spec) = load_scene(scene)?;
    let img = load_image(image, &spec)?;
    evaluate(&img, &spec)
}

/// Returns the written file names.
pub fn cmd_dump_masks(scene: &Path, out: &Path) -> Result<Vec<String>> {
    let (_, spec) = load_scene(scene)?;
    let prepared = spec.prepare()?;
    let mut w = Written::new(out)?;
    let mut names = Vec::new();
    for (n, pyr) in prepared.pyramids.iter().enumerate() {
        for (&(h, wd), mask) in pyr.levels() {
            let bytes: Vec<u8> = mask
                .bits()
                .iter()
                .map(|&b| if b { 255 } else { 0 })
                .collect();
            let name = format!("object{n}_{h}x{wd}.pgm");
            w.write(out.join(&name), &encode_gray(h, wd, &bytes)?)?;
            names.push(name);
        }
    }
    let counts = coverage_counts(&prepared.masks, spec.canvas())?;
    let bytes: Vec<u8> = counts.iter().map(|&c| c.min(255) as u8).collect();
    w.write(
        out.join("coverage.pgm"),
        &encode_gray(spec.height, spec.width, &bytes)?,
    )?;
    names.push("coverage.pgm".into());
    w.keep = true;
    Ok(names)
}

fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        1
    } else {
        2
    }
}

fn report(e: &Error) -> i32 {
    eprintln!("error: {e}");
    exit_code(e)
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let outcome = match cli.command {
        Command::Validate { scene } => cmd_validate(&scene).map(|_| println!("OK")),
        Command::Generate {
            scene,
            out,
            alpha,
            steps,
            guidance,
            seed,
            backend,
            kind,
            workers,
            weights,
            dump_noise,
        } => {
            let flags = GenerateFlags {
                alpha,
                steps,
                guidance,
                seed,
                backend: backend.map(|b| match b {
                    BackendArg::Analytic => BackendKind::Analytic,
                    BackendArg::Unet => BackendKind::Unet,
                }),
                kind: kind.map(|k| match k {
                    KindArg::Ddim => StepKind::Ddim,
                    KindArg::Ancestral => StepKind::Ancestral,
                }),
                workers,
                weights,
                dump_noise,
            };
            cmd_generate(&scene, &out, &flags).map(|r| {
                println!(
                    "wrote {} ({} estimator calls)",
                    out.display(),
                    r.estimator_call_count
                )
            })
        }
        Command::Eval { image, scene, out } => cmd_eval(&image, &scene).and_then(|m| {
            let text = to_json(&m);
            match out {
                Some(p) => fs::write(p, text).map_err(Error::from),
                None => {
                    print!("{}", String::from_utf8_lossy(&text));
                    Ok(())
                }
            }
        }),
        Command::DumpMasks { scene, out } => cmd_dump_masks(&scene, &out).map(|names| {
            for n in names {
                println!("{}", out.join(n).display());
            }
        }),
        Command::InitWeights { seed, out } => {
            fs::write(&out, save_weights(&init_weights(seed))).map_err(Error::from)
        }
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => report(&e),
    }
}
