use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tilefuse::metrics::LabelNames;
use tilefuse::phantom::{Misalignment, PhantomSpec};
use tilefuse::pipeline::{self, AtlasInput, Evaluation, PipelineConfig};
use tilefuse::registration::AffineTransform;
use tilefuse::segmenter::{run_plugin, SegmenterSpec, TileRule};
use tilefuse::tiling::{LatticeSpec, Preset};
use tilefuse::{Error, Result};

/// Tiled whole-brain segmentation: registration, intensity harmonisation,
/// overlapping tiles, majority-vote fusion and evaluation.
#[derive(Parser)]
#[command(name = "tilefuse", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a model directory from labelled atlases.
    Fit(FitArgs),
    /// Segment one scan.
    Segment(SegmentArgs),
    /// Segment many scans, continuing past failures.
    Batch(BatchArgs),
    /// Write a synthetic phantom and its ground-truth labels.
    Phantom(PhantomArgs),
    /// Compare predicted label volumes with a reference.
    Evaluate(EvaluateArgs),
    /// Run a built-in tile rule as an external plugin.
    #[command(hide = true)]
    Plugin {
        rule: String,
        manifest: PathBuf,
    },
}

fn parse_triple<T: FromStr>(s: &str) -> std::result::Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated values, got {s:?}"));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(p.parse::<T>().map_err(|_| format!("invalid value {p:?}"))?);
    }
    out.try_into().map_err(|_| "expected three values".to_string())
}

#[derive(Clone, Copy, ValueEnum)]
enum LatticeArg {
    Slant8,
    Slant27,
    Custom,
}

#[derive(Clone, Copy, ValueEnum)]
enum SegmenterArg {
    Prior,
    Knn,
    External,
}

/// Flags shared by `segment` and `batch`; each overrides the config file.
#[derive(Args)]
struct RunArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    lattice: Option<LatticeArg>,
    /// Tile size X,Y,Z for a custom lattice.
    #[arg(long, value_parser = parse_triple::<usize>)]
    tile_size: Option<[usize; 3]>,
    /// Tile counts X,Y,Z for a custom lattice.
    #[arg(long, value_parser = parse_triple::<usize>)]
    tile_counts: Option<[usize; 3]>,
    #[arg(long, value_enum)]
    segmenter: Option<SegmenterArg>,
    /// External plugin command; the manifest path is appended.
    #[arg(long)]
    plugin_cmd: Option<String>,
    #[arg(long)]
    plugin_timeout: Option<f64>,
    /// Atlases selected per scan by the atlas-based segmenters.
    #[arg(long)]
    n_atlases: Option<usize>,
    /// Number of labels.
    #[arg(long)]
    labels: Option<usize>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Command run as `<cmd> <input> <output>` before registration.
    #[arg(long)]
    pre_hook: Option<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Keep stage artifacts under `intermediates/` (the default).
    #[arg(long, conflicts_with = "purge_intermediates")]
    keep_intermediates: bool,
    /// Delete stage artifacts after a successful run.
    #[arg(long)]
    purge_intermediates: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(d) = &self.model_dir {
            c.model_dir = Some(d.clone());
        }
        if let Some(d) = &self.output_dir {
            c.output_dir = Some(d.clone());
        }
        c.lattice = match (self.lattice, self.tile_counts, self.tile_size) {
            (Some(LatticeArg::Custom), Some(counts), Some(size)) | (None, Some(counts), Some(size)) => {
                LatticeSpec::Custom { counts, size }
            }
            (Some(LatticeArg::Custom), _, _) | (None, Some(_), None) | (None, None, Some(_)) => {
                return Err(Error::Config("a custom lattice needs both --tile-counts and --tile-size".into()))
            }
            (Some(_), Some(_), _) | (Some(_), _, Some(_)) => {
                return Err(Error::Config("--tile-counts/--tile-size only apply to --lattice custom".into()))
            }
            (Some(LatticeArg::Slant8), None, None) => LatticeSpec::Preset(Preset::Slant8),
            (Some(LatticeArg::Slant27), None, None) => LatticeSpec::Preset(Preset::Slant27),
            (None, None, None) => c.lattice,
        };

        let n_atlases = self
            .n_atlases
            .or(c.segmenter.n_atlases())
            .unwrap_or(tilefuse::atlas_select::DEFAULT_SELECTED);
        let (old_cmd, old_timeout) = match &c.segmenter {
            SegmenterSpec::External {
                command,
                timeout_seconds,
            } => (Some(command.clone()), *timeout_seconds),
            _ => (None, 600.0),
        };
        let external = |cmd: Option<String>| -> Result<SegmenterSpec> {
            Ok(SegmenterSpec::External {
                command: cmd.ok_or_else(|| Error::Config("the external segmenter needs --plugin-cmd".into()))?,
                timeout_seconds: self.plugin_timeout.unwrap_or(old_timeout),
            })
        };
        c.segmenter = match self.segmenter {
            Some(SegmenterArg::Prior) => SegmenterSpec::Prior { n_atlases },
            Some(SegmenterArg::Knn) => match c.segmenter {
                SegmenterSpec::Knn {
                    patch_edge,
                    search_edge,
                    ..
                } => SegmenterSpec::Knn {
                    patch_edge,
                    search_edge,
                    n_atlases,
                },
                _ => SegmenterSpec::Knn {
                    patch_edge: 3,
                    search_edge: 5,
                    n_atlases,
                },
            },
            Some(SegmenterArg::External) => external(self.plugin_cmd.clone().or(old_cmd))?,
            None if self.plugin_cmd.is_some() || self.plugin_timeout.is_some() => {
                external(self.plugin_cmd.clone().or(old_cmd))?
            }
            None => match c.segmenter {
                SegmenterSpec::Prior { .. } => SegmenterSpec::Prior { n_atlases },
                SegmenterSpec::Knn {
                    patch_edge,
                    search_edge,
                    ..
                } => SegmenterSpec::Knn {
                    patch_edge,
                    search_edge,
                    n_atlases,
                },
                ext => ext,
            },
        };
        if let Some(l) = self.labels {
            c.label_count = Some(l);
        }
        if let Some(j) = self.jobs {
            c.jobs = j;
        }
        if let Some(h) = &self.pre_hook {
            c.pre_hook = Some(h.clone());
        }
        if self.keep_intermediates {
            c.keep_intermediates = true;
        }
        if self.purge_intermediates {
            c.keep_intermediates = false;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct FitArgs {
    /// Atlas as INTENSITY,LABELS (repeatable).
    #[arg(long = "atlas")]
    atlases: Vec<String>,
    /// File with one atlas per line: `[id] intensity labels`.
    #[arg(long)]
    atlas_list: Option<PathBuf>,
    /// Canonical template (defaults to the first atlas intensity).
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long)]
    labels: Option<usize>,
    #[arg(long)]
    model_dir: PathBuf,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    run: RunArgs,
    /// Reference labels of the input; adds metrics to the report.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    label_names: Option<PathBuf>,
}

#[derive(Args)]
struct BatchArgs {
    #[arg(long, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// File with one scan path per line.
    #[arg(long)]
    scan_list: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, value_parser = parse_triple::<usize>, default_value = "96,96,96")]
    dims: [usize; 3],
    #[arg(long, value_parser = parse_triple::<f64>, default_value = "1,1,1")]
    spacing: [f64; 3],
    #[arg(long, default_value_t = 6)]
    labels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2.0)]
    noise: f64,
    #[arg(long, default_value_t = 0.0)]
    bias: f64,
    #[arg(long, default_value_t = 0.0)]
    texture: f64,
    /// Rotation about x,y,z in degrees.
    #[arg(long, value_parser = parse_triple::<f64>, allow_hyphen_values = true)]
    rotate: Option<[f64; 3]>,
    /// Translation in mm.
    #[arg(long, value_parser = parse_triple::<f64>, allow_hyphen_values = true)]
    translate: Option<[f64; 3]>,
    #[arg(long, value_parser = parse_triple::<f64>)]
    scale: Option<[f64; 3]>,
    #[arg(long)]
    output_dir: PathBuf,
    #[arg(long, default_value = "phantom")]
    name: String,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predicted label volumes.
    #[arg(long = "pred", required = true, num_args = 1..)]
    predictions: Vec<PathBuf>,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    label_names: Option<PathBuf>,
    /// Transform file mapping prediction world to truth world.
    #[arg(long)]
    transform: Option<PathBuf>,
    #[arg(long)]
    output_dir: PathBuf,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

fn fit(args: FitArgs) -> Result<ExitCode> {
    let mut atlases = Vec::new();
    for a in &args.atlases {
        let (i, l) = a
            .split_once(',')
            .ok_or_else(|| Error::Config(format!("--atlas expects INTENSITY,LABELS, got {a:?}")))?;
        atlases.push(AtlasInput::from_paths(i, l));
    }
    if let Some(list) = &args.atlas_list {
        for line in read_lines(list)? {
            let f: Vec<&str> = line.split_whitespace().collect();
            atlases.push(match f.as_slice() {
                [i, l] => AtlasInput::from_paths(i, l),
                [id, i, l] => AtlasInput {
                    id: id.to_string(),
                    intensity: i.into(),
                    labels: l.into(),
                },
                _ => return Err(Error::Config(format!("bad atlas list line {line:?}"))),
            });
        }
    }
    let config = PipelineConfig {
        template: args.template,
        model_dir: Some(args.model_dir),
        label_count: args.labels,
        ..Default::default()
    };
    let m = pipeline::cmd_fit(&atlases, &config)?;
    log::info!("model with {} atlases and {} labels written", m.atlases.len(), m.label_count);
    Ok(ExitCode::SUCCESS)
}

fn segment(args: SegmentArgs) -> Result<ExitCode> {
    let config = args.run.resolve()?;
    let names = match &args.label_names {
        Some(p) => LabelNames::load(p)?,
        None => LabelNames::default(),
    };
    let r = pipeline::cmd_segment(
        &args.input,
        &config,
        &Evaluation {
            truth: args.truth,
            names,
        },
    )?;
    log::info!(
        "segmented {} in {:.1} s ({} tiles)",
        args.input.display(),
        r.wall_seconds,
        r.tile_invocations
    );
    Ok(ExitCode::SUCCESS)
}

fn batch(args: BatchArgs) -> Result<ExitCode> {
    let config = args.run.resolve()?;
    let mut scans = args.inputs;
    if let Some(list) = &args.scan_list {
        scans.extend(read_lines(list)?.into_iter().map(PathBuf::from));
    }
    let rows = pipeline::cmd_batch(&scans, &config)?;
    let failed = rows.iter().filter(|r| !r.ok).count();
    log::info!("{} of {} scans segmented", rows.len() - failed, rows.len());
    Ok(if failed > 0 { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn phantom(a: PhantomArgs) -> Result<ExitCode> {
    let d = Misalignment::default();
    let spec = PhantomSpec {
        dims: a.dims,
        spacing: a.spacing,
        label_count: a.labels,
        seed: a.seed,
        noise_std: a.noise,
        bias_amplitude: a.bias,
        texture_amplitude: a.texture,
        misalignment: Misalignment {
            rotation_deg: a.rotate.unwrap_or(d.rotation_deg),
            translation_mm: a.translate.unwrap_or(d.translation_mm),
            scale: a.scale.unwrap_or(d.scale),
        },
    };
    let files = pipeline::cmd_phantom(&spec, &a.output_dir, &a.name).map_err(|e| match e {
        e @ (Error::InvalidArgument(_) | Error::InvalidVolume(_)) => Error::Config(e.to_string()),
        e => e,
    })?;
    log::info!("wrote {} and {}", files.intensity.display(), files.labels.display());
    Ok(ExitCode::SUCCESS)
}

fn evaluate(a: EvaluateArgs) -> Result<ExitCode> {
    let names = match &a.label_names {
        Some(p) => LabelNames::load(p)?,
        None => LabelNames::default(),
    };
    let transform = a.transform.as_deref().map(AffineTransform::load).transpose()?;
    let reports = pipeline::cmd_evaluate(&a.predictions, &a.truth, &names, transform.as_ref(), &a.output_dir)?;
    for (p, r) in a.predictions.iter().zip(&reports) {
        if let Some(s) = r.summary().dsc {
            log::info!("{}: mean DSC {:.4} over {} labels", p.display(), s.mean, s.n);
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Plugin side: malformed manifests exit 2, everything else 3.
fn plugin(rule: &str, manifest: &Path) -> ExitCode {
    let outcome = rule.parse::<TileRule>().and_then(|r| run_plugin(r, manifest));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tilefuse plugin: {e}");
            match e {
                Error::Json(_) | Error::Config(_) | Error::GeometryMismatch(_) | Error::InvalidArgument(_) => {
                    ExitCode::from(2)
                }
                _ => ExitCode::from(3),
            }
        }
    }
}

fn report_error(e: &Error) {
    let mut msg = format!("error: {e}");
    let mut src = std::error::Error::source(e);
    while let Some(s) = src {
        msg.push_str(&format!("\n  caused by: {s}"));
        src = s.source();
    }
    eprintln!("{msg}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TILEFUSE_LOG", "info")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Cmd::Fit(a) => fit(a),
        Cmd::Segment(a) => segment(a),
        Cmd::Batch(a) => batch(a),
        Cmd::Phantom(a) => phantom(a),
        Cmd::Evaluate(a) => evaluate(a),
        Cmd::Plugin { rule, manifest } => return plugin(&rule, &manifest),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            report_error(&e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
