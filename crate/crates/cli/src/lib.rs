//! Command-line entry points for every pipeline stage, headless carve
//! replay, the synthetic phantom and the service launcher.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error (unreadable or
//! invalid inputs, failed stage), 3 internal error.

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::{json, Value};

use spinesim::config::PipelineConfig;
use spinesim::deform::{load_field, register_deformable, save_field, warp_labels, warp_volume, write_trace_csv};
use spinesim::eval::{dice, tre, LandmarkSet, Metrics, Report, TimingReport, TreReport};
use spinesim::mesh::{build_scene, write_glb, Palette};
use spinesim::nifti_io::{load_label_map, load_volume, save_label_map, save_volume};
use spinesim::phantom::{Phantom, PhantomParams};
use spinesim::pipeline::{
    build_model, estimate_affine, fuse_segmentations, load_affine, run_pipeline, save_affine, CaseFiles,
};
use spinesim::sim::{load_script, replay};
use spinesim::similarity::SimilarityTransform;
use spinesim::{Interpolation, StructureId};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "spinesim", version, about = "Spine CT/MRI fusion pipeline and decompression rehearsal")]
pub struct Cli {
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// key = value configuration file; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override a configuration key (repeatable), e.g. --set reg.lambda=0.05
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn", env = "SPINESIM_LOG")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Union of two vertebral label maps, largest component per label.
    Fuse {
        #[arg(long)]
        primary: PathBuf,
        #[arg(long)]
        secondary: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Centroid similarity fit followed by deformable MIND registration.
    Register(RegisterArgs),
    /// Surface meshes of a label map as binary glTF.
    Mesh {
        #[arg(long)]
        labels: PathBuf,
        /// Registered MRI segmentation whose soft tissue is merged into `labels` first.
        #[arg(long)]
        soft: Option<PathBuf>,
        /// Where to write the merged label map (requires --soft).
        #[arg(long, requires = "soft")]
        out_labels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dice between two label maps or landmark error through a registration.
    Evaluate(EvaluateArgs),
    /// Every stage on a case directory; writes all artifacts and report.json.
    Pipeline {
        #[arg(long)]
        case_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        reg: RegFlags,
    },
    /// Replays a carve script against a model without any client.
    CarveReplay {
        /// Model label map (model_seg.nii.gz).
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        script: PathBuf,
        /// Summary JSON destination.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        warn_mm: Option<f64>,
        #[arg(long)]
        danger_mm: Option<f64>,
    },
    /// Writes a synthetic case with known deformation and landmarks.
    Phantom {
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Peak displacement in voxels.
        #[arg(long, default_value_t = 5.0)]
        deform_amp: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Runs the HTTP/websocket service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, env = "DATA_ROOT", default_value = "data")]
        data_root: PathBuf,
        /// Concurrent pipeline jobs.
        #[arg(long)]
        workers: Option<usize>,
    },
}

#[derive(Args, Debug, Default)]
pub struct RegFlags {
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Args, Debug)]
pub struct RegisterArgs {
    /// Fixed (CT) intensity volume.
    #[arg(long)]
    fixed: PathBuf,
    /// Moving (MRI) intensity volume.
    #[arg(long)]
    moving: PathBuf,
    /// Fixed vertebral segmentation (normally the fused one).
    #[arg(long)]
    fixed_seg: PathBuf,
    #[arg(long)]
    moving_seg: PathBuf,
    #[arg(long)]
    out_field: PathBuf,
    #[arg(long)]
    out_warped: PathBuf,
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Defaults to affine.json beside the field.
    #[arg(long)]
    out_affine: Option<PathBuf>,
    /// Moving segmentation resampled into fixed space.
    #[arg(long)]
    out_warped_seg: Option<PathBuf>,
    #[command(flatten)]
    reg: RegFlags,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("mode").required(true).args(["dsc", "tre"])))]
pub struct EvaluateArgs {
    /// Two label maps to compare.
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    dsc: Option<Vec<PathBuf>>,
    /// Label value for --dsc.
    #[arg(long, requires = "dsc")]
    label: Option<u16>,
    /// Fixed and moving landmark JSON files.
    #[arg(long, num_args = 2, value_names = ["FIXED", "MOVING"])]
    tre: Option<Vec<PathBuf>>,
    #[arg(long, requires = "tre")]
    affine: Option<PathBuf>,
    #[arg(long, requires = "tre")]
    field: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(spinesim::Error),
    Internal(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(spinesim::Error::Cancelled) => EXIT_INTERNAL,
            CliError::Data(_) => EXIT_DATA,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Data(e) => write!(f, "{e}"),
            CliError::Internal(e) => write!(f, "internal error: {e:#}"),
        }
    }
}

impl From<spinesim::Error> for CliError {
    fn from(e: spinesim::Error) -> Self {
        CliError::Data(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// What a subcommand prints: `json` on stdout with `--json`, otherwise
/// `text` on stdout.
pub struct Output {
    pub json: Value,
    pub text: String,
}

fn init_logging(level: &str) {
    let mut b = env_logger::Builder::new();
    b.parse_filters(level).target(env_logger::Target::Stderr);
    if std::env::var_os("NO_COLOR").is_some_and(|v| !v.is_empty()) {
        b.write_style(env_logger::WriteStyle::Never);
    }
    let _ = b.try_init();
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging(&cli.log);
    let json = cli.json;
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(out)) => {
            if json {
                println!("{}", serde_json::to_string_pretty(&out.json).expect("serializable"));
            } else if !out.text.is_empty() {
                println!("{}", out.text);
            }
            EXIT_OK
        }
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
        Err(_) => EXIT_INTERNAL,
    }
}

/// Configuration file, then `--set`, then per-command flags.
fn load_config(cli: &Cli) -> CliResult<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k, v).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(cfg)
}

fn apply_reg_flags(cfg: &mut PipelineConfig, f: &RegFlags) -> CliResult<()> {
    if let Some(n) = f.iterations {
        cfg.registration.iterations = n;
    }
    if let Some(l) = f.lambda {
        cfg.registration.lambda = l;
    }
    if let Some(s) = f.stride {
        cfg.registration.stride = s;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))
}

pub fn run(cli: Cli) -> CliResult<Output> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Fuse { primary, secondary, out } => fuse(&cfg, &primary, secondary.as_deref(), &out),
        Command::Register(args) => {
            apply_reg_flags(&mut cfg, &args.reg)?;
            register(&cfg, &args)
        }
        Command::Mesh {
            labels,
            soft,
            out_labels,
            out,
        } => mesh(&cfg, &labels, soft.as_deref(), out_labels.as_deref(), &out),
        Command::Evaluate(args) => evaluate(&args),
        Command::Pipeline { case_dir, out_dir, reg } => {
            apply_reg_flags(&mut cfg, &reg)?;
            pipeline(&cfg, &case_dir, &out_dir)
        }
        Command::CarveReplay {
            model,
            script,
            out,
            warn_mm,
            danger_mm,
        } => {
            if let Some(w) = warn_mm {
                cfg.session.warn_mm = w;
            }
            if let Some(d) = danger_mm {
                cfg.session.danger_mm = d;
            }
            carve_replay(&cfg, &model, &script, out.as_deref())
        }
        Command::Phantom { size, deform_amp, out_dir } => phantom(size, deform_amp, &out_dir),
        Command::Serve {
            port,
            host,
            data_root,
            workers,
        } => serve(cfg, &host, port, data_root, workers),
    }
}

fn fuse(cfg: &PipelineConfig, primary: &Path, secondary: Option<&Path>, out: &Path) -> CliResult<Output> {
    let p = load_label_map(primary)?;
    let s = secondary.map(load_label_map).transpose()?;
    let fused = fuse_segmentations(&p, s.as_ref(), &cfg.fusion)?;
    save_label_map(&fused, out)?;
    let counts: serde_json::Map<String, Value> = fused
        .present_labels()
        .into_iter()
        .map(|l| (fused.label_table()[&l].clone(), json!(fused.count(l))))
        .collect();
    let text = counts.iter().map(|(k, v)| format!("{k}\t{v}")).collect::<Vec<_>>().join("\n");
    Ok(Output {
        json: json!({"out": out, "voxels": counts}),
        text,
    })
}

fn register(cfg: &PipelineConfig, a: &RegisterArgs) -> CliResult<Output> {
    let fixed = load_volume(&a.fixed)?;
    let moving = load_volume(&a.moving)?;
    let fixed_seg = load_label_map(&a.fixed_seg)?;
    let moving_seg = load_label_map(&a.moving_seg)?;
    fixed.geometry().ensure_matches(fixed_seg.geometry(), "fixed_seg vs fixed")?;
    moving.geometry().ensure_matches(moving_seg.geometry(), "moving_seg vs moving")?;
    let g = fixed.geometry().clone();

    let (affine, pairs) = estimate_affine(&fixed_seg, &moving_seg)?;
    let affine_path = a
        .out_affine
        .clone()
        .unwrap_or_else(|| a.out_field.with_file_name(spinesim::pipeline::AFFINE));
    save_affine(&affine, &affine_path)?;
    info!("affine from {} level pairs", pairs.pairs.len());

    let reg = register_deformable(&fixed, &moving, &affine, &cfg.registration)?;
    save_field(&reg.field, &g, &cfg.registration, &a.out_field)?;
    if let Some(t) = &a.trace {
        write_trace_csv(&reg.trace, t)?;
    }
    save_volume(&warp_volume(&moving, &g, &affine, &reg.field, Interpolation::Trilinear)?, &a.out_warped)?;
    if let Some(p) = &a.out_warped_seg {
        save_label_map(&warp_labels(&moving_seg, &g, &affine, &reg.field)?, p)?;
    }
    let first = reg.trace.first().map(|r| r.loss);
    let last = reg.trace.last().map(|r| r.loss);
    Ok(Output {
        json: json!({
            "affine": affine,
            "level_pairs": pairs.pairs.len(),
            "iterations": reg.trace.len(),
            "loss_initial": first,
            "loss_final": last,
            "field_max_abs_voxels": reg.field.max_abs(),
        }),
        text: format!(
            "scale {:.4}, {} iterations, loss {:.5} -> {:.5}",
            affine.scale(),
            reg.trace.len(),
            first.unwrap_or(f64::NAN),
            last.unwrap_or(f64::NAN)
        ),
    })
}

fn mesh(
    cfg: &PipelineConfig,
    labels: &Path,
    soft: Option<&Path>,
    out_labels: Option<&Path>,
    out: &Path,
) -> CliResult<Output> {
    let mut lm = load_label_map(labels)?;
    if let Some(s) = soft {
        lm = build_model(&lm, &load_label_map(s)?, &cfg.precedence)?;
        if let Some(p) = out_labels {
            save_label_map(&lm, p)?;
        }
    }
    let palette = Palette::default();
    let scene = build_scene(&lm, &palette, cfg.smoothing)?;
    let bytes = write_glb(&scene)?;
    std::fs::write(out, &bytes).map_err(|e| spinesim::Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let structures: Vec<Value> = scene
        .meshes
        .iter()
        .map(|m| {
            json!({
                "structure": m.structure.to_string(),
                "vertices": m.vertices.len(),
                "triangles": m.triangles.len(),
                "watertight": m.is_watertight(),
            })
        })
        .collect();
    let text = scene
        .meshes
        .iter()
        .map(|m| format!("{}\t{} triangles", m.structure, m.triangles.len()))
        .collect::<Vec<_>>()
        .join("\n");
    Ok(Output {
        json: json!({"out": out, "bytes": bytes.len(), "structures": structures}),
        text,
    })
}

fn evaluate(a: &EvaluateArgs) -> CliResult<Output> {
    let mut metrics = Metrics::default();
    let text;
    if let Some(files) = &a.dsc {
        let label = a.label.ok_or_else(|| CliError::Usage("--dsc needs --label".into()))?;
        let x = load_label_map(&files[0])?;
        let y = load_label_map(&files[1])?;
        let d = dice(&x, &y, label)?;
        let structure = StructureId::from_label(label).map(|s| s.to_string()).unwrap_or_else(|_| label.to_string());
        metrics.dice.push(spinesim::eval::DiceEntry {
            structure,
            label,
            dice: d,
            both_empty: x.count(label) == 0 && y.count(label) == 0,
        });
        text = format!("{d:?}");
    } else {
        let files = a.tre.as_ref().expect("clap enforces one mode");
        let fixed = LandmarkSet::load(&files[0])?;
        let moving = LandmarkSet::load(&files[1])?;
        let affine = a.affine.as_ref().map(load_affine).transpose()?.unwrap_or_else(SimilarityTransform::identity);
        let p = match &a.field {
            Some(f) => {
                let (g, field) = load_field(f)?;
                tre("case", &fixed, &moving, &affine, &field, &g)?
            }
            None => {
                // affine only: no field domain, so no geometry to clip against
                spinesim::eval::tre_with("case", &fixed, &moving, |p| Ok(affine.apply_inverse(p)))?
            }
        };
        text = format!("{:?}", p.mean_mm);
        metrics.tre = Some(TreReport::from_patients(vec![p]));
    }
    Ok(Output {
        json: serde_json::to_value(Report::new(metrics, TimingReport::default())).expect("serializable"),
        text,
    })
}

fn pipeline(cfg: &PipelineConfig, case_dir: &Path, out_dir: &Path) -> CliResult<Output> {
    let files = CaseFiles::from_dir(case_dir)?;
    let run = run_pipeline(&files, out_dir, cfg)?;
    let mut text = String::new();
    for e in &run.report.metrics.dice {
        text.push_str(&format!("dice {}\t{:.4}\n", e.structure, e.dice));
    }
    if let Some(t) = &run.report.metrics.tre {
        text.push_str(&format!("tre mean\t{:.3} mm\n", t.cohort_mean_mm));
    }
    if let Some(t) = run.report.timings.total() {
        text.push_str(&format!("total\t{t:.1} s"));
    }
    Ok(Output {
        json: serde_json::to_value(&run.report).expect("serializable"),
        text,
    })
}

fn carve_replay(cfg: &PipelineConfig, model: &Path, script: &Path, out: Option<&Path>) -> CliResult<Output> {
    let lm = load_label_map(model)?;
    let commands = load_script(script)?;
    let (_, summary) = replay(&lm, cfg.session.clone(), &commands)?;
    let v = serde_json::to_value(&summary).expect("serializable");
    if let Some(p) = out {
        std::fs::write(p, serde_json::to_string_pretty(&v).expect("serializable")).map_err(|e| {
            spinesim::Error::Io {
                path: p.to_path_buf(),
                source: e,
            }
        })?;
    }
    Ok(Output {
        text: format!(
            "{} commands, {} voxels removed, grid {}",
            summary.commands, summary.removed_total, summary.grid_checksum
        ),
        json: v,
    })
}

fn phantom(size: usize, deform_amp: f64, out_dir: &Path) -> CliResult<Output> {
    let params = PhantomParams {
        size,
        deform_amp,
        ..Default::default()
    };
    Phantom::generate(&params)?.write_case(out_dir)?;
    Ok(Output {
        json: json!({"out_dir": out_dir, "params": params}),
        text: format!("phantom {size}^3 written to {}", out_dir.display()),
    })
}

fn serve(cfg: PipelineConfig, host: &str, port: u16, data_root: PathBuf, workers: Option<usize>) -> CliResult<Output> {
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|_| CliError::Usage(format!("bad listen address {host}:{port}")))?;
    let mut config = spinesim_service::ServiceConfig::new(data_root);
    config.pipeline = cfg;
    if let Some(w) = workers {
        if w == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        config.workers = w;
    }
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Internal(e.into()))?;
    rt.block_on(spinesim_service::serve(config, addr))
        .map_err(|e| CliError::Internal(e.into()))?;
    Ok(Output {
        json: Value::Null,
        text: String::new(),
    })
}
