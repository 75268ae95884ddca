//! `posekit` — synth → harmonize → encode → decode → eval pipeline driver.

mod config;
mod errors;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::{json, Value};

use posekit::attention::attention_self_check;
use posekit::augmotion::{
    canonical_reference_targets, compute_scale_ratios, harmonize_sequence, kabsch_self_check,
    select_key_frame,
};
use posekit::heatpose::{
    decode, encode, read_volumes, write_volumes, HeatVolume, VolumeSpec, DEFAULT_C_OVER_SIGMA,
    DEFAULT_SIGMA_VOXELS, PAD_SIGMAS,
};
use posekit::ingest::{
    read_canonical, sliding_windows, write_document, write_document_binary, CanonicalDocument,
    SynthSpec, SCHEMA_VERSION,
};
use posekit::selfcheck::SelfCheckReport;
use posekit::skeleton::PoseSequence;

use config::{resolve, FileConfig, Overrides, Resolved};
use errors::{CliError, EXIT_SELFTEST};

const EXIT_HELP: &str = "\
EXIT CODES:
    0  success
    2  usage error (unknown flag, missing argument)
    3  i/o failure
    4  configuration violation
    5  invalid input data
    6  numerical failure (degenerate geometry, empty input)
    7  self-test failure

Failures also emit one JSON object on stderr:
    {\"error\":{\"code\":...,\"kind\":\"...\",\"message\":\"...\"}}

ENVIRONMENT:
    AUGMOTION_LOG  log level filter (error, warn, info, debug, trace)";

#[derive(Parser)]
#[command(
    name = "posekit",
    version,
    about = "Pose harmonization, kinematic heat volumes, and evaluation metrics",
    after_help = EXIT_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config file; flags take precedence over its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice (default 0)
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic walker sequence
    Synth(SynthArgs),
    /// Project sequences into the universal coordinate system
    Harmonize(HarmonizeArgs),
    /// Print the key-frame selection for a sequence as JSON
    Keyframe(InputArgs),
    /// Enumerate sliding clip windows
    Windows(WindowsArgs),
    /// Rasterize pose frames into heat volumes
    Encode(EncodeArgs),
    /// Recover pose coordinates from a channel-mode volume file
    Decode(DecodeArgs),
    /// Compare a predicted pose file against ground truth
    Eval(EvalArgs),
    /// Run the attention kernel's numerical invariant suite
    #[command(name = "attn-selftest")]
    AttnSelftest,
    /// Run the rigid-alignment construct-and-recover suite
    #[command(name = "kabsch-selftest")]
    KabschSelftest(SelftestArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of frames
    #[arg(long, default_value_t = 64)]
    frames: usize,
    /// Frames per second
    #[arg(long, default_value_t = 50.0)]
    fps: f64,
    /// Arc-length amplitude of the limb swings, millimeters
    #[arg(long, default_value_t = 60.0)]
    amplitude: f64,
    /// Maximum torso lean from vertical, degrees
    #[arg(long = "lean-deg", default_value_t = 25.0)]
    lean_deg: f64,
    /// Whole-body drift velocity "vx,vy,vz" in mm/s
    #[arg(long, default_value = "120,80,0")]
    drift: String,
    /// Standard deviation of coordinate noise, millimeters
    #[arg(long = "noise-sigma", default_value_t = 0.0)]
    noise_sigma: f64,
    /// Output pose file (.json, or .posebin for the binary variant)
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct InputArgs {
    /// Canonical pose file
    input: PathBuf,
}

#[derive(Args)]
struct HarmonizeArgs {
    /// Canonical pose file, or a directory of them
    input: PathBuf,
    /// Output file, or directory when the input is a directory
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct WindowsArgs {
    /// Canonical pose file
    input: PathBuf,
    /// Frames per window
    #[arg(long = "window-len")]
    window_len: Option<usize>,
    /// Stride between window starts
    #[arg(long)]
    step: Option<usize>,
}

#[derive(Args)]
struct EncodeArgs {
    /// Canonical pose file, or a directory of them
    input: PathBuf,
    /// Output volume file, or directory when the input is a directory
    #[arg(short, long)]
    output: PathBuf,
    /// Main Gaussian standard deviation in world units
    /// (default: 1.5 voxel edges of the fitted volume)
    #[arg(long = "sigma-main")]
    sigma_main: Option<f64>,
    /// Transitional-point spacing in world units (default: 2 * sigma_main)
    #[arg(long)]
    c: Option<f64>,
    /// Volume resolution, e.g. 64x64x64
    #[arg(long)]
    dims: Option<String>,
    /// "channel" (one grid per keypoint, decodable) or "fused"
    #[arg(long)]
    mode: Option<String>,
    /// Also write the peak z-slice of each channel as CSV for plotting
    #[arg(long = "dump-csv")]
    dump_csv: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    /// Volume file, or a directory of them
    input: PathBuf,
    /// Output pose file, or directory when the input is a directory
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted pose file
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth pose file
    #[arg(long)]
    gt: PathBuf,
}

#[derive(Args)]
struct SelftestArgs {
    /// Number of construct-and-recover trials
    #[arg(long, default_value_t = 1000)]
    trials: usize,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("AUGMOTION_LOG", "warn"))
        .format_timestamp(None)
        .init();

    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("{}", err.to_json());
        std::process::exit(err.code);
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file_config = FileConfig::load(cli.config.as_deref())?;
    let with_flags = |over: Overrides| -> Result<Resolved, CliError> {
        let over = Overrides {
            seed: cli.seed.or(over.seed),
            ..over
        };
        resolve(&over, &file_config)
    };

    match cli.command {
        Command::Synth(args) => cmd_synth(args, with_flags(Overrides::default())?),
        Command::Harmonize(args) => cmd_harmonize(args, with_flags(Overrides::default())?),
        Command::Keyframe(args) => cmd_keyframe(args, with_flags(Overrides::default())?),
        Command::Windows(args) => {
            let over = Overrides {
                window_len: args.window_len,
                step: args.step,
                ..Default::default()
            };
            cmd_windows(args, with_flags(over)?)
        }
        Command::Encode(args) => {
            let over = Overrides {
                sigma_main: args.sigma_main,
                c: args.c,
                dims: args.dims.clone(),
                mode: args.mode.clone(),
                ..Default::default()
            };
            cmd_encode(args, with_flags(over)?)
        }
        Command::Decode(args) => cmd_decode(args),
        Command::Eval(args) => cmd_eval(args),
        Command::AttnSelftest => {
            let cfg = with_flags(Overrides::default())?;
            print_selftest("attn-selftest", attention_self_check(cfg.seed))
        }
        Command::KabschSelftest(args) => {
            let cfg = with_flags(Overrides::default())?;
            print_selftest("kabsch-selftest", kabsch_self_check(cfg.seed, args.trials))
        }
    }
}

fn provenance(command: &str, cfg: &Resolved, extra: Value) -> Value {
    json!({
        "tool": "posekit",
        "tool_version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": serde_json::to_value(cfg).expect("config serializes"),
        "args": extra,
    })
}

/// Writes a pose document, choosing the binary variant for `.posebin`.
fn write_pose(doc: &CanonicalDocument, path: &Path) -> Result<(), CliError> {
    if path.extension().is_some_and(|e| e == "posebin") {
        write_document_binary(doc, path)?;
    } else {
        write_document(doc, path)?;
    }
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)
        .map_err(|e| CliError::io(format!("cannot write {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| CliError::io(format!("cannot move into {}: {e}", path.display())))
}

fn parse_drift(text: &str) -> Result<[f64; 3], CliError> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err(CliError::config(format!(
            "drift must look like vx,vy,vz, got {text:?}"
        )));
    }
    let mut v = [0.0; 3];
    for (slot, part) in v.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|_| CliError::config(format!("bad drift component {part:?}")))?;
    }
    Ok(v)
}

fn cmd_synth(args: SynthArgs, cfg: Resolved) -> Result<(), CliError> {
    if args.frames == 0 {
        return Err(CliError::config("frames must be at least 1"));
    }
    if !(args.fps > 0.0) {
        return Err(CliError::config("fps must be positive"));
    }
    if args.noise_sigma < 0.0 {
        return Err(CliError::config("noise-sigma must be non-negative"));
    }
    if !(0.0..90.0).contains(&args.lean_deg) {
        return Err(CliError::config("lean-deg must be in [0, 90)"));
    }
    if args.amplitude < 0.0 {
        return Err(CliError::config("amplitude must be non-negative"));
    }
    let drift = parse_drift(&args.drift)?;
    let spec = SynthSpec {
        seed: cfg.seed,
        frame_count: args.frames,
        fps: args.fps,
        limb_amplitude: args.amplitude,
        torso_lean_deg: args.lean_deg,
        drift_velocity: drift,
        noise_sigma: args.noise_sigma,
    };
    let seq = posekit::ingest::generate_synthetic(&spec);
    let mut doc = CanonicalDocument::from_sequence(&seq);
    doc.metadata.provenance = Some(provenance(
        "synth",
        &cfg,
        json!({
            "frames": args.frames,
            "fps": args.fps,
            "amplitude": args.amplitude,
            "lean_deg": args.lean_deg,
            "drift": drift,
            "noise_sigma": args.noise_sigma,
        }),
    ));
    write_pose(&doc, &args.output)?;
    log::info!(
        "synthesized {} frames into {}",
        args.frames,
        args.output.display()
    );
    println!(
        "{}",
        json!({"output": args.output.display().to_string(), "frames": args.frames})
    );
    Ok(())
}

/// Lists the processable files of `dir` in name order.
fn dir_inputs(dir: &Path, extensions: &[&str]) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(format!("cannot list {}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry
            .map_err(|e| CliError::io(format!("cannot list {}: {e}", dir.display())))?
            .path();
        if path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| extensions.contains(&e))
        {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(CliError::data(format!(
            "no {extensions:?} files in {}",
            dir.display()
        )));
    }
    Ok(files)
}

/// Runs `process` over one file or over every file of a directory (in
/// parallel), mapping each input to `out_name(input)` inside the output
/// directory. Summaries are returned in input order.
fn for_each_input<F>(
    input: &Path,
    output: &Path,
    extensions: &[&str],
    out_name: impl Fn(&Path) -> PathBuf + Sync,
    process: F,
) -> Result<Vec<Value>, CliError>
where
    F: Fn(&Path, &Path) -> Result<Value, CliError> + Sync,
{
    if input.is_dir() {
        std::fs::create_dir_all(output)
            .map_err(|e| CliError::io(format!("cannot create {}: {e}", output.display())))?;
        let files = dir_inputs(input, extensions)?;
        files
            .par_iter()
            .map(|file| {
                let out = output.join(out_name(file));
                process(file, &out)
            })
            .collect()
    } else {
        Ok(vec![process(input, output)?])
    }
}

fn cmd_harmonize(args: HarmonizeArgs, cfg: Resolved) -> Result<(), CliError> {
    let targets = canonical_reference_targets();
    let summaries = for_each_input(
        &args.input,
        &args.output,
        &["json", "posebin"],
        |file| file.file_name().map(PathBuf::from).unwrap_or_default(),
        |file, out| {
            let seq = read_canonical(file)?;
            let key = select_key_frame(&seq, cfg.seed)?;
            let harmonized = harmonize_sequence(&seq, key.frame_index, &targets)?;
            let ratios = compute_scale_ratios(std::slice::from_ref(&seq))?;
            let mut doc = CanonicalDocument::from_sequence(&harmonized.sequence);
            doc.metadata.provenance = Some(provenance(
                "harmonize",
                &cfg,
                json!({"input": file.display().to_string(), "key_frame": key.frame_index}),
            ));
            write_pose(&doc, out)?;

            let sidecar = json!({
                "key_frame": harmonized.key_frame,
                "scale": harmonized.scale,
                "rotation": harmonized.transform.rotation_rows(),
                "translation": [
                    harmonized.transform.translation.x,
                    harmonized.transform.translation.y,
                    harmonized.transform.translation.z,
                ],
                "residual": harmonized.residual,
                "cluster_sizes": key.cluster_sizes,
                "scale_ratios": ratios,
            });
            write_atomic(
                &out.with_extension("transform.json"),
                format!("{}\n", serde_json::to_string_pretty(&sidecar).unwrap()).as_bytes(),
            )?;
            log::info!("harmonized {} -> {}", file.display(), out.display());
            Ok(json!({
                "input": file.display().to_string(),
                "output": out.display().to_string(),
                "key_frame": harmonized.key_frame,
                "scale": harmonized.scale,
            }))
        },
    )?;
    println!("{}", json!(summaries));
    Ok(())
}

fn cmd_keyframe(args: InputArgs, cfg: Resolved) -> Result<(), CliError> {
    let seq = read_canonical(&args.input)?;
    let key = select_key_frame(&seq, cfg.seed)?;
    println!(
        "{}",
        serde_json::to_string(&key).expect("key frame serializes")
    );
    Ok(())
}

fn cmd_windows(args: WindowsArgs, cfg: Resolved) -> Result<(), CliError> {
    let seq = read_canonical(&args.input)?;
    let windows = sliding_windows(&seq, cfg.window_len, cfg.step)?;
    println!(
        "{}",
        json!({
            "window_len": cfg.window_len,
            "step": cfg.step,
            "count": windows.len(),
            "windows": windows,
        })
    );
    Ok(())
}

/// Volume geometry for a sequence: either fit around the data with the
/// default voxel sigma, or honor an explicit world-unit sigma by padding
/// the bounding box with `PAD_SIGMAS` sigmas per side.
fn volume_for(seq: &PoseSequence, cfg: &Resolved) -> Result<(VolumeSpec, f64), CliError> {
    let points = || seq.frames.iter().flat_map(|f| f.coords.iter().copied());
    match cfg.sigma_main {
        None => Ok(VolumeSpec::fit(points(), cfg.dims, DEFAULT_SIGMA_VOXELS)?),
        Some(sigma) => {
            let mut lo = [f64::INFINITY; 3];
            let mut hi = [f64::NEG_INFINITY; 3];
            for p in points() {
                for (k, v) in [p.x, p.y, p.z].into_iter().enumerate() {
                    lo[k] = lo[k].min(v - PAD_SIGMAS * sigma);
                    hi[k] = hi[k].max(v + PAD_SIGMAS * sigma);
                }
            }
            Ok((VolumeSpec::new(cfg.dims, lo, hi)?, sigma))
        }
    }
}

fn cmd_encode(args: EncodeArgs, cfg: Resolved) -> Result<(), CliError> {
    let dump_csv = args.dump_csv.as_deref();
    if args.input.is_dir() && dump_csv.is_some() {
        return Err(CliError::config(
            "--dump-csv works on single-file encodes only",
        ));
    }
    let summaries = for_each_input(
        &args.input,
        &args.output,
        &["json", "posebin"],
        |file| PathBuf::from(file.file_stem().unwrap_or_default()).with_extension("vol"),
        |file, out| {
            let seq = read_canonical(file)?;
            let (spec, sigma) = volume_for(&seq, &cfg)?;
            let c = cfg.c.unwrap_or(DEFAULT_C_OVER_SIGMA * sigma);
            let volumes: Vec<HeatVolume> = seq
                .frames
                .iter()
                .map(|f| encode(f, &seq.topology, &spec, sigma, c, cfg.mode))
                .collect::<Result<_, _>>()?;
            let indices: Vec<usize> = seq.frames.iter().map(|f| f.frame_index).collect();
            let mut metadata = CanonicalDocument::from_sequence(&seq).metadata;
            metadata.provenance = Some(provenance(
                "encode",
                &cfg,
                json!({
                    "input": file.display().to_string(),
                    "sigma_main": sigma,
                    "c": c,
                    "dims": spec.dims,
                }),
            ));
            write_volumes(&volumes, &indices, sigma, c, &metadata, out)?;
            if let Some(csv) = dump_csv {
                dump_peak_slices(&volumes[0], csv)?;
            }
            log::info!("encoded {} -> {}", file.display(), out.display());
            Ok(json!({
                "input": file.display().to_string(),
                "output": out.display().to_string(),
                "frames": volumes.len(),
                "dims": spec.dims,
                "sigma_main": sigma,
                "c": c,
                "mode": cfg.mode.to_string(),
            }))
        },
    )?;
    println!("{}", json!(summaries));
    Ok(())
}

/// Writes the z-slice through each channel's peak as CSV rows for external
/// plotting.
fn dump_peak_slices(vol: &HeatVolume, path: &Path) -> Result<(), CliError> {
    let spec = vol.spec();
    let [w, h, _] = spec.dims;
    let mut text = String::from("channel,joint,iz,iy,ix,value\n");
    for (ci, grid) in vol.channels().iter().enumerate() {
        let peak = grid
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite voxels"))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let iz = peak / (w * h);
        let joint = vol
            .joint_names()
            .get(ci)
            .map(String::as_str)
            .unwrap_or("fused");
        for iy in 0..h {
            for ix in 0..w {
                let value = grid[spec.voxel_index(ix, iy, iz)];
                text.push_str(&format!("{ci},{joint},{iz},{iy},{ix},{value}\n"));
            }
        }
    }
    write_atomic(path, text.as_bytes())
}

fn cmd_decode(args: DecodeArgs) -> Result<(), CliError> {
    let summaries = for_each_input(
        &args.input,
        &args.output,
        &["vol", "bin"],
        |file| PathBuf::from(file.file_stem().unwrap_or_default()).with_extension("json"),
        |file, out| {
            let (volumes, header) = read_volumes(file)?;
            let mut frames = Vec::with_capacity(volumes.len());
            for vol in &volumes {
                let coords = decode(vol)?;
                frames.push(coords.iter().map(|p| [p.x, p.y, p.z]).collect());
            }
            let mut metadata = header.metadata.clone();
            metadata.provenance = Some(json!({
                "tool": "posekit",
                "tool_version": env!("CARGO_PKG_VERSION"),
                "command": "decode",
                "args": {"input": file.display().to_string()},
                "upstream": header.metadata.provenance,
            }));
            let doc = CanonicalDocument {
                schema_version: SCHEMA_VERSION,
                metadata,
                frame_indices: header.frame_indices.clone(),
                frames,
            };
            write_pose(&doc, out)?;
            log::info!("decoded {} -> {}", file.display(), out.display());
            Ok(json!({
                "input": file.display().to_string(),
                "output": out.display().to_string(),
                "frames": volumes.len(),
            }))
        },
    )?;
    println!("{}", json!(summaries));
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let pred = read_canonical(&args.pred)?;
    let gt = read_canonical(&args.gt)?;
    if pred.units != gt.units {
        return Err(CliError::data(format!(
            "units differ: prediction in {}, ground truth in {}",
            pred.units, gt.units
        )));
    }
    let eval = posekit::metrics::evaluate_sequences(&pred, &gt)?;
    println!(
        "{}",
        json!({
            "units": gt.units.to_string(),
            "frames": eval.per_frame.len(),
            "mpjpe": eval.mpjpe,
            "p_mpjpe": eval.p_mpjpe,
            "per_frame": eval.per_frame,
        })
    );
    Ok(())
}

fn print_selftest(name: &str, report: SelfCheckReport) -> Result<(), CliError> {
    println!(
        "{}",
        json!({"suite": name, "ok": report.ok(), "checks": report.checks})
    );
    if report.ok() {
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.pass)
            .map(|c| c.name.as_str())
            .collect();
        Err(CliError::new(
            EXIT_SELFTEST,
            "selftest",
            format!("{name} failed: {}", failed.join(", ")),
        ))
    }
}
