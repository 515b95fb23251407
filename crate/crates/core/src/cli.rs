//! The `lidar-resample` command line.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde::Serialize;

use crate::beams::{fit_and_label, fit_beam_model};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::io::{read_cloud, write_cloud};
use crate::pdda::{pdda_augment, resample, ResampleSpec};
use crate::report::Plot;
use crate::restore::{train_two_stage, RestorationModel, TrainSample};
use crate::rng::RngState;
use crate::synth::{generate_frames, scan, Scene, SceneBox, SensorProfile};
use crate::tta::{bench, read_jsonl, run_queries, write_jsonl, TtaRecord};

#[derive(Debug, Parser)]
#[command(
    name = "lidar-resample",
    version,
    about = "Beam-aware LiDAR density resampling, restoration training and test-time adaptation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit uniform beam bins to a cloud and print per-bin counts.
    EstimateBeams(EstimateArgs),
    /// Apply one named resampling operation.
    Resample(ResampleArgs),
    /// Draw one of {down2, down3, none, up2} uniformly and apply it.
    Augment(AugmentArgs),
    /// Render synthetic frames (bin4 clouds plus box JSON).
    Synth(SynthArgs),
    /// Two-stage training on a directory of synthetic frames.
    Train(TrainArgs),
    /// Test-time adaptation over a list of query clouds.
    Tta(TtaArgs),
    /// Adapt-and-infer throughput for several iteration counts.
    Bench(BenchArgs),
    /// Turn training CSV, adaptation records and bench CSV into SVG plots.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Input cloud (.bin = bin4, .csv = xyz-csv).
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Number of beam bins M.
    #[arg(long, default_value_t = 64)]
    pub beams: usize,
    /// Print one JSON object {phi_min_deg, phi_max_deg, counts}.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ResampleArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Operation: none, down<C> (e.g. down2, down3) or up<S> (e.g. up2).
    #[arg(long, value_parser = parse_op)]
    pub op: OpName,
    /// Removal probability P applied after down-sampling.
    #[arg(long, default_value_t = 0.1)]
    pub p: f64,
    /// Seed for the keep offset and removal draws.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of beam bins M.
    #[arg(long, default_value_t = 64)]
    pub beams: usize,
    /// Bin offset kept by down-sampling (drawn from the seed when absent).
    #[arg(long)]
    pub offset: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpName {
    None,
    Down(u32),
    Up(u32),
}

fn parse_op(s: &str) -> std::result::Result<OpName, String> {
    let num = |t: &str| {
        t.parse::<u32>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| format!("bad factor in {s:?}"))
    };
    if s == "none" {
        Ok(OpName::None)
    } else if let Some(t) = s.strip_prefix("down") {
        num(t).map(OpName::Down)
    } else if let Some(t) = s.strip_prefix("up") {
        num(t).map(OpName::Up)
    } else {
        Err(format!(
            "unknown operation {s:?}; expected none, down<C> or up<S>"
        ))
    }
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Removal probability P for the down-sampling branches.
    #[arg(long, default_value_t = 0.1)]
    pub p: f64,
    #[arg(long, default_value_t = 64)]
    pub beams: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory for frame_NNNN.bin and frame_NNNN.boxes.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Render this scene JSON instead of random scenes (writes one frame).
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Sensor profile: waymo, kitti or nuscenes.
    #[arg(long)]
    pub profile: Option<String>,
    /// Number of random frames.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of frames written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch loss CSV to write.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epochs of the detection stage.
    #[arg(long)]
    pub det_epochs: Option<usize>,
    /// Epochs of the restoration stage.
    #[arg(long)]
    pub ssl_epochs: Option<usize>,
    /// Sets both stage epoch counts.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub det_lr: Option<f64>,
    #[arg(long)]
    pub ssl_lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Weight of the perceptual term.
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub beams: Option<usize>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// Trained checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Text file listing query clouds, one path per line (relative to the list).
    #[arg(long)]
    pub list: Option<PathBuf>,
    /// Query clouds.
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beams: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TtaArgs {
    #[command(flatten)]
    pub query: QueryArgs,
    /// Adaptation steps per query.
    #[arg(long)]
    pub n_iter: Option<usize>,
    /// JSON-lines record output.
    #[arg(long)]
    pub out: PathBuf,
    /// Write each query's foreground grid here as query_NNNN.grid.
    #[arg(long)]
    pub fg_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub query: QueryArgs,
    /// Comma-separated iteration counts.
    #[arg(long, value_delimiter = ',', default_value = "1,5")]
    pub n_iter: Vec<usize>,
    /// Optional CSV output of the table.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Training CSV from `train`.
    #[arg(long)]
    pub train_csv: Option<PathBuf>,
    /// Records from `tta`.
    #[arg(long)]
    pub tta_jsonl: Option<PathBuf>,
    /// CSV from `bench --out`.
    #[arg(long)]
    pub bench_csv: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::DegenerateRange(_) => 3,
        Error::Divergence { .. } => 4,
        _ => 2,
    }
}

/// Worker cap from `LIDAR_RESAMPLE_THREADS`.
pub fn thread_limit() -> Result<Option<usize>> {
    match std::env::var("LIDAR_RESAMPLE_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| {
                Error::Config(format!(
                    "LIDAR_RESAMPLE_THREADS must be a positive integer, got {v:?}"
                ))
            }),
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::EstimateBeams(a) => estimate(a, out),
        Command::Resample(a) => resample_cmd(a, out),
        Command::Augment(a) => augment(a, out),
        Command::Synth(a) => synth(a, out),
        Command::Train(a) => train(a, out),
        Command::Tta(a) => tta(a, out),
        Command::Bench(a) => bench_cmd(a, out),
        Command::Report(a) => report(a, out),
    }
}

fn say(out: &mut dyn Write, text: std::fmt::Arguments<'_>) -> Result<()> {
    out.write_fmt(text)
        .and_then(|_| out.write_all(b"\n"))
        .map_err(|e| Error::io("<stdout>", e))
}

macro_rules! say {
    ($out:expr, $($t:tt)*) => { say($out, format_args!($($t)*)) };
}

fn read_nonempty(path: &Path) -> Result<PointCloud> {
    let cloud = read_cloud(path)?;
    if cloud.is_empty() {
        return Err(Error::EmptyInput(path.display().to_string()));
    }
    Ok(cloud)
}

fn check_p(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidInput(format!(
            "--p must be in [0, 1], got {p}"
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct BeamSummary {
    phi_min_deg: f64,
    phi_max_deg: f64,
    counts: Vec<usize>,
}

fn estimate(a: EstimateArgs, out: &mut dyn Write) -> Result<()> {
    let cloud = read_nonempty(&a.input)?;
    let model = fit_beam_model(&cloud, a.beams)?;
    let summary = BeamSummary {
        phi_min_deg: model.phi_min().to_degrees(),
        phi_max_deg: model.phi_max().to_degrees(),
        counts: model.counts(&crate::beams::label_bins(&cloud, &model)?)?,
    };
    if a.json {
        let s = serde_json::to_string(&summary).map_err(|e| Error::InvalidInput(e.to_string()))?;
        return say!(out, "{s}");
    }
    say!(out, "phi_min_deg {:.6}", summary.phi_min_deg)?;
    say!(out, "phi_max_deg {:.6}", summary.phi_max_deg)?;
    say!(
        out,
        "bins {} non_empty {}",
        a.beams,
        summary.counts.iter().filter(|&&c| c > 0).count()
    )?;
    for (k, c) in summary.counts.iter().enumerate() {
        say!(out, "bin {k} {c}")?;
    }
    Ok(())
}

fn resample_cmd(a: ResampleArgs, out: &mut dyn Write) -> Result<()> {
    check_p(a.p)?;
    let cloud = read_nonempty(&a.input)?;
    let result = match a.op {
        OpName::None => cloud.clone(),
        op => {
            let (model, labelled) = fit_and_label(&cloud, a.beams)?;
            let rng = RngState::new(a.seed);
            let spec = match op {
                OpName::Down(factor) => ResampleSpec::Down {
                    factor,
                    dropout: a.p,
                    offset: match a.offset {
                        Some(o) => o,
                        None => rng.substream(0).random_range(0..factor),
                    },
                },
                OpName::Up(factor) => ResampleSpec::Up { factor },
                OpName::None => unreachable!(),
            };
            resample(&labelled, &model, &spec, &mut rng.substream(1))?
        }
    };
    write_cloud(&PointCloud::new(result.points.clone()), &a.out)?;
    say!(out, "in {} out {}", cloud.len(), result.len())
}

fn augment(a: AugmentArgs, out: &mut dyn Write) -> Result<()> {
    check_p(a.p)?;
    let cloud = read_nonempty(&a.input)?;
    let (model, labelled) = fit_and_label(&cloud, a.beams)?;
    let (result, spec) = pdda_augment(&labelled, &model, a.p, &RngState::new(a.seed))?;
    write_cloud(&PointCloud::new(result.points.clone()), &a.out)?;
    say!(
        out,
        "op {} in {} out {}",
        spec.name(),
        cloud.len(),
        result.len()
    )
}

fn frame_paths(dir: &Path, i: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("frame_{i:04}.bin")),
        dir.join(format!("frame_{i:04}.boxes.json")),
    )
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| Error::InvalidInput(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(p) = a.profile {
        cfg.synth.profile = p;
    }
    if let Some(n) = a.frames {
        cfg.synth.frames = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let profile = SensorProfile::by_name(&cfg.synth.profile).expect("validated");
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let frames = match &a.scene {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let scene: Scene = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.clone(),
                line: e.line(),
                msg: e.to_string(),
            })?;
            vec![scan(&scene, &profile, &mut RngState::new(cfg.seed))?]
        }
        None => generate_frames(&profile, cfg.synth.frames, cfg.seed)?,
    };
    for (i, f) in frames.iter().enumerate() {
        let (cloud_path, box_path) = frame_paths(&a.out_dir, i);
        write_cloud(&f.cloud, &cloud_path)?;
        write_json(&box_path, &f.boxes)?;
        say!(
            out,
            "{} points {} boxes {}",
            cloud_path.display(),
            f.cloud.len(),
            f.boxes.len()
        )?;
    }
    Ok(())
}

fn load_frames(dir: &Path) -> Result<Vec<TrainSample>> {
    let mut clouds: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "bin")
                && p.file_name()
                    .is_some_and(|n| n.to_string_lossy().starts_with("frame_"))
        })
        .collect();
    clouds.sort();
    if clouds.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no frame_*.bin files in {}",
            dir.display()
        )));
    }
    clouds
        .iter()
        .map(|p| {
            let cloud = read_cloud(p)?;
            let box_path = p.with_extension("boxes.json");
            let text = std::fs::read_to_string(&box_path).map_err(|e| Error::io(&box_path, e))?;
            let boxes: Vec<SceneBox> = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: box_path.clone(),
                line: e.line(),
                msg: e.to_string(),
            })?;
            Ok(TrainSample {
                cloud,
                boxes: boxes
                    .iter()
                    .filter(|b| b.is_foreground())
                    .map(SceneBox::aabb)
                    .collect(),
            })
        })
        .collect()
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.det_epochs = v;
        cfg.train.ssl_epochs = v;
    }
    if let Some(v) = a.det_epochs {
        cfg.train.det_epochs = v;
    }
    if let Some(v) = a.ssl_epochs {
        cfg.train.ssl_epochs = v;
    }
    if let Some(v) = a.det_lr {
        cfg.train.det_lr = v;
    }
    if let Some(v) = a.ssl_lr {
        cfg.train.ssl_lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.lambda1 {
        cfg.train.lambda1 = v;
    }
    if let Some(v) = a.beams {
        cfg.beams = v;
    }
    cfg.validate()?;
    let data = load_frames(&a.data)?;
    let tc = cfg.train_config();
    let mut model = RestorationModel::with_momentum(cfg.seed, tc.momentum);
    let report = train_two_stage(&mut model, &data, &tc)?;
    model.save(&a.out)?;
    report.save_csv(&a.report)?;
    say!(
        out,
        "frames {} epochs {}+{} seed {}",
        data.len(),
        tc.det_epochs,
        tc.ssl_epochs,
        tc.seed
    )?;
    if let (Some(i), Some(f)) = (report.ssl_initial, report.ssl_final) {
        say!(out, "restoration loss {i:.6} -> {f:.6}")?;
    }
    say!(out, "wrote {} and {}", a.out.display(), a.report.display())
}

fn query_paths(q: &QueryArgs) -> Result<Vec<PathBuf>> {
    let mut paths = q.inputs.clone();
    if let Some(list) = &q.list {
        let text = std::fs::read_to_string(list).map_err(|e| Error::io(list, e))?;
        let base = list.parent().unwrap_or(Path::new("."));
        paths.extend(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(|l| base.join(l)),
        );
    }
    if paths.is_empty() {
        return Err(Error::EmptyInput(
            "no query files given (use --list or positional paths)".into(),
        ));
    }
    Ok(paths)
}

fn query_setup(q: &QueryArgs) -> Result<(RunConfig, RestorationModel, Vec<PointCloud>)> {
    let mut cfg = RunConfig::load(q.config.as_deref())?;
    if let Some(v) = q.seed {
        cfg.seed = v;
    }
    if let Some(v) = q.lr {
        cfg.tta.lr = v;
    }
    if let Some(v) = q.beams {
        cfg.beams = v;
    }
    let model = RestorationModel::load(&q.model)?;
    let clouds = query_paths(q)?
        .iter()
        .map(|p| read_nonempty(p))
        .collect::<Result<Vec<_>>>()?;
    Ok((cfg, model, clouds))
}

fn tta(a: TtaArgs, out: &mut dyn Write) -> Result<()> {
    let (mut cfg, model, clouds) = query_setup(&a.query)?;
    if let Some(n) = a.n_iter {
        cfg.tta.n_iter = n;
    }
    cfg.validate()?;
    let results = run_queries(&model, &clouds, &cfg.grid, &cfg.tta_config())?;
    let file = std::fs::File::create(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let records: Vec<TtaRecord> = results.iter().map(|(_, r)| r.clone()).collect();
    write_jsonl(&records, std::io::BufWriter::new(file))?;
    if let Some(dir) = &a.fg_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (grid, r) in &results {
            let path = dir.join(format!("query_{:04}.grid", r.query));
            let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            grid.write_to(std::io::BufWriter::new(f))
                .map_err(|e| Error::io(&path, e))?;
        }
    }
    for r in &records {
        say!(
            out,
            "query {} C={} loss {:.6} -> {:.6} ({}) foreground cells {}",
            r.query,
            r.factor,
            r.initial_loss(),
            r.final_loss(),
            r.status,
            r.foreground_cells
        )?;
    }
    say!(
        out,
        "wrote {} records to {}",
        records.len(),
        a.out.display()
    )
}

const BENCH_HEADER: [&str; 9] = [
    "n_iter", "frames", "seconds", "fps", "prepare", "adapt", "infer", "restore", "total",
];

fn bench_cmd(a: BenchArgs, out: &mut dyn Write) -> Result<()> {
    let (cfg, model, clouds) = query_setup(&a.query)?;
    cfg.validate()?;
    if a.n_iter.is_empty() {
        return Err(Error::InvalidInput(
            "--n-iter needs at least one value".into(),
        ));
    }
    let mut rows = Vec::new();
    for &n in &a.n_iter {
        let mut tc = cfg.tta_config();
        tc.n_iter = n;
        let (rep, _) = bench(&model, &clouds, &cfg.grid, &tc)?;
        let s = rep.stages;
        rows.push([
            n.to_string(),
            rep.frames.to_string(),
            format!("{:.6}", rep.seconds),
            format!("{:.4}", rep.fps),
            format!("{:.6}", s.prepare),
            format!("{:.6}", s.adapt),
            format!("{:.6}", s.infer),
            format!("{:.6}", s.restore),
            format!("{:.6}", s.total),
        ]);
    }
    say!(out, "{}", BENCH_HEADER.join("\t"))?;
    for r in &rows {
        say!(out, "{}", r.join("\t"))?;
    }
    if let Some(path) = &a.out {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
        let csv_err = |e: csv::Error| Error::InvalidInput(format!("{}: {e}", path.display()));
        w.write_record(BENCH_HEADER).map_err(csv_err)?;
        for r in &rows {
            w.write_record(r).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    let header = r
        .headers()
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_owned)
        .collect();
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            msg: e.to_string(),
        })?;
        rows.push(rec.iter().map(str::to_owned).collect());
    }
    Ok((header, rows))
}

/// `(x, y)` pairs from two named columns, skipping empty cells.
fn columns(
    path: &Path,
    header: &[String],
    rows: &[Vec<String>],
    x: &str,
    y: &str,
) -> Result<Vec<(f64, f64)>> {
    let col = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| {
            Error::InvalidInput(format!("{}: missing column {name:?}", path.display()))
        })
    };
    let (xi, yi) = (col(x)?, col(y)?);
    let mut pts = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let (Some(xs), Some(ys)) = (row.get(xi), row.get(yi)) else {
            continue;
        };
        if xs.is_empty() || ys.is_empty() {
            continue;
        }
        let parse = |s: &str| {
            s.parse::<f64>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                msg: format!("not a number: {s:?}"),
            })
        };
        pts.push((parse(xs)?, parse(ys)?));
    }
    Ok(pts)
}

fn report(a: ReportArgs, out: &mut dyn Write) -> Result<()> {
    if a.train_csv.is_none() && a.tta_jsonl.is_none() && a.bench_csv.is_none() {
        return Err(Error::InvalidInput(
            "nothing to plot: pass --train-csv, --tta-jsonl or --bench-csv".into(),
        ));
    }
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let mut emit = |name: &str, plot: Plot| -> Result<()> {
        let path = a.out_dir.join(name);
        std::fs::write(&path, plot.to_svg()).map_err(|e| Error::io(&path, e))?;
        say!(out, "wrote {}", path.display())
    };
    if let Some(path) = &a.train_csv {
        let (h, rows) = read_table(path)?;
        let mut plot = Plot::new("Training loss", "epoch", "loss");
        for (col, name) in [
            ("det", "L_det (proxy)"),
            ("mse", "L_mse"),
            ("pcp", "L_pcp"),
            ("self", "L_self"),
        ] {
            plot = plot.with_series(name, columns(path, &h, &rows, "epoch", col)?);
        }
        emit("loss_vs_epoch.svg", plot)?;
    }
    if let Some(path) = &a.tta_jsonl {
        let records = read_jsonl(path)?;
        if records.is_empty() {
            return Err(Error::EmptyInput(format!("{}: no records", path.display())));
        }
        let steps = records.iter().map(|r| r.losses.len()).max().unwrap_or(0);
        let mut mean = Vec::new();
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        for t in 0..steps {
            let vals: Vec<f64> = records
                .iter()
                .filter_map(|r| r.losses.get(t).copied())
                .collect();
            let x = t as f64;
            mean.push((x, vals.iter().sum::<f64>() / vals.len() as f64));
            lo.push((x, vals.iter().copied().fold(f64::INFINITY, f64::min)));
            hi.push((x, vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)));
        }
        let plot = Plot::new("Adaptation loss", "TTA step", "L_mse")
            .with_series("mean", mean)
            .with_series("min", lo)
            .with_series("max", hi);
        emit("tta_loss_vs_step.svg", plot)?;
    }
    if let Some(path) = &a.bench_csv {
        let (h, rows) = read_table(path)?;
        let plot = Plot::new("Throughput", "N_iter", "frames per second")
            .with_series("fps", columns(path, &h, &rows, "n_iter", "fps")?);
        emit("fps_vs_niter.svg", plot)?;
    }
    Ok(())
}
