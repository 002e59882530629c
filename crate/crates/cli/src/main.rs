//! `anypoint` command line: synthetic data generation, two-stage training,
//! online tracking, metric evaluation, gradient checking and overlay
//! rendering. Exit codes: 0 success, 2 configuration error, 3 runtime
//! failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use anypoint_core::checkpoint::{load_checkpoint, save_checkpoint};
use anypoint_core::config::{AppConfig, CcaMode, RebasePolicy, WorldConfig};
use anypoint_core::error::Error;
use anypoint_core::metrics::evaluate;
use anypoint_core::model::Model;
use anypoint_core::render::render_overlay;
use anypoint_core::synthworld::{
    generate_sequence, load_frames, load_ground_truth, save_sequence,
};
use anypoint_core::tracker::{load_tracks, open_session, save_tracks, write_events};
use anypoint_core::training::{grad_check, train_stage1, train_stage2, GradCheckConfig};

#[derive(Parser)]
#[command(name = "anypoint", version, about = "Online any-point tracker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RebaseArg {
    Off,
    OnCut,
    Always,
}

impl From<RebaseArg> for RebasePolicy {
    fn from(v: RebaseArg) -> Self {
        match v {
            RebaseArg::Off => RebasePolicy::Off,
            RebaseArg::OnCut => RebasePolicy::OnCut,
            RebaseArg::Always => RebasePolicy::Always,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CcaModeArg {
    EveryTwoPoint,
    ElementWise,
    PointLevel,
}

impl From<CcaModeArg> for CcaMode {
    fn from(v: CcaModeArg) -> Self {
        match v {
            CcaModeArg::EveryTwoPoint => CcaMode::EveryTwoPoint,
            CcaModeArg::ElementWise => CcaMode::ElementWise,
            CcaModeArg::PointLevel => CcaMode::PointLevel,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic sequences (frames/%05d.png + gt.json).
    Generate(GenerateArgs),
    /// Train a model on generated sequences and write a checkpoint.
    Train(TrainArgs),
    /// Track query points through a video directory.
    Track(TrackArgs),
    /// Compute AJ / delta_avg / OA for a track file against ground truth.
    Eval(EvalArgs),
    /// Verify analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Render track overlays onto the video frames.
    Render(RenderArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Config file ([world] section is used).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Number of sequences (written to seq%05d subdirectories when > 1).
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Overrides the world seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Loss-curve CSV output (iter,loc,vis,total).
    #[arg(long)]
    curves: Option<PathBuf>,
    /// Also run the second training stage (global-matching fusion).
    #[arg(long)]
    stage2: bool,
    /// Overrides the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Supervise invisible points' positions too (ablation).
    #[arg(long)]
    no_invisible_mask: bool,
    /// Patch-similarity variant (ablation).
    #[arg(long, value_enum)]
    cca_mode: Option<CcaModeArg>,
}

#[derive(Args)]
struct TrackArgs {
    /// Trained checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Sequence directory containing frames/*.png.
    #[arg(long)]
    video: PathBuf,
    /// Query points file: `x y start_frame` per line (image pixels).
    #[arg(long)]
    points: PathBuf,
    /// Output tracks file.
    #[arg(long)]
    out: PathBuf,
    /// Optional config overriding the checkpoint's tracker section.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene-cut events output (JSON lines).
    #[arg(long)]
    events: Option<PathBuf>,
    /// Dump per-frame attention to a diag/ directory next to the output.
    #[arg(long)]
    dump_attn: bool,
    /// Rebase policy override.
    #[arg(long, value_enum)]
    rebase: Option<RebaseArg>,
    /// Temporal memory capacity override (0 = unlimited).
    #[arg(long)]
    memory_cap: Option<usize>,
    /// Sliding attention window override (0 = off).
    #[arg(long)]
    window: Option<usize>,
    /// Disable visibility reweighting in temporal attention (ablation).
    #[arg(long)]
    no_vlta_visibility: bool,
    /// Scene-cut detector threshold override.
    #[arg(long)]
    cut_threshold: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    tracks: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Metric report JSON output.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Config to echo into the report.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    /// Print every failing coordinate.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    video: PathBuf,
    #[arg(long)]
    tracks: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(path: &Option<PathBuf>) -> Result<AppConfig, Error> {
    match path {
        Some(p) => AppConfig::load(p),
        None => Ok(AppConfig::default()),
    }
}

fn cmd_generate(args: GenerateArgs) -> Result<(), Error> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.world.seed = seed;
    }
    for i in 0..args.count.max(1) {
        let mut world = cfg.world.clone();
        world.seed = cfg.world.seed + i as u64;
        let seq = generate_sequence(&world)?;
        let dir = if args.count > 1 {
            args.out.join(format!("seq{i:05}"))
        } else {
            args.out.clone()
        };
        save_sequence(&seq, &dir)?;
        println!(
            "wrote {} frames + gt.json to {} (cuts: {:?})",
            seq.num_frames(),
            dir.display(),
            seq.scene_cuts
        );
    }
    Ok(())
}

fn build_corpus(world: &WorldConfig, count: usize) -> Result<Vec<anypoint_core::synthworld::SyntheticSequence>, Error> {
    (0..count)
        .map(|i| {
            let mut w = world.clone();
            w.seed = world.seed + i as u64;
            generate_sequence(&w)
        })
        .collect()
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.training.seed = seed;
        cfg.world.seed = seed;
    }
    if args.no_invisible_mask {
        cfg.training.mask_invisible = false;
    }
    if let Some(mode) = args.cca_mode {
        cfg.model.cca_mode = mode.into();
    }
    cfg.validate()?;

    let corpus = build_corpus(&cfg.world, cfg.training.sequences)?;
    let mut model = Model::new(&cfg.model, cfg.training.seed)?;
    println!(
        "training: {} sequences x {} frames, {} iterations",
        corpus.len(),
        cfg.world.video_length,
        cfg.training.iterations
    );
    let outcome = train_stage1(&mut model, &corpus, &cfg.training)?;
    if let Some(last) = outcome.curves.last() {
        println!(
            "stage 1 done: loc {:.4} vis {:.4} total {:.4}",
            last.location_loss, last.visibility_loss, last.total
        );
    }
    if args.stage2 {
        let stage2_corpus = if corpus.iter().any(|s| !s.scene_cuts.is_empty()) {
            corpus
        } else {
            let mut world = cfg.world.clone();
            world.cut_probability = 1.0;
            world.seed = cfg.world.seed + 10_000;
            build_corpus(&world, cfg.training.sequences)?
        };
        let out = train_stage2(&mut model, &stage2_corpus, &cfg.training)?;
        println!("stage 2 done: {} effective iterations", out.effective_iterations);
    }
    save_checkpoint(&args.out, &model, &cfg)?;
    println!("checkpoint written to {}", args.out.display());

    if let Some(curves_path) = args.curves {
        let mut csv = String::from("iter,loc,vis,total\n");
        for row in &outcome.curves {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                row.iteration, row.location_loss, row.visibility_loss, row.total
            ));
        }
        std::fs::write(&curves_path, csv)?;
        println!("curves written to {}", curves_path.display());
    }
    Ok(())
}

/// Parse a query-points file: `x y start_frame` per line.
fn parse_points(path: &Path) -> Result<Vec<(f64, f64, usize)>, Error> {
    let text = std::fs::read_to_string(path)?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected `x y start_frame`, got {trimmed:?}"),
            });
        }
        let x: f64 = fields[0].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad x {:?}", fields[0]),
        })?;
        let y: f64 = fields[1].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad y {:?}", fields[1]),
        })?;
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::Parse { line: line_no, msg: "non-finite coordinate".into() });
        }
        let start: usize = fields[2].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad start frame {:?}", fields[2]),
        })?;
        points.push((x, y, start));
    }
    Ok(points)
}

fn cmd_track(args: TrackArgs) -> Result<(), Error> {
    let (model, echo) = load_checkpoint(&args.model)?;
    let mut tracker_cfg = match &args.config {
        Some(p) => AppConfig::load(p)?.tracker,
        None => echo.tracker,
    };
    if let Some(rebase) = args.rebase {
        tracker_cfg.rebase = rebase.into();
    }
    if let Some(cap) = args.memory_cap {
        tracker_cfg.memory_cap = cap;
    }
    if let Some(window) = args.window {
        tracker_cfg.window = window;
    }
    if args.no_vlta_visibility {
        tracker_cfg.vlta_visibility = false;
    }
    if let Some(thresh) = args.cut_threshold {
        tracker_cfg.cut_threshold = thresh;
    }

    let frames = load_frames(&args.video)?;
    let points = parse_points(&args.points)?;
    let mut by_start: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for &(x, y, start) in &points {
        if start >= frames.len() {
            return Err(Error::invalid_input(format!(
                "point start frame {start} beyond video length {}",
                frames.len()
            )));
        }
        by_start.entry(start).or_default().push((x, y));
    }

    let mut session = open_session(Arc::new(model), tracker_cfg)?;
    if args.dump_attn {
        let diag_dir = args
            .out
            .parent()
            .map(|p| p.join("diag"))
            .unwrap_or_else(|| PathBuf::from("diag"));
        session.set_diag_dir(diag_dir);
    }
    let mut records = Vec::new();
    for (t, frame) in frames.iter().enumerate() {
        if let Some(batch) = by_start.get(&t) {
            session.add_points(frame, batch)?;
        }
        records.extend(session.step(frame)?);
    }
    save_tracks(&records, &args.out)?;
    println!(
        "tracked {} points over {} frames -> {}",
        points.len(),
        frames.len(),
        args.out.display()
    );
    if let Some(events_path) = args.events {
        write_events(session.events(), &events_path)?;
        println!("{} scene-cut events -> {}", session.events().len(), events_path.display());
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let records = load_tracks(&args.tracks)?;
    let gt = load_ground_truth(&args.gt)?;
    let mut report = evaluate(&records, &gt)?;
    if let Some(cfg_path) = &args.config {
        report.config_echo = Some(AppConfig::load(cfg_path)?);
    }
    println!("AJ={:.1}", report.aj);
    println!("delta_avg={:.1}", report.delta_avg);
    println!("OA={:.1}", report.oa);
    let per: Vec<String> = report.per_threshold.iter().map(|v| format!("{v:.1}")).collect();
    println!("per_threshold=[{}]", per.join(", "));
    if report.no_visible_pairs {
        eprintln!("warning: no ground-truth-visible pairs; delta terms defined as 0");
    }
    if let Some(path) = args.report {
        std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), Error> {
    let cfg = match &args.config {
        Some(p) => AppConfig::load(p)?,
        None => {
            let mut cfg = AppConfig::default();
            // Toy dimensions keep the finite-difference sweep fast.
            cfg.model.channels = 16;
            cfg.model.ffn_hidden = 32;
            cfg.model.samples = 4;
            cfg.model.layers = 2;
            cfg
        }
    };
    let mut gc = GradCheckConfig { eps: args.eps, tol: args.tol, ..Default::default() };
    if let Some(seed) = args.seed {
        gc.seed = seed;
        gc.world.seed = seed;
    }
    let model = Model::new(&cfg.model, gc.seed)?;
    let report = grad_check(&model, &gc)?;
    let mut by_module: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for e in &report.entries {
        let slot = by_module.entry(e.module.as_str()).or_insert((0, 0));
        slot.1 += 1;
        if e.pass {
            slot.0 += 1;
        }
    }
    for (module, (ok, total)) in &by_module {
        println!("{module}: {ok}/{total} within tolerance");
    }
    if args.verbose {
        for e in report.entries.iter().filter(|e| !e.pass) {
            println!(
                "FAIL {}[{}] analytic {:+.6e} numeric {:+.6e} rel {:.3e}",
                e.param, e.index, e.analytic, e.numeric, e.rel_error
            );
        }
    }
    println!(
        "gradcheck: {:.2}% of {} sampled coordinates pass (eps={}, tol={})",
        100.0 * report.pass_fraction,
        report.entries.len(),
        args.eps,
        args.tol
    );
    report.ensure_passed()
}

fn cmd_render(args: RenderArgs) -> Result<(), Error> {
    let frames = load_frames(&args.video)?;
    let records = load_tracks(&args.tracks)?;
    render_overlay(&frames, &records, &args.out)?;
    println!("rendered {} frames to {}", frames.len(), args.out.display());
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Track(args) => cmd_track(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Render(args) => cmd_render(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(if err.is_config() { 2 } else { 3 });
    }
}
