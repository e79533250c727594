//! `scargan`: phantom data, GAN training, simulation, segmentation experiment
//! and reader study from one binary.

mod config;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scargan::augment::{build_training_set, select_by_ids, select_snapshots, AugmentPlan, Regime};
use scargan::dataset::{
    generate_corpus, read_dataset, write_dataset, Class, CorpusConfig, Manifest, ManifestEntry, PhantomParams, Provenance, ScanSlice,
    SegMask,
};
use scargan::evalkit::{render_report, report_table, FoldMetrics, SegScore};
use scargan::maskgan::train_maskgan;
use scargan::nets::{load_snapshots, WeightSnapshot};
use scargan::refinegan::{heuristic_inputs, normalize, train_refinegan};
use scargan::segnet::{cross_validate, pretrain, SegPrediction, SegRun, Segmenter};
use scargan::study::{StudyError, StudyStore};

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] scargan::Error),
    #[error(transparent)]
    Study(#[from] StudyError),
    #[error("{}: {1}", .0.display())]
    Io(PathBuf, std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "scargan", version, about = "Scar simulation on cardiac MR phantoms")]
struct Cli {
    /// JSON run config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the stage being run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a patient-structured phantom dataset.
    PhantomGen(PhantomGenArgs),
    /// Train the scar mask generator; writes periodic snapshots.
    TrainMaskgan(TrainArgs),
    /// Train the image refiner on heuristically painted slices.
    TrainRefinegan(TrainRefineArgs),
    /// Simulate scar on every scar-free slice; writes only the simulated slices.
    Simulate(SimArgs),
    /// Assemble a regime's training set: real scar slices plus its additions.
    BuildDataset(SimArgs),
    /// Pretrain (unless given a snapshot) and cross-validate the segmentation network.
    TrainSeg(TrainSegArgs),
    /// Score predicted masks against ground truth, or tabulate fold metrics.
    Evaluate(EvaluateArgs),
    /// Serve the reader-study API.
    StudyServe(StudyServeArgs),
    /// Recompute reader-study statistics from the stored response log.
    StudyStats(StudyStatsArgs),
}

#[derive(Args)]
struct PhantomGenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    scar_fraction: Option<f64>,
    #[arg(long)]
    slices_per_patient: Option<usize>,
    /// Frame side; rescales the default anatomy to it.
    #[arg(long)]
    size: Option<usize>,
    /// Anatomy magnification applied with --size.
    #[arg(long, default_value_t = 1.0, requires = "size")]
    zoom: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    snapshot_every: Option<u64>,
}

#[derive(Args)]
struct TrainRefineArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Mask-generator snapshot that shapes the heuristic inputs, or a
    /// snapshot directory to pick one from by diversity and scar coverage.
    #[arg(long)]
    mask_snapshot: PathBuf,
}

#[derive(Args)]
struct SnapshotArgs {
    #[arg(long)]
    regime: Regime,
    /// Mask-generator snapshot, once per simulation pass.
    #[arg(long = "snapshot")]
    snapshots: Vec<PathBuf>,
    /// Pick the regime's snapshots from this directory by shape diversity.
    #[arg(long, conflicts_with = "snapshots")]
    snapshot_dir: Option<PathBuf>,
    #[arg(long)]
    refiner: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    snapshots: SnapshotArgs,
}

#[derive(Args)]
struct TrainSegArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    snapshots: SnapshotArgs,
    /// Pretrained segmentation snapshot; pretrains on fresh phantoms when absent.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[arg(long)]
    folds: Option<usize>,
    /// Folds trained at the same time.
    #[arg(long)]
    folds_parallel: Option<usize>,
    /// Fine-tuning steps per fold.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    pretrain_steps: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Dataset whose masks are predictions.
    #[arg(long, requires = "gt", conflicts_with = "folds")]
    pred: Option<PathBuf>,
    /// Annotated dataset matching --pred by slice id.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Fold metric files or train-seg output directories to tabulate.
    #[arg(long, num_args = 1.., required_unless_present = "pred")]
    folds: Vec<PathBuf>,
    /// Output JSON; defaults to `evaluation.json` in the --pred directory.
    #[arg(long, required_unless_present = "pred")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StudyServeArgs {
    #[arg(long)]
    root: PathBuf,
    #[arg(long)]
    addr: Option<String>,
    #[arg(long, env = "SCARGAN_ADMIN_TOKEN", hide_env_values = true)]
    admin_token: String,
}

#[derive(Args)]
struct StudyStatsArgs {
    #[arg(long)]
    root: PathBuf,
    #[arg(long)]
    session: String,
    /// Allow raters with unanswered items.
    #[arg(long)]
    partial: bool,
    /// Output JSON; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    match cli.command {
        Command::PhantomGen(a) => phantom_gen(cfg, a),
        Command::TrainMaskgan(a) => train_mask(cfg, a),
        Command::TrainRefinegan(a) => train_refiner(cfg, a),
        Command::Simulate(a) => simulate(cfg, a, false),
        Command::BuildDataset(a) => simulate(cfg, a, true),
        Command::TrainSeg(a) => train_seg(cfg, a),
        Command::Evaluate(a) => evaluate(cfg, a),
        Command::StudyServe(a) => study_serve(cfg, a),
        Command::StudyStats(a) => study_stats(cfg, a),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))?;
    }
    let json = serde_json::to_vec_pretty(value).expect("value serializes");
    std::fs::write(path, json).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut f = std::fs::File::create(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
    for r in rows {
        writeln!(f, "{}", serde_json::to_string(r).expect("row serializes")).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
    }
    log::info!("wrote {}", path.display());
    Ok(())
}

fn load_data(cfg: &RunConfig, dir: &Path) -> CliResult<(Manifest, Vec<ScanSlice>)> {
    let dir = cfg.resolve(dir);
    let (m, s) = read_dataset(&dir)?;
    log::info!("read {} slices from {}", s.len(), dir.display());
    Ok((m, s))
}

fn split_scar(slices: &[ScanSlice]) -> (Vec<ScanSlice>, Vec<ScanSlice>) {
    slices.iter().cloned().partition(|s| s.has_scar)
}

fn load_snapshot(cfg: &RunConfig, path: &Path) -> CliResult<WeightSnapshot> {
    Ok(WeightSnapshot::load(&cfg.resolve(path))?)
}

fn frame_size(slices: &[ScanSlice]) -> CliResult<usize> {
    slices.first().map(ScanSlice::size).ok_or_else(|| CliError::Core(scargan::Error::Infeasible("dataset is empty".into())))
}

fn phantom_gen(mut cfg: RunConfig, a: PhantomGenArgs) -> CliResult<()> {
    let p = &mut cfg.phantom;
    if let Some(n) = a.n {
        p.n_slices = n;
    }
    if let Some(f) = a.scar_fraction {
        p.scar_fraction = f;
    }
    if let Some(k) = a.slices_per_patient {
        p.slices_per_patient = k;
    }
    if let Some(size) = a.size {
        p.params = PhantomParams::scaled(size, a.zoom);
    }
    if let Some(s) = cfg.seed {
        p.seed = s;
    }
    let corpus = generate_corpus(&cfg.phantom)?;
    let out = cfg.resolve(&a.out);
    let entries = corpus
        .iter()
        .map(|s| ManifestEntry { provenance: Some(if s.has_scar { Provenance::Real } else { Provenance::NoScar }), ..ManifestEntry::of(s) })
        .collect();
    write_dataset(&out, &corpus, entries, &cfg.phantom.params, cfg.phantom.seed)?;
    let with_scar = corpus.iter().filter(|s| s.has_scar).count();
    log::info!("wrote {} slices ({with_scar} with scar) to {}", corpus.len(), out.display());
    cfg.write_resolved(&out)?;
    Ok(())
}

fn train_mask(mut cfg: RunConfig, a: TrainArgs) -> CliResult<()> {
    let (_, slices) = load_data(&cfg, &a.data)?;
    let m = &mut cfg.maskgan;
    m.net.input_size = frame_size(&slices)?;
    if let Some(s) = a.steps {
        m.steps = s;
    }
    if let Some(s) = a.snapshot_every {
        m.snapshot_every = s;
    }
    if let Some(s) = cfg.seed {
        m.seed = s;
    }
    let (real, free) = split_scar(&slices);
    let masks = |v: &[ScanSlice]| v.iter().map(|s| s.mask.clone()).collect::<Vec<_>>();
    let out = cfg.resolve(&a.out);
    cfg.write_resolved(&out)?;
    let run = train_maskgan(&masks(&free), &masks(&real), &cfg.maskgan)?;
    run.save(&out)?;
    for s in &run.snapshots {
        log::info!("snapshot {}", out.join("snapshots").join(s.file_name()).display());
    }
    Ok(())
}

fn train_refiner(mut cfg: RunConfig, a: TrainRefineArgs) -> CliResult<()> {
    let (_, slices) = load_data(&cfg, &a.train.data)?;
    let r = &mut cfg.refinegan;
    r.net.input_size = frame_size(&slices)?;
    if let Some(s) = a.train.steps {
        r.steps = s;
    }
    if let Some(s) = a.train.snapshot_every {
        r.snapshot_every = s;
    }
    if let Some(s) = cfg.seed {
        r.seed = s;
    }
    let (real, free) = split_scar(&slices);
    let path = cfg.resolve(&a.mask_snapshot);
    let mask = if path.is_dir() {
        let probes: Vec<SegMask> = free.iter().take(cfg.selection.probes).map(|s| s.mask.clone()).collect();
        let chosen = select_snapshots(&load_snapshots(&path)?, 1, &probes)?.chosen.remove(0);
        log::info!("heuristic inputs shaped by {}", chosen.id());
        chosen
    } else {
        WeightSnapshot::load(&path)?
    };
    let inputs = heuristic_inputs(&free, &mask, &cfg.simulation.heuristic, cfg.refinegan.seed)?;
    let reals: Vec<Vec<f32>> = real.iter().map(|s| normalize(&s.image).0).collect();
    let out = cfg.resolve(&a.train.out);
    cfg.write_resolved(&out)?;
    let run = train_refinegan(&inputs, &reals, &cfg.refinegan)?;
    run.save(&out)?;
    for s in &run.snapshots {
        log::info!("snapshot {}", out.join("snapshots").join(s.file_name()).display());
    }
    Ok(())
}

/// Snapshots for the regime: explicit files, configured ids from a directory,
/// or a diversity-based choice from a directory (recorded under `out`).
fn plan_for(cfg: &RunConfig, a: &SnapshotArgs, no_scar: &[ScanSlice], out: &Path) -> CliResult<AugmentPlan> {
    let k = a.regime.copies();
    let mask_snapshots = match &a.snapshot_dir {
        Some(dir) => {
            let all = load_snapshots(&cfg.resolve(dir))?;
            if !cfg.selection.ids.is_empty() {
                select_by_ids(&all, &cfg.selection.ids)?
            } else if k == 0 || all.len() < k {
                all.into_iter().take(k).collect()
            } else {
                let probes: Vec<SegMask> = no_scar.iter().take(cfg.selection.probes).map(|s| s.mask.clone()).collect();
                let sel = select_snapshots(&all, k, &probes)?;
                std::fs::create_dir_all(out).map_err(|e| CliError::Io(out.to_path_buf(), e))?;
                let sheet = out.join("contact_sheet.pgm");
                sel.write_contact_sheet(&sheet, cfg.selection.probes)?;
                log::info!("wrote {}", sheet.display());
                write_json(
                    &out.join("selection.json"),
                    &serde_json::json!({ "ids": sel.ids, "mean_iou": sel.mean_iou, "coverage": sel.coverage, "chosen": sel.chosen_ids() }),
                )?;
                sel.chosen
            }
        }
        None => a.snapshots.iter().map(|p| load_snapshot(cfg, p)).collect::<CliResult<_>>()?,
    };
    let refiner = a.refiner.as_ref().map(|p| load_snapshot(cfg, p)).transpose()?;
    let params = scargan::augment::SimulationParams { seed: cfg.seed.unwrap_or(cfg.simulation.seed), ..cfg.simulation };
    let plan = AugmentPlan { regime: a.regime, mask_snapshots, refiner, params };
    plan.validate()?;
    Ok(plan)
}

fn simulate(cfg: RunConfig, a: SimArgs, full_set: bool) -> CliResult<()> {
    let (manifest, slices) = load_data(&cfg, &a.data)?;
    let out = cfg.resolve(&a.out);
    let (real, free) = split_scar(&slices);
    let plan = plan_for(&cfg, &a.snapshots, &free, &out)?;
    let set = build_training_set(&real, &free, &plan)?;
    if set.degenerate > 0 {
        log::warn!("{} simulated slices received an empty scar shape", set.degenerate);
    }
    let (slices, entries): (Vec<ScanSlice>, Vec<ManifestEntry>) = set
        .slices
        .into_iter()
        .zip(set.entries)
        .filter(|(_, e)| full_set || e.provenance == Some(Provenance::Simulated))
        .unzip();
    let n = slices.len();
    write_dataset(&out, &slices, entries, &manifest.params, manifest.seed)?;
    log::info!("wrote {n} slices ({} regime {}) to {}", if full_set { "training set" } else { "simulated" }, plan.regime, out.display());
    cfg.write_resolved(&out)?;
    Ok(())
}

fn prediction_mask(p: &SegPrediction) -> SegMask {
    let scar = p.scar();
    let labels = p
        .classes
        .iter()
        .zip(scar)
        .map(|(&c, s)| match c {
            1 => Class::RvEndo,
            2 => Class::LvEndo,
            3 if s => Class::Scar,
            3 => Class::LvMyo,
            _ => Class::Background,
        })
        .collect();
    SegMask::from_labels(p.size, labels)
}

fn save_seg_run(run: &SegRun, dir: &Path) -> CliResult<PathBuf> {
    let path = run.snapshot.save(dir)?;
    log::info!("wrote {}", path.display());
    write_jsonl(&dir.join(format!("{}.log.jsonl", run.snapshot.id())), &run.log)?;
    Ok(path)
}

fn train_seg(mut cfg: RunConfig, a: TrainSegArgs) -> CliResult<()> {
    let (manifest, corpus) = load_data(&cfg, &a.data)?;
    let size = frame_size(&corpus)?;
    let out = cfg.resolve(&a.out);
    if let Some(s) = cfg.seed {
        cfg.finetune.seed = s;
        cfg.cv.fold_seed = s;
    }
    if let Some(k) = a.folds {
        cfg.cv.fold_count = k;
    }
    if let Some(t) = a.folds_parallel {
        cfg.cv.threads = t;
    }
    if let Some(s) = a.steps {
        cfg.finetune.steps = s;
    }
    if let Some(s) = a.pretrain_steps {
        cfg.pretrain.train.steps = s;
    }
    cfg.finetune.net.input_size = size;
    cfg.pretrain.train.net.input_size = size;
    let (_, free) = split_scar(&corpus);
    let plan = plan_for(&cfg, &a.snapshots, &free, &out)?;
    cfg.write_resolved(&out)?;

    let pretrained = match &a.pretrained {
        Some(p) => load_snapshot(&cfg, p)?,
        None => {
            let phantoms = generate_corpus(&CorpusConfig {
                n_slices: cfg.pretrain.n_slices,
                params: PhantomParams { scar_contrast: false, ..manifest.params.clone() },
                seed: cfg.pretrain.seed,
                ..CorpusConfig::default()
            })?;
            let run = pretrain(&phantoms, &cfg.pretrain.train)?;
            save_seg_run(&run, &out.join("pretrain"))?;
            run.snapshot
        }
    };
    let cv = cross_validate(&corpus, &plan, &pretrained, &cfg.finetune, &cfg.cv)?;
    write_json(&out.join("folds.json"), &cv.folds)?;
    let mut pred_slices = Vec::new();
    let mut pred_entries = Vec::new();
    for (fold, snapshot) in cv.snapshots.iter().enumerate() {
        let path = snapshot.save(&out.join("snapshots"))?;
        log::info!("wrote {}", path.display());
        let mut seg = Segmenter::new(snapshot)?;
        for s in corpus.iter().filter(|s| cv.folds.fold_of(&s.patient_id) == Some(fold)) {
            let mask = prediction_mask(&seg.predict(&s.image)?);
            let has_scar = mask.has(Class::Scar);
            pred_entries.push(ManifestEntry { has_scar, ..ManifestEntry::of(s) });
            pred_slices.push(ScanSlice { mask, has_scar, ..s.clone() });
        }
    }
    write_dataset(&out.join("predictions"), &pred_slices, pred_entries, &manifest.params, manifest.seed)?;
    log::info!("wrote {}", out.join("predictions").display());
    write_json(&out.join("metrics.json"), &cv.metrics)?;
    for m in &cv.metrics {
        log::info!(
            "fold {} regime {}: dice endo {:.3} epi {:.3}, scar in myo {:.1}%, in endo {:.1}%",
            m.fold,
            m.regime,
            m.dice_endo,
            m.dice_epi,
            m.pct_scar_in_myo,
            m.pct_scar_in_endo
        );
    }
    Ok(())
}

fn read_fold_metrics(cfg: &RunConfig, p: &Path) -> CliResult<Vec<FoldMetrics>> {
    let p = cfg.resolve(p);
    let file = if p.is_dir() { p.join("metrics.json") } else { p };
    let text = std::fs::read_to_string(&file).map_err(|e| CliError::Io(file.clone(), e))?;
    serde_json::from_str(&text).map_err(|source| CliError::Core(scargan::Error::Json { path: file, source }))
}

fn evaluate(cfg: RunConfig, a: EvaluateArgs) -> CliResult<()> {
    if let (Some(pred), Some(gt)) = (&a.pred, &a.gt) {
        let (_, preds) = load_data(&cfg, pred)?;
        let (_, truth) = load_data(&cfg, gt)?;
        let by_id: std::collections::HashMap<&str, &ScanSlice> = preds.iter().map(|s| (s.slice_id.as_str(), s)).collect();
        let mut score = SegScore::default();
        let mut seen = 0;
        for g in &truth {
            let Some(p) = by_id.get(g.slice_id.as_str()) else { continue };
            seen += 1;
            let endo = p.mask.indicator(Class::LvEndo);
            let epi = p.mask.union(&[Class::LvEndo, Class::LvMyo, Class::Scar]);
            score.add(g, &endo, &epi)?;
        }
        if seen == 0 {
            return Err(CliError::Core(scargan::Error::Infeasible("no predicted slice matches a ground-truth slice id".into())));
        }
        if seen < preds.len() {
            log::warn!("{} predicted slices have no ground truth", preds.len() - seen);
        }
        let out = a.out.map(|o| cfg.resolve(&o)).unwrap_or_else(|| cfg.resolve(pred).join("evaluation.json"));
        return write_json(&out, &score.finish());
    }
    let mut all = Vec::new();
    for p in &a.folds {
        all.extend(read_fold_metrics(&cfg, p)?);
    }
    let reports = report_table(&all);
    println!("{}", render_report(&reports));
    let out = cfg.resolve(a.out.as_deref().expect("clap requires --out with --folds"));
    write_json(&out, &reports)
}

fn study_serve(cfg: RunConfig, a: StudyServeArgs) -> CliResult<()> {
    let addr = a.addr.unwrap_or_else(|| cfg.study.addr.clone());
    let addr: std::net::SocketAddr = addr.parse().map_err(|e| CliError::Usage(format!("bad address {addr}: {e}")))?;
    if a.admin_token.is_empty() {
        return Err(CliError::Usage("the admin token must not be empty".into()));
    }
    let store = StudyStore::open(cfg.resolve(&a.root))?;
    let state = study_service::AppState::new(store, a.admin_token);
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Io(PathBuf::from("tokio runtime"), e))?;
    rt.block_on(study_service::serve(addr, state)).map_err(|e| CliError::Io(PathBuf::from(addr.to_string()), e))
}

fn study_stats(cfg: RunConfig, a: StudyStatsArgs) -> CliResult<()> {
    let store = StudyStore::open(cfg.resolve(&a.root))?;
    let stats = store.stats_from_log(&a.session, a.partial)?;
    for r in &stats.raters {
        log::info!("{r:?}");
    }
    match a.out {
        Some(p) => write_json(&cfg.resolve(&p), &stats),
        None => {
            println!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
            Ok(())
        }
    }
}
