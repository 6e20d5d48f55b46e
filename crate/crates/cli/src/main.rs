//! `irscov` command-line front end.
//!
//! Stage commands work inside one output directory and exchange plain CSV
//! and TOML artifacts, so any stage input can come from an external tool.
//!
//! Exit codes: 0 success, 2 usage error, 3 configuration error, 4 missing
//! upstream artifact, 5 I/O or parse error, 6 numerical failure (divergence,
//! domain or selection error, oversized search), 1 anything else.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use irscov::eval::{self, ExperimentConfig, MetricsRecord, Preset, SelectionMode};
use irscov::geostat;
use irscov::measurement::Campaign;
use irscov::nnest::{self, EstimateFiles};
use irscov::optimize;
use irscov::propagation::ChannelModel;
use irscov::scene::{synth_scene, SceneConfig};
use irscov::seed::derive_seed;

#[derive(Parser, Debug)]
#[command(name = "irscov", version, about = "IRS coverage: power-measurement channel estimation and reflection design")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Experiment TOML; unspecified keys take the preset's values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long, global = true, env = "IRSCOV_OUT", default_value = "irscov-out")]
    out: PathBuf,
    /// Overrides the master seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Base configuration when no config file is given.
    #[arg(long, global = true, value_enum, default_value_t = PresetArg::Desk)]
    preset: PresetArg,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Errors only.
    #[arg(short, long, global = true)]
    quiet: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Desk,
    Full,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CampaignKind {
    Initial,
    Estimate,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes `scene.toml` (synthesized, or copied from `scene.file`).
    SynthScene,
    /// Simulates power measurements at a set of grids.
    Campaign {
        #[arg(long, value_enum)]
        kind: CampaignKind,
        /// Grid manifest; default `selected.csv` for estimate campaigns and
        /// a fresh uniform draw of K1 grids for initial ones.
        #[arg(long)]
        grids: Option<PathBuf>,
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Variogram analysis of the initial campaign and typical-grid selection.
    Select {
        #[arg(long)]
        measurements: Option<PathBuf>,
        #[arg(long)]
        patterns: Option<PathBuf>,
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Trains per-grid channel estimates from measurements; needs no scene.
    Estimate {
        #[arg(long)]
        measurements: Option<PathBuf>,
        #[arg(long)]
        patterns: Option<PathBuf>,
    },
    /// Designs reflection patterns from estimates and measurements.
    Optimize {
        #[arg(long)]
        measurements: Option<PathBuf>,
        #[arg(long)]
        patterns: Option<PathBuf>,
    },
    /// Scores designed patterns against the scene's true channels.
    Evaluate {
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        results: Option<PathBuf>,
    },
    /// All stages for every repetition of the config.
    Pipeline,
}

#[derive(Debug)]
enum Failure {
    Missing(PathBuf, &'static str),
    Core(irscov::Error),
    Other(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Missing(..) => 4,
            Failure::Core(e) => core_code(e),
            Failure::Other(_) => 1,
        }
    }
}

fn core_code(e: &irscov::Error) -> u8 {
    use irscov::Error as E;
    match e {
        E::Config(_) => 3,
        E::Parse { .. } | E::Io { .. } => 5,
        E::Domain(_) | E::Selection(_) | E::Divergence { .. } | E::TooLarge { .. } => 6,
        E::Stage { source, .. } => core_code(source),
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Missing(p, by) => write!(f, "missing upstream artifact {} (produced by `irscov {by}`)", p.display()),
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Other(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<irscov::Error> for Failure {
    fn from(e: irscov::Error) -> Self {
        Failure::Core(e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn require(path: PathBuf, producer: &'static str) -> Outcome<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Failure::Missing(path, producer))
    }
}

fn load_config(g: &Global) -> Outcome<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::preset(match g.preset {
            PresetArg::Desk => Preset::Desk,
            PresetArg::Full => Preset::Full,
        }),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Workspace<'a> {
    dir: &'a Path,
}

impl Workspace<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn or(&self, given: &Option<PathBuf>, name: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.path(name))
    }

    fn estimate_files(&self) -> [PathBuf; 3] {
        [
            self.path("estimate_weights.csv"),
            self.path("estimate_summary.csv"),
            self.path("estimate_trace.csv"),
        ]
    }
}

fn files(p: &[PathBuf; 3]) -> EstimateFiles<'_> {
    EstimateFiles {
        weights: &p[0],
        summary: &p[1],
        trace: &p[2],
    }
}

fn load_scene(ws: &Workspace<'_>, given: &Option<PathBuf>) -> Outcome<SceneConfig<f64>> {
    let path = require(ws.or(given, "scene.toml"), "synth-scene")?;
    Ok(SceneConfig::load(&path)?)
}

fn load_campaign(ws: &Workspace<'_>, cfg: &ExperimentConfig, m: &Option<PathBuf>, p: &Option<PathBuf>, prefix: &str) -> Outcome<Campaign<f64>> {
    let producer = "campaign";
    let mp = require(ws.or(m, &format!("{prefix}measurements.csv")), producer)?;
    let pp = require(ws.or(p, &format!("{prefix}patterns.csv")), producer)?;
    Ok(Campaign::load(&mp, &pp, cfg.campaign.alphabet()?)?)
}

fn synth_stage(ws: &Workspace<'_>, cfg: &ExperimentConfig) -> Outcome<()> {
    let scene = match &cfg.scene.file {
        Some(p) => SceneConfig::load(p)?,
        None => synth_scene(derive_seed(cfg.seed, "scene", &[]), &cfg.scene.synth).map_err(|e| e.in_stage("scene"))?,
    };
    let path = ws.path("scene.toml");
    scene.save(&path)?;
    log::info!("scene with {} grids and {} elements -> {}", scene.grid_count()?, scene.elements(), path.display());
    Ok(())
}

fn campaign_stage(ws: &Workspace<'_>, cfg: &ExperimentConfig, kind: CampaignKind, grids: &Option<PathBuf>, scene: &Option<PathBuf>) -> Outcome<()> {
    let model = ChannelModel::new(load_scene(ws, scene)?)?;
    let (camp, prefix) = match kind {
        CampaignKind::Initial => {
            let k1 = match grids {
                Some(p) => geostat::load_manifest(&require(p.clone(), "select")?)?,
                None => eval::sample_grids(cfg.seed, "k1", model.grid_count(), cfg.selection.k1)?,
            };
            geostat::save_manifest(&ws.path("k1.csv"), &k1)?;
            (eval::initial_campaign(cfg, cfg.seed, &model, &k1).map_err(|e| e.in_stage("initial campaign"))?, "initial_")
        }
        CampaignKind::Estimate => {
            let path = require(ws.or(grids, "selected.csv"), "select")?;
            let k2 = geostat::load_manifest(&path)?;
            (eval::estimation_campaign(cfg, cfg.seed, &model, &k2).map_err(|e| e.in_stage("estimation campaign"))?, "")
        }
    };
    let (m, p) = (ws.path(&format!("{prefix}measurements.csv")), ws.path(&format!("{prefix}patterns.csv")));
    camp.save(&m, &p)?;
    log::info!("{} records at {} grids -> {}", camp.records.len(), camp.profiles.len(), m.display());
    Ok(())
}

fn select_stage(ws: &Workspace<'_>, cfg: &ExperimentConfig, m: &Option<PathBuf>, p: &Option<PathBuf>, scene: &Option<PathBuf>) -> Outcome<()> {
    let scene = load_scene(ws, scene)?;
    let k = scene.grid_count()?;
    let selected = match cfg.selection.mode {
        SelectionMode::All => (0..k).collect(),
        SelectionMode::Random => {
            let n = cfg.selection.k2.context("selection.k2 is required in random mode")?;
            eval::sample_grids(cfg.seed, "random-k2", k, n)?
        }
        SelectionMode::Proposed => {
            let initial = load_campaign(ws, cfg, m, p, "initial_")?;
            let grids = scene.grids()?;
            let width = cfg.selection.bin_width.unwrap_or(scene.region.d0);
            geostat::empirical_variogram(&initial.profiles, &grids, width)?.save(&ws.path("variogram.csv"))?;
            let r = eval::select_from(cfg, cfg.seed, &scene, &initial).map_err(|e| e.in_stage("selection"))?;
            r.save_subregions(&ws.path("subregions.csv"))?;
            let mut fit = String::from("nugget,partial_sill,range,c_star,uncorrelated\n");
            if let Some(g) = &r.global {
                writeln!(fit, "{},{},{},{},{}", g.nugget, g.partial_sill, g.range, g.c_star, g.uncorrelated).expect("string write");
            }
            let fit_path = ws.path("variogram_fit.csv");
            std::fs::write(&fit_path, fit).with_context(|| fit_path.display().to_string())?;
            r.selected
        }
    };
    geostat::save_manifest(&ws.path("selected.csv"), &selected)?;
    log::info!("{} typical grids selected", selected.len());
    Ok(())
}

fn estimate_stage(ws: &Workspace<'_>, cfg: &ExperimentConfig, m: &Option<PathBuf>, p: &Option<PathBuf>) -> Outcome<()> {
    let camp = load_campaign(ws, cfg, m, p, "")?;
    let est = eval::training_stage(cfg, cfg.seed, &camp).map_err(|e| e.in_stage("training"))?;
    let paths = ws.estimate_files();
    nnest::save_estimates::<f64>(&files(&paths), &est, None)?;
    log::info!("{} grids estimated -> {}", est.len(), paths[0].display());
    Ok(())
}

fn optimize_stage(ws: &Workspace<'_>, cfg: &ExperimentConfig, m: &Option<PathBuf>, p: &Option<PathBuf>) -> Outcome<()> {
    let camp = load_campaign(ws, cfg, m, p, "")?;
    let paths = ws.estimate_files();
    require(paths[0].clone(), "estimate")?;
    require(paths[1].clone(), "estimate")?;
    let est = nnest::load_estimates(&files(&paths))?;
    let results = eval::optimization_stage(cfg, cfg.seed, &camp, &est).map_err(|e| e.in_stage("optimization"))?;
    let path = ws.path("results.csv");
    optimize::save_results(&path, &results)?;
    log::info!("{} designs -> {}", results.len(), path.display());
    Ok(())
}

fn evaluate_stage(ws: &Workspace<'_>, cfg: &ExperimentConfig, scene: &Option<PathBuf>, results: &Option<PathBuf>) -> Outcome<()> {
    let model = ChannelModel::new(load_scene(ws, scene)?)?;
    let truth = model.ground_truth(cfg.campaign.p(), cfg.campaign.sigma2());
    let alphabet = cfg.campaign.alphabet()?;
    let rpath = require(ws.or(results, "results.csv"), "optimize")?;
    let mut designs = optimize::load_results::<f64>(&rpath, alphabet)?;
    designs.retain(|r| r.method != optimize::Method::UpperBound);
    let paths = ws.estimate_files();
    let est = if paths[1].exists() {
        nnest::load_estimates(&files(&paths))?
    } else {
        BTreeMap::new()
    };
    let starts: Vec<_> = designs.iter().map(|r| r.pattern.clone()).collect();
    designs.push(eval::upper_bound(cfg, cfg.seed, &truth, alphabet, &starts).map_err(|e| e.in_stage("upper bound"))?);
    let methods = designs
        .iter()
        .map(|r| eval::method_metrics(&truth, r))
        .collect::<irscov::Result<Vec<_>>>()?;
    let per_grid = eval::nmse_per_grid(&est, &truth)?;
    if !est.is_empty() {
        nnest::save_estimates(&files(&paths), &est, Some(&per_grid))?;
    }
    let k1 = match ws.path("k1.csv") {
        p if p.exists() => geostat::load_manifest(&p)?,
        _ => Vec::new(),
    };
    let digest = cfg.digest()?;
    let record = MetricsRecord {
        seed: cfg.seed,
        digest: digest.clone(),
        k1,
        k2: est.keys().copied().collect(),
        nmse: eval::nmse(&est, &truth)?,
        methods,
    };
    for m in &record.methods {
        log::info!("{:<10} {:8.3} dB", m.method.to_string(), m.snr_db);
    }
    let out = eval::write_outputs(ws.dir, &digest, &[record])?;
    log::info!("metrics -> {}", out.metrics.display());
    Ok(())
}

fn pipeline_stage(ws: &Workspace<'_>, cfg: &ExperimentConfig) -> Outcome<()> {
    let t = Instant::now();
    let records = eval::run_pipeline(cfg)?;
    let elapsed = t.elapsed();
    let digest = cfg.digest()?;
    let out = eval::write_outputs(ws.dir, &digest, &records)?;
    let timing = ws.path("timing.csv");
    let line = format!(
        "digest,repetitions,threads,wall_seconds\n{digest},{},{},{}\n",
        records.len(),
        rayon::current_num_threads(),
        elapsed.as_secs_f64()
    );
    std::fs::write(&timing, line).with_context(|| timing.display().to_string())?;
    for r in &records {
        let snrs: Vec<String> = r.methods.iter().map(|m| format!("{} {:.2}", m.method, m.snr_db)).collect();
        log::info!("seed {}: K2 = {}, {}", r.seed, r.k2.len(), snrs.join(", "));
    }
    log::info!("metrics -> {}", out.metrics.display());
    Ok(())
}

fn run(cli: &Cli) -> Outcome<()> {
    let cfg = load_config(&cli.global)?;
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("thread pool")?;
    }
    let dir = &cli.global.out;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let ws = Workspace { dir };
    let resolved = ws.path("config.toml");
    std::fs::write(&resolved, cfg.to_toml()?).with_context(|| resolved.display().to_string())?;
    match &cli.command {
        Command::SynthScene => synth_stage(&ws, &cfg),
        Command::Campaign { kind, grids, scene } => campaign_stage(&ws, &cfg, *kind, grids, scene),
        Command::Select {
            measurements,
            patterns,
            scene,
        } => select_stage(&ws, &cfg, measurements, patterns, scene),
        Command::Estimate { measurements, patterns } => estimate_stage(&ws, &cfg, measurements, patterns),
        Command::Optimize { measurements, patterns } => optimize_stage(&ws, &cfg, measurements, patterns),
        Command::Evaluate { scene, results } => evaluate_stage(&ws, &cfg, scene, results),
        Command::Pipeline => pipeline_stage(&ws, &cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.quiet {
        log::LevelFilter::Error
    } else {
        match cli.global.verbose {
            0 => log::LevelFilter::Info,
            1 => log::LevelFilter::Debug,
            _ => log::LevelFilter::Trace,
        }
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("irscov: {e}");
            ExitCode::from(e.code())
        }
    }
}
