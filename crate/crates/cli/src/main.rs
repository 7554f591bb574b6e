//! `skyfit`: simulate scenes, fit them with VI and MCMC, and score the fits
//! against the truth. Every verb works inside a run directory.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use skyfit_core::harness::{
    calibration, calibration_inputs, detect, read_json, roc_auc, run_mcmc, run_vi, score, timing_report,
    write_calibration_csv, write_json, write_roc_csv, write_scores_csv, CalibrationTable, Field, Manifest, RocCurve,
    RunConfig, ScoreTable,
};
use skyfit_core::kv::KeyValues;
use skyfit_core::model::ProfileTable;
use skyfit_core::posterior::{read_jsonl, write_jsonl, PosteriorSummary};
use skyfit_core::priors::PriorParams;
use skyfit_core::simulator::{write_catalog, Scene};

const SCENE_DIR: &str = "scene";
const PRIOR_FILE: &str = "prior.txt";
const DETECTIONS_FILE: &str = "detections.csv";
const VI_FILE: &str = "posterior_vi.jsonl";
const MCMC_FILE: &str = "posterior_mcmc.jsonl";
const FIT_REPORT_FILE: &str = "fit_report.json";
const SAMPLE_REPORT_FILE: &str = "sample_report.json";
const SCORES_FILE: &str = "scores.csv";
const SCORES_JSON: &str = "scores.json";
const ROC_FILE: &str = "roc.csv";
const CALIBRATION_FILE: &str = "calibration.csv";
const TIMING_FILE: &str = "timing.json";

#[derive(Parser)]
#[command(
    name = "skyfit",
    version,
    about = "Probabilistic cataloging of synthetic astronomical images"
)]
struct Cli {
    /// Seed for the scene, the sampler and a random visit order.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// File of `key = value` lines overriding the run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Order {
    RoundRobin,
    Random,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a catalog from the prior and render its images.
    Simulate {
        #[arg(long)]
        run: PathBuf,
        /// Prior in `key = value` form; the built-in desk prior otherwise.
        #[arg(long)]
        prior: Option<PathBuf>,
    },
    /// Variational fit of the detected catalog.
    FitVi {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        passes: Option<usize>,
        #[arg(long, value_enum)]
        order: Option<Order>,
    },
    /// Per-source AIS classification and slice sampling of the detected catalog.
    FitMcmc {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        sweeps: Option<usize>,
    },
    /// Match fits to the truth; write per-field errors and ROC curves.
    Score {
        #[arg(long)]
        run: PathBuf,
        /// Matching radius in pixels.
        #[arg(long)]
        radius: Option<f64>,
    },
    /// Coverage of the truth by posterior intervals.
    Calibrate {
        #[arg(long)]
        run: PathBuf,
    },
    /// Timing comparison of the two fits and a printed summary.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

/// Layers the manifest configuration (if any), the `--config` file and
/// `--seed`.
fn effective_config(cli: &Cli, base: Option<&Manifest>) -> Result<RunConfig> {
    let mut kv = KeyValues::default();
    if let Some(m) = base {
        for (k, v) in &m.config {
            kv.push(k.clone(), v);
        }
    }
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        for (k, v) in KeyValues::parse(&text)?.to_map() {
            kv.push(k, v);
        }
    }
    let mut config = RunConfig::from_key_values(&kv)?;
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    Ok(config)
}

fn load_manifest(run: &Path) -> Result<Manifest> {
    Manifest::load(run).with_context(|| format!("{} is not a run directory; run `simulate` first", run.display()))
}

fn load_posteriors(path: &Path) -> Result<Vec<PosteriorSummary>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_jsonl(BufReader::new(f))?)
}

fn optional_posteriors(run: &Path, name: &str) -> Result<Option<Vec<PosteriorSummary>>> {
    let path = run.join(name);
    if path.exists() {
        Ok(Some(load_posteriors(&path)?))
    } else {
        Ok(None)
    }
}

struct Loaded {
    manifest: Manifest,
    config: RunConfig,
    scene: Scene,
    prior: PriorParams,
}

fn load_run(cli: &Cli, run: &Path) -> Result<Loaded> {
    let manifest = load_manifest(run)?;
    let config = effective_config(cli, Some(&manifest))?;
    let scene = Scene::load(&run.join(SCENE_DIR))?;
    let prior = PriorParams::load(&run.join(PRIOR_FILE))?;
    Ok(Loaded {
        manifest,
        config,
        scene,
        prior,
    })
}

fn write_detections(run: &Path, scene: &Scene, config: &RunConfig) -> Result<Vec<skyfit_core::model::SourceParams>> {
    let init = detect(&scene.images, config)?;
    let num_colors = scene.images.len().saturating_sub(1);
    write_catalog(fs::File::create(run.join(DETECTIONS_FILE))?, &init, num_colors)?;
    Ok(init)
}

fn simulate(cli: &Cli, run: &Path, prior_path: Option<&Path>) -> Result<()> {
    let start = Instant::now();
    let config = effective_config(cli, None)?;
    let prior = match prior_path {
        Some(p) => PriorParams::load(p)?,
        None => PriorParams::desk_default(config.scene.bands),
    };
    if prior.num_colors() + 1 != config.scene.bands {
        bail!(
            "prior has {} colors but the scene has {} bands",
            prior.num_colors(),
            config.scene.bands
        );
    }
    let table = ProfileTable::standard();
    let scene = Scene::simulate(&config.scene, &prior, &table)?;
    fs::create_dir_all(run)?;
    scene.save(&run.join(SCENE_DIR))?;
    prior.save(&run.join(PRIOR_FILE))?;
    let mut manifest = Manifest::new(&config, prior_path.map(|p| p.display().to_string()));
    manifest.record(
        "simulate",
        &config,
        &[SCENE_DIR, PRIOR_FILE],
        start.elapsed().as_secs_f64(),
    );
    manifest.save(run)?;
    println!(
        "{} sources in {} bands written to {}",
        scene.catalog.len(),
        scene.images.len(),
        run.display()
    );
    Ok(())
}

fn fit_vi(cli: &Cli, run: &Path, threads: Option<usize>, passes: Option<usize>, order: Option<Order>) -> Result<()> {
    let start = Instant::now();
    let mut l = load_run(cli, run)?;
    if let Some(t) = threads {
        l.config.threads = t;
    }
    if let Some(p) = passes {
        l.config.passes = p;
    }
    if let Some(o) = order {
        l.config.random_order = matches!(o, Order::Random);
    }
    l.config.validate()?;
    let init = write_detections(run, &l.scene, &l.config)?;
    let fit = run_vi(&l.scene.images, &init, &l.prior, &ProfileTable::standard(), &l.config)?;
    write_jsonl(fs::File::create(run.join(VI_FILE))?, &fit.summaries)?;
    write_json(&run.join(FIT_REPORT_FILE), &fit.report)?;
    let failed = fit.report.sources.iter().filter(|s| s.error.is_some()).count();
    let elbo = fit.report.global_elbo.last().copied().unwrap_or(f64::NAN);
    l.manifest.record(
        "fit-vi",
        &l.config,
        &[DETECTIONS_FILE, VI_FILE, FIT_REPORT_FILE],
        start.elapsed().as_secs_f64(),
    );
    l.manifest.save(run)?;
    println!(
        "VI: {} sources, {} failed, global ELBO {elbo:.3}, {:.2} s on {} threads",
        init.len(),
        failed,
        fit.report.wall_seconds,
        l.config.threads
    );
    if fit.report.global_elbo.windows(2).any(|w| w[1] < w[0]) {
        bail!("global ELBO decreased across passes: {:?}", fit.report.global_elbo);
    }
    Ok(())
}

fn fit_mcmc(cli: &Cli, run: &Path, threads: Option<usize>, sweeps: Option<usize>) -> Result<()> {
    let start = Instant::now();
    let mut l = load_run(cli, run)?;
    if let Some(t) = threads {
        l.config.threads = t;
    }
    if let Some(s) = sweeps {
        l.config.sweeps = s;
    }
    l.config.validate()?;
    let init = write_detections(run, &l.scene, &l.config)?;
    let fit = run_mcmc(&l.scene.images, &init, &l.prior, &ProfileTable::standard(), &l.config)?;
    write_jsonl(fs::File::create(run.join(MCMC_FILE))?, &fit.summaries)?;
    write_json(&run.join(SAMPLE_REPORT_FILE), &fit.report)?;
    l.manifest.record(
        "fit-mcmc",
        &l.config,
        &[DETECTIONS_FILE, MCMC_FILE, SAMPLE_REPORT_FILE],
        start.elapsed().as_secs_f64(),
    );
    l.manifest.save(run)?;
    let failed = fit.report.errors.iter().filter(|e| e.is_some()).count();
    println!(
        "MCMC: {} sources, {} failed, {:.2} s on {} threads",
        init.len(),
        failed,
        fit.report.wall_seconds,
        l.config.threads
    );
    Ok(())
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ScoreSummary {
    method: String,
    table: ScoreTable,
    auc: Option<f64>,
}

fn score_method(
    name: &str,
    estimates: &[PosteriorSummary],
    scene: &Scene,
    radius: f64,
) -> Result<(ScoreTable, Option<RocCurve>)> {
    let wcs = &scene.images[0].wcs;
    let table = score(estimates, &scene.catalog, wcs, radius).with_context(|| format!("scoring {name}"))?;
    let (p, labels) = table.classification();
    // a single-class match set has no ROC curve; report it as missing
    let roc = roc_auc(&p, &labels).ok();
    Ok((table, roc))
}

fn score_run(cli: &Cli, run: &Path, radius: Option<f64>) -> Result<()> {
    let start = Instant::now();
    let mut l = load_run(cli, run)?;
    if let Some(r) = radius {
        l.config.match_radius = r;
    }
    l.config.validate()?;
    let mut summaries = Vec::new();
    let mut tables: Vec<(&str, ScoreTable)> = Vec::new();
    let mut curves: Vec<(&str, RocCurve)> = Vec::new();
    for (name, file) in [("vi", VI_FILE), ("mcmc", MCMC_FILE)] {
        let Some(est) = optional_posteriors(run, file)? else {
            continue;
        };
        let (table, roc) = score_method(name, &est, &l.scene, l.config.match_radius)?;
        summaries.push(ScoreSummary {
            method: name.into(),
            table: table.clone(),
            auc: roc.as_ref().map(|r| r.auc),
        });
        tables.push((name, table));
        if let Some(r) = roc {
            curves.push((name, r));
        }
    }
    if tables.is_empty() {
        bail!("no posterior files in {}; run fit-vi or fit-mcmc first", run.display());
    }
    let find = |n: &str| tables.iter().find(|(m, _)| *m == n).map(|(_, t)| t);
    write_scores_csv(fs::File::create(run.join(SCORES_FILE))?, find("vi"), find("mcmc"))?;
    let refs: Vec<(&str, &RocCurve)> = curves.iter().map(|(n, c)| (*n, c)).collect();
    write_roc_csv(fs::File::create(run.join(ROC_FILE))?, &refs)?;
    write_json(&run.join(SCORES_JSON), &summaries)?;
    for s in &summaries {
        if s.table.fields.iter().any(|f| f.mae.is_some_and(|m| !(m >= 0.0))) {
            bail!("{}: negative or undefined mean absolute error", s.method);
        }
    }
    l.manifest.record(
        "score",
        &l.config,
        &[SCORES_FILE, ROC_FILE, SCORES_JSON],
        start.elapsed().as_secs_f64(),
    );
    l.manifest.save(run)?;
    for s in &summaries {
        println!(
            "{}: matched {} of {} true sources, {} unmatched estimates, AUC {}",
            s.method,
            s.table.matched,
            s.table.truth_count,
            s.table.unmatched_estimates,
            s.auc.map_or("n/a".into(), |a| format!("{a:.3}"))
        );
    }
    Ok(())
}

fn calibrate_run(cli: &Cli, run: &Path) -> Result<()> {
    let start = Instant::now();
    let mut l = load_run(cli, run)?;
    let mut tables: Vec<(&str, CalibrationTable)> = Vec::new();
    for (name, file) in [("vi", VI_FILE), ("mcmc", MCMC_FILE)] {
        let Some(est) = optional_posteriors(run, file)? else {
            continue;
        };
        let (scores, _) = score_method(name, &est, &l.scene, l.config.match_radius)?;
        let table = calibration(&calibration_inputs(&est, &l.scene.catalog, &scores))?;
        tables.push((name, table));
    }
    if tables.is_empty() {
        bail!("no posterior files in {}; run fit-vi or fit-mcmc first", run.display());
    }
    let refs: Vec<(&str, &CalibrationTable)> = tables.iter().map(|(n, t)| (*n, t)).collect();
    write_calibration_csv(fs::File::create(run.join(CALIBRATION_FILE))?, &refs)?;
    l.manifest.record(
        "calibrate",
        &l.config,
        &[CALIBRATION_FILE],
        start.elapsed().as_secs_f64(),
    );
    l.manifest.save(run)?;
    for (name, t) in &tables {
        for r in &t.rows {
            let p = r.proportions;
            println!("{name} {:<10} {:.2} {:.2} {:.2} {:.2}", r.field, p[0], p[1], p[2], p[3]);
        }
    }
    Ok(())
}

fn report_run(cli: &Cli, run: &Path) -> Result<()> {
    let start = Instant::now();
    let mut l = load_run(cli, run)?;
    let vi = load_posteriors(&run.join(VI_FILE))?;
    let mcmc = load_posteriors(&run.join(MCMC_FILE))?;
    let timing = timing_report(&vi, &mcmc)?;
    write_json(&run.join(TIMING_FILE), &timing)?;
    println!(
        "seconds per source: VI {:.3}, MCMC {:.3} (ratio {:.1})",
        timing.vi_seconds_per_source, timing.mcmc_seconds_per_source, timing.mcmc_to_vi_ratio
    );
    if let Some(r) = timing.mcmc_ess_per_second {
        println!("MCMC effective samples of {} per second: {r:.2}", timing.ess_parameter);
    }
    let scores: Option<Vec<ScoreSummary>> = run
        .join(SCORES_JSON)
        .exists()
        .then(|| read_json(&run.join(SCORES_JSON)))
        .transpose()?;
    if let Some(scores) = scores {
        println!("{:<18} {:>10} {:>10}", "field", "vi", "mcmc");
        let fields = scores
            .first()
            .map(|s| s.table.fields.iter().map(|f| f.field).collect::<Vec<Field>>())
            .unwrap_or_default();
        for f in fields {
            let cell = |m: &str| {
                scores
                    .iter()
                    .find(|s| s.method == m)
                    .and_then(|s| s.table.field(f))
                    .and_then(|x| x.mae)
                    .map_or("-".to_string(), |v| format!("{v:.4}"))
            };
            println!("{:<18} {:>10} {:>10}", f.name(), cell("vi"), cell("mcmc"));
        }
    }
    l.manifest
        .record("report", &l.config, &[TIMING_FILE], start.elapsed().as_secs_f64());
    l.manifest.save(run)?;
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Simulate { run, prior } => simulate(&cli, run, prior.as_deref()),
        Command::FitVi {
            run,
            threads,
            passes,
            order,
        } => fit_vi(&cli, run, *threads, *passes, *order),
        Command::FitMcmc { run, threads, sweeps } => fit_mcmc(&cli, run, *threads, *sweeps),
        Command::Score { run, radius } => score_run(&cli, run, *radius),
        Command::Calibrate { run } => calibrate_run(&cli, run),
        Command::Report { run } => report_run(&cli, run),
    }
}
