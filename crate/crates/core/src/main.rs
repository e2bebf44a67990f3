use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde::Serialize;

use quadric_landmarks::assoc::TrackStore;
use quadric_landmarks::bench::log::{DetectionLog, LogError};
use quadric_landmarks::bench::metrics::{aggregate, write_metrics_csv, write_trials_csv, TrialMetrics, TrialResult};
use quadric_landmarks::bench::pipeline::{object_map_json, run_pipelines, ObjectMap, PipelineError};
use quadric_landmarks::bench::{ab_results, refinement_ab, selftest, BenchConfig};
use quadric_landmarks::geometry::EllipsoidParams;
use quadric_landmarks::init::InitMethod;
use quadric_landmarks::sim::{
    crossing_scenario, dynamic_scenario, evaluate, run_sweep, trial_input, trial_keys, NoiseSpec, NoiseType, Scenario,
};

#[derive(Parser)]
#[command(
    name = "quadric-bench",
    version,
    about = "Ellipsoid landmark initialization, refinement and association benchmarks"
)]
struct Cli {
    /// Master seed; overrides the configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration file; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Comma-separated initializers: tri+yaw, tri, q-slam.
    #[arg(long, global = true, value_delimiter = ',')]
    methods: Option<Vec<InitMethod>>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Noise sweeps over the simulated scene.
    Simulate {
        /// Also write every trial as a detection log into this directory.
        #[arg(long)]
        export_logs: Option<PathBuf>,
    },
    /// Compare the initializers on one simulated trial.
    Init {
        #[arg(long, default_value_t = 0)]
        object: u64,
        #[arg(long, default_value_t = 0)]
        trial_seed: u64,
        #[arg(long, default_value = "bbox")]
        noise_type: NoiseType,
        #[arg(long, default_value_t = 0.0)]
        level: f64,
    },
    /// Initialization with and without refinement over the simulated trials.
    Optimize,
    /// Run the scripted tracking scenarios.
    Associate,
    /// Process a detection log, or every `.json` log in a directory.
    Pipeline {
        #[arg(long)]
        log: PathBuf,
    },
    /// Randomized oracle checks.
    Selftest {
        #[arg(long, default_value_t = 1000)]
        cases: usize,
    },
}

enum Failure {
    Config(String),
    Ingest(String),
    Internal(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Internal(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Internal(e.into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("configuration error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Ingest(m)) => {
            eprintln!("ingestion error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn load_config(cli: &Cli) -> Result<BenchConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?
        }
        None => BenchConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.simulation.scene.master_seed = seed;
    }
    if let Some(methods) = &cli.methods {
        cfg.pipeline.methods = methods.clone();
    }
    cfg.validate().map_err(Failure::Config)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Failure::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("starting worker threads")?;
    }
    let cfg = load_config(&cli)?;
    let methods = cli.methods.clone().unwrap_or_else(|| InitMethod::ALL.to_vec());
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    write(&cli.out.join("config.json"), &to_json(&cfg))?;
    let seed = cfg.simulation.scene.master_seed;
    match &cli.command {
        Command::Simulate { export_logs } => simulate(&cfg, &methods, &cli.out, export_logs.as_deref()),
        Command::Init {
            object,
            trial_seed,
            noise_type,
            level,
        } => init(&cfg, &methods, &cli.out, *object, *trial_seed, *noise_type, *level),
        Command::Optimize => optimize(&cfg, &cli.out),
        Command::Associate => associate(&cfg, seed, &cli.out),
        Command::Pipeline { log } => pipeline(&cfg, log, &cli.out),
        Command::Selftest { cases } => run_selftest(*cases, seed, &cli.out),
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("value serializes") + "\n"
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_results(out: &Path, results: &[TrialResult]) -> Result<(), Failure> {
    let rows = aggregate(results).context("no results to write")?;
    let mut buf = Vec::new();
    write_metrics_csv(&rows, &mut buf).context("formatting metrics")?;
    fs::write(out.join("metrics.csv"), &buf).context("writing metrics.csv")?;
    let mut buf = Vec::new();
    write_trials_csv(results, &mut buf).context("formatting trials")?;
    fs::write(out.join("trials.csv"), &buf).context("writing trials.csv")?;
    Ok(())
}

fn simulate(cfg: &BenchConfig, methods: &[InitMethod], out: &Path, export: Option<&Path>) -> Result<(), Failure> {
    let results = run_sweep(&cfg.simulation, methods).map_err(|e| Failure::Config(e.to_string()))?;
    write_results(out, &results)?;
    if let Some(dir) = export {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (i, key) in trial_keys(&cfg.simulation).iter().enumerate() {
            match trial_input(&cfg.simulation.scene, &key.noise(), key.object, key.seed) {
                Ok(input) => {
                    let log = DetectionLog::from_trial(&input, key.noise_type, &key.noise(), key.object, key.seed);
                    write(&dir.join(format!("{i:06}.json")), &(log.to_json() + "\n"))?;
                }
                Err(e) => log::warn!("trial {i} not exported: {e}"),
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct InitEntry {
    method: String,
    ellipsoid: Option<EllipsoidParams>,
    metrics: Option<TrialMetrics>,
    error: Option<String>,
}

#[derive(Serialize)]
struct InitReport {
    object: u64,
    seed: u64,
    noise_type: NoiseType,
    level: f64,
    ground_truth: EllipsoidParams,
    methods: Vec<InitEntry>,
}

fn init(
    cfg: &BenchConfig,
    methods: &[InitMethod],
    out: &Path,
    object: u64,
    seed: u64,
    noise_type: NoiseType,
    level: f64,
) -> Result<(), Failure> {
    let noise = NoiseSpec::single(noise_type, level);
    let input = trial_input(&cfg.simulation.scene, &noise, object, seed).map_err(|e| Failure::Config(e.to_string()))?;
    let obs = input.observations();
    let entries = methods
        .iter()
        .map(|m| {
            let r = m.run(&obs, &cfg.simulation.init);
            InitEntry {
                method: m.name().to_string(),
                ellipsoid: r.as_ref().ok().copied(),
                metrics: r.as_ref().ok().map(|e| evaluate(&input.scene, e)),
                error: r.err().map(|e| e.to_string()),
            }
        })
        .collect();
    let report = InitReport {
        object,
        seed,
        noise_type,
        level,
        ground_truth: input.scene.gt,
        methods: entries,
    };
    write(&out.join("init.json"), &to_json(&report))
}

fn optimize(cfg: &BenchConfig, out: &Path) -> Result<(), Failure> {
    let trials = refinement_ab(cfg).map_err(|e| Failure::Config(e.to_string()))?;
    write_results(out, &ab_results(cfg, &trials))
}

#[derive(Serialize)]
struct Assigned {
    track: u64,
    detection: usize,
    gt_id: u64,
}

#[derive(Serialize)]
struct TrackSummary {
    id: u64,
    class: String,
    gt_id: Option<u64>,
    dynamic: bool,
    n_views: usize,
}

#[derive(Serialize)]
struct ScenarioReport {
    scenario: String,
    frames: Vec<Vec<Assigned>>,
    tracks: Vec<TrackSummary>,
    /// Consecutive assignments of one ground-truth object to different tracks.
    identity_switches: usize,
    objects: ObjectMap,
}

fn associate(cfg: &BenchConfig, seed: u64, out: &Path) -> Result<(), Failure> {
    let mut reports = Vec::new();
    for name in ["crossing", "dynamic"] {
        let built = if name == "crossing" {
            crossing_scenario(seed)
        } else {
            dynamic_scenario(seed)
        };
        let scenario: Scenario = built.with_context(|| format!("building {name} scenario"))?;
        let mut store = TrackStore::new();
        let mut frames = Vec::new();
        let mut last: BTreeMap<u64, u64> = BTreeMap::new();
        let mut votes: BTreeMap<u64, BTreeMap<u64, usize>> = BTreeMap::new();
        let mut switches = 0;
        for frame in &scenario.frames {
            let r = store.associate(&frame.detections, &frame.view, &cfg.pipeline.assoc, &cfg.pipeline.init);
            let mut assigned: Vec<Assigned> = r
                .matches
                .iter()
                .chain(&r.new_tracks)
                .map(|&(track, detection)| Assigned {
                    track,
                    detection,
                    gt_id: frame.gt_ids[detection],
                })
                .collect();
            assigned.sort_by_key(|a| a.detection);
            for a in &assigned {
                if last.insert(a.gt_id, a.track).is_some_and(|t| t != a.track) {
                    switches += 1;
                }
                *votes.entry(a.track).or_default().entry(a.gt_id).or_default() += 1;
            }
            frames.push(assigned);
        }
        let tracks = store
            .tracks()
            .iter()
            .map(|t| TrackSummary {
                id: t.id,
                class: t.class.clone(),
                gt_id: votes.get(&t.id).and_then(|v| {
                    let best = v.values().max()?;
                    v.iter().find(|(_, n)| *n == best).map(|(id, _)| *id)
                }),
                dynamic: t.dynamic,
                n_views: t.observations.len(),
            })
            .collect();
        let log = DetectionLog::from_scenario(&scenario);
        let mut pcfg = cfg.pipeline.clone();
        pcfg.methods.truncate(1);
        let mapped = run_pipelines(std::slice::from_ref(&log), &pcfg)
            .pop()
            .expect("one log")
            .context("mapping scenario")?;
        reports.push(ScenarioReport {
            scenario: name.to_string(),
            frames,
            tracks,
            identity_switches: switches,
            objects: mapped.maps.into_iter().next().expect("one method"),
        });
    }
    write(&out.join("associate.json"), &to_json(&reports))
}

fn read_logs(path: &Path) -> Result<Vec<(String, DetectionLog)>, Failure> {
    let ingest = |e: LogError| Failure::Ingest(e.to_string());
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Failure::Ingest(format!("{}: {e}", path.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Failure::Ingest(format!("{}: no .json logs", path.display())));
        }
        files
            .iter()
            .map(|f| {
                let name = f
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                Ok((name, DetectionLog::read(f).map_err(ingest)?))
            })
            .collect()
    } else {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(vec![(name, DetectionLog::read(path).map_err(ingest)?)])
    }
}

fn pipeline(cfg: &BenchConfig, path: &Path, out: &Path) -> Result<(), Failure> {
    let named = read_logs(path)?;
    let logs: Vec<DetectionLog> = named.iter().map(|(_, l)| l.clone()).collect();
    let mut results = Vec::new();
    let mut maps = Vec::new();
    for ((name, _), r) in named.iter().zip(run_pipelines(&logs, &cfg.pipeline)) {
        let o = r.map_err(|e| match e {
            PipelineError::InvalidConfig(m) => Failure::Config(m),
            other => Failure::Ingest(format!("{name}: {other}")),
        })?;
        results.extend(o.results);
        maps.push((name.clone(), o.maps));
    }
    #[derive(Serialize)]
    struct Entry<'a> {
        log: &'a str,
        #[serde(flatten)]
        map: serde_json::Value,
    }
    let entries: Vec<Entry> = maps
        .iter()
        .map(|(name, m)| Entry {
            log: name,
            map: serde_json::from_str(&object_map_json(m)).expect("map json parses"),
        })
        .collect();
    write(&out.join("object_map.json"), &to_json(&entries))?;
    if results.is_empty() {
        log::warn!("no ground truth in the input; metrics not written");
        return Ok(());
    }
    write_results(out, &results)
}

fn run_selftest(cases: usize, seed: u64, out: &Path) -> Result<(), Failure> {
    let reports = selftest::run_all(cases, seed);
    let text: String = reports.iter().map(|r| r.line() + "\n").collect();
    print!("{text}");
    write(&out.join("selftest.txt"), &text)?;
    if reports.iter().all(|r| r.passed()) {
        Ok(())
    } else {
        Err(Failure::Internal(anyhow::anyhow!("selftest failures")))
    }
}
