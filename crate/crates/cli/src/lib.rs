//! `elastoreg` command line: synthetic data generation, single-pair
//! registration, population training, checkpoint inference and PINN
//! ablation runs. Every command writes its outputs plus one `manifest.json`
//! into the `--out` directory.

mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use elastoreg_core::engine::{self, EngineError, PairExtras};
use elastoreg_core::io::{self, IoError};
use elastoreg_core::network::CheckpointError;
use elastoreg_core::synthdata::{generate, ScenarioError};
use elastoreg_core::{
    LandmarkPair, PointSet, RegModel, RegistrationResult, Scenario, TrainConfig, Vec3,
};
use serde::Serialize;
use serde_json::Value;

pub use manifest::{config_hash, sha256_hex, Manifest, MANIFEST_FILE};

#[derive(Debug, Parser)]
#[command(
    name = "elastoreg",
    version,
    about = "Physics-informed non-rigid point-set registration"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// Overrides the seed of the config or scenario.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Training config JSON; for `generate`, a scenario JSON.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Switch off all three PDE terms.
    #[arg(long, global = true)]
    pub no_pinn: bool,
    /// Weight of the alignment term.
    #[arg(long, global = true)]
    pub w: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic pair with ground truth, or a population of pairs.
    Generate {
        /// Preset name (S1 to S5) or scenario JSON path. Falls back to --config.
        scenario: Option<String>,
        /// Write this many population subjects instead, one directory each.
        #[arg(long, conflicts_with = "scenario")]
        population: Option<usize>,
        /// Surface and internal points per population subject.
        #[arg(long, default_value_t = 128)]
        points: usize,
    },
    /// Train a freshly seeded model on one pair.
    Register(PairArgs),
    /// Train one model over every subject directory.
    Train { population_dir: PathBuf },
    /// Forward-only registration with a trained checkpoint.
    Infer {
        checkpoint: PathBuf,
        #[command(flatten)]
        pair: PairArgs,
    },
    /// Register one pair with and without the PDE terms and compare.
    Eval(PairArgs),
}

#[derive(Debug, Clone, Args)]
pub struct PairArgs {
    pub source: PathBuf,
    pub target: PathBuf,
    /// Ground-truth displacement CSV, enables rmse.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Landmark CSV, enables TRE.
    #[arg(long)]
    pub landmarks: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Version(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    /// 2 input error, 3 version mismatch, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Version(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            EngineError::Autodiff(elastoreg_core::autodiff::AutodiffError::NonFinite {
                ..
            }) => CliError::Numerical(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Version { .. } => CliError::Version(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

fn input_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

/// Files produced by a command, held in memory until everything succeeded.
struct Outputs {
    files: Vec<(String, String)>,
    inputs: BTreeMap<String, String>,
}

impl Outputs {
    fn new() -> Self {
        Self {
            files: Vec::new(),
            inputs: BTreeMap::new(),
        }
    }

    fn add(&mut self, name: impl Into<String>, content: String) {
        self.files.push((name.into(), content));
    }

    fn read(&mut self, path: &Path) -> Result<String, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| input_err(path, e))?;
        self.inputs
            .insert(path.display().to_string(), sha256_hex(text.as_bytes()));
        Ok(text)
    }

    fn point_set(&mut self, path: &Path) -> Result<PointSet, CliError> {
        let text = self.read(path)?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(io::parse_point_set(
            text.as_bytes(),
            &path.display().to_string(),
            &id,
        )?)
    }

    fn landmarks(&mut self, path: &Path) -> Result<Vec<LandmarkPair>, CliError> {
        let text = self.read(path)?;
        Ok(io::parse_landmarks(
            text.as_bytes(),
            &path.display().to_string(),
        )?)
    }

    /// Ground-truth displacements, checked against the source points.
    fn truth(&mut self, path: &Path, source: &PointSet) -> Result<Vec<Vec3>, CliError> {
        let text = self.read(path)?;
        let table = io::parse_displacements(text.as_bytes(), &path.display().to_string())?;
        let matches = table.points.len() == source.len()
            && table.points.iter().zip(&source.points).all(|(a, b)| {
                a.iter()
                    .zip(b)
                    .all(|(x, y)| (x - y).abs() <= 1e-9 * (1.0 + y.abs()))
            });
        if !matches {
            return Err(input_err(
                path,
                "ground-truth points do not match the source cloud",
            ));
        }
        Ok(table.displacements)
    }

    fn write(
        self,
        out: &Path,
        command: &str,
        config: Value,
        seed: u64,
        start: Instant,
    ) -> Result<PathBuf, CliError> {
        for (name, content) in &self.files {
            let path = out.join(name);
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| input_err(dir, e))?;
            }
            std::fs::write(&path, content).map_err(|e| input_err(&path, e))?;
        }
        let manifest = Manifest {
            command: command.into(),
            config_hash: config_hash(&config),
            seed,
            artifact_paths: self.files.into_iter().map(|(name, _)| name).collect(),
            wall_time: start.elapsed().as_secs_f64(),
            config,
            inputs: self.inputs,
        };
        let path = out.join(MANIFEST_FILE);
        std::fs::write(&path, io::to_json_pretty(&manifest)).map_err(|e| input_err(&path, e))?;
        Ok(path)
    }
}

/// Runs one command and returns the path of the manifest it wrote.
pub fn run(cli: &Cli) -> Result<PathBuf, CliError> {
    let g = &cli.global;
    let out = g
        .out
        .clone()
        .ok_or_else(|| CliError::Input("--out <DIR> is required".into()))?;
    if let Some(w) = g.w {
        if !(w > 0.0 && w.is_finite()) {
            return Err(CliError::Input(format!(
                "--w must be positive and finite, got {w}"
            )));
        }
    }
    let start = Instant::now();
    match &cli.command {
        Command::Generate {
            scenario,
            population,
            points,
        } => cmd_generate(g, scenario.as_deref(), *population, *points, &out, start),
        Command::Register(pair) => cmd_register(g, pair, &out, start),
        Command::Train { population_dir } => cmd_train(g, population_dir, &out, start),
        Command::Infer { checkpoint, pair } => cmd_infer(g, checkpoint, pair, &out, start),
        Command::Eval(pair) => cmd_eval(g, pair, &out, start),
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("configuration serializes")
}

fn scenario_files(
    prefix: &str,
    scenario: &Scenario,
    outputs: &mut Outputs,
) -> Result<(), CliError> {
    let (source, target, truth) = generate(scenario)?;
    outputs.add(format!("{prefix}source.csv"), io::point_set_csv(&source));
    outputs.add(format!("{prefix}target.csv"), io::point_set_csv(&target));
    outputs.add(
        format!("{prefix}truth.csv"),
        io::displacements_csv(&source.points, &truth.displacement_field),
    );
    outputs.add(
        format!("{prefix}landmarks.csv"),
        io::landmarks_csv(&truth.landmark_pairs),
    );
    outputs.add(
        format!("{prefix}scenario.json"),
        io::to_json_pretty(scenario),
    );
    Ok(())
}

fn cmd_generate(
    g: &GlobalArgs,
    scenario: Option<&str>,
    population: Option<usize>,
    points: usize,
    out: &Path,
    start: Instant,
) -> Result<PathBuf, CliError> {
    let mut outputs = Outputs::new();
    if let Some(n) = population {
        if n < 2 {
            return Err(CliError::Input(format!(
                "a population needs at least 2 subjects, got {n}"
            )));
        }
        let seed = g.seed.unwrap_or(0);
        let subjects: Vec<Scenario> = (0..n)
            .map(|i| Scenario::population_subject(i, seed, points))
            .collect();
        for (i, s) in subjects.iter().enumerate() {
            scenario_files(&format!("subject_{i:03}/"), s, &mut outputs)?;
        }
        let config = serde_json::json!({ "population": n, "points": points, "subjects": to_value(&subjects) });
        return outputs.write(out, "generate", config, seed, start);
    }

    let mut s = match scenario
        .map(String::from)
        .or_else(|| g.config.as_ref().map(|p| p.display().to_string()))
    {
        None => {
            return Err(CliError::Input(
                "generate needs a preset name or a scenario file".into(),
            ))
        }
        Some(name) => match Scenario::preset(&name) {
            Some(s) => s,
            None => {
                let path = PathBuf::from(&name);
                let text = outputs.read(&path)?;
                serde_json::from_str(&text).map_err(|e| input_err(&path, e))?
            }
        },
    };
    if let Some(seed) = g.seed {
        s.seed = seed;
    }
    scenario_files("", &s, &mut outputs)?;
    outputs.write(out, "generate", to_value(&s), s.seed, start)
}

/// Reads the training config and applies the command-line overrides.
fn load_config(g: &GlobalArgs, outputs: &mut Outputs) -> Result<TrainConfig, CliError> {
    let mut cfg = match &g.config {
        Some(path) => {
            let text = outputs.read(path)?;
            TrainConfig::from_json(&text).map_err(|e| input_err(path, e))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(w) = g.w {
        cfg.weight_w = w;
    }
    if g.no_pinn {
        cfg = cfg.without_pinn();
    }
    if let (Some(rel), Some(path)) = (&cfg.supervised, &g.config) {
        let resolved = path.parent().unwrap_or(Path::new("")).join(rel);
        cfg.supervised = Some(resolved.display().to_string());
    }
    cfg.validate()?;
    Ok(cfg)
}

struct PairInputs {
    source: PointSet,
    target: PointSet,
    truth: Option<Vec<Vec3>>,
    landmarks: Vec<LandmarkPair>,
}

impl PairInputs {
    fn read(args: &PairArgs, cfg: &TrainConfig, outputs: &mut Outputs) -> Result<Self, CliError> {
        let source = outputs.point_set(&args.source)?;
        let target = outputs.point_set(&args.target)?;
        let truth = args
            .truth
            .as_ref()
            .map(|p| outputs.truth(p, &source))
            .transpose()?;
        let supervised = cfg
            .supervised
            .as_ref()
            .map(|p| outputs.truth(Path::new(p), &source))
            .transpose()?;
        let truth = match (truth, supervised) {
            (Some(a), Some(b)) if a != b => {
                return Err(CliError::Input(
                    "--truth and the supervised displacements in the config disagree".into(),
                ))
            }
            (a, b) => a.or(b),
        };
        let landmarks = args
            .landmarks
            .as_ref()
            .map(|p| outputs.landmarks(p))
            .transpose()?;
        Ok(Self {
            source,
            target,
            truth,
            landmarks: landmarks.unwrap_or_default(),
        })
    }

    fn extras(&self, cfg: &TrainConfig) -> PairExtras<'_> {
        PairExtras {
            landmarks: &self.landmarks,
            truth: self.truth.as_deref(),
            supervise: cfg.supervised.is_some(),
        }
    }
}

#[derive(Serialize)]
struct StepRecord<'a> {
    step: usize,
    #[serde(flatten)]
    terms: &'a elastoreg_core::LossBreakdown,
}

fn result_files(
    prefix: &str,
    source: &PointSet,
    result: &RegistrationResult,
    outputs: &mut Outputs,
    history: bool,
) {
    outputs.add(
        format!("{prefix}warped.csv"),
        io::point_set_csv(&result.warped_points),
    );
    outputs.add(
        format!("{prefix}displacements.csv"),
        io::displacements_csv(&source.points, &result.displacement_field),
    );
    if history {
        let lines: String = result
            .loss_history
            .iter()
            .enumerate()
            .map(|(step, terms)| io::to_json_line(&StepRecord { step, terms }) + "\n")
            .collect();
        outputs.add(format!("{prefix}loss_history.jsonl"), lines);
    }
    outputs.add(
        format!("{prefix}metrics.json"),
        io::to_json_pretty(&result.metrics),
    );
}

fn cmd_register(
    g: &GlobalArgs,
    pair: &PairArgs,
    out: &Path,
    start: Instant,
) -> Result<PathBuf, CliError> {
    let mut outputs = Outputs::new();
    let cfg = load_config(g, &mut outputs)?;
    let inputs = PairInputs::read(pair, &cfg, &mut outputs)?;
    let result =
        engine::train_single_pair(&inputs.source, &inputs.target, &cfg, &inputs.extras(&cfg))?;
    result_files("", &inputs.source, &result, &mut outputs, true);
    outputs.write(out, "register", to_value(&cfg), cfg.seed, start)
}

fn cmd_eval(
    g: &GlobalArgs,
    pair: &PairArgs,
    out: &Path,
    start: Instant,
) -> Result<PathBuf, CliError> {
    if g.no_pinn {
        return Err(CliError::Input(
            "eval always runs both variants; drop --no-pinn".into(),
        ));
    }
    let mut outputs = Outputs::new();
    let cfg = load_config(g, &mut outputs)?;
    let baseline_cfg = cfg.clone().without_pinn();
    let inputs = PairInputs::read(pair, &cfg, &mut outputs)?;
    let pinn =
        engine::train_single_pair(&inputs.source, &inputs.target, &cfg, &inputs.extras(&cfg))?;
    let baseline = engine::train_single_pair(
        &inputs.source,
        &inputs.target,
        &baseline_cfg,
        &inputs.extras(&baseline_cfg),
    )?;
    result_files("pinn/", &inputs.source, &pinn, &mut outputs, true);
    result_files("no_pinn/", &inputs.source, &baseline, &mut outputs, true);
    let comparison = serde_json::json!({
        "pinn": to_value(&pinn.metrics),
        "no_pinn": to_value(&baseline.metrics),
        "dm_ratio_lower_with_pinn": pinn.metrics.dm_ratio < baseline.metrics.dm_ratio,
    });
    outputs.add("comparison.json", io::to_json_pretty(&comparison));
    outputs.write(out, "eval", to_value(&cfg), cfg.seed, start)
}

/// Subdirectories of `dir` holding `source.csv` and `target.csv`, sorted by name.
fn discover_subjects(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| input_err(dir, e))?;
    let mut found = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| input_err(dir, e))?.path();
        if path.join("source.csv").is_file() && path.join("target.csv").is_file() {
            found.push(path);
        }
    }
    found.sort();
    Ok(found)
}

#[derive(Serialize)]
struct EpochLine<'a> {
    epoch: usize,
    #[serde(flatten)]
    mean_loss: &'a elastoreg_core::LossBreakdown,
}

fn cmd_train(g: &GlobalArgs, dir: &Path, out: &Path, start: Instant) -> Result<PathBuf, CliError> {
    let mut outputs = Outputs::new();
    let cfg = load_config(g, &mut outputs)?;
    if cfg.supervised.is_some() {
        return Err(CliError::Input(
            "population training is unsupervised; remove `supervised`".into(),
        ));
    }
    let dirs = discover_subjects(dir)?;
    if dirs.len() < 2 {
        return Err(input_err(
            dir,
            format!(
                "population training needs at least 2 subject directories, found {}",
                dirs.len()
            ),
        ));
    }
    let subjects = dirs
        .iter()
        .map(|d| {
            Ok((
                outputs.point_set(&d.join("source.csv"))?,
                outputs.point_set(&d.join("target.csv"))?,
            ))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let result = engine::train_population(&subjects, &cfg)?;
    outputs.add("model.json", result.model.to_checkpoint_json());
    let lines: String = result
        .epochs
        .iter()
        .map(|r| {
            io::to_json_line(&EpochLine {
                epoch: r.epoch,
                mean_loss: &r.mean_loss,
            }) + "\n"
        })
        .collect();
    outputs.add("epochs.jsonl", lines);
    outputs.write(out, "train", to_value(&cfg), cfg.seed, start)
}

fn cmd_infer(
    g: &GlobalArgs,
    checkpoint: &Path,
    pair: &PairArgs,
    out: &Path,
    start: Instant,
) -> Result<PathBuf, CliError> {
    let mut outputs = Outputs::new();
    let text = outputs.read(checkpoint)?;
    let model = RegModel::from_checkpoint_json(&text).map_err(|e| match CliError::from(e) {
        CliError::Input(msg) => input_err(checkpoint, msg),
        other => other,
    })?;
    let mut cfg = load_config(g, &mut outputs)?;
    // The checkpoint fixes the architecture and its seed.
    cfg.arch = model.arch.clone();
    cfg.seed = model.seed;
    let inputs = PairInputs::read(pair, &cfg, &mut outputs)?;
    let result = engine::register(
        &model,
        &inputs.source,
        &inputs.target,
        &cfg.loss_config(),
        &inputs.extras(&cfg),
    )?;
    if !result.metrics.pair_loss.is_finite() {
        return Err(CliError::Numerical(format!(
            "non-finite pair loss {:?}",
            result.metrics.pair_loss
        )));
    }
    result_files("", &inputs.source, &result, &mut outputs, false);
    outputs.write(out, "infer", to_value(&cfg), cfg.seed, start)
}
