use std::borrow::Cow;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use vesselgrade::evaluation::{format_summary, metrics_csv, write_fold_artifacts, MetricsReport, SummaryRow};
use vesselgrade::io::{file_sha256, hex, write_atomic};
use vesselgrade::model::{read_checkpoint, write_checkpoint, Checkpoint};
use vesselgrade::phantom::dataset::write_dataset;
use vesselgrade::phantom::{generate_patient, DatasetFile, PhantomProfile};
use vesselgrade::training::{
    derive_seed, evaluate_checkpoint, fold_seed, loss_csv, run_experiment, ExperimentConfig, Stage, TargetSet,
};
use vesselgrade::{Error, Result};

const SEED_ENV: &str = "VESSELGRADE_SEED";
const MANIFEST: &str = "manifest.json";

#[derive(Parser)]
#[command(
    name = "vesselgrade",
    version,
    about = "CAD-RADS scoring experiments on synthetic vessel phantoms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `easy`, `hard`, `default` or a TOML profile file.
        #[arg(long, default_value = "default")]
        profile: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validated training of one target configuration.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// TOML experiment config; built-in defaults when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// cadrads | cadrads,sten | cadrads,sten,calc | sten-baseline
        #[arg(long)]
        targets: Option<TargetSet>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score checkpoints on their held-out patients.
    Eval {
        /// A `train` output directory; every checkpoint it lists is evaluated.
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        run: Option<PathBuf>,
        #[arg(long, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summary tables over `eval` output directories.
    Report {
        #[arg(long = "eval", required = true, num_args = 1..)]
        evals: Vec<PathBuf>,
    },
}

#[derive(Serialize, Deserialize)]
struct FileEntry {
    path: String,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    command: String,
    version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target_set: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_digest: Option<String>,
    dataset_digest: String,
    seeds: BTreeMap<String, u64>,
    seconds: f64,
    files: Vec<FileEntry>,
}

impl Manifest {
    fn new(command: &str, dataset_digest: &[u8; 32]) -> Self {
        Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            target_set: None,
            config_digest: None,
            dataset_digest: hex(dataset_digest),
            seeds: BTreeMap::new(),
            seconds: 0.0,
            files: Vec::new(),
        }
    }

    fn add(&mut self, dir: &Path, path: &Path) -> Result<()> {
        let rel = path.strip_prefix(dir).unwrap_or(path);
        self.files.push(FileEntry {
            path: rel.to_string_lossy().into_owned(),
            sha256: file_sha256(path)?,
        });
        Ok(())
    }

    fn write(&mut self, path: &Path, started: Instant) -> Result<()> {
        self.seconds = started.elapsed().as_secs_f64();
        let body = serde_json::to_string_pretty(self).expect("manifest serialises");
        write_atomic(path, body.as_bytes())
    }

    fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Confirms every listed file still has its recorded checksum.
    fn verify(&self, dir: &Path) -> Result<()> {
        for f in &self.files {
            let p = dir.join(&f.path);
            let actual = file_sha256(&p).map_err(|e| Error::StaleArtifact(format!("{}: {e}", p.display())))?;
            if actual != f.sha256 {
                return Err(Error::StaleArtifact(format!(
                    "{} changed since {} wrote it",
                    p.display(),
                    self.command
                )));
            }
        }
        Ok(())
    }
}

fn load_profile(spec: &str) -> Result<PhantomProfile> {
    let profile = match spec {
        "easy" => PhantomProfile::easy(),
        "hard" => PhantomProfile::hard(),
        "default" => PhantomProfile::default(),
        path => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("profile {path}: {e}")))?;
            PhantomProfile::from_toml(&text)?
        }
    };
    profile.validate()?;
    Ok(profile)
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn open_dataset(path: &Path) -> Result<DatasetFile> {
    if !path.is_file() {
        return Err(Error::Config(format!("dataset {} does not exist", path.display())));
    }
    DatasetFile::open(path)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

fn synth(count: usize, seed: u64, profile: &str, out: &Path) -> Result<()> {
    let started = Instant::now();
    let profile = load_profile(profile)?;
    let seed = seed_override()?.unwrap_or(seed);
    let planes = u16::try_from(profile.planes).map_err(|_| Error::Config("too many planes".into()))?;
    let p = profile.clone();
    write_dataset(
        out,
        planes,
        profile.digest(),
        (0..count).map(move |i| generate_patient(derive_seed(seed, &[i as u64]), &p).map(Cow::Owned)),
    )
    .map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot write {}: {io}", out.display())),
        e => e,
    })?;
    let digest = DatasetFile::open(out)?.digest();
    let mut m = Manifest::new("synth", &digest);
    m.seeds.insert("base".into(), seed);
    let dir = out.parent().unwrap_or(Path::new("."));
    m.add(dir, out)?;
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    m.write(&out.with_file_name(name), started)?;
    eprintln!("wrote {count} patients to {}", out.display());
    Ok(())
}

fn train(
    data: &Path,
    config: Option<&Path>,
    out: &Path,
    targets: Option<TargetSet>,
    folds: Option<usize>,
    jobs: usize,
) -> Result<()> {
    let started = Instant::now();
    let mut cfg = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            ExperimentConfig::from_toml(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(t) = targets {
        cfg.training.target_set = t;
    }
    if let Some(f) = folds {
        cfg.training.folds = f;
    }
    if let Some(s) = seed_override()? {
        cfg.training.seed = s;
    }
    cfg.validate()?;
    let source = open_dataset(data)?;
    create_dir(out)?;
    let digest = source.digest();
    let log = |line: &str| eprintln!("[{:>8.1}s] {line}", started.elapsed().as_secs_f64());
    let exp = run_experiment(&source, &digest, &cfg, jobs, None, &log)?;

    let mut m = Manifest::new("train", &digest);
    m.target_set = Some(cfg.training.target_set.name().into());
    m.config_digest = Some(hex(&cfg.digest()));
    m.seeds.insert("base".into(), cfg.training.seed);
    let config_path = out.join("config.toml");
    write_atomic(&config_path, cfg.to_toml().as_bytes())?;
    m.add(out, &config_path)?;
    for f in &exp.folds {
        m.seeds
            .insert(format!("fold{}", f.fold), fold_seed(cfg.training.seed, f.fold));
        let p = out.join(format!("fold{}.vgck", f.fold));
        write_checkpoint(&p, &f.checkpoint)?;
        m.add(out, &p)?;
    }
    let history = exp.history();
    for stage in [Stage::Pretrain, Stage::Full] {
        if history.iter().any(|r| r.stage == stage) {
            let p = out.join(format!("loss_{}.csv", stage.name()));
            write_atomic(&p, loss_csv(&history, stage).as_bytes())?;
            m.add(out, &p)?;
        }
    }
    m.write(&out.join(MANIFEST), started)?;
    eprintln!("wrote {} checkpoints to {}", exp.folds.len(), out.display());
    Ok(())
}

fn run_checkpoints(run: &Path) -> Result<Vec<PathBuf>> {
    let m = Manifest::read(run)?;
    if m.command != "train" {
        return Err(Error::Config(format!("{} is not a train output", run.display())));
    }
    m.verify(run)?;
    let paths: Vec<PathBuf> = m
        .files
        .iter()
        .filter(|f| f.path.ends_with(".vgck"))
        .map(|f| run.join(&f.path))
        .collect();
    if paths.is_empty() {
        return Err(Error::Config(format!("{} lists no checkpoints", run.display())));
    }
    Ok(paths)
}

fn eval(run: Option<&Path>, checkpoints: &[PathBuf], data: &Path, out: &Path) -> Result<()> {
    let started = Instant::now();
    let paths = match run {
        Some(r) => run_checkpoints(r)?,
        None => checkpoints.to_vec(),
    };
    let source = open_dataset(data)?;
    let digest = source.digest();
    let ckpts: Vec<Checkpoint> = paths.iter().map(|p| read_checkpoint(p)).collect::<Result<_>>()?;
    let first = &ckpts[0].meta;
    for (c, p) in ckpts.iter().zip(&paths) {
        if c.meta.dataset_digest != digest {
            return Err(Error::StaleArtifact(format!(
                "{} was trained on dataset {} but {} has digest {}",
                p.display(),
                hex(&c.meta.dataset_digest),
                data.display(),
                hex(&digest)
            )));
        }
        if c.meta.config_digest != first.config_digest || c.meta.target_set != first.target_set {
            return Err(Error::StaleArtifact(format!(
                "{} comes from a different configuration than {}",
                p.display(),
                paths[0].display()
            )));
        }
    }
    let chunk = ExperimentConfig::default().training.eval_chunk;
    let folds = ckpts
        .iter()
        .map(|c| evaluate_checkpoint(c, &source, &c.meta.test_ids, chunk))
        .collect::<Result<Vec<_>>>()?;
    let report = MetricsReport::from_folds(folds);

    create_dir(out)?;
    let mut m = Manifest::new("eval", &digest);
    m.target_set = Some(first.target_set.clone());
    m.config_digest = Some(hex(&first.config_digest));
    let metrics = out.join("metrics.csv");
    write_atomic(&metrics, metrics_csv(&report).as_bytes())?;
    m.add(out, &metrics)?;
    for p in write_fold_artifacts(out, &report)? {
        m.add(out, &p)?;
    }
    let label = first
        .target_set
        .parse::<TargetSet>()
        .map(|t| t.label().to_string())
        .unwrap_or_else(|_| first.target_set.clone());
    let summary = format_summary(&[SummaryRow::from_report(label, &report)]);
    let summary_path = out.join("summary.txt");
    write_atomic(&summary_path, summary.as_bytes())?;
    m.add(out, &summary_path)?;
    m.write(&out.join(MANIFEST), started)?;
    print!("{summary}");
    Ok(())
}

fn report(evals: &[PathBuf]) -> Result<()> {
    let mut rows = Vec::new();
    let mut dataset: Option<(String, &Path)> = None;
    for dir in evals {
        let m = Manifest::read(dir)?;
        if m.command != "eval" {
            return Err(Error::Config(format!("{} is not an eval output", dir.display())));
        }
        m.verify(dir)?;
        match &dataset {
            Some((d, other)) if *d != m.dataset_digest => {
                return Err(Error::StaleArtifact(format!(
                    "{} and {} were evaluated on different datasets",
                    other.display(),
                    dir.display()
                )))
            }
            None => dataset = Some((m.dataset_digest.clone(), dir)),
            _ => {}
        }
        let name = m.target_set.as_deref().unwrap_or("?");
        let label = name.parse::<TargetSet>().map(|t| t.label()).unwrap_or(name);
        let csv = std::fs::read_to_string(dir.join("metrics.csv"))?;
        rows.push(SummaryRow::from_metrics_csv(label, &csv)?);
    }
    print!("{}", format_summary(&rows));
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) | Error::DegenerateBatch(_) | Error::UndefinedAuc(_) => 3,
        Error::StaleArtifact(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth {
            count,
            seed,
            profile,
            out,
        } => synth(*count, *seed, profile, out),
        Command::Train {
            data,
            config,
            out,
            targets,
            folds,
            jobs,
        } => train(data, config.as_deref(), out, *targets, *folds, *jobs),
        Command::Eval {
            run,
            checkpoint,
            data,
            out,
        } => eval(run.as_deref(), checkpoint, data, out),
        Command::Report { evals } => report(evals),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
