use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adlsense::assist::{write_event_log, BehaviorTable};
use adlsense::eval::{self, LabeledSample, MetricOptions, PredictionSet};
use adlsense::features::{FeatureProvider, FileProvider, ObjectVocabulary, SyntheticProvider};
use adlsense::fusion::{FusionWeights, PipelineConfig};
use adlsense::pipeline::{
    calibrate, calibrate_with, export_features, run_session, write_records, CalibrationOptions,
    Engine, EngineConfig, LabeledSession,
};
use adlsense::space::{load_space, save_space, EmbeddingSpace};
use adlsense::stream::{load_session, write_session, SamplerConfig};
use adlsense::synth::{synth_session, Activity, SynthConfig};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

#[derive(Parser)]
#[command(
    name = "adlsense",
    version,
    about = "Streaming ADL recognition for assistive robots"
)]
struct Cli {
    /// TOML file with default paths and settings; flags take precedence.
    #[arg(long, env = "ADLSENSE_CONFIG", global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate the motion gate, embedding space and unseen threshold from labeled sessions.
    Calibrate(CalibrateArgs),
    /// Replay a session and write decision and event logs.
    Run(RunArgs),
    /// Score prediction files and success-rate tables.
    Eval(EvalArgs),
    /// Inspect or export an embedding space.
    #[command(subcommand)]
    Space(SpaceCommand),
    /// Create or inspect fusion weights.
    #[command(subcommand)]
    Weights(WeightsCommand),
    /// Generate synthetic sessions.
    #[command(subcommand)]
    Session(SessionCommand),
    /// Export per-window feature files.
    #[command(subcommand)]
    Features(FeaturesCommand),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ProviderKind {
    Synthetic,
    Files,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Labels file: one `{"sample_id","subject_id","class","path"}` record per session.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    provider: Option<ProviderKind>,
    /// With `--provider files`: holds one feature directory per session, named by sample_id.
    #[arg(long)]
    features_dir: Option<PathBuf>,
    /// Output directory for space.json, gate.json and policy.json.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "user")]
    user: String,
    /// Use this unseen threshold instead of the calibrated one.
    #[arg(long)]
    policy_tau: Option<f64>,
    /// Exit nonzero when the calibration is degenerate.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    session: PathBuf,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    space: Option<PathBuf>,
    /// Behavior table JSON; without one every class gets a generic key.
    #[arg(long)]
    behavior: Option<PathBuf>,
    #[arg(long)]
    objects: Option<PathBuf>,
    #[arg(long)]
    provider: Option<ProviderKind>,
    #[arg(long)]
    features_dir: Option<PathBuf>,
    #[arg(long)]
    policy_tau: Option<f64>,
    /// Output directory for decisions.jsonl and events.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the updated space here after the run.
    #[arg(long)]
    save_space: Option<PathBuf>,
    /// Do not add seen embeddings to the space.
    #[arg(long)]
    frozen: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long = "predictions", num_args = 1..)]
    predictions: Vec<PathBuf>,
    /// Success-rate rows `{"group","label","attempts","successes"}`.
    #[arg(long)]
    rates: Option<PathBuf>,
    #[arg(long)]
    micro: bool,
    /// Report path; a text table is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum SpaceCommand {
    Show {
        #[arg(long)]
        space: Option<PathBuf>,
    },
    /// Write per-class statistics as JSON.
    Export {
        #[arg(long)]
        space: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum WeightsCommand {
    Init {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        classes: Option<usize>,
    },
    Show {
        #[arg(long)]
        weights: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum SessionCommand {
    Synth {
        #[arg(long)]
        activity: Activity,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 300)]
        frames: usize,
        #[arg(long, default_value_t = 0.002)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum FeaturesCommand {
    /// Run the synthetic provider over a session and store one file per window.
    Export {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    weights: Option<PathBuf>,
    space: Option<PathBuf>,
    behavior: Option<PathBuf>,
    objects: Option<PathBuf>,
    provider: Option<ProviderKind>,
    features_dir: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    cooldown: Option<f64>,
    sampler: Option<SamplerConfig>,
    policy: PolicyOverrides,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PolicyOverrides {
    tau_unseen: Option<f64>,
    atypical_z: Option<f64>,
    min_history: Option<usize>,
}

impl FileConfig {
    fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: FileConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.weights,
            &mut cfg.space,
            &mut cfg.behavior,
            &mut cfg.objects,
            &mut cfg.features_dir,
            &mut cfg.out,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    fn sampler(&self) -> SamplerConfig {
        self.sampler.unwrap_or_default()
    }

    fn apply_policy(&self, space: &mut EmbeddingSpace, tau_flag: Option<f64>) -> Result<()> {
        let p = &mut space.policy;
        if let Some(v) = self.policy.tau_unseen {
            p.tau_unseen = v;
        }
        if let Some(v) = self.policy.atypical_z {
            p.atypical_z = v;
        }
        if let Some(v) = self.policy.min_history {
            p.min_history = v;
        }
        if let Some(v) = tau_flag {
            p.tau_unseen = v;
        }
        p.validate()?;
        Ok(())
    }
}

fn pick(flag: Option<PathBuf>, file: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| file.clone())
        .with_context(|| format!("no {what} path given (flag or config file)"))
}

fn existing(path: PathBuf, what: &str) -> Result<PathBuf> {
    if !path.exists() {
        bail!("{what} not found: {}", path.display());
    }
    Ok(path)
}

fn provider(kind: ProviderKind, features_dir: Option<PathBuf>) -> Result<Box<dyn FeatureProvider>> {
    Ok(match kind {
        ProviderKind::Synthetic => {
            if features_dir.is_some() {
                bail!("--features-dir only applies to --provider files");
            }
            Box::new(SyntheticProvider::default())
        }
        ProviderKind::Files => {
            let dir = features_dir.context("--provider files needs --features-dir")?;
            Box::new(FileProvider {
                dir: existing(dir, "features directory")?,
            })
        }
    })
}

/// Forwards to a boxed provider so the engine can own it.
struct Boxed(Box<dyn FeatureProvider>);

impl FeatureProvider for Boxed {
    fn features(
        &self,
        w: &adlsense::stream::SampleWindow,
    ) -> adlsense::Result<adlsense::features::FeatureBundle> {
        self.0.features(w)
    }
}

fn cmd_calibrate(args: CalibrateArgs, cfg: &FileConfig) -> Result<ExitCode> {
    let weights_path = existing(pick(args.weights, &cfg.weights, "weights")?, "weights file")?;
    let out = pick(args.out, &cfg.out, "output")?;
    let labels = eval::load_labels(&args.labels)?;
    if labels.is_empty() {
        bail!("labels file {} lists no sessions", args.labels.display());
    }
    let weights = FusionWeights::load(&weights_path)?;
    let kind = args
        .provider
        .or(cfg.provider)
        .unwrap_or(ProviderKind::Synthetic);
    let features_dir = args.features_dir.or_else(|| cfg.features_dir.clone());

    let base = args.labels.parent().unwrap_or(Path::new("."));
    let mut sessions = Vec::with_capacity(labels.len());
    for s in &labels {
        let rel = s
            .path
            .as_ref()
            .with_context(|| format!("sample {} has no session path", s.sample_id))?;
        let session = load_session(base.join(rel))?;
        sessions.push((s, session));
    }

    let options = CalibrationOptions {
        sampler: cfg.sampler(),
        ..CalibrationOptions::default()
    };
    let mut result = match kind {
        ProviderKind::Synthetic => {
            let labeled: Vec<LabeledSession> = sessions
                .into_iter()
                .map(|(s, session)| LabeledSession {
                    label: s.class.clone(),
                    session,
                })
                .collect();
            calibrate(
                &args.user,
                &labeled,
                &weights,
                &SyntheticProvider::default(),
                &options,
            )?
        }
        ProviderKind::Files => {
            let dir = existing(
                features_dir.context("--provider files needs --features-dir")?,
                "features directory",
            )?;
            let providers: Vec<FileProvider> = sessions
                .iter()
                .map(|(s, _)| FileProvider {
                    dir: dir.join(&s.sample_id),
                })
                .collect();
            let labeled: Vec<LabeledSession> = sessions
                .into_iter()
                .map(|(s, session)| LabeledSession {
                    label: s.class.clone(),
                    session,
                })
                .collect();
            calibrate_with(&args.user, &labeled, &weights, |i| &providers[i], &options)?
        }
    };
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    cfg.apply_policy(&mut result.space, args.policy_tau)?;

    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    save_space(&result.space, out.join("space.json"))?;
    result.gate.save(out.join("gate.json"))?;
    let policy = serde_json::to_string_pretty(&result.space.policy)? + "\n";
    fs::write(out.join("policy.json"), policy)?;
    eprintln!(
        "calibrated {} class(es) from {} session(s): m_min {:.6}, m_max {:.6}, tau_unseen {:.6}",
        result.space.len(),
        labels.len(),
        result.gate.m_min,
        result.gate.m_max,
        result.space.policy.tau_unseen
    );
    if args.strict && result.is_degenerate() {
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_run(args: RunArgs, cfg: &FileConfig) -> Result<ExitCode> {
    let weights_path = existing(pick(args.weights, &cfg.weights, "weights")?, "weights file")?;
    let space_path = existing(pick(args.space, &cfg.space, "space")?, "space file")?;
    let session_path = existing(args.session, "session file")?;
    let out = pick(args.out, &cfg.out, "output")?;
    let behavior = args.behavior.or_else(|| cfg.behavior.clone());
    if let Some(objects) = args.objects.or_else(|| cfg.objects.clone()) {
        ObjectVocabulary::load(existing(objects, "object vocabulary")?)?;
    }
    let kind = args
        .provider
        .or(cfg.provider)
        .unwrap_or(ProviderKind::Synthetic);
    let provider = provider(kind, args.features_dir.or_else(|| cfg.features_dir.clone()))?;

    let weights = FusionWeights::load(&weights_path)?;
    let mut space = load_space(&space_path)?;
    cfg.apply_policy(&mut space, args.policy_tau)?;
    let table = match behavior {
        Some(p) => BehaviorTable::load(existing(p, "behavior table")?, &space.labels())?,
        None => BehaviorTable::generic(&space.labels()),
    };
    let session = load_session(&session_path)?;
    let config = EngineConfig {
        sampler: cfg.sampler(),
        update_space: !args.frozen,
        cooldown: cfg.cooldown.unwrap_or(adlsense::assist::DEFAULT_COOLDOWN),
    };
    let mut engine = Engine::new(config, Boxed(provider), weights, space, table)?;
    let output = run_session(&mut engine, &session)?;

    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_records(out.join("decisions.jsonl"), &output.records)?;
    write_event_log(out.join("events.jsonl"), &output.events)?;
    if let Some(p) = args.save_space {
        save_space(engine.space(), p)?;
    }
    eprintln!(
        "{} window(s), {} event(s) -> {}",
        output.records.len(),
        output.events.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs, cfg: &FileConfig) -> Result<ExitCode> {
    let out = pick(args.out, &cfg.out, "report")?;
    let truth: Vec<LabeledSample> = match &args.labels {
        Some(p) => eval::load_labels(p)?,
        None if args.predictions.is_empty() => Vec::new(),
        None => bail!("--predictions needs --labels"),
    };
    let sets = args
        .predictions
        .iter()
        .map(PredictionSet::load)
        .collect::<adlsense::Result<Vec<_>>>()?;
    let rates = args.rates.as_ref().map(eval::load_rates).transpose()?;
    let report = eval::evaluate(
        &truth,
        &sets,
        rates.as_deref(),
        MetricOptions { micro: args.micro },
    )?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    eval::write_report(&report, &out)?;
    print!("{}", eval::render_table(&report));
    Ok(ExitCode::SUCCESS)
}

fn cmd_space(cmd: SpaceCommand, cfg: &FileConfig) -> Result<ExitCode> {
    match cmd {
        SpaceCommand::Show { space } => {
            let space = load_space(pick(space, &cfg.space, "space")?)?;
            println!("user: {}", space.user_id);
            println!(
                "gate: m_min {} m_max {}",
                space.gate.m_min, space.gate.m_max
            );
            println!(
                "policy: tau_unseen {} atypical_z {} min_history {}",
                space.policy.tau_unseen, space.policy.atypical_z, space.policy.min_history
            );
            println!("history: {} score(s)", space.history().len());
            for id in space.class_ids() {
                let c = space.class(id).expect("listed class");
                println!(
                    "class {id} {:?}: {} member(s), D {:.6}, var {:.6}",
                    c.label, c.stats.count, c.stats.mean_dist, c.stats.variance
                );
            }
        }
        SpaceCommand::Export { space, out } => {
            let space = load_space(pick(space, &cfg.space, "space")?)?;
            let classes: Vec<_> = space
                .class_ids()
                .map(|id| {
                    let c = space.class(id).expect("listed class");
                    serde_json::json!({
                        "id": id,
                        "label": c.label,
                        "stats": c.stats,
                    })
                })
                .collect();
            let doc = serde_json::json!({
                "user_id": space.user_id,
                "gate": space.gate,
                "policy": space.policy,
                "classes": classes,
                "s_history": space.history(),
            });
            fs::write(&out, serde_json::to_string_pretty(&doc)? + "\n")
                .with_context(|| format!("writing {}", out.display()))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_weights(cmd: WeightsCommand, cfg: &FileConfig) -> Result<ExitCode> {
    match cmd {
        WeightsCommand::Init { seed, out, classes } => {
            let out = pick(out, &cfg.weights, "weights output")?;
            let mut config = PipelineConfig::default();
            if let Some(k) = classes {
                config.num_classes = k;
            }
            let w = FusionWeights::random(config, seed.or(cfg.seed).unwrap_or(0))?;
            w.store(&out)?;
            eprintln!("{} parameters -> {}", w.parameter_count(), out.display());
        }
        WeightsCommand::Show { weights } => {
            let w = FusionWeights::load(pick(weights, &cfg.weights, "weights")?)?;
            println!("{}", serde_json::to_string_pretty(&w.config)?);
            println!("parameters: {}", w.parameter_count());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_session(cmd: SessionCommand, cfg: &FileConfig) -> Result<ExitCode> {
    let SessionCommand::Synth {
        activity,
        seed,
        frames,
        noise,
        out,
    } = cmd;
    let config = SynthConfig {
        frames,
        noise,
        ..SynthConfig::default()
    };
    let session = synth_session(activity, &config, seed.or(cfg.seed).unwrap_or(0))?;
    write_session(&out, &session)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_features(cmd: FeaturesCommand, cfg: &FileConfig) -> Result<ExitCode> {
    let FeaturesCommand::Export { session, out } = cmd;
    let session = load_session(existing(session, "session file")?)?;
    let n = export_features(&session, cfg.sampler(), &SyntheticProvider::default(), &out)?;
    eprintln!("{n} feature file(s) -> {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Calibrate(a) => cmd_calibrate(a, &cfg),
        Command::Run(a) => cmd_run(a, &cfg),
        Command::Eval(a) => cmd_eval(a, &cfg),
        Command::Space(c) => cmd_space(c, &cfg),
        Command::Weights(c) => cmd_weights(c, &cfg),
        Command::Session(c) => cmd_session(c, &cfg),
        Command::Features(c) => cmd_features(c, &cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
