use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sirfit_core::analyze::{classify, distribution, parse_log, GROUP_KEYS};
use sirfit_core::campaign::{load_campaign, CampaignConfig, DurationProfile, TriggerAction};
use sirfit_core::inject::{render_injection_log, Binding, Controller, Direction, InjectionAction};
use sirfit_core::model::{
    derive_fault_model, export_campaign, load_architecture, load_fault_model, render_fault_model, ExportOptions,
    FaultSpec, Target,
};
use sirfit_runtime::net::Framing;
use sirfit_runtime::proxy::{attach_proxy, ChannelInfo};
use sirfit_runtime::runner::{load_journal, run_campaign, RunnerOptions, REPORT_KEYS};
use sirfit_runtime::workload::{start_workload, Workload};
use sirfit_runtime::{RobustnessProfile, Stack, StackConfig, Topology};

#[derive(Parser)]
#[command(name = "sirfit", version, about = "Fault-model derivation and fault-injection campaigns")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fault models
    #[command(subcommand)]
    Model(ModelCmd),
    /// Fault-injection campaigns
    #[command(subcommand)]
    Campaign(CampaignCmd),
    /// Outcome analysis
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Interposition on a single channel
    #[command(subcommand)]
    Proxy(ProxyCmd),
    /// The simulated target stack
    #[command(subcommand)]
    Target(TargetCmd),
}

#[derive(Subcommand)]
enum ModelCmd {
    /// Derive the fault model of an architecture description
    Derive {
        arch: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Turn a fault model into a campaign configuration
    Export(ExportArgs),
}

#[derive(Args)]
struct ExportArgs {
    model: PathBuf,
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    repetitions: u32,
    #[arg(long, env = "SIRFIT_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "fragile")]
    robustness: String,
    /// `component=action`, e.g. `media_server=take_picture`
    #[arg(long = "trigger")]
    triggers: Vec<String>,
    /// `component=subsystem`, e.g. `rild=phone`
    #[arg(long = "subsystem")]
    subsystems: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Desk,
    PaperFaithful,
}

#[derive(Subcommand)]
enum CampaignCmd {
    /// Run (or resume) a campaign
    Run {
        config: PathBuf,
        #[arg(long, value_enum, default_value = "desk")]
        profile: Profile,
        #[arg(long)]
        out: PathBuf,
        /// Topology the faults are resolved against
        #[arg(long)]
        topology: Option<PathBuf>,
        /// Also record every injection decision
        #[arg(long)]
        trace: bool,
    },
    /// Validate a campaign and list its runs
    Check {
        config: PathBuf,
        #[arg(long)]
        topology: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
    Jsonl,
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// Outcome distribution of a campaign output directory
    Report {
        dir: PathBuf,
        /// Grouping keys
        #[arg(long, value_delimiter = ',')]
        by: Option<Vec<String>>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Classify one log file
    Classify { log: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum FramingArg {
    Sirf,
    At,
}

#[derive(Subcommand)]
enum ProxyCmd {
    /// Relay a channel through the injection controller until stdin closes
    Attach {
        #[arg(long)]
        listen: PathBuf,
        #[arg(long)]
        upstream: PathBuf,
        /// Fault model whose entries target this channel
        #[arg(long)]
        faults: PathBuf,
        /// Channel name used for injection points; defaults to the
        /// interface of the first fault
        #[arg(long)]
        channel: Option<String>,
        #[arg(long, value_enum, default_value = "sirf")]
        framing: FramingArg,
        #[arg(long, env = "SIRFIT_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        duration_ms: Option<u64>,
        /// Injection log destination; stdout when absent
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum TargetCmd {
    /// Start the stack and stream its log until stdin closes
    Run {
        topology: Option<PathBuf>,
        #[arg(long, default_value = "fragile")]
        robustness: String,
        #[arg(long, default_value = "default")]
        workload: String,
        #[arg(long)]
        duration_ms: Option<u64>,
        #[arg(long, env = "SIRFIT_SEED", default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Config(String),
    Harness(String),
}

type Outcome = Result<(), Failure>;

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn harness_err(e: impl std::fmt::Display) -> Failure {
    Failure::Harness(e.to_string())
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn write_out(output: Option<&Path>, text: &str) -> Outcome {
    match output {
        Some(p) => fs::write(p, text).map_err(|e| harness_err(format!("{}: {e}", p.display()))),
        None => io::stdout().write_all(text.as_bytes()).map_err(harness_err),
    }
}

fn load_topology(path: Option<&Path>) -> Result<Topology, Failure> {
    match path {
        Some(p) => Topology::load(&read(p)?).map_err(config_err),
        None => Ok(Topology::default()),
    }
}

fn pairs(items: &[String]) -> Result<BTreeMap<String, String>, Failure> {
    items
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Failure::Config(format!("expected key=value, got `{s}`")))
        })
        .collect()
}

fn model(cmd: ModelCmd) -> Outcome {
    match cmd {
        ModelCmd::Derive { arch, output } => {
            let arch = load_architecture(&read(&arch)?).map_err(config_err)?;
            let specs = derive_fault_model(&arch).map_err(config_err)?;
            write_out(output.as_deref(), &render_fault_model(&specs))?;
            eprintln!("{} fault specs from {} components", specs.len(), arch.components.len());
            Ok(())
        }
        ModelCmd::Export(a) => {
            let specs = load_fault_model(&read(&a.model)?).map_err(config_err)?;
            let triggers = pairs(&a.triggers)?
                .into_iter()
                .map(|(k, v)| v.parse::<TriggerAction>().map(|t| (k, t)).map_err(Failure::Config))
                .collect::<Result<_, _>>()?;
            let options = ExportOptions {
                repetitions: a.repetitions,
                base_seed: a.seed,
                robustness: a.robustness,
                triggers,
                subsystems: pairs(&a.subsystems)?,
                ..ExportOptions::default()
            };
            let text = export_campaign(&specs, &options).map_err(config_err)?;
            write_out(a.output.as_deref(), &text)
        }
    }
}

fn load_config(path: &Path, topology: &Topology) -> Result<CampaignConfig, Failure> {
    let mut config = load_campaign(&read(path)?, &|t: &str| topology.resolve_target(t)).map_err(config_err)?;
    if let Ok(seed) = std::env::var("SIRFIT_SEED") {
        config.global.base_seed = seed
            .parse()
            .map_err(|_| Failure::Config(format!("SIRFIT_SEED: `{seed}` is not an unsigned integer")))?;
    }
    for plan in &config.experiments {
        if RobustnessProfile::named(&plan.robustness).is_none() {
            return Err(Failure::Config(format!("experiment `{}`: unknown robustness profile `{}`", plan.id, plan.robustness)));
        }
        if Workload::named(&plan.workload).is_none() {
            return Err(Failure::Config(format!("experiment `{}`: unknown workload `{}`", plan.id, plan.workload)));
        }
    }
    Ok(config)
}

fn campaign(cmd: CampaignCmd) -> Outcome {
    match cmd {
        CampaignCmd::Run {
            config,
            profile,
            out,
            topology,
            trace,
        } => {
            let topology = load_topology(topology.as_deref())?;
            let config = load_config(&config, &topology)?;
            let mut options = RunnerOptions::new(&out);
            options.topology = topology;
            options.trace = trace;
            options.profile = match profile {
                Profile::Desk => DurationProfile::Desk,
                Profile::PaperFaithful => DurationProfile::PaperFaithful,
            };
            let summary = run_campaign(&config, &options, &mut |r| {
                let validity = match &r.invalid_reason {
                    None => "valid".to_string(),
                    Some(why) => format!("invalid ({why})"),
                };
                println!("{:<48} {:<9} {validity} injections={}", r.run_id, r.outcome.to_string(), r.injections.len());
            })
            .map_err(harness_err)?;
            if summary.resumed > 0 {
                eprintln!("resumed: {} runs already in the journal", summary.resumed);
            }
            if let Some(report) = summary.report {
                print!("{}", report.render_table());
            }
            Ok(())
        }
        CampaignCmd::Check { config, topology } => {
            let topology = load_topology(topology.as_deref())?;
            let config = load_config(&config, &topology)?;
            for run in config.runs() {
                println!("{} seed={}", run.run_id(), run.seed);
            }
            Ok(())
        }
    }
}

fn analyze(cmd: AnalyzeCmd) -> Outcome {
    match cmd {
        AnalyzeCmd::Report { dir, by, format } => {
            let records = load_journal(&dir).map_err(harness_err)?;
            let keys: Vec<String> = by.unwrap_or_else(|| REPORT_KEYS.iter().map(|s| s.to_string()).collect());
            if let Some(bad) = keys.iter().find(|k| !GROUP_KEYS.contains(&k.as_str())) {
                return Err(Failure::Config(format!("unknown grouping key `{bad}`")));
            }
            let keys: Vec<&str> = keys.iter().map(String::as_str).collect();
            let classified: Vec<_> = records.iter().map(|r| r.classified()).collect();
            let report = distribution(&classified, &keys).map_err(harness_err)?;
            let text = match format {
                Format::Table => report.render_table(),
                Format::Csv => report.render_csv(),
                Format::Jsonl => report.render_jsonl(),
            };
            write_out(None, &text)
        }
        AnalyzeCmd::Classify { log } => {
            let outcome = classify(&parse_log(&read(&log)?));
            let mut text = format!("{}\n", outcome.primary);
            for line in &outcome.evidence {
                text += &format!("  {line}\n");
            }
            write_out(None, &text)
        }
    }
}

/// Binds `spec` on a standalone channel: operations to
/// `<channel>.<operation>`, resources to `<channel>.connect`.
fn channel_binding(spec: &FaultSpec, channel: &str) -> Option<Binding> {
    let (point, direction) = match &spec.target {
        Target::Operation { interface, operation } if interface == channel => {
            let dir = match spec.action {
                InjectionAction::CorruptPayload { .. } => Direction::Reply,
                _ => Direction::Request,
            };
            (format!("{channel}.{operation}"), Some(dir))
        }
        Target::Resource { resource } if resource == channel => (format!("{channel}.connect"), None),
        _ => return None,
    };
    Some(Binding {
        point,
        direction,
        spec: spec.clone(),
    })
}

fn wait_for_stdin_or(duration_ms: Option<u64>) {
    match duration_ms {
        Some(ms) => thread::sleep(Duration::from_millis(ms)),
        None => {
            let _ = io::stdin().read_to_end(&mut Vec::new());
        }
    }
}

fn proxy(cmd: ProxyCmd) -> Outcome {
    let ProxyCmd::Attach {
        listen,
        upstream,
        faults,
        channel,
        framing,
        seed,
        duration_ms,
        log,
    } = cmd;
    let specs = load_fault_model(&read(&faults)?).map_err(config_err)?;
    let channel = match channel {
        Some(c) => c,
        None => match specs.first().map(|s| &s.target) {
            Some(Target::Operation { interface, .. }) => interface.clone(),
            Some(Target::Resource { resource }) => resource.clone(),
            None => return Err(Failure::Config("fault model is empty; pass --channel".into())),
        },
    };
    let known = Topology::default().channels().into_iter().find(|c| c.name == channel);
    let info = ChannelInfo {
        name: channel.clone(),
        framing: match framing {
            FramingArg::Sirf => Framing::Sirf,
            FramingArg::At => Framing::AtLines,
        },
        operations: known.as_ref().map(|c| c.operations.clone()).unwrap_or_default(),
        path_hint: listen.display().to_string(),
        open_point: format!("{channel}.connect"),
    };
    let bindings: Vec<Binding> = specs.iter().filter_map(|s| channel_binding(s, &channel)).collect();
    eprintln!("{} of {} faults bound to channel `{channel}`", bindings.len(), specs.len());
    let controller = Arc::new(Controller::new(seed, bindings));
    let mut handle = attach_proxy(&listen, &upstream, info, Arc::clone(&controller)).map_err(harness_err)?;
    eprintln!("relaying {} -> {}", listen.display(), upstream.display());
    wait_for_stdin_or(duration_ms);
    handle.stop();
    write_out(log.as_deref(), &render_injection_log(&controller.injection_log()))
}

fn target(cmd: TargetCmd) -> Outcome {
    let TargetCmd::Run {
        topology,
        robustness,
        workload,
        duration_ms,
        seed,
    } = cmd;
    let topology = load_topology(topology.as_deref())?;
    let profile = RobustnessProfile::named(&robustness)
        .ok_or_else(|| Failure::Config(format!("unknown robustness profile `{robustness}`")))?;
    let workload = Workload::named(&workload).ok_or_else(|| Failure::Config(format!("unknown workload `{workload}`")))?;
    let dir = tempfile_dir().map_err(harness_err)?;
    let controller = Arc::new(Controller::new(seed, Vec::new()));
    let cfg = StackConfig {
        topology: topology.clone(),
        profile,
        ..StackConfig::default()
    };
    let mut stack = Stack::start(&dir, cfg, controller).map_err(harness_err)?;
    for ch in topology.channels() {
        eprintln!("{:<18} {}", ch.name, stack.endpoint(&ch.name).display());
    }
    let load = start_workload(&workload, seed, stack.dispatcher());
    let until = duration_ms.map(|ms| Instant::now() + Duration::from_millis(ms));
    let (tx, rx) = std::sync::mpsc::channel();
    if until.is_none() {
        thread::spawn(move || {
            let _ = io::stdin().read_to_end(&mut Vec::new());
            let _ = tx.send(());
        });
    }
    let mut shown = 0;
    loop {
        let lines = stack.logs();
        for l in &lines[shown..] {
            println!("{l}");
        }
        shown = lines.len();
        if until.is_some_and(|u| Instant::now() >= u) || rx.try_recv().is_ok() {
            break;
        }
        thread::sleep(Duration::from_millis(200));
    }
    let actions = load.finish();
    let report = stack.stop(Duration::from_secs(5));
    for l in &stack.logs()[shown..] {
        println!("{l}");
    }
    eprintln!("{} workload actions, {} threads force-killed", actions.len(), report.forced);
    drop(stack);
    let _ = fs::remove_dir_all(&dir);
    Ok(())
}

/// A short directory for sockets.
fn tempfile_dir() -> io::Result<PathBuf> {
    let dir = std::env::temp_dir().join(format!("sf{}", std::process::id()));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Model(c) => model(c),
        Command::Campaign(c) => campaign(c),
        Command::Analyze(c) => analyze(c),
        Command::Proxy(c) => proxy(c),
        Command::Target(c) => target(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Harness(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
