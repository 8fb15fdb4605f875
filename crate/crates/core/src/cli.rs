//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors (bad
//! corpus, bad spec, I/O failures).

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::campaign::{Campaign, CampaignConfig, StopCondition, DEFAULT_TIMEOUT_US};
use crate::codec::{parse_spec, LayoutSpec};
use crate::eval::{run_experiment, Experiment};
use crate::executor::{CommandHarness, Harness};
use crate::scheduler::{Schedule, DEFAULT_MAX_ENERGY};
use crate::targets::TargetKind;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "depthfuzz", version, about = "Field-selective grey-box fuzzer with a call-depth power schedule")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fuzz one target until the budget runs out.
    Run(RunArgs),
    /// Run repeated trials per schedule and compare them.
    Eval(EvalArgs),
    /// Validate a layout spec file.
    SpecCheck {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Print the layout spec of a built-in target.
    SpecDump {
        #[arg(long)]
        target: TargetKind,
        /// Write to this file instead of stdout.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("harness").required(true).args(["target", "cmd"])))]
pub struct RunArgs {
    /// Corpus directory.
    #[arg(short = 'i', long = "input")]
    pub input: PathBuf,
    #[arg(short = 'o', long = "output")]
    pub output: PathBuf,
    #[arg(long)]
    pub spec: PathBuf,
    /// Built-in in-process target.
    #[arg(long)]
    pub target: Option<TargetKind>,
    /// External command; `@@` is replaced by the input file path.
    #[arg(long)]
    pub cmd: Option<String>,
    #[arg(long, default_value = "depth")]
    pub schedule: Schedule,
    #[arg(long, default_value_t = DEFAULT_MAX_ENERGY)]
    pub max_energy: u32,
    #[arg(long, default_value_t = DEFAULT_TIMEOUT_US)]
    pub timeout_us: u64,
    #[arg(long, default_value_t = 0)]
    pub rng_seed: u64,
    /// Count time in executions instead of seconds.
    #[arg(long)]
    pub logical_time: bool,
    #[arg(long)]
    pub budget_execs: Option<u64>,
    #[arg(long)]
    pub budget_secs: Option<f64>,
    /// Suppress the status line.
    #[arg(short, long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub target: TargetKind,
    #[arg(long, value_delimiter = ',', default_value = "depth,afl")]
    pub schedules: Vec<Schedule>,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long)]
    pub budget_execs: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Trial `k` uses seed `rng_seed + k`.
    #[arg(long, default_value_t = 0)]
    pub rng_seed: u64,
    /// Fix the target instance for all trials instead of deriving it from
    /// each trial's seed.
    #[arg(long)]
    pub target_seed: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_MAX_ENERGY)]
    pub max_energy: u32,
    /// Run trials one at a time.
    #[arg(long)]
    pub sequential: bool,
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            EXIT_RUNTIME
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(String),
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run(args) => run(args),
        Command::Eval(args) => eval(args),
        Command::SpecCheck { spec } => {
            let spec = load_spec(&spec)?;
            let fuzz_bits = spec.view_len_bits();
            println!(
                "ok: {} fields, {} bytes, {} fuzzable bits",
                spec.fields().len(),
                spec.total_len_bytes(),
                fuzz_bits
            );
            Ok(())
        }
        Command::SpecDump { target, output } => {
            let text = target.layout().to_string();
            match output {
                Some(path) => fs::write(&path, text).map_err(|e| runtime(format!("{}: {e}", path.display()))),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
    }
}

fn load_spec(path: &PathBuf) -> Result<LayoutSpec, Failure> {
    let text = fs::read_to_string(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    parse_spec(&text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn run(args: RunArgs) -> Result<(), Failure> {
    if args.max_energy < 2 {
        return Err(Failure::Usage(format!("--max-energy must be at least 2, got {}", args.max_energy)));
    }
    let spec = load_spec(&args.spec)?;
    let harness: Box<dyn Harness> = match (&args.target, &args.cmd) {
        (Some(t), None) => t.harness(args.rng_seed),
        (None, Some(cmd)) => {
            fs::create_dir_all(&args.output).map_err(|e| runtime(format!("{}: {e}", args.output.display())))?;
            let input_path = args.output.join(".cur_input");
            Box::new(CommandHarness::new(cmd, input_path).ok_or_else(|| Failure::Usage("--cmd is empty".into()))?)
        }
        _ => return Err(Failure::Usage("exactly one of --target and --cmd is required".into())),
    };
    let cfg = CampaignConfig {
        schedule: args.schedule,
        max_energy: args.max_energy,
        timeout_us: args.timeout_us,
        rng_seed: args.rng_seed,
        logical_time: args.logical_time,
        out_dir: Some(args.output.clone()),
    };
    let mut campaign = Campaign::from_corpus_dir(&args.input, spec, harness, cfg).map_err(runtime)?;
    if !args.quiet {
        campaign.set_heartbeat(|hb| {
            eprintln!(
                "[{:>7.1}s] execs {} ({:.0}/s)  paths {}  max depth {}  crashes {}",
                hb.elapsed_secs, hb.execs, hb.execs_per_sec, hb.paths, hb.max_depth, hb.crashes
            );
        });
    }
    let stop = StopCondition { max_execs: args.budget_execs, max_seconds: args.budget_secs };
    let stats = campaign.run(stop).map_err(runtime)?;
    println!(
        "done: {} execs, {} paths, max depth {}, {} unique crashes, {} timeouts",
        stats.execs_total, stats.paths_total, stats.max_depth_global, stats.crashes_unique, stats.timeouts
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), Failure> {
    if args.max_energy < 2 {
        return Err(Failure::Usage(format!("--max-energy must be at least 2, got {}", args.max_energy)));
    }
    let mut exp = Experiment::new(args.target, args.trials, args.budget_execs);
    exp.schedules = args.schedules;
    exp.rng_seeds = (0..args.trials as u64).map(|k| args.rng_seed.wrapping_add(k)).collect();
    exp.target_seed = args.target_seed;
    exp.max_energy = args.max_energy;
    exp.out = args.out;
    exp.parallel = !args.sequential;
    let summary = run_experiment(&exp).map_err(runtime)?;
    print!("{}", summary.to_table());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(args: &[&str]) -> i32 {
        main_with_args(std::iter::once("depthfuzz").chain(args.iter().copied()))
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(code(&[]), EXIT_USAGE);
        assert_eq!(code(&["run", "-i", "c", "-o", "out", "--target", "nested8"]), EXIT_USAGE);
        assert_eq!(code(&["run", "-i", "c", "-o", "o", "--spec", "s", "--target", "nested8", "--cmd", "x"]), EXIT_USAGE);
        assert_eq!(code(&["run", "-i", "c", "-o", "o", "--spec", "s"]), EXIT_USAGE);
        assert_eq!(code(&["spec-dump", "--target", "nested99"]), EXIT_USAGE);
        assert_eq!(code(&["eval", "--target", "nested8", "--budget-execs", "10", "--schedules", "fast"]), EXIT_USAGE);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(code(&["--help"]), EXIT_OK);
    }

    #[test]
    fn spec_check_reports_bad_spec() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.spec");
        fs::write(&bad, "len 4\na 0 16 fuzz\nb 8 16 keep\n").unwrap();
        assert_eq!(code(&["spec-check", "--spec", bad.to_str().unwrap()]), EXIT_RUNTIME);

        let good = dir.path().join("nested8.spec");
        assert_eq!(code(&["spec-dump", "--target", "nested8", "-o", good.to_str().unwrap()]), EXIT_OK);
        assert_eq!(code(&["spec-check", "--spec", good.to_str().unwrap()]), EXIT_OK);
        assert_eq!(parse_spec(&fs::read_to_string(&good).unwrap()).unwrap(), TargetKind::Nested8.layout());
    }
}
