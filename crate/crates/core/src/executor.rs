//! Running one input against a target.
//!
//! Targets implement [`Harness`] and report feedback through a
//! [`ProbeContext`]: edge hits for coverage and scoped [`DepthGuard`]s for
//! the maximum calling-chain depth. [`Executor`] owns the context, resets it
//! before every run and packages the outcome as an [`ExecResult`].

use std::fmt;
use std::io::Read;
use std::ops::{Deref, DerefMut};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use crate::coverage::CoverageMap;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum RunStatus {
    Ok,
    Crash(String),
    Timeout,
}

impl RunStatus {
    pub fn crash(kind: impl Into<String>) -> Self {
        RunStatus::Crash(kind.into())
    }

    pub fn is_crash(&self) -> bool {
        matches!(self, RunStatus::Crash(_))
    }
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunStatus::Ok => f.write_str("ok"),
            RunStatus::Crash(kind) => write!(f, "crash({kind})"),
            RunStatus::Timeout => f.write_str("timeout"),
        }
    }
}

/// Feedback channel handed to a target for the duration of one run.
#[derive(Debug)]
pub struct ProbeContext {
    coverage: CoverageMap,
    current_depth: u32,
    max_depth: u32,
    ticks: u64,
    deadline: Option<Instant>,
}

impl Default for ProbeContext {
    fn default() -> Self {
        Self::new()
    }
}

impl ProbeContext {
    pub fn new() -> Self {
        Self { coverage: CoverageMap::new(), current_depth: 0, max_depth: 0, ticks: 0, deadline: None }
    }

    fn reset(&mut self, deadline: Option<Instant>) {
        self.coverage.reset();
        self.current_depth = 0;
        self.max_depth = 0;
        self.ticks = 0;
        self.deadline = deadline;
    }

    #[inline]
    pub fn record_edge(&mut self, site: u16) {
        self.ticks += 1;
        self.coverage.record_edge(site);
    }

    /// Enters an instrumented call. The depth drops back when the guard goes
    /// out of scope; the guard dereferences to the context so nested calls
    /// keep probing through it.
    #[inline]
    pub fn depth_guard(&mut self) -> DepthGuard<'_> {
        self.ticks += 1;
        self.current_depth += 1;
        self.max_depth = self.max_depth.max(self.current_depth);
        DepthGuard { ctx: self }
    }

    /// Raises the depth high-water mark to `depth` without entering a call.
    /// Used by targets that learn their depth out of band, such as the
    /// subprocess harness reading log markers.
    pub fn report_depth(&mut self, depth: u32) {
        self.max_depth = self.max_depth.max(depth);
    }

    pub fn current_depth(&self) -> u32 {
        self.current_depth
    }

    pub fn max_depth(&self) -> u32 {
        self.max_depth
    }

    /// Probe events (edges plus guard entries) so far in this run.
    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    pub fn coverage(&self) -> &CoverageMap {
        &self.coverage
    }

    pub fn deadline(&self) -> Option<Instant> {
        self.deadline
    }

    /// Cooperative timeout check for long-running targets.
    pub fn expired(&self) -> bool {
        self.deadline.is_some_and(|d| Instant::now() >= d)
    }
}

pub struct DepthGuard<'a> {
    ctx: &'a mut ProbeContext,
}

impl Deref for DepthGuard<'_> {
    type Target = ProbeContext;

    fn deref(&self) -> &ProbeContext {
        self.ctx
    }
}

impl DerefMut for DepthGuard<'_> {
    fn deref_mut(&mut self) -> &mut ProbeContext {
        self.ctx
    }
}

impl Drop for DepthGuard<'_> {
    fn drop(&mut self) {
        self.ctx.current_depth -= 1;
    }
}

/// An in-process fuzz target.
///
/// Implementations must be deterministic in `input` and must not carry state
/// from one run to the next beyond what [`Harness::reset`] clears.
pub trait Harness: Send {
    fn name(&self) -> &str;

    /// Called before every run.
    fn reset(&mut self) {}

    fn run(&mut self, input: &[u8], ctx: &mut ProbeContext) -> RunStatus;
}

/// Outcome of one execution. Coverage is borrowed from the executor and is
/// only valid until the next run.
#[derive(Debug, Clone)]
pub struct ExecResult<'a> {
    pub status: RunStatus,
    pub coverage: &'a CoverageMap,
    pub max_depth: u32,
    pub duration_us: u64,
    /// Probe events fired; a machine-independent cost measure.
    pub ticks: u64,
}

pub struct Executor {
    harness: Box<dyn Harness>,
    ctx: ProbeContext,
    timeout_us: u64,
}

impl fmt::Debug for Executor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Executor")
            .field("harness", &self.harness.name())
            .field("timeout_us", &self.timeout_us)
            .finish()
    }
}

impl Executor {
    pub fn new(harness: Box<dyn Harness>, timeout_us: u64) -> Self {
        Self { harness, ctx: ProbeContext::new(), timeout_us }
    }

    pub fn harness_name(&self) -> &str {
        self.harness.name()
    }

    pub fn timeout_us(&self) -> u64 {
        self.timeout_us
    }

    /// Runs `input`, which must already be a full-layout input.
    ///
    /// # Panics
    ///
    /// If the harness leaves a depth guard open (e.g. via `mem::forget`).
    pub fn run(&mut self, input: &[u8]) -> ExecResult<'_> {
        let start = Instant::now();
        let deadline = start.checked_add(Duration::from_micros(self.timeout_us));
        self.ctx.reset(deadline);
        self.harness.reset();
        let mut status = self.harness.run(input, &mut self.ctx);
        let elapsed = start.elapsed();
        assert_eq!(
            self.ctx.current_depth, 0,
            "harness `{}` returned with unbalanced depth guards",
            self.harness.name()
        );
        let duration_us = (elapsed.as_micros() as u64).max(1);
        if duration_us > self.timeout_us && status == RunStatus::Ok {
            status = RunStatus::Timeout;
        }
        ExecResult {
            status,
            coverage: &self.ctx.coverage,
            max_depth: self.ctx.max_depth,
            duration_us,
            ticks: self.ctx.ticks,
        }
    }
}

pub const DEPTH_MARKER: &str = "MF_DEPTH=";

/// Largest `MF_DEPTH=<n>` value in a captured log, or 0 when no line
/// carries the marker. Lines with a non-numeric value are skipped with a
/// warning.
pub fn parse_depth_from_log(log_text: &str) -> u32 {
    parse_depth_with_warnings(log_text).0
}

/// [`parse_depth_from_log`] that also returns how many marker lines were
/// malformed.
pub fn parse_depth_with_warnings(log_text: &str) -> (u32, usize) {
    let mut best = 0u32;
    let mut warnings = 0;
    for line in log_text.lines() {
        let Some(value) = line.trim().strip_prefix(DEPTH_MARKER) else {
            continue;
        };
        match value.trim().parse::<u32>() {
            Ok(d) => best = best.max(d),
            Err(_) => {
                warnings += 1;
                log::warn!("ignoring malformed depth marker: {line:?}");
            }
        }
    }
    (best, warnings)
}

/// Site id reserved for the synthetic edge the subprocess harness records
/// per observed depth.
const SUBPROCESS_DEPTH_SITE_BASE: u16 = 0x5a00;

/// Runs an external command per input. `@@` in the argument list is
/// replaced by the path of a file holding the input; without `@@` the input
/// is fed on stdin. There is no edge coverage: each distinct depth becomes a
/// synthetic edge, so novelty is by depth only.
#[derive(Debug)]
pub struct CommandHarness {
    name: String,
    program: String,
    args: Vec<String>,
    input_path: PathBuf,
}

impl CommandHarness {
    pub fn new(template: &str, input_path: PathBuf) -> Option<Self> {
        let mut words = template.split_whitespace().map(str::to_owned);
        let program = words.next()?;
        Some(Self { name: template.to_owned(), program, args: words.collect(), input_path })
    }

    fn uses_file(&self) -> bool {
        self.args.iter().any(|a| a.contains("@@"))
    }
}

impl Harness for CommandHarness {
    fn name(&self) -> &str {
        &self.name
    }

    fn run(&mut self, input: &[u8], ctx: &mut ProbeContext) -> RunStatus {
        let file_mode = self.uses_file();
        let path = self.input_path.to_string_lossy().into_owned();
        if file_mode {
            if let Err(e) = std::fs::write(&self.input_path, input) {
                log::error!("cannot write {}: {e}", self.input_path.display());
                return RunStatus::crash("harness_io");
            }
        }
        let mut cmd = Command::new(&self.program);
        cmd.args(self.args.iter().map(|a| a.replace("@@", &path)))
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .stdin(if file_mode { Stdio::null() } else { Stdio::piped() });
        let mut child = match cmd.spawn() {
            Ok(c) => c,
            Err(e) => {
                log::error!("cannot spawn {}: {e}", self.program);
                return RunStatus::crash("spawn_failed");
            }
        };
        let mut stdout = child.stdout.take().expect("stdout is piped");
        let reader = std::thread::spawn(move || {
            let mut buf = String::new();
            let _ = stdout.read_to_string(&mut buf);
            buf
        });
        if let Some(mut stdin) = child.stdin.take() {
            use std::io::Write;
            let _ = stdin.write_all(input);
        }

        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break Some(status),
                Ok(None) if ctx.expired() => {
                    let _ = child.kill();
                    let _ = child.wait();
                    break None;
                }
                Ok(None) => std::thread::sleep(Duration::from_micros(200)),
                Err(e) => {
                    log::error!("wait failed: {e}");
                    break None;
                }
            }
        };
        let log_text = reader.join().unwrap_or_default();
        let depth = parse_depth_from_log(&log_text);
        ctx.report_depth(depth);
        ctx.record_edge(SUBPROCESS_DEPTH_SITE_BASE.wrapping_add(depth.min(0xff) as u16));

        match status {
            None => RunStatus::Timeout,
            Some(s) if s.success() => RunStatus::Ok,
            Some(s) => match s.code() {
                Some(code) => RunStatus::Crash(format!("exit_{code}")),
                None => RunStatus::crash("signal"),
            },
        }
    }
}
