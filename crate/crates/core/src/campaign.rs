//! The fuzzing loop.
//!
//! Seeds are fuzzed round-robin in discovery order. Each pass re-executes
//! the seed (refreshing its last observed depth), runs the deterministic
//! stage the first time the seed is picked, then a havoc stage whose length
//! is the energy assigned by the configured schedule. Candidates that light
//! up unseen coverage buckets join the queue; crashes are deduplicated by
//! `(kind, coverage fingerprint)`.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codec::{extract, restore_into, LayoutSpec, MutationView};
use crate::coverage::{Novelty, VirginMap};
use crate::executor::{ExecResult, Executor, Harness, RunStatus};
use crate::mutator::{deterministic_ops, havoc_stage, MutationBudget};
use crate::scheduler::{
    assign_energy, base_energy, validity, DepthLedger, EnergyConfig, InvalidMaxEnergy, QueueStats, Schedule,
    DEFAULT_MAX_ENERGY,
};

/// Executions between plot samples in logical-time mode.
pub const LOGICAL_SAMPLE_EXECS: u64 = 1000;
pub const DEFAULT_TIMEOUT_US: u64 = 1_000_000;
pub const PLOT_HEADER: &str = "time,execs,paths,max_depth,unique_crashes";

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("corpus {0} holds no input files")]
    EmptyCorpus(PathBuf),
    #[error("corpus file `{file}` is {actual} bytes, the layout expects {expected}")]
    WrongLength { file: String, expected: usize, actual: usize },
    #[error("the layout has no fuzzable fields")]
    NoFuzzFields,
    #[error(transparent)]
    Energy(#[from] InvalidMaxEnergy),
    #[error("output directory {0} already holds a campaign")]
    OutputExists(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CampaignError + '_ {
    move |source| CampaignError::Io { path: path.to_owned(), source }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CampaignConfig {
    pub schedule: Schedule,
    pub max_energy: u32,
    pub timeout_us: u64,
    pub rng_seed: u64,
    /// Use execution counts as the clock; every execution costs one unit.
    pub logical_time: bool,
    pub out_dir: Option<PathBuf>,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::DepthBased,
            max_energy: DEFAULT_MAX_ENERGY,
            timeout_us: DEFAULT_TIMEOUT_US,
            rng_seed: 0,
            logical_time: false,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StopCondition {
    pub max_execs: Option<u64>,
    pub max_seconds: Option<f64>,
}

impl StopCondition {
    pub fn execs(n: u64) -> Self {
        Self { max_execs: Some(n), max_seconds: None }
    }

    pub fn seconds(s: f64) -> Self {
        Self { max_execs: None, max_seconds: Some(s) }
    }

    pub fn unlimited() -> Self {
        Self::default()
    }
}

/// A queue entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Seed {
    pub id: u64,
    pub input: Vec<u8>,
    /// Cost of the discovery run: microseconds, or 1 in logical-time mode.
    pub exec_time: u64,
    pub bucket_popcount: u64,
    pub last_depth: u32,
    pub discovery_depth: u32,
    pub deterministic_done: bool,
    /// Discovery timestamp in plot-time units.
    pub discovery_time: u64,
    pub discovery_execs: u64,
    pub parent_id: Option<u64>,
    pub fingerprint: u64,
    pub novelty: Novelty,
    pub passes: u32,
}

impl Seed {
    pub fn file_name(&self) -> String {
        let src = match self.parent_id {
            Some(p) => format!("{p:06}"),
            None => "init".to_owned(),
        };
        format!("id:{:06},src:{},depth:{}", self.id, src, self.discovery_depth)
    }

    #[cfg(test)]
    pub(crate) fn for_test(input: Vec<u8>) -> Self {
        Self {
            id: 0,
            input,
            exec_time: 1,
            bucket_popcount: 1,
            last_depth: 0,
            discovery_depth: 0,
            deterministic_done: false,
            discovery_time: 0,
            discovery_execs: 0,
            parent_id: None,
            fingerprint: 0,
            novelty: Novelty::NewEdge,
            passes: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrashRecord {
    pub id: u64,
    pub kind: String,
    pub input: Vec<u8>,
    pub fingerprint: u64,
    pub execs: u64,
}

impl CrashRecord {
    pub fn file_name(&self) -> String {
        format!("id:{:06},kind:{}", self.id, self.kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatsRow {
    pub time: u64,
    pub execs: u64,
    pub paths: u64,
    pub max_depth: u32,
    pub unique_crashes: u64,
}

impl StatsRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{}", self.time, self.execs, self.paths, self.max_depth, self.unique_crashes)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CampaignStats {
    pub execs_total: u64,
    pub init_execs: u64,
    pub paths_total: u64,
    pub crashes_total: u64,
    pub crashes_unique: u64,
    pub timeouts: u64,
    pub max_depth_global: u32,
    pub elapsed_us: u64,
    pub series: Vec<StatsRow>,
    /// `path_execs[k]` is the execution count at which path `k + 1` was
    /// saved.
    pub path_execs: Vec<u64>,
    /// Execution count of the first crash of each kind.
    pub first_crash_execs: BTreeMap<String, u64>,
}

/// What one call to [`Campaign::fuzz_one`] did.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PassReport {
    pub seed_id: u64,
    pub base_energy: u32,
    pub energy: u32,
    pub validity: f64,
    pub deterministic_execs: u64,
    pub havoc_execs: u64,
    pub new_paths: u64,
    pub completed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Heartbeat {
    pub elapsed_secs: f64,
    pub execs: u64,
    pub execs_per_sec: f64,
    pub paths: u64,
    pub max_depth: u32,
    pub crashes: u64,
}

struct Output {
    root: PathBuf,
    plot: BufWriter<File>,
    rows_written: usize,
}

impl Output {
    fn create(root: &Path) -> Result<Self, CampaignError> {
        let queue = root.join("queue");
        if queue.is_dir() && fs::read_dir(&queue).map_err(io_err(&queue))?.next().is_some() {
            return Err(CampaignError::OutputExists(root.to_owned()));
        }
        for dir in [root.to_owned(), queue, root.join("crashes")] {
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        let plot_path = root.join("plot_data.csv");
        let mut plot = BufWriter::new(File::create(&plot_path).map_err(io_err(&plot_path))?);
        writeln!(plot, "{PLOT_HEADER}").map_err(io_err(&plot_path))?;
        let fp_path = root.join("fingerprints.csv");
        fs::write(&fp_path, "id,fingerprint,depth,novelty\n").map_err(io_err(&fp_path))?;
        Ok(Self { root: root.to_owned(), plot, rows_written: 0 })
    }

    fn save_seed(&self, seed: &Seed) -> Result<(), CampaignError> {
        let path = self.root.join("queue").join(seed.file_name());
        fs::write(&path, &seed.input).map_err(io_err(&path))?;
        let fp_path = self.root.join("fingerprints.csv");
        let mut f = OpenOptions::new().append(true).open(&fp_path).map_err(io_err(&fp_path))?;
        let novelty = match seed.novelty {
            Novelty::NewEdge => "edge",
            Novelty::NewBucket => "bucket",
            Novelty::Nothing => "init",
        };
        writeln!(f, "{},{:016x},{},{}", seed.id, seed.fingerprint, seed.discovery_depth, novelty)
            .map_err(io_err(&fp_path))
    }

    fn save_crash(&self, crash: &CrashRecord) -> Result<(), CampaignError> {
        let path = self.root.join("crashes").join(crash.file_name());
        fs::write(&path, &crash.input).map_err(io_err(&path))
    }

    fn flush_rows(&mut self, rows: &[StatsRow]) -> Result<(), CampaignError> {
        let path = self.root.join("plot_data.csv");
        for row in &rows[self.rows_written..] {
            writeln!(self.plot, "{}", row.to_csv()).map_err(io_err(&path))?;
        }
        self.rows_written = rows.len();
        self.plot.flush().map_err(io_err(&path))
    }

    fn write_stats(&self, lines: &[(&str, String)]) -> Result<(), CampaignError> {
        let path = self.root.join("fuzzer_stats");
        let body: String = lines.iter().map(|(k, v)| format!("{k:<18}: {v}\n")).collect();
        fs::write(&path, body).map_err(io_err(&path))
    }
}

/// Reads every regular, non-hidden file of `dir`, sorted by name.
pub fn load_corpus_dir(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, CampaignError> {
    let mut entries = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') || !path.is_file() {
            continue;
        }
        let data = fs::read(&path).map_err(io_err(&path))?;
        entries.push((name, data));
    }
    if entries.is_empty() {
        return Err(CampaignError::EmptyCorpus(dir.to_owned()));
    }
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(entries)
}

pub struct Campaign {
    spec: LayoutSpec,
    executor: Executor,
    cfg: CampaignConfig,
    energy_cfg: EnergyConfig,
    virgin: VirginMap,
    queue: Vec<Seed>,
    ledger: DepthLedger,
    stats: CampaignStats,
    crash_keys: HashSet<(String, u64)>,
    crashes: Vec<CrashRecord>,
    rng: ChaCha8Rng,
    cursor: usize,
    started: Instant,
    output: Option<Output>,
    scratch: Vec<u8>,
    stop: StopCondition,
    run_started: Instant,
    next_sample: u64,
    last_heartbeat: Instant,
    heartbeat: Option<Box<dyn FnMut(&Heartbeat)>>,
    cost_sum: u64,
    popcount_sum: u64,
    io_error: Option<CampaignError>,
}

impl std::fmt::Debug for Campaign {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Campaign")
            .field("target", &self.executor.harness_name())
            .field("cfg", &self.cfg)
            .field("queue", &self.queue.len())
            .field("stats", &self.stats)
            .finish()
    }
}

impl Campaign {
    /// Executes every corpus input once and admits the ones that add
    /// coverage (the first input is always admitted).
    pub fn init(
        corpus: Vec<(String, Vec<u8>)>,
        spec: LayoutSpec,
        harness: Box<dyn Harness>,
        cfg: CampaignConfig,
    ) -> Result<Self, CampaignError> {
        if corpus.is_empty() {
            return Err(CampaignError::EmptyCorpus(PathBuf::from("<memory>")));
        }
        if !spec.has_fuzz_fields() {
            return Err(CampaignError::NoFuzzFields);
        }
        let expected = spec.total_len_bytes();
        if let Some((name, data)) = corpus.iter().find(|(_, d)| d.len() != expected) {
            return Err(CampaignError::WrongLength { file: name.clone(), expected, actual: data.len() });
        }
        let energy_cfg = EnergyConfig::new(cfg.max_energy, cfg.schedule)?;
        let output = cfg.out_dir.as_deref().map(Output::create).transpose()?;
        let now = Instant::now();

        let mut campaign = Self {
            spec,
            executor: Executor::new(harness, cfg.timeout_us),
            energy_cfg,
            virgin: VirginMap::new(),
            queue: Vec::new(),
            ledger: DepthLedger::new(),
            stats: CampaignStats::default(),
            crash_keys: HashSet::new(),
            crashes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.rng_seed),
            cursor: 0,
            started: now,
            output,
            scratch: Vec::with_capacity(expected),
            stop: StopCondition::unlimited(),
            run_started: now,
            next_sample: 0,
            last_heartbeat: now,
            heartbeat: None,
            cost_sum: 0,
            popcount_sum: 0,
            io_error: None,
            cfg,
        };

        for (_, input) in corpus {
            let r = campaign.executor.run(&input);
            let status = r.status.clone();
            let depth = r.max_depth;
            let cost = if campaign.cfg.logical_time { 1 } else { r.duration_us };
            let fingerprint = r.coverage.fingerprint();
            let popcount = r.coverage.edge_count() as u64;
            let novelty = campaign.virgin.update_from(r.coverage);
            campaign.stats.execs_total += 1;
            campaign.ledger.observe_depth(depth);
            if let RunStatus::Crash(kind) = &status {
                campaign.record_crash(kind, fingerprint, &input);
            }
            if novelty.is_new() || campaign.queue.is_empty() {
                campaign.add_seed(input, None, cost, popcount, depth, fingerprint, Novelty::Nothing);
            }
        }
        campaign.stats.init_execs = campaign.stats.execs_total;
        campaign.stats.max_depth_global = campaign.ledger.global_max_depth();
        campaign.next_sample = campaign.stats.execs_total + LOGICAL_SAMPLE_EXECS;
        campaign.push_row();
        campaign.flush_outputs();
        campaign.take_io_error()?;
        Ok(campaign)
    }

    /// [`Campaign::init`] from the files of a corpus directory.
    pub fn from_corpus_dir(
        dir: &Path,
        spec: LayoutSpec,
        harness: Box<dyn Harness>,
        cfg: CampaignConfig,
    ) -> Result<Self, CampaignError> {
        Self::init(load_corpus_dir(dir)?, spec, harness, cfg)
    }

    pub fn set_heartbeat(&mut self, f: impl FnMut(&Heartbeat) + 'static) {
        self.heartbeat = Some(Box::new(f));
    }

    pub fn queue(&self) -> &[Seed] {
        &self.queue
    }

    pub fn crashes(&self) -> &[CrashRecord] {
        &self.crashes
    }

    pub fn stats(&self) -> &CampaignStats {
        &self.stats
    }

    pub fn ledger(&self) -> &DepthLedger {
        &self.ledger
    }

    pub fn virgin(&self) -> &VirginMap {
        &self.virgin
    }

    pub fn spec(&self) -> &LayoutSpec {
        &self.spec
    }

    pub fn config(&self) -> &CampaignConfig {
        &self.cfg
    }

    pub fn queue_stats(&self) -> QueueStats {
        let n = self.queue.len().max(1) as f64;
        QueueStats { avg_exec_time: self.cost_sum as f64 / n, avg_bucket_popcount: self.popcount_sum as f64 / n }
    }

    /// Runs `input` outside the campaign bookkeeping and returns its status,
    /// coverage fingerprint and depth.
    pub fn replay(&mut self, input: &[u8]) -> (RunStatus, u64, u32) {
        let r = self.executor.run(input);
        (r.status.clone(), r.coverage.fingerprint(), r.max_depth)
    }

    /// Energy the next pass over queue entry `idx` would get, given its
    /// current `last_depth`.
    pub fn planned_energy(&self, idx: usize) -> (u32, u32, f64) {
        let seed = &self.queue[idx];
        let p = base_energy(seed, &self.queue_stats(), self.energy_cfg.max_energy());
        let v = validity(&self.ledger, seed);
        let e = assign_energy(&self.energy_cfg, p, || v);
        (p, e, v)
    }

    fn time_now(&self) -> u64 {
        if self.cfg.logical_time {
            self.stats.execs_total
        } else {
            self.started.elapsed().as_secs()
        }
    }

    fn should_stop(&self) -> bool {
        if self.stop.max_execs.is_some_and(|m| self.stats.execs_total >= m) {
            return true;
        }
        self.stop.max_seconds.is_some_and(|s| self.run_started.elapsed().as_secs_f64() >= s)
    }

    #[allow(clippy::too_many_arguments)]
    fn add_seed(
        &mut self,
        input: Vec<u8>,
        parent_id: Option<u64>,
        cost: u64,
        popcount: u64,
        depth: u32,
        fingerprint: u64,
        novelty: Novelty,
    ) {
        let seed = Seed {
            id: self.queue.len() as u64,
            input,
            exec_time: cost,
            bucket_popcount: popcount,
            last_depth: depth,
            discovery_depth: depth,
            deterministic_done: false,
            discovery_time: self.time_now(),
            discovery_execs: self.stats.execs_total,
            parent_id,
            fingerprint,
            novelty,
            passes: 0,
        };
        self.cost_sum += cost;
        self.popcount_sum += popcount;
        self.stats.paths_total += 1;
        self.stats.path_execs.push(self.stats.execs_total);
        if let Some(out) = &self.output {
            if let Err(e) = out.save_seed(&seed) {
                self.io_error.get_or_insert(e);
            }
        }
        self.queue.push(seed);
    }

    fn record_crash(&mut self, kind: &str, fingerprint: u64, input: &[u8]) {
        self.stats.crashes_total += 1;
        if !self.crash_keys.insert((kind.to_owned(), fingerprint)) {
            return;
        }
        self.stats.first_crash_execs.entry(kind.to_owned()).or_insert(self.stats.execs_total);
        let crash = CrashRecord {
            id: self.crashes.len() as u64,
            kind: kind.to_owned(),
            input: input.to_vec(),
            fingerprint,
            execs: self.stats.execs_total,
        };
        self.stats.crashes_unique += 1;
        if let Some(out) = &self.output {
            if let Err(e) = out.save_crash(&crash) {
                self.io_error.get_or_insert(e);
            }
        }
        self.crashes.push(crash);
    }

    fn push_row(&mut self) {
        let row = StatsRow {
            time: self.time_now(),
            execs: self.stats.execs_total,
            paths: self.stats.paths_total,
            max_depth: self.ledger.global_max_depth(),
            unique_crashes: self.stats.crashes_unique,
        };
        if self.stats.series.last() != Some(&row) {
            self.stats.series.push(row);
        }
    }

    fn flush_outputs(&mut self) {
        self.stats.elapsed_us = self.started.elapsed().as_micros() as u64;
        let Some(out) = self.output.as_mut() else {
            return;
        };
        let mut result = out.flush_rows(&self.stats.series);
        if result.is_ok() {
            let s = &self.stats;
            let secs = (s.elapsed_us as f64 / 1e6).max(1e-6);
            let lines = [
                ("target", self.executor.harness_name().to_owned()),
                ("schedule", self.cfg.schedule.to_string()),
                ("max_energy", self.cfg.max_energy.to_string()),
                ("rng_seed", self.cfg.rng_seed.to_string()),
                ("logical_time", self.cfg.logical_time.to_string()),
                ("execs_done", s.execs_total.to_string()),
                ("execs_per_sec", format!("{:.1}", s.execs_total as f64 / secs)),
                ("paths_total", s.paths_total.to_string()),
                ("max_depth", self.ledger.global_max_depth().to_string()),
                ("unique_crashes", s.crashes_unique.to_string()),
                ("total_crashes", s.crashes_total.to_string()),
                ("timeouts", s.timeouts.to_string()),
                ("elapsed_us", s.elapsed_us.to_string()),
            ];
            result = out.write_stats(&lines);
        }
        if let Err(e) = result {
            self.io_error.get_or_insert(e);
        }
    }

    fn take_io_error(&mut self) -> Result<(), CampaignError> {
        match self.io_error.take() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Bookkeeping after every execution: plot samples and the heartbeat.
    fn after_exec(&mut self) {
        self.stats.max_depth_global = self.ledger.global_max_depth();
        if self.cfg.logical_time {
            if self.stats.execs_total >= self.next_sample {
                self.push_row();
                self.next_sample += LOGICAL_SAMPLE_EXECS;
            }
        } else if self.stats.execs_total % 256 == 0 {
            let secs = self.started.elapsed().as_secs();
            if secs >= self.next_sample {
                self.push_row();
                self.next_sample = secs + 1;
                self.flush_outputs();
            }
        }
        if self.heartbeat.is_some() && self.stats.execs_total % 1024 == 0 && self.last_heartbeat.elapsed().as_secs() >= 1
        {
            self.last_heartbeat = Instant::now();
            self.emit_heartbeat();
        }
    }

    fn emit_heartbeat(&mut self) {
        let elapsed = self.started.elapsed().as_secs_f64();
        let beat = Heartbeat {
            elapsed_secs: elapsed,
            execs: self.stats.execs_total,
            execs_per_sec: self.stats.execs_total as f64 / elapsed.max(1e-6),
            paths: self.stats.paths_total,
            max_depth: self.ledger.global_max_depth(),
            crashes: self.stats.crashes_unique,
        };
        if let Some(f) = self.heartbeat.as_mut() {
            f(&beat);
        }
    }

    /// Restores `cand` over `parent`, runs it and files the result. Returns
    /// true when the candidate became a new queue entry.
    fn evaluate(&mut self, parent: &[u8], parent_id: u64, cand: &MutationView) -> bool {
        restore_into(&self.spec, parent, cand, &mut self.scratch).expect("candidate shape follows the layout");
        let r: ExecResult<'_> = self.executor.run(&self.scratch);
        let depth = r.max_depth;
        let cost = if self.cfg.logical_time { 1 } else { r.duration_us };
        self.stats.execs_total += 1;
        self.ledger.observe_depth(depth);
        let mut saved = false;
        match r.status {
            RunStatus::Ok => {
                let novelty = self.virgin.update_from(r.coverage);
                if novelty.is_new() {
                    let fingerprint = r.coverage.fingerprint();
                    let popcount = r.coverage.edge_count() as u64;
                    let input = self.scratch.clone();
                    self.add_seed(input, Some(parent_id), cost, popcount, depth, fingerprint, novelty);
                    saved = true;
                }
            }
            RunStatus::Crash(ref kind) => {
                let kind = kind.clone();
                let fingerprint = r.coverage.fingerprint();
                let input = std::mem::take(&mut self.scratch);
                self.record_crash(&kind, fingerprint, &input);
                self.scratch = input;
            }
            RunStatus::Timeout => self.stats.timeouts += 1,
        }
        self.after_exec();
        saved
    }

    /// One fuzzing pass over queue entry `idx`.
    pub fn fuzz_one(&mut self, idx: usize) -> PassReport {
        let mut report = PassReport { seed_id: idx as u64, ..Default::default() };
        if self.should_stop() {
            return report;
        }
        let parent = self.queue[idx].input.clone();
        let parent_id = self.queue[idx].id;

        // refresh the seed's last depth
        let depth = self.executor.run(&parent).max_depth;
        self.stats.execs_total += 1;
        self.ledger.observe_execution(&mut self.queue[idx], depth);
        self.after_exec();
        self.queue[idx].passes += 1;

        let (p, energy, v) = self.planned_energy(idx);
        report.base_energy = p;
        report.energy = energy;
        report.validity = v;

        let view = extract(&self.spec, &parent).expect("queued inputs match the layout");
        let paths_before = self.stats.paths_total;

        if !self.queue[idx].deterministic_done {
            let mut cand = view.clone();
            for op in deterministic_ops(view.len_bits()) {
                if self.should_stop() {
                    report.new_paths = self.stats.paths_total - paths_before;
                    return report;
                }
                cand.bits.copy_from_bitslice(&view.bits);
                op.apply(&mut cand.bits);
                self.evaluate(&parent, parent_id, &cand);
                report.deterministic_execs += 1;
            }
            self.queue[idx].deterministic_done = true;
        }

        let budget = MutationBudget { energy, rng_seed: self.rng.next_u64() };
        let mut stage = havoc_stage(&view, budget);
        let mut cand = view.clone();
        loop {
            if self.should_stop() {
                report.new_paths = self.stats.paths_total - paths_before;
                return report;
            }
            if !stage.next_into(&mut cand) {
                break;
            }
            self.evaluate(&parent, parent_id, &cand);
            report.havoc_execs += 1;
        }
        report.new_paths = self.stats.paths_total - paths_before;
        report.completed = true;
        report
    }

    /// Fuzzes the queue round-robin until `stop` is reached, then writes the
    /// plot file and the final stats.
    pub fn run(&mut self, stop: StopCondition) -> Result<&CampaignStats, CampaignError> {
        self.stop = stop;
        self.run_started = Instant::now();
        while !self.should_stop() {
            let idx = self.cursor % self.queue.len();
            self.fuzz_one(idx);
            self.cursor = idx + 1;
            if self.io_error.is_some() {
                break;
            }
        }
        self.push_row();
        self.flush_outputs();
        self.take_io_error()?;
        Ok(&self.stats)
    }
}

/// Convenience wrapper: [`Campaign::run`] returning owned stats.
pub fn run_campaign(campaign: &mut Campaign, stop: StopCondition) -> Result<CampaignStats, CampaignError> {
    campaign.run(stop).cloned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::{NestedGateTarget, TargetKind};

    fn nested_campaign(schedule: Schedule, corpus: Vec<Vec<u8>>) -> Campaign {
        let cfg = CampaignConfig { schedule, logical_time: true, rng_seed: 7, ..Default::default() };
        let corpus = corpus.into_iter().enumerate().map(|(i, c)| (format!("c{i}"), c)).collect();
        Campaign::init(corpus, TargetKind::Nested8.layout(), TargetKind::Nested8.harness(42), cfg).unwrap()
    }

    #[test]
    fn single_seed_init() {
        let c = nested_campaign(Schedule::DepthBased, vec![TargetKind::Nested8.default_seed()]);
        assert_eq!(c.queue().len(), 1);
        assert_eq!(c.stats().paths_total, 1);
        assert_eq!(c.stats().execs_total, 1);
        assert_eq!(c.queue()[0].file_name(), "id:000000,src:init,depth:1");
    }

    #[test]
    fn duplicate_seed_is_not_admitted() {
        let seed = TargetKind::Nested8.default_seed();
        let c = nested_campaign(Schedule::DepthBased, vec![seed.clone(), seed]);
        assert_eq!(c.stats().execs_total, 2);
        assert_eq!(c.queue().len(), 1);
    }

    #[test]
    fn wrong_length_names_the_file() {
        let corpus = vec![("ok".to_owned(), vec![0; 64]), ("short".to_owned(), vec![0; 63])];
        let err = Campaign::init(
            corpus,
            TargetKind::Nested8.layout(),
            TargetKind::Nested8.harness(0),
            CampaignConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, CampaignError::WrongLength { ref file, expected: 64, actual: 63 } if file == "short"));
    }

    #[test]
    fn rejects_empty_corpus_and_frozen_layout() {
        let err = Campaign::init(vec![], TargetKind::Nested8.layout(), TargetKind::Nested8.harness(0), Default::default())
            .unwrap_err();
        assert!(matches!(err, CampaignError::EmptyCorpus(_)));
        let frozen = crate::codec::parse_spec("len 64\nall 0 512 keep").unwrap();
        let err = Campaign::init(
            vec![("a".into(), vec![0; 64])],
            frozen,
            TargetKind::Nested8.harness(0),
            Default::default(),
        )
        .unwrap_err();
        assert!(matches!(err, CampaignError::NoFuzzFields));
    }

    #[test]
    fn zero_budget_runs_only_init() {
        let mut c = nested_campaign(Schedule::DepthBased, vec![TargetKind::Nested8.default_seed()]);
        let stats = run_campaign(&mut c, StopCondition::execs(0)).unwrap();
        assert_eq!(stats.execs_total, stats.init_execs);
        assert_eq!(stats.paths_total, 1);
    }

    #[test]
    fn pass_energy_follows_schedule() {
        let t = NestedGateTarget::new(8, 42);
        for (schedule, factor) in [(Schedule::DepthBased, 2), (Schedule::AflBase, 1)] {
            let mut c = nested_campaign(schedule, vec![t.input_passing(2)]);
            let (p, _, v) = c.planned_energy(0);
            assert_eq!(p, 100, "a lone seed is exactly average");
            assert_eq!(v, 1.0);
            let report = c.fuzz_one(0);
            assert!(report.completed);
            assert_eq!(report.energy, 100 * factor);
            assert_eq!(report.havoc_execs, 100 * factor as u64);
            assert_eq!(report.deterministic_execs, crate::mutator::deterministic_count(128) as u64);
            assert_eq!(c.stats().execs_total, 1 + 1 + report.deterministic_execs + report.havoc_execs);
        }
    }

    #[test]
    fn second_pass_skips_deterministic_stage() {
        let mut c = nested_campaign(Schedule::AflBase, vec![TargetKind::Nested8.default_seed()]);
        c.fuzz_one(0);
        let report = c.fuzz_one(0);
        assert_eq!(report.deterministic_execs, 0);
        assert_eq!(report.havoc_execs, report.energy as u64);
    }

    #[test]
    fn deep_crash_is_recorded_once() {
        let t = NestedGateTarget::new(8, 42);
        // one bit away from the crash: the deterministic stage finds it
        let mut input = t.input_passing(8);
        input[4 + 15] ^= 0x01;
        let mut c = nested_campaign(Schedule::DepthBased, vec![input]);
        c.fuzz_one(0);
        assert_eq!(c.stats().crashes_unique, 1);
        assert!(c.stats().first_crash_execs.contains_key("deep_bug"));
        let crash = &c.crashes()[0];
        assert_eq!(crash.kind, "deep_bug");
        assert_eq!(crash.file_name(), "id:000000,kind:deep_bug");
        let replay = c.replay(&crash.input.clone());
        assert_eq!(replay.0, RunStatus::Crash("deep_bug".into()));
        assert!(c.stats().crashes_total >= c.stats().crashes_unique);
    }

    #[test]
    fn queue_invariants_hold_after_a_run() {
        let mut c = nested_campaign(Schedule::DepthBased, vec![TargetKind::Nested8.default_seed()]);
        c.run(StopCondition::execs(30_000)).unwrap();
        assert_eq!(c.stats().paths_total as usize, c.queue().len());
        assert_eq!(c.stats().path_execs.len(), c.queue().len());
        assert!(c.queue().len() > 1);
        for seed in c.queue().to_vec() {
            let (status, fp, depth) = c.replay(&seed.input);
            assert_eq!(status, RunStatus::Ok);
            assert_eq!(fp, seed.fingerprint);
            assert_eq!(depth, seed.discovery_depth);
        }
        let series = &c.stats().series;
        for w in series.windows(2) {
            assert!(w[0].execs <= w[1].execs && w[0].paths <= w[1].paths && w[0].max_depth <= w[1].max_depth);
        }
        assert_eq!(series.last().unwrap().execs, c.stats().execs_total);
    }

    #[test]
    fn runs_are_reproducible() {
        let run = || {
            let mut c = nested_campaign(Schedule::DepthBased, vec![TargetKind::Nested8.default_seed()]);
            c.run(StopCondition::execs(20_000)).unwrap().clone()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.series, b.series);
        assert_eq!(a.path_execs, b.path_execs);
    }

    #[test]
    fn writes_output_layout() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let cfg = CampaignConfig { logical_time: true, out_dir: Some(out.clone()), ..Default::default() };
        let corpus = vec![("a".to_owned(), TargetKind::Nested8.default_seed())];
        let mut c =
            Campaign::init(corpus.clone(), TargetKind::Nested8.layout(), TargetKind::Nested8.harness(1), cfg.clone())
                .unwrap();
        c.run(StopCondition::execs(5_000)).unwrap();

        let queue: Vec<_> = fs::read_dir(out.join("queue")).unwrap().collect();
        assert_eq!(queue.len(), c.queue().len());
        assert!(out.join("queue/id:000000,src:init,depth:1").is_file());
        let plot = fs::read_to_string(out.join("plot_data.csv")).unwrap();
        assert!(plot.starts_with(PLOT_HEADER));
        assert_eq!(plot.lines().count(), 1 + c.stats().series.len());
        let stats = fs::read_to_string(out.join("fuzzer_stats")).unwrap();
        assert!(stats.contains(&format!("execs_done        : {}", c.stats().execs_total)));

        let again = Campaign::init(corpus, TargetKind::Nested8.layout(), TargetKind::Nested8.harness(1), cfg);
        assert!(matches!(again.unwrap_err(), CampaignError::OutputExists(_)));
    }

    #[test]
    fn timeouts_are_counted_not_queued() {
        let cfg = CampaignConfig { timeout_us: 2_000, logical_time: true, ..Default::default() };
        let corpus = vec![("a".to_owned(), vec![0, 0, 0, 1, 0, 0, 0, 0])];
        let mut c = Campaign::init(corpus, TargetKind::Spin.layout(), TargetKind::Spin.harness(0), cfg).unwrap();
        c.fuzz_one(0);
        assert!(c.stats().timeouts > 0);
    }
}
