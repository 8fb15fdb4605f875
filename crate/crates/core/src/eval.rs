//! A/B experiments between power schedules.
//!
//! Every (schedule, trial) pair runs as an isolated logical-time campaign on
//! the same target, layout, corpus and trial seed, so arms differ only in
//! the schedule. Per arm the summary reports median and interquartile range
//! of paths at budget, executions until the target's goal crash (censored
//! at the budget) and wall time per execution, plus Mann-Whitney rank-sum
//! comparisons between arms.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::campaign::{Campaign, CampaignConfig, CampaignError, StopCondition, DEFAULT_TIMEOUT_US};
use crate::codec::LayoutSpec;
use crate::scheduler::{Schedule, DEFAULT_MAX_ENERGY};
use crate::targets::TargetKind;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("an experiment needs at least one trial")]
    NoTrials,
    #[error("expected {expected} rng seeds (one per trial), got {actual}")]
    SeedCount { expected: usize, actual: usize },
    #[error("an experiment needs at least one schedule")]
    NoSchedules,
    #[error("output directory {0} exists and is not empty")]
    ConflictingOutput(PathBuf),
    #[error("corpus entry {index} is {actual} bytes, the layout expects {expected}")]
    CorpusMismatch { index: usize, expected: usize, actual: usize },
    #[error("arm configurations differ in more than the schedule: {0}")]
    ArmMismatch(String),
    #[error(transparent)]
    Campaign(#[from] CampaignError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub target: TargetKind,
    pub schedules: Vec<Schedule>,
    pub trials: usize,
    pub budget_execs: u64,
    /// One per trial.
    pub rng_seeds: Vec<u64>,
    /// Seeds the target instance (gate keys, magic values). `None` uses
    /// each trial's rng seed, so every trial fuzzes a different instance.
    pub target_seed: Option<u64>,
    pub max_energy: u32,
    pub timeout_us: u64,
    pub spec: LayoutSpec,
    pub corpus: Vec<Vec<u8>>,
    pub out: Option<PathBuf>,
    /// The first arm's path curve is cut at this fraction of the budget
    /// before computing the efficiency ratio against the second arm.
    pub horizon_fraction: f64,
    pub parallel: bool,
}

impl Experiment {
    /// Depth schedule against the AFL baseline on the target's own layout and
    /// default seed, trial seeds `0..trials`.
    pub fn new(target: TargetKind, trials: usize, budget_execs: u64) -> Self {
        Self {
            target,
            schedules: vec![Schedule::DepthBased, Schedule::AflBase],
            trials,
            budget_execs,
            rng_seeds: (0..trials as u64).collect(),
            target_seed: None,
            max_energy: DEFAULT_MAX_ENERGY,
            timeout_us: DEFAULT_TIMEOUT_US,
            spec: target.layout(),
            corpus: vec![target.default_seed()],
            out: None,
            horizon_fraction: 0.25,
            parallel: true,
        }
    }

    fn validate(&self) -> Result<(), EvalError> {
        if self.trials == 0 {
            return Err(EvalError::NoTrials);
        }
        if self.rng_seeds.len() != self.trials {
            return Err(EvalError::SeedCount { expected: self.trials, actual: self.rng_seeds.len() });
        }
        if self.schedules.is_empty() {
            return Err(EvalError::NoSchedules);
        }
        let expected = self.spec.total_len_bytes();
        for (index, c) in self.corpus.iter().enumerate() {
            if c.len() != expected {
                return Err(EvalError::CorpusMismatch { index, expected, actual: c.len() });
            }
        }
        if let Some(out) = &self.out {
            if out.exists() && fs::read_dir(out).map_err(io_err(out))?.next().is_some() {
                return Err(EvalError::ConflictingOutput(out.clone()));
            }
        }
        Ok(())
    }

    /// Output folder name of an arm: the schedule name, suffixed with the arm
    /// index when a schedule appears more than once.
    pub fn arm_name(&self, arm: usize) -> String {
        let s = self.schedules[arm];
        if self.schedules.iter().filter(|&&x| x == s).count() > 1 {
            format!("{s}_{arm}")
        } else {
            s.to_string()
        }
    }

    fn trial_dir(&self, arm: usize, trial: usize) -> Option<PathBuf> {
        self.out.as_ref().map(|o| o.join(self.arm_name(arm)).join(format!("trial_{trial:02}")))
    }

    /// Campaign configuration for one cell of the experiment.
    pub fn campaign_config(&self, arm: usize, trial: usize) -> CampaignConfig {
        CampaignConfig {
            schedule: self.schedules[arm],
            max_energy: self.max_energy,
            timeout_us: self.timeout_us,
            rng_seed: self.rng_seeds[trial],
            logical_time: true,
            out_dir: self.trial_dir(arm, trial),
        }
    }

    /// Checks that, trial by trial, the arms' configurations agree on
    /// everything but the schedule (and the schedule-named output folder).
    pub fn check_arms(&self) -> Result<(), EvalError> {
        for trial in 0..self.trials {
            let normalize = |arm: usize| CampaignConfig {
                schedule: Schedule::AflBase,
                out_dir: None,
                ..self.campaign_config(arm, trial)
            };
            let reference = normalize(0);
            for arm in 1..self.schedules.len() {
                if normalize(arm) != reference {
                    return Err(EvalError::ArmMismatch(format!("trial {trial}: arm {arm} vs arm 0")));
                }
            }
        }
        Ok(())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io { path: path.to_owned(), source }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub arm: usize,
    pub schedule: Schedule,
    pub trial: usize,
    pub rng_seed: u64,
    pub execs_total: u64,
    pub paths_total: u64,
    pub max_depth: u32,
    pub unique_crashes: u64,
    /// Executions until the first goal crash, `None` if censored.
    pub execs_to_goal: Option<u64>,
    pub wall_us: u64,
    pub path_execs: Vec<u64>,
}

impl TrialResult {
    pub fn ns_per_exec(&self) -> f64 {
        self.wall_us as f64 * 1000.0 / self.execs_total.max(1) as f64
    }

    pub fn curve(&self) -> PathCurve {
        PathCurve { total_execs: self.execs_total, path_execs: self.path_execs.clone() }
    }
}

/// Runs one campaign for `(arm, trial)`.
pub fn run_trial(exp: &Experiment, arm: usize, trial: usize) -> Result<TrialResult, EvalError> {
    let cfg = exp.campaign_config(arm, trial);
    let schedule = cfg.schedule;
    let rng_seed = cfg.rng_seed;
    let corpus = exp.corpus.iter().enumerate().map(|(i, c)| (format!("seed_{i:03}"), c.clone())).collect();
    let started = Instant::now();
    let harness = exp.target.harness(exp.target_seed.unwrap_or(rng_seed));
    let mut campaign = Campaign::init(corpus, exp.spec.clone(), harness, cfg)?;
    let stats = campaign.run(StopCondition::execs(exp.budget_execs))?;
    let wall_us = started.elapsed().as_micros() as u64;
    let execs_to_goal = exp.target.goal_crash().and_then(|k| stats.first_crash_execs.get(k).copied());
    Ok(TrialResult {
        arm,
        schedule,
        trial,
        rng_seed,
        execs_total: stats.execs_total,
        paths_total: stats.paths_total,
        max_depth: stats.max_depth_global,
        unique_crashes: stats.crashes_unique,
        execs_to_goal,
        wall_us,
        path_execs: stats.path_execs.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Quartiles {
    /// Linear-interpolation quartiles. Empty input gives NaN.
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.total_cmp(b));
        Self { q1: quantile(&v, 0.25), median: quantile(&v, 0.5), q3: quantile(&v, 0.75) }
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    }
}

/// Two-sided Mann-Whitney U test, normal approximation with tie and
/// continuity corrections.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankSum {
    /// U statistic of the first sample.
    pub u: f64,
    pub z: f64,
    pub p_value: f64,
}

pub fn rank_sum(a: &[f64], b: &[f64]) -> RankSum {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    if a.is_empty() || b.is_empty() {
        return RankSum { u: 0.0, z: 0.0, p_value: 1.0 };
    }
    let mut pooled: Vec<(f64, bool)> = a.iter().map(|&x| (x, true)).chain(b.iter().map(|&x| (x, false))).collect();
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));

    let n = pooled.len();
    let mut rank_a = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        rank_a += pooled[i..=j].iter().filter(|p| p.1).count() as f64 * avg_rank;
        i = j + 1;
    }

    let u = rank_a - na * (na + 1.0) / 2.0;
    let mean = na * nb / 2.0;
    let total = na + nb;
    let var = na * nb / 12.0 * ((total + 1.0) - tie_term / (total * (total - 1.0)));
    if var <= 0.0 {
        return RankSum { u, z: 0.0, p_value: 1.0 };
    }
    let diff = u - mean;
    let corrected = (diff.abs() - 0.5).max(0.0) * diff.signum();
    let z = corrected / var.sqrt();
    let normal = Normal::standard();
    let p_value = (2.0 * (1.0 - normal.cdf(z.abs()))).min(1.0);
    RankSum { u, z, p_value }
}

/// Paths discovered over logical time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathCurve {
    pub total_execs: u64,
    /// Execution count at which path `k + 1` was found; non-decreasing.
    pub path_execs: Vec<u64>,
}

impl PathCurve {
    pub fn final_paths(&self) -> usize {
        self.path_execs.len()
    }

    pub fn execs_to_reach(&self, paths: usize) -> Option<u64> {
        match paths {
            0 => Some(0),
            k => self.path_execs.get(k - 1).copied(),
        }
    }

    pub fn paths_at(&self, execs: u64) -> usize {
        self.path_execs.partition_point(|&e| e <= execs)
    }

    /// The curve as it stood after `execs` executions.
    pub fn truncated(&self, execs: u64) -> Self {
        let total_execs = execs.min(self.total_execs);
        Self { total_execs, path_execs: self.path_execs[..self.paths_at(total_execs)].to_vec() }
    }

    /// Coordinate-wise median over trials: path `k` is reached when the
    /// median trial reaches it. Stops at the first path count most trials
    /// never reach.
    pub fn median_of(curves: &[PathCurve]) -> Self {
        let total_execs = Quartiles::of(&curves.iter().map(|c| c.total_execs as f64).collect::<Vec<_>>()).median;
        let mut path_execs = Vec::new();
        for k in 1.. {
            let at: Vec<f64> =
                curves.iter().map(|c| c.execs_to_reach(k).map_or(f64::INFINITY, |e| e as f64)).collect();
            let m = Quartiles::of(&at).median;
            if !m.is_finite() {
                break;
            }
            path_execs.push(m.round() as u64);
        }
        Self { total_execs: if total_execs.is_finite() { total_execs as u64 } else { 0 }, path_execs }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Efficiency {
    Ratio(f64),
    /// `b` never reached `a`'s path count; the ratio is at least this.
    Censored(f64),
}

impl fmt::Display for Efficiency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Efficiency::Ratio(r) => write!(f, "{r:.2}"),
            Efficiency::Censored(r) => write!(f, ">{r:.2}"),
        }
    }
}

/// How many times longer `b` needs than `a` to reach the path count `a`
/// finishes with: `b`'s executions to reach `a`'s final path count over
/// the executions `a` spent reaching it.
pub fn efficiency_ratio(a: &PathCurve, b: &PathCurve) -> Efficiency {
    let target = a.final_paths();
    let a_execs = a.execs_to_reach(target).unwrap_or(a.total_execs).max(1) as f64;
    match b.execs_to_reach(target) {
        Some(e) => Efficiency::Ratio(e as f64 / a_execs),
        None => Efficiency::Censored(b.total_execs as f64 / a_execs),
    }
}

#[derive(Debug, Clone)]
pub struct ArmSummary {
    pub name: String,
    pub schedule: Schedule,
    pub trials: Vec<TrialResult>,
    pub paths: Quartiles,
    /// Censored trials count as `budget + 1`.
    pub execs_to_goal: Quartiles,
    pub goal_hits: usize,
    pub ns_per_exec: Quartiles,
    pub curve: PathCurve,
}

impl ArmSummary {
    fn new(name: String, schedule: Schedule, mut trials: Vec<TrialResult>, budget: u64) -> Self {
        trials.sort_by_key(|t| t.trial);
        let paths: Vec<f64> = trials.iter().map(|t| t.paths_total as f64).collect();
        let goal: Vec<f64> = censored_goal_execs(&trials, budget);
        let ns: Vec<f64> = trials.iter().map(TrialResult::ns_per_exec).collect();
        let curves: Vec<PathCurve> = trials.iter().map(TrialResult::curve).collect();
        Self {
            name,
            schedule,
            paths: Quartiles::of(&paths),
            execs_to_goal: Quartiles::of(&goal),
            goal_hits: trials.iter().filter(|t| t.execs_to_goal.is_some()).count(),
            ns_per_exec: Quartiles::of(&ns),
            curve: PathCurve::median_of(&curves),
            trials,
        }
    }
}

pub fn censored_goal_execs(trials: &[TrialResult], budget: u64) -> Vec<f64> {
    trials.iter().map(|t| t.execs_to_goal.map_or(budget as f64 + 1.0, |e| e as f64)).collect()
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    /// Median executions-to-goal of `b` over that of `a`.
    pub goal_ratio: f64,
    pub goal_test: RankSum,
    pub paths_test: RankSum,
    pub efficiency: Efficiency,
}

#[derive(Debug, Clone)]
pub struct Summary {
    pub target: TargetKind,
    pub budget_execs: u64,
    pub goal: Option<&'static str>,
    pub horizon_execs: u64,
    pub arms: Vec<ArmSummary>,
    pub comparisons: Vec<Comparison>,
}

impl Summary {
    /// The first arm running `schedule`.
    pub fn arm(&self, schedule: Schedule) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.schedule == schedule)
    }

    fn goal_cell(&self, v: f64) -> String {
        if v > self.budget_execs as f64 {
            format!(">{}", self.budget_execs)
        } else {
            format!("{v:.0}")
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "arm,schedule,trials,paths_median,paths_q1,paths_q3,goal_hits,execs_to_goal_median,execs_to_goal_q1,\
             execs_to_goal_q3,ns_per_exec_median,ns_per_exec_q1,ns_per_exec_q3\n",
        );
        for arm in &self.arms {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{:.1},{:.1},{:.1}",
                arm.name,
                arm.schedule,
                arm.trials.len(),
                arm.paths.median,
                arm.paths.q1,
                arm.paths.q3,
                arm.goal_hits,
                self.goal_cell(arm.execs_to_goal.median),
                self.goal_cell(arm.execs_to_goal.q1),
                self.goal_cell(arm.execs_to_goal.q3),
                arm.ns_per_exec.median,
                arm.ns_per_exec.q1,
                arm.ns_per_exec.q3,
            );
        }
        s
    }

    pub fn trials_csv(&self) -> String {
        let mut s = String::from("arm,schedule,trial,rng_seed,execs,paths,max_depth,unique_crashes,execs_to_goal,wall_us\n");
        for arm in &self.arms {
            for t in &arm.trials {
                let goal = t.execs_to_goal.map_or(String::new(), |e| e.to_string());
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{},{}",
                    arm.name,
                    t.schedule, t.trial, t.rng_seed, t.execs_total, t.paths_total, t.max_depth, t.unique_crashes, goal,
                    t.wall_us
                );
            }
        }
        s
    }

    /// Aligned plain-text report.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let goal = self.goal.unwrap_or("-");
        let _ = writeln!(s, "target {}  budget {} execs  goal crash {}", self.target, self.budget_execs, goal);
        let _ = writeln!(
            s,
            "{:<8} {:>6} {:>22} {:>6} {:>30} {:>20}",
            "arm", "trials", "paths med [q1,q3]", "hits", "execs-to-goal med [q1,q3]", "ns/exec med"
        );
        for arm in &self.arms {
            let paths = format!("{:.1} [{:.1},{:.1}]", arm.paths.median, arm.paths.q1, arm.paths.q3);
            let goal = format!(
                "{} [{},{}]",
                self.goal_cell(arm.execs_to_goal.median),
                self.goal_cell(arm.execs_to_goal.q1),
                self.goal_cell(arm.execs_to_goal.q3)
            );
            let _ = writeln!(
                s,
                "{:<8} {:>6} {:>22} {:>6} {:>30} {:>20.1}",
                arm.name,
                arm.trials.len(),
                paths,
                arm.goal_hits,
                goal,
                arm.ns_per_exec.median
            );
        }
        for c in &self.comparisons {
            let _ = writeln!(
                s,
                "{} vs {}: goal ratio {:.2} (rank-sum p={:.4}), paths p={:.4}, efficiency {} at horizon {}",
                c.a, c.b, c.goal_ratio, c.goal_test.p_value, c.paths_test.p_value, c.efficiency, self.horizon_execs
            );
        }
        s
    }

    pub fn write_to(&self, dir: &Path) -> Result<(), EvalError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (name, body) in
            [("summary.csv", self.to_csv()), ("trials.csv", self.trials_csv()), ("summary.txt", self.to_table())]
        {
            let path = dir.join(name);
            fs::write(&path, body).map_err(io_err(&path))?;
        }
        Ok(())
    }
}

/// Builds the summary from finished trials; trial order does not matter.
pub fn summarize(exp: &Experiment, results: Vec<TrialResult>) -> Summary {
    let arms: Vec<ArmSummary> = (0..exp.schedules.len())
        .map(|arm| {
            let trials = results.iter().filter(|t| t.arm == arm).cloned().collect();
            ArmSummary::new(exp.arm_name(arm), exp.schedules[arm], trials, exp.budget_execs)
        })
        .collect();
    let horizon_execs = ((exp.budget_execs as f64) * exp.horizon_fraction).round() as u64;
    let mut comparisons = Vec::new();
    for i in 0..arms.len() {
        for j in i + 1..arms.len() {
            let (a, b) = (&arms[i], &arms[j]);
            let ga = censored_goal_execs(&a.trials, exp.budget_execs);
            let gb = censored_goal_execs(&b.trials, exp.budget_execs);
            let pa: Vec<f64> = a.trials.iter().map(|t| t.paths_total as f64).collect();
            let pb: Vec<f64> = b.trials.iter().map(|t| t.paths_total as f64).collect();
            comparisons.push(Comparison {
                a: a.name.clone(),
                b: b.name.clone(),
                goal_ratio: b.execs_to_goal.median / a.execs_to_goal.median,
                goal_test: rank_sum(&ga, &gb),
                paths_test: rank_sum(&pa, &pb),
                efficiency: efficiency_ratio(&a.curve.truncated(horizon_execs), &b.curve),
            });
        }
    }
    Summary { target: exp.target, budget_execs: exp.budget_execs, goal: exp.target.goal_crash(), horizon_execs, arms, comparisons }
}

pub fn run_experiment(exp: &Experiment) -> Result<Summary, EvalError> {
    exp.validate()?;
    exp.check_arms()?;
    let cells: Vec<(usize, usize)> =
        (0..exp.schedules.len()).flat_map(|a| (0..exp.trials).map(move |t| (a, t))).collect();
    let results: Vec<TrialResult> = if exp.parallel {
        cells.par_iter().map(|&(a, t)| run_trial(exp, a, t)).collect::<Result<_, _>>()?
    } else {
        cells.iter().map(|&(a, t)| run_trial(exp, a, t)).collect::<Result<_, _>>()?
    };
    let summary = summarize(exp, results);
    if let Some(out) = &exp.out {
        summary.write_to(out)?;
    }
    Ok(summary)
}
