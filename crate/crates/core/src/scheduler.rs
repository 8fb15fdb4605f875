//! Energy assignment.
//!
//! [`base_energy`] is a two-factor reduction of AFL's per-seed score (speed
//! relative to the queue average, coverage relative to the queue average).
//! [`depth_energy`] applies the call-depth schedule on top of it: seeds whose
//! last execution reached at least half of the campaign's deepest call chain
//! get their energy doubled, capped at `U`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::campaign::Seed;

pub const DEFAULT_MAX_ENERGY: u32 = 1600;
const BASE_SCORE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Schedule {
    AflBase,
    DepthBased,
}

impl Schedule {
    pub fn as_str(self) -> &'static str {
        match self {
            Schedule::AflBase => "afl",
            Schedule::DepthBased => "depth",
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown schedule `{0}` (expected `afl` or `depth`)")]
pub struct UnknownSchedule(pub String);

impl FromStr for Schedule {
    type Err = UnknownSchedule;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "afl" => Ok(Schedule::AflBase),
            "depth" => Ok(Schedule::DepthBased),
            other => Err(UnknownSchedule(other.to_owned())),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("maximum energy must be at least 2, got {0}")]
pub struct InvalidMaxEnergy(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnergyConfig {
    max_energy: u32,
    pub schedule: Schedule,
}

impl EnergyConfig {
    pub fn new(max_energy: u32, schedule: Schedule) -> Result<Self, InvalidMaxEnergy> {
        if max_energy < 2 {
            return Err(InvalidMaxEnergy(max_energy));
        }
        Ok(Self { max_energy, schedule })
    }

    /// `U`, the largest energy any seed can receive.
    pub fn max_energy(&self) -> u32 {
        self.max_energy
    }
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self { max_energy: DEFAULT_MAX_ENERGY, schedule: Schedule::DepthBased }
    }
}

/// Queue-wide averages the base score is relative to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueueStats {
    pub avg_exec_time: f64,
    pub avg_bucket_popcount: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den <= 0.0 {
        if num <= 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

/// Speed multiplier from `avg_exec_time / seed_exec_time`.
pub fn speed_factor(r: f64) -> f64 {
    if r >= 4.0 {
        3.0
    } else if r >= 2.0 {
        2.0
    } else if r >= 1.0 {
        1.0
    } else if r >= 0.5 {
        0.5
    } else {
        0.25
    }
}

/// Coverage multiplier from `seed_popcount / avg_popcount`.
pub fn coverage_factor(r: f64) -> f64 {
    if r >= 1.5 {
        1.5
    } else if r >= 1.0 {
        1.0
    } else {
        0.75
    }
}

/// `p(s)`: the baseline energy, in `[1, max_energy]`.
pub fn base_energy(seed: &Seed, stats: &QueueStats, max_energy: u32) -> u32 {
    base_energy_from(seed.exec_time as f64, seed.bucket_popcount as f64, stats, max_energy)
}

pub fn base_energy_from(exec_time: f64, popcount: f64, stats: &QueueStats, max_energy: u32) -> u32 {
    // exec times below one unit count as one unit
    let speed = speed_factor(ratio(stats.avg_exec_time.max(1.0), exec_time.max(1.0)));
    let cov = coverage_factor(ratio(popcount, stats.avg_bucket_popcount));
    let score = (BASE_SCORE * speed * cov).round();
    (score as u32).clamp(1, max_energy)
}

/// `v(s)`: last observed depth over the campaign-wide maximum, with `1.0`
/// while no depth has been observed at all.
pub fn validity(ledger: &DepthLedger, seed: &Seed) -> f64 {
    validity_from(seed.last_depth, ledger.global_max_depth())
}

pub fn validity_from(last_depth: u32, global_max_depth: u32) -> f64 {
    if global_max_depth == 0 {
        return 1.0;
    }
    (last_depth as f64 / global_max_depth as f64).min(1.0)
}

/// `p_v(s)`: `2p` when `v >= 0.5` and `p <= U/2`, `p` when `v < 0.5`,
/// and `U` otherwise.
pub fn depth_energy(p: u32, v: f64, cfg: &EnergyConfig) -> u32 {
    let u = cfg.max_energy;
    if v < 0.5 {
        p
    } else if 2 * (p as u64) <= u as u64 {
        2 * p
    } else {
        u
    }
}

/// Energy for one fuzzing pass under the configured schedule. The AFL
/// baseline never looks at validity.
pub fn assign_energy(cfg: &EnergyConfig, p: u32, validity: impl FnOnce() -> f64) -> u32 {
    match cfg.schedule {
        Schedule::AflBase => p,
        Schedule::DepthBased => depth_energy(p, validity(), cfg),
    }
}

/// Campaign-wide record of the deepest call chain seen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DepthLedger {
    global_max_depth: u32,
}

impl DepthLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn global_max_depth(&self) -> u32 {
        self.global_max_depth
    }

    /// Folds in the depth of any execution.
    pub fn observe_depth(&mut self, depth: u32) {
        self.global_max_depth = self.global_max_depth.max(depth);
    }

    /// Records a re-execution of `seed`: its last depth is replaced and the
    /// global maximum raised if needed.
    pub fn observe_execution(&mut self, seed: &mut Seed, max_depth: u32) {
        seed.last_depth = max_depth;
        self.observe_depth(max_depth);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn avg() -> QueueStats {
        QueueStats { avg_exec_time: 100.0, avg_bucket_popcount: 20.0 }
    }

    fn cfg() -> EnergyConfig {
        EnergyConfig::new(1600, Schedule::DepthBased).unwrap()
    }

    #[test]
    fn base_energy_tables() {
        assert_eq!(base_energy_from(100.0, 20.0, &avg(), 1600), 100);
        assert_eq!(base_energy_from(25.0, 30.0, &avg(), 1600), 450);
        assert_eq!(base_energy_from(400.0, 5.0, &avg(), 1600), 19);
        assert_eq!(base_energy_from(50.0, 20.0, &avg(), 1600), 200);
        assert_eq!(base_energy_from(150.0, 20.0, &avg(), 1600), 50);
        // clamp to U
        assert_eq!(base_energy_from(1.0, 100.0, &avg(), 300), 300);
    }

    #[test]
    fn factor_boundaries() {
        assert_eq!(speed_factor(4.0), 3.0);
        assert_eq!(speed_factor(3.999), 2.0);
        assert_eq!(speed_factor(2.0), 2.0);
        assert_eq!(speed_factor(1.0), 1.0);
        assert_eq!(speed_factor(0.5), 0.5);
        assert_eq!(speed_factor(0.49), 0.25);
        assert_eq!(coverage_factor(1.5), 1.5);
        assert_eq!(coverage_factor(1.0), 1.0);
        assert_eq!(coverage_factor(0.99), 0.75);
    }

    #[test]
    fn empty_averages_are_neutral() {
        let zero = QueueStats { avg_exec_time: 0.0, avg_bucket_popcount: 0.0 };
        assert_eq!(base_energy_from(0.0, 0.0, &zero, 1600), 100);
    }

    #[test]
    fn validity_examples() {
        assert_eq!(validity_from(12, 12), 1.0);
        assert_eq!(validity_from(6, 12), 0.5);
        assert_eq!(validity_from(0, 0), 1.0);
        assert_eq!(validity_from(3, 12), 0.25);
    }

    #[test]
    fn depth_energy_examples() {
        assert_eq!(depth_energy(100, 0.7, &cfg()), 200);
        assert_eq!(depth_energy(100, 0.3, &cfg()), 100);
        assert_eq!(depth_energy(900, 0.9, &cfg()), 1600);
        assert_eq!(depth_energy(800, 0.5, &cfg()), 1600);
        assert_eq!(depth_energy(801, 0.5, &cfg()), 1600);
        assert_eq!(depth_energy(1600, 0.49, &cfg()), 1600);
    }

    #[test]
    fn odd_u_boundary() {
        let c = EnergyConfig::new(5, Schedule::DepthBased).unwrap();
        // U/2 = 2.5: p = 2 doubles, p = 3 caps
        assert_eq!(depth_energy(2, 1.0, &c), 4);
        assert_eq!(depth_energy(3, 1.0, &c), 5);
    }

    #[test]
    fn afl_schedule_ignores_validity() {
        let c = EnergyConfig::new(1600, Schedule::AflBase).unwrap();
        let e = assign_energy(&c, 100, || panic!("validity consulted"));
        assert_eq!(e, 100);
        assert_eq!(assign_energy(&cfg(), 100, || 1.0), 200);
    }

    #[test]
    fn energy_config_validation() {
        assert_eq!(EnergyConfig::new(1, Schedule::AflBase).unwrap_err(), InvalidMaxEnergy(1));
        assert!(EnergyConfig::new(2, Schedule::AflBase).is_ok());
        assert_eq!(EnergyConfig::default().max_energy(), 1600);
    }

    #[test]
    fn ledger_updates() {
        let mut ledger = DepthLedger::new();
        let mut seed = Seed::for_test(vec![0; 4]);
        ledger.observe_depth(5);
        ledger.observe_execution(&mut seed, 9);
        assert_eq!((ledger.global_max_depth(), seed.last_depth), (9, 9));
        ledger.observe_execution(&mut seed, 3);
        assert_eq!((ledger.global_max_depth(), seed.last_depth), (9, 3));

        let mut fresh = DepthLedger::new();
        fresh.observe_execution(&mut seed, 0);
        assert_eq!(fresh.global_max_depth(), 0);
        assert_eq!(validity(&fresh, &seed), 1.0);
    }

    #[test]
    fn schedule_names() {
        assert_eq!("afl".parse::<Schedule>().unwrap(), Schedule::AflBase);
        assert_eq!("depth".parse::<Schedule>().unwrap(), Schedule::DepthBased);
        assert!("fast".parse::<Schedule>().is_err());
        assert_eq!(Schedule::DepthBased.to_string(), "depth");
    }
}
