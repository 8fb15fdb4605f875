//! Synthetic benchmark targets.
//!
//! `nested4`/`nested8` model a parameter block guarded by layered validity
//! checks: each gate compares one 16-bit field against a key and only a
//! matching field lets execution descend (one depth guard deeper) to the
//! next gate. `magic32` is a flat single-comparison control and `spin` loops
//! for an input-controlled number of iterations to exercise timeouts.

use std::fmt;
use std::hint::black_box;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codec::{FieldMode, FieldSpec, LayoutSpec};
use crate::executor::{Harness, ProbeContext, RunStatus};

pub const NESTED_INPUT_LEN: usize = 64;
pub const NESTED_HEADER: [u8; 4] = *b"MPB1";
pub const NESTED_FIRST_FIELD: usize = 4;
pub const MAGIC_INPUT_LEN: usize = 16;
pub const SPIN_INPUT_LEN: usize = 8;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown target `{0}` (expected one of: nested4, nested8, magic32, spin)")]
pub struct UnknownTarget(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TargetKind {
    Nested4,
    Nested8,
    Magic32,
    Spin,
}

impl TargetKind {
    pub const ALL: [TargetKind; 4] = [TargetKind::Nested4, TargetKind::Nested8, TargetKind::Magic32, TargetKind::Spin];

    pub fn name(self) -> &'static str {
        match self {
            TargetKind::Nested4 => "nested4",
            TargetKind::Nested8 => "nested8",
            TargetKind::Magic32 => "magic32",
            TargetKind::Spin => "spin",
        }
    }

    pub fn harness(self, rng_seed: u64) -> Box<dyn Harness> {
        match self {
            TargetKind::Nested4 => Box::new(NestedGateTarget::new(4, rng_seed)),
            TargetKind::Nested8 => Box::new(NestedGateTarget::new(8, rng_seed)),
            TargetKind::Magic32 => Box::new(Magic32Target::new(rng_seed)),
            TargetKind::Spin => Box::new(SpinTarget),
        }
    }

    /// Field layout shipped with the target.
    pub fn layout(self) -> LayoutSpec {
        let fields = match self {
            TargetKind::Nested4 | TargetKind::Nested8 => {
                let n = if self == TargetKind::Nested4 { 4 } else { 8 };
                let mut fields = vec![FieldSpec::new("header", 0, 32, FieldMode::Keep)];
                for i in 0..n {
                    fields.push(FieldSpec::new(format!("gate{i}"), 32 + 16 * i, 16, FieldMode::Fuzz));
                }
                let tail = 32 + 16 * n;
                fields.push(FieldSpec::new("payload", tail, NESTED_INPUT_LEN * 8 - tail, FieldMode::Keep));
                return LayoutSpec::new(NESTED_INPUT_LEN, fields).expect("static layout is valid");
            }
            TargetKind::Magic32 => vec![
                FieldSpec::new("magic", 0, 32, FieldMode::Fuzz),
                FieldSpec::new("body", 32, 96, FieldMode::Fuzz),
            ],
            TargetKind::Spin => vec![
                FieldSpec::new("count", 0, 32, FieldMode::Fuzz),
                FieldSpec::new("pad", 32, 32, FieldMode::Keep),
            ],
        };
        LayoutSpec::new(self.input_len(), fields).expect("static layout is valid")
    }

    pub fn input_len(self) -> usize {
        match self {
            TargetKind::Nested4 | TargetKind::Nested8 => NESTED_INPUT_LEN,
            TargetKind::Magic32 => MAGIC_INPUT_LEN,
            TargetKind::Spin => SPIN_INPUT_LEN,
        }
    }

    /// A single well-formed starting input.
    pub fn default_seed(self) -> Vec<u8> {
        let mut input = vec![0u8; self.input_len()];
        if matches!(self, TargetKind::Nested4 | TargetKind::Nested8) {
            input[..4].copy_from_slice(&NESTED_HEADER);
        }
        input
    }

    /// Crash kind that marks full penetration of the target, if any.
    pub fn goal_crash(self) -> Option<&'static str> {
        match self {
            TargetKind::Nested4 | TargetKind::Nested8 => Some(NestedGateTarget::CRASH_KIND),
            TargetKind::Magic32 => Some(Magic32Target::CRASH_KIND),
            TargetKind::Spin => None,
        }
    }
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TargetKind {
    type Err = UnknownTarget;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TargetKind::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| UnknownTarget(s.to_owned()))
    }
}

pub fn make_target(name: &str, rng_seed: u64) -> Result<Box<dyn Harness>, UnknownTarget> {
    Ok(name.parse::<TargetKind>()?.harness(rng_seed))
}

/// Maps a (target, probe, index, value) tuple to a coverage site id.
fn site(tag: u16, probe: u16, index: u16, value: u16) -> u16 {
    let mut x = ((tag as u64) << 48) | ((probe as u64) << 32) | ((index as u64) << 16) | value as u64;
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^= x >> 33;
    x = x.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    x ^= x >> 33;
    x as u16
}

const NESTED_TAG: u16 = 1;
const MAGIC_TAG: u16 = 2;
const SPIN_TAG: u16 = 3;

// probe kinds
const ENTRY: u16 = 0;
const BAD_HEADER: u16 = 1;
const SANITY: u16 = 2;
const SANITY_JOIN: u16 = 3;
const GATE: u16 = 4;
const REJECT: u16 = 5;
const PASS_PART: u16 = 6;
const PASS: u16 = 8;

/// Width of one gate comparison step.
const GATE_STEP_BITS: u32 = 4;
/// Sanity classes per gate field: its top bits.
const SANITY_CLASS_BITS: u32 = 5;

/// Layered-validation target. Gate `i` reads the big-endian 16-bit field at
/// byte `4 + 2i`; bytes 0..4 hold a fixed header.
///
/// Before the gates, a sanity sweep classifies every gate field by its top
/// five bits, which gives the shallow layer many paths of its own.
/// Each gate compares its field a nibble at a time, most significant first,
/// so a partly matched field is visible as new coverage.
#[derive(Debug, Clone)]
pub struct NestedGateTarget {
    gate_keys: Vec<u16>,
}

impl NestedGateTarget {
    pub const CRASH_KIND: &'static str = "deep_bug";

    pub fn new(n_gates: usize, rng_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        Self { gate_keys: (0..n_gates).map(|_| rng.random::<u16>()).collect() }
    }

    pub fn with_keys(gate_keys: Vec<u16>) -> Self {
        Self { gate_keys }
    }

    pub fn gate_keys(&self) -> &[u16] {
        &self.gate_keys
    }

    pub fn n_gates(&self) -> usize {
        self.gate_keys.len()
    }

    /// Input with the header and the first `passing` gate fields correct;
    /// the remaining fields are set to `key ^ 0xffff`.
    pub fn input_passing(&self, passing: usize) -> Vec<u8> {
        let mut input = TargetKind::Nested8.default_seed();
        for (i, &key) in self.gate_keys.iter().enumerate() {
            let value = if i < passing { key } else { key ^ 0xffff };
            let at = NESTED_FIRST_FIELD + 2 * i;
            input[at..at + 2].copy_from_slice(&value.to_be_bytes());
        }
        input
    }

    fn gate(&self, ctx: &mut ProbeContext, input: &[u8], i: usize) -> RunStatus {
        let idx = i as u16;
        let at = NESTED_FIRST_FIELD + 2 * i;
        let field = u16::from_be_bytes([input.get(at).copied().unwrap_or(0), input.get(at + 1).copied().unwrap_or(0)]);
        let key = self.gate_keys[i];

        ctx.record_edge(site(NESTED_TAG, GATE, idx, 0));
        let mut s = 16 - GATE_STEP_BITS;
        loop {
            if (field >> s) != (key >> s) {
                ctx.record_edge(site(NESTED_TAG, REJECT, idx, s as u16));
                return RunStatus::Ok;
            }
            ctx.record_edge(site(NESTED_TAG, PASS_PART, idx, s as u16));
            if s == 0 { break; }
            s -= GATE_STEP_BITS;
        }
        ctx.record_edge(site(NESTED_TAG, PASS, idx, 0));
        if i + 1 == self.gate_keys.len() {
            return RunStatus::crash(Self::CRASH_KIND);
        }
        let mut inner = ctx.depth_guard();
        self.gate(&mut inner, input, i + 1)
    }
}

impl Harness for NestedGateTarget {
    fn name(&self) -> &str {
        match self.gate_keys.len() {
            4 => "nested4",
            8 => "nested8",
            _ => "nested",
        }
    }

    fn run(&mut self, input: &[u8], ctx: &mut ProbeContext) -> RunStatus {
        let mut ctx = ctx.depth_guard();
        ctx.record_edge(site(NESTED_TAG, ENTRY, 0, 0));
        if input.get(..4) != Some(&NESTED_HEADER[..]) {
            ctx.record_edge(site(NESTED_TAG, BAD_HEADER, 0, 0));
            return RunStatus::Ok;
        }
        for i in 0..self.gate_keys.len() {
            let class = input.get(NESTED_FIRST_FIELD + 2 * i).copied().unwrap_or(0) >> (8 - SANITY_CLASS_BITS);
            ctx.record_edge(site(NESTED_TAG, SANITY, i as u16, class as u16));
            ctx.record_edge(site(NESTED_TAG, SANITY_JOIN, i as u16, 0));
        }
        if self.gate_keys.is_empty() {
            return RunStatus::Ok;
        }
        self.gate(&mut ctx, input, 0)
    }
}

/// Flat control target: a 4-byte magic at offset 0 crashes; the 12-byte body
/// only feeds a shallow classification sweep. Depth is always 1.
#[derive(Debug, Clone)]
pub struct Magic32Target {
    magic: [u8; 4],
}

impl Magic32Target {
    pub const CRASH_KIND: &'static str = "magic_hit";

    pub fn new(rng_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ 0x6d61_6769_6333_3200);
        Self { magic: rng.random::<u32>().to_be_bytes() }
    }

    pub fn magic(&self) -> [u8; 4] {
        self.magic
    }
}

impl Harness for Magic32Target {
    fn name(&self) -> &str {
        "magic32"
    }

    fn run(&mut self, input: &[u8], ctx: &mut ProbeContext) -> RunStatus {
        let mut ctx = ctx.depth_guard();
        ctx.record_edge(site(MAGIC_TAG, ENTRY, 0, 0));
        for (i, &b) in input.iter().enumerate().take(MAGIC_INPUT_LEN).skip(4) {
            ctx.record_edge(site(MAGIC_TAG, SANITY, i as u16, (b >> 6) as u16));
            ctx.record_edge(site(MAGIC_TAG, SANITY_JOIN, i as u16, 0));
        }
        for (j, &want) in self.magic.iter().enumerate() {
            if input.get(j) != Some(&want) {
                ctx.record_edge(site(MAGIC_TAG, REJECT, j as u16, 0));
                return RunStatus::Ok;
            }
            ctx.record_edge(site(MAGIC_TAG, PASS, j as u16, 0));
        }
        RunStatus::crash(Self::CRASH_KIND)
    }
}

/// Busy-loops `u32::from_be_bytes(input[0..4])` iterations, checking the
/// cooperative deadline as it goes.
#[derive(Debug, Clone, Copy, Default)]
pub struct SpinTarget;

impl Harness for SpinTarget {
    fn name(&self) -> &str {
        "spin"
    }

    fn run(&mut self, input: &[u8], ctx: &mut ProbeContext) -> RunStatus {
        let mut ctx = ctx.depth_guard();
        let mut count = [0u8; 4];
        for (dst, src) in count.iter_mut().zip(input) {
            *dst = *src;
        }
        let iterations = u32::from_be_bytes(count);
        ctx.record_edge(site(SPIN_TAG, ENTRY, 0, (32 - iterations.leading_zeros()) as u16));
        let mut acc = 0u64;
        for i in 0..iterations {
            acc = black_box(acc.wrapping_mul(31).wrapping_add(i as u64));
            if i % 4096 == 0 && ctx.expired() {
                return RunStatus::Timeout;
            }
        }
        black_box(acc);
        RunStatus::Ok
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::parse_spec;
    use crate::executor::Executor;

    fn exec(target: Box<dyn Harness>) -> Executor {
        Executor::new(target, 1_000_000)
    }

    #[test]
    fn keys_are_reproducible() {
        let a = NestedGateTarget::new(8, 42);
        let b = NestedGateTarget::new(8, 42);
        assert_eq!(a.gate_keys(), b.gate_keys());
        assert_ne!(a.gate_keys(), NestedGateTarget::new(8, 43).gate_keys());
    }

    #[test]
    fn failing_first_gate_is_depth_one() {
        let t = NestedGateTarget::new(8, 1);
        let input = t.input_passing(0);
        let mut ex = exec(Box::new(t));
        let r = ex.run(&input);
        assert_eq!(r.status, RunStatus::Ok);
        assert_eq!(r.max_depth, 1);
    }

    #[test]
    fn depth_tracks_leading_gates() {
        let t = NestedGateTarget::new(8, 42);
        let mut ex = exec(Box::new(t.clone()));
        for passing in 0..8 {
            let r = ex.run(&t.input_passing(passing));
            assert_eq!(r.status, RunStatus::Ok);
            assert_eq!(r.max_depth, 1 + passing as u32, "passing {passing}");
        }
        let r = ex.run(&t.input_passing(8));
        assert_eq!(r.status, RunStatus::Crash("deep_bug".into()));
        assert_eq!(r.max_depth, 8);
    }

    #[test]
    fn later_correct_fields_do_not_count() {
        let t = NestedGateTarget::new(8, 5);
        let mut input = t.input_passing(8);
        // break gate 3 only
        input[NESTED_FIRST_FIELD + 6] ^= 0x01;
        let mut ex = exec(Box::new(t));
        let r = ex.run(&input);
        assert_eq!(r.max_depth, 4);
        assert_eq!(r.status, RunStatus::Ok);
    }

    #[test]
    fn half_matched_field_is_new_coverage() {
        let t = NestedGateTarget::with_keys(vec![0x1234, 0x5678]);
        let mut ex = exec(Box::new(t));
        let mut input = TargetKind::Nested8.default_seed();
        let none = ex.run(&input).coverage.fingerprint();
        input[4] = 0x12;
        let half = ex.run(&input).coverage.fingerprint();
        assert_ne!(none, half);
    }

    #[test]
    fn bad_header_stops_early() {
        let t = NestedGateTarget::new(8, 3);
        let mut input = t.input_passing(8);
        input[0] = 0;
        let mut ex = exec(Box::new(t));
        let r = ex.run(&input);
        assert_eq!((r.status, r.max_depth), (RunStatus::Ok, 1));
    }

    #[test]
    fn magic_hit() {
        let t = Magic32Target::new(9);
        let mut input = vec![0u8; MAGIC_INPUT_LEN];
        input[..4].copy_from_slice(&t.magic());
        let mut ex = exec(Box::new(t));
        let r = ex.run(&input);
        assert_eq!(r.status, RunStatus::Crash("magic_hit".into()));
        assert_eq!(r.max_depth, 1);
        input[3] ^= 1;
        assert_eq!(ex.run(&input).status, RunStatus::Ok);
    }

    #[test]
    fn spin_times_out() {
        let mut ex = Executor::new(Box::new(SpinTarget), 20_000);
        assert_eq!(ex.run(&[0, 0, 0, 10, 0, 0, 0, 0]).status, RunStatus::Ok);
        assert_eq!(ex.run(&[0xff; 8]).status, RunStatus::Timeout);
    }

    #[test]
    fn names_and_layouts() {
        for kind in TargetKind::ALL {
            assert_eq!(kind.name().parse::<TargetKind>().unwrap(), kind);
            let layout = kind.layout();
            assert_eq!(layout.total_len_bytes(), kind.input_len());
            assert_eq!(kind.default_seed().len(), kind.input_len());
            assert!(layout.has_fuzz_fields());
            assert_eq!(parse_spec(&layout.to_string()).unwrap(), layout);
            assert_eq!(make_target(kind.name(), 0).unwrap().name(), kind.name());
        }
        assert!(make_target("nested9", 0).is_err());
    }

    #[test]
    fn nested8_layout_freezes_header_and_fuzzes_gates() {
        let layout = TargetKind::Nested8.layout();
        assert_eq!(layout.view_len_bits(), 16 * 8);
        assert!((0..32).all(|b| !layout.is_fuzz_bit(b)));
        assert!((32..160).all(|b| layout.is_fuzz_bit(b)));
        assert!((160..512).all(|b| !layout.is_fuzz_bit(b)));
    }

    #[test]
    fn targets_are_deterministic() {
        for kind in [TargetKind::Nested8, TargetKind::Magic32] {
            let mut ex = exec(kind.harness(11));
            let input: Vec<u8> = (0..kind.input_len() as u8).map(|b| b.wrapping_mul(37)).collect();
            let a = ex.run(&input).coverage.clone();
            let b = ex.run(&input).coverage.clone();
            assert_eq!(a, b);
        }
    }
}
