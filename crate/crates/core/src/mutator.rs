//! Mutation stages over a [`MutationView`].
//!
//! Every candidate keeps the view's bit length, so restoring it through the
//! layout can only ever change fuzzable fields. Byte-level operators address
//! whole bytes of the view (`bits[8k..8k + 8]`); a trailing partial byte is
//! reachable only through bit-level operators.

use bitvec::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::MutationView;

pub const INTERESTING_8: [u8; 7] = [0, 1, 16, 32, 127, 128, 255];
pub const ARITH_MAX: u8 = 16;
/// Havoc stacks 1, 2, 4 or 8 operators.
pub const HAVOC_MAX_STACK: u32 = 8;
/// Longest bit range moved by one copy operator.
pub const HAVOC_MAX_COPY_BITS: usize = 16;

/// A single deterministic-stage edit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetOp {
    /// Flip `width` consecutive bits starting at `pos`.
    Flip { pos: usize, width: usize },
    ByteFlip { byte: usize },
    /// Wrapping add of `delta` (negative for subtraction).
    Arith { byte: usize, delta: i8 },
    Interesting { byte: usize, value: u8 },
}

impl DetOp {
    pub fn apply(self, bits: &mut BitSlice<u8, Msb0>) {
        match self {
            DetOp::Flip { pos, width } => {
                for i in pos..pos + width {
                    let b = bits[i];
                    bits.set(i, !b);
                }
            }
            DetOp::ByteFlip { byte } => {
                let old = load_byte(bits, byte);
                store_byte(bits, byte, !old);
            }
            DetOp::Arith { byte, delta } => {
                let old = load_byte(bits, byte);
                store_byte(bits, byte, old.wrapping_add(delta as u8));
            }
            DetOp::Interesting { byte, value } => store_byte(bits, byte, value),
        }
    }
}

#[inline]
fn load_byte(bits: &BitSlice<u8, Msb0>, byte: usize) -> u8 {
    bits[byte * 8..byte * 8 + 8].load_be::<u8>()
}

#[inline]
fn store_byte(bits: &mut BitSlice<u8, Msb0>, byte: usize, value: u8) {
    bits[byte * 8..byte * 8 + 8].store_be::<u8>(value);
}

/// The deterministic edits for a view of `len_bits` bits, in stage order:
/// 1-, 2- and 4-bit walking flips, byte flips, byte arithmetic `±1..=16`,
/// then interesting byte values.
pub fn deterministic_ops(len_bits: usize) -> impl Iterator<Item = DetOp> + Clone {
    let bytes = len_bits / 8;
    let flips = [1usize, 2, 4].into_iter().flat_map(move |width| {
        (0..(len_bits + 1).saturating_sub(width)).map(move |pos| DetOp::Flip { pos, width })
    });
    let byte_flips = (0..bytes).map(|byte| DetOp::ByteFlip { byte });
    let arith = (0..bytes).flat_map(|byte| {
        (1..=ARITH_MAX as i8).flat_map(move |d| [DetOp::Arith { byte, delta: d }, DetOp::Arith { byte, delta: -d }])
    });
    let interesting =
        (0..bytes).flat_map(|byte| INTERESTING_8.into_iter().map(move |value| DetOp::Interesting { byte, value }));
    flips.chain(byte_flips).chain(arith).chain(interesting)
}

/// Number of candidates [`deterministic_stage`] yields for a view of
/// `len_bits` bits.
pub fn deterministic_count(len_bits: usize) -> usize {
    let n = len_bits;
    let b = n / 8;
    n + n.saturating_sub(1) + n.saturating_sub(3) + b * (1 + 2 * ARITH_MAX as usize + INTERESTING_8.len())
}

/// Yields one candidate per deterministic edit of `view`.
pub fn deterministic_stage(view: &MutationView) -> impl Iterator<Item = MutationView> + '_ {
    deterministic_ops(view.len_bits()).map(move |op| {
        let mut c = view.clone();
        op.apply(&mut c.bits);
        c
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MutationBudget {
    /// Havoc iterations for this pass.
    pub energy: u32,
    pub rng_seed: u64,
}

/// Stacked random mutations, exactly `budget.energy` candidates long.
#[derive(Debug, Clone)]
pub struct HavocStage<'a> {
    base: &'a MutationView,
    rng: ChaCha8Rng,
    remaining: u32,
}

pub fn havoc_stage(view: &MutationView, budget: MutationBudget) -> HavocStage<'_> {
    HavocStage { base: view, rng: ChaCha8Rng::seed_from_u64(budget.rng_seed), remaining: budget.energy }
}

impl HavocStage<'_> {
    /// Writes the next candidate into `out`, reusing its allocation.
    pub fn next_into(&mut self, out: &mut MutationView) -> bool {
        if self.remaining == 0 {
            return false;
        }
        self.remaining -= 1;
        if out.bits.len() == self.base.bits.len() {
            out.bits.copy_from_bitslice(&self.base.bits);
        } else {
            out.bits.clone_from(&self.base.bits);
        }
        if out.segments != self.base.segments {
            out.segments.clone_from(&self.base.segments);
        }
        if out.bits.is_empty() {
            return true;
        }
        let stack = 1u32 << self.rng.random_range(0..=HAVOC_MAX_STACK.ilog2());
        for _ in 0..stack {
            havoc_op(&mut out.bits, &mut self.rng);
        }
        true
    }
}

impl Iterator for HavocStage<'_> {
    type Item = MutationView;

    fn next(&mut self) -> Option<MutationView> {
        let mut out = self.base.clone();
        self.next_into(&mut out).then_some(out)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining as usize, Some(self.remaining as usize))
    }
}

impl ExactSizeIterator for HavocStage<'_> {}

fn havoc_op(bits: &mut BitSlice<u8, Msb0>, rng: &mut impl Rng) {
    let n = bits.len();
    let bytes = n / 8;
    // without a whole byte only the bit-level operators apply
    let op = if bytes == 0 { [0u32, 4][rng.random_range(0..2)] } else { rng.random_range(0..5) };
    match op {
        0 => {
            let pos = rng.random_range(0..n);
            let b = bits[pos];
            bits.set(pos, !b);
        }
        1 => store_byte(bits, rng.random_range(0..bytes), rng.random()),
        2 => {
            let byte = rng.random_range(0..bytes);
            let delta = rng.random_range(1..=ARITH_MAX);
            let old = load_byte(bits, byte);
            let new = if rng.random() { old.wrapping_add(delta) } else { old.wrapping_sub(delta) };
            store_byte(bits, byte, new);
        }
        3 => {
            let byte = rng.random_range(0..bytes);
            store_byte(bits, byte, INTERESTING_8[rng.random_range(0..INTERESTING_8.len())]);
        }
        _ => {
            let len = rng.random_range(1..=n.min(HAVOC_MAX_COPY_BITS));
            let src = rng.random_range(0..=n - len);
            let dst = rng.random_range(0..=n - len);
            bits.copy_within(src..src + len, dst);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{extract, restore, FieldMode, FieldSpec, LayoutSpec};
    use proptest::prelude::*;

    fn view_of(len_bytes: usize, fields: Vec<FieldSpec>, input: &[u8]) -> (LayoutSpec, MutationView) {
        let spec = LayoutSpec::new(len_bytes, fields).unwrap();
        let view = extract(&spec, input).unwrap();
        (spec, view)
    }

    fn byte_view(value: u8) -> MutationView {
        view_of(1, vec![FieldSpec::new("b", 0, 8, FieldMode::Fuzz)], &[value]).1
    }

    #[test]
    fn first_candidate_flips_msb() {
        let first = deterministic_stage(&byte_view(0)).next().unwrap();
        assert_eq!(first.bits.as_raw_slice(), &[0x80]);
    }

    #[test]
    fn five_bit_view_has_only_flips() {
        let (_, view) = view_of(1, vec![FieldSpec::new("f", 3, 5, FieldMode::Fuzz)], &[0]);
        let ops: Vec<_> = deterministic_ops(view.len_bits()).collect();
        assert_eq!(ops.len(), 5 + 4 + 2);
        assert!(ops.iter().all(|op| matches!(op, DetOp::Flip { .. })));
        assert_eq!(deterministic_stage(&view).count(), 11);
    }

    /// Counts the deterministic candidates with plain loops.
    fn hand_count(len_bits: usize) -> usize {
        let mut count = 0;
        for width in [1, 2, 4] {
            let mut pos = 0;
            while pos + width <= len_bits {
                count += 1;
                pos += 1;
            }
        }
        let mut byte = 0;
        while (byte + 1) * 8 <= len_bits {
            count += 1; // byte flip
            for _ in 1..=16 {
                count += 2; // +d and -d
            }
            count += 7; // interesting values
            byte += 1;
        }
        count
    }

    #[test]
    fn deterministic_count_matches_enumeration() {
        assert_eq!(hand_count(16), 124);
        for len in 0..80 {
            assert_eq!(deterministic_ops(len).count(), hand_count(len), "len {len}");
            assert_eq!(deterministic_count(len), hand_count(len), "len {len}");
        }
    }

    #[test]
    fn deterministic_candidates_touch_only_their_bits() {
        let view = byte_view(0x5a);
        let mut two = view.clone();
        two.bits.extend_from_bitslice(view.bits.as_bitslice());
        for (op, cand) in deterministic_ops(16).zip(deterministic_stage(&two)) {
            let touched: Vec<usize> = (0..16).filter(|&i| cand.bits[i] != two.bits[i]).collect();
            match op {
                DetOp::Flip { pos, width } => assert_eq!(touched, (pos..pos + width).collect::<Vec<_>>()),
                DetOp::ByteFlip { byte } | DetOp::Arith { byte, .. } | DetOp::Interesting { byte, .. } => {
                    assert!(touched.iter().all(|&i| i / 8 == byte))
                }
            }
        }
    }

    #[test]
    fn arith_wraps() {
        let mut v = byte_view(250);
        DetOp::Arith { byte: 0, delta: 16 }.apply(&mut v.bits);
        assert_eq!(v.bits.as_raw_slice(), &[10]);
        DetOp::Arith { byte: 0, delta: -16 }.apply(&mut v.bits);
        assert_eq!(v.bits.as_raw_slice(), &[250]);
    }

    #[test]
    fn havoc_yields_exactly_energy() {
        let view = byte_view(7);
        let stage = havoc_stage(&view, MutationBudget { energy: 100, rng_seed: 1 });
        assert_eq!(stage.len(), 100);
        assert_eq!(stage.count(), 100);
    }

    #[test]
    fn havoc_is_reproducible() {
        let (_, view) = view_of(4, vec![FieldSpec::new("a", 4, 20, FieldMode::Fuzz)], &[1, 2, 3, 4]);
        let budget = MutationBudget { energy: 200, rng_seed: 99 };
        let a: Vec<_> = havoc_stage(&view, budget).collect();
        let b: Vec<_> = havoc_stage(&view, budget).collect();
        assert_eq!(a, b);
        let c: Vec<_> = havoc_stage(&view, MutationBudget { rng_seed: 100, ..budget }).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn next_into_matches_iterator() {
        let view = byte_view(3);
        let budget = MutationBudget { energy: 50, rng_seed: 5 };
        let expected: Vec<_> = havoc_stage(&view, budget).collect();
        let mut stage = havoc_stage(&view, budget);
        let mut out = view.clone();
        let mut got = Vec::new();
        while stage.next_into(&mut out) {
            got.push(out.clone());
        }
        assert_eq!(got, expected);
    }

    #[test]
    fn one_havoc_op_changes_at_most_a_copy_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let base: Vec<u8> = (0..32u32).map(|i| (i.wrapping_mul(2_654_435_761) >> 13) as u8).collect();
        for _ in 0..5000 {
            let mut bytes = base.clone();
            havoc_op(bytes.view_bits_mut::<Msb0>(), &mut rng);
            let changed: u32 = bytes.iter().zip(&base).map(|(a, b)| (a ^ b).count_ones()).sum();
            assert!(changed as usize <= HAVOC_MAX_COPY_BITS, "{changed}");
        }
    }

    #[test]
    fn havoc_on_sub_byte_view() {
        let (_, view) = view_of(1, vec![FieldSpec::new("f", 2, 3, FieldMode::Fuzz)], &[0xff]);
        for c in havoc_stage(&view, MutationBudget { energy: 300, rng_seed: 3 }) {
            assert_eq!(c.len_bits(), 3);
        }
    }

    fn arb_layout() -> impl Strategy<Value = (LayoutSpec, Vec<u8>)> {
        (1usize..12)
            .prop_flat_map(|len| {
                let total = len * 8;
                (
                    Just(len),
                    proptest::collection::vec((0..total, 1usize..24, any::<bool>()), 1..6),
                    proptest::collection::vec(any::<u8>(), len),
                )
            })
            .prop_map(|(len, raw, input)| {
                // lay candidate fields left to right, skipping any that would overlap
                let total = len * 8;
                let mut starts: Vec<_> = raw;
                starts.sort_by_key(|r| r.0);
                let mut fields = Vec::new();
                let mut cursor = 0;
                for (i, (start, width, fuzz)) in starts.into_iter().enumerate() {
                    let start = start.max(cursor);
                    if start >= total {
                        break;
                    }
                    let width = width.min(total - start);
                    let mode = if fuzz { FieldMode::Fuzz } else { FieldMode::Keep };
                    fields.push(FieldSpec::new(format!("f{i}"), start, width, mode));
                    cursor = start + width;
                }
                (LayoutSpec::new(len, fields).unwrap(), input)
            })
    }

    proptest! {
        #[test]
        fn candidates_stay_inside_fuzz_fields((spec, input) in arb_layout(), seed in any::<u64>()) {
            let view = extract(&spec, &input).unwrap();
            prop_assume!(!view.is_empty());
            let det = deterministic_stage(&view).take(64);
            let havoc = havoc_stage(&view, MutationBudget { energy: 64, rng_seed: seed });
            for cand in det.chain(havoc) {
                prop_assert_eq!(cand.len_bits(), view.len_bits());
                let out = restore(&spec, &input, &cand).unwrap();
                let (a, b) = (input.view_bits::<Msb0>(), out.view_bits::<Msb0>());
                for pos in 0..spec.total_len_bits() {
                    if !spec.is_fuzz_bit(pos) {
                        prop_assert_eq!(a[pos], b[pos]);
                    }
                }
            }
        }
    }
}
