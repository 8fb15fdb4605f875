//! Field layouts for fixed-size binary inputs.
//!
//! A [`LayoutSpec`] names bit ranges of the input and marks each one as
//! fuzzable or frozen. [`extract`] packs the fuzzable bits into a compact
//! [`MutationView`]; [`restore`] writes a (possibly mutated) view back over
//! the original input, leaving every frozen bit untouched.
//!
//! Bits are addressed most-significant-bit first: bit 0 of the input is the
//! MSB of byte 0.

use std::collections::HashSet;
use std::fmt;

use bitvec::prelude::*;
use thiserror::Error;

pub type Bits = BitVec<u8, Msb0>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FieldMode {
    Fuzz,
    Keep,
}

impl fmt::Display for FieldMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldMode::Fuzz => f.write_str("fuzz"),
            FieldMode::Keep => f.write_str("keep"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSpec {
    pub name: String,
    pub offset_bits: usize,
    pub length_bits: usize,
    pub mode: FieldMode,
}

impl FieldSpec {
    pub fn new(name: impl Into<String>, offset_bits: usize, length_bits: usize, mode: FieldMode) -> Self {
        Self { name: name.into(), offset_bits, length_bits, mode }
    }

    pub fn end_bits(&self) -> usize {
        self.offset_bits + self.length_bits
    }
}

/// One contiguous run of view bits and where it lives in the full input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub view_offset_bits: usize,
    pub source_offset_bits: usize,
    pub length_bits: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SpecError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: field `{name}` overlaps field `{other}`")]
    Overlap { line: usize, name: String, other: String },
    #[error("line {line}: field `{name}` ends at bit {end} but the input is only {total} bits")]
    OutOfRange { line: usize, name: String, end: usize, total: usize },
    #[error("line {line}: duplicate field name `{name}`")]
    DuplicateName { line: usize, name: String },
    #[error("missing `len <bytes>` declaration")]
    MissingLen,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("input is {actual} bytes, layout expects {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("mutation view does not match the layout's fuzzable segments")]
    ShapeMismatch,
}

/// Validated, offset-sorted field layout of a fixed-size input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutSpec {
    total_len_bits: usize,
    fields: Vec<FieldSpec>,
    segments: Vec<Segment>,
}

impl LayoutSpec {
    /// Builds a layout from fields in any order. Line numbers in errors are
    /// 1-based field positions in `fields`.
    pub fn new(total_len_bytes: usize, fields: Vec<FieldSpec>) -> Result<Self, SpecError> {
        let lines: Vec<usize> = (1..=fields.len()).collect();
        Self::build(total_len_bytes * 8, fields.into_iter().zip(lines).collect())
    }

    fn build(total_len_bits: usize, declared: Vec<(FieldSpec, usize)>) -> Result<Self, SpecError> {
        let mut names = HashSet::new();
        for (field, line) in &declared {
            if !names.insert(field.name.as_str()) {
                return Err(SpecError::DuplicateName { line: *line, name: field.name.clone() });
            }
            if field.length_bits == 0 {
                return Err(SpecError::Syntax {
                    line: *line,
                    message: format!("field `{}` has zero length", field.name),
                });
            }
            if field.end_bits() > total_len_bits {
                return Err(SpecError::OutOfRange {
                    line: *line,
                    name: field.name.clone(),
                    end: field.end_bits(),
                    total: total_len_bits,
                });
            }
        }

        let mut sorted = declared;
        sorted.sort_by_key(|(f, line)| (f.offset_bits, *line));
        for pair in sorted.windows(2) {
            let (a, a_line) = &pair[0];
            let (b, b_line) = &pair[1];
            if b.offset_bits < a.end_bits() {
                let (line, name, other) = if b_line > a_line {
                    (*b_line, &b.name, &a.name)
                } else {
                    (*a_line, &a.name, &b.name)
                };
                return Err(SpecError::Overlap { line, name: name.clone(), other: other.clone() });
            }
        }

        let fields: Vec<FieldSpec> = sorted.into_iter().map(|(f, _)| f).collect();
        let mut segments = Vec::new();
        let mut view_offset = 0;
        for f in fields.iter().filter(|f| f.mode == FieldMode::Fuzz) {
            segments.push(Segment {
                view_offset_bits: view_offset,
                source_offset_bits: f.offset_bits,
                length_bits: f.length_bits,
            });
            view_offset += f.length_bits;
        }

        Ok(Self { total_len_bits, fields, segments })
    }

    pub fn total_len_bits(&self) -> usize {
        self.total_len_bits
    }

    pub fn total_len_bytes(&self) -> usize {
        self.total_len_bits / 8
    }

    pub fn fields(&self) -> &[FieldSpec] {
        &self.fields
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn has_fuzz_fields(&self) -> bool {
        !self.segments.is_empty()
    }

    /// Number of bits a [`MutationView`] of this layout carries.
    pub fn view_len_bits(&self) -> usize {
        self.segments.iter().map(|s| s.length_bits).sum()
    }

    /// True when bit `pos` of the input lies inside a fuzzable field.
    pub fn is_fuzz_bit(&self, pos: usize) -> bool {
        self.segments
            .iter()
            .any(|s| pos >= s.source_offset_bits && pos < s.source_offset_bits + s.length_bits)
    }

    fn check_len(&self, input: &[u8]) -> Result<(), CodecError> {
        if input.len() * 8 != self.total_len_bits {
            return Err(CodecError::LengthMismatch { expected: self.total_len_bytes(), actual: input.len() });
        }
        Ok(())
    }
}

/// Renders the layout in the same line format [`parse_spec`] reads.
impl fmt::Display for LayoutSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "len {}", self.total_len_bytes())?;
        let width = self.fields.iter().map(|x| x.name.len()).max().unwrap_or(0);
        for field in &self.fields {
            writeln!(
                f,
                "{:<width$} {:>5} {:>5} {}",
                field.name, field.offset_bits, field.length_bits, field.mode
            )?;
        }
        Ok(())
    }
}

/// Fuzzable bits of one input, packed back to back.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MutationView {
    pub bits: Bits,
    pub segments: Vec<Segment>,
}

impl MutationView {
    pub fn len_bits(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Whole bytes addressable by byte-level mutations.
    pub fn whole_bytes(&self) -> usize {
        self.bits.len() / 8
    }
}

/// Parses the line-based layout format:
///
/// ```text
/// len 64
/// # comment
/// magic   0  32  keep
/// width  32  16  fuzz
/// ```
///
/// `len` is in bytes; field offsets and lengths are in bits.
pub fn parse_spec(text: &str) -> Result<LayoutSpec, SpecError> {
    let mut total_bytes: Option<usize> = None;
    let mut declared = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = content.split_whitespace().collect();
        let syntax = |message: String| SpecError::Syntax { line, message };

        if total_bytes.is_none() {
            match tokens.as_slice() {
                ["len", n] => {
                    let n: usize = n.parse().map_err(|_| syntax(format!("invalid length `{n}`")))?;
                    if n == 0 {
                        return Err(syntax("input length must be at least one byte".into()));
                    }
                    total_bytes = Some(n);
                    continue;
                }
                _ => return Err(syntax("expected `len <bytes>` as the first declaration".into())),
            }
        }

        match tokens.as_slice() {
            ["len", ..] => return Err(syntax("`len` declared twice".into())),
            [name, offset, length, mode] => {
                let offset_bits: usize =
                    offset.parse().map_err(|_| syntax(format!("invalid bit offset `{offset}`")))?;
                let length_bits: usize =
                    length.parse().map_err(|_| syntax(format!("invalid bit length `{length}`")))?;
                let mode = match *mode {
                    "fuzz" => FieldMode::Fuzz,
                    "keep" => FieldMode::Keep,
                    other => return Err(syntax(format!("mode must be `fuzz` or `keep`, got `{other}`"))),
                };
                declared.push((FieldSpec::new(*name, offset_bits, length_bits, mode), line));
            }
            _ => {
                return Err(syntax(format!(
                    "expected `<name> <offset_bits> <length_bits> <fuzz|keep>`, got {} tokens",
                    tokens.len()
                )))
            }
        }
    }

    let total = total_bytes.ok_or(SpecError::MissingLen)?;
    LayoutSpec::build(total * 8, declared)
}

pub fn extract(spec: &LayoutSpec, input: &[u8]) -> Result<MutationView, CodecError> {
    spec.check_len(input)?;
    let src = input.view_bits::<Msb0>();
    let mut bits = Bits::with_capacity(spec.view_len_bits());
    for seg in spec.segments() {
        bits.extend_from_bitslice(&src[seg.source_offset_bits..seg.source_offset_bits + seg.length_bits]);
    }
    Ok(MutationView { bits, segments: spec.segments().to_vec() })
}

pub fn restore(spec: &LayoutSpec, original: &[u8], view: &MutationView) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::with_capacity(original.len());
    restore_into(spec, original, view, &mut out)?;
    Ok(out)
}

/// [`restore`] into a reusable buffer.
pub fn restore_into(
    spec: &LayoutSpec,
    original: &[u8],
    view: &MutationView,
    out: &mut Vec<u8>,
) -> Result<(), CodecError> {
    spec.check_len(original)?;
    if view.segments != spec.segments() || view.bits.len() != spec.view_len_bits() {
        return Err(CodecError::ShapeMismatch);
    }
    out.clear();
    out.extend_from_slice(original);
    let dst = out.view_bits_mut::<Msb0>();
    for seg in &view.segments {
        dst[seg.source_offset_bits..seg.source_offset_bits + seg.length_bits]
            .copy_from_bitslice(&view.bits[seg.view_offset_bits..seg.view_offset_bits + seg.length_bits]);
    }
    Ok(())
}
