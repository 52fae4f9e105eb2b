//! Bit-exact emulation of the low-precision training formats.
//!
//! Values live in `f64` everywhere else in the crate; this module converts
//! between `f64` and the 8/16-bit encodings of FP16, BF16 and the two FP8
//! variants, and applies bit-level corruption to encoded patterns.
//!
//! Quantization (`encode`) rounds to nearest-even and saturates finite
//! overflow to `±max_finite`. Bit operations are never saturated: a flipped
//! exponent bit may produce an infinity or NaN directly.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Format {
    Fp16,
    Bf16,
    Fp8E4M3,
    Fp8E5M2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NanRule {
    /// All-ones exponent: zero mantissa is infinity, anything else NaN.
    IeeeAllOnesExp,
    /// Only the all-ones pattern (exponent and mantissa) is NaN; no infinity.
    E4m3AllOnes,
}

/// Bit layout and special-value semantics of one emulated format.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FormatSpec {
    pub name: Format,
    pub sign_bits: u32,
    pub exp_bits: u32,
    pub man_bits: u32,
    pub exp_bias: i32,
    pub has_infinity: bool,
    pub max_finite: f64,
    pub nan_rule: NanRule,
}

pub const FP16: FormatSpec = FormatSpec {
    name: Format::Fp16,
    sign_bits: 1,
    exp_bits: 5,
    man_bits: 10,
    exp_bias: 15,
    has_infinity: true,
    max_finite: 65504.0,
    nan_rule: NanRule::IeeeAllOnesExp,
};

pub const BF16: FormatSpec = FormatSpec {
    name: Format::Bf16,
    sign_bits: 1,
    exp_bits: 8,
    man_bits: 7,
    exp_bias: 127,
    has_infinity: true,
    // (2 - 2^-7) * 2^127
    max_finite: 3.389_531_389_251_535_5e38,
    nan_rule: NanRule::IeeeAllOnesExp,
};

pub const FP8_E4M3: FormatSpec = FormatSpec {
    name: Format::Fp8E4M3,
    sign_bits: 1,
    exp_bits: 4,
    man_bits: 3,
    exp_bias: 7,
    has_infinity: false,
    max_finite: 448.0,
    nan_rule: NanRule::E4m3AllOnes,
};

pub const FP8_E5M2: FormatSpec = FormatSpec {
    name: Format::Fp8E5M2,
    sign_bits: 1,
    exp_bits: 5,
    man_bits: 2,
    exp_bias: 15,
    has_infinity: true,
    max_finite: 57344.0,
    nan_rule: NanRule::IeeeAllOnesExp,
};

impl Format {
    pub const ALL: [Format; 4] = [Format::Fp16, Format::Bf16, Format::Fp8E4M3, Format::Fp8E5M2];

    pub fn spec(self) -> &'static FormatSpec {
        match self {
            Format::Fp16 => &FP16,
            Format::Bf16 => &BF16,
            Format::Fp8E4M3 => &FP8_E4M3,
            Format::Fp8E5M2 => &FP8_E5M2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Format::Fp16 => "FP16",
            Format::Bf16 => "BF16",
            Format::Fp8E4M3 => "FP8_E4M3",
            Format::Fp8E5M2 => "FP8_E5M2",
        }
    }

    pub fn width(self) -> u32 {
        self.spec().width()
    }

    pub fn is_fp8(self) -> bool {
        matches!(self, Format::Fp8E4M3 | Format::Fp8E5M2)
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "FP16" => Ok(Format::Fp16),
            "BF16" => Ok(Format::Bf16),
            "FP8_E4M3" | "E4M3" => Ok(Format::Fp8E4M3),
            "FP8_E5M2" | "E5M2" => Ok(Format::Fp8E5M2),
            other => Err(Error::config(format!("unknown number format `{other}`"))),
        }
    }
}

impl Serialize for Format {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Format {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl FormatSpec {
    pub fn width(&self) -> u32 {
        self.sign_bits + self.exp_bits + self.man_bits
    }

    fn exp_mask(&self) -> u32 {
        (1 << self.exp_bits) - 1
    }

    fn man_mask(&self) -> u32 {
        (1 << self.man_bits) - 1
    }

    pub fn sign_mask(&self) -> u32 {
        1 << (self.width() - 1)
    }

    /// Largest finite magnitude, as an encoded pattern with the sign bit clear.
    pub fn max_finite_bits(&self) -> u32 {
        match self.nan_rule {
            NanRule::IeeeAllOnesExp => ((self.exp_mask() - 1) << self.man_bits) | self.man_mask(),
            NanRule::E4m3AllOnes => (self.exp_mask() << self.man_bits) | (self.man_mask() - 1),
        }
    }

    /// The single NaN pattern every NaN input encodes to.
    pub fn canonical_nan_bits(&self) -> u32 {
        match self.nan_rule {
            NanRule::IeeeAllOnesExp => {
                (self.exp_mask() << self.man_bits) | (1 << (self.man_bits - 1))
            }
            NanRule::E4m3AllOnes => (self.exp_mask() << self.man_bits) | self.man_mask(),
        }
    }

    pub fn infinity_bits(&self) -> Option<u32> {
        self.has_infinity.then(|| self.exp_mask() << self.man_bits)
    }

    /// `max_finite` recomputed from the layout fields.
    pub fn derived_max_finite(&self) -> f64 {
        decode_bits(self, self.max_finite_bits())
    }

    /// Exponent field range `[lo, hi)` in bit positions.
    pub fn exp_field(&self) -> std::ops::Range<u32> {
        self.man_bits..self.man_bits + self.exp_bits
    }
}

/// An encoded value of a given format. Only the low `width` bits are used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BitPattern {
    pub bits: u16,
    pub format: Format,
}

impl BitPattern {
    /// Builds a pattern, rejecting bits outside the format width.
    pub fn new(bits: u32, format: Format) -> Result<Self> {
        if bits >> format.width() != 0 {
            return Err(Error::config(format!(
                "pattern {bits:#x} does not fit in {} bits of {format}",
                format.width()
            )));
        }
        Ok(BitPattern {
            bits: bits as u16,
            format,
        })
    }

    pub fn spec(&self) -> &'static FormatSpec {
        self.format.spec()
    }

    pub fn decode(self) -> f64 {
        decode(self)
    }

    pub fn class(self) -> PatternClass {
        classify_pattern(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternClass {
    Zero,
    Subnormal,
    Normal,
    Infinity,
    Nan,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BitMode {
    Flip,
    Stuck0,
    Stuck1,
}

impl FromStr for BitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "flip" => Ok(BitMode::Flip),
            "stuck0" => Ok(BitMode::Stuck0),
            "stuck1" => Ok(BitMode::Stuck1),
            other => Err(Error::config(format!("unknown bit mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BitOp {
    pub bit: u32,
    pub mode: BitMode,
}

impl BitOp {
    pub fn new(bit: u32, mode: BitMode) -> Self {
        BitOp { bit, mode }
    }
}

/// Power of two as an `f64`, valid across the normal exponent range.
fn pow2(exp: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&exp));
    f64::from_bits(((exp + 1023) as u64) << 52)
}

fn decode_bits(spec: &FormatSpec, bits: u32) -> f64 {
    let m = spec.man_bits;
    let sign = bits & spec.sign_mask() != 0;
    let exp = (bits >> m) & spec.exp_mask();
    let man = bits & spec.man_mask();

    let magnitude = if exp == spec.exp_mask() && spec.nan_rule == NanRule::IeeeAllOnesExp {
        if man == 0 {
            f64::INFINITY
        } else {
            return f64::NAN;
        }
    } else if exp == spec.exp_mask() && man == spec.man_mask() {
        // E4M3: only S.1111.111 is NaN
        return f64::NAN;
    } else if exp == 0 {
        man as f64 * pow2(1 - spec.exp_bias - m as i32)
    } else {
        ((1u32 << m) | man) as f64 * pow2(exp as i32 - spec.exp_bias - m as i32)
    };
    if sign {
        -magnitude
    } else {
        magnitude
    }
}

/// Exact value of a pattern. NaN payloads are not preserved.
pub fn decode(p: BitPattern) -> f64 {
    decode_bits(p.spec(), p.bits as u32)
}

/// Round-to-nearest-even encoding with saturation of finite overflow.
///
/// Infinite inputs encode to infinity where the format has one; E4M3 has
/// none and encodes them as NaN.
pub fn encode(value: f64, format: Format) -> BitPattern {
    let spec = format.spec();
    BitPattern {
        bits: encode_bits(spec, value) as u16,
        format,
    }
}

fn encode_bits(spec: &FormatSpec, value: f64) -> u32 {
    if value.is_nan() {
        return spec.canonical_nan_bits();
    }
    let sign = if value.is_sign_negative() {
        spec.sign_mask()
    } else {
        0
    };
    if value.is_infinite() {
        return match spec.infinity_bits() {
            Some(inf) => sign | inf,
            None => spec.canonical_nan_bits(),
        };
    }
    if value == 0.0 {
        return sign;
    }

    let m = spec.man_bits as i32;
    let raw = value.abs().to_bits();
    let raw_exp = ((raw >> 52) & 0x7ff) as i32;
    let frac = raw & ((1u64 << 52) - 1);
    // |value| = sig * 2^e2 with sig an integer
    let (sig, e2) = if raw_exp == 0 {
        (frac, -1074)
    } else {
        (frac | (1u64 << 52), raw_exp - 1075)
    };
    let msb = 63 - sig.leading_zeros() as i32;
    let e_val = e2 + msb;
    let e_min = 1 - spec.exp_bias;
    let quantum_exp = e_val.max(e_min) - m;

    let shift = quantum_exp - e2;
    let n: u64 = if shift <= 0 {
        sig << (-shift)
    } else if shift >= 64 {
        0
    } else {
        let q = sig >> shift;
        let rem = sig & ((1u64 << shift) - 1);
        let half = 1u64 << (shift - 1);
        if rem > half || (rem == half && q & 1 == 1) {
            q + 1
        } else {
            q
        }
    };

    let magnitude: u64 = if e_val < e_min {
        // subnormal range; n == 2^m rolls into the smallest normal on its own
        n
    } else {
        let mut exp_field = (e_val + spec.exp_bias) as u64;
        let mut n = n;
        if n == 1u64 << (m + 1) {
            exp_field += 1;
            n >>= 1;
        }
        (exp_field << m) | (n - (1u64 << m))
    };
    let max = spec.max_finite_bits() as u64;
    sign | magnitude.min(max) as u32
}

/// `decode(encode(value))` without materialising the pattern.
///
/// Normal and subnormal finite values are rounded directly on the `f64`
/// representation; saturation and specials take the general path.
#[inline]
pub fn round_trip(value: f64, format: Format) -> f64 {
    let spec = format.spec();
    let a = value.abs();
    let e_min = 1 - spec.exp_bias;
    if a >= pow2(e_min) && a <= spec.max_finite {
        let shift = 52 - spec.man_bits;
        let bits = value.to_bits();
        let lsb = (bits >> shift) & 1;
        let r = (bits + ((1u64 << (shift - 1)) - 1) + lsb) & !((1u64 << shift) - 1);
        let out = f64::from_bits(r);
        if out.abs() <= spec.max_finite {
            return out;
        }
    } else if a < pow2(e_min) {
        // Adding and removing 1.5·2^52·quantum rounds to a multiple of the
        // subnormal quantum under the default nearest-even mode.
        let c = 1.5 * pow2(52 + e_min - spec.man_bits as i32);
        return ((a + c) - c).copysign(value);
    }
    decode_bits(spec, encode_bits(spec, value))
}

/// Applies flip / stuck-at operations to a pattern.
///
/// Every bit index must be below the format width and appear at most once.
pub fn apply_bit_ops(p: BitPattern, ops: &[BitOp]) -> Result<BitPattern> {
    let width = p.format.width();
    let mut seen = 0u32;
    let mut bits = p.bits as u32;
    for op in ops {
        if op.bit >= width {
            return Err(Error::config(format!(
                "bit index {} out of range for {} ({width} bits)",
                op.bit, p.format
            )));
        }
        if seen & (1 << op.bit) != 0 {
            return Err(Error::config(format!("bit index {} repeated", op.bit)));
        }
        seen |= 1 << op.bit;
        bits = match op.mode {
            BitMode::Flip => bits ^ (1 << op.bit),
            BitMode::Stuck0 => bits & !(1 << op.bit),
            BitMode::Stuck1 => bits | (1 << op.bit),
        };
    }
    Ok(BitPattern {
        bits: bits as u16,
        format: p.format,
    })
}

pub fn classify_pattern(p: BitPattern) -> PatternClass {
    let spec = p.spec();
    let bits = p.bits as u32;
    let exp = (bits >> spec.man_bits) & spec.exp_mask();
    let man = bits & spec.man_mask();
    if exp == spec.exp_mask() {
        match spec.nan_rule {
            NanRule::IeeeAllOnesExp if man == 0 => return PatternClass::Infinity,
            NanRule::IeeeAllOnesExp => return PatternClass::Nan,
            NanRule::E4m3AllOnes if man == spec.man_mask() => return PatternClass::Nan,
            NanRule::E4m3AllOnes => return PatternClass::Normal,
        }
    }
    match (exp, man) {
        (0, 0) => PatternClass::Zero,
        (0, _) => PatternClass::Subnormal,
        _ => PatternClass::Normal,
    }
}
