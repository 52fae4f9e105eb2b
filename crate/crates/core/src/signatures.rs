//! Error signatures: the spatial pattern and bit-position profile a defective
//! hardware unit leaves on the tile it computes, plus the sampler that turns
//! a signature into a concrete corruption plan.
//!
//! Bit indices refer to a 16-bit reference layout (FP16: sign 15, exponent
//! 10..=14, mantissa 0..=9) and are remapped per target format when a plan is
//! applied.
//!
//! Signature files are line-delimited JSON, one signature per line:
//!
//! ```json
//! {"id":"patch3x3","unit_kind":"tensor_core","spatial":{"kind":"patch","h":3,"w":3},
//!  "bit_pmf":{"13":1.0},"multiplicity_pmf":{"1":1.0},"flip_mode":"flip","weight":1.0}
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::softfp::{BitMode, BitOp};

/// Width of the reference layout signature bit indices are expressed in.
pub const REFERENCE_WIDTH: u32 = 16;

/// Default multi-bit weighting: single-bit corruptions dominate.
pub const DEFAULT_MULTIPLICITY: [(usize, f64); 3] = [(1, 0.80), (2, 0.15), (3, 0.05)];

const PMF_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    TensorCore,
    FmaAlu,
    CacheLine,
    RegisterFile,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Spatial {
    Patch { h: usize, w: usize },
    Scattered { k: usize },
    Row,
    Column,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorSignature {
    pub id: String,
    pub unit_kind: UnitKind,
    pub spatial: Spatial,
    pub bit_pmf: BTreeMap<u32, f64>,
    pub multiplicity_pmf: BTreeMap<usize, f64>,
    #[serde(default = "default_flip_mode")]
    pub flip_mode: BitMode,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_flip_mode() -> BitMode {
    BitMode::Flip
}

fn default_weight() -> f64 {
    1.0
}

fn check_pmf<K: fmt::Display>(what: &str, pmf: &BTreeMap<K, f64>) -> std::result::Result<(), String> {
    if pmf.is_empty() {
        return Err(format!("{what} is empty"));
    }
    if let Some((k, p)) = pmf.iter().find(|(_, p)| !(p.is_finite() && **p >= 0.0)) {
        return Err(format!("{what}[{k}] = {p} is not a probability"));
    }
    let total: f64 = pmf.values().sum();
    if (total - 1.0).abs() > PMF_TOLERANCE {
        return Err(format!("{what} sums to {total}, not 1"));
    }
    Ok(())
}

impl ErrorSignature {
    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|m| Error::Validation(format!("signature `{}`: {m}", self.id)))
    }

    fn check(&self) -> std::result::Result<(), String> {
        check_pmf("bit_pmf", &self.bit_pmf)?;
        check_pmf("multiplicity_pmf", &self.multiplicity_pmf)?;
        if let Some(b) = self.bit_pmf.keys().find(|&&b| b >= REFERENCE_WIDTH) {
            return Err(format!("bit index {b} outside the 16-bit reference layout"));
        }
        let support = self.bit_pmf.values().filter(|&&p| p > 0.0).count();
        if let Some(&m) = self
            .multiplicity_pmf
            .iter()
            .find(|(&m, &p)| p > 0.0 && (m == 0 || m > support))
            .map(|(m, _)| m)
        {
            return Err(format!(
                "multiplicity {m} cannot be drawn without replacement from {support} bits"
            ));
        }
        if !(self.weight.is_finite() && self.weight > 0.0) {
            return Err(format!("weight {} must be positive", self.weight));
        }
        match self.spatial {
            Spatial::Patch { h, w } if h == 0 || w == 0 => Err("empty patch".into()),
            Spatial::Scattered { k: 0 } => Err("scattered count must be at least 1".into()),
            _ => Ok(()),
        }
    }

    /// Shannon entropy (nats) of the bit-position distribution.
    pub fn bit_entropy(&self) -> f64 {
        self.bit_pmf
            .values()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }
}

/// The three synthetic signature families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    #[serde(rename = "patch3x3")]
    Patch3x3,
    FmaSporadic,
    CachelineRow,
}

impl Archetype {
    pub const ALL: [Archetype; 3] = [Archetype::Patch3x3, Archetype::FmaSporadic, Archetype::CachelineRow];

    pub fn as_str(self) -> &'static str {
        match self {
            Archetype::Patch3x3 => "patch3x3",
            Archetype::FmaSporadic => "fma_sporadic",
            Archetype::CachelineRow => "cacheline_row",
        }
    }

    /// Parses a comma-separated list such as `patch3x3,cacheline_row`.
    pub fn parse_list(s: &str) -> Result<Vec<Archetype>> {
        let list: Vec<Archetype> = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect::<Result<_>>()?;
        if list.is_empty() {
            return Err(Error::config("archetype list is empty"));
        }
        Ok(list)
    }
}

impl fmt::Display for Archetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Archetype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Archetype::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown archetype `{s}` (expected patch3x3, fma_sporadic or cacheline_row)"
                ))
            })
    }
}

fn normalized<K: Ord + Copy>(weights: &[(K, f64)]) -> BTreeMap<K, f64> {
    let total: f64 = weights.iter().map(|(_, w)| w).sum();
    weights.iter().map(|&(k, w)| (k, w / total)).collect()
}

/// Synthesizes one archetypal signature. Only `patch3x3` consumes randomness
/// (its single exponent bit).
pub fn synth_archetype<R: Rng + ?Sized>(kind: Archetype, rng: &mut R) -> ErrorSignature {
    let default_mult: BTreeMap<usize, f64> = DEFAULT_MULTIPLICITY.into_iter().collect();
    match kind {
        Archetype::Patch3x3 => {
            let bit = rng.random_range(10..=14u32);
            ErrorSignature {
                id: kind.as_str().into(),
                unit_kind: UnitKind::TensorCore,
                spatial: Spatial::Patch { h: 3, w: 3 },
                bit_pmf: BTreeMap::from([(bit, 1.0)]),
                multiplicity_pmf: BTreeMap::from([(1, 1.0)]),
                flip_mode: BitMode::Flip,
                weight: 1.0,
            }
        }
        Archetype::FmaSporadic => ErrorSignature {
            id: kind.as_str().into(),
            unit_kind: UnitKind::FmaAlu,
            spatial: Spatial::Scattered { k: 4 },
            bit_pmf: normalized(&[
                (2, 1.0),
                (3, 1.0),
                (4, 1.0),
                (5, 1.0),
                (6, 1.0),
                (7, 1.0),
                (8, 1.0),
                (9, 1.0),
                (10, 2.0),
                (11, 2.0),
            ]),
            multiplicity_pmf: default_mult,
            flip_mode: BitMode::Flip,
            weight: 1.0,
        },
        Archetype::CachelineRow => ErrorSignature {
            id: kind.as_str().into(),
            unit_kind: UnitKind::CacheLine,
            spatial: Spatial::Row,
            bit_pmf: normalized(&[(11, 0.10), (12, 0.15), (13, 0.25), (14, 0.40), (15, 0.10)]),
            multiplicity_pmf: default_mult,
            flip_mode: BitMode::Flip,
            weight: 1.0,
        },
    }
}

/// Synthesizes a list of archetypes from one seed.
pub fn synth_set(kinds: &[Archetype], seed: u64) -> Vec<ErrorSignature> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    kinds.iter().map(|&k| synth_archetype(k, &mut rng)).collect()
}

/// Reads a signature file. Blank lines are skipped; an empty file yields an
/// empty list.
pub fn load_signatures(path: &Path) -> Result<Vec<ErrorSignature>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sig: ErrorSignature = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        sig.validate()
            .map_err(|e| Error::Validation(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(sig);
    }
    Ok(out)
}

pub fn save_signatures(path: &Path, sigs: &[ErrorSignature]) -> Result<()> {
    let mut buf = Vec::new();
    for s in sigs {
        s.validate()?;
        serde_json::to_writer(&mut buf, s).expect("signatures serialize");
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// A concrete corruption of one tile: element offsets are row-major within a
/// tile of `tile_dims`, anchored at `tile_origin` in the target matrix.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionPlan {
    pub tile_origin: (usize, usize),
    pub tile_dims: (usize, usize),
    pub element_ops: Vec<(usize, Vec<BitOp>)>,
}

impl CorruptionPlan {
    pub fn n_elements(&self) -> usize {
        self.element_ops.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.tile_dims;
        let mut seen = std::collections::BTreeSet::new();
        for (off, ops) in &self.element_ops {
            if *off >= h * w {
                return Err(Error::contract(format!("offset {off} outside {h}×{w} tile")));
            }
            if !seen.insert(*off) {
                return Err(Error::contract(format!("offset {off} planned twice")));
            }
            let mut bits: Vec<u32> = ops.iter().map(|o| o.bit).collect();
            bits.sort_unstable();
            bits.dedup();
            if bits.len() != ops.len() || bits.iter().any(|&b| b >= REFERENCE_WIDTH) {
                return Err(Error::contract(format!("malformed bit ops at offset {off}")));
            }
        }
        Ok(())
    }
}

/// Draws a key from a pmf restricted to `allowed` keys (weights renormalized).
fn draw<K: Copy + PartialEq, R: Rng + ?Sized>(rng: &mut R, items: &[(K, f64)]) -> K {
    let total: f64 = items.iter().map(|(_, p)| p).sum();
    let mut u = rng.random::<f64>() * total;
    for &(k, p) in items {
        if u < p {
            return k;
        }
        u -= p;
    }
    items.iter().rev().find(|(_, p)| *p > 0.0).expect("nonempty pmf").0
}

/// Samples the elements and bit operations one activation applies to a tile.
pub fn plan_corruption<R: Rng + ?Sized>(
    sig: &ErrorSignature,
    tile_dims: (usize, usize),
    density: f64,
    rng: &mut R,
) -> Result<CorruptionPlan> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::config(format!("density {density} outside (0, 1]")));
    }
    let (h, w) = tile_dims;
    if h == 0 || w == 0 {
        return Err(Error::contract("empty tile"));
    }
    let candidates: Vec<usize> = match sig.spatial {
        Spatial::Patch { h: ph, w: pw } => {
            let (eh, ew) = (ph.min(h), pw.min(w));
            let r0 = rng.random_range(0..=h - eh);
            let c0 = rng.random_range(0..=w - ew);
            (0..eh)
                .flat_map(|r| (0..ew).map(move |c| (r0 + r) * w + c0 + c))
                .collect()
        }
        Spatial::Row => {
            let r = rng.random_range(0..h);
            (0..w).map(|c| r * w + c).collect()
        }
        Spatial::Column => {
            let c = rng.random_range(0..w);
            (0..h).map(|r| r * w + c).collect()
        }
        Spatial::Scattered { k } => {
            let mut picked = index::sample(rng, h * w, k.min(h * w)).into_vec();
            picked.sort_unstable();
            picked
        }
    };
    let base = candidates.len();
    let count = ((density * base as f64).round() as usize).clamp(1, base);
    let chosen: Vec<usize> = if count == base {
        candidates
    } else {
        let mut idx = index::sample(rng, base, count).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| candidates[i]).collect()
    };

    let mult: Vec<(usize, f64)> = sig.multiplicity_pmf.iter().map(|(&k, &p)| (k, p)).collect();
    let bits: Vec<(u32, f64)> = sig.bit_pmf.iter().map(|(&k, &p)| (k, p)).collect();
    let element_ops = chosen
        .into_iter()
        .map(|off| {
            let m = draw(rng, &mult);
            let mut remaining = bits.clone();
            let mut ops = Vec::with_capacity(m);
            for _ in 0..m {
                let b = draw(rng, &remaining);
                remaining.retain(|(k, _)| *k != b);
                ops.push(BitOp::new(b, sig.flip_mode));
            }
            (off, ops)
        })
        .collect();
    Ok(CorruptionPlan {
        tile_origin: (0, 0),
        tile_dims,
        element_ops,
    })
}
