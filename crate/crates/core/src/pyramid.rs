//! Temporal and frequency pyramids built from the normalized window.
//!
//! The temporal pyramid halves the sequence with average pooling at each
//! level. The frequency pyramid splits the half spectrum into disjoint,
//! logarithmically spaced bands and reconstructs one band-limited series per
//! band. Those reconstructions are full length; level `s` is then average
//! pooled `s` times so both pyramids have the shape `(B, L_in / 2^s, C)` at
//! every level.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{num_bins, Real, Tape, Tensor, Var};

/// Which frequency band feeds pyramid level 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BandOrder {
    /// Level 0 (finest temporal resolution) gets the lowest band.
    #[default]
    LowFirst,
    HighFirst,
}

impl FromStr for BandOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low_first" => Ok(Self::LowFirst),
            "high_first" => Ok(Self::HighFirst),
            other => Err(Error::Config(vec![format!(
                "band_order `{other}` is not low_first or high_first"
            )])),
        }
    }
}

impl fmt::Display for BandOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LowFirst => "low_first",
            Self::HighFirst => "high_first",
        })
    }
}

/// Disjoint cover of the `N` half-spectrum bins by `S` bands.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BandPartition {
    edges: Vec<usize>,
}

impl BandPartition {
    pub fn edges(&self) -> &[usize] {
        &self.edges
    }

    pub fn num_levels(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn num_bins(&self) -> usize {
        *self.edges.last().expect("at least two edges")
    }

    pub fn band(&self, s: usize) -> Range<usize> {
        self.edges[s]..self.edges[s + 1]
    }

    pub fn widths(&self) -> Vec<usize> {
        self.edges.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// `(N, 2)` mask selecting band `s` in a (real, imaginary) spectrum.
    pub fn mask<T: Real>(&self, s: usize) -> Tensor<T> {
        let n = self.num_bins();
        let mut m = Tensor::zeros(vec![n, 2]);
        for k in self.band(s) {
            m.data_mut()[2 * k] = T::one();
            m.data_mut()[2 * k + 1] = T::one();
        }
        m
    }
}

/// Logarithmic band edges over `n` bins.
///
/// Raw interior edges are `round(n^(s/S))`; each is then pushed above its
/// predecessor and kept low enough that later bands stay nonempty. For small
/// `n` that repair can leave a low band wider than the next one, so the
/// widths are finally sorted ascending (a no-op whenever the raw edges were
/// already well spread).
pub fn make_band_partition(n: usize, levels: usize) -> Result<BandPartition> {
    if levels < 2 {
        return Err(Error::Config(vec![format!(
            "pyramid needs at least 2 levels, got {levels}"
        )]));
    }
    if n < levels {
        return Err(Error::Config(vec![format!(
            "cannot split {n} frequency bins into {levels} nonempty bands"
        )]));
    }
    let mut edges = vec![0usize];
    for s in 1..levels {
        let raw = (n as f64).powf(s as f64 / levels as f64).round() as usize;
        let prev = edges[s - 1];
        edges.push(raw.max(prev + 1).min(n - (levels - s)));
    }
    edges.push(n);
    let mut widths: Vec<usize> = edges.windows(2).map(|w| w[1] - w[0]).collect();
    widths.sort_unstable();
    let mut acc = 0;
    let edges = std::iter::once(0)
        .chain(widths.iter().map(|w| {
            acc += w;
            acc
        }))
        .collect();
    Ok(BandPartition { edges })
}

/// Checks that `len` supports `levels` rounds of halving.
pub fn check_levels(len: usize, levels: usize) -> Result<()> {
    if levels < 2 {
        return Err(Error::Config(vec![format!(
            "model.S = {levels}: at least 2 pyramid levels are required"
        )]));
    }
    let div = 1usize
        .checked_shl((levels - 1) as u32)
        .filter(|&d| d > 0 && d <= len)
        .unwrap_or(0);
    if div == 0 || !len.is_multiple_of(div) {
        return Err(Error::Config(vec![format!(
            "model.L_in = {len} must be divisible by 2^(S-1) = 2^{} (L_in mod 2^(S-1) must be 0)",
            levels - 1
        )]));
    }
    Ok(())
}

/// Level 0 is `x_norm`; level `s` average-pools level `s - 1`.
pub fn build_temporal_pyramid<T: Real>(tape: &mut Tape<T>, x_norm: Var, levels: usize) -> Result<Vec<Var>> {
    let shape = tape.shape(x_norm).to_vec();
    if shape.len() != 3 {
        return Err(Error::precondition("temporal_pyramid", "expected (B, L, C)"));
    }
    check_levels(shape[1], levels)?;
    let mut out = vec![x_norm];
    for _ in 1..levels {
        let prev = *out.last().expect("nonempty");
        out.push(tape.avg_pool(prev)?);
    }
    Ok(out)
}

/// Full-length band reconstructions `irfft(rfft(x) * mask_s)`, one per band,
/// ordered from the lowest band to the highest.
pub fn frequency_bands<T: Real>(tape: &mut Tape<T>, x_norm: Var, partition: &BandPartition) -> Result<Vec<Var>> {
    let shape = tape.shape(x_norm).to_vec();
    if shape.len() != 3 {
        return Err(Error::precondition("frequency_pyramid", "expected (B, L, C)"));
    }
    let len = shape[1];
    if partition.num_bins() != num_bins(len) {
        return Err(Error::Config(vec![format!(
            "band partition covers {} bins but a length-{len} window has {}",
            partition.num_bins(),
            num_bins(len)
        )]));
    }
    let series = tape.transpose_last2(x_norm)?;
    let spectrum = tape.rfft(series)?;
    (0..partition.num_levels())
        .map(|s| {
            let mask = tape.constant(partition.mask(s));
            let band = tape.mul(spectrum, mask)?;
            let rec = tape.irfft(band, len)?;
            tape.transpose_last2(rec)
        })
        .collect()
}

/// Band reconstructions assigned to levels and pooled to `L_in / 2^s`.
pub fn build_frequency_pyramid<T: Real>(
    tape: &mut Tape<T>,
    x_norm: Var,
    partition: &BandPartition,
    order: BandOrder,
) -> Result<Vec<Var>> {
    let levels = partition.num_levels();
    check_levels(tape.shape(x_norm)[1], levels)?;
    let mut bands = frequency_bands(tape, x_norm, partition)?;
    if order == BandOrder::HighFirst {
        bands.reverse();
    }
    bands
        .into_iter()
        .enumerate()
        .map(|(s, mut level)| {
            for _ in 0..s {
                level = tape.avg_pool(level)?;
            }
            Ok(level)
        })
        .collect()
}

/// Temporal and frequency levels, shape-aligned per scale.
#[derive(Clone, Debug)]
pub struct DualPyramid {
    pub temporal: Vec<Var>,
    pub frequency: Vec<Var>,
}

impl DualPyramid {
    pub fn levels(&self) -> usize {
        self.temporal.len()
    }
}

pub fn build_dual_pyramid<T: Real>(
    tape: &mut Tape<T>,
    x_norm: Var,
    levels: usize,
    order: BandOrder,
) -> Result<DualPyramid> {
    let len = tape.shape(x_norm)[1];
    check_levels(len, levels)?;
    let partition = make_band_partition(num_bins(len), levels)?;
    let temporal = build_temporal_pyramid(tape, x_norm, levels)?;
    let frequency = build_frequency_pyramid(tape, x_norm, &partition, order)?;
    Ok(DualPyramid {
        temporal,
        frequency,
    })
}
