//! Radial Fourier spectra of feature maps and per-scale contributions.
//!
//! The 2-D DFT of the channel-mean plane is binned by integer-rounded radial
//! frequency; bin `r` covers radii `[r - 0.5, r + 0.5)` in index units, i.e.
//! a center of `r / side` cycles per pixel. Energies are normalized to
//! fractions of the total power, with an all-zero input assigned to the DC
//! bin (the limit of constant maps).

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid::TokenPyramid;
use crate::quantizer::{upsample, Codebook};
use crate::schedule::ScaleSchedule;
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Bin boundaries in cycles/pixel; bin `i` covers `edges[i]..edges[i+1]`.
    pub bin_edges: Vec<f64>,
    /// Bin centers in cycles/pixel (`r / side`).
    pub bin_centers: Vec<f64>,
    /// Power fraction per bin; sums to 1.
    pub energy: Vec<f64>,
}

impl SpectrumReport {
    /// Energy fraction in bins whose center lies strictly above
    /// `cutoff` cycles/pixel.
    pub fn fraction_above(&self, cutoff: f64) -> f64 {
        self.bin_centers
            .iter()
            .zip(&self.energy)
            .filter(|(c, _)| **c > cutoff)
            .map(|(_, e)| e)
            .sum()
    }

    pub fn dc_fraction(&self) -> f64 {
        self.energy.first().copied().unwrap_or(0.0)
    }
}

/// Unnormalized forward 2-D FFT of a row-major `side x side` plane.
fn fft2d(plane: &[f64], side: usize) -> Vec<Complex<f64>> {
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(side);
    let mut grid: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
    for row in grid.chunks_exact_mut(side) {
        fft.process(row);
    }
    // transpose, transform columns, transpose back
    let mut t = vec![Complex::new(0.0, 0.0); side * side];
    for y in 0..side {
        for x in 0..side {
            t[x * side + y] = grid[y * side + x];
        }
    }
    for row in t.chunks_exact_mut(side) {
        fft.process(row);
    }
    for y in 0..side {
        for x in 0..side {
            grid[y * side + x] = t[x * side + y];
        }
    }
    grid
}

/// Total spectral power divided by `side^2`; equals the spatial energy
/// `sum(x^2)` by Parseval's identity.
pub fn spectral_energy(plane: &[f64], side: usize) -> f64 {
    fft2d(plane, side)
        .iter()
        .map(|c| c.norm_sqr())
        .sum::<f64>()
        / (side * side) as f64
}

/// Radial power spectrum of a square plane.
pub fn radial_spectrum_plane(plane: &[f64], height: usize, width: usize) -> Result<SpectrumReport> {
    if height != width {
        return Err(Error::Shape(format!(
            "spectrum input must be square, got {height}x{width}"
        )));
    }
    let side = height;
    if plane.len() != side * side {
        return Err(Error::Shape(format!(
            "plane of side {side} needs {} samples, got {}",
            side * side,
            plane.len()
        )));
    }
    let spectrum = fft2d(plane, side);
    // signed frequency indices wrap at side/2
    let signed = |i: usize| -> f64 {
        if i <= side / 2 {
            i as f64
        } else {
            i as f64 - side as f64
        }
    };
    let max_radius = ((side / 2) as f64 * std::f64::consts::SQRT_2).round() as usize + 1;
    let mut bins = vec![0.0; max_radius + 1];
    for y in 0..side {
        for x in 0..side {
            let r = (signed(x).powi(2) + signed(y).powi(2)).sqrt().round() as usize;
            bins[r] += spectrum[y * side + x].norm_sqr();
        }
    }
    while bins.len() > 1 && *bins.last().unwrap() == 0.0 {
        bins.pop();
    }
    let total: f64 = bins.iter().sum();
    let energy = if total > 0.0 {
        bins.iter().map(|b| b / total).collect()
    } else {
        // all-zero input: treat as constant
        let mut e = vec![0.0; bins.len()];
        e[0] = 1.0;
        e
    };
    let s = side as f64;
    let bin_centers: Vec<f64> = (0..energy.len()).map(|r| r as f64 / s).collect();
    let mut bin_edges: Vec<f64> = vec![0.0];
    bin_edges.extend((0..energy.len()).map(|r| (r as f64 + 0.5) / s));
    Ok(SpectrumReport {
        bin_edges,
        bin_centers,
        energy,
    })
}

/// Radial power spectrum of the channel-mean of a feature map.
pub fn radial_spectrum(f: &FeatureMap) -> Result<SpectrumReport> {
    radial_spectrum_plane(&f.channel_mean_plane(), f.side, f.side)
}

/// The additive contribution of scale `k` to the reconstruction:
/// `upsample(embed(r_k), final resolution)`.
pub fn scale_contribution(
    r: &TokenPyramid,
    k: usize,
    cb: &Codebook,
    schedule: &ScaleSchedule,
) -> Result<FeatureMap> {
    if k >= r.maps.len() {
        return Err(Error::Range {
            what: "scale index",
            got: k,
            limit: r.maps.len(),
        });
    }
    upsample(&cb.embed_map(&r.maps[k]), schedule.final_side())
}
