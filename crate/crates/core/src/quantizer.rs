//! Multi-scale residual vector quantization and reconstruction.
//!
//! Encoding walks the schedule coarse-to-fine: the current full-resolution
//! residual is downsampled to scale `k` (with the adjoint of the bilinear
//! kernel, see [`downsample`]), every cell is assigned to its nearest
//! codebook vector, the quantized map is bilinearly upsampled back to full
//! resolution and subtracted from the residual. Decoding is the telescoping
//! sum of the upsampled per-scale embeddings, so the final residual norm
//! reported by [`quantize_pyramid`] is exactly the round-trip reconstruction
//! error, and with the zero vector in the codebook the per-scale residual
//! norms never increase.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::pyramid::{TokenMap, TokenPyramid};
use crate::schedule::ScaleSchedule;
use crate::tensor::{FeatureMap, Mat};

/// A `V x C` table of embedding vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub vectors: Mat,
}

impl Codebook {
    pub fn new(vectors: Mat) -> Result<Self> {
        if vectors.rows() == 0 {
            return Err(Error::Contract("codebook needs at least one vector".into()));
        }
        if !vectors.is_finite() {
            return Err(Error::Contract("codebook entries must be finite".into()));
        }
        Ok(Self { vectors })
    }

    /// Unit-Gaussian rows with row 0 zeroed, reproducible from `seed`.
    pub fn random(vocab: usize, channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data: Vec<f64> = (0..vocab * channels)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        data[..channels].fill(0.0);
        Self {
            vectors: Mat::from_vec(vocab, channels, data).unwrap(),
        }
    }

    pub fn vocab(&self) -> usize {
        self.vectors.rows()
    }

    pub fn channels(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vector(&self, token: u32) -> &[f64] {
        self.vectors.row(token as usize)
    }

    /// Embedding lookup over a whole token map.
    pub fn embed_map(&self, map: &TokenMap) -> FeatureMap {
        let c = self.channels();
        let mut out = FeatureMap::zeros(map.side, c);
        for (i, &t) in map.tokens.iter().enumerate() {
            out.data_mut()[i * c..(i + 1) * c].copy_from_slice(self.vector(t));
        }
        out
    }

    fn nearest(&self, cell: &[f64]) -> u32 {
        let mut best = 0u32;
        let mut best_d = f64::INFINITY;
        for r in 0..self.vocab() {
            let row = self.vectors.row(r);
            let mut d = 0.0;
            for (a, b) in cell.iter().zip(row) {
                let diff = a - b;
                d += diff * diff;
            }
            // strict < keeps the lowest index on ties
            if d < best_d {
                best_d = d;
                best = r as u32;
            }
        }
        best
    }
}

/// Bilinear upsampling with align-corners semantics. Upsampling to the same
/// size is the identity; a 1x1 source broadcasts to a constant map.
pub fn upsample(map: &FeatureMap, to: usize) -> Result<FeatureMap> {
    if to < map.side {
        return Err(Error::Range {
            what: "upsample target side",
            got: to,
            limit: map.side,
        });
    }
    if to == map.side {
        return Ok(map.clone());
    }
    let src = map.side;
    let c = map.channels;
    if src == 1 {
        let mut out = FeatureMap::zeros(to, c);
        let v = map.cell(0, 0).to_vec();
        for y in 0..to {
            for x in 0..to {
                out.cell_mut(y, x).copy_from_slice(&v);
            }
        }
        return Ok(out);
    }
    let scale = (src - 1) as f64 / (to - 1) as f64;
    let mut data = vec![0.0; to * to * c];
    par::fill_rows(&mut data, to * c, to * c * 4, |y, row| {
        let fy = y as f64 * scale;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src - 1);
        let wy = fy - y0 as f64;
        for x in 0..to {
            let fx = x as f64 * scale;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(src - 1);
            let wx = fx - x0 as f64;
            let c00 = map.cell(y0, x0);
            let c01 = map.cell(y0, x1);
            let c10 = map.cell(y1, x0);
            let c11 = map.cell(y1, x1);
            for ch in 0..c {
                let top = c00[ch] * (1.0 - wx) + c01[ch] * wx;
                let bot = c10[ch] * (1.0 - wx) + c11[ch] * wx;
                row[x * c + ch] = top * (1.0 - wy) + bot * wy;
            }
        }
    });
    FeatureMap::from_vec(to, c, data)
}

/// The 1-D bilinear footprint of each coarse node: for every coarse index,
/// the `(fine index, weight)` pairs the align-corners upsample would spread
/// it over, plus the weight total.
fn bilinear_footprints(coarse: usize, fine: usize) -> Vec<(Vec<(usize, f64)>, f64)> {
    let mut out = vec![(Vec::new(), 0.0); coarse];
    if coarse == 1 {
        for p in 0..fine {
            out[0].0.push((p, 1.0));
        }
        out[0].1 = fine as f64;
        return out;
    }
    let scale = (coarse - 1) as f64 / (fine - 1) as f64;
    for p in 0..fine {
        let fp = p as f64 * scale;
        let c0 = fp.floor() as usize;
        let c1 = (c0 + 1).min(coarse - 1);
        let w1 = fp - c0 as f64;
        if w1 < 1.0 {
            out[c0].0.push((p, 1.0 - w1));
            out[c0].1 += 1.0 - w1;
        }
        if w1 > 0.0 {
            out[c1].0.push((p, w1));
            out[c1].1 += w1;
        }
    }
    out
}

/// Downsampling as the normalized adjoint of the bilinear upsample: each
/// coarse cell is the weighted mean of the fine cells in its bilinear
/// footprint.
///
/// This pairing is what makes residual quantization non-expansive: the
/// per-pixel upsample weights sum to one, so replacing a cell's nearest
/// codebook vector by the zero vector can never look better at full
/// resolution than it does at the coarse grid.
pub fn downsample(map: &FeatureMap, to: usize) -> Result<FeatureMap> {
    if to > map.side {
        return Err(Error::Range {
            what: "downsample target side",
            got: to,
            limit: map.side,
        });
    }
    if to == map.side {
        return Ok(map.clone());
    }
    let src = map.side;
    let c = map.channels;
    let footprints = bilinear_footprints(to, src);
    let mut out = FeatureMap::zeros(to, c);
    for y in 0..to {
        let (ys, ny) = &footprints[y];
        for (x, (xs, nx)) in footprints.iter().enumerate() {
            let acc = out.cell_mut(y, x);
            for &(sy, wy) in ys {
                for &(sx, wx) in xs {
                    let src_cell = (sy * src + sx) * c;
                    let w = wy * wx;
                    for (a, v) in acc.iter_mut().zip(&map.data()[src_cell..src_cell + c]) {
                        *a += v * w;
                    }
                }
            }
            let norm = 1.0 / (ny * nx);
            for v in acc.iter_mut() {
                *v *= norm;
            }
        }
    }
    Ok(out)
}

/// Resize in either direction (bilinear up, bilinear-adjoint down, identity
/// at the same size).
pub fn resize_to(map: &FeatureMap, to: usize) -> FeatureMap {
    use std::cmp::Ordering;
    match to.cmp(&map.side) {
        Ordering::Greater => upsample(map, to).unwrap(),
        Ordering::Less => downsample(map, to).unwrap(),
        Ordering::Equal => map.clone(),
    }
}

/// Encodes a full-resolution feature map into a token pyramid.
///
/// Returns the pyramid and the full-resolution residual L2 norm after each
/// scale; the last entry equals the round-trip reconstruction error.
pub fn quantize_pyramid(
    f: &FeatureMap,
    cb: &Codebook,
    s: &ScaleSchedule,
) -> Result<(TokenPyramid, Vec<f64>)> {
    if f.side != s.final_side() {
        return Err(Error::Shape(format!(
            "feature map side {} does not match schedule final side {}",
            f.side,
            s.final_side()
        )));
    }
    if f.channels != cb.channels() {
        return Err(Error::Shape(format!(
            "feature map has {} channels, codebook has {}",
            f.channels,
            cb.channels()
        )));
    }
    let mut residual = f.clone();
    let mut maps = Vec::with_capacity(s.num_scales());
    let mut norms = Vec::with_capacity(s.num_scales());
    for k in 0..s.num_scales() {
        let side = s.side(k);
        let down = downsample(&residual, side)?;
        let mut tokens = vec![0u32; side * side];
        par::fill_rows(&mut tokens, side, side * cb.vocab() * cb.channels(), |y, row| {
            for (x, slot) in row.iter_mut().enumerate() {
                let i = y * side + x;
                *slot = cb.nearest(&down.data()[i * cb.channels()..(i + 1) * cb.channels()]);
            }
        });
        let map = TokenMap::new(side, tokens)?;
        let up = upsample(&cb.embed_map(&map), f.side)?;
        residual.sub_assign(&up);
        norms.push(residual.l2_norm());
        maps.push(map);
    }
    Ok((TokenPyramid::new(cb.vocab(), maps), norms))
}

/// Rebuilds the full-resolution feature map from drafted plus refined token
/// maps: the sum of every scale's upsampled embedding.
///
/// `r_l ++ r_h` must form a contiguous prefix of the schedule's scales.
pub fn reconstruct(
    r_l: &[TokenMap],
    r_h: &[TokenMap],
    cb: &Codebook,
    s: &ScaleSchedule,
) -> Result<FeatureMap> {
    let maps: Vec<&TokenMap> = r_l.iter().chain(r_h.iter()).collect();
    if maps.len() > s.num_scales() {
        return Err(Error::Contract(format!(
            "{} maps provided, schedule has {} scales",
            maps.len(),
            s.num_scales()
        )));
    }
    for (k, map) in maps.iter().enumerate() {
        if map.side != s.side(k) {
            return Err(Error::Contract(format!(
                "map {k} has side {}, expected {} (scales must be contiguous from the first)",
                map.side,
                s.side(k)
            )));
        }
    }
    let mut out = FeatureMap::zeros(s.final_side(), cb.channels());
    for map in maps {
        out.add_assign(&upsample(&cb.embed_map(map), s.final_side())?);
    }
    Ok(out)
}

/// An 8-bit-free toy image: RGB samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelImage {
    pub side: usize,
    /// Row-major RGB triples.
    pub data: Vec<f64>,
}

/// Per-pixel affine channel mix. Zero features with zero bias decode to
/// mid-gray: `pixel = clamp01(0.5 + f . weight + bias)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderWeights {
    /// `C x 3` channel mix.
    pub weight: Mat,
    pub bias: [f64; 3],
}

impl DecoderWeights {
    pub fn identity(channels: usize) -> Self {
        let mut weight = Mat::zeros(channels, 3);
        for i in 0..channels.min(3) {
            weight.set(i, i, 1.0);
        }
        Self {
            weight,
            bias: [0.0; 3],
        }
    }

    pub fn random(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..channels * 3)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g * 0.02
            })
            .collect();
        Self {
            weight: Mat::from_vec(channels, 3, data).unwrap(),
            bias: [0.0; 3],
        }
    }
}

/// Applies the toy decoder; a pure function of its inputs.
pub fn decode_image(fhat: &FeatureMap, dec: &DecoderWeights) -> PixelImage {
    assert_eq!(
        fhat.channels,
        dec.weight.rows(),
        "decoder expects {} channels",
        dec.weight.rows()
    );
    let side = fhat.side;
    let mut data = Vec::with_capacity(side * side * 3);
    for i in 0..side * side {
        let cell = &fhat.data()[i * fhat.channels..(i + 1) * fhat.channels];
        for ch in 0..3 {
            let mut v = 0.5 + dec.bias[ch];
            for (c, &f) in cell.iter().enumerate() {
                v += f * dec.weight.get(c, ch);
            }
            data.push(v.clamp(0.0, 1.0));
        }
    }
    PixelImage { side, data }
}
