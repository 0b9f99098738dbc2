//! Separable multi-level 2-D discrete wavelet transform with zero-padded
//! boundaries.
//!
//! Every level keeps all coefficients of the zero-extended signal, so a
//! length-`n` axis produces `(n + F - 1) / 2` coefficients per band for a
//! filter of length `F`. With orthonormal filters the analysis operator `A`
//! is then an isometry: `idwt2 = A^T` inverts it exactly and preserves
//! energy. The adjoint relation is also what makes the synthesis
//! differentiable: its backward pass is the analysis transform.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Boundary handling used by every transform in this module.
pub const BOUNDARY_MODE: &str = "zero";

/// Orthonormal Daubechies family members.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Wavelet {
    Haar,
    Db2,
    Db3,
    Db4,
}

const HAAR: [f64; 2] = [std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2];
const DB2: [f64; 4] = [
    0.48296291314453416,
    0.8365163037378079,
    0.2241438680420134,
    -0.12940952255126037,
];
const DB3: [f64; 6] = [
    0.33267055295008263,
    0.8068915093110925,
    0.45987750211849154,
    -0.13501102001025458,
    -0.08544127388202666,
    0.03522629188570953,
];
const DB4: [f64; 8] = [
    0.2303778133088965,
    0.7148465705529157,
    0.6308807679298589,
    -0.027983769416859854,
    -0.18703481171909309,
    0.030841381835560764,
    0.0328830116668852,
    -0.010597401785069032,
];

impl Wavelet {
    /// Low-pass scaling filter `h`, normalized so that `sum(h) = sqrt(2)`.
    pub fn scaling_filter(self) -> &'static [f64] {
        match self {
            Wavelet::Haar => &HAAR,
            Wavelet::Db2 => &DB2,
            Wavelet::Db3 => &DB3,
            Wavelet::Db4 => &DB4,
        }
    }

    /// High-pass filter `g[j] = (-1)^j h[F-1-j]`.
    pub fn wavelet_filter(self) -> Vec<f64> {
        let h = self.scaling_filter();
        let f = h.len();
        (0..f)
            .map(|j| if j % 2 == 0 { h[f - 1 - j] } else { -h[f - 1 - j] })
            .collect()
    }

    pub fn filter_len(self) -> usize {
        self.scaling_filter().len()
    }

    pub fn name(self) -> &'static str {
        match self {
            Wavelet::Haar => "haar",
            Wavelet::Db2 => "db2",
            Wavelet::Db3 => "db3",
            Wavelet::Db4 => "db4",
        }
    }
}

impl fmt::Display for Wavelet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Wavelet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "haar" | "db1" => Ok(Wavelet::Haar),
            "db2" => Ok(Wavelet::Db2),
            "db3" => Ok(Wavelet::Db3),
            "db4" => Ok(Wavelet::Db4),
            other => Err(Error::invalid(
                "wavelet",
                format!("unknown wavelet {other:?} (expected haar, db2, db3, db4)"),
            )),
        }
    }
}

/// Detail or approximation subband. The first letter is the filter applied
/// along the width axis, the second along the height axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Band {
    LL,
    LH,
    HL,
    HH,
}

/// Coefficient bookkeeping for one transform configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WaveletLayout {
    pub wavelet: Wavelet,
    pub levels: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `dims[0]` is the image size; `dims[l]` the band size at level `l`.
    dims: Vec<(usize, usize)>,
}

impl WaveletLayout {
    pub fn new(
        wavelet: Wavelet,
        levels: usize,
        channels: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if levels == 0 {
            return Err(Error::invalid("levels", "need at least one decomposition level"));
        }
        let f = wavelet.filter_len();
        let mut dims = vec![(height, width)];
        for level in 1..=levels {
            let (h, w) = dims[level - 1];
            if h < f || w < f {
                return Err(Error::invalid(
                    "levels",
                    format!(
                        "{levels} levels of {wavelet} are too many for {height}x{width}: \
                         level {level} input is {h}x{w}, filter length {f}"
                    ),
                ));
            }
            dims.push(((h + f - 1) / 2, (w + f - 1) / 2));
        }
        Ok(Self {
            wavelet,
            levels,
            channels,
            height,
            width,
            dims,
        })
    }

    pub fn band_dims(&self, level: usize) -> (usize, usize) {
        self.dims[level]
    }

    /// Number of coefficients per channel.
    pub fn coeff_len(&self) -> usize {
        let (h, w) = self.dims[self.levels];
        h * w + (1..=self.levels).map(|l| 3 * self.dims[l].0 * self.dims[l].1).sum::<usize>()
    }

    /// All subbands as `(level, band, range within one channel)`, coarsest first.
    pub fn bands(&self) -> Vec<(usize, Band, Range<usize>)> {
        let mut out = Vec::with_capacity(1 + 3 * self.levels);
        let (h, w) = self.dims[self.levels];
        out.push((self.levels, Band::LL, 0..h * w));
        let mut offset = h * w;
        for level in (1..=self.levels).rev() {
            let (h, w) = self.dims[level];
            for band in [Band::LH, Band::HL, Band::HH] {
                out.push((level, band, offset..offset + h * w));
                offset += h * w;
            }
        }
        out
    }

    /// Analysis transform of one `height x width` channel.
    pub fn analyze<T: Element>(&self, image: &[T]) -> Vec<T> {
        assert_eq!(image.len(), self.height * self.width);
        let bands = self.bands();
        let mut coeffs = vec![T::zero(); self.coeff_len()];
        let mut current = image.to_vec();
        for level in 1..=self.levels {
            let [ll, lh, hl, hh] = analyze_level(self.wavelet, &current, self.dims[level - 1]);
            // detail bands for `level` sit at index 1 + 3 * (levels - level)
            let base = 1 + 3 * (self.levels - level);
            for (slot, band) in [lh, hl, hh].into_iter().enumerate() {
                coeffs[bands[base + slot].2.clone()].copy_from_slice(&band);
            }
            current = ll;
        }
        coeffs[bands[0].2.clone()].copy_from_slice(&current);
        coeffs
    }

    /// Synthesis transform of one channel's coefficients (adjoint of [`Self::analyze`]).
    pub fn synthesize<T: Element>(&self, coeffs: &[T]) -> Vec<T> {
        assert_eq!(coeffs.len(), self.coeff_len());
        let bands = self.bands();
        let mut current = coeffs[bands[0].2.clone()].to_vec();
        for level in (1..=self.levels).rev() {
            let base = 1 + 3 * (self.levels - level);
            let detail = |slot: usize| &coeffs[bands[base + slot].2.clone()];
            current = synthesize_level(
                self.wavelet,
                [&current, detail(0), detail(1), detail(2)],
                self.dims[level],
                self.dims[level - 1],
            );
        }
        current
    }
}

fn analyze_1d<T: Element>(h: &[T], g: &[T], x: &[T], lo: &mut [T], hi: &mut [T]) {
    let f = h.len();
    let shift = f as isize - 2;
    for o in 0..lo.len() {
        let (mut a, mut d) = (T::zero(), T::zero());
        for j in 0..f {
            let i = j as isize + 2 * o as isize - shift;
            if i >= 0 && (i as usize) < x.len() {
                let v = x[i as usize];
                a += h[j] * v;
                d += g[j] * v;
            }
        }
        lo[o] = a;
        hi[o] = d;
    }
}

fn synthesize_1d<T: Element>(h: &[T], g: &[T], lo: &[T], hi: &[T], x: &mut [T]) {
    let f = h.len();
    let shift = f as isize - 2;
    x.fill(T::zero());
    for o in 0..lo.len() {
        for j in 0..f {
            let i = j as isize + 2 * o as isize - shift;
            if i >= 0 && (i as usize) < x.len() {
                x[i as usize] += h[j] * lo[o] + g[j] * hi[o];
            }
        }
    }
}

fn filters<T: Element>(wavelet: Wavelet) -> (Vec<T>, Vec<T>) {
    let h = wavelet.scaling_filter().iter().map(|&v| T::from_f64_lossy(v)).collect();
    let g = wavelet.wavelet_filter().into_iter().map(T::from_f64_lossy).collect();
    (h, g)
}

/// One level: rows (width axis) first, then columns. Returns `[LL, LH, HL, HH]`.
fn analyze_level<T: Element>(wavelet: Wavelet, x: &[T], (h, w): (usize, usize)) -> [Vec<T>; 4] {
    let (hf, gf) = filters::<T>(wavelet);
    let f = hf.len();
    let (ho, wo) = ((h + f - 1) / 2, (w + f - 1) / 2);
    let mut low = vec![T::zero(); h * wo];
    let mut high = vec![T::zero(); h * wo];
    for r in 0..h {
        analyze_1d(
            &hf,
            &gf,
            &x[r * w..(r + 1) * w],
            &mut low[r * wo..(r + 1) * wo],
            &mut high[r * wo..(r + 1) * wo],
        );
    }
    let columns = |src: &[T]| {
        let mut lo = vec![T::zero(); ho * wo];
        let mut hi = vec![T::zero(); ho * wo];
        let mut column = vec![T::zero(); h];
        let (mut cl, mut ch) = (vec![T::zero(); ho], vec![T::zero(); ho]);
        for c in 0..wo {
            for r in 0..h {
                column[r] = src[r * wo + c];
            }
            analyze_1d(&hf, &gf, &column, &mut cl, &mut ch);
            for r in 0..ho {
                lo[r * wo + c] = cl[r];
                hi[r * wo + c] = ch[r];
            }
        }
        (lo, hi)
    };
    let (ll, lh) = columns(&low);
    let (hl, hh) = columns(&high);
    [ll, lh, hl, hh]
}

fn synthesize_level<T: Element>(
    wavelet: Wavelet,
    [ll, lh, hl, hh]: [&[T]; 4],
    (ho, wo): (usize, usize),
    (h, w): (usize, usize),
) -> Vec<T> {
    let (hf, gf) = filters::<T>(wavelet);
    let columns = |lo: &[T], hi: &[T]| {
        let mut out = vec![T::zero(); h * wo];
        let (mut cl, mut ch) = (vec![T::zero(); ho], vec![T::zero(); ho]);
        let mut column = vec![T::zero(); h];
        for c in 0..wo {
            for r in 0..ho {
                cl[r] = lo[r * wo + c];
                ch[r] = hi[r * wo + c];
            }
            synthesize_1d(&hf, &gf, &cl, &ch, &mut column);
            for r in 0..h {
                out[r * wo + c] = column[r];
            }
        }
        out
    };
    let low = columns(ll, lh);
    let high = columns(hl, hh);
    let mut x = vec![T::zero(); h * w];
    for r in 0..h {
        synthesize_1d(
            &hf,
            &gf,
            &low[r * wo..(r + 1) * wo],
            &high[r * wo..(r + 1) * wo],
            &mut x[r * w..(r + 1) * w],
        );
    }
    x
}

/// Wavelet coefficients of a multi-channel image, `channels x coeff_len`.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletCoeffs<T = f32> {
    pub layout: WaveletLayout,
    pub data: Vec<T>,
}

impl<T: Element> WaveletCoeffs<T> {
    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.layout.coeff_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn subband(&self, channel: usize, level: usize, band: Band) -> Option<&[T]> {
        let ch = self.channel(channel);
        self.layout
            .bands()
            .into_iter()
            .find(|(l, b, _)| *l == level && *b == band)
            .map(|(_, _, r)| &ch[r])
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64().powi(2)).sum()
    }
}

/// Forward transform of a `C x H x W` image.
pub fn dwt2<T: Element>(image: &Tensor<T>, wavelet: Wavelet, levels: usize) -> Result<WaveletCoeffs<T>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape("dwt2", format!("expected C x H x W, got {:?}", image.shape())));
    };
    let layout = WaveletLayout::new(wavelet, levels, c, h, w)?;
    let mut data = Vec::with_capacity(c * layout.coeff_len());
    for plane in image.data().chunks(h * w) {
        data.extend(layout.analyze(plane));
    }
    Ok(WaveletCoeffs { layout, data })
}

/// Inverse transform back to a `C x H x W` image.
pub fn idwt2<T: Element>(coeffs: &WaveletCoeffs<T>) -> Result<Tensor<T>> {
    let layout = &coeffs.layout;
    let n = layout.coeff_len();
    if coeffs.data.len() != layout.channels * n {
        return Err(Error::shape(
            "idwt2",
            format!(
                "expected {} coefficients ({} channels x {n}), got {}",
                layout.channels * n,
                layout.channels,
                coeffs.data.len()
            ),
        ));
    }
    let mut out = Vec::with_capacity(layout.channels * layout.height * layout.width);
    for ch in coeffs.data.chunks(n) {
        out.extend(layout.synthesize(ch));
    }
    Tensor::new([layout.channels, layout.height, layout.width], out)
}

/// Luminance `0.299 R + 0.587 G + 0.114 B` of a `3 x H x W` image.
pub fn grayscale<T: Element>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::shape("grayscale", format!("expected 3 x H x W, got {:?}", image.shape())));
    };
    let n = h * w;
    let d = image.data();
    let (wr, wg, wb) = (
        T::from_f64_lossy(0.299),
        T::from_f64_lossy(0.587),
        T::from_f64_lossy(0.114),
    );
    let gray = (0..n).map(|i| wr * d[i] + wg * d[n + i] + wb * d[2 * n + i]).collect();
    Tensor::new([1, h, w], gray)
}
