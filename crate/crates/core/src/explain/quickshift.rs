use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuickshiftConfig {
    /// Gaussian kernel width for the density estimate; the search window
    /// radius is `ceil(3 * kernel_size)`.
    pub kernel_size: f64,
    /// Links longer than this (joint-space distance) are cut.
    pub max_dist: f64,
    /// Weight of colour against position: colour features are multiplied by it.
    pub ratio: f64,
    /// Convert RGB input to CIELAB before segmenting.
    pub convert_lab: bool,
}

impl Default for QuickshiftConfig {
    fn default() -> Self {
        Self {
            kernel_size: 1.0,
            max_dist: 200.0,
            ratio: 0.2,
            convert_lab: true,
        }
    }
}

/// Segment label per pixel (row-major), ids `0..count`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segmentation {
    pub labels: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub count: usize,
}

impl Segmentation {
    /// Pixel indices of each segment.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.count];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

/// sRGB in `[0, 1]` to CIELAB (D65 white).
pub fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = |c: f64| {
        if c > 0.04045 {
            ((c + 0.055) / 1.055).powf(2.4)
        } else {
            c / 12.92
        }
    };
    let [r, g, b] = rgb.map(lin);
    let x = (0.412453 * r + 0.357580 * g + 0.180423 * b) / 0.95047;
    let y = 0.212671 * r + 0.715160 * g + 0.072169 * b;
    let z = (0.019334 * r + 0.119193 * g + 0.950227 * b) / 1.08883;
    let f = |t: f64| {
        if t > 0.008856 {
            t.cbrt()
        } else {
            7.787 * t + 16.0 / 116.0
        }
    };
    let (fx, fy, fz) = (f(x), f(y), f(z));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Per-pixel feature vectors (colour scaled by `ratio`), `H*W x C`.
fn features(image: &Tensor<f32>, cfg: &QuickshiftConfig) -> Result<(usize, usize, usize, Vec<f64>)> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape("quickshift", format!("expected C x H x W, got {:?}", image.shape())));
    };
    if cfg.convert_lab && c != 3 {
        return Err(Error::invalid("quickshift", format!("CIELAB conversion needs 3 channels, got {c}")));
    }
    let plane = h * w;
    let d = image.data();
    let mut out = Vec::with_capacity(plane * c);
    for i in 0..plane {
        let px: Vec<f64> = (0..c).map(|ch| d[ch * plane + i] as f64).collect();
        if cfg.convert_lab {
            out.extend(rgb_to_lab([px[0], px[1], px[2]]).map(|v| v * cfg.ratio));
        } else {
            out.extend(px.iter().map(|v| v * cfg.ratio));
        }
    }
    Ok((c, h, w, out))
}

/// Quickshift mode seeking. Each pixel links to the nearest pixel of
/// higher density inside the kernel window (ties in density go to the
/// larger pixel index); links longer than `max_dist` are cut and each
/// remaining tree becomes a segment. Segment ids follow root pixel order.
pub fn quickshift_segment(image: &Tensor<f32>, cfg: &QuickshiftConfig) -> Result<Segmentation> {
    for (name, v) in [("kernel_size", cfg.kernel_size), ("max_dist", cfg.max_dist), ("ratio", cfg.ratio)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::invalid("quickshift", format!("{name} must be positive, got {v}")));
        }
    }
    let (c, h, w, feat) = features(image, cfg)?;
    let radius = (3.0 * cfg.kernel_size).ceil() as isize;
    let inv = -0.5 / (cfg.kernel_size * cfg.kernel_size);
    let n = h * w;
    let dist2 = |a: usize, b: usize| {
        let (ya, xa) = ((a / w) as f64, (a % w) as f64);
        let (yb, xb) = ((b / w) as f64, (b % w) as f64);
        let mut d = (ya - yb).powi(2) + (xa - xb).powi(2);
        for k in 0..c {
            d += (feat[a * c + k] - feat[b * c + k]).powi(2);
        }
        d
    };
    let window = |p: usize| {
        let (y, x) = ((p / w) as isize, (p % w) as isize);
        let ys = (y - radius).max(0)..(y + radius + 1).min(h as isize);
        let xs = (x - radius).max(0)..(x + radius + 1).min(w as isize);
        ys.flat_map(move |yy| xs.clone().map(move |xx| yy as usize * w + xx as usize))
    };
    let density: Vec<f64> = (0..n).map(|p| window(p).map(|q| (dist2(p, q) * inv).exp()).sum()).collect();
    let higher = |q: usize, p: usize| density[q] > density[p] || (density[q] == density[p] && q > p);
    let max2 = cfg.max_dist * cfg.max_dist;
    let mut parent: Vec<usize> = (0..n).collect();
    for p in 0..n {
        let mut best = f64::INFINITY;
        for q in window(p) {
            if higher(q, p) {
                let d = dist2(p, q);
                if d < best {
                    best = d;
                    parent[p] = q;
                }
            }
        }
        if best > max2 {
            parent[p] = p;
        }
    }
    // parents always have higher (density, index), so chains terminate
    let mut root = vec![usize::MAX; n];
    for p in 0..n {
        let mut q = p;
        let mut path = Vec::new();
        while root[q] == usize::MAX && parent[q] != q {
            path.push(q);
            q = parent[q];
        }
        let r = if parent[q] == q { q } else { root[q] };
        root[q] = r;
        for v in path {
            root[v] = r;
        }
    }
    let mut id = vec![usize::MAX; n];
    let mut count = 0;
    for p in 0..n {
        if root[p] == p {
            id[p] = count;
            count += 1;
        }
    }
    let labels = root.iter().map(|&r| id[r]).collect();
    Ok(Segmentation {
        labels,
        height: h,
        width: w,
        count,
    })
}
