use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Source coordinate and blend weight along one axis: pixel centres sit at
/// `i + 0.5`, so `src = (dst + 0.5) * in / out - 0.5`, clamped to the
/// image.
fn axis_taps(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src_len - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling of a `C x H x W` image with half-pixel centres.
pub fn resize_bilinear<T: Element>(image: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape("resize_bilinear", format!("expected C x H x W, got {:?}", image.shape())));
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("output size", format!("{out_h}x{out_w} has a zero dimension")));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let rows = axis_taps(h, out_h);
    let cols = axis_taps(w, out_w);
    let src = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let p = |y: usize, x: usize| plane[y * w + x].as_f64();
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push(T::from_f64_lossy(top * (1.0 - fy) + bottom * fy));
            }
        }
    }
    Tensor::new([c, out_h, out_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_identity() {
        let t = Tensor::<f32>::from_fn([3, 5, 4], |i| (i % 7) as f32 / 7.0);
        assert_eq!(resize_bilinear(&t, 5, 4).unwrap(), t);
    }

    #[test]
    fn checkerboard_two_to_four() {
        // source samples at x = -0.25 (clamped to 0), 0.25, 0.75, 1.25 (clamped to 1)
        let t = Tensor::<f64>::new([1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let r = resize_bilinear(&t, 4, 4).unwrap();
        let f = [0.0, 0.25, 0.75, 1.0];
        for y in 0..4 {
            for x in 0..4 {
                let (fy, fx) = (f[y], f[x]);
                let expected = fx * (1.0 - fy) + (1.0 - fx) * fy;
                assert!((r.data()[y * 4 + x] - expected).abs() < 1e-12, "({y},{x})");
            }
        }
    }

    #[test]
    fn constant_stays_constant_and_in_range() {
        let t = Tensor::<f32>::full([3, 7, 9], 0.3);
        let r = resize_bilinear(&t, 224, 224).unwrap();
        assert_eq!(r.shape(), &[3, 224, 224]);
        assert!(r.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
        let t = Tensor::<f32>::from_fn([1, 3, 3], |i| if i % 2 == 0 { 1.0 } else { 0.0 });
        let r = resize_bilinear(&t, 11, 5).unwrap();
        assert!(r.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
