use crate::autodiff::Tensor;

/// One of the four integer neighbors of a fractional position.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Corner {
    pub index: usize,
    pub weight: f64,
}

/// Bilinear corners of `(x, y)` on a `w × h` grid. Neighbors outside the
/// grid get weight 0 (zero padding).
#[inline]
pub(crate) fn corners(x: f64, y: f64, w: usize, h: usize) -> [Corner; 4] {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let mut out = [Corner::default(); 4];
    let cells = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ];
    for (slot, (cx, cy, wt)) in out.iter_mut().zip(cells) {
        if cx >= 0 && cy >= 0 && (cx as usize) < w && (cy as usize) < h {
            *slot = Corner {
                index: cy as usize * w + cx as usize,
                weight: wt,
            };
        }
    }
    out
}

#[inline]
pub(crate) fn interpolate(plane: &[f64], c: &[Corner; 4]) -> f64 {
    c[0].weight * plane[c[0].index]
        + c[1].weight * plane[c[1].index]
        + c[2].weight * plane[c[2].index]
        + c[3].weight * plane[c[3].index]
}

/// Bilinear read of every channel of a `[C, H, W]` map at column `x`, row `y`.
///
/// Neighbors outside `[0, W−1] × [0, H−1]` read as zero.
pub fn bilinear_sample(map: &Tensor, x: f64, y: f64) -> Vec<f64> {
    let (c, h, w) = match map.shape() {
        &[c, h, w] => (c, h, w),
        &[1, c, h, w] => (c, h, w),
        s => panic!("bilinear_sample expects [C, H, W], got {s:?}"),
    };
    let cs = corners(x, y, w, h);
    map.data()
        .chunks(h * w)
        .take(c)
        .map(|plane| interpolate(plane, &cs))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(w: usize, h: usize, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let mut d = Vec::new();
        for y in 0..h {
            for x in 0..w {
                d.push(f(x as f64, y as f64));
            }
        }
        Tensor::new([1, h, w], d).unwrap()
    }

    #[test]
    fn integer_coordinates_are_exact() {
        let t = grid(4, 3, |x, y| x * 10.0 + y);
        assert_eq!(bilinear_sample(&t, 2.0, 1.0), vec![21.0]);
        assert_eq!(bilinear_sample(&t, 3.0, 2.0), vec![32.0]);
    }

    #[test]
    fn midpoint_averages() {
        let t = Tensor::new([1, 2, 2], vec![0.0, 0.0, 4.0, 4.0]).unwrap();
        assert_eq!(bilinear_sample(&t, 0.5, 0.5), vec![2.0]);
    }

    #[test]
    fn exact_on_linear_field() {
        let t = grid(5, 5, |x, y| x + 2.0 * y);
        let v = bilinear_sample(&t, 1.3, 2.7)[0];
        assert!((v - 6.7).abs() < 1e-12, "{v}");
    }

    #[test]
    fn outside_reads_zero() {
        let t = grid(3, 3, |_, _| 1.0);
        assert_eq!(bilinear_sample(&t, -1.0, 1.0), vec![0.0]);
        assert_eq!(bilinear_sample(&t, -0.5, 1.0), vec![0.5]);
        assert_eq!(bilinear_sample(&t, 2.5, 2.5), vec![0.25]);
        assert_eq!(bilinear_sample(&t, 10.0, 10.0), vec![0.0]);
    }

    #[test]
    fn samples_each_channel() {
        let t = Tensor::new([2, 1, 2], vec![0.0, 2.0, 10.0, 20.0]).unwrap();
        assert_eq!(bilinear_sample(&t, 0.5, 0.0), vec![1.0, 15.0]);
    }
}
