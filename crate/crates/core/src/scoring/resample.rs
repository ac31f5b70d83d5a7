use ndarray::Array2;

use crate::scalar::Scalar;

/// Bilinear resize with half-pixel centres (`align_corners = false`).
pub fn upsample_bilinear<T: Scalar>(map: &Array2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (in_h, in_w) = map.dim();
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, T)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|d| {
                let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, T::lit(src - i0 as f64))
            })
            .collect()
    };
    let ys = axis(out_h, in_h);
    let xs = axis(out_w, in_w);
    Array2::from_shape_fn((out_h, out_w), |(r, c)| {
        let (y0, y1, ly) = ys[r];
        let (x0, x1, lx) = xs[c];
        let one = T::one();
        let top = map[[y0, x0]] * (one - lx) + map[[y0, x1]] * lx;
        let bottom = map[[y1, x0]] * (one - lx) + map[[y1, x1]] * lx;
        top * (one - ly) + bottom * ly
    })
}

fn gaussian_kernel<T: Scalar>(sigma: f64) -> Vec<T> {
    let radius = (4.0 * sigma + 0.5) as i64;
    let w: Vec<f64> = (-radius..=radius)
        .map(|x| (-0.5 * (x * x) as f64 / (sigma * sigma)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    w.into_iter().map(|v| T::lit(v / sum)).collect()
}

/// Mirror index with the edge sample repeated (`d c b a | a b c d`).
fn reflect(i: i64, n: i64) -> usize {
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian blur, kernel truncated at 4σ, reflected borders.
pub fn gaussian_smooth<T: Scalar>(map: &Array2<T>, sigma: f64) -> Array2<T> {
    let kernel = gaussian_kernel::<T>(sigma);
    let radius = (kernel.len() / 2) as i64;
    let (h, w) = map.dim();
    let pass = |src: &Array2<T>, along_rows: bool| {
        Array2::from_shape_fn((h, w), |(r, c)| {
            kernel.iter().enumerate().fold(T::zero(), |acc, (k, &kw)| {
                let off = k as i64 - radius;
                let v = if along_rows {
                    src[[reflect(r as i64 + off, h as i64), c]]
                } else {
                    src[[r, reflect(c as i64 + off, w as i64)]]
                };
                acc + kw * v
            })
        })
    };
    let tmp = pass(map, true);
    pass(&tmp, false)
}
