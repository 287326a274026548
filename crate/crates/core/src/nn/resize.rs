use candle_core::{Device, Tensor};

use crate::error::Result;

/// `out × inp` half-pixel bilinear interpolation weights. Each row is a
/// convex combination, so per-pixel sums across channels survive resizing.
pub fn bilinear_matrix(inp: usize, out: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    for o in 0..out {
        let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        let f = src - i0 as f64;
        m[o * inp + i0] += 1.0 - f;
        m[o * inp + i1] += f;
    }
    m
}

/// Bilinear resize of the last two axes of a rank-3 or rank-4 tensor,
/// written as two matrix products so it stays differentiable.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let dims = x.dims();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let mh = Tensor::from_vec(bilinear_matrix(h, out_h), (out_h, h), &Device::Cpu)?.to_dtype(x.dtype())?;
    let mw = Tensor::from_vec(bilinear_matrix(w, out_w), (out_w, w), &Device::Cpu)?.to_dtype(x.dtype())?;
    let y = mh.broadcast_matmul(&x.contiguous()?)?;
    Ok(y.broadcast_matmul(&mw.t()?.contiguous()?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn rows_are_convex() {
        for (i, o) in [(8, 64), (4, 8), (8, 8), (64, 8)] {
            let m = bilinear_matrix(i, o);
            for r in 0..o {
                let row = &m[r * i..(r + 1) * i];
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_pointwise_interpolation() {
        // oracle: sample the 2x2 input at the half-pixel source coordinate by hand
        let x = Tensor::from_vec(vec![0.0f64, 1.0, 2.0, 3.0], (1, 2, 2), &Device::Cpu).unwrap();
        let y = resize_bilinear(&x, 4, 4).unwrap().to_dtype(DType::F64).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let coord = |o: usize| ((o as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
        for i in 0..4 {
            for j in 0..4 {
                let expected = 2.0 * coord(i) + coord(j);
                assert!((v[i * 4 + j] - expected).abs() < 1e-12);
            }
        }
    }
}
