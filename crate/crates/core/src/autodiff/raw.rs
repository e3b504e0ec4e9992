//! Plain `f64` kernels shared by forward ops and the backward pass.

/// C[m,n] = A[m,k] @ B[k,n], row-major.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// acc[m,k] += G[m,n] @ B^T where B is [k,n].
pub(crate) fn matmul_bt_acc(acc: &mut [f64], g: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let arow = &mut acc[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += grow[j] * brow[j];
            }
            arow[p] += s;
        }
    }
}

/// acc[k,n] += A^T @ G where A is [m,k] and G is [m,n].
pub(crate) fn matmul_at_acc(acc: &mut [f64], a: &[f64], g: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut acc[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * grow[j];
            }
        }
    }
}

/// Sliding-window sum over a (2r+1)^2 box, valid region only.
/// Input [h,w] row-major, output [(h-2r), (w-2r)].
pub(crate) fn box_sum_valid(src: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let side = 2 * r + 1;
    assert!(h >= side && w >= side, "box_sum window exceeds input");
    let ow = w - 2 * r;
    let oh = h - 2 * r;
    // Horizontal pass: [h, ow]
    let mut horiz = vec![0.0; h * ow];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        let hrow = &mut horiz[y * ow..(y + 1) * ow];
        let mut acc: f64 = row[..side].iter().sum();
        hrow[0] = acc;
        for x in 1..ow {
            acc += row[x + side - 1] - row[x - 1];
            hrow[x] = acc;
        }
    }
    // Vertical pass: [oh, ow]
    let mut out = vec![0.0; oh * ow];
    for x in 0..ow {
        let mut acc = 0.0;
        for y in 0..side {
            acc += horiz[y * ow + x];
        }
        out[x] = acc;
        for y in 1..oh {
            acc += horiz[(y + side - 1) * ow + x] - horiz[(y - 1) * ow + x];
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Bilinear interpolation on a [h,w] plane. Returns None outside
/// [0, w-1] x [0, h-1].
pub(crate) fn bilerp(src: &[f64], h: usize, w: usize, x: f64, y: f64) -> Option<f64> {
    if !(0.0..=(w - 1) as f64).contains(&x) || !(0.0..=(h - 1) as f64).contains(&y) {
        return None;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let p00 = src[y0 * w + x0];
    let p10 = src[y0 * w + x1];
    let p01 = src[y1 * w + x0];
    let p11 = src[y1 * w + x1];
    let top = p00 + fx * (p10 - p00);
    let bot = p01 + fx * (p11 - p01);
    Some(top + fy * (bot - top))
}

/// Spatial derivative (d/dx, d/dy) of `bilerp` at an in-bounds point.
pub(crate) fn bilerp_grad(src: &[f64], h: usize, w: usize, x: f64, y: f64) -> (f64, f64) {
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let p00 = src[y0 * w + x0];
    let p10 = src[y0 * w + x1];
    let p01 = src[y1 * w + x0];
    let p11 = src[y1 * w + x1];
    let dx = (1.0 - fy) * (p10 - p00) + fy * (p11 - p01);
    let dy = (1.0 - fx) * (p01 - p00) + fx * (p11 - p10);
    (dx, dy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(matmul(&a, &eye, 2, 2, 2), a);
    }

    #[test]
    fn box_sum_matches_naive() {
        let h = 9;
        let w = 11;
        let r = 2;
        let src: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let fast = box_sum_valid(&src, h, w, r);
        let side = 2 * r + 1;
        for oy in 0..h - 2 * r {
            for ox in 0..w - 2 * r {
                let mut s = 0.0;
                for dy in 0..side {
                    for dx in 0..side {
                        s += src[(oy + dy) * w + (ox + dx)];
                    }
                }
                assert!((fast[oy * (w - 2 * r) + ox] - s).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn bilerp_midpoint() {
        let src = vec![0.0, 1.0, 0.0, 1.0];
        assert_eq!(bilerp(&src, 2, 2, 0.5, 0.0), Some(0.5));
        assert_eq!(bilerp(&src, 2, 2, -0.1, 0.0), None);
    }
}
