//! Hot numeric loops shared by the tape ops. All kernels are plain
//! sequential f64 code; loop order is chosen so the inner loop runs over
//! contiguous slices and autovectorizes.

/// out[m,n] += a[m,k] @ b[k,n]
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Dot product with four-lane partial sums so the reduction vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 4];
    let mut ac = a.chunks_exact(4);
    let mut bc = b.chunks_exact(4);
    for (av, bv) in ac.by_ref().zip(bc.by_ref()) {
        lanes[0] += av[0] * bv[0];
        lanes[1] += av[1] * bv[1];
        lanes[2] += av[2] * bv[2];
        lanes[3] += av[3] * bv[3];
    }
    let mut tail = 0.0;
    for (av, bv) in ac.remainder().iter().zip(bc.remainder()) {
        tail += av * bv;
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

/// out[m,k] += g[m,n] @ b[k,n]^T  (rows of g dotted with rows of b)
pub fn matmul_gbt_acc(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            *o += dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// out[k,n] += a[m,k]^T @ g[m,n]  (axpy over rows of g)
pub fn matmul_atg_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Gather sliding windows: input [c, l] -> columns [c*k, l_out], where
/// column t holds input[., t*stride .. t*stride+k].
pub fn im2col(input: &[f64], c: usize, l: usize, k: usize, stride: usize, l_out: usize) -> Vec<f64> {
    debug_assert_eq!(input.len(), c * l);
    let mut cols = vec![0.0; c * k * l_out];
    for ci in 0..c {
        let irow = &input[ci * l..(ci + 1) * l];
        for j in 0..k {
            let crow = &mut cols[(ci * k + j) * l_out..(ci * k + j + 1) * l_out];
            for (t, o) in crow.iter_mut().enumerate() {
                *o = irow[t * stride + j];
            }
        }
    }
    cols
}

/// Scatter-add the adjoint of [`im2col`]: columns [c*k, l_out] -> input [c, l].
pub fn col2im_acc(cols: &[f64], c: usize, l: usize, k: usize, stride: usize, l_out: usize, out: &mut [f64]) {
    debug_assert_eq!(cols.len(), c * k * l_out);
    debug_assert_eq!(out.len(), c * l);
    for ci in 0..c {
        let orow = &mut out[ci * l..(ci + 1) * l];
        for j in 0..k {
            let crow = &cols[(ci * k + j) * l_out..(ci * k + j + 1) * l_out];
            for (t, &v) in crow.iter().enumerate() {
                orow[t * stride + j] += v;
            }
        }
    }
}

/// out[r,c] = a[c,r]
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let arow = &a[i * cols..(i + 1) * cols];
        for (j, &v) in arow.iter().enumerate() {
            out[j * rows + i] = v;
        }
    }
    out
}

/// Numerically stable log(exp(a) + exp(b)); -inf is the additive identity.
pub fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [2x3] @ [3x2]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut out = vec![0.0; 4];
        matmul_acc(&a, &b, 2, 3, 2, &mut out);
        assert_eq!(out, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random-ish fills
        let c = 2;
        let l = 9;
        let k = 3;
        let stride = 2;
        let l_out = (l - k) / stride + 1;
        let x: Vec<f64> = (0..c * l).map(|i| (i as f64) * 0.37 - 2.0).collect();
        let y: Vec<f64> = (0..c * k * l_out).map(|i| (i as f64) * 0.11 + 0.5).collect();
        let cols = im2col(&x, c, l, k, stride, l_out);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; c * l];
        col2im_acc(&y, c, l, k, stride, l_out, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn logaddexp_neg_inf_identity() {
        assert_eq!(logaddexp(f64::NEG_INFINITY, -3.0), -3.0);
        assert_eq!(logaddexp(-3.0, f64::NEG_INFINITY), -3.0);
        assert_eq!(logaddexp(f64::NEG_INFINITY, f64::NEG_INFINITY), f64::NEG_INFINITY);
        let v = logaddexp(1.0, 1.0);
        assert!((v - (1.0 + 2f64.ln())).abs() < 1e-15);
    }
}
