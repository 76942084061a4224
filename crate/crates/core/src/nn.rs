//! Dense kernels shared by the model: row-major matrix products, 3x3 dilated
//! convolutions via im2col, and a smooth activation.
//!
//! Feature maps are stored pixel-major: an `H×W×C` map is a `(H·W)×C`
//! row-major matrix, so per-pixel linear layers are plain matrix products.

/// `c = op(a)·op(b) + beta·c` for row-major operands, where `op(a)` is `m×k`
/// and `op(b)` is `k×n`. A transposed operand is given in its stored layout.
#[allow(clippy::too_many_arguments)]
pub fn matmul(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "lhs size");
    assert_eq!(b.len(), k * n, "rhs size");
    assert_eq!(c.len(), m * n, "output size");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe { dgemm(m, k, n, a, a_trans, b, b_trans, beta, c.as_mut_ptr()) }
}

/// `A·B` into a fresh buffer. The product overwrites every entry, so the
/// buffer skips the zero fill that `vec![0.0; m * n]` would pay for.
pub fn matmul_new(m: usize, k: usize, n: usize, a: &[f64], a_trans: bool, b: &[f64], b_trans: bool) -> Vec<f64> {
    assert_eq!(a.len(), m * k, "lhs size");
    assert_eq!(b.len(), k * n, "rhs size");
    if m == 0 || n == 0 || k == 0 {
        return vec![0.0; m * n];
    }
    let mut c = Vec::<f64>::with_capacity(m * n);
    // SAFETY: the sizes are checked above, and with beta = 0 the kernel
    // writes all m·n outputs without reading them first.
    unsafe {
        dgemm(m, k, n, a, a_trans, b, b_trans, 0.0, c.as_mut_ptr());
        c.set_len(m * n);
    }
    c
}

#[allow(clippy::too_many_arguments)]
unsafe fn dgemm(m: usize, k: usize, n: usize, a: &[f64], a_trans: bool, b: &[f64], b_trans: bool, beta: f64, c: *mut f64) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c, n as isize, 1);
}

/// Add a bias row to every row of an `rows×cols` matrix.
pub fn add_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Column sums of an `rows×cols` matrix, accumulated into `out`.
pub fn accumulate_column_sums(x: &[f64], out: &mut [f64]) {
    for row in x.chunks_exact(out.len()) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// SiLU, `x·σ(x)`. Smooth everywhere, which keeps finite-difference checks
/// free of kinks.
pub fn silu(pre: &[f64]) -> Vec<f64> {
    pre.iter().map(|&x| x * sigmoid(x)).collect()
}

/// SiLU plus its derivative at each input, kept for the backward pass.
pub fn silu_with_slope(pre: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut act = Vec::with_capacity(pre.len());
    let mut slope = Vec::with_capacity(pre.len());
    for &x in pre {
        let s = sigmoid(x);
        act.push(x * s);
        slope.push(s * (1.0 + x * (1.0 - s)));
    }
    (act, slope)
}

/// Multiply `grad` in place by a slope from [`silu_with_slope`].
pub fn silu_backward(slope: &[f64], grad: &mut [f64]) {
    for (g, &d) in grad.iter_mut().zip(slope) {
        *g *= d;
    }
}

/// Shape of a 3x3 "same" convolution with the given dilation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub dilation: usize,
}

impl ConvShape {
    pub fn patch_len(&self) -> usize {
        9 * self.in_channels
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    fn tap(&self, y: usize, x: usize, ky: usize, kx: usize) -> Option<usize> {
        let d = self.dilation as isize;
        let sy = y as isize + (ky as isize - 1) * d;
        let sx = x as isize + (kx as isize - 1) * d;
        if sy < 0 || sx < 0 || sy >= self.height as isize || sx >= self.width as isize {
            None
        } else {
            Some(sy as usize * self.width + sx as usize)
        }
    }
}

/// Gather zero-padded 3x3 patches: output is `(H·W)×(9·C)`.
pub fn im2col(input: &[f64], shape: ConvShape) -> Vec<f64> {
    let c = shape.in_channels;
    let pl = shape.patch_len();
    // filled in row order, so the buffer is never zeroed up front
    let mut cols = Vec::with_capacity(shape.pixels() * pl);
    for y in 0..shape.height {
        for x in 0..shape.width {
            for ky in 0..3 {
                for kx in 0..3 {
                    match shape.tap(y, x, ky, kx) {
                        Some(src) => cols.extend_from_slice(&input[src * c..][..c]),
                        None => cols.resize(cols.len() + c, 0.0),
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add patch gradients back onto the input map.
pub fn col2im(cols: &[f64], shape: ConvShape) -> Vec<f64> {
    let c = shape.in_channels;
    let pl = shape.patch_len();
    let mut out = vec![0.0; shape.pixels() * c];
    for y in 0..shape.height {
        for x in 0..shape.width {
            let row = &cols[(y * shape.width + x) * pl..][..pl];
            for ky in 0..3 {
                for kx in 0..3 {
                    if let Some(dst) = shape.tap(y, x, ky, kx) {
                        for (o, v) in out[dst * c..][..c].iter_mut().zip(&row[(ky * 3 + kx) * c..][..c]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_all_transposes() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let expected = [4.0, 5.0, 10.0, 11.0];
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = [0.0; 4];
                matmul(2, 3, 2, aa, ta, bb, tb, 0.0, &mut c);
                assert_eq!(c, expected);
            }
        }
        let mut c = [1.0; 4];
        matmul(2, 3, 2, &a, false, &b, false, 1.0, &mut c);
        assert_eq!(c, [5.0, 6.0, 11.0, 12.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let shape = ConvShape {
            height: 5,
            width: 4,
            in_channels: 2,
            dilation: 2,
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let g: Vec<f64> = (0..shape.pixels() * shape.patch_len())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let lhs: f64 = im2col(&x, shape).iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&col2im(&g, shape)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn im2col_center_tap() {
        let shape = ConvShape {
            height: 3,
            width: 3,
            in_channels: 1,
            dilation: 1,
        };
        let x: Vec<f64> = (1..=9).map(f64::from).collect();
        let cols = im2col(&x, shape);
        // centre pixel sees the whole image in order
        assert_eq!(&cols[4 * 9..5 * 9], &x[..]);
        // corner pixel has zero padding on the top-left taps
        assert_eq!(&cols[0..9], &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 4.0, 5.0]);
    }

    #[test]
    fn fresh_product_matches_accumulating_form() {
        let a: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..20).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![7.0; 12];
        matmul(3, 5, 4, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(matmul_new(3, 5, 4, &a, false, &b, false), c);
        let mut ct = vec![0.0; 20];
        matmul(5, 3, 4, &a, true, &c, false, 0.0, &mut ct);
        assert_eq!(matmul_new(5, 3, 4, &a, true, &c, false), ct);
        assert_eq!(matmul_new(2, 0, 3, &[], false, &[], false), vec![0.0; 6]);
    }

    #[test]
    fn silu_derivative_matches_difference() {
        let xs = [-3.0, -0.5, 0.0, 0.7, 4.0];
        let mut g = vec![1.0; xs.len()];
        let (act, slope) = silu_with_slope(&xs);
        assert_eq!(act, silu(&xs));
        silu_backward(&slope, &mut g);
        for (i, &x) in xs.iter().enumerate() {
            let h = 1e-6;
            let fd = (silu(&[x + h])[0] - silu(&[x - h])[0]) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }
}
