//! Raw f32 kernels shared by the forward and backward passes. All of them
//! accumulate in f64 and round once on store.

/// `c[m×n] = a[m×k] · b[k×n]`
pub(crate) fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let aip = aip as f64;
            let brow = &b[p * n..(p + 1) * n];
            for (acc_j, &bpj) in acc.iter_mut().zip(brow) {
                *acc_j += aip * bpj as f64;
            }
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = v as f32;
        }
    }
    out
}

/// `c[m×k] = a[m×n] · b[k×n]ᵀ`
pub(crate) fn matmul_nt(a: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = dot(arow, brow) as f32;
        }
    }
    out
}

/// `c[k×n] = a[m×k]ᵀ · b[m×n]`
pub(crate) fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let aip = aip as f64;
            for (acc_pj, &bij) in acc[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *acc_pj += aip * bij as f64;
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    // Four independent accumulators let the loop pipeline.
    let mut s = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        s[0] += a[i] as f64 * b[i] as f64;
        s[1] += a[i + 1] as f64 * b[i + 1] as f64;
        s[2] += a[i + 2] as f64 * b[i + 2] as f64;
        s[3] += a[i + 3] as f64 * b[i + 3] as f64;
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] as f64 * b[i] as f64;
    }
    s[0] + s[1] + s[2] + s[3] + tail
}

/// Output shape of a trailing-dimension broadcast, or `None` when the shapes
/// are incompatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out_shape`, with zero stride on
/// broadcast dimensions.
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every output element with the flat offsets of the two broadcast
/// inputs.
pub(crate) fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    let rank = out_shape.len();
    let mut index = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for flat in 0..total {
        f(flat, oa, ob);
        for d in (0..rank).rev() {
            index[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if index[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
            index[d] = 0;
        }
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Unfolds a zero-padded `[c_in × len]` signal into `[(c_in·kernel) × l_out]`
/// columns.
pub(crate) fn im2col(
    x: &[f32],
    c_in: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    l_out: usize,
) -> Vec<f32> {
    let mut cols = vec![0.0f32; c_in * kernel * l_out];
    for c in 0..c_in {
        let xrow = &x[c * len..(c + 1) * len];
        for k in 0..kernel {
            let row = &mut cols[(c * kernel + k) * l_out..(c * kernel + k + 1) * l_out];
            for (t, slot) in row.iter_mut().enumerate() {
                let pos = t * stride + k;
                if pos >= padding && pos - padding < len {
                    *slot = xrow[pos - padding];
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub(crate) fn col2im(
    cols: &[f32],
    c_in: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    l_out: usize,
) -> Vec<f32> {
    let mut x = vec![0.0f32; c_in * len];
    for c in 0..c_in {
        for k in 0..kernel {
            let row = &cols[(c * kernel + k) * l_out..(c * kernel + k + 1) * l_out];
            for (t, &v) in row.iter().enumerate() {
                let pos = t * stride + k;
                if pos >= padding && pos - padding < len {
                    x[c * len + pos - padding] += v;
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[4, 1], &[1, 5]), Some(vec![4, 5]));
        assert_eq!(broadcast_shape(&[4, 3], &[4]), None);
        assert_eq!(broadcast_shape(&[], &[2, 2]), Some(vec![2, 2]));
    }

    #[test]
    fn transposed_products_agree_with_plain_product() {
        let a: Vec<f32> = (0..6).map(|v| v as f32 * 0.5 - 1.0).collect(); // 2×3
        let b: Vec<f32> = (0..12).map(|v| (v as f32).sin()).collect(); // 3×4
        let c = matmul(&a, &b, 2, 3, 4);
        // bᵀ as 4×3
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        let c2 = matmul_nt(&a, &bt, 2, 3, 4);
        assert_eq!(c, c2);
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        let c3 = matmul_tn(&at, &b, 3, 2, 4);
        assert_eq!(c, c3);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c_in, len, kernel, stride, padding) = (2, 9, 3, 2, 1);
        let l_out = (len + 2 * padding - kernel) / stride + 1;
        let x: Vec<f32> = (0..c_in * len).map(|v| (v as f32 * 0.37).cos()).collect();
        let y: Vec<f32> = (0..c_in * kernel * l_out).map(|v| (v as f32 * 0.11).sin()).collect();
        let lhs = dot(&im2col(&x, c_in, len, kernel, stride, padding, l_out), &y);
        let rhs = dot(&x, &col2im(&y, c_in, len, kernel, stride, padding, l_out));
        assert!((lhs - rhs).abs() < 1e-5);
    }
}
