use crate::scalar::Scalar;

/// Normalizes each `dim`-length row of `rows` to unit L2 norm.
///
/// Returns the normalized rows and the original norms. Zero rows map to zero.
pub fn normalize_rows<T: Scalar>(rows: &[T], dim: usize) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); rows.len()];
    let mut norms = Vec::with_capacity(rows.len() / dim.max(1));
    for (src, dst) in rows.chunks(dim).zip(out.chunks_mut(dim)) {
        let n = src.iter().map(|v| *v * *v).sum::<T>().sqrt();
        norms.push(n);
        if n > T::zero() {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *s / n;
            }
        }
    }
    (out, norms)
}

/// Pulls a gradient w.r.t. normalized rows back to the raw rows.
pub fn normalize_rows_backward<T: Scalar>(normalized: &[T], norms: &[T], grad: &[T], dim: usize) -> Vec<T> {
    let mut out = vec![T::zero(); grad.len()];
    for (((y, g), dx), &n) in normalized
        .chunks(dim)
        .zip(grad.chunks(dim))
        .zip(out.chunks_mut(dim))
        .zip(norms)
    {
        if n <= T::zero() {
            continue;
        }
        let dot = y.iter().zip(g).map(|(a, b)| *a * *b).sum::<T>();
        for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(g) {
            *d = (gi - yi * dot) / n;
        }
    }
    out
}
