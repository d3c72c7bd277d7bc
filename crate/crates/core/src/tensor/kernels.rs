// Inner loops are written over slices in i-k-j order so they vectorize.

/// out[m×n] = a[m×k] · b[k×n]
pub(crate) fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        row.fill(0.0);
        for kk in 0..k {
            let s = a[i * k + kk];
            if s == 0.0 {
                continue;
            }
            axpy(s, &b[kk * n..(kk + 1) * n], row);
        }
    }
}

/// da[m×k] += dc[m×n] · bᵀ
pub(crate) fn matmul_grad_a(dc: &[f32], b: &[f32], m: usize, k: usize, n: usize, da: &mut [f32]) {
    for i in 0..m {
        let g = &dc[i * n..(i + 1) * n];
        for kk in 0..k {
            da[i * k + kk] += dot(g, &b[kk * n..(kk + 1) * n]);
        }
    }
}

/// db[k×n] += aᵀ · dc[m×n]
pub(crate) fn matmul_grad_b(a: &[f32], dc: &[f32], m: usize, k: usize, n: usize, db: &mut [f32]) {
    for i in 0..m {
        let g = &dc[i * n..(i + 1) * n];
        for kk in 0..k {
            let s = a[i * k + kk];
            if s == 0.0 {
                continue;
            }
            axpy(s, g, &mut db[kk * n..(kk + 1) * n]);
        }
    }
}

#[inline]
pub(crate) fn axpy(s: f32, x: &[f32], y: &mut [f32]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += s * x;
    }
}

#[inline]
pub(crate) fn dot(x: &[f32], y: &[f32]) -> f32 {
    // Eight independent lanes keep the reduction vectorizable.
    let mut acc = [0.0f32; 8];
    let chunks = x.len() / 8;
    for c in 0..chunks {
        let xs = &x[c * 8..c * 8 + 8];
        let ys = &y[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += xs[l] * ys[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..x.len() {
        tail += x[i] * y[i];
    }
    acc.iter().sum::<f32>() + tail
}
