//! Dense kernels on row-major f64 buffers.

/// `c (+)= a · b` with `a: m×k`, `b: k×n`, `c: m×n`.
pub fn matmul(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, accumulate: bool) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths checked above; strides describe row-major layout.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c (+)= aᵀ · b` with `a: k×m` (row-major), `b: k×n`, `c: m×n`.
pub fn matmul_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, accumulate: bool) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: as above, `a` is read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c (+)= a · bᵀ` with `a: m×k`, `b: n×k` (row-major), `c: m×n`.
pub fn matmul_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, accumulate: bool) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: as above, `b` is read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

pub const LN_EPS: f64 = 1e-6;

/// Affine-free layer norm over rows of width `d`. Returns per-row 1/σ.
pub fn layer_norm(x: &[f64], out: &mut [f64], d: usize) -> Vec<f64> {
    x.chunks(d)
        .zip(out.chunks_mut(d))
        .map(|(row, o)| {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in o.iter_mut().zip(row) {
                *o = (v - mean) * rstd;
            }
            rstd
        })
        .collect()
}

/// Accumulates into `dx` the gradient through [`layer_norm`], given the
/// normalized output `n`, its cotangent `dn` and the saved `rstd`.
pub fn layer_norm_backward(n: &[f64], dn: &[f64], rstd: &[f64], dx: &mut [f64], d: usize) {
    for (((nr, dr), &r), xr) in n.chunks(d).zip(dn.chunks(d)).zip(rstd).zip(dx.chunks_mut(d)) {
        let mean_dn = dr.iter().sum::<f64>() / d as f64;
        let mean_dn_n = dr.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for ((x, &g), &nv) in xr.iter_mut().zip(dr).zip(nr) {
            *x += r * (g - mean_dn - nv * mean_dn_n);
        }
    }
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

// libm tanh is several times slower than exp; the exp form is only
// inaccurate near zero, where the library call is kept.
fn tanh(u: f64) -> f64 {
    if u.abs() < 0.5 {
        u.tanh()
    } else {
        1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
    }
}

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh(GELU_C * (x + GELU_A * x * x * x)))
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = tanh(u);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub const ROPE_BASE: f64 = 10_000.0;

/// Rotary tables for absolute positions `offset..offset+len` and head width
/// `head_dim`: returns `(cos, sin)` each `len × head_dim/2`.
pub fn rope_tables(offset: usize, len: usize, head_dim: usize) -> (Vec<f64>, Vec<f64>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(len * half);
    let mut sin = Vec::with_capacity(len * half);
    for p in offset..offset + len {
        for i in 0..half {
            let theta = ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64);
            let (s, c) = (p as f64 * theta).sin_cos();
            cos.push(c);
            sin.push(s);
        }
    }
    (cos, sin)
}

/// Rotates consecutive pairs of one head slice in place. `inverse` applies
/// the transpose rotation, which is also the backward pass.
pub fn rope_apply(v: &mut [f64], cos: &[f64], sin: &[f64], inverse: bool) {
    for (i, pair) in v.chunks_mut(2).enumerate() {
        let (c, s) = (cos[i], if inverse { -sin[i] } else { sin[i] });
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * c - b * s;
        pair[1] = a * s + b * c;
    }
}

/// DiT-style sinusoidal embedding of t (scaled by 1000), `[cos | sin]`.
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for j in 0..half {
        let freq = (-(10_000f64).ln() * j as f64 / half as f64).exp();
        let (s, c) = (1000.0 * t * freq).sin_cos();
        out[j] = c;
        out[half + j] = s;
    }
    out
}
