use crate::matrix::MatrixF64;

pub(super) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug, Clone, PartialEq)]
pub struct LnCache {
    pub(super) xhat: MatrixF64,
    pub(super) inv_std: Vec<f64>,
}

/// Row-wise LayerNorm.
pub(super) fn layer_norm(x: &MatrixF64, gain: &MatrixF64, bias: &MatrixF64) -> (MatrixF64, LnCache) {
    let (n, d) = x.shape();
    let mut xhat = MatrixF64::zeros(n, d);
    let mut out = MatrixF64::zeros(n, d);
    let mut inv_std = Vec::with_capacity(n);
    let g = gain.as_slice();
    let b = bias.as_slice();
    for r in 0..n {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        let xr = xhat.row_mut(r);
        for (h, v) in xr.iter_mut().zip(row) {
            *h = (v - mean) * is;
        }
        let orow = out.row_mut(r);
        for j in 0..d {
            orow[j] = g[j] * xhat.get(r, j) + b[j];
        }
    }
    (out, LnCache { xhat, inv_std })
}

/// Returns dx; accumulates into dgain / dbias.
pub(super) fn layer_norm_backward(
    dy: &MatrixF64,
    cache: &LnCache,
    gain: &MatrixF64,
    dgain: &mut MatrixF64,
    dbias: &mut MatrixF64,
) -> MatrixF64 {
    let (n, d) = dy.shape();
    let g = gain.as_slice();
    let mut dx = MatrixF64::zeros(n, d);
    let mut dxhat = vec![0.0; d];
    for r in 0..n {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        {
            let dg = dgain.as_mut_slice();
            for j in 0..d {
                dg[j] += dyr[j] * xh[j];
            }
        }
        {
            let db = dbias.as_mut_slice();
            for j in 0..d {
                db[j] += dyr[j];
            }
        }
        let mut sum = 0.0;
        let mut sum_x = 0.0;
        for j in 0..d {
            dxhat[j] = dyr[j] * g[j];
            sum += dxhat[j];
            sum_x += dxhat[j] * xh[j];
        }
        let scale = cache.inv_std[r] / d as f64;
        let dxr = dx.row_mut(r);
        for j in 0..d {
            dxr[j] = scale * (d as f64 * dxhat[j] - sum - xh[j] * sum_x);
        }
    }
    dx
}

/// `x W + b` with `b` a `1 x out` row.
pub(super) fn linear(x: &MatrixF64, w: &MatrixF64, b: &MatrixF64) -> MatrixF64 {
    let mut y = x.matmul(w);
    let bias = b.as_slice();
    for r in 0..y.rows() {
        for (v, bb) in y.row_mut(r).iter_mut().zip(bias) {
            *v += bb;
        }
    }
    y
}

/// Returns dx; accumulates into dw / db.
pub(super) fn linear_backward(
    dy: &MatrixF64,
    x: &MatrixF64,
    w: &MatrixF64,
    dw: &mut MatrixF64,
    db: &mut MatrixF64,
) -> MatrixF64 {
    dw.add_assign(&x.t_matmul(dy));
    let dbs = db.as_mut_slice();
    for r in 0..dy.rows() {
        for (acc, v) in dbs.iter_mut().zip(dy.row(r)) {
            *acc += v;
        }
    }
    dy.matmul_t(w)
}

/// tanh-approximated GELU.
pub(super) fn gelu(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_K * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub(super) fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_K * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub(super) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
