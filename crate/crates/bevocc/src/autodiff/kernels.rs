//! Array kernels behind the tape primitives. Everything here is pure math on
//! row-major `f64` slices; the tape layers bookkeeping and gradients on top.

use crate::error::{Error, Result};

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Broadcast result shape: ranks must match, each axis equal or 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "broadcast rank mismatch: {:?} vs {:?}",
            a, b
        )));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == y || x == 1 || y == 1 {
                Ok(x.max(y))
            } else {
                Err(Error::shape(format!(
                    "cannot broadcast {:?} with {:?}",
                    a, b
                )))
            }
        })
        .collect()
}

/// Walks every output position of a broadcast binary op, handing the callback
/// linear offsets into out / a / b.
pub fn for_each_broadcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let sa = strides(a_shape);
    let sb = strides(b_shape);
    let total = numel(out_shape);
    let mut idx = vec![0usize; rank];
    for lin in 0..total {
        let mut oa = 0;
        let mut ob = 0;
        for d in 0..rank {
            if a_shape[d] != 1 {
                oa += idx[d] * sa[d];
            }
            if b_shape[d] != 1 {
                ob += idx[d] * sb[d];
            }
        }
        f(lin, oa, ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    // max(x,0) + ln(1 + e^-|x|): stable on both tails
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Zero-order-hold coefficient phi(z) = (e^z - 1)/z with the Euler limit
/// phi = 1 pinned below |z| = 1e-6.
pub fn zoh_phi(z: f64) -> f64 {
    if z.abs() < 1e-6 {
        1.0
    } else if z.abs() < 1e-4 {
        1.0 + z / 2.0 + z * z / 6.0 + z * z * z / 24.0
    } else {
        z.exp_m1() / z
    }
}

/// d/dz of [`zoh_phi`]; zero inside the pinned Euler region.
pub fn zoh_phi_deriv(z: f64) -> f64 {
    if z.abs() < 1e-6 {
        0.0
    } else if z.abs() < 1e-4 {
        0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0
    } else {
        ((z - 1.0) * z.exp() + 1.0) / (z * z)
    }
}

// ---------------------------------------------------------------------------
// matmul

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// conv2d

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn out_hw(&self) -> Result<(usize, usize)> {
        let he = self.h + 2 * self.pad;
        let we = self.w + 2 * self.pad;
        if he < self.kh || we < self.kw || self.stride == 0 {
            return Err(Error::shape(format!(
                "conv2d: kernel {}x{} stride {} does not fit input {}x{} pad {}",
                self.kh, self.kw, self.stride, self.h, self.w, self.pad
            )));
        }
        Ok(((he - self.kh) / self.stride + 1, (we - self.kw) / self.stride + 1))
    }
}

pub fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, s: &ConvSpec, out: &mut [f64]) {
    let (ho, wo) = s.out_hw().expect("validated");
    for co in 0..s.cout {
        let b = bias.map_or(0.0, |b| b[co]);
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = b;
                for ci in 0..s.cin {
                    for a in 0..s.kh {
                        let y = (i * s.stride + a) as isize - s.pad as isize;
                        if y < 0 || y >= s.h as isize {
                            continue;
                        }
                        for bk in 0..s.kw {
                            let xx = (j * s.stride + bk) as isize - s.pad as isize;
                            if xx < 0 || xx >= s.w as isize {
                                continue;
                            }
                            acc += x[(ci * s.h + y as usize) * s.w + xx as usize]
                                * w[((co * s.cin + ci) * s.kh + a) * s.kw + bk];
                        }
                    }
                }
                out[(co * ho + i) * wo + j] = acc;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    s: &ConvSpec,
    gout: &[f64],
    gx: &mut [f64],
    gw: &mut [f64],
    gb: Option<&mut [f64]>,
) {
    let (ho, wo) = s.out_hw().expect("validated");
    if let Some(gb) = gb {
        for co in 0..s.cout {
            for i in 0..ho {
                for j in 0..wo {
                    gb[co] += gout[(co * ho + i) * wo + j];
                }
            }
        }
    }
    for co in 0..s.cout {
        for i in 0..ho {
            for j in 0..wo {
                let g = gout[(co * ho + i) * wo + j];
                if g == 0.0 {
                    continue;
                }
                for ci in 0..s.cin {
                    for a in 0..s.kh {
                        let y = (i * s.stride + a) as isize - s.pad as isize;
                        if y < 0 || y >= s.h as isize {
                            continue;
                        }
                        for bk in 0..s.kw {
                            let xx = (j * s.stride + bk) as isize - s.pad as isize;
                            if xx < 0 || xx >= s.w as isize {
                                continue;
                            }
                            let xi = (ci * s.h + y as usize) * s.w + xx as usize;
                            let wi = ((co * s.cin + ci) * s.kh + a) * s.kw + bk;
                            gx[xi] += g * w[wi];
                            gw[wi] += g * x[xi];
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// softmax / layer norm / cross entropy along one axis

/// Decomposes a shape around `axis` into (outer, axis_len, inner).
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_forward(x: &[f64], outer: usize, len: usize, inner: usize, out: &mut [f64]) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mut m = f64::NEG_INFINITY;
            for k in 0..len {
                m = m.max(x[at(k)]);
            }
            let mut z = 0.0;
            for k in 0..len {
                let e = (x[at(k)] - m).exp();
                out[at(k)] = e;
                z += e;
            }
            for k in 0..len {
                out[at(k)] /= z;
            }
        }
    }
}

pub fn softmax_backward(
    y: &[f64],
    gout: &[f64],
    outer: usize,
    len: usize,
    inner: usize,
    gx: &mut [f64],
) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mut dot = 0.0;
            for k in 0..len {
                dot += gout[at(k)] * y[at(k)];
            }
            for k in 0..len {
                gx[at(k)] += y[at(k)] * (gout[at(k)] - dot);
            }
        }
    }
}

pub fn layer_norm_forward(
    x: &[f64],
    outer: usize,
    len: usize,
    inner: usize,
    eps: f64,
    out: &mut [f64],
) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mut mean = 0.0;
            for k in 0..len {
                mean += x[at(k)];
            }
            mean /= len as f64;
            let mut var = 0.0;
            for k in 0..len {
                let d = x[at(k)] - mean;
                var += d * d;
            }
            var /= len as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for k in 0..len {
                out[at(k)] = (x[at(k)] - mean) * inv;
            }
        }
    }
}

pub fn layer_norm_backward(
    x: &[f64],
    gout: &[f64],
    outer: usize,
    len: usize,
    inner: usize,
    eps: f64,
    gx: &mut [f64],
) {
    // dx = inv * (g - mean(g) - y * mean(g*y))
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mut mean = 0.0;
            for k in 0..len {
                mean += x[at(k)];
            }
            mean /= len as f64;
            let mut var = 0.0;
            for k in 0..len {
                let d = x[at(k)] - mean;
                var += d * d;
            }
            var /= len as f64;
            let inv = 1.0 / (var + eps).sqrt();
            let mut gmean = 0.0;
            let mut gydot = 0.0;
            for k in 0..len {
                let y = (x[at(k)] - mean) * inv;
                gmean += gout[at(k)];
                gydot += gout[at(k)] * y;
            }
            gmean /= len as f64;
            gydot /= len as f64;
            for k in 0..len {
                let y = (x[at(k)] - mean) * inv;
                gx[at(k)] += inv * (gout[at(k)] - gmean - y * gydot);
            }
        }
    }
}

/// Mean negative log-likelihood of `targets` under softmax of `logits`
/// ([classes, positions]), restricted to unmasked positions.
pub fn cross_entropy_forward(
    logits: &[f64],
    classes: usize,
    positions: usize,
    targets: &[usize],
    mask: Option<&[bool]>,
) -> Result<f64> {
    let mut loss = 0.0;
    let mut valid = 0usize;
    for p in 0..positions {
        if let Some(m) = mask {
            if !m[p] {
                continue;
            }
        }
        let t = targets[p];
        if t >= classes {
            return Err(Error::domain(format!(
                "target class {} out of range for {} classes",
                t, classes
            )));
        }
        let mut m = f64::NEG_INFINITY;
        for k in 0..classes {
            m = m.max(logits[k * positions + p]);
        }
        let mut z = 0.0;
        for k in 0..classes {
            z += (logits[k * positions + p] - m).exp();
        }
        loss += m + z.ln() - logits[t * positions + p];
        valid += 1;
    }
    if valid == 0 {
        return Err(Error::domain("cross entropy over zero unmasked positions".to_string()));
    }
    Ok(loss / valid as f64)
}

pub fn cross_entropy_backward(
    logits: &[f64],
    classes: usize,
    positions: usize,
    targets: &[usize],
    mask: Option<&[bool]>,
    gloss: f64,
    gx: &mut [f64],
) {
    let valid = match mask {
        Some(m) => m.iter().filter(|&&b| b).count(),
        None => positions,
    };
    let scale = gloss / valid as f64;
    for p in 0..positions {
        if let Some(m) = mask {
            if !m[p] {
                continue;
            }
        }
        let mut mx = f64::NEG_INFINITY;
        for k in 0..classes {
            mx = mx.max(logits[k * positions + p]);
        }
        let mut z = 0.0;
        for k in 0..classes {
            z += (logits[k * positions + p] - mx).exp();
        }
        for k in 0..classes {
            let prob = (logits[k * positions + p] - mx).exp() / z;
            let indicator = if k == targets[p] { 1.0 } else { 0.0 };
            gx[k * positions + p] += scale * (prob - indicator);
        }
    }
}

// ---------------------------------------------------------------------------
// bilinear sampling

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Border {
    /// Coordinates are clamped into the map; border values extend outward.
    Clamp,
    /// Out-of-map corners read zero.
    Zero,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Tap {
    pub row: usize,
    pub col: usize,
    pub weight: f64,
    pub dw_dy: f64,
    pub dw_dx: f64,
}

/// Decomposes one continuous sample point into at most four corner taps.
pub fn bilinear_taps(y: f64, x: f64, h: usize, w: usize, border: Border) -> ([Tap; 4], usize) {
    let (yc, dy_gate) = match border {
        Border::Clamp => {
            let hi = (h - 1) as f64;
            if y <= 0.0 {
                (0.0, 0.0)
            } else if y >= hi {
                (hi, 0.0)
            } else {
                (y, 1.0)
            }
        }
        Border::Zero => (y, 1.0),
    };
    let (xc, dx_gate) = match border {
        Border::Clamp => {
            let hi = (w - 1) as f64;
            if x <= 0.0 {
                (0.0, 0.0)
            } else if x >= hi {
                (hi, 0.0)
            } else {
                (x, 1.0)
            }
        }
        Border::Zero => (x, 1.0),
    };
    let y0 = yc.floor();
    let x0 = xc.floor();
    let ty = yc - y0;
    let tx = xc - x0;
    let rows = [(y0, 1.0 - ty, -dy_gate), (y0 + 1.0, ty, dy_gate)];
    let cols = [(x0, 1.0 - tx, -dx_gate), (x0 + 1.0, tx, dx_gate)];
    let mut taps = [Tap::default(); 4];
    let mut count = 0;
    for (ry, wy, dwy) in rows {
        if ry < 0.0 || ry >= h as f64 {
            continue;
        }
        for (cx, wx, dwx) in cols {
            if cx < 0.0 || cx >= w as f64 {
                continue;
            }
            taps[count] = Tap {
                row: ry as usize,
                col: cx as usize,
                weight: wy * wx,
                dw_dy: dwy * wx,
                dw_dx: wy * dwx,
            };
            count += 1;
        }
    }
    (taps, count)
}

// ---------------------------------------------------------------------------
// selective-scan recurrence kernels
//
// Layouts: a_bar, bx are [l, d, n]; c is [l, n]; state h is [d, n]; output y
// is [l, d]. The sequential kernel is the reference semantics for every other
// scan implementation.

#[allow(clippy::too_many_arguments)]
pub fn scan_sequential(
    a_bar: &[f64],
    bx: &[f64],
    c: &[f64],
    h0: &[f64],
    l: usize,
    d: usize,
    n: usize,
    y: &mut [f64],
    h_traj: Option<&mut Vec<f64>>,
) {
    let dn = d * n;
    let mut h = h0.to_vec();
    let mut traj = h_traj;
    for t in 0..l {
        let a_t = &a_bar[t * dn..(t + 1) * dn];
        let bx_t = &bx[t * dn..(t + 1) * dn];
        let c_t = &c[t * n..(t + 1) * n];
        for di in 0..d {
            let mut acc = 0.0;
            for s in 0..n {
                let i = di * n + s;
                h[i] = a_t[i] * h[i] + bx_t[i];
                acc += c_t[s] * h[i];
            }
            y[t * d + di] = acc;
        }
        if let Some(traj) = traj.as_deref_mut() {
            traj.extend_from_slice(&h);
        }
    }
}

/// Blocked evaluation of the same recurrence: each chunk computes its local
/// response and elementwise decay prefix products, then boundary states are
/// carried across chunks exactly.
#[allow(clippy::too_many_arguments)]
pub fn scan_chunked(
    a_bar: &[f64],
    bx: &[f64],
    c: &[f64],
    h0: &[f64],
    l: usize,
    d: usize,
    n: usize,
    chunk: usize,
    y: &mut [f64],
) {
    assert!(chunk >= 1, "chunk_len must be >= 1");
    let dn = d * n;
    let mut h_local = vec![0.0; l * dn];
    let mut prefix = vec![0.0; l * dn];

    // local pass: chunks are independent
    let mut t0 = 0;
    while t0 < l {
        let t1 = (t0 + chunk).min(l);
        for t in t0..t1 {
            let a_t = &a_bar[t * dn..(t + 1) * dn];
            let bx_t = &bx[t * dn..(t + 1) * dn];
            if t == t0 {
                for i in 0..dn {
                    prefix[t * dn + i] = a_t[i];
                    h_local[t * dn + i] = bx_t[i];
                }
            } else {
                for i in 0..dn {
                    prefix[t * dn + i] = prefix[(t - 1) * dn + i] * a_t[i];
                    h_local[t * dn + i] = a_t[i] * h_local[(t - 1) * dn + i] + bx_t[i];
                }
            }
        }
        t0 = t1;
    }

    // carry + output pass
    let mut h_in = h0.to_vec();
    let mut t0 = 0;
    while t0 < l {
        let t1 = (t0 + chunk).min(l);
        for t in t0..t1 {
            let c_t = &c[t * n..(t + 1) * n];
            for di in 0..d {
                let mut acc = 0.0;
                for s in 0..n {
                    let i = di * n + s;
                    let ht = h_local[t * dn + i] + prefix[t * dn + i] * h_in[i];
                    acc += c_t[s] * ht;
                }
                y[t * d + di] = acc;
            }
        }
        let last = t1 - 1;
        for i in 0..dn {
            h_in[i] = h_local[last * dn + i] + prefix[last * dn + i] * h_in[i];
        }
        t0 = t1;
    }
}

/// Reverse-mode adjoint of the recurrence. `h_traj` is the saved state
/// trajectory from the forward pass ([l, d, n]).
#[allow(clippy::too_many_arguments)]
pub fn scan_adjoint(
    a_bar: &[f64],
    c: &[f64],
    h0: &[f64],
    h_traj: &[f64],
    gy: &[f64],
    l: usize,
    d: usize,
    n: usize,
    ga: &mut [f64],
    gbx: &mut [f64],
    gc: &mut [f64],
) {
    let dn = d * n;
    let mut adj = vec![0.0; dn];
    for t in (0..l).rev() {
        let a_t = &a_bar[t * dn..(t + 1) * dn];
        let c_t = &c[t * n..(t + 1) * n];
        let h_t = &h_traj[t * dn..(t + 1) * dn];
        let h_prev = if t == 0 {
            h0
        } else {
            &h_traj[(t - 1) * dn..t * dn]
        };
        for di in 0..d {
            let g = gy[t * d + di];
            for s in 0..n {
                let i = di * n + s;
                adj[i] += g * c_t[s];
                gc[t * n + s] += g * h_t[i];
            }
        }
        for i in 0..dn {
            ga[t * dn + i] += adj[i] * h_prev[i];
            gbx[t * dn + i] += adj[i];
            adj[i] *= a_t[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_at_zero_is_ln_two() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn zoh_phi_matches_series_and_limit() {
        assert_eq!(zoh_phi(1e-8), 1.0);
        let z = 0.5f64;
        assert!((zoh_phi(z) - (z.exp() - 1.0) / z).abs() < 1e-14);
        // continuity across the series switch
        let a = zoh_phi(9.9e-5);
        let b = zoh_phi(1.01e-4);
        assert!((a - b).abs() < 1e-8);
    }

    #[test]
    fn bilinear_taps_interior_point() {
        let (taps, count) = bilinear_taps(0.5, 0.5, 2, 2, Border::Clamp);
        assert_eq!(count, 4);
        let total: f64 = taps[..count].iter().map(|t| t.weight).sum();
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn bilinear_taps_zero_border_drops_outside() {
        let (_, count) = bilinear_taps(-2.0, 0.0, 2, 2, Border::Zero);
        assert_eq!(count, 0);
        let (taps, count) = bilinear_taps(-0.5, 0.0, 2, 2, Border::Zero);
        assert_eq!(count, 1);
        assert!((taps[0].weight - 0.5).abs() < 1e-15);
    }

    #[test]
    fn chunked_scan_matches_sequential_small() {
        let l = 7;
        let d = 2;
        let n = 3;
        let dn = d * n;
        let a_bar: Vec<f64> = (0..l * dn).map(|i| 0.3 + 0.5 * ((i * 37 % 11) as f64 / 11.0)).collect();
        let bx: Vec<f64> = (0..l * dn).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.25).collect();
        let c: Vec<f64> = (0..l * n).map(|i| ((i * 5 % 9) as f64 - 4.0) * 0.5).collect();
        let h0 = vec![0.1; dn];
        let mut y_seq = vec![0.0; l * d];
        let mut y_chk = vec![0.0; l * d];
        scan_sequential(&a_bar, &bx, &c, &h0, l, d, n, &mut y_seq, None);
        for chunk in [1, 2, 3, 7, 16] {
            y_chk.iter_mut().for_each(|v| *v = 0.0);
            scan_chunked(&a_bar, &bx, &c, &h0, l, d, n, chunk, &mut y_chk);
            for (a, b) in y_seq.iter().zip(&y_chk) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }
}
