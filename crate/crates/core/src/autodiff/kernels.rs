// Forward and vector-Jacobian kernels for the fused capsule operations.
//
// Layouts (all row-major):
//   u       [B, I, Hin]         lower capsule vectors
//   W       [I, J, Hout, Hin]   per-pair transformation matrices
//   û       [B, I, J, H]        predictions / votes
//   c, R    [B, I, J]           coupling coefficients / responsibilities
//   s, v    [B, J, H]           upper capsule vectors
//   M       [B, I, 16]          4x4 pose matrices, row-major
//   Wpose   [I, J, 16]          4x4 transforms, row-major

pub(crate) struct Dims4 {
    pub b: usize,
    pub i: usize,
    pub j: usize,
    pub h: usize,
}

/// û[b,i,j,:] = W[i,j] · u[b,i,:]
pub(crate) fn caps_predict(
    u: &[f64],
    w: &[f64],
    b: usize,
    i: usize,
    j: usize,
    hout: usize,
    hin: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; b * i * j * hout];
    for bi in 0..b {
        for ii in 0..i {
            let urow = &u[(bi * i + ii) * hin..(bi * i + ii + 1) * hin];
            for jj in 0..j {
                let wm = &w[(ii * j + jj) * hout * hin..(ii * j + jj + 1) * hout * hin];
                let o =
                    &mut out[((bi * i + ii) * j + jj) * hout..((bi * i + ii) * j + jj + 1) * hout];
                for (oo, wrow) in o.iter_mut().zip(wm.chunks_exact(hin)) {
                    let mut acc = 0.0;
                    for (a, x) in wrow.iter().zip(urow) {
                        acc += a * x;
                    }
                    *oo = acc;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn caps_predict_backward(
    g: &[f64],
    u: &[f64],
    w: &[f64],
    gu: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
    b: usize,
    i: usize,
    j: usize,
    hout: usize,
    hin: usize,
) {
    if let Some(gu) = gu {
        for bi in 0..b {
            for ii in 0..i {
                let gurow = &mut gu[(bi * i + ii) * hin..(bi * i + ii + 1) * hin];
                for jj in 0..j {
                    let wm = &w[(ii * j + jj) * hout * hin..(ii * j + jj + 1) * hout * hin];
                    let go =
                        &g[((bi * i + ii) * j + jj) * hout..((bi * i + ii) * j + jj + 1) * hout];
                    for (gv, wrow) in go.iter().zip(wm.chunks_exact(hin)) {
                        if *gv == 0.0 {
                            continue;
                        }
                        for (acc, a) in gurow.iter_mut().zip(wrow) {
                            *acc += gv * a;
                        }
                    }
                }
            }
        }
    }
    if let Some(gw) = gw {
        for bi in 0..b {
            for ii in 0..i {
                let urow = &u[(bi * i + ii) * hin..(bi * i + ii + 1) * hin];
                for jj in 0..j {
                    let gwm = &mut gw[(ii * j + jj) * hout * hin..(ii * j + jj + 1) * hout * hin];
                    let go =
                        &g[((bi * i + ii) * j + jj) * hout..((bi * i + ii) * j + jj + 1) * hout];
                    for (gv, gwrow) in go.iter().zip(gwm.chunks_exact_mut(hin)) {
                        if *gv == 0.0 {
                            continue;
                        }
                        for (acc, x) in gwrow.iter_mut().zip(urow) {
                            *acc += gv * x;
                        }
                    }
                }
            }
        }
    }
}

/// V[b,i,j] = M[b,i] · W[i,j] as 4x4 matrices.
pub(crate) fn pose_votes(m: &[f64], w: &[f64], b: usize, i: usize, j: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * i * j * 16];
    for bi in 0..b {
        for ii in 0..i {
            let mm = &m[(bi * i + ii) * 16..(bi * i + ii + 1) * 16];
            for jj in 0..j {
                let wm = &w[(ii * j + jj) * 16..(ii * j + jj + 1) * 16];
                let o = &mut out[((bi * i + ii) * j + jj) * 16..((bi * i + ii) * j + jj + 1) * 16];
                for r in 0..4 {
                    for c in 0..4 {
                        let mut acc = 0.0;
                        for k in 0..4 {
                            acc += mm[r * 4 + k] * wm[k * 4 + c];
                        }
                        o[r * 4 + c] = acc;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn pose_votes_backward(
    g: &[f64],
    m: &[f64],
    w: &[f64],
    gm: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
    b: usize,
    i: usize,
    j: usize,
) {
    if let Some(gm) = gm {
        for bi in 0..b {
            for ii in 0..i {
                let gmm = &mut gm[(bi * i + ii) * 16..(bi * i + ii + 1) * 16];
                for jj in 0..j {
                    let wm = &w[(ii * j + jj) * 16..(ii * j + jj + 1) * 16];
                    let go = &g[((bi * i + ii) * j + jj) * 16..((bi * i + ii) * j + jj + 1) * 16];
                    for r in 0..4 {
                        for k in 0..4 {
                            let mut acc = 0.0;
                            for c in 0..4 {
                                acc += go[r * 4 + c] * wm[k * 4 + c];
                            }
                            gmm[r * 4 + k] += acc;
                        }
                    }
                }
            }
        }
    }
    if let Some(gw) = gw {
        for bi in 0..b {
            for ii in 0..i {
                let mm = &m[(bi * i + ii) * 16..(bi * i + ii + 1) * 16];
                for jj in 0..j {
                    let gwm = &mut gw[(ii * j + jj) * 16..(ii * j + jj + 1) * 16];
                    let go = &g[((bi * i + ii) * j + jj) * 16..((bi * i + ii) * j + jj + 1) * 16];
                    for k in 0..4 {
                        for c in 0..4 {
                            let mut acc = 0.0;
                            for r in 0..4 {
                                acc += mm[r * 4 + k] * go[r * 4 + c];
                            }
                            gwm[k * 4 + c] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// s[b,j,:] = Σ_i c[b,i,j] · û[b,i,j,:]
pub(crate) fn weighted_sum(c: &[f64], u: &[f64], d: &Dims4) -> Vec<f64> {
    let mut out = vec![0.0; d.b * d.j * d.h];
    for bi in 0..d.b {
        let o = &mut out[bi * d.j * d.h..(bi + 1) * d.j * d.h];
        for ii in 0..d.i {
            for jj in 0..d.j {
                let cv = c[(bi * d.i + ii) * d.j + jj];
                let urow =
                    &u[((bi * d.i + ii) * d.j + jj) * d.h..((bi * d.i + ii) * d.j + jj + 1) * d.h];
                for (acc, x) in o[jj * d.h..(jj + 1) * d.h].iter_mut().zip(urow) {
                    *acc += cv * x;
                }
            }
        }
    }
    out
}

pub(crate) fn weighted_sum_backward(
    g: &[f64],
    c: &[f64],
    u: &[f64],
    gc: Option<&mut [f64]>,
    gu: Option<&mut [f64]>,
    d: &Dims4,
) {
    if let Some(gc) = gc {
        for bi in 0..d.b {
            for ii in 0..d.i {
                for jj in 0..d.j {
                    let urow = &u[((bi * d.i + ii) * d.j + jj) * d.h
                        ..((bi * d.i + ii) * d.j + jj + 1) * d.h];
                    let grow = &g[(bi * d.j + jj) * d.h..(bi * d.j + jj + 1) * d.h];
                    let mut acc = 0.0;
                    for (a, x) in grow.iter().zip(urow) {
                        acc += a * x;
                    }
                    gc[(bi * d.i + ii) * d.j + jj] += acc;
                }
            }
        }
    }
    if let Some(gu) = gu {
        for bi in 0..d.b {
            for ii in 0..d.i {
                for jj in 0..d.j {
                    let cv = c[(bi * d.i + ii) * d.j + jj];
                    let base = ((bi * d.i + ii) * d.j + jj) * d.h;
                    let grow = &g[(bi * d.j + jj) * d.h..(bi * d.j + jj + 1) * d.h];
                    for (acc, gv) in gu[base..base + d.h].iter_mut().zip(grow) {
                        *acc += cv * gv;
                    }
                }
            }
        }
    }
}

/// a[b,i,j] = v[b,j,:] · û[b,i,j,:]
pub(crate) fn agreement(v: &[f64], u: &[f64], d: &Dims4) -> Vec<f64> {
    let mut out = vec![0.0; d.b * d.i * d.j];
    for bi in 0..d.b {
        for ii in 0..d.i {
            for jj in 0..d.j {
                let urow =
                    &u[((bi * d.i + ii) * d.j + jj) * d.h..((bi * d.i + ii) * d.j + jj + 1) * d.h];
                let vrow = &v[(bi * d.j + jj) * d.h..(bi * d.j + jj + 1) * d.h];
                let mut acc = 0.0;
                for (a, x) in vrow.iter().zip(urow) {
                    acc += a * x;
                }
                out[(bi * d.i + ii) * d.j + jj] = acc;
            }
        }
    }
    out
}

pub(crate) fn agreement_backward(
    g: &[f64],
    v: &[f64],
    u: &[f64],
    gv: Option<&mut [f64]>,
    gu: Option<&mut [f64]>,
    d: &Dims4,
) {
    if let Some(gv) = gv {
        for bi in 0..d.b {
            for ii in 0..d.i {
                for jj in 0..d.j {
                    let gval = g[(bi * d.i + ii) * d.j + jj];
                    let urow = &u[((bi * d.i + ii) * d.j + jj) * d.h
                        ..((bi * d.i + ii) * d.j + jj + 1) * d.h];
                    for (acc, x) in gv[(bi * d.j + jj) * d.h..(bi * d.j + jj + 1) * d.h]
                        .iter_mut()
                        .zip(urow)
                    {
                        *acc += gval * x;
                    }
                }
            }
        }
    }
    if let Some(gu) = gu {
        for bi in 0..d.b {
            for ii in 0..d.i {
                for jj in 0..d.j {
                    let gval = g[(bi * d.i + ii) * d.j + jj];
                    let vrow = &v[(bi * d.j + jj) * d.h..(bi * d.j + jj + 1) * d.h];
                    let base = ((bi * d.i + ii) * d.j + jj) * d.h;
                    for (acc, x) in gu[base..base + d.h].iter_mut().zip(vrow) {
                        *acc += gval * x;
                    }
                }
            }
        }
    }
}

/// Scale factor q(n) = n² / ((1 + n²)(n + ε)) so that squash(s) = q(‖s‖)·s.
#[inline]
pub(crate) fn squash_factor(norm: f64, eps: f64) -> f64 {
    let n2 = norm * norm;
    n2 / ((1.0 + n2) * (norm + eps))
}

/// q'(n)/n, finite at n = 0.
#[inline]
pub(crate) fn squash_factor_slope(norm: f64, eps: f64) -> f64 {
    let n2 = norm * norm;
    let d = (1.0 + n2) * (norm + eps);
    let dd = 2.0 * norm * (norm + eps) + (1.0 + n2);
    (2.0 * d - norm * dd) / (d * d)
}

/// out[b,j,h] = Σ_i w[b,i,j] · (v[b,i,j,h] − μ[b,j,h])²
pub(crate) fn weighted_spread(w: &[f64], v: &[f64], mu: &[f64], d: &Dims4) -> Vec<f64> {
    let mut out = vec![0.0; d.b * d.j * d.h];
    for bi in 0..d.b {
        for ii in 0..d.i {
            for jj in 0..d.j {
                let wv = w[(bi * d.i + ii) * d.j + jj];
                let base = ((bi * d.i + ii) * d.j + jj) * d.h;
                let mrow = (bi * d.j + jj) * d.h;
                for h in 0..d.h {
                    let dev = v[base + h] - mu[mrow + h];
                    out[mrow + h] += wv * dev * dev;
                }
            }
        }
    }
    out
}

/// Gradients of [`weighted_spread`] for `(w, v, μ)`.
pub(crate) fn weighted_spread_backward(
    g: &[f64],
    w: &[f64],
    v: &[f64],
    mu: &[f64],
    d: &Dims4,
    want: [bool; 3],
) -> [Option<Vec<f64>>; 3] {
    let mut gw = want[0].then(|| vec![0.0; w.len()]);
    let mut gv = want[1].then(|| vec![0.0; v.len()]);
    let mut gm = want[2].then(|| vec![0.0; mu.len()]);
    for bi in 0..d.b {
        for ii in 0..d.i {
            for jj in 0..d.j {
                let widx = (bi * d.i + ii) * d.j + jj;
                let base = widx * d.h;
                let mrow = (bi * d.j + jj) * d.h;
                let mut acc = 0.0;
                for h in 0..d.h {
                    let dev = v[base + h] - mu[mrow + h];
                    let gh = g[mrow + h];
                    acc += gh * dev * dev;
                    let t = 2.0 * w[widx] * gh * dev;
                    if let Some(gv) = gv.as_mut() {
                        gv[base + h] += t;
                    }
                    if let Some(gm) = gm.as_mut() {
                        gm[mrow + h] -= t;
                    }
                }
                if let Some(gw) = gw.as_mut() {
                    gw[widx] += acc;
                }
            }
        }
    }
    [gw, gv, gm]
}

/// out[b,i,j] = Σ_h (v[b,i,j,h] − μ[b,j,h])² / (2 σ²[b,j,h])
pub(crate) fn gaussian_energy(v: &[f64], mu: &[f64], var: &[f64], d: &Dims4) -> Vec<f64> {
    let mut out = vec![0.0; d.b * d.i * d.j];
    for bi in 0..d.b {
        for ii in 0..d.i {
            for jj in 0..d.j {
                let base = ((bi * d.i + ii) * d.j + jj) * d.h;
                let mrow = (bi * d.j + jj) * d.h;
                let mut acc = 0.0;
                for h in 0..d.h {
                    let dev = v[base + h] - mu[mrow + h];
                    acc += dev * dev / (2.0 * var[mrow + h]);
                }
                out[(bi * d.i + ii) * d.j + jj] = acc;
            }
        }
    }
    out
}

/// Gradients of [`gaussian_energy`] for `(v, μ, σ²)`.
pub(crate) fn gaussian_energy_backward(
    g: &[f64],
    v: &[f64],
    mu: &[f64],
    var: &[f64],
    d: &Dims4,
    want: [bool; 3],
) -> [Option<Vec<f64>>; 3] {
    let mut gv = want[0].then(|| vec![0.0; v.len()]);
    let mut gm = want[1].then(|| vec![0.0; mu.len()]);
    let mut gs = want[2].then(|| vec![0.0; var.len()]);
    for bi in 0..d.b {
        for ii in 0..d.i {
            for jj in 0..d.j {
                let gij = g[(bi * d.i + ii) * d.j + jj];
                let base = ((bi * d.i + ii) * d.j + jj) * d.h;
                let mrow = (bi * d.j + jj) * d.h;
                for h in 0..d.h {
                    let dev = v[base + h] - mu[mrow + h];
                    let s = var[mrow + h];
                    let t = gij * dev / s;
                    if let Some(gv) = gv.as_mut() {
                        gv[base + h] += t;
                    }
                    if let Some(gm) = gm.as_mut() {
                        gm[mrow + h] -= t;
                    }
                    if let Some(gs) = gs.as_mut() {
                        gs[mrow + h] -= gij * dev * dev / (2.0 * s * s);
                    }
                }
            }
        }
    }
    [gv, gm, gs]
}
