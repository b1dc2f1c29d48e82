//! Forward and adjoint kernels for the spatial ops. 2D grids run through
//! the 3D code paths with a leading axis of extent 1.

use super::Real;

/// Pads spatial dims to three axes by prepending 1s.
pub fn pad3(sp: &[usize]) -> [usize; 3] {
    match *sp {
        [a, b] => [1, a, b],
        [a, b, c] => [a, b, c],
        [a] => [1, 1, a],
        _ => panic!("unsupported spatial rank {}", sp.len()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub in_sp: [usize; 3],
    pub out_sp: [usize; 3],
    pub k: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    /// Zero-padded "same" geometry: odd kernels, output `ceil(n / stride)`.
    pub fn new(cin: usize, cout: usize, in_sp: &[usize], k: &[usize], stride: usize) -> Self {
        let in3 = pad3(in_sp);
        let k3 = pad3(k);
        let mut stride3 = [stride; 3];
        if in_sp.len() == 2 {
            stride3[0] = 1;
        }
        let mut out = [0; 3];
        let mut pad = [0; 3];
        for a in 0..3 {
            pad[a] = k3[a] / 2;
            out[a] = in3[a].div_ceil(stride3[a]);
        }
        Self {
            cin,
            cout,
            in_sp: in3,
            out_sp: out,
            k: k3,
            stride: stride3,
            pad,
        }
    }

    fn in_n(&self) -> usize {
        self.in_sp.iter().product()
    }

    fn out_n(&self) -> usize {
        self.out_sp.iter().product()
    }

    fn taps(&self) -> usize {
        self.k.iter().product()
    }

    /// Valid output range `[lo, hi)` along `axis` for kernel offset `kk`.
    #[inline]
    fn valid(&self, axis: usize, kk: usize) -> (usize, usize) {
        let (s, p, n, o) = (self.stride[axis], self.pad[axis], self.in_sp[axis], self.out_sp[axis]);
        let lo = if kk >= p { 0 } else { (p - kk).div_ceil(s) };
        if n + p < kk + 1 {
            return (0, 0);
        }
        let hi = ((n - 1 + p - kk) / s + 1).min(o);
        (lo, hi.max(lo))
    }
}

/// Visits every (output row, input row) pair for one kernel tap.
#[inline]
fn for_each_row(
    g: &ConvGeom,
    kz: usize,
    ky: usize,
    kx: usize,
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let (z0, z1) = g.valid(0, kz);
    let (y0, y1) = g.valid(1, ky);
    let (x0, x1) = g.valid(2, kx);
    if x0 >= x1 {
        return;
    }
    for oz in z0..z1 {
        let iz = oz * g.stride[0] + kz - g.pad[0];
        for oy in y0..y1 {
            let iy = oy * g.stride[1] + ky - g.pad[1];
            let out_row = (oz * g.out_sp[1] + oy) * g.out_sp[2];
            let in_row = (iz * g.in_sp[1] + iy) * g.in_sp[2];
            let ix0 = x0 * g.stride[2] + kx - g.pad[2];
            f(out_row + x0, in_row + ix0, x1 - x0, g.stride[2]);
        }
    }
}

/// `out[co] = sum_ci w[co, ci] * x[ci]` (correlation), accumulating into `out`.
pub fn conv_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], out: &mut [T]) {
    let (in_n, out_n, taps) = (g.in_n(), g.out_n(), g.taps());
    for co in 0..g.cout {
        let o = &mut out[co * out_n..(co + 1) * out_n];
        for ci in 0..g.cin {
            let xi = &x[ci * in_n..(ci + 1) * in_n];
            let wk = &w[(co * g.cin + ci) * taps..(co * g.cin + ci + 1) * taps];
            let mut t = 0;
            for kz in 0..g.k[0] {
                for ky in 0..g.k[1] {
                    for kx in 0..g.k[2] {
                        let wv = wk[t];
                        t += 1;
                        for_each_row(g, kz, ky, kx, |ob, ib, len, s| {
                            let orow = &mut o[ob..ob + len];
                            if s == 1 {
                                for (a, &b) in orow.iter_mut().zip(&xi[ib..ib + len]) {
                                    *a += wv * b;
                                }
                            } else {
                                for (a, &b) in orow.iter_mut().zip(xi[ib..].iter().step_by(s)) {
                                    *a += wv * b;
                                }
                            }
                        });
                    }
                }
            }
        }
    }
}

/// Adjoint of [`conv_forward`]: accumulates input and kernel gradients.
pub fn conv_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    let (in_n, out_n, taps) = (g.in_n(), g.out_n(), g.taps());
    for co in 0..g.cout {
        let go = &gout[co * out_n..(co + 1) * out_n];
        for ci in 0..g.cin {
            let xi = &x[ci * in_n..(ci + 1) * in_n];
            let base = (co * g.cin + ci) * taps;
            let mut t = 0;
            for kz in 0..g.k[0] {
                for ky in 0..g.k[1] {
                    for kx in 0..g.k[2] {
                        let wv = w[base + t];
                        let mut acc = T::zero();
                        let gxi = gx.as_deref_mut().map(|s| &mut s[ci * in_n..(ci + 1) * in_n]);
                        let want_w = gw.is_some();
                        match gxi {
                            Some(gxi) => for_each_row(g, kz, ky, kx, |ob, ib, len, s| {
                                let grow = &go[ob..ob + len];
                                if s == 1 {
                                    for ((gi, &xv), &gv) in
                                        gxi[ib..ib + len].iter_mut().zip(&xi[ib..ib + len]).zip(grow)
                                    {
                                        *gi += wv * gv;
                                        acc += xv * gv;
                                    }
                                } else {
                                    for (k, &gv) in grow.iter().enumerate() {
                                        gxi[ib + k * s] += wv * gv;
                                        acc += xi[ib + k * s] * gv;
                                    }
                                }
                            }),
                            None if want_w => for_each_row(g, kz, ky, kx, |ob, ib, len, s| {
                                let grow = &go[ob..ob + len];
                                if s == 1 {
                                    for (&xv, &gv) in xi[ib..ib + len].iter().zip(grow) {
                                        acc += xv * gv;
                                    }
                                } else {
                                    for (k, &gv) in grow.iter().enumerate() {
                                        acc += xi[ib + k * s] * gv;
                                    }
                                }
                            }),
                            None => {}
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            gw[base + t] += acc;
                        }
                        t += 1;
                    }
                }
            }
        }
    }
}

/// Per-axis sampling table for upsampling: `(i0, i1, w1)` per output index.
fn upsample_table(n_in: usize, n_out: usize, factor: usize, linear: bool) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            if linear {
                let p = (i as f64 / factor as f64).min((n_in - 1) as f64);
                let i0 = (p.floor() as usize).min(n_in.saturating_sub(2));
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, p - i0 as f64)
            } else {
                let i0 = (i / factor).min(n_in - 1);
                (i0, i0, 0.0)
            }
        })
        .collect()
}

pub struct UpsamplePlan {
    tables: [Vec<(usize, usize, f64)>; 3],
    in_sp: [usize; 3],
    out_sp: [usize; 3],
}

impl UpsamplePlan {
    pub fn new(in_sp: &[usize], out_sp: &[usize], factor: usize, linear: bool) -> Self {
        let i3 = pad3(in_sp);
        let o3 = pad3(out_sp);
        let tables = [0, 1, 2].map(|a| upsample_table(i3[a], o3[a], factor, linear));
        Self {
            tables,
            in_sp: i3,
            out_sp: o3,
        }
    }

    /// Calls `f(out_index, in_index, weight)` for every nonzero interpolation weight.
    fn visit(&self, mut f: impl FnMut(usize, usize, f64)) {
        let [tz, ty, tx] = &self.tables;
        let [_, ny, nx] = self.in_sp;
        let mut o = 0;
        for &(z0, z1, wz) in tz {
            for &(y0, y1, wy) in ty {
                for &(x0, x1, wx) in tx {
                    for (zi, zw) in [(z0, 1.0 - wz), (z1, wz)] {
                        if zw == 0.0 {
                            continue;
                        }
                        for (yi, yw) in [(y0, 1.0 - wy), (y1, wy)] {
                            if yw == 0.0 {
                                continue;
                            }
                            for (xi, xw) in [(x0, 1.0 - wx), (x1, wx)] {
                                if xw == 0.0 {
                                    continue;
                                }
                                f(o, (zi * ny + yi) * nx + xi, zw * yw * xw);
                            }
                        }
                    }
                    o += 1;
                }
            }
        }
    }

    pub fn forward<T: Real>(&self, channels: usize, x: &[T]) -> Vec<T> {
        let (ni, no) = (self.in_sp.iter().product::<usize>(), self.out_sp.iter().product::<usize>());
        let mut out = vec![T::zero(); channels * no];
        for c in 0..channels {
            let (xi, oc) = (&x[c * ni..(c + 1) * ni], &mut out[c * no..(c + 1) * no]);
            self.visit(|o, i, w| oc[o] += T::lit(w) * xi[i]);
        }
        out
    }

    pub fn backward<T: Real>(&self, channels: usize, gout: &[T], gx: &mut [T]) {
        let (ni, no) = (self.in_sp.iter().product::<usize>(), self.out_sp.iter().product::<usize>());
        for c in 0..channels {
            let (gc, go) = (&mut gx[c * ni..(c + 1) * ni], &gout[c * no..(c + 1) * no]);
            self.visit(|o, i, w| gc[i] += T::lit(w) * go[o]);
        }
    }
}

/// Multilinear sampling with clamped (replicate) boundaries.
///
/// `src` is `[channels, sp_src]`, `coords` is `[D, n_out]` holding voxel
/// coordinates along each source axis.
pub struct Resampler<'a> {
    pub src_sp: &'a [usize],
    pub channels: usize,
    pub n_out: usize,
}

struct Corner<T> {
    base: [usize; 3],
    frac: [T; 3],
    inside: [bool; 3],
}

impl Resampler<'_> {
    fn corner<T: Real>(&self, coords: &[T], j: usize) -> Corner<T> {
        let d = self.src_sp.len();
        let mut base = [0; 3];
        let mut frac = [T::zero(); 3];
        let mut inside = [false; 3];
        for k in 0..d {
            let n = self.src_sp[k];
            let hi = T::lit((n - 1) as f64);
            let p = coords[k * self.n_out + j];
            inside[k] = p > T::zero() && p < hi;
            let pc = p.max(T::zero()).min(hi);
            let i0 = pc.floor().as_f64() as usize;
            let i0 = i0.min(n - 2);
            base[k] = i0;
            frac[k] = pc - T::lit(i0 as f64);
        }
        Corner { base, frac, inside }
    }

    fn strides(&self) -> [usize; 3] {
        let d = self.src_sp.len();
        let mut st = [0; 3];
        let mut acc = 1;
        for k in (0..d).rev() {
            st[k] = acc;
            acc *= self.src_sp[k];
        }
        st
    }

    pub fn forward<T: Real>(&self, src: &[T], coords: &[T]) -> Vec<T> {
        let d = self.src_sp.len();
        let n_src: usize = self.src_sp.iter().product();
        let st = self.strides();
        let mut out = vec![T::zero(); self.channels * self.n_out];
        for j in 0..self.n_out {
            let cn = self.corner(coords, j);
            for bits in 0..(1usize << d) {
                let mut w = T::one();
                let mut idx = 0;
                for k in 0..d {
                    let up = (bits >> (d - 1 - k)) & 1 == 1;
                    w *= if up { cn.frac[k] } else { T::one() - cn.frac[k] };
                    idx += (cn.base[k] + up as usize) * st[k];
                }
                if w == T::zero() {
                    continue;
                }
                for c in 0..self.channels {
                    out[c * self.n_out + j] += w * src[c * n_src + idx];
                }
            }
        }
        out
    }

    /// Adjoint with respect to the source values and/or the coordinates.
    pub fn backward<T: Real>(
        &self,
        src: &[T],
        coords: &[T],
        gout: &[T],
        mut gsrc: Option<&mut [T]>,
        mut gcoords: Option<&mut [T]>,
    ) {
        let d = self.src_sp.len();
        let n_src: usize = self.src_sp.iter().product();
        let st = self.strides();
        for j in 0..self.n_out {
            let cn = self.corner(coords, j);
            let mut dcoord = [T::zero(); 3];
            for bits in 0..(1usize << d) {
                let mut fac = [T::one(); 3];
                let mut idx = 0;
                let mut ups = [false; 3];
                for k in 0..d {
                    let up = (bits >> (d - 1 - k)) & 1 == 1;
                    ups[k] = up;
                    fac[k] = if up { cn.frac[k] } else { T::one() - cn.frac[k] };
                    idx += (cn.base[k] + up as usize) * st[k];
                }
                let w = fac[..d].iter().fold(T::one(), |a, &b| a * b);
                if let Some(gs) = gsrc.as_deref_mut() {
                    if w != T::zero() {
                        for c in 0..self.channels {
                            gs[c * n_src + idx] += w * gout[c * self.n_out + j];
                        }
                    }
                }
                if gcoords.is_some() {
                    let mut gdot = T::zero();
                    for c in 0..self.channels {
                        gdot += gout[c * self.n_out + j] * src[c * n_src + idx];
                    }
                    for k in 0..d {
                        if !cn.inside[k] {
                            continue;
                        }
                        let mut dw = if ups[k] { T::one() } else { -T::one() };
                        for m in 0..d {
                            if m != k {
                                dw *= fac[m];
                            }
                        }
                        dcoord[k] += dw * gdot;
                    }
                }
            }
            if let Some(gc) = gcoords.as_deref_mut() {
                for k in 0..d {
                    gc[k * self.n_out + j] += dcoord[k];
                }
            }
        }
    }
}
