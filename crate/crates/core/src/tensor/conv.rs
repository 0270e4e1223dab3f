//! Spatial operators on BCHW feature maps.

use super::dims4;
use super::gemm::{dot, matmul_into, MatRef};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
    fn is_depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }
}

/// Unfolds one group of one image into a `[cin_g·k·k, ho·wo]` matrix.
fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let npix = g.ho * g.wo;
    for c in 0..g.cin_g() {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut col[((c * k + ki) * k + kj) * npix..][..npix];
                let (lo, hi) = valid_range(kj, p, s, g.w, g.wo);
                for oy in 0..g.ho {
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    let Some(iy) = (oy * s + ki).checked_sub(p).filter(|&y| y < g.h) else {
                        dst.fill(0.0);
                        continue;
                    };
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    let x0 = lo * s + kj - p;
                    if s == 1 {
                        dst[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                    } else {
                        for (d, v) in dst[lo..hi].iter_mut().zip(src[x0..].iter().step_by(s)) {
                            *d = *v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into an image slab.
fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let npix = g.ho * g.wo;
    for c in 0..g.cin_g() {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &col[((c * k + ki) * k + kj) * npix..][..npix];
                let (lo, hi) = valid_range(kj, p, s, g.w, g.wo);
                if lo >= hi {
                    continue;
                }
                let x0 = lo * s + kj - p;
                for oy in 0..g.ho {
                    let Some(iy) = (oy * s + ki).checked_sub(p).filter(|&y| y < g.h) else {
                        continue;
                    };
                    let dst = &mut plane[iy * g.w + x0..(iy + 1) * g.w];
                    let src = &row[oy * g.wo + lo..oy * g.wo + hi];
                    for (d, v) in dst.iter_mut().step_by(s).zip(src) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Output x-range `[lo, hi)` whose input column `ox·stride + kj − pad`
/// falls inside `[0, w)`.
#[inline]
fn valid_range(kj: usize, pad: usize, stride: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kj).div_ceil(stride);
    let hi = if w + pad > kj {
        ((w + pad - kj - 1) / stride + 1).min(wo)
    } else {
        0
    };
    (lo.min(wo), hi.max(lo.min(wo)))
}

/// Copies one plane into a zero border of `pad` pixels.
fn pad_plane(src: &[f64], h: usize, w: usize, pad: usize, dst: &mut [f64]) {
    let wp = w + 2 * pad;
    dst.fill(0.0);
    for y in 0..h {
        dst[(y + pad) * wp + pad..][..w].copy_from_slice(&src[y * w..(y + 1) * w]);
    }
}

/// `out[i] = Σ_t weights[t] · src[offsets[t] + i]`.
fn correlate_taps(src: &[f64], offsets: &[usize], weights: &[f64], out: &mut [f64]) {
    const LANES: usize = 8;
    let (chunks, tail) = out.as_chunks_mut::<LANES>();
    for (ci, chunk) in chunks.iter_mut().enumerate() {
        let base = ci * LANES;
        let mut acc = [0.0f64; LANES];
        for (&o, &w) in offsets.iter().zip(weights) {
            let s: &[f64; LANES] = src[o + base..o + base + LANES].try_into().unwrap();
            for l in 0..LANES {
                acc[l] += w * s[l];
            }
        }
        *chunk = acc;
    }
    let base = chunks.len() * LANES;
    for (i, v) in tail.iter_mut().enumerate() {
        *v = offsets
            .iter()
            .zip(weights)
            .fold(0.0, |a, (&o, &w)| a + w * src[o + base + i]);
    }
}

/// Stride-1 depthwise kernels run on a flattened padded plane of row
/// stride `wp`: output pixel `i = oy·wp + ox` reads input `i + ki·wp + kj`,
/// so each tap is a contiguous shifted slice of `ho·wp` values. Columns
/// `ox ≥ wo` are scratch and discarded. The padded buffer carries `k`
/// spare zeros so the last tap stays in bounds.
struct FlatPlanes {
    wp: usize,
    span: usize,
    offsets: Vec<usize>,
    padded: Vec<f64>,
}

impl FlatPlanes {
    fn new(g: &ConvGeom) -> Self {
        let (hp, wp) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
        Self {
            wp,
            span: g.ho * wp,
            offsets: (0..g.k * g.k).map(|t| (t / g.k) * wp + t % g.k).collect(),
            padded: vec![0.0; hp * wp + g.k],
        }
    }

    fn load(&mut self, src: &[f64], g: &ConvGeom) {
        let p = g.pad;
        for (y, row) in src.chunks_exact(g.w).enumerate() {
            self.padded[(y + p) * self.wp + p..][..g.w].copy_from_slice(row);
        }
    }
}

fn depthwise_forward(x: &[f64], w: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let k = g.k;
    if g.stride == 1 {
        let mut fp = FlatPlanes::new(g);
        let mut acc = vec![0.0; fp.span];
        for b in 0..g.batch {
            for c in 0..g.cin {
                fp.load(&x[(b * g.cin + c) * g.h * g.w..][..g.h * g.w], g);
                correlate_taps(
                    &fp.padded,
                    &fp.offsets,
                    &w[c * k * k..(c + 1) * k * k],
                    &mut acc,
                );
                let dst = &mut out[(b * g.cout + c) * g.ho * g.wo..][..g.ho * g.wo];
                for (drow, arow) in dst.chunks_exact_mut(g.wo).zip(acc.chunks_exact(fp.wp)) {
                    drow.copy_from_slice(&arow[..g.wo]);
                }
            }
        }
        return;
    }
    let (s, p) = (g.stride, g.pad);
    let (hp, wp) = (g.h + 2 * p, g.w + 2 * p);
    let mut padded = vec![0.0; hp * wp];
    for b in 0..g.batch {
        for c in 0..g.cin {
            pad_plane(
                &x[(b * g.cin + c) * g.h * g.w..][..g.h * g.w],
                g.h,
                g.w,
                p,
                &mut padded,
            );
            let dst = &mut out[(b * g.cout + c) * g.ho * g.wo..][..g.ho * g.wo];
            let kern = &w[c * k * k..(c + 1) * k * k];
            for (oy, orow) in dst.chunks_exact_mut(g.wo).enumerate() {
                for ki in 0..k {
                    let irow = &padded[(oy * s + ki) * wp..][..wp];
                    for kj in 0..k {
                        let wv = kern[ki * k + kj];
                        for (o, v) in orow.iter_mut().zip(irow[kj..].iter().step_by(s)) {
                            *o += wv * v;
                        }
                    }
                }
            }
        }
    }
}

/// The input gradient is a correlation of the zero-extended output
/// gradient with the flipped tap offsets.
fn depthwise_backward_flat(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &ConvGeom,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let (k, p) = (g.k, g.pad);
    let mut fp = FlatPlanes::new(g);
    let omax = *fp.offsets.last().unwrap();
    let flipped: Vec<usize> = fp.offsets.iter().map(|o| omax - o).collect();
    let mut dpad = vec![0.0; fp.padded.len()];
    // Output gradient at row stride `wp`, preceded by `omax` zeros.
    let mut gbig = vec![0.0; dpad.len() + omax];
    for b in 0..g.batch {
        for c in 0..g.cin {
            let base_in = (b * g.cin + c) * g.h * g.w;
            let gplane = &gout[(b * g.cout + c) * g.ho * g.wo..][..g.ho * g.wo];
            for (dst, src) in gbig[omax..]
                .chunks_exact_mut(fp.wp)
                .zip(gplane.chunks_exact(g.wo))
            {
                dst[..g.wo].copy_from_slice(src);
            }
            let gpad = &gbig[omax..omax + fp.span];
            if let Some(dw) = dw.as_deref_mut() {
                fp.load(&x[base_in..base_in + g.h * g.w], g);
                for (t, &o) in fp.offsets.iter().enumerate() {
                    dw[c * k * k + t] += dot(gpad, &fp.padded[o..o + fp.span]);
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                correlate_taps(&gbig, &flipped, &w[c * k * k..(c + 1) * k * k], &mut dpad);
                let plane = &mut dx[base_in..base_in + g.h * g.w];
                for (y, row) in plane.chunks_exact_mut(g.w).enumerate() {
                    let src = &dpad[(y + p) * fp.wp + p..][..g.w];
                    row.iter_mut().zip(src).for_each(|(d, v)| *d += v);
                }
            }
        }
    }
}

fn depthwise_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &ConvGeom,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    if g.stride == 1 {
        return depthwise_backward_flat(x, w, gout, g, dx, dw);
    }
    let (k, s, p) = (g.k, g.stride, g.pad);
    let (hp, wp) = (g.h + 2 * p, g.w + 2 * p);
    let mut padded = vec![0.0; hp * wp];
    let mut dpad = vec![0.0; hp * wp];
    for b in 0..g.batch {
        for c in 0..g.cin {
            let base_in = (b * g.cin + c) * g.h * g.w;
            let gplane = &gout[(b * g.cout + c) * g.ho * g.wo..][..g.ho * g.wo];
            let kern = &w[c * k * k..(c + 1) * k * k];
            if dw.is_some() {
                pad_plane(&x[base_in..base_in + g.h * g.w], g.h, g.w, p, &mut padded);
            }
            dpad.fill(0.0);
            for (oy, grow) in gplane.chunks_exact(g.wo).enumerate() {
                for ki in 0..k {
                    let roff = (oy * s + ki) * wp;
                    for kj in 0..k {
                        if let Some(dw) = dw.as_deref_mut() {
                            let irow = &padded[roff + kj..roff + wp];
                            dw[c * k * k + ki * k + kj] += grow
                                .iter()
                                .zip(irow.iter().step_by(s))
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        }
                        if dx.is_some() {
                            let wv = kern[ki * k + kj];
                            let drow = &mut dpad[roff + kj..roff + wp];
                            for (d, gv) in drow.iter_mut().step_by(s).zip(grow) {
                                *d += wv * gv;
                            }
                        }
                    }
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                let plane = &mut dx[base_in..base_in + g.h * g.w];
                for (y, row) in plane.chunks_exact_mut(g.w).enumerate() {
                    let src = &dpad[(y + p) * wp + p..][..g.w];
                    row.iter_mut().zip(src).for_each(|(d, v)| *d += v);
                }
            }
        }
    }
}

fn conv_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let npix = g.ho * g.wo;
    let mut out = vec![0.0; g.batch * g.cout * npix];
    if g.is_depthwise() {
        depthwise_forward(x, w, g, &mut out);
    } else {
        let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
        let kk = cin_g * g.k * g.k;
        let mut col = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; kk * npix]
        };
        for b in 0..g.batch {
            for gi in 0..g.groups {
                let xs = &x[(b * g.cin + gi * cin_g) * g.h * g.w..][..cin_g * g.h * g.w];
                let ws = MatRef::new(&w[gi * cout_g * kk..], cout_g, kk);
                let dst = &mut out[(b * g.cout + gi * cout_g) * npix..];
                if g.is_pointwise() {
                    matmul_into(ws, MatRef::new(xs, cin_g, npix), dst, false);
                } else {
                    im2col(xs, g, &mut col);
                    matmul_into(ws, MatRef::new(&col, kk, npix), dst, false);
                }
            }
        }
    }
    if let Some(bias) = bias {
        for b in 0..g.batch {
            for (c, bv) in bias.iter().enumerate() {
                out[(b * g.cout + c) * npix..][..npix]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
    }
    out
}

fn conv_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &ConvGeom,
    need: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let npix = g.ho * g.wo;
    let mut dx = need[0].then(|| vec![0.0; x.len()]);
    let mut dw = need[1].then(|| vec![0.0; w.len()]);
    if g.is_depthwise() {
        depthwise_backward(x, w, gout, g, dx.as_deref_mut(), dw.as_deref_mut());
    } else {
        let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
        let kk = cin_g * g.k * g.k;
        let pointwise = g.is_pointwise();
        let mut col = if pointwise {
            Vec::new()
        } else {
            vec![0.0; kk * npix]
        };
        let mut dcol = if pointwise {
            Vec::new()
        } else {
            vec![0.0; kk * npix]
        };
        for b in 0..g.batch {
            for gi in 0..g.groups {
                let xoff = (b * g.cin + gi * cin_g) * g.h * g.w;
                let xs = &x[xoff..][..cin_g * g.h * g.w];
                let gs = MatRef::new(&gout[(b * g.cout + gi * cout_g) * npix..], cout_g, npix);
                let ws = MatRef::new(&w[gi * cout_g * kk..], cout_g, kk);
                if let Some(dw) = dw.as_deref_mut() {
                    let dst = &mut dw[gi * cout_g * kk..];
                    if pointwise {
                        matmul_into(gs, MatRef::new(xs, cin_g, npix).t(), dst, true);
                    } else {
                        im2col(xs, g, &mut col);
                        matmul_into(gs, MatRef::new(&col, kk, npix).t(), dst, true);
                    }
                }
                if let Some(dx) = dx.as_deref_mut() {
                    let dst = &mut dx[xoff..xoff + cin_g * g.h * g.w];
                    if pointwise {
                        matmul_into(ws.t(), gs, dst, true);
                    } else {
                        matmul_into(ws.t(), gs, &mut dcol, false);
                        col2im(&dcol, g, dst);
                    }
                }
            }
        }
    }
    let db = need.get(2).copied().unwrap_or(false).then(|| {
        let mut db = vec![0.0; g.cout];
        for b in 0..g.batch {
            for (c, d) in db.iter_mut().enumerate() {
                *d += gout[(b * g.cout + c) * npix..][..npix].iter().sum::<f64>();
            }
        }
        db
    });
    let mut out = vec![dx, dw];
    if need.len() > 2 {
        out.push(db);
    }
    out
}

impl Tape {
    /// 2-D cross-correlation with square kernels.
    ///
    /// `weight` is `[out, in/groups, k, k]`, `bias` is `[out]`. Output size
    /// is `(H + 2·padding − k)/stride + 1` per spatial axis.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let [batch, cin, h, w] = dims4(self.shape(input), "conv2d")?;
        let [cout, cin_g, k, k2] = dims4(self.shape(weight), "conv2d")?;
        if groups == 0 || stride == 0 {
            return Err(Error::shape("conv2d", "groups and stride must be ≥ 1"));
        }
        if k != k2 || cin % groups != 0 || cout % groups != 0 || cin_g != cin / groups {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {:?}, weight {:?}, groups {groups}",
                    self.shape(input),
                    self.shape(weight)
                ),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {cout} output channels", self.shape(b)),
                ));
            }
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} larger than padded input {h}x{w} (padding {padding})"),
            ));
        }
        let g = ConvGeom {
            batch,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad: padding,
            groups,
            ho: (h + 2 * padding - k) / stride + 1,
            wo: (w + 2 * padding - k) / stride + 1,
        };
        let (xd, wd) = (self.shared(input), self.shared(weight));
        let out = conv_forward(&xd, &wd, bias.map(|b| self.data(b)), &g);
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.push_op(
            vec![batch, cout, g.ho, g.wo],
            out,
            &parents,
            Box::new(move |gout, need| conv_backward(&xd, &wd, gout, &g, need)),
        ))
    }

    /// Space-to-depth: `[B,C,H,W] -> [B, C·r², H/r, W/r]`.
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let [b, c, h, w] = dims4(self.shape(x), "pixel_unshuffle")?;
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(Error::shape(
                "pixel_unshuffle",
                format!("{h}x{w} not divisible by factor {r}"),
            ));
        }
        let perm = unshuffle_index(b, c, h, w, r);
        let out = gather(self.data(x), &perm);
        Ok(self.push_op(
            vec![b, c * r * r, h / r, w / r],
            out,
            &[x],
            Box::new(move |g, _| vec![Some(scatter(g, &perm))]),
        ))
    }

    /// Depth-to-space: `[B, C·r², H, W] -> [B, C, H·r, W·r]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let [b, crr, h, w] = dims4(self.shape(x), "pixel_shuffle")?;
        if r == 0 || crr % (r * r) != 0 {
            return Err(Error::shape(
                "pixel_shuffle",
                format!("{crr} channels not divisible by {r}²"),
            ));
        }
        let c = crr / (r * r);
        // shuffle is the inverse permutation of unshuffle on the output shape
        let perm = unshuffle_index(b, c, h * r, w * r, r);
        let out = scatter(self.data(x), &perm);
        Ok(self.push_op(
            vec![b, c, h * r, w * r],
            out,
            &[x],
            Box::new(move |g, _| vec![Some(gather(g, &perm))]),
        ))
    }

    /// Bilinear resampling with half-pixel centres and edge clamping.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [b, c, h, w] = dims4(self.shape(x), "bilinear_resize")?;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "bilinear_resize",
                format!("{h}x{w} -> {out_h}x{out_w}"),
            ));
        }
        if (out_h, out_w) == (h, w) {
            return Ok(self.push_view(vec![b, c, h, w], x));
        }
        let ys = interp_taps(h, out_h);
        let xs = interp_taps(w, out_w);
        let src = self.data(x);
        let mut out = vec![0.0; b * c * out_h * out_w];
        for (plane, dst) in src.chunks(h * w).zip(out.chunks_mut(out_h * out_w)) {
            for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                    let top = plane[y0 * w + x0] * (1.0 - lx) + plane[y0 * w + x1] * lx;
                    let bot = plane[y1 * w + x0] * (1.0 - lx) + plane[y1 * w + x1] * lx;
                    dst[oy * out_w + ox] = top * (1.0 - ly) + bot * ly;
                }
            }
        }
        Ok(self.push_op(
            vec![b, c, out_h, out_w],
            out,
            &[x],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; b * c * h * w];
                for (gplane, dst) in g.chunks(out_h * out_w).zip(gx.chunks_mut(h * w)) {
                    for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                            let v = gplane[oy * out_w + ox];
                            dst[y0 * w + x0] += v * (1.0 - ly) * (1.0 - lx);
                            dst[y0 * w + x1] += v * (1.0 - ly) * lx;
                            dst[y1 * w + x0] += v * ly * (1.0 - lx);
                            dst[y1 * w + x1] += v * ly * lx;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Reflect-pads the bottom and right edges (edge sample not repeated).
    pub fn reflect_pad(&mut self, x: Var, pad_bottom: usize, pad_right: usize) -> Result<Var> {
        let [b, c, h, w] = dims4(self.shape(x), "reflect_pad")?;
        if pad_bottom >= h.max(1) || pad_right >= w.max(1) {
            return Err(Error::shape(
                "reflect_pad",
                format!("padding ({pad_bottom}, {pad_right}) too large for {h}x{w}"),
            ));
        }
        if pad_bottom == 0 && pad_right == 0 {
            return Ok(self.push_view(vec![b, c, h, w], x));
        }
        let (hp, wp) = (h + pad_bottom, w + pad_right);
        let reflect = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
        let mut index = Vec::with_capacity(b * c * hp * wp);
        for p in 0..b * c {
            for y in 0..hp {
                for xx in 0..wp {
                    index.push(p * h * w + reflect(y, h) * w + reflect(xx, w));
                }
            }
        }
        let out = gather(self.data(x), &index);
        let n = b * c * h * w;
        Ok(self.push_op(
            vec![b, c, hp, wp],
            out,
            &[x],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; n];
                for (gv, &i) in g.iter().zip(&index) {
                    gx[i] += gv;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Top-left `out_h × out_w` window.
    pub fn crop(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [b, c, h, w] = dims4(self.shape(x), "crop")?;
        if out_h > h || out_w > w {
            return Err(Error::shape("crop", format!("{h}x{w} -> {out_h}x{out_w}")));
        }
        if (out_h, out_w) == (h, w) {
            return Ok(self.push_view(vec![b, c, h, w], x));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(b * c * out_h * out_w);
        for p in 0..b * c {
            for y in 0..out_h {
                out.extend_from_slice(&src[p * h * w + y * w..][..out_w]);
            }
        }
        Ok(self.push_op(
            vec![b, c, out_h, out_w],
            out,
            &[x],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; b * c * h * w];
                for p in 0..b * c {
                    for y in 0..out_h {
                        gx[p * h * w + y * w..][..out_w]
                            .copy_from_slice(&g[(p * out_h + y) * out_w..][..out_w]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

/// For each element of the unshuffled output, its flat index in the input.
fn unshuffle_index(b: usize, c: usize, h: usize, w: usize, r: usize) -> Vec<usize> {
    let (ho, wo) = (h / r, w / r);
    let mut idx = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    for y in 0..ho {
                        for x in 0..wo {
                            idx.push(((bi * c + ci) * h + y * r + i) * w + x * r + j);
                        }
                    }
                }
            }
        }
    }
    idx
}

fn gather(src: &[f64], index: &[usize]) -> Vec<f64> {
    index.iter().map(|&i| src[i]).collect()
}

fn scatter(src: &[f64], index: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for (v, &i) in src.iter().zip(index) {
        out[i] = *v;
    }
    out
}

/// Per output coordinate: (lower tap, upper tap, upper weight).
fn interp_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}
