//! Normalisation, activation and reduction operators.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::dims4;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Exact GELU, `x·Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad_from_cdf(x: f64, cdf: f64) -> f64 {
    cdf + x * (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

const L2_NORM_FLOOR: f64 = 1e-12;

impl Tape {
    /// Normalises over channels at every `(b, y, x)` position, then applies
    /// a per-channel affine transform.
    pub fn layer_norm_channel(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let [b, c, h, w] = dims4(self.shape(x), "layer_norm_channel")?;
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(Error::shape(
                "layer_norm_channel",
                format!(
                    "{c} channels, scale {:?}, shift {:?}",
                    self.shape(scale),
                    self.shape(shift)
                ),
            ));
        }
        if !(eps >= 0.0) {
            return Err(Error::InvalidArgument(format!("layer norm eps {eps}")));
        }
        let hw = h * w;
        let xd = self.data(x);
        let (gamma, beta) = (self.shared(scale), self.data(shift).to_vec());
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; b * hw];
        let mut mean = vec![0.0; hw];
        let mut var = vec![0.0; hw];
        for bi in 0..b {
            let slab = &xd[bi * c * hw..(bi + 1) * c * hw];
            mean.fill(0.0);
            var.fill(0.0);
            for plane in slab.chunks(hw) {
                mean.iter_mut().zip(plane).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= c as f64);
            for plane in slab.chunks(hw) {
                var.iter_mut()
                    .zip(plane.iter().zip(&mean))
                    .for_each(|(s, (v, m))| *s += (v - m) * (v - m));
            }
            let istd = &mut inv_std[bi * hw..(bi + 1) * hw];
            istd.iter_mut()
                .zip(&var)
                .for_each(|(i, v)| *i = 1.0 / (v / c as f64 + eps).sqrt());
            let xh = &mut xhat[bi * c * hw..(bi + 1) * c * hw];
            for (plane, dst) in slab.chunks(hw).zip(xh.chunks_mut(hw)) {
                for p in 0..hw {
                    dst[p] = (plane[p] - mean[p]) * istd[p];
                }
            }
        }
        let mut out = vec![0.0; xd.len()];
        for (i, (src, dst)) in xhat.chunks(hw).zip(out.chunks_mut(hw)).enumerate() {
            let ch = i % c;
            let (g, s) = (gamma[ch], beta[ch]);
            dst.iter_mut().zip(src).for_each(|(o, v)| *o = v * g + s);
        }
        Ok(self.push_op(
            vec![b, c, h, w],
            out,
            &[x, scale, shift],
            Box::new(move |g, need| {
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (i, (gp, xp)) in g.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                    let ch = i % c;
                    dgamma[ch] += gp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>();
                    dbeta[ch] += gp.iter().sum::<f64>();
                }
                let dx = need[0].then(|| {
                    let mut dx = vec![0.0; g.len()];
                    let mut m1 = vec![0.0; hw];
                    let mut m2 = vec![0.0; hw];
                    for bi in 0..b {
                        let range = bi * c * hw..(bi + 1) * c * hw;
                        let (gs, xs) = (&g[range.clone()], &xhat[range.clone()]);
                        m1.fill(0.0);
                        m2.fill(0.0);
                        for ch in 0..c {
                            let gam = gamma[ch];
                            let (gp, xp) = (&gs[ch * hw..][..hw], &xs[ch * hw..][..hw]);
                            for p in 0..hw {
                                let dxh = gp[p] * gam;
                                m1[p] += dxh;
                                m2[p] += dxh * xp[p];
                            }
                        }
                        let istd = &inv_std[bi * hw..(bi + 1) * hw];
                        let dst = &mut dx[range];
                        let cf = c as f64;
                        for ch in 0..c {
                            let gam = gamma[ch];
                            for p in 0..hw {
                                let i = ch * hw + p;
                                let dxh = gs[i] * gam;
                                dst[i] = istd[p] * (dxh - m1[p] / cf - xs[i] * m2[p] / cf);
                            }
                        }
                    }
                    dx
                });
                vec![dx, need[1].then_some(dgamma), need[2].then_some(dbeta)]
            }),
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xd = self.shared(x);
        let cdf: Vec<f64> = xd.iter().map(|&v| normal_cdf(v)).collect();
        let out = xd.iter().zip(&cdf).map(|(v, c)| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(
            shape,
            out,
            &[x],
            Box::new(move |g, _| {
                vec![Some(
                    g.iter()
                        .zip(xd.iter().zip(&cdf))
                        .map(|(g, (&v, &c))| g * gelu_grad_from_cdf(v, c))
                        .collect(),
                )]
            }),
        )
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} for {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = self.data(x);
        let mut y = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mx = (0..n).map(|j| xd[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..n {
                    let e = (xd[at(j)] - mx).exp();
                    y[at(j)] = e;
                    s += e;
                }
                for j in 0..n {
                    y[at(j)] /= s;
                }
            }
        }
        let ys = std::sync::Arc::new(y.clone());
        Ok(self.push_op(
            shape,
            y,
            &[x],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[at(j)] * ys[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = ys[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Spatial mean: `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = dims4(self.shape(x), "global_avg_pool")?;
        let hw = h * w;
        if hw == 0 {
            return Err(Error::shape("global_avg_pool", "empty spatial extent"));
        }
        let out = self
            .data(x)
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        Ok(self.push_op(
            vec![b, c],
            out,
            &[x],
            Box::new(move |g, _| {
                let inv = 1.0 / hw as f64;
                vec![Some(
                    g.iter()
                        .flat_map(|v| std::iter::repeat_n(v * inv, hw))
                        .collect(),
                )]
            }),
        ))
    }

    /// Scales every row along the last axis to unit L2 norm
    /// (`x / max(‖x‖, 1e-12)`).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::shape("l2_normalize_rows", "scalar input"))?;
        if n == 0 {
            return Ok(self.push_view(shape, x));
        }
        let xd = self.shared(x);
        let norms: Vec<f64> = xd
            .chunks(n)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mut out = vec![0.0; xd.len()];
        for ((row, dst), &nr) in xd.chunks(n).zip(out.chunks_mut(n)).zip(&norms) {
            let d = nr.max(L2_NORM_FLOOR);
            dst.iter_mut().zip(row).for_each(|(o, v)| *o = v / d);
        }
        Ok(self.push_op(
            shape,
            out,
            &[x],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; g.len()];
                for (r, &nr) in norms.iter().enumerate() {
                    let (row, gr) = (&xd[r * n..][..n], &g[r * n..][..n]);
                    let dst = &mut gx[r * n..][..n];
                    if nr > L2_NORM_FLOOR {
                        // (g − u·(u·g)) / ‖x‖ with u = x/‖x‖
                        let dot: f64 = row.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / nr;
                        for j in 0..n {
                            dst[j] = (gr[j] - row[j] / nr * dot) / nr;
                        }
                    } else {
                        for j in 0..n {
                            dst[j] = gr[j] / L2_NORM_FLOOR;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Mean absolute error as a scalar. The subgradient at zero is zero.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::shape(
                "l1_loss",
                format!("{:?} vs {:?}", self.shape(pred), self.shape(target)),
            ));
        }
        let diff: Vec<f64> = self
            .data(pred)
            .iter()
            .zip(self.data(target))
            .map(|(a, b)| a - b)
            .collect();
        let n = diff.len() as f64;
        let loss = diff.iter().map(|d| d.abs()).sum::<f64>() / n;
        Ok(self.push_op(
            vec![],
            vec![loss],
            &[pred, target],
            Box::new(move |g, need| {
                let sign: Vec<f64> = diff
                    .iter()
                    .map(|d| {
                        if *d > 0.0 {
                            g[0] / n
                        } else if *d < 0.0 {
                            -g[0] / n
                        } else {
                            0.0
                        }
                    })
                    .collect();
                vec![
                    need[0].then(|| sign.clone()),
                    need[1].then(|| sign.iter().map(|v| -v).collect()),
                ]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::gelu_scalar;
    use crate::tensor::{Tape, Tensor};

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
        // x·Φ(x) at 1: Φ(1) = 0.8413447460685429
        assert!((gelu_scalar(1.0) - 0.8413447460685429).abs() < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
        let x = tape.constant(t(&[2], &[1.0, 2.0]));
        let y = tape.softmax(x, 0).unwrap();
        let want = [0.2689414213699951, 0.7310585786300049];
        for (a, b) in tape.value(y).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-8);
        }
        let x = tape.constant(t(&[2], &[101.0, 102.0]));
        let shifted = tape.softmax(x, 0).unwrap();
        assert!(tape.value(shifted).max_abs_diff(tape.value(y)) < 1e-15);
    }

    #[test]
    fn softmax_middle_axis_sums_to_one() {
        let mut rng = crate::rng::stream(9, 0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::uniform(&[2, 5, 3], -4.0, 4.0, &mut rng));
        let y = tape.softmax(x, 1).unwrap();
        let d = tape.value(y).data();
        for o in 0..2 {
            for i in 0..3 {
                let s: f64 = (0..5).map(|j| d[(o * 5 + j) * 3 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert!(d.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let one = tape.constant(Tensor::ones(&[2]));
        let zero = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[1, 2, 1, 1], &[1.0, 3.0]));
        let y = tape.layer_norm_channel(x, one, zero, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);

        let c = tape.constant(Tensor::full(&[1, 2, 2, 2], 4.0));
        let y = tape.layer_norm_channel(c, one, zero, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));

        let shift = tape.constant(t(&[2], &[0.3, -0.2]));
        let zs = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[1, 2, 1, 2], &[1.0, 5.0, -2.0, 7.0]));
        let y = tape.layer_norm_channel(x, zs, shift, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.3, 0.3, -0.2, -0.2]);
    }

    #[test]
    fn gap_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[0.0, 2.0, 4.0, 6.0]));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn l1_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(t(&[2], &[1.0, 2.0]));
        let q = tape.constant(t(&[2], &[0.0, 4.0]));
        let l = tape.l1_loss(p, q).unwrap();
        assert_eq!(tape.value(l).data(), &[1.5]);
        let same = tape.l1_loss(p, p).unwrap();
        assert_eq!(tape.value(same).data(), &[0.0]);
        let r = tape.constant(t(&[2], &[0.5, 1.5]));
        let half = tape.l1_loss(p, r).unwrap();
        assert_eq!(tape.value(half).data(), &[0.5]);
    }
}
