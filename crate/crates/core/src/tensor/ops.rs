//! Elementwise arithmetic, reshaping, concatenation and matrix products.

use super::gemm::{matmul_into, MatRef};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(
            shape,
            out,
            &[a, b],
            Box::new(|g, m| vec![m[0].then(|| g.to_vec()), m[1].then(|| g.to_vec())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(
            shape,
            out,
            &[a, b],
            Box::new(|g, m| {
                vec![
                    m[0].then(|| g.to_vec()),
                    m[1].then(|| g.iter().map(|v| -v).collect()),
                ]
            }),
        ))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ad, bd) = (self.shared(a), self.shared(b));
        let out: Vec<f64> = ad.iter().zip(bd.iter()).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(
            shape,
            out,
            &[a, b],
            Box::new(move |g, m| {
                vec![
                    m[0].then(|| g.iter().zip(bd.iter()).map(|(g, y)| g * y).collect()),
                    m[1].then(|| g.iter().zip(ad.iter()).map(|(g, x)| g * x).collect()),
                ]
            }),
        ))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push_op(
            shape,
            out,
            &[a],
            Box::new(move |g, _| vec![Some(g.iter().map(|v| v * c).collect())]),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        Ok(self.push_view(shape.to_vec(), a))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("transpose", format!("rank {}", shape.len())));
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let out = transpose_last2(self.data(a), r, c);
        let mut new_shape = shape;
        let n = new_shape.len();
        new_shape.swap(n - 2, n - 1);
        Ok(self.push_op(
            new_shape,
            out,
            &[a],
            Box::new(move |g, _| vec![Some(transpose_last2(g, c, r))]),
        ))
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *parts
                    .first()
                    .ok_or_else(|| Error::shape("concat", "no inputs"))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} for rank {}", first.len()),
            ));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?}")));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &sz) in parts.iter().zip(&sizes) {
                let d = self.data(p);
                out.extend_from_slice(&d[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push_op(
            shape,
            out,
            parts,
            Box::new(move |g, m| {
                let mut offset = 0;
                sizes
                    .iter()
                    .zip(m)
                    .map(|(&sz, &need)| {
                        let start = offset;
                        offset += sz;
                        need.then(|| {
                            let mut gp = Vec::with_capacity(outer * sz * inner);
                            for o in 0..outer {
                                let base = (o * total + start) * inner;
                                gp.extend_from_slice(&g[base..base + sz * inner]);
                            }
                            gp
                        })
                    })
                    .collect()
            }),
        ))
    }

    /// Channels `[start, start+len)` of a BCHW map.
    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let [b, c, h, w] = super::dims4(self.shape(a), "slice_channels")?;
        if start + len > c {
            return Err(Error::shape(
                "slice_channels",
                format!("[{start}, {}) of {c} channels", start + len),
            ));
        }
        let hw = h * w;
        let d = self.data(a);
        let mut out = Vec::with_capacity(b * len * hw);
        for bi in 0..b {
            let base = (bi * c + start) * hw;
            out.extend_from_slice(&d[base..base + len * hw]);
        }
        Ok(self.push_op(
            vec![b, len, h, w],
            out,
            &[a],
            Box::new(move |g, _| {
                let mut ga = vec![0.0; b * c * hw];
                for bi in 0..b {
                    let base = (bi * c + start) * hw;
                    ga[base..base + len * hw]
                        .copy_from_slice(&g[bi * len * hw..(bi + 1) * len * hw]);
                }
                vec![Some(ga)]
            }),
        ))
    }

    /// Batched matrix product over matching leading dims:
    /// `[.., m, k] · [.., k, n] -> [.., m, n]`, with optional transposes of
    /// either operand's last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let r = sa.len();
        let (ar, ac) = (sa[r - 2], sa[r - 1]);
        let (br, bc) = (sb[r - 2], sb[r - 1]);
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{sa:?} x {sb:?} (inner {k} vs {k2})"),
            ));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let (ad, bd) = (self.shared(a), self.shared(b));
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            matmul_into(
                view(&ad[i * ar * ac..], ar, ac, trans_a),
                view(&bd[i * br * bc..], br, bc, trans_b),
                &mut out[i * m * n..],
                false,
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        Ok(self.push_op(
            shape,
            out,
            &[a, b],
            Box::new(move |g, mask| {
                let ga = mask[0].then(|| {
                    // dA = dC·Bᵀ, stored in A's own layout
                    let mut ga = vec![0.0; batch * ar * ac];
                    for i in 0..batch {
                        let gc = MatRef::new(&g[i * m * n..], m, n);
                        let bv = view(&bd[i * br * bc..], br, bc, trans_b);
                        let dst = &mut ga[i * ar * ac..];
                        if trans_a {
                            matmul_into(bv, gc.t(), dst, false);
                        } else {
                            matmul_into(gc, bv.t(), dst, false);
                        }
                    }
                    ga
                });
                let gb = mask[1].then(|| {
                    // dB = Aᵀ·dC
                    let mut gb = vec![0.0; batch * br * bc];
                    for i in 0..batch {
                        let gc = MatRef::new(&g[i * m * n..], m, n);
                        let av = view(&ad[i * ar * ac..], ar, ac, trans_a);
                        let dst = &mut gb[i * br * bc..];
                        if trans_b {
                            matmul_into(gc.t(), av, dst, false);
                        } else {
                            matmul_into(av.t(), gc, dst, false);
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Dense layer on `[B, in]` rows: `x·Wᵀ + bias`, weight `[out, in]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul_t(x, weight, false, true)?;
        match bias {
            None => Ok(y),
            Some(b) => self.add_row_bias(y, b),
        }
    }

    /// Adds a `[n]` vector to every row of a `[m, n]` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().unwrap_or(&0);
        if sx.len() != 2 || self.shape(bias) != [n] {
            return Err(Error::shape(
                "add_row_bias",
                format!("{sx:?} + {:?}", self.shape(bias)),
            ));
        }
        let bd = self.data(bias).to_vec();
        let out: Vec<f64> = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(&bd).map(|(a, b)| a + b))
            .collect();
        Ok(self.push_op(
            sx,
            out,
            &[x, bias],
            Box::new(move |g, m| {
                let gb = m[1].then(|| {
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    gb
                });
                vec![m[0].then(|| g.to_vec()), gb]
            }),
        ))
    }

    /// Divides every slice along axis 1 by the matching entry of `s`.
    pub fn div_axis1(&mut self, x: Var, s: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || self.shape(s) != [sx[1]] {
            return Err(Error::shape(
                "div_axis1",
                format!("{sx:?} / {:?}", self.shape(s)),
            ));
        }
        let (outer, mid) = (sx[0], sx[1]);
        let inner: usize = sx[2..].iter().product();
        let (xd, sd) = (self.shared(x), self.shared(s));
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for j in 0..mid {
                let base = (o * mid + j) * inner;
                let inv = 1.0 / sd[j];
                for i in base..base + inner {
                    out[i] = xd[i] * inv;
                }
            }
        }
        Ok(self.push_op(
            sx,
            out,
            &[x, s],
            Box::new(move |g, m| {
                let gx = m[0].then(|| {
                    let mut gx = vec![0.0; g.len()];
                    for o in 0..outer {
                        for j in 0..mid {
                            let base = (o * mid + j) * inner;
                            let inv = 1.0 / sd[j];
                            for i in base..base + inner {
                                gx[i] = g[i] * inv;
                            }
                        }
                    }
                    gx
                });
                let gs = m[1].then(|| {
                    // d(x/s)/ds = -x/s²
                    let mut gs = vec![0.0; mid];
                    for o in 0..outer {
                        for j in 0..mid {
                            let base = (o * mid + j) * inner;
                            let dot: f64 = (base..base + inner).map(|i| g[i] * xd[i]).sum();
                            gs[j] -= dot / (sd[j] * sd[j]);
                        }
                    }
                    gs
                });
                vec![gx, gs]
            }),
        ))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let n = self.value(a).numel();
        self.push_op(
            vec![],
            vec![s],
            &[a],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }
}

fn view(d: &[f64], rows: usize, cols: usize, t: bool) -> MatRef<'_> {
    let v = MatRef::new(d, rows, cols);
    if t {
        v.t()
    } else {
        v
    }
}

fn transpose_last2(d: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    let plane = r * c;
    if plane == 0 {
        return out;
    }
    for (src, dst) in d.chunks(plane).zip(out.chunks_mut(plane)) {
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use crate::tensor::{Tape, Tensor};

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn identities() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, -2.0, 3.5, 0.25]));
        let one = tape.constant(Tensor::ones(&[2, 2]));
        let zero = tape.constant(Tensor::zeros(&[2, 2]));
        let a = tape.mul(x, one).unwrap();
        let b = tape.add(x, zero).unwrap();
        assert_eq!(tape.value(a), tape.value(x));
        assert_eq!(tape.value(b).data(), tape.value(x).data());
    }

    #[test]
    fn matmul_identity_and_values() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let id = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.matmul(a, id).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        let sq = tape.matmul(a, a).unwrap();
        assert_eq!(tape.value(sq).data(), &[7.0, 10.0, 15.0, 22.0]);
        let at = tape.matmul_t(a, id, true, false).unwrap();
        assert_eq!(tape.value(at).data(), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn concat_channels() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2, 3, 2, 2]));
        let b = tape.constant(Tensor::zeros(&[2, 5, 2, 2]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 8, 2, 2]);
        let v = tape.value(c);
        assert_eq!(v.at4(1, 2, 1, 1), 1.0);
        assert_eq!(v.at4(1, 3, 0, 0), 0.0);
        let bad = tape.constant(Tensor::zeros(&[2, 5, 3, 2]));
        assert!(tape.concat(&[a, bad], 1).is_err());
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.matmul(a, a).is_err());
        assert!(tape.reshape(a, &[5]).is_err());
    }

    #[test]
    fn backward_of_sum_and_square() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[3], &[0.5, -1.0, 2.0]));
        let s = tape.sum(w);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let w = tape.leaf(t(&[3], &[0.5, -1.0, 2.0]));
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        let g = tape.backward(half).unwrap();
        assert_eq!(g.get(w).unwrap(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.backward(w).is_err());
    }
}
