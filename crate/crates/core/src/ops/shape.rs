//! Data movement and reduction ops: reshape, row gather/scatter, tiled
//! broadcast, and sums.
//!
//! `gather_rows` is deliberately general. Padding, cropping, cyclic shifts,
//! window partition/reverse, im2col, nearest-neighbor upsampling, and axis
//! permutations are all "copy row `map[r]` of the input into row `r` of the
//! output", with `-1` marking rows that read as zero. Callers precompute the
//! map once and reuse it across layers, so the op itself stays a flat copy.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::parallel;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    /// Same data, new shape. Lengths must agree.
    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let (out, old_shape) = {
            let v = self.value(x);
            let old_shape = v.shape().to_vec();
            (v.clone().reshaped(shape)?, old_shape)
        };
        Ok(self.push(
            out,
            vec![x],
            Box::new(move |args| {
                vec![Some(
                    args.grad
                        .clone()
                        .reshaped(&old_shape)
                        .expect("reshape grad length matches by construction"),
                )]
            }),
        ))
    }

    /// Row gather: the input is viewed as consecutive rows of `unit` elements
    /// and output row `r` is a copy of input row `map[r]`, or zeros where
    /// `map[r] == -1`. `out_shape` must hold exactly `map.len() * unit`
    /// elements. The map is shared by `Rc` so plans can reuse one allocation
    /// across every layer and training step.
    pub fn gather_rows(
        &self,
        x: Var,
        unit: usize,
        map: Rc<Vec<i64>>,
        out_shape: &[usize],
    ) -> Result<Var> {
        self.check(x)?;
        if unit == 0 {
            return Err(Error::arg("gather_rows unit must be positive"));
        }
        let out = {
            let v = self.value(x);
            if v.len() % unit != 0 {
                return Err(Error::shape(format!(
                    "gather_rows: input length {} not divisible by unit {unit}",
                    v.len()
                )));
            }
            let in_rows = v.len() / unit;
            let out_len: usize = out_shape.iter().product();
            if out_len != map.len() * unit {
                return Err(Error::shape(format!(
                    "gather_rows: out shape {:?} holds {out_len} elements, map wants {}",
                    out_shape,
                    map.len() * unit
                )));
            }
            if let Some(&bad) = map.iter().find(|&&m| m >= in_rows as i64 || m < -1) {
                return Err(Error::arg(format!(
                    "gather_rows: map entry {bad} outside [-1, {})",
                    in_rows
                )));
            }
            let mut out = Tensor::zeros(out_shape);
            let src = v.data();
            let rows_per_block = (4096 / unit).max(1);
            let map_ref: &[i64] = &map;
            parallel::for_each_chunk_mut(out.data_mut(), rows_per_block * unit, |b, block| {
                let row0 = b * rows_per_block;
                for (i, orow) in block.chunks_mut(unit).enumerate() {
                    let m = map_ref[row0 + i];
                    if m >= 0 {
                        let s = m as usize * unit;
                        orow.copy_from_slice(&src[s..s + unit]);
                    }
                }
            });
            out
        };
        let map_bwd = Rc::clone(&map);
        Ok(self.push(
            out,
            vec![x],
            Box::new(move |args| {
                // Scatter-add runs sequentially: several output rows may pull
                // from the same input row, and a fixed order keeps gradients
                // reproducible.
                let mut dx = Tensor::zeros(args.parents[0].shape());
                let g = args.grad.data();
                let d = dx.data_mut();
                for (r, &m) in map_bwd.iter().enumerate() {
                    if m >= 0 {
                        let s = m as usize * unit;
                        let grow = &g[r * unit..(r + 1) * unit];
                        for (dst, gv) in d[s..s + unit].iter_mut().zip(grow) {
                            *dst += gv;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// `x + y` with `y` tiled across `x`: `x.len()` must be a multiple of
    /// `y.len()`. Bias terms and per-window attention offsets both use this.
    pub fn add_broadcast(&self, x: Var, y: Var) -> Result<Var> {
        self.check(x)?;
        self.check(y)?;
        let (out, ylen) = {
            let xv = self.value(x);
            let yv = self.value(y);
            if yv.is_empty() || xv.len() % yv.len() != 0 {
                return Err(Error::shape(format!(
                    "add_broadcast: cannot tile {:?} across {:?}",
                    yv.shape(),
                    xv.shape()
                )));
            }
            let mut out = xv.clone();
            let yd = yv.data();
            parallel::for_each_chunk_mut(out.data_mut(), yd.len(), |_, chunk| {
                for (o, a) in chunk.iter_mut().zip(yd) {
                    *o += a;
                }
            });
            (out, yv.len())
        };
        Ok(self.push(
            out,
            vec![x, y],
            Box::new(move |args| {
                let dx = args.needs[0].then(|| args.grad.clone());
                let dy = args.needs[1].then(|| {
                    let mut dy = Tensor::zeros(args.parents[1].shape());
                    for chunk in args.grad.data().chunks_exact(ylen) {
                        for (d, g) in dy.data_mut().iter_mut().zip(chunk) {
                            *d += g;
                        }
                    }
                    dy
                });
                vec![dx, dy]
            }),
        ))
    }

    /// Scales each `unit`-length row of `x` by the matching entry of `s`
    /// (`x.len() == s.len() * unit`). This is how per-pixel scalar weights
    /// multiply whole feature fibers.
    pub fn mul_rows(&self, x: Var, s: Var, unit: usize) -> Result<Var> {
        self.check(x)?;
        self.check(s)?;
        let out = {
            let xv = self.value(x);
            let sv = self.value(s);
            if unit == 0 || xv.len() != sv.len() * unit {
                return Err(Error::shape(format!(
                    "mul_rows: {:?} is not {:?} rows of {unit}",
                    xv.shape(),
                    sv.shape()
                )));
            }
            let mut out = xv.clone();
            let sd = sv.data();
            parallel::for_each_chunk_mut(out.data_mut(), unit, |r, row| {
                let w = sd[r];
                for o in row {
                    *o *= w;
                }
            });
            out
        };
        Ok(self.push(
            out,
            vec![x, s],
            Box::new(move |args| {
                let xv = args.parents[0];
                let sv = args.parents[1];
                let g = args.grad.data();
                let dx = args.needs[0].then(|| {
                    let mut dx = Tensor::zeros(xv.shape());
                    let sd = sv.data();
                    parallel::for_each_chunk_mut(dx.data_mut(), unit, |r, row| {
                        let w = sd[r];
                        for (d, gv) in row.iter_mut().zip(&g[r * unit..(r + 1) * unit]) {
                            *d = gv * w;
                        }
                    });
                    dx
                });
                let ds = args.needs[1].then(|| {
                    let mut ds = Tensor::zeros(sv.shape());
                    let xd = xv.data();
                    parallel::for_each_chunk_mut(ds.data_mut(), 1, |r, cell| {
                        let mut acc = 0.0f32;
                        for i in r * unit..(r + 1) * unit {
                            acc += g[i] * xd[i];
                        }
                        cell[0] = acc;
                    });
                    ds
                });
                vec![dx, ds]
            }),
        ))
    }

    /// Sum of every element, returned as a `[1]` tensor. Accumulates in input
    /// order so repeated runs agree bit for bit.
    pub fn sum_all(&self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = {
            let v = self.value(x);
            let mut acc = 0.0f32;
            for &e in v.data() {
                acc += e;
            }
            Tensor::new(vec![1], vec![acc])?
        };
        Ok(self.push(
            out,
            vec![x],
            Box::new(move |args| {
                let g = args.grad.data()[0];
                vec![Some(Tensor::full(args.parents[0].shape(), g))]
            }),
        ))
    }

    /// Sums over the last axis; a rank-1 input collapses to `[1]`.
    pub fn sum_last(&self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (out, last) = {
            let v = self.value(x);
            let last = *v.shape().last().ok_or_else(|| {
                Error::shape("sum_last on rank-0 tensor")
            })?;
            let out_shape: Vec<usize> = if v.rank() == 1 {
                vec![1]
            } else {
                v.shape()[..v.rank() - 1].to_vec()
            };
            let mut out = Tensor::zeros(&out_shape);
            let src = v.data();
            parallel::for_each_chunk_mut(out.data_mut(), 1, |r, cell| {
                let mut acc = 0.0f32;
                for &e in &src[r * last..(r + 1) * last] {
                    acc += e;
                }
                cell[0] = acc;
            });
            (out, last)
        };
        Ok(self.push(
            out,
            vec![x],
            Box::new(move |args| {
                let mut dx = Tensor::zeros(args.parents[0].shape());
                let g = args.grad.data();
                parallel::for_each_chunk_mut(dx.data_mut(), last, |r, row| {
                    row.fill(g[r]);
                });
                vec![Some(dx)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reshape_round_trips_gradients() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], (0..6).map(|i| i as f32).collect()).unwrap());
        let y = tape.reshape(x, &[3, 2]).unwrap();
        assert_eq!(tape.value(y).shape(), &[3, 2]);
        let s = tape.sum_all(y).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().shape(), &[2, 3]);
        assert!(grads.wrt(x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn gather_copies_rows_and_zero_fills() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let map = Rc::new(vec![2i64, -1, 0]);
        let y = tape.gather_rows(x, 2, map, &[3, 2]).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 6.0, 0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn gather_gradient_accumulates_duplicate_rows() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let map = Rc::new(vec![0i64, 0, 1, -1]);
        let y = tape.gather_rows(x, 1, map, &[4]).unwrap();
        let s = tape.sum_all(y).unwrap();
        let grads = tape.backward(s).unwrap();
        // Row 0 was read twice, row 1 once, and the -1 row contributes nothing.
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 1.0]);
    }

    #[test]
    fn gather_rejects_out_of_range_map() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(tape
            .gather_rows(x, 2, Rc::new(vec![2i64]), &[1, 2])
            .is_err());
        assert!(tape
            .gather_rows(x, 2, Rc::new(vec![-2i64]), &[1, 2])
            .is_err());
    }

    #[test]
    fn broadcast_tiles_and_folds_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]));
        let y = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let z = tape.add_broadcast(x, y).unwrap();
        assert_eq!(tape.value(z).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let s = tape.sum_all(z).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(y).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn broadcast_rejects_non_divisible() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[5]));
        let y = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.add_broadcast(x, y).is_err());
    }

    #[test]
    fn mul_rows_scales_fibers() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let s = tape.leaf(Tensor::new(vec![2], vec![10.0, 0.5]).unwrap());
        let y = tape.mul_rows(x, s, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[10.0, 20.0, 1.5, 2.0]);
        let t = tape.sum_all(y).unwrap();
        let grads = tape.backward(t).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[10.0, 10.0, 0.5, 0.5]);
        assert_eq!(grads.wrt(s).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn sum_last_reduces_trailing_axis() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = tape.sum_last(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[2]);
        assert_eq!(tape.value(y).data(), &[6.0, 15.0]);

        let v = tape.leaf(Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap());
        let sv = tape.sum_last(v).unwrap();
        assert_eq!(tape.value(sv).shape(), &[1]);
    }
}
