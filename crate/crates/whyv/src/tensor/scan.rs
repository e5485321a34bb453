//! Fused gated-recurrent scan over one axis of a (batch, length, channels)
//! tensor, with a hand-derived backward pass.
//!
//! Recording the cell step by step on the tape would add thousands of tiny
//! nodes per sequence; fusing the whole scan into one op keeps the tape
//! small, lets the input projection run as a single GEMM, and lets the
//! recurrence work on step-major buffers where every per-step block is
//! contiguous. The gradient of this op is covered by the same
//! finite-difference sweep as the primitive ops.

use std::rc::Rc;

use super::fastmath::{sigmoid_approx, tanh_approx};
use super::graph::{Backward, Graph, Value};
use super::ops::dgemm_rm;
use super::{uninit_vec, Result, Tensor, TensorError};

/// (B, L, X) -> (L, B, X) block copy.
fn to_step_major(src: &[f64], bsz: usize, len: usize, width: usize, dst: &mut [f64]) {
    for bi in 0..bsz {
        for l in 0..len {
            let s = (bi * len + l) * width;
            let d = (l * bsz + bi) * width;
            dst[d..d + width].copy_from_slice(&src[s..s + width]);
        }
    }
}

/// (L, B, X) -> (B, L, X) block copy.
fn to_batch_major(src: &[f64], bsz: usize, len: usize, width: usize, dst: &mut [f64]) {
    for l in 0..len {
        for bi in 0..bsz {
            let s = (l * bsz + bi) * width;
            let d = (bi * len + l) * width;
            dst[d..d + width].copy_from_slice(&src[s..s + width]);
        }
    }
}

/// Gated recurrent scan.
///
/// * `x`: input `(B, L, C)`; the scan runs along `L`, batched over `B`.
/// * `w_x`: input projection `(C, 3H)`, gate order `[update | reset | candidate]`.
/// * `w_h`: hidden projection `(H, 3H)`.
/// * `b`: bias `(3H)` applied to the input-side preactivations.
/// * `reverse`: scan from the last position toward the first.
///
/// Returns the hidden state at every position, `(B, L, H)`, indexed in the
/// original order regardless of direction.
pub fn gru_scan(
    g: &Graph,
    x: &Value,
    w_x: &Value,
    w_h: &Value,
    b: &Value,
    reverse: bool,
) -> Result<Value> {
    let xs = x.shape();
    if xs.len() != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "gru_scan",
            detail: format!("input must be (B, L, C), got {xs:?}"),
        });
    }
    let (bsz, len, c) = (xs[0], xs[1], xs[2]);
    let ws = w_x.shape();
    if ws.len() != 2 || ws[0] != c || ws[1] % 3 != 0 {
        return Err(TensorError::ShapeMismatch {
            op: "gru_scan",
            detail: format!("w_x must be (C, 3H), got {ws:?} for C={c}"),
        });
    }
    let h = ws[1] / 3;
    if w_h.shape() != [h, 3 * h] || b.shape() != [3 * h] {
        return Err(TensorError::ShapeMismatch {
            op: "gru_scan",
            detail: format!(
                "w_h {:?} / b {:?} inconsistent with H={h}",
                w_h.shape(),
                b.shape()
            ),
        });
    }

    let tracked = g.is_recording()
        && (x.is_tracked() || w_x.is_tracked() || w_h.is_tracked() || b.is_tracked());
    let rows = bsz * len;

    // Step-major input, then one GEMM for every position's input projection.
    let mut x_sm = uninit_vec(rows * c);
    to_step_major(x.data(), bsz, len, c, &mut x_sm);
    let mut xg = uninit_vec(rows * 3 * h);
    dgemm_rm(rows, c, 3 * h, &x_sm, c as isize, 1, w_x.data(), (3 * h) as isize, 1, &mut xg);
    let bias = b.data();
    for row in xg.chunks_mut(3 * h) {
        for (v, &bv) in row.iter_mut().zip(bias) {
            *v += bv;
        }
    }

    let mut out_sm = uninit_vec(rows * h);
    let mut state = vec![0.0; bsz * h];
    let mut hg = uninit_vec(bsz * 3 * h);
    // Saved gate activations, step-major like everything in the loop.
    let (mut zs, mut rs, mut ns, mut hns) = if tracked {
        (uninit_vec(rows * h), uninit_vec(rows * h), uninit_vec(rows * h), uninit_vec(rows * h))
    } else {
        (Vec::new(), Vec::new(), Vec::new(), Vec::new())
    };
    let mut scratch = vec![0.0; 4 * h];

    let whd = w_h.data();
    for s in 0..len {
        // In step-major order the scan direction only affects which original
        // position each step corresponds to; blocks are always contiguous.
        let t = if reverse { len - 1 - s } else { s };
        dgemm_rm(bsz, h, 3 * h, &state, h as isize, 1, whd, (3 * h) as isize, 1, &mut hg);
        let xg_block = &xg[t * bsz * 3 * h..(t + 1) * bsz * 3 * h];
        let out_block = &mut out_sm[t * bsz * h..(t + 1) * bsz * h];
        if tracked {
            let zb = &mut zs[t * bsz * h..(t + 1) * bsz * h];
            let rb = &mut rs[t * bsz * h..(t + 1) * bsz * h];
            let nb = &mut ns[t * bsz * h..(t + 1) * bsz * h];
            let hnb = &mut hns[t * bsz * h..(t + 1) * bsz * h];
            for bi in 0..bsz {
                cell_pass(
                    &xg_block[bi * 3 * h..(bi + 1) * 3 * h],
                    &hg[bi * 3 * h..(bi + 1) * 3 * h],
                    &mut state[bi * h..(bi + 1) * h],
                    &mut out_block[bi * h..(bi + 1) * h],
                    &mut zb[bi * h..(bi + 1) * h],
                    &mut rb[bi * h..(bi + 1) * h],
                    &mut nb[bi * h..(bi + 1) * h],
                    &mut hnb[bi * h..(bi + 1) * h],
                    h,
                );
            }
        } else {
            for bi in 0..bsz {
                let (zb, rest) = scratch.split_at_mut(h);
                let (rb, rest) = rest.split_at_mut(h);
                let (nb, hnb) = rest.split_at_mut(h);
                cell_pass(
                    &xg_block[bi * 3 * h..(bi + 1) * 3 * h],
                    &hg[bi * 3 * h..(bi + 1) * 3 * h],
                    &mut state[bi * h..(bi + 1) * h],
                    &mut out_block[bi * h..(bi + 1) * h],
                    zb,
                    rb,
                    nb,
                    hnb,
                    h,
                );
            }
        }
    }

    let mut out = uninit_vec(rows * h);
    to_batch_major(&out_sm, bsz, len, h, &mut out);
    let out = Tensor::from_parts(vec![bsz, len, h], out);
    let (rwx, rwh) = (w_x.rc(), w_h.rc());
    g.push("gru_scan", out, &[x, w_x, w_h, b], move |_| {
        Box::new(GruScanBack {
            x_sm,
            w_x: rwx,
            w_h: rwh,
            out_sm,
            z: zs,
            r: rs,
            n: ns,
            hn: hns,
            bsz,
            len,
            c,
            h,
            reverse,
        })
    })
}

/// One step of the cell for one batch row, written as zipped passes so
/// every loop vectorizes.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn cell_pass(
    xg_row: &[f64],
    hg_row: &[f64],
    state_row: &mut [f64],
    out_row: &mut [f64],
    z_dst: &mut [f64],
    r_dst: &mut [f64],
    n_dst: &mut [f64],
    hn_dst: &mut [f64],
    h: usize,
) {
    let (xz, xrest) = xg_row.split_at(h);
    let (xr, xn) = xrest.split_at(h);
    let (hz, hrest) = hg_row.split_at(h);
    let (hr, hn) = hrest.split_at(h);
    // one fused pass: loop setup dominates at h-sized rows, so everything
    // happens in a single zipped walk
    let it = z_dst
        .iter_mut()
        .zip(r_dst.iter_mut())
        .zip(n_dst.iter_mut())
        .zip(hn_dst.iter_mut())
        .zip(out_row.iter_mut())
        .zip(state_row.iter_mut())
        .zip(xz)
        .zip(xr)
        .zip(xn)
        .zip(hz)
        .zip(hr)
        .zip(hn);
    for (((((((((((zd, rd), nd), hnd), o), s), &az), &ar), &an), &bz), &br), &bn) in it {
        let z = sigmoid_approx(az + bz);
        let r = sigmoid_approx(ar + br);
        let n = tanh_approx(an + r * bn);
        let next = (1.0 - z) * n + z * *s;
        *zd = z;
        *rd = r;
        *nd = n;
        *hnd = bn;
        *o = next;
        *s = next;
    }
}

struct GruScanBack {
    /// Step-major copy of the input, reused for the weight gradient GEMM.
    x_sm: Vec<f64>,
    w_x: Rc<Tensor>,
    w_h: Rc<Tensor>,
    /// Step-major hidden states.
    out_sm: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    hn: Vec<f64>,
    bsz: usize,
    len: usize,
    c: usize,
    h: usize,
    reverse: bool,
}

impl Backward for GruScanBack {
    fn backward(&self, grad: &Tensor) -> Result<Vec<Tensor>> {
        let (bsz, len, c, h) = (self.bsz, self.len, self.c, self.h);
        let rows = bsz * len;
        let whd = self.w_h.data();

        let mut g_sm = uninit_vec(rows * h);
        to_step_major(grad.data(), bsz, len, h, &mut g_sm);

        // Per-position preactivation gradients, both the x side [dz, dr, dn]
        // and the h side [dz, dr, d(U_n h)], step-major.
        let mut dxg = uninit_vec(rows * 3 * h);
        let mut dhg = uninit_vec(rows * 3 * h);
        let mut dh = vec![0.0; bsz * h];
        let mut dstep = vec![0.0; bsz * h];
        let mut dt_buf = vec![0.0; bsz * h];

        for s in (0..len).rev() {
            let t = if self.reverse { len - 1 - s } else { s };
            let base = t * bsz * h;
            let gbase = t * bsz * 3 * h;
            let z_blk = &self.z[base..base + bsz * h];
            let r_blk = &self.r[base..base + bsz * h];
            let n_blk = &self.n[base..base + bsz * h];
            let hn_blk = &self.hn[base..base + bsz * h];
            let g_blk = &g_sm[base..base + bsz * h];
            let prev_blk: Option<&[f64]> = if s == 0 {
                None
            } else {
                let tp = if self.reverse { t + 1 } else { t - 1 };
                Some(&self.out_sm[tp * bsz * h..(tp + 1) * bsz * h])
            };

            // dt = upstream + carried; dstep = dt * z
            for (((dt, &a), &b), (ds, &z)) in dt_buf
                .iter_mut()
                .zip(&dh)
                .zip(g_blk)
                .zip(dstep.iter_mut().zip(z_blk))
            {
                *dt = a + b;
                *ds = *dt * z;
            }
            // gate gradients: one fused pass per row into the dxg/dhg blocks
            for bi in 0..bsz {
                let grow = gbase + bi * 3 * h;
                let (dxz, dxrest) = dxg[grow..grow + 3 * h].split_at_mut(h);
                let (dxr, dxn) = dxrest.split_at_mut(h);
                let (dhz, dhrest) = dhg[grow..grow + 3 * h].split_at_mut(h);
                let (dhr, dhn_out) = dhrest.split_at_mut(h);
                let rrange = bi * h..(bi + 1) * h;
                let dt_row = &dt_buf[rrange.clone()];
                let z_row = &z_blk[rrange.clone()];
                let r_row = &r_blk[rrange.clone()];
                let n_row = &n_blk[rrange.clone()];
                let hn_row = &hn_blk[rrange.clone()];
                let prev_row = prev_blk.map(|p| &p[rrange.clone()]);

                let it = dxz
                    .iter_mut()
                    .zip(dxr.iter_mut())
                    .zip(dxn.iter_mut())
                    .zip(dhn_out.iter_mut())
                    .zip(dt_row)
                    .zip(z_row)
                    .zip(r_row)
                    .zip(n_row)
                    .zip(hn_row);
                match prev_row {
                    Some(prev) => {
                        for (((((((((dz, dr), da), dhn), &dt), &z), &r), &n), &hn), &pv) in
                            it.zip(prev)
                        {
                            let dan = dt * (1.0 - z) * (1.0 - n * n);
                            *da = dan;
                            *dz = dt * (pv - n) * z * (1.0 - z);
                            *dhn = dan * r;
                            *dr = dan * hn * r * (1.0 - r);
                        }
                    }
                    None => {
                        for ((((((((dz, dr), da), dhn), &dt), &z), &r), &n), &hn) in it {
                            let dan = dt * (1.0 - z) * (1.0 - n * n);
                            *da = dan;
                            *dz = dt * (0.0 - n) * z * (1.0 - z);
                            *dhn = dan * r;
                            *dr = dan * hn * r * (1.0 - r);
                        }
                    }
                }
                dhz.copy_from_slice(dxz);
                dhr.copy_from_slice(dxr);
            }
            // dh_prev += dhg_t . w_h^T on top of the carried dt * z term.
            unsafe {
                matrixmultiply::dgemm(
                    bsz,
                    3 * h,
                    h,
                    1.0,
                    dhg.as_ptr().add(gbase),
                    (3 * h) as isize,
                    1,
                    whd.as_ptr(),
                    1,
                    (3 * h) as isize,
                    1.0,
                    dstep.as_mut_ptr(),
                    h as isize,
                    1,
                );
            }
            std::mem::swap(&mut dh, &mut dstep);
        }

        // dx = dxg . w_x^T (step-major), then back to batch-major.
        let mut dx_sm = uninit_vec(rows * c);
        dgemm_rm(rows, 3 * h, c, &dxg, (3 * h) as isize, 1, self.w_x.data(), 1, (3 * h) as isize, &mut dx_sm);
        let mut dx = uninit_vec(rows * c);
        to_batch_major(&dx_sm, self.bsz, self.len, c, &mut dx);

        // dw_x = x^T . dxg, both step-major.
        let mut dwx = vec![0.0; c * 3 * h];
        dgemm_rm(c, rows, 3 * h, &self.x_sm, 1, c as isize, &dxg, (3 * h) as isize, 1, &mut dwx);

        // dw_h = h_prev^T . dhg with h_prev the state before each step:
        // in scan order that is out_sm shifted by one step block.
        let mut h_prev = uninit_vec(rows * h);
        {
            let t0 = if self.reverse { len - 1 } else { 0 };
            h_prev[t0 * bsz * h..(t0 + 1) * bsz * h].fill(0.0);
        }
        for s in 1..len {
            let t = if self.reverse { len - 1 - s } else { s };
            let tp = if self.reverse { t + 1 } else { t - 1 };
            let dst = t * bsz * h;
            let src = tp * bsz * h;
            h_prev[dst..dst + bsz * h].copy_from_slice(&self.out_sm[src..src + bsz * h]);
        }
        let mut dwh = vec![0.0; h * 3 * h];
        dgemm_rm(h, rows, 3 * h, &h_prev, 1, h as isize, &dhg, (3 * h) as isize, 1, &mut dwh);

        // db = column sums of dxg
        let mut db = vec![0.0; 3 * h];
        for row in dxg.chunks(3 * h) {
            for (acc, &v) in db.iter_mut().zip(row) {
                *acc += v;
            }
        }

        Ok(vec![
            Tensor::from_parts(vec![bsz, len, c], dx),
            Tensor::from_parts(vec![c, 3 * h], dwx),
            Tensor::from_parts(vec![h, 3 * h], dwh),
            Tensor::from_parts(vec![3 * h], db),
        ])
    }

    fn name(&self) -> &'static str {
        "gru_scan"
    }
}

/// One cell step on plain slices; the oracle used by tests to pin down the
/// scan semantics at L = 1.
pub fn gru_cell_reference(x: &[f64], state: &[f64], w_x: &[f64], w_h: &[f64], b: &[f64]) -> Vec<f64> {
    let c = x.len();
    let h = state.len();
    let mut out = vec![0.0; h];
    for j in 0..h {
        let mut az = b[j];
        let mut ar = b[h + j];
        let mut an_x = b[2 * h + j];
        for (i, &xv) in x.iter().enumerate().take(c) {
            az += xv * w_x[i * 3 * h + j];
            ar += xv * w_x[i * 3 * h + h + j];
            an_x += xv * w_x[i * 3 * h + 2 * h + j];
        }
        let mut hz = 0.0;
        let mut hr = 0.0;
        let mut hn = 0.0;
        for (i, &hv) in state.iter().enumerate().take(h) {
            hz += hv * w_h[i * 3 * h + j];
            hr += hv * w_h[i * 3 * h + h + j];
            hn += hv * w_h[i * 3 * h + 2 * h + j];
        }
        let z = sigmoid_approx(az + hz);
        let r = sigmoid_approx(ar + hr);
        let n = tanh_approx(an_x + r * hn);
        out[j] = (1.0 - z) * n + z * state[j];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn single_step_matches_reference_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (c, h) = (3, 4);
        let x = rand_tensor(&mut rng, &[1, 1, c], 1.0);
        let wx = rand_tensor(&mut rng, &[c, 3 * h], 0.8);
        let wh = rand_tensor(&mut rng, &[h, 3 * h], 0.8);
        let b = rand_tensor(&mut rng, &[3 * h], 0.5);
        let g = Graph::inference();
        let out = gru_scan(
            &g,
            &g.constant(x.clone()),
            &g.constant(wx.clone()),
            &g.constant(wh.clone()),
            &g.constant(b.clone()),
            false,
        )
        .unwrap();
        let oracle = gru_cell_reference(x.data(), &vec![0.0; h], wx.data(), wh.data(), b.data());
        for (a, b) in out.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn reverse_scan_mirrors_forward_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (bsz, len, c, h) = (2, 5, 3, 4);
        let x = rand_tensor(&mut rng, &[bsz, len, c], 1.0);
        let wx = rand_tensor(&mut rng, &[c, 3 * h], 0.6);
        let wh = rand_tensor(&mut rng, &[h, 3 * h], 0.6);
        let b = rand_tensor(&mut rng, &[3 * h], 0.3);

        // Reversing the input sequence and the output of a forward scan
        // must equal a reverse scan on the original input.
        let mut flipped = vec![0.0; x.numel()];
        for bi in 0..bsz {
            for t in 0..len {
                let src = (bi * len + t) * c;
                let dst = (bi * len + (len - 1 - t)) * c;
                flipped[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
            }
        }
        let g = Graph::inference();
        let rev = gru_scan(
            &g,
            &g.constant(x.clone()),
            &g.constant(wx.clone()),
            &g.constant(wh.clone()),
            &g.constant(b.clone()),
            true,
        )
        .unwrap();
        let fwd_on_flipped = gru_scan(
            &g,
            &g.constant(Tensor::new(vec![bsz, len, c], flipped).unwrap()),
            &g.constant(wx),
            &g.constant(wh),
            &g.constant(b),
            false,
        )
        .unwrap();
        for bi in 0..bsz {
            for t in 0..len {
                let a = &rev.data()[(bi * len + t) * h..][..h];
                let b = &fwd_on_flipped.data()[(bi * len + (len - 1 - t)) * h..][..h];
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn scan_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (bsz, len, c, h) = (2, 4, 3, 3);
        for reverse in [false, true] {
            // Check each parent separately by folding it into the probe.
            let x = rand_tensor(&mut rng, &[bsz, len, c], 1.0);
            let wx = rand_tensor(&mut rng, &[c, 3 * h], 0.7);
            let wh = rand_tensor(&mut rng, &[h, 3 * h], 0.7);
            let b = rand_tensor(&mut rng, &[3 * h], 0.4);

            let err_x = crate::tensor::finite_diff_check(
                |g, v| {
                    let out = gru_scan(
                        g,
                        v,
                        &g.constant(wx.clone()),
                        &g.constant(wh.clone()),
                        &g.constant(b.clone()),
                        reverse,
                    )?;
                    g.sum_all(&out)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err_x <= 1e-6, "x grad err {err_x} (reverse={reverse})");

            let err_wh = crate::tensor::finite_diff_check(
                |g, v| {
                    let out = gru_scan(
                        g,
                        &g.constant(x.clone()),
                        &g.constant(wx.clone()),
                        v,
                        &g.constant(b.clone()),
                        reverse,
                    )?;
                    // A non-uniform readout exercises position-dependent grads.
                    let sq = g.square(&out)?;
                    g.sum_all(&sq)
                },
                &wh,
                1e-5,
            )
            .unwrap();
            assert!(err_wh <= 1e-6, "w_h grad err {err_wh} (reverse={reverse})");

            let err_wx = crate::tensor::finite_diff_check(
                |g, v| {
                    let out = gru_scan(
                        g,
                        &g.constant(x.clone()),
                        v,
                        &g.constant(wh.clone()),
                        &g.constant(b.clone()),
                        reverse,
                    )?;
                    let sq = g.square(&out)?;
                    g.sum_all(&sq)
                },
                &wx,
                1e-5,
            )
            .unwrap();
            assert!(err_wx <= 1e-6, "w_x grad err {err_wx} (reverse={reverse})");

            let err_b = crate::tensor::finite_diff_check(
                |g, v| {
                    let out = gru_scan(
                        g,
                        &g.constant(x.clone()),
                        &g.constant(wx.clone()),
                        &g.constant(wh.clone()),
                        v,
                        reverse,
                    )?;
                    g.sum_all(&out)
                },
                &b,
                1e-5,
            )
            .unwrap();
            assert!(err_b <= 1e-6, "b grad err {err_b} (reverse={reverse})");
        }
    }
}
