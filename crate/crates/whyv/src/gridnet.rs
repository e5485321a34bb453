//! Dual-path feature blocks over (D, T, F) maps: a bidirectional recurrence
//! across frequency within each frame, a bidirectional recurrence across
//! time within each frequency bin, and scaled-dot-product self-attention
//! over frames. Each stage is pre-normalized over the channel axis and
//! wrapped in a residual connection, so a block with zero projection
//! weights is the identity map.

use crate::params::{Binder, Init, LayoutBuilder, ParamRef};
use crate::tensor::{gru_scan, Graph, Tensor, TensorError, Value};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;

struct GruRefs {
    w_x: ParamRef,
    w_h: ParamRef,
    b: ParamRef,
}

fn register_gru(lb: &mut LayoutBuilder, prefix: &str, c_in: usize, hidden: usize) -> GruRefs {
    let bx = 1.0 / (c_in as f64).sqrt();
    let bh = 1.0 / (hidden as f64).sqrt();
    GruRefs {
        w_x: lb.tensor(format!("{prefix}.w_x"), &[c_in, 3 * hidden], Init::Uniform(bx)),
        w_h: lb.tensor(format!("{prefix}.w_h"), &[hidden, 3 * hidden], Init::Uniform(bh)),
        b: lb.tensor(format!("{prefix}.b"), &[3 * hidden], Init::Zeros),
    }
}

/// Which axis the recurrence runs along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqAxis {
    /// Along frequency, independently per frame (the intra-frame module).
    AcrossBins,
    /// Along time, independently per frequency bin (the sub-band module).
    AcrossFrames,
}

/// Bidirectional recurrent stage: pre-norm, forward+backward scans, linear
/// projection back to D, residual add.
pub struct SeqModule {
    ln_gain: ParamRef,
    ln_bias: ParamRef,
    fwd: GruRefs,
    bwd: GruRefs,
    proj_w: ParamRef,
    proj_b: ParamRef,
    axis: SeqAxis,
    d: usize,
    hidden: usize,
}

impl SeqModule {
    pub fn register(
        lb: &mut LayoutBuilder,
        prefix: &str,
        axis: SeqAxis,
        d: usize,
        hidden: usize,
    ) -> Self {
        let ln_gain = lb.tensor(format!("{prefix}.ln.gain"), &[d], Init::Ones);
        let ln_bias = lb.tensor(format!("{prefix}.ln.bias"), &[d], Init::Zeros);
        let fwd = register_gru(lb, &format!("{prefix}.fwd"), d, hidden);
        let bwd = register_gru(lb, &format!("{prefix}.bwd"), d, hidden);
        let bp = 1.0 / (2.0 * hidden as f64).sqrt();
        let proj_w = lb.tensor(format!("{prefix}.proj.w"), &[2 * hidden, d], Init::Uniform(bp));
        let proj_b = lb.tensor(format!("{prefix}.proj.b"), &[d], Init::Zeros);
        Self { ln_gain, ln_bias, fwd, bwd, proj_w, proj_b, axis, d, hidden }
    }

    /// Single-map entry point over (D, T, F).
    pub fn forward(&self, g: &Graph, binder: &Binder, x: &Value) -> Result<Value> {
        let (_, t, f) = check_map(x, self.d)?;
        let x4 = g.reshape(x, &[1, self.d, t, f])?;
        let out = self.forward_batch(g, binder, &x4)?;
        Ok(g.reshape(&out, &[self.d, t, f])?)
    }

    /// Batched form over (B, D, T, F); items stay independent because the
    /// scan batches over the non-sequence axes.
    pub fn forward_batch(&self, g: &Graph, binder: &Binder, x4: &Value) -> Result<Value> {
        let (bsz, t, f) = check_map4(x4, self.d)?;
        // Move to (scan batch, length, channels).
        let (xp, b_extent, l_extent) = match self.axis {
            SeqAxis::AcrossBins => {
                let a = g.transpose(x4, 1, 2)?; // (B, T, D, F)
                let b = g.transpose(&a, 2, 3)?; // (B, T, F, D)
                (g.reshape(&b, &[bsz * t, f, self.d])?, bsz * t, f)
            }
            SeqAxis::AcrossFrames => {
                let a = g.transpose(x4, 1, 3)?; // (B, F, T, D)
                (g.reshape(&a, &[bsz * f, t, self.d])?, bsz * f, t)
            }
        };
        let normed = g.layer_norm(&xp, 2, LN_EPS)?;
        let scaled = g.mul(&normed, binder.get(self.ln_gain))?;
        let h_in = g.add(&scaled, binder.get(self.ln_bias))?;
        let fw = gru_scan(g, &h_in, binder.get(self.fwd.w_x), binder.get(self.fwd.w_h), binder.get(self.fwd.b), false)?;
        let bw = gru_scan(g, &h_in, binder.get(self.bwd.w_x), binder.get(self.bwd.w_h), binder.get(self.bwd.b), true)?;
        let cat = g.concat(&[&fw, &bw], 2)?;
        let rows = b_extent * l_extent;
        let flat = g.reshape(&cat, &[rows, 2 * self.hidden])?;
        let proj = g.matmul(&flat, binder.get(self.proj_w))?;
        let proj = g.add(&proj, binder.get(self.proj_b))?;
        let proj3 = g.reshape(&proj, &[b_extent, l_extent, self.d])?;
        let res = g.add(&xp, &proj3)?;
        let out = match self.axis {
            SeqAxis::AcrossBins => {
                let a = g.reshape(&res, &[bsz, t, f, self.d])?;
                let b = g.transpose(&a, 2, 3)?; // (B, T, D, F)
                g.transpose(&b, 1, 2)? // (B, D, T, F)
            }
            SeqAxis::AcrossFrames => {
                let a = g.reshape(&res, &[bsz, f, t, self.d])?;
                g.transpose(&a, 1, 3)? // (B, D, T, F)
            }
        };
        Ok(out)
    }
}

/// Self-attention over frames, on features mean-pooled across frequency.
pub struct CrossFrame {
    ln_gain: ParamRef,
    ln_bias: ParamRef,
    wq: ParamRef,
    bq: ParamRef,
    wk: ParamRef,
    bk: ParamRef,
    wv: ParamRef,
    bv: ParamRef,
    wo: ParamRef,
    bo: ParamRef,
    d: usize,
    attn_dim: usize,
    heads: usize,
}

impl CrossFrame {
    pub fn register(
        lb: &mut LayoutBuilder,
        prefix: &str,
        d: usize,
        attn_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || attn_dim % heads != 0 || d % heads != 0 {
            return Err(Error::BadConfig(format!(
                "attention heads ({heads}) must divide the attention width ({attn_dim}) and D ({d})"
            )));
        }
        let bd = 1.0 / (d as f64).sqrt();
        Ok(Self {
            ln_gain: lb.tensor(format!("{prefix}.ln.gain"), &[d], Init::Ones),
            ln_bias: lb.tensor(format!("{prefix}.ln.bias"), &[d], Init::Zeros),
            wq: lb.tensor(format!("{prefix}.wq"), &[d, attn_dim], Init::Uniform(bd)),
            bq: lb.tensor(format!("{prefix}.bq"), &[attn_dim], Init::Zeros),
            wk: lb.tensor(format!("{prefix}.wk"), &[d, attn_dim], Init::Uniform(bd)),
            bk: lb.tensor(format!("{prefix}.bk"), &[attn_dim], Init::Zeros),
            wv: lb.tensor(format!("{prefix}.wv"), &[d, d], Init::Uniform(bd)),
            bv: lb.tensor(format!("{prefix}.bv"), &[d], Init::Zeros),
            wo: lb.tensor(format!("{prefix}.wo"), &[d, d], Init::Uniform(bd)),
            bo: lb.tensor(format!("{prefix}.bo"), &[d], Init::Zeros),
            d,
            attn_dim,
            heads,
        })
    }

    /// One item's frame attention on a pooled (T, D) sheet; returns the
    /// (D, T, 1) residual branch and the per-head maps.
    fn attend_item(&self, g: &Graph, binder: &Binder, pt: &Value) -> Result<(Value, Vec<Value>)> {
        let t = pt.shape()[0];
        let normed = g.layer_norm(pt, 1, LN_EPS)?;
        let scaled = g.mul(&normed, binder.get(self.ln_gain))?;
        let h = g.add(&scaled, binder.get(self.ln_bias))?;
        let q = g.add(&g.matmul(&h, binder.get(self.wq))?, binder.get(self.bq))?;
        let k = g.add(&g.matmul(&h, binder.get(self.wk))?, binder.get(self.bk))?;
        let v = g.add(&g.matmul(&h, binder.get(self.wv))?, binder.get(self.bv))?;
        let ah = self.attn_dim / self.heads;
        let dh = self.d / self.heads;
        let scale = 1.0 / (ah as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut maps = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let qh = g.slice(&q, 1, head * ah, (head + 1) * ah)?;
            let kh = g.slice(&k, 1, head * ah, (head + 1) * ah)?;
            let vh = g.slice(&v, 1, head * dh, (head + 1) * dh)?;
            let kt = g.transpose(&kh, 0, 1)?;
            let scores = g.scale(&g.matmul(&qh, &kt)?, scale)?;
            let attn = g.softmax(&scores, 1)?;
            outs.push(g.matmul(&attn, &vh)?);
            maps.push(attn);
        }
        let refs: Vec<&Value> = outs.iter().collect();
        let cat = if refs.len() == 1 { outs[0].clone() } else { g.concat(&refs, 1)? };
        let o = g.add(&g.matmul(&cat, binder.get(self.wo))?, binder.get(self.bo))?; // (T, D)
        let ot = g.transpose(&o, 0, 1)?; // (D, T)
        let o3 = g.reshape(&ot, &[self.d, t, 1])?;
        Ok((o3, maps))
    }

    /// Single-map entry point over (D, T, F).
    pub fn forward(&self, g: &Graph, binder: &Binder, x: &Value) -> Result<Value> {
        let (_, t, f) = check_map(x, self.d)?;
        let x4 = g.reshape(x, &[1, self.d, t, f])?;
        let out = self.forward_batch(g, binder, &x4)?;
        Ok(g.reshape(&out, &[self.d, t, f])?)
    }

    /// Batched form over (B, D, T, F); attention never crosses items.
    pub fn forward_batch(&self, g: &Graph, binder: &Binder, x4: &Value) -> Result<Value> {
        let (bsz, t, _) = check_map4(x4, self.d)?;
        let pooled = g.mean(x4, Some(3), false)?; // (B, D, T)
        let mut branches = Vec::with_capacity(bsz);
        for bi in 0..bsz {
            let item = g.slice(&pooled, 0, bi, bi + 1)?;
            let dt = g.reshape(&item, &[self.d, t])?;
            let pt = g.transpose(&dt, 0, 1)?; // (T, D)
            let (o3, _) = self.attend_item(g, binder, &pt)?;
            branches.push(g.reshape(&o3, &[1, self.d, t, 1])?);
        }
        let refs: Vec<&Value> = branches.iter().collect();
        let o4 = if refs.len() == 1 { branches[0].clone() } else { g.concat(&refs, 0)? };
        Ok(g.add(x4, &o4)?) // broadcast over F
    }

    /// Per-head (T, T) attention maps of one (D, T, F) map.
    pub fn attention_maps(&self, g: &Graph, binder: &Binder, x: &Value) -> Result<Vec<Tensor>> {
        let (_, t, _) = check_map(x, self.d)?;
        let pooled = g.mean(x, Some(2), false)?; // (D, T)
        let pt = g.transpose(&pooled, 0, 1)?;
        let _ = t;
        let (_, maps) = self.attend_item(g, binder, &pt)?;
        Ok(maps.iter().map(|m| m.tensor().clone()).collect())
    }
}

/// intra-frame -> sub-band -> cross-frame, each residual.
pub struct GridnetBlock {
    pub intra: SeqModule,
    pub sub: SeqModule,
    pub cross: CrossFrame,
}

impl GridnetBlock {
    pub fn register(
        lb: &mut LayoutBuilder,
        prefix: &str,
        d: usize,
        hidden: usize,
        attn_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            intra: SeqModule::register(lb, &format!("{prefix}.intra"), SeqAxis::AcrossBins, d, hidden),
            sub: SeqModule::register(lb, &format!("{prefix}.sub"), SeqAxis::AcrossFrames, d, hidden),
            cross: CrossFrame::register(lb, &format!("{prefix}.cross"), d, attn_dim, heads)?,
        })
    }

    pub fn forward(&self, g: &Graph, binder: &Binder, x: &Value) -> Result<Value> {
        let a = self.intra.forward(g, binder, x)?;
        let b = self.sub.forward(g, binder, &a)?;
        self.cross.forward(g, binder, &b)
    }

    pub fn forward_batch(&self, g: &Graph, binder: &Binder, x4: &Value) -> Result<Value> {
        let a = self.intra.forward_batch(g, binder, x4)?;
        let b = self.sub.forward_batch(g, binder, &a)?;
        self.cross.forward_batch(g, binder, &b)
    }
}

fn check_map(x: &Value, d: usize) -> Result<(usize, usize, usize)> {
    let shape = x.shape();
    if shape.len() != 3 || shape[0] != d {
        return Err(Error::Tensor(TensorError::ShapeMismatch {
            op: "gridnet",
            detail: format!("expected (D={d}, T, F), got {shape:?}"),
        }));
    }
    Ok((shape[0], shape[1], shape[2]))
}

/// Returns (B, T, F) of a batched (B, D, T, F) map.
fn check_map4(x: &Value, d: usize) -> Result<(usize, usize, usize)> {
    let shape = x.shape();
    if shape.len() != 4 || shape[1] != d {
        return Err(Error::Tensor(TensorError::ShapeMismatch {
            op: "gridnet",
            detail: format!("expected (B, D={d}, T, F), got {shape:?}"),
        }));
    }
    Ok((shape[0], shape[2], shape[3]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Binder, ParamLayout};
    use crate::tensor::scan::gru_cell_reference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Fx {
        layout: ParamLayout,
        block: GridnetBlock,
    }

    fn fixture(d: usize, hidden: usize) -> Fx {
        let mut lb = LayoutBuilder::new();
        let block = GridnetBlock::register(&mut lb, "block0", d, hidden, d, 1).unwrap();
        Fx { layout: lb.finish(), block }
    }

    fn rand_map(rng: &mut ChaCha8Rng, d: usize, t: usize, f: usize) -> Tensor {
        Tensor::new(vec![d, t, f], (0..d * t * f).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn zero_projections(layout: &ParamLayout, theta: &mut [f64]) {
        for spec in layout.specs() {
            if spec.name.ends_with("proj.w")
                || spec.name.ends_with("proj.b")
                || spec.name.ends_with(".wo")
                || spec.name.ends_with(".bo")
            {
                theta[spec.offset..spec.offset + spec.numel()].fill(0.0);
            }
        }
    }

    #[test]
    fn zero_projection_weights_give_identity() {
        let fx = fixture(4, 6);
        let mut theta = fx.layout.init_theta(1);
        zero_projections(&fx.layout, &mut theta);
        let g = Graph::inference();
        let binder = Binder::bind(&g, &fx.layout, &theta, |_| true);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_map(&mut rng, 4, 5, 7);
        let xv = g.constant(x.clone());
        for out in [
            fx.block.intra.forward(&g, &binder, &xv).unwrap(),
            fx.block.sub.forward(&g, &binder, &xv).unwrap(),
            fx.block.cross.forward(&g, &binder, &xv).unwrap(),
            fx.block.forward(&g, &binder, &xv).unwrap(),
        ] {
            assert_eq!(out.shape(), x.shape());
            for (a, b) in out.data().iter().zip(x.data()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn shapes_are_preserved_across_random_extents() {
        let fx = fixture(8, 16);
        let theta = fx.layout.init_theta(3);
        let g = Graph::inference();
        let binder = Binder::bind(&g, &fx.layout, &theta, |_| true);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..4 {
            let t = rng.gen_range(1..12);
            let f = rng.gen_range(1..12);
            let x = g.constant(rand_map(&mut rng, 8, t, f));
            let out = fx.block.forward(&g, &binder, &x).unwrap();
            assert_eq!(out.shape(), &[8, t, f]);
        }
        // (D,T,F) = (8,10,65) from the module contract
        let x = g.constant(rand_map(&mut rng, 8, 10, 65));
        assert_eq!(fx.block.intra.forward(&g, &binder, &x).unwrap().shape(), &[8, 10, 65]);
    }

    #[test]
    fn intra_frame_commutes_with_frame_permutation() {
        let fx = fixture(4, 6);
        let theta = fx.layout.init_theta(5);
        let g = Graph::inference();
        let binder = Binder::bind(&g, &fx.layout, &theta, |_| true);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (d, t, f) = (4, 5, 7);
        let x = rand_map(&mut rng, d, t, f);
        let perm: Vec<usize> = vec![3, 0, 4, 1, 2];
        let mut permuted = vec![0.0; d * t * f];
        for di in 0..d {
            for (tn, &ts) in perm.iter().enumerate() {
                for fi in 0..f {
                    permuted[di * t * f + tn * f + fi] = x.data()[di * t * f + ts * f + fi];
                }
            }
        }
        let out = fx.block.intra.forward(&g, &binder, &g.constant(x)).unwrap();
        let out_p = fx
            .block
            .intra
            .forward(&g, &binder, &g.constant(Tensor::new(vec![d, t, f], permuted).unwrap()))
            .unwrap();
        for di in 0..d {
            for (tn, &ts) in perm.iter().enumerate() {
                for fi in 0..f {
                    let a = out_p.data()[di * t * f + tn * f + fi];
                    let b = out.data()[di * t * f + ts * f + fi];
                    assert!((a - b).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn sub_band_commutes_with_bin_permutation() {
        let fx = fixture(4, 6);
        let theta = fx.layout.init_theta(7);
        let g = Graph::inference();
        let binder = Binder::bind(&g, &fx.layout, &theta, |_| true);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (d, t, f) = (4, 6, 5);
        let x = rand_map(&mut rng, d, t, f);
        let perm: Vec<usize> = vec![2, 4, 0, 3, 1];
        let mut permuted = vec![0.0; d * t * f];
        for di in 0..d {
            for ti in 0..t {
                for (fnew, &fsrc) in perm.iter().enumerate() {
                    permuted[di * t * f + ti * f + fnew] = x.data()[di * t * f + ti * f + fsrc];
                }
            }
        }
        let out = fx.block.sub.forward(&g, &binder, &g.constant(x)).unwrap();
        let out_p = fx
            .block
            .sub
            .forward(&g, &binder, &g.constant(Tensor::new(vec![d, t, f], permuted).unwrap()))
            .unwrap();
        for di in 0..d {
            for ti in 0..t {
                for (fnew, &fsrc) in perm.iter().enumerate() {
                    let a = out_p.data()[di * t * f + ti * f + fnew];
                    let b = out.data()[di * t * f + ti * f + fsrc];
                    assert!((a - b).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn sub_band_single_frame_equals_one_cell_step() {
        // With T = 1, the time recurrence is a single cell application on
        // the normalized features.
        let (d, h) = (3, 4);
        let fx = fixture(d, h);
        let theta = fx.layout.init_theta(9);
        let g = Graph::inference();
        let binder = Binder::bind(&g, &fx.layout, &theta, |_| true);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_map(&mut rng, d, 1, 2);
        let out = fx.block.sub.forward(&g, &binder, &g.constant(x.clone())).unwrap();

        // oracle: normalize per (t, f) position, run the reference cell,
        // project, add residual
        let lay = &fx.layout;
        let gain = lay.slice(&theta, fx.block.sub.ln_gain);
        let bias = lay.slice(&theta, fx.block.sub.ln_bias);
        let (wxf, whf, bf) = (
            lay.slice(&theta, fx.block.sub.fwd.w_x),
            lay.slice(&theta, fx.block.sub.fwd.w_h),
            lay.slice(&theta, fx.block.sub.fwd.b),
        );
        let (wxb, whb, bb) = (
            lay.slice(&theta, fx.block.sub.bwd.w_x),
            lay.slice(&theta, fx.block.sub.bwd.w_h),
            lay.slice(&theta, fx.block.sub.bwd.b),
        );
        let pw = lay.slice(&theta, fx.block.sub.proj_w);
        let pb = lay.slice(&theta, fx.block.sub.proj_b);
        for fi in 0..2 {
            let lane: Vec<f64> = (0..d).map(|di| x.data()[di * 2 + fi]).collect();
            let mean = lane.iter().sum::<f64>() / d as f64;
            let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            let normed: Vec<f64> = lane
                .iter()
                .enumerate()
                .map(|(i, v)| (v - mean) * rstd * gain[i] + bias[i])
                .collect();
            let hf = gru_cell_reference(&normed, &vec![0.0; h], wxf, whf, bf);
            let hb = gru_cell_reference(&normed, &vec![0.0; h], wxb, whb, bb);
            let cat: Vec<f64> = hf.iter().chain(hb.iter()).copied().collect();
            for di in 0..d {
                let mut p = pb[di];
                for (j, &cv) in cat.iter().enumerate() {
                    p += cv * pw[j * d + di];
                }
                let want = lane[di] + p;
                let got = out.data()[di * 2 + fi];
                assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_uniform_for_identical_frames() {
        let fx = fixture(4, 6);
        let theta = fx.layout.init_theta(11);
        let g = Graph::inference();
        let binder = Binder::bind(&g, &fx.layout, &theta, |_| true);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (d, t, f) = (4, 6, 3);
        let x = rand_map(&mut rng, d, t, f);
        let maps = fx.block.cross.attention_maps(&g, &binder, &g.constant(x.clone())).unwrap();
        for m in &maps {
            for row in m.data().chunks(t) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() <= 1e-9);
            }
        }

        // copy frame 0 across all frames: scores become constant per row
        let mut same = vec![0.0; d * t * f];
        for di in 0..d {
            for ti in 0..t {
                for fi in 0..f {
                    same[di * t * f + ti * f + fi] = x.data()[di * t * f + fi];
                }
            }
        }
        let maps = fx
            .block
            .cross
            .attention_maps(&g, &binder, &g.constant(Tensor::new(vec![d, t, f], same).unwrap()))
            .unwrap();
        for m in &maps {
            for &v in m.data() {
                assert!((v - 1.0 / t as f64).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn cross_frame_with_one_frame_is_input_plus_value_path() {
        let fx = fixture(4, 6);
        let theta = fx.layout.init_theta(13);
        let g = Graph::inference();
        let binder = Binder::bind(&g, &fx.layout, &theta, |_| true);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = rand_map(&mut rng, 4, 1, 5);
        let maps = fx.block.cross.attention_maps(&g, &binder, &g.constant(x.clone())).unwrap();
        assert_eq!(maps[0].data(), &[1.0]); // softmax of a singleton
        let out = fx.block.cross.forward(&g, &binder, &g.constant(x.clone())).unwrap();
        // with attention weight exactly 1 the output is x + proj(V)
        assert_eq!(out.shape(), x.shape());
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        // Tiny block; fold all parameters into the probe tensor.
        let fx = fixture(3, 4);
        let theta = fx.layout.init_theta(15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x_const = rand_map(&mut rng, 3, 4, 5);
        let probe = Tensor::from_vec(theta.clone()).unwrap();
        let err = crate::tensor::finite_diff_check(
            |g, v| {
                // rebind each parameter as a slice of the probe
                let mut vals = Vec::new();
                for spec in fx.layout.specs() {
                    let flat = g.slice(v, 0, spec.offset, spec.offset + spec.numel())?;
                    vals.push(g.reshape(&flat, &spec.shape)?);
                }
                let binder = Binder::from_values(vals);
                let x = g.constant(x_const.clone());
                let out = fx.block.forward(g, &binder, &x).map_err(|e| match e {
                    Error::Tensor(t) => t,
                    other => TensorError::ShapeMismatch { op: "block", detail: other.to_string() },
                })?;
                let sq = g.square(&out)?;
                let s = g.sum_all(&sq)?;
                // keep |f| near 1 so central-difference roundoff stays small
                g.scale(&s, 1.0 / 60.0)
            },
            &probe,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "block grad err {err}");
    }

    #[test]
    fn block_is_deterministic() {
        let fx = fixture(4, 6);
        let theta = fx.layout.init_theta(17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x = rand_map(&mut rng, 4, 5, 7);
        let run = || {
            let g = Graph::inference();
            let binder = Binder::bind(&g, &fx.layout, &theta, |_| true);
            fx.block.forward(&g, &binder, &g.constant(x.clone())).unwrap().data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
