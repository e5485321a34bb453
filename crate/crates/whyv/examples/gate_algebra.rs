//! The gating equations in closed form: omega = sigmoid(GTF * alpha),
//! phi = tanh(GTB * beta), o_w = omega * o + phi, with the conditioning
//! generated once from a fused embedding and broadcast over time.
//!
//!     cargo run --release --example gate_algebra

use whyv::gate::{BlockGate, CondGenerator};
use whyv::params::{Binder, LayoutBuilder};
use whyv::tensor::{Graph, Tensor};

fn main() {
    let (e_in, d, f) = (4usize, 2usize, 3usize);
    let mut lb = LayoutBuilder::new();
    let gen = CondGenerator::register(&mut lb, e_in, d, f);
    let gate = BlockGate::register(&mut lb, "block0", d, f);
    let layout = lb.finish();

    // zero generator weights, bias pinned so GTF has ln(3) in one cell
    let mut theta = vec![0.0; layout.total_len()];
    let gb = layout.by_name("gen.b").unwrap();
    theta[layout.spec(gb).offset] = 3.0f64.ln();
    let alpha = layout.by_name("block0.alpha").unwrap();
    theta[layout.spec(alpha).offset] = 1.0;

    let g = Graph::inference();
    let binder = Binder::bind(&g, &layout, &theta, |_| true);
    let e = g.constant(Tensor::from_vec(vec![0.1, -0.2, 0.3, 0.4]).unwrap());
    let cond = gen.make_conditioning(&g, &binder, &e).unwrap();
    println!("gtf shape {:?}, gtb shape {:?}", cond.gtf.shape(), cond.gtb.shape());

    let o = g.constant(Tensor::full(&[d, 4, f], 1.0));
    let out = gate.gate(&g, &binder, &o, &cond).unwrap();
    println!("cell with GTF*alpha = ln 3: omega = {:.6} (exact 3/4)", out.data()[0]);
    println!("untouched cell:             omega = {:.6} (exact 1/2)", out.data()[1]);

    // alpha = beta = 0 halves the input exactly
    let zeros = vec![0.0; layout.total_len()];
    let binder0 = Binder::bind(&g, &layout, &zeros, |_| true);
    let cond0 = gen.make_conditioning(&g, &binder0, &e).unwrap();
    let out0 = gate.gate(&g, &binder0, &o, &cond0).unwrap();
    println!("alpha = beta = 0: every output = {:.6} * input", out0.data()[0]);
}
