//! Record a small computation, differentiate it, and take one Adam step.

use cldyn::tensor::{Adam, AdamConfig, Graph, ParamStore, Tensor};

fn main() -> cldyn::Result<()> {
    // f(x, w) = mean(leaky_relu(conv(x, w)))
    let x = Tensor::new(vec![1, 3, 3], (0..9).map(|i| i as f64 / 8.0 - 0.5).collect())?;
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::full(&[2, 1, 3, 3], 0.1), true);

    let mut g = Graph::new();
    let p = store.bind(&mut g, true);
    let xv = g.constant(x);
    let y = g.conv2d(xv, p[w], None, 1)?;
    let a = g.leaky_relu(y, 0.2);
    let loss = g.mean(a);
    println!("f = {:.6}", g.value(loss).item());

    let mut grads = g.backward(loss)?;
    let gs = p.collect(&mut grads, &store);
    println!("df/dw[0] = {:?}", &gs.tensors()[0].data()[..9]);

    let mut opt = Adam::new(&store, AdamConfig::with_lr(0.01));
    opt.step(&mut store, &gs)?;
    println!("w[0] after one step = {:.6}", store.get(w).data()[0]);

    // a record answers exactly one backward call
    assert!(g.backward(loss).is_err());
    Ok(())
}
