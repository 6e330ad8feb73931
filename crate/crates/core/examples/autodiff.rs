//! Reverse-mode gradients on a small graph, then a few AdamW steps fitting a
//! linear softmax classifier.
//!
//! cargo run --example autodiff

use crossmodal_rec::tensor::{AdamW, AdamWConfig, Graph, ParamStore, Tensor};

fn main() -> crossmodal_rec::Result<()> {
    // d/dx sum((x·w)²) for a 1×2 input and 2×1 weight.
    let mut g = Graph::new();
    let x = g.variable(Tensor::row(vec![1.0, 2.0]));
    let w = g.variable(Tensor::matrix(2, 1, vec![0.5, -1.0])?);
    let y = g.matmul(x, w)?;
    let loss = g.sum_squares(y);
    let grads = g.backward(loss)?;
    println!("loss {}", g.value(loss).item());
    println!("dL/dx {:?}", grads.wrt(x).map(|t| t.data()));
    println!("dL/dw {:?}", grads.wrt(w).map(|t| t.data()));

    // Three points, three classes.
    let inputs = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, -1.0]])?;
    let targets = [Some(0), Some(1), Some(2)];
    let mut store = ParamStore::new();
    let wid = store.add("w", Tensor::zeros(&[2, 3]));
    let bid = store.add("b", Tensor::zeros(&[1, 3]));
    let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.0, ..AdamWConfig::default() });
    for step in 0..=100 {
        let mut g = Graph::new();
        let x = g.constant(inputs.clone());
        let w = g.param(&store, wid);
        let b = g.param(&store, bid);
        let h = g.matmul(x, w)?;
        let logits = g.add_row(h, b)?;
        let loss = g.cross_entropy(logits, &targets)?;
        if step % 25 == 0 {
            println!("step {step:>3}  cross-entropy {:.4}", g.value(loss).item());
        }
        let grads = g.backward(loss)?;
        opt.step(&mut store, &grads)?;
    }
    Ok(())
}
