//! Gradient descent on the orthogonality penalty alone pulls a random bank
//! to orthonormal rows.

use protonorm::norm::{init_orthogonal, orthogonality_loss, orthogonality_loss_value};
use protonorm::rng;
use protonorm::tensor::{Graph, Tensor};

fn main() -> protonorm::Result<()> {
    let mut r = rng::stream(0, "example");
    let init = init_orthogonal(4, 16, &mut r)?;
    println!("orthogonal init: {:.3e}", orthogonality_loss_value(&init));

    let mut p = Tensor::randn(&[4, 16], 0.3, &mut r);
    let lr = 0.02;
    for step in 0..=200 {
        let mut g = Graph::new();
        let v = g.leaf(p.clone(), true);
        let l = orthogonality_loss(&mut g, v)?;
        let value = g.value(l).item()?;
        if step % 20 == 0 {
            println!("step {step:>3}: {value:.3e}");
        }
        g.backward(l)?;
        let grad = g.grad(v).expect("leaf gradient").clone();
        p.data_mut().iter_mut().zip(grad.data()).for_each(|(w, d)| *w -= lr * d);
    }
    Ok(())
}
