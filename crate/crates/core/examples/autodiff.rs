//! Fits y = 3x - 1 with a one-unit linear layer on the tape and Adam.

use iatsf::tensor::{AdamConfig, AdamState, Graph, Parameters, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let xs: Vec<f64> = (0..32).map(|i| i as f64 / 16.0 - 1.0).collect();
    let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x - 1.0).collect();
    let x = Tensor::new(vec![32, 1], xs)?;
    let y = Tensor::new(vec![32, 1], ys)?;

    let mut params = Parameters::new();
    let w = params.add("w", Tensor::zeros(&[1, 1]));
    let b = params.add("b", Tensor::zeros(&[1]));
    let mut adam = AdamState::new(&params, AdamConfig { lr: 0.05, ..AdamConfig::default() });

    for it in 0..400 {
        let mut g = Graph::new();
        let bp = params.bind(&mut g);
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let h = g.matmul(xv, bp.var(w))?;
        let pred = g.add_broadcast(h, bp.var(b))?;
        let loss = g.mse_loss(pred, yv)?;
        let value = g.value(loss).item()?;
        let mut grads = g.backward(loss)?;
        let grads = bp.gradients(&mut grads, &params);
        adam.step(&mut params, &grads)?;
        if it % 100 == 0 {
            println!("iter {it:>3}  loss {value:.6}");
        }
    }
    println!("w = {:.4}, b = {:.4}", params.get(w).data()[0], params.get(b).data()[0]);
    Ok(())
}
