//! The orthogonality loss on a few hand-made support sets, and one gradient
//! step on two unit vectors.

use mgml::model::orthogonality_loss;
use mgml::tensor::{Tape, Tensor};

fn loss(rows: &[[f64; 2]], labels: &[Option<usize>]) -> Result<f64, Box<dyn std::error::Error>> {
    let tape = Tape::new();
    let t = Tensor::matrix(rows.len(), 2, rows.concat())?;
    Ok(orthogonality_loss(tape.constant(t), labels, true)?.item())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!("same class, parallel:     {}", loss(&[[1.0, 1.0], [2.0, 2.0]], &[Some(0), Some(0)])?);
    println!("same class, orthogonal:   {}", loss(&[[1.0, 0.0], [0.0, 1.0]], &[Some(0), Some(0)])?);
    println!("other class, orthogonal:  {}", loss(&[[1.0, 0.0], [0.0, 1.0]], &[Some(0), Some(1)])?);
    println!("other class, opposite:    {}", loss(&[[1.0, 0.0], [-1.0, 0.0]], &[Some(0), Some(1)])?);
    println!("background row ignored:   {}", loss(&[[1.0, 0.0], [0.0, 1.0], [5.0, 5.0]], &[Some(0), Some(1), None])?);

    for (theta, labels) in [(60f64, [Some(0), Some(1)]), (60f64, [Some(0), Some(0)])] {
        let t = theta.to_radians();
        let tape = Tape::new();
        let x = tape.param(Tensor::matrix(2, 2, vec![1.0, 0.0, t.cos(), t.sin()])?);
        tape.backward(orthogonality_loss(x, &labels, true)?)?;
        let g = x.grad().expect("gradient");
        let stepped: Vec<f64> = x.value().data().iter().zip(g.data()).map(|(v, g)| v - 0.1 * g).collect();
        let angle = stepped[3].atan2(stepped[2]) - stepped[1].atan2(stepped[0]);
        let kind = if labels[0] == labels[1] { "same" } else { "different" };
        println!("{kind} classes at {theta}°: after one step {:.2}°", angle.to_degrees());
    }
    Ok(())
}
