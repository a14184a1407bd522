//! Evaluate the structural and discriminative losses on hand-made masks.

use grounding::losses::{loss_disc, loss_pc, loss_sib, total_loss, Hyperparams};
use grounding::Tensor;

fn mask(rows: &[[f64; 4]; 4]) -> Tensor {
    Tensor::new(vec![4, 4], rows.iter().flatten().copied().collect()).unwrap()
}

fn main() -> grounding::Result<()> {
    let left = mask(&[[0.9, 0.8, 0.1, 0.0]; 4]);
    let right = mask(&[[0.0, 0.1, 0.7, 0.9]; 4]);
    let union = mask(&[[0.9, 0.8, 0.7, 0.9]; 4]);
    let blurry = mask(&[[0.5; 4]; 4]);

    println!("L_PC parent = union of children:  {:.6}", loss_pc(&union, &[&left, &right], 2)?);
    println!("L_PC parent = flat 0.5:           {:.6}", loss_pc(&blurry, &[&left, &right], 2)?);
    println!("L_SIB disjoint siblings:          {:.6}", loss_sib(&[vec![&left, &right]], 1)?);
    println!("L_SIB identical siblings:         {:.6}", loss_sib(&[vec![&blurry, &blurry]], 1)?);
    println!("L_disc matching pair, score 0.9:  {:.6}", loss_disc(0.9, 1)?);
    println!("L_disc negative pair, score 0.9:  {:.6}", loss_disc(0.9, -1)?);

    let h = Hyperparams::default();
    let pc = loss_pc(&blurry, &[&left, &right], 2)?;
    let sib = loss_sib(&[vec![&blurry, &blurry]], 1)?;
    let total = total_loss(pc, sib, loss_disc(0.9, 1)?, &h)?;
    println!("total with default weights:       {:.6}", total.l);
    Ok(())
}
