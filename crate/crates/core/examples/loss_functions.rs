//! Evaluates the focal, dice and combined losses on small hand-made masks.
//!
//! cargo run --release --example loss_functions

use vitc_unet::objectives::{binary_cross_entropy, combined_loss_with_grad, dice_loss, focal_loss, LossConfig};

fn main() -> vitc_unet::Result<()> {
    let p = [0.5f64];
    let y = [1.0f64];
    println!("focal(p=0.5, y=1, gamma=2) = {:.6}  (0.25 ln 2 = {:.6})", focal_loss(&p, &y, 2.0)?, 0.25 * 2f64.ln());
    println!("focal(gamma=0) = {:.6}  bce = {:.6}", focal_loss(&p, &y, 0.0)?, binary_cross_entropy(&p, &y)?);

    let a: Vec<f64> = (0..200).map(|i| if i < 100 { 1.0 } else { 0.0 }).collect();
    let b: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
    println!("dice(identical) = {}", dice_loss(&a, &a, 1.0)?);
    println!("dice(disjoint)  = {:.6}  (1 - 1/201 = {:.6})", dice_loss(&a, &b, 1.0)?, 1.0 - 1.0 / 201.0);

    let logits: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
    let target = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
    let (loss, grad) = combined_loss_with_grad(&logits, &target, &LossConfig::default())?;
    println!("combined loss {loss:.6}");
    println!("d loss / d logit {:?}", grad.iter().map(|g| format!("{g:+.4}")).collect::<Vec<_>>());
    Ok(())
}
