//! Slide-level AUC and ROC points, confusion-derived rates, and mask Dice.

use wsi_cascade::metrics::{accuracy, auc, confusion, dice, precision, recall, roc_points, specificity};
use wsi_cascade::raster::Plane;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scored = [(0.92, 1), (0.81, 1), (0.40, 1), (0.55, 0), (0.12, 0), (0.05, 0)];
    println!("AUC {:.4}", auc(&scored)?);
    println!("threshold  fpr   tpr");
    for (t, fpr, tpr) in roc_points(&scored)? {
        println!("{t:>9.2}  {fpr:.2}  {tpr:.2}");
    }

    let preds: Vec<u8> = scored.iter().map(|&(s, _)| u8::from(s >= 0.5)).collect();
    let labels: Vec<u8> = scored.iter().map(|&(_, l)| l).collect();
    let c = confusion(&preds, &labels)?;
    println!(
        "{c:?}: accuracy {:.3} recall {:.3} precision {:.3} specificity {:.3}",
        accuracy(&c)?,
        recall(&c)?,
        precision(&c)?,
        specificity(&c)?
    );

    let mut a = Plane::filled(32, 32, 0u8);
    let mut b = Plane::filled(32, 32, 0u8);
    for y in 8..24 {
        for x in 8..24 {
            a.set(x, y, 1);
            b.set(x + 4, y, 1);
        }
    }
    println!("dice of two 16x16 squares offset by 4 px: {:.4}", dice(&a, &b)?);
    Ok(())
}
