//! Macro F1 from confusion matrices and a confidence interval over runs.
//!
//! cargo run --example metrics

use nesy_har::eval::{confidence_interval, macro_f1, ConfusionMatrix};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for rows in [
        vec![vec![8, 2], vec![4, 6]],
        vec![vec![10, 0], vec![10, 0]],
        vec![vec![5, 0, 1], vec![0, 0, 0], vec![2, 0, 7]],
    ] {
        let f = macro_f1(&ConfusionMatrix::from_rows(&rows)?)?;
        println!("{rows:?}: macro F1 {:.4}, per class {:?}, zero support {:?}", f.score, f.per_class, f.zero_support);
    }
    let ci = confidence_interval(&[0.6, 0.6, 0.6, 0.6, 0.7])?;
    println!("0.6 x4, 0.7: {:.4} ± {:.4}", ci.mean, ci.halfwidth);
    Ok(())
}
