//! Distribution and segmentation metrics on small hand-made cases.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sim2real::metrics::{
    density_coverage, frechet_gaussian, hausdorff, mask_hausdorff, mmd2, seg_metrics, Mask,
    MmdEstimator,
};
use sim2real::tensor::Tensor;

fn main() -> sim2real::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let real = Tensor::randn(&[500, 4], &mut rng);
    for shift in [0.0, 0.5, 2.0] {
        let gen = Tensor::randn(&[500, 4], &mut rng).map(|v| v + shift);
        let dc = density_coverage(&real, &gen, 5)?;
        println!(
            "shift {shift}: density {:.3} coverage {:.3} mmd2 {:.4} (unbiased {:+.4}) frechet {:.3}",
            dc.density,
            dc.coverage,
            mmd2(&real, &gen, None, MmdEstimator::Biased)?,
            mmd2(&real, &gen, None, MmdEstimator::Unbiased)?,
            frechet_gaussian(&real, &gen)?
        );
    }

    let gt = Mask::new(4, 4, vec![0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 2, 2, 0, 0, 2, 2])?;
    let pred = Mask::new(4, 4, vec![0, 0, 0, 1, 0, 0, 1, 1, 0, 2, 2, 2, 0, 0, 2, 2])?;
    let m = seg_metrics(&pred, &gt, 3)?;
    println!(
        "pixel accuracy {:.4}, mean IoU {:.4}, mean Dice {:.4}",
        m.pixel_accuracy, m.mean_iou, m.mean_dice
    );
    for (c, (iou, dice)) in m.iou.iter().zip(&m.dice).enumerate() {
        println!("  class {c}: IoU {iou:.3?} Dice {dice:.3?}");
    }
    println!("boundary Hausdorff {:?}", mask_hausdorff(&pred, &gt, 3));
    let a = vec![vec![0.0], vec![1.0]];
    let b = vec![vec![0.0], vec![5.0]];
    println!("hausdorff({{0, 1}}, {{0, 5}}) = {}", hausdorff(&a, &b)?);
    Ok(())
}
