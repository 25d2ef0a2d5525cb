//! Optimal-transport color pre-adaptation of simulated images toward the
//! real palette, and the exact solvers behind it.

use sim2real::metrics::{frechet_gaussian, EmbeddingSpec};
use sim2real::tensor::Tensor;
use sim2real::toy::{gen_real, gen_simulated, images_tensor, CHANNELS, IMAGE_DIM};
use sim2real::transport::{
    color_adapt, hungarian, solve_entropic_ot, solve_exact_ot, ColorAdaptConfig, CostKind,
    PointCloud, SinkhornConfig,
};

fn unit(t: &Tensor) -> Tensor {
    t.map(|v| 0.5 * (v + 1.0))
}

fn main() -> sim2real::Result<()> {
    // exact and entropic plans between two small clouds
    let src = PointCloud::from_rows(&[vec![0.1, 0.1], vec![0.9, 0.1], vec![0.1, 0.9]])?;
    let tgt = PointCloud::from_rows(&[vec![1.0, 0.2], vec![0.2, 1.0], vec![0.2, 0.0]])?;
    let exact = solve_exact_ot(&src, &tgt, CostKind::SquaredEuclidean)?;
    println!(
        "exact assignment {:?}, cost {:.4}",
        exact.assignment.as_deref().unwrap_or(&[]),
        exact.cost
    );
    for eps in [0.5, 0.2, 0.1] {
        let cfg = SinkhornConfig {
            epsilon: eps,
            max_iters: 2_000_000,
            ..SinkhornConfig::default()
        };
        let plan = solve_entropic_ot(&src, &tgt, &cfg)?;
        println!(
            "sinkhorn eps {eps:<6}: cost {:.4} after {} iterations",
            plan.cost, plan.info.iterations
        );
    }
    let cost = Tensor::new(
        vec![3, 3],
        vec![4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0],
    )?;
    println!("hungarian on a 3x3 cost matrix: {:?}", hungarian(&cost)?);

    // color transfer on toy images
    let sim = gen_simulated(20, 1)?;
    let real = gen_real(40, 2)?;
    let pool: Vec<f64> = real
        .iter()
        .flat_map(|s| unit(&s.image).data().to_vec())
        .collect();
    let pool = Tensor::new(vec![pool.len() / CHANNELS, CHANNELS], pool)?;
    let cfg = ColorAdaptConfig {
        samples: 256,
        ..ColorAdaptConfig::default()
    };
    let mut adapted = Vec::new();
    for (i, s) in sim.iter().enumerate() {
        let moved = color_adapt(&unit(&s.image), &pool, &cfg, i as u64)?;
        adapted.push(moved.map(|v| 2.0 * v - 1.0));
    }
    let embed = EmbeddingSpec::for_images(IMAGE_DIM);
    let er = embed.embed(&images_tensor(&real)?.as_matrix())?;
    let es = embed.embed(&images_tensor(&sim)?.as_matrix())?;
    let refs: Vec<&Tensor> = adapted.iter().collect();
    let ea = embed.embed(&Tensor::stack(&refs)?.as_matrix())?;
    println!(
        "embedding Frechet distance to real: {:.3} before, {:.3} after color transfer",
        frechet_gaussian(&es, &er)?,
        frechet_gaussian(&ea, &er)?
    );
    Ok(())
}
