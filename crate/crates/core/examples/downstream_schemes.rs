//! Segmenter training schemes that mix real and color-shifted simulated
//! images, scored on held-out real images.

use sim2real::downstream::{
    eval_segmenter, run_schemes, schemes_csv, train_segmenter, Scheme, SegmenterConfig,
};
use sim2real::tensor::Tensor;
use sim2real::toy::{
    gen_real, gen_simulated, real_palette, sim_palette, Domain, LabeledSample, CHANNELS,
};

/// Swaps the simulated palette for the real one pixel by pixel, a stand-in
/// for a perfect translator.
fn repaint(s: &LabeledSample) -> sim2real::Result<LabeledSample> {
    let (from, to) = (sim_palette(), real_palette());
    let mut data = s.image.data().to_vec();
    for (px, &label) in data.chunks_exact_mut(CHANNELS).zip(&s.mask.labels) {
        let l = label as usize;
        for c in 0..CHANNELS {
            px[c] += to[l][c] - from[l][c];
        }
    }
    Ok(LabeledSample {
        image: Tensor::new(s.image.shape().to_vec(), data)?,
        domain: Domain::Translated,
        ..s.clone()
    })
}

fn main() -> sim2real::Result<()> {
    let real_train = gen_real(100, 2)?;
    let real_test = gen_real(100, 12)?;
    let sim = gen_simulated(200, 1)?;
    let translated: Vec<LabeledSample> =
        sim.iter().map(repaint).collect::<sim2real::Result<_>>()?;
    let cfg = SegmenterConfig {
        steps: 600,
        ..SegmenterConfig::default()
    };

    let (sim_only, _) = train_segmenter(&sim, &cfg, 0, None)?;
    println!(
        "simulated-only segmenter on real test: mIoU {:.3}",
        eval_segmenter(&sim_only, &real_test)?.mean_iou
    );

    let results = run_schemes(
        &Scheme::ALL,
        &real_train,
        &translated,
        &real_test,
        &cfg,
        &[0, 1],
    )?;
    print!("{}", schemes_csv(&results));
    Ok(())
}
