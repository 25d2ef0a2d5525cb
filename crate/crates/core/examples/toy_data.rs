//! Generates both toy domains and writes them as PNG datasets.
//!
//!     cargo run --example toy_data -- /tmp/toy

use std::path::PathBuf;

use sim2real::pipeline::io::write_dataset;
use sim2real::toy::{gen_real, gen_simulated, LabeledSample, CHANNELS};

fn channel_means(samples: &[LabeledSample]) -> [f64; CHANNELS] {
    let mut sums = [0.0; CHANNELS];
    let mut count = 0usize;
    for s in samples {
        for px in s.image.data().chunks_exact(CHANNELS) {
            for (acc, v) in sums.iter_mut().zip(px) {
                *acc += v;
            }
            count += 1;
        }
    }
    sums.map(|v| v / count as f64)
}

fn main() -> sim2real::Result<()> {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("toy"));
    let sim = gen_simulated(64, 1)?;
    let real = gen_real(64, 2)?;
    for (name, samples) in [("sim", &sim), ("real", &real)] {
        let with_tool = samples.iter().filter(|s| s.scene_label() == 1).count();
        let m = channel_means(samples);
        println!(
            "{name:>4}: {} images, {with_tool} with a tool, mean rgb ({:.2}, {:.2}, {:.2})",
            samples.len(),
            m[0],
            m[1],
            m[2]
        );
        write_dataset(&root.join(name), samples, true)?;
    }
    println!("wrote {}", root.display());
    Ok(())
}
