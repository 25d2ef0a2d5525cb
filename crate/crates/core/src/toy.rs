//! Procedural toy domains: flat-shaded "simulated" scenes, textured "real"
//! scenes with vessels and highlights, and a 2-D two-mode point set.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::tensor::Tensor;

pub const SIZE: usize = 16;
pub const CHANNELS: usize = 3;
pub const IMAGE_DIM: usize = SIZE * SIZE * CHANNELS;
pub const NUM_CLASSES: usize = 5;
pub const BACKGROUND: u8 = 0;
pub const TOOL: u8 = 4;
/// Diffusion conditioning labels: scene without / with a tool.
pub const NUM_SCENE_LABELS: usize = 2;

/// Base colors in `[-1, 1]` for background, three organs and the tool.
const REAL_PALETTE: [[f64; 3]; NUM_CLASSES] = [
    [-0.17, -0.41, -0.45],
    [0.33, -0.26, -0.33],
    [0.48, 0.12, 0.02],
    [0.38, 0.22, -0.28],
    [0.03, -0.01, 0.00],
];

/// Amplitude of the per-class texture field of the real domain.
const TEXTURE_AMPLITUDE: [f64; NUM_CLASSES] = [0.16, 0.22, 0.22, 0.20, 0.12];
const TEXTURE_SEED: u64 = 0x7E57_0001;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Simulated,
    Real,
    /// Simulated images after translation; carries the source masks.
    Translated,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::Simulated => "sim",
            Domain::Real => "real",
            Domain::Translated => "translated",
        })
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sim" | "simulated" => Ok(Domain::Simulated),
            "real" => Ok(Domain::Real),
            "translated" => Ok(Domain::Translated),
            other => Err(Error::invalid(format!(
                "unknown domain '{other}' (expected sim or real)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    /// `[16, 16, 3]` in `[-1, 1]`.
    pub image: Tensor,
    pub mask: Mask,
    pub domain: Domain,
    pub seed: u64,
}

impl LabeledSample {
    /// Conditioning label for the diffusion models.
    pub fn scene_label(&self) -> usize {
        usize::from(self.mask.labels.contains(&TOOL))
    }
}

/// Simulated palette: a washed-out, cooler version of the real one.
pub fn sim_palette() -> [[f64; 3]; NUM_CLASSES] {
    let mut p = REAL_PALETTE;
    for c in p.iter_mut() {
        let mean = (c[0] + c[1] + c[2]) / 3.0;
        for (v, shift) in c.iter_mut().zip([0.05, 0.12, 0.22]) {
            *v = (0.7 * *v + 0.3 * mean + shift).clamp(-1.0, 1.0);
        }
    }
    p
}

pub fn real_palette() -> [[f64; 3]; NUM_CLASSES] {
    REAL_PALETTE
}

fn sample_seed(seed: u64, domain: Domain, index: usize) -> u64 {
    let tag = match domain {
        Domain::Simulated => 0x51u64,
        Domain::Real => 0xAEu64,
        Domain::Translated => 0x7Au64,
    };
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (index as u64)
            .wrapping_add(1)
            .wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ tag.wrapping_mul(0x1656_67B1_9E37_79F9)
}

fn paint_ellipse(labels: &mut [u8], class: u8, rng: &mut ChaCha8Rng) {
    let (cy, cx) = (rng.gen_range(2.0..14.0), rng.gen_range(2.0..14.0));
    let (ry, rx) = (rng.gen_range(2.5..6.5), rng.gen_range(2.5..6.5));
    let th: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let (s, c) = th.sin_cos();
    for r in 0..SIZE {
        for col in 0..SIZE {
            let (y, x) = (r as f64 + 0.5 - cy, col as f64 + 0.5 - cx);
            let (u, v) = (c * x + s * y, -s * x + c * y);
            if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                labels[r * SIZE + col] = class;
            }
        }
    }
}

fn paint_polygon(labels: &mut [u8], class: u8, rng: &mut ChaCha8Rng) {
    let (cy, cx) = (rng.gen_range(3.0..13.0), rng.gen_range(3.0..13.0));
    let k = rng.gen_range(3..=6);
    let mut angles: Vec<f64> = (0..k)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    angles.sort_by(f64::total_cmp);
    let verts: Vec<(f64, f64)> = angles
        .iter()
        .map(|a| {
            let rad = rng.gen_range(3.0..7.0);
            (cy + rad * a.sin(), cx + rad * a.cos())
        })
        .collect();
    // vertices sorted by angle around an interior point form a star-shaped
    // polygon; test by winding
    for r in 0..SIZE {
        for col in 0..SIZE {
            let (py, px) = (r as f64 + 0.5, col as f64 + 0.5);
            let mut inside = false;
            for i in 0..k {
                let (ay, ax) = verts[i];
                let (by, bx) = verts[(i + 1) % k];
                if (ay > py) != (by > py) && px < ax + (py - ay) / (by - ay) * (bx - ax) {
                    inside = !inside;
                }
            }
            if inside {
                labels[r * SIZE + col] = class;
            }
        }
    }
}

fn paint_tool(labels: &mut [u8], rng: &mut ChaCha8Rng) {
    let thick = rng.gen_range(2..=3);
    let len = rng.gen_range(6..=11);
    let pos = rng.gen_range(1..SIZE - thick);
    let edge = rng.gen_range(0..4);
    for a in 0..len {
        for b in pos..pos + thick {
            let (r, c) = match edge {
                0 => (a, b),
                1 => (SIZE - 1 - a, b),
                2 => (b, a),
                _ => (b, SIZE - 1 - a),
            };
            labels[r * SIZE + c] = TOOL;
        }
    }
}

/// Keeps the largest 4-connected component of every foreground class;
/// other pieces become background.
fn keep_largest_components(labels: &mut [u8]) {
    let mut comp = vec![usize::MAX; labels.len()];
    let mut sizes: Vec<(u8, usize)> = Vec::new();
    for start in 0..labels.len() {
        if comp[start] != usize::MAX || labels[start] == BACKGROUND {
            continue;
        }
        let class = labels[start];
        let id = sizes.len();
        let mut stack = vec![start];
        comp[start] = id;
        let mut size = 0;
        while let Some(p) = stack.pop() {
            size += 1;
            let (r, c) = (p / SIZE, p % SIZE);
            let mut nb = Vec::with_capacity(4);
            if r > 0 {
                nb.push(p - SIZE);
            }
            if r + 1 < SIZE {
                nb.push(p + SIZE);
            }
            if c > 0 {
                nb.push(p - 1);
            }
            if c + 1 < SIZE {
                nb.push(p + 1);
            }
            for q in nb {
                if comp[q] == usize::MAX && labels[q] == class {
                    comp[q] = id;
                    stack.push(q);
                }
            }
        }
        sizes.push((class, size));
    }
    let mut best = [None::<(usize, usize)>; NUM_CLASSES];
    for (id, &(class, size)) in sizes.iter().enumerate() {
        let slot = &mut best[class as usize];
        if slot.is_none_or(|(_, s)| size > s) {
            *slot = Some((id, size));
        }
    }
    for (p, l) in labels.iter_mut().enumerate() {
        if *l != BACKGROUND && best[*l as usize].map(|b| b.0) != Some(comp[p]) {
            *l = BACKGROUND;
        }
    }
}

fn layout(rng: &mut ChaCha8Rng) -> Mask {
    let mut labels = vec![BACKGROUND; SIZE * SIZE];
    let organs = rng.gen_range(2..=4);
    for _ in 0..organs {
        let class = rng.gen_range(1..=3u8);
        if rng.gen_bool(0.6) {
            paint_ellipse(&mut labels, class, rng);
        } else {
            paint_polygon(&mut labels, class, rng);
        }
    }
    if rng.gen_bool(0.5) {
        paint_tool(&mut labels, rng);
    }
    keep_largest_components(&mut labels);
    Mask::new(SIZE, SIZE, labels).expect("fixed size")
}

/// Smooth value noise on the pixel grid, standardized to zero mean and
/// unit variance.
fn value_noise(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut field = vec![0.0; SIZE * SIZE];
    for (cells, weight) in [(4usize, 0.5), (8, 0.35), (SIZE - 1, 0.3)] {
        let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1))
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        for r in 0..SIZE {
            for c in 0..SIZE {
                let y = r as f64 / (SIZE - 1) as f64 * cells as f64;
                let x = c as f64 / (SIZE - 1) as f64 * cells as f64;
                let (y0, x0) = (
                    (y.floor() as usize).min(cells - 1),
                    (x.floor() as usize).min(cells - 1),
                );
                let (fy, fx) = (y - y0 as f64, x - x0 as f64);
                let (sy, sx) = (fy * fy * (3.0 - 2.0 * fy), fx * fx * (3.0 - 2.0 * fx));
                let at = |yy: usize, xx: usize| lattice[yy * (cells + 1) + xx];
                let top = at(y0, x0) * (1.0 - sx) + at(y0, x0 + 1) * sx;
                let bottom = at(y0 + 1, x0) * (1.0 - sx) + at(y0 + 1, x0 + 1) * sx;
                field[r * SIZE + c] += weight * (top * (1.0 - sy) + bottom * sy);
            }
        }
    }
    let mean = field.iter().sum::<f64>() / field.len() as f64;
    let std =
        (field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / field.len() as f64).sqrt();
    field.iter().map(|v| (v - mean) / std).collect()
}

/// Per-class texture fields shared by every real image, with a per-class
/// tint direction.
fn texture_fields() -> Vec<(Vec<f64>, [f64; 3])> {
    let mut rng = ChaCha8Rng::seed_from_u64(TEXTURE_SEED);
    (0..NUM_CLASSES)
        .map(|_| {
            let f = value_noise(&mut rng);
            let tint = [
                rng.gen_range(0.7..1.0),
                rng.gen_range(0.7..1.0),
                rng.gen_range(0.7..1.0),
            ];
            (f, tint)
        })
        .collect()
}

fn render_sim(mask: &Mask, rng: &mut ChaCha8Rng) -> Tensor {
    let pal = sim_palette();
    let th: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let amp = rng.gen_range(0.02..0.05);
    let mut data = Vec::with_capacity(IMAGE_DIM);
    for r in 0..SIZE {
        for c in 0..SIZE {
            let g = 1.0
                + amp * ((c as f64 / 15.0 - 0.5) * th.cos() + (r as f64 / 15.0 - 0.5) * th.sin());
            for v in pal[mask.get(r, c) as usize] {
                data.push((v * g).clamp(-1.0, 1.0));
            }
        }
    }
    Tensor::new(vec![SIZE, SIZE, CHANNELS], data).expect("fixed size")
}

fn render_real(mask: &Mask, rng: &mut ChaCha8Rng) -> Tensor {
    let fields = texture_fields();
    let mut data = Vec::with_capacity(IMAGE_DIM);
    for r in 0..SIZE {
        for c in 0..SIZE {
            let class = mask.get(r, c) as usize;
            let (field, tint) = &fields[class];
            let t = TEXTURE_AMPLITUDE[class] * field[r * SIZE + c];
            for (k, v) in REAL_PALETTE[class].iter().enumerate() {
                data.push(v + t * tint[k]);
            }
        }
    }
    let mut img = Tensor::new(vec![SIZE, SIZE, CHANNELS], data).expect("fixed size");
    let organ = |r: usize, c: usize| (1..=3).contains(&mask.get(r, c));

    // dark vessels: short random walks over organ pixels
    for _ in 0..rng.gen_range(1..=2) {
        let (mut r, mut c) = (rng.gen_range(0..SIZE) as i64, rng.gen_range(0..SIZE) as i64);
        let (mut dr, mut dc) = (rng.gen_range(-1..=1i64), 1i64);
        for _ in 0..rng.gen_range(5..=9) {
            if (0..SIZE as i64).contains(&r)
                && (0..SIZE as i64).contains(&c)
                && organ(r as usize, c as usize)
            {
                for v in img.row_mut(r as usize)[c as usize * 3..c as usize * 3 + 3].iter_mut() {
                    *v -= 0.25;
                }
            }
            if rng.gen_bool(0.3) {
                dr = rng.gen_range(-1..=1);
            }
            if rng.gen_bool(0.2) {
                dc = -dc;
            }
            r += dr;
            c += if dr == 0 { dc } else { 0 };
        }
    }
    // specular highlights
    for _ in 0..rng.gen_range(0..=2) {
        let (r, c) = (rng.gen_range(0..SIZE), rng.gen_range(0..SIZE));
        if organ(r, c) {
            for v in img.row_mut(r)[c * 3..c * 3 + 3].iter_mut() {
                *v = 0.5 * *v + 0.5;
            }
        }
    }
    img.map(|v| v.clamp(-1.0, 1.0))
}

fn generate(n: usize, seed: u64, domain: Domain) -> Result<Vec<LabeledSample>> {
    if n == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    if domain == Domain::Translated {
        return Err(Error::invalid(
            "translated samples are produced by translation, not generated",
        ));
    }
    Ok((0..n)
        .map(|i| {
            let s = sample_seed(seed, domain, i);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mask = layout(&mut rng);
            let image = match domain {
                Domain::Simulated => render_sim(&mask, &mut rng),
                _ => render_real(&mask, &mut rng),
            };
            LabeledSample {
                image,
                mask,
                domain,
                seed: s,
            }
        })
        .collect())
}

pub fn gen_simulated(n: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    generate(n, seed, Domain::Simulated)
}

pub fn gen_real(n: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    generate(n, seed, Domain::Real)
}

pub fn gen_domain(domain: Domain, n: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    generate(n, seed, domain)
}

/// Images stacked as `[n, 16, 16, 3]`.
pub fn images_tensor(samples: &[LabeledSample]) -> Result<Tensor> {
    let imgs: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    Tensor::stack(&imgs)
}

pub fn scene_labels(samples: &[LabeledSample]) -> Vec<usize> {
    samples.iter().map(LabeledSample::scene_label).collect()
}

/// Mode centers of the 2-D toy set.
pub const MODE_CENTERS: [[f64; 2]; 2] = [[-2.0, 0.0], [2.0, 0.0]];
pub const MODE_STD: f64 = 0.3;

/// `n` points from two Gaussian modes; the label is the mode index.
pub fn two_mode_points(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let m = usize::from(rng.gen_bool(0.5));
        for c in MODE_CENTERS[m] {
            let z: f64 = rng.sample(StandardNormal);
            data.push(c + MODE_STD * z);
        }
        labels.push(m);
    }
    (Tensor::new(vec![n, 2], data).expect("consistent"), labels)
}

/// Root-mean-square norm of the rows.
pub fn data_scale(points: &Tensor) -> f64 {
    (points.sq_norm() / points.rows() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class_std(samples: &[LabeledSample]) -> f64 {
        // mean over (image, class present, channel) of the within-class std
        let mut acc = Vec::new();
        for s in samples {
            for class in 0..NUM_CLASSES as u8 {
                for ch in 0..3 {
                    let vals: Vec<f64> = (0..SIZE * SIZE)
                        .filter(|&p| s.mask.labels[p] == class)
                        .map(|p| s.image.data()[p * 3 + ch])
                        .collect();
                    if vals.len() < 8 {
                        continue;
                    }
                    let m = vals.iter().sum::<f64>() / vals.len() as f64;
                    let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
                    acc.push(v.sqrt());
                }
            }
        }
        acc.iter().sum::<f64>() / acc.len() as f64
    }

    #[test]
    fn deterministic() {
        assert_eq!(gen_simulated(5, 3).unwrap(), gen_simulated(5, 3).unwrap());
        assert_eq!(gen_real(5, 3).unwrap(), gen_real(5, 3).unwrap());
        assert_ne!(gen_real(5, 3).unwrap(), gen_real(5, 4).unwrap());
    }

    #[test]
    fn masks_partition_and_connect() {
        for s in gen_simulated(40, 1)
            .unwrap()
            .iter()
            .chain(&gen_real(40, 1).unwrap())
        {
            assert_eq!(s.mask.labels.len(), 256);
            assert!(s.mask.labels.iter().all(|&l| (l as usize) < NUM_CLASSES));
            let mut copy = s.mask.labels.clone();
            keep_largest_components(&mut copy);
            assert_eq!(copy, s.mask.labels, "a class is split into several regions");
            assert!(s.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn texture_statistics_separate_domains() {
        let sim = class_std(&gen_simulated(50, 2).unwrap());
        let real = class_std(&gen_real(50, 2).unwrap());
        assert!(sim < 0.05, "sim within-class std {sim}");
        assert!(real > 0.1, "real within-class std {real}");
    }

    #[test]
    fn domains_are_unpaired() {
        let sim = gen_simulated(100, 5).unwrap();
        let real = gen_real(100, 5).unwrap();
        let mean_iou: f64 = sim
            .iter()
            .zip(&real)
            .map(|(a, b)| {
                crate::metrics::seg_metrics(&a.mask, &b.mask, NUM_CLASSES)
                    .unwrap()
                    .mean_iou
            })
            .sum::<f64>()
            / 100.0;
        assert!(mean_iou < 0.9, "{mean_iou}");
    }

    #[test]
    fn two_modes() {
        let (x, l) = two_mode_points(400, 1);
        assert_eq!(x.shape(), &[400, 2]);
        let ones = l.iter().filter(|&&v| v == 1).count();
        assert!(ones > 150 && ones < 250);
        assert!(data_scale(&x) > 1.0);
        assert!("jpeg".parse::<Domain>().is_err());
    }
}
