//! Backbone-free evaluation: density and coverage, MMD, Fréchet distance on
//! a fixed random embedding, and segmentation scores.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EMBEDDING_DIM: usize = 64;
pub const DEFAULT_EMBEDDING_SEED: u64 = 0x5EED;
/// Diagonal loading added to fitted covariances.
pub const COVARIANCE_SHRINKAGE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Nonlinearity {
    #[default]
    Linear,
    Tanh,
}

/// Fixed projection with orthonormal rows, `input_dim → 64`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSpec {
    projection: Tensor,
    pub nonlinearity: Nonlinearity,
    pub seed: u64,
}

impl EmbeddingSpec {
    pub fn new(
        input_dim: usize,
        out_dim: usize,
        nonlinearity: Nonlinearity,
        seed: u64,
    ) -> Result<Self> {
        if out_dim == 0 || out_dim > input_dim {
            return Err(Error::invalid(format!(
                "cannot embed {input_dim} dimensions into {out_dim} orthonormal directions"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Tensor::randn(&[input_dim, out_dim], &mut rng);
        let m = DMatrix::from_row_slice(input_dim, out_dim, g.data());
        let q = m.qr().q();
        // rows of the projection are the orthonormal columns of q
        let mut data = Vec::with_capacity(out_dim * input_dim);
        for c in 0..out_dim {
            data.extend(q.column(c).iter());
        }
        Ok(EmbeddingSpec {
            projection: Tensor::new(vec![out_dim, input_dim], data)?,
            nonlinearity,
            seed,
        })
    }

    /// The default 768 → 64 image embedding.
    pub fn for_images(image_dim: usize) -> Self {
        EmbeddingSpec::new(
            image_dim,
            EMBEDDING_DIM,
            Nonlinearity::Linear,
            DEFAULT_EMBEDDING_SEED,
        )
        .expect("image_dim exceeds the embedding width")
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }

    pub fn input_dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.projection.rows()
    }

    /// Embeds rows of flattened inputs.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let x = x.as_matrix();
        if x.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "embedding expects width {}, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        let y = x.matmul_t(&self.projection)?;
        Ok(match self.nonlinearity {
            Nonlinearity::Linear => y,
            Nonlinearity::Tanh => y.map(f64::tanh),
        })
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn check_sets(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.cols() != y.cols() {
        return Err(Error::shape(format!(
            "point sets of width {} and {}",
            x.cols(),
            y.cols()
        )));
    }
    Ok(())
}

/// k-NN balls around reference points.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifoldEstimate {
    pub points: Tensor,
    /// Distance from each point to its k-th nearest other point.
    pub radii: Vec<f64>,
    pub k: usize,
}

impl ManifoldEstimate {
    pub fn new(points: &Tensor, k: usize) -> Result<Self> {
        let points = points.as_matrix();
        let n = points.rows();
        if k == 0 || k >= n {
            return Err(Error::invalid(format!(
                "k = {k} needs 1 ≤ k < {n} reference points"
            )));
        }
        let radii = (0..n)
            .map(|i| {
                let mut d: Vec<f64> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| dist(points.row(i), points.row(j)))
                    .collect();
                d.sort_by(f64::total_cmp);
                d[k - 1]
            })
            .collect();
        Ok(ManifoldEstimate { points, radii, k })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityCoverage {
    pub density: f64,
    pub coverage: f64,
}

pub fn density_coverage(real: &Tensor, gen: &Tensor, k: usize) -> Result<DensityCoverage> {
    let (real, gen) = (real.as_matrix(), gen.as_matrix());
    check_sets(&real, &gen)?;
    let m = ManifoldEstimate::new(&real, k)?;
    let mut inside = 0usize;
    let mut covered = vec![false; real.rows()];
    for g in 0..gen.rows() {
        for (i, r) in m.radii.iter().enumerate() {
            if dist(gen.row(g), real.row(i)) <= *r {
                inside += 1;
                covered[i] = true;
            }
        }
    }
    Ok(DensityCoverage {
        density: inside as f64 / (k * gen.rows()) as f64,
        coverage: covered.iter().filter(|&&c| c).count() as f64 / real.rows() as f64,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MmdEstimator {
    /// V-statistic.
    #[default]
    Biased,
    /// U-statistic.
    Unbiased,
}

/// Median pairwise distance over the pooled sets.
pub fn median_heuristic(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (x, y) = (x.as_matrix(), y.as_matrix());
    check_sets(&x, &y)?;
    let mut data = x.data().to_vec();
    data.extend_from_slice(y.data());
    let pooled = Tensor::new(vec![x.rows() + y.rows(), x.cols()], data)?;
    let n = pooled.rows();
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(dist(pooled.row(i), pooled.row(j)));
        }
    }
    if d.is_empty() {
        return Err(Error::invalid("median heuristic needs at least two points"));
    }
    d.sort_by(f64::total_cmp);
    let h = d.len();
    Ok(if h % 2 == 1 {
        d[h / 2]
    } else {
        0.5 * (d[h / 2 - 1] + d[h / 2])
    })
}

/// Squared MMD with the RBF kernel `exp(−‖x−y‖²/(2h²))`. `bandwidth`
/// defaults to the median heuristic.
pub fn mmd2(
    x: &Tensor,
    y: &Tensor,
    bandwidth: Option<f64>,
    estimator: MmdEstimator,
) -> Result<f64> {
    let (x, y) = (x.as_matrix(), y.as_matrix());
    check_sets(&x, &y)?;
    let (n, m) = (x.rows(), y.rows());
    if n < 2 || m < 2 {
        return Err(Error::invalid("MMD needs at least two points per set"));
    }
    let h = match bandwidth {
        Some(h) => h,
        None => median_heuristic(&x, &y)?,
    };
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::invalid(format!(
            "degenerate RBF bandwidth {h} (all points coincide?)"
        )));
    }
    let gamma = 1.0 / (2.0 * h * h);
    let k = |a: &[f64], b: &[f64]| {
        let d2: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
        (-gamma * d2).exp()
    };
    let within = |s: &Tensor, diag: bool| {
        let n = s.rows();
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j || diag {
                    total += k(s.row(i), s.row(j));
                }
            }
        }
        total
    };
    let mut cross = 0.0;
    for i in 0..n {
        for j in 0..m {
            cross += k(x.row(i), y.row(j));
        }
    }
    let (nf, mf) = (n as f64, m as f64);
    Ok(match estimator {
        MmdEstimator::Biased => {
            within(&x, true) / (nf * nf) + within(&y, true) / (mf * mf) - 2.0 * cross / (nf * mf)
        }
        MmdEstimator::Unbiased => {
            within(&x, false) / (nf * (nf - 1.0)) + within(&y, false) / (mf * (mf - 1.0))
                - 2.0 * cross / (nf * mf)
        }
    })
}

/// Sample mean and covariance (`n − 1` normalization).
pub fn fit_gaussian(x: &Tensor) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let x = x.as_matrix();
    let (n, d) = (x.rows(), x.cols());
    if n < 2 {
        return Err(Error::invalid(
            "need at least two samples to fit a covariance",
        ));
    }
    let mut mu = vec![0.0; d];
    for r in 0..n {
        for (a, b) in mu.iter_mut().zip(x.row(r)) {
            *a += b;
        }
    }
    mu.iter_mut().for_each(|a| *a /= n as f64);
    let mut c = DMatrix::zeros(d, d);
    for r in 0..n {
        let row = x.row(r);
        for i in 0..d {
            let di = row[i] - mu[i];
            for j in i..d {
                c[(i, j)] += di * (row[j] - mu[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = c[(i, j)] / (n as f64 - 1.0);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    Ok((mu, c))
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let sym = (m + m.transpose()) * 0.5;
    let scale = sym.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    let eig = SymmetricEigen::new(sym);
    if let Some(min) = eig.eigenvalues.iter().cloned().reduce(f64::min) {
        if min < -1e-9 * scale {
            return Err(Error::invalid(format!(
                "matrix is not positive semidefinite (eigenvalue {min})"
            )));
        }
    }
    let vals: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).collect();
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vals.clone()));
    Ok((&eig.eigenvectors * d * eig.eigenvectors.transpose(), vals))
}

/// Fréchet distance between two Gaussians given by their moments.
pub fn frechet_from_moments(
    mu1: &[f64],
    c1: &DMatrix<f64>,
    mu2: &[f64],
    c2: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || c1.shape() != (d, d) || c2.shape() != (d, d) {
        return Err(Error::shape("moment dimensions disagree"));
    }
    let mean_term: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b) * (a - b)).sum();
    let (s1, _) = psd_sqrt(c1)?;
    let (_, vals) = psd_sqrt(&(&s1 * c2 * &s1))?;
    let cross: f64 = vals.iter().sum();
    Ok(mean_term + c1.trace() + c2.trace() - 2.0 * cross)
}

/// Fréchet distance between Gaussians fitted to `x` and `y`, with
/// [`COVARIANCE_SHRINKAGE`] on both covariances.
pub fn frechet_gaussian(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (x, y) = (x.as_matrix(), y.as_matrix());
    check_sets(&x, &y)?;
    let (mu1, mut c1) = fit_gaussian(&x)?;
    let (mu2, mut c2) = fit_gaussian(&y)?;
    for i in 0..x.cols() {
        c1[(i, i)] += COVARIANCE_SHRINKAGE;
        c2[(i, i)] += COVARIANCE_SHRINKAGE;
    }
    frechet_from_moments(&mu1, &c1, &mu2, &c2)
}

/// Row-major label raster.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(format!(
                "{} labels for a {height}×{width} mask",
                labels.len()
            )));
        }
        Ok(Mask {
            height,
            width,
            labels,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    /// Pixels of `class` with a 4-neighbor of another class or on the
    /// image border, as `(row, col)` points.
    pub fn boundary(&self, class: u8) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) != class {
                    continue;
                }
                let edge = r == 0
                    || c == 0
                    || r + 1 == self.height
                    || c + 1 == self.width
                    || self.get(r - 1, c) != class
                    || self.get(r + 1, c) != class
                    || self.get(r, c - 1) != class
                    || self.get(r, c + 1) != class;
                if edge {
                    out.push(vec![r as f64, c as f64]);
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegMetrics {
    pub pixel_accuracy: f64,
    /// `None` for classes absent from both masks.
    pub iou: Vec<Option<f64>>,
    pub dice: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub mean_dice: f64,
}

pub fn seg_metrics(pred: &Mask, gt: &Mask, num_classes: usize) -> Result<SegMetrics> {
    seg_metrics_many(&[(pred, gt)], num_classes)
}

/// Scores pooled over several mask pairs (intersections and unions are
/// summed before dividing).
pub fn seg_metrics_many(pairs: &[(&Mask, &Mask)], num_classes: usize) -> Result<SegMetrics> {
    let mut inter = vec![0u64; num_classes];
    let mut p_count = vec![0u64; num_classes];
    let mut g_count = vec![0u64; num_classes];
    let (mut correct, mut total) = (0u64, 0u64);
    for (pred, gt) in pairs {
        if pred.height != gt.height || pred.width != gt.width {
            return Err(Error::shape(format!(
                "masks {}×{} and {}×{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            let (p, g) = (p as usize, g as usize);
            if p >= num_classes || g >= num_classes {
                return Err(Error::invalid(format!(
                    "label {} ≥ {num_classes} classes",
                    p.max(g)
                )));
            }
            p_count[p] += 1;
            g_count[g] += 1;
            if p == g {
                inter[p] += 1;
                correct += 1;
            }
            total += 1;
        }
    }
    let mut iou = Vec::with_capacity(num_classes);
    let mut dice = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let union = p_count[c] + g_count[c] - inter[c];
        if union == 0 {
            iou.push(None);
            dice.push(None);
            continue;
        }
        let i = inter[c] as f64 / union as f64;
        let d = 2.0 * inter[c] as f64 / (p_count[c] + g_count[c]) as f64;
        debug_assert!((d - 2.0 * i / (1.0 + i)).abs() < 1e-12);
        iou.push(Some(i));
        dice.push(Some(d));
    }
    let mean = |v: &[Option<f64>]| {
        let present: Vec<f64> = v.iter().flatten().copied().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    };
    Ok(SegMetrics {
        pixel_accuracy: if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        },
        mean_iou: mean(&iou),
        mean_dice: mean(&dice),
        iou,
        dice,
    })
}

/// Symmetric Hausdorff distance between non-empty point sets.
pub fn hausdorff(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid(
            "Hausdorff distance undefined for an empty set",
        ));
    }
    let directed = |p: &[Vec<f64>], q: &[Vec<f64>]| {
        p.iter()
            .map(|x| q.iter().map(|y| dist(x, y)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    Ok(directed(a, b).max(directed(b, a)))
}

/// Mean over classes of the boundary Hausdorff distance; classes missing
/// from either mask are skipped. `None` if no class is defined.
pub fn mask_hausdorff(pred: &Mask, gt: &Mask, num_classes: usize) -> Option<f64> {
    let vals: Vec<f64> = (0..num_classes as u8)
        .filter_map(|c| hausdorff(&pred.boundary(c), &gt.boundary(c)).ok())
        .collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// One CSV row of evaluation output.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub metric: String,
    pub dataset: String,
    pub model: String,
    pub steps: Option<usize>,
    pub seed: u64,
    /// `None` is written as `undefined`.
    pub value: Option<f64>,
    pub meta: String,
}
