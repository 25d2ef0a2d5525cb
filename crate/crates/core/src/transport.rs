//! Optimal transport between color point clouds: exact assignment,
//! entropic (Sinkhorn) relaxation, barycentric color mapping and
//! neighborhood smoothing of the resulting displacement field.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::log_sum_exp;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest instance the exhaustive solver accepts.
pub const BRUTE_FORCE_LIMIT: usize = 10;
/// Largest instance the assignment solver accepts.
pub const ASSIGNMENT_LIMIT: usize = 512;

/// Points in `[0, 1]^d`, optionally tagged with the pixel they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Tensor,
    origin: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn new(points: Tensor) -> Result<Self> {
        let points = points.as_matrix();
        if points.rows() == 0 {
            return Err(Error::invalid("empty point cloud"));
        }
        if let Some(bad) = points.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "point coordinate {bad} outside [0, 1]"
            )));
        }
        Ok(PointCloud {
            points,
            origin: None,
        })
    }

    pub fn with_origin(mut self, origin: Vec<usize>) -> Result<Self> {
        if origin.len() != self.len() {
            return Err(Error::shape("one origin index per point required"));
        }
        self.origin = Some(origin);
        Ok(self)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        PointCloud::new(Tensor::from_rows(rows)?)
    }

    /// Up to `max_points` rows of `pixels`, drawn without replacement.
    pub fn subsample(pixels: &Tensor, max_points: usize, seed: u64) -> Result<Self> {
        let pixels = pixels.as_matrix();
        let n = pixels.rows();
        let mut idx: Vec<usize> = if n <= max_points {
            (0..n).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample(&mut rng, n, max_points).into_vec()
        };
        idx.sort_unstable();
        PointCloud::new(pixels.select_rows(&idx))?.with_origin(idx)
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    pub fn origin(&self) -> Option<&[usize]> {
        self.origin.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    /// Per-coordinate mean.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for r in 0..self.len() {
            for (a, b) in m.iter_mut().zip(self.points.row(r)) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|a| *a /= self.len() as f64);
        m
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CostKind {
    #[default]
    SquaredEuclidean,
    Euclidean,
}

/// Pairwise cost matrix `J[i][j] = c(x_i, y_j)`.
pub fn cost_matrix(src: &PointCloud, tgt: &PointCloud, kind: CostKind) -> Result<Tensor> {
    if src.dim() != tgt.dim() {
        return Err(Error::shape(format!(
            "clouds of dimension {} and {}",
            src.dim(),
            tgt.dim()
        )));
    }
    let (n, m) = (src.len(), tgt.len());
    let mut j = Tensor::zeros(&[n, m]);
    for a in 0..n {
        let x = src.points.row(a);
        for b in 0..m {
            let d2: f64 = x
                .iter()
                .zip(tgt.points.row(b))
                .map(|(p, q)| (p - q) * (p - q))
                .sum();
            j.data_mut()[a * m + b] = match kind {
                CostKind::SquaredEuclidean => d2,
                CostKind::Euclidean => d2.sqrt(),
            };
        }
    }
    Ok(j)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolverKind {
    BruteForce,
    Assignment,
    Sinkhorn,
    SinkhornLog,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverInfo {
    pub kind: SolverKind,
    pub epsilon: Option<f64>,
    pub iterations: usize,
    /// Final marginal residual (L1 over both marginals).
    pub residual: f64,
    /// Residual after every iteration at the final ε.
    pub residual_trace: Vec<f64>,
}

/// A coupling between two clouds. Each source point carries mass 1 and
/// each target point mass `n/m`, so square uniform plans are bi-stochastic.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub coupling: Tensor,
    pub source: PointCloud,
    pub target: PointCloud,
    /// `⟨J, Σ⟩`
    pub cost: f64,
    /// Target index of each source point for permutation plans.
    pub assignment: Option<Vec<usize>>,
    pub info: SolverInfo,
}

/// Optimal permutation by enumerating all `n!` candidates.
pub fn brute_force_assignment(cost: &Tensor) -> Result<(Vec<usize>, f64)> {
    let n = square_size(cost)?;
    if n > BRUTE_FORCE_LIMIT {
        return Err(Error::invalid(format!(
            "exhaustive assignment limited to {BRUTE_FORCE_LIMIT} points, got {n}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = (perm.clone(), assignment_cost(cost, &perm));
    // Heap's algorithm
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            let v = assignment_cost(cost, &perm);
            if v < best.1 {
                best = (perm.clone(), v);
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(best)
}

/// Optimal permutation via the shortest-augmenting-path Hungarian method,
/// `O(n³)`.
pub fn hungarian(cost: &Tensor) -> Result<(Vec<usize>, f64)> {
    let n = square_size(cost)?;
    if n > ASSIGNMENT_LIMIT {
        return Err(Error::invalid(format!(
            "assignment solver limited to {ASSIGNMENT_LIMIT} points, got {n}"
        )));
    }
    let a = |i: usize, j: usize| cost.data()[(i - 1) * n + (j - 1)];
    // 1-based potentials; column 0 is a virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    let c = assignment_cost(cost, &perm);
    Ok((perm, c))
}

fn square_size(cost: &Tensor) -> Result<usize> {
    if cost.shape().len() != 2 || cost.rows() != cost.cols() {
        return Err(Error::shape(format!(
            "assignment needs a square cost matrix, got {:?}",
            cost.shape()
        )));
    }
    if !cost.all_finite() {
        return Err(Error::NonFinite("cost matrix".into()));
    }
    Ok(cost.rows())
}

fn assignment_cost(cost: &Tensor, perm: &[usize]) -> f64 {
    let n = perm.len();
    perm.iter()
        .enumerate()
        .map(|(i, &j)| cost.data()[i * n + j])
        .sum()
}

/// Cost-minimal permutation plan between equal-size clouds.
pub fn solve_exact_ot(src: &PointCloud, tgt: &PointCloud, kind: CostKind) -> Result<TransportPlan> {
    if src.len() != tgt.len() {
        return Err(Error::shape(format!(
            "exact transport needs equal sizes, got {} and {}",
            src.len(),
            tgt.len()
        )));
    }
    let j = cost_matrix(src, tgt, kind)?;
    let (solver, (perm, cost)) = if src.len() <= BRUTE_FORCE_LIMIT {
        (SolverKind::BruteForce, brute_force_assignment(&j)?)
    } else {
        (SolverKind::Assignment, hungarian(&j)?)
    };
    let n = src.len();
    let mut coupling = Tensor::zeros(&[n, n]);
    for (i, &t) in perm.iter().enumerate() {
        coupling.data_mut()[i * n + t] = 1.0;
    }
    Ok(TransportPlan {
        coupling,
        source: src.clone(),
        target: tgt.clone(),
        cost,
        assignment: Some(perm),
        info: SolverInfo {
            kind: solver,
            epsilon: None,
            iterations: 0,
            residual: 0.0,
            residual_trace: Vec::new(),
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub cost: CostKind,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: 0.01,
            max_iters: 10_000,
            tol: 1e-6,
            cost: CostKind::SquaredEuclidean,
        }
    }
}

/// Median of the entries of a cost matrix.
pub fn median_cost(cost: &Tensor) -> f64 {
    let mut v = cost.data().to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Entropic OT by Sinkhorn iteration on `exp(−J/ε)`. Switches to
/// log-domain updates when the kernel underflows.
pub fn solve_entropic_ot(
    src: &PointCloud,
    tgt: &PointCloud,
    cfg: &SinkhornConfig,
) -> Result<TransportPlan> {
    if !(cfg.epsilon > 0.0) {
        return Err(Error::invalid(format!(
            "epsilon must be positive, got {}",
            cfg.epsilon
        )));
    }
    let j = cost_matrix(src, tgt, cfg.cost)?;
    let (n, m) = (src.len(), tgt.len());
    let a = vec![1.0; n];
    let b = vec![n as f64 / m as f64; m];
    // a kernel spanning many orders of magnitude converges slowly and
    // underflows in the plain form
    let spread = j.data().iter().cloned().fold(0.0, f64::max) / cfg.epsilon;
    let plan = if spread < 50.0 {
        sinkhorn_plain(&j, &a, &b, cfg).or_else(|_| sinkhorn_log(&j, &a, &b, cfg))?
    } else {
        sinkhorn_log(&j, &a, &b, cfg)?
    };
    let (coupling, info) = plan;
    if !(info.residual < cfg.tol) {
        return Err(Error::Convergence {
            what: format!("sinkhorn after {} iterations", info.iterations),
            final_loss: info.residual,
        });
    }
    let cost = j
        .data()
        .iter()
        .zip(coupling.data())
        .map(|(c, p)| c * p)
        .sum();
    Ok(TransportPlan {
        coupling,
        source: src.clone(),
        target: tgt.clone(),
        cost,
        assignment: None,
        info,
    })
}

fn marginal_residual(p: &Tensor, a: &[f64], b: &[f64]) -> f64 {
    let m = b.len();
    let mut cols = vec![0.0; m];
    let mut res = 0.0;
    for (i, ai) in a.iter().enumerate() {
        let row = &p.data()[i * m..(i + 1) * m];
        res += (row.iter().sum::<f64>() - ai).abs();
        for (c, v) in cols.iter_mut().zip(row) {
            *c += v;
        }
    }
    res + cols
        .iter()
        .zip(b)
        .map(|(c, bj)| (c - bj).abs())
        .sum::<f64>()
}

type Solved = (Tensor, SolverInfo);

fn sinkhorn_plain(j: &Tensor, a: &[f64], b: &[f64], cfg: &SinkhornConfig) -> Result<Solved> {
    let (n, m) = (a.len(), b.len());
    let k = j.map(|c| (-c / cfg.epsilon).exp());
    // a row or column without mass cannot be rescaled
    for i in 0..n {
        if k.row(i).iter().all(|&v| v < 1e-250) {
            return Err(Error::NonFinite("Gibbs kernel underflow".into()));
        }
    }
    for jj in 0..m {
        if (0..n).all(|i| k.data()[i * m + jj] < 1e-250) {
            return Err(Error::NonFinite("Gibbs kernel underflow".into()));
        }
    }
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let mut trace = Vec::new();
    let mut p = Tensor::zeros(&[n, m]);
    for _ in 0..cfg.max_iters {
        for i in 0..n {
            let kv: f64 = k.row(i).iter().zip(&v).map(|(x, y)| x * y).sum();
            u[i] = a[i] / kv;
        }
        for jj in 0..m {
            let ku: f64 = (0..n).map(|i| k.data()[i * m + jj] * u[i]).sum();
            v[jj] = b[jj] / ku;
        }
        if u.iter().chain(&v).any(|x| !x.is_finite() || *x == 0.0) {
            return Err(Error::NonFinite("Sinkhorn scaling".into()));
        }
        for i in 0..n {
            for jj in 0..m {
                p.data_mut()[i * m + jj] = u[i] * k.data()[i * m + jj] * v[jj];
            }
        }
        let r = marginal_residual(&p, a, b);
        trace.push(r);
        if r < cfg.tol {
            break;
        }
    }
    let info = SolverInfo {
        kind: SolverKind::Sinkhorn,
        epsilon: Some(cfg.epsilon),
        iterations: trace.len(),
        residual: *trace.last().unwrap_or(&f64::INFINITY),
        residual_trace: trace,
    };
    Ok((p, info))
}

fn log_plan(f: &[f64], g: &[f64], j: &Tensor, eps: f64, p: &mut Tensor) {
    let m = g.len();
    for (i, fi) in f.iter().enumerate() {
        for (jj, gj) in g.iter().enumerate() {
            p.data_mut()[i * m + jj] = ((fi + gj - j.data()[i * m + jj]) / eps).exp();
        }
    }
}

/// Log-domain updates with ε-scaling: the potentials are warm-started
/// through a geometric sequence of larger ε before the target value.
fn sinkhorn_log(j: &Tensor, a: &[f64], b: &[f64], cfg: &SinkhornConfig) -> Result<Solved> {
    let (n, m) = (a.len(), b.len());
    let (la, lb): (Vec<f64>, Vec<f64>) = (
        a.iter().map(|x| x.ln()).collect(),
        b.iter().map(|x| x.ln()).collect(),
    );
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut buf = vec![0.0; n.max(m)];
    let mut p = Tensor::zeros(&[n, m]);

    let top = j
        .data()
        .iter()
        .cloned()
        .fold(0.0, f64::max)
        .max(cfg.epsilon);
    let mut stages = vec![cfg.epsilon];
    while *stages.last().expect("non-empty") < top {
        let next = stages.last().expect("non-empty") * 4.0;
        stages.push(next);
    }
    stages.reverse();

    let mut trace = Vec::new();
    let mut used = 0;
    for (s, &eps) in stages.iter().enumerate() {
        let last = s + 1 == stages.len();
        let tol = if last { cfg.tol } else { cfg.tol.max(1e-3) };
        if !last {
            trace.clear();
        }
        while used < cfg.max_iters {
            used += 1;
            for i in 0..n {
                for jj in 0..m {
                    buf[jj] = (g[jj] - j.data()[i * m + jj]) / eps;
                }
                f[i] = eps * (la[i] - log_sum_exp(&buf[..m]));
            }
            for jj in 0..m {
                for i in 0..n {
                    buf[i] = (f[i] - j.data()[i * m + jj]) / eps;
                }
                g[jj] = eps * (lb[jj] - log_sum_exp(&buf[..n]));
            }
            log_plan(&f, &g, j, eps, &mut p);
            let r = marginal_residual(&p, a, b);
            if !r.is_finite() {
                return Err(Error::NonFinite("log-domain Sinkhorn".into()));
            }
            trace.push(r);
            if r < tol {
                break;
            }
        }
    }
    let info = SolverInfo {
        kind: SolverKind::SinkhornLog,
        epsilon: Some(cfg.epsilon),
        iterations: used,
        residual: *trace.last().unwrap_or(&f64::INFINITY),
        residual_trace: trace,
    };
    Ok((p, info))
}

/// Barycentric image minus source position, one row per source point.
pub fn barycentric_displacements(plan: &TransportPlan) -> Result<Tensor> {
    let (n, m) = (plan.source.len(), plan.target.len());
    if plan.coupling.shape() != [n, m] {
        return Err(Error::shape("coupling does not match its clouds"));
    }
    let d = plan.source.dim();
    let mut out = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let row = plan.coupling.row(i);
        let mass: f64 = row.iter().sum();
        if !(mass > 0.0) {
            return Err(Error::invalid(format!("source point {i} carries no mass")));
        }
        let o = out.row_mut(i);
        for (jj, w) in row.iter().enumerate() {
            if *w != 0.0 {
                for (k, y) in plan.target.points.row(jj).iter().enumerate() {
                    o[k] += w * y;
                }
            }
        }
        for (k, x) in plan.source.points.row(i).iter().enumerate() {
            o[k] = o[k] / mass - x;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothingConfig {
    pub lambda: f64,
    pub k_neighbors: usize,
    pub iterations: usize,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig {
            lambda: 1.0,
            k_neighbors: 8,
            iterations: 3,
        }
    }
}

fn nearest_neighbors(points: &Tensor, k: usize) -> Vec<Vec<usize>> {
    let n = points.rows();
    (0..n)
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let s: f64 = points
                        .row(i)
                        .iter()
                        .zip(points.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (s, j)
                })
                .collect();
            d.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            d.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

/// Blends each displacement with the mean of its `k` nearest neighbors
/// (in source color space): `d ← (d + λ·mean_nbr)/(1 + λ)`.
pub fn smooth_displacement(
    points: &Tensor,
    displacements: &Tensor,
    cfg: &SmoothingConfig,
) -> Result<Tensor> {
    if cfg.k_neighbors == 0 {
        return Err(Error::invalid("k_neighbors must be at least 1"));
    }
    if !(cfg.lambda >= 0.0) {
        return Err(Error::invalid("lambda must be non-negative"));
    }
    if points.rows() != displacements.rows() {
        return Err(Error::shape("one displacement per point required"));
    }
    if cfg.lambda == 0.0 || points.rows() < 2 {
        return Ok(displacements.clone());
    }
    let nbrs = nearest_neighbors(points, cfg.k_neighbors);
    let w = 1.0 / (1.0 + cfg.lambda);
    let mut d = displacements.clone();
    for _ in 0..cfg.iterations {
        let prev = d.clone();
        for (i, nb) in nbrs.iter().enumerate() {
            let row = d.row_mut(i);
            for (k, v) in row.iter_mut().enumerate() {
                let mean = nb.iter().map(|&j| prev.row(j)[k]).sum::<f64>() / nb.len() as f64;
                *v = w * prev.row(i)[k] + (1.0 - w) * mean;
            }
        }
    }
    Ok(d)
}

/// Maps the colors of `image` (`[..., d]`, values in `[0, 1]`) by moving
/// each pixel with the displacement of its nearest source sample.
pub fn apply_color_map(
    plan: &TransportPlan,
    image: &Tensor,
    smoothing: Option<&SmoothingConfig>,
) -> Result<Tensor> {
    if plan.source.is_empty() || plan.target.is_empty() {
        return Err(Error::invalid("empty transport plan"));
    }
    let d = plan.source.dim();
    if image.shape().last() != Some(&d) {
        return Err(Error::shape(format!(
            "image channels {:?} do not match cloud dimension {d}",
            image.shape().last()
        )));
    }
    let mut disp = barycentric_displacements(plan)?;
    if let Some(cfg) = smoothing {
        disp = smooth_displacement(plan.source.points(), &disp, cfg)?;
    }
    let src = plan.source.points();
    let mut out = image.clone();
    for px in out.data_mut().chunks_exact_mut(d) {
        let mut best = (f64::INFINITY, 0);
        for i in 0..src.rows() {
            let s: f64 = px
                .iter()
                .zip(src.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if s < best.0 {
                best = (s, i);
            }
        }
        for (v, dv) in px.iter_mut().zip(disp.row(best.1)) {
            *v = (*v + dv).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Settings for per-image color pre-adaptation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorAdaptConfig {
    /// Target-domain pixels sampled per plan.
    pub samples: usize,
    /// Sinkhorn ε as a fraction of the median cost.
    pub relative_epsilon: f64,
    pub smoothing: SmoothingConfig,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for ColorAdaptConfig {
    fn default() -> Self {
        ColorAdaptConfig {
            samples: 1024,
            relative_epsilon: 0.05,
            smoothing: SmoothingConfig::default(),
            max_iters: 5000,
            tol: 1e-4,
        }
    }
}

/// Moves the colors of one `[h, w, 3]` image in `[0, 1]` toward the
/// target pixel pool (`[n, 3]`).
pub fn color_adapt(
    image: &Tensor,
    target_pixels: &Tensor,
    cfg: &ColorAdaptConfig,
    seed: u64,
) -> Result<Tensor> {
    let d = *image
        .shape()
        .last()
        .ok_or_else(|| Error::shape("scalar image"))?;
    let pixels = image.clone().reshape(&[image.len() / d, d])?;
    let src = PointCloud::subsample(&pixels, cfg.samples, seed)?;
    let tgt = PointCloud::subsample(target_pixels, cfg.samples, seed.wrapping_add(1))?;
    let j = cost_matrix(&src, &tgt, CostKind::SquaredEuclidean)?;
    let med = median_cost(&j);
    let eps = if med > 0.0 {
        cfg.relative_epsilon * med
    } else {
        1e-3
    };
    let plan = solve_entropic_ot(
        &src,
        &tgt,
        &SinkhornConfig {
            epsilon: eps,
            max_iters: cfg.max_iters,
            tol: cfg.tol,
            cost: CostKind::SquaredEuclidean,
        },
    )?;
    apply_color_map(&plan, image, Some(&cfg.smoothing))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_cloud(n: usize, d: usize, rng: &mut ChaCha8Rng) -> PointCloud {
        let data = (0..n * d).map(|_| rng.gen::<f64>()).collect();
        PointCloud::new(Tensor::new(vec![n, d], data).unwrap()).unwrap()
    }

    #[test]
    fn swap_beats_identity() {
        let src = PointCloud::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let tgt = PointCloud::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let plan = solve_exact_ot(&src, &tgt, CostKind::SquaredEuclidean).unwrap();
        assert_eq!(plan.assignment, Some(vec![1, 0]));
        assert_eq!(plan.cost, 0.0);
        let j = cost_matrix(&src, &tgt, CostKind::SquaredEuclidean).unwrap();
        assert_eq!(assignment_cost(&j, &[0, 1]), 2.0);
    }

    #[test]
    fn identical_clouds_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_cloud(6, 3, &mut rng);
        let plan = solve_exact_ot(&c, &c, CostKind::SquaredEuclidean).unwrap();
        assert_eq!(plan.assignment, Some((0..6).collect()));
        assert_eq!(plan.cost, 0.0);
    }

    #[test]
    fn hungarian_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (a, b) = (random_cloud(7, 3, &mut rng), random_cloud(7, 3, &mut rng));
            let j = cost_matrix(&a, &b, CostKind::SquaredEuclidean).unwrap();
            let (p1, c1) = hungarian(&j).unwrap();
            let (p2, c2) = brute_force_assignment(&j).unwrap();
            assert_eq!(p1, p2);
            assert!((c1 - c2).abs() < 1e-12);
        }
    }

    #[test]
    fn size_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = (random_cloud(3, 3, &mut rng), random_cloud(4, 3, &mut rng));
        assert!(solve_exact_ot(&a, &b, CostKind::SquaredEuclidean).is_err());
        assert!(PointCloud::from_rows(&[vec![1.5]]).is_err());
    }

    #[test]
    fn sinkhorn_close_to_exact_with_log_fallback() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, b) = (random_cloud(8, 3, &mut rng), random_cloud(8, 3, &mut rng));
        let exact = solve_exact_ot(&a, &b, CostKind::SquaredEuclidean).unwrap();
        let j = cost_matrix(&a, &b, CostKind::SquaredEuclidean).unwrap();
        let cfg = SinkhornConfig {
            epsilon: 0.01 * median_cost(&j),
            max_iters: 200_000,
            ..Default::default()
        };
        let plan = solve_entropic_ot(&a, &b, &cfg).unwrap();
        assert!(plan.info.residual < 1e-6);
        assert!(exact.cost <= plan.cost + 1e-12);
        assert!(
            plan.cost <= 1.05 * exact.cost,
            "{} vs {}",
            plan.cost,
            exact.cost
        );
        assert!(plan.coupling.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn residual_trace_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, b) = (random_cloud(20, 3, &mut rng), random_cloud(30, 3, &mut rng));
        let plan = solve_entropic_ot(
            &a,
            &b,
            &SinkhornConfig {
                epsilon: 0.05,
                ..Default::default()
            },
        )
        .unwrap();
        let t = &plan.info.residual_trace;
        assert!(
            t.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-15),
            "{t:?}"
        );
    }

    #[test]
    fn huge_epsilon_gives_product_coupling() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (a, b) = (random_cloud(5, 3, &mut rng), random_cloud(5, 3, &mut rng));
        let plan = solve_entropic_ot(
            &a,
            &b,
            &SinkhornConfig {
                epsilon: 1e6,
                ..Default::default()
            },
        )
        .unwrap();
        // unit masses on a 5×5 plan: the product coupling is 1/5 everywhere
        assert!(plan.coupling.data().iter().all(|&v| (v - 0.2).abs() < 1e-3));
    }

    #[test]
    fn single_point_shift() {
        let src = PointCloud::from_rows(&[vec![0.2, 0.2, 0.2]]).unwrap();
        let tgt = PointCloud::from_rows(&[vec![0.7, 0.7, 0.7]]).unwrap();
        let plan = solve_exact_ot(&src, &tgt, CostKind::SquaredEuclidean).unwrap();
        let img = Tensor::full(&[4, 4, 3], 0.2);
        let out = apply_color_map(&plan, &img, None).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn identity_plan_leaves_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = Tensor::new(vec![4, 4, 3], (0..48).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let c = PointCloud::new(img.clone().reshape(&[16, 3]).unwrap()).unwrap();
        let plan = solve_exact_ot(&c, &c, CostKind::SquaredEuclidean).unwrap();
        let once = apply_color_map(&plan, &img, Some(&SmoothingConfig::default())).unwrap();
        assert!(once.max_abs_diff(&img) < 1e-9);
        let twice = apply_color_map(&plan, &once, None).unwrap();
        assert!(twice.max_abs_diff(&once) < 1e-9);
    }

    #[test]
    fn smoothing_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts = random_cloud(12, 3, &mut rng).points().clone();
        let d = Tensor::new(vec![12, 3], (0..36).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let off = SmoothingConfig {
            lambda: 0.0,
            ..Default::default()
        };
        assert_eq!(smooth_displacement(&pts, &d, &off).unwrap(), d);
        let c = Tensor::full(&[12, 3], 0.3);
        let s = smooth_displacement(
            &pts,
            &c,
            &SmoothingConfig {
                lambda: 5.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(s.max_abs_diff(&c) < 1e-15);
        assert!(smooth_displacement(
            &pts,
            &d,
            &SmoothingConfig {
                k_neighbors: 0,
                ..Default::default()
            }
        )
        .is_err());
    }
}
