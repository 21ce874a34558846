//! Homography estimation: normalized DLT, RANSAC and the iterative
//! RMSE-reduction loop.

use nalgebra::{Matrix3, SMatrix, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Keypoint, Match, RegistrationError, Result};

/// A 2-D point in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point2) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// A point correspondence: `src` in the moving image, `dst` in the reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub src: Point2,
    pub dst: Point2,
}

/// Projective transform with `h[2][2] == 1`, plus the consensus it was fit on.
#[derive(Debug, Clone, PartialEq)]
pub struct Homography {
    pub h: Matrix3<f64>,
    /// Indices of the correspondences classified as inliers.
    pub inliers: Vec<usize>,
    /// RMS reprojection error over `inliers`, in pixels.
    pub rmse: f64,
}

impl Homography {
    pub fn identity() -> Self {
        Self { h: Matrix3::identity(), inliers: Vec::new(), rmse: 0.0 }
    }

    /// Wraps a bare matrix, normalizing so that `h[2][2] == 1`.
    pub fn from_matrix(h: Matrix3<f64>) -> Result<Self> {
        Ok(Self { h: normalize_h(h)?, inliers: Vec::new(), rmse: 0.0 })
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        let mut h = Matrix3::identity();
        h[(0, 2)] = tx;
        h[(1, 2)] = ty;
        Self { h, inliers: Vec::new(), rmse: 0.0 }
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        apply_h(&self.h, p)
    }

    pub fn inverse(&self) -> Result<Homography> {
        let inv = self.h.try_inverse().ok_or(RegistrationError::SingularHomography)?;
        Homography::from_matrix(inv)
    }

    pub fn determinant(&self) -> f64 {
        self.h.determinant()
    }

    pub fn to_rows(&self) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.h[(r, c)];
            }
        }
        out
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::from_matrix(Matrix3::from_fn(|r, c| rows[r][c]))
    }
}

#[inline]
pub fn apply_h(h: &Matrix3<f64>, p: Point2) -> Point2 {
    let v = h * Vector3::new(p.x, p.y, 1.0);
    Point2::new(v.x / v.z, v.y / v.z)
}

fn normalize_h(h: Matrix3<f64>) -> Result<Matrix3<f64>> {
    let s = h[(2, 2)];
    if !s.is_finite() || s.abs() < 1e-12 {
        return Err(RegistrationError::DegenerateConfiguration);
    }
    let h = h / s;
    let det = h.determinant();
    if !det.is_finite() || det.abs() < 1e-12 {
        return Err(RegistrationError::SingularHomography);
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    /// Inlier threshold in pixels.
    pub threshold: f64,
    pub confidence: f64,
    pub max_iterations: usize,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self { threshold: 3.0, confidence: 0.995, max_iterations: 2000, min_inliers: 10, seed: 0 }
    }
}

/// Similarity transform moving the centroid to the origin with mean
/// distance √2.
fn normalizing_transform(points: impl Iterator<Item = Point2> + Clone) -> Matrix3<f64> {
    let n = points.clone().count().max(1) as f64;
    let (sx, sy) = points.clone().fold((0.0, 0.0), |(a, b), p| (a + p.x, b + p.y));
    let (cx, cy) = (sx / n, sy / n);
    let mean_d = points.map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt()).sum::<f64>() / n;
    let s = if mean_d > 1e-12 { std::f64::consts::SQRT_2 / mean_d } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Normalized direct linear transform over the selected correspondences.
pub fn dlt(pairs: &[Correspondence], idx: &[usize]) -> Result<Matrix3<f64>> {
    if idx.len() < 4 {
        return Err(RegistrationError::TooFewMatches { found: idx.len(), required: 4 });
    }
    let t_src = normalizing_transform(idx.iter().map(|&i| pairs[i].src));
    let t_dst = normalizing_transform(idx.iter().map(|&i| pairs[i].dst));
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for &i in idx {
        let s = apply_h(&t_src, pairs[i].src);
        let d = apply_h(&t_dst, pairs[i].dst);
        let r1 = [-s.x, -s.y, -1.0, 0.0, 0.0, 0.0, d.x * s.x, d.x * s.y, d.x];
        let r2 = [0.0, 0.0, 0.0, -s.x, -s.y, -1.0, d.y * s.x, d.y * s.y, d.y];
        for row in [r1, r2] {
            for a in 0..9 {
                for b in a..9 {
                    ata[(a, b)] += row[a] * row[b];
                }
            }
        }
    }
    for a in 0..9 {
        for b in 0..a {
            ata[(a, b)] = ata[(b, a)];
        }
    }
    let eig = SymmetricEigen::new(ata);
    let (k, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bk, bv), (k, &v)| if v < bv { (k, v) } else { (bk, bv) });
    let v = eig.eigenvectors.column(k);
    let hn = Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]);
    let t_dst_inv = t_dst.try_inverse().ok_or(RegistrationError::DegenerateConfiguration)?;
    normalize_h(t_dst_inv * hn * t_src)
}

fn residual(h: &Matrix3<f64>, c: &Correspondence) -> f64 {
    let p = apply_h(h, c.src);
    let d = p.dist(c.dst);
    if d.is_finite() {
        d
    } else {
        f64::INFINITY
    }
}

fn classify(h: &Matrix3<f64>, pairs: &[Correspondence], threshold: f64) -> Vec<usize> {
    (0..pairs.len()).filter(|&i| residual(h, &pairs[i]) < threshold).collect()
}

/// RMS reprojection error of `h` over the indexed correspondences.
pub fn rmse(h: &Matrix3<f64>, pairs: &[Correspondence], idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let ss: f64 = idx.iter().map(|&i| residual(h, &pairs[i]).powi(2)).sum();
    (ss / idx.len() as f64).sqrt()
}

fn collinear(a: Point2, b: Point2, c: Point2) -> bool {
    let cross = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
    let scale = a.dist(b).max(a.dist(c)).max(b.dist(c)).powi(2);
    cross.abs() <= 1e-6 * scale.max(1e-12)
}

fn sample_degenerate(pairs: &[Correspondence], s: &[usize; 4]) -> bool {
    for skip in 0..4 {
        let t: Vec<usize> = (0..4).filter(|&k| k != skip).map(|k| s[k]).collect();
        if collinear(pairs[t[0]].src, pairs[t[1]].src, pairs[t[2]].src)
            || collinear(pairs[t[0]].dst, pairs[t[1]].dst, pairs[t[2]].dst)
        {
            return true;
        }
    }
    false
}

/// RANSAC over minimal 4-point samples, then a normalized-DLT refit on the
/// consensus set.
pub fn estimate_homography_points(pairs: &[Correspondence], params: &RansacParams) -> Result<Homography> {
    let n = pairs.len();
    if n < 4 {
        return Err(RegistrationError::TooFewMatches { found: n, required: 4 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    // (inlier count, rmse, matrix, inliers)
    let mut best: Option<(usize, f64, Matrix3<f64>, Vec<usize>)> = None;
    let mut needed = params.max_iterations;
    let mut degenerate_draws = 0usize;
    let mut it = 0usize;
    while it < needed.min(params.max_iterations) {
        let mut s = [0usize; 4];
        let mut k = 0;
        while k < 4 {
            let c = rng.random_range(0..n);
            if !s[..k].contains(&c) {
                s[k] = c;
                k += 1;
            }
        }
        if sample_degenerate(pairs, &s) {
            degenerate_draws += 1;
            if degenerate_draws > 50 * params.max_iterations.max(1) {
                break;
            }
            continue;
        }
        it += 1;
        let Ok(h) = dlt(pairs, &s) else { continue };
        let inl = classify(&h, pairs, params.threshold);
        let e = rmse(&h, pairs, &inl);
        let better = match &best {
            None => true,
            Some((bc, be, _, _)) => inl.len() > *bc || (inl.len() == *bc && e < *be),
        };
        if better {
            let w = inl.len() as f64 / n as f64;
            best = Some((inl.len(), e, h, inl));
            let p_fail = 1.0 - w.powi(4);
            if p_fail <= f64::EPSILON {
                needed = it;
            } else if p_fail < 1.0 {
                let k = ((1.0 - params.confidence).ln() / p_fail.ln()).ceil();
                if k.is_finite() && k >= 0.0 {
                    needed = needed.min(k as usize);
                }
            }
        }
    }
    let Some((_, _, mut h, mut inliers)) = best else {
        return Err(RegistrationError::DegenerateConfiguration);
    };
    if inliers.len() < params.min_inliers.max(4) {
        return Err(RegistrationError::NoConsensus { inliers: inliers.len(), required: params.min_inliers });
    }
    // Refit on the consensus set until it stops changing.
    for _ in 0..5 {
        let refit = dlt(pairs, &inliers)?;
        let next = classify(&refit, pairs, params.threshold);
        if next.len() < params.min_inliers.max(4) {
            break;
        }
        h = refit;
        if next == inliers {
            break;
        }
        inliers = next;
    }
    let e = rmse(&h, pairs, &inliers);
    Ok(Homography { h, inliers, rmse: e })
}

/// Builds correspondences from matches between keypoint lists `a` (moving)
/// and `b` (reference).
pub fn correspondences(matches: &[Match], a: &[Keypoint], b: &[Keypoint]) -> Vec<Correspondence> {
    matches
        .iter()
        .map(|m| Correspondence {
            src: Point2::new(a[m.query_idx].x as f64, a[m.query_idx].y as f64),
            dst: Point2::new(b[m.train_idx].x as f64, b[m.train_idx].y as f64),
        })
        .collect()
}

pub fn estimate_homography(
    matches: &[Match],
    a: &[Keypoint],
    b: &[Keypoint],
    params: &RansacParams,
) -> Result<Homography> {
    estimate_homography_points(&correspondences(matches, a, b), params)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineParams {
    /// Starting threshold (usually the RANSAC threshold), in pixels.
    pub initial_threshold: f64,
    pub shrink: f64,
    pub floor: f64,
    /// Stop once an iteration improves RMSE by less than this many pixels.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for RefineParams {
    fn default() -> Self {
        Self { initial_threshold: 3.0, shrink: 0.8, floor: 1.0, tol: 1e-3, max_iter: 20 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub homography: Homography,
    /// RMSE of every accepted iterate, starting with the input.
    pub rmse_history: Vec<f64>,
    pub iterations: usize,
}

/// Iteratively reclassifies inliers at a shrinking threshold and refits.
///
/// Each candidate is scored on its inliers at `initial_threshold`, so
/// successive RMSEs are measured on comparable sets rather than shrinking
/// with the fitting threshold. A candidate is accepted only if it lowers the
/// RMSE by at least `tol`, so the history is non-increasing and the returned
/// homography is the best iterate seen.
pub fn refine_iteratively(h0: &Homography, pairs: &[Correspondence], params: &RefineParams) -> Result<Refinement> {
    let mut current = h0.clone();
    let mut history = vec![current.rmse];
    let mut threshold = params.initial_threshold;
    let mut iterations = 0;
    for _ in 0..params.max_iter {
        iterations += 1;
        threshold = (threshold * params.shrink).max(params.floor);
        let inl = classify(&current.h, pairs, threshold);
        if inl.len() < 4 {
            return Err(RegistrationError::NoConsensus { inliers: inl.len(), required: 4 });
        }
        let cand = dlt(pairs, &inl)?;
        let cand_inl = classify(&cand, pairs, params.initial_threshold);
        if cand_inl.len() < 4 {
            return Err(RegistrationError::NoConsensus { inliers: cand_inl.len(), required: 4 });
        }
        let cand_rmse = rmse(&cand, pairs, &cand_inl);
        let improvement = current.rmse - cand_rmse;
        if !(improvement >= params.tol) {
            break;
        }
        current = Homography { h: cand, inliers: cand_inl, rmse: cand_rmse };
        history.push(cand_rmse);
    }
    Ok(Refinement { homography: current, rmse_history: history, iterations })
}
