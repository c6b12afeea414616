//! Linear baselines: PCA and k-means.
//!
//! PCA is computed from scratch with a cyclic Jacobi eigensolver on the
//! covariance matrix, switching to the N×N Gram matrix when there are
//! fewer samples than features (the eigenvectors map back through Xᵀu).
//! k-means uses k-means++ seeding, Lloyd iterations with empty-cluster
//! repair, and a fixed number of restarts; restarts own derived PRNG
//! substreams and may run in parallel, with ties broken by the lowest
//! restart index so results never depend on scheduling.

use crate::ndgrad::{matmul_nn, matmul_nt, matmul_tn};
use crate::parallel::par_map_indexed;
use crate::rng::StreamRng;
use crate::{Error, Result};

// ───────────────────────── Jacobi eigensolver ─────────────────────────

/// Eigendecomposition of a symmetric matrix by the cyclic Jacobi method.
///
/// Returns `(eigenvalues, eigenvectors)` sorted by descending eigenvalue;
/// `eigenvectors` is row-major `n × n` with the k-th eigenvector in
/// *column* k. Sweeps run until the off-diagonal Frobenius norm falls
/// below `1e-12 · max(1, ‖A‖_F)`.
pub fn jacobi_eigh(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != n * n {
        return Err(Error::Shape {
            op: "jacobi_eigh",
            detail: format!("expected {n}x{n}, got length {}", a.len()),
        });
    }
    let mut m = a.to_vec();
    // Symmetry guard: the algorithm silently mangles asymmetric input.
    for p in 0..n {
        for q in (p + 1)..n {
            if (m[p * n + q] - m[q * n + p]).abs() > 1e-9 * frob(&m).max(1.0) {
                return Err(Error::numerical("jacobi_eigh: matrix is not symmetric"));
            }
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let tol = 1e-12 * frob(&m).max(1.0);
    const MAX_SWEEPS: usize = 100;
    for _sweep in 0..MAX_SWEEPS {
        if off_norm(&m, n) < tol {
            let mut vals: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
            sort_eigenpairs(&mut vals, &mut v, n);
            return Ok((vals, v));
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                // Classical rotation angle choice (numerically stable form).
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                // Rotate rows/columns p and q of m.
                for i in 0..n {
                    let mip = m[i * n + p];
                    let miq = m[i * n + q];
                    m[i * n + p] = c * mip - s * miq;
                    m[i * n + q] = s * mip + c * miq;
                }
                for j in 0..n {
                    let mpj = m[p * n + j];
                    let mqj = m[q * n + j];
                    m[p * n + j] = c * mpj - s * mqj;
                    m[q * n + j] = s * mpj + c * mqj;
                }
                // Accumulate the rotation into the eigenvector columns.
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }
    Err(Error::numerical(
        "jacobi_eigh did not converge within 100 sweeps",
    ))
}

fn frob(m: &[f64]) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn off_norm(m: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for p in 0..n {
        for q in 0..n {
            if p != q {
                s += m[p * n + q] * m[p * n + q];
            }
        }
    }
    s.sqrt()
}

/// Sort eigenvalues descending, permuting the eigenvector columns along.
fn sort_eigenpairs(vals: &mut [f64], vecs: &mut [f64], n: usize) {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| vals[j].partial_cmp(&vals[i]).unwrap());
    let old_vals = vals.to_vec();
    let old_vecs = vecs.to_vec();
    for (new_col, &old_col) in order.iter().enumerate() {
        vals[new_col] = old_vals[old_col];
        for i in 0..n {
            vecs[i * n + new_col] = old_vecs[i * n + old_col];
        }
    }
}

// ───────────────────────── PCA ─────────────────────────

/// Fitted PCA basis.
#[derive(Debug, Clone)]
pub struct PcaModel {
    /// Feature means, length `d`.
    pub mean: Vec<f64>,
    /// Row-major `d × p` matrix with orthonormal principal directions in
    /// columns.
    pub components: Vec<f64>,
    /// Variance along each kept component, descending.
    pub explained_variances: Vec<f64>,
    /// Number of kept components (may be fewer than requested when the
    /// data are rank-deficient).
    pub p: usize,
    pub d: usize,
    /// True when rank deficiency forced `p` below the request.
    pub truncated: bool,
}

/// Eigenvalues below `RANK_EPS · λ_max` are treated as numerical zeros.
const RANK_EPS: f64 = 1e-10;

/// Fit a `p`-component PCA to `n` samples of dimension `d` (row-major).
///
/// When `n < d` the N×N Gram matrix is eigendecomposed instead of the
/// d×d covariance and the eigenvectors are mapped back through `Xᵀu`,
/// which is exact and much cheaper for wide data.
pub fn pca_fit(x: &[f64], n: usize, d: usize, p: usize) -> Result<PcaModel> {
    if x.len() != n * d {
        return Err(Error::Shape {
            op: "pca_fit",
            detail: format!("expected {n}x{d}, got length {}", x.len()),
        });
    }
    if n < 2 {
        return Err(Error::Config("pca_fit needs at least 2 samples".into()));
    }
    if p == 0 || p > d {
        return Err(Error::Config(format!(
            "pca_fit: requested {p} components for {d} features"
        )));
    }
    let mut mean = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut xc = x.to_vec();
    for row in xc.chunks_exact_mut(d) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let denom = (n - 1) as f64;

    let (mut vals, mut comps): (Vec<f64>, Vec<f64>) = if n >= d {
        // Covariance route: C = XᵀX / (n−1), d × d.
        let mut c = vec![0.0; d * d];
        matmul_tn(&xc, &xc, n, d, d, &mut c);
        for v in &mut c {
            *v /= denom;
        }
        let (vals, vecs) = jacobi_eigh(&c, d)?;
        (vals, vecs) // columns are already directions in feature space
    } else {
        // Gram route: G = XXᵀ / (n−1), n × n; C shares its nonzero
        // spectrum and v = Xᵀu / ‖Xᵀu‖ recovers feature-space directions.
        let mut g = vec![0.0; n * n];
        matmul_nt(&xc, &xc, n, d, n, &mut g);
        for v in &mut g {
            *v /= denom;
        }
        let (vals, u) = jacobi_eigh(&g, n)?;
        // Map the needed columns back to feature space (d × n layout, only
        // the leading columns get filled below).
        let mut vecs = vec![0.0; d * n];
        for col in 0..n {
            let lambda = vals[col];
            if lambda <= 0.0 {
                continue;
            }
            let scale = 1.0 / (lambda * denom).sqrt();
            for i in 0..n {
                let u_ic = u[i * n + col];
                if u_ic != 0.0 {
                    let row = &xc[i * d..(i + 1) * d];
                    for (j, xv) in row.iter().enumerate() {
                        vecs[j * n + col] += xv * u_ic * scale;
                    }
                }
            }
        }
        (vals, vecs)
    };

    // Drop numerically-zero eigenvalues (rank deficiency).
    let n_cols = if n >= d { d } else { n };
    let lambda_max = vals.first().copied().unwrap_or(0.0).max(0.0);
    let rank = vals
        .iter()
        .take_while(|&&l| l > RANK_EPS * lambda_max && l > 0.0)
        .count();
    let keep = p.min(rank);
    let truncated = keep < p;
    if truncated {
        log::warn!("pca_fit: rank deficiency, keeping {keep} of {p} requested components");
    }
    if keep == 0 {
        return Err(Error::numerical("pca_fit: data has rank 0"));
    }
    vals.truncate(keep);
    // Repack the kept columns into a d × keep matrix.
    let mut components = vec![0.0; d * keep];
    for j in 0..d {
        for c in 0..keep {
            components[j * keep + c] = comps[j * n_cols + c];
        }
    }
    let _ = &mut comps;
    Ok(PcaModel {
        mean,
        components,
        explained_variances: vals,
        p: keep,
        d,
        truncated,
    })
}

impl PcaModel {
    /// Project `n` rows into the component space: `(x − mean) @ V`.
    pub fn project(&self, x: &[f64], n: usize) -> Result<Vec<f64>> {
        if x.len() != n * self.d {
            return Err(Error::Shape {
                op: "PcaModel::project",
                detail: format!("expected {n}x{}, got length {}", self.d, x.len()),
            });
        }
        let mut xc = x.to_vec();
        for row in xc.chunks_exact_mut(self.d) {
            for (v, m) in row.iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        let mut z = vec![0.0; n * self.p];
        matmul_nn(&xc, &self.components, n, self.d, self.p, &mut z);
        Ok(z)
    }

    /// Map projections back to feature space: `z @ Vᵀ + mean`.
    pub fn reconstruct(&self, z: &[f64], n: usize) -> Result<Vec<f64>> {
        if z.len() != n * self.p {
            return Err(Error::Shape {
                op: "PcaModel::reconstruct",
                detail: format!("expected {n}x{}, got length {}", self.p, z.len()),
            });
        }
        let mut x = vec![0.0; n * self.d];
        // components is d × p; x = z @ componentsᵀ.
        matmul_nt(z, &self.components, n, self.p, self.d, &mut x);
        for row in x.chunks_exact_mut(self.d) {
            for (v, m) in row.iter_mut().zip(&self.mean) {
                *v += m;
            }
        }
        Ok(x)
    }
}

// ───────────────────────── k-means ─────────────────────────

/// Tuning knobs for [`kmeans`]; the defaults match the experiment protocol.
#[derive(Debug, Clone)]
pub struct KMeansOptions {
    pub restarts: usize,
    pub max_iter: usize,
    /// Relative inertia-change convergence threshold.
    pub tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        KMeansOptions {
            restarts: 10,
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

/// Outcome of a k-means fit (the best of all restarts).
#[derive(Debug, Clone)]
pub struct KMeansResult {
    /// Row-major `k × d`.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to assigned centroids.
    pub inertia: f64,
    /// Lloyd iterations used by the winning restart.
    pub n_iter: usize,
    /// Which restart won (lowest inertia, ties to the lowest index).
    pub best_restart: usize,
}

/// k-means++ / Lloyd clustering of `n` points of dimension `d`.
///
/// Runs `opts.restarts` independent restarts (parallel under the
/// `parallel` feature), each seeded from its own substream of
/// `(seed, "kmeans")`, and returns the lowest-inertia solution.
pub fn kmeans(
    x: &[f64],
    n: usize,
    d: usize,
    k: usize,
    seed: u64,
    opts: &KMeansOptions,
) -> Result<KMeansResult> {
    if x.len() != n * d {
        return Err(Error::Shape {
            op: "kmeans",
            detail: format!("expected {n}x{d}, got length {}", x.len()),
        });
    }
    if k == 0 || k > n {
        return Err(Error::Config(format!("kmeans: k={k} with n={n}")));
    }
    if opts.restarts == 0 {
        return Err(Error::Config("kmeans: restarts must be >= 1".into()));
    }
    let runs: Vec<(Vec<f64>, Vec<usize>, f64, usize)> = par_map_indexed(opts.restarts, |r| {
        let mut rng = StreamRng::substream(seed, "kmeans", r as u64);
        let centroids = plus_plus_seed(x, n, d, k, &mut rng);
        lloyd(x, n, d, k, centroids, opts)
    });
    let mut best = 0;
    for r in 1..runs.len() {
        if runs[r].2 < runs[best].2 {
            best = r;
        }
    }
    let (centroids, assignments, inertia, n_iter) = runs.into_iter().nth(best).unwrap();
    Ok(KMeansResult {
        centroids,
        assignments,
        inertia,
        n_iter,
        best_restart: best,
    })
}

/// k-means++ seeding: first centroid uniform, the rest drawn with
/// probability proportional to the squared distance to the nearest
/// already-chosen centroid.
fn plus_plus_seed(x: &[f64], n: usize, d: usize, k: usize, rng: &mut StreamRng) -> Vec<f64> {
    let mut centroids = Vec::with_capacity(k * d);
    let first = rng.below(n);
    centroids.extend_from_slice(&x[first * d..(first + 1) * d]);
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(&x[i * d..(i + 1) * d], &centroids[0..d]))
        .collect();
    while centroids.len() < k * d {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.uniform() * total;
            let mut chosen = n - 1;
            for (i, w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All remaining mass is zero (duplicate points): uniform pick.
            rng.below(n)
        };
        let new = &x[pick * d..(pick + 1) * d];
        centroids.extend_from_slice(new);
        for (i, slot) in d2.iter_mut().enumerate() {
            let dist = sq_dist(&x[i * d..(i + 1) * d], new);
            if dist < *slot {
                *slot = dist;
            }
        }
    }
    centroids
}

/// Lloyd iterations from given initial centroids. Exposed at crate level
/// so tests can drive degenerate starting points directly.
pub(crate) fn lloyd(
    x: &[f64],
    n: usize,
    d: usize,
    k: usize,
    mut centroids: Vec<f64>,
    opts: &KMeansOptions,
) -> (Vec<f64>, Vec<usize>, f64, usize) {
    let mut assignments = vec![0usize; n];
    let mut prev_inertia = f64::INFINITY;
    let mut inertia;
    let mut iters = 0;
    for it in 0..opts.max_iter {
        iters = it + 1;
        // Assignment step (nearest centroid, ties to the lowest index).
        inertia = 0.0;
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let dist = sq_dist(row, &centroids[c * d..(c + 1) * d]);
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            assignments[i] = best;
            inertia += best_d;
        }

        // Update step.
        let mut counts = vec![0usize; k];
        let mut sums = vec![0.0; k * d];
        for i in 0..n {
            let c = assignments[i];
            counts[c] += 1;
            let row = &x[i * d..(i + 1) * d];
            for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(row) {
                *s += v;
            }
        }
        // Empty-cluster repair: give each empty cluster the point farthest
        // from its current centroid (each point used at most once).
        let mut stolen: Vec<usize> = Vec::new();
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far_i = usize::MAX;
            let mut far_d = -1.0;
            for i in 0..n {
                if stolen.contains(&i) {
                    continue;
                }
                let a = assignments[i];
                let dist = sq_dist(&x[i * d..(i + 1) * d], &centroids[a * d..(a + 1) * d]);
                if dist > far_d {
                    far_d = dist;
                    far_i = i;
                }
            }
            if far_i == usize::MAX {
                continue;
            }
            stolen.push(far_i);
            let old = assignments[far_i];
            let row = &x[far_i * d..(far_i + 1) * d];
            counts[old] -= 1;
            for (s, v) in sums[old * d..(old + 1) * d].iter_mut().zip(row) {
                *s -= v;
            }
            assignments[far_i] = c;
            counts[c] = 1;
            for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(row) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (ct, s) in centroids[c * d..(c + 1) * d]
                    .iter_mut()
                    .zip(&sums[c * d..(c + 1) * d])
                {
                    *ct = s * inv;
                }
            }
        }

        // Convergence on relative inertia change.
        if prev_inertia.is_finite() {
            let denom = prev_inertia.max(f64::MIN_POSITIVE);
            if ((prev_inertia - inertia) / denom).abs() < opts.tol {
                break;
            }
        }
        prev_inertia = inertia;
    }
    // Final consistent assignment/inertia for the returned centroids.
    inertia = 0.0;
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let dist = sq_dist(row, &centroids[c * d..(c + 1) * d]);
            if dist < best_d {
                best_d = dist;
                best = c;
            }
        }
        assignments[i] = best;
        inertia += best_d;
    }
    (centroids, assignments, inertia, iters)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// PCA to `p` dimensions followed by k-means with `k` clusters: the
/// classical linear baseline. Returns the cluster result together with
/// the fitted basis.
pub fn pca_kmeans_pipeline(
    x: &[f64],
    n: usize,
    d: usize,
    p: usize,
    k: usize,
    seed: u64,
    opts: &KMeansOptions,
) -> Result<(KMeansResult, PcaModel)> {
    let pca = pca_fit(x, n, d, p)?;
    let z = pca.project(x, n)?;
    let km = kmeans(&z, n, pca.p, k, seed, opts)?;
    Ok((km, pca))
}
