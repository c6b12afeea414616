//! Dataset handling: synthetic multi-site generation, matrix-directory
//! ingestion, vectorization, normalization, caching, and stratified splits.
//!
//! The synthetic generator plants a known structure in log space —
//! a fixed template, low-rank continuous "biological" variation, a
//! per-site mean shift of controllable strength, and i.i.d. noise —
//! then rounds to counts, so every downstream clustering claim can be
//! scored against ground truth. All randomness comes from named streams
//! of one master seed; changing one knob never reshuffles the others.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read as _, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ndgrad::matmul_nt;
use crate::rng::StreamRng;
use crate::{Error, Result};

// ───────────────────────── Types ─────────────────────────

/// How raw counts were mapped into `[0,1]`, with enough information to
/// invert the mapping and to apply it to held-out data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormManifest {
    /// Transform kind; currently always `"log1p_maxscale"`.
    pub transform: String,
    /// Global maximum of `ln(1+count)` over the fitted split.
    pub global_max: f64,
}

/// A ready-to-train dataset: normalized rows, site labels, and metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectomeDataset {
    /// Row-major `n × d`, every entry in `[0,1]`.
    pub x: Vec<f64>,
    pub n: usize,
    pub d: usize,
    /// Site label per row, contiguous `0..n_sites`, each present at least once.
    pub site: Vec<usize>,
    pub n_sites: usize,
    /// Stable per-row identifiers (file stems for ingested data).
    pub subject_ids: Vec<String>,
    /// Optional per-row covariates (e.g. a synthetic "age").
    pub meta: Option<Vec<BTreeMap<String, String>>>,
    pub norm: NormManifest,
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_subjects: usize,
    /// Feature (edge) count D.
    pub n_edges: usize,
    pub n_sites: usize,
    /// Rank of the continuous factor model.
    pub bio_rank: usize,
    /// Scale ρ of the per-site mean shift in log space.
    pub site_strength: f64,
    pub noise_sd: f64,
    pub seed: u64,
    /// When set, site sizes are drawn from a symmetric Dirichlet with this
    /// concentration instead of being balanced round-robin; small values
    /// give strongly unbalanced cohorts.
    pub site_concentration: Option<f64>,
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        if self.n_subjects < 1 || self.n_edges < 1 || self.n_sites < 1 || self.bio_rank < 1 {
            return Err(Error::Config(
                "synthetic config: all counts must be >= 1".into(),
            ));
        }
        if self.site_strength < 0.0 || self.noise_sd < 0.0 {
            return Err(Error::Config(
                "synthetic config: site_strength and noise_sd must be >= 0".into(),
            ));
        }
        if self.n_sites > self.n_subjects {
            return Err(Error::Config(format!(
                "synthetic config: {} sites but only {} subjects",
                self.n_sites, self.n_subjects
            )));
        }
        if self.n_sites > self.n_edges {
            return Err(Error::Config(
                "synthetic config: orthogonal site directions need n_sites <= n_edges".into(),
            ));
        }
        if let Some(alpha) = self.site_concentration {
            if !(alpha > 0.0) {
                return Err(Error::Config(
                    "synthetic config: site_concentration must be > 0".into(),
                ));
            }
        }
        Ok(())
    }
}

// ───────────────────────── Generation ─────────────────────────

/// Generate a synthetic multi-site count dataset and normalize it.
///
/// Log-space model per subject `i`:
/// `y_i = B + W·u_i + ρ·M[site_i] + ε_i`, with template `B ~ U[1,6]^D`,
/// loadings `W ∈ R^{D×r}` with entries `N(0, 1/r²)` (so the continuous
/// channel has per-edge variance `1/r` — small enough that a strong site
/// shift is geometrically dominant, which the planted-structure tests
/// rely on), factors `u_i ~ N(0, I_r)`, orthonormal unit site directions
/// `M[s]`, and `ε_i ~ N(0, noise_sd²)`.
/// Counts are `max(round(exp(y) − 1), 0)`. Deterministic given the seed.
pub fn generate(cfg: &SyntheticConfig) -> Result<ConnectomeDataset> {
    cfg.validate()?;
    let (n, d, s, r) = (cfg.n_subjects, cfg.n_edges, cfg.n_sites, cfg.bio_rank);

    let site = assign_sites(cfg)?;

    let mut template = StreamRng::new(cfg.seed, "template");
    let b: Vec<f64> = (0..d).map(|_| template.uniform_in(1.0, 6.0)).collect();

    let mut loadings = StreamRng::new(cfg.seed, "w");
    let entry_sd = 1.0 / r as f64;
    let w: Vec<f64> = (0..d * r).map(|_| loadings.normal() * entry_sd).collect();

    let m = orthonormal_rows(s, d, &mut StreamRng::new(cfg.seed, "m"))?;

    let mut factors = StreamRng::new(cfg.seed, "u");
    let u: Vec<f64> = (0..n * r).map(|_| factors.normal()).collect();

    // y starts as the low-rank part u·Wᵀ, then the rest is added in place.
    let mut y = vec![0.0; n * d];
    matmul_nt(&u, &w, n, r, d, &mut y);

    let mut eps = StreamRng::new(cfg.seed, "eps");
    for i in 0..n {
        let shift = &m[site[i] * d..(site[i] + 1) * d];
        for j in 0..d {
            let v = b[j] + y[i * d + j] + cfg.site_strength * shift[j]
                + cfg.noise_sd * eps.normal();
            y[i * d + j] = (v.exp() - 1.0).round().max(0.0);
        }
    }

    let (x, norm) = normalize(&y)?;

    let mut meta_rng = StreamRng::new(cfg.seed, "meta");
    let meta: Vec<BTreeMap<String, String>> = (0..n)
        .map(|_| {
            let age = (meta_rng.uniform_in(20.0, 80.0) * 10.0).round() / 10.0;
            BTreeMap::from([("age".to_string(), format!("{age}"))])
        })
        .collect();
    let subject_ids = (0..n).map(|i| format!("synth-{i:05}")).collect();

    let ds = ConnectomeDataset {
        x,
        n,
        d,
        site,
        n_sites: s,
        subject_ids,
        meta: Some(meta),
        norm,
    };
    ds.validate()?;
    Ok(ds)
}

/// Site labels: balanced round-robin by default, Dirichlet-sized blocks
/// (shuffled) when an imbalance concentration is configured. Every site
/// always receives at least one subject.
fn assign_sites(cfg: &SyntheticConfig) -> Result<Vec<usize>> {
    let (n, s) = (cfg.n_subjects, cfg.n_sites);
    let Some(alpha) = cfg.site_concentration else {
        return Ok((0..n).map(|i| i % s).collect());
    };
    let mut rng = StreamRng::new(cfg.seed, "sites");
    // Symmetric Dirichlet via normalized Gamma draws.
    let gams: Vec<f64> = (0..s).map(|_| rng.gamma(alpha)).collect();
    let total: f64 = gams.iter().sum();
    if !(total > 0.0) {
        return Err(Error::numerical("site proportions degenerate"));
    }
    // Largest-remainder apportionment with a floor of 1 per site.
    let spare = n - s;
    let quotas: Vec<f64> = gams.iter().map(|g| g / total * spare as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| 1 + q.floor() as usize).collect();
    let mut assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut k = 0;
    while assigned < n {
        counts[order[k % s]] += 1;
        assigned += 1;
        k += 1;
    }
    let mut labels = Vec::with_capacity(n);
    for (sid, &c) in counts.iter().enumerate() {
        labels.extend(std::iter::repeat(sid).take(c));
    }
    rng.shuffle(&mut labels);
    Ok(labels)
}

/// Gram–Schmidt orthonormalized Gaussian rows: `s` unit vectors in `R^d`.
fn orthonormal_rows(s: usize, d: usize, rng: &mut StreamRng) -> Result<Vec<f64>> {
    let mut m = vec![0.0; s * d];
    for row in 0..s {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for prev in 0..row {
            let p = &m[prev * d..(prev + 1) * d];
            let dot: f64 = v.iter().zip(p).map(|(a, b)| a * b).sum();
            for (vi, pi) in v.iter_mut().zip(p) {
                *vi -= dot * pi;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::numerical(
                "site directions degenerate during orthonormalization",
            ));
        }
        for (slot, vi) in m[row * d..(row + 1) * d].iter_mut().zip(&v) {
            *slot = vi / norm;
        }
    }
    Ok(m)
}

// ───────────────────────── Normalization ─────────────────────────

/// Map nonnegative counts to `[0,1]` via `ln(1+count) / G`, `G` the global
/// max of `ln(1+count)`. Returns the data and the manifest needed to invert
/// or reapply the transform.
pub fn normalize(counts: &[f64]) -> Result<(Vec<f64>, NormManifest)> {
    if counts.iter().any(|&c| c < 0.0 || !c.is_finite()) {
        return Err(Error::numerical(
            "normalize: counts must be finite and nonnegative",
        ));
    }
    let g = counts.iter().map(|&c| c.ln_1p()).fold(0.0f64, f64::max);
    if g <= 0.0 {
        return Err(Error::numerical("normalize: all counts are zero"));
    }
    let manifest = NormManifest {
        transform: "log1p_maxscale".to_string(),
        global_max: g,
    };
    Ok((apply_norm(counts, &manifest), manifest))
}

/// Apply a fitted normalization to (possibly held-out) counts. Values that
/// exceed the fitted maximum clamp to 1 so the `[0,1]` invariant holds.
pub fn apply_norm(counts: &[f64], manifest: &NormManifest) -> Vec<f64> {
    counts
        .iter()
        .map(|&c| (c.ln_1p() / manifest.global_max).min(1.0))
        .collect()
}

/// Invert the normalization back to (real-valued) counts.
pub fn denormalize(x: &[f64], manifest: &NormManifest) -> Vec<f64> {
    x.iter()
        .map(|&v| (v * manifest.global_max).exp_m1())
        .collect()
}

// ───────────────────────── Vectorization ─────────────────────────

/// Flatten a symmetric `r × r` matrix to its row-major strict upper
/// triangle (`i < j`), or upper triangle including the diagonal when
/// `include_diagonal` is set.
pub fn vectorize(mat: &[f64], r: usize, include_diagonal: bool) -> Result<Vec<f64>> {
    if mat.len() != r * r {
        return Err(Error::Shape {
            op: "vectorize",
            detail: format!("expected {r}x{r}, got length {}", mat.len()),
        });
    }
    let mut out = Vec::with_capacity(vector_len(r, include_diagonal));
    for i in 0..r {
        let start = if include_diagonal { i } else { i + 1 };
        for j in start..r {
            out.push(mat[i * r + j]);
        }
    }
    Ok(out)
}

/// Number of entries produced by [`vectorize`] for an `r × r` matrix.
pub fn vector_len(r: usize, include_diagonal: bool) -> usize {
    if include_diagonal {
        r * (r + 1) / 2
    } else {
        r * (r - 1) / 2
    }
}

/// Rebuild the symmetric `r × r` matrix from its vectorized form; the
/// diagonal is zero when it was excluded.
pub fn devectorize(v: &[f64], r: usize, include_diagonal: bool) -> Result<Vec<f64>> {
    if v.len() != vector_len(r, include_diagonal) {
        return Err(Error::Shape {
            op: "devectorize",
            detail: format!(
                "expected {} entries for r={r}, got {}",
                vector_len(r, include_diagonal),
                v.len()
            ),
        });
    }
    let mut mat = vec![0.0; r * r];
    let mut k = 0;
    for i in 0..r {
        let start = if include_diagonal { i } else { i + 1 };
        for j in start..r {
            mat[i * r + j] = v[k];
            mat[j * r + i] = v[k];
            k += 1;
        }
    }
    Ok(mat)
}

// ───────────────────────── Ingestion ─────────────────────────

/// Load per-subject square CSV matrices plus `metadata.csv` from a
/// directory into a normalized dataset.
///
/// `pattern` is a filename glob supporting `*` (e.g. `"*.csv"`);
/// `metadata.csv` itself is always excluded. Matrices are vectorized by
/// strict upper triangle; asymmetric input is symmetrized as `(A+Aᵀ)/2`
/// with a logged warning. Site labels are mapped to contiguous integers
/// in sorted label order.
pub fn load_matrix_dir(dir: &Path, pattern: &str) -> Result<ConnectomeDataset> {
    let meta_rows = read_metadata(&dir.join("metadata.csv"))?;

    let mut files: Vec<String> = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io_at(e, dir))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io_at(e, dir))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if name != "metadata.csv" && glob_match(pattern, &name) {
            files.push(name);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Ingest(format!(
            "no matrix files matching {pattern:?} in {}",
            dir.display()
        )));
    }

    let mut r_seen: Option<usize> = None;
    let mut counts: Vec<f64> = Vec::new();
    let mut subject_ids = Vec::new();
    let mut site_names = Vec::new();
    let mut covariates = Vec::new();
    for name in &files {
        let path = dir.join(name);
        let subject = name
            .rsplit_once('.')
            .map(|(stem, _)| stem)
            .unwrap_or(name)
            .to_string();
        let mat = read_square_matrix(&path)?;
        let r = (mat.len() as f64).sqrt() as usize;
        if let Some(r0) = r_seen {
            if r != r0 {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    detail: format!("matrix is {r}x{r} but earlier files were {r0}x{r0}"),
                });
            }
        } else {
            r_seen = Some(r);
        }
        let sym = symmetrize(mat, r, &subject);
        let row = vectorize(&sym, r, false)?;
        if row.iter().any(|&c| c < 0.0) {
            return Err(Error::Ingest(format!(
                "subject {subject}: negative count in {}",
                path.display()
            )));
        }
        let Some((site, cov)) = meta_rows.get(&subject) else {
            return Err(Error::Ingest(format!(
                "no metadata row for subject {subject}"
            )));
        };
        counts.extend_from_slice(&row);
        subject_ids.push(subject);
        site_names.push(site.clone());
        covariates.push(cov.clone());
    }

    let r = r_seen.unwrap();
    let d = vector_len(r, false);
    let n = subject_ids.len();

    // Contiguous site labels in sorted name order, for reproducible ids.
    let mut uniq: Vec<String> = site_names.clone();
    uniq.sort();
    uniq.dedup();
    let index: BTreeMap<&str, usize> = uniq
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let site: Vec<usize> = site_names.iter().map(|s| index[s.as_str()]).collect();

    let (x, norm) = normalize(&counts)?;
    let ds = ConnectomeDataset {
        x,
        n,
        d,
        site,
        n_sites: uniq.len(),
        subject_ids,
        meta: Some(covariates),
        norm,
    };
    ds.validate()?;
    Ok(ds)
}

/// metadata.csv → subject id → (site name, covariates).
type MetaMap = BTreeMap<String, (String, BTreeMap<String, String>)>;

fn read_metadata(path: &Path) -> Result<MetaMap> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Ingest(format!("cannot read {}: {e}", path.display())))?;
    let headers = rdr.headers()?.clone();
    let mut cols = headers.iter();
    if cols.next() != Some("subject_id") || cols.next() != Some("site") {
        return Err(Error::Ingest(format!(
            "{}: header must start with subject_id,site",
            path.display()
        )));
    }
    let covariate_names: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
    let mut map = MetaMap::new();
    for record in rdr.records() {
        let record = record?;
        let subject = record.get(0).unwrap_or("").to_string();
        let site = record.get(1).unwrap_or("").to_string();
        if subject.is_empty() || site.is_empty() {
            return Err(Error::Ingest(format!(
                "{}: row with empty subject_id or site",
                path.display()
            )));
        }
        let cov: BTreeMap<String, String> = covariate_names
            .iter()
            .enumerate()
            .filter_map(|(k, name)| {
                record
                    .get(k + 2)
                    .map(|v| (name.clone(), v.to_string()))
            })
            .collect();
        map.insert(subject, (site, cov));
    }
    Ok(map)
}

fn read_square_matrix(path: &Path) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let row: std::result::Result<Vec<f64>, _> =
            record.iter().map(str::parse::<f64>).collect();
        let row = row.map_err(|e| Error::Format {
            path: path.display().to_string(),
            detail: format!("non-numeric entry: {e}"),
        })?;
        rows.push(row);
    }
    let r = rows.len();
    if r == 0 || rows.iter().any(|row| row.len() != r) {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!(
                "matrix is not square ({} rows, widths {:?})",
                r,
                rows.iter().map(Vec::len).take(4).collect::<Vec<_>>()
            ),
        });
    }
    Ok(rows.into_iter().flatten().collect())
}

fn symmetrize(mut mat: Vec<f64>, r: usize, subject: &str) -> Vec<f64> {
    let mut asym = 0.0f64;
    for i in 0..r {
        for j in (i + 1)..r {
            asym = asym.max((mat[i * r + j] - mat[j * r + i]).abs());
        }
    }
    if asym > 0.0 {
        log::warn!("subject {subject}: asymmetric matrix (max |A-At| = {asym}), symmetrizing");
        for i in 0..r {
            for j in (i + 1)..r {
                let v = 0.5 * (mat[i * r + j] + mat[j * r + i]);
                mat[i * r + j] = v;
                mat[j * r + i] = v;
            }
        }
    }
    mat
}

/// Minimal `*`-only glob matcher.
fn glob_match(pattern: &str, name: &str) -> bool {
    fn rec(p: &[u8], s: &[u8]) -> bool {
        match p.first() {
            None => s.is_empty(),
            Some(b'*') => (0..=s.len()).any(|k| rec(&p[1..], &s[k..])),
            Some(&c) => s.first() == Some(&c) && rec(&p[1..], &s[1..]),
        }
    }
    rec(pattern.as_bytes(), name.as_bytes())
}

// ───────────────────────── Cache file ─────────────────────────

const CACHE_MAGIC: &[u8; 5] = b"LFDS1";

#[derive(Serialize, Deserialize)]
struct CacheManifest {
    transform: String,
    global_max: f64,
    subject_ids: Vec<String>,
    meta: Option<Vec<BTreeMap<String, String>>>,
}

impl ConnectomeDataset {
    /// Check the dataset invariants (range, label contiguity, presence).
    pub fn validate(&self) -> Result<()> {
        if self.x.len() != self.n * self.d
            || self.site.len() != self.n
            || self.subject_ids.len() != self.n
        {
            return Err(Error::Shape {
                op: "ConnectomeDataset::validate",
                detail: format!(
                    "n={} d={} but x={} site={} ids={}",
                    self.n,
                    self.d,
                    self.x.len(),
                    self.site.len(),
                    self.subject_ids.len()
                ),
            });
        }
        if self.x.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::numerical("dataset values outside [0,1]"));
        }
        let mut seen = vec![false; self.n_sites];
        for &s in &self.site {
            if s >= self.n_sites {
                return Err(Error::Config(format!(
                    "site label {s} out of range 0..{}",
                    self.n_sites
                )));
            }
            seen[s] = true;
        }
        if !seen.iter().all(|&b| b) {
            return Err(Error::Config("some site has no subjects".into()));
        }
        Ok(())
    }

    /// Write the binary cache: magic, little-endian u64 `n, d, n_sites`,
    /// row-major f64 data, u32 site labels, JSON manifest.
    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io_at(e, path))?;
        let mut w = BufWriter::new(file);
        let io = |e: std::io::Error| Error::io_at(e, path);
        w.write_all(CACHE_MAGIC).map_err(io)?;
        for v in [self.n as u64, self.d as u64, self.n_sites as u64] {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        for v in &self.x {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        for &s in &self.site {
            w.write_all(&(s as u32).to_le_bytes()).map_err(io)?;
        }
        let manifest = CacheManifest {
            transform: self.norm.transform.clone(),
            global_max: self.norm.global_max,
            subject_ids: self.subject_ids.clone(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&manifest)?;
        w.write_all(&json).map_err(io)?;
        w.flush().map_err(io)?;
        Ok(())
    }

    /// Read a cache written by [`ConnectomeDataset::save_cache`].
    pub fn load_cache(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io_at(e, path))?;
        let mut rd = BufReader::new(file);
        let io = |e: std::io::Error| Error::io_at(e, path);
        let bad = |detail: String| Error::Format {
            path: path.display().to_string(),
            detail,
        };
        let mut magic = [0u8; 5];
        rd.read_exact(&mut magic).map_err(io)?;
        if &magic != CACHE_MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let mut u64buf = [0u8; 8];
        let mut read_u64 = |rd: &mut BufReader<fs::File>| -> Result<u64> {
            rd.read_exact(&mut u64buf).map_err(io)?;
            Ok(u64::from_le_bytes(u64buf))
        };
        let n = read_u64(&mut rd)? as usize;
        let d = read_u64(&mut rd)? as usize;
        let n_sites = read_u64(&mut rd)? as usize;
        let cells = n
            .checked_mul(d)
            .ok_or_else(|| bad("n*d overflows".into()))?;
        let mut x = vec![0.0f64; cells];
        let mut buf = [0u8; 8];
        for v in &mut x {
            rd.read_exact(&mut buf).map_err(io)?;
            *v = f64::from_le_bytes(buf);
        }
        let mut site = vec![0usize; n];
        let mut sbuf = [0u8; 4];
        for s in &mut site {
            rd.read_exact(&mut sbuf).map_err(io)?;
            *s = u32::from_le_bytes(sbuf) as usize;
        }
        let mut json = Vec::new();
        rd.read_to_end(&mut json).map_err(io)?;
        let manifest: CacheManifest = serde_json::from_slice(&json)
            .map_err(|e| bad(format!("manifest JSON: {e}")))?;
        if manifest.subject_ids.len() != n {
            return Err(bad(format!(
                "{} subject ids for {n} rows",
                manifest.subject_ids.len()
            )));
        }
        let ds = ConnectomeDataset {
            x,
            n,
            d,
            site,
            n_sites,
            subject_ids: manifest.subject_ids,
            meta: manifest.meta,
            norm: NormManifest {
                transform: manifest.transform,
                global_max: manifest.global_max,
            },
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Borrow row `i`.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    /// Subset by row indices (used by splits).
    fn take(&self, idx: &[usize]) -> ConnectomeDataset {
        let mut x = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            x.extend_from_slice(self.row(i));
        }
        ConnectomeDataset {
            x,
            n: idx.len(),
            d: self.d,
            site: idx.iter().map(|&i| self.site[i]).collect(),
            n_sites: self.n_sites,
            subject_ids: idx.iter().map(|&i| self.subject_ids[i].clone()).collect(),
            meta: self
                .meta
                .as_ref()
                .map(|m| idx.iter().map(|&i| m[i].clone()).collect()),
            norm: self.norm.clone(),
        }
    }
}

/// Split into (train, validation) stratified by site: each site
/// contributes `round(train_frac · n_s)` training rows (clamped so both
/// splits keep every site), so split proportions deviate from the global
/// fraction by less than one sample per site.
pub fn stratified_split(
    ds: &ConnectomeDataset,
    train_frac: f64,
    seed: u64,
) -> Result<(ConnectomeDataset, ConnectomeDataset)> {
    if !(0.0 < train_frac && train_frac < 1.0) {
        return Err(Error::Config(format!(
            "train_frac must be in (0,1), got {train_frac}"
        )));
    }
    let mut per_site: Vec<Vec<usize>> = vec![Vec::new(); ds.n_sites];
    for (i, &s) in ds.site.iter().enumerate() {
        per_site[s].push(i);
    }
    if per_site.iter().any(|v| v.len() < 2) {
        return Err(Error::Config(
            "stratified split needs at least 2 subjects per site".into(),
        ));
    }
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for (s, idx) in per_site.iter_mut().enumerate() {
        let mut rng = StreamRng::substream(seed, "split", s as u64);
        rng.shuffle(idx);
        let want = (train_frac * idx.len() as f64).round() as usize;
        let take = want.clamp(1, idx.len() - 1);
        train_idx.extend_from_slice(&idx[..take]);
        val_idx.extend_from_slice(&idx[take..]);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok((ds.take(&train_idx), ds.take(&val_idx)))
}
