//! Input groups for multicalibration: embeddings of (input, response) are
//! projected onto their leading principal components and soft-clustered by a
//! Gaussian mixture whose size is chosen by BIC.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CalibrationError, Membership, GLOBAL_GROUP};
use crate::backends::EmbedClient;
use crate::exec::Execution;
use crate::model::{Dataset, SplitAssignment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupOrigin {
    Global,
    Cluster(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub group_id: u32,
    pub member_ids: BTreeSet<String>,
    pub origin: GroupOrigin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSet {
    pub groups: Vec<Group>,
    pub embedding_dim: usize,
    pub reducer_dim: usize,
    pub gmm_components: usize,
    pub model: GroupingModel,
}

impl GroupSet {
    /// Group ids of each listed example; unknown ids get the Global group only.
    pub fn membership(&self, ids: &[String]) -> Membership {
        ids.iter()
            .map(|id| {
                let mut gs: Vec<u32> = self
                    .groups
                    .iter()
                    .filter(|g| g.origin == GroupOrigin::Global || g.member_ids.contains(id))
                    .map(|g| g.group_id)
                    .collect();
                gs.sort_unstable();
                gs
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupingConfig {
    pub reducer_dim: usize,
    pub max_components: usize,
    /// Minimum posterior responsibility for cluster membership.
    pub membership_threshold: f64,
    pub reg_covar: f64,
    pub em_max_iter: usize,
    pub em_tol: f64,
    pub seed: u64,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self {
            reducer_dim: 8,
            max_components: 10,
            membership_threshold: 0.2,
            reg_covar: 1e-6,
            em_max_iter: 500,
            em_tol: 1e-6,
            seed: 0,
        }
    }
}

/// Full-covariance Gaussian mixture. Covariances are row-major d×d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<f64>>,
    pub log_likelihood: f64,
    pub bic: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Cholesky factor and log-determinant of one component, for densities.
struct Factor {
    l: DMatrix<f64>,
    log_det: f64,
}

fn factor(cov: &DMatrix<f64>) -> Option<Factor> {
    let chol = cov.clone().cholesky()?;
    let l = chol.l();
    let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    log_det.is_finite().then_some(Factor { l, log_det })
}

fn log_gaussian(x: &DVector<f64>, mean: &DVector<f64>, f: &Factor) -> f64 {
    let d = x.len() as f64;
    let diff = x - mean;
    let z = f.l.solve_lower_triangular(&diff).expect("factor is nonsingular");
    -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + f.log_det + z.norm_squared())
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl GaussianMixture {
    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// Free parameters: mixing weights, means and symmetric covariances.
    pub fn n_parameters(k: usize, d: usize) -> usize {
        (k - 1) + k * d + k * d * (d + 1) / 2
    }

    fn factors(&self) -> Result<Vec<Factor>, String> {
        let d = self.dim();
        self.covariances
            .iter()
            .enumerate()
            .map(|(c, cov)| factor(&DMatrix::from_row_slice(d, d, cov)).ok_or_else(|| format!("component {c} covariance is not positive definite")))
            .collect()
    }

    fn log_joint(&self, x: &DVector<f64>, factors: &[Factor]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(factors)
            .map(|((w, m), f)| w.ln() + log_gaussian(x, &DVector::from_column_slice(m), f))
            .collect()
    }

    /// Posterior component probabilities of one point.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>, String> {
        let factors = self.factors()?;
        let lj = self.log_joint(&DVector::from_column_slice(x), &factors);
        let total = log_sum_exp(&lj);
        Ok(lj.iter().map(|v| (v - total).exp()).collect())
    }

    /// Fits `k` components by EM from a k-means++ / Lloyd initialization.
    pub fn fit(points: &[DVector<f64>], k: usize, cfg: &GroupingConfig) -> Result<Self, String> {
        let n = points.len();
        if k == 0 || k > n {
            return Err(format!("cannot fit {k} components to {n} points"));
        }
        let d = points[0].len();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(k as u64));
        let centers = kmeans(points, k, &mut rng);
        let assign: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
        let mut resp = DMatrix::<f64>::zeros(n, k);
        for (i, &c) in assign.iter().enumerate() {
            resp[(i, c)] = 1.0;
        }
        let mut gm = Self {
            weights: vec![],
            means: vec![],
            covariances: vec![],
            log_likelihood: f64::NEG_INFINITY,
            bic: f64::INFINITY,
            converged: false,
            iterations: 0,
        };
        gm.m_step(points, &resp, cfg.reg_covar);
        let mut prev = f64::NEG_INFINITY;
        for iter in 1..=cfg.em_max_iter {
            let ll = gm.e_step(points, &mut resp)?;
            gm.m_step(points, &resp, cfg.reg_covar);
            gm.iterations = iter;
            if (ll - prev).abs() < cfg.em_tol {
                gm.converged = true;
                break;
            }
            prev = ll;
        }
        let ll = gm.e_step(points, &mut resp)?;
        gm.log_likelihood = ll * n as f64;
        gm.bic = -2.0 * gm.log_likelihood + Self::n_parameters(k, d) as f64 * (n as f64).ln();
        Ok(gm)
    }

    /// Fills responsibilities; returns the mean log-likelihood.
    fn e_step(&self, points: &[DVector<f64>], resp: &mut DMatrix<f64>) -> Result<f64, String> {
        let factors = self.factors()?;
        let mut total = 0.0;
        for (i, x) in points.iter().enumerate() {
            let lj = self.log_joint(x, &factors);
            let lse = log_sum_exp(&lj);
            for (c, v) in lj.iter().enumerate() {
                resp[(i, c)] = (v - lse).exp();
            }
            total += lse;
        }
        let mean = total / points.len() as f64;
        if mean.is_finite() {
            Ok(mean)
        } else {
            Err("non-finite log-likelihood".into())
        }
    }

    fn m_step(&mut self, points: &[DVector<f64>], resp: &DMatrix<f64>, reg: f64) {
        let n = points.len();
        let k = resp.ncols();
        let d = points[0].len();
        self.weights.clear();
        self.means.clear();
        self.covariances.clear();
        for c in 0..k {
            let nk = resp.column(c).sum() + 10.0 * f64::EPSILON;
            let mut mean = DVector::<f64>::zeros(d);
            for (i, x) in points.iter().enumerate() {
                mean += x * resp[(i, c)];
            }
            mean /= nk;
            let mut cov = DMatrix::<f64>::zeros(d, d);
            for (i, x) in points.iter().enumerate() {
                let diff = x - &mean;
                cov += (&diff * diff.transpose()) * resp[(i, c)];
            }
            cov /= nk;
            for j in 0..d {
                cov[(j, j)] += reg;
            }
            self.weights.push(nk / n as f64);
            self.means.push(mean.iter().copied().collect());
            self.covariances.push(cov.transpose().iter().copied().collect());
        }
    }
}

fn nearest(p: &DVector<f64>, centers: &[DVector<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, m) in centers.iter().enumerate() {
        let dist = (p - m).norm_squared();
        if dist < best_d {
            best_d = dist;
            best = c;
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations.
fn kmeans(points: &[DVector<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    while centers.len() < k {
        let d2: Vec<f64> = points.iter().map(|p| centers.iter().map(|c| (p - c).norm_squared()).fold(f64::INFINITY, f64::min)).collect();
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, v) in d2.iter().enumerate() {
                if u < *v {
                    pick = i;
                    break;
                }
                u -= v;
            }
            pick
        } else {
            centers.len() % n
        };
        centers.push(points[next].clone());
    }
    for _ in 0..50 {
        let assign: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
        let mut sums = vec![DVector::<f64>::zeros(points[0].len()); k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assign) {
            sums[c] += p;
            counts[c] += 1;
        }
        let mut moved = false;
        for c in 0..k {
            if counts[c] > 0 {
                let m = &sums[c] / counts[c] as f64;
                if m != centers[c] {
                    moved = true;
                    centers[c] = m;
                }
            }
        }
        if !moved {
            break;
        }
    }
    centers
}

/// Leading principal directions by subspace iteration, followed by a
/// Rayleigh–Ritz rotation. Rows of the result are unit directions sorted by
/// decreasing variance, each signed so its largest entry is positive.
fn principal_directions(x: &DMatrix<f64>, r: usize, seed: u64) -> DMatrix<f64> {
    let d = x.ncols();
    if x.norm_squared() == 0.0 {
        return DMatrix::identity(r, d);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = DMatrix::from_fn(d, r, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    let mut q = init.qr().q();
    for _ in 0..1000 {
        let z = x.transpose() * (x * &q);
        let next = z.qr().q();
        let residual = (&next - &q * (q.transpose() * &next)).norm();
        q = next;
        if residual < 1e-12 {
            break;
        }
    }
    let xq = x * &q;
    let small = xq.transpose() * &xq;
    let eig = small.symmetric_eigen();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut out = DMatrix::<f64>::zeros(r, d);
    for (row, &j) in order.iter().enumerate() {
        let mut v = &q * eig.eigenvectors.column(j);
        let pivot = v.iter().copied().fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
        if pivot < 0.0 {
            v = -v;
        }
        out.row_mut(row).copy_from(&v.transpose());
    }
    out
}

/// Fitted projection plus mixture, enough to assign groups to new examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupingModel {
    pub mean: Vec<f64>,
    /// Row-major reducer_dim × embedding_dim projection.
    pub projection: Vec<Vec<f64>>,
    pub mixture: GaussianMixture,
    pub membership_threshold: f64,
    /// BIC per candidate component count (1-based index); `None` where EM failed.
    pub bic_by_components: Vec<Option<f64>>,
}

impl GroupingModel {
    pub fn fit(embeddings: &[Vec<f64>], cfg: &GroupingConfig) -> Result<Self, CalibrationError> {
        let n = embeddings.len();
        if n == 0 {
            return Err(CalibrationError::EmptyFold);
        }
        let d = embeddings[0].len();
        if d == 0 || embeddings.iter().any(|e| e.len() != d) {
            return Err(CalibrationError::Mixture("embeddings have inconsistent dimensions".into()));
        }
        let mut mean = vec![0.0; d];
        for e in embeddings {
            for (m, v) in mean.iter_mut().zip(e) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered = DMatrix::from_fn(n, d, |i, j| embeddings[i][j] - mean[j]);
        let r = cfg.reducer_dim.min(d).max(1);
        let p = principal_directions(&centered, r, cfg.seed);
        let projection: Vec<Vec<f64>> = p.row_iter().map(|row| row.iter().copied().collect()).collect();
        let reduced: Vec<DVector<f64>> = (0..n).map(|i| &p * centered.row(i).transpose()).collect();

        let max_k = cfg.max_components.min(n).max(1);
        let mut best: Option<GaussianMixture> = None;
        let mut bic_by_components = Vec::with_capacity(max_k);
        let mut last_err = String::new();
        for k in 1..=max_k {
            match GaussianMixture::fit(&reduced, k, cfg) {
                Ok(gm) if gm.converged => {
                    bic_by_components.push(Some(gm.bic));
                    if best.as_ref().is_none_or(|b| gm.bic < b.bic) {
                        best = Some(gm);
                    }
                }
                Ok(gm) => {
                    log::warn!("mixture with {k} components did not converge in {} iterations; skipped", gm.iterations);
                    last_err = format!("{k} components did not converge");
                    bic_by_components.push(None);
                }
                Err(e) => {
                    log::warn!("mixture with {k} components failed: {e}");
                    last_err = e;
                    bic_by_components.push(None);
                }
            }
        }
        let mixture = best.ok_or(CalibrationError::Mixture(last_err))?;
        Ok(Self {
            mean,
            projection,
            mixture,
            membership_threshold: cfg.membership_threshold,
            bic_by_components,
        })
    }

    pub fn reduce(&self, embedding: &[f64]) -> Vec<f64> {
        self.projection
            .iter()
            .map(|row| row.iter().zip(embedding.iter().zip(&self.mean)).map(|(p, (e, m))| p * (e - m)).sum())
            .collect()
    }

    /// Group ids of an embedding: Global plus every cluster whose
    /// responsibility reaches the threshold.
    pub fn assign(&self, embedding: &[f64]) -> Result<Vec<u32>, CalibrationError> {
        if embedding.len() != self.mean.len() {
            return Err(CalibrationError::Mixture(format!(
                "embedding dimension {} but model expects {}",
                embedding.len(),
                self.mean.len()
            )));
        }
        let resp = self.mixture.responsibilities(&self.reduce(embedding)).map_err(CalibrationError::Mixture)?;
        let mut out = vec![GLOBAL_GROUP];
        out.extend(resp.iter().enumerate().filter(|(_, r)| **r >= self.membership_threshold).map(|(c, _)| c as u32 + 1));
        Ok(out)
    }

    pub fn membership(&self, embeddings: &[Vec<f64>]) -> Result<Membership, CalibrationError> {
        embeddings.iter().map(|e| self.assign(e)).collect()
    }
}

/// Concatenated [embed(input), embed(response)] per example id.
pub fn embed_dataset(d: &Dataset, embedder: &EmbedClient, exec: Execution) -> Result<BTreeMap<String, Vec<f64>>, CalibrationError> {
    let results = exec.map(&d.examples, |ex| {
        let x = embedder.embed(&ex.input)?;
        let z = embedder.embed(&ex.response)?;
        let mut e = x.values;
        e.extend(z.values);
        Ok::<_, crate::backends::BackendError>(e)
    });
    d.examples
        .iter()
        .zip(results)
        .map(|(ex, r)| {
            r.map(|e| (ex.id.clone(), e)).map_err(|source| CalibrationError::Embedding {
                id: ex.id.clone(),
                source,
            })
        })
        .collect()
}

/// Fits the grouping model on the calibration fold and assigns every example.
pub fn build_groups_from_embeddings(
    ids: &[String],
    embeddings: &BTreeMap<String, Vec<f64>>,
    split: &SplitAssignment,
    cfg: &GroupingConfig,
) -> Result<GroupSet, CalibrationError> {
    let lookup = |id: &String| {
        embeddings
            .get(id)
            .ok_or_else(|| CalibrationError::Mixture(format!("no embedding for {id}")))
    };
    let fold: Vec<Vec<f64>> = ids
        .iter()
        .filter(|id| split.is_calibration(id))
        .map(|id| lookup(id).cloned())
        .collect::<Result<_, _>>()?;
    if fold.is_empty() {
        return Err(CalibrationError::EmptyFold);
    }
    let model = GroupingModel::fit(&fold, cfg)?;
    let k = model.mixture.n_components();
    let mut groups = vec![Group {
        group_id: GLOBAL_GROUP,
        member_ids: ids.iter().cloned().collect(),
        origin: GroupOrigin::Global,
    }];
    groups.extend((0..k).map(|c| Group {
        group_id: c as u32 + 1,
        member_ids: BTreeSet::new(),
        origin: GroupOrigin::Cluster(c),
    }));
    for id in ids {
        for g in model.assign(lookup(id)?)? {
            if g != GLOBAL_GROUP {
                groups[g as usize].member_ids.insert(id.clone());
            }
        }
    }
    Ok(GroupSet {
        groups,
        embedding_dim: model.mean.len(),
        reducer_dim: model.projection.len(),
        gmm_components: k,
        model,
    })
}

pub fn build_groups(
    d: &Dataset,
    split: &SplitAssignment,
    embedder: &EmbedClient,
    cfg: &GroupingConfig,
    exec: Execution,
) -> Result<GroupSet, CalibrationError> {
    if !d.examples.iter().any(|e| split.is_calibration(&e.id)) {
        return Err(CalibrationError::EmptyFold);
    }
    let embeddings = embed_dataset(d, embedder, exec)?;
    build_groups_from_embeddings(&d.ids(), &embeddings, split, cfg)
}
