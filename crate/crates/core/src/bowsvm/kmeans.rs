use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::error::{Error, Result};
use crate::features::DescriptorKind;
use crate::numerics::{gemm, View};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 600,
            seed: 0,
            max_iters: 50,
            tol: 1e-6,
        }
    }
}

/// Visual vocabulary: `k` centroids of dimension `dim`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub centroids: Vec<f64>,
    pub k: usize,
    pub dim: usize,
    pub descriptor_kind: Option<DescriptorKind>,
    pub kmeans_seed: u64,
    /// Seed of the descriptor-pool subsample, when one was drawn.
    pub subsample_seed: Option<u64>,
    pub inertia: f64,
    /// Objective after each assignment step.
    pub objective: Vec<f64>,
}

impl Codebook {
    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    /// Index of the nearest centroid by exact squared distance; ties go to
    /// the lowest index.
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.centroids.chunks_exact(self.dim).enumerate() {
            let d = sq_dist(x, c);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            k: usize,
            dim: usize,
            descriptor_kind: Option<DescriptorKind>,
            kmeans_seed: u64,
            subsample_seed: Option<u64>,
            inertia: f64,
            objective: &'a [f64],
        }
        let h = Header {
            k: self.k,
            dim: self.dim,
            descriptor_kind: self.descriptor_kind,
            kmeans_seed: self.kmeans_seed,
            subsample_seed: self.subsample_seed,
            inertia: self.inertia,
            objective: &self.objective,
        };
        artifact::write_container(
            path,
            CODEBOOK_MAGIC,
            &h,
            &artifact::f64_bytes(self.centroids.iter().copied()),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            k: usize,
            dim: usize,
            descriptor_kind: Option<DescriptorKind>,
            kmeans_seed: u64,
            subsample_seed: Option<u64>,
            inertia: f64,
            objective: Vec<f64>,
        }
        let (h, payload): (Header, _) = artifact::read_container(path, CODEBOOK_MAGIC)?;
        let centroids = artifact::take_f64(&payload, &mut 0, h.k * h.dim)?;
        Ok(Self {
            centroids,
            k: h.k,
            dim: h.dim,
            descriptor_kind: h.descriptor_kind,
            kmeans_seed: h.kmeans_seed,
            subsample_seed: h.subsample_seed,
            inertia: h.inertia,
            objective: h.objective,
        })
    }
}

pub const CODEBOOK_MAGIC: &[u8; 8] = b"DRAWCODE";

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

const CHUNK: usize = 2048;

/// Nearest centroid for every row (via the expanded-norm product), with the
/// exact squared distance to the chosen centroid.
fn assign(data: &[f64], dim: usize, centroids: &[f64], k: usize) -> Vec<(usize, f64)> {
    let c_norms: Vec<f64> = centroids
        .chunks_exact(dim)
        .map(|c| c.iter().map(|v| v * v).sum())
        .collect();
    data.par_chunks(CHUNK * dim)
        .flat_map_iter(|block| {
            let rows = block.len() / dim;
            let mut cross = vec![0.0; rows * k];
            gemm(
                View::row_major(block, rows, dim),
                View::transposed(centroids, k, dim),
                &mut cross,
                0.0,
            );
            (0..rows)
                .map(|r| {
                    let x = &block[r * dim..(r + 1) * dim];
                    let row = &cross[r * k..(r + 1) * k];
                    let mut best = (0, f64::INFINITY);
                    for (j, (&xc, &cn)) in row.iter().zip(&c_norms).enumerate() {
                        let d = cn - 2.0 * xc;
                        if d < best.1 {
                            best = (j, d);
                        }
                    }
                    (
                        best.0,
                        sq_dist(x, &centroids[best.0 * dim..(best.0 + 1) * dim]),
                    )
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

/// k-means++ seeding followed by Lloyd iterations.
///
/// `data` is row-major `n × dim`. Empty clusters are reseeded with the point
/// currently farthest from its centroid.
pub fn kmeans_fit(data: &[f64], dim: usize, cfg: &KMeansConfig) -> Result<Codebook> {
    let k = cfg.k;
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(Error::invalid(format!(
            "descriptor pool of {} values is not a multiple of dim {dim}",
            data.len()
        )));
    }
    let n = data.len() / dim;
    if k < 2 {
        return Err(Error::invalid(format!("k-means needs K ≥ 2, got {k}")));
    }
    if n < k {
        return Err(Error::invalid(format!(
            "k-means needs at least K={k} descriptors, got {n}"
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means input descriptors".into()));
    }
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut rng = artifact::rng(cfg.seed, 0x6B6D);

    // k-means++
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| sq_dist(row(i), &centroids[..dim]))
        .collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(row(pick));
        let c = centroids[start..].to_vec();
        d2.par_iter_mut()
            .enumerate()
            .for_each(|(i, d)| *d = d.min(sq_dist(row(i), &c)));
    }

    let mut objective = Vec::new();
    let mut assignment = assign(data, dim, &centroids, k);
    for _ in 0..cfg.max_iters {
        let j: f64 = assignment.iter().map(|a| a.1).sum();
        if let Some(&prev) = objective.last() {
            debug_assert!(
                j <= prev * (1.0 + 1e-9) + 1e-12,
                "k-means objective rose from {prev} to {j}"
            );
        }
        objective.push(j);

        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in assignment.iter().enumerate() {
            counts[c] += 1;
            sums[c * dim..(c + 1) * dim]
                .iter_mut()
                .zip(row(i))
                .for_each(|(s, v)| *s += v);
        }
        // repair empty clusters from the worst-served points
        let mut by_distance: Vec<usize> = (0..n).collect();
        by_distance.sort_by(|&a, &b| assignment[b].1.total_cmp(&assignment[a].1).then(a.cmp(&b)));
        let mut donors = by_distance.into_iter();
        let mut new_centroids = vec![0.0; k * dim];
        for c in 0..k {
            let dst = &mut new_centroids[c * dim..(c + 1) * dim];
            if counts[c] > 0 {
                dst.iter_mut()
                    .zip(&sums[c * dim..])
                    .for_each(|(d, s)| *d = s / counts[c] as f64);
            } else {
                let donor = donors.next().expect("n ≥ k");
                dst.copy_from_slice(row(donor));
            }
        }
        let shift = new_centroids
            .chunks_exact(dim)
            .zip(centroids.chunks_exact(dim))
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = new_centroids;
        assignment = assign(data, dim, &centroids, k);
        if shift < cfg.tol {
            break;
        }
    }
    let inertia: f64 = assignment.iter().map(|a| a.1).sum();
    objective.push(inertia);
    Ok(Codebook {
        centroids,
        k,
        dim,
        descriptor_kind: None,
        kmeans_seed: cfg.seed,
        subsample_seed: None,
        inertia,
        objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn cfg(k: usize, seed: u64) -> KMeansConfig {
        KMeansConfig {
            k,
            seed,
            max_iters: 100,
            tol: 1e-9,
        }
    }

    fn sorted_rows(cb: &Codebook) -> Vec<Vec<f64>> {
        let mut rows: Vec<Vec<f64>> = cb.centroids.chunks(cb.dim).map(<[f64]>::to_vec).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows
    }

    #[test]
    fn two_symmetric_clusters() {
        let data = [0.0, 0.0, 0.0, 1.0, 10.0, 0.0, 10.0, 1.0];
        for seed in 0..5 {
            let cb = kmeans_fit(&data, 2, &cfg(2, seed)).unwrap();
            assert_eq!(sorted_rows(&cb), vec![vec![0.0, 0.5], vec![10.0, 0.5]]);
            assert!((cb.inertia - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn k_equals_n_recovers_points() {
        let data = [0.5, 1.0, -3.0, 2.0, 7.0, 7.0, 0.0, -1.0];
        let cb = kmeans_fit(&data, 2, &cfg(4, 3)).unwrap();
        assert_eq!(cb.inertia, 0.0);
        let mut pts: Vec<Vec<f64>> = data.chunks(2).map(<[f64]>::to_vec).collect();
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(sorted_rows(&cb), pts);
    }

    #[test]
    fn errors_on_too_few_points() {
        assert!(kmeans_fit(&[0.0, 1.0, 2.0], 1, &cfg(4, 0)).is_err());
        assert!(kmeans_fit(&[0.0, 1.0, 2.0], 1, &cfg(1, 0)).is_err());
    }

    #[test]
    fn gaussian_blobs_match_sample_means() {
        let centers = [[0.0, 0.0], [6.0, 0.0], [0.0, 7.0]];
        let mut rng = artifact::rng(99, 1);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut data = Vec::new();
        let mut means = [[0.0f64; 2]; 3];
        for (b, c) in centers.iter().enumerate() {
            for _ in 0..100 {
                let p = [c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)];
                means[b][0] += p[0] / 100.0;
                means[b][1] += p[1] / 100.0;
                data.extend_from_slice(&p);
            }
        }
        let cb = kmeans_fit(&data, 2, &cfg(3, 4)).unwrap();
        for m in means {
            let (i, _) = cb.nearest(&m);
            let c = cb.centroid(i);
            assert!((c[0] - m[0]).abs() < 0.05 && (c[1] - m[1]).abs() < 0.05);
        }
    }

    #[test]
    fn objective_never_rises() {
        let mut rng = artifact::rng(5, 2);
        let data: Vec<f64> = (0..3000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cb = kmeans_fit(&data, 3, &cfg(25, 8)).unwrap();
        for w in cb.objective.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9));
        }
        assert_eq!(cb, kmeans_fit(&data, 3, &cfg(25, 8)).unwrap());
    }

    #[test]
    fn duplicate_points_force_empty_cluster_repair() {
        // five identical points and one outlier; k-means++ must fall back
        let mut data = vec![1.0; 5];
        data.push(4.0);
        let cb = kmeans_fit(&data, 1, &cfg(3, 0)).unwrap();
        assert!(cb.centroids.iter().all(|v| v.is_finite()));
        assert_eq!(cb.inertia, 0.0);
    }

    #[test]
    fn codebook_file_roundtrip() {
        let data = [0.0, 0.0, 0.0, 1.0, 10.0, 0.0, 10.0, 1.0];
        let cb = kmeans_fit(&data, 2, &cfg(2, 1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("codebook.bin");
        cb.save(&p).unwrap();
        assert_eq!(Codebook::load(&p).unwrap(), cb);
    }
}
