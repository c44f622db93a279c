//! k-means codebooks and bag-of-features histograms.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureVector;
use crate::seed::rng_from_seed;

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;
/// Cluster counts evaluated by the experiment grid.
pub const CLUSTER_COUNTS: [usize; 4] = [16, 32, 64, 128];

#[derive(Debug, Error, PartialEq)]
pub enum BofError {
    #[error("need at least k = {k} vectors, got {n}")]
    TooFewVectors { n: usize, k: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("empty feature list")]
    EmptyFeatureList,
    #[error("features from several slides passed to one histogram: `{0}` and `{1}`")]
    MixedWsi(String, String),
    #[error("invalid k-means parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub k: usize,
    pub dimension: usize,
    pub seed: u64,
    pub centroids: Vec<Vec<f64>>,
    #[serde(default)]
    pub iterations_run: usize,
    #[serde(default)]
    pub final_distortion: f64,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Codebook {
    /// Builds a codebook from explicit centroids.
    pub fn from_centroids(centroids: Vec<Vec<f64>>, seed: u64) -> Result<Self, BofError> {
        let dimension = centroids.first().map_or(0, Vec::len);
        check_dims(&centroids, dimension)?;
        if centroids.is_empty() {
            return Err(BofError::InvalidParams("codebook needs at least one centroid".into()));
        }
        Ok(Self {
            k: centroids.len(),
            dimension,
            seed,
            centroids,
            iterations_run: 0,
            final_distortion: 0.0,
        })
    }

    /// Index of the nearest centroid; ties go to the lowest index.
    pub fn assign(&self, v: &[f64]) -> Result<usize, BofError> {
        if v.len() != self.dimension {
            return Err(BofError::DimensionMismatch {
                expected: self.dimension,
                found: v.len(),
            });
        }
        Ok(nearest(&self.centroids, v).0)
    }

    /// Sum of squared distances of `vectors` to their nearest centroid.
    pub fn distortion<V: AsRef<[f64]>>(&self, vectors: &[V]) -> Result<f64, BofError> {
        check_dims(vectors, self.dimension)?;
        Ok(vectors.iter().map(|v| nearest(&self.centroids, v.as_ref()).1).sum())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("codebook serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

fn nearest(centroids: &[Vec<f64>], v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    'outer: for (j, c) in centroids.iter().enumerate() {
        // Partial sums only grow, so a chunk that already reaches `best` rules `c` out.
        let mut d = 0.0;
        for (cc, vc) in c.chunks(16).zip(v.chunks(16)) {
            d += cc.iter().zip(vc).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            if d >= best.1 {
                continue 'outer;
            }
        }
        best = (j, d);
    }
    best
}

fn check_dims<V: AsRef<[f64]>>(vectors: &[V], dimension: usize) -> Result<(), BofError> {
    match vectors.iter().find(|v| v.as_ref().len() != dimension) {
        Some(v) => Err(BofError::DimensionMismatch {
            expected: dimension,
            found: v.as_ref().len(),
        }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop when the relative distortion decrease falls below this.
    pub tol: f64,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }
}

/// k-means++ seeding: the first centre uniformly, later ones with
/// probability proportional to squared distance from the chosen set.
fn kmeans_plus_plus<V: AsRef<[f64]> + Sync>(vectors: &[V], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_from_seed(seed);
    let n = vectors.len();
    let mut centres = Vec::with_capacity(k);
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    centres.push(vectors[first].as_ref().to_vec());
    let mut d2: Vec<f64> = vectors
        .par_iter()
        .map(|v| squared_distance(v.as_ref(), &centres[0]))
        .collect();
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `acc` just short of `target`; fall back to the last positive weight.
            pick.or_else(|| d2.iter().rposition(|&d| d > 0.0)).unwrap_or(0)
        } else {
            // Every remaining point coincides with a centre.
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen[pick] = true;
        let centre = vectors[pick].as_ref().to_vec();
        d2.par_iter_mut().zip(vectors.par_iter()).for_each(|(d, v)| {
            *d = d.min(squared_distance(v.as_ref(), &centre));
        });
        centres.push(centre);
    }
    centres
}

/// Lloyd's algorithm after k-means++ seeding. `trace` receives
/// `(iteration, distortion)` after every assignment step.
pub fn kmeans_fit_traced<V: AsRef<[f64]> + Sync>(
    vectors: &[V],
    params: &KMeansParams,
    mut trace: impl FnMut(usize, f64),
) -> Result<Codebook, BofError> {
    let KMeansParams { k, seed, max_iter, tol } = *params;
    if k == 0 || max_iter == 0 || !(tol >= 0.0) {
        return Err(BofError::InvalidParams(format!(
            "k = {k}, max_iter = {max_iter}, tol = {tol}"
        )));
    }
    if vectors.len() < k {
        return Err(BofError::TooFewVectors { n: vectors.len(), k });
    }
    let dimension = vectors[0].as_ref().len();
    check_dims(vectors, dimension)?;

    let mut centroids = kmeans_plus_plus(vectors, k, seed);
    let mut previous = f64::INFINITY;
    let mut iterations = 0;
    let mut distortion;
    loop {
        let assignment: Vec<(usize, f64)> = vectors.par_iter().map(|v| nearest(&centroids, v.as_ref())).collect();
        distortion = assignment.iter().map(|a| a.1).sum::<f64>();
        trace(iterations, distortion);
        let converged = distortion == 0.0 || (previous.is_finite() && (previous - distortion) <= tol * previous);
        if converged || iterations >= max_iter {
            break;
        }
        previous = distortion;
        iterations += 1;

        let mut labels: Vec<usize> = assignment.iter().map(|a| a.0).collect();
        let mut dists: Vec<f64> = assignment.iter().map(|a| a.1).collect();
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        // Empty clusters take the point currently farthest from its centroid.
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..vectors.len())
                    .filter(|&i| counts[labels[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
                if let Some(i) = far {
                    counts[labels[i]] -= 1;
                    labels[i] = j;
                    dists[i] = 0.0;
                    counts[j] = 1;
                }
            }
        }
        let mut sums = vec![vec![0.0; dimension]; k];
        for (v, &l) in vectors.iter().zip(&labels) {
            for (s, x) in sums[l].iter_mut().zip(v.as_ref()) {
                *s += x;
            }
        }
        for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                *c = s.into_iter().map(|x| x / n as f64).collect();
            }
        }
    }
    Ok(Codebook {
        k,
        dimension,
        seed,
        centroids,
        iterations_run: iterations,
        final_distortion: distortion,
    })
}

pub fn kmeans_fit<V: AsRef<[f64]> + Sync>(
    vectors: &[V],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<Codebook, BofError> {
    kmeans_fit_traced(vectors, &KMeansParams { k, seed, max_iter, tol }, |_, _| {})
}

/// L1-normalized histogram of centroid assignments for one slide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BofHistogram {
    pub wsi_id: String,
    pub bins: Vec<f64>,
    pub patch_count: usize,
}

/// Histogram from precomputed assignments.
pub fn histogram_from_assignments(wsi_id: &str, k: usize, assignments: &[usize]) -> BofHistogram {
    let mut counts = vec![0usize; k];
    for &a in assignments {
        counts[a] += 1;
    }
    let n = assignments.len();
    BofHistogram {
        wsi_id: wsi_id.to_string(),
        bins: counts.into_iter().map(|c| c as f64 / n as f64).collect(),
        patch_count: n,
    }
}

/// Assigns every descriptor of a slide and checks they share one wsi_id.
pub fn assign_all(codebook: &Codebook, features: &[FeatureVector]) -> Result<Vec<usize>, BofError> {
    let first = features.first().ok_or(BofError::EmptyFeatureList)?;
    if let Some(other) = features.iter().find(|f| f.wsi_id != first.wsi_id) {
        return Err(BofError::MixedWsi(first.wsi_id.clone(), other.wsi_id.clone()));
    }
    features.iter().map(|f| codebook.assign(&f.values)).collect()
}

pub fn build_histogram(codebook: &Codebook, features: &[FeatureVector]) -> Result<BofHistogram, BofError> {
    let assignments = assign_all(codebook, features)?;
    Ok(histogram_from_assignments(
        &features[0].wsi_id,
        codebook.k,
        &assignments,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_points(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    fn fv(id: &str, i: usize, v: Vec<f64>) -> FeatureVector {
        FeatureVector {
            wsi_id: id.into(),
            patch_index: i,
            values: v,
        }
    }

    #[test]
    fn k_equals_n_recovers_points() {
        let pts = random_points(1, 12, 3);
        let cb = kmeans_fit(&pts, 12, 5, 100, 1e-6).unwrap();
        assert_eq!(cb.final_distortion, 0.0);
        let mut got = cb.centroids.clone();
        let mut want = pts.clone();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn k_one_is_the_mean() {
        let pts = random_points(2, 50, 4);
        let cb = kmeans_fit(&pts, 1, 0, 100, 1e-6).unwrap();
        let n = pts.len() as f64;
        let mean: Vec<f64> = (0..4).map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / n).collect();
        for (c, m) in cb.centroids[0].iter().zip(&mean) {
            assert!((c - m).abs() < 1e-12);
        }
        // Total variance (per-dimension population variances summed) times N.
        let var: f64 = (0..4)
            .map(|j| pts.iter().map(|p| (p[j] - mean[j]).powi(2)).sum::<f64>() / n)
            .sum();
        assert!((cb.final_distortion - var * n).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        let pts = random_points(3, 3, 2);
        assert_eq!(
            kmeans_fit(&pts, 4, 0, 10, 0.0).unwrap_err(),
            BofError::TooFewVectors { n: 3, k: 4 }
        );
        let ragged = vec![vec![0.0, 1.0], vec![1.0]];
        assert!(matches!(
            kmeans_fit(&ragged, 1, 0, 10, 0.0),
            Err(BofError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            kmeans_fit(&pts, 1, 0, 0, 0.0),
            Err(BofError::InvalidParams(_))
        ));
        let cb = Codebook::from_centroids(vec![vec![0.0, 0.0]], 0).unwrap();
        assert!(matches!(cb.assign(&[1.0]), Err(BofError::DimensionMismatch { .. })));
        assert_eq!(build_histogram(&cb, &[]).unwrap_err(), BofError::EmptyFeatureList);
        let mixed = [fv("a", 0, vec![0.0, 0.0]), fv("b", 0, vec![0.0, 0.0])];
        assert!(matches!(build_histogram(&cb, &mixed), Err(BofError::MixedWsi(..))));
    }

    #[test]
    fn assignment_examples() {
        let centroids: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 0.0]).collect();
        let cb = Codebook::from_centroids(centroids, 0).unwrap();
        assert_eq!(cb.assign(&[5.0, 0.0]).unwrap(), 5);
        // Equidistant from 2 and 7 and strictly closer to nothing else.
        let cb = Codebook::from_centroids(
            vec![
                vec![9.0, 9.0],
                vec![9.0, -9.0],
                vec![-1.0, 0.0],
                vec![-9.0, 9.0],
                vec![-9.0, -9.0],
                vec![9.0, 0.0],
                vec![0.0, 9.0],
                vec![1.0, 0.0],
            ],
            0,
        )
        .unwrap();
        assert_eq!(cb.assign(&[0.0, 0.0]).unwrap(), 2);
    }

    #[test]
    fn histogram_examples() {
        let cb = Codebook::from_centroids((0..4).map(|i| vec![i as f64]).collect(), 0).unwrap();
        let feats: Vec<_> = [0.0, 0.1, 1.0, 3.0]
            .iter()
            .enumerate()
            .map(|(i, &v)| fv("w", i, vec![v]))
            .collect();
        let h = build_histogram(&cb, &feats).unwrap();
        assert_eq!(h.bins, vec![0.5, 0.25, 0.0, 0.25]);
        assert_eq!(h.patch_count, 4);

        let feats: Vec<_> = (0..512).map(|i| fv("w", i, vec![3.0 + (i as f64) * 1e-4])).collect();
        let h = build_histogram(&cb, &feats).unwrap();
        assert_eq!(h.bins, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn distortion_examples() {
        let cb = Codebook::from_centroids(vec![vec![0.0, 0.0], vec![5.0, 5.0]], 0).unwrap();
        assert_eq!(cb.distortion(&cb.centroids).unwrap(), 0.0);
        assert_eq!(cb.distortion(&[vec![0.0, 2.0]]).unwrap(), 4.0);
        let pts = random_points(4, 30, 2);
        let brute: f64 = pts
            .iter()
            .map(|p| {
                cb.centroids
                    .iter()
                    .map(|c| squared_distance(c, p))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        assert_eq!(cb.distortion(&pts).unwrap(), brute);
    }

    #[test]
    fn lloyd_is_monotone() {
        for seed in 0..20 {
            let pts = random_points(100 + seed, 300, 5);
            let mut trace = Vec::new();
            kmeans_fit_traced(&pts, &KMeansParams::new(8, seed), |_, d| trace.push(d)).unwrap();
            for w in trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{w:?}");
            }
        }
    }

    #[test]
    fn duplicate_points_seed_distinct_centres() {
        let pts = vec![vec![1.0], vec![1.0], vec![1.0], vec![2.0]];
        let cb = kmeans_fit(&pts, 3, 0, 10, 0.0).unwrap();
        assert_eq!(cb.final_distortion, 0.0);
    }

    #[test]
    fn deterministic_in_seed() {
        let pts = random_points(7, 200, 3);
        let a = kmeans_fit(&pts, 6, 1, 100, 1e-6).unwrap();
        let b = kmeans_fit(&pts, 6, 1, 100, 1e-6).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn json_round_trip() {
        let cb = kmeans_fit(&random_points(8, 40, 3), 4, 2, 100, 1e-6).unwrap();
        let back = Codebook::from_json(&cb.to_json()).unwrap();
        assert_eq!(back, cb);
        let minimal = r#"{"k":1,"dimension":2,"seed":3,"centroids":[[0.5,1.5]]}"#;
        assert_eq!(Codebook::from_json(minimal).unwrap().centroids, vec![vec![0.5, 1.5]]);
    }

    /// With separation far larger than the spread, the generating partition
    /// is the optimal 3-clustering; compare partitions up to relabelling.
    #[test]
    fn separated_gaussians_recovered() {
        let mut ok = 0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let noise = Normal::new(0.0, 0.3).unwrap();
            let centres = [(0.0, 0.0), (20.0, 0.0), (0.0, 20.0)];
            let mut pts = Vec::new();
            let mut truth = Vec::new();
            for (g, c) in centres.iter().enumerate() {
                for _ in 0..20 {
                    pts.push(vec![c.0 + noise.sample(&mut rng), c.1 + noise.sample(&mut rng)]);
                    truth.push(g);
                }
            }
            let cb = kmeans_fit(&pts, 3, seed, 100, 1e-6).unwrap();
            let labels: Vec<usize> = pts.iter().map(|p| cb.assign(p).unwrap()).collect();
            let same =
                |a: &[usize], b: &[usize]| (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])));
            if same(&labels, &truth) {
                ok += 1;
            }
        }
        assert!(ok >= 95, "{ok}/100");
    }

    proptest::proptest! {
        #[test]
        fn histograms_normalized(seed: u64, n in 1usize..300, k in 1usize..20) {
            let cb = Codebook::from_centroids(random_points(seed, k, 3), 0).unwrap();
            let feats: Vec<_> = random_points(seed ^ 1, n, 3).into_iter().enumerate().map(|(i, v)| fv("w", i, v)).collect();
            let h = build_histogram(&cb, &feats).unwrap();
            proptest::prop_assert!((h.bins.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            proptest::prop_assert!(h.bins.iter().all(|&b| b >= 0.0));
            proptest::prop_assert_eq!(h.patch_count, n);
        }
    }
}
