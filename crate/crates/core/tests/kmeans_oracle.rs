use histobof::bof::{kmeans_fit_traced, squared_distance, Codebook, KMeansParams, CLUSTER_COUNTS};
use histobof::seed::{derive_seed, rng_from_seed};
use rand::Rng;

fn exhaustive_nearest(centroids: &[Vec<f64>], q: &[f64]) -> usize {
    let mut best = 0;
    for (j, c) in centroids.iter().enumerate() {
        if squared_distance(c, q) < squared_distance(&centroids[best], q) {
            best = j;
        }
    }
    best
}

fn random_vectors(seed: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.gen_range(0.0..1.0)).collect())
        .collect()
}

#[test]
fn assignment_matches_exhaustive_scan() {
    for k in CLUSTER_COUNTS {
        let centroids = random_vectors(derive_seed(21, &[k as u64]), k, 120);
        let codebook = Codebook::from_centroids(centroids.clone(), 0).unwrap();
        for q in random_vectors(derive_seed(22, &[k as u64]), 1000, 120) {
            assert_eq!(
                codebook.assign(&q).unwrap(),
                exhaustive_nearest(&centroids, &q),
                "k = {k}"
            );
        }
    }
}

#[test]
fn exact_ties_go_to_lowest_index() {
    let codebook = Codebook::from_centroids(vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]], 0).unwrap();
    assert_eq!(codebook.assign(&[0.0, 0.0]).unwrap(), 0);
    assert_eq!(codebook.assign(&[-0.5, 0.5]).unwrap(), 1);
}

#[test]
fn lloyd_distortion_never_increases() {
    for run in 0..100u64 {
        let data = random_vectors(derive_seed(23, &[run]), 400, 8);
        let k = [2, 5, 16, 32][(run % 4) as usize];
        let mut trace = Vec::new();
        let params = KMeansParams::new(k, derive_seed(24, &[run]));
        let codebook = kmeans_fit_traced(&data, &params, |_, d| trace.push(d)).unwrap();
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "run {run}: {} -> {}", w[0], w[1]);
        }
        assert_eq!(*trace.last().unwrap(), codebook.final_distortion);
    }
}
