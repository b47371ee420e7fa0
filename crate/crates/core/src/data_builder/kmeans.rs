//! Lloyd's k-means with deterministic farthest-point seeding.

use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub centroids: Vec<Vec<f64>>,
    /// Cluster index per input point.
    pub assignments: Vec<usize>,
}

impl Clustering {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == cluster)
            .map(|(i, _)| i)
            .collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Clusters `points` into `min(k, points.len())` groups. The first seed is
/// drawn from `rng`; each further seed is the point farthest from its
/// nearest existing seed (lowest index on ties).
pub fn kmeans<R: Rng>(points: &[Vec<f64>], k: usize, iterations: usize, rng: &mut R) -> Clustering {
    let k = k.min(points.len());
    if k == 0 {
        return Clustering {
            centroids: Vec::new(),
            assignments: Vec::new(),
        };
    }
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut min_dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let (far, _) = min_dist.iter().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &d)| if d > best.1 { (i, d) } else { best },
        );
        let c = points[far].clone();
        for (d, p) in min_dist.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }

    let dim = points[0].len();
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    for _ in 0..iterations {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for (c, (sum, n)) in centroids.iter_mut().zip(sums.into_iter().zip(&counts)) {
            // an emptied cluster keeps its previous centroid
            if *n > 0 {
                *c = sum.into_iter().map(|s| s / *n as f64).collect();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        if next == assignments {
            break;
        }
        assignments = next;
    }
    Clustering { centroids, assignments }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separates_obvious_blobs() {
        let mut points = Vec::new();
        for i in 0..10 {
            let j = i as f64 * 0.01;
            points.push(vec![0.0 + j, 0.0]);
            points.push(vec![10.0 + j, 10.0]);
            points.push(vec![-10.0, 10.0 + j]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = kmeans(&points, 3, 10, &mut rng);
        for i in (0..points.len()).step_by(3) {
            assert_eq!(c.assignments[i], c.assignments[0]);
            assert_eq!(c.assignments[i + 1], c.assignments[1]);
            assert_eq!(c.assignments[i + 2], c.assignments[2]);
        }
        let mut distinct = c.assignments[..3].to_vec();
        distinct.sort();
        distinct.dedup();
        assert_eq!(distinct.len(), 3);
    }

    #[test]
    fn clamps_k_and_is_deterministic() {
        let points = vec![vec![1.0], vec![2.0]];
        let c = kmeans(&points, 5, 10, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(c.centroids.len(), 2);
        assert_ne!(c.assignments[0], c.assignments[1]);
        assert!(kmeans(&[], 3, 10, &mut ChaCha8Rng::seed_from_u64(0))
            .assignments
            .is_empty());

        let pts: Vec<Vec<f64>> = (0..40).map(|i| vec![(i * 7 % 13) as f64, (i % 5) as f64]).collect();
        let a = kmeans(&pts, 5, 10, &mut ChaCha8Rng::seed_from_u64(9));
        let b = kmeans(&pts, 5, 10, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }
}
