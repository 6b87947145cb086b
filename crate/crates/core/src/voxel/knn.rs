use std::collections::HashMap;

use rayon::prelude::*;

use super::{Real, SparseTensor, VoxelCoord};
use crate::error::{Error, Result};

const CELL: i64 = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

fn dist2(q: [f64; 3], c: VoxelCoord) -> f64 {
    let d = [q[0] - c.x as f64, q[1] - c.y as f64, q[2] - c.z as f64];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

// (dist, index) order; smaller index means lexicographically smaller coord
fn closer(a: &Neighbor, b: &Neighbor) -> bool {
    a.dist2 < b.dist2 || (a.dist2 == b.dist2 && a.index < b.index)
}

fn insert_top_k(best: &mut Vec<Neighbor>, cand: Neighbor, k: usize) {
    if best.len() == k && !closer(&cand, &best[k - 1]) {
        return;
    }
    let pos = best.iter().position(|b| closer(&cand, b)).unwrap_or(best.len());
    best.insert(pos, cand);
    best.truncate(k);
}

/// Uniform grid over a sorted reference coordinate set. The grid only
/// accelerates the search; results equal the brute-force scan exactly.
pub struct SpatialGrid<'a> {
    coords: &'a [VoxelCoord],
    order: Vec<u32>,
    cells: HashMap<[i64; 3], (u32, u32)>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl<'a> SpatialGrid<'a> {
    pub fn new(coords: &'a [VoxelCoord]) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::EmptyReference);
        }
        let cell_of = |c: &VoxelCoord| {
            [
                (c.x as i64).div_euclid(CELL),
                (c.y as i64).div_euclid(CELL),
                (c.z as i64).div_euclid(CELL),
            ]
        };
        let mut order: Vec<u32> = (0..coords.len() as u32).collect();
        order.sort_by_key(|&i| (cell_of(&coords[i as usize]), i));
        let mut cells = HashMap::new();
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        let mut start = 0usize;
        while start < order.len() {
            let key = cell_of(&coords[order[start] as usize]);
            let mut end = start + 1;
            while end < order.len() && cell_of(&coords[order[end] as usize]) == key {
                end += 1;
            }
            cells.insert(key, (start as u32, end as u32));
            for a in 0..3 {
                lo[a] = lo[a].min(key[a]);
                hi[a] = hi[a].max(key[a]);
            }
            start = end;
        }
        Ok(Self {
            coords,
            order,
            cells,
            lo,
            hi,
        })
    }

    fn visit_cell(&self, key: [i64; 3], q: [f64; 3], k: usize, best: &mut Vec<Neighbor>) {
        if let Some(&(s, e)) = self.cells.get(&key) {
            for &i in &self.order[s as usize..e as usize] {
                let n = Neighbor {
                    index: i as usize,
                    dist2: dist2(q, self.coords[i as usize]),
                };
                insert_top_k(best, n, k);
            }
        }
    }

    /// Visits every cell at Chebyshev distance exactly `r` from `qc`,
    /// clipped to the occupied bounding box.
    fn visit_shell(&self, qc: [i64; 3], r: i64, q: [f64; 3], k: usize, best: &mut Vec<Neighbor>) {
        let clip = |a: usize| ((self.lo[a] - qc[a]).max(-r), (self.hi[a] - qc[a]).min(r));
        let (x0, x1) = clip(0);
        let (y0, y1) = clip(1);
        let (z0, z1) = clip(2);
        for dx in x0..=x1 {
            for dy in y0..=y1 {
                if dx.abs() == r || dy.abs() == r {
                    for dz in z0..=z1 {
                        self.visit_cell([qc[0] + dx, qc[1] + dy, qc[2] + dz], q, k, best);
                    }
                } else {
                    // r > 0 here, so the two faces are distinct
                    for dz in [-r, r] {
                        if dz >= z0 && dz <= z1 {
                            self.visit_cell([qc[0] + dx, qc[1] + dy, qc[2] + dz], q, k, best);
                        }
                    }
                }
            }
        }
    }

    /// The `min(k, N)` nearest reference rows to `q`, closest first.
    pub fn query(&self, q: [f64; 3], k: usize) -> Vec<Neighbor> {
        let k = k.min(self.coords.len());
        let mut best = Vec::with_capacity(k + 1);
        if k == 0 {
            return best;
        }
        let qc = [0, 1, 2].map(|a| (q[a] / CELL as f64).floor() as i64);
        let mut r = (0..3)
            .map(|a| (self.lo[a] - qc[a]).max(qc[a] - self.hi[a]).max(0))
            .max()
            .unwrap();
        loop {
            self.visit_shell(qc, r, q, k, &mut best);
            let covers = (0..3).all(|a| qc[a] - r <= self.lo[a] && qc[a] + r >= self.hi[a]);
            if covers {
                break;
            }
            // anything not yet visited lies outside the searched block
            let bound = (0..3)
                .map(|a| {
                    let lo = ((qc[a] - r) * CELL) as f64;
                    let hi = ((qc[a] + r + 1) * CELL) as f64;
                    (q[a] - lo).min(hi - q[a])
                })
                .fold(f64::INFINITY, f64::min)
                .max(0.0);
            if best.len() == k && best[k - 1].dist2 < bound * bound {
                break;
            }
            r += 1;
        }
        best
    }
}

/// k-nearest reference voxels for each query point.
pub fn knn<T: Real>(queries: &[[f64; 3]], reference: &SparseTensor<T>, k: usize) -> Result<Vec<Vec<Neighbor>>> {
    if k == 0 {
        return Err(Error::contract("knn needs k >= 1"));
    }
    let grid = SpatialGrid::new(reference.coords())?;
    Ok(queries.par_iter().map(|&q| grid.query(q, k)).collect())
}

/// O(N*Q) scan used as the reference oracle.
pub fn knn_brute_force(queries: &[[f64; 3]], reference: &[VoxelCoord], k: usize) -> Result<Vec<Vec<Neighbor>>> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(queries
        .iter()
        .map(|&q| {
            let mut all: Vec<Neighbor> = reference
                .iter()
                .enumerate()
                .map(|(index, &c)| Neighbor {
                    index,
                    dist2: dist2(q, c),
                })
                .collect();
            all.sort_by(|a, b| a.dist2.total_cmp(&b.dist2).then(a.index.cmp(&b.index)));
            all.truncate(k);
            all
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tensor(pts: &[[i32; 3]]) -> SparseTensor<f32> {
        let mut c: Vec<VoxelCoord> = pts.iter().map(|&p| p.into()).collect();
        c.sort_unstable();
        c.dedup();
        SparseTensor::zeros(0, c, 1).unwrap()
    }

    #[test]
    fn existing_coordinate_is_its_own_neighbor() {
        let r = tensor(&[[0, 0, 0], [4, 4, 4], [1, 2, 3]]);
        let res = knn(&[[1.0, 2.0, 3.0]], &r, 1).unwrap();
        assert_eq!(r.coords()[res[0][0].index], VoxelCoord::new(1, 2, 3));
        assert_eq!(res[0][0].dist2, 0.0);
    }

    #[test]
    fn hand_computed_distances() {
        let r = tensor(&[[0, 0, 0], [1, 0, 0], [5, 0, 0]]);
        let res = knn(&[[0.5, 0.0, 0.0]], &r, 3).unwrap();
        let d: Vec<f64> = res[0].iter().map(|n| n.dist2).collect();
        assert_eq!(d, vec![0.25, 0.25, 20.25]);
        // tie at 0.25 resolved toward the lexicographically smaller coord
        assert_eq!(res[0][0].index, 0);
    }

    #[test]
    fn k_clamps_to_reference_size() {
        let r = tensor(&[[0, 0, 0], [9, 9, 9]]);
        assert_eq!(knn(&[[3.0, 3.0, 3.0]], &r, 3).unwrap()[0].len(), 2);
    }

    #[test]
    fn empty_reference_is_an_error() {
        let r = SparseTensor::<f32>::zeros(0, vec![], 1).unwrap();
        assert!(matches!(knn(&[[0.0; 3]], &r, 1), Err(Error::EmptyReference)));
    }

    #[test]
    fn far_query_terminates_with_exact_answer() {
        let r = tensor(&[[0, 0, 0], [1, 1, 1], [2, 0, 1]]);
        let q = [[1.0e6, -3.0e5, 7.5]];
        assert_eq!(knn(&q, &r, 3).unwrap(), knn_brute_force(&q, r.coords(), 3).unwrap());
    }

    #[test]
    fn matches_brute_force_on_random_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..30 {
            let n = rng.gen_range(1..2000);
            let span = rng.gen_range(2..64);
            let pts: Vec<[i32; 3]> = (0..n)
                .map(|_| [0; 3].map(|_: i32| rng.gen_range(-span..span)))
                .collect();
            let r = tensor(&pts);
            let queries: Vec<[f64; 3]> = (0..200)
                .map(|_| {
                    [0; 3].map(|_: i32| {
                        if rng.gen_bool(0.3) {
                            rng.gen_range(-span..span) as f64
                        } else {
                            rng.gen_range(-2.0 * span as f64..2.0 * span as f64)
                        }
                    })
                })
                .collect();
            let k = 1 + trial % 5;
            assert_eq!(
                knn(&queries, &r, k).unwrap(),
                knn_brute_force(&queries, r.coords(), k).unwrap(),
                "trial {trial}"
            );
        }
    }
}
