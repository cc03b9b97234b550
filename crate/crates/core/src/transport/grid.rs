//! Axis-aligned bucket grid for nearest-neighbour queries and pruned
//! reduced-cost pricing. Cell boundaries sit at per-axis quantiles of the
//! indexed points, so cells hold similar counts even for heavy-tailed data.

pub(crate) struct Grid {
    d: usize,
    /// `bounds[k]` has `dims[k] + 1` increasing entries.
    bounds: Vec<Vec<f64>>,
    dims: Vec<usize>,
    strides: Vec<usize>,
    start: Vec<usize>,
    items: Vec<usize>,
}

impl Grid {
    pub fn new(pts: &[f64], d: usize, per_cell: usize) -> Self {
        let n = pts.len() / d;
        let target_cells = (n / per_cell.max(1)).max(1) as f64;
        let per_axis = (target_cells.powf(1.0 / d as f64).floor() as usize).clamp(1, 256);
        let mut bounds = Vec::with_capacity(d);
        let mut dims = Vec::with_capacity(d);
        for k in 0..d {
            let mut c: Vec<f64> = pts.chunks_exact(d).map(|p| p[k]).collect();
            c.sort_by(f64::total_cmp);
            let mut b = vec![c.first().copied().unwrap_or(0.0)];
            for q in 1..per_axis {
                let v = c[q * n / per_axis];
                if v > *b.last().unwrap() {
                    b.push(v);
                }
            }
            let hi = c.last().copied().unwrap_or(0.0);
            if hi > *b.last().unwrap() || b.len() == 1 {
                b.push(hi.max(b[0]));
            }
            dims.push(b.len() - 1);
            bounds.push(b);
        }
        let mut strides = vec![1; d];
        for k in 1..d {
            strides[k] = strides[k - 1] * dims[k - 1];
        }
        let cells = strides[d - 1] * dims[d - 1];
        let mut g = Self { d, bounds, dims, strides, start: vec![0; cells + 1], items: vec![0; n] };
        let cell_of: Vec<usize> = pts.chunks_exact(d).map(|p| g.cell(&g.coords(p))).collect();
        for &c in &cell_of {
            g.start[c + 1] += 1;
        }
        for c in 0..cells {
            g.start[c + 1] += g.start[c];
        }
        let mut fill = g.start.clone();
        for (i, &c) in cell_of.iter().enumerate() {
            g.items[fill[c]] = i;
            fill[c] += 1;
        }
        g
    }

    pub fn cells(&self) -> usize {
        self.start.len() - 1
    }

    pub fn members(&self, cell: usize) -> &[usize] {
        &self.items[self.start[cell]..self.start[cell + 1]]
    }

    /// Cell coordinates of `x`, clamped into the grid.
    fn coords(&self, x: &[f64]) -> Vec<usize> {
        (0..self.d)
            .map(|k| {
                let b = &self.bounds[k];
                let i = b.partition_point(|&t| t <= x[k]);
                i.saturating_sub(1).min(self.dims[k] - 1)
            })
            .collect()
    }

    fn cell(&self, c: &[usize]) -> usize {
        c.iter().zip(&self.strides).map(|(a, s)| a * s).sum()
    }

    fn unflatten(&self, mut cell: usize) -> Vec<usize> {
        let mut c = vec![0; self.d];
        for k in 0..self.d {
            c[k] = cell % self.dims[k];
            cell /= self.dims[k];
        }
        c
    }

    /// Euclidean distance from `x` to the box of `cell`.
    pub fn box_distance(&self, cell: usize, x: &[f64]) -> f64 {
        let c = self.unflatten(cell);
        let mut s = 0.0;
        for k in 0..self.d {
            let (lo, hi) = (self.bounds[k][c[k]], self.bounds[k][c[k] + 1]);
            let e = if x[k] < lo {
                lo - x[k]
            } else if x[k] > hi {
                x[k] - hi
            } else {
                0.0
            };
            s += e * e;
        }
        s.sqrt()
    }

    /// The `k` indexed points nearest to `x` (distances ascending), by
    /// rings of cells around the cell of `x`.
    pub fn knn(&self, pts: &[f64], x: &[f64], k: usize) -> Vec<(usize, f64)> {
        let d = self.d;
        let centre = self.coords(x);
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        let max_r = *self.dims.iter().max().unwrap();
        for r in 0..=max_r {
            let lo: Vec<usize> = centre.iter().map(|&c| c.saturating_sub(r)).collect();
            let hi: Vec<usize> = centre.iter().zip(&self.dims).map(|(&c, &n)| (c + r).min(n - 1)).collect();
            let mut cur = lo.clone();
            loop {
                let ring = cur.iter().zip(&centre).map(|(&a, &c)| a.abs_diff(c)).max().unwrap_or(0);
                if ring == r {
                    for &j in self.members(self.cell(&cur)) {
                        let s: f64 = x.iter().zip(&pts[j * d..(j + 1) * d]).map(|(a, b)| (a - b) * (a - b)).sum();
                        if best.len() < k || s < best[best.len() - 1].1 {
                            let pos = best.partition_point(|e| e.1 <= s);
                            best.insert(pos, (j, s));
                            best.truncate(k);
                        }
                    }
                }
                // Odometer increment over the clamped cube.
                let mut a = 0;
                while a < d {
                    if cur[a] < hi[a] {
                        cur[a] += 1;
                        break;
                    }
                    cur[a] = lo[a];
                    a += 1;
                }
                if a == d {
                    break;
                }
            }
            if best.len() == k {
                // Unvisited cells lie outside the cube; bound their distance.
                let mut bound = f64::INFINITY;
                for a in 0..d {
                    if centre[a] >= r + 1 {
                        bound = bound.min(x[a] - self.bounds[a][centre[a] - r]);
                    }
                    if centre[a] + r + 1 < self.dims[a] {
                        bound = bound.min(self.bounds[a][centre[a] + r + 1] - x[a]);
                    }
                }
                let bound = bound.max(0.0);
                if best[k - 1].1 <= bound * bound {
                    break;
                }
            }
        }
        best.into_iter().map(|(j, s)| (j, s.sqrt())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_vec, stream};

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = stream(1, 0);
        for d in [2, 3, 4] {
            let pts: Vec<f64> = (0..900).flat_map(|_| gaussian_vec(d, &mut rng)).collect();
            let g = Grid::new(&pts, d, 8);
            let total: usize = (0..g.cells()).map(|c| g.members(c).len()).sum();
            assert_eq!(total, 900);
            for _ in 0..50 {
                let x: Vec<f64> = gaussian_vec(d, &mut rng).into_iter().map(|v| 1.5 * v).collect();
                let got = g.knn(&pts, &x, 7);
                let mut all: Vec<f64> = pts
                    .chunks_exact(d)
                    .map(|p| p.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                    .collect();
                all.sort_by(f64::total_cmp);
                for (k, (_, dist)) in got.iter().enumerate() {
                    assert!((dist - all[k]).abs() < 1e-12, "d={d} k={k}");
                }
            }
        }
    }

    #[test]
    fn box_distance_bounds_member_distances() {
        let mut rng = stream(2, 0);
        let pts: Vec<f64> = (0..500).flat_map(|_| gaussian_vec(3, &mut rng)).collect();
        let g = Grid::new(&pts, 3, 10);
        let x = [0.3, -2.0, 1.0];
        for c in 0..g.cells() {
            let lb = g.box_distance(c, &x);
            for &j in g.members(c) {
                assert!(crate::model::distance(&x, &pts[3 * j..3 * j + 3]) >= lb - 1e-15);
            }
        }
    }
}
