//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use kac_core::EmpiricalMeasure;

const EPS: f64 = 1e-12;

/// `min c·x` subject to `A x = b`, `x ≥ 0`, by a two-phase dense tableau
/// simplex with Bland's rule. Returns `None` when infeasible or unbounded.
pub fn lp_min(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> Option<f64> {
    let m = a.len();
    let n = c.len();
    let width = n + m + 1;
    let mut t: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let s = if b[i] < 0.0 { -1.0 } else { 1.0 };
            let mut row = vec![0.0; width];
            for j in 0..n {
                row[j] = s * a[i][j];
            }
            row[n + i] = 1.0;
            row[width - 1] = s * b[i];
            row
        })
        .collect();
    let mut basis: Vec<usize> = (n..n + m).collect();

    let phase1: Vec<f64> = (0..n + m).map(|j| if j < n { 0.0 } else { 1.0 }).collect();
    run_simplex(&mut t, &mut basis, &phase1, n + m)?;
    let infeas: f64 = basis.iter().zip(&t).filter(|(&j, _)| j >= n).map(|(_, r)| r[width - 1]).sum();
    if infeas > 1e-9 {
        return None;
    }
    // Pivot remaining artificials out, dropping redundant rows.
    let mut i = 0;
    while i < t.len() {
        if basis[i] >= n {
            match (0..n).find(|&j| t[i][j].abs() > 1e-9) {
                Some(j) => pivot_rows(&mut t, &mut basis, i, j),
                None => {
                    t.remove(i);
                    basis.remove(i);
                    continue;
                }
            }
        }
        i += 1;
    }
    let mut phase2 = c.to_vec();
    phase2.extend(std::iter::repeat(0.0).take(m));
    run_simplex(&mut t, &mut basis, &phase2, n)?;
    Some(basis.iter().zip(&t).map(|(&j, r)| phase2[j] * r[width - 1]).sum())
}

/// Columns `>= allowed` may not enter the basis.
fn run_simplex(t: &mut [Vec<f64>], basis: &mut [usize], cost: &[f64], allowed: usize) -> Option<()> {
    let width = t.first().map_or(0, |r| r.len());
    loop {
        let entering = (0..allowed).find(|&j| {
            if basis.contains(&j) {
                return false;
            }
            let r = cost[j] - basis.iter().zip(t.iter()).map(|(&bj, row)| cost[bj] * row[j]).sum::<f64>();
            r < -EPS
        });
        let Some(j) = entering else { return Some(()) };
        let mut leave: Option<(usize, f64)> = None;
        for (i, row) in t.iter().enumerate() {
            if row[j] > EPS {
                let ratio = row[width - 1] / row[j];
                leave = match leave {
                    None => Some((i, ratio)),
                    Some((k, r)) if ratio < r - EPS || ((ratio - r).abs() <= EPS && basis[i] < basis[k]) => Some((i, ratio)),
                    keep => keep,
                };
            }
        }
        let (i, _) = leave?;
        pivot_rows(t, basis, i, j);
    }
}

fn pivot_rows(t: &mut [Vec<f64>], basis: &mut [usize], i: usize, j: usize) {
    let p = t[i][j];
    for x in t[i].iter_mut() {
        *x /= p;
    }
    let pr = t[i].clone();
    for (k, row) in t.iter_mut().enumerate() {
        if k != i && row[j] != 0.0 {
            let f = row[j];
            for (x, y) in row.iter_mut().zip(&pr) {
                *x -= f * y;
            }
        }
    }
    basis[i] = j;
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `W(μ, ν)` as twice a dense transportation LP between the reweighted
/// measures `½(1+|v|²)μ` and `½(1+|v|²)ν` with cost `min(|v − v'|, 2)`.
pub fn w_oracle(mu: &EmpiricalMeasure<f64>, nu: &EmpiricalMeasure<f64>) -> f64 {
    let phi = |m: &EmpiricalMeasure<f64>| -> Vec<(Vec<f64>, f64)> {
        m.atoms()
            .iter()
            .map(|(v, w)| {
                let x = v.as_slice().to_vec();
                let e: f64 = x.iter().map(|c| c * c).sum();
                (x, w * 0.5 * (1.0 + e))
            })
            .collect()
    };
    let (p, mut q) = (phi(mu), phi(nu));
    let (mp, mq) = (p.iter().map(|x| x.1).sum::<f64>(), q.iter().map(|x| x.1).sum::<f64>());
    for x in q.iter_mut() {
        x.1 *= mp / mq;
    }
    let (m, n) = (p.len(), q.len());
    let mut c = Vec::with_capacity(m * n);
    for (x, _) in &p {
        for (y, _) in &q {
            c.push(dist(x, y).min(2.0));
        }
    }
    let mut a = Vec::with_capacity(m + n);
    let mut b = Vec::with_capacity(m + n);
    for i in 0..m {
        let mut row = vec![0.0; m * n];
        for j in 0..n {
            row[i * n + j] = 1.0;
        }
        a.push(row);
        b.push(p[i].1);
    }
    for j in 0..n {
        let mut row = vec![0.0; m * n];
        for i in 0..m {
            row[i * n + j] = 1.0;
        }
        a.push(row);
        b.push(q[j].1);
    }
    2.0 * lp_min(&c, &a, &b).expect("balanced transportation problems are feasible")
}
