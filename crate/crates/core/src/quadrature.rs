//! Gauss–Legendre rules and product rules on spheres.

use std::f64::consts::PI;

/// `n`-point Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "need at least one node");
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi initial guess, then Newton on P_n.
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, z);
        dp = if d != 0.0 { d } else { dp };
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

/// `(P_n(z), P_n'(z))` by the three-term recurrence.
fn legendre(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

/// Composite Gauss–Legendre rule on `[a, b]` with `panels` equal panels of
/// `order` nodes each.
pub fn composite_rule(a: f64, b: f64, panels: usize, order: usize) -> Vec<(f64, f64)> {
    let (x, w) = gauss_legendre(order);
    let h = (b - a) / panels as f64;
    let mut out = Vec::with_capacity(panels * order);
    for k in 0..panels {
        let lo = a + h * k as f64;
        for (xi, wi) in x.iter().zip(&w) {
            out.push((lo + 0.5 * h * (xi + 1.0), 0.5 * h * wi));
        }
    }
    out
}

pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize, order: usize) -> f64 {
    composite_rule(a, b, panels, order).iter().map(|&(x, w)| w * f(x)).sum()
}

/// Product rule for the normalized uniform measure on `S^{k-1} ⊂ R^k`.
///
/// `k = 1` is the two points `±1`; `k = 2` uses `2n` equispaced angles;
/// `k = 3` uses `n` Gauss nodes in the polar cosine (exact for polynomials in
/// it); larger `k` splits off the polar angle, weighted by `sin^{k-2}`, with a
/// 4-panel Gauss rule and recurses. Weights sum to one.
pub fn sphere_rule(k: usize, n: usize) -> Vec<(Vec<f64>, f64)> {
    assert!(k >= 1 && n >= 1);
    match k {
        1 => vec![(vec![1.0], 0.5), (vec![-1.0], 0.5)],
        2 => {
            let m = 2 * n;
            (0..m)
                .map(|i| {
                    let phi = 2.0 * PI * (i as f64 + 0.5) / m as f64;
                    (vec![phi.cos(), phi.sin()], 1.0 / m as f64)
                })
                .collect()
        }
        _ => {
            let polar: Vec<(f64, f64)> = if k == 3 {
                composite_rule(-1.0, 1.0, 1, n).into_iter().map(|(x, w)| (x.acos(), w)).collect()
            } else {
                composite_rule(0.0, PI, 4, n)
                    .into_iter()
                    .map(|(t, w)| (t, w * t.sin().powi(k as i32 - 2)))
                    .collect()
            };
            let sub = sphere_rule(k - 1, n);
            let mut weights: Vec<f64> = polar.iter().map(|&(_, w)| w).collect();
            let z: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= z);
            let mut out = Vec::with_capacity(polar.len() * sub.len());
            for (&(t, _), &wt) in polar.iter().zip(&weights) {
                let (c, s) = (t.cos(), t.sin());
                for (omega, wo) in &sub {
                    let mut p = Vec::with_capacity(k);
                    p.push(c);
                    p.extend(omega.iter().map(|o| s * o));
                    out.push((p, wt * wo));
                }
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        for n in 1..=20 {
            let (x, w) = gauss_legendre(n);
            for deg in 0..(2 * n) {
                let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
                assert!((q - exact).abs() < 1e-13, "n={n} deg={deg}: {q} vs {exact}");
            }
        }
    }

    #[test]
    fn composite_rule_on_smooth_function() {
        let q = integrate(|t| t.sin(), 0.0, PI, 4, 8);
        assert!((q - 2.0).abs() < 1e-13);
    }

    #[test]
    fn sphere_rules_reproduce_second_moments() {
        for k in 1..=5 {
            let rule = sphere_rule(k, 8);
            let total: f64 = rule.iter().map(|(_, w)| w).sum();
            assert!((total - 1.0).abs() < 1e-13);
            for a in 0..k {
                let m2: f64 = rule.iter().map(|(p, w)| w * p[a] * p[a]).sum();
                assert!((m2 - 1.0 / k as f64).abs() < 1e-11, "k={k} axis={a}: {m2}");
                let m1: f64 = rule.iter().map(|(p, w)| w * p[a]).sum();
                assert!(m1.abs() < 1e-13);
            }
        }
    }

    #[test]
    fn fourth_moment_on_s2() {
        // E[x^4] = 1/5 for uniform points on S^2.
        let rule = sphere_rule(3, 10);
        let m4: f64 = rule.iter().map(|(p, w)| w * p[0].powi(4)).sum();
        assert!((m4 - 0.2).abs() < 1e-12);
    }
}
