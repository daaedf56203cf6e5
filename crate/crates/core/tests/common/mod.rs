//! Independent oracles shared by the integration tests. Nothing here calls
//! into the code paths it is used to check.
#![allow(dead_code)]

use nalgebra::{DMatrix, Schur};
use num_complex::Complex64;
use rand::Rng;
use twofloat::TwoFloat;

/// Roots of `z^n + c_1 z^(n-1) + ... + c_n` from nalgebra's Schur solver,
/// or None when it does not converge. Uncapped, it can loop forever on
/// some companion matrices.
pub fn try_roots_nalgebra(c: &[f64]) -> Option<Vec<Complex64>> {
    let n = c.len();
    let mut m = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        m[(0, j)] = -c[j];
    }
    for i in 1..n {
        m[(i, i - 1)] = 1.0;
    }
    let schur = Schur::try_new(m, f64::EPSILON, 100_000)?;
    Some(schur.complex_eigenvalues().iter().map(|z| Complex64::new(z.re, z.im)).collect())
}

pub fn roots_nalgebra(c: &[f64]) -> Vec<Complex64> {
    try_roots_nalgebra(c).expect("companion Schur decomposition did not converge")
}

/// Largest AR pole modulus for predictor coefficients `a` (A = 1 - sum a z^-k).
pub fn max_pole_oracle(a: &[f64]) -> f64 {
    let c: Vec<f64> = a.iter().map(|x| -x).collect();
    roots_nalgebra(&c).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

#[derive(Clone, Copy)]
struct Cdd {
    re: TwoFloat,
    im: TwoFloat,
}

impl Cdd {
    fn add(self, o: Cdd) -> Cdd {
        Cdd { re: self.re + o.re, im: self.im + o.im }
    }
    fn sub(self, o: Cdd) -> Cdd {
        Cdd { re: self.re - o.re, im: self.im - o.im }
    }
    fn mul(self, o: Cdd) -> Cdd {
        Cdd { re: self.re * o.re - self.im * o.im, im: self.re * o.im + self.im * o.re }
    }
    fn div(self, o: Cdd) -> Cdd {
        let d = o.re * o.re + o.im * o.im;
        Cdd { re: (self.re * o.re + self.im * o.im) / d, im: (self.im * o.re - self.re * o.im) / d }
    }
    fn norm_sqr(self) -> TwoFloat {
        self.re * self.re + self.im * self.im
    }
}

fn cdd(re: f64, im: f64) -> Cdd {
    Cdd { re: TwoFloat::from(re), im: TwoFloat::from(im) }
}

/// `z^n + c_1 z^(n-1) + ... + c_n` and its derivative at `z`, double-double.
fn monic_eval(c: &[TwoFloat], z: Cdd) -> (Cdd, Cdd) {
    let (mut f, mut df) = (cdd(1.0, 0.0), cdd(0.0, 0.0));
    for &ck in c {
        df = df.mul(z).add(f);
        f = f.mul(z).add(Cdd { re: ck, im: TwoFloat::from(0.0) });
    }
    (f, df)
}

/// Upper bound on the largest root modulus from approximations `z`: every
/// root lies in the union of discs `|x - z_i| <= n |W_i|` with `W_i` the
/// Weierstrass correction (Braess and Hadeler).
fn inclusion_bound(c: &[TwoFloat], z: &[Cdd]) -> f64 {
    let n = z.len();
    let mut bound = 0.0f64;
    for i in 0..n {
        let (f, _) = monic_eval(c, z[i]);
        let mut den = cdd(1.0, 0.0);
        for j in 0..n {
            if j != i {
                den = den.mul(z[i].sub(z[j]));
            }
        }
        let w = f.div(den).norm_sqr().hi().sqrt();
        let r = z[i].norm_sqr().hi().sqrt();
        bound = bound.max(r + n as f64 * w);
    }
    bound
}

/// Companion eigenvalues as double-double seeds, with exact duplicates split.
/// Without eigenvalues, points spread on a circle and a longer iteration budget.
fn seeds(a: &[f64]) -> (Vec<Cdd>, usize) {
    let n = a.len();
    match try_roots_nalgebra(&a.iter().map(|x| -x).collect::<Vec<_>>()) {
        Some(roots) => (roots
            .iter()
            .enumerate()
            .map(|(i, r)| cdd(r.re + 1e-12 * (i as f64 + 1.0), r.im + 1e-12 * (i as f64 * 0.7 - 3.0)))
            .collect(), 100),
        None => ((0..n)
            .map(|i| {
                let th = std::f64::consts::TAU * (i as f64 + 0.25) / n as f64;
                cdd(0.9 * th.cos(), 0.9 * th.sin())
            })
            .collect(), 2000),
    }
}

/// Aberth iteration in double-double arithmetic.
fn aberth(c: &[TwoFloat], z: &mut [Cdd], iters: usize) {
    let n = z.len();
    let one = cdd(1.0, 0.0);
    for _ in 0..iters {
        let mut biggest = 0.0f64;
        for i in 0..n {
            let (f, df) = monic_eval(c, z[i]);
            if f.norm_sqr().hi() == 0.0 {
                continue;
            }
            let ratio = f.div(df);
            let mut repel = cdd(0.0, 0.0);
            for j in 0..n {
                if j != i {
                    repel = repel.add(one.div(z[i].sub(z[j])));
                }
            }
            let step = ratio.div(one.sub(ratio.mul(repel)));
            z[i] = z[i].sub(step);
            biggest = biggest.max(step.norm_sqr().hi().sqrt());
        }
        if biggest < 1e-22 {
            break;
        }
    }
}

/// Distance `1 - max |pole|` for predictor coefficients `a`, from companion
/// eigenvalues refined by Aberth iteration in double-double arithmetic.
/// Plain f64 eigenvalues of clustered near-unit poles are off by up to 1e-2.
pub fn pole_margin_precise(a: &[f64]) -> f64 {
    let c: Vec<TwoFloat> = a.iter().map(|&x| TwoFloat::from(-x)).collect();
    let (mut z, iters) = seeds(a);
    aberth(&c, &mut z, iters);
    z.iter()
        .map(|r| {
            let m2 = r.norm_sqr();
            let gap = TwoFloat::from(1.0) - m2;
            gap.hi() / (1.0 + m2.hi().sqrt())
        })
        .fold(f64::INFINITY, f64::min)
}

/// Every AR pole certified strictly inside `1 - margin`. Tries the inclusion
/// bound on the raw companion eigenvalues first and refines only when that is
/// inconclusive.
pub fn poles_inside(a: &[f64], margin: f64) -> bool {
    let c: Vec<TwoFloat> = a.iter().map(|&x| TwoFloat::from(-x)).collect();
    let (mut z, iters) = seeds(a);
    if inclusion_bound(&c, &z) < 1.0 - margin {
        return true;
    }
    aberth(&c, &mut z, iters);
    if inclusion_bound(&c, &z) < 1.0 - margin {
        return true;
    }
    pole_margin_precise(a) > margin
}

/// Polynomial in `z^-1` with the given roots, complex coefficients.
pub fn poly_from_roots(roots: &[Complex64]) -> Vec<Complex64> {
    let mut p = vec![Complex64::new(1.0, 0.0)];
    for r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); p.len() + 1];
        for (k, c) in p.iter().enumerate() {
            next[k] += c;
            next[k + 1] -= c * r;
        }
        p = next;
    }
    p
}

/// Predictor coefficients from LSFs by building P and Q from their
/// unit-circle roots and averaging.
pub fn lsf_to_ar_oracle(lsf: &[f64]) -> Vec<f64> {
    let p = lsf.len();
    let mut p_roots = Vec::new();
    let mut q_roots = Vec::new();
    if p % 2 == 0 {
        p_roots.push(Complex64::new(-1.0, 0.0));
        q_roots.push(Complex64::new(1.0, 0.0));
    } else {
        q_roots.push(Complex64::new(1.0, 0.0));
        q_roots.push(Complex64::new(-1.0, 0.0));
    }
    for (i, &w) in lsf.iter().enumerate() {
        let pair = [Complex64::from_polar(1.0, w), Complex64::from_polar(1.0, -w)];
        if i % 2 == 0 {
            p_roots.extend(pair);
        } else {
            q_roots.extend(pair);
        }
    }
    let pp = poly_from_roots(&p_roots);
    let qq = poly_from_roots(&q_roots);
    (1..=p).map(|k| -0.5 * (pp[k] + qq[k]).re).collect()
}

/// LSFs of predictor coefficients `a` from the root angles of P and Q.
pub fn ar_to_lsf_oracle(a: &[f64]) -> Vec<f64> {
    let p = a.len();
    let mut poly = vec![1.0];
    poly.extend(a.iter().map(|x| -x));
    poly.push(0.0);
    let sym: Vec<f64> = (0..=p + 1).map(|k| poly[k] + poly[p + 1 - k]).collect();
    let anti: Vec<f64> = (0..=p + 1).map(|k| poly[k] - poly[p + 1 - k]).collect();
    let angles = |coeffs: &[f64]| -> Vec<f64> {
        let c: Vec<f64> = coeffs[1..].iter().map(|x| x / coeffs[0]).collect();
        let mut v: Vec<f64> = roots_nalgebra(&c)
            .iter()
            .filter(|z| z.im > 1e-7)
            .map(|z| z.arg())
            .collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    };
    let mut all: Vec<f64> = angles(&sym);
    all.extend(angles(&anti));
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all
}

/// Stable predictor coefficients from reflection coefficients (step-up recursion).
pub fn ar_from_reflection(k: &[f64]) -> Vec<f64> {
    let mut a: Vec<f64> = Vec::new();
    for &km in k {
        let prev = a.clone();
        let m = prev.len();
        a.push(km);
        for j in 0..m {
            a[j] = prev[j] - km * prev[m - 1 - j];
        }
    }
    a
}

/// Predictor coefficients whose poles are drawn uniformly (area) inside the
/// disc of radius `max_radius`: conjugate pairs plus one real pole for odd order.
pub fn random_stable_ar<R: Rng>(rng: &mut R, p: usize, max_radius: f64) -> Vec<f64> {
    let mut roots = Vec::new();
    for _ in 0..p / 2 {
        let r = max_radius * rng.random::<f64>().sqrt();
        let th = rng.random::<f64>() * std::f64::consts::PI;
        roots.push(Complex64::from_polar(r, th));
        roots.push(Complex64::from_polar(r, -th));
    }
    if p % 2 == 1 {
        roots.push(Complex64::new(rng.random_range(-max_radius..max_radius), 0.0));
    }
    let poly = poly_from_roots(&roots);
    poly[1..].iter().map(|c| -c.re).collect()
}

/// Random strictly ascending LSFs with every gap at least `min_gap`.
pub fn random_lsf<R: Rng>(rng: &mut R, p: usize, min_gap: f64) -> Vec<f64> {
    let top = std::f64::consts::PI - 1e-4;
    let slack = top - min_gap * (p as f64 + 1.0);
    let mut u: Vec<f64> = (0..p).map(|_| rng.random::<f64>() * slack).collect();
    u.sort_by(|a, b| a.partial_cmp(b).unwrap());
    u.iter().enumerate().map(|(i, x)| x + min_gap * (i as f64 + 1.0)).collect()
}

/// Silhouette by brute force over all pairs.
pub fn silhouette_oracle(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let classes: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    let mut total = 0.0;
    for i in 0..points.len() {
        let own = labels[i];
        let own_n = labels.iter().filter(|&&l| l == own).count();
        if own_n <= 1 {
            continue;
        }
        let a: f64 = (0..points.len())
            .filter(|&j| j != i && labels[j] == own)
            .map(|j| dist(&points[i], &points[j]))
            .sum::<f64>()
            / (own_n - 1) as f64;
        let b = classes
            .iter()
            .filter(|&&c| c != own)
            .map(|&c| {
                let members: Vec<usize> = (0..points.len()).filter(|&j| labels[j] == c).collect();
                members.iter().map(|&j| dist(&points[i], &points[j])).sum::<f64>()
                    / members.len() as f64
            })
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    total / points.len() as f64
}

/// Adjusted Rand index by counting agreements over all unordered pairs.
pub fn ari_oracle(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let (mut same_both, mut same_a, mut same_b) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let sa = a[i] == a[j];
            let sb = b[i] == b[j];
            if sa && sb {
                same_both += 1.0;
            }
            if sa {
                same_a += 1.0;
            }
            if sb {
                same_b += 1.0;
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let expected = same_a * same_b / pairs;
    let max = 0.5 * (same_a + same_b);
    if max == expected {
        return 1.0;
    }
    (same_both - expected) / (max - expected)
}

/// NMI (arithmetic-mean normalisation) from joint probabilities.
pub fn nmi_oracle(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut mi = 0.0;
    let pa = |x: usize| a.iter().filter(|&&v| v == x).count() as f64 / n;
    let pb = |y: usize| b.iter().filter(|&&v| v == y).count() as f64 / n;
    for x in 0..ka {
        for y in 0..kb {
            let pxy = a.iter().zip(b).filter(|(&u, &v)| u == x && v == y).count() as f64 / n;
            if pxy > 0.0 {
                mi += pxy * (pxy / (pa(x) * pb(y))).ln();
            }
        }
    }
    let h = |p: &dyn Fn(usize) -> f64, k: usize| -> f64 {
        (0..k).map(p).filter(|&q| q > 0.0).map(|q| -q * q.ln()).sum()
    };
    let (ha, hb) = (h(&pa, ka), h(&pb, kb));
    if ha + hb == 0.0 {
        return 1.0;
    }
    2.0 * mi / (ha + hb)
}
