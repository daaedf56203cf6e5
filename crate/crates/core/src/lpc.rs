//! Line spectral frequencies and autoregressive coefficients.
//!
//! Conventions: the prediction polynomial is `A(z) = 1 - sum_k a_k z^-k` and
//! the AR recursion is `y[n] = sum_k a_k y[n-k] + e[n]`. For an order-`p`
//! polynomial the symmetric and antisymmetric extensions
//!
//! ```text
//! P(z) = A(z) + z^-(p+1) A(1/z)
//! Q(z) = A(z) - z^-(p+1) A(1/z)
//! ```
//!
//! have all roots on the unit circle when `A` is minimum phase. Their root
//! angles in `(0, pi)`, sorted and interleaved (P first), are the `p` line
//! spectral frequencies. Equally spaced LSFs `i*pi/(p+1)` belong to `A(z) = 1`.
//!
//! All slice-level routines work for any order up to [`MAX_ORDER`] and never
//! allocate, so they can run inside the servo tick.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Order of every AR model in the corpus.
pub const AR_ORDER: usize = 21;

/// Largest order the fixed-size scratch buffers accept.
pub const MAX_ORDER: usize = 32;

/// Upper clamp on any LSF.
pub const LSF_CEILING: f64 = std::f64::consts::PI - 1e-4;

/// Minimum spacing between consecutive LSFs (f64).
pub const MIN_LSF_GAP: f64 = 1e-9;

/// Required distance of every pole from the unit circle (f64).
pub const STABILITY_MARGIN: f64 = 1e-9;

/// Spacing floor applied when converting LSFs to coefficients. An isolated
/// LSF pair with gap `g` puts a pole roughly `0.36 g` inside the unit circle,
/// so this keeps every pole well clear of the stability margin.
pub const CONVERSION_GAP_FLOOR: f64 = 1e-4;

const POLY_LEN: usize = MAX_ORDER + 2;
const MAT: usize = MAX_ORDER + 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpcError {
    #[error("invalid LSF at index {index}: {reason}")]
    InvalidLsf { index: usize, reason: &'static str },
    #[error("polynomial is not stable (max pole modulus {max_modulus})")]
    UnstablePolynomial { max_modulus: f64 },
    #[error("non-finite input at index {index}")]
    NonFiniteInput { index: usize },
    #[error("order {0} outside 1..={MAX_ORDER}")]
    BadOrder(usize),
    #[error("eigenvalue iteration did not converge")]
    NoConvergence,
}

/// Minimum LSF spacing usable at the precision of `T`.
pub fn min_gap<T: Scalar>() -> T {
    T::lit(MIN_LSF_GAP).max(T::epsilon() * T::lit(8.0))
}

/// Stability margin usable at the precision of `T`.
pub fn stability_margin<T: Scalar>() -> T {
    T::lit(STABILITY_MARGIN).max(T::epsilon() * T::lit(64.0))
}

/// Order-21 line spectral frequencies, strictly ascending in `(0, pi - 1e-4]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct LsfVector<T>(pub [T; AR_ORDER]);

/// Order-21 AR coefficients plus excitation variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct ArCoeffs<T> {
    pub a: [T; AR_ORDER],
    pub variance: T,
}

impl<T: Scalar> LsfVector<T> {
    /// Validating constructor.
    pub fn new(values: [T; AR_ORDER]) -> Result<Self, LpcError> {
        validate_lsf(&values)?;
        Ok(Self(values))
    }

    /// The flat-spectrum vector `i*pi/22`.
    pub fn flat() -> Self {
        let mut v = [T::zero(); AR_ORDER];
        flat_lsf(&mut v);
        Self(v)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    /// Convex combination `(1-t)*self + t*other`; stays valid for `t` in `[0, 1]`.
    pub fn lerp(&self, other: &Self, t: T) -> Self {
        let mut out = self.0;
        for (o, (a, b)) in out.iter_mut().zip(self.0.iter().zip(other.0.iter())) {
            *o = *a + (*b - *a) * t;
        }
        Self(out)
    }
}

impl<T: Scalar> ArCoeffs<T> {
    /// Largest pole modulus of `A(z)`.
    pub fn max_pole_modulus(&self) -> Result<T, LpcError> {
        max_pole_modulus(&self.a)
    }

    /// Every pole strictly inside `1 - margin` (Schur-Cohn test).
    pub fn is_stable(&self) -> bool {
        is_stable_with_margin(&self.a, stability_margin::<T>())
    }
}

/// LSFs to AR coefficients; the variance is passed through.
pub fn lsf_to_ar<T: Scalar>(lsf: &LsfVector<T>, variance: T) -> Result<ArCoeffs<T>, LpcError> {
    validate_lsf(&lsf.0)?;
    let mut a = [T::zero(); AR_ORDER];
    lsf_to_poly_stable(&lsf.0, &mut a)?;
    Ok(ArCoeffs { a, variance })
}

/// AR coefficients to LSFs. Fails on polynomials with a pole outside the margin.
pub fn ar_to_lsf<T: Scalar>(ar: &ArCoeffs<T>) -> Result<LsfVector<T>, LpcError> {
    let mut out = [T::zero(); AR_ORDER];
    poly_to_lsf(&ar.a, &mut out)?;
    Ok(LsfVector(out))
}

/// Decoder logits to a valid LSF vector: softmax (with one extra zero logit),
/// cumulative sum, scale by `pi`, clamp at `pi - 1e-4`. Zero logits give the
/// flat vector `i*pi/(p+1)`.
pub fn project_to_lsf<T: Scalar>(logits: &[T; AR_ORDER]) -> Result<LsfVector<T>, LpcError> {
    let mut out = [T::zero(); AR_ORDER];
    project_logits(logits, &mut out)?;
    Ok(LsfVector(out))
}

/// Writes `i*pi/(p+1)` into `out`.
pub fn flat_lsf<T: Scalar>(out: &mut [T]) {
    let denom = T::of_usize(out.len() + 1);
    for (i, o) in out.iter_mut().enumerate() {
        *o = T::of_usize(i + 1) * T::PI() / denom;
    }
}

/// Checks finiteness, range and strict ordering.
pub fn validate_lsf<T: Scalar>(lsf: &[T]) -> Result<(), LpcError> {
    if lsf.is_empty() || lsf.len() > MAX_ORDER {
        return Err(LpcError::BadOrder(lsf.len()));
    }
    let ceiling = T::lit(LSF_CEILING);
    for (i, &w) in lsf.iter().enumerate() {
        if !w.is_finite() {
            return Err(LpcError::NonFiniteInput { index: i });
        }
        if w <= T::zero() {
            return Err(LpcError::InvalidLsf { index: i, reason: "not positive" });
        }
        if w > ceiling {
            return Err(LpcError::InvalidLsf { index: i, reason: "above pi - 1e-4" });
        }
        if i > 0 && w <= lsf[i - 1] {
            return Err(LpcError::InvalidLsf { index: i, reason: "not strictly ascending" });
        }
    }
    Ok(())
}

/// Pushes entries apart so consecutive gaps are at least `gap`, keeping the
/// vector inside `[gap, pi - 1e-4]`.
pub fn enforce_min_gap<T: Scalar>(lsf: &mut [T], gap: T) {
    let ceiling = T::lit(LSF_CEILING);
    let mut lo = gap;
    for w in lsf.iter_mut() {
        if !(*w >= lo) {
            *w = lo;
        }
        lo = *w + gap;
    }
    let mut hi = ceiling;
    for w in lsf.iter_mut().rev() {
        if *w > hi {
            *w = hi;
        }
        hi = *w - gap;
    }
}

/// Slice form of [`project_to_lsf`] for any order.
pub fn project_logits<T: Scalar>(logits: &[T], out: &mut [T]) -> Result<(), LpcError> {
    let p = logits.len();
    if p == 0 || p > MAX_ORDER || out.len() != p {
        return Err(LpcError::BadOrder(p));
    }
    // softmax over the logits plus an implicit zero logit for the gap above
    // the last frequency
    let mut max = T::zero();
    for (i, &l) in logits.iter().enumerate() {
        if !l.is_finite() {
            return Err(LpcError::NonFiniteInput { index: i });
        }
        max = max.max(l);
    }
    let mut total = (-max).exp();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    let scale = T::PI();
    let ceiling = T::lit(LSF_CEILING);
    let mut acc = T::zero();
    for o in out.iter_mut() {
        acc += *o / total;
        *o = (scale * acc).min(ceiling);
    }
    // Only bites when softmax weights underflow.
    enforce_min_gap(out, min_gap::<T>());
    Ok(())
}

/// Unevaluated sum `hi + lo` carrying roughly twice the precision of `T`.
/// Expanding the P and Q products in plain arithmetic loses about `4^p * eps`
/// absolutely, which moves LSFs near 0 or pi by far more than the tolerance.
#[derive(Clone, Copy)]
struct Dw<T> {
    hi: T,
    lo: T,
}

impl<T: Scalar> Dw<T> {
    fn zero() -> Self {
        Dw { hi: T::zero(), lo: T::zero() }
    }

    fn add(self, o: Self) -> Self {
        let s = self.hi + o.hi;
        let bb = s - self.hi;
        let err = (self.hi - (s - bb)) + (o.hi - bb);
        let lo = err + self.lo + o.lo;
        let hi = s + lo;
        Dw { hi, lo: lo - (hi - s) }
    }

    fn of(x: T) -> Self {
        Dw { hi: x, lo: T::zero() }
    }

    fn value(self) -> T {
        self.hi + self.lo
    }

    fn neg(self) -> Self {
        Dw { hi: -self.hi, lo: -self.lo }
    }

    fn mul(self, o: Self) -> Self {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        let lo = e + (self.hi * o.lo + self.lo * o.hi);
        let hi = p + lo;
        Dw { hi, lo: lo - (hi - p) }
    }

    fn div(self, o: Self) -> Self {
        let q1 = self.hi / o.hi;
        let r = self.add(o.scale(q1).neg());
        let q2 = r.hi / o.hi;
        Dw::of(q1).add(Dw::of(q2))
    }

    fn scale(self, c: T) -> Self {
        let p = self.hi * c;
        let e = self.hi.mul_add(c, -p);
        let lo = e + self.lo * c;
        let hi = p + lo;
        Dw { hi, lo: lo - (hi - p) }
    }
}

/// Multiplies `poly` (length `len`) in place by `1 + c1 z^-1 + c2 z^-2`.
fn mul_quadratic<T: Scalar>(poly: &mut [Dw<T>; POLY_LEN], len: usize, c1: T, c2: T) -> usize {
    let mut k = len + 1;
    loop {
        let mut v = if k < len { poly[k] } else { Dw::zero() };
        if k >= 1 && k - 1 < len {
            v = v.add(poly[k - 1].scale(c1));
        }
        if k >= 2 && k - 2 < len {
            v = v.add(poly[k - 2].scale(c2));
        }
        poly[k] = v;
        if k == 0 {
            break;
        }
        k -= 1;
    }
    len + 2
}

fn mul_linear<T: Scalar>(poly: &mut [Dw<T>; POLY_LEN], len: usize, c1: T) -> usize {
    let mut k = len;
    loop {
        let mut v = if k < len { poly[k] } else { Dw::zero() };
        if k >= 1 {
            v = v.add(poly[k - 1].scale(c1));
        }
        poly[k] = v;
        if k == 0 {
            break;
        }
        k -= 1;
    }
    len + 1
}

/// Builds `a_1..a_p` from LSFs without validation or stability checking.
pub fn lsf_to_poly<T: Scalar>(lsf: &[T], a: &mut [T]) -> Result<(), LpcError> {
    let p = lsf.len();
    if p == 0 || p > MAX_ORDER || a.len() != p {
        return Err(LpcError::BadOrder(p));
    }
    let two = T::lit(2.0);
    let mut pp = [Dw::zero(); POLY_LEN];
    let mut qq = [Dw::zero(); POLY_LEN];
    pp[0].hi = T::one();
    qq[0].hi = T::one();
    let (mut lp, mut lq) = (1usize, 1usize);
    if p % 2 == 0 {
        lp = mul_linear(&mut pp, lp, T::one());
        lq = mul_linear(&mut qq, lq, -T::one());
    } else {
        lq = mul_quadratic(&mut qq, lq, T::zero(), -T::one());
    }
    for (i, &w) in lsf.iter().enumerate() {
        let c1 = -two * w.cos();
        if i % 2 == 0 {
            lp = mul_quadratic(&mut pp, lp, c1, T::one());
        } else {
            lq = mul_quadratic(&mut qq, lq, c1, T::one());
        }
    }
    debug_assert_eq!(lp, p + 2);
    debug_assert_eq!(lq, p + 2);
    let half = T::lit(0.5);
    for k in 1..=p {
        let s = pp[k].add(qq[k]);
        a[k - 1] = -(s.hi + s.lo) * half;
    }
    Ok(())
}

/// [`lsf_to_poly`] plus the stability nudge. LSFs are converted as given when
/// the result keeps every pole inside `1 - margin`. Otherwise nearly
/// coincident LSFs are spread to [`CONVERSION_GAP_FLOOR`], and the spacing
/// keeps widening until the poles are inside.
pub fn lsf_to_poly_stable<T: Scalar>(lsf: &[T], a: &mut [T]) -> Result<(), LpcError> {
    let margin = stability_margin::<T>();
    lsf_to_poly(lsf, a)?;
    if is_stable_with_margin(a, margin) {
        return Ok(());
    }
    let mut buf = [T::zero(); MAX_ORDER];
    let work = &mut buf[..lsf.len()];
    work.copy_from_slice(lsf);
    let mut gap = T::lit(CONVERSION_GAP_FLOOR);
    for _ in 0..13 {
        enforce_min_gap(work, gap);
        lsf_to_poly(work, a)?;
        if is_stable_with_margin(a, margin) {
            return Ok(());
        }
        gap = gap * T::lit(2.0);
    }
    Err(LpcError::UnstablePolynomial { max_modulus: max_pole_modulus(a)?.to_f64_lossy() })
}

/// Schur-Cohn (step-down) test that all roots of `1 - sum a_k z^-k` have
/// modulus below `1 - margin`. Runs on the radially scaled coefficients
/// `a_k / r^k`, which moves the roots to `root / r`.
pub fn is_stable_with_margin<T: Scalar>(a: &[T], margin: T) -> bool {
    let p = a.len();
    if p == 0 {
        return true;
    }
    if p > MAX_ORDER {
        return false;
    }
    // double-word throughout: near-unit reflection coefficients amplify
    // rounding through the 1 / (1 - k^2) divisions
    let one = Dw::of(T::one());
    let inv_r = one.div(one.add(Dw::of(-margin)));
    let mut cur = [Dw::zero(); MAX_ORDER];
    let mut scale = one;
    for k in 0..p {
        scale = scale.mul(inv_r);
        cur[k] = scale.scale(a[k]);
        if !cur[k].hi.is_finite() {
            return false;
        }
    }
    let mut prev = [Dw::zero(); MAX_ORDER];
    for m in (1..=p).rev() {
        let k = cur[m - 1];
        if !(k.value().abs() < T::one()) {
            return false;
        }
        let denom = one.add(k.neg()).mul(one.add(k));
        if !(denom.hi > T::zero()) {
            return false;
        }
        for j in 0..m - 1 {
            prev[j] = cur[j].add(k.mul(cur[m - 2 - j])).div(denom);
        }
        cur[..m - 1].copy_from_slice(&prev[..m - 1]);
    }
    true
}

/// Largest root modulus of `z^p - a_1 z^(p-1) - ... - a_p` (the AR poles),
/// from the eigenvalues of its companion matrix.
pub fn max_pole_modulus<T: Scalar>(a: &[T]) -> Result<T, LpcError> {
    let p = a.len();
    if p == 0 || p > MAX_ORDER + 1 {
        return Err(LpcError::BadOrder(p));
    }
    let mut c = [T::zero(); POLY_LEN];
    for (ck, &ak) in c.iter_mut().zip(a) {
        *ck = -ak;
    }
    let mut re = [T::zero(); POLY_LEN];
    let mut im = [T::zero(); POLY_LEN];
    companion_roots(&c[..p], &mut re[..p], &mut im[..p])?;
    Ok(re[..p]
        .iter()
        .zip(&im[..p])
        .map(|(r, i)| r.hypot(*i))
        .fold(T::zero(), T::max))
}

/// Roots of the monic polynomial `z^n + c_1 z^(n-1) + ... + c_n`.
pub fn companion_roots<T: Scalar>(c: &[T], re: &mut [T], im: &mut [T]) -> Result<(), LpcError> {
    let n = c.len();
    if n == 0 || n > MAT - 1 || re.len() != n || im.len() != n {
        return Err(LpcError::BadOrder(n));
    }
    for (i, ci) in c.iter().enumerate() {
        if !ci.is_finite() {
            return Err(LpcError::NonFiniteInput { index: i });
        }
    }
    // 1-based storage to keep the Hessenberg QR readable.
    let mut m = [[T::zero(); MAT]; MAT];
    for j in 1..=n {
        m[1][j] = -c[j - 1];
    }
    for i in 2..=n {
        m[i][i - 1] = T::one();
    }
    balance(&mut m, n);
    hessenberg_qr(&mut m, n, re, im)
}

fn balance<T: Scalar>(a: &mut [[T; MAT]; MAT], n: usize) {
    let radix = T::lit(2.0);
    let sqrdx = radix * radix;
    let mut done = false;
    while !done {
        done = true;
        for i in 1..=n {
            let mut r = T::zero();
            let mut c = T::zero();
            for j in 1..=n {
                if j != i {
                    c += a[j][i].abs();
                    r += a[i][j].abs();
                }
            }
            if c != T::zero() && r != T::zero() {
                let mut g = r / radix;
                let mut f = T::one();
                let s = c + r;
                while c < g {
                    f *= radix;
                    c *= sqrdx;
                }
                g = r * radix;
                while c > g {
                    f /= radix;
                    c /= sqrdx;
                }
                if (c + r) / f < T::lit(0.95) * s {
                    done = false;
                    let g = T::one() / f;
                    for j in 1..=n {
                        a[i][j] *= g;
                    }
                    for j in 1..=n {
                        a[j][i] *= f;
                    }
                }
            }
        }
    }
}

#[inline]
fn sign<T: Scalar>(a: T, b: T) -> T {
    if b >= T::zero() {
        a.abs()
    } else {
        -a.abs()
    }
}

/// Eigenvalues of an upper Hessenberg matrix by shifted Francis QR.
#[allow(clippy::many_single_char_names)]
fn hessenberg_qr<T: Scalar>(
    a: &mut [[T; MAT]; MAT],
    n: usize,
    wr: &mut [T],
    wi: &mut [T],
) -> Result<(), LpcError> {
    let zero = T::zero();
    let mut anorm = zero;
    for i in 1..=n {
        for j in i.saturating_sub(1).max(1)..=n {
            anorm += a[i][j].abs();
        }
    }
    let mut nn = n;
    let mut t = zero;
    let (mut p, mut q, mut r);
    let (mut x, mut y, mut z, mut w);
    while nn >= 1 {
        let mut its = 0;
        loop {
            let mut l = nn;
            while l >= 2 {
                let mut s = a[l - 1][l - 1].abs() + a[l][l].abs();
                if s == zero {
                    s = anorm;
                }
                if a[l][l - 1].abs() + s == s {
                    a[l][l - 1] = zero;
                    break;
                }
                l -= 1;
            }
            x = a[nn][nn];
            if l == nn {
                wr[nn - 1] = x + t;
                wi[nn - 1] = zero;
                nn -= 1;
            } else {
                y = a[nn - 1][nn - 1];
                w = a[nn][nn - 1] * a[nn - 1][nn];
                if l == nn - 1 {
                    p = T::lit(0.5) * (y - x);
                    q = p * p + w;
                    z = q.abs().sqrt();
                    x += t;
                    if q >= zero {
                        z = p + sign(z, p);
                        wr[nn - 2] = x + z;
                        wr[nn - 1] = x + z;
                        if z != zero {
                            wr[nn - 1] = x - w / z;
                        }
                        wi[nn - 2] = zero;
                        wi[nn - 1] = zero;
                    } else {
                        wr[nn - 2] = x + p;
                        wr[nn - 1] = x + p;
                        wi[nn - 2] = -z;
                        wi[nn - 1] = z;
                    }
                    nn -= 2;
                } else {
                    if its == 60 {
                        return Err(LpcError::NoConvergence);
                    }
                    if its == 10 || its == 20 || its == 40 {
                        t += x;
                        for i in 1..=nn {
                            a[i][i] -= x;
                        }
                        let s = a[nn][nn - 1].abs() + a[nn - 1][nn - 2].abs();
                        x = T::lit(0.75) * s;
                        y = x;
                        w = T::lit(-0.4375) * s * s;
                    }
                    its += 1;
                    let mut m = nn - 2;
                    loop {
                        z = a[m][m];
                        r = x - z;
                        let s = y - z;
                        p = (r * s - w) / a[m + 1][m] + a[m][m + 1];
                        q = a[m + 1][m + 1] - z - r - s;
                        r = a[m + 2][m + 1];
                        let s = p.abs() + q.abs() + r.abs();
                        p /= s;
                        q /= s;
                        r /= s;
                        if m == l {
                            break;
                        }
                        let u = a[m][m - 1].abs() * (q.abs() + r.abs());
                        let v = p.abs() * (a[m - 1][m - 1].abs() + z.abs() + a[m + 1][m + 1].abs());
                        if u + v == v {
                            break;
                        }
                        m -= 1;
                    }
                    for i in (m + 2)..=nn {
                        a[i][i - 2] = zero;
                        if i != m + 2 {
                            a[i][i - 3] = zero;
                        }
                    }
                    let mut k = m;
                    while k + 1 <= nn {
                        if k != m {
                            p = a[k][k - 1];
                            q = a[k + 1][k - 1];
                            r = zero;
                            if k != nn - 1 {
                                r = a[k + 2][k - 1];
                            }
                            x = p.abs() + q.abs() + r.abs();
                            if x != zero {
                                p /= x;
                                q /= x;
                                r /= x;
                            }
                        }
                        let s = sign((p * p + q * q + r * r).sqrt(), p);
                        if s != zero {
                            if k == m {
                                if l != m {
                                    a[k][k - 1] = -a[k][k - 1];
                                }
                            } else {
                                a[k][k - 1] = -s * x;
                            }
                            p += s;
                            x = p / s;
                            y = q / s;
                            z = r / s;
                            q /= p;
                            r /= p;
                            for j in k..=nn {
                                p = a[k][j] + q * a[k + 1][j];
                                if k != nn - 1 {
                                    p += r * a[k + 2][j];
                                    a[k + 2][j] -= p * z;
                                }
                                a[k + 1][j] -= p * y;
                                a[k][j] -= p * x;
                            }
                            let mmin = if nn < k + 3 { nn } else { k + 3 };
                            for i in l..=mmin {
                                p = x * a[i][k] + y * a[i][k + 1];
                                if k != nn - 1 {
                                    p += z * a[i][k + 2];
                                    a[i][k + 2] -= p * r;
                                }
                                a[i][k + 1] -= p * q;
                                a[i][k] -= p;
                            }
                        }
                        k += 1;
                    }
                }
            }
            if nn < 2 || l + 1 >= nn {
                break;
            }
        }
    }
    Ok(())
}

/// `sin` and `cos` of `x` (|x| <= pi/2) as double words, by Taylor series.
fn dw_sin_cos<T: Scalar>(x: T) -> (Dw<T>, Dw<T>) {
    let x2 = Dw::of(x).mul(Dw::of(x));
    let floor = T::epsilon() * T::epsilon() * T::lit(1e-3);
    let (mut s, mut c) = (Dw::of(x), Dw::of(T::one()));
    let (mut ts, mut tc) = (Dw::of(x), Dw::of(T::one()));
    for n in 1..40 {
        ts = ts.mul(x2).neg().div(Dw::of(T::of_usize((2 * n) * (2 * n + 1))));
        tc = tc.mul(x2).neg().div(Dw::of(T::of_usize((2 * n - 1) * (2 * n))));
        s = s.add(ts);
        c = c.add(tc);
        if tc.hi.abs() < floor && ts.hi.abs() < floor {
            break;
        }
    }
    (s, c)
}

/// `z(w) = A(e^{jw}) e^{j(p+1)w/2}` with its derivative, in double-word
/// arithmetic. `P` vanishes where `Re z = 0` and `Q` where `Im z = 0`.
/// The powers of `e^{jw/2}` come from a double-word base, so the rounding of
/// library trig does not limit how closely roots can be located.
fn half_phase_point<T: Scalar>(a: &[T], w: T) -> (T, T, T, T) {
    let p = a.len();
    let (us, uc) = dw_sin_cos(w * T::lit(0.5));
    // pw[m] = e^{j m w / 2}
    let mut pw = [(Dw::of(T::one()), Dw::<T>::zero()); MAX_ORDER + 2];
    for m in 1..=p + 1 {
        let (c, s) = pw[m - 1];
        pw[m] = (c.mul(uc).add(s.mul(us).neg()), c.mul(us).add(s.mul(uc)));
    }
    let half = T::lit(0.5);
    let h0 = T::of_usize(p + 1) * half;
    let (c0, s0) = pw[p + 1];
    let mut re = c0;
    let mut im = s0;
    let mut dre = s0.scale(-h0);
    let mut dim = c0.scale(h0);
    for (k, &ak) in a.iter().enumerate() {
        // frequency (p+1)/2 - (k+1), possibly negative
        let m = p as isize - 1 - 2 * k as isize;
        let (cs, sn) = if m >= 0 { pw[m as usize] } else { (pw[(-m) as usize].0, pw[(-m) as usize].1.neg()) };
        let h = T::of_usize(m.unsigned_abs()) * half * if m >= 0 { T::one() } else { -T::one() };
        re = re.add(cs.scale(-ak));
        im = im.add(sn.scale(-ak));
        dre = dre.add(sn.scale(ak * h));
        dim = dim.add(cs.scale(-ak * h));
    }
    (re.value(), im.value(), dre.value(), dim.value())
}

fn wrap_angle<T: Scalar>(x: T) -> T {
    let two_pi = T::PI() * T::lit(2.0);
    let mut y = x % two_pi;
    if y > T::PI() {
        y -= two_pi;
    } else if y <= -T::PI() {
        y += two_pi;
    }
    y
}

/// Zero of `f` in `[lo, hi]` given a sign change: Newton steps that stay
/// inside the shrinking bracket, bisection otherwise.
fn bracketed_root<T: Scalar, F: Fn(T) -> (T, T)>(f: F, lo: T, hi: T) -> T {
    let half = T::lit(0.5);
    let (flo, _) = f(lo);
    let (fhi, _) = f(hi);
    if flo == T::zero() {
        return lo;
    }
    if fhi == T::zero() {
        return hi;
    }
    if (flo < T::zero()) == (fhi < T::zero()) {
        // crossing sits within rounding of an endpoint
        return if flo.abs() <= fhi.abs() { lo } else { hi };
    }
    // orient so that f(xl) < 0
    let (mut xl, mut xh) = if flo < T::zero() { (lo, hi) } else { (hi, lo) };
    let mut x = (lo + hi) * half;
    let mut dx_old = (hi - lo).abs();
    let mut dx = dx_old;
    let (mut g, mut dg) = f(x);
    let tol = T::epsilon() * T::lit(2.0) * x.abs().max(T::one());
    for _ in 0..200 {
        let newton_leaves = ((x - xh) * dg - g) * ((x - xl) * dg - g) > T::zero();
        let too_slow = (T::lit(2.0) * g).abs() > (dx_old * dg).abs();
        dx_old = dx;
        if newton_leaves || too_slow {
            dx = (xh - xl) * half;
            x = xl + dx;
        } else {
            dx = g / dg;
            x -= dx;
        }
        if dx.abs() < tol || (xh - xl).abs() < tol {
            break;
        }
        let (ng, ndg) = f(x);
        g = ng;
        dg = ndg;
        if g == T::zero() {
            break;
        }
        if g < T::zero() {
            xl = x;
        } else {
            xh = x;
        }
    }
    x
}

/// Tracks the unwrapped phase of `z(w)` from 0 to pi. For a minimum phase `A`
/// it rises monotonically from 0 to `(p+1) pi/2` and passes `k pi/2` exactly at
/// the `k`-th LSF. Steps are kept below an eighth of a turn; returns false if
/// the crossing count comes out wrong (a resonance was stepped over).
fn lsf_by_phase<T: Scalar>(a: &[T], lsf: &mut [T], max_step: T) -> bool {
    let p = a.len();
    let half_pi = T::FRAC_PI_2();
    let limit = T::FRAC_PI_4();
    let tiny = T::epsilon() * T::lit(16.0);
    let phase = |w: T| {
        let (re, im, _, _) = half_phase_point(a, w);
        im.atan2(re)
    };
    let (mut w, mut wrapped, mut unwrapped) = (T::zero(), phase(T::zero()), T::zero());
    let mut h = max_step;
    let mut found = 0usize;
    while w < T::PI() {
        let wn = (w + h).min(T::PI());
        let cn = phase(wn);
        let d = wrap_angle(cn - wrapped);
        if (d <= T::zero() || d > limit) && h > tiny {
            h *= T::lit(0.5);
            continue;
        }
        let next = unwrapped + d;
        while found < p && next >= T::of_usize(found + 1) * half_pi {
            let k = found + 1;
            let lo = if found > 0 { w.max(lsf[found - 1]) } else { w };
            let root = if k % 2 == 1 {
                bracketed_root(
                    |x| {
                        let (re, _, dre, _) = half_phase_point(a, x);
                        (re, dre)
                    },
                    lo,
                    wn,
                )
            } else {
                bracketed_root(
                    |x| {
                        let (_, im, _, dim) = half_phase_point(a, x);
                        (im, dim)
                    },
                    lo,
                    wn,
                )
            };
            lsf[found] = root;
            found += 1;
        }
        unwrapped = next;
        wrapped = cn;
        w = wn;
        h = (h * T::lit(1.5)).min(max_step);
    }
    let total = T::of_usize(p + 1) * half_pi;
    found == p && (unwrapped - total).abs() < limit
}

/// Slice form of [`ar_to_lsf`] for any order.
pub fn poly_to_lsf<T: Scalar>(a: &[T], lsf: &mut [T]) -> Result<(), LpcError> {
    let p = a.len();
    if p == 0 || p > MAX_ORDER || lsf.len() != p {
        return Err(LpcError::BadOrder(p));
    }
    if let Some(index) = a.iter().position(|x| !x.is_finite()) {
        return Err(LpcError::NonFiniteInput { index });
    }
    if !is_stable_with_margin(a, stability_margin::<T>()) {
        let modulus = max_pole_modulus(a).map(|m| m.to_f64_lossy()).unwrap_or(f64::NAN);
        return Err(LpcError::UnstablePolynomial { max_modulus: modulus });
    }
    let mut step = T::PI() / T::of_usize(4 * (p + 1));
    let mut ok = false;
    for _ in 0..6 {
        if lsf_by_phase(a, lsf, step) {
            ok = true;
            break;
        }
        step *= T::lit(0.125);
    }
    if !ok {
        return Err(LpcError::NoConvergence);
    }
    let ordered = lsf.windows(2).all(|w| w[1] > w[0]) && lsf[0] > T::zero();
    if !ordered || lsf[p - 1] > T::lit(LSF_CEILING) {
        enforce_min_gap(lsf, min_gap::<T>());
    }
    Ok(())
}
