//! Error-free transforms for compensated sums and dot products.

/// `(s, e)` with `s = fl(a + b)` and `a + b = s + e` exactly.
#[inline]
pub fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// `(p, e)` with `p = fl(a * b)` and `a * b = p + e` exactly.
#[inline]
pub fn two_prod(a: f64, b: f64) -> (f64, f64) {
    Split::new(a).exact_mul(b)
}

/// A factor pre-split for repeated exact products. Uses a fused
/// multiply-add when the target has one, Dekker's splitting otherwise.
#[derive(Clone, Copy, Debug)]
pub struct Split {
    value: f64,
    hi: f64,
    lo: f64,
}

const SPLITTER: f64 = 134_217_729.0; // 2^27 + 1

#[inline]
fn dekker(a: f64) -> (f64, f64) {
    let c = SPLITTER * a;
    let hi = c - (c - a);
    (hi, a - hi)
}

impl Split {
    #[inline]
    pub fn new(a: f64) -> Self {
        let (hi, lo) = if cfg!(target_feature = "fma") { (a, 0.0) } else { dekker(a) };
        Split { value: a, hi, lo }
    }

    /// `(p, e)` with `p = fl(self * b)` and `self * b = p + e` exactly.
    #[inline]
    pub fn exact_mul(self, b: f64) -> (f64, f64) {
        let p = self.value * b;
        if cfg!(target_feature = "fma") {
            return (p, self.value.mul_add(b, -p));
        }
        let (bh, bl) = dekker(b);
        (p, ((self.hi * bh - p) + self.hi * bl + self.lo * bh) + self.lo * bl)
    }
}

/// Unevaluated sum `hi + lo` accumulated with a cascaded error term.
/// The result is as accurate as if computed in twice the working
/// precision, then rounded.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Compensated {
    pub hi: f64,
    pub lo: f64,
}

impl Compensated {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let (s, e) = two_sum(self.hi, x);
        self.hi = s;
        self.lo += e;
    }

    /// Adds `(a_hi + a_lo) * (b_hi + b_lo)`, dropping the `a_lo * b_lo` term.
    #[inline]
    pub fn add_product(&mut self, a_hi: f64, a_lo: f64, b_hi: f64, b_lo: f64) {
        let (p, e) = two_prod(a_hi, b_hi);
        self.add(p);
        self.lo += e + a_hi * b_lo + a_lo * b_hi;
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.hi + self.lo
    }
}

/// `‖a‖²` as `(hi, lo)` with `hi + lo` accurate to twice the precision.
pub fn norm_sq_split(a: &[f64]) -> (f64, f64) {
    let mut acc = Compensated::default();
    for &x in a {
        acc.add_product(x, 0.0, x, 0.0);
    }
    let (hi, lo) = two_sum(acc.hi, acc.lo);
    (hi, lo)
}
