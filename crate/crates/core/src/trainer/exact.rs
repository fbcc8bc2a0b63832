//! Small double-double helper: ratios of losses must round the way exact
//! rational arithmetic would, so that decimal-looking inputs produce the
//! decimal-looking betas callers expect (e.g. [0.1,0.2,0.3] -> [0.5,1.0,1.5]).

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi)/2`.
#[derive(Debug, Clone, Copy)]
pub struct TwoFloat {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> TwoFloat {
    let hi = a + b;
    let a2 = hi - b;
    let b2 = hi - a2;
    let lo = (a - a2) + (b - b2);
    TwoFloat { hi, lo }
}

fn two_prod(a: f64, b: f64) -> TwoFloat {
    let hi = a * b;
    let lo = a.mul_add(b, -hi);
    TwoFloat { hi, lo }
}

impl TwoFloat {
    pub fn from_f64(v: f64) -> Self {
        TwoFloat { hi: v, lo: 0.0 }
    }

    pub fn add(self, other: TwoFloat) -> TwoFloat {
        let s = two_sum(self.hi, other.hi);
        let lo = s.lo + self.lo + other.lo;
        let r = two_sum(s.hi, lo);
        TwoFloat { hi: r.hi, lo: r.lo }
    }

    pub fn div_f64(self, d: f64) -> TwoFloat {
        let q1 = self.hi / d;
        let p = two_prod(q1, d);
        let r = (self.hi - p.hi) - p.lo + self.lo;
        let q2 = r / d;
        let s = two_sum(q1, q2);
        TwoFloat { hi: s.hi, lo: s.lo }
    }

    /// `self / other` to roughly 2^-100 relative accuracy.
    pub fn div(self, other: TwoFloat) -> TwoFloat {
        let q1 = self.hi / other.hi;
        // r = self - q1 * other, expanded in parts
        let p = two_prod(q1, other.hi);
        let mut r = self.add(TwoFloat {
            hi: -p.hi,
            lo: -p.lo,
        });
        r = r.add(TwoFloat::from_f64(-q1 * other.lo));
        let q2 = r.hi / other.hi;
        let s = two_sum(q1, q2);
        TwoFloat { hi: s.hi, lo: s.lo }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

/// Exact-as-if-rational sum of a slice.
pub fn exact_sum(values: &[f64]) -> TwoFloat {
    values.iter().fold(TwoFloat::from_f64(0.0), |acc, &v| {
        acc.add(TwoFloat::from_f64(v))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_recovers_cancellation() {
        let s = exact_sum(&[1e16, 1.0, -1e16]);
        assert_eq!(s.to_f64(), 1.0);
    }

    #[test]
    fn division_rounds_like_rational_arithmetic() {
        // (0.3 * 3) / ((0.1+0.2+0.3)/3) = 1.5 exactly under exact rationals
        let sum = exact_sum(&[0.1, 0.2, 0.3]);
        let mean = sum.div_f64(3.0);
        let q = TwoFloat::from_f64(0.3).div(mean);
        assert_eq!(q.to_f64(), 1.5);
        let q = TwoFloat::from_f64(0.1).div(mean);
        assert_eq!(q.to_f64(), 0.5);
        let q = TwoFloat::from_f64(0.2).div(mean);
        assert_eq!(q.to_f64(), 1.0);
    }
}
