//! Double-double arithmetic, enough for a ~106-bit natural log.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DD {
    pub hi: f64,
    pub lo: f64,
}

const LN2: DD = DD {
    hi: std::f64::consts::LN_2,
    lo: 2.3190468138462996e-17,
};

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl DD {
    pub const ZERO: DD = DD { hi: 0.0, lo: 0.0 };

    pub fn from_f64(x: f64) -> Self {
        DD { hi: x, lo: 0.0 }
    }

    pub fn add(self, b: DD) -> DD {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        DD { hi, lo }
    }

    pub fn neg(self) -> DD {
        DD {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    pub fn sub(self, b: DD) -> DD {
        self.add(b.neg())
    }

    pub fn mul(self, b: DD) -> DD {
        let (p, e) = two_prod(self.hi, b.hi);
        let (hi, lo) = quick_two_sum(p, e + self.hi * b.lo + self.lo * b.hi);
        DD { hi, lo }
    }

    pub fn mul_f64(self, b: f64) -> DD {
        self.mul(DD::from_f64(b))
    }

    pub fn div(self, b: DD) -> DD {
        let q1 = self.hi / b.hi;
        let r = self.sub(b.mul_f64(q1));
        let q2 = r.hi / b.hi;
        let r = r.sub(b.mul_f64(q2));
        let q3 = r.hi / b.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        DD { hi, lo }.add(DD::from_f64(q3))
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

/// Natural log of a positive normal `x`: `x = m * 2^e` with
/// `m` in [sqrt(1/2), sqrt(2)), `ln m = 2 atanh((m - 1) / (m + 1))` summed
/// as a series.
pub fn ln(x: f64) -> DD {
    assert!(x > 0.0 && x.is_normal(), "ln oracle needs a positive normal input, got {x}");
    let bits = x.to_bits();
    let mut e = ((bits >> 52) & 0x7ff) as i64 - 1023;
    let mut m = f64::from_bits((bits & ((1u64 << 52) - 1)) | (1023u64 << 52));
    if m > std::f64::consts::SQRT_2 {
        m /= 2.0;
        e += 1;
    }
    let (dh, dl) = two_sum(m, 1.0);
    let z = DD::from_f64(m - 1.0).div(DD { hi: dh, lo: dl });
    let z2 = z.mul(z);
    let mut term = z;
    let mut sum = z;
    let mut k = 1.0;
    loop {
        term = term.mul(z2);
        let t = term.div(DD::from_f64(2.0 * k + 1.0));
        sum = sum.add(t);
        if t.hi.abs() <= 1e-36 || t.hi.abs() < 1e-34 * sum.hi.abs() {
            break;
        }
        k += 1.0;
    }
    LN2.mul_f64(e as f64).add(sum.mul_f64(2.0))
}

/// Mean of `ln p` over `probs`.
pub fn mean_ln(probs: &[f64]) -> f64 {
    let total = probs.iter().fold(DD::ZERO, |acc, &p| acc.add(ln(p)));
    total.div(DD::from_f64(probs.len() as f64)).to_f64()
}
