//! Truncated second-order Taylor numbers.
//!
//! A [`HyperDual`] carries `(h(t), h'(t), h''(t))` for some scalar input `t`.
//! Seeding the input as `(t, 1, 0)` and evaluating any composition of the
//! supported primitives yields exact first and second derivatives up to
//! rounding.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HyperDual {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

impl HyperDual {
    pub const fn new(value: f64, d1: f64, d2: f64) -> Self {
        Self { value, d1, d2 }
    }

    pub const fn constant(value: f64) -> Self {
        Self::new(value, 0.0, 0.0)
    }

    /// The independent variable itself.
    pub const fn variable(t: f64) -> Self {
        Self::new(t, 1.0, 0.0)
    }

    pub fn tanh(self) -> Self {
        let y = self.value.tanh();
        let s = 1.0 - y * y;
        Self::new(y, s * self.d1, s * self.d2 - 2.0 * y * s * self.d1 * self.d1)
    }

    pub fn exp(self) -> Self {
        let e = self.value.exp();
        Self::new(e, e * self.d1, e * (self.d2 + self.d1 * self.d1))
    }

    pub fn square(self) -> Self {
        self * self
    }

    pub fn recip(self) -> Self {
        let r = 1.0 / self.value;
        let r2 = r * r;
        Self::new(r, -self.d1 * r2, -self.d2 * r2 + 2.0 * self.d1 * self.d1 * r2 * r)
    }

    pub fn scale(self, k: f64) -> Self {
        Self::new(k * self.value, k * self.d1, k * self.d2)
    }

    pub fn is_finite(self) -> bool {
        self.value.is_finite() && self.d1.is_finite() && self.d2.is_finite()
    }
}

impl From<f64> for HyperDual {
    fn from(v: f64) -> Self {
        Self::constant(v)
    }
}

impl Add for HyperDual {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self::new(self.value + rhs.value, self.d1 + rhs.d1, self.d2 + rhs.d2)
    }
}

impl AddAssign for HyperDual {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl Sub for HyperDual {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.value - rhs.value, self.d1 - rhs.d1, self.d2 - rhs.d2)
    }
}

impl Neg for HyperDual {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.value, -self.d1, -self.d2)
    }
}

impl Mul for HyperDual {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        Self::new(
            self.value * rhs.value,
            self.value * rhs.d1 + self.d1 * rhs.value,
            self.value * rhs.d2 + 2.0 * self.d1 * rhs.d1 + self.d2 * rhs.value,
        )
    }
}

impl Div for HyperDual {
    type Output = Self;
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn div(self, rhs: Self) -> Self {
        self * rhs.recip()
    }
}

/// Dense matrix-vector product `W x` with `W` row-major `rows × x.len()`.
pub fn mat_vec(w: &[f64], rows: usize, x: &[HyperDual]) -> Vec<HyperDual> {
    let cols = x.len();
    debug_assert_eq!(w.len(), rows * cols);
    (0..rows)
        .map(|i| {
            let row = &w[i * cols..(i + 1) * cols];
            row.iter()
                .zip(x)
                .fold(HyperDual::default(), |acc, (&wij, &xj)| acc + xj.scale(wij))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn square_map_at_three() {
        let y = HyperDual::variable(3.0).square();
        assert_eq!((y.value, y.d1, y.d2), (9.0, 6.0, 2.0));
    }

    #[test]
    fn tanh_at_origin() {
        let y = HyperDual::variable(0.0).tanh();
        assert_eq!((y.value, y.d1, y.d2), (0.0, 1.0, 0.0));
    }

    #[test]
    fn division_matches_quotient_rule() {
        // h(t) = 1 / t: h' = -1/t², h'' = 2/t³
        let y = HyperDual::constant(1.0) / HyperDual::variable(2.0);
        assert!(close(y.value, 0.5));
        assert!(close(y.d1, -0.25));
        assert!(close(y.d2, 0.25));
    }

    proptest! {
        // Random three-op compositions against hand-derived symbolic derivatives.
        #[test]
        fn tanh_of_scaled_square(t in -2.0f64..2.0, a in -1.5f64..1.5, b in -1.0f64..1.0) {
            // h(t) = tanh(a t² + b)
            let x = HyperDual::variable(t);
            let h = (x.square().scale(a) + HyperDual::constant(b)).tanh();
            let g = a * t * t + b;
            let th = g.tanh();
            let s = 1.0 - th * th;
            let dg = 2.0 * a * t;
            let d2g = 2.0 * a;
            prop_assert!(close(h.value, th));
            prop_assert!(close(h.d1, s * dg));
            prop_assert!(close(h.d2, s * d2g - 2.0 * th * s * dg * dg));
        }

        #[test]
        fn product_of_exp_and_quotient(t in 0.2f64..2.0, c in 0.5f64..3.0) {
            // h(t) = exp(t) * t / (t + c)
            let x = HyperDual::variable(t);
            let h = x.exp() * x / (x + HyperDual::constant(c));
            let q = t / (t + c);
            let dq = c / (t + c).powi(2);
            let d2q = -2.0 * c / (t + c).powi(3);
            let e = t.exp();
            prop_assert!(close(h.value, e * q));
            prop_assert!(close(h.d1, e * (q + dq)));
            prop_assert!(close(h.d2, e * (q + 2.0 * dq + d2q)));
        }

        #[test]
        fn mat_vec_is_linear_in_channels(w in proptest::collection::vec(-1.0f64..1.0, 6), t in -1.0f64..1.0) {
            let x = [HyperDual::variable(t), HyperDual::variable(t).square()];
            let y = mat_vec(&w, 3, &x);
            for i in 0..3 {
                prop_assert!(close(y[i].value, w[2 * i] * t + w[2 * i + 1] * t * t));
                prop_assert!(close(y[i].d1, w[2 * i] + 2.0 * w[2 * i + 1] * t));
                prop_assert!(close(y[i].d2, 2.0 * w[2 * i + 1]));
            }
        }
    }
}
