//! Power-law stress `S(A) = (κ+|A|)^{p-2} A` and its companion `V(A) = (κ+|A|)^{(p-2)/2} A`.
//!
//! Monotonicity constants used by the tests, valid for all 2x2 `A, B` and `κ ≥ 0`:
//!
//! `c_p |V(A)-V(B)|² ≤ (S(A)-S(B)):(A-B) ≤ C_p |V(A)-V(B)|²` with
//! `c_p = min(1, p-1) / max(1, p/2)²` and
//! `C_p = (p-1) p²` for `p ≥ 2`, `C_p = 4^{3-p} / (p² (p-1))` for `p < 2`.

use crate::error::{invalid, Result};
use nalgebra::Matrix2;

pub type Mat2 = Matrix2<f64>;

#[inline]
pub fn frob(a: &Mat2) -> f64 {
    (a[(0, 0)] * a[(0, 0)] + a[(0, 1)] * a[(0, 1)] + a[(1, 0)] * a[(1, 0)] + a[(1, 1)] * a[(1, 1)]).sqrt()
}

#[inline]
pub fn ddot(a: &Mat2, b: &Mat2) -> f64 {
    a[(0, 0)] * b[(0, 0)] + a[(0, 1)] * b[(0, 1)] + a[(1, 0)] * b[(1, 0)] + a[(1, 1)] * b[(1, 1)]
}

#[inline]
pub fn sym(a: &Mat2) -> Mat2 {
    let off = 0.5 * (a[(0, 1)] + a[(1, 0)]);
    Mat2::new(a[(0, 0)], off, off, a[(1, 1)])
}

/// Coefficients of the Jacobian: `DS(A)[B] = alpha B + beta (Â:B) Â` with `Â = A/|A|`.
#[derive(Clone, Copy, Debug)]
pub struct JacobianCoeffs {
    pub alpha: f64,
    pub beta: f64,
    pub dir: Mat2,
}

impl JacobianCoeffs {
    #[inline]
    pub fn apply(&self, b: &Mat2) -> Mat2 {
        b * self.alpha + self.dir * (self.beta * ddot(&self.dir, b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerLaw {
    p: f64,
    kappa: f64,
}

impl PowerLaw {
    pub fn new(p: f64, kappa: f64) -> Result<Self> {
        if !(p.is_finite() && p > 1.0) {
            return invalid(format!("p must lie in (1, inf), got {p}"));
        }
        if !(kappa.is_finite() && kappa >= 0.0) {
            return invalid(format!("kappa must be finite and >= 0, got {kappa}"));
        }
        Ok(Self { p, kappa })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Conjugate exponent `p' = p/(p-1)`.
    pub fn p_dual(&self) -> f64 {
        self.p / (self.p - 1.0)
    }

    pub fn c_lower(&self) -> f64 {
        let p = self.p;
        (1f64).min(p - 1.0) / (1f64).max(p / 2.0).powi(2)
    }

    pub fn c_upper(&self) -> f64 {
        let p = self.p;
        if p >= 2.0 {
            (p - 1.0) * p * p
        } else {
            4f64.powf(3.0 - p) / (p * p * (p - 1.0))
        }
    }

    #[inline]
    fn weight(&self, t: f64, exponent: f64) -> f64 {
        let base = self.kappa + t;
        if base == 0.0 {
            // only reached for A = 0, where the product with A vanishes
            0.0
        } else {
            base.powf(exponent)
        }
    }

    #[inline]
    pub fn s(&self, a: &Mat2) -> Mat2 {
        a * self.weight(frob(a), self.p - 2.0)
    }

    #[inline]
    pub fn v(&self, a: &Mat2) -> Mat2 {
        a * self.weight(frob(a), 0.5 * (self.p - 2.0))
    }

    /// Scalar viscosity `(κ + max(|A|, reg))^{p-2}`.
    #[inline]
    pub fn viscosity(&self, a: &Mat2, reg: f64) -> f64 {
        (self.kappa + frob(a).max(reg)).powf(self.p - 2.0)
    }

    /// `DS(A)` with the modulus clamped below by `reg`.
    #[inline]
    pub fn jacobian(&self, a: &Mat2, reg: f64) -> JacobianCoeffs {
        let t_raw = frob(a);
        let t = t_raw.max(reg);
        let base = self.kappa + t;
        let alpha = base.powf(self.p - 2.0);
        if t_raw == 0.0 || self.p == 2.0 {
            return JacobianCoeffs {
                alpha,
                beta: 0.0,
                dir: Mat2::zeros(),
            };
        }
        let beta = (self.p - 2.0) * base.powf(self.p - 3.0) * t;
        JacobianCoeffs {
            alpha,
            beta,
            dir: a / t_raw,
        }
    }

    pub fn ds_apply(&self, a: &Mat2, b: &Mat2, reg: f64) -> Mat2 {
        self.jacobian(a, reg).apply(b)
    }

    /// `φ(t) = ∫_0^t (κ+s)^{p-2} s ds`.
    pub fn phi(&self, t: f64) -> f64 {
        let (p, k) = (self.p, self.kappa);
        if t <= 0.0 {
            return 0.0;
        }
        if k == 0.0 {
            return t.powf(p) / p;
        }
        let l = (t / k).ln_1p();
        let kp = k.powf(p);
        kp * ((p * l).exp_m1() / p - (((p - 1.0) * l).exp_m1()) / (p - 1.0))
    }

    /// `φ*(|S(A)|) + φ(|B|) - S(A):B`, nonnegative by the Fenchel–Young inequality.
    pub fn young_gap(&self, a: &Mat2, b: &Mat2) -> f64 {
        let sa = self.s(a);
        let dual = ddot(&sa, a) - self.phi(frob(a));
        dual + self.phi(frob(b)) - ddot(&sa, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat() -> impl Strategy<Value = Mat2> {
        prop::array::uniform4(-3.0f64..3.0).prop_map(|v| Mat2::new(v[0], v[1], v[2], v[3]))
    }

    fn law() -> impl Strategy<Value = PowerLaw> {
        (1.05f64..4.0, prop_oneof![Just(0.0), 0.0f64..1.0]).prop_map(|(p, k)| PowerLaw::new(p, k).unwrap())
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(PowerLaw::new(1.0, 0.0).is_err());
        assert!(PowerLaw::new(0.5, 0.0).is_err());
        assert!(PowerLaw::new(2.0, -0.1).is_err());
        assert!(PowerLaw::new(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn linear_case() {
        let law = PowerLaw::new(2.0, 0.0).unwrap();
        let a = Mat2::new(1.0, 2.0, 0.5, -1.0);
        assert_eq!(law.s(&a), a);
        assert_eq!(law.v(&a), a);
        let id = law.jacobian(&a, 1e-8);
        assert_eq!(id.alpha, 1.0);
        assert_eq!(id.beta, 0.0);
    }

    #[test]
    fn s_of_zero() {
        for p in [1.5, 2.0, 3.0] {
            let law = PowerLaw::new(p, 0.0).unwrap();
            assert_eq!(law.s(&Mat2::zeros()), Mat2::zeros());
            assert_eq!(law.v(&Mat2::zeros()), Mat2::zeros());
        }
    }

    #[test]
    fn symmetric_identity_p3() {
        // S(I/√2) with p=3, κ=0: |A| = 1 so S = A
        let law = PowerLaw::new(3.0, 0.0).unwrap();
        let a = Mat2::identity() / 2f64.sqrt();
        assert!((law.s(&a) - a).norm() < 1e-15);
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let h = 1e-6;
        for &(p, k) in &[(1.5, 0.0), (1.5, 0.3), (2.0, 0.0), (3.0, 0.0), (3.0, 0.5)] {
            let law = PowerLaw::new(p, k).unwrap();
            let a = Mat2::new(0.7, -0.2, 0.4, 1.1);
            let b = Mat2::new(0.3, 0.9, -0.5, 0.2);
            let fd = (law.s(&(a + b * h)) - law.s(&(a - b * h))) / (2.0 * h);
            let an = law.ds_apply(&a, &b, 1e-8);
            assert!((fd - an).norm() <= 1e-6 * an.norm(), "p={p} k={k}");
        }
    }

    #[test]
    fn phi_matches_quadrature() {
        let law = PowerLaw::new(2.7, 0.4).unwrap();
        let t = 1.3;
        let n = 20000;
        let mut acc = 0.0;
        for i in 0..n {
            let s = (i as f64 + 0.5) * t / n as f64;
            acc += (0.4 + s).powf(0.7) * s;
        }
        acc *= t / n as f64;
        assert!((law.phi(t) - acc).abs() < 1e-8);
    }

    proptest! {
        #[test]
        fn monotone_between_constants(law in law(), a in mat(), b in mat()) {
            let ds = law.s(&a) - law.s(&b);
            let lhs = ddot(&ds, &(a - b));
            let dv = law.v(&a) - law.v(&b);
            let vv = ddot(&dv, &dv);
            let slack = 1e-12 * (1.0 + lhs.abs() + vv);
            prop_assert!(law.c_lower() * vv <= lhs + slack);
            prop_assert!(lhs <= law.c_upper() * vv + slack);
        }

        #[test]
        fn young_gap_nonnegative(law in law(), a in mat(), b in mat()) {
            let g = law.young_gap(&a, &b);
            let scale = 1.0 + frob(&a).powf(law.p()) + frob(&b).powf(law.p());
            prop_assert!(g >= -1e-12 * scale, "gap {g}");
        }

        #[test]
        fn young_gap_vanishes_on_diagonal(law in law(), a in mat()) {
            let scale = 1.0 + frob(&a).powf(law.p());
            prop_assert!(law.young_gap(&a, &a).abs() <= 1e-12 * scale);
        }

        #[test]
        fn jacobian_is_symmetric_positive(law in law(), a in mat(), b in mat(), c in mat()) {
            let j = law.jacobian(&a, 1e-8);
            let bc = ddot(&j.apply(&b), &c);
            let cb = ddot(&j.apply(&c), &b);
            prop_assert!((bc - cb).abs() <= 1e-10 * (1.0 + bc.abs()));
            prop_assert!(ddot(&j.apply(&b), &b) >= 0.0);
        }
    }
}
