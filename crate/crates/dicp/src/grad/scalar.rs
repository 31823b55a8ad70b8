//! Abstraction over plain `f64` and taped [`Var`] scalars.
//!
//! The unrolled solve is written once against this trait; instantiating it
//! at `f64` gives the plain forward pipeline the finite-difference oracle
//! perturbs, and instantiating it at `Var` records the identical
//! computation for reverse-mode differentiation. Structural identity
//! between the two paths is what makes the oracle comparison meaningful.

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::grad::tape::Var;

pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    /// Numeric value, used for branch decisions and reporting; branching on
    /// it keeps the recorded graph piecewise-fixed around the current point.
    fn value(self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn recip(self) -> Self;
}

impl Real for f64 {
    fn value(self) -> f64 {
        self
    }
    fn sin(self) -> f64 {
        f64::sin(self)
    }
    fn cos(self) -> f64 {
        f64::cos(self)
    }
    fn tanh(self) -> f64 {
        f64::tanh(self)
    }
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
    }
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    fn recip(self) -> f64 {
        1.0 / self
    }
}

impl<'t> Real for Var<'t> {
    fn value(self) -> f64 {
        Var::value(self)
    }
    fn sin(self) -> Self {
        Var::sin(self)
    }
    fn cos(self) -> Self {
        Var::cos(self)
    }
    fn tanh(self) -> Self {
        Var::tanh(self)
    }
    fn sqrt(self) -> Self {
        Var::sqrt(self)
    }
    fn exp(self) -> Self {
        Var::exp(self)
    }
    fn recip(self) -> Self {
        Var::recip(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::tape::Tape;
    use approx::assert_abs_diff_eq;

    /// One polynomial-plus-transcendental expression evaluated generically.
    fn probe<S: Real>(x: S) -> S {
        let y = (x * x - 1.5) * 0.25 + 2.0;
        (y.sin() * y.cos() + y.tanh()).exp() / (y.sqrt() + 1.0) - y.recip()
    }

    #[test]
    fn taped_evaluation_matches_the_plain_float_path() {
        for x in [0.3, 1.7, -2.2, 4.0] {
            let tape = Tape::new();
            let v = tape.var(x);
            assert_eq!(probe(v).value(), probe(x));
        }
    }

    #[test]
    fn taped_derivative_matches_central_differences_of_the_float_path() {
        let h = 1e-6;
        for x in [0.4, 1.1, -1.9] {
            let tape = Tape::new();
            let v = tape.var(x);
            let g = probe(v).backward().wrt(v);
            let fd = (probe(x + h) - probe(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(g, fd, epsilon = 1e-8);
        }
    }
}
