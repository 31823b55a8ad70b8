//! Scalar reverse-mode tape.
//!
//! Every `Var` operation appends one node holding the indices of its (at
//! most two) parents and the local partial derivatives; `backward` runs one
//! reverse sweep over the node list. This is enough machinery to
//! differentiate an unrolled solve, and small enough that its own tests can
//! pin every derivative rule against closed forms.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Clone, Copy)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
}

/// Records one scalar computation; create `Var` leaves with [`Tape::var`].
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// One scalar on a tape. Copyable: operations consume copies and append
/// nodes to the shared tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: u32,
    value: f64,
}

/// Adjoints of every node after a reverse sweep from one root.
pub struct Gradients {
    adjoints: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// New leaf variable. Constants that nothing differentiates against are
    /// ordinary leaves whose adjoint is simply never read.
    pub fn var(&self, value: f64) -> Var<'_> {
        let index = self.push(Node {
            parents: [0, 0],
            partials: [0.0, 0.0],
        });
        Var {
            tape: self,
            index,
            value,
        }
    }

    fn push(&self, mut node: Node) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let index = u32::try_from(nodes.len()).expect("tape exceeds u32 indices");
        // Leaves parent themselves; zero partials make that a no-op.
        if node.partials == [0.0, 0.0] && node.parents == [0, 0] {
            node.parents = [index, index];
        }
        nodes.push(node);
        index
    }
}

impl<'t> Var<'t> {
    pub fn value(self) -> f64 {
        self.value
    }

    fn unary(self, value: f64, partial: f64) -> Var<'t> {
        let index = self.tape.push(Node {
            parents: [self.index, self.index],
            partials: [partial, 0.0],
        });
        Var {
            tape: self.tape,
            index,
            value,
        }
    }

    fn binary(self, rhs: Var<'t>, value: f64, pl: f64, pr: f64) -> Var<'t> {
        let index = self.tape.push(Node {
            parents: [self.index, rhs.index],
            partials: [pl, pr],
        });
        Var {
            tape: self.tape,
            index,
            value,
        }
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(self.value.sin(), self.value.cos())
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(self.value.cos(), -self.value.sin())
    }

    pub fn tanh(self) -> Var<'t> {
        let t = self.value.tanh();
        self.unary(t, 1.0 - t * t)
    }

    /// Square root with the zero subgradient at 0: the true derivative is
    /// unbounded there, and 0 keeps exactly-aligned correspondences from
    /// poisoning the sweep with infinities.
    pub fn sqrt(self) -> Var<'t> {
        let s = self.value.sqrt();
        let partial = if self.value == 0.0 { 0.0 } else { 0.5 / s };
        self.unary(s, partial)
    }

    pub fn exp(self) -> Var<'t> {
        let e = self.value.exp();
        self.unary(e, e)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(self.value.ln(), 1.0 / self.value)
    }

    pub fn recip(self) -> Var<'t> {
        let r = 1.0 / self.value;
        self.unary(r, -r * r)
    }

    /// Reverse sweep from this variable; its derivative w.r.t. each leaf is
    /// then read off with [`Gradients::wrt`].
    pub fn backward(self) -> Gradients {
        let nodes = self.tape.nodes.borrow();
        let mut adjoints = vec![0.0; self.index as usize + 1];
        adjoints[self.index as usize] = 1.0;
        for i in (0..=self.index as usize).rev() {
            let a = adjoints[i];
            if a == 0.0 {
                continue;
            }
            let node = &nodes[i];
            if node.parents[0] as usize != i {
                adjoints[node.parents[0] as usize] += node.partials[0] * a;
                adjoints[node.parents[1] as usize] += node.partials[1] * a;
            }
        }
        Gradients { adjoints }
    }
}

impl Gradients {
    /// Derivative of the swept root w.r.t. `v`. Variables created after the
    /// root cannot influence it; their adjoint is zero.
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        self.adjoints.get(v.index as usize).copied().unwrap_or(0.0)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value + rhs.value, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value - rhs.value, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value * rhs.value, rhs.value, self.value)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.value / rhs.value;
        self.binary(rhs, v, 1.0 / rhs.value, -v / rhs.value)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(-self.value, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.unary(self.value + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.unary(self.value - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.unary(self.value * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        self.unary(self.value / rhs, 1.0 / rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn product_rule() {
        let tape = Tape::new();
        let x = tape.var(3.0);
        let y = tape.var(5.0);
        let z = x * y + x;
        assert_eq!(z.value(), 18.0);
        let g = z.backward();
        assert_eq!(g.wrt(x), 6.0);
        assert_eq!(g.wrt(y), 3.0);
    }

    #[test]
    fn chain_rule_through_transcendentals() {
        // d/dx sin(x^2) = 2x cos(x^2)
        let tape = Tape::new();
        let x = tape.var(0.7);
        let z = (x * x).sin();
        let g = z.backward();
        assert_abs_diff_eq!(g.wrt(x), 2.0 * 0.7 * (0.49f64).cos(), epsilon = 1e-15);
    }

    #[test]
    fn fan_out_accumulates_adjoints() {
        // z = x*x*x: dz/dx = 3x^2 via three uses of x.
        let tape = Tape::new();
        let x = tape.var(2.0);
        let z = x * x * x;
        assert_abs_diff_eq!(z.backward().wrt(x), 12.0, epsilon = 1e-15);
    }

    #[test]
    fn quotient_and_reciprocal_rules() {
        let tape = Tape::new();
        let x = tape.var(2.0);
        let y = tape.var(4.0);
        let q = x / y;
        let g = q.backward();
        assert_abs_diff_eq!(g.wrt(x), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(g.wrt(y), -2.0 / 16.0, epsilon = 1e-15);

        let r = y.recip();
        assert_abs_diff_eq!(r.backward().wrt(y), -1.0 / 16.0, epsilon = 1e-15);
    }

    #[test]
    fn tanh_exp_ln_sqrt_derivatives() {
        let tape = Tape::new();
        let x = tape.var(0.3);
        assert_abs_diff_eq!(
            x.tanh().backward().wrt(x),
            1.0 - (0.3f64).tanh().powi(2),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(x.exp().backward().wrt(x), (0.3f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(x.ln().backward().wrt(x), 1.0 / 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(
            x.sqrt().backward().wrt(x),
            0.5 / (0.3f64).sqrt(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn sqrt_at_zero_takes_the_zero_subgradient() {
        let tape = Tape::new();
        let x = tape.var(0.0);
        let g = x.sqrt().backward().wrt(x);
        assert_eq!(g, 0.0);
    }

    #[test]
    fn mixed_scalar_operands_do_not_contribute_leaves() {
        let tape = Tape::new();
        let x = tape.var(1.5);
        let z = ((x * 2.0) + 1.0 - 0.5) / 4.0;
        assert_abs_diff_eq!(z.value(), 0.875, epsilon = 1e-15);
        assert_abs_diff_eq!(z.backward().wrt(x), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn variables_created_after_the_root_have_zero_adjoint() {
        let tape = Tape::new();
        let x = tape.var(1.0);
        let z = x * 3.0;
        let late = tape.var(9.0);
        let g = z.backward();
        assert_eq!(g.wrt(late), 0.0);
    }

    #[test]
    fn two_level_reuse_matches_hand_derivative() {
        // f = (x + y)^2 * y, df/dy = 2(x+y)y + (x+y)^2
        let tape = Tape::new();
        let x = tape.var(1.0);
        let y = tape.var(2.0);
        let s = x + y;
        let f = s * s * y;
        let g = f.backward();
        assert_abs_diff_eq!(g.wrt(y), 2.0 * 3.0 * 2.0 + 9.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g.wrt(x), 2.0 * 3.0 * 2.0, epsilon = 1e-15);
    }
}
