//! Scalar reverse-mode automatic differentiation on a linear tape.
//!
//! Every supported operation has local partial derivatives that are known at
//! forward time, so each tape node stores up to two parent indices and the
//! corresponding partials. The backward sweep is a single reverse pass over
//! the node array.
//!
//! Nondifferentiable points follow the crate-wide conventions: `relu` has
//! derivative 0 at exactly 0, and `clamp` passes derivative 1 strictly inside
//! the interval and 0 on clamped coordinates.

/// Index of a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

#[derive(Clone, Copy)]
struct Node {
    p1: u32,
    p2: u32,
    d1: f64,
    d2: f64,
}

const NO_PARENT: u32 = u32::MAX;

/// Recording tape. Build expressions with the arithmetic methods, then call
/// [`Tape::backward`] on a scalar output.
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// Current value of a variable.
    #[inline]
    pub fn value(&self, v: Var) -> f64 {
        self.vals[v.0 as usize]
    }

    #[inline]
    fn push(&mut self, val: f64, node: Node) -> Var {
        let idx = self.vals.len() as u32;
        self.vals.push(val);
        self.nodes.push(node);
        Var(idx)
    }

    /// A leaf variable (gradient flows into it).
    pub fn var(&mut self, val: f64) -> Var {
        self.push(
            val,
            Node {
                p1: NO_PARENT,
                p2: NO_PARENT,
                d1: 0.0,
                d2: 0.0,
            },
        )
    }

    /// A constant (gradient is discarded).
    pub fn constant(&mut self, val: f64) -> Var {
        self.var(val)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let val = self.value(a) + self.value(b);
        self.push(
            val,
            Node {
                p1: a.0,
                p2: b.0,
                d1: 1.0,
                d2: 1.0,
            },
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let val = self.value(a) - self.value(b);
        self.push(
            val,
            Node {
                p1: a.0,
                p2: b.0,
                d1: 1.0,
                d2: -1.0,
            },
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        self.push(
            va * vb,
            Node {
                p1: a.0,
                p2: b.0,
                d1: vb,
                d2: va,
            },
        )
    }

    /// `a * c` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let val = self.value(a) * c;
        self.push(
            val,
            Node {
                p1: a.0,
                p2: NO_PARENT,
                d1: c,
                d2: 0.0,
            },
        )
    }

    /// `a + c` for a constant `c`.
    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let val = self.value(a) + c;
        self.push(
            val,
            Node {
                p1: a.0,
                p2: NO_PARENT,
                d1: 1.0,
                d2: 0.0,
            },
        )
    }

    /// `max(a, 0)` with derivative 0 at 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (val, d) = if va > 0.0 { (va, 1.0) } else { (0.0, 0.0) };
        self.push(
            val,
            Node {
                p1: a.0,
                p2: NO_PARENT,
                d1: d,
                d2: 0.0,
            },
        )
    }

    /// Clamp to `[lo, hi]`. Derivative 1 when the value passes through
    /// unchanged, 0 when it lands on a bound by clamping.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let va = self.value(a);
        let (val, d) = if va < lo {
            (lo, 0.0)
        } else if va > hi {
            (hi, 0.0)
        } else {
            (va, 1.0)
        };
        self.push(
            val,
            Node {
                p1: a.0,
                p2: NO_PARENT,
                d1: d,
                d2: 0.0,
            },
        )
    }

    /// Dot product of a variable vector with a constant vector.
    pub fn dot_const(&mut self, vars: &[Var], consts: &[f64]) -> Var {
        debug_assert_eq!(vars.len(), consts.len());
        let mut acc = self.constant(0.0);
        for (v, c) in vars.iter().zip(consts) {
            let term = self.scale(*v, *c);
            acc = self.add(acc, term);
        }
        acc
    }

    /// Dot product of two variable vectors.
    pub fn dot(&mut self, a: &[Var], b: &[Var]) -> Var {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = self.constant(0.0);
        for (x, y) in a.iter().zip(b) {
            let term = self.mul(*x, *y);
            acc = self.add(acc, term);
        }
        acc
    }

    /// Reverse sweep from `output`; returns the adjoint of every tape slot.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut adj = vec![0.0; self.vals.len()];
        adj[output.0 as usize] = 1.0;
        for idx in (0..=output.0 as usize).rev() {
            let g = adj[idx];
            if g == 0.0 {
                continue;
            }
            let n = self.nodes[idx];
            if n.p1 != NO_PARENT {
                adj[n.p1 as usize] += n.d1 * g;
            }
            if n.p2 != NO_PARENT {
                adj[n.p2 as usize] += n.d2 * g;
            }
        }
        Gradients { adj }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    adj: Vec<f64>,
}

impl Gradients {
    #[inline]
    pub fn get(&self, v: Var) -> f64 {
        self.adj[v.0 as usize]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let mut t = Tape::new();
        let x = t.var(3.0);
        let y = t.var(4.0);
        let xy = t.mul(x, y);
        let out = t.add(xy, x); // x*y + x
        assert_eq!(t.value(out), 15.0);
        let g = t.backward(out);
        assert_eq!(g.get(x), 5.0); // y + 1
        assert_eq!(g.get(y), 3.0); // x
    }

    #[test]
    fn relu_kink_uses_zero_subgradient() {
        let mut t = Tape::new();
        let x = t.var(0.0);
        let r = t.relu(x);
        let g = t.backward(r);
        assert_eq!(t.value(r), 0.0);
        assert_eq!(g.get(x), 0.0);
    }

    #[test]
    fn clamp_blocks_gradient_on_bounds() {
        let mut t = Tape::new();
        let a = t.var(2.0);
        let b = t.var(0.5);
        let ca = t.clamp(a, 0.0, 1.0);
        let cb = t.clamp(b, 0.0, 1.0);
        let s = t.add(ca, cb);
        let g = t.backward(s);
        assert_eq!(t.value(ca), 1.0);
        assert_eq!(g.get(a), 0.0);
        assert_eq!(g.get(b), 1.0);
    }

    #[test]
    fn fan_out_accumulates() {
        // f = x^2 + 2x via shared subexpression
        let mut t = Tape::new();
        let x = t.var(5.0);
        let sq = t.mul(x, x);
        let lin = t.scale(x, 2.0);
        let f = t.add(sq, lin);
        let g = t.backward(f);
        assert_eq!(g.get(x), 12.0); // 2x + 2
    }

    #[test]
    fn dot_helpers_match() {
        let mut t = Tape::new();
        let xs: Vec<Var> = [1.0, 2.0, -3.0].iter().map(|&v| t.var(v)).collect();
        let d = t.dot_const(&xs, &[0.5, -1.0, 2.0]);
        assert_eq!(t.value(d), 0.5 - 2.0 - 6.0);
        let g = t.backward(d);
        assert_eq!(g.get(xs[0]), 0.5);
        assert_eq!(g.get(xs[1]), -1.0);
        assert_eq!(g.get(xs[2]), 2.0);
    }
}
