//! Velocity fields consumed by the ODE integrator.

use ndarray::{Array1, Array2};

use crate::jet::Jet;
use crate::tape::{concat_cols, concat_rows, Mat, Var};

/// Time argument of a field evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Time<'a> {
    Scalar(f64),
    /// One time per row of the value block (flow-matching regression).
    PerRow(&'a Array1<f64>),
}

impl Time<'_> {
    pub fn column(&self, m: usize) -> Mat {
        match self {
            Time::Scalar(t) => Mat::from_elem((m, 1), *t),
            Time::PerRow(ts) => {
                assert_eq!(ts.len(), m);
                ts.view().insert_axis(ndarray::Axis(1)).to_owned()
            }
        }
    }
}

/// A parametric velocity field `v_θ(τ, x)` evaluated on the tape.
pub trait VelocityField: Sync {
    fn dim(&self) -> usize;
    fn param_count(&self) -> usize;

    /// Splits the `1 × D` parameter row into the pieces `eval` needs.
    fn bind<'t>(&self, theta: Var<'t>) -> Vec<Var<'t>>;

    /// Stacked jet output of shape `jet.rows() × d` for the `m × d` points `x`.
    fn eval<'t>(&self, params: &[Var<'t>], time: Time<'_>, x: Var<'t>, jet: &Jet) -> Var<'t>;
}

/// Stacks the value rows of `x` (optionally with a time column) on top of
/// the constant direction rows of `jet`.
pub fn stack_input<'t>(x: Var<'t>, time: Option<Time<'_>>, jet: &Jet) -> Var<'t> {
    let tape = x.tape();
    let m = jet.m;
    let head = match time {
        Some(t) => concat_cols(&[x, tape.constant(t.column(m))]),
        None => x,
    };
    if jet.is_value() {
        return head;
    }
    let cols = head.shape().1;
    concat_rows(&[head, tape.constant(jet.input_tail(cols))])
}

/// `v(x) = A x + b` with `θ = [A (row-major), b]`; time-independent.
#[derive(Debug, Clone, Copy)]
pub struct AffineField {
    pub d: usize,
}

impl AffineField {
    pub fn pack(a: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
        a.iter().chain(b.iter()).copied().collect()
    }
}

impl VelocityField for AffineField {
    fn dim(&self) -> usize {
        self.d
    }

    fn param_count(&self) -> usize {
        self.d * self.d + self.d
    }

    fn bind<'t>(&self, theta: Var<'t>) -> Vec<Var<'t>> {
        let d = self.d;
        vec![theta.param_slice(0, d, d), theta.param_slice(d * d, 1, d)]
    }

    fn eval<'t>(&self, params: &[Var<'t>], _time: Time<'_>, x: Var<'t>, jet: &Jet) -> Var<'t> {
        let s = stack_input(x, None, jet);
        s.matmul_t(params[0]).add_bias_rows(params[1], jet.m)
    }
}
