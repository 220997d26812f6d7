use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};

/// Parameters of one LSTM cell. Gates are laid out `[input, forget, cell, output]`
/// along the column axis of `wx`, `wh` and `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        LstmCell {
            wx: store.push_uniform(format!("{prefix}.wx"), input, 4 * hidden, scale, rng),
            wh: store.push_uniform(format!("{prefix}.wh"), hidden, 4 * hidden, scale, rng),
            b: store.push_uniform(format!("{prefix}.b"), 1, 4 * hidden, scale, rng),
            input,
            hidden,
        }
    }

    pub fn step(&self, tape: &mut Tape, x: Var, h: Var, c: Var) -> (Var, Var) {
        let wx = tape.param(self.wx);
        let wh = tape.param(self.wh);
        let b = tape.param(self.b);
        let xw = tape.matmul(x, wx);
        let hw = tape.matmul(h, wh);
        let pre = tape.add(xw, hw);
        let pre = tape.add_row(pre, b);
        let n = self.hidden;
        let i = tape.slice_cols(pre, 0, n);
        let i = tape.sigmoid(i);
        let f = tape.slice_cols(pre, n, n);
        let f = tape.sigmoid(f);
        let g = tape.slice_cols(pre, 2 * n, n);
        let g = tape.tanh(g);
        let o = tape.slice_cols(pre, 3 * n, n);
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, c);
        let ig = tape.mul(i, g);
        let c_next = tape.add(fc, ig);
        let tc = tape.tanh(c_next);
        let h_next = tape.mul(o, tc);
        (h_next, c_next)
    }

    /// Runs the cell over the rows of `xs` in the given order, returning the
    /// hidden state after each row (same order as `order`).
    pub fn run(&self, tape: &mut Tape, xs: Var, order: impl Iterator<Item = usize>) -> Vec<Var> {
        let zeros = ndarray::Array2::zeros((1, self.hidden));
        let mut h = tape.constant(zeros.clone());
        let mut c = tape.constant(zeros);
        let mut out = Vec::new();
        for i in order {
            let x = tape.row(xs, i);
            let (h2, c2) = self.step(tape, x, h, c);
            h = h2;
            c = c2;
            out.push(h);
        }
        out
    }
}
