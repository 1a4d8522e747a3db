use ndarray::linalg::{general_mat_mul, general_mat_vec_mul};
use ndarray::{s, Array1, ArrayView1, Axis};

use super::heads::sigmoid;
use super::params::{LayoutBuilder, ParamId, ParamKind, ParameterSet};
use crate::error::{Error, Result};

/// One LSTM layer; gate rows are ordered input, forget, candidate, output.
#[derive(Debug, Clone)]
pub struct LstmLayer {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    x: Array1<f64>,
    h_prev: Array1<f64>,
    c_prev: Array1<f64>,
    i: Array1<f64>,
    f: Array1<f64>,
    g: Array1<f64>,
    o: Array1<f64>,
    tanh_c: Array1<f64>,
}

impl LstmLayer {
    pub fn register(b: &mut LayoutBuilder, name: &str, inputs: usize, hidden: usize) -> Self {
        LstmLayer {
            w_ih: b.add(format!("{name}.w_ih"), &[4 * hidden, inputs], ParamKind::Weight),
            w_hh: b.add(format!("{name}.w_hh"), &[4 * hidden, hidden], ParamKind::Weight),
            bias: b.add(format!("{name}.b"), &[4 * hidden], ParamKind::Bias),
            inputs,
            hidden,
        }
    }

    pub fn forward(
        &self,
        p: &ParameterSet,
        x: ArrayView1<f64>,
        h_prev: ArrayView1<f64>,
        c_prev: ArrayView1<f64>,
    ) -> Result<(Array1<f64>, Array1<f64>, LstmCache)> {
        if x.len() != self.inputs || h_prev.len() != self.hidden || c_prev.len() != self.hidden {
            return Err(Error::shape(format!(
                "lstm expects input {} / state {}, got {} / {} / {}",
                self.inputs,
                self.hidden,
                x.len(),
                h_prev.len(),
                c_prev.len()
            )));
        }
        let n = self.hidden;
        let mut z = p.vector(self.bias).to_owned();
        general_mat_vec_mul(1.0, &p.matrix(self.w_ih), &x, 1.0, &mut z);
        general_mat_vec_mul(1.0, &p.matrix(self.w_hh), &h_prev, 1.0, &mut z);
        let i = z.slice(s![0..n]).mapv(sigmoid);
        let f = z.slice(s![n..2 * n]).mapv(sigmoid);
        let g = z.slice(s![2 * n..3 * n]).mapv(f64::tanh);
        let o = z.slice(s![3 * n..4 * n]).mapv(sigmoid);
        let c = &f * &c_prev + &i * &g;
        let tanh_c = c.mapv(f64::tanh);
        let h = &o * &tanh_c;
        let cache = LstmCache {
            x: x.to_owned(),
            h_prev: h_prev.to_owned(),
            c_prev: c_prev.to_owned(),
            i,
            f,
            g,
            o,
            tanh_c,
        };
        Ok((h, c, cache))
    }

    /// Given gradients on `(h, c)`, accumulates parameter gradients and
    /// returns `(dx, dh_prev, dc_prev)`.
    pub fn backward(
        &self,
        p: &ParameterSet,
        cache: &LstmCache,
        dh: ArrayView1<f64>,
        dc: ArrayView1<f64>,
        grads: &mut ParameterSet,
    ) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
        let n = self.hidden;
        let LstmCache { x, h_prev, c_prev, i, f, g, o, tanh_c } = cache;
        let dc_total = &dc + &(&dh * o * &tanh_c.mapv(|t| 1.0 - t * t));
        let mut dz = Array1::<f64>::zeros(4 * n);
        for k in 0..n {
            dz[k] = dc_total[k] * g[k] * i[k] * (1.0 - i[k]);
            dz[n + k] = dc_total[k] * c_prev[k] * f[k] * (1.0 - f[k]);
            dz[2 * n + k] = dc_total[k] * i[k] * (1.0 - g[k] * g[k]);
            dz[3 * n + k] = dh[k] * tanh_c[k] * o[k] * (1.0 - o[k]);
        }
        let dc_prev = &dc_total * f;

        let dz_col = dz.view().insert_axis(Axis(1));
        general_mat_mul(1.0, &dz_col, &x.view().insert_axis(Axis(0)), 1.0, &mut grads.matrix_mut(self.w_ih));
        general_mat_mul(1.0, &dz_col, &h_prev.view().insert_axis(Axis(0)), 1.0, &mut grads.matrix_mut(self.w_hh));
        {
            let mut gb = grads.vector_mut(self.bias);
            gb += &dz;
        }
        let mut dx = Array1::zeros(self.inputs);
        general_mat_vec_mul(1.0, &p.matrix(self.w_ih).t(), &dz, 0.0, &mut dx);
        let mut dh_prev = Array1::zeros(n);
        general_mat_vec_mul(1.0, &p.matrix(self.w_hh).t(), &dz, 0.0, &mut dh_prev);
        (dx, dh_prev, dc_prev)
    }
}

/// `(h, c)` pairs for both recurrent layers.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub h1: Array1<f64>,
    pub c1: Array1<f64>,
    pub h2: Array1<f64>,
    pub c2: Array1<f64>,
}

impl HiddenState {
    pub fn zeros(hidden1: usize, hidden2: usize) -> Self {
        HiddenState {
            h1: Array1::zeros(hidden1),
            c1: Array1::zeros(hidden1),
            h2: Array1::zeros(hidden2),
            c2: Array1::zeros(hidden2),
        }
    }

    pub fn is_finite(&self) -> bool {
        [&self.h1, &self.c1, &self.h2, &self.c2].iter().all(|a| a.iter().all(|v| v.is_finite()))
    }
}

/// Gradient flowing back into a [`HiddenState`].
pub type StateGrad = HiddenState;
