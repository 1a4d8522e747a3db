use ndarray::linalg::general_mat_vec_mul;
use ndarray::{Array1, ArrayView1};

use super::params::{LayoutBuilder, ParamId, ParamKind, ParameterSet};

/// Dense layer `y = W x + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn register(b: &mut LayoutBuilder, name: &str, inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: b.add(format!("{name}.w"), &[outputs, inputs], ParamKind::Weight),
            bias: b.add(format!("{name}.b"), &[outputs], ParamKind::Bias),
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, p: &ParameterSet, x: ArrayView1<f64>) -> Array1<f64> {
        let mut y = p.vector(self.bias).to_owned();
        general_mat_vec_mul(1.0, &p.matrix(self.weight), &x, 1.0, &mut y);
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, p: &ParameterSet, x: ArrayView1<f64>, dy: ArrayView1<f64>, grads: &mut ParameterSet) -> Array1<f64> {
        {
            let mut gw = grads.matrix_mut(self.weight);
            let dy_col = dy.view().insert_axis(ndarray::Axis(1));
            let x_row = x.view().insert_axis(ndarray::Axis(0));
            ndarray::linalg::general_mat_mul(1.0, &dy_col, &x_row, 1.0, &mut gw);
        }
        {
            let mut gb = grads.vector_mut(self.bias);
            gb += &dy;
        }
        let mut dx = Array1::zeros(self.inputs);
        general_mat_vec_mul(1.0, &p.matrix(self.weight).t(), &dy, 0.0, &mut dx);
        dx
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = logits.mapv(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

/// Pulls a gradient on softmax outputs back to the logits.
pub fn softmax_backward(probs: ArrayView1<f64>, dprobs: ArrayView1<f64>) -> Array1<f64> {
    let dot = probs.dot(&dprobs);
    ndarray::Zip::from(&probs).and(&dprobs).map_collect(|&p, &d| p * (d - dot))
}

/// Fuses the recurrent output with the context vector (elementwise product)
/// and maps the result to a location mean in `(0, 1)²`.
#[derive(Debug, Clone)]
pub struct LocationHead {
    pub linear: Linear,
}

#[derive(Debug, Clone)]
pub struct LocationCache {
    hidden: Array1<f64>,
    context: Array1<f64>,
    fused: Array1<f64>,
    mean: Array1<f64>,
}

impl LocationHead {
    pub fn register(b: &mut LayoutBuilder, features: usize) -> Self {
        LocationHead { linear: Linear::register(b, "l.fc", features, 2) }
    }

    pub fn forward(&self, p: &ParameterSet, hidden: ArrayView1<f64>, context: ArrayView1<f64>) -> ([f64; 2], LocationCache) {
        let fused = &hidden * &context;
        let mean = self.linear.forward(p, fused.view()).mapv(sigmoid);
        let out = [mean[0], mean[1]];
        (out, LocationCache { hidden: hidden.to_owned(), context: context.to_owned(), fused, mean })
    }

    /// Returns `(dL/dhidden, dL/dcontext)` given `dL/dmean`.
    pub fn backward(
        &self,
        p: &ParameterSet,
        cache: &LocationCache,
        dmean: [f64; 2],
        grads: &mut ParameterSet,
    ) -> (Array1<f64>, Array1<f64>) {
        let dz = Array1::from_iter((0..2).map(|i| dmean[i] * cache.mean[i] * (1.0 - cache.mean[i])));
        let dfused = self.linear.backward(p, cache.fused.view(), dz.view(), grads);
        (&dfused * &cache.context, &dfused * &cache.hidden)
    }
}

/// Linear map to four logits followed by softmax.
#[derive(Debug, Clone)]
pub struct ClassHead {
    pub linear: Linear,
}

#[derive(Debug, Clone)]
pub struct ClassCache {
    hidden: Array1<f64>,
    pub probs: Array1<f64>,
}

impl ClassHead {
    pub fn register(b: &mut LayoutBuilder, features: usize, classes: usize) -> Self {
        ClassHead { linear: Linear::register(b, "y.fc", features, classes) }
    }

    pub fn forward(&self, p: &ParameterSet, hidden: ArrayView1<f64>) -> (Array1<f64>, ClassCache) {
        let probs = softmax(self.linear.forward(p, hidden).view());
        (probs.clone(), ClassCache { hidden: hidden.to_owned(), probs })
    }

    /// Backward from a gradient on the logits.
    pub fn backward_logits(&self, p: &ParameterSet, cache: &ClassCache, dlogits: ArrayView1<f64>, grads: &mut ParameterSet) -> Array1<f64> {
        self.linear.backward(p, cache.hidden.view(), dlogits, grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_shift_invariant_and_normalized() {
        let z = array![0.3, -1.2, 2.0, 0.0];
        let a = softmax(z.view());
        let b = softmax((&z + 7.5).view());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!((a.sum() - 1.0).abs() < 1e-12);
        assert!(a.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn zero_heads_give_uniform_and_centre() {
        let mut b = LayoutBuilder::default();
        let cls = ClassHead::register(&mut b, 8, 4);
        let loc = LocationHead::register(&mut b, 8);
        let p = ParameterSet::gaussian(b.finish(), 0.5, 3);
        let mut p0 = p.zeros_like();
        p0.values_mut().copy_from_slice(p.values());
        for id in [cls.linear.weight, cls.linear.bias] {
            p0.get_mut(id).fill(0.0);
        }
        let h = Array1::from_iter((0..8).map(|i| i as f64 - 3.0));
        let (probs, _) = cls.forward(&p0, h.view());
        assert!(probs.iter().all(|&v| v == 0.25));

        // zero context, zero bias: fused is zero and the mean sits at the centre
        let (mean, _) = loc.forward(&p, h.view(), Array1::zeros(8).view());
        assert_eq!(mean, [0.5, 0.5]);
    }

    #[test]
    fn hadamard_fusion_is_symmetric() {
        let mut b = LayoutBuilder::default();
        let loc = LocationHead::register(&mut b, 5);
        let p = ParameterSet::gaussian(b.finish(), 0.5, 9);
        let u = array![0.1, -0.4, 0.9, 1.3, -2.0];
        let v = array![1.1, 0.4, -0.2, 0.0, 0.7];
        assert_eq!(loc.forward(&p, u.view(), v.view()).0, loc.forward(&p, v.view(), u.view()).0);
    }
}
