//! 3×3 convolutions (padding 1) lowered to matrix products, and the residual
//! block built from them.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};

use super::params::{LayoutBuilder, ParamId, ParamKind, ParameterSet};
use crate::error::{Error, Result};

pub type FeatureMap = Array3<f64>;

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Array2<f64>,
    in_dim: (usize, usize, usize),
}

fn out_extent(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

fn im2col(x: &ArrayView3<f64>, stride: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let (ho, wo) = (out_extent(h, stride), out_extent(w, stride));
    let mut cols = Array2::<f64>::zeros((c * 9, ho * wo));
    let xs = x.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = oy * stride + ky;
                    if iy == 0 || iy > h {
                        continue;
                    }
                    let src = ci * h * w + (iy - 1) * w;
                    for ox in 0..wo {
                        let ix = ox * stride + kx;
                        if ix == 0 || ix > w {
                            continue;
                        }
                        cs[row + oy * wo + ox] = xs[src + ix - 1];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, dim: (usize, usize, usize), stride: usize) -> FeatureMap {
    let (c, h, w) = dim;
    let (ho, wo) = (out_extent(h, stride), out_extent(w, stride));
    let mut x = FeatureMap::zeros(dim);
    let xs = x.as_slice_mut().expect("standard layout");
    let cs = cols.as_slice().expect("standard layout");
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = oy * stride + ky;
                    if iy == 0 || iy > h {
                        continue;
                    }
                    let dst = ci * h * w + (iy - 1) * w;
                    for ox in 0..wo {
                        let ix = ox * stride + kx;
                        if ix == 0 || ix > w {
                            continue;
                        }
                        xs[dst + ix - 1] += cs[row + oy * wo + ox];
                    }
                }
            }
        }
    }
    x
}

impl Conv {
    pub fn register(
        b: &mut LayoutBuilder,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        with_bias: bool,
    ) -> Self {
        let weight = b.add(format!("{name}.w"), &[out_channels, in_channels, 3, 3], ParamKind::Weight);
        let bias = with_bias.then(|| b.add(format!("{name}.b"), &[out_channels], ParamKind::Bias));
        Conv { weight, bias, in_channels, out_channels, stride }
    }

    pub fn forward(&self, p: &ParameterSet, x: &FeatureMap) -> Result<(FeatureMap, ConvCache)> {
        let (c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::shape(format!("conv expects {} channels, got {c}", self.in_channels)));
        }
        let (ho, wo) = (out_extent(h, self.stride), out_extent(w, self.stride));
        let x = x.as_standard_layout();
        let cols = im2col(&x.view(), self.stride);
        let mut out = Array2::<f64>::zeros((self.out_channels, ho * wo));
        general_mat_mul(1.0, &p.matrix(self.weight), &cols, 0.0, &mut out);
        if let Some(b) = self.bias {
            let bias = p.get(b);
            for (mut row, &bv) in out.axis_iter_mut(Axis(0)).zip(bias) {
                row += bv;
            }
        }
        let out = out.into_shape_with_order((self.out_channels, ho, wo)).expect("reshape");
        Ok((out, ConvCache { cols, in_dim: (c, h, w) }))
    }

    /// Accumulates weight/bias gradients; returns the input gradient when asked.
    pub fn backward(
        &self,
        p: &ParameterSet,
        cache: &ConvCache,
        dy: &FeatureMap,
        grads: &mut ParameterSet,
        need_input_grad: bool,
    ) -> Option<FeatureMap> {
        let (o, ho, wo) = dy.dim();
        let dy = dy.as_standard_layout();
        let dy2 = ArrayView2::from_shape((o, ho * wo), dy.as_slice().expect("standard layout")).expect("reshape");
        general_mat_mul(1.0, &dy2, &cache.cols.t(), 1.0, &mut grads.matrix_mut(self.weight));
        if let Some(b) = self.bias {
            let mut gb = grads.vector_mut(b);
            gb += &dy2.sum_axis(Axis(1));
        }
        if !need_input_grad {
            return None;
        }
        let mut dcols = Array2::<f64>::zeros(cache.cols.dim());
        general_mat_mul(1.0, &p.matrix(self.weight).t(), &dy2, 0.0, &mut dcols);
        Some(col2im(&dcols, cache.in_dim, self.stride))
    }
}

pub fn relu(x: &FeatureMap) -> FeatureMap {
    x.mapv(|v| v.max(0.0))
}

/// Zeroes `grad` wherever `activation` (a ReLU output or pre-activation) is not positive.
pub fn relu_backward(grad: &mut FeatureMap, activation: &FeatureMap) {
    ndarray::Zip::from(grad).and(activation).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

/// `out = relu(conv2(relu(conv1(x))) + x)`; the convolutions carry no bias.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: Conv,
    pub conv2: Conv,
}

#[derive(Debug, Clone)]
pub struct ResidualCache {
    c1: ConvCache,
    pre1: FeatureMap,
    c2: ConvCache,
    out: FeatureMap,
}

impl ResidualBlock {
    pub fn register(b: &mut LayoutBuilder, name: &str, channels: usize) -> Self {
        ResidualBlock {
            conv1: Conv::register(b, &format!("{name}.conv1"), channels, channels, 1, false),
            conv2: Conv::register(b, &format!("{name}.conv2"), channels, channels, 1, false),
        }
    }

    pub fn forward(&self, p: &ParameterSet, x: &FeatureMap) -> Result<(FeatureMap, ResidualCache)> {
        let (pre1, c1) = self.conv1.forward(p, x)?;
        let (mut out, c2) = self.conv2.forward(p, &relu(&pre1))?;
        if out.dim() != x.dim() {
            return Err(Error::shape(format!("residual branch {:?} vs input {:?}", out.dim(), x.dim())));
        }
        out += x;
        out.mapv_inplace(|v| v.max(0.0));
        Ok((out.clone(), ResidualCache { c1, pre1, c2, out }))
    }

    pub fn backward(
        &self,
        p: &ParameterSet,
        cache: &ResidualCache,
        dout: &FeatureMap,
        grads: &mut ParameterSet,
        need_input_grad: bool,
    ) -> Option<FeatureMap> {
        let mut d = dout.clone();
        relu_backward(&mut d, &cache.out);
        let mut dr = self.conv2.backward(p, &cache.c2, &d, grads, true).expect("input grad");
        relu_backward(&mut dr, &cache.pre1);
        let dx_branch = self.conv1.backward(p, &cache.c1, &dr, grads, need_input_grad);
        dx_branch.map(|mut dx| {
            dx += &d;
            dx
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParameterSet;

    fn naive_conv(w: &[f64], x: &FeatureMap, o: usize, stride: usize) -> FeatureMap {
        let (c, h, wd) = x.dim();
        let (ho, wo) = (out_extent(h, stride), out_extent(wd, stride));
        FeatureMap::from_shape_fn((o, ho, wo), |(oc, oy, ox)| {
            let mut s = 0.0;
            for ci in 0..c {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        let ix = (ox * stride + kx) as isize - 1;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            s += w[((oc * c + ci) * 3 + ky) * 3 + kx] * x[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            s
        })
    }

    #[test]
    fn matches_direct_convolution() {
        for stride in [1, 2] {
            let mut b = LayoutBuilder::default();
            let conv = Conv::register(&mut b, "t", 3, 5, stride, false);
            let p = ParameterSet::gaussian(b.finish(), 0.3, 1);
            let x = FeatureMap::from_shape_fn((3, 7, 6), |(c, y, x)| ((c * 13 + y * 7 + x * 3) % 11) as f64 / 5.0 - 1.0);
            let (y, _) = conv.forward(&p, &x).unwrap();
            let want = naive_conv(p.get(conv.weight), &x, 5, stride);
            assert_eq!(y.dim(), want.dim());
            for (a, b) in y.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weight_block_is_relu() {
        let mut b = LayoutBuilder::default();
        let block = ResidualBlock::register(&mut b, "r", 4);
        let p = ParameterSet::zeros(b.finish());
        let x = FeatureMap::from_shape_fn((4, 5, 5), |(c, y, x)| (c as f64 - 1.5) * (y as f64 + 0.5) - x as f64 * 0.1);
        let (out, _) = block.forward(&p, &x).unwrap();
        assert_eq!(out, x.mapv(|v| v.max(0.0)));
        let pos = x.mapv(f64::abs);
        assert_eq!(block.forward(&p, &pos).unwrap().0, pos);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let mut b = LayoutBuilder::default();
        let conv = Conv::register(&mut b, "t", 3, 5, 1, true);
        let p = ParameterSet::zeros(b.finish());
        assert!(conv.forward(&p, &FeatureMap::zeros((2, 4, 4))).is_err());
    }
}
