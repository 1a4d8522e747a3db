use crate::nn::ParameterSet;

/// SGD with heavy-ball momentum: `v ← μ v + g`, `θ ← θ − η v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: ParameterSet,
}

impl Sgd {
    pub fn new(params: &ParameterSet, momentum: f64) -> Self {
        Sgd { momentum, velocity: params.zeros_like() }
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &ParameterSet, lr: f64) {
        self.velocity.scale(self.momentum);
        self.velocity.axpy(1.0, grads);
        params.axpy(-lr, &self.velocity);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{LayoutBuilder, ParamKind};

    #[test]
    fn momentum_accumulates() {
        let mut b = LayoutBuilder::default();
        b.add("w", &[2], ParamKind::Weight);
        let specs = b.finish();
        let mut p = ParameterSet::zeros(specs.clone());
        let g = ParameterSet::from_values(specs, vec![1.0, -2.0]).unwrap();
        let mut opt = Sgd::new(&p, 0.9);
        opt.step(&mut p, &g, 0.1);
        assert_eq!(p.values(), &[-0.1, 0.2]);
        opt.step(&mut p, &g, 0.1);
        // second velocity is 1.9 g
        assert!((p.values()[0] + 0.1 + 0.19).abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut b = LayoutBuilder::default();
        b.add("w", &[3], ParamKind::Weight);
        let specs = b.finish();
        let mut p = ParameterSet::from_values(specs, vec![3.0, -1.0, 0.5]).unwrap();
        let mut opt = Sgd::new(&p, 0.9);
        for _ in 0..300 {
            let g = p.clone();
            opt.step(&mut p, &g, 0.05);
        }
        assert!(p.norm() < 1e-6);
    }
}
