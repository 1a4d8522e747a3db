use std::sync::Arc;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::encoder::{ContextCache, ContextEncoder, GlimpseCache, GlimpseEncoder, Readout};
use super::heads::{ClassCache, ClassHead, LocationCache, LocationHead};
use super::lstm::{HiddenState, LstmCache, LstmLayer, StateGrad};
use super::params::{LayoutBuilder, ParamSpec, ParameterSet};
use crate::error::{Error, Result};
use crate::imaging::{ContextImage, Glimpse, CONTEXT_FACTOR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub tile_size: usize,
    pub glimpse_size: usize,
    pub stem_channels: usize,
    pub stage_channels: usize,
    /// Per-patch feature width; the glimpse vector is twice this.
    pub branch_features: usize,
    pub context_features: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub classes: usize,
    pub share_glimpse_weights: bool,
    /// Without the context module the location head sees the recurrent output only.
    pub use_context: bool,
    pub context_readout: Readout,
    pub init: InitScheme,
    /// Weight standard deviation under [`InitScheme::Fixed`].
    pub init_std: f64,
}

/// Weight initialization; biases always start at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Every weight from `N(0, init_std²)`.
    Fixed,
    /// `N(0, 2 / fan_in)` for convolutions (ReLU), `N(0, 1 / fan_in)` for
    /// dense and recurrent matrices.
    FanIn,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            tile_size: 256,
            glimpse_size: 16,
            stem_channels: 8,
            stage_channels: 16,
            branch_features: 64,
            context_features: 128,
            hidden1: 256,
            hidden2: 128,
            classes: 4,
            share_glimpse_weights: true,
            use_context: true,
            context_readout: Readout::Flatten,
            init: InitScheme::FanIn,
            init_std: 0.01,
        }
    }
}

impl NetConfig {
    pub fn context_side(&self) -> usize {
        self.tile_size / CONTEXT_FACTOR
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.tile_size == 0 || self.tile_size % CONTEXT_FACTOR != 0 {
            return bad(format!("tile_size {} must be a positive multiple of 16", self.tile_size));
        }
        if self.glimpse_size == 0 || self.glimpse_size % 2 != 0 || self.glimpse_size > self.tile_size / 2 {
            return bad(format!("glimpse_size {} must be even and at most half the tile", self.glimpse_size));
        }
        if self.context_features != self.hidden2 {
            return bad(format!(
                "context_features ({}) must equal hidden2 ({}) for the elementwise fusion",
                self.context_features, self.hidden2
            ));
        }
        if [self.stem_channels, self.stage_channels, self.branch_features, self.hidden1, self.hidden2, self.classes]
            .contains(&0)
        {
            return bad("layer widths must be positive".into());
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad(format!("init_std {} must be positive", self.init_std));
        }
        Ok(())
    }
}

/// The fixed-topology agent network: glimpse encoder, context encoder, two
/// stacked LSTM layers, location head and classification head.
#[derive(Debug, Clone)]
pub struct Network {
    cfg: NetConfig,
    specs: Arc<Vec<ParamSpec>>,
    glimpse: GlimpseEncoder,
    context: Option<ContextEncoder>,
    rnn1: LstmLayer,
    rnn2: LstmLayer,
    location: LocationHead,
    class: ClassHead,
}

#[derive(Debug, Clone)]
pub struct RecurrentCache {
    layer1: LstmCache,
    layer2: LstmCache,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub probs: Array1<f64>,
    /// Location mean for the next glimpse; `None` when the location path was skipped.
    pub mean: Option<[f64; 2]>,
    pub state: HiddenState,
}

#[derive(Debug, Clone)]
pub struct StepCache {
    glimpse: GlimpseCache,
    recurrent: RecurrentCache,
    class: ClassCache,
    context: Option<ContextCache>,
    location: Option<LocationCache>,
}

impl Network {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = LayoutBuilder::default();
        let glimpse = GlimpseEncoder::register(
            &mut b,
            cfg.glimpse_size,
            cfg.stem_channels,
            cfg.stage_channels,
            cfg.branch_features,
            cfg.share_glimpse_weights,
        );
        let context = cfg.use_context.then(|| {
            ContextEncoder::register(
                &mut b,
                cfg.context_side(),
                cfg.stem_channels,
                cfg.stage_channels,
                cfg.context_readout,
                cfg.context_features,
            )
        });
        let rnn1 = LstmLayer::register(&mut b, "hstar", glimpse.features(), cfg.hidden1);
        let rnn2 = LstmLayer::register(&mut b, "h", cfg.hidden1, cfg.hidden2);
        let location = LocationHead::register(&mut b, cfg.hidden2);
        let class = ClassHead::register(&mut b, cfg.hidden2, cfg.classes);
        Ok(Network { cfg, specs: b.finish(), glimpse, context, rnn1, rnn2, location, class })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn specs(&self) -> &Arc<Vec<ParamSpec>> {
        &self.specs
    }

    /// Weights per [`InitScheme`] from a seeded stream, biases zero.
    pub fn init_params(&self, seed: u64) -> ParameterSet {
        let specs = Arc::clone(&self.specs);
        match self.cfg.init {
            InitScheme::Fixed => ParameterSet::gaussian(specs, self.cfg.init_std, seed),
            InitScheme::FanIn => ParameterSet::gaussian_with(specs, seed, |s| {
                let gain = if s.shape.len() == 4 { 2.0 } else { 1.0 };
                (gain / s.fan_in() as f64).sqrt()
            }),
        }
    }

    /// Rejects parameter sets built for a different topology.
    pub fn check_params(&self, p: &ParameterSet) -> Result<()> {
        if p.specs().as_slice() != self.specs.as_slice() {
            return Err(Error::shape("parameter layout does not match the network configuration"));
        }
        Ok(())
    }

    pub fn zero_state(&self) -> HiddenState {
        HiddenState::zeros(self.cfg.hidden1, self.cfg.hidden2)
    }

    pub fn encode_glimpse(&self, p: &ParameterSet, g: &Glimpse) -> Result<(Array1<f64>, GlimpseCache)> {
        self.glimpse.forward(p, g)
    }

    pub fn glimpse_backward(&self, p: &ParameterSet, cache: &GlimpseCache, dv: &Array1<f64>, grads: &mut ParameterSet) {
        self.glimpse.backward(p, cache, dv, grads)
    }

    /// Context feature vector; all ones when the context module is disabled so
    /// the elementwise fusion passes the recurrent output through.
    pub fn encode_context(&self, p: &ParameterSet, ctx: &ContextImage) -> Result<(Array1<f64>, Option<ContextCache>)> {
        match &self.context {
            Some(enc) => enc.forward(p, ctx).map(|(v, c)| (v, Some(c))),
            None => Ok((Array1::ones(self.cfg.hidden2), None)),
        }
    }

    pub fn context_backward(&self, p: &ParameterSet, cache: &ContextCache, dv: &Array1<f64>, grads: &mut ParameterSet) {
        if let Some(enc) = &self.context {
            enc.backward(p, cache, dv, grads)
        }
    }

    pub fn recurrent_step(
        &self,
        p: &ParameterSet,
        v: &Array1<f64>,
        state: &HiddenState,
    ) -> Result<(HiddenState, RecurrentCache)> {
        if !state.is_finite() {
            return Err(Error::NonFinite("recurrent state".into()));
        }
        let (h1, c1, layer1) = self.rnn1.forward(p, v.view(), state.h1.view(), state.c1.view())?;
        let (h2, c2, layer2) = self.rnn2.forward(p, h1.view(), state.h2.view(), state.c2.view())?;
        Ok((HiddenState { h1, c1, h2, c2 }, RecurrentCache { layer1, layer2 }))
    }

    /// Backpropagates one recurrent step; returns `(dv, gradient on the previous state)`.
    pub fn recurrent_backward(
        &self,
        p: &ParameterSet,
        cache: &RecurrentCache,
        dout: &StateGrad,
        grads: &mut ParameterSet,
    ) -> (Array1<f64>, StateGrad) {
        let (dh1_from_2, dh2_prev, dc2_prev) = self.rnn2.backward(p, &cache.layer2, dout.h2.view(), dout.c2.view(), grads);
        let dh1 = &dout.h1 + &dh1_from_2;
        let (dv, dh1_prev, dc1_prev) = self.rnn1.backward(p, &cache.layer1, dh1.view(), dout.c1.view(), grads);
        (dv, HiddenState { h1: dh1_prev, c1: dc1_prev, h2: dh2_prev, c2: dc2_prev })
    }

    pub fn location_head(&self, p: &ParameterSet, hidden: &Array1<f64>, context: &Array1<f64>) -> ([f64; 2], LocationCache) {
        self.location.forward(p, hidden.view(), context.view())
    }

    pub fn location_backward(
        &self,
        p: &ParameterSet,
        cache: &LocationCache,
        dmean: [f64; 2],
        grads: &mut ParameterSet,
    ) -> (Array1<f64>, Array1<f64>) {
        self.location.backward(p, cache, dmean, grads)
    }

    pub fn class_head(&self, p: &ParameterSet, hidden: &Array1<f64>) -> (Array1<f64>, ClassCache) {
        self.class.forward(p, hidden.view())
    }

    pub fn class_backward(&self, p: &ParameterSet, cache: &ClassCache, dlogits: &Array1<f64>, grads: &mut ParameterSet) -> Array1<f64> {
        self.class.backward_logits(p, cache, dlogits.view(), grads)
    }

    /// One glimpse of an episode: encode, recur, classify and (optionally)
    /// predict the next location mean from the current context.
    pub fn step(
        &self,
        p: &ParameterSet,
        glimpse: &Glimpse,
        ctx: Option<&ContextImage>,
        state: &HiddenState,
    ) -> Result<(StepOutput, StepCache)> {
        let (v, glimpse_cache) = self.encode_glimpse(p, glimpse)?;
        let (state, recurrent) = self.recurrent_step(p, &v, state)?;
        let (probs, class) = self.class_head(p, &state.h2);
        let (mean, context, location) = match ctx {
            Some(ctx) => {
                let (v16, context) = self.encode_context(p, ctx)?;
                let (mean, location) = self.location_head(p, &state.h2, &v16);
                (Some(mean), context, Some(location))
            }
            None => (None, None, None),
        };
        Ok((
            StepOutput { probs, mean, state },
            StepCache { glimpse: glimpse_cache, recurrent, class, context, location },
        ))
    }

    /// Backpropagates one step given gradients on its logits, its location mean
    /// and its output state (from later steps). Returns the gradient on the
    /// state the step consumed.
    pub fn step_backward(
        &self,
        p: &ParameterSet,
        cache: &StepCache,
        dlogits: &Array1<f64>,
        dmean: [f64; 2],
        dstate: StateGrad,
        grads: &mut ParameterSet,
    ) -> StateGrad {
        self.step_backward_with(p, cache, dlogits, dmean, dstate, grads, false)
    }

    /// As [`Network::step_backward`]; with `detach_location` the location
    /// head still trains itself and the context encoder, but its gradient does
    /// not enter the recurrent core.
    #[allow(clippy::too_many_arguments)]
    pub fn step_backward_with(
        &self,
        p: &ParameterSet,
        cache: &StepCache,
        dlogits: &Array1<f64>,
        dmean: [f64; 2],
        dstate: StateGrad,
        grads: &mut ParameterSet,
        detach_location: bool,
    ) -> StateGrad {
        let mut dstate = dstate;
        dstate.h2 += &self.class_backward(p, &cache.class, dlogits, grads);
        if let Some(loc) = &cache.location {
            if dmean != [0.0, 0.0] {
                let (dh, dv16) = self.location_backward(p, loc, dmean, grads);
                if !detach_location {
                    dstate.h2 += &dh;
                }
                if let Some(ctx) = &cache.context {
                    self.context_backward(p, ctx, &dv16, grads);
                }
            }
        }
        let (dv, dprev) = self.recurrent_backward(p, &cache.recurrent, &dstate, grads);
        self.glimpse_backward(p, &cache.glimpse, &dv, grads);
        dprev
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{extract_glimpse, make_context, Location, Tile};

    fn small_cfg() -> NetConfig {
        NetConfig {
            tile_size: 64,
            glimpse_size: 8,
            stem_channels: 2,
            stage_channels: 3,
            branch_features: 4,
            context_features: 5,
            hidden1: 6,
            hidden2: 5,
            ..NetConfig::default()
        }
    }

    #[test]
    fn default_topology_matches_documented_sizes() {
        let net = Network::new(NetConfig::default()).unwrap();
        let p = net.init_params(0);
        let shape = |n: &str| p.spec(p.find(n).unwrap()).shape.clone();
        assert_eq!(shape("hstar.w_ih"), vec![4 * 256, 128]);
        assert_eq!(shape("h.w_hh"), vec![4 * 128, 128]);
        assert_eq!(shape("c1.fc.w"), vec![64, 16]);
        assert_eq!(shape("c2.fc.w"), vec![128, 16 * 8 * 8]);
        assert_eq!(shape("l.fc.w"), vec![2, 128]);
        assert_eq!(shape("y.fc.w"), vec![4, 128]);
        let groups: std::collections::BTreeSet<_> = p.specs().iter().map(|s| s.group()).collect();
        assert_eq!(
            groups.into_iter().collect::<Vec<_>>(),
            vec!["theta_c1", "theta_c2", "theta_h", "theta_hstar", "theta_l", "theta_y"]
        );
    }

    #[test]
    fn shared_branches_give_equal_halves_for_equal_patches() {
        let net = Network::new(small_cfg()).unwrap();
        let p = net.init_params(4);
        let tile = Tile::from_fn(64, 64, 0, 0, |y, x, c| ((y * 5 + x * 3 + c) % 17) as f64 / 16.0).unwrap();
        let mut g = extract_glimpse(&tile, Location::new(0.4, 0.6), 8).unwrap();
        g.coarse = g.fine.clone();
        let (v, _) = net.encode_glimpse(&p, &g).unwrap();
        assert_eq!(v.len(), 8);
        for i in 0..4 {
            assert_eq!(v[i], v[i + 4]);
        }
    }

    #[test]
    fn zero_final_linear_gives_zero_features() {
        let net = Network::new(small_cfg()).unwrap();
        let mut p = net.init_params(4);
        for n in ["c1.fc.w", "c1.fc.b"] {
            let id = p.find(n).unwrap();
            p.get_mut(id).fill(0.0);
        }
        let tile = Tile::from_fn(64, 64, 0, 0, |y, _, _| y as f64 / 63.0).unwrap();
        let g = extract_glimpse(&tile, Location::new(0.5, 0.5), 8).unwrap();
        assert!(net.encode_glimpse(&p, &g).unwrap().0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn neutral_context_encodes_to_zero() {
        // inputs are centred on INPUT_CENTER and biases start at zero
        let net = Network::new(small_cfg()).unwrap();
        let p = net.init_params(5);
        let tile = Tile::from_fn(64, 64, 0, 0, |_, _, _| crate::nn::encoder::INPUT_CENTER).unwrap();
        let ctx = make_context(&tile).unwrap();
        let (v, _) = net.encode_context(&p, &ctx).unwrap();
        // 0.5 is one quantization step off in 16-bit samples
        assert!(v.iter().all(|&x| x.abs() < 1e-3), "{v}");
        let again = net.encode_context(&p, &ctx).unwrap().0;
        assert_eq!(v, again);
    }

    #[test]
    fn zero_everything_recurrence_outputs_zero() {
        let net = Network::new(small_cfg()).unwrap();
        let p = ParameterSet::zeros(Arc::clone(net.specs()));
        let (s, _) = net.recurrent_step(&p, &Array1::zeros(8), &net.zero_state()).unwrap();
        assert!(s.h2.iter().all(|&v| v == 0.0));
        assert!(s.h1.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_layout_rejected() {
        let a = Network::new(small_cfg()).unwrap();
        let b = Network::new(NetConfig { share_glimpse_weights: false, ..small_cfg() }).unwrap();
        assert!(a.check_params(&b.init_params(0)).is_err());
        assert!(a.check_params(&a.init_params(0)).is_ok());
    }

    #[test]
    fn rejects_fusion_width_mismatch() {
        assert!(Network::new(NetConfig { context_features: 7, ..small_cfg() }).is_err());
    }
}
