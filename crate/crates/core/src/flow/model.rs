use std::f64::consts::{LN_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::condnet::{CondNet, CondNetSpec};
use crate::flow::layers::{self, Layer, LayerSpec, Pass};
use crate::flow::params::{Bound, ParamStore, Pid};
use crate::num::tape::{Tape, Var};
use crate::num::tensor::Tensor;

/// Full structural description of a conditional flow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    /// Real input channels (`2C` for `C` coils).
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub layers: Vec<LayerSpec>,
    pub cond: Option<CondNetSpec>,
    /// Coupling scale clamp `s = s_max tanh(s_raw / s_max)`.
    pub s_max: f64,
    /// Seed for parameter initialization.
    pub seed: u64,
}

fn mix(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(salt.wrapping_mul(0xbf58_476d_1ce4_e5b9))
}

impl FlowSpec {
    /// Multiscale layout: per level a squeeze, a transition, `steps` flow
    /// steps (actnorm, orthogonal mixing, coupling), then a split on every
    /// level but the last, which emits all its channels.
    #[allow(clippy::too_many_arguments)]
    pub fn multiscale(
        channels: usize,
        height: usize,
        width: usize,
        levels: usize,
        steps: usize,
        hidden: usize,
        cond: Option<CondNetSpec>,
        seed: u64,
    ) -> Result<Self> {
        if levels == 0 {
            return Err(Error::InvalidParam("need at least one level".into()));
        }
        let mut layers = Vec::new();
        for l in 0..levels {
            let tap = cond.as_ref().map(|_| l);
            layers.push(LayerSpec::Squeeze);
            layers.push(LayerSpec::Transition {
                seed: mix(seed, layers.len() as u64),
            });
            for _ in 0..steps {
                layers.push(LayerSpec::ActNorm);
                layers.push(LayerSpec::Orth1x1 {
                    seed: mix(seed, layers.len() as u64),
                });
                layers.push(LayerSpec::Coupling { hidden, tap });
            }
            if l + 1 < levels {
                layers.push(LayerSpec::Split);
            }
        }
        let spec = Self {
            channels,
            height,
            width,
            layers,
            cond,
            s_max: 2.0,
            seed,
        };
        spec.shapes()?;
        Ok(spec)
    }

    /// Unconditional single-scale stack without squeezing.
    pub fn flat(
        channels: usize,
        height: usize,
        width: usize,
        steps: usize,
        hidden: usize,
        seed: u64,
    ) -> Self {
        let mut layers = Vec::new();
        for _ in 0..steps {
            layers.push(LayerSpec::ActNorm);
            layers.push(LayerSpec::Orth1x1 {
                seed: mix(seed, layers.len() as u64),
            });
            layers.push(LayerSpec::Coupling { hidden, tap: None });
        }
        Self {
            channels,
            height,
            width,
            layers,
            cond: None,
            s_max: 2.0,
            seed,
        }
    }

    /// Input shape of each layer, plus the final shape.
    pub fn shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut s = [self.channels, self.height, self.width];
        let mut out = vec![s];
        for l in &self.layers {
            s = layers::out_shape(l, s)?;
            out.push(s);
        }
        Ok(out)
    }

    /// Shapes of the latent pieces in emission order.
    pub fn latent_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let shapes = self.shapes()?;
        let mut out = Vec::new();
        for (l, s) in self.layers.iter().zip(&shapes) {
            if matches!(l, LayerSpec::Split) {
                out.push([s[0] - s[0] / 2, s[1], s[2]]);
            }
        }
        out.push(*shapes.last().expect("non-empty"));
        Ok(out)
    }

    /// Total dimension `Q`.
    pub fn dim(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Spatial size of conditioning tap `l` for an `h x w` input.
    pub fn tap_size(h: usize, w: usize, l: usize) -> (usize, usize) {
        let down = |d: usize| (d - 1) / 2 + 1;
        let (mut a, mut b) = (h, w);
        for _ in 0..=l {
            a = down(a);
            b = down(b);
        }
        (a, b)
    }

    fn validate(&self) -> Result<Vec<[usize; 3]>> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidParam("empty flow input".into()));
        }
        if !(self.s_max > 0.0) {
            return Err(Error::InvalidParam("s_max must be positive".into()));
        }
        let shapes = self.shapes()?;
        for (l, s) in self.layers.iter().zip(&shapes) {
            if let LayerSpec::Coupling { tap: Some(t), .. } = l {
                let cond = self.cond.as_ref().ok_or_else(|| {
                    Error::InvalidParam("coupling uses a tap but there is no condnet".into())
                })?;
                if *t >= cond.levels {
                    return Err(Error::Shape(format!(
                        "tap {t} requested, condnet has {}",
                        cond.levels
                    )));
                }
                if cond.in_channels != self.channels {
                    return Err(Error::Shape(format!(
                        "condnet takes {} channels, flow has {}",
                        cond.in_channels, self.channels
                    )));
                }
                let (th, tw) = Self::tap_size(self.height, self.width, *t);
                if (th, tw) != (s[1], s[2]) {
                    return Err(Error::Shape(format!(
                        "tap {t} is {th}x{tw} but its coupling runs at {}x{}",
                        s[1], s[2]
                    )));
                }
            }
        }
        let q: usize = self
            .latent_shapes()?
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum();
        debug_assert_eq!(q, self.dim());
        Ok(shapes)
    }
}

/// Conditional normalizing flow `h` with its conditioning network `g`.
#[derive(Clone, Debug)]
pub struct FlowModel {
    spec: FlowSpec,
    layers: Vec<Layer>,
    cond: Option<CondNet>,
    params: ParamStore,
    latent_shapes: Vec<[usize; 3]>,
    actnorm_initialized: bool,
}

impl FlowModel {
    /// Build with freshly initialized parameters (identity couplings).
    pub fn new(spec: FlowSpec) -> Result<Self> {
        let shapes = spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut params = ParamStore::new();
        if let Some(c) = &spec.cond {
            CondNet::build(c.clone(), &mut params, &mut rng)?;
        }
        let cond_width = spec.cond.as_ref().map_or(0, |c| c.tap_width);
        for (i, (l, s)) in spec.layers.iter().zip(&shapes).enumerate() {
            layers::init_params(l, i, *s, cond_width, &mut params, &mut rng)?;
        }
        Self::from_parts(spec, params, false)
    }

    /// Attach a spec to existing parameters (checkpoint loading).
    pub fn from_parts(
        spec: FlowSpec,
        params: ParamStore,
        actnorm_initialized: bool,
    ) -> Result<Self> {
        let shapes = spec.validate()?;
        let cond = spec
            .cond
            .as_ref()
            .map(|c| CondNet::attach(c.clone(), &params))
            .transpose()?;
        let layers = spec
            .layers
            .iter()
            .zip(&shapes)
            .enumerate()
            .map(|(i, (l, s))| layers::attach(l, i, *s, &params))
            .collect::<Result<_>>()?;
        let latent_shapes = spec.latent_shapes()?;
        Ok(Self {
            spec,
            layers,
            cond,
            params,
            latent_shapes,
            actnorm_initialized,
        })
    }

    pub fn spec(&self) -> &FlowSpec {
        &self.spec
    }

    #[cfg(test)]
    pub(crate) fn layers_for_test(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn latent_shapes(&self) -> &[[usize; 3]] {
        &self.latent_shapes
    }

    pub fn condnet(&self) -> Option<&CondNet> {
        self.cond.as_ref()
    }

    pub fn actnorm_initialized(&self) -> bool {
        self.actnorm_initialized
    }

    /// Mark actnorm layers as initialized without running data through them.
    pub fn set_actnorm_initialized(&mut self, v: bool) {
        self.actnorm_initialized = v;
    }

    /// Drop the conditioning network's pretraining head.
    pub fn remove_cond_head(&mut self) -> Result<()> {
        let params = self.params.without_prefix("cond.head.");
        *self = Self::from_parts(self.spec.clone(), params, self.actnorm_initialized)?;
        Ok(())
    }

    /// Set the scale and bias of actnorm layer `layer` explicitly.
    pub fn set_actnorm(&mut self, layer: usize, scale: &[f64], bias: &[f64]) -> Result<()> {
        let a = match self.layers.get(layer) {
            Some(Layer::ActNorm(a)) | Some(Layer::Transition(a, _)) => a.clone(),
            _ => return Err(Error::InvalidParam(format!("layer {layer} has no actnorm"))),
        };
        if scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidParam(
                "actnorm scales must be positive and finite".into(),
            ));
        }
        let c = scale.len();
        self.params.set(
            a.logs,
            Tensor::new(vec![c], scale.iter().map(|s| s.ln()).collect())?,
        )?;
        self.params
            .set(a.bias, Tensor::new(vec![c], bias.to_vec())?)?;
        Ok(())
    }

    fn check_input(&self, shape: &[usize], what: &str) -> Result<()> {
        let want = [self.spec.channels, self.spec.height, self.spec.width];
        if shape.len() != 4 || shape[1..] != want {
            return Err(Error::Shape(format!(
                "{what} must be [N, {}, {}, {}], got {shape:?}",
                want[0], want[1], want[2]
            )));
        }
        Ok(())
    }

    /// Conditioning features for a batch of `n`; a batch-1 `y` is shared by
    /// every sample.
    pub fn cond_graph(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        y: Option<Var>,
        n: usize,
    ) -> Result<Vec<Var>> {
        let Some(cond) = &self.cond else {
            return Ok(Vec::new());
        };
        let y = y.ok_or_else(|| Error::InvalidParam("conditional flow needs y".into()))?;
        self.check_input(tape.shape(y), "y")?;
        let yn = tape.shape(y)[0];
        if yn != n && yn != 1 {
            return Err(Error::Shape(format!("y batch {yn} vs sample batch {n}")));
        }
        let feats = cond.features(tape, bound, y)?;
        Ok(if yn == 1 && n > 1 {
            feats.into_iter().map(|f| tape.repeat_batch(f, n)).collect()
        } else {
            feats
        })
    }

    fn forward_impl(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        u: Var,
        y: Option<Var>,
        init: Option<&mut Vec<(Pid, Tensor)>>,
    ) -> Result<(Var, Var)> {
        self.check_input(tape.shape(u), "u")?;
        let n = tape.shape(u)[0];
        let cond = self.cond_graph(tape, bound, y, n)?;
        let mut logdet = tape.leaf(Tensor::zeros(&[n]));
        let mut latents = Vec::new();
        let mut pass = Pass {
            tape,
            bound,
            s_max: self.spec.s_max,
            init,
        };
        let mut x = u;
        for layer in &self.layers {
            (x, logdet) = layer.forward(&mut pass, x, &cond, &mut latents, logdet)?;
        }
        latents.push(x);
        let flat: Vec<Var> = latents
            .iter()
            .map(|&v| {
                let k: usize = tape.shape(v)[1..].iter().product();
                tape.reshape(v, &[n, k, 1, 1])
            })
            .collect();
        let z = tape.concat_channels(&flat);
        let z = tape.reshape(z, &[n, self.latent_dim()]);
        Ok((z, logdet))
    }

    /// `z = h^{-1}(u, g(y))` as `[N, Q]` and the per-sample log-determinant
    /// `[N]` of that map.
    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        u: Var,
        y: Option<Var>,
    ) -> Result<(Var, Var)> {
        self.forward_impl(tape, bound, u, y, None)
    }

    /// Per-sample `log p(u | y)` in nats, `[N]`.
    pub fn log_prob_graph(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        u: Var,
        y: Option<Var>,
    ) -> Result<Var> {
        let (z, logdet) = self.forward_graph(tape, bound, u, y)?;
        Ok(self.gaussian_log_prob(tape, z, logdet))
    }

    fn gaussian_log_prob(&self, tape: &mut Tape, z: Var, logdet: Var) -> Var {
        let q = self.latent_dim() as f64;
        let sq = tape.square(z);
        let sq = tape.sum_per_sample(sq);
        let lz = tape.scale(sq, -0.5);
        let lz = tape.add_const(lz, -0.5 * q * (2.0 * PI).ln());
        tape.add(lz, logdet)
    }

    /// `u = h(z, g(y))` from latents `[N, Q]`.
    pub fn inverse_graph(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        z: Var,
        y: Option<Var>,
    ) -> Result<Var> {
        let zs = tape.shape(z);
        if zs.len() != 2 || zs[1] != self.latent_dim() {
            return Err(Error::Shape(format!(
                "z must be [N, {}], got {zs:?}",
                self.latent_dim()
            )));
        }
        let n = zs[0];
        let cond = self.cond_graph(tape, bound, y, n)?;
        let z4 = tape.reshape(z, &[n, self.latent_dim(), 1, 1]);
        let mut latents = Vec::with_capacity(self.latent_shapes.len());
        let mut offset = 0;
        for s in &self.latent_shapes {
            let k = s[0] * s[1] * s[2];
            let piece = tape.slice_channels(z4, offset, k);
            latents.push(tape.reshape(piece, &[n, s[0], s[1], s[2]]));
            offset += k;
        }
        let mut x = latents.pop().expect("at least one latent");
        let mut pass = Pass {
            tape,
            bound,
            s_max: self.spec.s_max,
            init: None,
        };
        for layer in self.layers.iter().rev() {
            x = layer.inverse(&mut pass, x, &cond, &mut latents)?;
        }
        Ok(x)
    }

    fn check_finite(tape: &Tape, v: Var) -> Result<()> {
        match tape.first_non_finite(v) {
            Some(op) => Err(Error::Poisoned { op }),
            None => Ok(()),
        }
    }

    /// Latents and log-determinants for concrete inputs.
    pub fn forward(&self, u: &Tensor, y: Option<&Tensor>) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let uv = tape.leaf(u.clone());
        let yv = y.map(|t| tape.leaf(t.clone()));
        let (z, ld) = self.forward_graph(&mut tape, &bound, uv, yv)?;
        Self::check_finite(&tape, ld)?;
        Ok((tape.value(z).clone(), tape.value(ld).data().to_vec()))
    }

    /// `log p(u | y)` per sample, in nats.
    pub fn log_prob(&self, u: &Tensor, y: Option<&Tensor>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let uv = tape.leaf(u.clone());
        let yv = y.map(|t| tape.leaf(t.clone()));
        let lp = self.log_prob_graph(&mut tape, &bound, uv, yv)?;
        Self::check_finite(&tape, lp)?;
        Ok(tape.value(lp).data().to_vec())
    }

    /// Generate `u = h(z, g(y))`.
    pub fn inverse(&self, z: &Tensor, y: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let zv = tape.leaf(z.clone());
        let yv = y.map(|t| tape.leaf(t.clone()));
        let u = self.inverse_graph(&mut tape, &bound, zv, yv)?;
        Self::check_finite(&tape, u)?;
        Ok(tape.value(u).clone())
    }

    /// Draw `n` samples with `z ~ N(0, I)`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        n: usize,
        y: Option<&Tensor>,
        rng: &mut R,
    ) -> Result<Tensor> {
        let z = Tensor::randn(&[n, self.latent_dim()], rng);
        self.inverse(&z, y)
    }

    /// Conditioning features for a concrete `y`.
    pub fn cond_features(&self, y: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let yv = tape.leaf(y.clone());
        let n = y.shape().first().copied().unwrap_or(1);
        let feats = self.cond_graph(&mut tape, &bound, Some(yv), n)?;
        Ok(feats.iter().map(|&f| tape.value(f).clone()).collect())
    }

    /// Data-dependent actnorm initialization from one batch: afterwards
    /// every actnorm output has zero mean and unit variance per channel on
    /// this batch.
    pub fn initialize_actnorm(&mut self, u: &Tensor, y: Option<&Tensor>) -> Result<()> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let uv = tape.leaf(u.clone());
        let yv = y.map(|t| tape.leaf(t.clone()));
        let mut updates = Vec::new();
        self.forward_impl(&mut tape, &bound, uv, yv, Some(&mut updates))?;
        for (id, value) in updates {
            self.params.set(id, value)?;
        }
        self.actnorm_initialized = true;
        Ok(())
    }

    /// Negative log-likelihood in bits per dimension for a log-density in
    /// nats.
    pub fn bits_per_dim(&self, log_prob: f64) -> f64 {
        -log_prob / (self.latent_dim() as f64 * LN_2)
    }
}
