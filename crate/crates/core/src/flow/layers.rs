//! Invertible layers. "Forward" maps data to latent (the normalizing
//! direction); "inverse" generates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::condnet::he_normal;
use crate::flow::params::{Bound, ParamStore, Pid};
use crate::num::ortho::rand_orthogonal;
use crate::num::tape::{Tape, Var};
use crate::num::tensor::Tensor;

/// Structural description of one layer, as stored in checkpoint manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// 2x2 space-to-channel rearrangement.
    Squeeze,
    /// Per-channel affine normalization.
    ActNorm,
    /// Fixed orthogonal channel mixing, regenerated from `seed`.
    Orth1x1 { seed: u64 },
    /// Actnorm followed by a fixed orthogonal mixing, between levels.
    Transition { seed: u64 },
    /// One-sided conditional affine coupling.
    Coupling {
        hidden: usize,
        /// Conditioning feature tap, if any.
        tap: Option<usize>,
    },
    /// Emit the second half of the channels as latent output.
    Split,
}

/// Running shape `[C, H, W]` through a layer stack.
pub(crate) fn out_shape(spec: &LayerSpec, s: [usize; 3]) -> Result<[usize; 3]> {
    let [c, h, w] = s;
    match spec {
        LayerSpec::Squeeze => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::Shape(format!(
                    "squeeze needs even sizes, got {h}x{w}"
                )));
            }
            Ok([4 * c, h / 2, w / 2])
        }
        LayerSpec::Split => {
            if c % 2 != 0 {
                return Err(Error::Shape(format!("split needs even channels, got {c}")));
            }
            Ok([c / 2, h, w])
        }
        LayerSpec::Coupling { .. } if c < 2 => Err(Error::Shape(format!(
            "coupling needs at least 2 channels, got {c}"
        ))),
        _ => Ok(s),
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ActNorm {
    pub logs: Pid,
    pub bias: Pid,
}

#[derive(Clone, Debug)]
pub(crate) struct Orth {
    pub weight: Tensor,
    pub weight_t: Tensor,
}

#[derive(Clone, Debug)]
pub(crate) struct Coupling {
    pub ca: usize,
    pub cb: usize,
    pub tap: Option<usize>,
    pub w: [Pid; 3],
    pub b: [Pid; 3],
}

#[derive(Clone, Debug)]
pub(crate) enum Layer {
    Squeeze,
    ActNorm(ActNorm),
    Orth(Orth),
    Transition(ActNorm, Orth),
    Coupling(Coupling),
    Split,
}

/// Graph-building context shared by all layers of one pass.
pub(crate) struct Pass<'a> {
    pub tape: &'a mut Tape,
    pub bound: &'a Bound,
    pub s_max: f64,
    /// Collects data-dependent actnorm initial values when set.
    pub init: Option<&'a mut Vec<(Pid, Tensor)>>,
}

impl Orth {
    fn new(channels: usize, seed: u64) -> Self {
        let q = rand_orthogonal(channels, seed);
        let mut qt = Tensor::zeros(&[channels, channels]);
        for i in 0..channels {
            for j in 0..channels {
                qt.data_mut()[j * channels + i] = q.data()[i * channels + j];
            }
        }
        Self {
            weight: q.reshape(&[channels, channels, 1, 1]).expect("square"),
            weight_t: qt.reshape(&[channels, channels, 1, 1]).expect("square"),
        }
    }

    fn apply(&self, tape: &mut Tape, x: Var, inverse: bool) -> Var {
        let w = tape.leaf(if inverse {
            self.weight_t.clone()
        } else {
            self.weight.clone()
        });
        tape.conv2d(x, w, None, 1, 0)
    }
}

fn param_name(layer: usize, what: &str) -> String {
    format!("flow.{layer}.{what}")
}

fn lookup(store: &ParamStore, layer: usize, what: &str) -> Result<Pid> {
    let name = param_name(layer, what);
    store
        .id(&name)
        .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
}

/// Add the parameters of layer `index` (input shape `s`) to `store`.
pub(crate) fn init_params<R: Rng + ?Sized>(
    spec: &LayerSpec,
    index: usize,
    s: [usize; 3],
    cond_width: usize,
    store: &mut ParamStore,
    rng: &mut R,
) -> Result<()> {
    let c = s[0];
    match spec {
        LayerSpec::ActNorm | LayerSpec::Transition { .. } => {
            store.add(param_name(index, "logs"), Tensor::zeros(&[c]))?;
            store.add(param_name(index, "bias"), Tensor::zeros(&[c]))?;
        }
        LayerSpec::Coupling { hidden, tap } => {
            let ca = c / 2;
            let cb = c - ca;
            let cin = ca + if tap.is_some() { cond_width } else { 0 };
            store.add(
                param_name(index, "w0"),
                he_normal(&[*hidden, cin, 3, 3], rng),
            )?;
            store.add(param_name(index, "b0"), Tensor::zeros(&[*hidden]))?;
            store.add(
                param_name(index, "w1"),
                he_normal(&[*hidden, *hidden, 1, 1], rng),
            )?;
            store.add(param_name(index, "b1"), Tensor::zeros(&[*hidden]))?;
            // Zero output layer: the coupling starts as the identity.
            store.add(
                param_name(index, "w2"),
                Tensor::zeros(&[2 * cb, *hidden, 3, 3]),
            )?;
            store.add(param_name(index, "b2"), Tensor::zeros(&[2 * cb]))?;
        }
        _ => {}
    }
    Ok(())
}

/// Resolve the runtime form of layer `index` against `store`.
pub(crate) fn attach(
    spec: &LayerSpec,
    index: usize,
    s: [usize; 3],
    store: &ParamStore,
) -> Result<Layer> {
    let c = s[0];
    let actnorm = || -> Result<ActNorm> {
        Ok(ActNorm {
            logs: lookup(store, index, "logs")?,
            bias: lookup(store, index, "bias")?,
        })
    };
    Ok(match spec {
        LayerSpec::Squeeze => Layer::Squeeze,
        LayerSpec::Split => Layer::Split,
        LayerSpec::ActNorm => Layer::ActNorm(actnorm()?),
        LayerSpec::Orth1x1 { seed } => Layer::Orth(Orth::new(c, *seed)),
        LayerSpec::Transition { seed } => Layer::Transition(actnorm()?, Orth::new(c, *seed)),
        LayerSpec::Coupling { tap, .. } => {
            let ca = c / 2;
            Layer::Coupling(Coupling {
                ca,
                cb: c - ca,
                tap: *tap,
                w: [
                    lookup(store, index, "w0")?,
                    lookup(store, index, "w1")?,
                    lookup(store, index, "w2")?,
                ],
                b: [
                    lookup(store, index, "b0")?,
                    lookup(store, index, "b1")?,
                    lookup(store, index, "b2")?,
                ],
            })
        }
    })
}

// Per-channel mean and standard deviation over batch and space.
fn channel_stats(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = t.dims4();
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for (i, chunk) in t.data().chunks(hw).enumerate() {
        mean[i % c] += chunk.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for (i, chunk) in t.data().chunks(hw).enumerate() {
        let m = mean[i % c];
        var[i % c] += chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    }
    let sd = var.iter().map(|v| (v / count).sqrt()).collect();
    (mean, sd)
}

impl ActNorm {
    // Parameter handles for this pass, initializing from `x` if requested.
    fn vars(&self, pass: &mut Pass, x: Var) -> (Var, Var) {
        if let Some(init) = pass.init.as_deref_mut() {
            let (mean, sd) = channel_stats(pass.tape.value(x));
            let c = mean.len();
            let bias = Tensor::new(vec![c], mean.iter().map(|m| -m).collect()).expect("[C]");
            let logs = Tensor::new(
                vec![c],
                sd.iter()
                    .map(|&s| if s > 1e-8 { -s.ln() } else { 0.0 })
                    .collect(),
            )
            .expect("[C]");
            init.push((self.bias, bias.clone()));
            init.push((self.logs, logs.clone()));
            return (pass.tape.leaf(logs), pass.tape.leaf(bias));
        }
        (pass.bound.var(self.logs), pass.bound.var(self.bias))
    }

    fn forward(&self, pass: &mut Pass, x: Var, logdet: Var) -> (Var, Var) {
        let (logs, bias) = self.vars(pass, x);
        let t = &mut *pass.tape;
        let (_, _, h, w) = t.value(x).dims4();
        let shifted = t.add_channel(x, bias);
        let scale = t.exp(logs);
        let y = t.mul_channel(shifted, scale);
        let total = t.sum(logs);
        let total = t.scale(total, (h * w) as f64);
        (y, t.add_broadcast(logdet, total))
    }

    fn inverse(&self, pass: &mut Pass, y: Var) -> Var {
        let (logs, bias) = (pass.bound.var(self.logs), pass.bound.var(self.bias));
        let t = &mut *pass.tape;
        let neg_logs = t.neg(logs);
        let inv_scale = t.exp(neg_logs);
        let unscaled = t.mul_channel(y, inv_scale);
        let neg_bias = t.neg(bias);
        t.add_channel(unscaled, neg_bias)
    }
}

impl Coupling {
    // (s, t) for the passive half `xa`.
    fn subnet(&self, pass: &mut Pass, xa: Var, cond: &[Var]) -> Result<(Var, Var)> {
        let t = &mut *pass.tape;
        let input = match self.tap {
            Some(l) => {
                let f = *cond.get(l).ok_or_else(|| {
                    Error::Shape(format!(
                        "coupling needs feature tap {l}, have {}",
                        cond.len()
                    ))
                })?;
                let (xs, fs) = (t.shape(xa), t.shape(f));
                if xs[0] != fs[0] || xs[2..] != fs[2..] {
                    return Err(Error::Shape(format!(
                        "conditioning features {fs:?} do not match coupling input {xs:?}"
                    )));
                }
                t.concat_channels(&[xa, f])
            }
            None => xa,
        };
        let b = pass.bound;
        let h = t.conv2d(input, b.var(self.w[0]), Some(b.var(self.b[0])), 1, 1);
        let h = t.relu(h);
        let h = t.conv2d(h, b.var(self.w[1]), Some(b.var(self.b[1])), 1, 0);
        let h = t.relu(h);
        let out = t.conv2d(h, b.var(self.w[2]), Some(b.var(self.b[2])), 1, 1);
        let s_raw = t.slice_channels(out, 0, self.cb);
        let shift = t.slice_channels(out, self.cb, self.cb);
        let s = t.scale(s_raw, 1.0 / pass.s_max);
        let s = t.tanh(s);
        let s = t.scale(s, pass.s_max);
        Ok((s, shift))
    }

    fn forward(&self, pass: &mut Pass, x: Var, cond: &[Var], logdet: Var) -> Result<(Var, Var)> {
        let xa = pass.tape.slice_channels(x, 0, self.ca);
        let xb = pass.tape.slice_channels(x, self.ca, self.cb);
        let (s, shift) = self.subnet(pass, xa, cond)?;
        let t = &mut *pass.tape;
        let es = t.exp(s);
        let scaled = t.mul(xb, es);
        let yb = t.add(scaled, shift);
        let y = t.concat_channels(&[xa, yb]);
        let ld = t.sum_per_sample(s);
        Ok((y, t.add(logdet, ld)))
    }

    fn inverse(&self, pass: &mut Pass, y: Var, cond: &[Var]) -> Result<Var> {
        let ya = pass.tape.slice_channels(y, 0, self.ca);
        let yb = pass.tape.slice_channels(y, self.ca, self.cb);
        let (s, shift) = self.subnet(pass, ya, cond)?;
        let t = &mut *pass.tape;
        let centred = t.sub(yb, shift);
        let neg = t.neg(s);
        let es = t.exp(neg);
        let xb = t.mul(centred, es);
        Ok(t.concat_channels(&[ya, xb]))
    }
}

impl Layer {
    /// Data-to-latent step. Split layers push their emitted half onto
    /// `latents`.
    pub fn forward(
        &self,
        pass: &mut Pass,
        x: Var,
        cond: &[Var],
        latents: &mut Vec<Var>,
        logdet: Var,
    ) -> Result<(Var, Var)> {
        Ok(match self {
            Layer::Squeeze => (pass.tape.squeeze2(x), logdet),
            Layer::ActNorm(a) => a.forward(pass, x, logdet),
            Layer::Orth(o) => (o.apply(pass.tape, x, false), logdet),
            Layer::Transition(a, o) => {
                let (y, ld) = a.forward(pass, x, logdet);
                (o.apply(pass.tape, y, false), ld)
            }
            Layer::Coupling(c) => c.forward(pass, x, cond, logdet)?,
            Layer::Split => {
                let c = pass.tape.shape(x)[1];
                let kept = pass.tape.slice_channels(x, 0, c / 2);
                latents.push(pass.tape.slice_channels(x, c / 2, c - c / 2));
                (kept, logdet)
            }
        })
    }

    /// Latent-to-data step. Split layers pop their half from `latents`.
    pub fn inverse(
        &self,
        pass: &mut Pass,
        y: Var,
        cond: &[Var],
        latents: &mut Vec<Var>,
    ) -> Result<Var> {
        Ok(match self {
            Layer::Squeeze => pass.tape.unsqueeze2(y),
            Layer::ActNorm(a) => a.inverse(pass, y),
            Layer::Orth(o) => o.apply(pass.tape, y, true),
            Layer::Transition(a, o) => {
                let x = o.apply(pass.tape, y, true);
                a.inverse(pass, x)
            }
            Layer::Coupling(c) => c.inverse(pass, y, cond)?,
            Layer::Split => {
                let emitted = latents
                    .pop()
                    .ok_or_else(|| Error::Shape("latent list exhausted".into()))?;
                pass.tape.concat_channels(&[y, emitted])
            }
        })
    }
}
