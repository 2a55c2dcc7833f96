//! Conditioning network: a small UNet-style trunk over the zero-filled coil
//! channels, followed by a chain of stride-2 taps, one per flow level.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::params::{Bound, ParamStore, Pid};
use crate::num::tape::{Tape, Var};
use crate::num::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CondNetSpec {
    /// Input channels `2C`.
    pub in_channels: usize,
    /// Trunk width at full resolution.
    pub base: usize,
    /// Number of 2x pooling stages in the trunk.
    pub pools: usize,
    /// Number of feature taps (flow levels).
    pub levels: usize,
    /// Channels per feature tap.
    pub tap_width: usize,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: Pid,
    b: Pid,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        tape.conv2d(
            x,
            bound.var(self.w),
            Some(bound.var(self.b)),
            self.stride,
            self.pad,
        )
    }
}

#[derive(Clone, Debug)]
pub struct CondNet {
    spec: CondNetSpec,
    enc: Vec<[Conv; 2]>,
    dec: Vec<[Conv; 2]>,
    taps: Vec<Conv>,
    head: Option<Conv>,
}

pub(crate) fn he_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let sd = (2.0 / fan_in as f64).sqrt();
    Tensor::randn(shape, rng).map(|v| v * sd)
}

fn add_conv<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    rng: &mut R,
) -> Result<Conv> {
    let w = store.add(format!("{name}.w"), he_normal(&[cout, cin, k, k], rng))?;
    let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]))?;
    Ok(Conv {
        w,
        b,
        stride,
        pad: k / 2,
    })
}

fn lookup(store: &ParamStore, name: &str, stride: usize, pad: usize) -> Result<Conv> {
    let get = |s: &str| {
        store
            .id(&format!("{name}.{s}"))
            .ok_or_else(|| Error::Format(format!("missing parameter {name}.{s}")))
    };
    Ok(Conv {
        w: get("w")?,
        b: get("b")?,
        stride,
        pad,
    })
}

impl CondNetSpec {
    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base == 0 || self.tap_width == 0 {
            return Err(Error::InvalidParam(
                "condnet widths must be positive".into(),
            ));
        }
        Ok(())
    }

    // Width of trunk stage `i` (0 = full resolution).
    fn width(&self, i: usize) -> usize {
        self.base << i
    }
}

impl CondNet {
    /// Create parameters under the `cond.` prefix, with a pretraining head.
    pub fn build<R: Rng + ?Sized>(
        spec: CondNetSpec,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let mut enc = Vec::new();
        for i in 0..=spec.pools {
            let cin = if i == 0 {
                spec.in_channels
            } else {
                spec.width(i - 1)
            };
            let c = spec.width(i);
            enc.push([
                add_conv(store, &format!("cond.enc{i}.0"), cin, c, 3, 1, rng)?,
                add_conv(store, &format!("cond.enc{i}.1"), c, c, 3, 1, rng)?,
            ]);
        }
        let mut dec = Vec::new();
        for i in 0..spec.pools {
            let cin = spec.width(i + 1) + spec.width(i);
            let c = spec.width(i);
            dec.push([
                add_conv(store, &format!("cond.dec{i}.0"), cin, c, 3, 1, rng)?,
                add_conv(store, &format!("cond.dec{i}.1"), c, c, 3, 1, rng)?,
            ]);
        }
        let mut taps = Vec::new();
        for l in 0..spec.levels {
            let cin = if l == 0 { spec.base } else { spec.tap_width };
            taps.push(add_conv(
                store,
                &format!("cond.tap{l}"),
                cin,
                spec.tap_width,
                3,
                2,
                rng,
            )?);
        }
        // Zero weights: the regression starts from predicting zero.
        let head = add_conv(store, "cond.head", spec.base, spec.in_channels, 1, 1, rng)?;
        store.get_mut(head.w).data_mut().fill(0.0);
        let head = Some(head);
        Ok(Self {
            spec,
            enc,
            dec,
            taps,
            head,
        })
    }

    /// Re-attach to parameters already present in `store` (checkpoint load).
    pub fn attach(spec: CondNetSpec, store: &ParamStore) -> Result<Self> {
        spec.validate()?;
        let enc = (0..=spec.pools)
            .map(|i| {
                Ok([
                    lookup(store, &format!("cond.enc{i}.0"), 1, 1)?,
                    lookup(store, &format!("cond.enc{i}.1"), 1, 1)?,
                ])
            })
            .collect::<Result<_>>()?;
        let dec = (0..spec.pools)
            .map(|i| {
                Ok([
                    lookup(store, &format!("cond.dec{i}.0"), 1, 1)?,
                    lookup(store, &format!("cond.dec{i}.1"), 1, 1)?,
                ])
            })
            .collect::<Result<_>>()?;
        let taps = (0..spec.levels)
            .map(|l| lookup(store, &format!("cond.tap{l}"), 2, 1))
            .collect::<Result<_>>()?;
        let head = lookup(store, "cond.head", 1, 0).ok();
        Ok(Self {
            spec,
            enc,
            dec,
            taps,
            head,
        })
    }

    pub fn spec(&self) -> &CondNetSpec {
        &self.spec
    }

    pub fn has_head(&self) -> bool {
        self.head.is_some()
    }

    /// Trunk output width, which is what the taps consume.
    pub fn trunk_channels(&self) -> usize {
        self.spec.base
    }

    fn check_input(&self, tape: &Tape, y: Var) -> Result<()> {
        let s = tape.shape(y);
        if s.len() != 4 || s[1] != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "condnet expects [N, {}, H, W], got {s:?}",
                self.spec.in_channels
            )));
        }
        let f = 1usize << self.spec.pools;
        if s[2] % f != 0 || s[3] % f != 0 {
            return Err(Error::Shape(format!(
                "condnet with {} pools needs sizes divisible by {f}, got {s:?}",
                self.spec.pools
            )));
        }
        Ok(())
    }

    /// Trunk features `[N, base, H, W]`.
    pub fn trunk(&self, tape: &mut Tape, bound: &Bound, y: Var) -> Result<Var> {
        self.check_input(tape, y)?;
        let mut skips = Vec::new();
        let mut h = y;
        for (i, [c0, c1]) in self.enc.iter().enumerate() {
            if i > 0 {
                h = tape.avg_pool2(h);
            }
            let a = c0.apply(tape, bound, h);
            let a = tape.relu(a);
            let b = c1.apply(tape, bound, a);
            h = tape.relu(b);
            skips.push(h);
        }
        for i in (0..self.spec.pools).rev() {
            let up = tape.upsample2(h);
            let cat = tape.concat_channels(&[up, skips[i]]);
            let [c0, c1] = self.dec[i];
            let a = c0.apply(tape, bound, cat);
            let a = tape.relu(a);
            let b = c1.apply(tape, bound, a);
            h = tape.relu(b);
        }
        Ok(h)
    }

    /// Per-level conditioning features; tap `l` has spatial size
    /// `H / 2^(l+1)`.
    pub fn features(&self, tape: &mut Tape, bound: &Bound, y: Var) -> Result<Vec<Var>> {
        let trunk = self.trunk(tape, bound, y)?;
        Ok(self.taps_from_trunk(tape, bound, trunk))
    }

    fn taps_from_trunk(&self, tape: &mut Tape, bound: &Bound, trunk: Var) -> Vec<Var> {
        let mut f = trunk;
        let mut out = Vec::with_capacity(self.taps.len());
        for (l, tap) in self.taps.iter().enumerate() {
            let input = if l == 0 { f } else { tape.relu(f) };
            f = tap.apply(tape, bound, input);
            out.push(f);
        }
        out
    }

    /// Pretraining prediction `[N, 2C, H, W]` through the temporary head.
    pub fn head_output(&self, tape: &mut Tape, bound: &Bound, y: Var) -> Result<Var> {
        let head = self
            .head
            .ok_or_else(|| Error::InvalidParam("conditioning head has been removed".into()))?;
        let trunk = self.trunk(tape, bound, y)?;
        Ok(head.apply(tape, bound, trunk))
    }
}
