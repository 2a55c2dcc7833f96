//! Posterior sampling with hard data consistency, P-sample averaging and
//! MAP estimation over the unmeasured k-space.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::mri::mask::SamplingMask;
use crate::mri::ops::{
    apply_a, coil_combine_rss, coil_combine_sense, gather_unmeasured, normalize_stack,
    nullspace_project, scatter_unmeasured, unmeasured_dim,
};
use crate::mri::stack::{CoilSensitivities, CoilStack, ComplexImage, StackRole};
use crate::num::adam::{AdamConfig, AdamState};
use crate::num::tape::Tape;
use crate::num::tensor::{ComplexTensor, Tensor};
use crate::train::data::stream;

/// How generator outputs are turned into estimates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    /// Replace the measured-space part of each sample with `y`.
    pub data_consistency: bool,
    /// The model generates nullspace components rather than full images.
    pub nullspace_learning: bool,
    /// Divide `y` by its 95th RSS percentile before conditioning.
    pub normalize: bool,
    pub workers: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            data_consistency: true,
            nullspace_learning: true,
            normalize: true,
            workers: 1,
        }
    }
}

/// `P` posterior samples for one measurement.
#[derive(Clone, Debug)]
pub struct PosteriorBatch {
    /// Estimates `x^_p` in the original (de-normalized) scale.
    pub samples: Vec<CoilStack>,
    /// `log p^(x^_p | y)` in bits per dimension (negated NLL).
    pub log_density_bpd: Vec<f64>,
    /// `max |A x^_p - y|` per sample.
    pub residuals: Vec<f64>,
    pub seed: u64,
    pub config: SampleConfig,
    /// Normalization divisor used for `y`.
    pub scale: f64,
}

impl PosteriorBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Normalized conditioning input and the evaluation point map for one `y`.
struct Problem<'a> {
    model: &'a FlowModel,
    mask: &'a SamplingMask,
    /// Normalized measurement.
    yn: CoilStack,
    /// `[1, 2C, H, W]`.
    ych: Tensor,
    scale: f64,
    nullspace: bool,
}

impl<'a> Problem<'a> {
    fn new(
        model: &'a FlowModel,
        y: &CoilStack,
        mask: &'a SamplingMask,
        normalize: bool,
        nullspace: bool,
    ) -> Result<Self> {
        let spec = model.spec();
        let (c, h, w) = y.dims();
        if 2 * c != spec.channels || h != spec.height || w != spec.width {
            return Err(Error::Mismatch(format!(
                "measurement of {c} coils at {h}x{w} does not fit a model for {} channels at {}x{}",
                spec.channels, spec.height, spec.width
            )));
        }
        if mask.width != w {
            return Err(Error::Mismatch(format!(
                "mask width {} vs measurement width {w}",
                mask.width
            )));
        }
        let (yn, scale) = if normalize {
            normalize_stack(y)?
        } else {
            (y.clone(), 1.0)
        };
        let ych = yn.to_channels().reshape(&[1, 2 * c, h, w])?;
        Ok(Self {
            model,
            mask,
            yn,
            ych,
            scale,
            nullspace,
        })
    }

    fn dims(&self) -> (usize, usize, usize) {
        self.yn.dims()
    }

    fn q(&self) -> f64 {
        self.model.latent_dim() as f64
    }

    /// Flow evaluation point for a normalized estimate.
    fn density_point(&self, xn: &CoilStack) -> Result<CoilStack> {
        if self.nullspace {
            nullspace_project(xn, self.mask)
        } else {
            Ok(xn.clone())
        }
    }

    fn log_prob(&self, points: &[CoilStack]) -> Result<Vec<f64>> {
        let chans: Vec<Tensor> = points.iter().map(|p| p.to_channels()).collect();
        let refs: Vec<&Tensor> = chans.iter().collect();
        self.model.log_prob(&Tensor::stack(&refs)?, Some(&self.ych))
    }

    /// `log p^` in nats and its gradient with respect to the point.
    fn log_prob_grad(&self, point: &CoilStack) -> Result<(f64, CoilStack)> {
        let (c, h, w) = self.dims();
        let mut tape = Tape::new();
        let bound = self.model.params().bind(&mut tape);
        let uv = tape.leaf(point.to_channels().reshape(&[1, 2 * c, h, w])?);
        let yv = tape.leaf(self.ych.clone());
        let lp = self.model.log_prob_graph(&mut tape, &bound, uv, Some(yv))?;
        let lp = tape.sum(lp);
        let value = tape.value(lp).data()[0];
        let mut g = tape.backward(lp)?;
        let grad = g.take(uv).reshape(&[2 * c, h, w])?;
        Ok((
            value,
            CoilStack::from_channels(&grad, StackRole::Nullspace)?,
        ))
    }

    fn to_bpd(&self, lp: f64) -> f64 {
        lp / (self.q() * LN_2)
    }
}

/// Draw `count` posterior samples for measurement `y` (coil images of the
/// zero-filled data). Sample `p` uses the latent stream `(seed, p)`, so a
/// batch is a prefix of any larger batch with the same seed.
pub fn sample_posterior(
    model: &FlowModel,
    y: &CoilStack,
    mask: &SamplingMask,
    count: usize,
    seed: u64,
    cfg: &SampleConfig,
) -> Result<PosteriorBatch> {
    if count == 0 {
        return Err(Error::Empty(
            "posterior batch needs at least one sample".into(),
        ));
    }
    let prob = Problem::new(model, y, mask, cfg.normalize, cfg.nullspace_learning)?;
    let q = model.latent_dim();
    let latent = |p: usize| Tensor::randn(&[1, q], &mut stream(seed, 11, p as u64));
    let workers = cfg.workers.clamp(1, count);
    let per = count.div_ceil(workers);
    let chunks: Vec<Result<Tensor>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..count)
            .step_by(per)
            .map(|start| {
                let end = (start + per).min(count);
                let prob = &prob;
                s.spawn(move || {
                    let zs: Vec<Tensor> = (start..end).map(latent).collect();
                    model.inverse(&Tensor::concat_batch(&zs)?, Some(&prob.ych))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sampling worker panicked"))
            .collect()
    });
    let gen = Tensor::concat_batch(&chunks.into_iter().collect::<Result<Vec<_>>>()?)?;

    let mut normalized = Vec::with_capacity(count);
    let mut points = Vec::with_capacity(count);
    for p in 0..count {
        let g = CoilStack::from_channels(&gen.batch_slice(p, p + 1), StackRole::Estimate)?;
        let xn = if cfg.data_consistency {
            nullspace_project(&g, mask)?
                .add(&prob.yn)?
                .with_role(StackRole::Estimate)
        } else {
            g
        };
        points.push(prob.density_point(&xn)?);
        normalized.push(xn);
    }
    let log_density_bpd = prob
        .log_prob(&points)?
        .into_iter()
        .map(|lp| prob.to_bpd(lp))
        .collect();
    let mut samples = Vec::with_capacity(count);
    let mut residuals = Vec::with_capacity(count);
    for xn in normalized {
        let x = xn.scale(prob.scale);
        residuals.push(apply_a(&x, mask)?.data().max_abs_diff(y.data()));
        samples.push(x);
    }
    Ok(PosteriorBatch {
        samples,
        log_density_bpd,
        residuals,
        seed,
        config: *cfg,
        scale: prob.scale,
    })
}

/// Log density (bits/dim) the model assigns to estimate `x` given `y`.
pub fn log_density_bpd(
    model: &FlowModel,
    x: &CoilStack,
    y: &CoilStack,
    mask: &SamplingMask,
    cfg: &SampleConfig,
) -> Result<f64> {
    let prob = Problem::new(model, y, mask, cfg.normalize, cfg.nullspace_learning)?;
    x.same_dims(y)?;
    let point = prob.density_point(&x.scale(1.0 / prob.scale))?;
    Ok(prob.to_bpd(prob.log_prob(&[point])?[0]))
}

/// Image space used for averaging.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    /// Complex SENSE combination with the coil maps.
    #[default]
    Sense,
    /// Root-sum-of-squares magnitude.
    Rss,
}

/// A coil-combined image.
#[derive(Clone, Debug, PartialEq)]
pub enum CombinedImage {
    Complex(ComplexImage),
    Magnitude(Tensor),
}

impl CombinedImage {
    pub fn magnitude(&self) -> Tensor {
        match self {
            CombinedImage::Complex(c) => Tensor::new(
                c.shape().to_vec(),
                c.data().iter().map(|v| v.norm()).collect(),
            )
            .expect("same length"),
            CombinedImage::Magnitude(m) => m.clone(),
        }
    }
}

/// Coil-combine one estimate.
pub fn combine(
    x: &CoilStack,
    how: Combine,
    maps: Option<&CoilSensitivities>,
) -> Result<CombinedImage> {
    match how {
        Combine::Sense => {
            let maps = maps.ok_or_else(|| {
                Error::InvalidParam("SENSE combination needs coil sensitivities".into())
            })?;
            Ok(CombinedImage::Complex(coil_combine_sense(x, maps)?))
        }
        Combine::Rss => Ok(CombinedImage::Magnitude(coil_combine_rss(x))),
    }
}

/// Elementwise mean of equally typed, equally shaped images.
pub fn mean_images(images: &[CombinedImage]) -> Result<CombinedImage> {
    let first = images
        .first()
        .ok_or_else(|| Error::Empty("cannot average zero images".into()))?;
    let inv = 1.0 / images.len() as f64;
    match first {
        CombinedImage::Complex(f) => {
            let mut acc = ComplexTensor::zeros(f.shape());
            for im in images {
                match im {
                    CombinedImage::Complex(c) if c.shape() == f.shape() => {
                        acc = acc.zip_map(c, |a, b| a + b)
                    }
                    _ => return Err(Error::Shape("mixed images in average".into())),
                }
            }
            Ok(CombinedImage::Complex(acc.map(|v| v * inv)))
        }
        CombinedImage::Magnitude(f) => {
            let mut acc = Tensor::zeros(f.shape());
            for im in images {
                match im {
                    CombinedImage::Magnitude(m) if m.shape() == f.shape() => acc.add_assign(m),
                    _ => return Err(Error::Shape("mixed images in average".into())),
                }
            }
            Ok(CombinedImage::Magnitude(acc.map(|v| v * inv)))
        }
    }
}

/// `i^_(P) = (1/P) sum_p i^_p` over the whole batch.
pub fn posterior_mean(
    batch: &PosteriorBatch,
    how: Combine,
    maps: Option<&CoilSensitivities>,
) -> Result<CombinedImage> {
    let images = batch
        .samples
        .iter()
        .map(|x| combine(x, how, maps))
        .collect::<Result<Vec<_>>>()?;
    mean_images(&images)
}

/// Mean of coil stacks (before combination).
pub fn mean_stack(stacks: &[CoilStack]) -> Result<CoilStack> {
    let first = stacks
        .first()
        .ok_or_else(|| Error::Empty("cannot average zero stacks".into()))?;
    let mut acc = CoilStack::zeros(
        first.coils(),
        first.height(),
        first.width(),
        StackRole::Estimate,
    );
    for s in stacks {
        acc = acc.add(s)?;
    }
    Ok(acc.scale(1.0 / stacks.len() as f64))
}

/// Starting point for [`map_estimate`].
#[derive(Clone, Debug, PartialEq)]
pub enum MapInit {
    /// First sample of a posterior batch drawn with this seed.
    Sample {
        seed: u64,
    },
    Zeros,
    /// An estimate in the original scale; only its nullspace part is used.
    Estimate(CoilStack),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapConfig {
    pub iters: usize,
    pub lr: f64,
    pub init: MapInit,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            iters: 500,
            lr: 1e-4,
            init: MapInit::Sample { seed: 0 },
        }
    }
}

#[derive(Clone, Debug)]
pub struct MapResult {
    /// `W k~* + y` in the original scale.
    pub estimate: CoilStack,
    /// Best unmeasured k-space coordinates, normalized scale.
    pub coeffs: Vec<f64>,
    /// Best-so-far log density (bits/dim) after each evaluation; entry 0 is
    /// the initialization.
    pub trace: Vec<f64>,
    pub best_iter: usize,
    pub log_density_bpd: f64,
    /// Set when optimization stopped on a non-finite objective.
    pub aborted: Option<String>,
}

/// Gradient ascent (Adam) on `log p^(W k~ | y)` over the unmeasured k-space
/// coordinates `k~`, keeping the best iterate seen.
pub fn map_estimate(
    model: &FlowModel,
    y: &CoilStack,
    mask: &SamplingMask,
    map: &MapConfig,
    cfg: &SampleConfig,
) -> Result<MapResult> {
    if !(map.lr > 0.0) {
        return Err(Error::InvalidParam(
            "MAP learning rate must be positive".into(),
        ));
    }
    let prob = Problem::new(model, y, mask, cfg.normalize, cfg.nullspace_learning)?;
    let (c, h, w) = prob.dims();
    let mut k = match &map.init {
        MapInit::Zeros => vec![0.0; unmeasured_dim(mask, c, h)],
        MapInit::Sample { seed } => {
            let cfg1 = SampleConfig { workers: 1, ..*cfg };
            let b = sample_posterior(model, y, mask, 1, *seed, &cfg1)?;
            gather_unmeasured(&b.samples[0].scale(1.0 / prob.scale), mask)?
        }
        MapInit::Estimate(x) => {
            x.same_dims(y)?;
            gather_unmeasured(&x.scale(1.0 / prob.scale), mask)?
        }
    };
    let point_of = |k: &[f64]| -> Result<CoilStack> {
        let u = scatter_unmeasured(k, mask, c, h, w)?;
        if prob.nullspace {
            Ok(u)
        } else {
            u.add(&prob.yn)
        }
    };

    let n = k.len();
    let mut adam = AdamState::new(AdamConfig::with_lr(map.lr), &[&[n]])?;
    let mut best_k = k.clone();
    let mut best = f64::NEG_INFINITY;
    let mut best_iter = 0;
    let mut trace = Vec::with_capacity(map.iters + 1);
    let mut aborted = None;
    for it in 0..=map.iters {
        let evaluated = prob.log_prob_grad(&point_of(&k)?);
        let (lp, grad) = match evaluated {
            Ok((lp, g)) if lp.is_finite() => (lp, g),
            Ok((lp, _)) => {
                aborted = Some(format!("objective {lp} at iteration {it}"));
                break;
            }
            Err(Error::Poisoned { op }) => {
                aborted = Some(format!("non-finite value in {op} at iteration {it}"));
                break;
            }
            Err(e) => return Err(e),
        };
        if lp > best {
            best = lp;
            best_k.copy_from_slice(&k);
            best_iter = it;
        }
        trace.push(prob.to_bpd(best));
        if it == map.iters {
            break;
        }
        // Minimize -log p; W^H maps the image-space gradient to k~.
        let g = gather_unmeasured(&grad, mask)?;
        let g = Tensor::new(vec![n], g.into_iter().map(|v| -v).collect())?;
        let mut kt = Tensor::new(vec![n], k)?;
        adam.step(&mut [&mut kt], &[g])?;
        k = kt.into_data();
    }
    if trace.is_empty() {
        return Err(Error::Poisoned {
            op: "map initialization",
        });
    }
    let estimate = scatter_unmeasured(&best_k, mask, c, h, w)?
        .add(&prob.yn)?
        .scale(prob.scale)
        .with_role(StackRole::Estimate);
    Ok(MapResult {
        estimate,
        coeffs: best_k,
        trace,
        best_iter,
        log_density_bpd: prob.to_bpd(best),
        aborted,
    })
}
