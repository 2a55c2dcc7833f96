use std::f64::consts::{E, LN_2, PI};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::flow::{CondNetSpec, FlowSpec};
use crate::mri::mask::SamplingMask;
use crate::mri::ops::apply_a;
use crate::mri::stack::{CoilStack, StackRole};
use crate::num::tensor::Tensor;
use crate::train::data::{TrainPair, TrainSet};

fn randn_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Symmetric square root of a positive semi-definite matrix.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if eig.eigenvalues.iter().any(|&l| l < -1e-9 * top.max(1e-300)) {
        return Err(Error::SingularCovariance(
            "covariance has a negative eigenvalue".into(),
        ));
    }
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose())
}

/// Differential entropy of `N(., cov)` in bits per dimension.
pub fn gaussian_entropy_bpd(cov: &DMatrix<f64>) -> Result<f64> {
    let n = cov.nrows();
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularCovariance("entropy of a singular covariance".into()))?;
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(0.5 * (n as f64 * (2.0 * PI * E).ln() + logdet) / (n as f64 * LN_2))
}

/// Conjugate posterior of `x ~ N(m, S)` observed as `r = H x + e`,
/// `e ~ N(0, s2 I)`.
#[derive(Clone, Debug)]
pub struct GaussianOracle {
    prior_mean: DVector<f64>,
    prior_cov: DMatrix<f64>,
    prior_sqrt: DMatrix<f64>,
    obs: DMatrix<f64>,
    noise_var: f64,
    gain: DMatrix<f64>,
    post_cov: DMatrix<f64>,
    post_sqrt: DMatrix<f64>,
}

impl GaussianOracle {
    pub fn new(
        prior_mean: DVector<f64>,
        prior_cov: DMatrix<f64>,
        obs: DMatrix<f64>,
        noise_var: f64,
    ) -> Result<Self> {
        let n = prior_mean.len();
        if prior_cov.shape() != (n, n) || obs.ncols() != n {
            return Err(Error::Shape(format!(
                "prior of dimension {n} with covariance {:?} and observation {:?}",
                prior_cov.shape(),
                obs.shape()
            )));
        }
        if !(noise_var >= 0.0) {
            return Err(Error::InvalidParam("noise variance must be >= 0".into()));
        }
        let prior_cov = (&prior_cov + prior_cov.transpose()) * 0.5;
        let prior_sqrt = psd_sqrt(&prior_cov)?;
        let m = obs.nrows();
        let s = &obs * &prior_cov * obs.transpose() + DMatrix::identity(m, m) * noise_var;
        let s_inv = s.cholesky().map(|c| c.inverse()).ok_or_else(|| {
            Error::SingularCovariance("observation covariance is singular".into())
        })?;
        let gain = &prior_cov * obs.transpose() * s_inv;
        // Joseph form stays symmetric and PSD under roundoff.
        let ikh = DMatrix::identity(n, n) - &gain * &obs;
        let post = &ikh * &prior_cov * ikh.transpose() + &gain * gain.transpose() * noise_var;
        let post_cov = (&post + post.transpose()) * 0.5;
        let post_sqrt = psd_sqrt(&post_cov)?;
        Ok(Self {
            prior_mean,
            prior_cov,
            prior_sqrt,
            obs,
            noise_var,
            gain,
            post_cov,
            post_sqrt,
        })
    }

    pub fn dim(&self) -> usize {
        self.prior_mean.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs.nrows()
    }

    pub fn prior_mean(&self) -> &DVector<f64> {
        &self.prior_mean
    }

    pub fn prior_cov(&self) -> &DMatrix<f64> {
        &self.prior_cov
    }

    pub fn obs(&self) -> &DMatrix<f64> {
        &self.obs
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    fn check_obs(&self, r: &DVector<f64>) -> Result<()> {
        if r.len() != self.obs_dim() {
            return Err(Error::Shape(format!(
                "observation of length {} for an oracle with {} observations",
                r.len(),
                self.obs_dim()
            )));
        }
        Ok(())
    }

    pub fn posterior_mean(&self, r: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_obs(r)?;
        Ok(&self.prior_mean + &self.gain * (r - &self.obs * &self.prior_mean))
    }

    /// The posterior covariance does not depend on `r`.
    pub fn posterior_cov(&self) -> &DMatrix<f64> {
        &self.post_cov
    }

    pub fn posterior(&self, r: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        Ok((self.posterior_mean(r)?, self.post_cov.clone()))
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        r: &DVector<f64>,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<DVector<f64>>> {
        let mean = self.posterior_mean(r)?;
        Ok((0..n)
            .map(|_| &mean + &self.post_sqrt * randn_vec(self.dim(), rng))
            .collect())
    }

    /// Draw `(x, r)` from the joint model.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (DVector<f64>, DVector<f64>) {
        let x = &self.prior_mean + &self.prior_sqrt * randn_vec(self.dim(), rng);
        let e = randn_vec(self.obs_dim(), rng) * self.noise_var.sqrt();
        let r = &self.obs * &x + e;
        (x, r)
    }
}

/// Mean L2 error and covariance Frobenius error of a sample set against
/// given moments.
pub fn moment_distance(
    samples: &[DVector<f64>],
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<(f64, f64)> {
    if samples.len() < 2 {
        return Err(Error::Empty(
            "moment matching needs two or more samples".into(),
        ));
    }
    let n = samples.len() as f64;
    let m = samples
        .iter()
        .fold(DVector::zeros(mean.len()), |a, s| a + s)
        / n;
    let mut c = DMatrix::zeros(mean.len(), mean.len());
    for s in samples {
        let d = s - &m;
        c += &d * d.transpose();
    }
    c /= n - 1.0;
    Ok(((m - mean).norm(), (c - cov).norm()))
}

/// One joint draw of the toy problem.
#[derive(Clone, Debug)]
pub struct ToyDraw {
    pub x: DVector<f64>,
    pub r: DVector<f64>,
    pub truth: CoilStack,
    /// Zero-filled measurement `A (x + n)`.
    pub y: CoilStack,
    pub u: CoilStack,
}

/// Single-coil linear-Gaussian inverse problem small enough for the exact
/// oracle. Real coordinates follow the `[2, H, W]` channel layout.
#[derive(Clone, Debug)]
pub struct ToyProblem {
    height: usize,
    width: usize,
    mask: SamplingMask,
    projector: DMatrix<f64>,
    oracle: GaussianOracle,
}

impl ToyProblem {
    /// 2x2 image (8 real dimensions), DC column acquired, noise sd `1e-3`
    /// per real component.
    pub fn new(seed: u64) -> Result<Self> {
        Self::with_size(2, 2, 1e-3, seed)
    }

    pub fn with_size(height: usize, width: usize, noise_sd: f64, seed: u64) -> Result<Self> {
        let mask = SamplingMask::equispaced(width, 2.0, 1)?;
        let q = 2 * height * width;
        let mut cols = Vec::with_capacity(q);
        for i in 0..q {
            let mut e = DVector::zeros(q);
            e[i] = 1.0;
            let a = apply_a(
                &Self::stack_of(height, width, &e, StackRole::Estimate)?,
                &mask,
            )?;
            cols.push(DVector::from_vec(a.to_channels().into_data()));
        }
        let projector = DMatrix::from_columns(&cols);
        // Orthonormal basis of the range of A as observation rows.
        let eig = SymmetricEigen::new((&projector + projector.transpose()) * 0.5);
        let rows: Vec<_> = (0..q)
            .filter(|&i| eig.eigenvalues[i] > 0.5)
            .map(|i| eig.eigenvectors.column(i).transpose())
            .collect();
        let obs = DMatrix::from_rows(&rows);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = DMatrix::from_fn(q, q, |_, _| rng.sample::<f64, _>(StandardNormal));
        let prior_cov = &b * b.transpose() / q as f64 + DMatrix::identity(q, q) * 0.1;
        let prior_mean = randn_vec(q, &mut rng);
        let oracle = GaussianOracle::new(prior_mean, prior_cov, obs, noise_sd * noise_sd)?;
        Ok(Self {
            height,
            width,
            mask,
            projector,
            oracle,
        })
    }

    fn stack_of(h: usize, w: usize, v: &DVector<f64>, role: StackRole) -> Result<CoilStack> {
        CoilStack::from_channels(&Tensor::new(vec![2, h, w], v.as_slice().to_vec())?, role)
    }

    pub fn dim(&self) -> usize {
        2 * self.height * self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    pub fn oracle(&self) -> &GaussianOracle {
        &self.oracle
    }

    /// `A` as a real `Q x Q` matrix.
    pub fn projector(&self) -> &DMatrix<f64> {
        &self.projector
    }

    pub fn to_stack(&self, v: &DVector<f64>, role: StackRole) -> Result<CoilStack> {
        Self::stack_of(self.height, self.width, v, role)
    }

    pub fn to_vec(&self, s: &CoilStack) -> DVector<f64> {
        DVector::from_vec(s.to_channels().into_data())
    }

    /// Observation coordinates of a zero-filled measurement.
    pub fn observe(&self, y: &CoilStack) -> DVector<f64> {
        self.oracle.obs() * self.to_vec(y)
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ToyDraw> {
        let (x, r) = self.oracle.draw(rng);
        let yv = self.oracle.obs().transpose() * &r;
        let uv = (DMatrix::identity(self.dim(), self.dim()) - &self.projector) * &x;
        Ok(ToyDraw {
            truth: self.to_stack(&x, StackRole::Truth)?,
            y: self.to_stack(&yv, StackRole::ZeroFilled)?,
            u: self.to_stack(&uv, StackRole::Nullspace)?,
            x,
            r,
        })
    }

    /// `n` unnormalized training pairs with nullspace (or full-image) targets.
    pub fn train_set(&self, n: usize, seed: u64, nullspace_learning: bool) -> Result<TrainSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = (0..n)
            .map(|_| {
                let d = self.draw(&mut rng)?;
                Ok(TrainPair {
                    y: d.y.to_channels(),
                    target: if nullspace_learning { d.u } else { d.truth }.to_channels(),
                    mask: self.mask.clone(),
                    scale: 1.0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        TrainSet::new(pairs)
    }

    /// Single-level conditional flow sized for this problem.
    pub fn flow_spec(
        &self,
        steps: usize,
        hidden: usize,
        cond_base: usize,
        seed: u64,
    ) -> Result<FlowSpec> {
        FlowSpec::multiscale(
            2,
            self.height,
            self.width,
            1,
            steps,
            hidden,
            Some(CondNetSpec {
                in_channels: 2,
                base: cond_base,
                pools: 0,
                levels: 1,
                tap_width: cond_base,
            }),
            seed,
        )
    }

    /// Covariance of the dithered training target `(I - A) x + A xi` given
    /// `y`, where `xi` has standard deviation `dither_sd` per coordinate.
    pub fn target_cov(&self, dither_sd: f64) -> DMatrix<f64> {
        let q = self.dim();
        let null = DMatrix::identity(q, q) - &self.projector;
        &null * self.oracle.posterior_cov() * null.transpose()
            + &self.projector * (dither_sd * dither_sd)
    }

    /// Entropy of the dithered nullspace target in bits per dimension: the
    /// lowest reachable expected validation NLL.
    pub fn target_entropy_bpd(&self, dither_sd: f64) -> Result<f64> {
        gaussian_entropy_bpd(&self.target_cov(dither_sd))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mri::ops::nullspace_project;

    #[test]
    fn scalar_conjugate_case() {
        for s2 in [0.01, 0.5, 2.0] {
            let o = GaussianOracle::new(
                DVector::from_element(1, 0.0),
                DMatrix::from_element(1, 1, 1.0),
                DMatrix::from_element(1, 1, 1.0),
                s2,
            )
            .unwrap();
            let y = 1.7;
            let (m, c) = o.posterior(&DVector::from_element(1, y)).unwrap();
            assert!((m[0] - y / (1.0 + s2)).abs() < 1e-12);
            assert!((c[(0, 0)] - s2 / (1.0 + s2)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_noise_inverts_the_forward_matrix() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 0.0, 1.0, -1.0, 1.0, 0.0, 3.0]);
        let o = GaussianOracle::new(DVector::zeros(3), DMatrix::identity(3, 3), a.clone(), 1e-14)
            .unwrap();
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let want = a.clone().lu().solve(&y).unwrap();
        assert!((o.posterior_mean(&y).unwrap() - want).norm() < 1e-6);
        assert!(o.posterior_cov().norm() < 1e-9);
    }

    #[test]
    fn singular_observation_covariance_is_rejected() {
        let r = GaussianOracle::new(
            DVector::zeros(2),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
            0.0,
        );
        assert!(matches!(r, Err(Error::SingularCovariance(_))));
    }

    #[test]
    fn posterior_covariance_is_psd_and_matches_information_form() {
        let t = ToyProblem::with_size(2, 4, 0.1, 3).unwrap();
        let o = t.oracle();
        let c = o.posterior_cov();
        assert!((c - c.transpose()).norm() < 1e-12);
        assert!(SymmetricEigen::new(c.clone()).eigenvalues.min() > 0.0);
        // (S^-1 + H^T H / s2)^-1
        let info = o.prior_cov().clone().try_inverse().unwrap()
            + o.obs().transpose() * o.obs() / o.noise_var();
        let alt = info.try_inverse().unwrap();
        assert!((c - &alt).norm() < 1e-9 * alt.norm());
    }

    #[test]
    fn sample_moments_match() {
        let t = ToyProblem::new(1).unwrap();
        let o = t.oracle();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (_, r) = o.draw(&mut rng);
        let n = 100_000;
        let s = o.sample(&r, n, &mut rng).unwrap();
        let mean = o.posterior_mean(&r).unwrap();
        let emp = s.iter().fold(DVector::zeros(8), |a, v| a + v) / n as f64;
        for i in 0..8 {
            let sd = o.posterior_cov()[(i, i)].sqrt();
            assert!((emp[i] - mean[i]).abs() < 3.0 * sd / (n as f64).sqrt() + 1e-12);
        }
        let (dm, dc) = moment_distance(&s, &mean, o.posterior_cov()).unwrap();
        assert!(
            dm < 0.02 && dc < 0.05 * o.posterior_cov().norm(),
            "{dm} {dc}"
        );
    }

    #[test]
    fn toy_geometry() {
        let t = ToyProblem::new(0).unwrap();
        assert_eq!(t.dim(), 8);
        assert_eq!(t.oracle().obs_dim(), 4);
        let a = t.projector();
        assert!((a * a - a).norm() < 1e-12);
        assert!((a - a.transpose()).norm() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = t.draw(&mut rng).unwrap();
        let null = nullspace_project(&d.y, t.mask()).unwrap();
        assert!(null.data().max_abs() < 1e-12);
        assert!((t.observe(&d.y) - &d.r).norm() < 1e-12);
        let u2 = nullspace_project(&d.truth, t.mask()).unwrap();
        assert!(u2.data().max_abs_diff(d.u.data()) < 1e-12);
        let set = t.train_set(5, 0, true).unwrap();
        set.check_nullspace_targets().unwrap();
        // Dither widens the entropy.
        assert!(t.target_entropy_bpd(0.2).unwrap() > t.target_entropy_bpd(0.1).unwrap());
        t.flow_spec(4, 16, 8, 0).unwrap();
    }
}
