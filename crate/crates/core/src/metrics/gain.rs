use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `10 log10(2P / (P + 1))`, the error reduction from averaging `P` exact
/// posterior samples.
pub fn gain_theory(p: usize) -> f64 {
    let p = p.max(1) as f64;
    10.0 * (2.0 * p / (p + 1.0)).log10()
}

/// What each sample group's squared error is measured against.
#[derive(Clone, Debug, PartialEq)]
pub enum GainReference {
    /// Ground-truth image.
    Truth(Vec<f64>),
    /// Exact posterior moments: the expected error against the unknown
    /// truth is `||mean_P - mean||^2 + trace`.
    Posterior { mean: Vec<f64>, trace: f64 },
}

impl GainReference {
    fn error(&self, est: &[f64]) -> f64 {
        let (r, extra) = match self {
            GainReference::Truth(t) => (t, 0.0),
            GainReference::Posterior { mean, trace } => (mean, *trace),
        };
        est.iter()
            .zip(r)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            + extra
    }

    fn len(&self) -> usize {
        match self {
            GainReference::Truth(t) => t.len(),
            GainReference::Posterior { mean, .. } => mean.len(),
        }
    }
}

/// Posterior samples for one measurement, flattened to real coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct GainTrial {
    pub samples: Vec<Vec<f64>>,
    pub reference: GainReference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainCurve {
    pub p: Vec<usize>,
    pub empirical_db: Vec<f64>,
    pub theory_db: Vec<f64>,
    pub trials: usize,
}

impl GainCurve {
    pub fn max_deviation_db(&self) -> f64 {
        self.empirical_db
            .iter()
            .zip(&self.theory_db)
            .fold(0.0, |m, (e, t)| m.max((e - t).abs()))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("p,empirical_db,theory_db\n");
        for ((p, e), t) in self.p.iter().zip(&self.empirical_db).zip(&self.theory_db) {
            let _ = writeln!(s, "{p},{e:.6},{t:.6}");
        }
        s
    }
}

/// Mean squared error of `P`-sample averages over disjoint groups of the
/// trial's samples.
fn group_error(trial: &GainTrial, p: usize) -> f64 {
    let groups = trial.samples.len() / p;
    let dim = trial.reference.len();
    let mut total = 0.0;
    for g in 0..groups {
        let mut mean = vec![0.0; dim];
        for s in &trial.samples[g * p..(g + 1) * p] {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= p as f64);
        total += trial.reference.error(&mean);
    }
    total / groups as f64
}

/// Empirical gain `10 log10(E_1 / E_P)` next to [`gain_theory`] for each
/// `P` in `p_list`. `E_P` is averaged over trials and over disjoint groups
/// of `P` samples within each trial, so each trial needs at least
/// `max(p_list)` samples.
pub fn gain_curve(trials: &[GainTrial], p_list: &[usize]) -> Result<GainCurve> {
    if trials.is_empty() || p_list.is_empty() {
        return Err(Error::Empty("gain curve needs trials and P values".into()));
    }
    if p_list.contains(&0) || p_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParam(
            "P values must be positive and ascending".into(),
        ));
    }
    let pmax = *p_list.last().expect("non-empty");
    for t in trials {
        if t.samples.len() < pmax {
            return Err(Error::InvalidParam(format!(
                "trial has {} samples, need {pmax}",
                t.samples.len()
            )));
        }
        if t.samples.iter().any(|s| s.len() != t.reference.len()) {
            return Err(Error::Shape("sample and reference lengths differ".into()));
        }
    }
    let mean_err =
        |p: usize| trials.iter().map(|t| group_error(t, p)).sum::<f64>() / trials.len() as f64;
    let e1 = mean_err(1);
    let empirical_db = p_list
        .iter()
        .map(|&p| {
            if p == 1 {
                0.0
            } else {
                10.0 * (e1 / mean_err(p)).log10()
            }
        })
        .collect();
    Ok(GainCurve {
        p: p_list.to_vec(),
        empirical_db,
        theory_db: p_list.iter().map(|&p| gain_theory(p)).collect(),
        trials: trials.len(),
    })
}
