use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Piecewise-constant learning rate indexed by episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(usize, f64)>", into = "Vec<(usize, f64)>")]
pub struct LrSchedule {
    milestones: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn new(milestones: Vec<(usize, f64)>) -> Result<Self> {
        match milestones.first() {
            Some((0, _)) => {}
            _ => return Err(Error::Invalid("learning-rate schedule must start at episode 0".into())),
        }
        if milestones.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Invalid(
                "learning-rate milestones must be strictly increasing".into(),
            ));
        }
        if milestones.iter().any(|&(_, lr)| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::Invalid("learning rates must be positive".into()));
        }
        Ok(LrSchedule { milestones })
    }

    pub fn constant(lr: f64) -> Result<Self> {
        Self::new(vec![(0, lr)])
    }

    /// 0.1, cut to 0.006 at episode 25000 and 0.0012 at 35000.
    pub fn full_scale() -> Self {
        Self::new(vec![(0, 0.1), (25_000, 0.006), (35_000, 0.0012)]).expect("valid default")
    }

    pub fn milestones(&self) -> &[(usize, f64)] {
        &self.milestones
    }

    /// Learning rate of the last milestone at or before `episode`.
    pub fn lr_at(&self, episode: usize) -> f64 {
        let idx = self.milestones.partition_point(|&(start, _)| start <= episode);
        self.milestones[idx - 1].1
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl TryFrom<Vec<(usize, f64)>> for LrSchedule {
    type Error = Error;

    fn try_from(v: Vec<(usize, f64)>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LrSchedule> for Vec<(usize, f64)> {
    fn from(s: LrSchedule) -> Self {
        s.milestones
    }
}

/// Plain SGD: `p ← p − lr · grad`, then clears every gradient.
///
/// Fails without touching any parameter if one of them has no gradient.
pub fn sgd_step<'a, I>(params: I, lr: f32) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a mut Tensor)>,
{
    let params: Vec<_> = params.into_iter().collect();
    if let Some((name, _)) = params.iter().find(|(_, p)| p.grad().is_none()) {
        return Err(Error::MissingGrad(name.to_string()));
    }
    for (_, p) in params {
        let grad = p.grad().expect("checked").to_vec();
        p.data_mut().iter_mut().zip(&grad).for_each(|(v, g)| *v -= lr * g);
        p.zero_grad();
    }
    Ok(())
}
