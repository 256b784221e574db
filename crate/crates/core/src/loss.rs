use std::fmt;
use std::str::FromStr;

use featlens_tensor::{Graph, Real, Tensor, TensorError, Var};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    Tac,
    Mse,
    Mae,
    MseTac,
    MaeTac,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::Tac => "tac",
            LossMode::Mse => "mse",
            LossMode::Mae => "mae",
            LossMode::MseTac => "mse+tac",
            LossMode::MaeTac => "mae+tac",
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [LossMode::Tac, LossMode::Mse, LossMode::Mae, LossMode::MseTac, LossMode::MaeTac]
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::config(format!("unknown loss `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Locations selected per channel for each of the top and bottom lists.
    pub k: usize,
    /// Discount on overshoot terms.
    pub d1: f64,
    pub mode: LossMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            k: 3,
            d1: 0.2,
            mode: LossMode::Tac,
        }
    }
}

impl LossConfig {
    /// Checks the configuration against a channel of `hw` locations.
    pub fn validate(&self, hw: usize) -> Result<()> {
        if self.k == 0 || self.k > hw / 2 {
            return Err(Error::config(format!("K = {} outside [1, {}]", self.k, hw / 2)));
        }
        if !(self.d1 > 0.0 && self.d1 <= 1.0) {
            return Err(Error::config(format!("d1 = {} outside (0, 1]", self.d1)));
        }
        Ok(())
    }
}

/// Top and bottom locations (row-major indices) of one channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopKSelection {
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
}

fn descending<T: Real>(values: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    // stable sort keeps lower indices first among ties
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx
}

/// The `k` highest locations, then the `k` lowest among the rest. Ties go
/// to the lower row-major index in both lists.
pub fn topk_locations<T: Real>(channel: &[T], k: usize) -> Result<TopKSelection> {
    if k == 0 || 2 * k > channel.len() {
        return Err(Error::config(format!(
            "K = {k} needs 1 <= K <= {} for a map of {} values",
            channel.len() / 2,
            channel.len()
        )));
    }
    let order = descending(channel);
    let pos = order[..k].to_vec();
    let mut rest: Vec<usize> = order[k..].to_vec();
    rest.sort_by(|&a, &b| {
        channel[a]
            .partial_cmp(&channel[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    rest.truncate(k);
    Ok(TopKSelection { pos, neg: rest })
}

fn top_only<T: Real>(channel: &[T], k: usize) -> Vec<usize> {
    let mut order = descending(channel);
    order.truncate(k);
    order
}

fn check_same_shape<T: Real>(op: &'static str, target: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
    if target.shape() != y.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: format!("{:?}", target.shape()),
            got: format!("{:?}", y.shape()),
        }
        .into());
    }
    Ok(())
}

/// Records a scalar loss whose gradient with respect to `y` is the constant
/// `coef` tensor (scaled by the incoming gradient).
fn record_linearized<T: Real>(
    g: &mut Graph<T>,
    name: &'static str,
    y: Var,
    value: T,
    coef: Tensor<T>,
) -> Result<Var> {
    let out = g.custom(
        name,
        &[y],
        Tensor::scalar(value),
        move |_: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>| {
            let s = grad.data()[0];
            Ok(vec![Some(coef.map(|c| c * s))])
        },
    )?;
    Ok(out)
}

/// Top-K activation contrast between fixed targets `target` and
/// reconstructions `y` (both NCHW). Per channel: undershoot at the target's
/// top-K and bottom-K locations counts fully, overshoot there and positive
/// excess at `y`'s own top-K locations count with weight `d1`. Channel terms
/// are summed and the result is averaged over the batch.
pub fn tac_loss<T: Real>(g: &mut Graph<T>, target: &Tensor<T>, y: Var, cfg: &LossConfig) -> Result<Var> {
    let yv = g.value(y).clone();
    check_same_shape("tac_loss", target, &yv)?;
    let (b, _, h, w) = yv.dims4()?;
    cfg.validate(h * w)?;
    let d1 = T::from_f64_lossy(cfg.d1);
    let one = T::one();
    let hw = h * w;
    let mut total = 0.0f64;
    let mut coef = vec![T::zero(); yv.numel()];
    for ((xc, yc), gc) in target
        .data()
        .chunks(hw)
        .zip(yv.data().chunks(hw))
        .zip(coef.chunks_mut(hw))
    {
        let sel = topk_locations(xc, cfg.k)?;
        let mut acc = T::zero();
        for &p in &sel.pos {
            let diff = xc[p] - yc[p];
            if diff > T::zero() {
                acc = acc + diff;
                gc[p] = gc[p] - one;
            } else if diff < T::zero() {
                acc = acc - d1 * diff;
                gc[p] = gc[p] + d1;
            }
        }
        for &q in &sel.neg {
            let diff = xc[q] - yc[q];
            if diff > T::zero() {
                acc = acc + d1 * diff;
                gc[q] = gc[q] - d1;
            } else if diff < T::zero() {
                acc = acc - diff;
                gc[q] = gc[q] + one;
            }
        }
        for p in top_only(yc, cfg.k) {
            let diff = yc[p] - xc[p];
            if diff > T::zero() {
                acc = acc + d1 * diff;
                gc[p] = gc[p] + d1;
            }
        }
        total += acc.to_f64().unwrap_or(f64::NAN);
    }
    let inv_b = T::from_f64_lossy(1.0 / b as f64);
    coef.iter_mut().for_each(|c| *c = *c * inv_b);
    let coef = Tensor::new(yv.shape().to_vec(), coef)?;
    record_linearized(g, "tac_loss", y, T::from_f64_lossy(total / b as f64), coef)
}

/// Mean over all elements of `(y - target)^2`.
pub fn mse_loss<T: Real>(g: &mut Graph<T>, target: &Tensor<T>, y: Var) -> Result<Var> {
    let yv = g.value(y).clone();
    check_same_shape("mse_loss", target, &yv)?;
    let n = yv.numel() as f64;
    let mut total = 0.0f64;
    let coef: Vec<T> = yv
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &t)| {
            let d = a - t;
            let df = d.to_f64().unwrap_or(f64::NAN);
            total += df * df;
            d * T::from_f64_lossy(2.0 / n)
        })
        .collect();
    let coef = Tensor::new(yv.shape().to_vec(), coef)?;
    let out = g.custom(
        "mse_loss",
        &[y],
        Tensor::scalar(T::from_f64_lossy(total / n)),
        move |_: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>| {
            let s = grad.data()[0];
            Ok(vec![Some(coef.map(|c| c * s))])
        },
    )?;
    Ok(out)
}

/// Mean over all elements of `|y - target|`; zero subgradient at equality.
pub fn mae_loss<T: Real>(g: &mut Graph<T>, target: &Tensor<T>, y: Var) -> Result<Var> {
    let yv = g.value(y).clone();
    check_same_shape("mae_loss", target, &yv)?;
    let n = yv.numel() as f64;
    let step = T::from_f64_lossy(1.0 / n);
    let mut total = 0.0f64;
    let coef: Vec<T> = yv
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &t)| {
            let d = a - t;
            total += d.abs().to_f64().unwrap_or(f64::NAN);
            if d > T::zero() {
                step
            } else if d < T::zero() {
                -step
            } else {
                T::zero()
            }
        })
        .collect();
    let coef = Tensor::new(yv.shape().to_vec(), coef)?;
    record_linearized(g, "mae_loss", y, T::from_f64_lossy(total / n), coef)
}

/// `0.5 * base + 0.5 * tac` for the two combined modes.
pub fn combined_loss<T: Real>(g: &mut Graph<T>, target: &Tensor<T>, y: Var, cfg: &LossConfig) -> Result<Var> {
    let base = match cfg.mode {
        LossMode::MseTac => mse_loss(g, target, y)?,
        LossMode::MaeTac => mae_loss(g, target, y)?,
        other => return Err(Error::config(format!("{other} is not a combined loss"))),
    };
    let tac = tac_loss(g, target, y, cfg)?;
    let sum = g.add(base, tac)?;
    Ok(g.affine(sum, T::from_f64_lossy(0.5), T::zero())?)
}

/// Dispatches on `cfg.mode`.
pub fn feature_loss<T: Real>(g: &mut Graph<T>, target: &Tensor<T>, y: Var, cfg: &LossConfig) -> Result<Var> {
    match cfg.mode {
        LossMode::Tac => tac_loss(g, target, y, cfg),
        LossMode::Mse => mse_loss(g, target, y),
        LossMode::Mae => mae_loss(g, target, y),
        LossMode::MseTac | LossMode::MaeTac => combined_loss(g, target, y, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_examples() {
        let s = topk_locations(&[3.0f64, 1.0, -2.0, 0.0], 1).unwrap();
        assert_eq!(s, TopKSelection { pos: vec![0], neg: vec![2] });
        let s = topk_locations(&[1.0f64, 1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!(s.pos, vec![0]);
        assert_eq!(s.neg, vec![2]);
        let s = topk_locations(&[5.0f64; 4], 1).unwrap();
        assert_eq!(s, TopKSelection { pos: vec![0], neg: vec![1] });
        assert!(topk_locations(&[0.0f64; 4], 3).is_err());
    }

    #[test]
    fn modes_parse() {
        assert_eq!("mse+tac".parse::<LossMode>().unwrap(), LossMode::MseTac);
        assert!("l2".parse::<LossMode>().is_err());
    }
}
