use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{QuantilePrediction, QuantileVars};
use crate::tensor::Tensor;

/// Target miscoverage `α`; the lower and upper quantile levels are the
/// symmetric split `α/2` and `1 − α/2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
}

impl LossConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        check_level(alpha)?;
        Ok(LossConfig { alpha })
    }

    pub fn alpha_lo(&self) -> f64 {
        self.alpha / 2.0
    }

    pub fn alpha_up(&self) -> f64 {
        1.0 - self.alpha / 2.0
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 0.1 }
    }
}

fn check_level(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("quantile level must lie in (0, 1), got {alpha}")))
    }
}

/// Mean of `max(α(y − ŷ), (α − 1)(y − ŷ))`.
pub fn pinball_loss(y: &[f64], pred: &[f64], alpha: f64) -> Result<f64> {
    check_level(alpha)?;
    if y.len() != pred.len() || y.is_empty() {
        return Err(Error::shape("pinball_loss", &[y.len()], &[pred.len()]));
    }
    let total: f64 = y
        .iter()
        .zip(pred)
        .map(|(&y, &p)| {
            let d = y - p;
            (alpha * d).max((alpha - 1.0) * d)
        })
        .sum();
    Ok(total / y.len() as f64)
}

pub fn mae(y: &[f64], pred: &[f64]) -> Result<f64> {
    if y.len() != pred.len() || y.is_empty() {
        return Err(Error::shape("mae", &[y.len()], &[pred.len()]));
    }
    Ok(y.iter().zip(pred).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// Lower pinball + upper pinball + MAE of the median, all means over every
/// cell jointly.
pub fn hybrid_loss(y: &Tensor, pred: &QuantilePrediction, cfg: &LossConfig) -> Result<f64> {
    for part in [&pred.low, &pred.median, &pred.high] {
        if part.shape() != y.shape() {
            return Err(Error::shape("hybrid_loss", y.shape(), part.shape()));
        }
    }
    Ok(pinball_loss(y.data(), pred.low.data(), cfg.alpha_lo())?
        + pinball_loss(y.data(), pred.high.data(), cfg.alpha_up())?
        + mae(y.data(), pred.median.data())?)
}

/// Pinball loss on the tape as `mean(α·d + max(−d, 0))` with `d = y − ŷ`,
/// which equals the max form everywhere. At `y = ŷ` the derivative with
/// respect to `ŷ` is `−α`.
pub fn pinball_on_tape(tape: &mut Tape, y: Var, pred: Var, alpha: f64) -> Result<Var> {
    check_level(alpha)?;
    let d = tape.sub(y, pred)?;
    let lin = tape.scale(d, alpha);
    let neg = tape.scale(d, -1.0);
    let hinge = tape.max_scalar(neg, 0.0);
    let per_cell = tape.add(lin, hinge)?;
    Ok(tape.mean(per_cell))
}

pub fn hybrid_on_tape(tape: &mut Tape, y: Var, q: &QuantileVars, cfg: &LossConfig) -> Result<Var> {
    let lo = pinball_on_tape(tape, y, q.low, cfg.alpha_lo())?;
    let up = pinball_on_tape(tape, y, q.high, cfg.alpha_up())?;
    let d = tape.sub(y, q.median)?;
    let abs = tape.abs(d);
    let mid = tape.mean(abs);
    let s = tape.add(lo, up)?;
    tape.add(s, mid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, ParamStore};
    use proptest::prelude::*;

    #[test]
    fn pinball_examples() {
        assert_eq!(pinball_loss(&[3.0, -1.0], &[3.0, -1.0], 0.3).unwrap(), 0.0);
        assert!((pinball_loss(&[10.0], &[8.0], 0.9).unwrap() - 1.8).abs() < 1e-15);
        assert!((pinball_loss(&[8.0], &[10.0], 0.9).unwrap() - 0.2).abs() < 1e-15);
        assert!(pinball_loss(&[1.0], &[1.0], 0.0).is_err());
        assert!(pinball_loss(&[1.0], &[1.0], 1.0).is_err());
    }

    #[test]
    fn hybrid_examples() {
        let cfg = LossConfig::new(0.2).unwrap();
        let t = |v: f64| Tensor::full(&[1, 1, 1], v);
        let exact = QuantilePrediction {
            low: t(5.0),
            median: t(5.0),
            high: t(5.0),
        };
        assert_eq!(hybrid_loss(&t(5.0), &exact, &cfg).unwrap(), 0.0);

        let pred = QuantilePrediction {
            low: t(4.0),
            median: t(5.0),
            high: t(6.0),
        };
        assert!((hybrid_loss(&t(5.0), &pred, &cfg).unwrap() - 0.2).abs() < 1e-12);

        let bad = QuantilePrediction {
            low: Tensor::zeros(&[1, 2, 1]),
            median: t(5.0),
            high: t(6.0),
        };
        assert!(hybrid_loss(&t(5.0), &bad, &cfg).is_err());
    }

    #[test]
    fn tape_pinball_matches_value_form_and_kink_convention() {
        let mut store = ParamStore::new();
        let p = store.add("pred", Tensor::new(vec![4], vec![1.0, 2.5, -3.0, 0.0]).unwrap());
        let y = Tensor::new(vec![4], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let yv = tape.constant(y.clone());
        let pv = tape.param(&store, p);
        let l = pinball_on_tape(&mut tape, yv, pv, 0.3).unwrap();
        let want = pinball_loss(y.data(), store.get(p).data(), 0.3).unwrap();
        assert!((tape.value(l).item() - want).abs() < 1e-15);

        let mut g = crate::autodiff::GradStore::zeros_like(&store);
        tape.backward(l, &mut g).unwrap();
        // element 0 sits on the kink: d/dŷ = −α, divided by 4 cells
        assert!((g.get(p).data()[0] - (-0.3 / 4.0)).abs() < 1e-15);
        assert!((g.get(p).data()[1] - (0.7 / 4.0)).abs() < 1e-15);
        assert!((g.get(p).data()[2] - (-0.3 / 4.0)).abs() < 1e-15);
    }

    #[test]
    fn hybrid_gradient_matches_finite_differences_away_from_kinks() {
        let mut store = ParamStore::new();
        let lo = store.add("lo", Tensor::new(vec![2, 3], vec![0.1, -0.4, 2.0, 0.7, 1.3, -2.2]).unwrap());
        let md = store.add("md", Tensor::new(vec![2, 3], vec![0.5, 0.2, 1.1, -0.3, 0.9, 0.05]).unwrap());
        let hi = store.add("hi", Tensor::new(vec![2, 3], vec![1.4, 0.8, -0.5, 1.9, 2.2, 0.6]).unwrap());
        let y = Tensor::new(vec![2, 3], vec![0.3, 0.35, 1.0, 0.1, 1.7, -0.2]).unwrap();
        let cfg = LossConfig::default();
        let report = finite_diff_check(&store, 1e-5, |s, tape| {
            let yv = tape.constant(y.clone());
            let q = QuantileVars {
                low: tape.param(s, lo),
                median: tape.param(s, md),
                high: tape.param(s, hi),
            };
            hybrid_on_tape(tape, yv, &q, &cfg)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (1usize..20).prop_flat_map(|n| {
            (
                prop::collection::vec(-100.0f64..100.0, n),
                prop::collection::vec(-100.0f64..100.0, n),
                prop::collection::vec(-100.0f64..100.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn pinball_nonnegative_and_zero_iff_equal((y, a, _) in pair(), alpha in 0.01f64..0.99) {
            let l = pinball_loss(&y, &a, alpha).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, y == a);
            prop_assert_eq!(pinball_loss(&y, &y, alpha).unwrap(), 0.0);
        }

        #[test]
        fn median_pinball_is_half_mae((y, a, _) in pair()) {
            prop_assert_eq!(pinball_loss(&y, &a, 0.5).unwrap(), 0.5 * mae(&y, &a).unwrap());
        }

        #[test]
        fn pinball_is_convex_in_prediction((y, a, b) in pair(), alpha in 0.01f64..0.99) {
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, z)| (x + z) / 2.0).collect();
            let lhs = pinball_loss(&y, &mid, alpha).unwrap();
            let rhs = (pinball_loss(&y, &a, alpha).unwrap() + pinball_loss(&y, &b, alpha).unwrap()) / 2.0;
            prop_assert!(lhs <= rhs + 1e-12);
        }

        #[test]
        fn hybrid_dominates_each_term((y, a, b) in pair(), alpha in 0.02f64..0.98) {
            let n = y.len();
            let t = |v: &Vec<f64>| Tensor::new(vec![1, 1, n], v.clone()).unwrap();
            let cfg = LossConfig::new(alpha).unwrap();
            let pred = QuantilePrediction { low: t(&a), median: t(&b), high: t(&a) };
            let h = hybrid_loss(&t(&y), &pred, &cfg).unwrap();
            prop_assert!(h >= pinball_loss(&y, &a, cfg.alpha_lo()).unwrap());
            prop_assert!(h >= pinball_loss(&y, &a, cfg.alpha_up()).unwrap());
            prop_assert!(h >= mae(&y, &b).unwrap());
        }
    }
}
