//! Point and interval forecast scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scqr::PredictionInterval;

/// Targets with `|y|` below this are left out of MAPE.
pub const MAPE_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// Fraction, not percent. `None` when every target was below the floor.
    pub mape: Option<f64>,
    pub n_points: usize,
    pub n_skipped_mape: usize,
}

pub fn point_metrics(y: &[f64], pred: &[f64]) -> Result<PointMetrics> {
    if y.is_empty() || y.len() != pred.len() {
        return Err(Error::shape("point_metrics", &[y.len()], &[pred.len()]));
    }
    let n = y.len() as f64;
    let (mut abs, mut sq, mut pct) = (0.0, 0.0, 0.0);
    let mut skipped = 0;
    for (&t, &p) in y.iter().zip(pred) {
        let e = p - t;
        abs += e.abs();
        sq += e * e;
        if t.abs() < MAPE_FLOOR {
            skipped += 1;
        } else {
            pct += (e / t).abs();
        }
    }
    let kept = y.len() - skipped;
    Ok(PointMetrics {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
        mape: (kept > 0).then(|| pct / kept as f64),
        n_points: y.len(),
        n_skipped_mape: skipped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalMetrics {
    pub mpiw: f64,
    pub winkler: f64,
    pub coverage: f64,
}

/// Width plus `2/α` times the miss distance.
pub fn winkler_score(y: f64, iv: &PredictionInterval, alpha: f64) -> f64 {
    let width = iv.high - iv.low;
    if y < iv.low {
        width + 2.0 / alpha * (iv.low - y)
    } else if y > iv.high {
        width + 2.0 / alpha * (y - iv.high)
    } else {
        width
    }
}

pub fn interval_metrics(y: &[f64], intervals: &[PredictionInterval], alpha: f64) -> Result<IntervalMetrics> {
    if y.is_empty() || y.len() != intervals.len() {
        return Err(Error::shape("interval_metrics", &[y.len()], &[intervals.len()]));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if let Some(bad) = intervals.iter().find(|iv| !(iv.low <= iv.high)) {
        return Err(Error::invalid(format!("invalid interval [{}, {}]", bad.low, bad.high)));
    }
    let n = y.len() as f64;
    let (mut width, mut wink, mut hits) = (0.0, 0.0, 0usize);
    for (&t, iv) in y.iter().zip(intervals) {
        width += iv.width();
        wink += winkler_score(t, iv, alpha);
        hits += usize::from(iv.contains(t));
    }
    Ok(IntervalMetrics {
        mpiw: width / n,
        winkler: wink / n,
        coverage: hits as f64 / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    pub mape: Option<f64>,
    pub mpiw: f64,
    pub winkler: f64,
    pub coverage: f64,
    /// Coverage reached `1 − α`.
    pub target_met: bool,
    pub n_points: usize,
    pub n_skipped_mape: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_horizon: Vec<HorizonMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub mae: f64,
    pub coverage: f64,
}

impl MetricsReport {
    /// `median` is the point forecast scored by MAE, RMSE and MAPE.
    pub fn compute(y: &[f64], median: &[f64], intervals: &[PredictionInterval], alpha: f64) -> Result<Self> {
        let p = point_metrics(y, median)?;
        let i = interval_metrics(y, intervals, alpha)?;
        Ok(MetricsReport {
            mae: p.mae,
            rmse: p.rmse,
            mape: p.mape,
            mpiw: i.mpiw,
            winkler: i.winkler,
            coverage: i.coverage,
            target_met: i.coverage >= 1.0 - alpha,
            n_points: p.n_points,
            n_skipped_mape: p.n_skipped_mape,
            per_horizon: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn iv(low: f64, high: f64) -> PredictionInterval {
        PredictionInterval { low, high, clamped: false }
    }

    #[test]
    fn point_examples() {
        let p = point_metrics(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((p.mae, p.rmse, p.mape), (0.0, 0.0, Some(0.0)));

        let p = point_metrics(&[2.0, 4.0], &[3.0, 2.0]).unwrap();
        assert!((p.mae - 1.5).abs() <= 1e-12);
        assert!((p.rmse - 2.5f64.sqrt()).abs() <= 1e-12);
        assert!((p.mape.unwrap() - 0.5).abs() <= 1e-12);

        let p = point_metrics(&[1.0, 5.0, -2.0], &[1.25, 5.25, -1.75]).unwrap();
        assert_eq!((p.mae, p.rmse), (0.25, 0.25));
        assert!(point_metrics(&[], &[]).is_err());
    }

    #[test]
    fn mape_skips_zero_targets() {
        let p = point_metrics(&[0.0, 2.0], &[1.0, 3.0]).unwrap();
        assert_eq!(p.n_skipped_mape, 1);
        assert_eq!(p.mape, Some(0.5));
        assert_eq!(point_metrics(&[0.0], &[1.0]).unwrap().mape, None);
    }

    #[test]
    fn interval_examples() {
        let m = interval_metrics(&[2.0, 4.0], &[iv(1.0, 3.0), iv(2.0, 6.0)], 0.1).unwrap();
        assert!((m.mpiw - 3.0).abs() <= 1e-12);
        assert!((m.coverage - 1.0).abs() <= 1e-12);
        assert!((m.winkler - 3.0).abs() <= 1e-12);
        assert!((winkler_score(7.0, &iv(2.0, 6.0), 0.1) - 24.0).abs() <= 1e-12);
        assert!(interval_metrics(&[1.0], &[iv(2.0, 1.0)], 0.1).is_err());
    }

    #[test]
    fn report_serializes_fixed_fields() {
        let r = MetricsReport::compute(&[2.0, 4.0], &[2.0, 4.0], &[iv(1.0, 3.0), iv(2.0, 6.0)], 0.1).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for key in [
            "mae",
            "rmse",
            "mape",
            "mpiw",
            "winkler",
            "coverage",
            "target_met",
            "n_points",
            "n_skipped_mape",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(r.target_met);
    }

    fn cases() -> impl Strategy<Value = Vec<(f64, f64, f64, f64)>> {
        prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0, 0.0f64..5.0, -10.0f64..10.0), 1..50)
    }

    proptest! {
        #[test]
        fn bounds_hold(cs in cases(), alpha in 0.01f64..0.5) {
            let y: Vec<f64> = cs.iter().map(|c| c.0).collect();
            let pred: Vec<f64> = cs.iter().map(|c| c.1).collect();
            let ivs: Vec<_> = cs.iter().map(|c| iv(c.3, c.3 + c.2)).collect();
            let p = point_metrics(&y, &pred).unwrap();
            prop_assert!(p.rmse + 1e-12 >= p.mae && p.mae >= 0.0);
            let m = interval_metrics(&y, &ivs, alpha).unwrap();
            prop_assert!((0.0..=1.0).contains(&m.coverage) && m.mpiw >= 0.0);
            prop_assert!(m.winkler >= m.mpiw - 1e-12);
            if m.coverage == 1.0 {
                prop_assert!((m.winkler - m.mpiw).abs() <= 1e-9);
            } else {
                prop_assert!(m.winkler > m.mpiw);
            }
        }

        #[test]
        fn coverage_is_affine_invariant(cs in cases(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let y: Vec<f64> = cs.iter().map(|c| c.0).collect();
            let ivs: Vec<_> = cs.iter().map(|c| iv(c.3, c.3 + c.2)).collect();
            let ty: Vec<f64> = y.iter().map(|v| a * v + b).collect();
            let tiv: Vec<_> = ivs.iter().map(|i| iv(a * i.low + b, a * i.high + b)).collect();
            // exact comparisons can flip by one ulp at the boundary; count those
            let c0 = interval_metrics(&y, &ivs, 0.1).unwrap().coverage;
            let c1 = interval_metrics(&ty, &tiv, 0.1).unwrap().coverage;
            let boundary = y.iter().zip(&ivs).filter(|(v, i)| (**v - i.low).abs() < 1e-9 || (**v - i.high).abs() < 1e-9).count();
            prop_assert!((c0 - c1).abs() * y.len() as f64 <= boundary as f64 + 1e-9);
        }

        #[test]
        fn permutation_invariant(cs in cases(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = cs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let eval = |cs: &[(f64, f64, f64, f64)]| {
                let y: Vec<f64> = cs.iter().map(|c| c.0).collect();
                let pred: Vec<f64> = cs.iter().map(|c| c.1).collect();
                let ivs: Vec<_> = cs.iter().map(|c| iv(c.3, c.3 + c.2)).collect();
                (point_metrics(&y, &pred).unwrap(), interval_metrics(&y, &ivs, 0.1).unwrap())
            };
            let (p0, i0) = eval(&cs);
            let (p1, i1) = eval(&shuffled);
            prop_assert!((p0.mae - p1.mae).abs() <= 1e-9 && (p0.rmse - p1.rmse).abs() <= 1e-9);
            prop_assert!((i0.winkler - i1.winkler).abs() <= 1e-9 && i0.coverage == i1.coverage);
        }
    }
}
