//! Sequential conformalized quantile regression.
//!
//! A [`NonconformityWindow`] holds the most recent scores. Each stream step
//! emits an interval from the current window, then scores the revealed
//! observation and slides the window forward by one.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} inputs {values:?}")))
    }
}

/// Orders a quantile pair so that `lo ≤ hi`.
pub fn repair(q_lo: f64, q_up: f64) -> (f64, f64) {
    if q_lo > q_up {
        (q_up, q_lo)
    } else {
        (q_lo, q_up)
    }
}

/// `max(q_lo − y, y − q_up)`; negative when `y` lies strictly inside.
pub fn nonconformity(q_lo: f64, q_up: f64, y: f64) -> Result<f64> {
    finite(&[q_lo, q_up, y], "nonconformity")?;
    Ok((q_lo - y).max(y - q_up))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConformalQuantile {
    pub value: f64,
    /// `(1 − α)(1 + 1/n)`.
    pub level: f64,
    /// 1-based rank of `value` in the sorted window.
    pub rank: usize,
    /// Set when the level exceeds 1 and the maximum score was used.
    pub window_too_small: bool,
}

/// The `⌈(1 − α)(n + 1)⌉`-th smallest score. When that rank exceeds `n`
/// the maximum is returned and flagged rather than an infinite bound.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<ConformalQuantile> {
    if scores.is_empty() {
        return Err(Error::invalid("conformal quantile of an empty window"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    finite(scores, "conformal_quantile")?;
    let n = scores.len();
    let level = (1.0 - alpha) * (1.0 + 1.0 / n as f64);
    // (1 − α)(n + 1) is the same product without the extra rounding of 1/n;
    // the small slack keeps exact integers from rounding up.
    let target = (1.0 - alpha) * (n as f64 + 1.0);
    let rank = ((target - 1e-9).ceil() as usize).max(1);
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    if rank > n {
        log::warn!("calibration window of {n} scores is too small for alpha {alpha}; using the maximum score");
        return Ok(ConformalQuantile {
            value: sorted[n - 1],
            level,
            rank: n,
            window_too_small: true,
        });
    }
    Ok(ConformalQuantile {
        value: sorted[rank - 1],
        level,
        rank,
        window_too_small: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval {
    pub low: f64,
    pub high: f64,
    /// The adjustment would have inverted the interval, so it was collapsed
    /// to the midpoint.
    #[serde(default)]
    pub clamped: bool,
}

impl PredictionInterval {
    pub fn width(&self) -> f64 {
        self.high - self.low
    }

    pub fn contains(&self, y: f64) -> bool {
        self.low <= y && y <= self.high
    }
}

/// `[q_lo − Q, q_up + Q]`.
pub fn construct_interval(q_lo: f64, q_up: f64, q: f64) -> Result<PredictionInterval> {
    finite(&[q_lo, q_up, q], "construct_interval")?;
    if q_lo > q_up {
        return Err(Error::invalid(format!("lower quantile {q_lo} exceeds upper quantile {q_up}")));
    }
    if q < -(q_up - q_lo) / 2.0 {
        let mid = q_lo + (q_up - q_lo) / 2.0;
        return Ok(PredictionInterval {
            low: mid,
            high: mid,
            clamped: true,
        });
    }
    Ok(PredictionInterval {
        low: q_lo - q,
        high: q_up + q,
        clamped: false,
    })
}

/// Fixed-capacity FIFO of nonconformity scores, oldest first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonconformityWindow {
    scores: VecDeque<f64>,
}

impl NonconformityWindow {
    pub fn from_scores(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::invalid("calibration window must not be empty"));
        }
        finite(&scores, "window")?;
        Ok(NonconformityWindow { scores: scores.into() })
    }

    /// Scores every calibration observation in the given (time) order.
    pub fn calibrate(q_lo: &[f64], q_up: &[f64], y: &[f64]) -> Result<Self> {
        if q_lo.len() != y.len() || q_up.len() != y.len() {
            return Err(Error::shape("calibrate", &[q_lo.len(), q_up.len()], &[y.len()]));
        }
        let scores = q_lo
            .iter()
            .zip(q_up)
            .zip(y)
            .map(|((&lo, &up), &y)| {
                let (lo, up) = repair(lo, up);
                nonconformity(lo, up, y)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_scores(scores)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.scores.iter().copied().collect()
    }

    pub fn quantile(&self, alpha: f64) -> Result<ConformalQuantile> {
        conformal_quantile(&self.scores(), alpha)
    }

    /// Drops the oldest score and appends `score`.
    pub fn push(&mut self, score: f64) {
        self.scores.pop_front();
        self.scores.push_back(score);
    }
}

/// How the window evolves over a stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateMode {
    /// Slide the window with every revealed observation.
    #[default]
    Rolling,
    /// Keep the calibration window fixed.
    Static,
}

/// One observation of a stream: the model's quantile pair and, once
/// revealed, the ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamPoint {
    pub q_lo: f64,
    pub q_up: f64,
    pub y: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutput {
    pub interval: PredictionInterval,
    pub q: f64,
    pub window_too_small: bool,
}

/// Resumable stream state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScqrState {
    pub alpha: f64,
    pub mode: UpdateMode,
    pub window: NonconformityWindow,
    /// Number of time steps consumed so far.
    pub cursor: u64,
    pub last_time: Option<i64>,
}

impl ScqrState {
    pub fn new(window: NonconformityWindow, alpha: f64, mode: UpdateMode) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        Ok(ScqrState {
            alpha,
            mode,
            window,
            cursor: 0,
            last_time: None,
        })
    }

    fn advance(&mut self, time: i64) -> Result<()> {
        if let Some(prev) = self.last_time {
            if time <= prev {
                return Err(Error::invalid(format!("stream timestamps must increase: {time} follows {prev}")));
            }
        }
        self.last_time = Some(time);
        self.cursor += 1;
        Ok(())
    }

    /// Emits intervals for every point observed at `time` from one snapshot
    /// of the window, then scores all of them and slides the window.
    pub fn step_batch(&mut self, time: i64, points: &[StreamPoint]) -> Result<Vec<StepOutput>> {
        self.advance(time)?;
        let cq = self.window.quantile(self.alpha)?;
        let mut out = Vec::with_capacity(points.len());
        let mut scores = Vec::with_capacity(points.len());
        for p in points {
            let (lo, up) = repair(p.q_lo, p.q_up);
            out.push(StepOutput {
                interval: construct_interval(lo, up, cq.value)?,
                q: cq.value,
                window_too_small: cq.window_too_small,
            });
            scores.push(nonconformity(lo, up, p.y)?);
        }
        if self.mode == UpdateMode::Rolling {
            for s in scores {
                self.window.push(s);
            }
        }
        Ok(out)
    }

    pub fn step(&mut self, time: i64, point: StreamPoint) -> Result<StepOutput> {
        Ok(self.step_batch(time, &[point])?[0])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Runs a single-series stream with time stamps `0, 1, 2, …`, sliding the
/// window after each point.
pub fn scqr_stream(
    window: NonconformityWindow,
    stream: &[StreamPoint],
    alpha: f64,
) -> Result<(Vec<PredictionInterval>, NonconformityWindow)> {
    let mut state = ScqrState::new(window, alpha, UpdateMode::Rolling)?;
    let mut out = Vec::with_capacity(stream.len());
    for (t, p) in stream.iter().enumerate() {
        out.push(state.step(t as i64, *p)?.interval);
    }
    Ok((out, state.window))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Smallest score `s` with at least `(1 − α)(n + 1)` scores `≤ s`.
    fn count_oracle(scores: &[f64], alpha: f64) -> f64 {
        let need = (1.0 - alpha) * (scores.len() as f64 + 1.0);
        let mut best = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for &s in scores {
            max = max.max(s);
            let le = scores.iter().filter(|&&x| x <= s).count() as f64;
            if le >= need - 1e-9 && s < best {
                best = s;
            }
        }
        if best.is_finite() {
            best
        } else {
            max
        }
    }

    #[test]
    fn nonconformity_examples() {
        assert_eq!(nonconformity(3.0, 7.0, 5.0).unwrap(), -2.0);
        assert_eq!(nonconformity(3.0, 7.0, 8.0).unwrap(), 1.0);
        assert_eq!(nonconformity(3.0, 7.0, 3.0).unwrap(), 0.0);
        assert!(nonconformity(3.0, f64::NAN, 3.0).is_err());
    }

    #[test]
    fn quantile_examples() {
        let ten: Vec<f64> = (1..=10).map(f64::from).collect();
        let q = conformal_quantile(&ten, 0.1).unwrap();
        assert_eq!((q.value, q.rank, q.window_too_small), (10.0, 10, false));
        assert!((q.level - 0.99).abs() < 1e-12);

        let many: Vec<f64> = (1..=99).map(f64::from).collect();
        let q = conformal_quantile(&many, 0.1).unwrap();
        assert_eq!((q.value, q.rank), (90.0, 90));

        let q = conformal_quantile(&[4.2], 0.1).unwrap();
        assert_eq!(q.value, 4.2);
        assert!(q.window_too_small);
        assert!(conformal_quantile(&[], 0.1).is_err());
    }

    #[test]
    fn interval_examples() {
        let iv = |q| construct_interval(3.0, 7.0, q).unwrap();
        assert_eq!((iv(0.5).low, iv(0.5).high), (2.5, 7.5));
        assert_eq!((iv(0.0).low, iv(0.0).high), (3.0, 7.0));
        assert_eq!((iv(-1.0).low, iv(-1.0).high), (4.0, 6.0));
        let c = iv(-3.0);
        assert!(c.clamped && c.low == 5.0 && c.high == 5.0);
        assert!(construct_interval(7.0, 3.0, 0.0).is_err());
    }

    #[test]
    fn calibrate_examples() {
        assert!(NonconformityWindow::calibrate(&[], &[], &[]).is_err());
        assert!(NonconformityWindow::calibrate(&[1.0], &[2.0], &[]).is_err());
        let lo = [1.0, 4.0, -2.0];
        let up = [3.0, 6.0, 0.0];
        let y = [2.0, 5.0, -1.0];
        let w = NonconformityWindow::calibrate(&lo, &up, &y).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w.scores(), vec![-1.0, -1.0, -1.0]);
    }

    #[test]
    fn empty_stream_leaves_window() {
        let w = NonconformityWindow::from_scores(vec![1.0, 2.0]).unwrap();
        let (out, after) = scqr_stream(w.clone(), &[], 0.1).unwrap();
        assert!(out.is_empty());
        assert_eq!(after, w);
    }

    #[test]
    fn constant_scores_are_a_fixed_point() {
        let w = NonconformityWindow::from_scores(vec![0.5; 20]).unwrap();
        // y − q_up = 0.5 for every point
        let stream = vec![
            StreamPoint {
                q_lo: 1.0,
                q_up: 2.0,
                y: 2.5
            };
            10
        ];
        let (out, after) = scqr_stream(w.clone(), &stream, 0.2).unwrap();
        assert!(out.iter().all(|iv| *iv == out[0]));
        assert_eq!((out[0].low, out[0].high), (0.5, 2.5));
        assert_eq!(after, w);
    }

    #[test]
    fn three_step_trace_matches_hand_simulation() {
        // n = 5, alpha = 0.4: rank ⌈0.6 · 6⌉ = 4. Dyadic values keep the
        // arithmetic exact.
        let w = NonconformityWindow::from_scores(vec![0.25, -0.125, 0.75, 0.125, 0.5]).unwrap();
        let stream = [
            StreamPoint {
                q_lo: 0.0,
                q_up: 1.0,
                y: 1.875,
            }, // score 0.875
            StreamPoint {
                q_lo: 2.0,
                q_up: 4.0,
                y: 3.0,
            }, // score -1
            StreamPoint {
                q_lo: -1.0,
                q_up: 1.0,
                y: -1.25,
            }, // score 0.25
        ];
        let (out, after) = scqr_stream(w, &stream, 0.4).unwrap();
        // sorted [-0.125, 0.125, 0.25, 0.5, 0.75] -> 0.5
        assert_eq!((out[0].low, out[0].high), (-0.5, 1.5));
        // [-0.125, 0.75, 0.125, 0.5, 0.875] sorted [-0.125, 0.125, 0.5, 0.75, 0.875] -> 0.75
        assert_eq!((out[1].low, out[1].high), (1.25, 4.75));
        // [0.75, 0.125, 0.5, 0.875, -1] sorted [-1, 0.125, 0.5, 0.75, 0.875] -> 0.75
        assert_eq!((out[2].low, out[2].high), (-1.75, 1.75));
        assert_eq!(after.scores(), vec![0.125, 0.5, 0.875, -1.0, 0.25]);
    }

    #[test]
    fn out_of_order_time_is_rejected() {
        let w = NonconformityWindow::from_scores(vec![0.0; 4]).unwrap();
        let mut s = ScqrState::new(w, 0.1, UpdateMode::Rolling).unwrap();
        let p = StreamPoint {
            q_lo: 0.0,
            q_up: 1.0,
            y: 0.5,
        };
        s.step(10, p).unwrap();
        assert!(s.step(10, p).is_err());
        assert!(s.step(9, p).is_err());
    }

    #[test]
    fn crossed_quantiles_are_repaired() {
        let w = NonconformityWindow::from_scores(vec![0.0; 4]).unwrap();
        let mut s = ScqrState::new(w, 0.5, UpdateMode::Rolling).unwrap();
        let out = s
            .step(
                0,
                StreamPoint {
                    q_lo: 2.0,
                    q_up: 1.0,
                    y: 1.5,
                },
            )
            .unwrap();
        assert_eq!((out.interval.low, out.interval.high), (1.0, 2.0));
    }

    #[test]
    fn static_mode_never_moves_the_window() {
        let w = NonconformityWindow::from_scores(vec![0.1, 0.2, 0.3]).unwrap();
        let mut s = ScqrState::new(w.clone(), 0.1, UpdateMode::Static).unwrap();
        for t in 0..5 {
            s.step(
                t,
                StreamPoint {
                    q_lo: 0.0,
                    q_up: 1.0,
                    y: 9.0,
                },
            )
            .unwrap();
        }
        assert_eq!(s.window, w);
        assert_eq!(s.cursor, 5);
    }

    #[test]
    fn batch_step_uses_one_snapshot() {
        let w = NonconformityWindow::from_scores(vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let mut s = ScqrState::new(w, 0.5, UpdateMode::Rolling).unwrap();
        let pts = [
            StreamPoint {
                q_lo: 0.0,
                q_up: 1.0,
                y: 5.0,
            },
            StreamPoint {
                q_lo: 0.0,
                q_up: 1.0,
                y: 6.0,
            },
        ];
        let out = s.step_batch(0, &pts).unwrap();
        assert_eq!(out[0].q, out[1].q);
        assert_eq!(s.window.scores(), vec![0.0, 0.0, 4.0, 5.0]);
    }

    #[test]
    fn checkpoint_resumes_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("window.json");
        let w = NonconformityWindow::from_scores(vec![0.1 + 0.2, 1.0 / 3.0, -2.5e-7]).unwrap();
        let mut s = ScqrState::new(w, 0.1, UpdateMode::Rolling).unwrap();
        s.step(
            3,
            StreamPoint {
                q_lo: 0.7,
                q_up: 1.9,
                y: std::f64::consts::PI,
            },
        )
        .unwrap();
        s.save(&path).unwrap();
        assert_eq!(ScqrState::load(&path).unwrap(), s);
        assert!(matches!(ScqrState::load(&dir.path().join("nope.json")), Err(Error::MissingFile(_))));
    }

    proptest! {
        #[test]
        fn matches_sort_oracle(
            scores in prop::collection::vec(-5.0f64..5.0, 1..500),
            alpha in 0.01f64..0.99,
        ) {
            let q = conformal_quantile(&scores, alpha).unwrap();
            prop_assert_eq!(q.value.to_bits(), count_oracle(&scores, alpha).to_bits());
        }

        #[test]
        fn fifo_keeps_recent_scores_in_order(
            init in prop::collection::vec(-3.0f64..3.0, 1..30),
            stream in prop::collection::vec((-2.0f64..2.0, 0.0f64..2.0, -4.0f64..4.0), 0..60),
        ) {
            let w = NonconformityWindow::from_scores(init.clone()).unwrap();
            let pts: Vec<StreamPoint> = stream.iter().map(|&(lo, width, y)| StreamPoint { q_lo: lo, q_up: lo + width, y }).collect();
            let (_, after) = scqr_stream(w, &pts, 0.1).unwrap();
            let new: Vec<f64> = pts.iter().map(|p| nonconformity(p.q_lo, p.q_up, p.y).unwrap()).collect();
            let mut expect: Vec<f64> = init.iter().chain(&new).copied().collect();
            expect.drain(..expect.len() - init.len());
            prop_assert_eq!(after.scores(), expect);
        }

        #[test]
        fn enlarging_a_score_never_lowers_q(
            scores in prop::collection::vec(-5.0f64..5.0, 1..100),
            idx in any::<prop::sample::Index>(),
            bump in 0.0f64..3.0,
            alpha in 0.05f64..0.5,
        ) {
            let before = conformal_quantile(&scores, alpha).unwrap().value;
            let mut bigger = scores.clone();
            bigger[idx.index(scores.len())] += bump;
            prop_assert!(conformal_quantile(&bigger, alpha).unwrap().value >= before);
        }

        #[test]
        fn width_decomposes(lo in -10.0f64..10.0, w in 0.0f64..5.0, q in -1.0f64..3.0) {
            let iv = construct_interval(lo, lo + w, q).unwrap();
            if !iv.clamped {
                prop_assert!((iv.width() - (w + 2.0 * q)).abs() <= 1e-12 * (1.0 + lo.abs() + w + q.abs()) * 8.0);
            } else {
                prop_assert!(q < -w / 2.0);
            }
        }
    }
}
