//! Error curves over the prediction horizon, time loss, and crossing-order
//! accuracy against recorded scenes.

use super::{predict_ws, PredictionResult, PREDICTION_DT};
use crate::driver::AccelModel;
use crate::env::ReplayScene;
use crate::error::{Error, Result};
use crate::gap::GapModel;
use crate::map::{ConflictRelation, IntersectionMap};
use crate::mlp::Workspace;
use crate::scenario::{Scenario, VehicleId, VehicleState};
use std::collections::BTreeMap;

/// How per-sample errors are reduced to one value per horizon offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorAggregation {
    /// Aggregate per vehicle first, then across vehicles.
    PerVehicle,
    /// Pool every sample.
    Pooled,
}

/// RMSE and median absolute deviation per horizon offset.
#[derive(Debug, Clone)]
pub struct ErrorCurve {
    pub offsets: Vec<f64>,
    pub rmse: Vec<f64>,
    pub mad: Vec<f64>,
    pub n: Vec<usize>,
}

impl ErrorCurve {
    pub fn at_offset(&self, dt: f64) -> Option<(f64, f64, usize)> {
        self.offsets
            .iter()
            .position(|&o| (o - dt).abs() < 1e-9)
            .map(|k| (self.rmse[k], self.mad[k], self.n[k]))
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("dt,rmse,mad,n\n");
        for k in 0..self.offsets.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.offsets[k], self.rmse[k], self.mad[k], self.n[k]
            ));
        }
        out
    }
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn quantile(values: &mut [f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    values[lo] + frac * (values[hi] - values[lo])
}

/// Error samples keyed by (vehicle, horizon offset index).
#[derive(Debug, Default)]
struct ErrorPool {
    /// per offset index: per vehicle key: signed errors
    samples: Vec<BTreeMap<(u32, u64), Vec<f64>>>,
}

impl ErrorPool {
    fn ensure(&mut self, n_offsets: usize) {
        while self.samples.len() < n_offsets {
            self.samples.push(BTreeMap::new());
        }
    }

    fn push(&mut self, offset_idx: usize, vehicle: (u32, u64), e: f64) {
        self.ensure(offset_idx + 1);
        self.samples[offset_idx].entry(vehicle).or_default().push(e);
    }

    fn curve(&self, dt: f64, agg: ErrorAggregation) -> ErrorCurve {
        let mut offsets = Vec::new();
        let mut rmse = Vec::new();
        let mut mad = Vec::new();
        let mut n = Vec::new();
        for (k, per_vehicle) in self.samples.iter().enumerate() {
            let count: usize = per_vehicle.values().map(Vec::len).sum();
            if count == 0 {
                continue;
            }
            offsets.push((k + 1) as f64 * dt);
            n.push(count);
            match agg {
                ErrorAggregation::PerVehicle => {
                    let mut msqe = Vec::new();
                    let mut medians = Vec::new();
                    for errs in per_vehicle.values() {
                        msqe.push(errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64);
                        let mut abs: Vec<f64> = errs.iter().map(|e| e.abs()).collect();
                        medians.push(median(&mut abs));
                    }
                    rmse.push((msqe.iter().sum::<f64>() / msqe.len() as f64).sqrt());
                    mad.push(median(&mut medians));
                }
                ErrorAggregation::Pooled => {
                    let all: Vec<f64> = per_vehicle.values().flatten().cloned().collect();
                    rmse.push((all.iter().map(|e| e * e).sum::<f64>() / all.len() as f64).sqrt());
                    let mut abs: Vec<f64> = all.iter().map(|e| e.abs()).collect();
                    mad.push(median(&mut abs));
                }
            }
        }
        ErrorCurve { offsets, rmse, mad, n }
    }
}

/// Predicted-vs-recorded longitudinal distance: signed error per vehicle per
/// horizon offset. Inputs are aligned by vehicle id; the ground truth series
/// starts at the prediction start. Extrapolated or bicycle samples must
/// already be excluded by the caller.
pub fn distance_error(
    predictions: &[(u32, PredictionResult, BTreeMap<u64, Vec<f64>>)],
    aggregation: ErrorAggregation,
) -> ErrorCurve {
    let mut pool = ErrorPool::default();
    for (scene, pred, gt) in predictions {
        for series in &pred.series {
            let Some(gt_s) = gt.get(&series.id.0) else { continue };
            for (k, sample) in series.samples.iter().enumerate().skip(1) {
                if k >= gt_s.len() {
                    break;
                }
                pool.push(k - 1, (*scene, series.id.0), sample.s - gt_s[k]);
            }
        }
    }
    pool.curve(PREDICTION_DT, aggregation)
}

/// Time loss of one velocity profile: the trapezoidal integral of
/// `1 - v(t)/v_max(t)` between two sample indices.
pub fn time_loss(v: &[f64], v_max: &[f64], dt: f64, from: usize, to: usize) -> Result<f64> {
    if from >= to || to >= v.len() + 1 || to > v_max.len() {
        return Err(Error::Eval(format!("bad time-loss window {from}..{to} over {}", v.len())));
    }
    if v_max[from..to].iter().any(|&m| m <= 0.0) {
        return Err(Error::Eval("non-positive speed limit in time-loss window".into()));
    }
    let mut acc = 0.0;
    for k in from..to - 1 {
        let a = 1.0 - v[k] / v_max[k];
        let b = 1.0 - v[k + 1] / v_max[k + 1];
        acc += 0.5 * (a + b) * dt;
    }
    Ok(acc)
}

#[derive(Debug, Clone)]
pub struct TimeLossCurve {
    pub offsets: Vec<f64>,
    pub rmse: Vec<f64>,
    /// 80% quantile of the absolute time-loss error.
    pub q80: Vec<f64>,
    pub n: Vec<usize>,
}

impl TimeLossCurve {
    pub fn to_table(&self) -> String {
        let mut out = String::from("dt,rmse,q80,n\n");
        for k in 0..self.offsets.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.offsets[k], self.rmse[k], self.q80[k], self.n[k]
            ));
        }
        out
    }
}

/// Crossing-order agreement between prediction and recording.
#[derive(Debug, Clone, Default)]
pub struct CrossingOrderStats {
    pub pairs: usize,
    pub matches: usize,
    /// Pairs unresolved within the horizon in either source.
    pub skipped: usize,
}

impl CrossingOrderStats {
    pub fn accuracy(&self) -> f64 {
        if self.pairs == 0 {
            f64::NAN
        } else {
            self.matches as f64 / self.pairs as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub horizon: f64,
    /// Stride between prediction start frames (s).
    pub start_stride: f64,
    pub aggregation: ErrorAggregation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { horizon: 10.0, start_stride: 1.0, aggregation: ErrorAggregation::PerVehicle }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub distance: ErrorCurve,
    pub time_loss: TimeLossCurve,
    pub crossing_order: CrossingOrderStats,
    pub n_predictions: usize,
}

/// First sample index at which a series passes an arclength threshold.
fn first_crossing(samples: &[f64], threshold: f64) -> Option<usize> {
    samples.iter().position(|&s| s > threshold)
}

/// Run the full replay evaluation: predictions start at every stride'd frame
/// with at least one vehicle observable for the full horizon; each rollout
/// is compared against the recording. Bicycles and extrapolated frames stay
/// out of the error pools; bicycles still participate in the rollouts.
pub fn evaluate_replay(
    map: &IntersectionMap,
    scenes: &[ReplayScene],
    gap_model: &GapModel,
    accel_model: &AccelModel,
    cfg: &EvalConfig,
) -> Result<EvalOutput> {
    let mut ws = Workspace::default();
    let horizon_steps = (cfg.horizon / PREDICTION_DT).round() as usize;
    let stride = (cfg.start_stride / PREDICTION_DT).round().max(1.0) as usize;
    let mut pool = ErrorPool::default();
    let mut tl_pool = ErrorPool::default();
    let mut order = CrossingOrderStats::default();
    let mut n_predictions = 0usize;

    for (scene_idx, scene) in scenes.iter().enumerate() {
        let n_steps = scene.n_steps();
        for start in (0..n_steps).step_by(stride) {
            // Vehicles with real data at the start frame.
            let vehicles: Vec<VehicleState> = scene
                .tracks
                .iter()
                .filter(|t| !t.is_extrapolated_at(start))
                .filter_map(|t| {
                    t.state_at(start).map(|(s, v)| VehicleState {
                        id: VehicleId(t.track_id),
                        route: t.route,
                        s,
                        v,
                        length: t.length,
                        width: t.width,
                        kind: t.kind,
                    })
                })
                .collect();
            if vehicles.is_empty() {
                continue;
            }
            // At least one metric vehicle observable over the full horizon.
            let full_horizon = scene.tracks.iter().any(|t| {
                t.kind.in_metrics()
                    && !t.is_extrapolated_at(start)
                    && t.state_at(start).is_some()
                    && t.end_step() > start + horizon_steps
            });
            if !full_horizon {
                continue;
            }
            let scenario = Scenario::new(vehicles);
            let pred = predict_ws(map, &scenario, gap_model, accel_model, cfg.horizon, &mut ws)?;
            n_predictions += 1;

            for series in &pred.series {
                if !series.kind.in_metrics() {
                    continue;
                }
                let track = scene
                    .tracks
                    .iter()
                    .find(|t| t.track_id == series.id.0)
                    .expect("series track");
                let geom = map.geometry(series.route);
                // Distance error and cumulative time loss per offset.
                let mut tl_pred = 0.0;
                let mut tl_gt = 0.0;
                for k in 1..series.samples.len() {
                    let Some((s_gt, v_gt)) = track.state_at(start + k) else { break };
                    if track.is_extrapolated_at(start + k) {
                        continue;
                    }
                    let sample = &series.samples[k];
                    let key = (scene_idx as u32, series.id.0);
                    pool.push(k - 1, key, sample.s - s_gt);
                    // Trapezoid increments of 1 - v/vmax on both series.
                    let prev = &series.samples[k - 1];
                    let (s_gt_prev, v_gt_prev) = track.state_at(start + k - 1).unwrap();
                    let vm = |s: f64| geom.speed_limit_at(s);
                    tl_pred += 0.5
                        * ((1.0 - prev.v / vm(prev.s)) + (1.0 - sample.v / vm(sample.s)))
                        * PREDICTION_DT;
                    tl_gt += 0.5
                        * ((1.0 - v_gt_prev / vm(s_gt_prev)) + (1.0 - v_gt / vm(s_gt)))
                        * PREDICTION_DT;
                    tl_pool.push(k - 1, key, tl_pred - tl_gt);
                }
            }

            // Crossing order per conflicting pair at the start frame.
            let stats = crossing_order_accuracy(map, &pred, scene, start, horizon_steps)?;
            order.pairs += stats.pairs;
            order.matches += stats.matches;
            order.skipped += stats.skipped;
        }
    }

    Ok(EvalOutput {
        distance: pool.curve(PREDICTION_DT, cfg.aggregation),
        time_loss: {
            let mut offsets = Vec::new();
            let mut rmse = Vec::new();
            let mut q80 = Vec::new();
            let mut n = Vec::new();
            for (k, per_vehicle) in tl_pool.samples.iter().enumerate() {
                let mut all: Vec<f64> = per_vehicle.values().flatten().cloned().collect();
                if all.is_empty() {
                    continue;
                }
                offsets.push((k + 1) as f64 * PREDICTION_DT);
                n.push(all.len());
                rmse.push((all.iter().map(|e| e * e).sum::<f64>() / all.len() as f64).sqrt());
                let mut abs: Vec<f64> = all.iter_mut().map(|e| e.abs()).collect();
                q80.push(quantile(&mut abs, 0.8));
            }
            TimeLossCurve { offsets, rmse, q80, n }
        },
        crossing_order: order,
        n_predictions,
    })
}

/// Which of the two entered first; `None` when neither entered.
fn order_of(a: Option<usize>, b: Option<usize>) -> Option<bool> {
    match (a, b) {
        (None, None) => None,
        (Some(_), None) => Some(true),
        (None, Some(_)) => Some(false),
        (Some(x), Some(y)) => Some(x <= y),
    }
}

/// Predicted vs recorded conflict-zone entry order for every yielding pair
/// of one prediction that starts at `start` on the scene grid. Pairs that
/// stay unresolved within the horizon in either source are skipped and
/// counted separately.
pub fn crossing_order_accuracy(
    map: &IntersectionMap,
    pred: &PredictionResult,
    scene: &ReplayScene,
    start: usize,
    horizon_steps: usize,
) -> Result<CrossingOrderStats> {
    let mut order = CrossingOrderStats::default();
    let sc = &pred.series;
    for a in 0..sc.len() {
        for b in 0..sc.len() {
            if a == b {
                continue;
            }
            let (va, vb) = (&sc[a], &sc[b]);
            if !va.kind.in_metrics() {
                continue;
            }
            if va.samples.is_empty() || vb.samples.is_empty() {
                continue;
            }
            let (s_a0, s_b0) = (va.samples[0].s, vb.samples[0].s);
            if map.conflict_partners(va.route, s_a0, vb.route, s_b0)?
                != ConflictRelation::FirstYields
            {
                continue;
            }
            // Entry thresholds of the shared zone, oriented per route.
            let Some(zone) = map.conflict_zones_between(va.route, vb.route).find(|z| {
                let (iva, _, ivb, _) = z.from_perspective(va.route).unwrap();
                s_a0 <= iva.1 && s_b0 <= ivb.1
            }) else {
                continue;
            };
            let (iv_a, _, iv_b, _) = zone.from_perspective(va.route).unwrap();
            let track_a = scene.tracks.iter().find(|t| t.track_id == va.id.0);
            let track_b = scene.tracks.iter().find(|t| t.track_id == vb.id.0);
            let (Some(track_a), Some(track_b)) = (track_a, track_b) else {
                continue;
            };
            let horizon_end = start + horizon_steps;
            let gt_first = |track: &crate::env::ReplayTrack, thr: f64| -> Option<usize> {
                (start..=horizon_end.min(track.end_step().saturating_sub(1)))
                    .find(|&k| track.state_at(k).map(|(s, _)| s > thr).unwrap_or(false))
            };
            let pred_first = |series: &super::VehicleSeries, thr: f64| -> Option<usize> {
                first_crossing(&series.samples.iter().map(|x| x.s).collect::<Vec<_>>(), thr)
            };
            let pred_order = order_of(pred_first(va, iv_a.0), pred_first(vb, iv_b.0));
            let gt_order = order_of(gt_first(track_a, iv_a.0), gt_first(track_b, iv_b.0));
            match (pred_order, gt_order) {
                (Some(p), Some(g)) => {
                    order.pairs += 1;
                    if p == g {
                        order.matches += 1;
                    }
                }
                _ => order.skipped += 1,
            }
        }
    }
    Ok(order)
}

/// Signed time-loss error of one prediction against one recording over a
/// window, for callers outside the replay loop.
pub fn time_loss_error(
    v_pred: &[f64],
    v_gt: &[f64],
    v_max: &[f64],
    dt: f64,
    window: usize,
) -> Result<f64> {
    let to = window.min(v_pred.len()).min(v_gt.len());
    Ok(time_loss(v_pred, v_max, dt, 0, to)? - time_loss(v_gt, v_max, dt, 0, to)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_loss_identities() {
        let n = 51;
        let vmax = vec![13.89; n];
        // Driving at the limit: zero loss.
        let v = vec![13.89; n];
        assert_eq!(time_loss(&v, &vmax, 0.2, 0, n).unwrap(), 0.0);
        // Half the limit over 10 s: loss 5.
        let v = vec![13.89 / 2.0; n];
        assert!((time_loss(&v, &vmax, 0.2, 0, n).unwrap() - 5.0).abs() < 1e-12);
        // Standing for 10 s: loss 10.
        let v = vec![0.0; n];
        assert!((time_loss(&v, &vmax, 0.2, 0, n).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn time_loss_is_additive_and_guards_inputs() {
        let n = 51;
        let vmax = vec![10.0; n];
        let v: Vec<f64> = (0..n).map(|k| 10.0 * (k as f64 / n as f64)).collect();
        let full = time_loss(&v, &vmax, 0.2, 0, n).unwrap();
        let a = time_loss(&v, &vmax, 0.2, 0, 26).unwrap();
        let b = time_loss(&v, &vmax, 0.2, 25, n).unwrap();
        assert!((full - (a + b)).abs() < 1e-12);
        assert!(full >= 0.0);
        let bad_vmax = vec![0.0; n];
        assert!(time_loss(&v, &bad_vmax, 0.2, 0, n).is_err());
    }

    fn synthetic_prediction(
        bias_mps: f64,
        n: usize,
    ) -> (u32, PredictionResult, BTreeMap<u64, Vec<f64>>) {
        // Ground truth: constant 10 m/s; prediction: 10 + bias.
        let dt = PREDICTION_DT;
        let samples: Vec<super::super::PredictedSample> = (0..=n)
            .map(|k| super::super::PredictedSample {
                t: k as f64 * dt,
                s: (10.0 + bias_mps) * k as f64 * dt,
                v: 10.0 + bias_mps,
                accel: 0.0,
                delta: 1,
            })
            .collect();
        let map = crate::map::bendplatz().unwrap();
        let pred = PredictionResult {
            dt,
            horizon: n as f64 * dt,
            series: vec![super::super::VehicleSeries {
                id: VehicleId(1),
                kind: crate::scenario::VehicleKind::Car,
                route: map.route_id("we").unwrap(),
                samples,
            }],
        };
        let gt: Vec<f64> = (0..=n).map(|k| 10.0 * k as f64 * dt).collect();
        let mut gt_map = BTreeMap::new();
        gt_map.insert(1, gt);
        (0, pred, gt_map)
    }

    #[test]
    fn self_comparison_is_identically_zero() {
        let (scene, pred, mut gt) = synthetic_prediction(0.0, 50);
        gt.insert(1, pred.series[0].samples.iter().map(|s| s.s).collect());
        let curve = distance_error(&[(scene, pred, gt)], ErrorAggregation::PerVehicle);
        assert_eq!(curve.offsets.len(), 50);
        assert!(curve.rmse.iter().all(|&e| e == 0.0));
        assert!(curve.mad.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn constant_velocity_bias_grows_linearly() {
        let input = synthetic_prediction(0.5, 50);
        let curve = distance_error(&[input], ErrorAggregation::PerVehicle);
        for (k, &off) in curve.offsets.iter().enumerate() {
            let expected = 0.5 * off;
            assert!(
                (curve.rmse[k] - expected).abs() < 1e-9,
                "rmse at {off}: {} vs {expected}",
                curve.rmse[k]
            );
            assert!((curve.mad[k] - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_offset_gives_flat_unit_curve() {
        let (scene, pred, mut gt) = synthetic_prediction(0.0, 50);
        let shifted: Vec<f64> = pred.series[0].samples.iter().map(|s| s.s - 1.0).collect();
        gt.insert(1, shifted);
        let curve = distance_error(&[(scene, pred, gt)], ErrorAggregation::Pooled);
        for k in 0..curve.offsets.len() {
            assert!((curve.rmse[k] - 1.0).abs() < 1e-12);
            assert!((curve.mad[k] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn crossing_order_stats_accuracy() {
        let mut s = CrossingOrderStats { pairs: 10, matches: 9, skipped: 2 };
        assert!((s.accuracy() - 0.9).abs() < 1e-12);
        s.pairs = 0;
        assert!(s.accuracy().is_nan());
    }
}
