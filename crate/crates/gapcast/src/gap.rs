//! Stage one: per-pair gap decisions, maneuver overrides, min-aggregation,
//! the critical-gap baseline and the supervised trainer.

use crate::error::{Error, Result};
use crate::map::{ConflictRelation, IntersectionMap};
use crate::mlp::{Activation, Adam, CyclicLr, GradientTape, TinyMlp, Workspace};
use crate::scenario::{gap_observation, GapObservation, Scenario, VehicleId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const GAP_LAYERS: [usize; 4] = [4, 16, 16, 1];

/// The gap-acceptance network plus its decision threshold.
#[derive(Debug, Clone)]
pub struct GapModel {
    pub net: TinyMlp,
    pub threshold: f64,
}

impl GapModel {
    pub fn new<R: Rng>(rng: &mut R) -> Result<Self> {
        let mut net = TinyMlp::new(&GAP_LAYERS, Activation::LeakyRelu, Activation::Sigmoid, rng)?;
        net.set_input_scales(&crate::scenario::gap_input_scales())?;
        Ok(Self { net, threshold: 0.5 })
    }

    pub fn from_net(net: TinyMlp) -> Result<Self> {
        if net.sizes() != GAP_LAYERS {
            return Err(Error::Gap(format!(
                "gap net must be {:?}, got {:?}",
                GAP_LAYERS,
                net.sizes()
            )));
        }
        Ok(Self { net, threshold: 0.5 })
    }

    /// Probability that the yielding vehicle accepts the gap.
    pub fn predict_pair(&self, obs: &GapObservation, ws: &mut Workspace) -> Result<f64> {
        if !obs.is_finite() {
            return Err(Error::Gap("non-finite gap observation".into()));
        }
        self.net.forward_scalar(&obs.to_input(), ws)
    }

    pub fn decide_pair(&self, obs: &GapObservation, ws: &mut Workspace) -> Result<u8> {
        Ok((self.predict_pair(obs, ws)? >= self.threshold) as u8)
    }
}

/// Where a per-pair decision came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionSource {
    Network,
    Override,
}

#[derive(Debug, Clone)]
pub struct PairTrace {
    pub prioritized: VehicleId,
    /// Network probability; also recorded when an override replaced it.
    pub probability: Option<f64>,
    pub source: DecisionSource,
    pub delta: u8,
}

#[derive(Debug, Clone)]
pub struct GapDecision {
    pub delta: u8,
    pub pairs: Vec<PairTrace>,
}

/// Gap decision of vehicle `i`: one network or override decision per
/// prioritized conflict partner, aggregated with the minimum. A vehicle with
/// no conflicting prioritized partner proceeds.
pub fn decide(
    map: &IntersectionMap,
    scenario: &Scenario,
    i: usize,
    model: &GapModel,
    ws: &mut Workspace,
) -> Result<GapDecision> {
    let me = &scenario.vehicles[i];
    let mut pairs = Vec::new();
    let mut delta = 1u8;
    for (j, other) in scenario.vehicles.iter().enumerate() {
        if j == i {
            continue;
        }
        let rel = map.conflict_partners(me.route, me.s, other.route, other.s)?;
        if rel != ConflictRelation::FirstYields {
            continue;
        }
        let obs = gap_observation(map, scenario, i, j)?;
        let (delta_ij, source, probability) = match scenario.maneuver.get(me.id, other.id) {
            Some(forced) => {
                let p = model.predict_pair(&obs, ws).ok();
                (forced, DecisionSource::Override, p)
            }
            None => {
                let p = model.predict_pair(&obs, ws)?;
                ((p >= model.threshold) as u8, DecisionSource::Network, Some(p))
            }
        };
        delta = delta.min(delta_ij);
        pairs.push(PairTrace { prioritized: other.id, probability, source, delta: delta_ij });
    }
    Ok(GapDecision { delta, pairs })
}

/// Critical-gap thresholds of the heuristic baseline.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CriticalGapParams {
    /// Temporal gap above which a crossing is accepted (s).
    pub t_crit_crossing: f64,
    /// Threshold for merging conflicts (s).
    pub t_crit_merging: f64,
}

impl Default for CriticalGapParams {
    fn default() -> Self {
        Self { t_crit_crossing: 6.0, t_crit_merging: 4.0 }
    }
}

/// Heuristic baseline: estimated arrival time of the prioritized vehicle at
/// its stop line under constant travel at the local speed limit, accepted
/// when it exceeds the critical gap for the conflict type.
pub fn critical_gap_baseline(
    map: &IntersectionMap,
    scenario: &Scenario,
    i: usize,
    j: usize,
    params: &CriticalGapParams,
) -> Result<u8> {
    let me = &scenario.vehicles[i];
    let other = &scenario.vehicles[j];
    let rel = map.conflict_partners(me.route, me.s, other.route, other.s)?;
    if rel != ConflictRelation::FirstYields {
        return Err(Error::Gap(format!(
            "vehicle {:?} does not yield to {:?}",
            me.id, other.id
        )));
    }
    let geom_j = map.geometry(other.route);
    let d_stop_j = geom_j.distance_to_stop(other.s)?;
    let v_max_j = geom_j.speed_limit_at(other.s);
    let t_crit = if map.is_merging_pair(me.route, other.route) {
        params.t_crit_merging
    } else {
        params.t_crit_crossing
    };
    Ok(baseline_on_observation(d_stop_j, v_max_j, t_crit))
}

/// The same rule on a bare observation row, for corpora without map context.
pub fn baseline_on_observation(d_stop_j: f64, v_max_j: f64, t_crit: f64) -> u8 {
    (d_stop_j / v_max_j > t_crit) as u8
}

/// One supervised training sample.
#[derive(Debug, Clone, Copy)]
pub struct GapLabel {
    pub observation: GapObservation,
    pub delta_gt: u8,
}

/// Per-input Gaussian noise applied during training, in physical units.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InputNoise {
    pub sigma_d_pga: f64,
    pub sigma_v_i: f64,
    pub sigma_d_stop_j: f64,
    pub sigma_v_j: f64,
}

impl Default for InputNoise {
    fn default() -> Self {
        Self { sigma_d_pga: 0.5, sigma_v_i: 0.1, sigma_d_stop_j: 2.0, sigma_v_j: 2.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: CyclicLr,
    /// None disables input noise.
    pub noise: Option<InputNoise>,
    pub seed: u64,
}

impl Default for GapTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 8192,
            lr: CyclicLr::default(),
            noise: Some(InputNoise::default()),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GapTrainReport {
    /// (epoch, held-out accuracy), sampled periodically and at the end.
    pub history: Vec<(usize, f64)>,
    pub final_train_accuracy: f64,
    pub final_val_accuracy: f64,
}

/// Fraction of labels the model classifies correctly (on clean inputs).
pub fn accuracy(model: &GapModel, labels: &[GapLabel]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Gap("accuracy of an empty label set".into()));
    }
    let mut ws = Workspace::default();
    let mut hits = 0usize;
    for l in labels {
        if model.decide_pair(&l.observation, &mut ws)? == l.delta_gt {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// Train the gap network with binary cross-entropy, an adaptive-moment
/// optimizer under the cyclic learning-rate schedule, and per-sample input
/// noise resampled every epoch.
pub fn train_gap(
    model: &mut GapModel,
    train: &[GapLabel],
    val: &[GapLabel],
    config: &GapTrainConfig,
) -> Result<GapTrainReport> {
    if train.len() < 2 {
        return Err(Error::Gap("need at least two training labels".into()));
    }
    let n_pos = train.iter().filter(|l| l.delta_gt == 1).count();
    if n_pos == 0 || n_pos == train.len() {
        return Err(Error::Gap("training labels contain a single class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::Gap(e.to_string()))?;
    let mut adam = Adam::new(&model.net);
    let mut ws = Workspace::default();
    let mut tape = GradientTape::for_net(&model.net);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();

    let eval_every = (config.epochs / 20).max(1);
    for epoch in 0..config.epochs {
        let lr = config.lr.at(epoch as u64);
        // Fisher-Yates with the epoch RNG keeps runs bit-reproducible.
        for k in (1..order.len()).rev() {
            let m = rng.random_range(0..=k);
            order.swap(k, m);
        }
        for chunk in order.chunks(config.batch_size) {
            tape.zero();
            for &idx in chunk {
                let l = &train[idx];
                let mut raw = l.observation;
                if let Some(n) = &config.noise {
                    raw.d_pga_i += n.sigma_d_pga * normal.sample(&mut rng);
                    raw.v_i += n.sigma_v_i * normal.sample(&mut rng);
                    raw.d_stop_j += n.sigma_d_stop_j * normal.sample(&mut rng);
                    raw.v_j += n.sigma_v_j * normal.sample(&mut rng);
                }
                let input = raw.to_input();
                let p = model.net.forward_scalar(&input, &mut ws)?;
                let y = l.delta_gt as f64;
                // d BCE / d p with p clamped away from the sigmoid rails;
                // together with the sigmoid derivative this is (p - y).
                let pc = p.clamp(1e-12, 1.0 - 1e-12);
                let upstream = (pc - y) / (pc * (1.0 - pc));
                model.net.backward_ws(&ws, &[upstream], &mut tape, true)?;
            }
            tape.scale(1.0 / chunk.len() as f64);
            adam.step(&mut model.net, &tape, lr)?;
        }
        if epoch % eval_every == 0 || epoch + 1 == config.epochs {
            let acc = if val.is_empty() { f64::NAN } else { accuracy(model, val)? };
            history.push((epoch, acc));
        }
    }
    Ok(GapTrainReport {
        history,
        final_train_accuracy: accuracy(model, train)?,
        final_val_accuracy: if val.is_empty() { f64::NAN } else { accuracy(model, val)? },
    })
}
