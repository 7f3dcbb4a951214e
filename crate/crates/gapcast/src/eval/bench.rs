//! Single-threaded runtime benchmark of the prediction engine over random
//! scenes, with a least-squares quadratic fit over the vehicle count.

use super::predict_ws;
use crate::driver::AccelModel;
use crate::env::{sample_scene, EnvConfig};
use crate::error::Result;
use crate::gap::GapModel;
use crate::map::IntersectionMap;
use crate::mlp::Workspace;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct BenchResult {
    /// (vehicle count, mean ms, std ms) per benchmarked count.
    pub rows: Vec<(usize, f64, f64)>,
    /// 5%-trimmed mean per count; input of the quadratic fit, robust
    /// against descheduling outliers.
    pub trimmed: Vec<f64>,
    /// Least-squares a n² + b n + c over the trimmed means.
    pub fit: (f64, f64, f64),
    pub r_squared: f64,
    pub trials: usize,
    pub horizon: f64,
}

impl BenchResult {
    pub fn mean_at(&self, n: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.0 == n).map(|r| r.1)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("n_vehicles,mean_ms,trimmed_ms,std_ms\n");
        for ((n, mean, std), trimmed) in self.rows.iter().zip(&self.trimmed) {
            out.push_str(&format!("{n},{mean},{trimmed},{std}\n"));
        }
        out
    }
}

/// Time `predict` over pre-sampled random scenes, one vehicle count at a
/// time, on the calling thread only. Scene sampling and a warm-up phase are
/// excluded from the timed section.
pub fn runtime_bench(
    map: &IntersectionMap,
    gap_model: &GapModel,
    accel_model: &AccelModel,
    counts: &[usize],
    trials: usize,
    horizon: f64,
    seed: u64,
) -> Result<BenchResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let env_cfg = EnvConfig::default();
    let mut ws = Workspace::default();
    let mut rows = Vec::with_capacity(counts.len());
    let mut trimmed_means = Vec::with_capacity(counts.len());
    // Global warm-up: caches, branch predictors and clock ramp-up settle
    // before the first measured count.
    if let Some(&n0) = counts.last() {
        for _ in 0..50 {
            let scene = sample_scene(map, gap_model, n0, &mut rng, &env_cfg)?;
            let out = predict_ws(map, &scene, gap_model, accel_model, horizon, &mut ws)?;
            std::hint::black_box(&out);
        }
    }
    for &n in counts {
        let scenes: Vec<_> = (0..trials)
            .map(|_| sample_scene(map, gap_model, n, &mut rng, &env_cfg))
            .collect::<Result<_>>()?;
        let mut times_ms = Vec::with_capacity(trials);
        for scene in &scenes {
            let t0 = Instant::now();
            let out = predict_ws(map, scene, gap_model, accel_model, horizon, &mut ws)?;
            let dt = t0.elapsed();
            // Keep the result alive so the rollout cannot be optimized out.
            std::hint::black_box(&out);
            times_ms.push(dt.as_secs_f64() * 1e3);
        }
        let mean = times_ms.iter().sum::<f64>() / times_ms.len() as f64;
        let var = times_ms.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>()
            / times_ms.len() as f64;
        times_ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let trim = times_ms.len() / 20;
        let core = &times_ms[trim..times_ms.len() - trim];
        let trimmed = core.iter().sum::<f64>() / core.len() as f64;
        rows.push((n, mean, var.sqrt()));
        trimmed_means.push(trimmed);
    }
    let fit_rows: Vec<(usize, f64, f64)> = rows
        .iter()
        .zip(&trimmed_means)
        .map(|(&(n, _, std), &t)| (n, t, std))
        .collect();
    let (fit, r_squared) = quadratic_fit(&fit_rows);
    Ok(BenchResult { rows, trimmed: trimmed_means, fit, r_squared, trials, horizon })
}

/// Least-squares fit of mean = a n² + b n + c via the normal equations.
fn quadratic_fit(rows: &[(usize, f64, f64)]) -> ((f64, f64, f64), f64) {
    let m = rows.len();
    if m < 3 {
        return ((0.0, 0.0, rows.first().map(|r| r.1).unwrap_or(0.0)), f64::NAN);
    }
    // Build X^T X and X^T y for columns [n², n, 1].
    let mut a = [[0.0f64; 3]; 3];
    let mut b = [0.0f64; 3];
    for &(n, y, _) in rows {
        let x = [(n * n) as f64, n as f64, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] += x[i] * x[j];
            }
            b[i] += x[i] * y;
        }
    }
    let det3 = |m: &[[f64; 3]; 3]| -> f64 {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det3(&a);
    let mut coef = [0.0f64; 3];
    for k in 0..3 {
        let mut ak = a;
        for i in 0..3 {
            ak[i][k] = b[i];
        }
        coef[k] = det3(&ak) / d;
    }
    let mean_y = rows.iter().map(|r| r.1).sum::<f64>() / m as f64;
    let ss_tot: f64 = rows.iter().map(|r| (r.1 - mean_y).powi(2)).sum();
    let ss_res: f64 = rows
        .iter()
        .map(|&(n, y, _)| {
            let yhat = coef[0] * (n * n) as f64 + coef[1] * n as f64 + coef[2];
            (y - yhat).powi(2)
        })
        .sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { f64::NAN };
    ((coef[0], coef[1], coef[2]), r2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_fit_recovers_exact_coefficients() {
        let rows: Vec<(usize, f64, f64)> = (2..=15)
            .map(|n| (n, 0.01 * (n * n) as f64 + 0.05 * n as f64 + 0.3, 0.0))
            .collect();
        let ((a, b, c), r2) = quadratic_fit(&rows);
        assert!((a - 0.01).abs() < 1e-9);
        assert!((b - 0.05).abs() < 1e-9);
        assert!((c - 0.3).abs() < 1e-9);
        assert!(r2 > 0.999999);
    }

    #[test]
    fn tiny_bench_run_produces_rows() {
        use crate::driver::IdmParams;
        use crate::mlp::{Activation, TinyMlp};
        let map = crate::map::bendplatz().unwrap();
        let gap = crate::gap::GapModel::from_net(
            TinyMlp::zeros(&crate::gap::GAP_LAYERS, Activation::LeakyRelu, Activation::Sigmoid)
                .unwrap(),
        )
        .unwrap();
        let accel = AccelModel::Idm(IdmParams::default());
        let out = runtime_bench(&map, &gap, &accel, &[1, 2, 3], 5, 2.0, 0).unwrap();
        assert_eq!(out.rows.len(), 3);
        assert!(out.rows.iter().all(|r| r.1 > 0.0));
    }
}
