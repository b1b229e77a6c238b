//! Evaluation: one-step RMSE on true states, closed-loop rollout from an
//! initial window with scheduled disturbances as exogenous inputs,
//! cumulative RMSE over a horizon, a ridge-regression linear baseline, and
//! the ablation runner.
//!
//! Metrics are reported in normalized units (the units the model is trained
//! in); CSV headers say so.

use std::io::Write as IoWrite;

use rayon::prelude::*;

use crate::dataset::{Dataset, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::linalg::{solve_real, Matrix};
use crate::loss::integrate_state;
use crate::model::{
    GraphContext, ModelConfig, PidgeunModel, SnapshotWindow, OUTPUT_DIM, STATE_DIM,
};
use crate::sim::DisturbanceSchedule;
use crate::tensor::{Mode, Tape};
use crate::training::{train, Normalizer, TrainConfig};

/// Any state magnitude beyond this marks a rollout as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// A one-step predictor: physical rates of change from a physical extended
/// window (current step first). Implemented by the trained model, the linear
/// baseline, and test oracles.
pub trait RatePredictor {
    fn predict_rates(&self, window: &SnapshotWindow) -> Result<Vec<f64>>;
    fn input_steps(&self) -> usize;
}

/// The trained model behind the predictor interface: normalizes the window,
/// runs an inference forward pass, de-normalizes the predicted rates.
pub struct ModelPredictor<'a> {
    pub model: &'a PidgeunModel,
    pub ctx: &'a GraphContext,
    pub normalizer: &'a Normalizer,
}

impl RatePredictor for ModelPredictor<'_> {
    fn predict_rates(&self, window: &SnapshotWindow) -> Result<Vec<f64>> {
        let normalized = self.normalizer.normalize_window(window);
        let mut tape = Tape::new();
        let out = self
            .model
            .forward(&mut tape, &normalized, self.ctx, Mode::Eval, None)?;
        Ok(self.normalizer.denormalize_rate(out.rates.data()))
    }

    fn input_steps(&self) -> usize {
        self.model.config.input_steps
    }
}

/// One rolled-out trajectory: predicted measurable states aligned with the
/// reference steps (the first C steps are the given initial condition).
#[derive(Debug, Clone)]
pub struct Rollout {
    pub predicted: Vec<Vec<f64>>,
    pub diverged_at: Option<usize>,
}

/// Closed-loop prediction: the model consumes its own outputs; the
/// disturbance features (dP, dQ, γ) come from the schedule as known
/// exogenous inputs, and β is the static bus typing. Returns a partial
/// trajectory if a state leaves the divergence bound.
pub fn rollout(
    predictor: &dyn RatePredictor,
    record: &TrajectoryRecord,
    schedule: &DisturbanceSchedule,
    horizon: usize,
    dt: f64,
) -> Result<Rollout> {
    let c = predictor.input_steps();
    let n = record.n_buses;
    if horizon < 1 {
        return Err(Error::argument("horizon must be ≥ 1"));
    }
    if record.n_steps() < c {
        return Err(Error::argument(format!(
            "trajectory has {} steps, window needs {c}",
            record.n_steps()
        )));
    }

    // β per bus from the static feature of the first step.
    let betas: Vec<f64> = (0..n)
        .map(|bus| record.extended[0][bus * STATE_DIM + 9])
        .collect();

    // Extended predicted steps; seeded with the true initial window.
    let mut ext: Vec<Vec<f64>> = (0..c).map(|k| record.extended[k].clone()).collect();
    let mut predicted: Vec<Vec<f64>> = (0..c).map(|k| record.measurable(k)).collect();
    let mut diverged_at = None;

    let last = (c - 1 + horizon).min(record.n_steps() - 1);
    for k in (c - 1)..last {
        let steps: Vec<&[f64]> = (0..c).map(|back| ext[k - back].as_slice()).collect();
        let window = SnapshotWindow::from_steps(&steps, n)?;
        let rates = predictor.predict_rates(&window)?;
        let next = integrate_state(&predicted[k], &rates, dt)?;
        if next.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
            diverged_at = Some(k + 1);
            break;
        }
        let (dp, dq, gamma) = schedule.features_at(k + 1, n);
        let mut ext_next = Vec::with_capacity(n * STATE_DIM);
        for bus in 0..n {
            ext_next.extend_from_slice(&next[bus * OUTPUT_DIM..(bus + 1) * OUTPUT_DIM]);
            ext_next.push(dp[bus]);
            ext_next.push(dq[bus]);
            ext_next.push(gamma);
            ext_next.push(betas[bus]);
        }
        predicted.push(next);
        ext.push(ext_next);
    }

    Ok(Rollout {
        predicted,
        diverged_at,
    })
}

/// One-step RMSE with teacher forcing: predictions from true windows at
/// every valid step, error in normalized rate units,
/// `E1 = sqrt(Σ_k ‖Ẋ̃ − Ẋ‖_F² / (T·N))`.
pub fn one_step_rmse(
    predictor: &dyn RatePredictor,
    record: &TrajectoryRecord,
    dt: f64,
    normalizer: &Normalizer,
) -> Result<f64> {
    let c = predictor.input_steps();
    let n = record.n_buses;
    if record.n_steps() < c + 1 {
        return Err(Error::argument("trajectory shorter than one window"));
    }
    let mut total = 0.0;
    let mut steps = 0usize;
    for k in (c - 1)..record.n_steps() - 1 {
        let window = record.window(k, c)?;
        let pred = predictor.predict_rates(&window)?;
        let pred_n = normalizer.normalize_rate(&pred);
        let true_n = normalizer.normalize_rate(&record.rate(k, dt));
        for (a, b) in pred_n.iter().zip(&true_n) {
            let d = a - b;
            total += d * d;
        }
        steps += 1;
    }
    Ok((total / (steps as f64 * n as f64)).sqrt())
}

/// Cumulative RMSE of a rollout against the reference over the first
/// `horizon` predicted steps (the given initial window is excluded), in
/// normalized state units over the 6 measurable features:
/// `E2 = sqrt(Σ_k ‖X̃ − X‖_F² / (T·N))`.
pub fn cumulative_rmse(
    roll: &Rollout,
    record: &TrajectoryRecord,
    c: usize,
    horizon: usize,
    normalizer: &Normalizer,
) -> f64 {
    let n = record.n_buses;
    let last = (c + horizon).min(roll.predicted.len());
    let mut total = 0.0;
    let mut steps = 0usize;
    for k in c..last {
        let pred_n = normalizer.normalize_state6(&roll.predicted[k]);
        let true_n = normalizer.normalize_state6(&record.measurable(k));
        for (a, b) in pred_n.iter().zip(&true_n) {
            let d = a - b;
            total += d * d;
        }
        steps += 1;
    }
    if steps == 0 {
        return f64::NAN;
    }
    (total / (steps as f64 * n as f64)).sqrt()
}

/// One horizon's cumulative error (flagged when the rollout diverged before
/// completing the horizon).
#[derive(Debug, Clone, Copy)]
pub struct HorizonError {
    pub horizon: usize,
    pub c_rmse: f64,
    pub diverged: bool,
}

/// Aggregated metrics of one predictor over a set of trajectories.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub one_step_rmse: f64,
    pub horizons: Vec<HorizonError>,
}

/// Evaluates a predictor over the listed trajectories: aggregate one-step
/// RMSE plus per-horizon cumulative RMSE of full rollouts, merged
/// deterministically in trajectory order.
pub fn evaluate(
    predictor: &(dyn RatePredictor + Sync),
    dataset: &Dataset,
    indices: &[usize],
    horizons: &[usize],
    normalizer: &Normalizer,
    parallel: bool,
) -> Result<MetricReport> {
    if indices.is_empty() {
        return Err(Error::argument("no trajectories to evaluate"));
    }
    let c = predictor.input_steps();
    let max_h = horizons.iter().copied().max().unwrap_or(1);

    struct PerTrajectory {
        sq_one_step: f64,
        one_step_terms: usize,
        sq_by_horizon: Vec<(f64, usize, bool)>,
    }

    let eval_one = |&idx: &usize| -> Result<PerTrajectory> {
        let rec = dataset
            .records
            .get(idx)
            .ok_or_else(|| Error::argument(format!("no trajectory {idx}")))?;
        let e1 = one_step_rmse(predictor, rec, dataset.dt, normalizer)?;
        let one_step_terms = (rec.n_steps() - c) * rec.n_buses;
        let sq_one_step = e1 * e1 * one_step_terms as f64;

        let roll = rollout(predictor, rec, &rec.schedule, max_h, dataset.dt)?;
        let sq_by_horizon = horizons
            .iter()
            .map(|&h| {
                let e2 = cumulative_rmse(&roll, rec, c, h, normalizer);
                let steps = (c + h).min(roll.predicted.len()).saturating_sub(c);
                let diverged = roll
                    .diverged_at
                    .map(|at| at < c + h)
                    .unwrap_or(false);
                (e2 * e2 * (steps * rec.n_buses) as f64, steps * rec.n_buses, diverged)
            })
            .collect();
        Ok(PerTrajectory {
            sq_one_step,
            one_step_terms,
            sq_by_horizon,
        })
    };

    let per: Result<Vec<PerTrajectory>> = if parallel {
        indices.par_iter().map(eval_one).collect()
    } else {
        indices.iter().map(eval_one).collect()
    };
    let per = per?;

    let mut sq1 = 0.0;
    let mut n1 = 0usize;
    let mut agg: Vec<(f64, usize, bool)> = vec![(0.0, 0, false); horizons.len()];
    for t in &per {
        sq1 += t.sq_one_step;
        n1 += t.one_step_terms;
        for (slot, &(sq, n, div)) in t.sq_by_horizon.iter().enumerate() {
            agg[slot].0 += sq;
            agg[slot].1 += n;
            agg[slot].2 |= div;
        }
    }
    Ok(MetricReport {
        one_step_rmse: (sq1 / n1 as f64).sqrt(),
        horizons: horizons
            .iter()
            .zip(agg)
            .map(|(&h, (sq, n, diverged))| HorizonError {
                horizon: h,
                c_rmse: if n > 0 { (sq / n as f64).sqrt() } else { f64::NAN },
                diverged,
            })
            .collect(),
    })
}

/// Ridge-regression one-step map `Ẋ = W·vec(window) + b` fitted in
/// normalized units; the linear comparator for the learned model.
#[derive(Debug, Clone)]
pub struct LinearBaseline {
    /// `[(N·10·C + 1) × (N·6)]`, bias row last.
    weights: Matrix,
    c: usize,
    normalizer: Normalizer,
}

pub const RIDGE_LAMBDA: f64 = 1e-8;

/// Least squares over every training window with Tikhonov damping λ = 1e-8
/// (rank deficiency is absorbed by the ridge, not an error).
pub fn linear_baseline_fit(
    dataset: &Dataset,
    train_indices: &[usize],
    c: usize,
) -> Result<LinearBaseline> {
    if train_indices.is_empty() {
        return Err(Error::argument("no training data for the baseline"));
    }
    let normalizer = Normalizer::fit(dataset, train_indices)?;
    let n = dataset.n_buses;
    let d_in = n * STATE_DIM * c + 1;
    let d_out = n * OUTPUT_DIM;

    // Normal equations: (XᵀX + λI)·W = XᵀY, accumulated streaming.
    let mut xtx = Matrix::zeros(d_in, d_in);
    let mut xty = Matrix::zeros(d_in, d_out);
    for &idx in train_indices {
        let rec = &dataset.records[idx];
        for k in (c - 1)..rec.n_steps() - 1 {
            let window = normalizer.normalize_window(&rec.window(k, c)?);
            let mut x = window.as_slice().to_vec();
            x.push(1.0);
            let y = normalizer.normalize_rate(&rec.rate(k, dataset.dt));
            for i in 0..d_in {
                let xi = x[i];
                if xi == 0.0 {
                    continue;
                }
                let row = xtx.row_mut(i);
                for (j, xj) in x.iter().enumerate() {
                    row[j] += xi * xj;
                }
                let yrow = xty.row_mut(i);
                for (j, yj) in y.iter().enumerate() {
                    yrow[j] += xi * yj;
                }
            }
        }
    }
    for i in 0..d_in {
        xtx[(i, i)] += RIDGE_LAMBDA;
    }

    // Solve column by column.
    let mut weights = Matrix::zeros(d_in, d_out);
    for j in 0..d_out {
        let mut a = xtx.clone();
        let mut b: Vec<f64> = (0..d_in).map(|i| xty[(i, j)]).collect();
        solve_real(&mut a, &mut b)?;
        for i in 0..d_in {
            weights[(i, j)] = b[i];
        }
    }
    Ok(LinearBaseline {
        weights,
        c,
        normalizer,
    })
}

impl LinearBaseline {
    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }
}

impl RatePredictor for LinearBaseline {
    fn predict_rates(&self, window: &SnapshotWindow) -> Result<Vec<f64>> {
        let normalized = self.normalizer.normalize_window(window);
        let mut x = normalized.as_slice().to_vec();
        x.push(1.0);
        if x.len() != self.weights.rows {
            return Err(Error::argument("window size does not match baseline fit"));
        }
        let d_out = self.weights.cols;
        let mut y = vec![0.0; d_out];
        for (i, xi) in x.iter().enumerate() {
            if *xi == 0.0 {
                continue;
            }
            let row = self.weights.row(i);
            for j in 0..d_out {
                y[j] += xi * row[j];
            }
        }
        Ok(self.normalizer.denormalize_rate(&y))
    }

    fn input_steps(&self) -> usize {
        self.c
    }
}

/// One ablation table row request: a labelled model/loss configuration.
#[derive(Debug, Clone)]
pub struct AblationEntry {
    pub label: String,
    pub model: ModelConfig,
    pub nu: f64,
}

/// One completed ablation row.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub entry: AblationEntry,
    pub report: MetricReport,
    pub final_l1: f64,
    pub final_l2: f64,
}

/// Trains and evaluates each configuration on the same dataset and seed,
/// one row per entry.
pub fn ablation_run(
    entries: &[AblationEntry],
    dataset: &Dataset,
    ctx: &GraphContext,
    base_train: &TrainConfig,
    eval_indices: &[usize],
    horizons: &[usize],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(entries.len());
    for entry in entries {
        let mut config = base_train.clone();
        config.nu = entry.nu;
        let mut model = PidgeunModel::new(entry.model.clone(), config.seed)?;
        let out = train(&mut model, dataset, ctx, &config, None)?;
        let predictor = ModelPredictor {
            model: &model,
            ctx,
            normalizer: &out.normalizer,
        };
        let report = evaluate(&predictor, dataset, eval_indices, horizons, &out.normalizer, false)?;
        let last = out.history.last().expect("training ran");
        rows.push(AblationRow {
            entry: entry.clone(),
            report,
            final_l1: last.l1,
            final_l2: last.l2,
        });
    }
    Ok(rows)
}

/// Metric CSV: one row per horizon plus the one-step error, normalized units.
pub fn write_metrics_csv(report: &MetricReport, out: &mut impl IoWrite) -> Result<()> {
    writeln!(out, "metric,value,diverged,units")?;
    writeln!(
        out,
        "one_step_rmse,{},false,normalized",
        report.one_step_rmse
    )?;
    for h in &report.horizons {
        writeln!(
            out,
            "c_rmse_{},{},{},normalized",
            h.horizon, h.c_rmse, h.diverged
        )?;
    }
    Ok(())
}

/// Per-bus rollout trace CSV: step, bus, feature, true, predicted
/// (physical units).
pub fn write_trace_csv(
    roll: &Rollout,
    record: &TrajectoryRecord,
    out: &mut impl IoWrite,
) -> Result<()> {
    const FEATURES: [&str; 6] = ["p", "q", "re_v", "im_v", "re_i", "im_i"];
    writeln!(out, "step,bus,feature,true,predicted")?;
    for (k, pred) in roll.predicted.iter().enumerate() {
        let truth = record.measurable(k);
        for bus in 0..record.n_buses {
            for (f, fname) in FEATURES.iter().enumerate() {
                writeln!(
                    out,
                    "{k},{bus},{fname},{},{}",
                    truth[bus * OUTPUT_DIM + f],
                    pred[bus * OUTPUT_DIM + f]
                )?;
            }
        }
    }
    Ok(())
}

/// Ablation table CSV mirroring the configuration columns then the metrics.
pub fn write_ablation_csv(rows: &[AblationRow], out: &mut impl IoWrite) -> Result<()> {
    write!(out, "model,n_gal,n_gcl,pi_loss,cheb_order,hidden_size,input_steps,one_step_rmse")?;
    if let Some(first) = rows.first() {
        for h in &first.report.horizons {
            write!(out, ",c_rmse_{}", h.horizon)?;
            write!(out, ",diverged_{}", h.horizon)?;
        }
    }
    writeln!(out, ",final_l1,final_l2")?;
    for row in rows {
        let m = &row.entry.model;
        write!(
            out,
            "{},{},{},{},{},{},{},{}",
            row.entry.label,
            m.n_gal,
            m.n_gcl,
            row.entry.nu > 0.0,
            m.cheb_order,
            m.hidden_size,
            m.input_steps,
            row.report.one_step_rmse
        )?;
        for h in &row.report.horizons {
            write!(out, ",{},{}", h.c_rmse, h.diverged)?;
        }
        writeln!(out, ",{},{}", row.final_l1, row.final_l2)?;
    }
    Ok(())
}
