//! Optimization loop, loss, per-outcome R² metrics, checkpoint retention,
//! and the ablation harness.
//!
//! Training is bit-deterministic for a given (seed, dataset, config):
//! batches fan out across worker threads but per-sample gradients are
//! summed in sample-index order, so the result does not depend on the
//! worker count.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SplitSpec;
use crate::error::{Error, Result};
use crate::model::{
    extract_grads, forward, forward_on_tape, init_params, Checkpoint, ForwardOptions, ModelConfig,
    ModelParams, Sample,
};
use crate::Tensor;

// ── Config and metrics ──────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 128,
            batch_size: 32,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Usage("epochs must be at least 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Usage("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Usage("batch_size and eval_every must be positive".into()));
        }
        Ok(())
    }
}

/// Coefficient of determination `1 - SS_res / SS_tot`. At most 1; negative
/// for predictors worse than the target mean.
pub fn r2(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(Error::Shape {
            op: "r2",
            detail: format!("{} predictions vs {} targets", preds.len(), targets.len()),
        });
    }
    if targets.len() < 2 {
        return Err(Error::Usage(format!("r2 needs at least 2 points, got {}", targets.len())));
    }
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let ss_tot: f64 = targets.iter().map(|&t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedMetric("targets are constant, R² undefined".into()));
    }
    let ss_res: f64 = preds.iter().zip(targets).map(|(&p, &t)| (p - t) * (p - t)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Per-outcome R² plus mean and (population) standard deviation across
/// outcomes, for one split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub per_outcome: Vec<(String, f64)>,
    pub mean: f64,
    pub std: f64,
}

impl MetricsReport {
    pub fn from_scores(split: &str, scores: Vec<(String, f64)>) -> Self {
        let n = scores.len() as f64;
        let mean = scores.iter().map(|(_, v)| v).sum::<f64>() / n;
        let var = scores.iter().map(|(_, v)| (v - mean) * (v - mean)).sum::<f64>() / n;
        MetricsReport { split: split.into(), per_outcome: scores, mean, std: var.sqrt() }
    }
}

// ── Adam ────────────────────────────────────────────────────────────────

/// First/second-moment state per named parameter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

/// One Adam update with bias correction, followed by decoupled weight
/// decay when enabled. Zero gradients leave parameters unchanged (modulo
/// the decay term).
pub fn adam_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    cfg: &TrainConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    params.visit_mut(&mut |name, tensor: &mut Tensor| {
        let g = grads.get(&name).expect("gradient for every parameter");
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name).or_insert_with(|| vec![0.0; g.len()]);
        let mut data = tensor.data().to_vec();
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
            if cfg.weight_decay > 0.0 {
                data[i] -= cfg.learning_rate * cfg.weight_decay * data[i];
            }
        }
        *tensor = Tensor::new(tensor.shape().to_vec(), data).expect("same-shape update");
    });
}

// ── Training loop ───────────────────────────────────────────────────────

/// One evaluation record of the serialized history (JSON lines).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: MetricsReport,
}

pub struct TrainResult {
    /// Parameters with the best mean validation R².
    pub best: Checkpoint,
    pub best_epoch: usize,
    /// Parameters after the final epoch.
    pub last: Checkpoint,
    pub history: Vec<EvalRecord>,
    pub test: MetricsReport,
}

fn select_targets(sample: &Sample, outcome: Option<usize>) -> Vec<f64> {
    match outcome {
        Some(i) => vec![sample.targets[i]],
        None => sample.targets.clone(),
    }
}

fn sample_loss_and_grads(
    sample: &Sample,
    config: &ModelConfig,
    params: &ModelParams,
    opts: &ForwardOptions,
    outcome: Option<usize>,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let mut tf = forward_on_tape(sample, config, params, opts)?;
    let targets = select_targets(sample, outcome);
    let t = tf.tape.constant(Tensor::matrix(1, targets.len(), targets)?);
    let loss = tf.tape.mse(tf.prediction, t)?;
    tf.tape.backward(loss)?;
    let loss_val = tf.tape.data(loss)[0];
    Ok((loss_val, extract_grads(&tf)))
}

/// Predictions for a set of samples; `[n_samples x n_outcomes]` row-major.
pub fn predict_all(
    samples: &[&Sample],
    config: &ModelConfig,
    params: &ModelParams,
    opts: &ForwardOptions,
) -> Result<Vec<Vec<f64>>> {
    samples
        .par_iter()
        .map(|s| forward(s, config, params, opts).map(|(p, _)| p))
        .collect()
}

/// Per-outcome R² over a split.
pub fn evaluate(
    split_name: &str,
    samples: &[&Sample],
    outcome_names: &[String],
    config: &ModelConfig,
    params: &ModelParams,
    opts: &ForwardOptions,
    outcome: Option<usize>,
) -> Result<MetricsReport> {
    let preds = predict_all(samples, config, params, opts)?;
    let names: Vec<String> = match outcome {
        Some(i) => vec![outcome_names[i].clone()],
        None => outcome_names.to_vec(),
    };
    let mut scores = Vec::with_capacity(names.len());
    for (j, name) in names.iter().enumerate() {
        let p: Vec<f64> = preds.iter().map(|row| row[j]).collect();
        let t: Vec<f64> = samples.iter().map(|s| select_targets(s, outcome)[j]).collect();
        scores.push((name.clone(), r2(&p, &t)?));
    }
    Ok(MetricsReport::from_scores(split_name, scores))
}

/// Everything `train` needs beyond the sample set.
pub struct TrainSetup<'a> {
    pub samples: &'a [Sample],
    pub split: &'a SplitSpec,
    pub outcome_names: Vec<String>,
    /// Train a single-outcome model on this outcome index.
    pub outcome: Option<usize>,
    pub opts: ForwardOptions,
}

fn bucket<'a>(samples: &'a [Sample], ids: &[String]) -> Vec<&'a Sample> {
    ids.iter()
        .filter_map(|id| samples.iter().find(|s| &s.id == id))
        .collect()
}

/// Full optimization run: mini-batch Adam on the MSE loss, periodic
/// validation, best-validation checkpoint retained, final test metrics
/// computed with the best parameters.
pub fn train(
    setup: &TrainSetup,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<TrainResult> {
    train_config.validate()?;
    let mut config = model_config.clone();
    if setup.outcome.is_some() {
        config.n_outcomes = 1;
    }
    config.finalize()?;

    let train_samples = bucket(setup.samples, &setup.split.train);
    let val_samples = bucket(setup.samples, &setup.split.val);
    let test_samples = bucket(setup.samples, &setup.split.test);
    if train_samples.is_empty() {
        return Err(Error::Usage("empty train split".into()));
    }

    let mut params = init_params(&config);
    let mut adam = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Checkpoint)> = None;

    for epoch in 1..=train_config.epochs {
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(train_config.batch_size).enumerate() {
            // Parallel per-sample tapes; deterministic accumulation in
            // batch order afterwards.
            let results: Vec<Result<(f64, BTreeMap<String, Vec<f64>>)>> = batch
                .par_iter()
                .map(|&i| {
                    sample_loss_and_grads(train_samples[i], &config, &params, &setup.opts, setup.outcome)
                })
                .collect();

            let mut grad_sum: Option<BTreeMap<String, Vec<f64>>> = None;
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, grads) = r.map_err(|e| annotate(e, epoch, batch_idx))?;
                batch_loss += loss;
                match &mut grad_sum {
                    None => grad_sum = Some(grads),
                    Some(acc) => {
                        for (name, g) in grads {
                            let a = acc.get_mut(&name).expect("aligned gradient maps");
                            for (ai, gi) in a.iter_mut().zip(g) {
                                *ai += gi;
                            }
                        }
                    }
                }
            }
            let mut grads = grad_sum.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            for g in grads.values_mut() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
            if !grads.values().flatten().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    op: "gradient accumulation",
                    context: format!(" (epoch {epoch}, batch {batch_idx})"),
                });
            }
            adam_step(&mut params, &grads, &mut adam, train_config);
            epoch_loss += batch_loss;
        }
        epoch_loss /= train_samples.len() as f64;

        if epoch % train_config.eval_every == 0 || epoch == train_config.epochs {
            let val = evaluate(
                "val",
                &val_samples,
                &setup.outcome_names,
                &config,
                &params,
                &setup.opts,
                setup.outcome,
            )?;
            let is_better = best.as_ref().is_none_or(|(b, _, _)| val.mean > *b);
            if is_better {
                best = Some((val.mean, epoch, Checkpoint::new(&config, &params)));
            }
            history.push(EvalRecord { epoch, train_loss: epoch_loss, val });
        }
    }

    let (_, best_epoch, best_ckpt) = best.expect("at least one evaluation");
    let last = Checkpoint::new(&config, &params);
    let best_params = best_ckpt.into_params()?;
    let test = evaluate(
        "test",
        &test_samples,
        &setup.outcome_names,
        &config,
        &best_params,
        &setup.opts,
        setup.outcome,
    )?;
    Ok(TrainResult { best: best_ckpt, best_epoch, last, history, test })
}

fn annotate(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { op, .. } => Error::NonFinite {
            op,
            context: format!(" (epoch {epoch}, batch {batch})"),
        },
        other => other,
    }
}

// ── Ablation harness ────────────────────────────────────────────────────

/// One experimental setting of the comparison table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationRow {
    GcgvtA,
    GcgvtG,
    GcgvtL,
    Vit,
    /// GCGVT-G with all image inputs zeroed.
    GeoOnly,
    /// GCGVT-G restricted to the named category's geo values.
    GeoRestricted(String),
}

impl AblationRow {
    pub fn label(&self) -> String {
        match self {
            AblationRow::GcgvtA => "gcgvt_a".into(),
            AblationRow::GcgvtG => "gcgvt_g".into(),
            AblationRow::GcgvtL => "gcgvt_l".into(),
            AblationRow::Vit => "vit".into(),
            AblationRow::GeoOnly => "geo_only".into(),
            AblationRow::GeoRestricted(cat) => format!("geo_restricted_{cat}"),
        }
    }

    pub fn all(first_category: &str) -> Vec<AblationRow> {
        vec![
            AblationRow::GcgvtA,
            AblationRow::GcgvtG,
            AblationRow::GcgvtL,
            AblationRow::Vit,
            AblationRow::GeoOnly,
            AblationRow::GeoRestricted(first_category.into()),
        ]
    }

    pub fn configure(&self, base: &ModelConfig) -> (ModelConfig, ForwardOptions) {
        use crate::model::Variant;
        let mut cfg = base.clone();
        let mut opts = ForwardOptions::default();
        match self {
            AblationRow::GcgvtA => cfg.variant = Variant::A,
            AblationRow::GcgvtG => cfg.variant = Variant::G,
            AblationRow::GcgvtL => cfg.variant = Variant::L,
            AblationRow::Vit => cfg.variant = Variant::Vit,
            AblationRow::GeoOnly => {
                cfg.variant = Variant::G;
                opts.zero_image = true;
            }
            AblationRow::GeoRestricted(cat) => {
                cfg.variant = Variant::G;
                opts.restrict_categories = Some(vec![cat.clone()]);
            }
        }
        cfg.finalize().expect("row config");
        (cfg, opts)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RowResult {
    pub row: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub outcome: String,
    pub rows: Vec<RowResult>,
}

impl ComparisonTable {
    pub fn row(&self, label: &str) -> Option<&RowResult> {
        self.rows.iter().find(|r| r.row == label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,outcome,mean_r2,std_r2,per_seed\n");
        for r in &self.rows {
            let seeds: Vec<String> = r.per_seed.iter().map(|v| format!("{v:.4}")).collect();
            out.push_str(&format!(
                "{},{},{:.4},{:.4},{}\n",
                r.row,
                self.outcome,
                r.mean,
                r.std,
                seeds.join(";")
            ));
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("| setting | test R² ({}) |\n|---|---|\n", self.outcome);
        for r in &self.rows {
            out.push_str(&format!("| {} | {:.2} ± {:.2} |\n", r.row, r.mean, r.std));
        }
        out
    }
}

/// Trains each requested setting over the given seeds on one outcome and
/// tabulates mean ± std of the test R².
pub fn ablation_suite(
    samples: &[Sample],
    split: &SplitSpec,
    outcome_names: &[String],
    outcome_index: usize,
    base_config: &ModelConfig,
    train_config: &TrainConfig,
    rows: &[AblationRow],
    seeds: &[u64],
) -> Result<ComparisonTable> {
    let mut results = Vec::with_capacity(rows.len());
    for row in rows {
        let (mut cfg, opts) = row.configure(base_config);
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            cfg.seed = seed;
            let mut tc = train_config.clone();
            tc.seed = seed;
            let setup = TrainSetup {
                samples,
                split,
                outcome_names: outcome_names.to_vec(),
                outcome: Some(outcome_index),
                opts: opts.clone(),
            };
            let result = train(&setup, &cfg, &tc)?;
            per_seed.push(result.test.per_outcome[0].1);
        }
        let n = per_seed.len() as f64;
        let mean = per_seed.iter().sum::<f64>() / n;
        let var = per_seed.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        results.push(RowResult { row: row.label(), per_seed, mean, std: var.sqrt() });
    }
    Ok(ComparisonTable { outcome: outcome_names[outcome_index].clone(), rows: results })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r2_perfect_predictions() {
        let t = [3.0, 7.0, 1.0, 9.0];
        assert_eq!(r2(&t, &t).unwrap(), 1.0);
    }

    #[test]
    fn r2_mean_predictor_is_zero() {
        let t = [2.0, 4.0, 6.0];
        let p = [4.0, 4.0, 4.0];
        assert!(r2(&p, &t).unwrap().abs() < 1e-15);
    }

    #[test]
    fn r2_adversarial_predictor_is_negative_and_matches_direct_formula() {
        let mut seed = 77u64;
        let mut rnd = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64) / ((1u64 << 53) as f64) * 10.0
        };
        for _ in 0..20 {
            let t: Vec<f64> = (0..16).map(|_| rnd()).collect();
            let p: Vec<f64> = (0..16).map(|_| rnd()).collect();
            let got = r2(&p, &t).unwrap();
            // Direct formula, evaluated independently.
            let mean = t.iter().sum::<f64>() / t.len() as f64;
            let ss_tot: f64 = t.iter().map(|&v| (v - mean).powi(2)).sum();
            let ss_res: f64 = p.iter().zip(&t).map(|(&a, &b)| (a - b).powi(2)).sum();
            let want = 1.0 - ss_res / ss_tot;
            assert!((got - want).abs() < 1e-12);
            assert!(got <= 1.0);
        }
        // Anti-correlated predictor is worse than the mean.
        let t = [1.0, 2.0, 3.0, 4.0];
        let p = [4.0, 3.0, 2.0, 1.0];
        assert!(r2(&p, &t).unwrap() < 0.0);
    }

    #[test]
    fn r2_is_shift_invariant_and_rejects_constant_targets() {
        let t = [1.0, 2.0, 3.0];
        let p = [1.1, 2.2, 2.9];
        let base = r2(&p, &t).unwrap();
        let t2: Vec<f64> = t.iter().map(|v| v + 10.0).collect();
        let p2: Vec<f64> = p.iter().map(|v| v + 10.0).collect();
        assert!((r2(&p2, &t2).unwrap() - base).abs() < 1e-12);
        assert!(matches!(r2(&[1.0, 2.0], &[5.0, 5.0]), Err(Error::UndefinedMetric(_))));
    }

    fn tiny_quadratic_setup() -> (ModelParams, BTreeMap<String, Vec<f64>>) {
        // A single-parameter stand-in is enough to check the update rule:
        // use the head bias of a tiny config.
        let mut config = ModelConfig::desk(crate::model::Variant::L);
        config.image_size = 16;
        config.patch_size = 8;
        config.d_model = 8;
        config.mlp_dim = 4;
        config.n_blocks = 1;
        config.n_outcomes = 1;
        config.finalize().unwrap();
        let params = init_params(&config);
        let mut grads = BTreeMap::new();
        params.visit(&mut |name, t: &Tensor| {
            grads.insert(name, vec![0.0; t.numel()]);
        });
        (params, grads)
    }

    #[test]
    fn adam_zero_grads_leave_params_unchanged() {
        let (mut params, grads) = tiny_quadratic_setup();
        let before: Vec<Vec<f64>> =
            params.to_named().iter().map(|(_, t)| t.data().to_vec()).collect();
        let mut state = AdamState::default();
        adam_step(&mut params, &grads, &mut state, &TrainConfig::default());
        let after: Vec<Vec<f64>> =
            params.to_named().iter().map(|(_, t)| t.data().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn adam_single_step_on_quadratic_matches_hand_computation() {
        // f(x) = x^2 at x0 = 1, lr = 0.1: grad 2, m_hat = 2, v_hat = 4,
        // step = 0.1 * 2 / (2 + eps) -> x1 = 0.9 (up to eps).
        let (mut params, mut grads) = tiny_quadratic_setup();
        let mut x0 = None;
        params.visit_mut(&mut |name, t: &mut Tensor| {
            if name == "head.b" {
                *t = Tensor::vector(vec![1.0]);
                x0 = Some(1.0);
            }
        });
        assert_eq!(x0, Some(1.0));
        grads.insert("head.b".into(), vec![2.0]);
        let mut state = AdamState::default();
        let cfg = TrainConfig { learning_rate: 0.1, ..TrainConfig::default() };
        adam_step(&mut params, &grads, &mut state, &cfg);
        let mut x1 = None;
        params.visit(&mut |name, t: &Tensor| {
            if name == "head.b" {
                x1 = Some(t.data()[0]);
            }
        });
        assert!((x1.unwrap() - 0.9).abs() < 1e-8, "got {:?}", x1);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let (mut params, mut grads) = tiny_quadratic_setup();
            for g in grads.values_mut() {
                for (i, v) in g.iter_mut().enumerate() {
                    *v = ((i * 2654435761) % 97) as f64 / 97.0 - 0.5;
                }
            }
            let mut state = AdamState::default();
            let cfg = TrainConfig { learning_rate: 3e-3, ..TrainConfig::default() };
            for _ in 0..5 {
                adam_step(&mut params, &grads, &mut state, &cfg);
            }
            let mut out = Vec::new();
            params.visit(&mut |_, t: &Tensor| out.extend_from_slice(t.data()));
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn metrics_report_mean_std() {
        let r = MetricsReport::from_scores(
            "val",
            vec![("a".into(), 0.8), ("b".into(), 0.6), ("c".into(), 1.0)],
        );
        assert!((r.mean - 0.8).abs() < 1e-12);
        assert!((r.std - (0.02666666666666667f64).sqrt()).abs() < 1e-12);
    }
}
