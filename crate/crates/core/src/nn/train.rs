//! Adam and the minibatch training loop with early stopping.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::Model;
use super::{NnError, Real};
use crate::seed::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub step: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![F::zero(); n],
            v: vec![F::zero(); n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<F: Real>(params: &mut [F], grads: &[F], state: &mut AdamState<F>, cfg: &AdamConfig) -> Result<(), NnError> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(NnError::ShapeMismatch(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
    let c1 = F::of(1.0 / (1.0 - cfg.beta1.powi(t)));
    let c2 = F::of(1.0 / (1.0 - cfg.beta2.powi(t)));
    let (lr, eps) = (F::of(cfg.lr), F::of(cfg.eps));
    let one = F::one();
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
        let mhat = state.m[i] * c1;
        let vhat = state.v[i] * c2;
        params[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a better validation MAE.
    pub patience: usize,
    pub seed: u64,
    /// Start the output bias at the mean training target.
    pub init_bias_to_mean: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 10,
            max_epochs: 300,
            patience: 30,
            seed: 0,
            init_bias_to_mean: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub x: &'a [f32],
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean minibatch loss over the epoch; epoch 0 is a full pass before training.
    pub train_mse: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    pub model: Model<F>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub initial_train_mse: f64,
    /// Full-pass training MSE of the returned model.
    pub final_train_mse: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_mse,val_mae\n");
    for r in history {
        let _ = writeln!(s, "{},{:.9e},{:.9e}", r.epoch, r.train_mse, r.val_mae);
    }
    s
}

fn evaluate<F: Real>(model: &Model<F>, data: &[Example<'_>], ws: &mut super::Workspace<F>) -> Result<(f64, f64), NnError> {
    if data.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (mut se, mut ae) = (0.0, 0.0);
    for ex in data {
        let e = model.forward(ex.x, ws)?.to_f64() - ex.y;
        se += e * e;
        ae += e.abs();
    }
    let n = data.len() as f64;
    Ok((se / n, ae / n))
}

/// Minibatch MSE training with per-epoch shuffling from `cfg.seed`; returns
/// the parameters of the epoch with the lowest validation MAE.
pub fn train_model<F: Real>(
    mut model: Model<F>,
    train: &[Example<'_>],
    val: &[Example<'_>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<F>, NnError> {
    if train.is_empty() {
        return Err(NnError::InvalidSpec("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(NnError::InvalidSpec("batch_size must be >= 1".into()));
    }
    let mut ws = model.workspace();
    if cfg.max_epochs > 0 && cfg.init_bias_to_mean {
        let mean = train.iter().map(|e| e.y).sum::<f64>() / train.len() as f64;
        let hb = model.head_bias_index();
        model.params[hb] = F::of(mean);
    }
    let (initial_train_mse, _) = evaluate(&model, train, &mut ws)?;
    let score = |model: &Model<F>, ws: &mut super::Workspace<F>| -> Result<f64, NnError> {
        if val.is_empty() {
            Ok(evaluate(model, train, ws)?.1)
        } else {
            Ok(evaluate(model, val, ws)?.1)
        }
    };
    let mut best_val = score(&model, &mut ws)?;
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_mse: initial_train_mse,
        val_mae: best_val,
    }];
    let mut best = model.params.clone();
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut rng = rng_from_seed(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut grad = vec![F::zero(); model.param_count()];
    let mut adam = AdamState::new(model.param_count());
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.fill(F::zero());
            let scale = F::of(2.0 / batch.len() as f64);
            let mut batch_loss = 0.0;
            for &i in batch {
                let ex = &train[i];
                let out = model.forward(ex.x, &mut ws)?;
                let err = out.to_f64() - ex.y;
                batch_loss += err * err;
                model.backward(&mut ws, scale * F::of(err), &mut grad)?;
            }
            if !batch_loss.is_finite() {
                return Err(NnError::NonFiniteLoss { epoch });
            }
            loss_sum += batch_loss;
            adam_step(&mut model.params, &grad, &mut adam, &cfg.adam)?;
        }
        let train_mse = loss_sum / train.len() as f64;
        let val_mae = score(&model, &mut ws)?;
        if !val_mae.is_finite() {
            return Err(NnError::NonFiniteLoss { epoch });
        }
        history.push(EpochRecord {
            epoch,
            train_mse,
            val_mae,
        });
        if val_mae < best_val {
            best_val = val_mae;
            best.copy_from_slice(&model.params);
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    model.params = best;
    let (final_train_mse, _) = evaluate(&model, train, &mut ws)?;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        initial_train_mse,
        final_train_mse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ArchSpec;

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![1.0f64, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adam_first_step_is_about_lr() {
        let cfg = AdamConfig::default();
        for g in [0.3f64, -7.0, 1e-3] {
            let mut p = vec![0.0f64];
            let mut s = AdamState::new(1);
            adam_step(&mut p, &[g], &mut s, &cfg).unwrap();
            // m̂ = g, v̂ = g², step = lr·g / (|g| + ε).
            let want = -cfg.lr * g / (g.abs() + cfg.eps);
            assert!((p[0] - want).abs() < 1e-15);
            assert!((p[0].abs() - cfg.lr).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_is_deterministic_and_checks_shapes() {
        let cfg = AdamConfig::default();
        let mut a = (vec![0.5f32, 1.0], AdamState::new(2));
        let mut b = a.clone();
        adam_step(&mut a.0, &[0.1, -0.2], &mut a.1, &cfg).unwrap();
        adam_step(&mut b.0, &[0.1, -0.2], &mut b.1, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(adam_step(&mut a.0, &[0.1], &mut a.1, &cfg).is_err());
    }

    fn sine_data() -> (Vec<[f32; 1]>, Vec<f64>) {
        let xs: Vec<[f32; 1]> = (0..200).map(|i| [(-3.0 + 6.0 * i as f64 / 199.0) as f32]).collect();
        let ys = xs.iter().map(|x| (x[0] as f64).sin()).collect();
        (xs, ys)
    }

    #[test]
    fn mlp_learns_sine() {
        let (xs, ys) = sine_data();
        let data: Vec<Example> = xs.iter().zip(&ys).map(|(x, &y)| Example { x, y }).collect();
        let model = Model::<f32>::new(ArchSpec::Mlp { input: 1, hidden: vec![50, 50] }, 1).unwrap();
        let cfg = TrainConfig {
            max_epochs: 500,
            patience: 500,
            seed: 2,
            ..Default::default()
        };
        let out = train_model(model, &data, &[], &cfg).unwrap();
        assert!(out.final_train_mse < 1e-2, "mse {}", out.final_train_mse);
        assert!(out.final_train_mse < out.initial_train_mse);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let (xs, ys) = sine_data();
        let data: Vec<Example> = xs.iter().zip(&ys).map(|(x, &y)| Example { x, y }).collect();
        let model = Model::<f32>::new(ArchSpec::Mlp { input: 1, hidden: vec![5] }, 1).unwrap();
        let cfg = TrainConfig {
            max_epochs: 0,
            ..Default::default()
        };
        let out = train_model(model.clone(), &data, &data, &cfg).unwrap();
        assert_eq!(out.model.params, model.params);
        assert_eq!(out.history.len(), 1);
    }

    #[test]
    fn identical_inputs_give_identical_models() {
        let (xs, ys) = sine_data();
        let data: Vec<Example> = xs.iter().zip(&ys).map(|(x, &y)| Example { x, y }).collect();
        let copy_x = xs.clone();
        let copy: Vec<Example> = copy_x.iter().zip(&ys).map(|(x, &y)| Example { x, y }).collect();
        let spec = ArchSpec::Mlp { input: 1, hidden: vec![20, 20] };
        let cfg = TrainConfig {
            max_epochs: 15,
            seed: 4,
            ..Default::default()
        };
        let a = train_model(Model::<f32>::new(spec.clone(), 3).unwrap(), &data, &data[..40], &cfg).unwrap();
        let b = train_model(Model::<f32>::new(spec, 3).unwrap(), &copy, &copy[..40], &cfg).unwrap();
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.history, b.history);
        assert_eq!(a.best_epoch, b.best_epoch);
    }

    #[test]
    fn early_stopping_keeps_best_epoch() {
        let (xs, ys) = sine_data();
        let data: Vec<Example> = xs.iter().zip(&ys).map(|(x, &y)| Example { x, y }).collect();
        // Validation targets unrelated to training targets force early stopping.
        let val_y: Vec<f64> = ys.iter().map(|y| -3.0 * y).collect();
        let val: Vec<Example> = xs.iter().zip(&val_y).map(|(x, &y)| Example { x, y }).collect();
        let cfg = TrainConfig {
            max_epochs: 200,
            patience: 5,
            ..Default::default()
        };
        let out = train_model(Model::<f32>::new(ArchSpec::Mlp { input: 1, hidden: vec![10] }, 0).unwrap(), &data, &val, &cfg).unwrap();
        let last = out.history.last().unwrap().epoch;
        assert!(last < 200);
        assert_eq!(last, out.best_epoch + 5);
        let best = out.history.iter().map(|r| r.val_mae).fold(f64::INFINITY, f64::min);
        assert_eq!(out.history[out.best_epoch].val_mae, best);
        let csv = history_csv(&out.history);
        assert_eq!(csv.lines().count(), out.history.len() + 1);
    }

    #[test]
    fn divergence_is_reported() {
        let xs = [[1.0f32]];
        let data = [Example { x: &xs[0], y: 1e300 }];
        let cfg = TrainConfig {
            max_epochs: 3,
            init_bias_to_mean: false,
            ..Default::default()
        };
        let r = train_model(Model::<f32>::new(ArchSpec::Linear { input: 1 }, 0).unwrap(), &data, &[], &cfg);
        assert!(matches!(r, Err(NnError::NonFiniteLoss { .. })));
    }
}
