//! MSE minibatch training with Adam, plus the evaluation loop.
//!
//! Everything is deterministic for a fixed (config, seed, data): batches are
//! shuffled once per epoch from a seed derived as (seed, epoch), gradients
//! accumulate in layer order, and the optimizer state is plain f64
//! arithmetic with no hidden randomness.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::zoo::BuiltModel;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_patience")]
    pub early_stop_patience: usize,
    /// Global gradient-norm clip; None leaves gradients untouched.
    #[serde(default)]
    pub grad_clip_norm: Option<f64>,
}

fn default_epochs() -> usize {
    10
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    0.002
}
fn default_patience() -> usize {
    5
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            seed: 0,
            early_stop_patience: default_patience(),
            grad_clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Validation("lr must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Mean over batch and dims of (pred - target)^2, with its gradient
/// 2 (pred - target) / (batch * dims).
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() || pred.rank() != 2 {
        return Err(Error::shape_mismatch("mse", pred.shape(), target.shape()));
    }
    let n = pred.len() as f64;
    let mut grad = pred.clone();
    let mut loss = 0.0;
    for (g, t) in grad.data_mut().iter_mut().zip(target.data()) {
        let d = *g - t;
        loss += d * d;
        *g = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}

/// Standard bias-corrected Adam over a named parameter set. Moment slots are
/// matched to parameters by name and shape.
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    slots: Vec<(String, Tensor, Tensor)>, // (name, m, v)
}

impl AdamState {
    pub fn new(params: &[(String, &Tensor)], lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            slots: params
                .iter()
                .map(|(name, t)| {
                    (
                        name.clone(),
                        Tensor::zeros(t.shape()),
                        Tensor::zeros(t.shape()),
                    )
                })
                .collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. `params` and `grads` must line up with the construction
    /// order; a non-finite gradient aborts with the parameter's name.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor)],
        grads: &[(String, Tensor)],
    ) -> Result<()> {
        if params.len() != self.slots.len() || grads.len() != self.slots.len() {
            return Err(Error::Validation(format!(
                "adam: expected {} parameter tensors, got {} params / {} grads",
                self.slots.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for (((name, m, v), (pname, p)), (gname, g)) in
            self.slots.iter_mut().zip(params.iter_mut()).zip(grads)
        {
            if name != pname || name != gname {
                return Err(Error::Validation(format!(
                    "adam: parameter order mismatch at `{name}` (got `{pname}` / `{gname}`)"
                )));
            }
            if g.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for `{name}`"
                )));
            }
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / b1t;
                let v_hat = vi / b2t;
                p.data_mut()[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Flattened frame-level dataset: inputs `[N, D_in]`, targets `[N, D_out]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Tensor,
}

impl Dataset {
    pub fn new(x: Tensor, y: Tensor) -> Result<Self> {
        if x.rank() != 2 || y.rank() != 2 || x.shape()[0] != y.shape()[0] {
            return Err(Error::shape_mismatch("dataset", x.shape(), y.shape()));
        }
        Ok(Dataset { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn rows(&self, idx: &[usize]) -> (Tensor, Tensor) {
        let (dx, dy) = (self.x.shape()[1], self.y.shape()[1]);
        let mut bx = Tensor::zeros(&[idx.len(), dx]);
        let mut by = Tensor::zeros(&[idx.len(), dy]);
        for (row, &i) in idx.iter().enumerate() {
            bx.data_mut()[row * dx..(row + 1) * dx]
                .copy_from_slice(&self.x.data()[i * dx..(i + 1) * dx]);
            by.data_mut()[row * dy..(row + 1) * dy]
                .copy_from_slice(&self.y.data()[i * dy..(i + 1) * dy]);
        }
        (bx, by)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
    pub grad_norm: f64,
    pub wall_ms: u128,
}

/// One pass over the data in shuffled batch order. Returns mean train loss
/// and the mean global gradient norm.
pub fn train_epoch(
    model: &mut BuiltModel,
    data: &Dataset,
    adam: &mut AdamState,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(f64, f64)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Validation("empty training set".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    RngState::derive(cfg.seed, epoch as u64).shuffle(&mut order);

    let mut loss_acc = 0.0;
    let mut norm_acc = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let (bx, by) = data.rows(chunk);
        let pred = model.forward(&bx, Mode::Train)?;
        let (loss, grad) = mse_loss(&pred, &by)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {loss}")));
        }
        let mut grads = model.backward(&grad)?;

        let mut sq = 0.0;
        for (_, g) in &grads {
            sq += g.sum_squares();
        }
        let norm = sq.sqrt();
        if let Some(clip) = cfg.grad_clip_norm {
            if norm > clip {
                let scale = clip / norm;
                for (_, g) in &mut grads {
                    *g = g.scale(scale);
                }
            }
        }

        if cfg.lr > 0.0 {
            let mut params = model.params_mut();
            adam.step(&mut params, &grads)?;
        }
        loss_acc += loss;
        norm_acc += norm;
        batches += 1;
    }
    Ok((loss_acc / batches as f64, norm_acc / batches as f64))
}

/// Mean MSE in inference mode, batched; no parameter mutation.
pub fn evaluate_mse(model: &mut BuiltModel, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Validation("empty evaluation set".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut sq = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (bx, by) = data.rows(chunk);
        let pred = model.forward(&bx, Mode::Infer)?;
        let d = pred.sub(&by)?;
        sq += d.sum_squares();
    }
    Ok(sq / data.y.len() as f64)
}

/// Model outputs over a whole dataset in inference mode, `[N, D_out]`.
pub fn predict(model: &mut BuiltModel, x: &Tensor, batch_size: usize) -> Result<Tensor> {
    let n = x.shape()[0];
    let d_in = x.shape()[1];
    let mut rows: Vec<f64> = Vec::new();
    let mut d_out = 0;
    for start in (0..n).step_by(batch_size.max(1)) {
        let end = (start + batch_size.max(1)).min(n);
        let bx = Tensor::new(
            vec![end - start, d_in],
            x.data()[start * d_in..end * d_in].to_vec(),
        )?;
        let pred = model.forward(&bx, Mode::Infer)?;
        d_out = pred.shape()[1];
        rows.extend_from_slice(pred.data());
    }
    Tensor::new(vec![n, d_out], rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub history: Vec<EpochReport>,
    pub best_epoch: usize,
    pub best_val_mse: Option<f64>,
    pub stopped_early: bool,
}

/// Full training loop with optional validation-based early stopping
/// (patience in epochs on the best validation MSE).
pub fn train(
    model: &mut BuiltModel,
    train_data: &Dataset,
    val_data: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let mut adam = AdamState::new(&model.params(), cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (0usize, f64::INFINITY);
    let mut since_best = 0usize;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let t0 = std::time::Instant::now();
        let (train_mse, grad_norm) = train_epoch(model, train_data, &mut adam, cfg, epoch)?;
        let val_mse = match val_data {
            Some(v) => Some(evaluate_mse(model, v, cfg.batch_size)?),
            None => None,
        };
        history.push(EpochReport {
            epoch,
            train_mse,
            val_mse,
            grad_norm,
            wall_ms: t0.elapsed().as_millis(),
        });
        if let Some(v) = val_mse {
            if v < best.1 {
                best = (epoch, v);
                since_best = 0;
            } else {
                since_best += 1;
                if since_best > cfg.early_stop_patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(TrainSummary {
        best_epoch: best.0,
        best_val_mse: if best.1.is_finite() { Some(best.1) } else { None },
        history,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{build_model, InputSpec, ModelConfig, ModelKind};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            kind: ModelKind::Dnn,
            input: InputSpec {
                freq_bins: 6,
                context_frames: 1,
                channels: 1,
                nat: false,
            },
            output_dim: 4,
            hidden_dims: vec![10],
            conv: vec![],
            fc_dims: vec![],
            tt_hidden: vec![],
            tt_fc: vec![],
            tt_output: None,
            tucker_ranks: vec![],
        }
    }

    fn linear_task(n: usize, seed: u64) -> Dataset {
        // y = A x + noise-free, learnable by the tiny net
        let mut rng = RngState::new(seed);
        let a = rng.normal_tensor(&[6, 4], 0.7);
        let x = rng.normal_tensor(&[n, 6], 1.0);
        let y = x.matmul(&a).unwrap();
        Dataset::new(x, y).unwrap()
    }

    #[test]
    fn mse_loss_definition() {
        let p = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (l0, g0) = mse_loss(&p, &p).unwrap();
        assert_eq!(l0, 0.0);
        assert!(g0.data().iter().all(|&x| x == 0.0));

        let t = p.map(|x| x - 1.0);
        let (l1, g1) = mse_loss(&p, &t).unwrap();
        assert!((l1 - 1.0).abs() < 1e-15);
        assert!(g1.data().iter().all(|&x| (x - 2.0 / 4.0).abs() < 1e-15));

        // brute-force loop oracle on random pairs
        let mut rng = RngState::new(1);
        let pred = rng.normal_tensor(&[3, 5], 1.0);
        let targ = rng.normal_tensor(&[3, 5], 1.0);
        let (loss, grad) = mse_loss(&pred, &targ).unwrap();
        let mut want = 0.0;
        for i in 0..15 {
            let d = pred.data()[i] - targ.data()[i];
            want += d * d;
            assert!((grad.data()[i] - 2.0 * d / 15.0).abs() < 1e-12);
        }
        assert!((loss - want / 15.0).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0, 3.0]);
        let g = Tensor::from_vec(vec![0.5, -0.25, 4.0]);
        let name = "w".to_string();
        let mut adam = AdamState::new(&[(name.clone(), &p)], 0.01);
        let before = p.clone();
        let mut params = vec![(name.clone(), &mut p)];
        adam.step(&mut params, &[(name.clone(), g.clone())]).unwrap();
        for i in 0..3 {
            let delta = p.data()[i] - before.data()[i];
            let want = -0.01 * g.data()[i].signum();
            // within lr * epsilon-ish slack
            assert!((delta - want).abs() < 0.01 * 1e-3, "i={i} delta {delta}");
        }
    }

    #[test]
    fn adam_scale_invariant_first_step() {
        for scale in [1.0, 7.5, 1000.0] {
            let mut p = Tensor::from_vec(vec![1.0]);
            let g = Tensor::from_vec(vec![0.3 * scale]);
            let name = "w".to_string();
            let mut adam = AdamState::new(&[(name.clone(), &p)], 0.01);
            adam.epsilon = 0.0; // exact sign structure at step 1
            let mut params = vec![(name.clone(), &mut p)];
            adam.step(&mut params, &[(name.clone(), g)]).unwrap();
            assert!((p.data()[0] - (1.0 - 0.01)).abs() < 1e-12, "scale {scale}");
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = Tensor::from_vec(vec![1.0, 2.0]);
        let name = "w".to_string();
        let mut adam = AdamState::new(&[(name.clone(), &p)], 0.01);
        let before = p.clone();
        let mut params = vec![(name.clone(), &mut p)];
        adam.step(&mut params, &[(name.clone(), Tensor::zeros(&[2]))])
            .unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // minimize ||w - w*||^2 via its gradient 2(w - w*); the start must
        // be within the ~steps*lr reach of the signed Adam step
        let mut rng = RngState::new(2);
        let target = rng.normal_tensor(&[8], 1.0);
        let mut w = target.map(|x| x + 0.5);
        let d0 = w.sub(&target).unwrap().frobenius_norm();
        let name = "w".to_string();
        let mut adam = AdamState::new(&[(name.clone(), &w)], 0.01);
        for _ in 0..200 {
            let g = w.sub(&target).unwrap().scale(2.0);
            let mut params = vec![(name.clone(), &mut w)];
            adam.step(&mut params, &[(name.clone(), g)]).unwrap();
        }
        let d1 = w.sub(&target).unwrap().frobenius_norm();
        assert!(d1 < 0.01 * d0, "d0 {d0} d1 {d1}");
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut p = Tensor::from_vec(vec![1.0]);
        let name = "w".to_string();
        let mut adam = AdamState::new(&[(name.clone(), &p)], 0.01);
        let mut params = vec![(name.clone(), &mut p)];
        let err = adam
            .step(&mut params, &[(name.clone(), Tensor::from_vec(vec![f64::NAN]))])
            .unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
    }

    #[test]
    fn zero_lr_epoch_keeps_params_bitwise() {
        let mut model = build_model(&tiny_config(), &mut RngState::new(3)).unwrap();
        let data = linear_task(64, 4);
        let before: Vec<Tensor> = model.params().iter().map(|(_, t)| (*t).clone()).collect();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 1,
            batch_size: 16,
            seed: 5,
            ..TrainConfig::default()
        };
        let mut adam = AdamState::new(&model.params(), cfg.lr);
        let (loss, _) = train_epoch(&mut model, &data, &mut adam, &cfg, 0).unwrap();
        assert!(loss.is_finite());
        for ((_, after), before) in model.params().iter().zip(&before) {
            assert_eq!(*after, before);
        }
    }

    #[test]
    fn loss_decreases_on_linear_task() {
        let mut model = build_model(&tiny_config(), &mut RngState::new(6)).unwrap();
        let data = linear_task(256, 7);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 32,
            lr: 0.002,
            seed: 8,
            ..TrainConfig::default()
        };
        let summary = train(&mut model, &data, None, &cfg).unwrap();
        let losses: Vec<f64> = summary.history.iter().map(|h| h.train_mse).collect();
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "losses not strictly decreasing: {losses:?}");
        }
    }

    #[test]
    fn identical_seeds_identical_reports() {
        let run = || {
            let mut model = build_model(&tiny_config(), &mut RngState::new(10)).unwrap();
            let data = linear_task(128, 11);
            let cfg = TrainConfig {
                epochs: 3,
                batch_size: 16,
                lr: 0.002,
                seed: 12,
                ..TrainConfig::default()
            };
            let summary = train(&mut model, &data, Some(&data), &cfg).unwrap();
            summary
                .history
                .iter()
                .map(|h| (h.train_mse, h.val_mse))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn evaluate_is_idempotent_and_improves_after_training() {
        let mut model = build_model(&tiny_config(), &mut RngState::new(13)).unwrap();
        let train_data = linear_task(256, 14);
        let held_out = linear_task(64, 15);
        let before = evaluate_mse(&mut model, &held_out, 32).unwrap();
        let again = evaluate_mse(&mut model, &held_out, 32).unwrap();
        assert_eq!(before, again);

        let cfg = TrainConfig {
            epochs: 8,
            batch_size: 32,
            lr: 0.002,
            seed: 16,
            ..TrainConfig::default()
        };
        train(&mut model, &train_data, None, &cfg).unwrap();
        let after = evaluate_mse(&mut model, &held_out, 32).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn output_gradient_matches_finite_differences_of_loss() {
        let mut rng = RngState::new(17);
        let pred = rng.normal_tensor(&[2, 3], 1.0);
        let target = rng.normal_tensor(&[2, 3], 1.0);
        let (_, grad) = mse_loss(&pred, &target).unwrap();
        let h = 1e-6;
        for i in 0..pred.len() {
            let mut plus = pred.clone();
            plus.data_mut()[i] += h;
            let mut minus = pred.clone();
            minus.data_mut()[i] -= h;
            let (lp, _) = mse_loss(&plus, &target).unwrap();
            let (lm, _) = mse_loss(&minus, &target).unwrap();
            let numeric = (lp - lm) / (2.0 * h);
            assert!((numeric - grad.data()[i]).abs() < 1e-7);
        }
    }
}
