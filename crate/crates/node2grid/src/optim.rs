//! The task loss with split L2 coefficients, and the RMSprop / Nadam
//! optimizers.
//!
//! Total loss:
//!
//! ```text
//! L = task(y, y_hat) + lambda * sum(w^2) + lambda_att * sum(w_att^2)
//! ```
//!
//! where `w` ranges over conv + FC weights and `w_att` over the attention
//! filter bank; biases are never regularized. The lambda term can be
//! carried either explicitly in the loss (Nadam runs) or as decoupled
//! weight decay inside the optimizer (RMSprop runs); both are L2 handling
//! of the same term and [`add_regularizer_grads`] covers the explicit
//! route. `lambda_att` is always explicit.

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

use crate::nn::{r, ModelParams, ParamRole, Real};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("class id {class} out of range for {classes} classes")]
    ClassOutOfRange { class: u32, classes: usize },
    #[error("non-finite logits")]
    NonFiniteLogits,
    #[error("non-finite gradient in {tensor}; step rejected")]
    NonFiniteGradient { tensor: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTask {
    CrossEntropy,
    BinaryCrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// L2 coefficient for conv + FC weights.
    pub lambda: f64,
    /// L2 coefficient for attention filters; kept larger than `lambda` in
    /// the reference setups.
    pub lambda_att: f64,
    pub task: LossTask,
}

impl LossConfig {
    pub fn new(lambda: f64, lambda_att: f64, task: LossTask) -> Self {
        if lambda > 0.0 && lambda_att > 0.0 && lambda_att < lambda {
            log::warn!(
                "lambda_att {} is smaller than lambda {}; attention filters usually get the stronger constraint",
                lambda_att,
                lambda
            );
        }
        LossConfig { lambda, lambda_att, task }
    }
}

/// Targets for one batch, matching the task head.
pub enum Targets<'a> {
    Classes(&'a [u32]),
    /// B x C matrix of 0/1 flags.
    MultiHot(ArrayView2<'a, u8>),
}

fn regularizer<F: Real>(params: &ModelParams<F>, cfg: &LossConfig) -> F {
    let mut net = F::zero();
    let mut att = F::zero();
    for (_, role, slice) in params.tensors() {
        let sq = slice.iter().fold(F::zero(), |acc, &w| acc + w * w);
        match role {
            ParamRole::NetWeight => net = net + sq,
            ParamRole::AttentionWeight => att = att + sq,
            ParamRole::Bias => {}
        }
    }
    r::<F>(cfg.lambda) * net + r::<F>(cfg.lambda_att) * att
}

/// Task loss (mean over the batch) plus both L2 terms, and the loss
/// gradient at the logits.
pub fn total_loss<F: Real>(
    logits: &Array2<F>,
    targets: &Targets<'_>,
    params: &ModelParams<F>,
    cfg: &LossConfig,
) -> Result<(F, Array2<F>), OptimError> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(OptimError::NonFiniteLogits);
    }
    let (batch, classes) = logits.dim();
    let mut dlogits = Array2::zeros((batch, classes));
    let mut task = F::zero();

    match (cfg.task, targets) {
        (LossTask::CrossEntropy, Targets::Classes(ids)) => {
            if ids.len() != batch {
                return Err(OptimError::ShapeMismatch(format!(
                    "{} targets for batch of {}",
                    ids.len(),
                    batch
                )));
            }
            let inv_b = F::one() / r::<F>(batch as f64);
            for (row, &y) in ids.iter().enumerate() {
                if y as usize >= classes {
                    return Err(OptimError::ClassOutOfRange { class: y, classes });
                }
                let zrow = logits.row(row);
                let max = zrow.fold(F::neg_infinity(), |a, &b| a.max(b));
                let sum_exp = zrow.fold(F::zero(), |a, &b| a + (b - max).exp());
                let lse = max + sum_exp.ln();
                task = task + (lse - zrow[y as usize]) * inv_b;
                for (c, g) in dlogits.row_mut(row).iter_mut().enumerate() {
                    let softmax = (zrow[c] - lse).exp();
                    let onehot = if c == y as usize { F::one() } else { F::zero() };
                    *g = (softmax - onehot) * inv_b;
                }
            }
        }
        (LossTask::BinaryCrossEntropy, Targets::MultiHot(flags)) => {
            if flags.dim() != (batch, classes) {
                return Err(OptimError::ShapeMismatch(format!(
                    "targets {:?} for logits {:?}",
                    flags.dim(),
                    logits.dim()
                )));
            }
            // Mean over batch and classes; numerically stable form.
            let inv = F::one() / r::<F>((batch * classes) as f64);
            for ((idx, &z), &y) in logits.indexed_iter().zip(flags.iter()) {
                let y = r::<F>(y as f64);
                let pos = z.max(F::zero());
                task = task + (pos - z * y + (F::one() + (-z.abs()).exp()).ln()) * inv;
                let sigma = F::one() / (F::one() + (-z).exp());
                dlogits[idx] = (sigma - y) * inv;
            }
        }
        _ => {
            return Err(OptimError::ShapeMismatch(
                "targets do not match the configured task".into(),
            ))
        }
    }

    Ok((task + regularizer(params, cfg), dlogits))
}

/// Add the explicit L2 gradients (2*lambda*w, 2*lambda_att*w_att) onto an
/// existing gradient set. Biases untouched.
pub fn add_regularizer_grads<F: Real>(
    params: &ModelParams<F>,
    grads: &mut ModelParams<F>,
    cfg: &LossConfig,
) {
    let two_l = r::<F>(2.0 * cfg.lambda);
    let two_la = r::<F>(2.0 * cfg.lambda_att);
    for ((_, role, p), (_, _, g)) in params.tensors().into_iter().zip(grads.tensors_mut()) {
        let coeff = match role {
            ParamRole::NetWeight => two_l,
            ParamRole::AttentionWeight => two_la,
            ParamRole::Bias => continue,
        };
        if coeff != F::zero() {
            for (gi, &pi) in g.iter_mut().zip(p.iter()) {
                *gi = *gi + coeff * pi;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Rmsprop,
    Nadam,
}

const RMSPROP_DECAY: f64 = 0.9;
const NADAM_BETA1: f64 = 0.9;
const NADAM_BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

/// Per-parameter moment accumulators and step bookkeeping. Updates are
/// strictly serial and deterministic given (state, grads).
#[derive(Debug, Clone)]
pub struct OptimizerState<F> {
    pub kind: OptimKind,
    pub lr: f64,
    /// Decoupled weight decay, applied to NetWeight tensors only.
    pub weight_decay: f64,
    pub step: u64,
    first: Vec<Vec<F>>,
    second: Vec<Vec<F>>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(kind: OptimKind, lr: f64, weight_decay: f64, params: &ModelParams<F>) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|(_, _, s)| s.len()).collect();
        OptimizerState {
            kind,
            lr,
            weight_decay,
            step: 0,
            first: shapes.iter().map(|&n| vec![F::zero(); n]).collect(),
            second: shapes.iter().map(|&n| vec![F::zero(); n]).collect(),
        }
    }

    /// Apply one update. Rejects the whole step if any gradient entry is
    /// non-finite, leaving parameters and accumulators untouched.
    pub fn apply(
        &mut self,
        params: &mut ModelParams<F>,
        grads: &ModelParams<F>,
    ) -> Result<(), OptimError> {
        for (name, _, slice) in grads.tensors() {
            if slice.iter().any(|g| !g.is_finite()) {
                return Err(OptimError::NonFiniteGradient { tensor: name });
            }
        }
        let expected: Vec<usize> = self.first.iter().map(Vec::len).collect();
        let actual: Vec<usize> = params.tensors().iter().map(|(_, _, s)| s.len()).collect();
        if expected != actual {
            return Err(OptimError::ShapeMismatch(format!(
                "optimizer state {:?} vs params {:?}",
                expected, actual
            )));
        }

        self.step += 1;
        let t = self.step;
        let lr = self.lr;
        let wd = self.weight_decay;
        let kind = self.kind;
        for (((_, role, p), (_, _, g)), (m, v)) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let decay = if role == ParamRole::NetWeight { wd } else { 0.0 };
            match kind {
                OptimKind::Rmsprop => rmsprop_kernel(p, g, v, lr, decay),
                OptimKind::Nadam => nadam_kernel(p, g, m, v, lr, decay, t),
            }
        }
        Ok(())
    }
}

/// RMSprop: s <- rho*s + (1-rho)*g^2; p <- p - lr*g/(sqrt(s)+eps), with
/// decoupled weight decay applied after the gradient step.
fn rmsprop_kernel<F: Real>(p: &mut [F], g: &[F], s: &mut [F], lr: f64, decay: f64) {
    let rho = r::<F>(RMSPROP_DECAY);
    let one_minus = F::one() - rho;
    let eps = r::<F>(EPSILON);
    let lr_f = r::<F>(lr);
    let wd = r::<F>(lr * decay);
    for ((p, &g), s) in p.iter_mut().zip(g.iter()).zip(s.iter_mut()) {
        *s = rho * *s + one_minus * g * g;
        *p = *p - lr_f * g / (s.sqrt() + eps);
        if decay != 0.0 {
            *p = *p - wd * *p;
        }
    }
}

/// Nadam (Nesterov-accelerated Adam, unscheduled form):
/// m_hat blends the bias-corrected momentum with the bias-corrected
/// current gradient before the Adam-style denominator.
fn nadam_kernel<F: Real>(p: &mut [F], g: &[F], m: &mut [F], v: &mut [F], lr: f64, decay: f64, t: u64) {
    let b1 = r::<F>(NADAM_BETA1);
    let b2 = r::<F>(NADAM_BETA2);
    let eps = r::<F>(EPSILON);
    let lr_f = r::<F>(lr);
    let wd = r::<F>(lr * decay);
    let b1_t = r::<F>(NADAM_BETA1.powi(t as i32));
    let b1_t1 = r::<F>(NADAM_BETA1.powi(t as i32 + 1));
    let b2_t = r::<F>(NADAM_BETA2.powi(t as i32));
    for (((p, &g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = b1 * *m + (F::one() - b1) * g;
        *v = b2 * *v + (F::one() - b2) * g * g;
        let m_hat = b1 * *m / (F::one() - b1_t1) + (F::one() - b1) * g / (F::one() - b1_t);
        let v_hat = *v / (F::one() - b2_t);
        *p = *p - lr_f * m_hat / (v_hat.sqrt() + eps);
        if decay != 0.0 {
            *p = *p - wd * *p;
        }
    }
}

/// One RMSprop update over a full parameter set.
pub fn rmsprop_step<F: Real>(
    state: &mut OptimizerState<F>,
    params: &mut ModelParams<F>,
    grads: &ModelParams<F>,
) -> Result<(), OptimError> {
    debug_assert_eq!(state.kind, OptimKind::Rmsprop);
    state.apply(params, grads)
}

/// One Nadam update over a full parameter set.
pub fn nadam_step<F: Real>(
    state: &mut OptimizerState<F>,
    params: &mut ModelParams<F>,
    grads: &ModelParams<F>,
) -> Result<(), OptimError> {
    debug_assert_eq!(state.kind, OptimKind::Nadam);
    state.apply(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, NetConfig, TaskHead};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_params(task: TaskHead, heads: usize, classes: usize) -> ModelParams<f64> {
        let cfg = NetConfig {
            heads,
            d_hidden: 3,
            dropout_rate: 0.0,
            task_head: task,
            ..NetConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        init_params(&cfg, 4, 2, classes, &mut rng).unwrap()
    }

    /// Single-scalar probe: everything 1x1 so one weight drives the loss.
    fn scalar_params() -> ModelParams<f64> {
        let cfg = NetConfig {
            heads: 0,
            d_hidden: 1,
            dropout_rate: 0.0,
            ..NetConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        init_params(&cfg, 1, 1, 1, &mut rng).unwrap()
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_c() {
        let params = tiny_params(TaskHead::SoftmaxSingleLabel, 0, 4);
        let cfg = LossConfig::new(0.0, 0.0, LossTask::CrossEntropy);
        let logits = Array2::from_elem((3, 4), 0.7);
        let targets = [0u32, 1, 3];
        let (loss, _) = total_loss(&logits, &Targets::Classes(&targets), &params, &cfg).unwrap();
        assert!((loss - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_prediction_drives_loss_to_zero() {
        let params = tiny_params(TaskHead::SoftmaxSingleLabel, 0, 3);
        let cfg = LossConfig::new(0.0, 0.0, LossTask::CrossEntropy);
        let logits = array![[50.0, 0.0, 0.0], [0.0, 50.0, 0.0]];
        let targets = [0u32, 1];
        let (loss, _) = total_loss(&logits, &Targets::Classes(&targets), &params, &cfg).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn regularizer_matches_direct_sum() {
        let mut params = tiny_params(TaskHead::SoftmaxSingleLabel, 2, 3);
        params.att.mapv_inplace(|_| 0.5);
        let cfg = LossConfig::new(0.01, 0.07, LossTask::CrossEntropy);
        let logits = Array2::zeros((1, 3));
        let (loss, _) = total_loss(&logits, &Targets::Classes(&[0]), &params, &cfg).unwrap();

        let mut net = 0.0;
        for w in params.conv_w.iter().chain(params.w1.iter()).chain(params.w2.iter()) {
            net += w * w;
        }
        let att: f64 = params.att.iter().map(|w| w * w).sum();
        let expected = (3.0f64).ln() + 0.01 * net + 0.07 * att;
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let params = tiny_params(TaskHead::SoftmaxSingleLabel, 0, 3);
        let cfg = LossConfig::new(0.0, 0.0, LossTask::CrossEntropy);
        let mut logits = array![[0.3, -1.2, 0.8], [2.0, 0.1, -0.4]];
        let targets = [2u32, 0];
        let (_, grad) = total_loss(&logits, &Targets::Classes(&targets), &params, &cfg).unwrap();
        let eps = 1e-6;
        for b in 0..2 {
            for c in 0..3 {
                let orig = logits[[b, c]];
                logits[[b, c]] = orig + eps;
                let (up, _) = total_loss(&logits, &Targets::Classes(&targets), &params, &cfg).unwrap();
                logits[[b, c]] = orig - eps;
                let (down, _) =
                    total_loss(&logits, &Targets::Classes(&targets), &params, &cfg).unwrap();
                logits[[b, c]] = orig;
                let fd = (up - down) / (2.0 * eps);
                assert!((fd - grad[[b, c]]).abs() / fd.abs().max(1e-8) < 1e-4);
            }
        }
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let params = tiny_params(TaskHead::SigmoidMultiLabel, 0, 2);
        let cfg = LossConfig::new(0.0, 0.0, LossTask::BinaryCrossEntropy);
        let mut logits = array![[0.4, -0.9], [1.5, 0.0]];
        let flags = array![[1u8, 0], [0, 1]];
        let (_, grad) =
            total_loss(&logits, &Targets::MultiHot(flags.view()), &params, &cfg).unwrap();
        let eps = 1e-6;
        for b in 0..2 {
            for c in 0..2 {
                let orig = logits[[b, c]];
                logits[[b, c]] = orig + eps;
                let (up, _) =
                    total_loss(&logits, &Targets::MultiHot(flags.view()), &params, &cfg).unwrap();
                logits[[b, c]] = orig - eps;
                let (down, _) =
                    total_loss(&logits, &Targets::MultiHot(flags.view()), &params, &cfg).unwrap();
                logits[[b, c]] = orig;
                let fd = (up - down) / (2.0 * eps);
                assert!((fd - grad[[b, c]]).abs() / fd.abs().max(1e-8) < 1e-3);
            }
        }
    }

    #[test]
    fn bad_labels_and_nan_logits_rejected() {
        let params = tiny_params(TaskHead::SoftmaxSingleLabel, 0, 3);
        let cfg = LossConfig::new(0.0, 0.0, LossTask::CrossEntropy);
        let logits = Array2::zeros((1, 3));
        assert!(matches!(
            total_loss(&logits, &Targets::Classes(&[7]), &params, &cfg),
            Err(OptimError::ClassOutOfRange { .. })
        ));
        let bad = array![[f64::NAN, 0.0, 0.0]];
        assert!(matches!(
            total_loss(&bad, &Targets::Classes(&[0]), &params, &cfg),
            Err(OptimError::NonFiniteLogits)
        ));
    }

    #[test]
    fn every_tensor_sits_in_exactly_one_regularizer_bucket() {
        let params = tiny_params(TaskHead::SoftmaxSingleLabel, 2, 3);
        let mut net = 0;
        let mut att = 0;
        let mut bias = 0;
        for (name, role, _) in params.tensors() {
            match role {
                ParamRole::NetWeight => {
                    net += 1;
                    assert!(matches!(name, "conv_w" | "w1" | "w2"));
                }
                ParamRole::AttentionWeight => {
                    att += 1;
                    assert_eq!(name, "att");
                }
                ParamRole::Bias => {
                    bias += 1;
                    assert!(matches!(name, "conv_b" | "b1" | "b2"));
                }
            }
        }
        assert_eq!((net, att, bias), (3, 1, 3));
    }

    #[test]
    fn zero_gradient_zero_decay_is_a_no_op() {
        for kind in [OptimKind::Rmsprop, OptimKind::Nadam] {
            let mut params = tiny_params(TaskHead::SoftmaxSingleLabel, 2, 3);
            let before = params.clone();
            let grads = params.zeros_like();
            let mut state = OptimizerState::new(kind, 0.01, 0.0, &params);
            state.apply(&mut params, &grads).unwrap();
            assert_eq!(params, before);
        }
    }

    #[test]
    fn identical_state_and_grads_give_identical_updates() {
        let mut pa = tiny_params(TaskHead::SoftmaxSingleLabel, 2, 3);
        let mut pb = pa.clone();
        let mut ga = pa.zeros_like();
        ga.w1.mapv_inplace(|_| 0.3);
        ga.att.mapv_inplace(|_| -0.2);
        let mut sa = OptimizerState::new(OptimKind::Rmsprop, 0.008, 0.0005, &pa);
        let mut sb = sa.clone();
        sa.apply(&mut pa, &ga).unwrap();
        sb.apply(&mut pb, &ga).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn rmsprop_converges_on_scalar_quadratic() {
        // Minimize f(x) = x^2 via its gradient 2x, driving the single fc1
        // weight of a 1x1 model.
        let mut params = scalar_params();
        params.w1[[0, 0]] = 1.0;
        let mut state = OptimizerState::new(OptimKind::Rmsprop, 0.008, 0.0, &params);
        for _ in 0..500 {
            let mut grads = params.zeros_like();
            grads.w1[[0, 0]] = 2.0 * params.w1[[0, 0]];
            state.apply(&mut params, &grads).unwrap();
        }
        assert!(params.w1[[0, 0]].abs() < 1e-2, "ended at {}", params.w1[[0, 0]]);
    }

    #[test]
    fn nadam_first_step_matches_hand_computation() {
        let mut params = scalar_params();
        params.w1[[0, 0]] = 0.0;
        let mut grads = params.zeros_like();
        grads.w1[[0, 0]] = 1.0;
        let mut state = OptimizerState::new(OptimKind::Nadam, 0.001, 0.0, &params);
        state.apply(&mut params, &grads).unwrap();

        // By hand, from zero state with g = 1, t = 1:
        //   m = 0.1, v = 0.001
        //   m_hat = 0.9*0.1/(1 - 0.9^2) + 0.1*1/(1 - 0.9) = 0.09/0.19 + 1
        //   v_hat = 0.001/(1 - 0.999) = 1
        //   x = -lr * m_hat / (sqrt(1) + 1e-8)
        let m_hat = 0.09 / 0.19 + 1.0;
        let expected = -0.001 * m_hat / (1.0 + 1e-8);
        assert!((params.w1[[0, 0]] - expected).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_only_touches_net_weights() {
        let mut params = tiny_params(TaskHead::SoftmaxSingleLabel, 2, 3);
        params.att.mapv_inplace(|_| 0.5);
        params.b1.mapv_inplace(|_| 0.5);
        let before = params.clone();
        let grads = params.zeros_like();
        let mut state = OptimizerState::new(OptimKind::Rmsprop, 0.01, 0.1, &params);
        state.apply(&mut params, &grads).unwrap();
        // Zero gradient: only decay moves anything.
        assert_eq!(params.att, before.att);
        assert_eq!(params.b1, before.b1);
        assert_eq!(params.b2, before.b2);
        assert!(params.w1.iter().zip(before.w1.iter()).all(|(a, b)| a.abs() < b.abs() || *b == 0.0));
    }

    #[test]
    fn non_finite_gradient_rejects_step_without_mutation() {
        let mut params = tiny_params(TaskHead::SoftmaxSingleLabel, 2, 3);
        let before = params.clone();
        let mut grads = params.zeros_like();
        grads.w2[[0, 0]] = f64::NAN;
        let mut state = OptimizerState::new(OptimKind::Rmsprop, 0.01, 0.0, &params);
        let err = state.apply(&mut params, &grads);
        assert!(matches!(err, Err(OptimError::NonFiniteGradient { tensor: "w2" })));
        assert_eq!(params, before);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn regularizer_grads_cover_the_partition() {
        let mut params = tiny_params(TaskHead::SoftmaxSingleLabel, 2, 3);
        params.att.mapv_inplace(|_| 1.0);
        let mut grads = params.zeros_like();
        let cfg = LossConfig::new(0.5, 2.0, LossTask::CrossEntropy);
        add_regularizer_grads(&params, &mut grads, &cfg);
        for (g, p) in grads.w1.iter().zip(params.w1.iter()) {
            assert!((g - p).abs() < 1e-15); // 2 * 0.5 * w
        }
        assert!(grads.att.iter().all(|&g| (g - 4.0).abs() < 1e-15)); // 2 * 2.0 * 1.0
        assert!(grads.b1.iter().all(|&g| g == 0.0));
        assert!(grads.conv_b.iter().all(|&g| g == 0.0));
    }
}
