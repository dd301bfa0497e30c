use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{Objective, Supervision};
use super::model::{Gradients, StudentModel};
use crate::dataset::StudentSet;
use crate::error::{Error, Result};
use crate::metric::Measure;
use crate::selgraph::SelectionMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub supervision: Supervision,
    /// λ the selection mask was solved at; recorded for provenance.
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub measure: Measure,
    pub reg_scale: f64,
    pub normalize_targets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            supervision: Supervision::Sc,
            lambda: -2.0,
            learning_rate: 0.01,
            batch_size: 32,
            epochs: 20,
            seed: 0,
            measure: Measure::CosSim,
            reg_scale: 1.0,
            normalize_targets: false,
        }
    }
}

impl TrainConfig {
    pub fn objective(&self) -> Objective {
        Objective {
            supervision: self.supervision,
            reg_scale: self.reg_scale,
            normalize_targets: self.normalize_targets,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!("bad learning rate {}", self.learning_rate)));
        }
        if !(self.reg_scale >= 0.0 && self.reg_scale.is_finite()) {
            return Err(Error::Invalid(format!("bad reg_scale {}", self.reg_scale)));
        }
        Ok(())
    }
}

/// Average per-sample losses over one epoch, measured during the pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub cls: f64,
    pub reg: f64,
    pub total: f64,
}

/// Mini-batch SGD on `objective`. Batch gradients are averaged; the sample
/// order is reshuffled every epoch from a stream seeded by `config.seed`.
fn run_sgd(
    model: &mut StudentModel,
    set: &StudentSet,
    objective: Objective,
    mask: &SelectionMask,
    config: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    config.validate()?;
    model.check_compatible(set)?;
    let mut samples: Vec<(usize, usize)> = (0..set.len())
        .flat_map(|i| (0..set.versions()).map(move |j| (i, j)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        samples.shuffle(&mut rng);
        let (mut cls, mut reg) = (0.0, 0.0);
        for batch in samples.chunks(config.batch_size) {
            let mut grads = Gradients::zeros_like(model);
            for &(i, j) in batch {
                let r = &set.records()[i];
                let (c, g) = objective.sample(model, r, j, mask.alpha[i], Some(&mut grads))?;
                cls += c;
                reg += g;
            }
            if !(cls + reg).is_finite() {
                return Err(Error::Diverged { epoch, loss: cls + reg });
            }
            model.apply_gradients(&grads, config.learning_rate / batch.len() as f64);
        }
        let n = samples.len() as f64;
        let m = EpochMetrics {
            epoch,
            cls: cls / n,
            reg: reg / n,
            total: (cls + reg) / n,
        };
        info!("epoch {epoch}: cls {:.6} reg {:.6} total {:.6}", m.cls, m.reg, m.total);
        history.push(m);
    }
    Ok(history)
}

/// Stage one: classification-only training on the degraded inputs.
pub fn pretrain_student(model: &mut StudentModel, set: &StudentSet, config: &TrainConfig) -> Result<Vec<EpochMetrics>> {
    let objective = Objective {
        supervision: Supervision::C,
        ..config.objective()
    };
    run_sgd(model, set, objective, &SelectionMask::empty(set.len()), config)
}

/// Teacher-supervised fine-tuning under `config.supervision`. A mask is
/// required for `s` and `sc`; `dc` regresses every face and `c` none.
pub fn finetune(
    model: &mut StudentModel,
    set: &StudentSet,
    mask: Option<&SelectionMask>,
    config: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    let objective = config.objective();
    let mask = objective.effective_mask(set, mask)?;
    run_sgd(model, set, objective, &mask, config)
}

/// Coordinates checked when the model has more trainable parameters.
const GRADIENT_CHECK_MAX_COORDS: usize = 2000;

/// Compares the analytic gradient against central finite differences and
/// returns the largest relative error
/// `|g_a - g_n| / max(|g_a|, |g_n|, 1e-7)` over the checked coordinates.
/// Frozen parameters are skipped.
pub fn gradient_check(
    model: &StudentModel,
    set: &StudentSet,
    mask: Option<&SelectionMask>,
    objective: Objective,
    epsilon: f64,
) -> Result<f64> {
    let (_, grads) = objective.loss_and_gradient(model, set, mask)?;
    let analytic = grads.flatten();
    let mut coords: Vec<usize> = (0..analytic.len()).filter(|&k| !model.is_frozen_param(k)).collect();
    if coords.len() > GRADIENT_CHECK_MAX_COORDS {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        coords.shuffle(&mut rng);
        coords.truncate(GRADIENT_CHECK_MAX_COORDS);
        coords.sort_unstable();
    }
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for k in coords {
        let original = *probe.param_mut(k);
        *probe.param_mut(k) = original + epsilon;
        let up = objective.loss(&probe, set, mask)?;
        *probe.param_mut(k) = original - epsilon;
        let down = objective.loss(&probe, set, mask)?;
        *probe.param_mut(k) = original;
        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic[k];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthesize, SynthConfig};
    use crate::distiller::loss::regression_loss;
    use crate::distiller::model::{init_student, transfer_student, Architecture};

    fn toy_set() -> StudentSet {
        synthesize(&SynthConfig {
            class_count: 3,
            per_class_count: 10,
            feature_dim: 16,
            input_dim: 8,
            versions: 4,
            outlier_fraction: 0.0,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn toy_model(set: &StudentSet, seed: u64) -> StudentModel {
        let mut arch = Architecture::with_hidden(set.input_dim(), &[16], set.feature_dim(), set.class_count());
        arch.identity_dim = 8;
        init_student(&arch, seed).unwrap()
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let set = toy_set();
        let mut model = toy_model(&set, 1);
        let before = model.clone();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            ..TrainConfig::default()
        };
        pretrain_student(&mut model, &set, &cfg).unwrap();
        finetune(&mut model, &set, Some(&SelectionMask::full(set.len())), &cfg).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn pretraining_reduces_loss() {
        let set = toy_set();
        let mut model = toy_model(&set, 2);
        let cfg = TrainConfig {
            epochs: 50,
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let history = pretrain_student(&mut model, &set, &cfg).unwrap();
        assert_eq!(history.len(), 50);
        assert!(history.last().unwrap().total < history[0].total);
        assert!(history.iter().all(|m| m.reg == 0.0));
    }

    #[test]
    fn finetune_sc_reduces_regression_over_first_epochs() {
        let set = toy_set();
        let mut model = toy_model(&set, 3);
        let mask = SelectionMask::full(set.len());
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let mut prev = regression_loss(&model, &set, &mask).unwrap();
        for epoch in 0..10 {
            let cfg = TrainConfig { seed: epoch, ..cfg.clone() };
            finetune(&mut model, &set, Some(&mask), &cfg).unwrap();
            let now = regression_loss(&model, &set, &mask).unwrap();
            assert!(now < prev, "epoch {epoch}: {now} >= {prev}");
            prev = now;
        }
    }

    #[test]
    fn training_is_deterministic() {
        let set = toy_set();
        let cfg = TrainConfig { epochs: 3, ..TrainConfig::default() };
        let run = || {
            let mut m = toy_model(&set, 5);
            let h = finetune(&mut m, &set, None, &TrainConfig { supervision: Supervision::Dc, ..cfg.clone() }).unwrap();
            (m, h)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_is_reported() {
        let set = toy_set();
        let mut model = toy_model(&set, 1);
        let cfg = TrainConfig {
            learning_rate: 1e6,
            epochs: 20,
            supervision: Supervision::Dc,
            ..TrainConfig::default()
        };
        let err = finetune(&mut model, &set, None, &cfg).unwrap_err();
        assert!(
            matches!(err, Error::Diverged { .. } | Error::NonFiniteActivation { .. }),
            "{err}"
        );
    }

    #[test]
    fn missing_mask_for_selective_modes() {
        let set = toy_set();
        let mut model = toy_model(&set, 1);
        for s in [Supervision::S, Supervision::Sc] {
            let cfg = TrainConfig { supervision: s, epochs: 1, ..TrainConfig::default() };
            assert!(finetune(&mut model, &set, None, &cfg).is_err());
        }
        let cfg = TrainConfig { supervision: Supervision::C, epochs: 1, ..TrainConfig::default() };
        finetune(&mut model, &set, None, &cfg).unwrap();
    }

    #[test]
    fn frozen_layers_do_not_move() {
        let set = toy_set();
        let mut model = toy_model(&set, 1);
        pretrain_student(&mut model, &set, &TrainConfig { epochs: 2, ..TrainConfig::default() }).unwrap();
        let mut t = transfer_student(&model, set.class_count(), 17).unwrap();
        let trunk_before = t.trunk.clone();
        let head_before = t.head.clone();
        let cfg = TrainConfig { epochs: 3, learning_rate: 0.1, supervision: Supervision::Dc, ..TrainConfig::default() };
        finetune(&mut t, &set, None, &cfg).unwrap();
        assert_eq!(t.trunk, trunk_before);
        assert_ne!(t.head, head_before);
    }

    #[test]
    fn gradient_check_linear_quadratic_case() {
        let set = toy_set();
        let mut arch = Architecture::with_hidden(set.input_dim(), &[], set.feature_dim(), set.class_count());
        arch.identity_dim = 4;
        let model = init_student(&arch, 3).unwrap();
        let err = gradient_check(&model, &set, Some(&SelectionMask::full(set.len())), Objective::new(Supervision::S), 1e-5).unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn gradient_check_zero_gradient_point() {
        let set = toy_set();
        let model = toy_model(&set, 4);
        let mask = SelectionMask::empty(set.len());
        let (loss, grads) = Objective::new(Supervision::S).loss_and_gradient(&model, &set, Some(&mask)).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.flatten().iter().all(|&g| g == 0.0));
        let err = gradient_check(&model, &set, Some(&mask), Objective::new(Supervision::S), 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn unselected_records_add_no_regression_gradient() {
        let set = toy_set();
        let model = toy_model(&set, 6);
        let objective = Objective::new(Supervision::S);
        let mut mask = SelectionMask::empty(set.len());
        mask.alpha[3] = true;
        let (_, g1) = objective.loss_and_gradient(&model, &set, Some(&mask)).unwrap();
        let mut only = mask.clone();
        only.alpha[3] = false;
        let (_, g0) = objective.loss_and_gradient(&model, &set, Some(&only)).unwrap();
        assert!(g0.flatten().iter().all(|&g| g == 0.0));
        assert!(g1.flatten().iter().any(|&g| g != 0.0));
    }
}
