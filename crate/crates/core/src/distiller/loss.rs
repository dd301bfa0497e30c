use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::model::{Gradients, StudentModel};
use crate::dataset::{FaceRecord, StudentSet};
use crate::error::{Error, Result};
use crate::metric::norm;
use crate::selgraph::SelectionMask;

/// Supervision signal used during fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    /// Class labels only, no distillation.
    C,
    /// Selective feature regression only.
    S,
    /// Selective regression plus class labels.
    Sc,
    /// Regression on every face (no selection) plus class labels.
    Dc,
}

impl Supervision {
    pub const ALL: [Supervision; 4] = [Supervision::C, Supervision::S, Supervision::Sc, Supervision::Dc];

    pub fn uses_classification(self) -> bool {
        !matches!(self, Supervision::S)
    }

    pub fn uses_regression(self) -> bool {
        !matches!(self, Supervision::C)
    }

    /// Whether a selection mask must be supplied.
    pub fn needs_mask(self) -> bool {
        matches!(self, Supervision::S | Supervision::Sc)
    }
}

impl fmt::Display for Supervision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Supervision::C => "c",
            Supervision::S => "s",
            Supervision::Sc => "sc",
            Supervision::Dc => "dc",
        })
    }
}

impl FromStr for Supervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "c" => Ok(Supervision::C),
            "s" => Ok(Supervision::S),
            "sc" => Ok(Supervision::Sc),
            "dc" => Ok(Supervision::Dc),
            other => Err(Error::UnknownSupervision(other.to_string())),
        }
    }
}

/// Joint fine-tuning objective: summed softmax cross-entropy over every
/// degraded input plus masked squared error between the mimic tap and the
/// teacher feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub supervision: Supervision,
    /// Multiplier on the regression term; 1 gives both terms equal weight.
    pub reg_scale: f64,
    /// Regress onto unit-length teacher features instead of raw ones.
    pub normalize_targets: bool,
}

impl Objective {
    pub fn new(supervision: Supervision) -> Self {
        Self {
            supervision,
            reg_scale: 1.0,
            normalize_targets: false,
        }
    }

    /// The mask actually applied to the regression term.
    pub fn effective_mask(&self, set: &StudentSet, mask: Option<&SelectionMask>) -> Result<SelectionMask> {
        match self.supervision {
            Supervision::Dc => Ok(SelectionMask::full(set.len())),
            Supervision::C => Ok(SelectionMask::empty(set.len())),
            Supervision::S | Supervision::Sc => {
                let mask = mask.ok_or_else(|| {
                    Error::Invalid(format!("supervision `{}` needs a selection mask", self.supervision))
                })?;
                check_mask(set, mask)?;
                Ok(mask.clone())
            }
        }
    }

    fn target(&self, record: &FaceRecord) -> Vec<f64> {
        if self.normalize_targets {
            let n = norm(&record.teacher_feature);
            record.teacher_feature.iter().map(|v| v / n).collect()
        } else {
            record.teacher_feature.clone()
        }
    }

    /// Loss terms of one degraded input; accumulates gradients when asked.
    pub(crate) fn sample(
        &self,
        model: &StudentModel,
        record: &FaceRecord,
        version: usize,
        selected: bool,
        grads: Option<&mut Gradients>,
    ) -> Result<(f64, f64)> {
        let trace = model.trace(&record.degraded_inputs[version])?;
        let t = model.trunk.len();

        let mut cls = 0.0;
        let mut d_logits = None;
        if self.supervision.uses_classification() {
            let probs = softmax(trace.logits());
            cls = cross_entropy(trace.logits(), record.class_index());
            if grads.is_some() {
                let mut d = probs;
                d[record.class_index()] -= 1.0;
                d_logits = Some(d);
            }
        }

        let mut reg = 0.0;
        let mut d_mimic = None;
        if self.supervision.uses_regression() && selected {
            let target = self.target(record);
            let diff: Vec<f64> = trace.mimic(t).iter().zip(&target).map(|(m, f)| m - f).collect();
            reg = self.reg_scale * diff.iter().map(|d| d * d).sum::<f64>();
            if grads.is_some() {
                d_mimic = Some(diff.iter().map(|d| 2.0 * self.reg_scale * d).collect::<Vec<_>>());
            }
        }

        if let Some(g) = grads {
            if d_logits.is_some() || d_mimic.is_some() {
                model.backward(&trace, d_logits.as_deref(), d_mimic.as_deref(), g);
            }
        }
        Ok((cls, reg))
    }

    /// Total loss and its two terms over the whole set.
    pub fn loss_terms(&self, model: &StudentModel, set: &StudentSet, mask: Option<&SelectionMask>) -> Result<LossTerms> {
        model.check_compatible(set)?;
        let mask = self.effective_mask(set, mask)?;
        let mut terms = LossTerms::default();
        for r in set.records() {
            for j in 0..set.versions() {
                let (c, g) = self.sample(model, r, j, mask.alpha[r.id], None)?;
                terms.cls += c;
                terms.reg += g;
            }
        }
        Ok(terms)
    }

    pub fn loss(&self, model: &StudentModel, set: &StudentSet, mask: Option<&SelectionMask>) -> Result<f64> {
        self.loss_terms(model, set, mask).map(|t| t.total())
    }

    /// Loss and analytic gradient over the whole set.
    pub fn loss_and_gradient(
        &self,
        model: &StudentModel,
        set: &StudentSet,
        mask: Option<&SelectionMask>,
    ) -> Result<(f64, Gradients)> {
        model.check_compatible(set)?;
        let mask = self.effective_mask(set, mask)?;
        let mut grads = Gradients::zeros_like(model);
        let mut total = 0.0;
        for r in set.records() {
            for j in 0..set.versions() {
                let (c, g) = self.sample(model, r, j, mask.alpha[r.id], Some(&mut grads))?;
                total += c + g;
            }
        }
        Ok((total, grads))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub cls: f64,
    pub reg: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.cls + self.reg
    }
}

pub(crate) fn check_mask(set: &StudentSet, mask: &SelectionMask) -> Result<()> {
    if mask.len() != set.len() {
        return Err(Error::Invalid(format!(
            "mask has {} entries but the set has {} records",
            mask.len(),
            set.len()
        )));
    }
    Ok(())
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// `-log softmax(z)[label]`, computed through log-sum-exp.
pub fn cross_entropy(z: &[f64], label: usize) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - z[label]
}

/// Summed cross-entropy over every degraded input of every record.
pub fn classification_loss(model: &StudentModel, set: &StudentSet) -> Result<f64> {
    Objective::new(Supervision::C).loss_terms(model, set, None).map(|t| t.cls)
}

/// `Σ_i α_i Σ_j ‖mimic(x_ij) - f_i‖²`.
pub fn regression_loss(model: &StudentModel, set: &StudentSet, mask: &SelectionMask) -> Result<f64> {
    Objective::new(Supervision::S).loss_terms(model, set, Some(mask)).map(|t| t.reg)
}

/// Unit-weighted combination selected by `supervision`.
pub fn total_loss(model: &StudentModel, set: &StudentSet, mask: Option<&SelectionMask>, supervision: Supervision) -> Result<f64> {
    Objective::new(supervision).loss(model, set, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthesize, SynthConfig};
    use crate::distiller::model::{init_student, Architecture};

    fn small_set() -> StudentSet {
        synthesize(&SynthConfig {
            class_count: 3,
            per_class_count: 4,
            feature_dim: 8,
            input_dim: 4,
            versions: 2,
            outlier_fraction: 0.25,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn small_model(set: &StudentSet, seed: u64) -> StudentModel {
        let mut arch = Architecture::with_hidden(set.input_dim(), &[6], set.feature_dim(), set.class_count());
        arch.identity_dim = 5;
        init_student(&arch, seed).unwrap()
    }

    #[test]
    fn uniform_logits_cost_ln_c() {
        assert!((cross_entropy(&[0.3; 4], 2) - 4f64.ln()).abs() < 1e-12);
        assert!((cross_entropy(&[0.3; 4], 2) - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn saturated_correct_logit_costs_nothing() {
        assert!(cross_entropy(&[800.0, 0.0, -5.0], 0) < 1e-300);
        assert!((cross_entropy(&[0.0, 800.0], 0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn classification_matches_scalar_oracle() {
        let set = small_set();
        let model = small_model(&set, 3);
        let mut oracle = 0.0;
        for r in set.records() {
            for x in &r.degraded_inputs {
                let (_, z) = model.forward(x).unwrap();
                let denom: f64 = z.iter().map(|v| v.exp()).sum();
                oracle += -(z[r.label - 1].exp() / denom).ln();
            }
        }
        let got = classification_loss(&model, &set).unwrap();
        assert!((got - oracle).abs() < 1e-10 * oracle.max(1.0), "{got} vs {oracle}");
    }

    #[test]
    fn empty_mask_has_no_regression() {
        let set = small_set();
        let model = small_model(&set, 3);
        assert_eq!(regression_loss(&model, &set, &SelectionMask::empty(set.len())).unwrap(), 0.0);
        assert!(regression_loss(&model, &set, &SelectionMask::empty(set.len() - 1)).is_err());
    }

    #[test]
    fn perfect_mimic_has_no_regression() {
        let rec = FaceRecord {
            id: 0,
            label: 1,
            teacher_feature: vec![0.5, 2.0],
            degraded_inputs: vec![vec![0.5, 2.0]],
            outlier_flag: None,
        };
        let set = StudentSet::new(vec![rec], 1, 2, 2, 1).unwrap();
        let mut model = init_student(&Architecture::with_hidden(2, &[], 2, 1), 0).unwrap();
        model.trunk[0].weights = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(regression_loss(&model, &set, &SelectionMask::full(1)).unwrap(), 0.0);
        // Shift the output by (1, -2): loss is 1 + 4.
        model.trunk[0].bias = vec![1.0, -2.0];
        assert_eq!(regression_loss(&model, &set, &SelectionMask::full(1)).unwrap(), 5.0);
    }

    #[test]
    fn single_record_regression_by_hand() {
        let set = small_set();
        let model = small_model(&set, 8);
        let r = &set.records()[5];
        let (m, _) = model.forward(&r.degraded_inputs[1]).unwrap();
        let (m0, _) = model.forward(&r.degraded_inputs[0]).unwrap();
        let sq = |m: &[f64]| m.iter().zip(&r.teacher_feature).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let mut mask = SelectionMask::empty(set.len());
        mask.alpha[5] = true;
        let got = regression_loss(&model, &set, &mask).unwrap();
        assert!((got - (sq(&m0) + sq(&m))).abs() < 1e-12);
    }

    #[test]
    fn total_loss_decomposition() {
        let set = small_set();
        let model = small_model(&set, 4);
        let mask: SelectionMask = (0..set.len()).map(|i| i % 3 != 0).collect::<Vec<_>>().into();
        let cls = classification_loss(&model, &set).unwrap();
        let reg = regression_loss(&model, &set, &mask).unwrap();
        let sc = total_loss(&model, &set, Some(&mask), Supervision::Sc).unwrap();
        assert!((sc - (cls + reg)).abs() < 1e-12 * sc.abs().max(1.0));
        assert_eq!(total_loss(&model, &set, None, Supervision::C).unwrap(), cls);
        assert_eq!(total_loss(&model, &set, Some(&mask), Supervision::S).unwrap(), reg);

        let full = SelectionMask::full(set.len());
        assert_eq!(
            total_loss(&model, &set, None, Supervision::Dc).unwrap(),
            total_loss(&model, &set, Some(&full), Supervision::Sc).unwrap()
        );
        let empty = SelectionMask::empty(set.len());
        assert_eq!(total_loss(&model, &set, Some(&empty), Supervision::Sc).unwrap(), cls);
    }

    #[test]
    fn supervision_tags() {
        for s in Supervision::ALL {
            assert_eq!(s.to_string().parse::<Supervision>().unwrap(), s);
        }
        assert!(matches!("cd".parse::<Supervision>(), Err(Error::UnknownSupervision(_))));
        let set = small_set();
        let model = small_model(&set, 1);
        assert!(total_loss(&model, &set, None, Supervision::Sc).is_err());
    }
}
