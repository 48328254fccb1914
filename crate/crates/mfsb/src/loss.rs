//! Matching scores and the weighted multi-term training loss.
//!
//! Every element that an experiment activates contributes: a hard+soft
//! baseline cross-entropy on un-fused features, a base cross-entropy per
//! configured prompt form, and one cross-entropy per fusion stage that ran.
//! Terms are stored unweighted; the total applies the configured weights.

use crate::error::{Error, Result};
use crate::fusion::Stage;
use crate::prompt::{BaseForm, Element};
use crate::tensor::{Tape, Tensor};

// ── Weights ─────────────────────────────────────────────────────────────────

/// Coefficients of the total loss plus the matching temperature.
#[derive(Copy, Clone, Debug)]
pub struct LossWeights {
    /// Weight of the pair hard+soft baseline term.
    pub baseline_pair: f64,
    /// Weight of each primitive (attr, obj) hard+soft baseline term.
    pub baseline_attr_obj: f64,
    /// Weight of the base-form terms.
    pub alpha: f64,
    /// Weight of the inter-stage terms.
    pub beta: f64,
    /// Weight of the intra-stage terms.
    pub gamma: f64,
    /// Softmax temperature dividing every cosine score.
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights {
            baseline_pair: 0.1,
            baseline_attr_obj: 0.01,
            alpha: 0.2,
            beta: 0.2,
            gamma: 0.2,
            temperature: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let coeffs = [
            ("baseline_pair", self.baseline_pair),
            ("baseline_attr_obj", self.baseline_attr_obj),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ];
        for (name, w) in coeffs {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("loss weight {name} must be finite and ≥ 0, got {w}")));
            }
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be finite and > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    fn baseline_weight(&self, element: Element) -> f64 {
        match element {
            Element::Pair => self.baseline_pair,
            Element::Attr | Element::Obj => self.baseline_attr_obj,
        }
    }
}

// ── Scores ──────────────────────────────────────────────────────────────────

/// Temperature-scaled cosine scores of one pooled vector against every
/// class feature row.
pub fn class_logits(
    tape: &Tape,
    v: &Tensor,
    class_feats: &Tensor,
    temperature: f64,
) -> Result<Tensor> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be finite and > 0, got {temperature}")));
    }
    Ok(tape.scale(&tape.cosine_rows(v, class_feats)?, 1.0 / temperature))
}

/// Cross-entropy of one element's logits against its target class.
pub fn element_loss(tape: &Tape, logits: &Tensor, target: usize) -> Result<Tensor> {
    tape.cross_entropy_from_logits(logits, target)
}

// ── Term assembly ───────────────────────────────────────────────────────────

/// Raw (unweighted) loss scalars of one active element.
pub struct ElementTerms {
    pub element: Element,
    /// Hard-prompt cross-entropy on un-fused features.
    pub baseline_hard: Tensor,
    /// Soft-prompt cross-entropy on un-fused features.
    pub baseline_soft: Tensor,
    /// One cross-entropy per configured prompt form, on un-fused features.
    pub base: Vec<(BaseForm, Tensor)>,
    /// Form-summed cross-entropy after the inter stage, iff it ran.
    pub inter: Option<Tensor>,
    /// Form-summed cross-entropy after the intra stage, iff it ran.
    pub intra: Option<Tensor>,
}

/// Named unweighted term values plus the weighted total. The total is kept
/// both as a graph scalar (for backward) and as a plain number.
pub struct LossBreakdown {
    pub terms: Vec<(String, f64)>,
    pub total: Tensor,
    pub total_value: f64,
}

impl LossBreakdown {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// CSV header matching [`LossBreakdown::csv_row`]: step, one column per
    /// term, then the total.
    pub fn csv_header(&self) -> String {
        let mut cols = vec!["step".to_string()];
        cols.extend(self.terms.iter().map(|(n, _)| n.clone()));
        cols.push("total".to_string());
        cols.join(",")
    }

    pub fn csv_row(&self, step: usize) -> String {
        let mut cols = vec![step.to_string()];
        cols.extend(self.terms.iter().map(|(_, v)| format!("{v:.17e}")));
        cols.push(format!("{:.17e}", self.total_value));
        cols.join(",")
    }
}

/// Weighted sum over every present term:
/// baseline·(hard+soft) + α·base + β·inter + γ·intra, per active element.
pub fn total_loss(tape: &Tape, terms: &[ElementTerms], weights: &LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    if terms.is_empty() {
        return Err(Error::Contract("total_loss needs at least one active element".into()));
    }
    let mut named: Vec<(String, f64)> = Vec::new();
    let mut total: Option<Tensor> = None;
    let accumulate = |tape: &Tape, acc: &mut Option<Tensor>, t: &Tensor, w: f64| -> Result<()> {
        let weighted = tape.scale(t, w);
        *acc = Some(match acc.take() {
            Some(prev) => tape.add(&prev, &weighted)?,
            None => weighted,
        });
        Ok(())
    };
    for element in terms {
        let key = element.element.key();
        let baseline = tape.add(&element.baseline_hard, &element.baseline_soft)?;
        named.push((format!("{key}.hard_soft_baseline"), baseline.item()));
        accumulate(tape, &mut total, &baseline, weights.baseline_weight(element.element))?;
        for (form, t) in &element.base {
            named.push((format!("{key}.{}", form.key()), t.item()));
            accumulate(tape, &mut total, t, weights.alpha)?;
        }
        for (stage, t) in [(Stage::Inter, &element.inter), (Stage::Intra, &element.intra)] {
            if let Some(t) = t {
                named.push((format!("{key}.{}", stage.key()), t.item()));
                accumulate(tape, &mut total, t, match stage {
                    Stage::Inter => weights.beta,
                    Stage::Intra => weights.gamma,
                })?;
            }
        }
    }
    let total = total.expect("at least one term");
    let total_value = total.item();
    if !total_value.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    Ok(LossBreakdown { terms: named, total, total_value })
}
