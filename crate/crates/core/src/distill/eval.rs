//! Model evaluation: accuracy, F1, Pearson correlation and teacher
//! agreement on held-out data.

use crate::data::Sample;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Metric bundle; fields are `None` when they do not apply to the task
/// (e.g. Pearson correlation for classification).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub pearson: Option<f64>,
    pub agreement: Option<f64>,
    pub n: usize,
}

impl EvalMetrics {
    pub fn as_map(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        if let Some(v) = self.accuracy {
            m.insert("accuracy".to_string(), v);
        }
        if let Some(v) = self.f1 {
            m.insert("f1".to_string(), v);
        }
        if let Some(v) = self.pearson {
            m.insert("pearson".to_string(), v);
        }
        if let Some(v) = self.agreement {
            m.insert("teacher_agreement".to_string(), v);
        }
        m
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Predicted class of one sample (classification heads).
pub fn predict_class(model: &EncoderModel, tokens: &[usize]) -> Result<usize> {
    let trace = model.forward_detached(tokens)?;
    Ok(argmax(&trace.logits.value()))
}

/// Evaluate a model on a dataset; `reference` adds prediction agreement
/// against a second model (the teacher-agreement fidelity metric).
pub fn evaluate(
    model: &EncoderModel,
    samples: &[Sample],
    reference: Option<&EncoderModel>,
) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let num_classes = model.config().num_classes;
    if num_classes == 1 {
        // regression: Pearson correlation between predictions and targets
        let mut preds = Vec::with_capacity(samples.len());
        let mut targets = Vec::with_capacity(samples.len());
        for s in samples {
            let trace = model.forward_detached(&s.tokens)?;
            preds.push(trace.logits.value()[0]);
            targets.push(s.label.value());
        }
        let pearson = pearson_corr(&preds, &targets);
        return Ok(EvalMetrics {
            accuracy: None,
            f1: None,
            pearson: Some(pearson),
            agreement: None,
            n: samples.len(),
        });
    }

    let mut correct = 0usize;
    let mut agree = 0usize;
    let mut preds = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        let label = s
            .label
            .class()
            .ok_or_else(|| Error::Input("classification model on a regression sample".into()))?;
        let pred = predict_class(model, &s.tokens)?;
        if pred == label {
            correct += 1;
        }
        if let Some(r) = reference {
            if predict_class(r, &s.tokens)? == pred {
                agree += 1;
            }
        }
        preds.push(pred);
        labels.push(label);
    }
    let n = samples.len();
    Ok(EvalMetrics {
        accuracy: Some(correct as f64 / n as f64),
        f1: Some(f1_score(&preds, &labels, num_classes)),
        pearson: None,
        agreement: reference.map(|_| agree as f64 / n as f64),
        n,
    })
}

/// F1 score: positive-class F1 for binary tasks, macro-averaged F1
/// otherwise.
pub fn f1_score(preds: &[usize], labels: &[usize], num_classes: usize) -> f64 {
    let class_f1 = |class: usize| -> f64 {
        let tp = preds
            .iter()
            .zip(labels)
            .filter(|&(&p, &l)| p == class && l == class)
            .count() as f64;
        let fp = preds
            .iter()
            .zip(labels)
            .filter(|&(&p, &l)| p == class && l != class)
            .count() as f64;
        let fne = preds
            .iter()
            .zip(labels)
            .filter(|&(&p, &l)| p != class && l == class)
            .count() as f64;
        if 2.0 * tp + fp + fne == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fne)
        }
    };
    if num_classes == 2 {
        class_f1(1)
    } else {
        (0..num_classes).map(class_f1).sum::<f64>() / num_classes as f64
    }
}

fn pearson_corr(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx.sqrt() * vy.sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Label, Sample};
    use crate::encoder::EncoderConfig;

    fn tiny_model(num_classes: usize, seed: u64) -> EncoderModel {
        EncoderModel::init(
            &EncoderConfig {
                vocab_size: 8,
                max_len: 4,
                num_layers: 1,
                hidden_size: 8,
                num_heads: 2,
                ffn_size: 16,
                num_classes,
            },
            seed,
        )
        .unwrap()
    }

    fn binary_samples() -> Vec<Sample> {
        vec![
            Sample { tokens: vec![3, 3, 3, 3], label: Label::Class(0) },
            Sample { tokens: vec![4, 3, 3, 3], label: Label::Class(1) },
            Sample { tokens: vec![4, 4, 3, 3], label: Label::Class(0) },
            Sample { tokens: vec![4, 4, 4, 3], label: Label::Class(1) },
        ]
    }

    #[test]
    fn model_agrees_with_itself() {
        let model = tiny_model(2, 1);
        let m = evaluate(&model, &binary_samples(), Some(&model)).unwrap();
        assert_eq!(m.agreement, Some(1.0));
    }

    #[test]
    fn constant_predictor_on_balanced_set_is_half_right() {
        let model = tiny_model(2, 1);
        model.parameters().iter().for_each(|(name, t)| {
            if name == "head" {
                t.data_mut(|d| d.fill(0.0));
            }
        });
        let m = evaluate(&model, &binary_samples(), None).unwrap();
        assert_eq!(m.accuracy, Some(0.5));
    }

    #[test]
    fn all_positive_predictor_f1_closed_form() {
        // 4 samples, 2 positives: F1 = 2P/(P+T) = 2*2/(2+4) = 2/3
        let preds = vec![1, 1, 1, 1];
        let labels = vec![0, 1, 0, 1];
        let f1 = f1_score(&preds, &labels, 2);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_dataset_is_an_input_error() {
        let model = tiny_model(2, 1);
        assert!(matches!(evaluate(&model, &[], None), Err(Error::Input(_))));
    }

    #[test]
    fn regression_reports_pearson_only() {
        let model = tiny_model(1, 3);
        let samples = vec![
            Sample { tokens: vec![3, 3, 3, 3], label: Label::Value(0.0) },
            Sample { tokens: vec![4, 4, 4, 4], label: Label::Value(1.0) },
            Sample { tokens: vec![4, 3, 4, 3], label: Label::Value(0.5) },
        ];
        let m = evaluate(&model, &samples, None).unwrap();
        assert!(m.pearson.is_some());
        assert!(m.accuracy.is_none() && m.f1.is_none());
    }
}
