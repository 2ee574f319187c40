//! Linear probing of pooled hidden states.
//!
//! The probe is a softmax classifier trained by full-batch gradient descent
//! on frozen features; it never touches the model that produced them.
//! Pooling is the mean of last-token residual vectors over the probed
//! layers, where layer l means the residual stream after attention layer l.

use thiserror::Error;

use crate::attention::{derived_rng, standard_normal, HiddenStates};

#[derive(Debug, Error, PartialEq)]
pub enum ProbeError {
    #[error("probed layer set is empty")]
    EmptyLayers,
    #[error("probed layer {layer} out of range for {layers}-layer states")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("features and labels disagree in length or width")]
    ShapeMismatch,
    #[error("training split contains a single class")]
    SingleClass,
    #[error("label {label} outside class set of size {classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite value in features or parameters")]
    NonFinite,
}

/// Training hyperparameters. Defaults favor exact reproducibility over
/// speed: full-batch descent, fixed epoch count, seeded initialization.
#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            learning_rate: 0.1,
            epochs: 500,
            l2: 1e-4,
            seed: 0,
        }
    }
}

/// Mean of last-token vectors across the probed layers. Layer l selects
/// the residual stream after attention layer l (level l+1; level 0 is the
/// embedding).
pub fn pool_hidden(hidden: &HiddenStates, layers: &[usize]) -> Result<Vec<f64>, ProbeError> {
    if layers.is_empty() {
        return Err(ProbeError::EmptyLayers);
    }
    let model_layers = hidden.num_levels() - 1;
    let last = hidden.seq_len() - 1;
    let mut z = vec![0.0; hidden.dim()];
    for &l in layers {
        if l >= model_layers {
            return Err(ProbeError::LayerOutOfRange {
                layer: l,
                layers: model_layers,
            });
        }
        for (zi, v) in z.iter_mut().zip(&hidden.level(l + 1)[last]) {
            *zi += v;
        }
    }
    let inv = 1.0 / layers.len() as f64;
    z.iter_mut().for_each(|zi| *zi *= inv);
    Ok(z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    /// classes x feature-dim.
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl LinearProbe {
    pub fn classes(&self) -> usize {
        self.w.len()
    }

    pub fn dim(&self) -> usize {
        self.w.first().map_or(0, Vec::len)
    }

    fn seeded(classes: usize, dim: usize, seed: u64) -> LinearProbe {
        let mut rng = derived_rng(seed, "probe-init", classes as u64, dim as u64);
        let w = (0..classes)
            .map(|_| (0..dim).map(|_| 0.01 * standard_normal(&mut rng)).collect())
            .collect();
        LinearProbe {
            w,
            b: vec![0.0; classes],
        }
    }

    pub fn logits(&self, z: &[f64]) -> Vec<f64> {
        self.w
            .iter()
            .zip(&self.b)
            .map(|(row, b)| row.iter().zip(z).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }

    /// Argmax class; ties resolve to the lowest class index.
    pub fn predict(&self, z: &[f64]) -> usize {
        let logits = self.logits(z);
        let mut best = 0;
        for (c, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = c;
            }
        }
        best
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Mean softmax cross-entropy with an l2 penalty on the weights (not the
/// biases), plus its exact gradient.
pub fn ce_loss_and_grad(
    probe: &LinearProbe,
    features: &[Vec<f64>],
    labels: &[usize],
    l2: f64,
) -> Result<(f64, Vec<Vec<f64>>, Vec<f64>), ProbeError> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(ProbeError::ShapeMismatch);
    }
    let classes = probe.classes();
    let dim = probe.dim();
    let n = features.len() as f64;
    let mut loss = 0.0;
    let mut gw = vec![vec![0.0; dim]; classes];
    let mut gb = vec![0.0; classes];
    for (z, &y) in features.iter().zip(labels) {
        if z.len() != dim {
            return Err(ProbeError::ShapeMismatch);
        }
        if y >= classes {
            return Err(ProbeError::LabelOutOfRange { label: y, classes });
        }
        let p = softmax(&probe.logits(z));
        loss -= p[y].ln();
        for c in 0..classes {
            let delta = p[c] - if c == y { 1.0 } else { 0.0 };
            gb[c] += delta;
            for (g, &x) in gw[c].iter_mut().zip(z) {
                *g += delta * x;
            }
        }
    }
    loss /= n;
    for c in 0..classes {
        gb[c] /= n;
        for (g, &w) in gw[c].iter_mut().zip(&probe.w[c]) {
            *g = *g / n + l2 * w;
        }
    }
    let penalty: f64 = probe
        .w
        .iter()
        .flat_map(|row| row.iter())
        .map(|w| 0.5 * l2 * w * w)
        .sum();
    if !loss.is_finite() {
        return Err(ProbeError::NonFinite);
    }
    Ok((loss + penalty, gw, gb))
}

/// Full-batch gradient descent on softmax cross-entropy. Returns the probe
/// and the per-epoch loss trace (before each update).
pub fn train_probe(
    features: &[Vec<f64>],
    labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<(LinearProbe, Vec<f64>), ProbeError> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(ProbeError::EmptyDataset);
    }
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(ProbeError::SingleClass);
    }
    let classes = labels.iter().max().copied().unwrap_or(0) + 1;
    let dim = features[0].len();
    if features.iter().any(|z| z.len() != dim) {
        return Err(ProbeError::ShapeMismatch);
    }
    if features.iter().flatten().any(|x| !x.is_finite()) {
        return Err(ProbeError::NonFinite);
    }
    let mut probe = LinearProbe::seeded(classes, dim, cfg.seed);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let (loss, gw, gb) = ce_loss_and_grad(&probe, features, labels, cfg.l2)?;
        losses.push(loss);
        for c in 0..classes {
            for (w, g) in probe.w[c].iter_mut().zip(&gw[c]) {
                *w -= cfg.learning_rate * g;
            }
            probe.b[c] -= cfg.learning_rate * gb[c];
        }
    }
    Ok((probe, losses))
}

/// Per-class F1; None marks classes with zero gold support, which are
/// excluded from the macro average.
pub fn per_class_f1(
    predictions: &[usize],
    golds: &[usize],
    classes: usize,
) -> Result<Vec<Option<f64>>, ProbeError> {
    if predictions.is_empty() || predictions.len() != golds.len() {
        return Err(ProbeError::EmptyDataset);
    }
    for &l in predictions.iter().chain(golds) {
        if l >= classes {
            return Err(ProbeError::LabelOutOfRange { label: l, classes });
        }
    }
    let mut out = Vec::with_capacity(classes);
    for c in 0..classes {
        let tp = predictions
            .iter()
            .zip(golds)
            .filter(|(&p, &g)| p == c && g == c)
            .count() as f64;
        let fp = predictions
            .iter()
            .zip(golds)
            .filter(|(&p, &g)| p == c && g != c)
            .count() as f64;
        let fn_ = predictions
            .iter()
            .zip(golds)
            .filter(|(&p, &g)| p != c && g == c)
            .count() as f64;
        if tp + fn_ == 0.0 {
            out.push(None);
            continue;
        }
        let f1 = if tp == 0.0 {
            0.0
        } else {
            let precision = tp / (tp + fp);
            let recall = tp / (tp + fn_);
            2.0 * precision * recall / (precision + recall)
        };
        out.push(Some(f1));
    }
    Ok(out)
}

/// Unweighted mean of per-class F1 over classes with gold support.
pub fn macro_f1(predictions: &[usize], golds: &[usize], classes: usize) -> Result<f64, ProbeError> {
    let per = per_class_f1(predictions, golds, classes)?;
    let present: Vec<f64> = per.into_iter().flatten().collect();
    if present.is_empty() {
        return Err(ProbeError::EmptyDataset);
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

pub fn eval_macro_f1(
    probe: &LinearProbe,
    features: &[Vec<f64>],
    golds: &[usize],
) -> Result<f64, ProbeError> {
    if features.is_empty() || features.len() != golds.len() {
        return Err(ProbeError::EmptyDataset);
    }
    let predictions: Vec<usize> = features.iter().map(|z| probe.predict(z)).collect();
    macro_f1(&predictions, golds, probe.classes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::ToyModel;
    use crate::config::ModelConfig;
    use crate::mask::{PressKind, Regime, SurvivalMask};
    use crate::tol;
    use rand::Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            num_layers: 3,
            num_query_heads: 4,
            num_kv_heads: 2,
            head_dim: 6,
            max_seq: 32,
            bytes_per_element: 2,
            seed: 9,
        }
    }

    fn states() -> HiddenStates {
        let cfg = small_cfg();
        let model = ToyModel::build(&cfg).unwrap();
        let mask = SurvivalMask::full(
            Regime::Agnostic,
            PressKind::Chunk,
            cfg.num_layers,
            cfg.num_kv_heads,
            6,
        )
        .unwrap();
        model
            .forward(&[3, 1, 4, 1, 5, 9], Some(&mask))
            .unwrap()
            .hidden
    }

    #[test]
    fn pooling_means_last_token_vectors() {
        let h = states();
        let last = h.seq_len() - 1;
        let single = pool_hidden(&h, &[1]).unwrap();
        assert_eq!(single, h.level(2)[last].clone());
        let pair = pool_hidden(&h, &[0, 2]).unwrap();
        for (i, v) in pair.iter().enumerate() {
            let manual = 0.5 * (h.level(1)[last][i] + h.level(3)[last][i]);
            assert!((v - manual).abs() < 1e-12);
        }
        // Duplicated layer is idempotent under the mean.
        let dup = pool_hidden(&h, &[1, 1]).unwrap();
        assert_eq!(dup, single);
        assert_eq!(pool_hidden(&h, &[]).unwrap_err(), ProbeError::EmptyLayers);
        assert_eq!(
            pool_hidden(&h, &[3]).unwrap_err(),
            ProbeError::LayerOutOfRange { layer: 3, layers: 3 }
        );
    }

    fn separable_blobs(
        classes: usize,
        per_class: usize,
        dim: usize,
        seed: u64,
    ) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = derived_rng(seed, "blobs", classes as u64, dim as u64);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            for _ in 0..per_class {
                let mut z = vec![0.0; dim];
                // Class centers 6 units apart on axis c; jitter stays inside
                // the margin.
                z[c % dim] += 6.0 * (c / dim + 1) as f64;
                for v in z.iter_mut() {
                    *v += 0.3 * standard_normal(&mut rng);
                }
                features.push(z);
                labels.push(c);
            }
        }
        (features, labels)
    }

    #[test]
    fn separable_data_trains_to_perfect_accuracy() {
        let (features, labels) = separable_blobs(2, 20, 2, 1);
        let (probe, losses) = train_probe(&features, &labels, &ProbeConfig::default()).unwrap();
        let correct = features
            .iter()
            .zip(&labels)
            .filter(|(z, &y)| probe.predict(z) == y)
            .count();
        assert_eq!(correct, features.len());
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] + tol::LOSS_MONOTONE_SLACK, "loss increased: {w:?}");
        }
    }

    #[test]
    fn training_is_deterministic_and_duplication_invariant() {
        let (features, labels) = separable_blobs(3, 10, 4, 2);
        let cfg = ProbeConfig::default();
        let (a, _) = train_probe(&features, &labels, &cfg).unwrap();
        let (b, _) = train_probe(&features, &labels, &cfg).unwrap();
        assert_eq!(a, b);
        // Full-batch mean gradients are unchanged by duplicating the data.
        let doubled: Vec<Vec<f64>> = features.iter().chain(&features).cloned().collect();
        let doubled_labels: Vec<usize> = labels.iter().chain(&labels).copied().collect();
        let (c, _) = train_probe(&doubled, &doubled_labels, &cfg).unwrap();
        for (ra, rc) in a.w.iter().zip(&c.w) {
            for (x, y) in ra.iter().zip(rc) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (features, labels) = separable_blobs(2, 5, 3, 3);
        let cfg = ProbeConfig {
            epochs: 0,
            ..ProbeConfig::default()
        };
        let (probe, losses) = train_probe(&features, &labels, &cfg).unwrap();
        assert!(losses.is_empty());
        assert_eq!(probe, LinearProbe::seeded(2, 3, cfg.seed));
        let f1 = eval_macro_f1(&probe, &features, &labels).unwrap();
        assert!((0.0..=1.0).contains(&f1));
    }

    #[test]
    fn single_class_training_is_rejected() {
        let features = vec![vec![1.0], vec![2.0]];
        assert_eq!(
            train_probe(&features, &[1, 1], &ProbeConfig::default()).unwrap_err(),
            ProbeError::SingleClass
        );
    }

    #[test]
    fn macro_f1_matches_hand_confusions() {
        // Perfect predictions.
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        // All-one-class predictions on balanced two-class data: class 0 has
        // precision 1/2 and recall 1 (F1 = 2/3), class 1 scores 0.
        let f1 = macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert!((f1 - 1.0 / 3.0).abs() < 1e-12);
        // A class absent from gold is excluded even if predicted.
        let f1 = macro_f1(&[0, 2], &[0, 0], 3).unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn macro_f1_agrees_with_bruteforce_on_random_sets() {
        let mut rng = derived_rng(11, "f1-fuzz", 0, 0);
        for _ in 0..50 {
            let n = rng.gen_range(1..30);
            let classes = rng.gen_range(2..5usize);
            let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
            let golds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
            let ours = macro_f1(&preds, &golds, classes).unwrap();
            // Independent recount straight from the definition.
            let mut sum = 0.0;
            let mut present = 0usize;
            for c in 0..classes {
                let support = golds.iter().filter(|&&g| g == c).count();
                if support == 0 {
                    continue;
                }
                present += 1;
                let tp = preds
                    .iter()
                    .zip(&golds)
                    .filter(|(&p, &g)| p == c && g == c)
                    .count() as f64;
                let predicted = preds.iter().filter(|&&p| p == c).count() as f64;
                if tp > 0.0 {
                    let prec = tp / predicted;
                    let rec = tp / support as f64;
                    sum += 2.0 * prec * rec / (prec + rec);
                }
            }
            assert!((ours - sum / present as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let (features, labels) = separable_blobs(3, 4, 3, 5);
        let probe = LinearProbe::seeded(3, 3, 17);
        let l2 = 1e-4;
        let (_, gw, gb) = ce_loss_and_grad(&probe, &features, &labels, l2).unwrap();
        let h = 1e-5;
        let loss_at = |p: &LinearProbe| ce_loss_and_grad(p, &features, &labels, l2).unwrap().0;
        for c in 0..3 {
            for d in 0..3 {
                let mut plus = probe.clone();
                plus.w[c][d] += h;
                let mut minus = probe.clone();
                minus.w[c][d] -= h;
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let rel = (gw[c][d] - fd).abs() / gw[c][d].abs().max(fd.abs()).max(1.0);
                assert!(rel < tol::GRAD_CHECK_REL, "w[{c}][{d}]: {} vs {fd}", gw[c][d]);
            }
            let mut plus = probe.clone();
            plus.b[c] += h;
            let mut minus = probe.clone();
            minus.b[c] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let rel = (gb[c] - fd).abs() / gb[c].abs().max(fd.abs()).max(1.0);
            assert!(rel < tol::GRAD_CHECK_REL);
        }
    }
}
