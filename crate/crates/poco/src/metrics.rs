//! Classification metrics: accuracy, macro precision/recall/F1, exact
//! ROC-AUC, and a CSV embedding export with a 2-D PCA projection.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scores (rows summing to 1) with ground-truth labels.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    num_classes: usize,
    scores: Vec<f64>,
    labels: Vec<usize>,
}

impl PredictionSet {
    pub fn new(num_classes: usize, scores: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid(format!("{num_classes} classes is not a classification task")));
        }
        if labels.is_empty() {
            return Err(Error::invalid("empty prediction set".to_string()));
        }
        if scores.len() != labels.len() * num_classes {
            return Err(Error::shape(format!(
                "{} scores for {} samples x {num_classes} classes",
                scores.len(),
                labels.len()
            )));
        }
        for (i, row) in scores.chunks(num_classes).enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&s| !(0.0..=1.0 + 1e-9).contains(&s)) {
                return Err(Error::invalid(format!(
                    "scores for sample {i} are not a probability row (sum {sum})"
                )));
            }
        }
        for (i, &l) in labels.iter().enumerate() {
            if l >= num_classes {
                return Err(Error::invalid(format!(
                    "label {l} of sample {i} outside [0, {num_classes})"
                )));
            }
        }
        Ok(PredictionSet { num_classes, scores, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn score(&self, sample: usize, class: usize) -> f64 {
        self.scores[sample * self.num_classes + class]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// argmax per row, ties to the lowest class index
    pub fn predictions(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let mut best = 0;
                for c in 1..self.num_classes {
                    if self.score(i, c) > self.score(i, best) {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    /// ground-truth count; 0 means the class is absent from the labels
    pub support: usize,
    pub predicted: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// false when the denominator was 0 and the value fell back to 0
    pub precision_defined: bool,
    pub recall_defined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub auc: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
}

/// true-label-major confusion counts: `counts[label][prediction]`
pub fn confusion_matrix(pred: &PredictionSet) -> Vec<Vec<usize>> {
    let k = pred.num_classes();
    let mut counts = vec![vec![0usize; k]; k];
    for (&label, p) in pred.labels().iter().zip(pred.predictions()) {
        counts[label][p] += 1;
    }
    counts
}

/// Accuracy plus per-class precision/recall/F1. Zero denominators fall
/// back to 0 with the corresponding `*_defined` flag cleared; macro
/// averages run over classes present in the labels only.
pub fn confusion_and_prf(pred: &PredictionSet) -> Result<MetricsReport> {
    let k = pred.num_classes();
    let counts = confusion_matrix(pred);
    let n = pred.len();
    let correct: usize = (0..k).map(|c| counts[c][c]).sum();

    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let support: usize = counts[c].iter().sum();
        let predicted: usize = (0..k).map(|t| counts[t][c]).sum();
        let tp = counts[c][c] as f64;
        let precision_defined = predicted > 0;
        let recall_defined = support > 0;
        let precision = if precision_defined { tp / predicted as f64 } else { 0.0 };
        let recall = if recall_defined { tp / support as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassMetrics {
            class: c,
            support,
            predicted,
            precision,
            recall,
            f1,
            precision_defined,
            recall_defined,
        });
    }
    let present: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.support > 0).collect();
    let mean = |f: fn(&ClassMetrics) -> f64| {
        present.iter().map(|m| f(m)).sum::<f64>() / present.len() as f64
    };
    Ok(MetricsReport {
        n,
        accuracy: correct as f64 / n as f64,
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        auc: None,
        per_class,
    })
}

/// Exact AUC as the pairwise probability that a positive outscores a
/// negative, ties counting one half. Errors when either side is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::shape(format!(
            "binary_auc: {} scores, {} flags",
            scores.len(),
            positive.len()
        )));
    }
    let pos: Vec<f64> = scores.iter().zip(positive).filter(|(_, &p)| p).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(positive).filter(|(_, &p)| !p).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid(format!(
            "AUC undefined: {} positives, {} negatives",
            pos.len(),
            neg.len()
        )));
    }
    let mut favorable = 0.0f64;
    for &p in &pos {
        for &q in &neg {
            if p > q {
                favorable += 1.0;
            } else if p == q {
                favorable += 0.5;
            }
        }
    }
    Ok(favorable / (pos.len() as f64 * neg.len() as f64))
}

/// Binary tasks score class 1 against the rest; with more classes this
/// is the unweighted one-vs-rest average over every class that has both
/// a positive and a negative example.
pub fn roc_auc(pred: &PredictionSet) -> Result<f64> {
    let k = pred.num_classes();
    let n = pred.len();
    let column = |c: usize| -> Vec<f64> { (0..n).map(|i| pred.score(i, c)).collect() };
    if k == 2 {
        let positive: Vec<bool> = pred.labels().iter().map(|&l| l == 1).collect();
        return binary_auc(&column(1), &positive);
    }
    let mut aucs = Vec::new();
    for c in 0..k {
        let positive: Vec<bool> = pred.labels().iter().map(|&l| l == c).collect();
        let pos_count = positive.iter().filter(|&&p| p).count();
        if pos_count == 0 || pos_count == n {
            continue;
        }
        aucs.push(binary_auc(&column(c), &positive)?);
    }
    if aucs.is_empty() {
        return Err(Error::invalid("AUC undefined: labels contain a single class".to_string()));
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// Full report: confusion-based metrics plus AUC.
pub fn evaluate(pred: &PredictionSet) -> Result<MetricsReport> {
    let mut report = confusion_and_prf(pred)?;
    report.auc = Some(roc_auc(pred)?);
    Ok(report)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix; returns
/// (eigenvalues, eigenvectors as columns), sorted by descending
/// eigenvalue.
fn jacobi_eigh(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = a.len();
    let mut v = vec![vec![0.0; d]; d];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let scale: f64 = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off.sqrt() <= 1e-14 * scale {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p][q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..d {
                    let (aip, aiq) = (a[i][p], a[i][q]);
                    a[i][p] = c * aip - s * aiq;
                    a[i][q] = s * aip + c * aiq;
                }
                for j in 0..d {
                    let (apj, aqj) = (a[p][j], a[q][j]);
                    a[p][j] = c * apj - s * aqj;
                    a[q][j] = s * apj + c * aqj;
                }
                for row in v.iter_mut() {
                    let (vip, viq) = (row[p], row[q]);
                    row[p] = c * vip - s * viq;
                    row[q] = s * vip + c * viq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let eigvals: Vec<f64> = order.iter().map(|&i| a[i][i]).collect();
    let eigvecs: Vec<Vec<f64>> = order
        .iter()
        .map(|&col| (0..d).map(|row| v[row][col]).collect())
        .collect();
    (eigvals, eigvecs)
}

/// Result of projecting features onto their top two principal components.
#[derive(Debug, Clone)]
pub struct Pca2 {
    pub pc1: Vec<f64>,
    pub pc2: Vec<f64>,
    /// fraction of total variance carried by each of the two components
    pub explained_variance_ratio: [f64; 2],
}

/// PCA via the covariance eigendecomposition. Component signs are fixed
/// so each eigenvector's largest-magnitude coordinate is positive.
pub fn pca2(features: &Tensor<f64>) -> Result<Pca2> {
    let shape = features.shape();
    if shape.len() != 2 {
        return Err(Error::shape(format!("pca2: features {shape:?}, expected (n, d)")));
    }
    let (n, d) = (shape[0], shape[1]);
    if n < 2 {
        return Err(Error::invalid(format!("pca2: need at least 2 points, got {n}")));
    }
    let data = features.data();
    let mut mean = vec![0.0; d];
    for row in data.chunks(d) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![vec![0.0; d]; d];
    for row in data.chunks(d) {
        for i in 0..d {
            let xi = row[i] - mean[i];
            for j in i..d {
                cov[i][j] += xi * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= (n - 1) as f64;
            cov[j][i] = cov[i][j];
        }
    }
    let (eigvals, mut eigvecs) = jacobi_eigh(cov);
    for vec in eigvecs.iter_mut().take(2) {
        let lead = (0..d).max_by(|&i, &j| vec[i].abs().total_cmp(&vec[j].abs())).unwrap_or(0);
        if vec[lead] < 0.0 {
            for x in vec.iter_mut() {
                *x = -*x;
            }
        }
    }
    let total: f64 = eigvals.iter().map(|&l| l.max(0.0)).sum::<f64>().max(1e-300);
    let project = |vec: &[f64]| -> Vec<f64> {
        data.chunks(d)
            .map(|row| row.iter().zip(vec).zip(&mean).map(|((&x, &v), &m)| (x - m) * v).sum())
            .collect()
    };
    let pc2 = if d >= 2 { project(&eigvecs[1]) } else { vec![0.0; n] };
    Ok(Pca2 {
        pc1: project(&eigvecs[0]),
        pc2,
        explained_variance_ratio: [
            eigvals[0].max(0.0) / total,
            if d >= 2 { eigvals[1].max(0.0) / total } else { 0.0 },
        ],
    })
}

/// Write features to CSV as `id,label,pc1,pc2,f0..f{D−1}`, one row per
/// sample plus the header.
pub fn embed_export(features: &Tensor<f64>, labels: &[usize], path: &Path) -> Result<()> {
    let shape = features.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape(format!(
            "embed_export: features {shape:?} with {} labels",
            labels.len()
        )));
    }
    let (n, d) = (shape[0], shape[1]);
    let pca = pca2(features)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = Vec::new();
    write!(out, "id,label,pc1,pc2")?;
    for j in 0..d {
        write!(out, ",f{j}")?;
    }
    writeln!(out)?;
    for i in 0..n {
        write!(out, "{i},{},{},{}", labels[i], pca.pc1[i], pca.pc2[i])?;
        for &x in features.row(i) {
            write!(out, ",{x}")?;
        }
        writeln!(out)?;
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_hot_scores(k: usize, preds: &[usize]) -> Vec<f64> {
        // rows are near-one-hot probability vectors selecting the
        // prediction
        let mut out = Vec::with_capacity(k * preds.len());
        for &p in preds {
            for c in 0..k {
                out.push(if c == p { 1.0 - 0.01 * (k - 1) as f64 } else { 0.01 });
            }
        }
        out
    }

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let labels = vec![0, 1, 2, 2, 1, 0];
        let pred = PredictionSet::new(3, one_hot_scores(3, &labels), labels).unwrap();
        let report = evaluate(&pred).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.macro_precision, 1.0);
        assert_eq!(report.macro_recall, 1.0);
        assert_eq!(report.macro_f1, 1.0);
        assert_eq!(report.auc, Some(1.0));
    }

    #[test]
    fn hand_counted_two_class_report() {
        let labels = vec![0, 0, 1, 1];
        let preds = [0, 1, 1, 1];
        let pred = PredictionSet::new(2, one_hot_scores(2, &preds), labels).unwrap();
        let report = confusion_and_prf(&pred).unwrap();
        assert_eq!(report.accuracy, 0.75);
        let c0 = &report.per_class[0];
        let c1 = &report.per_class[1];
        assert_eq!(c0.precision, 1.0);
        assert_eq!(c0.recall, 0.5);
        assert!((c1.precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(c1.recall, 1.0);
        // macro F1 = (2/3 + 4/5) / 2 = 11/15
        assert!((report.macro_f1 - 11.0 / 15.0).abs() < 1e-12);
        assert!((report.macro_f1 - 0.7333333333333333).abs() < 1e-12);
    }

    #[test]
    fn macro_average_skips_absent_classes() {
        let labels = vec![1, 1];
        let pred = PredictionSet::new(3, one_hot_scores(3, &[1, 1]), labels).unwrap();
        let report = confusion_and_prf(&pred).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.macro_f1, 1.0);
        let absent = &report.per_class[0];
        assert_eq!(absent.support, 0);
        assert!(!absent.recall_defined);
        assert!(!absent.precision_defined);
        assert_eq!(absent.precision, 0.0);
    }

    #[test]
    fn never_predicted_class_flags_undefined_precision() {
        let labels = vec![0, 1, 2];
        let preds = [0, 1, 1]; // class 2 never predicted
        let pred = PredictionSet::new(3, one_hot_scores(3, &preds), labels).unwrap();
        let report = confusion_and_prf(&pred).unwrap();
        let c2 = &report.per_class[2];
        assert!(!c2.precision_defined);
        assert!(c2.recall_defined);
        assert_eq!(c2.precision, 0.0);
        assert_eq!(c2.f1, 0.0);
    }

    #[test]
    fn prediction_set_validation() {
        assert!(PredictionSet::new(2, vec![], vec![]).is_err());
        // row does not sum to 1
        assert!(PredictionSet::new(2, vec![0.9, 0.3], vec![0]).is_err());
        // label out of range
        assert!(PredictionSet::new(2, vec![0.5, 0.5], vec![2]).is_err());
        // argmax ties resolve to the lowest class
        let pred = PredictionSet::new(3, vec![0.4, 0.4, 0.2], vec![1]).unwrap();
        assert_eq!(pred.predictions(), vec![0]);
    }

    #[test]
    fn auc_frozen_cases() {
        let perfect = binary_auc(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(perfect, 1.0);
        let tied = binary_auc(&[0.8, 0.8, 0.3, 0.1], &[true, false, true, false]).unwrap();
        assert!((tied - 0.625).abs() < 1e-15);
        let flipped = binary_auc(&[0.8, 0.8, 0.3, 0.1], &[false, true, false, true]).unwrap();
        assert!((tied + flipped - 1.0).abs() < 1e-15);
        assert!(binary_auc(&[0.5, 0.5], &[true, true]).is_err());
    }

    #[test]
    fn multiclass_auc_is_macro_one_vs_rest() {
        // 3 classes, class 2 absent: average the two defined one-vs-rest
        // scores
        let scores = vec![
            0.7, 0.2, 0.1, //
            0.3, 0.5, 0.2, //
            0.4, 0.4, 0.2, //
            0.1, 0.8, 0.1,
        ];
        let labels = vec![0, 0, 1, 1];
        let pred = PredictionSet::new(3, scores.clone(), labels.clone()).unwrap();
        let auc = roc_auc(&pred).unwrap();
        let col = |c: usize| -> Vec<f64> { (0..4).map(|i| scores[i * 3 + c]).collect() };
        let a0 = binary_auc(&col(0), &[true, true, false, false]).unwrap();
        let a1 = binary_auc(&col(1), &[false, false, true, true]).unwrap();
        assert!((auc - (a0 + a1) / 2.0).abs() < 1e-15);
        // all labels identical: no class has both sides
        let degenerate = PredictionSet::new(3, one_hot_scores(3, &[0, 0]), vec![0, 0]).unwrap();
        assert!(roc_auc(&degenerate).is_err());
    }

    /// trapezoid over the tie-grouped ROC curve — independent oracle
    fn trapezoid_auc(scores: &[f64], positive: &[bool]) -> f64 {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let p = positive.iter().filter(|&&x| x).count() as f64;
        let n = positive.len() as f64 - p;
        let mut curve = vec![(0.0f64, 0.0f64)];
        for &t in &thresholds {
            let tp = scores.iter().zip(positive).filter(|(&s, &l)| s >= t && l).count() as f64;
            let fp = scores.iter().zip(positive).filter(|(&s, &l)| s >= t && !l).count() as f64;
            curve.push((fp / n, tp / p));
        }
        curve
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum()
    }

    #[test]
    fn pairwise_auc_equals_trapezoid_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..50 {
            let n = 3 + (rng.random::<u32>() % 40) as usize;
            // quantized scores force plenty of ties
            let scores: Vec<f64> =
                (0..n).map(|_| f64::from(rng.random::<u32>() % 8) / 8.0).collect();
            let mut positive: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
            if positive.iter().all(|&p| p) {
                positive[0] = false;
            }
            if positive.iter().all(|&p| !p) {
                positive[0] = true;
            }
            let pairwise = binary_auc(&scores, &positive).unwrap();
            let trap = trapezoid_auc(&scores, &positive);
            assert!((pairwise - trap).abs() < 1e-9, "{pairwise} vs {trap}");
        }
    }

    #[test]
    fn metrics_survive_sample_and_class_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let n = 30;
        let k = 3;
        let labels: Vec<usize> = (0..n).map(|_| (rng.random::<u32>() % k as u32) as usize).collect();
        let mut scores = Vec::with_capacity(n * k);
        for _ in 0..n {
            let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.1).collect();
            let sum: f64 = raw.iter().sum();
            scores.extend(raw.into_iter().map(|x| x / sum));
        }
        let pred = PredictionSet::new(k, scores.clone(), labels.clone()).unwrap();
        let base = evaluate(&pred).unwrap();

        // permute the samples
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                p.swap(i, (rng.random::<u32>() as usize) % (i + 1));
            }
            p
        };
        let shuffled_scores: Vec<f64> =
            perm.iter().flat_map(|&i| scores[i * k..(i + 1) * k].to_vec()).collect();
        let shuffled_labels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let shuffled =
            evaluate(&PredictionSet::new(k, shuffled_scores, shuffled_labels).unwrap()).unwrap();
        assert!((base.accuracy - shuffled.accuracy).abs() < 1e-12);
        assert!((base.macro_f1 - shuffled.macro_f1).abs() < 1e-12);
        assert!((base.auc.unwrap() - shuffled.auc.unwrap()).abs() < 1e-12);

        // relabel the classes with the cycle 0->1->2->0
        let relabel = [1usize, 2, 0];
        let remapped_scores: Vec<f64> = (0..n)
            .flat_map(|i| {
                let mut row = vec![0.0; k];
                for c in 0..k {
                    row[relabel[c]] = scores[i * k + c];
                }
                row
            })
            .collect();
        let remapped_labels: Vec<usize> = labels.iter().map(|&l| relabel[l]).collect();
        let remapped =
            evaluate(&PredictionSet::new(k, remapped_scores, remapped_labels).unwrap()).unwrap();
        assert!((base.macro_precision - remapped.macro_precision).abs() < 1e-12);
        assert!((base.macro_recall - remapped.macro_recall).abs() < 1e-12);
        assert!((base.macro_f1 - remapped.macro_f1).abs() < 1e-12);
        assert!((base.auc.unwrap() - remapped.auc.unwrap()).abs() < 1e-12);
        assert!((base.accuracy - remapped.accuracy).abs() < 1e-12);
    }

    #[test]
    fn jacobi_recovers_a_known_spectrum() {
        let (vals, vecs) = jacobi_eigh(vec![vec![2.0, 1.0], vec![1.0, 2.0]]);
        assert!((vals[0] - 3.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
        let inv_sqrt2 = 1.0 / 2.0f64.sqrt();
        assert!((vecs[0][0].abs() - inv_sqrt2).abs() < 1e-12);
        assert!((vecs[0][1].abs() - inv_sqrt2).abs() < 1e-12);
    }

    #[test]
    fn two_point_pca_has_rank_one() {
        let features = Tensor::new(vec![2, 3], vec![1.0, 2.0, 0.0, 4.0, 2.0, 0.0]).unwrap();
        let pca = pca2(&features).unwrap();
        // difference is (3, 0, 0): pc1 lies along +x, scores ±1.5
        assert!((pca.pc1[0] + 1.5).abs() < 1e-12);
        assert!((pca.pc1[1] - 1.5).abs() < 1e-12);
        assert!(pca.pc2.iter().all(|&x| x.abs() < 1e-9));
        assert!((pca.explained_variance_ratio[0] - 1.0).abs() < 1e-9);
        assert!(pca2(&Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap()).is_err());
    }

    #[test]
    fn isotropic_cloud_has_no_dominant_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let features = Tensor::<f64>::randn(vec![1000, 8], 1.0, &mut rng);
        let pca = pca2(&features).unwrap();
        assert!(
            pca.explained_variance_ratio[0] < 0.25,
            "evr {:?}",
            pca.explained_variance_ratio
        );
    }

    #[test]
    fn embed_export_writes_deterministic_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embed.csv");
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let features = Tensor::<f64>::randn(vec![5, 4], 1.0, &mut rng);
        let labels = vec![0, 1, 2, 1, 0];
        embed_export(&features, &labels, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[0], "id,label,pc1,pc2,f0,f1,f2,f3");
        assert!(lines[1].starts_with("0,0,"));
        let first = std::fs::read(&path).unwrap();
        embed_export(&features, &labels, &path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
        assert!(embed_export(&features, &[0, 1], &path).is_err());
    }
}
