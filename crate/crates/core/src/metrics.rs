//! Evaluation metrics.

use crate::diffcore::NdArray;
use crate::error::{Error, Result};

fn check_rows(pred: &NdArray, n: usize, op: &'static str) -> Result<()> {
    if pred.ndim() != 2 || pred.shape()[0] != n {
        return Err(Error::Shape {
            op,
            left: pred.shape().to_vec(),
            right: vec![n],
        });
    }
    Ok(())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose largest logit is the labelled class.
pub fn accuracy(logits: &NdArray, classes: &[usize]) -> Result<f64> {
    check_rows(logits, classes.len(), "accuracy")?;
    if classes.is_empty() {
        return Err(Error::Input("accuracy of an empty set".into()));
    }
    let hits = classes.iter().enumerate().filter(|&(i, &c)| argmax(logits.row(i)) == c).count();
    Ok(hits as f64 / classes.len() as f64)
}

/// Area under the ROC curve as the Mann–Whitney statistic: the probability
/// that a random positive outscores a random negative, ties counting half.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Input(format!("{} scores for {} labels", scores.len(), positive.len())));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Input("AUROC needs both positive and negative examples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks over ties, 1-based
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| positive[k]).count() as f64 * avg;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Binary AUROC on the softmax margin, or the macro average of one-vs-rest
/// AUROCs over the classes present.
pub fn auroc_from_logits(logits: &NdArray, classes: &[usize]) -> Result<f64> {
    check_rows(logits, classes.len(), "auroc")?;
    let c = logits.shape()[1];
    let probs: Vec<Vec<f64>> = (0..classes.len())
        .map(|i| {
            let row = logits.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect();
    let mut total = 0.0;
    let mut used = 0;
    for k in 0..c {
        let pos: Vec<bool> = classes.iter().map(|&y| y == k).collect();
        if pos.iter().all(|&p| p) || !pos.iter().any(|&p| p) {
            continue;
        }
        let scores: Vec<f64> = probs.iter().map(|p| p[k]).collect();
        total += auroc(&scores, &pos)?;
        used += 1;
        if c == 2 {
            return Ok(total);
        }
    }
    if used == 0 {
        return Err(Error::Input("AUROC needs at least two classes present".into()));
    }
    Ok(total / used as f64)
}

pub fn mse(pred: &NdArray, target: &NdArray) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape {
            op: "mse",
            left: pred.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    let n = pred.len() as f64;
    Ok(pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n)
}
