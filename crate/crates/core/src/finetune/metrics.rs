use ndarray::ArrayView2;

use crate::error::{Error, Result};

fn argmax(row: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in row.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Top-1 accuracy. `labels[i]` lists the accepted classes of row `i`; a
/// prediction counts when its arg-max is any of them.
pub fn metric_accuracy(logits: ArrayView2<f32>, labels: &[Vec<usize>]) -> Result<f64> {
    if logits.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Metric("accuracy of an empty set".into()));
    }
    let hits = logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, l)| l.contains(&argmax(row.iter().map(|&v| f64::from(v)))))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Non-interpolated average precision of one ranking. Ties keep input
/// order. `None` when there are no positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Mean AP over the classes (columns) that have at least one positive.
pub fn metric_map(scores: ArrayView2<f32>, targets: ArrayView2<f32>) -> Result<f64> {
    if scores.dim() != targets.dim() {
        return Err(Error::Shape(format!(
            "scores {:?} vs labels {:?}",
            scores.dim(),
            targets.dim()
        )));
    }
    let aps: Vec<f64> = (0..scores.ncols())
        .filter_map(|c| {
            let s: Vec<f64> = scores.column(c).iter().map(|&v| f64::from(v)).collect();
            let p: Vec<bool> = targets.column(c).iter().map(|&v| v > 0.5).collect();
            average_precision(&s, &p)
        })
        .collect();
    if aps.is_empty() {
        return Err(Error::Metric("no class has a positive example".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}
