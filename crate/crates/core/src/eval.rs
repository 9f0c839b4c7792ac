//! Top-1 classification and cosine kNN retrieval of student features.
//!
//! Each row already stands for one whole sample, so there is no clip
//! averaging: a sample's feature is its student latent row.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingDataset, Split};
use crate::matrix::cosine_similarity_matrix;
use crate::model::{classify, student_forward, ModelParams};
use crate::{Error, Matrix, Result, Scalar};

pub const DEFAULT_KS: [usize; 4] = [1, 5, 10, 20];

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class per row of `inputs`.
pub fn predict<T: Scalar>(params: &ModelParams<T>, inputs: &Matrix<T>) -> Result<Vec<usize>> {
    let probs = classify(params, &student_forward(params, inputs)?)?;
    Ok(probs.row_iter().map(argmax).collect())
}

/// Fraction of rows whose predicted class matches the label.
pub fn top1_accuracy<T: Scalar>(params: &ModelParams<T>, split: &Split<T>) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Parameter("cannot score an empty split".into()));
    }
    let preds = predict(params, &split.video_inputs)?;
    Ok(accuracy(&preds, &split.labels))
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Accuracy per class; `None` for classes absent from `labels`.
pub fn per_class_accuracy(predictions: &[usize], labels: &[usize], num_classes: usize) -> Vec<Option<f64>> {
    let mut hits = vec![0usize; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        counts[l] += 1;
        hits[l] += usize::from(p == l);
    }
    hits.iter()
        .zip(&counts)
        .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// Requested K → recall. K values above the number of targets are
    /// evaluated at the number of targets.
    pub recall_at: BTreeMap<usize, f64>,
    pub num_queries: usize,
    pub num_targets: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Target indices ordered by decreasing cosine similarity to each query;
/// ties go to the lower target index.
pub fn neighbour_ranking<T: Scalar>(queries: &Matrix<T>, targets: &Matrix<T>) -> Result<Vec<Vec<usize>>> {
    let sims = cosine_similarity_matrix(queries, targets)?;
    Ok(sims
        .row_iter()
        .map(|row| {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
            order
        })
        .collect())
}

/// Exhaustive cosine kNN recall: a query hits at K when any of its K
/// nearest targets shares its label.
pub fn knn_recall<T: Scalar>(
    queries: &Matrix<T>,
    query_labels: &[usize],
    targets: &Matrix<T>,
    target_labels: &[usize],
    ks: &[usize],
) -> Result<RetrievalReport> {
    if queries.rows() == 0 || targets.rows() == 0 {
        return Err(Error::Parameter("retrieval needs at least one query and one target".into()));
    }
    if queries.rows() != query_labels.len() || targets.rows() != target_labels.len() {
        return Err(Error::shape("knn_retrieval", "feature rows and labels disagree"));
    }
    let ranking = neighbour_ranking(queries, targets)?;
    let num_targets = targets.rows();
    // rank of the first same-class target, if any
    let first_hit: Vec<Option<usize>> = ranking
        .iter()
        .zip(query_labels)
        .map(|(order, &label)| order.iter().position(|&t| target_labels[t] == label))
        .collect();

    let mut report = RetrievalReport {
        num_queries: queries.rows(),
        num_targets,
        ..Default::default()
    };
    for &k in ks {
        if k == 0 {
            return Err(Error::Parameter("K must be at least 1".into()));
        }
        let effective = if k > num_targets {
            report
                .warnings
                .push(format!("K={k} exceeds {num_targets} targets; clamped"));
            num_targets
        } else {
            k
        };
        let hits = first_hit.iter().filter(|r| r.is_some_and(|r| r < effective)).count();
        report.recall_at.insert(k, hits as f64 / queries.rows() as f64);
    }
    Ok(report)
}

/// Retrieval with test rows as queries and train rows as targets.
pub fn knn_retrieval<T: Scalar>(
    params: &ModelParams<T>,
    dataset: &EmbeddingDataset<T>,
    ks: &[usize],
) -> Result<RetrievalReport> {
    let queries = student_forward(params, &dataset.test.video_inputs)?;
    let targets = student_forward(params, &dataset.train.video_inputs)?;
    knn_recall(&queries, &dataset.test.labels, &targets, &dataset.train.labels, ks)
}
