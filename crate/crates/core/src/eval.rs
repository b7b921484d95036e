//! Ranking metrics: per-class average precision, mAP, and label-recovery
//! quality (ROC-AUC with average-rank tie handling, precision at a
//! threshold).

use std::path::Path;

use crate::error::{Error, Result};

/// One scored item: a stable ordinal (for deterministic tie-breaking), the
/// prediction score, and the binary relevance.
#[derive(Debug, Clone, Copy)]
pub struct ScoredItem {
    pub ordinal: usize,
    pub score: f64,
    pub relevant: bool,
}

/// Average precision of one ranking: `sum_k P(k) * r(k) / sum_k r(k)` with
/// r(k) the relevance indicator at rank k. Items sort by score descending;
/// ties break by ascending ordinal, so permuting the input order of tied
/// items cannot change the result. Returns None when nothing is relevant.
pub fn average_precision(items: &[ScoredItem]) -> Option<f64> {
    let positives = items.iter().filter(|i| i.relevant).count();
    if positives == 0 {
        return None;
    }
    let mut ranked: Vec<&ScoredItem> = items.iter().collect();
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.ordinal.cmp(&b.ordinal))
    });
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, item) in ranked.iter().enumerate() {
        if item.relevant {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

/// Per-class AP over a score matrix (images x classes, row-major) against
/// binary truth. Classes without a positive example yield None.
pub fn per_class_ap(
    scores: &[Vec<f64>],
    truth: &[Vec<u8>],
    num_classes: usize,
) -> Vec<Option<f64>> {
    (0..num_classes)
        .map(|c| {
            let items: Vec<ScoredItem> = scores
                .iter()
                .zip(truth)
                .enumerate()
                .map(|(i, (s, t))| ScoredItem { ordinal: i, score: s[c], relevant: t[c] == 1 })
                .collect();
            average_precision(&items)
        })
        .collect()
}

/// Unweighted mean over the classes that have an AP; classes without
/// positives are excluded. Errors if every class is excluded.
pub fn mean_average_precision(aps: &[Option<f64>]) -> Result<f64> {
    let included: Vec<f64> = aps.iter().filter_map(|a| *a).collect();
    if included.is_empty() {
        return Err(Error::Eval(
            "mAP undefined: no class has a positive example".to_string(),
        ));
    }
    Ok(included.iter().sum::<f64>() / included.len() as f64)
}

/// mAP of a score matrix against binary truth.
pub fn map_of_scores(scores: &[Vec<f64>], truth: &[Vec<u8>], num_classes: usize) -> Result<f64> {
    mean_average_precision(&per_class_ap(scores, truth, num_classes))
}

/// Expected AP of random scores per class is the positive prevalence; the
/// mean over included classes is the chance-level mAP baseline.
pub fn prevalence_baseline(truth: &[Vec<u8>], num_classes: usize) -> Result<f64> {
    let n = truth.len();
    if n == 0 {
        return Err(Error::Eval("empty evaluation split".to_string()));
    }
    let prevalences: Vec<f64> = (0..num_classes)
        .filter_map(|c| {
            let pos = truth.iter().filter(|t| t[c] == 1).count();
            (pos > 0).then_some(pos as f64 / n as f64)
        })
        .collect();
    if prevalences.is_empty() {
        return Err(Error::Eval("no class has a positive example".to_string()));
    }
    Ok(prevalences.iter().sum::<f64>() / prevalences.len() as f64)
}

/// Label-recovery quality over hidden entries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryQuality {
    /// ROC-AUC of the recovered scores against the hidden ground truth,
    /// with tied scores handled by average rank.
    pub auc: f64,
    /// Fraction of entries above the threshold that are truly positive;
    /// None when nothing clears the threshold.
    pub precision_at_tau: Option<f64>,
    pub hidden_positives: usize,
    pub hidden_negatives: usize,
}

/// Scores recovery over (score, truth) pairs for entries whose label was
/// hidden. Returns None when either class is absent (AUC undefined).
pub fn recovery_quality(entries: &[(f64, bool)], tau: f64) -> Option<RecoveryQuality> {
    let n_pos = entries.iter().filter(|(_, y)| *y).count();
    let n_neg = entries.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }

    // Average ranks: sort by score, give tied runs the mean of their ranks.
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| {
        entries[a]
            .0
            .partial_cmp(&entries[b].0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut ranks = vec![0.0f64; entries.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && entries[order[j + 1]].0 == entries[order[i]].0 {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mean_rank;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = entries
        .iter()
        .zip(&ranks)
        .filter(|((_, y), _)| *y)
        .map(|(_, r)| r)
        .sum();
    let auc = (rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos as f64 * n_neg as f64);

    let above: Vec<&(f64, bool)> = entries.iter().filter(|(s, _)| *s > tau).collect();
    let precision_at_tau = if above.is_empty() {
        None
    } else {
        Some(above.iter().filter(|(_, y)| *y).count() as f64 / above.len() as f64)
    };

    Some(RecoveryQuality {
        auc,
        precision_at_tau,
        hidden_positives: n_pos,
        hidden_negatives: n_neg,
    })
}

/// Formats the per-class AP dump (`class,ap,num_pos`); excluded classes
/// print an empty AP field.
pub fn per_class_ap_csv(aps: &[Option<f64>], truth: &[Vec<u8>]) -> String {
    let mut out = String::from("class,ap,num_pos\n");
    for (c, ap) in aps.iter().enumerate() {
        let pos = truth.iter().filter(|t| t[c] == 1).count();
        match ap {
            Some(v) => out.push_str(&format!("{c},{v},{pos}\n")),
            None => out.push_str(&format!("{c},,{pos}\n")),
        }
    }
    out
}

pub fn write_per_class_ap_csv(aps: &[Option<f64>], truth: &[Vec<u8>], path: &Path) -> Result<()> {
    crate::fsio::atomic_write(path, per_class_ap_csv(aps, truth).as_bytes())
}
