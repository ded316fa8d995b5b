use std::cmp::Ordering;

/// Candidate positions ordered by descending score; ties keep their original
/// order.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    idx
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Returns 0.5 when either class is absent.
pub fn impression_auc(labels: &[u8], scores: &[f64]) -> f64 {
    assert_eq!(labels.len(), scores.len());
    // rank-sum with average ranks for ties
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return 0.5;
    }
    let sum: f64 = labels.iter().zip(&ranks).filter(|(&l, _)| l == 1).map(|(_, &r)| r).sum();
    (sum - (pos * (pos + 1)) as f64 / 2.0) / (pos * neg) as f64
}

/// Mean reciprocal rank of the positives; 0 without positives.
pub fn mrr(labels: &[u8], scores: &[f64]) -> f64 {
    let order = ranking(scores);
    let (mut sum, mut n) = (0.0, 0usize);
    for (r, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            sum += 1.0 / (r + 1) as f64;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Binary-gain nDCG over the top `k`; 0 without positives.
pub fn ndcg_at_k(labels: &[u8], scores: &[f64], k: usize) -> f64 {
    let order = ranking(scores);
    let gain = |rank: usize| 1.0 / ((rank + 2) as f64).log2();
    let dcg: f64 = order.iter().take(k).enumerate().filter(|(_, &i)| labels[i] == 1).map(|(r, _)| gain(r)).sum();
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let ideal: f64 = (0..pos.min(k)).map(gain).sum();
    if ideal == 0.0 {
        0.0
    } else {
        dcg / ideal
    }
}

/// AUC, MRR, nDCG@5 and nDCG@10 of one impression.
pub fn impression_metrics(labels: &[u8], scores: &[f64]) -> [f64; 4] {
    [
        impression_auc(labels, scores),
        mrr(labels, scores),
        ndcg_at_k(labels, scores, 5),
        ndcg_at_k(labels, scores, 10),
    ]
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub auc: f64,
    pub mrr: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    /// Impressions averaged over.
    pub count: usize,
    /// Impressions without both a positive and a negative.
    pub skipped: usize,
    pub per_impression: Option<Vec<[f64; 4]>>,
}

impl MetricsReport {
    /// Equal-weight mean over impressions that have both classes, in order.
    pub fn aggregate<'a>(items: impl IntoIterator<Item = (&'a [u8], &'a [f64])>, keep: bool) -> Self {
        let mut sums = [0.0; 4];
        let mut rows = Vec::new();
        let (mut count, mut skipped) = (0, 0);
        for (labels, scores) in items {
            let pos = labels.iter().filter(|&&l| l == 1).count();
            if pos == 0 || pos == labels.len() {
                skipped += 1;
                continue;
            }
            let m = impression_metrics(labels, scores);
            for (s, v) in sums.iter_mut().zip(m) {
                *s += v;
            }
            if keep {
                rows.push(m);
            }
            count += 1;
        }
        let mean = |s: f64| if count == 0 { 0.0 } else { s / count as f64 };
        Self {
            auc: mean(sums[0]),
            mrr: mean(sums[1]),
            ndcg5: mean(sums[2]),
            ndcg10: mean(sums[3]),
            count,
            skipped,
            per_impression: keep.then_some(rows),
        }
    }

    /// `auc=… mrr=… ndcg5=… ndcg10=…`
    pub fn to_kv(&self) -> String {
        format!(
            "auc={} mrr={} ndcg5={} ndcg10={}",
            self.auc, self.mrr, self.ndcg5, self.ndcg10
        )
    }
}
