use crate::error::{Error, Result};

/// ROC AUC as the Mann–Whitney rank statistic, averaging ranks over ties.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::shape("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("AUC scores".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::data(
            "AUC is undefined when the ground truth has a single class",
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// `counts[truth][pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(truth: &[usize], pred: &[usize], k: usize) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::shape("truth and predictions differ in length"));
        }
        let mut counts = vec![vec![0; k]; k];
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= k || p >= k {
                return Err(Error::data(format!("class {} outside 0..{k}", t.max(p))));
            }
            counts[t][p] += 1;
        }
        Ok(Self { counts })
    }

    /// Binary confusion from `(tp, tn, fp, fn)`; class 1 is positive.
    pub fn binary(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        Self {
            counts: vec![vec![tn, fp], vec![fn_, tp]],
        }
    }

    fn k(&self) -> usize {
        self.counts.len()
    }

    fn f1_of(&self, c: usize) -> f64 {
        let tp = self.counts[c][c] as f64;
        let fp: f64 = (0..self.k()).filter(|&t| t != c).map(|t| self.counts[t][c] as f64).sum();
        let fn_: f64 = (0..self.k()).filter(|&p| p != c).map(|p| self.counts[c][p] as f64).sum();
        let denom = 2.0 * tp + fp + fn_;
        if denom == 0.0 {
            0.0
        } else {
            2.0 * tp / denom
        }
    }

    /// Positive-class F1 for two classes, macro F1 otherwise.
    pub fn f1(&self) -> f64 {
        if self.k() == 2 {
            self.f1_of(1)
        } else {
            (0..self.k()).map(|c| self.f1_of(c)).sum::<f64>() / self.k() as f64
        }
    }

    /// Matthews correlation (the multi-class generalization reduces to the
    /// usual binary formula for two classes); 0 when undefined.
    pub fn mcc(&self) -> f64 {
        let k = self.k();
        let n: f64 = self.counts.iter().flatten().map(|&v| v as f64).sum();
        let correct: f64 = (0..k).map(|c| self.counts[c][c] as f64).sum();
        let t: Vec<f64> = (0..k).map(|c| self.counts[c].iter().sum::<u64>() as f64).collect();
        let p: Vec<f64> = (0..k)
            .map(|c| (0..k).map(|r| self.counts[r][c] as f64).sum())
            .collect();
        let tp: f64 = t.iter().zip(&p).map(|(a, b)| a * b).sum();
        let num = correct * n - tp;
        let den = ((n * n - p.iter().map(|v| v * v).sum::<f64>())
            * (n * n - t.iter().map(|v| v * v).sum::<f64>()))
        .sqrt();
        if den == 0.0 {
            0.0
        } else {
            (num / den).clamp(-1.0, 1.0)
        }
    }

    pub fn accuracy(&self) -> f64 {
        let n: u64 = self.counts.iter().flatten().sum();
        let c: u64 = (0..self.k()).map(|i| self.counts[i][i]).sum();
        if n == 0 {
            0.0
        } else {
            c as f64 / n as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub auc: f64,
    pub f1: f64,
    pub mcc: f64,
    pub accuracy: f64,
}

/// Scores from per-sample class probabilities. Two classes: AUC on the
/// class-1 probability, prediction `p₁ ≥ 0.5`. More classes: one-vs-rest
/// macro AUC and argmax predictions.
pub fn score(probs: &[Vec<f64>], labels: &[usize]) -> Result<Scores> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::shape(format!(
            "{} probability rows for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let k = probs[0].len();
    let (auc_v, pred) = if k == 2 {
        let s: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let pos: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
        let pred = s.iter().map(|&v| usize::from(v >= 0.5)).collect::<Vec<_>>();
        (auc(&s, &pos)?, pred)
    } else {
        let mut total = 0.0;
        for c in 0..k {
            let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            total += auc(&s, &pos)?;
        }
        let pred = probs
            .iter()
            .map(|p| {
                (0..k)
                    .max_by(|&a, &b| p[a].total_cmp(&p[b]).then(b.cmp(&a)))
                    .expect("k >= 1")
            })
            .collect::<Vec<_>>();
        (total / k as f64, pred)
    };
    let conf = Confusion::new(labels, &pred, k)?;
    Ok(Scores {
        auc: auc_v,
        f1: conf.f1(),
        mcc: conf.mcc(),
        accuracy: conf.accuracy(),
    })
}
