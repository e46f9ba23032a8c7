//! Single-label classification metrics.

/// `m[true][pred]`
pub fn confusion(preds: &[usize], labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; classes]; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        m[l][p] += 1;
    }
    m
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Unweighted mean of per-class F1.
pub fn macro_f1(preds: &[usize], labels: &[usize], classes: usize) -> f64 {
    if classes == 0 {
        return 0.0;
    }
    let m = confusion(preds, labels, classes);
    let total: f64 = (0..classes)
        .map(|c| {
            let tp = m[c][c];
            let fp = (0..classes).filter(|&r| r != c).map(|r| m[r][c]).sum();
            let fn_ = (0..classes).filter(|&p| p != c).map(|p| m[c][p]).sum();
            f1(tp, fp, fn_)
        })
        .sum();
    total / classes as f64
}

/// F1 from pooled true/false positives and negatives.
pub fn micro_f1(preds: &[usize], labels: &[usize], classes: usize) -> f64 {
    let m = confusion(preds, labels, classes);
    let tp: usize = (0..classes).map(|c| m[c][c]).sum();
    let all: usize = m.iter().flatten().sum();
    f1(tp, all - tp, all - tp)
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
