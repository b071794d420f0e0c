//! Deliberately naive reference computations, written without any of the
//! library's numerics.

/// Softmax cross-entropy by an explicit loop, using the max-shift form only
/// for finiteness.
pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let mut m = f64::NEG_INFINITY;
        for &v in row {
            if v > m {
                m = v;
            }
        }
        let mut s = 0.0;
        for &v in row {
            s += (v - m).exp();
        }
        total += m + s.ln() - row[y];
    }
    total / labels.len() as f64
}

pub fn mean_abs_error(pred: &[f64], target: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..pred.len() {
        total += (pred[i] - target[i]).abs();
    }
    total / pred.len() as f64
}

/// `Σ (1 − cos(s_i, c_{k_i})) / N` over shifts whose direction has a
/// centroid; all `N` shifts count in the denominator.
pub fn centroid_penalty(shifts: &[Vec<f64>], labels: &[usize], centroids: &[Option<Vec<f64>>]) -> f64 {
    let mut total = 0.0;
    for (s, &k) in shifts.iter().zip(labels) {
        if let Some(c) = &centroids[k] {
            let mut dot = 0.0;
            let mut ns = 0.0;
            let mut nc = 0.0;
            for j in 0..s.len() {
                dot += s[j] * c[j];
                ns += s[j] * s[j];
                nc += c[j] * c[j];
            }
            if ns > 0.0 && nc > 0.0 {
                total += 1.0 - dot / (ns.sqrt() * nc.sqrt());
            }
        }
    }
    total / shifts.len() as f64
}

/// Keeps the full history and averages it on demand.
#[derive(Default)]
pub struct Accumulator {
    pub seen: Vec<Vec<Vec<f64>>>,
}

impl Accumulator {
    pub fn new(k: usize) -> Self {
        Self {
            seen: vec![Vec::new(); k],
        }
    }

    pub fn push(&mut self, k: usize, v: Vec<f64>) {
        self.seen[k].push(v);
    }

    pub fn mean(&self, k: usize) -> Option<Vec<f64>> {
        let rows = &self.seen[k];
        if rows.is_empty() {
            return None;
        }
        let mut out = vec![0.0; rows[0].len()];
        for r in rows {
            for j in 0..out.len() {
                out[j] += r[j];
            }
        }
        Some(out.into_iter().map(|v| v / rows.len() as f64).collect())
    }
}
