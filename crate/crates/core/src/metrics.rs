//! Equal error rate with a normal-approximation confidence interval.
//!
//! Convention: a score at or above the threshold is classified as fake.
//! False acceptance counts fakes scored below the threshold; false rejection
//! counts real utterances scored at or above it.

use crate::data_io::{bucket_index, bucket_label, Label};
use crate::error::{Error, Result};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.96;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub real: Vec<f64>,
    pub fake: Vec<f64>,
}

impl ScoreSet {
    pub fn new(real: Vec<f64>, fake: Vec<f64>) -> Self {
        Self { real, fake }
    }

    pub fn from_labelled(scores: impl IntoIterator<Item = (f64, Label)>) -> Self {
        let mut s = Self::default();
        for (v, l) in scores {
            match l {
                Label::Real => s.real.push(v),
                Label::Fake => s.fake.push(v),
            }
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
    pub sigma: f64,
    pub ci_half_width: f64,
}

/// `0.5 · sqrt(eer (1 - eer) (n_r + n_f) / (n_r n_f))`.
pub fn eer_sigma(eer: f64, n_real: usize, n_fake: usize) -> f64 {
    let (nr, nf) = (n_real as f64, n_fake as f64);
    0.5 * (eer * (1.0 - eer) * (nr + nf) / (nr * nf)).sqrt()
}

/// Error rates `(far, frr)` at threshold `theta`.
pub fn error_rates(s: &ScoreSet, theta: f64) -> (f64, f64) {
    let far = s.fake.iter().filter(|&&v| v < theta).count() as f64 / s.fake.len() as f64;
    let frr = s.real.iter().filter(|&&v| v >= theta).count() as f64 / s.real.len() as f64;
    (far, frr)
}

/// Sweeps every distinct score as a threshold and interpolates linearly
/// between the two operating points that bracket `far == frr`.
pub fn compute_eer(s: &ScoreSet) -> Result<EerResult> {
    if s.real.is_empty() || s.fake.is_empty() {
        return Err(Error::InvalidArgument("EER needs at least one score of each class".into()));
    }
    if s.real.iter().chain(&s.fake).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { stage: "scores".into() });
    }
    let mut real = s.real.clone();
    let mut fake = s.fake.clone();
    real.sort_by(f64::total_cmp);
    fake.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = real.iter().chain(&fake).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let (nr, nf) = (real.len(), fake.len());
    // Operating point at threshold: fakes strictly below, reals at or above.
    let point = |theta: f64| {
        let fa = fake.partition_point(|&v| v < theta);
        let below_real = real.partition_point(|&v| v < theta);
        (fa as f64 / nf as f64, (nr - below_real) as f64 / nr as f64)
    };

    let mut prev = (thresholds[0], point(thresholds[0]));
    let mut cross = None;
    for &theta in thresholds.iter().chain(std::iter::once(&f64::INFINITY)) {
        let (far, frr) = if theta.is_infinite() { (1.0, 0.0) } else { point(theta) };
        if far >= frr {
            cross = Some((prev, (theta, (far, frr))));
            break;
        }
        prev = (theta, (far, frr));
    }
    let ((t0, (far0, frr0)), (t1, (far1, frr1))) = cross.expect("far reaches 1 at +inf");
    let d0 = far0 - frr0;
    let d1 = far1 - frr1;
    // The lowest threshold rejects every real utterance, so d0 < 0 here.
    let (eer, threshold) = if d1 == 0.0 {
        (far1, t1)
    } else {
        let lam = -d0 / (d1 - d0);
        let far = far0 + lam * (far1 - far0);
        let frr = frr0 + lam * (frr1 - frr0);
        let t = if t1.is_finite() { t0 + lam * (t1 - t0) } else { t0 };
        (0.5 * (far + frr), t)
    };
    let sigma = eer_sigma(eer, nr, nf);
    Ok(EerResult {
        eer,
        threshold,
        sigma,
        ci_half_width: Z_95 * sigma,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BucketRow {
    pub label: String,
    pub n_real: usize,
    pub n_fake: usize,
    /// `None` when a class is missing from the bucket.
    pub result: Option<EerResult>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BucketTable {
    pub rows: Vec<BucketRow>,
    pub pooled: EerResult,
}

/// EER per duration bucket plus the pooled EER. Items are `(score, label, duration_s)`.
pub fn eer_by_bucket(items: &[(f64, Label, f64)], edges: &[f64]) -> Result<BucketTable> {
    let mut sets = vec![ScoreSet::default(); edges.len() + 1];
    for &(score, label, dur) in items {
        let s = &mut sets[bucket_index(dur, edges)];
        match label {
            Label::Real => s.real.push(score),
            Label::Fake => s.fake.push(score),
        }
    }
    let rows = sets
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let result = if s.real.is_empty() || s.fake.is_empty() {
                None
            } else {
                Some(compute_eer(s)?)
            };
            Ok(BucketRow {
                label: bucket_label(i, edges),
                n_real: s.real.len(),
                n_fake: s.fake.len(),
                result,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pooled = compute_eer(&ScoreSet::from_labelled(items.iter().map(|&(v, l, _)| (v, l))))?;
    Ok(BucketTable { rows, pooled })
}

impl BucketTable {
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<8} {:>6} {:>6} {:>8} {:>8}\n", "bucket", "real", "fake", "EER%", "±CI%");
        for r in &self.rows {
            match r.result {
                Some(e) => s.push_str(&format!(
                    "{:<8} {:>6} {:>6} {:>8.2} {:>8.2}\n",
                    r.label,
                    r.n_real,
                    r.n_fake,
                    100.0 * e.eer,
                    100.0 * e.ci_half_width
                )),
                None => s.push_str(&format!("{:<8} {:>6} {:>6} {:>8} {:>8}\n", r.label, r.n_real, r.n_fake, "undef", "-")),
            }
        }
        let p = self.pooled;
        let lo = (p.eer - p.ci_half_width).max(0.0);
        s.push_str(&format!(
            "{:<8} {:>6} {:>6} {:>8.2} {:>8.2}  [{:.2}, {:.2}]\n",
            "pooled",
            self.rows.iter().map(|r| r.n_real).sum::<usize>(),
            self.rows.iter().map(|r| r.n_fake).sum::<usize>(),
            100.0 * p.eer,
            100.0 * p.ci_half_width,
            100.0 * lo,
            100.0 * (p.eer + p.ci_half_width)
        ));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_separation_and_chance() {
        let e = compute_eer(&ScoreSet::new(vec![-1.0, -2.0], vec![1.0, 2.0])).unwrap();
        assert_eq!(e.eer, 0.0);
        let e = compute_eer(&ScoreSet::new(vec![1.0, 2.0, 3.0], vec![3.0, 1.0, 2.0])).unwrap();
        assert!((e.eer - 0.5).abs() < 1e-12, "{}", e.eer);
    }

    #[test]
    fn fully_inverted_scores_give_full_error() {
        let e = compute_eer(&ScoreSet::new(vec![1.0, 2.0], vec![-1.0, -2.0])).unwrap();
        assert!((e.eer - 1.0).abs() < 1e-12, "{}", e.eer);
    }

    #[test]
    fn sigma_closed_form() {
        let s = 0.5 * (0.05_f64 * 0.95 * 200.0 / 10000.0).sqrt();
        assert!((eer_sigma(0.05, 100, 100) - s).abs() < 1e-15);
        assert!((eer_sigma(0.05, 100, 100) - 0.015411).abs() < 1e-6);
        assert!((Z_95 * eer_sigma(0.05, 100, 100) - 0.030206).abs() < 1e-6);
    }

    #[test]
    fn threshold_reproduces_crossing() {
        let s = ScoreSet::new(vec![0.1, 0.4, 0.35, 0.8], vec![0.9, 0.3, 0.7, 0.95, 0.6]);
        let e = compute_eer(&s).unwrap();
        let (far, frr) = error_rates(&s, e.threshold);
        assert!((far - e.eer).abs() <= 0.25 + 1e-12 && (frr - e.eer).abs() <= 0.25 + 1e-12);
    }

    #[test]
    fn empty_class_is_an_error() {
        assert!(compute_eer(&ScoreSet::new(vec![], vec![1.0])).is_err());
    }

    #[test]
    fn missing_class_bucket_is_undefined() {
        let items = [(0.1, Label::Real, 1.0), (0.9, Label::Fake, 1.5), (0.2, Label::Real, 3.5)];
        let t = eer_by_bucket(&items, &[3.0, 4.0]).unwrap();
        assert!(t.rows[0].result.is_some());
        assert_eq!(t.rows[1].result, None);
        assert_eq!((t.rows[2].n_real, t.rows[2].n_fake), (0, 0));
        assert!(t.to_text().contains("undef"));
    }
}
