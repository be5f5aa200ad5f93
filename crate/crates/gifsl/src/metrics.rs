//! Evaluation metrics: per-space accuracies, harmonic/arithmetic means,
//! and episode aggregation with 95% confidence intervals.

use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Fraction of rows whose argmax (ties broken toward the lowest index)
/// equals the target label.
pub fn accuracy(logits: &Matrix, targets: &[usize]) -> Result<f64> {
    if logits.rows() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} logit rows vs {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    if logits.rows() == 0 {
        return Err(Error::InvalidArgument("accuracy over empty batch".into()));
    }
    let pred = logits.argmax_rows();
    let correct = pred.iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / targets.len() as f64)
}

pub fn harmonic_mean(b: f64, n: f64) -> f64 {
    if b + n == 0.0 {
        0.0
    } else {
        2.0 * b * n / (b + n)
    }
}

pub fn arithmetic_mean(b: f64, n: f64) -> f64 {
    (b + n) / 2.0
}

/// The five accuracy views of one episode plus the two joint summaries.
///
/// Naming: `x_over_y` is accuracy of samples from x classified in the
/// label space y; `b` base, `n` novel, `j` joint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeMetrics {
    pub b_over_b: f64,
    pub n_over_n: f64,
    pub b_over_j: f64,
    pub n_over_j: f64,
    pub j_over_j: f64,
    pub hm: f64,
    pub am: f64,
}

impl EpisodeMetrics {
    /// Derives hm/am from the joint-space accuracies.
    pub fn from_accuracies(
        b_over_b: f64,
        n_over_n: f64,
        b_over_j: f64,
        n_over_j: f64,
        j_over_j: f64,
    ) -> Self {
        EpisodeMetrics {
            b_over_b,
            n_over_n,
            b_over_j,
            n_over_j,
            j_over_j,
            hm: harmonic_mean(b_over_j, n_over_j),
            am: arithmetic_mean(b_over_j, n_over_j),
        }
    }

    pub fn fields(&self) -> [(&'static str, f64); 7] {
        [
            ("b_over_b", self.b_over_b),
            ("n_over_n", self.n_over_n),
            ("b_over_j", self.b_over_j),
            ("n_over_j", self.n_over_j),
            ("j_over_j", self.j_over_j),
            ("hm", self.hm),
            ("am", self.am),
        ]
    }
}

/// Mean and half-width of the 95% normal-approximation confidence
/// interval (1.96 standard errors).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanCi {
    pub mean: f64,
    pub ci95: f64,
}

fn mean_ci(values: &[f64]) -> MeanCi {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return MeanCi { mean, ci95: 0.0 };
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    MeanCi {
        mean,
        ci95: 1.96 * (var / n).sqrt(),
    }
}

/// Aggregate over episodes. Every metric, including hm and am, is the
/// mean of its per-episode values (the primary aggregation); the
/// harmonic mean of the mean accuracies is reported separately.
#[derive(Debug, Clone)]
pub struct AggregateMetrics {
    pub episode_count: usize,
    pub b_over_b: MeanCi,
    pub n_over_n: MeanCi,
    pub b_over_j: MeanCi,
    pub n_over_j: MeanCi,
    pub j_over_j: MeanCi,
    pub hm: MeanCi,
    pub am: MeanCi,
    /// hm applied to the mean b_over_j / n_over_j (secondary view).
    pub hm_of_means: f64,
}

pub fn aggregate_episodes(episodes: &[EpisodeMetrics]) -> Result<AggregateMetrics> {
    if episodes.is_empty() {
        return Err(Error::InvalidArgument("no episodes to aggregate".into()));
    }
    let col = |f: fn(&EpisodeMetrics) -> f64| -> MeanCi {
        mean_ci(&episodes.iter().map(f).collect::<Vec<_>>())
    };
    let b_over_j = col(|e| e.b_over_j);
    let n_over_j = col(|e| e.n_over_j);
    Ok(AggregateMetrics {
        episode_count: episodes.len(),
        b_over_b: col(|e| e.b_over_b),
        n_over_n: col(|e| e.n_over_n),
        b_over_j,
        n_over_j,
        j_over_j: col(|e| e.j_over_j),
        hm: col(|e| e.hm),
        am: col(|e| e.am),
        hm_of_means: harmonic_mean(b_over_j.mean, n_over_j.mean),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn accuracy_matches_loop_oracle() {
        let logits = Matrix::from_vec(
            4,
            3,
            vec![
                1.0, 2.0, 0.0, // pred 1
                5.0, 5.0, 5.0, // tie -> pred 0
                0.0, 0.0, 9.0, // pred 2
                3.0, 1.0, 2.0, // pred 0
            ],
        )
        .unwrap();
        let targets = [1usize, 0, 1, 1];
        assert_eq!(accuracy(&logits, &targets).unwrap(), 0.5);
    }

    #[test]
    fn empty_batch_rejected() {
        assert!(accuracy(&Matrix::zeros(0, 3), &[]).is_err());
    }

    #[test]
    fn hm_known_values() {
        assert!((harmonic_mean(0.5, 0.5) - 0.5).abs() < 1e-15);
        assert!((harmonic_mean(1.0, 0.0)).abs() < 1e-15);
        assert!((harmonic_mean(0.8, 0.4) - 2.0 * 0.8 * 0.4 / 1.2).abs() < 1e-15);
    }

    #[test]
    fn aggregation_per_episode_mean() {
        let a = EpisodeMetrics::from_accuracies(0.8, 0.6, 0.7, 0.3, 0.5);
        let b = EpisodeMetrics::from_accuracies(0.6, 0.8, 0.5, 0.5, 0.5);
        let agg = aggregate_episodes(&[a, b]).unwrap();
        assert!((agg.hm.mean - (a.hm + b.hm) / 2.0).abs() < 1e-15);
        assert!((agg.hm_of_means - harmonic_mean(0.6, 0.4)).abs() < 1e-15);
        // Jensen: mean of hm <= hm of means here
        assert!(agg.hm.mean <= agg.hm_of_means + 1e-15);
        assert_eq!(agg.episode_count, 2);
    }

    #[test]
    fn ci_known_case() {
        // values 0.4, 0.6: mean 0.5, sample sd sqrt(0.02), se 0.1
        let a = EpisodeMetrics::from_accuracies(0.4, 0.4, 0.4, 0.4, 0.4);
        let b = EpisodeMetrics::from_accuracies(0.6, 0.6, 0.6, 0.6, 0.6);
        let agg = aggregate_episodes(&[a, b]).unwrap();
        assert!((agg.j_over_j.ci95 - 1.96 * 0.1).abs() < 1e-12);
    }

    #[test]
    fn single_episode_has_zero_ci() {
        let e = EpisodeMetrics::from_accuracies(0.5, 0.5, 0.5, 0.5, 0.5);
        let agg = aggregate_episodes(&[e]).unwrap();
        assert_eq!(agg.hm.ci95, 0.0);
    }

    proptest! {
        #[test]
        fn hm_at_most_am(b in 0.0f64..1.0, n in 0.0f64..1.0) {
            prop_assert!(harmonic_mean(b, n) <= arithmetic_mean(b, n) + 1e-12);
        }

        #[test]
        fn hm_bounded_by_min_and_symmetry(b in 0.001f64..1.0, n in 0.001f64..1.0) {
            let hm = harmonic_mean(b, n);
            prop_assert!(hm <= b.max(n) + 1e-12);
            prop_assert!(hm >= 0.0);
            prop_assert!((hm - harmonic_mean(n, b)).abs() < 1e-12);
        }
    }
}
