//! LOW/HIGH latency classification: AdaBoost over one-dimensional decision
//! stumps, and majority voting over repeated samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Low,
    High,
}

impl Label {
    /// HIGH = +1, LOW = −1.
    pub fn sign(self) -> f64 {
        match self {
            Label::High => 1.0,
            Label::Low => -1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub latency: f64,
    pub label: Label,
}

/// `h(x) = polarity · (x ≥ threshold ? +1 : −1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stump {
    pub threshold: f64,
    pub polarity: i8,
    pub weight: f64,
}

impl Stump {
    pub fn vote(&self, x: f64) -> f64 {
        let side = if x >= self.threshold { 1.0 } else { -1.0 };
        side * self.polarity as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StumpEnsemble {
    pub stumps: Vec<Stump>,
    pub rounds: usize,
}

/// Per-round diagnostics of a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainingLog {
    /// Weighted error of each round's stump.
    pub epsilons: Vec<f64>,
    /// Training error of the ensemble after each round.
    pub train_errors: Vec<f64>,
    /// Running product of the normalizers Z_t; bounds the training error.
    pub z_products: Vec<f64>,
}

pub const DEFAULT_ROUNDS: usize = 50;
pub const DEFAULT_TRAINING_SAMPLES: usize = 100_000;
const EPS_CLAMP: f64 = 1e-10;

impl StumpEnsemble {
    /// The fixed rule `LOW iff latency < θ` as a one-stump ensemble.
    pub fn from_threshold(theta: f64) -> Self {
        Self {
            stumps: vec![Stump {
                threshold: theta,
                polarity: 1,
                weight: 1.0,
            }],
            rounds: 1,
        }
    }

    pub fn score(&self, latency: f64) -> f64 {
        self.stumps.iter().map(|s| s.weight * s.vote(latency)).sum()
    }

    /// A score of exactly zero predicts HIGH.
    pub fn predict(&self, latency: f64) -> Label {
        if self.score(latency) < 0.0 {
            Label::Low
        } else {
            Label::High
        }
    }

    pub fn error_rate(&self, samples: &[LabeledSample]) -> f64 {
        let wrong = samples
            .iter()
            .filter(|s| self.predict(s.latency) != s.label)
            .count();
        wrong as f64 / samples.len().max(1) as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        if m.stumps.is_empty()
            || m.stumps
                .iter()
                .any(|s| !s.weight.is_finite() || s.polarity.abs() != 1)
        {
            return Err(Error::Classifier(
                "model needs finite-weight stumps with polarity ±1".into(),
            ));
        }
        Ok(m)
    }
}

/// Majority vote of per-sample predictions; an even split is HIGH.
pub fn vote(model: &StumpEnsemble, samples: &[f64]) -> Result<Label> {
    if samples.is_empty() {
        return Err(Error::Classifier("cannot vote on zero samples".into()));
    }
    let low = samples
        .iter()
        .filter(|&&x| model.predict(x) == Label::Low)
        .count();
    Ok(if 2 * low > samples.len() {
        Label::Low
    } else {
        Label::High
    })
}

/// Initial sample weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassWeighting {
    /// Every sample weighs 1/n.
    #[default]
    Uniform,
    /// Each class carries half of the total weight.
    Balanced,
}

pub fn train_adaboost(samples: &[LabeledSample], rounds: usize) -> Result<StumpEnsemble> {
    train_adaboost_logged(samples, rounds, ClassWeighting::Uniform).map(|(m, _)| m)
}

/// Discrete AdaBoost. Each round scans every cut between consecutive unique
/// latencies (plus the two outer cuts) in both polarities.
pub fn train_adaboost_logged(
    samples: &[LabeledSample],
    rounds: usize,
    weighting: ClassWeighting,
) -> Result<(StumpEnsemble, TrainingLog)> {
    if rounds == 0 {
        return Err(Error::Classifier("rounds must be at least 1".into()));
    }
    if samples.iter().any(|s| !s.latency.is_finite()) {
        return Err(Error::Classifier("latencies must be finite".into()));
    }
    let has = |l| samples.iter().any(|s| s.label == l);
    if !(has(Label::Low) && has(Label::High)) {
        return Err(Error::Classifier(
            "training set needs both LOW and HIGH samples".into(),
        ));
    }

    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| samples[a].latency.total_cmp(&samples[b].latency));
    // Group boundaries of equal latencies in sorted order.
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    for i in 1..=n {
        if i == n || samples[order[i]].latency != samples[order[start]].latency {
            groups.push((start, i));
            start = i;
        }
    }
    let values: Vec<f64> = groups
        .iter()
        .map(|&(s, _)| samples[order[s]].latency)
        .collect();
    let mut cuts: Vec<f64> = Vec::with_capacity(values.len() + 1);
    cuts.push(values[0] - 1.0);
    cuts.extend(values.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    cuts.push(values[values.len() - 1] + 1.0);

    let y: Vec<f64> = samples.iter().map(|s| s.label.sign()).collect();
    let n_high = y.iter().filter(|&&v| v > 0.0).count() as f64;
    let mut w: Vec<f64> = match weighting {
        ClassWeighting::Uniform => vec![1.0 / n as f64; n],
        ClassWeighting::Balanced => y
            .iter()
            .map(|&v| 0.5 / if v > 0.0 { n_high } else { n as f64 - n_high })
            .collect(),
    };
    let mut scores = vec![0.0f64; n];
    let mut model = StumpEnsemble {
        stumps: Vec::new(),
        rounds: 0,
    };
    let mut log = TrainingLog::default();
    let mut z_prod = 1.0;

    for _ in 0..rounds {
        // Polarity +1 predicts HIGH at or above the cut. Its error at cut c
        // is the HIGH mass below c plus the LOW mass at or above c.
        let low_total: f64 = (0..n).filter(|&i| y[i] < 0.0).map(|i| w[i]).sum();
        let mut high_below = 0.0;
        let mut low_below = 0.0;
        let mut best = (f64::INFINITY, 0usize, 1i8);
        for (c, &cut) in cuts.iter().enumerate() {
            if c > 0 {
                let (gs, ge) = groups[c - 1];
                for &i in &order[gs..ge] {
                    if y[i] > 0.0 {
                        high_below += w[i];
                    } else {
                        low_below += w[i];
                    }
                }
            }
            let err_pos = high_below + (low_total - low_below);
            let err_neg = 1.0 - err_pos;
            let _ = cut;
            if err_pos < best.0 {
                best = (err_pos, c, 1);
            }
            if err_neg < best.0 {
                best = (err_neg, c, -1);
            }
        }
        let (raw_eps, c, polarity) = best;
        let eps = raw_eps.clamp(EPS_CLAMP, 1.0 - EPS_CLAMP);
        if raw_eps >= 0.5 && !model.stumps.is_empty() {
            break;
        }
        let alpha = 0.5 * ((1.0 - eps) / eps).ln();
        let stump = Stump {
            threshold: cuts[c],
            polarity,
            weight: alpha,
        };
        model.stumps.push(stump);
        model.rounds += 1;

        let mut z = 0.0;
        for i in 0..n {
            let h = stump.vote(samples[i].latency);
            scores[i] += alpha * h;
            w[i] *= (-alpha * y[i] * h).exp();
            z += w[i];
        }
        for wi in &mut w {
            *wi /= z;
        }
        z_prod *= 2.0 * (eps * (1.0 - eps)).sqrt();
        let wrong = (0..n)
            .filter(|&i| {
                let pred = if scores[i] < 0.0 { -1.0 } else { 1.0 };
                pred != y[i]
            })
            .count();
        log.epsilons.push(raw_eps);
        log.train_errors.push(wrong as f64 / n as f64);
        log.z_products.push(z_prod);
        if raw_eps <= 0.0 || raw_eps >= 0.5 {
            break;
        }
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(latency: f64, label: Label) -> LabeledSample {
        LabeledSample { latency, label }
    }

    #[test]
    fn separable_bands_need_one_round() {
        let data: Vec<_> = (40..=70)
            .map(|x| s(x as f64, Label::Low))
            .chain((90..=130).map(|x| s(x as f64, Label::High)))
            .collect();
        let (m, log) = train_adaboost_logged(&data, 50, ClassWeighting::Uniform).unwrap();
        assert_eq!(m.stumps.len(), 1);
        assert_eq!(log.train_errors, vec![0.0]);
        assert_eq!(m.predict(10.0), Label::Low);
        assert_eq!(m.predict(200.0), Label::High);
    }

    #[test]
    fn threshold_rule_as_single_stump() {
        let m = StumpEnsemble::from_threshold(80.0);
        assert_eq!(m.predict(79.0), Label::Low);
        assert_eq!(m.predict(80.0), Label::High);
        assert_eq!(m.predict(81.0), Label::High);
    }

    #[test]
    fn zero_score_is_high() {
        let m = StumpEnsemble {
            stumps: vec![
                Stump {
                    threshold: 50.0,
                    polarity: 1,
                    weight: 1.0,
                },
                Stump {
                    threshold: 60.0,
                    polarity: -1,
                    weight: 1.0,
                },
            ],
            rounds: 2,
        };
        // At 55 the stumps vote +1 and +1; at 45 they vote -1 and +1.
        assert_eq!(m.score(45.0), 0.0);
        assert_eq!(m.predict(45.0), Label::High);
    }

    #[test]
    fn input_errors() {
        let one = vec![s(1.0, Label::Low), s(2.0, Label::Low)];
        assert!(train_adaboost(&one, 5).is_err());
        let two = vec![s(1.0, Label::Low), s(2.0, Label::High)];
        assert!(train_adaboost(&two, 0).is_err());
        assert!(vote(&StumpEnsemble::from_threshold(1.0), &[]).is_err());
    }

    /// Brute-force best single stump over the same cut set.
    fn best_stump_error(data: &[LabeledSample]) -> f64 {
        let mut xs: Vec<f64> = data.iter().map(|d| d.latency).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        let mut cuts = vec![xs[0] - 1.0, xs[xs.len() - 1] + 1.0];
        cuts.extend(xs.windows(2).map(|w| (w[0] + w[1]) / 2.0));
        let mut best = 1.0f64;
        for c in cuts {
            for p in [1i8, -1] {
                let m = StumpEnsemble {
                    stumps: vec![Stump {
                        threshold: c,
                        polarity: p,
                        weight: 1.0,
                    }],
                    rounds: 1,
                };
                best = best.min(m.error_rate(data));
            }
        }
        best
    }

    #[test]
    fn interval_labels_need_several_stumps() {
        // HIGH only inside [60, 80): no single threshold separates it.
        let data: Vec<_> = (0..140)
            .map(|x| {
                let label = if (60..80).contains(&x) {
                    Label::High
                } else {
                    Label::Low
                };
                s(x as f64, label)
            })
            .collect();
        let single = best_stump_error(&data);
        let m = train_adaboost(&data, 50).unwrap();
        assert!(m.stumps.len() >= 3);
        assert!(
            m.error_rate(&data) < single,
            "{} vs {single}",
            m.error_rate(&data)
        );
    }

    #[test]
    fn balanced_weights_recover_a_rare_class() {
        // 5 LOW samples overlap the bottom of 95 HIGH samples.
        let data: Vec<_> = (0..5)
            .map(|x| s(10.0 + x as f64, Label::Low))
            .chain((0..95).map(|x| s(12.0 + x as f64, Label::High)))
            .collect();
        let (m, _) = train_adaboost_logged(&data, 1, ClassWeighting::Balanced).unwrap();
        assert_eq!(m.predict(10.0), Label::Low);
        assert_eq!(m.predict(50.0), Label::High);
    }

    #[test]
    fn json_round_trip() {
        let data = vec![s(1.0, Label::Low), s(2.0, Label::High), s(3.0, Label::Low)];
        let m = train_adaboost(&data, 5).unwrap();
        assert_eq!(StumpEnsemble::from_json(&m.to_json().unwrap()).unwrap(), m);
        assert!(StumpEnsemble::from_json(r#"{"stumps": [], "rounds": 0}"#).is_err());
    }

    fn dataset() -> impl Strategy<Value = Vec<LabeledSample>> {
        prop::collection::vec((0u32..200, any::<bool>()), 4..80).prop_map(|v| {
            let mut d: Vec<_> = v
                .into_iter()
                .map(|(x, h)| s(x as f64, if h { Label::High } else { Label::Low }))
                .collect();
            d[0].label = Label::Low;
            d[1].label = Label::High;
            d
        })
    }

    proptest! {
        #[test]
        fn exp_loss_bound_is_monotone(data in dataset()) {
            let (m, log) = train_adaboost_logged(&data, 30, ClassWeighting::Uniform).unwrap();
            prop_assert!(!m.stumps.is_empty());
            prop_assert!(m.stumps.iter().all(|s| s.weight.is_finite()));
            prop_assert!(log.z_products.windows(2).all(|w| w[1] <= w[0] + 1e-12));
            for (e, z) in log.train_errors.iter().zip(&log.z_products) {
                prop_assert!(*e <= z + 1e-9);
            }
        }

        #[test]
        fn shifting_latencies_preserves_labels(data in dataset(), c in -50i32..50, q in 0u32..200) {
            let shifted: Vec<_> = data.iter().map(|d| s(d.latency + c as f64, d.label)).collect();
            let a = train_adaboost(&data, 20).unwrap();
            let b = train_adaboost(&shifted, 20).unwrap();
            prop_assert_eq!(a.predict(q as f64), b.predict(q as f64 + c as f64));
        }

        #[test]
        fn repeated_sample_vote_equals_predict(theta in 0u32..200, x in 0u32..200, k in 1usize..20) {
            let m = StumpEnsemble::from_threshold(theta as f64);
            prop_assert_eq!(vote(&m, &vec![x as f64; k]).unwrap(), m.predict(x as f64));
        }
    }
}
