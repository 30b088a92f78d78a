//! Base + incremental session schedule, cumulative evaluation and metrics.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassId, ClassifierState};
use crate::encoder::{forward, EncoderModel};
use crate::error::{contract_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample<T> {
    /// `[channels, H, W]`
    pub image: Tensor<T>,
    pub label: ClassId,
    pub split: Split,
}

impl<T: Scalar> LabeledSample<T> {
    pub fn cast<U: Scalar>(&self) -> LabeledSample<U> {
        LabeledSample {
            image: self.image.cast(),
            label: self.label,
            split: self.split,
        }
    }
}

/// One session: its classes plus the training and test samples it owns.
#[derive(Clone, Debug, PartialEq)]
pub struct Session<T> {
    pub index: usize,
    /// Sorted ascending.
    pub class_ids: Vec<ClassId>,
    pub train: Vec<LabeledSample<T>>,
    pub test: Vec<LabeledSample<T>>,
}

/// Session 0 holds the base classes with all of their training data; every
/// later session holds `ways` classes with exactly `shots` samples each.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionPlan<T> {
    pub sessions: Vec<Session<T>>,
    pub base_class_count: usize,
    pub ways: usize,
    pub shots: usize,
}

/// Audit view of a plan, serialized as `plan.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub base_class_count: usize,
    pub ways: usize,
    pub shots: usize,
    pub sessions: Vec<SessionSummary>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub index: usize,
    pub class_ids: Vec<ClassId>,
    pub train_samples: usize,
    pub test_samples: usize,
}

/// Builds the session schedule.
///
/// Classes are sorted by id and shuffled with `seed`; the first
/// `base_class_count` form session 0 and the next `ways * sessions` are cut
/// into incremental sessions. Incremental classes keep the first `shots`
/// training samples after a seeded per-class shuffle. Classes beyond the
/// schedule are ignored.
pub fn build_session_plan<T: Scalar>(
    dataset: &[LabeledSample<T>],
    base_class_count: usize,
    ways: usize,
    shots: usize,
    sessions: usize,
    seed: u64,
) -> Result<SessionPlan<T>> {
    if base_class_count == 0 {
        return contract_err("base_class_count must be positive");
    }
    if sessions > 0 && (ways == 0 || shots == 0) {
        return contract_err("ways and shots must be positive when incremental sessions exist");
    }
    let mut classes: Vec<ClassId> = dataset
        .iter()
        .map(|s| s.label)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let needed = base_class_count + ways * sessions;
    if classes.len() < needed {
        return Err(Error::Capacity(format!(
            "plan needs {needed} classes but the dataset has {} ({} short)",
            classes.len(),
            needed - classes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    classes.shuffle(&mut rng);

    let mut train_by_class: BTreeMap<ClassId, Vec<&LabeledSample<T>>> = BTreeMap::new();
    let mut test_by_class: BTreeMap<ClassId, Vec<&LabeledSample<T>>> = BTreeMap::new();
    for s in dataset {
        let bucket = match s.split {
            Split::Train => &mut train_by_class,
            Split::Test => &mut test_by_class,
        };
        bucket.entry(s.label).or_default().push(s);
    }
    let train_count = |c: ClassId| train_by_class.get(&c).map_or(0, Vec::len);
    // Base classes train on everything they have; incremental ones need K.
    for (i, &c) in classes[..needed].iter().enumerate() {
        let have = train_count(c);
        let want = if i < base_class_count { 1 } else { shots };
        if have < want {
            return Err(Error::Capacity(format!(
                "class {c} has {have} training samples, {want} required ({} short)",
                want - have
            )));
        }
    }

    let tests_of = |ids: &[ClassId]| -> Vec<LabeledSample<T>> {
        ids.iter()
            .flat_map(|c| test_by_class.get(c).into_iter().flatten())
            .map(|s| (*s).clone())
            .collect()
    };

    let mut base_ids = classes[..base_class_count].to_vec();
    base_ids.sort_unstable();
    let base_train = base_ids
        .iter()
        .flat_map(|c| train_by_class[c].iter())
        .map(|s| (*s).clone())
        .collect();
    let mut out = vec![Session {
        index: 0,
        test: tests_of(&base_ids),
        class_ids: base_ids,
        train: base_train,
    }];

    for t in 0..sessions {
        let start = base_class_count + t * ways;
        let mut ids = classes[start..start + ways].to_vec();
        ids.sort_unstable();
        let mut train = Vec::with_capacity(ways * shots);
        for c in &ids {
            let mut pool = train_by_class[c].clone();
            pool.shuffle(&mut rng);
            train.extend(pool.into_iter().take(shots).cloned());
        }
        out.push(Session {
            index: t + 1,
            test: tests_of(&ids),
            class_ids: ids,
            train,
        });
    }
    Ok(SessionPlan {
        sessions: out,
        base_class_count,
        ways,
        shots,
    })
}

impl<T: Scalar> SessionPlan<T> {
    /// Number of incremental sessions.
    pub fn incremental_sessions(&self) -> usize {
        self.sessions.len() - 1
    }

    pub fn base(&self) -> &Session<T> {
        &self.sessions[0]
    }

    /// Checks disjointness and the way/shot layout.
    pub fn check_invariants(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for s in &self.sessions {
            for &c in &s.class_ids {
                if !seen.insert(c) {
                    return contract_err(format!("class {c} appears in more than one session"));
                }
            }
            if s.index > 0 {
                if s.class_ids.len() != self.ways {
                    return contract_err(format!(
                        "session {} has {} classes, expected {}",
                        s.index,
                        s.class_ids.len(),
                        self.ways
                    ));
                }
                for &c in &s.class_ids {
                    let n = s.train.iter().filter(|x| x.label == c).count();
                    if n != self.shots {
                        return contract_err(format!(
                            "class {c} in session {} has {n} shots, expected {}",
                            s.index, self.shots
                        ));
                    }
                }
            }
            if let Some(x) = s.train.iter().chain(&s.test).find(|x| !s.class_ids.contains(&x.label)) {
                return contract_err(format!(
                    "session {} holds a sample of foreign class {}",
                    s.index, x.label
                ));
            }
        }
        Ok(())
    }

    pub fn summary(&self) -> PlanSummary {
        PlanSummary {
            base_class_count: self.base_class_count,
            ways: self.ways,
            shots: self.shots,
            sessions: self
                .sessions
                .iter()
                .map(|s| SessionSummary {
                    index: s.index,
                    class_ids: s.class_ids.clone(),
                    train_samples: s.train.len(),
                    test_samples: s.test.len(),
                })
                .collect(),
        }
    }
}

/// Test samples of every class seen in sessions `0..=t`.
pub fn cumulative_test_set<T: Scalar>(plan: &SessionPlan<T>, t: usize) -> Result<Vec<&LabeledSample<T>>> {
    if t >= plan.sessions.len() {
        return contract_err(format!(
            "session {t} out of range for a plan with {} sessions",
            plan.sessions.len()
        ));
    }
    Ok(plan.sessions[..=t].iter().flat_map(|s| s.test.iter()).collect())
}

/// Fraction of samples whose top cosine logit is their label.
///
/// Samples are scored in parallel and reduced by integer counting, so the
/// result does not depend on the number of workers.
pub fn evaluate<T: Scalar>(
    encoder: &EncoderModel<T>,
    state: &ClassifierState<T>,
    testset: &[&LabeledSample<T>],
) -> Result<f64> {
    use rayon::prelude::*;
    let known: BTreeSet<ClassId> = state.class_ids().iter().copied().collect();
    if let Some(s) = testset.iter().find(|s| !known.contains(&s.label)) {
        return contract_err(format!("test label {} is unknown to the classifier", s.label));
    }
    if testset.is_empty() {
        return contract_err("cannot evaluate on an empty test set");
    }
    let correct = testset
        .par_iter()
        .map(|s| -> Result<usize> {
            let z = forward(&s.image, encoder)?;
            Ok(usize::from(state.predict(z.data())? == s.label))
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(correct as f64 / testset.len() as f64)
}

/// Accuracy of a classifier on precomputed unit features.
pub fn accuracy_on_features<T: Scalar>(state: &ClassifierState<T>, features: &[(Tensor<T>, ClassId)]) -> Result<f64> {
    if features.is_empty() {
        return contract_err("cannot evaluate on an empty feature set");
    }
    let mut correct = 0usize;
    for (z, label) in features {
        correct += usize::from(state.predict(z.data())? == *label);
    }
    Ok(correct as f64 / features.len() as f64)
}

/// Per-session accuracies (fractions) and the derived headline metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub per_session_accuracy: Vec<f64>,
    pub s_base: f64,
    pub s_last: f64,
    pub s_avg: f64,
    pub pd: f64,
}

pub fn summarize(per_session_accuracy: &[f64]) -> Result<SessionReport> {
    let (Some(&first), Some(&last)) = (per_session_accuracy.first(), per_session_accuracy.last()) else {
        return Err(Error::Domain("no session accuracies to summarize".into()));
    };
    let total: f64 = per_session_accuracy.iter().sum();
    Ok(SessionReport {
        per_session_accuracy: per_session_accuracy.to_vec(),
        s_base: first,
        s_last: last,
        s_avg: total / per_session_accuracy.len() as f64,
        pd: first - last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(classes: u32, train: usize, test: usize) -> Vec<LabeledSample<f64>> {
        let mut out = Vec::new();
        for c in 0..classes {
            for i in 0..train + test {
                out.push(LabeledSample {
                    image: Tensor::full(&[1, 2, 2], c as f64 + i as f64 / 100.0),
                    label: c,
                    split: if i < train { Split::Train } else { Split::Test },
                });
            }
        }
        out
    }

    #[test]
    fn degenerate_schedule_has_only_base() {
        let data = dataset(4, 3, 1);
        let plan = build_session_plan(&data, 4, 5, 5, 0, 1).unwrap();
        assert_eq!(plan.sessions.len(), 1);
        assert_eq!(plan.base().train.len(), 12);
        plan.check_invariants().unwrap();
    }

    #[test]
    fn capacity_errors_state_the_shortfall() {
        let data = dataset(10, 6, 1);
        let err = build_session_plan(&data, 6, 3, 5, 2, 0).unwrap_err();
        assert!(matches!(err, Error::Capacity(_)));
        assert!(err.to_string().contains("2 short"), "{err}");
        let err = build_session_plan(&data, 4, 3, 7, 2, 0).unwrap_err();
        assert!(err.to_string().contains("1 short"), "{err}");
    }

    #[test]
    fn plan_is_seed_deterministic() {
        let data = dataset(12, 8, 2);
        let a = build_session_plan(&data, 6, 3, 2, 2, 42).unwrap();
        let b = build_session_plan(&data, 6, 3, 2, 2, 42).unwrap();
        let c = build_session_plan(&data, 6, 3, 2, 2, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.summary(), c.summary());
        a.check_invariants().unwrap();
    }

    #[test]
    fn cumulative_bounds() {
        let data = dataset(8, 4, 3);
        let plan = build_session_plan(&data, 4, 2, 2, 2, 5).unwrap();
        assert_eq!(cumulative_test_set(&plan, 0).unwrap().len(), 12);
        assert_eq!(cumulative_test_set(&plan, 2).unwrap().len(), 24);
        assert!(matches!(cumulative_test_set(&plan, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn summarize_identities() {
        let r = summarize(&[0.7; 5]).unwrap();
        assert!((r.s_avg - 0.7).abs() < 1e-15);
        assert_eq!(r.pd, 0.0);
        assert!(matches!(summarize(&[]), Err(Error::Domain(_))));
        let r = summarize(&[0.9, 0.8, 0.6]).unwrap();
        assert_eq!((r.s_base, r.s_last), (0.9, 0.6));
        assert_eq!(r.pd, 0.9 - 0.6);
    }
}
