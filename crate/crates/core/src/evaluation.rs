//! Accuracy-improvement metrics, traditional-baseline selection, and
//! scenario execution.
//!
//! Accuracies are carried as exact (correct, total) fractions and turned
//! into floats as late as possible; the percent-increase metric divides
//! by the traditional improvement and amplifies drift otherwise.

use crate::attacks::AttackAlgorithm;
use crate::datasets::LabeledDataset;
use crate::defense::test_time_defense;
use crate::error::{Error, Result};
use crate::nn::{evaluate_counts, ArchType, Model};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Exact accuracy fraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
}

impl Accuracy {
    pub fn value(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Post-defense minus pre-defense accuracy.
pub fn accuracy_improvement(post: f64, pre: f64) -> f64 {
    post - pre
}

/// Percent increase in accuracy improvement: `(p - t) / |t| * 100`.
/// A zero traditional improvement leaves the metric undefined and is an
/// error, not an infinity.
pub fn percent_increase(p: f64, t: f64) -> Result<f64> {
    if t == 0.0 {
        return Err(Error::UndefinedMetric(
            "traditional improvement is zero".into(),
        ));
    }
    Ok((p - t) / t.abs() * 100.0)
}

/// |t| below this is reported with a low-confidence flag: the metric is
/// ill-conditioned near zero.
pub const LOW_CONFIDENCE_T: f64 = 0.001;

/// A defense's provenance: the set of (attack algorithm, architecture
/// type) sources whose simulated noise trained it.
pub type DefenseSources = BTreeSet<(AttackAlgorithm, ArchType)>;

/// Named trained defense in the pool.
pub struct DefenseEntry {
    pub name: String,
    pub sources: DefenseSources,
    pub dae: Model,
}

/// The experiment family a scenario belongs to, which fixes the
/// traditional-baseline selection rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VaryAxis {
    Architecture,
    Attack,
}

/// Attacker description for attacked scenarios.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackerSpec {
    pub algorithm: AttackAlgorithm,
    /// Architecture type of the classifier whose gradients craft the
    /// attack.
    pub source_arch: ArchType,
}

/// One evaluation scenario.
#[derive(Clone, Debug)]
pub struct ScenarioSpec {
    pub name: String,
    pub vary: VaryAxis,
    /// None = no-attack scenario.
    pub attacker: Option<AttackerSpec>,
    /// Attack algorithm under study for vary-architecture/no-attack
    /// scenarios (where no attacker exists to name one).
    pub study_attack: Option<AttackAlgorithm>,
    /// Architecture type under study for vary-attack scenarios.
    pub study_arch: ArchType,
}

const ALL_ALGORITHMS: [AttackAlgorithm; 3] = [
    AttackAlgorithm::Cw,
    AttackAlgorithm::DeepFool,
    AttackAlgorithm::Fgs,
];

fn other_arch(a: ArchType) -> ArchType {
    match a {
        ArchType::Fc => ArchType::Cnn,
        ArchType::Cnn => ArchType::Fc,
    }
}

fn singleton(alg: AttackAlgorithm, arch: ArchType) -> DefenseSources {
    let mut s = BTreeSet::new();
    s.insert((alg, arch));
    s
}

/// Source sets the proposed (ensemble) defense must have been trained on.
pub fn proposed_defense_sources(scenario: &ScenarioSpec) -> Result<DefenseSources> {
    match scenario.vary {
        VaryAxis::Architecture => {
            let alg = scenario
                .attacker
                .as_ref()
                .map(|a| a.algorithm)
                .or(scenario.study_attack)
                .ok_or_else(|| {
                    Error::Contract(
                        "vary-architecture scenario needs an attacker or a study attack".into(),
                    )
                })?;
            Ok([(alg, ArchType::Fc), (alg, ArchType::Cnn)].into_iter().collect())
        }
        VaryAxis::Attack => Ok(ALL_ALGORITHMS
            .iter()
            .map(|&a| (a, scenario.study_arch))
            .collect()),
    }
}

/// Traditional baselines for each scenario family:
/// - vary-architecture, attacked: the defense trained with the same
///   attack on the other architecture type (1 defense);
/// - vary-architecture, no attack: the two single-architecture defenses
///   for the study attack (2);
/// - vary-attack, attacked: the two single-attack defenses the attacker
///   did not use plus the pair-trained defense missing the attacker's
///   algorithm (3);
/// - vary-attack, no attack: the three single-attack defenses and the
///   three pair-trained defenses (6).
pub fn required_baseline_sources(scenario: &ScenarioSpec) -> Result<Vec<DefenseSources>> {
    match (scenario.vary, &scenario.attacker) {
        (VaryAxis::Architecture, Some(att)) => {
            Ok(vec![singleton(att.algorithm, other_arch(att.source_arch))])
        }
        (VaryAxis::Architecture, None) => {
            let alg = scenario.study_attack.ok_or_else(|| {
                Error::Contract("no-attack vary-architecture scenario needs a study attack".into())
            })?;
            Ok(vec![
                singleton(alg, ArchType::Fc),
                singleton(alg, ArchType::Cnn),
            ])
        }
        (VaryAxis::Attack, Some(att)) => {
            let arch = scenario.study_arch;
            let others: Vec<AttackAlgorithm> = ALL_ALGORITHMS
                .iter()
                .copied()
                .filter(|a| *a != att.algorithm)
                .collect();
            let mut wanted = vec![
                singleton(others[0], arch),
                singleton(others[1], arch),
            ];
            wanted.push(others.iter().map(|&a| (a, arch)).collect());
            Ok(wanted)
        }
        (VaryAxis::Attack, None) => {
            let arch = scenario.study_arch;
            let mut wanted: Vec<DefenseSources> = ALL_ALGORITHMS
                .iter()
                .map(|&a| singleton(a, arch))
                .collect();
            for i in 0..ALL_ALGORITHMS.len() {
                for j in (i + 1)..ALL_ALGORITHMS.len() {
                    wanted.push(
                        [
                            (ALL_ALGORITHMS[i], arch),
                            (ALL_ALGORITHMS[j], arch),
                        ]
                        .into_iter()
                        .collect(),
                    );
                }
            }
            Ok(wanted)
        }
    }
}

/// Resolve the required baseline source sets against the defense pool.
/// Missing defenses are an enumerated-gap error, never silently skipped.
pub fn select_traditional_baselines<'a>(
    scenario: &ScenarioSpec,
    pool: &'a [DefenseEntry],
) -> Result<Vec<&'a DefenseEntry>> {
    let wanted = required_baseline_sources(scenario)?;
    let mut selected = Vec::with_capacity(wanted.len());
    let mut missing = Vec::new();
    for sources in &wanted {
        match pool.iter().find(|d| &d.sources == sources) {
            Some(d) => selected.push(d),
            None => missing.push(format!("{sources:?}")),
        }
    }
    if !missing.is_empty() {
        return Err(Error::EnumeratedGap(format!(
            "scenario '{}' needs defenses trained on {}",
            scenario.name,
            missing.join(", ")
        )));
    }
    Ok(selected)
}

/// Accuracy outcome of one defense in one scenario.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DefenseOutcome {
    pub defense: String,
    pub post: Accuracy,
    pub post_accuracy: f64,
    pub improvement: f64,
}

/// Full scenario result, serialized into results.json.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: String,
    pub pre: Accuracy,
    pub pre_accuracy: f64,
    pub proposed: DefenseOutcome,
    pub baselines: Vec<DefenseOutcome>,
    /// Proposed-defense improvement (p of the percent-increase metric).
    pub p: f64,
    /// Mean traditional improvement (t of the percent-increase metric).
    pub t: f64,
    pub percent_increase: Option<f64>,
    pub undefined_percent_increase: bool,
    /// |t| < 1e-3: the ratio is ill-conditioned.
    pub low_confidence_t: bool,
    /// The proposed defense lowered accuracy (weak-attack caveat).
    pub negative_improvement: bool,
}

impl ScenarioResult {
    /// Recompute the derived fields from the stored exact counts;
    /// used by self-checks and tests.
    pub fn recompute_percent_increase(&self) -> Option<f64> {
        let n = self.pre.total as i128;
        let pre = self.pre.correct as i128;
        let p_num = self.proposed.post.correct as i128 - pre;
        let b = self.baselines.len() as i128;
        if b == 0 {
            return None;
        }
        let t_num: i128 = self
            .baselines
            .iter()
            .map(|d| d.post.correct as i128 - pre)
            .sum();
        if t_num == 0 {
            return None;
        }
        let _ = n;
        // (p - t) / |t| with p = p_num/n, t = t_num/(b*n):
        // = (b*p_num - t_num) / |t_num|
        Some(100.0 * (b * p_num - t_num) as f64 / t_num.abs() as f64)
    }
}

/// Evaluate a victim on (possibly attacked) test data, with and without
/// each defense, and assemble the percent-increase metric.
///
/// `eval_data` carries the attacked (or clean) images with true labels;
/// the caller decides what attack produced them per the scenario spec.
pub fn run_scenario(
    scenario: &ScenarioSpec,
    victim: &Model,
    eval_data: &LabeledDataset,
    proposed: &DefenseEntry,
    pool: &[DefenseEntry],
) -> Result<ScenarioResult> {
    let wanted = proposed_defense_sources(scenario)?;
    if proposed.sources != wanted {
        return Err(Error::Contract(format!(
            "scenario '{}' expects the proposed defense trained on {wanted:?}, got {:?}",
            scenario.name, proposed.sources
        )));
    }
    let baselines = select_traditional_baselines(scenario, pool)?;

    let (pre_c, pre_n) = evaluate_counts(victim, eval_data)?;
    let pre = Accuracy {
        correct: pre_c,
        total: pre_n,
    };

    let outcome_for = |entry: &DefenseEntry| -> Result<DefenseOutcome> {
        let filtered = test_time_defense(&entry.dae, &eval_data.images)?;
        let filtered_ds = LabeledDataset {
            images: filtered,
            labels: eval_data.labels.clone(),
            provenance: eval_data.provenance,
        };
        let (c, n) = evaluate_counts(victim, &filtered_ds)?;
        let post = Accuracy {
            correct: c,
            total: n,
        };
        Ok(DefenseOutcome {
            defense: entry.name.clone(),
            post,
            post_accuracy: post.value(),
            improvement: accuracy_improvement(post.value(), pre.value()),
        })
    };

    let proposed_outcome = outcome_for(proposed)?;
    let baseline_outcomes: Vec<DefenseOutcome> = baselines
        .iter()
        .map(|d| outcome_for(d))
        .collect::<Result<_>>()?;

    // Exact integer arithmetic for p, t, and the final ratio.
    let b = baseline_outcomes.len() as i128;
    let p_num = proposed_outcome.post.correct as i128 - pre.correct as i128;
    let t_num: i128 = baseline_outcomes
        .iter()
        .map(|d| d.post.correct as i128 - pre.correct as i128)
        .sum();
    let p = p_num as f64 / pre.total as f64;
    let t = t_num as f64 / (b * pre.total as i128) as f64;
    let undefined = t_num == 0;
    let percent = if undefined {
        None
    } else {
        Some(100.0 * (b * p_num - t_num) as f64 / t_num.abs() as f64)
    };

    Ok(ScenarioResult {
        scenario: scenario.name.clone(),
        pre,
        pre_accuracy: pre.value(),
        negative_improvement: proposed_outcome.improvement < 0.0,
        proposed: proposed_outcome,
        baselines: baseline_outcomes,
        p,
        t,
        percent_increase: percent,
        undefined_percent_increase: undefined,
        low_confidence_t: t.abs() < LOW_CONFIDENCE_T,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn improvement_is_subtraction() {
        assert_eq!(accuracy_improvement(0.85, 0.60), 0.25);
        assert_eq!(accuracy_improvement(0.60, 0.60), 0.0);
        assert!((accuracy_improvement(0.55, 0.60) + 0.05).abs() < 1e-15);
    }

    #[test]
    fn percent_increase_arithmetic() {
        assert!((percent_increase(0.20, 0.10).unwrap() - 100.0).abs() < 1e-12);
        assert_eq!(percent_increase(0.10, 0.10).unwrap(), 0.0);
        // abs(t) in the denominator
        assert!((percent_increase(0.05, -0.05).unwrap() - 200.0).abs() < 1e-12);
        assert!(matches!(
            percent_increase(0.2, 0.0),
            Err(Error::UndefinedMetric(_))
        ));
    }

    fn pool_sources() -> Vec<DefenseSources> {
        // Full pool: per architecture type, all singles, pairs, triple;
        // plus per-attack cross-architecture ensembles.
        let mut out = Vec::new();
        for arch in [ArchType::Fc, ArchType::Cnn] {
            for a in ALL_ALGORITHMS {
                out.push(singleton(a, arch));
            }
            for i in 0..3 {
                for j in (i + 1)..3 {
                    out.push(
                        [(ALL_ALGORITHMS[i], arch), (ALL_ALGORITHMS[j], arch)]
                            .into_iter()
                            .collect(),
                    );
                }
            }
            out.push(ALL_ALGORITHMS.iter().map(|&a| (a, arch)).collect());
        }
        for a in ALL_ALGORITHMS {
            out.push([(a, ArchType::Fc), (a, ArchType::Cnn)].into_iter().collect());
        }
        out
    }

    fn fake_pool() -> Vec<DefenseEntry> {
        use crate::defense::mnist_dae;
        use crate::nn::build_model;
        let dae = build_model(&mnist_dae(), 0).unwrap();
        pool_sources()
            .into_iter()
            .enumerate()
            .map(|(i, sources)| DefenseEntry {
                name: format!("d{i}"),
                sources,
                dae: dae.clone(),
            })
            .collect()
    }

    #[test]
    fn baseline_cardinalities_match_scenario_families() {
        let pool = fake_pool();
        let cases = [
            (
                ScenarioSpec {
                    name: "vary-arch attacked".into(),
                    vary: VaryAxis::Architecture,
                    attacker: Some(AttackerSpec {
                        algorithm: AttackAlgorithm::Cw,
                        source_arch: ArchType::Fc,
                    }),
                    study_attack: None,
                    study_arch: ArchType::Fc,
                },
                1usize,
            ),
            (
                ScenarioSpec {
                    name: "vary-arch clean".into(),
                    vary: VaryAxis::Architecture,
                    attacker: None,
                    study_attack: Some(AttackAlgorithm::Fgs),
                    study_arch: ArchType::Fc,
                },
                2,
            ),
            (
                ScenarioSpec {
                    name: "vary-attack attacked".into(),
                    vary: VaryAxis::Attack,
                    attacker: Some(AttackerSpec {
                        algorithm: AttackAlgorithm::Fgs,
                        source_arch: ArchType::Fc,
                    }),
                    study_attack: None,
                    study_arch: ArchType::Fc,
                },
                3,
            ),
            (
                ScenarioSpec {
                    name: "vary-attack clean".into(),
                    vary: VaryAxis::Attack,
                    attacker: None,
                    study_attack: None,
                    study_arch: ArchType::Fc,
                },
                6,
            ),
        ];
        for (scenario, expected) in cases {
            let selected = select_traditional_baselines(&scenario, &pool).unwrap();
            assert_eq!(selected.len(), expected, "{}", scenario.name);
        }
    }

    #[test]
    fn vary_attack_baselines_exclude_attacker_algorithm() {
        let pool = fake_pool();
        let scenario = ScenarioSpec {
            name: "fgs attacker".into(),
            vary: VaryAxis::Attack,
            attacker: Some(AttackerSpec {
                algorithm: AttackAlgorithm::Fgs,
                source_arch: ArchType::Fc,
            }),
            study_attack: None,
            study_arch: ArchType::Fc,
        };
        let selected = select_traditional_baselines(&scenario, &pool).unwrap();
        for d in &selected {
            assert!(
                !d.sources.contains(&(AttackAlgorithm::Fgs, ArchType::Fc)),
                "baseline {} was trained with the attacker's algorithm",
                d.name
            );
        }
        // {cw}, {df}, {cw, df}
        assert!(selected.iter().any(|d| d.sources.len() == 2));
    }

    #[test]
    fn vary_arch_baseline_uses_other_architecture() {
        let pool = fake_pool();
        let scenario = ScenarioSpec {
            name: "cw on fc".into(),
            vary: VaryAxis::Architecture,
            attacker: Some(AttackerSpec {
                algorithm: AttackAlgorithm::Cw,
                source_arch: ArchType::Fc,
            }),
            study_attack: None,
            study_arch: ArchType::Fc,
        };
        let selected = select_traditional_baselines(&scenario, &pool).unwrap();
        assert_eq!(selected.len(), 1);
        assert_eq!(
            selected[0].sources,
            singleton(AttackAlgorithm::Cw, ArchType::Cnn)
        );
    }

    #[test]
    fn missing_defense_is_enumerated_gap() {
        let scenario = ScenarioSpec {
            name: "gap".into(),
            vary: VaryAxis::Attack,
            attacker: None,
            study_attack: None,
            study_arch: ArchType::Fc,
        };
        let err = select_traditional_baselines(&scenario, &[]);
        assert!(matches!(err, Err(Error::EnumeratedGap(_))));
    }

    #[test]
    fn percent_increase_recomputes_from_counts() {
        let mk = |correct: usize| DefenseOutcome {
            defense: "d".into(),
            post: Accuracy {
                correct,
                total: 100,
            },
            post_accuracy: correct as f64 / 100.0,
            improvement: (correct as f64 - 60.0) / 100.0,
        };
        let result = ScenarioResult {
            scenario: "s".into(),
            pre: Accuracy {
                correct: 60,
                total: 100,
            },
            pre_accuracy: 0.6,
            proposed: mk(80),
            baselines: vec![mk(70), mk(66)],
            p: 0.20,
            t: 0.08,
            percent_increase: Some(150.0),
            undefined_percent_increase: false,
            low_confidence_t: false,
            negative_improvement: false,
        };
        // p=0.2, t=(0.10+0.06)/2=0.08, (0.2-0.08)/0.08*100 = 150
        assert_eq!(result.recompute_percent_increase(), Some(150.0));
        assert_eq!(result.percent_increase, result.recompute_percent_increase());
    }
}
