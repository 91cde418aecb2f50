//! Identification accuracy grids over defenses and attacks.
//!
//! A grid cell is one defended target under one attack configuration;
//! its value is the fraction of utterances whose defended prediction
//! still matches the true speaker. The clean (no attack) row is always
//! included. Randomness is keyed per cell and utterance id, never per
//! position, so reports do not depend on dataset ordering.

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attacks::{run_attack, universal_perturbation, AttackAlgorithm, AttackConfig, AttackTarget};
use crate::core::{RngFactory, SpeakerLabel, Waveform};
use crate::error::AdvoxError;
use crate::Result;

/// One labeled utterance of the evaluation set. Ids key the random
/// streams, so they must be unique within a grid run.
#[derive(Debug, Clone)]
pub struct EvalUtterance {
    pub id: String,
    pub wave: Waveform,
    pub label: SpeakerLabel,
}

/// One defended system under evaluation.
pub struct GridTarget<'a> {
    pub id: String,
    pub target: &'a dyn AttackTarget,
}

/// One metric value of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub defense: String,
    pub attack: String,
    pub metric: String,
    pub value: f64,
    pub n_utterances: usize,
    pub seed: u64,
}

/// Provenance of a report. Wall time is reporting-only and is excluded
/// from the serialized forms so reruns compare byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetadata {
    pub model_hash: String,
    pub toolkit_version: String,
    pub seed: u64,
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Assembled evaluation results: one row per (defense, attack, metric)
/// cell plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub metadata: EvalMetadata,
}

impl EvalReport {
    /// The row for one cell, when present.
    pub fn cell(&self, defense: &str, attack: &str, metric: &str) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.defense == defense && r.attack == attack && r.metric == metric)
    }
}

/// Label of the always-included unattacked row.
pub const CLEAN_ATTACK_ID: &str = "clean";

fn check_utterances(data: &[EvalUtterance]) -> Result<()> {
    if data.is_empty() {
        return Err(AdvoxError::Eval("evaluation set is empty".into()));
    }
    let mut seen = BTreeSet::new();
    for u in data {
        if !seen.insert(u.id.as_str()) {
            return Err(AdvoxError::Eval(format!(
                "duplicate utterance id {:?} in the evaluation set",
                u.id
            )));
        }
    }
    Ok(())
}

/// Accuracy of one defended target on unperturbed inputs, in percent.
fn clean_accuracy(
    cell: &GridTarget<'_>,
    order: &[&EvalUtterance],
    rngf: &RngFactory,
) -> Result<f64> {
    let mut correct = 0usize;
    for u in order {
        let mut rng = rngf.stream(&format!("eval/predict/{}/clean/{}", cell.id, u.id));
        if cell.target.predict(&u.wave, &mut rng)? == u.label.index() {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / order.len() as f64)
}

/// Accuracy of one defended target under one attack, in percent, plus
/// the number of utterances whose attack failed and fell back to the
/// unperturbed input.
fn attacked_accuracy(
    cell: &GridTarget<'_>,
    attack: &AttackConfig,
    order: &[&EvalUtterance],
    rngf: &RngFactory,
) -> Result<(f64, usize)> {
    let attack_id = attack.cell_id();
    let mut correct = 0usize;
    let mut failures = 0usize;

    // Universal perturbations are dataset-level: fit one delta on the
    // evaluation set, then apply it to every utterance.
    let universal = if attack.algorithm == AttackAlgorithm::Universal {
        let len = order[0].wave.len();
        if order.iter().any(|u| u.wave.len() != len) {
            return Err(AdvoxError::Eval(
                "universal grid cells need equal-length utterances".into(),
            ));
        }
        attack.validate()?;
        let waves: Vec<Waveform> = order.iter().map(|u| u.wave.clone()).collect();
        let mut rng = rngf.stream(&format!("eval/universal/{}/{}", cell.id, attack_id));
        // The fool-rate target only stops fitting early; the config's
        // iteration count is the epoch budget.
        match universal_perturbation(
            cell.target,
            &waves,
            attack.norm,
            attack.eps,
            0.8,
            attack.iterations.max(1),
            &mut rng,
        ) {
            Ok(r) => Some(r.perturbation),
            Err(e) => {
                eprintln!(
                    "universal fit failed for defense {:?}: {e}; grid cell falls back to \
                     unperturbed inputs",
                    cell.id
                );
                failures = order.len();
                None
            }
        }
    } else {
        None
    };

    for u in order {
        let adversarial = if attack.algorithm == AttackAlgorithm::Universal {
            match &universal {
                Some(delta) => Some(delta.apply(&u.wave)?),
                None => None,
            }
        } else {
            let mut rng = rngf.stream(&format!("eval/attack/{}/{}/{}", cell.id, attack_id, u.id));
            match run_attack(cell.target, &u.wave, u.label, attack, &mut rng) {
                Ok(r) => Some(r.adversarial),
                Err(e) => {
                    eprintln!(
                        "attack {attack_id} failed on utterance {:?}: {e}; counted with the \
                         unperturbed input",
                        u.id
                    );
                    failures += 1;
                    None
                }
            }
        };
        let x = adversarial.as_ref().unwrap_or(&u.wave);
        let mut rng = rngf.stream(&format!("eval/predict/{}/{}/{}", cell.id, attack_id, u.id));
        if cell.target.predict(x, &mut rng)? == u.label.index() {
            correct += 1;
        }
    }
    Ok((100.0 * correct as f64 / order.len() as f64, failures))
}

/// Runs every requested defense under the clean condition and every
/// attack configuration, producing one accuracy row per cell.
///
/// Utterances are processed in id order and all randomness is keyed on
/// ids, so permuting the input slice cannot change the report. An
/// attack that errors on an utterance is logged and that utterance is
/// scored on its unperturbed input.
pub fn accuracy_grid(
    targets: &[GridTarget<'_>],
    attacks: &[AttackConfig],
    data: &[EvalUtterance],
    rngf: &RngFactory,
    model_hash: &str,
) -> Result<EvalReport> {
    let start = Instant::now();
    if targets.is_empty() {
        return Err(AdvoxError::Eval("no defended targets requested".into()));
    }
    check_utterances(data)?;
    let mut order: Vec<&EvalUtterance> = data.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));

    let mut rows = Vec::new();
    for cell in targets {
        let acc = clean_accuracy(cell, &order, rngf)?;
        rows.push(EvalRow {
            defense: cell.id.clone(),
            attack: CLEAN_ATTACK_ID.into(),
            metric: "accuracy_pct".into(),
            value: acc,
            n_utterances: order.len(),
            seed: rngf.seed(),
        });
        for attack in attacks {
            let (acc, failures) = attacked_accuracy(cell, attack, &order, rngf)?;
            if failures > 0 {
                eprintln!(
                    "cell ({}, {}): {failures} of {} attacks failed",
                    cell.id,
                    attack.cell_id(),
                    order.len()
                );
            }
            rows.push(EvalRow {
                defense: cell.id.clone(),
                attack: attack.cell_id(),
                metric: "accuracy_pct".into(),
                value: acc,
                n_utterances: order.len(),
                seed: rngf.seed(),
            });
        }
    }

    Ok(EvalReport {
        rows,
        metadata: EvalMetadata {
            model_hash: model_hash.into(),
            toolkit_version: env!("CARGO_PKG_VERSION").into(),
            seed: rngf.seed(),
            wall_time_s: start.elapsed().as_secs_f64(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::LinearTarget;
    use ndarray::{Array1, Array2};

    /// Three well-separated classes over 8-sample waveforms.
    fn toy_target() -> LinearTarget {
        let mut w = Array2::zeros((3, 8));
        for j in 0..8 {
            w[[0, j]] = if j < 3 { 4.0 } else { -1.0 };
            w[[1, j]] = if (3..6).contains(&j) { 4.0 } else { -1.0 };
            w[[2, j]] = if j >= 6 { 4.0 } else { -1.0 };
        }
        LinearTarget::new(w, Array1::zeros(3))
    }

    fn toy_data() -> Vec<EvalUtterance> {
        let mut data = Vec::new();
        for (i, active) in [(0usize, 0..3), (1, 3..6), (2, 6..8)] {
            for k in 0..4 {
                let mut x = Array1::from_elem(8, 0.01);
                for j in active.clone() {
                    x[j] = 0.6 + 0.05 * k as f32;
                }
                data.push(EvalUtterance {
                    id: format!("spk{i}_utt{k}"),
                    wave: Waveform::new(x).unwrap(),
                    label: SpeakerLabel(i),
                });
            }
        }
        data
    }

    #[test]
    fn clean_row_is_always_included_and_perfect_on_separable_data() {
        let t = toy_target();
        let cells = [GridTarget { id: "none".into(), target: &t }];
        let report =
            accuracy_grid(&cells, &[], &toy_data(), &RngFactory::new(7), "deadbeef").unwrap();
        assert_eq!(report.rows.len(), 1);
        let row = report.cell("none", CLEAN_ATTACK_ID, "accuracy_pct").unwrap();
        assert_eq!(row.value, 100.0);
        assert_eq!(row.n_utterances, 12);
        assert_eq!(row.seed, 7);
    }

    #[test]
    fn every_requested_cell_appears_exactly_once() {
        let t = toy_target();
        let cells = [
            GridTarget { id: "none".into(), target: &t },
            GridTarget { id: "smoothing".into(), target: &t },
        ];
        let attacks = [AttackConfig::fgsm(0.05), AttackConfig::bim(0.05, 0.02, 3)];
        let report =
            accuracy_grid(&cells, &attacks, &toy_data(), &RngFactory::new(7), "deadbeef").unwrap();
        assert_eq!(report.rows.len(), 2 * 3);
        for defense in ["none", "smoothing"] {
            for attack in [CLEAN_ATTACK_ID, "fgsm_eps0.05", "bim3_eps0.05"] {
                let n = report
                    .rows
                    .iter()
                    .filter(|r| r.defense == defense && r.attack == attack)
                    .count();
                assert_eq!(n, 1, "cell ({defense}, {attack})");
            }
        }
    }

    #[test]
    fn report_is_invariant_under_utterance_permutation() {
        let t = toy_target();
        let cells = [GridTarget { id: "none".into(), target: &t }];
        let attacks = [AttackConfig::fgsm(0.08), {
            let mut u = AttackConfig::fgsm(0.1);
            u.algorithm = AttackAlgorithm::Universal;
            u.iterations = 3;
            u
        }];
        let data = toy_data();
        let mut shuffled = data.clone();
        shuffled.reverse();
        shuffled.swap(1, 5);
        let rngf = RngFactory::new(11);
        let a = accuracy_grid(&cells, &attacks, &data, &rngf, "h").unwrap();
        let b = accuracy_grid(&cells, &attacks, &shuffled, &rngf, "h").unwrap();
        assert_eq!(a.rows, b.rows);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let t = toy_target();
        let cells = [GridTarget { id: "none".into(), target: &t }];
        let mut data = toy_data();
        data[3].id = data[0].id.clone();
        match accuracy_grid(&cells, &[], &data, &RngFactory::new(7), "h") {
            Err(AdvoxError::Eval(msg)) => assert!(msg.contains("duplicate")),
            other => panic!("expected a duplicate-id error, got {other:?}"),
        }
    }

    #[test]
    fn strong_attack_rows_fall_below_the_clean_row() {
        let t = toy_target();
        let cells = [GridTarget { id: "none".into(), target: &t }];
        let attacks = [AttackConfig::bim(0.4, 0.1, 8)];
        let report =
            accuracy_grid(&cells, &attacks, &toy_data(), &RngFactory::new(3), "h").unwrap();
        let clean = report.cell("none", CLEAN_ATTACK_ID, "accuracy_pct").unwrap().value;
        let hit = report.cell("none", "bim8_eps0.4", "accuracy_pct").unwrap().value;
        assert!(hit < clean, "attack did nothing: clean {clean}, attacked {hit}");
    }
}
