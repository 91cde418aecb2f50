//! Evaluation: identification accuracy grids, verification scoring,
//! and report assembly.
//!
//! Identification is scored as top-1 accuracy over a grid of defended
//! targets and attack configurations ([`accuracy_grid`]). Verification
//! scores trials by cosine between defended embeddings, calibrates the
//! scores to log-likelihood-ratio scale on the benign trials, and
//! reports equal error rate ([`verification_eval`]). Attacks touch
//! only the test side of a trial; enrollment audio is embedded once,
//! benign, and checksummed around the attack phase.

mod calibration;
mod eer;
mod grid;
mod report;

pub use calibration::{calibrate, Calibration};
pub use eer::{eer, eer_threshold_sweep};
pub use grid::{
    accuracy_grid, EvalMetadata, EvalReport, EvalRow, EvalUtterance, GridTarget, CLEAN_ATTACK_ID,
};
pub use report::{
    csv_string, json_string, render_text, write_csv, write_json, write_text,
    REPORT_SCHEMA_VERSION,
};

use std::collections::{BTreeMap, BTreeSet};

use ndarray::ArrayView1;
use sha2::{Digest, Sha256};

use crate::attacks::{run_attack, AttackConfig};
use crate::core::{RngFactory, Waveform, SAMPLE_RATE};
use crate::defenses::DefenseChain;
use crate::error::AdvoxError;
use crate::Result;

/// Cosine similarity between two embeddings, in `[-1, 1]`.
pub fn cosine_score(e1: ArrayView1<f32>, e2: ArrayView1<f32>) -> Result<f64> {
    if e1.len() != e2.len() {
        return Err(AdvoxError::Eval(format!(
            "embedding dimensions differ: {} vs {}",
            e1.len(),
            e2.len()
        )));
    }
    let mut dot = 0.0f64;
    let mut n1 = 0.0f64;
    let mut n2 = 0.0f64;
    for (&a, &b) in e1.iter().zip(e2.iter()) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        n1 += a * a;
        n2 += b * b;
    }
    if n1 == 0.0 || n2 == 0.0 {
        return Err(AdvoxError::Eval("cosine of a zero embedding".into()));
    }
    let c = dot / (n1.sqrt() * n2.sqrt());
    if !c.is_finite() {
        return Err(AdvoxError::Eval("cosine overflowed".into()));
    }
    Ok(c.clamp(-1.0, 1.0))
}

/// Test utterances are truncated to this length before scoring or
/// attacking, keeping per-trial attack cost bounded.
pub const TEST_UTTERANCE_CAP_S: f32 = 5.0;

fn cap_test_wave(w: &Waveform) -> Waveform {
    let cap = (TEST_UTTERANCE_CAP_S * SAMPLE_RATE as f32) as usize;
    if w.len() <= cap {
        return w.clone();
    }
    let prefix = ndarray::Array1::from_iter(w.samples().iter().take(cap).copied());
    Waveform::new(prefix).expect("prefix of a valid waveform")
}

/// One verification trial: enroll utterance, test utterance, and
/// whether they share a speaker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub target: bool,
}

/// A list of verification trials over manifest utterance ids.
#[derive(Debug, Clone, Default)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    /// Every enroll x test pair, labeled target when the speakers
    /// match.
    pub fn cross(enrolls: &[EvalUtterance], tests: &[EvalUtterance]) -> TrialList {
        let mut trials = Vec::with_capacity(enrolls.len() * tests.len());
        for e in enrolls {
            for t in tests {
                trials.push(Trial {
                    enroll: e.id.clone(),
                    test: t.id.clone(),
                    target: e.label == t.label,
                });
            }
        }
        TrialList { trials }
    }
}

/// Verification outcome under one (optional) attack configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    /// Attack cell id, or `clean`.
    pub attack: String,
    /// Equal error rate of the evaluated condition, percent.
    pub eer_pct: f64,
    /// Equal error rate of the benign run the calibration was fitted
    /// on; equals `eer_pct` when no attack was requested.
    pub benign_eer_pct: f64,
    pub calibration: Calibration,
    pub n_target: usize,
    pub n_nontarget: usize,
    /// Test utterances whose attack errored and fell back to benign
    /// audio.
    pub attack_failures: usize,
}

fn wave_checksum(w: &Waveform) -> [u8; 32] {
    let mut h = Sha256::new();
    for &s in w.samples() {
        h.update(s.to_le_bytes());
    }
    h.finalize().into()
}

/// Scores a trial list against a defended chain and reports equal
/// error rate over calibrated cosine scores.
///
/// Enrollment embeddings are computed once from benign audio; the
/// attack, when given, perturbs only the (duration-capped) test
/// waveforms. Calibration is always fitted on the benign scores and
/// applied unchanged to the attacked scores, mirroring a deployment
/// that calibrates on bonafide data before any adversary shows up.
pub fn verification_eval(
    chain: &DefenseChain<'_, f32>,
    utterances: &[EvalUtterance],
    trials: &TrialList,
    attack: Option<&AttackConfig>,
    rngf: &RngFactory,
) -> Result<VerificationReport> {
    if trials.trials.is_empty() {
        return Err(AdvoxError::Eval("empty trial list".into()));
    }
    let mut by_id: BTreeMap<&str, &EvalUtterance> = BTreeMap::new();
    for u in utterances {
        if by_id.insert(u.id.as_str(), u).is_some() {
            return Err(AdvoxError::Eval(format!("duplicate utterance id {:?}", u.id)));
        }
    }
    for t in &trials.trials {
        for id in [&t.enroll, &t.test] {
            if !by_id.contains_key(id.as_str()) {
                return Err(AdvoxError::Eval(format!(
                    "trial references unknown utterance id {id:?}"
                )));
            }
        }
    }

    let enroll_ids: BTreeSet<&str> = trials.trials.iter().map(|t| t.enroll.as_str()).collect();
    let test_ids: BTreeSet<&str> = trials.trials.iter().map(|t| t.test.as_str()).collect();

    let enroll_sums: BTreeMap<&str, [u8; 32]> = enroll_ids
        .iter()
        .map(|&id| (id, wave_checksum(&by_id[id].wave)))
        .collect();

    let mut enroll_emb = BTreeMap::new();
    for &id in &enroll_ids {
        let mut rng = rngf.stream(&format!("verif/enroll/{id}"));
        let emb = chain.defended_embedding(by_id[id].wave.samples(), &mut rng)?;
        enroll_emb.insert(id, emb);
    }

    let mut benign_emb = BTreeMap::new();
    for &id in &test_ids {
        let capped = cap_test_wave(&by_id[id].wave);
        let mut rng = rngf.stream(&format!("verif/test/{id}"));
        benign_emb.insert(id, chain.defended_embedding(capped.samples(), &mut rng)?);
    }

    let score_trials = |emb: &BTreeMap<&str, ndarray::Array1<f32>>| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut targets = Vec::new();
        let mut nontargets = Vec::new();
        for t in &trials.trials {
            let s = cosine_score(
                enroll_emb[t.enroll.as_str()].view(),
                emb[t.test.as_str()].view(),
            )?;
            if t.target {
                targets.push(s);
            } else {
                nontargets.push(s);
            }
        }
        Ok((targets, nontargets))
    };

    let (benign_t, benign_n) = score_trials(&benign_emb)?;
    if benign_t.is_empty() || benign_n.is_empty() {
        return Err(AdvoxError::Eval(
            "trial list needs both target and nontarget trials".into(),
        ));
    }
    let cal = calibrate(&benign_t, &benign_n)?;
    let benign_eer = eer(&cal.apply_all(&benign_t), &cal.apply_all(&benign_n));

    let (eer_pct, attack_label, failures) = match attack {
        None => (benign_eer, CLEAN_ATTACK_ID.to_string(), 0),
        Some(cfg) => {
            let mut failures = 0usize;
            let mut adv_emb = BTreeMap::new();
            for &id in &test_ids {
                let u = by_id[id];
                let capped = cap_test_wave(&u.wave);
                let mut rng = rngf.stream(&format!("verif/attack/{id}"));
                let adv = match run_attack(chain, &capped, u.label, cfg, &mut rng) {
                    Ok(r) => r.adversarial,
                    Err(e) => {
                        eprintln!(
                            "verification attack failed on utterance {id:?}: {e}; scored benign"
                        );
                        failures += 1;
                        capped
                    }
                };
                let mut rng = rngf.stream(&format!("verif/test_adv/{id}"));
                adv_emb.insert(id, chain.defended_embedding(adv.samples(), &mut rng)?);
            }
            let (adv_t, adv_n) = score_trials(&adv_emb)?;
            (
                eer(&cal.apply_all(&adv_t), &cal.apply_all(&adv_n)),
                cfg.cell_id(),
                failures,
            )
        }
    };

    for (&id, before) in &enroll_sums {
        assert_eq!(
            *before,
            wave_checksum(&by_id[id].wave),
            "enrollment audio for {id:?} changed during evaluation"
        );
    }

    Ok(VerificationReport {
        attack: attack_label,
        eer_pct,
        benign_eer_pct: benign_eer,
        calibration: cal,
        n_target: benign_t.len(),
        n_nontarget: benign_n.len(),
        attack_failures: failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{seeded_rng, SpeakerLabel, ThreatMode};
    use crate::dsp::{LogMelConfig, LogMelExtractor};
    use crate::model::{XVectorClassifier, XVectorConfig};
    use ndarray::Array1;

    #[test]
    fn cosine_identities() {
        let a = Array1::from_vec(vec![0.5f32, -1.0, 2.0]);
        assert!((cosine_score(a.view(), a.view()).unwrap() - 1.0).abs() < 1e-12);
        let neg = a.mapv(|v| -v);
        assert!((cosine_score(a.view(), neg.view()).unwrap() + 1.0).abs() < 1e-12);
        let orth = Array1::from_vec(vec![2.0f32, 1.0, 0.0]);
        let orth2 = Array1::from_vec(vec![-1.0f32, 2.0, 0.0]);
        assert!(cosine_score(orth.view(), orth2.view()).unwrap().abs() < 1e-12);
        assert!(cosine_score(a.view(), Array1::zeros(3).view()).is_err());
        let short = Array1::from_vec(vec![1.0f32, 2.0]);
        assert!(cosine_score(a.view(), short.view()).is_err());
    }

    fn tiny_setup() -> (XVectorClassifier<f32>, LogMelExtractor<f32>) {
        let cfg = XVectorConfig {
            n_mels: 8,
            encoder_channels: vec![2, 4],
            embed_dim: 6,
            n_classes: 2,
            aam_margin: 0.2,
            aam_scale: 20.0,
        };
        let mut rng = seeded_rng(5);
        let model = XVectorClassifier::new(cfg, &mut rng);
        let mel = LogMelConfig { n_mels: 8, ..LogMelConfig::default() };
        (model, LogMelExtractor::new(mel))
    }

    fn toy_utterances() -> Vec<EvalUtterance> {
        let mut out = Vec::new();
        for (label, freq) in [(0usize, 220.0f32), (1, 700.0)] {
            for k in 0..3 {
                let phase = 0.13 * k as f32;
                let samples = Array1::from_shape_fn(3200, |i| {
                    0.3 * (2.0 * std::f32::consts::PI * freq * i as f32 / SAMPLE_RATE as f32
                        + phase)
                        .sin()
                });
                out.push(EvalUtterance {
                    id: format!("s{label}_u{k}"),
                    wave: Waveform::new(samples).unwrap(),
                    label: SpeakerLabel(label),
                });
            }
        }
        out
    }

    #[test]
    fn long_test_utterances_are_capped_to_five_seconds() {
        let long = Waveform::new(Array1::from_elem(SAMPLE_RATE as usize * 6, 0.1)).unwrap();
        let capped = cap_test_wave(&long);
        assert_eq!(capped.len(), SAMPLE_RATE as usize * 5);
        assert_eq!(capped.samples()[0], 0.1);
        let short = Waveform::new(Array1::from_elem(100, 0.1f32)).unwrap();
        assert_eq!(cap_test_wave(&short).len(), 100);
    }

    #[test]
    fn verification_is_deterministic_and_leaves_enrollment_benign() {
        let (model, extractor) = tiny_setup();
        let chain =
            DefenseChain::new(vec![], &model, &extractor, ThreatMode::WhiteboxE2ed).unwrap();
        let utts = toy_utterances();
        let enrolls = vec![utts[0].clone(), utts[3].clone()];
        let tests = vec![utts[1].clone(), utts[2].clone(), utts[4].clone(), utts[5].clone()];
        let trials = TrialList::cross(&enrolls, &tests);
        let rngf = RngFactory::new(99);
        let attack = AttackConfig::fgsm(0.005);

        let r1 = verification_eval(&chain, &utts, &trials, Some(&attack), &rngf).unwrap();
        let r2 = verification_eval(&chain, &utts, &trials, Some(&attack), &rngf).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.attack_failures, 0);
        assert_eq!(r1.n_target, 4);
        assert_eq!(r1.n_nontarget, 4);
        assert!(r1.benign_eer_pct <= 50.0);
        assert_eq!(r1.attack, "fgsm_eps0.005");
    }

    #[test]
    fn unknown_trial_ids_are_rejected() {
        let (model, extractor) = tiny_setup();
        let chain =
            DefenseChain::new(vec![], &model, &extractor, ThreatMode::WhiteboxE2ed).unwrap();
        let utts = toy_utterances();
        let trials = TrialList {
            trials: vec![Trial { enroll: "s0_u0".into(), test: "missing".into(), target: true }],
        };
        match verification_eval(&chain, &utts, &trials, None, &RngFactory::new(1)) {
            Err(AdvoxError::Eval(msg)) => assert!(msg.contains("missing")),
            other => panic!("expected an unknown-id error, got {other:?}"),
        }
    }

    #[test]
    fn single_class_trial_lists_are_rejected() {
        let (model, extractor) = tiny_setup();
        let chain =
            DefenseChain::new(vec![], &model, &extractor, ThreatMode::WhiteboxE2ed).unwrap();
        let utts = toy_utterances();
        let trials = TrialList {
            trials: vec![
                Trial { enroll: "s0_u0".into(), test: "s0_u1".into(), target: true },
                Trial { enroll: "s1_u0".into(), test: "s1_u1".into(), target: true },
            ],
        };
        match verification_eval(&chain, &utts, &trials, None, &RngFactory::new(1)) {
            Err(AdvoxError::Eval(msg)) => {
                assert!(msg.contains("target and nontarget"), "{msg}")
            }
            other => panic!("expected a single-class error, got {other:?}"),
        }
    }
}
