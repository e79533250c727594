mod common;

use common::{desk_params, mask_snapshot, refiner_snapshot, DESK};
use rand::Rng;
use scargan::augment::{build_training_set, AugmentPlan, Regime, SimulationParams};
use scargan::dataset::{generate_corpus, CorpusConfig, ManifestEntry, Provenance, ScanSlice};
use scargan::segnet::{
    check_fold_split, cross_validate, evaluate_fold, pretrain, sample_warp, warp_image, weighted_seg_loss, AugmentConfig, CvConfig,
    SegNetConfig, SegTrainConfig, Segmenter, SEG_CLASSES,
};
use scargan::Error;

fn xent_oracle(pred: &[f64], target: &[u8]) -> f64 {
    let px = target.len();
    (0..px).map(|p| -pred[target[p] as usize * px + p].max(1e-7).ln()).sum::<f64>() / px as f64
}

/// Probability planes giving each pixel's target class probability `q`.
fn planes(target: &[u8], q: f64) -> Vec<f64> {
    let px = target.len();
    let rest = (1.0 - q) / (SEG_CLASSES - 1) as f64;
    let mut out = vec![rest; SEG_CLASSES * px];
    for (p, &t) in target.iter().enumerate() {
        out[t as usize * px + p] = q;
    }
    out
}

#[test]
fn seg_loss_examples() {
    let target = [0u8, 3, 2, 1];
    let scar = [false, true, false, false];
    let aux: Vec<f64> = scar.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect();
    assert!(weighted_seg_loss(&planes(&target, 1.0), &aux, &target, &scar, 5.0, 1.0).unwrap() <= 1e-6);

    let target = [3u8, 0];
    let q = (-0.1f64).exp();
    let got = weighted_seg_loss(&planes(&target, q), &[0.5, 0.5], &target, &[true, false], 5.0, 0.0).unwrap();
    assert!((got - 0.3).abs() < 1e-9, "{got}");
    assert!(weighted_seg_loss(&planes(&target, q), &[0.5], &target, &[true, false], 5.0, 0.0).is_err());
}

#[test]
fn unit_weight_reduces_to_cross_entropy() {
    let mut r = common::rng(31);
    for _ in 0..50 {
        let px = r.gen_range(1..40);
        let target: Vec<u8> = (0..px).map(|_| r.gen_range(0..SEG_CLASSES as u8)).collect();
        let scar: Vec<bool> = target.iter().map(|&t| t == 3 && r.gen_bool(0.5)).collect();
        let mut pred = vec![0.0; SEG_CLASSES * px];
        for p in 0..px {
            let w: Vec<f64> = (0..SEG_CLASSES).map(|_| r.gen_range(0.01..1.0)).collect();
            let sum: f64 = w.iter().sum();
            for c in 0..SEG_CLASSES {
                pred[c * px + p] = w[c] / sum;
            }
        }
        let aux: Vec<f64> = (0..px).map(|_| r.gen_range(0.0..1.0)).collect();
        let got = weighted_seg_loss(&pred, &aux, &target, &scar, 1.0, 0.0).unwrap();
        assert!((got - xent_oracle(&pred, &target)).abs() < 1e-7);
    }
}

#[test]
fn scar_weight_below_one_is_rejected() {
    assert!(SegTrainConfig { scar_pixel_weight: 0.5, ..Default::default() }.validate().is_err());
    assert!(SegTrainConfig::default().validate().is_ok());
}

fn ssfp(n: usize, seed: u64) -> Vec<ScanSlice> {
    let params = scargan::dataset::PhantomParams { scar_contrast: false, ..desk_params() };
    generate_corpus(&CorpusConfig { n_slices: n, params, seed, ..Default::default() }).unwrap()
}

fn desk_net() -> SegNetConfig {
    SegNetConfig { initial_filters: 8, depth: 3, input_size: DESK }
}

fn tiny(steps: u64) -> SegTrainConfig {
    SegTrainConfig {
        steps,
        batch_size: 2,
        log_every: 1,
        net: SegNetConfig { initial_filters: 4, depth: 2, input_size: DESK },
        ..Default::default()
    }
}

#[test]
fn desk_pretraining_segments_held_out_phantoms() {
    let train = ssfp(200, 0);
    let held_out = ssfp(40, 1);
    let cfg = SegTrainConfig { net: desk_net(), steps: 2000, ..Default::default() };
    let run = pretrain(&train, &cfg).unwrap();
    let m = evaluate_fold(&run.snapshot, &held_out, 0, Regime::X0, 0).unwrap();
    assert!(m.dice_endo > 0.9, "dice endo {}", m.dice_endo);
}

#[test]
fn augmentation_changes_inputs_not_counts() {
    let slices = ssfp(8, 2);
    let image: Vec<f32> = scargan::refinegan::normalize(&slices[0].image).0;
    let mut r = common::rng(0);
    let identity = sample_warp(DESK, &AugmentConfig::OFF, &mut r);
    assert_eq!(warp_image(&image, DESK, &identity), image);
    let warped = warp_image(&image, DESK, &sample_warp(DESK, &AugmentConfig::default(), &mut r));
    assert_eq!(warped.len(), image.len());
    assert_ne!(warped, image);

    let on = pretrain(&slices, &tiny(4)).unwrap();
    let off = pretrain(&slices, &SegTrainConfig { augment: AugmentConfig::OFF, ..tiny(4) }).unwrap();
    assert_eq!(on.log.len(), off.log.len());
    assert_eq!(on.snapshot.step, off.snapshot.step);
    assert_ne!(on.snapshot.tensors, off.snapshot.tensors);
}

#[test]
fn pretraining_is_deterministic() {
    let slices = ssfp(8, 3);
    let a = pretrain(&slices, &tiny(3)).unwrap();
    let b = pretrain(&slices, &tiny(3)).unwrap();
    assert_eq!(a.snapshot, b.snapshot);
    assert_eq!(a.log, b.log);
}

fn entry(slice: &str, patient: &str, provenance: Provenance) -> ManifestEntry {
    ManifestEntry {
        slice_id: slice.into(),
        patient_id: patient.into(),
        has_scar: provenance != Provenance::NoScar,
        provenance: Some(provenance),
        mask_snapshot_tag: None,
        refiner_snapshot_tag: None,
        source_slice_id: None,
    }
}

#[test]
fn fold_split_rejects_leakage_and_simulated_validation() {
    let train = vec![entry("a0", "a", Provenance::Real), entry("b0", "b", Provenance::Simulated)];
    assert!(check_fold_split(&train, &[entry("c0", "c", Provenance::Real)]).is_ok());
    let err = check_fold_split(&train, &[entry("a1", "a", Provenance::NoScar)]).unwrap_err();
    assert!(matches!(err, Error::FoldLeakage(ref p) if p == "a"), "{err}");
    assert!(matches!(check_fold_split(&train, &[entry("c1", "c", Provenance::Simulated)]), Err(Error::Contract(_))));
}

fn plan(regime: Regime) -> AugmentPlan {
    let snaps = (0..regime.copies() as u64).map(|i| mask_snapshot(i, i + 1, Some(3.0))).collect();
    AugmentPlan { regime, mask_snapshots: snaps, refiner: Some(refiner_snapshot(0)), params: SimulationParams::default() }
}

#[test]
fn regimes_differ_only_in_simulated_entries() {
    let corpus = generate_corpus(&CorpusConfig { n_slices: 40, params: desk_params(), seed: 5, ..Default::default() }).unwrap();
    let (scar, free): (Vec<ScanSlice>, Vec<ScanSlice>) = corpus.into_iter().partition(|s| s.has_scar);
    let zero = build_training_set(&scar, &free, &plan(Regime::X0)).unwrap();
    let five = build_training_set(&scar, &free, &plan(Regime::X5)).unwrap();
    let kept: Vec<&ManifestEntry> = five.entries.iter().filter(|e| e.provenance != Some(Provenance::Simulated)).collect();
    assert_eq!(kept, zero.entries.iter().collect::<Vec<_>>());
    assert_eq!(five.entries.len() - zero.entries.len(), five.count(Provenance::Simulated));
    assert!(five.count(Provenance::Simulated) > 0);
}

#[test]
fn cross_validation_is_reproducible_and_leak_free() {
    let corpus = generate_corpus(&CorpusConfig { n_slices: 32, params: desk_params(), seed: 6, ..Default::default() }).unwrap();
    let pre = pretrain(&ssfp(16, 7), &tiny(2)).unwrap().snapshot;
    let cv = CvConfig { fold_count: 2, fold_seed: 0, threads: 1 };
    let a = cross_validate(&corpus, &plan(Regime::X1), &pre, &tiny(3), &cv).unwrap();
    let b = cross_validate(&corpus, &plan(Regime::X1), &pre, &tiny(3), &cv).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.metrics.len(), 2);
    for (f, m) in a.metrics.iter().enumerate() {
        assert_eq!(m.fold, f);
        assert_eq!(m.regime, Regime::X1);
    }
    let threaded = cross_validate(&corpus, &plan(Regime::X1), &pre, &tiny(3), &CvConfig { threads: 2, ..cv }).unwrap();
    assert_eq!(threaded.metrics, a.metrics);
}

#[test]
fn predictions_are_consistent() {
    let slices = ssfp(8, 8);
    let snap = pretrain(&slices, &tiny(5)).unwrap().snapshot;
    let mut seg = Segmenter::new(&snap).unwrap();
    for s in &slices {
        let p = seg.predict(&s.image).unwrap();
        let plane = DESK * DESK;
        for px in 0..plane {
            let sum: f32 = (0..SEG_CLASSES).map(|c| p.probabilities[c * plane + px]).sum();
            assert!((sum - 1.0).abs() < 1e-5);
        }
        let myo = p.lv_myo();
        assert!(myo.iter().zip(p.lv_endo()).all(|(&m, e)| !(m && e)));
        assert_eq!(seg.predict(&s.image).unwrap().classes, p.classes);
        assert_eq!(seg.predict(&s.image).unwrap().probabilities, p.probabilities);
    }
    assert!(seg.predict(&[0u16; 100]).is_err());
    assert!(matches!(Segmenter::new(&mask_snapshot(0, 1, None)), Err(Error::Topology(_))));
}
