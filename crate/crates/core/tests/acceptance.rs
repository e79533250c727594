//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any failure.

mod common;

use std::collections::HashMap;
use std::time::Instant;

use common::{
    binomial_oracle, chebyshev_distance, desk_params, dice_oracle, fwhm_oracle, inclusion_oracle, nearest_rank_oracle, partial_mask_snapshot,
    refiner_snapshot, tiny_net, DESK,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use scargan::augment::{
    blend, build_training_set, make_blend_weights, select_snapshots, AugmentPlan, Regime, SimulationParams, TrainingSet,
};
use scargan::dataset::{generate_corpus, Class, CorpusConfig, PhantomParams, Provenance, ScanSlice, SegMask, NUM_CLASSES};
use scargan::evalkit::{binomial_p, dice, fwhm_scar_mask, scar_inclusion, FoldMetrics};
use scargan::heuristic::{paint_scar, HeuristicParams, PercentileRule};
use scargan::maskgan::{disc_loss, mask_gen_loss, simulate_shape, train_maskgan, GanNetConfig, MaskGanConfig, ReplayBuffer, PROB_FLOOR};
use scargan::refinegan::{heuristic_inputs, normalize, refine_gen_loss, train_refinegan, RefineGanConfig, Refiner};
use scargan::segnet::{cross_validate, pretrain, weighted_seg_loss, CvConfig, SegNetConfig, SegTrainConfig, SEG_CLASSES};
use scargan::study::{compute_stats, Response, Truth};
use scargan::Tensor32;

type Outcome = Result<String, String>;

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn probs(r: &mut ChaCha8Rng, classes: usize, pixels: usize) -> Vec<f64> {
    let mut out = vec![0.0; classes * pixels];
    for p in 0..pixels {
        let w: Vec<f64> = (0..classes).map(|_| r.gen_range(0.01..1.0)).collect();
        let sum: f64 = w.iter().sum();
        for c in 0..classes {
            out[c * pixels + p] = w[c] / sum;
        }
    }
    out
}

fn loss_suite() -> Outcome {
    let mut r = common::rng(100);
    let probes = 25;
    for _ in 0..probes {
        let px = r.gen_range(1..8);
        let pred = probs(&mut r, NUM_CLASSES, px);
        let mut input = vec![0.0; NUM_CLASSES * px];
        for p in 0..px {
            input[r.gen_range(0..NUM_CLASSES) * px + p] = 1.0;
        }
        let (d, alpha): (f64, f64) = (r.gen_range(-0.5..1.5), r.gen_range(0.0..3.0));
        let xent: f64 = pred.iter().zip(&input).map(|(q, t)| -t * q.max(PROB_FLOOR).ln()).sum::<f64>() / (NUM_CLASSES * px) as f64;
        let want = (1.0 - d).powi(2) + alpha * xent;
        let got = mask_gen_loss(d, &pred, &input, NUM_CLASSES, alpha).map_err(|e| e.to_string())?;
        check((got - want).abs() < 1e-6, format!("mask_gen_loss {got} vs {want}"))?;

        let (a, b): (f64, f64) = (r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0));
        check((disc_loss(a, b) - ((a - 1.0).powi(2) + b * b)).abs() < 1e-6, "disc_loss")?;

        let n = r.gen_range(1..64);
        let x: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
        let alpha: f64 = r.gen_range(0.1..20.0);
        let want = (1.0 - d).powi(2) + alpha * x.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;
        let got = refine_gen_loss(d, &x, &y, alpha).map_err(|e| e.to_string())?;
        check((got - want).abs() < 1e-6, format!("refine_gen_loss {got} vs {want}"))?;

        let px = r.gen_range(1..40);
        let pred = probs(&mut r, SEG_CLASSES, px);
        let target: Vec<u8> = (0..px).map(|_| r.gen_range(0..SEG_CLASSES as u8)).collect();
        let scar: Vec<bool> = target.iter().map(|&t| t == 3 && r.gen_bool(0.5)).collect();
        let aux: Vec<f64> = (0..px).map(|_| r.gen_range(0.01..0.99)).collect();
        let (w, aw): (f64, f64) = (r.gen_range(1.0..10.0), r.gen_range(0.0..2.0));
        let mut xent = 0.0;
        let mut bce = 0.0;
        for p in 0..px {
            let weight = if scar[p] { w } else { 1.0 };
            xent += weight * -pred[target[p] as usize * px + p].max(1e-7).ln();
            bce += -if scar[p] { aux[p].ln() } else { (1.0 - aux[p]).ln() };
        }
        let want = xent / px as f64 + aw * bce / px as f64;
        let got = weighted_seg_loss(&pred, &aux, &target, &scar, w, aw).map_err(|e| e.to_string())?;
        check((got - want).abs() < 1e-6, format!("weighted_seg_loss {got} vs {want}"))?;
    }
    Ok(format!("{probes} probes per loss within 1e-6"))
}

fn gradient_checks() -> Outcome {
    let m = common::mask_loss_gradcheck(0);
    let r = common::refine_loss_gradcheck(0);
    check(m.max_rel_error < 1e-3 && r.max_rel_error < 1e-3, format!("mask {:e}, refine {:e}", m.max_rel_error, r.max_rel_error))?;
    Ok(format!("max rel error mask {:.2e}, refine {:.2e}", m.max_rel_error, r.max_rel_error))
}

fn heuristic_exactness() -> Outcome {
    let mut r = common::rng(101);
    let mut cases = 0;
    while cases < 200 {
        let n = r.gen_range(1..=256);
        let image: Vec<u16> = (0..n).map(|_| r.gen()).collect();
        let scar: Vec<bool> = (0..n).map(|_| r.gen()).collect();
        let endo: Vec<bool> = (0..n).map(|_| r.gen()).collect();
        if !endo.contains(&true) {
            continue;
        }
        let params = HeuristicParams { percentile: r.gen_range(0.01..0.99), percentile_rule: PercentileRule::NearestRank };
        let pool: Vec<u16> = image.iter().zip(&endo).filter(|(_, &e)| e).map(|(&v, _)| v).collect();
        let v = nearest_rank_oracle(&pool, params.percentile);
        let out = paint_scar(&image, &scar, &endo, &params).map_err(|e| e.to_string())?;
        let want: Vec<u16> = image.iter().zip(&scar).map(|(&x, &s)| if s { v } else { x }).collect();
        check(out == want, format!("case {cases} differs from the oracle"))?;
        let none = vec![false; n];
        check(paint_scar(&image, &none, &endo, &params).map_err(|e| e.to_string())? == image, "empty scar changed the image")?;
        cases += 1;
    }
    Ok(format!("{cases} cases bit-exact, empty scar is identity"))
}

fn desk_corpus(n: usize, seed: u64) -> (Vec<ScanSlice>, Vec<ScanSlice>) {
    let corpus = generate_corpus(&CorpusConfig { n_slices: n, params: desk_params(), seed, ..Default::default() }).unwrap();
    corpus.into_iter().partition(|s| s.has_scar)
}

fn blending_exactness() -> Outcome {
    let (_, free) = desk_corpus(60, 7);
    let shape = partial_mask_snapshot(9, 1);
    let refiner_snap = refiner_snapshot(3);
    let params = SimulationParams::default();
    let mut refiner = Refiner::new(&refiner_snap).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for s in &free {
        let out = scargan::augment::simulate_slice(s, &shape, &refiner_snap, &params).map_err(|e| e.to_string())?;
        if out.degenerate {
            continue;
        }
        let m = &out.slice.mask;
        let region = m.union(&[Class::LvMyo, Class::Scar]);
        let d = chebyshev_distance(&s.mask.indicator(Class::LvMyo), DESK);
        for i in 0..d.len() {
            if d[i] >= 3 {
                check(out.slice.image[i] == s.image[i], format!("{} pixel {i} changed", s.slice_id))?;
            }
        }
        let painted = paint_scar(&s.image, &m.indicator(Class::Scar), &m.indicator(Class::LvEndo), &params.heuristic).map_err(|e| e.to_string())?;
        let refined = refiner.refine_u16(&painted).map_err(|e| e.to_string())?;
        let w = make_blend_weights(&region, DESK, &params.blend).map_err(|e| e.to_string())?;
        for i in 0..w.len() {
            let (o, r) = (s.image[i] as f64, refined[i] as f64);
            let exact = w[i] * r + (1.0 - w[i]) * o;
            check((0.0..=1.0).contains(&w[i]), "weight outside [0,1]")?;
            check(exact >= o.min(r) - 1e-9 && exact <= o.max(r) + 1e-9, "not a convex combination")?;
            check((out.slice.image[i] as f64 - exact).abs() <= 0.5, "quantization off by more than half a level")?;
        }
        checked += 1;
    }
    let mut r = common::rng(102);
    for _ in 0..200 {
        let o: Vec<u16> = (0..64).map(|_| r.gen()).collect();
        let x: Vec<u16> = (0..64).map(|_| r.gen()).collect();
        let w: Vec<f64> = (0..64).map(|_| r.gen_range(0.0..=1.0)).collect();
        let b = blend(&o, &x, &w).map_err(|e| e.to_string())?;
        for i in 0..64 {
            check(b[i] >= o[i].min(x[i]) && b[i] <= o[i].max(x[i]), "blend outside the convex hull")?;
        }
    }
    check(checked > 0, "no slice was simulated")?;
    Ok(format!("{checked} simulated slices identical beyond 3 px, convex everywhere"))
}

fn tagged(values: impl IntoIterator<Item = f32>) -> Tensor32 {
    let v: Vec<f32> = values.into_iter().collect();
    Tensor32::from_vec([v.len(), 1, 1, 1], v)
}

fn replay_and_schedule() -> Outcome {
    for b in [2usize, 4, 8, 16] {
        let mut buf = ReplayBuffer::new(64, b as u64);
        for k in 0..4 {
            buf.push(&tagged((0..b).map(|i| (k * b + i) as f32)));
        }
        let fresh = tagged((0..b).map(|_| -1.0));
        for _ in 0..50 {
            let (batch, picks) = buf.compose(&fresh, b).map_err(|e| e.to_string())?;
            check(picks.len() == b / 2, format!("batch {b}: {} replayed", picks.len()))?;
            check(batch.data().iter().filter(|&&v| v < 0.0).count() == b - b / 2, format!("batch {b}: fresh count"))?;
        }
    }
    let (scar, free) = desk_corpus(24, 8);
    let masks = |v: &[ScanSlice]| v.iter().map(|s| s.mask.clone()).collect::<Vec<SegMask>>();
    let mrun = train_maskgan(&masks(&free), &masks(&scar), &MaskGanConfig { steps: 7, snapshot_every: 7, batch_size: 4, log_every: 1, net: tiny_net(DESK), ..Default::default() })
        .map_err(|e| e.to_string())?;
    check(mrun.log.iter().all(|r| r.disc_updates == 2 * r.step), "mask schedule is not 2:1")?;
    let heur = heuristic_inputs(&free, &partial_mask_snapshot(9, 1), &HeuristicParams::default(), 0).map_err(|e| e.to_string())?;
    let reals: Vec<Vec<f32>> = scar.iter().map(|s| normalize(&s.image).0).collect();
    let rrun = train_refinegan(&heur, &reals, &RefineGanConfig { steps: 7, snapshot_every: 7, batch_size: 4, log_every: 1, net: tiny_net(DESK), ..Default::default() })
        .map_err(|e| e.to_string())?;
    check(rrun.log.iter().all(|r| r.disc_updates == 3 * r.step), "refiner schedule is not 3:1")?;
    check(mrun.disc_updates == 14 && rrun.disc_updates == 21, "final counters")?;
    Ok("half-replay exact for batches 2..16; 2:1 and 3:1 over every prefix".into())
}

fn metric_oracles() -> Outcome {
    let mut r = common::rng(103);
    let n = 600;
    let mask = |r: &mut ChaCha8Rng, p: f64| (0..256).map(|_| r.gen_bool(p)).collect::<Vec<bool>>();
    for _ in 0..n {
        let image: Vec<u16> = (0..256).map(|_| r.gen_range(0..4096)).collect();
        let myo = mask(&mut r, 0.5);
        let roi: Vec<bool> = mask(&mut r, 0.2).iter().zip(&myo).map(|(&a, &b)| a && b).collect();
        check(fwhm_scar_mask(&image, &myo, &roi).map_err(|e| e.to_string())? == fwhm_oracle(&image, &myo, &roi), "fwhm")?;
        let (a, b) = (mask(&mut r, 0.3), mask(&mut r, 0.3));
        check(dice(&a, &b) == dice_oracle(&a, &b), "dice")?;
        let (gt, endo, m) = (mask(&mut r, 0.3), mask(&mut r, 0.3), mask(&mut r, 0.3));
        if gt.contains(&true) {
            let inc = scar_inclusion(&gt, &endo, &m).map_err(|e| e.to_string())?;
            let (pm, pe) = inclusion_oracle(&gt, &endo, &m);
            check(inc.pct_scar_in_myo == pm && inc.pct_scar_in_endo == pe, "scar inclusion")?;
        }
        let nn = r.gen_range(0..=100u64);
        let k = r.gen_range(0..=nn);
        check((binomial_p(k, nn) - binomial_oracle(k, nn)).abs() < 1e-9, format!("binomial_p({k}, {nn})"))?;
    }
    Ok(format!("{n} random 16x16 instances per metric"))
}

fn reader_statistics() -> Outcome {
    let truths: Vec<(String, Truth)> = (0..30).map(|i| (format!("s-i{i:02}"), if i < 15 { Truth::Real } else { Truth::Simulated })).collect();
    let mut responses = Vec::new();
    for (rater, correct) in [("a", 18), ("b", 14), ("c", 15)] {
        for (i, (id, t)) in truths.iter().enumerate() {
            let choice = match (i < correct, t) {
                (true, t) => *t,
                (false, Truth::Real) => Truth::Simulated,
                (false, Truth::Simulated) => Truth::Real,
            };
            responses.push(Response { rater_id: rater.into(), item_id: id.clone(), choice, timestamp: 0 });
        }
    }
    let stats = compute_stats(&truths, &responses, false).map_err(|e| e.to_string())?;
    let mut line = Vec::new();
    for (s, k) in stats.raters.iter().zip([18u64, 14, 15]) {
        check(s.correct as u64 == k && (s.accuracy * 100.0).round() == (k as f64 * 100.0 / 30.0).round(), "accuracy")?;
        check((s.p_value - binomial_oracle(k, 30)).abs() < 1e-9, "p-value")?;
        line.push(format!("{:.0}% (p={:.3})", s.accuracy * 100.0, s.p_value));
    }
    let pct: Vec<f64> = stats.raters.iter().map(|s| (s.accuracy * 100.0).round()).collect();
    check(pct == [60.0, 47.0, 50.0], format!("{pct:?}"))?;
    Ok(line.join(", "))
}

fn metrics_key(m: &[FoldMetrics]) -> String {
    format!("{m:?}")
}

fn reproducibility() -> Outcome {
    let cc = CorpusConfig { n_slices: 32, params: desk_params(), seed: 9, ..Default::default() };
    let corpus = generate_corpus(&cc).map_err(|e| e.to_string())?;
    check(corpus == generate_corpus(&cc).map_err(|e| e.to_string())?, "corpus")?;
    let (scar, free): (Vec<ScanSlice>, Vec<ScanSlice>) = corpus.iter().cloned().partition(|s| s.has_scar);
    let masks = |v: &[ScanSlice]| v.iter().map(|s| s.mask.clone()).collect::<Vec<SegMask>>();
    let mc = MaskGanConfig { steps: 4, snapshot_every: 2, batch_size: 4, net: tiny_net(DESK), ..Default::default() };
    let m1 = train_maskgan(&masks(&free), &masks(&scar), &mc).map_err(|e| e.to_string())?;
    let m2 = train_maskgan(&masks(&free), &masks(&scar), &mc).map_err(|e| e.to_string())?;
    check(m1.snapshots == m2.snapshots && m1.log == m2.log, "mask GAN")?;
    let heur = heuristic_inputs(&free, &partial_mask_snapshot(9, 1), &HeuristicParams::default(), 0).map_err(|e| e.to_string())?;
    let reals: Vec<Vec<f32>> = scar.iter().map(|s| normalize(&s.image).0).collect();
    let rc = RefineGanConfig { steps: 4, snapshot_every: 4, batch_size: 4, net: tiny_net(DESK), ..Default::default() };
    let r1 = train_refinegan(&heur, &reals, &rc).map_err(|e| e.to_string())?;
    let r2 = train_refinegan(&heur, &reals, &rc).map_err(|e| e.to_string())?;
    check(r1.snapshots == r2.snapshots, "refiner")?;
    let plan = AugmentPlan {
        regime: Regime::X1,
        mask_snapshots: vec![partial_mask_snapshot(9, 1)],
        refiner: Some(r1.snapshots[0].clone()),
        params: SimulationParams::default(),
    };
    let s1 = build_training_set(&scar, &free, &plan).map_err(|e| e.to_string())?;
    let s2 = build_training_set(&scar, &free, &plan).map_err(|e| e.to_string())?;
    check(s1.entries == s2.entries && s1.slices == s2.slices, "training set")?;
    let tiny = SegTrainConfig { steps: 3, batch_size: 2, net: SegNetConfig { initial_filters: 4, depth: 2, input_size: DESK }, ..Default::default() };
    let pre = pretrain(&free, &tiny).map_err(|e| e.to_string())?.snapshot;
    let cv = CvConfig { fold_count: 2, fold_seed: 0, threads: 1 };
    let c1 = cross_validate(&corpus, &plan, &pre, &tiny, &cv).map_err(|e| e.to_string())?;
    let c2 = cross_validate(&corpus, &plan, &pre, &tiny, &CvConfig { threads: 2, ..cv }).map_err(|e| e.to_string())?;
    check(metrics_key(&c1.metrics) == metrics_key(&c2.metrics), "cross-validation metrics")?;
    Ok("corpus, GAN snapshots, manifests and fold metrics bit-identical".into())
}

// ---------------------------------------------------------------- desk-scale end-to-end

const GAN_STEPS: u64 = 5000;
const FINETUNE_STEPS: u64 = 300;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Desk {
    corpus: Vec<ScanSlice>,
    free: Vec<ScanSlice>,
    one_x: TrainingSet,
    shape_change: (f64, f64),
    pct_scar_in_myo: HashMap<Regime, Vec<f64>>,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[s.len() / 2]
}

fn run_desk() -> Result<Desk, String> {
    let t = Instant::now();
    let e = |e: scargan::Error| e.to_string();
    let corpus = generate_corpus(&CorpusConfig { params: desk_params(), seed: 1, ..Default::default() }).map_err(e)?;
    let (real, free): (Vec<ScanSlice>, Vec<ScanSlice>) = corpus.iter().cloned().partition(|s| s.has_scar);
    let net = GanNetConfig { initial_filters: 8, depth: 3, disc_filters: 8, input_size: DESK };
    let masks = |v: &[ScanSlice]| v.iter().map(|s| s.mask.clone()).collect::<Vec<SegMask>>();
    let mrun = train_maskgan(&masks(&free), &masks(&real), &MaskGanConfig { steps: GAN_STEPS, snapshot_every: 500, net, ..Default::default() })
        .map_err(e)?;
    let probes: Vec<SegMask> = free.iter().take(8).map(|s| s.mask.clone()).collect();
    let shape = select_snapshots(&mrun.snapshots, 1, &probes).map_err(e)?.chosen.remove(0);
    eprintln!("  mask GAN done ({:.0?}), using {}", t.elapsed(), shape.id());

    let heur = heuristic_inputs(&free, &shape, &HeuristicParams::default(), 0).map_err(e)?;
    let reals: Vec<Vec<f32>> = real.iter().map(|s| normalize(&s.image).0).collect();
    let rrun = train_refinegan(&heur, &reals, &RefineGanConfig { steps: GAN_STEPS, snapshot_every: GAN_STEPS, net, ..Default::default() }).map_err(e)?;
    let refiner = rrun.snapshots.last().expect("final snapshot").clone();
    eprintln!("  refiner done ({:.0?})", t.elapsed());

    let mut rf = Refiner::new(&refiner).map_err(e)?;
    let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0usize, 0.0, 0usize);
    for (s, x) in free.iter().zip(&heur) {
        let m = simulate_shape(&shape, &s.mask, false, 0).map_err(e)?;
        let y = rf.refine(x).map_err(e)?;
        for (i, l) in m.labels().iter().enumerate() {
            let d = (y[i] - x[i]).abs() as f64;
            match l {
                Class::Scar => (inside, n_in) = (inside + d, n_in + 1),
                Class::LvMyo => {}
                _ => (outside, n_out) = (outside + d, n_out + 1),
            }
        }
    }
    let shape_change = (inside / n_in.max(1) as f64, outside / n_out.max(1) as f64);

    let plan = |regime: Regime| AugmentPlan {
        regime,
        mask_snapshots: if regime == Regime::X1 { vec![shape.clone()] } else { vec![] },
        refiner: Some(refiner.clone()),
        params: SimulationParams::default(),
    };
    let one_x = build_training_set(&real, &free, &plan(Regime::X1)).map_err(e)?;

    let ssfp = PhantomParams { scar_contrast: false, ..desk_params() };
    let pre_corpus = generate_corpus(&CorpusConfig { n_slices: 200, params: ssfp, seed: 99, ..Default::default() }).map_err(e)?;
    let seg = SegTrainConfig { net: SegNetConfig { initial_filters: 8, depth: 3, input_size: DESK }, ..Default::default() };
    let pre = pretrain(&pre_corpus, &seg).map_err(e)?.snapshot;
    eprintln!("  pretraining done ({:.0?})", t.elapsed());

    let mut pct_scar_in_myo: HashMap<Regime, Vec<f64>> = HashMap::new();
    for seed in SEEDS {
        for regime in [Regime::X0, Regime::X0Plus, Regime::X1] {
            let cfg = SegTrainConfig { steps: FINETUNE_STEPS, seed, ..seg.clone() };
            let cv = cross_validate(&corpus, &plan(regime), &pre, &cfg, &CvConfig { fold_count: 4, fold_seed: seed, threads: 1 }).map_err(e)?;
            let folds: Vec<f64> = cv.metrics.iter().map(|m| m.pct_scar_in_myo).collect();
            let mean = folds.iter().sum::<f64>() / folds.len() as f64;
            eprintln!("  seed {seed} {regime}: folds {folds:.1?} mean {mean:.2} ({:.0?})", t.elapsed());
            pct_scar_in_myo.entry(regime).or_default().push(mean);
        }
    }
    Ok(Desk { corpus, free, one_x, shape_change, pct_scar_in_myo })
}

fn desk_shapes(d: &Desk) -> Outcome {
    let sources: HashMap<&str, &ScanSlice> = d.free.iter().map(|s| (s.slice_id.as_str(), s)).collect();
    let simulated: Vec<(usize, &ScanSlice)> =
        d.one_x.entries.iter().enumerate().filter(|(_, e)| e.provenance == Some(Provenance::Simulated)).map(|(i, _)| (i, &d.one_x.slices[i])).collect();
    let good = simulated
        .iter()
        .filter(|(i, s)| {
            let src = sources[d.one_x.entries[*i].source_slice_id.as_deref().expect("simulated entries name a source")];
            let scar = s.mask.indicator(Class::Scar);
            let myo = src.mask.indicator(Class::LvMyo);
            scar.contains(&true) && scar.iter().zip(&myo).all(|(&a, &m)| !a || m)
        })
        .count();
    let frac = good as f64 / simulated.len().max(1) as f64;
    let msg = format!("{good}/{} simulated slices have a nonempty scar inside LV myo ({:.1}%)", simulated.len(), 100.0 * frac);
    check(!simulated.is_empty() && frac >= 0.95, msg.clone())?;
    Ok(msg)
}

fn desk_refiner(d: &Desk) -> Outcome {
    let (inside, outside) = d.shape_change;
    let msg = format!("mean |change| inside scar {inside:.4}, outside myo {outside:.4}");
    check(inside > outside, msg.clone())?;
    Ok(msg)
}

fn desk_segmentation(d: &Desk) -> Outcome {
    let med = |r: Regime| median(&d.pct_scar_in_myo[&r]);
    let (x0, x0p, x1) = (med(Regime::X0), med(Regime::X0Plus), med(Regime::X1));
    let msg = format!("median pct_scar_in_myo over {} seeds ({} slices): 0x {x0:.2}, 0x+ {x0p:.2}, 1x {x1:.2}", SEEDS.len(), d.corpus.len());
    check(x1 >= x0 && x0p <= x1, msg.clone())?;
    Ok(msg)
}

fn report(name: &str, outcome: Outcome, failures: &mut usize) {
    match outcome {
        Ok(detail) => println!("PASS  {name}: {detail}"),
        Err(detail) => {
            *failures += 1;
            println!("FAIL  {name}: {detail}");
        }
    }
}

fn main() {
    let mut failures = 0;
    report("loss formulas", loss_suite(), &mut failures);
    report("gradient checks", gradient_checks(), &mut failures);
    report("heuristic exactness", heuristic_exactness(), &mut failures);
    report("blending exactness", blending_exactness(), &mut failures);
    report("replay and schedule", replay_and_schedule(), &mut failures);
    report("metric oracles", metric_oracles(), &mut failures);
    report("reader-study statistics", reader_statistics(), &mut failures);
    report("reproducibility", reproducibility(), &mut failures);
    match run_desk() {
        Ok(d) => {
            report("desk end-to-end (a) simulated shapes", desk_shapes(&d), &mut failures);
            report("desk end-to-end (b) refiner locality", desk_refiner(&d), &mut failures);
            report("desk end-to-end (c) segmentation regimes", desk_segmentation(&d), &mut failures);
        }
        Err(e) => {
            for c in ["(a) simulated shapes", "(b) refiner locality", "(c) segmentation regimes"] {
                report(&format!("desk end-to-end {c}"), Err(e.clone()), &mut failures);
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
