//! Acceptance suite: one PASS/FAIL line per criterion, details indented
//! underneath. Criteria 5 to 7 train the full desk configuration several
//! times and take tens of minutes on one core.
//!
//! The exit status covers the exact criteria (1 to 4, 8, 9). The training
//! criteria are empirical outcomes of fixed-seed runs and are reported
//! without gating.

use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use insloc::boxes::{augment_bbox, augment_candidates, clipped_anchors, iou, AnchorConfig, BBox};
use insloc::composition::{compose, CompositionParams};
use insloc::contrastive::{insloc_step_loss, momentum_update, BoxAugmentation, EncoderPair, MemoryQueue, PairBatch};
use insloc::imaging::generate_gallery;
use insloc::nn::{Backbone, Module, Variant, FPN_LEVELS};
use insloc::oracle::iou_by_intervals;
use insloc::probes::{evaluate_encoder, patch_grid, ProbeConfig, ProbeReport};
use insloc::selfcheck::{run_selfcheck, tiny_backbone_config, tiny_batch, Check, SelfcheckOptions};
use insloc::trainer::{StepRecord, TrainConfig, TrainMode, Trainer};
use insloc::Tensor;

const TRIALS: usize = 10_000;
const WINDOW: usize = 100;
const TRAIN_BUDGET_SECS: f64 = 15.0 * 60.0;

struct Outcome {
    passed: bool,
    details: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Outcome {
            passed: true,
            details: Vec::new(),
        }
    }

    fn require(&mut self, ok: bool, detail: impl Into<String>) {
        self.passed &= ok;
        let mark = if ok { "ok  " } else { "BAD " };
        self.details.push(format!("{mark}{}", detail.into()));
    }
}

fn report(id: usize, title: &str, gated: bool, o: &Outcome) -> bool {
    let tag = if o.passed { "PASS" } else { "FAIL" };
    let note = if gated { "" } else { " (reported)" };
    println!("{tag} criterion {id}: {title}{note}");
    for d in &o.details {
        println!("       {d}");
    }
    o.passed || !gated
}

fn checks_named<'a>(checks: &'a [Check], names: &[&str]) -> Vec<&'a Check> {
    checks.iter().filter(|c| names.contains(&c.name)).collect()
}

fn kernel_oracles(checks: &[Check]) -> Outcome {
    let mut o = Outcome::new();
    let picked = checks_named(checks, &["roialign-dense-oracle", "roialign-adjointness"]);
    let secs: f64 = picked.iter().map(|c| c.seconds).sum();
    for c in &picked {
        o.require(
            c.passed(),
            format!(
                "{} max error {:.3e} < {:.0e} over 100 triples",
                c.name, c.error, c.tolerance
            ),
        );
    }
    o.require(picked.len() == 2, "both RoIAlign oracles ran");
    o.require(secs < 10.0, format!("runtime {secs:.2}s < 10s"));
    o
}

fn gradient_suite(checks: &[Check]) -> Outcome {
    let mut o = Outcome::new();
    let names = [
        "conv-gradient",
        "linear-gradient",
        "relu-gradient",
        "l2-normalize-gradient",
        "mlp-head-gradient",
        "info-nce-gradient",
        "probe-loss-gradient",
        "end-to-end-c4-f64",
        "end-to-end-fpn-f64",
        "end-to-end-c4-f32",
    ];
    let picked = checks_named(checks, &names);
    o.require(
        picked.len() == names.len(),
        format!("{} of {} gradient checks ran", picked.len(), names.len()),
    );
    for c in &picked {
        o.require(
            c.passed(),
            format!("{} relative error {:.3e} < {:.0e}", c.name, c.error, c.tolerance),
        );
    }
    let secs: f64 = picked.iter().map(|c| c.seconds).sum();
    o.require(secs < 60.0, format!("runtime {secs:.2}s < 60s"));
    o
}

fn closed_form(checks: &[Check]) -> Outcome {
    let mut o = Outcome::new();
    let picked = checks_named(checks, &["info-nce-closed-form"]);
    o.require(picked.len() == 1, "closed-form check ran");
    for c in picked {
        o.require(
            c.passed(),
            format!("|loss - (-ln(e^5/(e^5+8)))| = {:.3e} < 1e-5", c.error),
        );
    }
    o
}

fn random_box(rng: &mut ChaCha8Rng, extent: f64) -> BBox {
    let x1 = rng.gen_range(-0.25 * extent..extent);
    let y1 = rng.gen_range(-0.25 * extent..extent);
    BBox::new(x1, y1, x1 + rng.gen_range(0.5..extent), y1 + rng.gen_range(0.5..extent)).unwrap()
}

fn geometry() -> Outcome {
    let mut o = Outcome::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);

    let mut worst_sym: f64 = 0.0;
    let mut worst_oracle: f64 = 0.0;
    let mut bounds = true;
    let mut identity: f64 = 0.0;
    for _ in 0..TRIALS {
        let (a, b) = (random_box(&mut rng, 64.0), random_box(&mut rng, 64.0));
        let ab = iou(&a, &b);
        worst_sym = worst_sym.max((ab - iou(&b, &a)).abs());
        worst_oracle = worst_oracle.max((ab - iou_by_intervals(&a, &b)).abs());
        bounds &= (0.0..=1.0).contains(&ab);
        identity = identity.max((iou(&a, &a) - 1.0).abs());
    }
    o.require(worst_sym == 0.0, format!("IoU symmetry, max gap {worst_sym:.1e}"));
    o.require(bounds, "IoU within [0, 1]");
    o.require(identity < 1e-12, format!("IoU(a, a) = 1, max gap {identity:.1e}"));
    o.require(
        worst_oracle < 1e-12,
        format!("IoU matches interval oracle, max gap {worst_oracle:.1e}"),
    );

    let anchors = clipped_anchors(&AnchorConfig::default(), 64, 64);
    let mut bad = 0;
    for _ in 0..TRIALS {
        let w = rng.gen_range(4.0..60.0);
        let h = rng.gen_range(4.0..60.0);
        let x = rng.gen_range(0.0..64.0 - w);
        let y = rng.gen_range(0.0..64.0 - h);
        let gt = BBox::new(x, y, x + w, y + h).unwrap();
        let b = augment_bbox(&gt, &anchors, 0.5, &mut rng);
        if !(b == gt || iou(&b, &gt) > 0.5) {
            bad += 1;
        }
    }
    o.require(
        bad == 0,
        format!(
            "augmented boxes with IoU > 0.5 or equal to gt: {} of {TRIALS}",
            TRIALS - bad
        ),
    );

    let gt = BBox::new(10.0, 14.0, 42.0, 38.0).unwrap();
    let candidates = augment_candidates(&gt, &anchors, 0.5);
    let mut counts = vec![0usize; candidates.len()];
    for _ in 0..TRIALS {
        let b = augment_bbox(&gt, &anchors, 0.5, &mut rng);
        counts[candidates.iter().position(|c| *c == b).expect("drawn from candidates")] += 1;
    }
    let expected = TRIALS as f64 / candidates.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((candidates.len() - 1) as f64).unwrap().cdf(stat);
    o.require(
        p > 0.01,
        format!(
            "candidate uniformity over {} anchors: chi2 {stat:.2}, p {p:.3} > 0.01",
            candidates.len()
        ),
    );

    let gallery = generate_gallery(16, 64, 4).unwrap();
    let params = CompositionParams::for_variant(Variant::C4);
    let mut leaked = 0;
    for t in 0..TRIALS {
        let fg = &gallery.images[t % 16];
        let bg = &gallery.images[(t + 1 + t / 16) % 16];
        let c = compose(fg, bg, &params, &mut rng).unwrap();
        let b = c.bbox;
        for y in 0..64 {
            for x in 0..64 {
                let (xf, yf) = (x as f64, y as f64);
                let inside = xf >= b.x1 && xf < b.x2 && yf >= b.y1 && yf < b.y2;
                if !inside && c.image.get(y, x) != bg.get(y, x) {
                    leaked += 1;
                }
            }
        }
    }
    o.require(
        leaked == 0,
        format!("composite pixels outside the box equal the background, {leaked} differ"),
    );

    let mut tiling_errors = 0;
    for _ in 0..TRIALS {
        let (h, w) = (rng.gen_range(3..97), rng.gen_range(3..97));
        let m = [1usize, 4, 9, 16][rng.gen_range(0..4)];
        let grid = patch_grid(h, w, m).unwrap();
        let area: f64 = grid.iter().map(BBox::area).sum();
        let overlap: f64 = (0..m)
            .flat_map(|i| (0..i).map(move |j| (i, j)))
            .map(|(i, j)| grid[i].intersection_area(&grid[j]))
            .sum();
        let covered = (0..h).all(|y| {
            (0..w).all(|x| {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                grid.iter()
                    .filter(|b| px >= b.x1 && px < b.x2 && py >= b.y1 && py < b.y2)
                    .count()
                    == 1
            })
        });
        if grid.len() != m || (area - (h * w) as f64).abs() > 1e-9 || overlap != 0.0 || !covered {
            tiling_errors += 1;
        }
    }
    o.require(
        tiling_errors == 0,
        format!("patch grids tile exactly, {tiling_errors} of {TRIALS} do not"),
    );
    o
}

struct Run {
    records: Vec<StepRecord>,
    seconds: f64,
    probes: ProbeReport,
}

fn train_and_probe(mode: TrainMode, seed: u64) -> Run {
    let config = TrainConfig {
        mode,
        seed,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let mut trainer = Trainer::new(config.clone()).unwrap();
    let records = trainer.run().unwrap();
    let seconds = start.elapsed().as_secs_f64();
    let probe = ProbeConfig {
        seed,
        ..ProbeConfig::default()
    };
    let probes = evaluate_encoder(&trainer.pair.query, &config, &probe).unwrap();
    eprintln!(
        "  trained {mode} seed {seed} in {seconds:.0}s: loc {:.3} cls {:.3}",
        probes.localization.eval_accuracy, probes.classification.eval_accuracy
    );
    Run {
        records,
        seconds,
        probes,
    }
}

fn window_mean(records: &[StepRecord], f: impl Fn(&StepRecord) -> f64) -> (f64, f64) {
    let n = records.len();
    let mean = |s: &[StepRecord]| s.iter().map(&f).sum::<f64>() / s.len() as f64;
    (mean(&records[..WINDOW]), mean(&records[n - WINDOW..]))
}

fn training_progress(runs: &[(TrainMode, &Run)]) -> Outcome {
    let mut o = Outcome::new();
    for (mode, run) in runs {
        let (l0, l1) = window_mean(&run.records, |r| r.loss);
        let (s0, s1) = window_mean(&run.records, |r| r.positive_similarity);
        o.require(
            l1 < l0,
            format!("{mode}: mean loss first 100 {l0:.4} -> last 100 {l1:.4}"),
        );
        o.require(
            s1 > s0,
            format!("{mode}: positive similarity first 100 {s0:.4} -> last 100 {s1:.4}"),
        );
        o.require(
            run.seconds < TRAIN_BUDGET_SECS,
            format!("{mode}: {} steps in {:.0}s", run.records.len(), run.seconds),
        );
    }
    o
}

fn localization_beats_chance(run: &Run) -> Outcome {
    let mut o = Outcome::new();
    let r = &run.probes.localization;
    o.require(
        r.eval_accuracy > 0.5,
        format!(
            "insloc-c4 9-way localization {:.3} > 0.5 (chance {:.3}, {} held-out patches)",
            r.eval_accuracy, r.chance, r.eval_samples
        ),
    );
    // Reference only: an untrained encoder of the same shape.
    let config = TrainConfig::default();
    let untrained = Trainer::new(config.clone()).unwrap();
    let r0 = evaluate_encoder(&untrained.pair.query, &config, &ProbeConfig::default()).unwrap();
    o.details.push(format!(
        "untrained encoder for reference: localization {:.3}",
        r0.localization.eval_accuracy
    ));
    o
}

fn direction(pairs: &[(u64, &Run, &Run)]) -> Outcome {
    let mut o = Outcome::new();
    let mut loc_wins = 0;
    let mut cls_baseline = 0;
    for (seed, ins, base) in pairs {
        let (il, bl) = (
            ins.probes.localization.eval_accuracy,
            base.probes.localization.eval_accuracy,
        );
        let (ic, bc) = (
            ins.probes.classification.eval_accuracy,
            base.probes.classification.eval_accuracy,
        );
        loc_wins += usize::from(il > bl);
        cls_baseline += usize::from(bc >= ic);
        o.details.push(format!(
            "seed {seed}: loc insloc-c4 {il:.3} vs baseline {bl:.3}; cls insloc-c4 {ic:.3} vs baseline {bc:.3}"
        ));
    }
    o.require(
        loc_wins >= 2,
        format!("insloc-c4 localization higher in {loc_wins} of {} seeds", pairs.len()),
    );
    o.details.push(format!(
        "classification baseline >= insloc-c4 in {cls_baseline} of {} seeds (not gated)",
        pairs.len()
    ));
    o
}

fn mechanisms() -> Outcome {
    let mut o = Outcome::new();

    // Capacity 4, two rows per push: [a b] [c d] [e f] leaves e f c d.
    let d = 6;
    let unit = |i: usize| (0..d).map(|j| f64::from(u8::from(i == j))).collect::<Vec<_>>();
    let pair = |i: usize, j: usize| Tensor::from_vec(&[2, d], [unit(i), unit(j)].concat()).unwrap();
    let mut q = MemoryQueue::<f64>::empty(4, d).unwrap();
    let mut script = Vec::new();
    for (i, j) in [(0, 1), (2, 3), (4, 5)] {
        q.enqueue(&pair(i, j)).unwrap();
        script.push((q.cursor(), q.filled()));
    }
    let held: Vec<usize> = (0..4)
        .map(|r| q.row(r).iter().position(|&v| v == 1.0).unwrap())
        .collect();
    o.require(
        held == [4, 5, 2, 3] && script == [(2, 2), (0, 4), (2, 4)],
        format!("FIFO eviction: rows {held:?}, (cursor, filled) trace {script:?}"),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let query = Backbone::<f32>::new(tiny_backbone_config(Variant::C4), &mut rng).unwrap();
    let mut key = Backbone::<f32>::new(tiny_backbone_config(Variant::C4), &mut rng).unwrap();
    let before = key.clone();
    let m = 0.999;
    let (mt, one_minus) = (m as f32, (1.0 - m) as f32);
    momentum_update(&mut key, &query, m).unwrap();
    let bitwise = key
        .params()
        .iter()
        .zip(before.params())
        .zip(query.params())
        .all(|(((_, k), (_, k0)), (_, qp))| {
            k.value
                .data()
                .iter()
                .zip(k0.value.data())
                .zip(qp.value.data())
                .all(|((&k, &k0), &qv)| {
                    let want = mt * k0 + one_minus * qv;
                    k.to_bits() == want.to_bits()
                })
        });
    o.require(bitwise, "momentum update equals m*key + (1-m)*query bitwise");

    let mut pair_fpn = EncoderPair::new(
        Backbone::<f64>::new(tiny_backbone_config(Variant::Fpn), &mut rng).unwrap(),
        0.99,
    );
    let batch: PairBatch<f64> = tiny_batch(&mut rng, 2, 64);
    let dim = pair_fpn.query.config.embed_dim;
    let mut queues: Vec<_> = (0..FPN_LEVELS).map(|_| MemoryQueue::empty(8, dim).unwrap()).collect();
    for (level, q) in queues.iter_mut().enumerate() {
        let tag: Vec<f64> = (0..dim).map(|j| f64::from(u8::from(j == level))).collect();
        q.enqueue(&Tensor::from_vec(&[1, dim], tag).unwrap()).unwrap();
    }
    let out = insloc_step_loss(
        &mut pair_fpn,
        &batch,
        &mut queues,
        0.2,
        &BoxAugmentation::disabled(),
        &mut rng,
    )
    .unwrap();
    let isolated = queues.iter().enumerate().all(|(level, q)| {
        q.filled() == 3 && q.row(0)[level] == 1.0 && q.storage()[dim..3 * dim] == *out.keys[level].data()
    });
    o.require(
        isolated,
        format!("each of the {FPN_LEVELS} FPN queues holds only its own level's keys"),
    );

    let small = TrainConfig {
        steps: 8,
        batch_size: 4,
        gallery_size: 16,
        queue_size: 16,
        backbone: tiny_backbone_config(Variant::C4),
        ..TrainConfig::default()
    };
    for mode in [TrainMode::InslocC4, TrainMode::InslocFpn, TrainMode::BaselineHolistic] {
        let mut config = small.clone();
        config.mode = mode;
        config.backbone = tiny_backbone_config(config.variant());
        let mut straight = Trainer::new(config.clone()).unwrap();
        straight.run().unwrap();
        let mut first = Trainer::new(config).unwrap();
        first.run_until(3, |_| {}).unwrap();
        let bytes = first.to_checkpoint().encode();
        let mut resumed = Trainer::from_checkpoint(&insloc::trainer::Checkpoint::decode(&bytes).unwrap()).unwrap();
        resumed.run().unwrap();
        o.require(
            resumed.to_checkpoint().encode() == straight.to_checkpoint().encode(),
            format!("{mode}: resume at step 3 reproduces step 8 bit-exactly"),
        );
    }
    o
}

fn selfcheck_binary() -> Outcome {
    let mut o = Outcome::new();
    let start = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_insloc"))
        .arg("selfcheck")
        .output()
        .expect("spawn insloc");
    let secs = start.elapsed().as_secs_f64();
    o.require(
        status.status.success(),
        format!("insloc selfcheck exit status {:?}", status.status.code()),
    );
    o.require(secs < 60.0, format!("runtime {secs:.1}s < 60s"));
    o
}

fn main() -> ExitCode {
    let mut ok = true;
    let checks = run_selfcheck(&SelfcheckOptions::default());
    ok &= report(1, "RoIAlign kernel oracles", true, &kernel_oracles(&checks));
    ok &= report(2, "gradient suite", true, &gradient_suite(&checks));
    ok &= report(3, "InfoNCE closed form", true, &closed_form(&checks));
    ok &= report(4, "geometry properties", true, &geometry());

    let c4 = train_and_probe(TrainMode::InslocC4, 0);
    let fpn = train_and_probe(TrainMode::InslocFpn, 0);
    report(
        5,
        "training progress",
        false,
        &training_progress(&[(TrainMode::InslocC4, &c4), (TrainMode::InslocFpn, &fpn)]),
    );
    drop(fpn);
    report(
        6,
        "localization probe beats chance",
        false,
        &localization_beats_chance(&c4),
    );

    let mut runs = vec![(0, c4, train_and_probe(TrainMode::BaselineHolistic, 0))];
    for seed in 1..3 {
        runs.push((
            seed,
            train_and_probe(TrainMode::InslocC4, seed),
            train_and_probe(TrainMode::BaselineHolistic, seed),
        ));
    }
    let pairs: Vec<_> = runs.iter().map(|(s, i, b)| (*s, i, b)).collect();
    report(
        7,
        "insloc-c4 localizes better than the holistic baseline",
        false,
        &direction(&pairs),
    );

    ok &= report(8, "mechanism invariants", true, &mechanisms());
    ok &= report(9, "selfcheck exits 0 within 60s", true, &selfcheck_binary());

    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
