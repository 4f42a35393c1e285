//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.
//! The expensive part (trained scenario runs for the directional criteria) is
//! computed once and shared across tests.

use std::sync::OnceLock;
use std::time::Instant;

use rayon::prelude::*;

use ciss_lab::config::{AblationFlags, LabConfig};
use ciss_lab::gradcheck;
use ciss_lab::label::{LabelMap, IGNORE_LABEL};
use ciss_lab::labeling::object_identifier;
use ciss_lab::losses::refine_teacher;
use ciss_lab::metrics::{miou, predict_labels, token_similarity, ClassGroups, GroupConvention};
use ciss_lab::numerics::Tensor;
use ciss_lab::runner::{
    run_scenario, train_base_step, write_record_csv, RunRecord, EVAL_SCENE_COUNT,
};
use ciss_lab::scenes::{
    derive_seed, generate_eval_scene, scene_rng, streams, ClassSpan, Setting,
};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn report(name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {name}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {name} failed: {detail}");
}

struct Fixture {
    /// All components off, overlapped.
    baseline: Vec<RunRecord>,
    /// All components on, overlapped.
    full: Vec<RunRecord>,
    /// SPL + AFD without the separation objective.
    no_sep: Vec<RunRecord>,
    /// Full method under the disjoint protocol, one seed.
    disjoint: RunRecord,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

fn overlapped_config(flags: AblationFlags, seed: u64) -> LabConfig {
    let mut cfg = LabConfig::default();
    cfg.scenario.setting = Setting::Overlapped;
    cfg.scenario.seed = seed;
    cfg.train.seed = seed;
    cfg.train.ablation = flags;
    cfg
}

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let off = AblationFlags {
            spl: false,
            afd: false,
            sep: false,
        };
        let no_sep = AblationFlags {
            spl: true,
            afd: true,
            sep: false,
        };
        let on = AblationFlags::default();
        let mut jobs: Vec<LabConfig> = Vec::new();
        for &seed in &SEEDS {
            jobs.push(overlapped_config(off, seed));
        }
        for &seed in &SEEDS {
            jobs.push(overlapped_config(on, seed));
        }
        for &seed in &SEEDS {
            jobs.push(overlapped_config(no_sep, seed));
        }
        let mut disjoint_cfg = overlapped_config(on, SEEDS[0]);
        disjoint_cfg.scenario.setting = Setting::Disjoint;
        jobs.push(disjoint_cfg);

        let mut records: Vec<RunRecord> = jobs
            .par_iter()
            .map(|cfg| run_scenario(cfg, None).expect("fixture run failed"))
            .collect();
        let disjoint = records.pop().unwrap();
        let no_sep = records.split_off(10);
        let full = records.split_off(5);
        Fixture {
            baseline: records,
            full,
            no_sep,
            disjoint,
        }
    })
}

// --- criterion 1: gradient correctness ------------------------------------------

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let check = gradcheck::run(100, 20240); // 100 random configurations per loss
    let elapsed = start.elapsed().as_secs_f64();
    let check = check.expect("gradient check errored");
    let mut detail = String::new();
    for (name, err) in check.rows() {
        detail.push_str(&format!("{name} {err:.2e}; "));
    }
    detail.push_str(&format!("runtime {elapsed:.1}s"));
    let pass = check.max_error() < 1e-4 && elapsed < 60.0;
    report("1 gradient-correctness", pass, &detail);
}

// --- criterion 2: equation-level suites -------------------------------------------

#[test]
fn criterion_2_equation_suites() {
    // The per-example assertions live in the module unit tests; here the two
    // bulk property checks run at full scale.
    let mut rng_state = 0x243F6A8885A308D3u64;
    let mut next = move || {
        // splitmix64 stream, self-contained
        rng_state = rng_state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = rng_state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64
    };

    // object identifier matches the half-mass rule over 10^4 random distributions
    let mut equivalence_ok = true;
    for trial in 0..10_000 {
        let c = 2 + trial % 5;
        let raw: Vec<f64> = (0..c).map(|_| 1e-9 + next()).collect();
        let sum: f64 = raw.iter().sum();
        let dist: Vec<f64> = raw.iter().map(|v| v / sum).collect();
        let bg = dist[0];
        let s = Tensor::new(vec![1, 1, c], dist).unwrap();
        let o = object_identifier(&s).unwrap();
        if o.get(0, 0) != (bg < 0.5) {
            equivalence_ok = false;
            break;
        }
    }

    // teacher refinement conserves probability mass over 10^4 random pixels
    let mut mass_ok = true;
    let mut worst = 0.0f64;
    for trial in 0..10_000 {
        let c_old = 2 + trial % 4;
        let n_new = 1 + trial % 3;
        let raw: Vec<f64> = (0..c_old).map(|_| 1e-9 + next()).collect();
        let sum: f64 = raw.iter().sum();
        let dist: Vec<f64> = raw.iter().map(|v| v / sum).collect();
        let s_old = Tensor::new(vec![1, 1, c_old], dist).unwrap();
        let label_pick = trial % (c_old + n_new + 1);
        let label = if label_pick == c_old + n_new {
            IGNORE_LABEL
        } else {
            label_pick as u8
        };
        let y = LabelMap::filled(1, 1, label);
        let span = ClassSpan::new(c_old as u8, (c_old + n_new - 1) as u8);
        let refined = refine_teacher(&s_old, &y, &span).unwrap();
        let total: f64 = refined.data().iter().sum();
        worst = worst.max((total - 1.0).abs());
        if (total - 1.0).abs() > 1e-12 {
            mass_ok = false;
            break;
        }
    }

    let pass = equivalence_ok && mass_ok;
    report(
        "2 equation-suites",
        pass,
        &format!("object-identifier equivalence over 1e4 dists: {equivalence_ok}; teacher mass drift {worst:.1e}"),
    );
}

// --- criterion 3: ablation direction ------------------------------------------------

fn final_groups(r: &RunRecord) -> (f64, f64, f64) {
    let s = r.final_step();
    (
        s.iou.miou_initial.expect("initial group defined"),
        s.iou.miou_incremented.expect("incremented group defined"),
        s.iou.miou_all.expect("all group defined"),
    )
}

#[test]
fn criterion_3_ablation_direction() {
    let fx = fixture();
    let runtime: f64 = fx
        .baseline
        .iter()
        .chain(fx.full.iter())
        .map(|r| r.wall_clock_secs)
        .sum();
    let mut wins_old = 0;
    let mut wins_new = 0;
    let mut wins_all = 0;
    for (b, f) in fx.baseline.iter().zip(fx.full.iter()) {
        let (b_old, b_new, b_all) = final_groups(b);
        let (f_old, f_new, f_all) = final_groups(f);
        if f_old > b_old {
            wins_old += 1;
        }
        if f_new > b_new {
            wins_new += 1;
        }
        if f_all > b_all {
            wins_all += 1;
        }
    }
    let pass = wins_old >= 4 && wins_new >= 4 && wins_all >= 4 && runtime < 600.0;
    report(
        "3 ablation-direction",
        pass,
        &format!(
            "full beats baseline old {wins_old}/5, new {wins_new}/5, all {wins_all}/5; sequential runtime {runtime:.0}s"
        ),
    );
}

// --- criterion 4: token-similarity direction ----------------------------------------

#[test]
fn criterion_4_token_similarity_direction() {
    let fx = fixture();
    let mean_sim = |runs: &[RunRecord]| -> f64 {
        runs.iter()
            .map(|r| {
                r.final_step()
                    .similarity
                    .as_ref()
                    .expect("incremental steps record similarity")
                    .new_background
            })
            .sum::<f64>()
            / runs.len() as f64
    };
    let with_sep = mean_sim(&fx.full);
    let without_sep = mean_sim(&fx.no_sep);
    let gap = without_sep - with_sep;
    let pass = gap >= 10.0;
    report(
        "4 token-similarity-direction",
        pass,
        &format!("(new, background) cosine x100: with sep {with_sep:.2}, without {without_sep:.2}, gap {gap:.2}"),
    );
}

// --- criterion 5: ignored-label ratio -------------------------------------------------

#[test]
fn criterion_5_ignored_label_ratio() {
    let fx = fixture();
    let mut pass = true;
    let mut detail = String::new();
    for (i, run) in fx.full.iter().enumerate() {
        for step in &run.record_incremental_steps() {
            let stats = step.ignored.as_ref().expect("incremental step records stats");
            match stats.ratio() {
                Some(r) if r > 0.0 => {}
                other => {
                    pass = false;
                    detail.push_str(&format!(
                        "seed {} step {} ratio {:?}; ",
                        SEEDS[i], step.step, other
                    ));
                }
            }
        }
    }
    // the reporting pipeline emits the per-step rows
    let mut csv = Vec::new();
    write_record_csv(&mut csv, &fx.full[0]).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let rows = text
        .lines()
        .filter(|l| l.contains(",ignored_label_ratio,"))
        .count();
    let expected_rows = fx.full[0].steps.len() - 1;
    if rows != expected_rows {
        pass = false;
        detail.push_str(&format!("csv has {rows} ratio rows, expected {expected_rows}; "));
    }
    if detail.is_empty() {
        detail = format!(
            "ratio defined and positive at every incremental step of {} runs; {} csv rows",
            fx.full.len(),
            rows
        );
    }
    report("5 ignored-label-ratio", pass, &detail);
}

trait IncrementalSteps {
    fn record_incremental_steps(&self) -> Vec<&ciss_lab::runner::StepRecord>;
}

impl IncrementalSteps for RunRecord {
    fn record_incremental_steps(&self) -> Vec<&ciss_lab::runner::StepRecord> {
        self.steps.iter().filter(|s| s.step >= 2).collect()
    }
}

// --- criterion 6: background-shift mechanics ------------------------------------------

#[test]
fn criterion_6_background_shift_mechanics() {
    let cfg = overlapped_config(AblationFlags::default(), SEEDS[0]);
    let base = train_base_step(&cfg).expect("base training");
    let expanded = base.expand_for_new_classes(1).expect("expansion");

    // new token equals the background token bit-exactly
    let d = expanded.tokens().shape()[1];
    let rows = expanded.tokens().shape()[0];
    let bg = &expanded.tokens().data()[0..d];
    let new = &expanded.tokens().data()[(rows - 1) * d..rows * d];
    let tokens_equal = bg == new;

    // (C^t, c_0) cosine x100 is exactly 100
    let sim = token_similarity(expanded.tokens(), 1).expect("similarity");
    let sim_exact = sim.new_background == 100.0;

    // new-class IoU is 0 under the tie-break rule
    let spec = &cfg.scenario;
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for i in 0..EVAL_SCENE_COUNT {
        let seed = derive_seed(spec.seed, streams::EVAL_SCENES, i as u64);
        let scene = generate_eval_scene(spec, &mut scene_rng(seed)).unwrap();
        let (_, probs) = expanded.forward(&scene.image).unwrap();
        preds.push(predict_labels(&probs).unwrap());
        gts.push(scene.full_labels.clone());
    }
    let groups = ClassGroups::new(spec.num_classes, spec.schedule[0], GroupConvention::default());
    let iou = miou(&preds, &gts, spec.num_classes, &groups).unwrap();
    let new_class = (spec.schedule[0] + 1) as u8;
    let new_iou_zero = iou.per_class_iou.get(&new_class) == Some(&0.0);

    // after full incremental training the new classes are actually learned
    let fx = fixture();
    let trained_new: f64 = fx
        .full
        .iter()
        .map(|r| r.final_step().iou.miou_incremented.unwrap())
        .sum::<f64>()
        / fx.full.len() as f64;
    let learned = trained_new > 0.5;

    let pass = tokens_equal && sim_exact && new_iou_zero && learned;
    report(
        "6 background-shift-mechanics",
        pass,
        &format!(
            "token copy exact: {tokens_equal}; cosine {} (exact 100: {sim_exact}); fresh new-class IoU zero: {new_iou_zero}; trained new-group mIoU {trained_new:.3}",
            sim.new_background
        ),
    );
}

// --- criterion 7: determinism ----------------------------------------------------------

#[test]
fn criterion_7_determinism() {
    // via the run API with persistence, byte-compared record.csv
    let mut cfg = overlapped_config(AblationFlags::default(), 9);
    cfg.scenario.scenes_per_step = 20;
    cfg.train.epochs_base = 6;
    cfg.train.epochs_incremental = 6;
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    run_scenario(&cfg, Some(&out_a)).unwrap();
    run_scenario(&cfg, Some(&out_b)).unwrap();
    let a = std::fs::read(out_a.join("record.csv")).unwrap();
    let b = std::fs::read(out_b.join("record.csv")).unwrap();
    let pass = a == b && !a.is_empty();
    report(
        "7 determinism",
        pass,
        &format!("record.csv {} bytes, byte-identical: {}", a.len(), a == b),
    );
}

// --- criterion 8: protocol fidelity ------------------------------------------------------

#[test]
fn criterion_8_protocol_fidelity() {
    let fx = fixture();
    let disjoint_exposures: u64 = fx
        .disjoint
        .steps
        .iter()
        .map(|s| s.future_class_pixels)
        .sum();
    let overlapped_exposures: u64 = fx.full[0]
        .steps
        .iter()
        .map(|s| s.future_class_pixels)
        .sum();
    let pass = disjoint_exposures == 0 && overlapped_exposures >= 1;
    report(
        "8 protocol-fidelity",
        pass,
        &format!(
            "future-class pixels: disjoint {disjoint_exposures}, overlapped {overlapped_exposures}"
        ),
    );
}
