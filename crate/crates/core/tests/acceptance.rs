//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Set `DST_COCO_ANNOTATIONS` to a COCO 2017 train annotation file to run the
//! statistics check on real data; without it the hand-counted fixtures run.

use std::collections::HashMap;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use dynscale::{
    canvas_for, compose_collage, dataset_scale_stats, filter_tiny, load_annotations,
    parse_annotations, plan_collage, run_simulation, AnnotationId, BoundingBox, CategoryId,
    CollageK, Controller, ControllerConfig, Dataset, Hello, ImageId, ImageRecord,
    InstanceAnnotation, LossReport, LossReportMsg, Mode, PerScale, PixelBuffer, Service,
    ServiceOptions, SimConfig, SimPolicy, SimReport, Strategy as Rule, SyntheticSpec, WireMessage,
    TINY_BOX_AREA,
};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

mod common;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

// ---------------------------------------------------------------- COCO stats

fn coco_stats() -> Outcome {
    match std::env::var_os("DST_COCO_ANNOTATIONS") {
        Some(path) => coco_stats_real(path.as_ref()),
        None => coco_stats_fixtures(),
    }
}

fn coco_stats_real(path: &std::path::Path) -> Outcome {
    let start = Instant::now();
    let stats = match load_annotations(path).and_then(|ds| dataset_scale_stats(&ds)) {
        Ok(s) => s,
        Err(e) => return Outcome::new(false, format!("{}: {e}", path.display())),
    };
    let elapsed = start.elapsed();
    let cov = stats.image_coverage;
    let within = |got: f64, want: f64| (got - want).abs() <= 0.02;
    let pass = stats.instance_share.s > 0.41
        && within(cov.s, 0.52)
        && within(cov.m, 0.71)
        && within(cov.l, 0.83)
        && elapsed < Duration::from_secs(120);
    Outcome::new(
        pass,
        format!(
            "small share {:.2}% (> 41%), coverage {:.2}/{:.2}/{:.2}% (52/71/83 +-2pp), {:.1}s (< 120s)",
            100.0 * stats.instance_share.s,
            100.0 * cov.s,
            100.0 * cov.m,
            100.0 * cov.l,
            elapsed.as_secs_f64()
        ),
    )
}

fn coco_stats_fixtures() -> Outcome {
    // Hand count for the boundary fixture:
    //   image 1: 10x10 (S), 32x32 = 1024 (M), 31.5x32 = 1008 (S), crowd 50x50 (M)
    //   image 2: 96x96 = 9216 (L), 95x97 = 9215 (M)
    //   image 3: nothing
    //   image 4: 0x10 (dropped), 20x20 at x=630 clipped to 10x20 = 200 (S)
    //   counts S/M/L = 3/3/1; coverage S/M/L = 2/4, 2/4, 1/4.
    let boundary = r#"{
      "images": [
        {"id": 1, "width": 640, "height": 480, "file_name": "1.jpg"},
        {"id": 2, "width": 640, "height": 480, "file_name": "2.jpg"},
        {"id": 3, "width": 640, "height": 480, "file_name": "3.jpg"},
        {"id": 4, "width": 640, "height": 480, "file_name": "4.jpg"}
      ],
      "annotations": [
        {"id": 1, "image_id": 1, "bbox": [0, 0, 10, 10], "category_id": 1, "iscrowd": 0},
        {"id": 2, "image_id": 1, "bbox": [0, 0, 32, 32], "category_id": 1, "iscrowd": 0},
        {"id": 3, "image_id": 1, "bbox": [0, 0, 31.5, 32], "category_id": 1, "iscrowd": 0},
        {"id": 4, "image_id": 1, "bbox": [0, 0, 50, 50], "category_id": 1, "iscrowd": 1},
        {"id": 5, "image_id": 2, "bbox": [0, 0, 96, 96], "category_id": 1, "iscrowd": 0},
        {"id": 6, "image_id": 2, "bbox": [0, 0, 95, 97], "category_id": 1, "iscrowd": 0},
        {"id": 7, "image_id": 4, "bbox": [5, 5, 0, 10], "category_id": 1, "iscrowd": 0},
        {"id": 8, "image_id": 4, "bbox": [630, 0, 20, 20], "category_id": 1, "iscrowd": 0}
      ],
      "categories": [{"id": 1, "name": "thing"}]
    }"#;
    let ds = parse_annotations(boundary).expect("fixture parses");
    let stats = dataset_scale_stats(&ds).expect("fixture has instances");
    let boundary_ok = stats.counts == PerScale::new(3, 3, 1)
        && stats.instance_share == PerScale::new(3.0 / 7.0, 3.0 / 7.0, 1.0 / 7.0)
        && stats.image_coverage == PerScale::new(0.5, 0.5, 0.25)
        && ds.dropped_degenerate() == 1;

    // COCO-shaped fixture of 100 images: small objects in images 0..52,
    // medium in 0..71, large in 0..83, with two small boxes per small image:
    // 104 small, 71 medium, 83 large instances, 104/258 = 40.3% small;
    // image 0 gets four more small boxes: 108/262 = 41.2% small.
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut next = 1;
    let mut push = |image: u32, side: f64, annotations: &mut Vec<String>| {
        annotations.push(format!(
            r#"{{"id": {next}, "image_id": {image}, "bbox": [1, 1, {side}, {side}], "category_id": 1}}"#
        ));
        next += 1;
    };
    for i in 0..100u32 {
        images.push(format!(
            r#"{{"id": {i}, "width": 640, "height": 480, "file_name": "{i}.jpg"}}"#
        ));
        let smalls = match i {
            0 => 6,
            1..=51 => 2,
            _ => 0,
        };
        for _ in 0..smalls {
            push(i, 16.0, &mut annotations);
        }
        if i < 71 {
            push(i, 64.0, &mut annotations);
        }
        if i < 83 {
            push(i, 200.0, &mut annotations);
        }
    }
    let doc = format!(
        r#"{{"images": [{}], "annotations": [{}], "categories": [{{"id": 1, "name": "thing"}}]}}"#,
        images.join(","),
        annotations.join(",")
    );
    let stats =
        dataset_scale_stats(&parse_annotations(&doc).expect("fixture parses")).expect("instances");
    let shaped_ok = stats.counts == PerScale::new(108, 71, 83)
        && stats.instance_share.s == 108.0 / 262.0
        && stats.instance_share.s > 0.41
        && stats.image_coverage == PerScale::new(0.52, 0.71, 0.83);

    Outcome::new(
        boundary_ok && shaped_ok,
        format!(
            "DST_COCO_ANNOTATIONS unset, hand-counted fixtures: boundary {}, COCO-shaped {} (small share {:.2}%)",
            if boundary_ok { "exact" } else { "MISMATCH" },
            if shaped_ok { "exact" } else { "MISMATCH" },
            100.0 * stats.instance_share.s
        ),
    )
}

// ---------------------------------------------------------------- collage invariants

fn run_invariant<S: proptest::strategy::Strategy>(
    strategy: S,
    check: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Outcome {
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    match runner.run(&strategy, check) {
        Ok(()) => Outcome::new(true, "1000 cases"),
        Err(e) => Outcome::new(false, e.to_string()),
    }
}

// ---------------------------------------------------------------- goldens

fn threshold_goldens() -> Outcome {
    let eps = 1e-9;
    let cases = [
        (0.0, Mode::Collage),
        (0.05, Mode::Collage),
        (0.1, Mode::Collage),
        (0.1 + eps, Mode::Regular),
        (0.25, Mode::Regular),
        (1.0, Mode::Regular),
    ];
    let mut got = Vec::new();
    for (r, _) in cases {
        let mut c = Controller::new(ControllerConfig {
            tau: 0.1,
            strategy: Rule::RegLoss,
            k: CollageK::FOUR,
            seed: 0,
        })
        .unwrap();
        let report = LossReport {
            iter: 0,
            cls: PerScale::default(),
            reg: PerScale::new(r, 1.0 - r, 0.0),
        };
        let comp = dynscale::BatchComposition {
            iter: 0,
            counts: PerScale::new(1, 1, 0),
        };
        got.push(c.observe(&report, &comp).unwrap().mode);
    }
    let want: Vec<Mode> = cases.iter().map(|c| c.1).collect();
    let letters: String = got
        .iter()
        .map(|m| if *m == Mode::Collage { 'C' } else { 'R' })
        .collect();
    Outcome::new(
        got == want,
        format!("r_s 0, .05, .1, .1+1e-9, .25, 1 -> {letters}"),
    )
}

fn tiny_filter() -> Outcome {
    let ann = |id: u64, w: f64, h: f64| InstanceAnnotation {
        id: AnnotationId(id),
        image_id: ImageId(1),
        bbox: BoundingBox::new(0.0, 0.0, w, h).unwrap(),
        category_id: CategoryId(1),
        iscrowd: false,
    };
    let (kept, dropped) = filter_tiny(vec![ann(1, 8.0, 10.0), ann(2, 10.0, 10.0)], TINY_BOX_AREA);
    let direct_ok = dropped == 1 && kept.len() == 1 && kept[0].id == AnnotationId(2);

    // Same boundary through composition: 16x20 and 20x20 boxes shrink to 80 and 100 at k=4.
    let record = ImageRecord {
        id: ImageId(1),
        width: 40,
        height: 40,
        file_name: String::new(),
        annotations: vec![ann(1, 16.0, 20.0), ann(2, 20.0, 20.0)],
    };
    let others: Vec<ImageRecord> = (2..=4)
        .map(|i| ImageRecord {
            id: ImageId(i),
            annotations: vec![],
            ..record.clone()
        })
        .collect();
    let refs: Vec<&ImageRecord> = std::iter::once(&record).chain(others.iter()).collect();
    let plan = plan_collage(&refs, CollageK::FOUR, canvas_for(&refs, CollageK::FOUR)).unwrap();
    let pixels: HashMap<ImageId, PixelBuffer> = refs
        .iter()
        .map(|r| (r.id, PixelBuffer::zeros(r.width, r.height, 3)))
        .collect();
    let annos = HashMap::from([(ImageId(1), record.annotations.clone())]);
    let result = compose_collage(&plan, &pixels, &annos, true).unwrap();
    let composed_ok = result.dropped_tiny == 1
        && result.annotations.len() == 1
        && result.annotations[0].id == AnnotationId(2)
        && result.annotations[0].bbox.area() == 100.0;

    Outcome::new(
        direct_ok && composed_ok,
        format!(
            "area 80 dropped, area 100 kept (direct {}, via k=4 collage {})",
            if direct_ok { "ok" } else { "WRONG" },
            if composed_ok { "ok" } else { "WRONG" }
        ),
    )
}

// ---------------------------------------------------------------- performance

fn performance() -> Outcome {
    let (w, h) = (800u32, 1333u32);
    let records: Vec<ImageRecord> = (1..=4)
        .map(|i| ImageRecord {
            id: ImageId(i),
            width: w,
            height: h,
            file_name: String::new(),
            annotations: vec![],
        })
        .collect();
    let pixels: HashMap<ImageId, PixelBuffer> = records
        .iter()
        .map(|r| {
            let data = (0..w as usize * h as usize * 3)
                .map(|i| ((i as u64 * 2654435761) >> 13) as u8 ^ r.id.0 as u8)
                .collect();
            (r.id, PixelBuffer::from_raw(w, h, 3, data).unwrap())
        })
        .collect();
    let refs: Vec<&ImageRecord> = records.iter().collect();
    let annos = HashMap::new();
    let mut times = Vec::new();
    for round in 0..21 {
        let start = Instant::now();
        let plan = plan_collage(&refs, CollageK::FOUR, canvas_for(&refs, CollageK::FOUR)).unwrap();
        let result = compose_collage(&plan, &pixels, &annos, false).unwrap();
        let elapsed = start.elapsed();
        std::hint::black_box(&result);
        if round > 0 {
            times.push(elapsed.as_secs_f64() * 1e3);
        }
    }
    let med = median(times.clone());
    let best = times.iter().copied().fold(f64::INFINITY, f64::min);
    Outcome::new(
        med <= 40.0,
        format!(
            "k=4 from 4x 800x1333x3: median {med:.2} ms, best {best:.2} ms over 20 runs (target <= 20 ms, {}; fails above 40 ms)",
            if med <= 20.0 { "met" } else { "missed" }
        ),
    )
}

// ---------------------------------------------------------------- simulator

fn policy_medians(make: impl Fn(u64) -> Dataset, policy: SimPolicy) -> (f64, f64, f64) {
    let reports: Vec<SimReport> = SEEDS
        .iter()
        .map(|&seed| {
            let cfg = SimConfig {
                policy,
                seed,
                ..SimConfig::default()
            };
            run_simulation(&make(seed), &cfg).unwrap()
        })
        .collect();
    (
        median(reports.iter().map(SimReport::balance).collect()),
        median(reports.iter().map(SimReport::mean_r_s).collect()),
        median(reports.iter().map(SimReport::low_ratio_fraction).collect()),
    )
}

fn simulator_ordering() -> Outcome {
    let start = Instant::now();
    let make = |seed| SyntheticSpec::small_clustered().with_seed(seed).generate();
    let all_regular = policy_medians(make, SimPolicy::Strategy(Rule::AllRegular));
    let random = policy_medians(make, SimPolicy::Strategy(Rule::Random(0.5)));
    let feedback: Vec<(&str, (f64, f64, f64))> = [
        ("cls-loss", Rule::ClsLoss),
        ("reg-loss", Rule::RegLoss),
        ("joint-loss", Rule::JointLoss),
    ]
    .into_iter()
    .map(|(n, s)| (n, policy_medians(make, SimPolicy::Strategy(s))))
    .collect();
    let elapsed = start.elapsed();
    let balance_ok = feedback.iter().all(|(_, f)| f.0 >= random.0) && random.0 >= all_regular.0;
    let ratio_ok = feedback.iter().all(|(_, f)| f.1 > all_regular.1);
    let time_ok = elapsed < Duration::from_secs(60);
    let fb: Vec<String> = feedback
        .iter()
        .map(|(n, f)| format!("{n} {:.4}/{:.4}", f.0, f.1))
        .collect();
    Outcome::new(
        balance_ok && ratio_ok && time_ok,
        format!(
            "small-clustered, 5 seeds x 10k iters, balance/mean r_s: {}; random {:.4}/{:.4}; all-regular {:.4}/{:.4}; {:.1}s",
            fb.join(", "),
            random.0,
            random.1,
            all_regular.0,
            all_regular.1,
            elapsed.as_secs_f64()
        ),
    )
}

fn low_ratio_analogue() -> Outcome {
    let make = |seed| SyntheticSpec::small_starved().with_seed(seed).generate();
    let all_regular = policy_medians(make, SimPolicy::Strategy(Rule::AllRegular));
    let reg_loss = policy_medians(make, SimPolicy::Strategy(Rule::RegLoss));
    Outcome::new(
        all_regular.2 > 0.5 && reg_loss.2 < 0.5,
        format!(
            "small-starved, share of iterations with r_s <= 0.1: all-regular {:.3} (> 0.5), reg-loss {:.3} (< 0.5)",
            all_regular.2, reg_loss.2
        ),
    )
}

// ---------------------------------------------------------------- service

/// Drives a live session with a stub trainer whose losses depend on the
/// plans it receives. Returns the NDJSON input and output streams.
fn record_session(
    service: &Service,
    strategy: &str,
    seed: u64,
    messages: usize,
) -> (String, String) {
    let ds = service_dataset();
    let mut input = String::new();
    let mut output = String::new();
    let mut session = None;
    let mut send = |msg: WireMessage, session: &mut Option<_>| -> WireMessage {
        let line = msg.to_line();
        input.push_str(&line);
        input.push('\n');
        let (reply, _) = service.dispatch(session, WireMessage::from_line(&line).unwrap());
        output.push_str(&reply.to_line());
        output.push('\n');
        reply
    };
    let hello = WireMessage::Hello(Hello {
        dataset: "synthetic".into(),
        batch_size: 2,
        k: 4,
        tau: 0.1,
        strategy: strategy.into(),
        seed,
        tiny_filter: false,
    });
    let mut reply = send(hello, &mut session);
    for _ in 0..messages - 2 {
        let WireMessage::Plan(plan) = reply else {
            panic!("expected a plan, got {reply:?}");
        };
        let side = if plan.mode == Mode::Collage { 2 } else { 1 };
        let mut counts = PerScale::<u64>::default();
        for id in plan.groups.iter().flatten() {
            for a in &ds.image(*id).unwrap().annotations {
                let scaled = a.bbox.downscale_translate(side, 0, 0);
                counts[dynscale::classify_scale(&scaled)] += 1;
            }
        }
        let jitter = (plan.iter % 7) as f64 * 0.01;
        let reg = counts.map(|n| n as f64 * (0.5 + jitter));
        let cls = PerScale::new(reg.s * 1.5, reg.m, reg.l * 0.5);
        reply = send(
            WireMessage::LossReport(LossReportMsg {
                iter: plan.iter,
                cls,
                reg,
                counts,
            }),
            &mut session,
        );
    }
    send(WireMessage::Bye {}, &mut session);
    (input, output)
}

fn service_dataset() -> Dataset {
    SyntheticSpec {
        images: 300,
        ..SyntheticSpec::small_starved()
    }
    .generate()
}

fn new_service() -> Service {
    Service::new(ServiceOptions::default()).with_dataset("synthetic", Arc::new(service_dataset()))
}

fn service_determinism() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for (strategy, seed) in [("reg-loss", 11), ("random", 12)] {
        let (input, recorded) = record_session(&new_service(), strategy, seed, 500);
        let restarted = new_service();
        let mut replayed = Vec::new();
        restarted
            .serve_connection(input.as_bytes(), &mut replayed)
            .unwrap();
        let lines = input.lines().count();
        let plans = recorded
            .lines()
            .filter(|l| l.starts_with(r#"{"type":"plan""#))
            .count();
        let collages = recorded.matches(r#""mode":"collage""#).count();
        let same = replayed == recorded.as_bytes();
        pass &= same && lines == 500 && plans == 499;
        details.push(format!(
            "{strategy}: {lines} messages, {plans} plans ({collages} collage), replay {}",
            if same { "identical" } else { "DIFFERS" }
        ));
    }
    Outcome::new(pass, details.join("; "))
}

// ---------------------------------------------------------------- main

type Criterion = (&'static str, Box<dyn Fn() -> Outcome>);

fn main() -> ExitCode {
    use common::*;

    let criteria: Vec<Criterion> = vec![
        ("coco-stats", Box::new(coco_stats)),
        (
            "collage-area",
            Box::new(|| run_invariant(arb_case(), |c| check_area(&c))),
        ),
        (
            "collage-aspect",
            Box::new(|| run_invariant(arb_case(), |c| check_aspect(&c))),
        ),
        (
            "collage-containment",
            Box::new(|| run_invariant(arb_case(), |c| check_containment(&c))),
        ),
        (
            "collage-count-conservation",
            Box::new(|| {
                run_invariant((arb_case(), any::<bool>()), |(c, t)| {
                    check_count_conservation(&c, t)
                })
            }),
        ),
        (
            "collage-k1-identity",
            Box::new(|| {
                run_invariant(arb_case_with(Just(CollageK::ONE), 64), |c| {
                    check_k1_identity(&c)
                })
            }),
        ),
        (
            "collage-deterministic-pixels",
            Box::new(|| run_invariant(arb_case(), |c| check_pixels(&c))),
        ),
        ("threshold-goldens", Box::new(threshold_goldens)),
        ("tiny-filter-boundary", Box::new(tiny_filter)),
        ("collage-performance", Box::new(performance)),
        ("simulator-ordering", Box::new(simulator_ordering)),
        ("service-determinism", Box::new(service_determinism)),
        ("low-ratio-analogue", Box::new(low_ratio_analogue)),
    ];

    let mut failed = 0;
    for (name, run) in &criteria {
        let outcome = run();
        if !outcome.pass {
            failed += 1;
        }
        println!(
            "{} {name}: {}",
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.detail
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
