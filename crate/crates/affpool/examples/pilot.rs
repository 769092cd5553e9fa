//! Calibration driver for the end-to-end experiment: generates the demo
//! pool, trains full/top-2/remainder detectors, and prints the metrics the
//! acceptance thresholds are based on.
//!
//! Usage: pilot [per_source] [eval] [holdout] [epochs] [lr] [batch] [input] [retrain(0|1)]

use std::collections::BTreeSet;
use std::time::Instant;

use affpool::corpus::AnnotatedImage;
use affpool::evaluator::{affinity_distribution, map_range, match_detections};
use affpool::model::{Detection, DetectorConfig};
use affpool::synth::{demo_styles, generate_source, synthetic_taxonomy};
use affpool::trainer::{detect_record, make_subpool, train, RunConfig};
use affpool::Scalar;

fn detect_all<S: Scalar>(
    detector: &affpool::model::Detector<S>,
    records: &[AnnotatedImage],
) -> Vec<Vec<Detection>> {
    records
        .iter()
        .map(|r| detect_record(detector, r, 0.25, 0.45).unwrap())
        .collect()
}

fn main() {
    let args: Vec<f64> = std::env::args()
        .skip(1)
        .map(|a| a.parse::<f64>().expect("numeric args"))
        .collect();
    let get = |i: usize, default: f64| args.get(i).copied().unwrap_or(default);
    let per_source = get(0, 120.0) as usize;
    let eval_size = get(1, 40.0) as usize;
    let holdout_size = get(2, 20.0) as usize;
    let epochs = get(3, 6.0) as usize;
    let lr = get(4, 0.001);
    let batch = get(5, 8.0) as usize;
    let input = get(6, 320.0) as u32;
    let retrain = get(7, 0.0) as usize;

    let dir = tempfile::TempDir::new().unwrap();
    let (sources, target) = demo_styles();

    let t0 = Instant::now();
    let pool = affpool::synth::generate_pool(
        &sources, &target, per_source, eval_size, input, 42, dir.path(),
    )
    .unwrap();
    // Held-out per-source eval (true source known).
    let mut holdout: Vec<AnnotatedImage> = Vec::new();
    for (i, (id, style)) in sources.iter().enumerate() {
        let d = generate_source(
            style,
            holdout_size,
            input,
            9_000 + i as u64,
            &format!("{id}_holdout"),
            i,
            dir.path(),
        )
        .unwrap();
        let tax = synthetic_taxonomy(&[&format!("{id}_holdout")]).unwrap();
        holdout.extend(affpool::corpus::ingest_dataset(&d, &tax).unwrap());
    }
    println!("generation: {:.1}s", t0.elapsed().as_secs_f64());

    let cfg = DetectorConfig {
        input_size: input,
        grid_stride: 16,
        num_classes: 1,
        num_datasets: pool.manifest.num_datasets(),
        channel_widths: vec![8, 16, 16, 32],
        ..DetectorConfig::default()
    };
    let run = RunConfig {
        epochs,
        batch_size: batch,
        learning_rate: lr,
        seed: 42,
        ..RunConfig::default()
    };

    let t1 = Instant::now();
    let outcome = train::<f32>(&pool.manifest, &cfg, &run).unwrap();
    let train_time = t1.elapsed().as_secs_f64();
    let first = &outcome.log[0];
    let last = outcome.log.last().unwrap();
    println!(
        "train full: {:.1}s ({} steps), loss {:.4} -> {:.4} (obj {:.4} cls {:.4} loc {:.4} aff {:.4})",
        train_time, outcome.meta.steps, first.total, last.total, last.obj, last.cls, last.loc, last.aff
    );

    // Criterion-3 style check: affinity recovery on held-out source images.
    let t2 = Instant::now();
    let dets = detect_all(&outcome.detector, &holdout);
    let mut tp = 0usize;
    let mut correct = 0usize;
    for (d, g) in dets.iter().zip(&holdout) {
        for m in match_detections(d, g, 0.5).detections {
            if m.is_tp {
                tp += 1;
                if m.assigned_dataset == g.source_dataset {
                    correct += 1;
                }
            }
        }
    }
    println!(
        "holdout: {} images, {} TPs, affinity recovery {:.1}% ({:.1}s)",
        holdout.len(),
        tp,
        100.0 * correct as f64 / tp.max(1) as f64,
        t2.elapsed().as_secs_f64()
    );

    // Target eval: mAP + affinity histogram.
    let eval_dets = detect_all(&outcome.detector, &pool.eval);
    let scores = map_range(&eval_dets, &pool.eval);
    let report = affinity_distribution(&eval_dets, &pool.eval, cfg.num_datasets, 0.5, 2);
    println!(
        "target eval: mAP@.5 {:?} mAP@.5:.95 {:?}, tp {}, hist {:?}, top2 {:?}",
        scores.map50, scores.map50_95, report.tp_count, report.histogram, report.top_k
    );

    if retrain == 0 {
        return;
    }

    let full_map = scores.map50.unwrap_or(0.0);
    for (label, keep) in [
        ("top2", report.top_k.iter().copied().collect::<BTreeSet<_>>()),
        ("remainder", report.remainder.iter().copied().collect::<BTreeSet<_>>()),
    ] {
        let sub = make_subpool(&pool.manifest, &keep).unwrap();
        let sub_cfg = DetectorConfig { num_datasets: sub.num_datasets(), ..cfg.clone() };
        let t = Instant::now();
        let sub_outcome = train::<f32>(&sub, &sub_cfg, &run).unwrap();
        let sub_dets = detect_all(&sub_outcome.detector, &pool.eval);
        let sub_scores = map_range(&sub_dets, &pool.eval);
        let sub_map = sub_scores.map50.unwrap_or(0.0);
        println!(
            "{label}: keep {keep:?}, {:.1}s, mAP@.5 {:.3} ratio {:.3}",
            t.elapsed().as_secs_f64(),
            sub_map,
            sub_map / full_map.max(1e-9)
        );
    }
}
