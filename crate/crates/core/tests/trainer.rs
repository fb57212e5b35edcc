use std::path::Path;

use semhum_core::canonicalfield::{CanonicalFieldConfig, PositionalEncoding};
use semhum_core::losses::LossReport;
use semhum_core::model::{Model, ModelConfig};
use semhum_core::motionfield::{MotionConfig, NonRigidConfig};
use semhum_core::scenedata::{generate_dataset, labeled_subset, load_dataset, Dataset, SceneConfig, MANIFEST_FILE};
use semhum_core::trainer::{checkpoint_path, fit, initial_model, moving_average, sample_ray_batch, RaySampler, TrainConfig, LOG_FILE};

fn scene(dir: &Path, frames: usize, cameras: usize) -> Dataset {
    let mut cfg = SceneConfig::humanoid4();
    cfg.frames = frames;
    cfg.train_cameras = cameras;
    generate_dataset(&cfg, &labeled_subset(frames, frames), dir).unwrap();
    load_dataset(&dir.join(MANIFEST_FILE)).unwrap()
}

fn small_config(iterations: usize) -> TrainConfig {
    let pe = |f| PositionalEncoding {
        num_frequencies: f,
        include_input: true,
    };
    TrainConfig {
        iterations,
        rays_per_batch: 64,
        samples: 16,
        parsing_delay_iters: 0,
        nonrigid_enable_iter: 0,
        eval_every: 0,
        learning_rate: 1e-3,
        model: ModelConfig {
            canonical: CanonicalFieldConfig {
                encoding: pe(4),
                depth: 3,
                width: 32,
                skip_layer: Some(2),
                num_classes: 5,
            },
            motion: MotionConfig {
                grid_resolution: 16,
                nonrigid: NonRigidConfig {
                    encoding: pe(3),
                    depth: 1,
                    width: 16,
                },
            },
        },
        ..TrainConfig::default()
    }
}

fn quiet(_: &LossReport) {}

#[test]
fn zero_iterations_checkpoint_is_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let data = scene(&tmp.path().join("scene"), 2, 1);
    let cfg = small_config(0);
    let out = fit(&data, &cfg, &tmp.path().join("run"), &mut quiet).unwrap();
    let (model, iteration) = Model::load(&out.checkpoint).unwrap();
    assert_eq!(iteration, 0);
    assert_eq!(model, initial_model(&data, &cfg).unwrap());
    assert!(out.reports.is_empty());
}

#[test]
fn same_seed_runs_are_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = scene(&tmp.path().join("scene"), 3, 1);
    let mut cfg = small_config(12);
    cfg.eval_every = 5;
    let runs: Vec<_> = ["a", "b"].iter().map(|r| fit(&data, &cfg, &tmp.path().join(r), &mut quiet).unwrap()).collect();
    let bytes = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(bytes(&runs[0].checkpoint), bytes(&runs[1].checkpoint));
    assert_eq!(bytes(&runs[0].log), bytes(&runs[1].log));
    assert_eq!(runs[0].intermediate.len(), 2);
    assert_eq!(runs[0].intermediate[1], checkpoint_path(&tmp.path().join("a"), 10));

    cfg.seed = 1;
    let other = fit(&data, &cfg, &tmp.path().join("c"), &mut quiet).unwrap();
    assert_ne!(bytes(&runs[0].checkpoint), bytes(&other.checkpoint));
}

#[test]
fn logged_total_is_the_weighted_sum() {
    let tmp = tempfile::tempdir().unwrap();
    let data = scene(&tmp.path().join("scene"), 2, 1);
    let mut cfg = small_config(8);
    cfg.parsing_delay_iters = 4;
    let out = fit(&data, &cfg, &tmp.path().join("run"), &mut quiet).unwrap();
    let log = std::fs::read_to_string(tmp.path().join("run").join(LOG_FILE)).unwrap();
    let parsed: Vec<LossReport> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(parsed, out.reports);
    let w = cfg.weights;
    for r in &parsed {
        let lp = if r.iter < cfg.parsing_delay_iters { 0.0 } else { w.parsing };
        let expect = w.mse * r.mse + w.silhouette * r.silhouette + w.surface * r.surface + lp * r.parsing;
        assert!((r.total - expect).abs() <= 1e-12, "iter {}: {} vs {}", r.iter, r.total, expect);
        assert!(r.parsing > 0.0);
    }
}

/// Cyclic relabeling of the foreground classes of every noisy label map.
fn permute_labels(data: &Dataset) -> Dataset {
    let mut permuted = data.clone();
    let fg = (data.manifest.num_classes - 1) as u8;
    for r in &mut permuted.records {
        if let Some(l) = &mut r.labels {
            l.iter_mut().filter(|v| **v > 0).for_each(|v| *v = *v % fg + 1);
        }
    }
    permuted
}

#[test]
fn parsing_delay_hides_label_content_bit_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = scene(&tmp.path().join("scene"), 3, 1);
    let permuted = permute_labels(&data);
    assert_ne!(data.records, permuted.records);
    let mut cfg = small_config(7);
    cfg.parsing_delay_iters = 6;
    cfg.eval_every = 6;
    let a = fit(&data, &cfg, &tmp.path().join("a"), &mut quiet).unwrap();
    let b = fit(&permuted, &cfg, &tmp.path().join("b"), &mut quiet).unwrap();
    let bytes = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(bytes(&a.intermediate[0]), bytes(&b.intermediate[0]));
    for i in 0..6 {
        let (ra, rb) = (&a.reports[i], &b.reports[i]);
        assert_eq!(ra.total.to_bits(), rb.total.to_bits());
        assert_ne!(ra.parsing, rb.parsing);
    }
    // Once the term is live the label content matters.
    assert_ne!(bytes(&a.checkpoint), bytes(&b.checkpoint));
}

#[test]
fn loss_average_falls_on_five_frame_scene() {
    let tmp = tempfile::tempdir().unwrap();
    let data = scene(&tmp.path().join("scene"), 5, 3);
    let mut cfg = small_config(2001);
    cfg.nonrigid_enable_iter = 500;
    let out = fit(&data, &cfg, &tmp.path().join("run"), &mut quiet).unwrap();
    let totals: Vec<f64> = out.reports.iter().map(|r| r.total).collect();
    let early = moving_average(&totals, 200, 200);
    let late = moving_average(&totals, 2000, 200);
    assert!(late < early, "late {late} early {early}");
}

#[test]
fn single_frame_rays_stay_in_the_dilated_box() {
    let tmp = tempfile::tempdir().unwrap();
    let data = scene(&tmp.path().join("scene"), 1, 1);
    let sampler = RaySampler::new(&data, 16).unwrap();
    let b = sampler.boxes[0];
    for iter in 0..50 {
        let batch = sample_ray_batch(&sampler, 1, 3, iter).unwrap();
        let (u, v) = batch.pixels[0];
        assert!(b.contains(u, v));
        assert_eq!(batch.frames, vec![0]);
    }
    assert_eq!(sample_ray_batch(&sampler, 32, 3, 9).unwrap(), sample_ray_batch(&sampler, 32, 3, 9).unwrap());
}

#[test]
fn pixel_frequencies_are_uniform() {
    let tmp = tempfile::tempdir().unwrap();
    let data = scene(&tmp.path().join("scene"), 2, 2);
    let sampler = RaySampler::new(&data, 16).unwrap();
    let n_views = sampler.views.len();
    let pop = sampler.population();
    let mut counts = vec![0u64; pop];
    let mut per_view = vec![0u64; n_views];
    let draws = 100_000;
    let (per_iter, w) = (1000, data.manifest.width);
    let mut offsets = vec![0usize; n_views];
    for v in 1..n_views {
        offsets[v] = offsets[v - 1] + sampler.boxes[v - 1].area();
    }
    for iter in 0..draws / per_iter {
        let batch = sample_ray_batch(&sampler, per_iter, 11, iter).unwrap();
        for (&view, &(u, v)) in batch.views.iter().zip(&batch.pixels) {
            let b = sampler.boxes[view];
            let bw = b.u1 - b.u0 + 1;
            counts[offsets[view] + (v - b.v0) * bw + (u - b.u0)] += 1;
            per_view[view] += 1;
            assert!(u < w);
        }
    }
    // Each view's share is binomial in its box area.
    for (view, &c) in per_view.iter().enumerate() {
        let p = sampler.boxes[view].area() as f64 / pop as f64;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        assert!((c as f64 - mean).abs() <= 3.0 * sd, "view {view}: {c} vs {mean} ± {sd}");
    }
    // Pearson statistic over all pixels stays within 3 sd of its mean.
    let e = draws as f64 / pop as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    let df = (pop - 1) as f64;
    assert!((chi2 - df).abs() <= 3.0 * (2.0 * df).sqrt(), "chi2 {chi2} df {df}");
}
