//! Cost accounting, routing histograms and run reports.

use cigt::analysis::{compare, config_digest, ExperimentReport, RoutingHistogram};
use cigt::cost::{count_macs, count_params};
use cigt::presets::{mnist_cigt_124, mnist_lenet_trellis, mnist_slim, mnist_thick, mnist_training};
use proptest::prelude::*;

fn conv(k: u64, cin: u64, cout: u64) -> u64 {
    k * k * cin * cout + cout
}

fn dense(fin: u64, fout: u64) -> u64 {
    fin * fout + fout
}

#[test]
fn lenet_parameter_counts() {
    // Same-padded 5×5 convs, two 2×2 pools: 28 → 14 → 7.
    let thick = conv(5, 1, 20) + conv(5, 20, 50) + dense(7 * 7 * 50, 500) + dense(500, 10);
    let slim = conv(5, 1, 20) + conv(5, 20, 15) + dense(7 * 7 * 15, 25) + dense(25, 10);
    assert_eq!(thick, 1_256_080);
    assert_eq!(slim, 26_695);
    assert_eq!(count_params(&mnist_thick()).unwrap().total, thick);
    assert_eq!(count_params(&mnist_slim()).unwrap().total, slim);
}

#[test]
fn trellis_parameter_breakdown() {
    let r = count_params(&mnist_cigt_124()).unwrap();
    assert_eq!(r.per_unit, vec![conv(5, 1, 20), conv(5, 20, 15), dense(735, 25)]);
    assert_eq!(r.per_block, vec![520, 2 * 7_515, 4 * 18_400]);
    let router0 = dense(14 * 14 * 20, 16) + dense(16, 2);
    let router1 = dense(7 * 7 * 15, 16) + dense(16, 4);
    assert_eq!(r.routers, vec![router0, router1]);
    assert_eq!(r.head, dense(25, 10));
    assert_eq!(r.total, 520 + 15_030 + 73_600 + router0 + router1 + 260);
}

#[test]
fn trellis_macs_follow_one_path() {
    let m = count_macs(&mnist_cigt_124(), &[1, 28, 28]).unwrap();
    let blocks = vec![28 * 28 * 20 * 25, 14 * 14 * 15 * 25 * 20, 735 * 25];
    assert_eq!(m.per_block, blocks);
    assert_eq!(m.routers, vec![3_920 * 16 + 16 * 2, 735 * 16 + 16 * 4]);
    assert_eq!(m.head, 250);
    assert_eq!(m.per_sample, 1_955_201);
    // Slim LeNet by hand: conv1 28·28·20·25·1, conv2 14·14·15·25·20, dense 735·25, head 25·10.
    let slim_tally = 392_000 + 1_470_000 + 18_375 + 250;
    assert_eq!(slim_tally, 1_880_625);
    assert_eq!(count_macs(&mnist_slim(), &[1, 28, 28]).unwrap().per_sample, slim_tally);
    // The degenerate trellis costs the same per sample as the slim net plus its routers.
    let slim = count_macs(&mnist_slim(), &[1, 28, 28]).unwrap();
    let single = count_macs(&mnist_lenet_trellis([1, 1, 1]), &[1, 28, 28]).unwrap();
    let router_macs: u64 = single.routers.iter().sum();
    assert_eq!(single.per_sample, slim.per_sample + router_macs);
}

fn report(name: &str, dataset: &str, acc: f64) -> ExperimentReport {
    let mut h = RoutingHistogram::new(1, 3, 2);
    for (class, unit) in [(0, 0), (0, 0), (1, 1), (2, 1), (2, 0)] {
        h.record(class, unit);
    }
    let config = serde_json::json!({ "model": mnist_cigt_124(), "train": mnist_training(10, 1) });
    ExperimentReport {
        name: name.into(),
        dataset: dataset.into(),
        config_digest: config_digest(&config).unwrap(),
        config,
        seed: 1,
        epochs: 10,
        steps: 4_800,
        train_accuracy: Some(0.99),
        test_accuracy: acc,
        eval_routing: "argmax".into(),
        params: 164_024,
        macs_per_sample: 1_955_201.0,
        histograms: vec![h],
        wall_clock_secs: 12.5,
    }
}

#[test]
fn report_json_round_trip() {
    let r = report("a", "mnist", 0.987);
    let back = ExperimentReport::from_json(&r.to_json().unwrap()).unwrap();
    assert_eq!(back, r);
    let text = r.render();
    assert!(text.contains("test accuracy  0.9870"));
    assert!(text.contains(&r.config_digest));
}

#[test]
fn digest_tracks_config_changes() {
    let a = config_digest(&mnist_training(10, 1)).unwrap();
    assert_eq!(a.len(), 64);
    assert_eq!(a, config_digest(&mnist_training(10, 1)).unwrap());
    assert_ne!(a, config_digest(&mnist_training(10, 2)).unwrap());
}

#[test]
fn comparing_a_run_with_itself_gives_zero_deltas() {
    let r = report("a", "mnist", 0.98);
    for row in compare(&r, &r).unwrap() {
        assert_eq!(row.delta, 0.0, "{}", row.metric);
    }
    let better = report("b", "mnist", 0.99);
    let rows = compare(&r, &better).unwrap();
    assert!((rows[0].delta - 0.01).abs() < 1e-12);
}

#[test]
fn comparing_across_datasets_is_refused() {
    let a = report("a", "mnist", 0.98);
    let b = report("b", "fashion-mnist", 0.90);
    assert!(matches!(compare(&a, &b), Err(cigt::Error::Config(_))));
}

#[test]
fn histogram_csv_layout() {
    let r = report("a", "mnist", 0.98);
    let csv = r.histograms[0].to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines, vec!["class,unit_0,unit_1", "0,2,0", "1,0,1", "2,1,1"]);
}

proptest! {
    #[test]
    fn histogram_marginals_agree(records in prop::collection::vec((0usize..5, 0usize..4), 1..300)) {
        let mut h = RoutingHistogram::new(2, 5, 4);
        for &(c, u) in &records {
            h.record(c, u);
        }
        prop_assert_eq!(h.total(), records.len() as u64);
        prop_assert_eq!(h.class_totals().iter().sum::<u64>(), h.total());
        prop_assert_eq!(h.unit_totals().iter().sum::<u64>(), h.total());
        for u in 0..4 {
            if h.unit_totals()[u] == 0 {
                continue;
            }
            let dominant = h.dominant_classes(u, 0.85);
            let share: f64 = dominant.iter().map(|&c| h.unit_class_distribution(u)[c]).sum();
            prop_assert!(share >= 0.85 - 1e-12);
            prop_assert!(h.top_k_share(u, 5) > 1.0 - 1e-12);
        }
    }
}
