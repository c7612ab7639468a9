mod common;

use astgcrn_core::data::{
    evaluate_metrics, ingest_csv, split_and_window, split_bounds, write_csv, Split, SynthConfig,
};
use astgcrn_core::Tensor;
use common::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn synthetic_csv_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("synth.csv");
    let series = SynthConfig { steps: 300, ..SynthConfig::default() }.generate().unwrap();
    write_csv(&path, &series.values).unwrap();
    let back = ingest_csv(&path).unwrap();
    assert_eq!(back.values, series.values);
    let header = std::fs::read_to_string(&path).unwrap();
    assert_eq!(header.lines().next(), Some("node_0,node_1,node_2,node_3,node_4,node_5,node_6,node_7"));
}

#[test]
fn missing_file_is_an_error() {
    assert!(ingest_csv(std::path::Path::new("/nonexistent/x.csv")).is_err());
}

#[test]
fn windows_stay_inside_their_segment() {
    let series = SynthConfig { nodes: 2, steps: 397, ..SynthConfig::default() }.generate().unwrap();
    let data = split_and_window(&series, 12, 12).unwrap();
    let bounds = split_bounds(397);
    for (i, &start) in data.starts.iter().enumerate() {
        let seg = match data.splits[i] {
            Split::Train => bounds[0],
            Split::Val => bounds[1],
            Split::Test => bounds[2],
        };
        assert!(start >= seg.0 && start + 24 <= seg.1, "window {i}");
        // stored targets are the raw values that follow the inputs
        for h in 0..12 {
            for n in 0..2 {
                assert_eq!(data.targets.at(&[i, h, n, 0]), series.values.at(&[start + 12 + h, n]));
            }
        }
    }
    for (s, (a, b)) in Split::ALL.iter().zip(bounds) {
        assert_eq!(data.indices(*s).len(), b - a - 24 + 1);
    }
}

#[test]
fn normalizer_ignores_later_segments() {
    let series = SynthConfig { nodes: 2, steps: 200, ..SynthConfig::default() }.generate().unwrap();
    let mut shifted = series.clone();
    for t in 120..200 {
        for n in 0..2 {
            shifted.values.set(&[t, n], 1000.0 + t as f64);
        }
    }
    let a = split_and_window(&series, 4, 4).unwrap();
    let b = split_and_window(&shifted, 4, 4).unwrap();
    assert_eq!(a.normalizer, b.normalizer);
    let train: Vec<f64> = series.values.data()[..120 * 2].to_vec();
    let mean = train.iter().sum::<f64>() / train.len() as f64;
    let var = train.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / train.len() as f64;
    assert!((a.normalizer.mean - mean).abs() < 1e-12);
    assert!((a.normalizer.std - var.sqrt()).abs() < 1e-12);
}

#[test]
fn metrics_match_reference_and_ignore_sample_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let m = rng.gen_range(1..6);
        let pred = random(&mut rng, &[m, 3, 2, 1]).scale(5.0);
        let truth = random(&mut rng, &[m, 3, 2, 1]).scale(5.0);
        let (mae, rmse, mape) = ref_metrics(pred.data(), truth.data());
        let got = evaluate_metrics(&pred, &truth, None).unwrap();
        assert!((got.mae - mae).abs() < 1e-12 && (got.rmse - rmse).abs() < 1e-12);
        assert!((got.mape - mape).abs() < 1e-9);

        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);
        let reorder = |t: &Tensor| Tensor::from_fn(t.shape(), |i| t.at(&[order[i[0]], i[1], i[2], i[3]])).unwrap();
        let shuffled = evaluate_metrics(&reorder(&pred), &reorder(&truth), None).unwrap();
        assert!((shuffled.mae - got.mae).abs() < 1e-12);
        assert!((shuffled.rmse - got.rmse).abs() < 1e-12);

        let h2 = evaluate_metrics(&pred, &truth, Some(2)).unwrap();
        let p2: Vec<f64> = (0..m).flat_map(|i| (0..2).map(move |n| (i, n))).map(|(i, n)| pred.at(&[i, 1, n, 0])).collect();
        let t2: Vec<f64> = (0..m).flat_map(|i| (0..2).map(move |n| (i, n))).map(|(i, n)| truth.at(&[i, 1, n, 0])).collect();
        assert!((h2.mae - ref_metrics(&p2, &t2).0).abs() < 1e-12);
    }
}

#[test]
fn manifest_records_splits_and_statistics() {
    let series = SynthConfig { nodes: 2, steps: 200, ..SynthConfig::default() }.generate().unwrap();
    let data = split_and_window(&series, 4, 4).unwrap();
    let json = serde_json::to_value(data.manifest()).unwrap();
    assert_eq!(json["nodes"], 2);
    assert_eq!(json["steps"], 200);
    assert_eq!(json["interval"], "5 mins");
    assert!(json.to_string().contains(&format!("{}", data.normalizer.std)));
}
