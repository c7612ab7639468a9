//! Series ingestion, Z-score normalization, chronological splitting,
//! sliding windows, and forecast metrics.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

/// `S x N` single-channel series.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub values: Tensor,
    pub interval: String,
    pub source: String,
}

impl RawSeries {
    pub fn steps(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn nodes(&self) -> usize {
        self.values.shape()[1]
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IngestOptions {
    /// Replace empty or `nan` cells with the previous row's value instead of
    /// rejecting them.
    pub forward_fill: bool,
}

pub fn ingest_csv(path: &Path) -> Result<RawSeries> {
    ingest_csv_with(path, IngestOptions::default())
}

pub fn ingest_csv_with(path: &Path, opts: IngestOptions) -> Result<RawSeries> {
    let text = std::fs::read_to_string(path)?;
    let mut series = parse_csv(&text, opts)?;
    series.source = path.display().to_string();
    Ok(series)
}

/// Parses the `node_0,...,node_{N-1}` layout: one header line, then one line
/// of `N` values per time step.
pub fn parse_csv(text: &str, opts: IngestOptions) -> Result<RawSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    let nodes = header.len();
    if nodes == 0 || header.iter().enumerate().any(|(i, h)| h != format!("node_{i}")) {
        return Err(Error::Ingest {
            line: 1,
            msg: "header must be node_0,...,node_{N-1}".into(),
        });
    }
    let mut data: Vec<f64> = Vec::new();
    let mut steps = 0;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        if record.len() != nodes {
            return Err(Error::Ingest {
                line,
                msg: format!("expected {nodes} values, found {}", record.len()),
            });
        }
        for (col, cell) in record.iter().enumerate() {
            let missing = cell.is_empty() || cell.eq_ignore_ascii_case("nan");
            let value = if missing {
                if !opts.forward_fill || steps == 0 {
                    return Err(Error::Ingest {
                        line,
                        msg: format!("missing value in column {col}"),
                    });
                }
                data[(steps - 1) * nodes + col]
            } else {
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => v,
                    _ => {
                        return Err(Error::Ingest {
                            line,
                            msg: format!("non-numeric cell `{cell}` in column {col}"),
                        })
                    }
                }
            };
            data.push(value);
        }
        steps += 1;
    }
    if steps == 0 {
        return Err(Error::Ingest {
            line: 2,
            msg: "no data rows".into(),
        });
    }
    Ok(RawSeries {
        values: Tensor::new(&[steps, nodes], data)?,
        interval: String::new(),
        source: String::new(),
    })
}

/// Writes `values: S x N` in the layout read by [`ingest_csv`].
pub fn write_csv(path: &Path, values: &Tensor) -> Result<()> {
    let s = values.shape();
    if s.len() != 2 {
        return Err(Error::Contract(format!("series must be S x N, got {s:?}")));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..s[1]).map(|i| format!("node_{i}")))?;
    for row in values.data().chunks(s[1]) {
        // `{}` prints the shortest representation that parses back exactly
        w.write_record(row.iter().map(|v| format!("{v}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Z-score statistics over the training portion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Normalizer {
    /// Mean and population standard deviation.
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Degenerate("cannot fit a normalizer on no data".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 0.0) {
            return Err(Error::Degenerate("training data has zero variance".into()));
        }
        Ok(Normalizer { mean, std })
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }

    pub fn normalize_tensor(&self, t: &Tensor) -> Tensor {
        t.map(|v| self.normalize(v))
    }

    pub fn denormalize_tensor(&self, t: &Tensor) -> Tensor {
        t.map(|v| self.denormalize(v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (train|val|test)"))),
        }
    }
}

/// Chronological `[start, end)` boundaries of the three segments.
pub fn split_bounds(steps: usize) -> [(usize, usize); 3] {
    let b1 = steps * 6 / 10;
    let b2 = steps * 8 / 10;
    [(0, b1), (b1, b2), (b2, steps)]
}

/// Windows cut from one series; inputs are normalized, targets are kept in
/// original units alongside a normalized copy for the loss.
#[derive(Clone, Debug)]
pub struct WindowedDataset {
    /// `M x T' x N x 1`, normalized.
    pub inputs: Tensor,
    /// `M x T x N x 1`, original units.
    pub targets: Tensor,
    /// `M x T x N x 1`, normalized.
    pub targets_norm: Tensor,
    pub splits: Vec<Split>,
    /// Series index of each window's first input step.
    pub starts: Vec<usize>,
    pub normalizer: Normalizer,
    pub segments: [(usize, usize); 3],
    pub input_steps: usize,
    pub horizon: usize,
    pub nodes: usize,
    pub series: RawSeries,
}

/// Splits 6:2:2 in time order, fits the normalizer on the training segment,
/// and cuts stride-1 windows inside each segment.
pub fn split_and_window(series: &RawSeries, input_steps: usize, horizon: usize) -> Result<WindowedDataset> {
    if input_steps == 0 || horizon == 0 {
        return Err(Error::Config("window lengths must be >= 1".into()));
    }
    let (steps, nodes) = (series.steps(), series.nodes());
    let span = input_steps + horizon;
    let segments = split_bounds(steps);
    for (split, (a, b)) in Split::ALL.iter().zip(segments) {
        if b - a < span {
            return Err(Error::Config(format!(
                "{split} segment has {} steps, windows need {span}",
                b - a
            )));
        }
    }
    let raw = series.values.data();
    let (train_start, train_end) = segments[0];
    let normalizer = Normalizer::fit(&raw[train_start * nodes..train_end * nodes])?;

    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut splits = Vec::new();
    let mut starts = Vec::new();
    for (split, (a, b)) in Split::ALL.into_iter().zip(segments) {
        for start in a..=b - span {
            inputs.extend(raw[start * nodes..(start + input_steps) * nodes].iter().map(|&v| normalizer.normalize(v)));
            targets.extend_from_slice(&raw[(start + input_steps) * nodes..(start + span) * nodes]);
            splits.push(split);
            starts.push(start);
        }
    }
    let m = splits.len();
    let targets = Tensor::new(&[m, horizon, nodes, 1], targets)?;
    Ok(WindowedDataset {
        inputs: Tensor::new(&[m, input_steps, nodes, 1], inputs)?,
        targets_norm: normalizer.normalize_tensor(&targets),
        targets,
        splits,
        starts,
        normalizer,
        segments,
        input_steps,
        horizon,
        nodes,
        series: series.clone(),
    })
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.splits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splits.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.splits.len()).filter(|&i| self.splits[i] == split).collect()
    }

    fn gather(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
        let s = t.shape();
        let block: usize = s[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * block);
        for &i in idx {
            data.extend_from_slice(&t.data()[i * block..(i + 1) * block]);
        }
        let mut shape = s.to_vec();
        shape[0] = idx.len();
        Tensor::new(&shape, data)
    }

    /// Normalized inputs for the given windows.
    pub fn batch_inputs(&self, idx: &[usize]) -> Result<Tensor> {
        Self::gather(&self.inputs, idx)
    }

    pub fn batch_targets(&self, idx: &[usize]) -> Result<Tensor> {
        Self::gather(&self.targets, idx)
    }

    pub fn batch_targets_norm(&self, idx: &[usize]) -> Result<Tensor> {
        Self::gather(&self.targets_norm, idx)
    }

    /// Last observed value repeated over the horizon, original units,
    /// `M x T x N x 1`.
    pub fn persistence_forecast(&self, idx: &[usize]) -> Result<Tensor> {
        let (t, n) = (self.horizon, self.nodes);
        let raw = self.series.values.data();
        let mut data = Vec::with_capacity(idx.len() * t * n);
        for &i in idx {
            let last = self.starts[i] + self.input_steps - 1;
            for _ in 0..t {
                data.extend_from_slice(&raw[last * n..(last + 1) * n]);
            }
        }
        Tensor::new(&[idx.len(), t, n, 1], data)
    }

    pub fn manifest(&self) -> DatasetManifest {
        let count = |s| self.splits.iter().filter(|&&x| x == s).count();
        DatasetManifest {
            nodes: self.nodes,
            steps: self.series.steps(),
            interval: self.series.interval.clone(),
            source: self.series.source.clone(),
            normalizer: self.normalizer,
            segments: self.segments,
            windows: [count(Split::Train), count(Split::Val), count(Split::Test)],
            input_steps: self.input_steps,
            horizon: self.horizon,
        }
    }
}

/// Reproducibility record written next to a windowed dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub nodes: usize,
    pub steps: usize,
    pub interval: String,
    pub source: String,
    pub normalizer: Normalizer,
    /// `[start, end)` of train, val, test.
    pub segments: [(usize, usize); 3],
    /// Window counts for train, val, test.
    pub windows: [usize; 3],
    pub input_steps: usize,
    pub horizon: usize,
}

/// Values of `|truth|` below this are left out of MAPE.
pub const MAPE_MIN_TRUTH: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent; NaN when every true value is below [`MAPE_MIN_TRUTH`].
    pub mape: f64,
}

/// MAE, RMSE and MAPE (true value in the denominator) over all entries, or
/// over forecast step `horizon` (1-based, axis 1) only.
pub fn evaluate_metrics(pred: &Tensor, truth: &Tensor, horizon: Option<usize>) -> Result<Metrics> {
    if pred.shape() != truth.shape() {
        return Err(Error::dim("evaluate_metrics", pred.shape(), truth.shape()));
    }
    let pairs: Vec<(f64, f64)> = match horizon {
        None => pred.data().iter().copied().zip(truth.data().iter().copied()).collect(),
        Some(h) => {
            let s = pred.shape();
            if s.len() < 2 || h == 0 || h > s[1] {
                return Err(Error::Config(format!("horizon {h} out of range for shape {s:?}")));
            }
            let inner: usize = s[2..].iter().product();
            let mut v = Vec::with_capacity(s[0] * inner);
            for m in 0..s[0] {
                let start = (m * s[1] + h - 1) * inner;
                for k in start..start + inner {
                    v.push((pred.data()[k], truth.data()[k]));
                }
            }
            v
        }
    };
    let n = pairs.len() as f64;
    let mae = pairs.iter().map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let rmse = (pairs.iter().map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n).sqrt();
    let (ape_sum, ape_count) = pairs
        .iter()
        .filter(|(_, t)| t.abs() >= MAPE_MIN_TRUTH)
        .fold((0.0, 0usize), |(s, c), (p, t)| (s + ((t - p) / t).abs(), c + 1));
    let mape = if ape_count == 0 {
        f64::NAN
    } else {
        100.0 * ape_sum / ape_count as f64
    };
    Ok(Metrics { mae, rmse, mape })
}

/// Seeded synthetic traffic-like series: one sinusoid per node with its own
/// phase, a fixed linear coupling from the previous node on a ring, and
/// Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub nodes: usize,
    pub steps: usize,
    pub seed: u64,
    /// Steps per cycle (288 = one day of 5-minute samples).
    pub period: f64,
    pub coupling: f64,
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            nodes: 8,
            steps: 2016,
            seed: 0,
            period: 288.0,
            coupling: 0.3,
            noise_std: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 || self.steps == 0 {
            return Err(Error::Config("synthetic data needs nodes >= 1 and steps >= 1".into()));
        }
        if !(self.period > 0.0) || !(self.noise_std >= 0.0) || !self.coupling.is_finite() {
            return Err(Error::Config("period must be > 0, noise_std >= 0, coupling finite".into()));
        }
        Ok(())
    }

    /// Noise-free own signal of node `n` at step `t`.
    pub fn own_signal(&self, n: usize, t: usize) -> f64 {
        let phase = std::f64::consts::TAU * n as f64 / self.nodes as f64;
        let amplitude = 3.0 + 0.5 * (n % 4) as f64;
        let level = 10.0 + n as f64;
        level + amplitude * (std::f64::consts::TAU * t as f64 / self.period + phase).sin()
    }

    /// Noise-free value of node `n` at step `t`, including coupling.
    pub fn clean_value(&self, n: usize, t: usize) -> f64 {
        let prev = (n + self.nodes - 1) % self.nodes;
        let coupled = if self.nodes > 1 { self.coupling * self.own_signal(prev, t) } else { 0.0 };
        self.own_signal(n, t) + coupled
    }

    pub fn generate(&self) -> Result<RawSeries> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise = Normal::new(0.0, self.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        let values = Tensor::from_fn(&[self.steps, self.nodes], |i| {
            self.clean_value(i[1], i[0]) + noise.sample(&mut rng)
        })?;
        Ok(RawSeries {
            values,
            interval: "5 mins".into(),
            source: format!("synthetic(seed={})", self.seed),
        })
    }

    /// Coupling structure with self loops, `N x N`: row `n` has 1 on the
    /// diagonal and the coupling weight at the previous node.
    pub fn adjacency(&self) -> Result<Tensor> {
        Tensor::from_fn(&[self.nodes, self.nodes], |i| {
            let prev = (i[0] + self.nodes - 1) % self.nodes;
            if i[0] == i[1] {
                1.0
            } else if i[1] == prev {
                self.coupling.abs()
            } else {
                0.0
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_small_file() {
        let s = parse_csv("node_0,node_1\n1.5,2\n3,4.25\n", IngestOptions::default()).unwrap();
        assert_eq!(s.values.shape(), &[2, 2]);
        assert_eq!(s.values.data(), &[1.5, 2., 3., 4.25]);
    }

    #[test]
    fn ragged_row_names_line() {
        let err = parse_csv("node_0,node_1\n1,2\n3\n", IngestOptions::default()).unwrap_err();
        match err {
            Error::Ingest { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn non_numeric_names_line() {
        let err = parse_csv("node_0\n1\nabc\n", IngestOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Ingest { line: 3, .. }), "{err}");
    }

    #[test]
    fn missing_values_rejected_or_filled() {
        let text = "node_0,node_1\n1,2\n,5\n";
        assert!(matches!(
            parse_csv(text, IngestOptions::default()),
            Err(Error::Ingest { line: 3, .. })
        ));
        let s = parse_csv(text, IngestOptions { forward_fill: true }).unwrap();
        assert_eq!(s.values.data(), &[1., 2., 1., 5.]);
    }

    #[test]
    fn bad_header_rejected() {
        assert!(matches!(
            parse_csv("a,b\n1,2\n", IngestOptions::default()),
            Err(Error::Ingest { line: 1, .. })
        ));
    }

    #[test]
    fn normalizer_examples() {
        let n = Normalizer::fit(&[1., 2., 3.]).unwrap();
        assert_eq!(n.mean, 2.0);
        assert!((n.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        for v in [-3.5, 0.0, 2.0, 1e3] {
            assert!((n.denormalize(n.normalize(v)) - v).abs() < 1e-10);
        }
        assert!(matches!(Normalizer::fit(&[4., 4., 4.]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn split_bounds_six_two_two() {
        assert_eq!(split_bounds(100), [(0, 60), (60, 80), (80, 100)]);
    }

    fn ramp(steps: usize, nodes: usize) -> RawSeries {
        RawSeries {
            values: Tensor::from_fn(&[steps, nodes], |i| (i[0] * nodes + i[1]) as f64).unwrap(),
            interval: "5 mins".into(),
            source: "ramp".into(),
        }
    }

    #[test]
    fn window_counts_per_segment() {
        // S = 180: segments 108 / 36 / 36
        let ds = split_and_window(&ramp(180, 2), 12, 12).unwrap();
        assert_eq!(ds.indices(Split::Train).len(), 108 - 24 + 1);
        assert_eq!(ds.indices(Split::Val).len(), 13);
        assert_eq!(ds.indices(Split::Test).len(), 13);
    }

    #[test]
    fn short_segment_rejected() {
        // S = 115: val segment is 92 - 69 = 23 < 24
        assert!(matches!(
            split_and_window(&ramp(115, 1), 12, 12),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn windows_stay_inside_segments() {
        let ds = split_and_window(&ramp(200, 3), 5, 7).unwrap();
        for (i, &start) in ds.starts.iter().enumerate() {
            let seg = ds.segments[Split::ALL.iter().position(|&s| s == ds.splits[i]).unwrap()];
            assert!(start >= seg.0 && start + 12 <= seg.1);
        }
    }

    #[test]
    fn normalizer_ignores_val_and_test() {
        let mut a = ramp(200, 2);
        let b = split_and_window(&a, 4, 4).unwrap();
        for v in &mut a.values.data_mut()[120 * 2..] {
            *v *= 50.0;
        }
        let c = split_and_window(&a, 4, 4).unwrap();
        assert_eq!(b.normalizer, c.normalizer);
    }

    #[test]
    fn metric_examples() {
        let truth = Tensor::new(&[2], vec![2., 4.]).unwrap();
        let pred = Tensor::new(&[2], vec![1., 5.]).unwrap();
        let m = evaluate_metrics(&pred, &truth, None).unwrap();
        assert_eq!(m, Metrics { mae: 1.0, rmse: 1.0, mape: 37.5 });
        let z = evaluate_metrics(&truth, &truth, None).unwrap();
        assert_eq!(z, Metrics { mae: 0.0, rmse: 0.0, mape: 0.0 });
        let other = Tensor::zeros(&[3]).unwrap();
        assert!(matches!(evaluate_metrics(&pred, &other, None), Err(Error::Dimension { .. })));
    }

    #[test]
    fn mape_skips_near_zero_truth() {
        let truth = Tensor::new(&[3], vec![0.0, 2.0, 1e-4]).unwrap();
        let pred = Tensor::new(&[3], vec![1.0, 3.0, 5.0]).unwrap();
        let m = evaluate_metrics(&pred, &truth, None).unwrap();
        assert_eq!(m.mape, 50.0);
    }

    #[test]
    fn per_horizon_slice() {
        let truth = Tensor::from_fn(&[2, 3, 2], |_| 1.0).unwrap();
        let pred = Tensor::from_fn(&[2, 3, 2], |i| 1.0 + i[1] as f64).unwrap();
        for h in 1..=3 {
            let m = evaluate_metrics(&pred, &truth, Some(h)).unwrap();
            assert_eq!(m.mae, (h - 1) as f64);
        }
        assert!(evaluate_metrics(&pred, &truth, Some(4)).is_err());
    }

    #[test]
    fn synth_shape_and_determinism() {
        let cfg = SynthConfig::default();
        let a = cfg.generate().unwrap();
        assert_eq!(a.values.shape(), &[2016, 8]);
        assert_eq!(a, cfg.generate().unwrap());
        let other = SynthConfig { seed: 1, ..cfg.clone() }.generate().unwrap();
        assert_ne!(a.values, other.values);
        assert!(SynthConfig { nodes: 0, ..cfg }.generate().is_err());
    }

    proptest::proptest! {
        #[test]
        fn rmse_dominates_mae(v in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..40)) {
            let pred = Tensor::new(&[v.len()], v.iter().map(|p| p.0).collect()).unwrap();
            let truth = Tensor::new(&[v.len()], v.iter().map(|p| p.1).collect()).unwrap();
            let m = evaluate_metrics(&pred, &truth, None).unwrap();
            proptest::prop_assert!(m.rmse >= m.mae * (1.0 - 1e-12));
        }
    }
}
