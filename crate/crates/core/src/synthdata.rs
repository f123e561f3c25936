//! Synthetic series with controllable features, feature extraction, and
//! labeled/unlabeled dataset splits.
//!
//! A series is built from a noise-free template (trend, sinusoid, narrow
//! bumps, then a power transform for skew) plus small Gaussian noise, and
//! min-max normalized. A [`SeriesSpec`] target is the feature vector of its
//! template; [`TOLERANCE`] bounds how far noise moves the measured features.

use std::f64::consts::PI;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::condition::{
    parse_text, render_text, ConditionEncoder, ConditionVector, FeatureBins, FeatureVector,
    TextKind, FEATURES,
};
use crate::error::{invalid, Error, Result};
use crate::seeding::stream;

pub const MIN_LEN: usize = 8;
pub const DEFAULT_LEN: usize = 64;
pub const DEFAULT_NOISE: f64 = 5e-4;

/// Largest allowed `|measured - target|` per feature, in encoding order
/// (frequency, skewness, mean, variance, linearity, n_peaks), at
/// [`DEFAULT_NOISE`] and length 64.
pub const TOLERANCE: [f64; 6] = [0.0, 0.02, 0.002, 0.001, 0.002, 1.0];

/// A narrow Gaussian bump added to the template.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    /// Position as a fraction of the series length.
    pub center: f64,
    pub height: f64,
}

/// Generator knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Knobs {
    /// Whole sinusoid cycles over the series.
    pub cycles: usize,
    pub phase: f64,
    pub amplitude: f64,
    /// Trend rise over the whole series.
    pub slope: f64,
    pub bumps: Vec<Bump>,
    /// Exponent applied to the normalized template; 1 leaves it unchanged.
    pub skew_exponent: f64,
    /// Standard deviation of additive noise relative to the unit range.
    pub noise_scale: f64,
}

impl Knobs {
    fn validate(&self, len: usize) -> Result<()> {
        let finite = [
            self.phase,
            self.amplitude,
            self.slope,
            self.skew_exponent,
            self.noise_scale,
        ]
        .iter()
        .chain(self.bumps.iter().flat_map(|b| [&b.center, &b.height]))
        .all(|v| v.is_finite());
        if !finite {
            return Err(invalid("generator knobs must be finite"));
        }
        if self.skew_exponent <= 0.0 || self.noise_scale < 0.0 || self.amplitude < 0.0 {
            return Err(invalid(
                "need skew_exponent > 0, amplitude >= 0, noise_scale >= 0",
            ));
        }
        if 2 * self.cycles > len {
            return Err(invalid(format!(
                "{} cycles exceed the Nyquist limit for length {len}",
                self.cycles
            )));
        }
        Ok(())
    }

    /// Random knobs spread over the feasible feature ranges.
    pub fn random<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        let max_cycles = (len / 8).max(1);
        let n_bumps = rng.random_range(0..=3);
        Self {
            cycles: rng.random_range(1..=max_cycles),
            phase: rng.random_range(0.0..2.0 * PI),
            amplitude: rng.random_range(0.0..1.0),
            slope: rng.random_range(-3.0..3.0),
            bumps: (0..n_bumps)
                .map(|_| Bump {
                    center: rng.random_range(0.05..0.95),
                    height: rng.random_range(0.1..0.6),
                })
                .collect(),
            skew_exponent: rng.random_range(-0.8f64..0.8).exp(),
            noise_scale: DEFAULT_NOISE,
        }
    }
}

/// Knobs and the features they are expected to produce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesSpec {
    pub target: FeatureVector,
    pub knobs: Knobs,
}

impl SeriesSpec {
    /// Spec whose target is the features of the knobs' template.
    pub fn from_knobs(knobs: Knobs, len: usize) -> Result<Self> {
        let target = extract_features(&template(&knobs, len)?)?;
        Ok(Self { target, knobs })
    }
}

/// The normalized noise-free series for `knobs`.
pub fn template(knobs: &Knobs, len: usize) -> Result<Vec<f64>> {
    Ok(shape(knobs, &base_curve(knobs, len)?))
}

/// Trend, sinusoid and bumps, normalized.
fn base_curve(knobs: &Knobs, len: usize) -> Result<Vec<f64>> {
    if len < MIN_LEN {
        return Err(invalid(format!("series length {len} below {MIN_LEN}")));
    }
    knobs.validate(len)?;
    let last = (len - 1) as f64;
    let raw: Vec<f64> = (0..len)
        .map(|i| {
            let u = i as f64 / last;
            let wave = knobs.amplitude
                * (2.0 * PI * knobs.cycles as f64 * i as f64 / len as f64 + knobs.phase).sin();
            let bumps: f64 = knobs
                .bumps
                .iter()
                .map(|b| b.height * (-0.5 * ((i as f64 - b.center * last) / 0.8).powi(2)).exp())
                .sum();
            knobs.slope * u + wave + bumps
        })
        .collect();
    Ok(minmax_normalize(&raw))
}

/// Power transform of a normalized curve. Monotone, so peaks are unchanged.
fn shape(knobs: &Knobs, curve: &[f64]) -> Vec<f64> {
    let shaped: Vec<f64> = curve.iter().map(|v| v.powf(knobs.skew_exponent)).collect();
    minmax_normalize(&shaped)
}

/// Noise is added before the skew transform, then the result is normalized.
/// Deterministic given the generator state.
pub fn generate_series<R: Rng + ?Sized>(
    spec: &SeriesSpec,
    len: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let base = base_curve(&spec.knobs, len)?;
    spec.target.validate(len)?;
    if spec.knobs.noise_scale > 0.0 && spec.target.linearity.abs() >= 1.0 - 1e-12 {
        return Err(Error::Infeasible(
            "a perfect linear trend cannot survive nonzero noise".into(),
        ));
    }
    let achieved = extract_features(&shape(&spec.knobs, &base))?;
    for (f, tol) in FEATURES.iter().zip(TOLERANCE) {
        let gap = (achieved.get(*f) - spec.target.get(*f)).abs();
        if gap > tol {
            return Err(Error::Infeasible(format!(
                "knobs give {f} = {}, target {} (tolerance {tol})",
                achieved.get(*f),
                spec.target.get(*f)
            )));
        }
    }
    let noisy: Vec<f64> = base
        .iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(rng);
            v + spec.knobs.noise_scale * z
        })
        .collect();
    Ok(shape(&spec.knobs, &minmax_normalize(&noisy)))
}

/// `(x - min) / (max - min)`; a constant series maps to all 0.5.
pub fn minmax_normalize(series: &[f64]) -> Vec<f64> {
    let (lo, hi) = series
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !(hi > lo) {
        return vec![0.5; series.len()];
    }
    let span = hi - lo;
    series
        .iter()
        .map(|&v| ((v - lo) / span).clamp(0.0, 1.0))
        .collect()
}

/// Bin of the largest periodogram magnitude, DC excluded, lowest bin on ties.
fn dominant_bin(x: &[f64], mean: f64) -> usize {
    let n = x.len();
    let mut best = (1, f64::NEG_INFINITY);
    for k in 1..=n / 2 {
        let w = 2.0 * PI * k as f64 / n as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (i, &v) in x.iter().enumerate() {
            let (s, c) = (w * i as f64).sin_cos();
            re += (v - mean) * c;
            im -= (v - mean) * s;
        }
        let power = re * re + im * im;
        if power > best.1 * (1.0 + 1e-12) + 1e-300 {
            best = (k, power);
        }
    }
    best.0
}

/// The six features of a series.
///
/// Frequency is the dominant periodogram bin over the length; skewness uses
/// population moments; linearity is `sign(slope) * R^2` of the least-squares
/// line; peaks are strict one-neighbour local maxima. Constant series have
/// zero skewness and linearity.
pub fn extract_features(series: &[f64]) -> Result<FeatureVector> {
    let n = series.len();
    if n < MIN_LEN {
        return Err(invalid(format!("series length {n} below {MIN_LEN}")));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalInstability {
            primitive: "extract_features",
        });
    }
    let nf = n as f64;
    let mean = series.iter().sum::<f64>() / nf;
    let constant = series.iter().all(|&v| v == series[0]);
    let m2 = series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf;
    let m3 = series.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / nf;
    let (skewness, linearity, variance) = if constant {
        (0.0, 0.0, 0.0)
    } else {
        let tm = (nf - 1.0) / 2.0;
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for (i, v) in series.iter().enumerate() {
            let d = i as f64 - tm;
            sxy += d * (v - mean);
            sxx += d * d;
        }
        let r2 = (sxy * sxy / (sxx * m2 * nf)).min(1.0);
        (m3 / m2.powf(1.5), sxy.signum() * r2, m2)
    };
    let frequency = if constant {
        0.0
    } else {
        dominant_bin(series, mean) as f64 / nf
    };
    let n_peaks = series
        .windows(3)
        .filter(|w| w[0] < w[1] && w[1] > w[2])
        .count();
    Ok(FeatureVector {
        frequency,
        skewness,
        mean,
        variance,
        linearity,
        n_peaks,
    })
}

/// One stored series; `features` and `text` are present on labeled records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<FeatureVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl Record {
    pub fn is_labeled(&self) -> bool {
        self.text.is_some()
    }
}

/// One split of the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub series_len: usize,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn all_series(&self) -> Vec<&[f64]> {
        self.records.iter().map(|r| r.values.as_slice()).collect()
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].is_labeled())
            .collect()
    }

    /// Labeled series with conditions encoded from their text.
    pub fn labeled_pairs(
        &self,
        encoder: &ConditionEncoder,
    ) -> Result<(Vec<&[f64]>, Vec<ConditionVector>)> {
        let mut series = Vec::new();
        let mut conds = Vec::new();
        for r in self.records.iter().filter(|r| r.is_labeled()) {
            let prompt = parse_text(r.text.as_deref().expect("labeled"))?;
            series.push(r.values.as_slice());
            conds.push(encoder.encode(&prompt).condition);
        }
        Ok((series, conds))
    }

    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.values.len() != self.series_len {
                return Err(Error::Data(format!(
                    "record {i} has {} values, expected {}",
                    r.values.len(),
                    self.series_len
                )));
            }
            if r.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("record {i} has non-finite values")));
            }
            let (lo, hi) = r
                .values
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                    (a.min(v), b.max(v))
                });
            if lo != hi && (lo.abs() > 1e-12 || (hi - 1.0).abs() > 1e-12) {
                return Err(Error::Data(format!("record {i} is not min-max normalized")));
            }
            if r.features.is_some() != r.text.is_some() {
                return Err(Error::Data(format!(
                    "record {i} has only one of features and text"
                )));
            }
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R, series_len: usize) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?;
            records.push(r);
        }
        let ds = Self {
            series_len,
            records,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Dataset-level metadata stored as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub series_len: usize,
    pub seed: u64,
    pub label_fraction: f64,
    pub train_size: usize,
    pub test_size: usize,
    /// Labeled record indices within the train split.
    pub train_labeled: Vec<usize>,
    /// Ranges and quintiles of the train-split features.
    pub bins: FeatureBins,
}

/// Train and test splits with their manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub manifest: Manifest,
    pub train: Dataset,
    pub test: Dataset,
}

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetBundle {
    pub fn encoder(&self) -> ConditionEncoder {
        ConditionEncoder::new(self.manifest.bins.clone(), false)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (name, ds) in [(TRAIN_FILE, &self.train), (TEST_FILE, &self.test)] {
            let mut w = BufWriter::new(std::fs::File::create(dir.join(name))?);
            ds.write_jsonl(&mut w)?;
            w.flush()?;
        }
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        std::fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    /// Loads and cross-checks a saved bundle.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let open = |name: &str| {
            std::fs::File::open(dir.join(name))
                .map_err(|e| Error::Data(format!("cannot open {}: {e}", dir.join(name).display())))
        };
        let manifest: Manifest = serde_json::from_reader(BufReader::new(open(MANIFEST_FILE)?))
            .map_err(|e| Error::Data(format!("bad manifest: {e}")))?;
        Self::load_with(dir, manifest)
    }

    /// Loads only the labeled train records, leaving unlabeled lines unparsed.
    pub fn load_labeled_train(dir: impl AsRef<Path>) -> Result<(Manifest, Dataset)> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_reader(BufReader::new(
            std::fs::File::open(dir.join(MANIFEST_FILE))
                .map_err(|e| Error::Data(format!("cannot open manifest: {e}")))?,
        ))
        .map_err(|e| Error::Data(format!("bad manifest: {e}")))?;
        let file = std::fs::File::open(dir.join(TRAIN_FILE))
            .map_err(|e| Error::Data(format!("cannot open train split: {e}")))?;
        let mut wanted = manifest.train_labeled.iter().copied().peekable();
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if wanted.peek() != Some(&i) {
                continue;
            }
            wanted.next();
            records.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?,
            );
        }
        if wanted.next().is_some() {
            return Err(Error::Data(
                "train split is shorter than the manifest's labels".into(),
            ));
        }
        let ds = Dataset {
            series_len: manifest.series_len,
            records,
        };
        ds.validate()?;
        if ds.records.iter().any(|r| !r.is_labeled()) {
            return Err(Error::Data("manifest points at unlabeled records".into()));
        }
        Ok((manifest, ds))
    }

    fn load_with(dir: &Path, manifest: Manifest) -> Result<Self> {
        let read = |name: &str| -> Result<Dataset> {
            let f = std::fs::File::open(dir.join(name))
                .map_err(|e| Error::Data(format!("cannot open {name}: {e}")))?;
            Dataset::read_jsonl(BufReader::new(f), manifest.series_len)
        };
        let bundle = Self {
            train: read(TRAIN_FILE)?,
            test: read(TEST_FILE)?,
            manifest,
        };
        bundle.check()?;
        Ok(bundle)
    }

    fn check(&self) -> Result<()> {
        let m = &self.manifest;
        if self.train.len() != m.train_size || self.test.len() != m.test_size {
            return Err(Error::Data("split sizes disagree with the manifest".into()));
        }
        if self.train.labeled_indices() != m.train_labeled {
            return Err(Error::Data(
                "labeled indices disagree with the manifest".into(),
            ));
        }
        if self.test.records.iter().any(|r| !r.is_labeled()) {
            return Err(Error::Data("test split must be fully labeled".into()));
        }
        Ok(())
    }
}

/// Generates `n` synthetic series and splits them. See [`build_dataset`].
pub fn make_dataset(n: usize, len: usize, label_fraction: f64, seed: u64) -> Result<DatasetBundle> {
    if n < 10 {
        return Err(invalid(format!("need at least 10 series, got {n}")));
    }
    if len < MIN_LEN {
        return Err(invalid(format!("series length {len} below {MIN_LEN}")));
    }
    let mut knob_rng = stream(seed, "synthdata/knobs");
    let mut noise_rng = stream(seed, "synthdata/noise");
    let mut series = Vec::with_capacity(n);
    while series.len() < n {
        let spec = SeriesSpec::from_knobs(Knobs::random(len, &mut knob_rng), len)?;
        match generate_series(&spec, len, &mut noise_rng) {
            Ok(s) => series.push(s),
            Err(Error::Infeasible(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    build_dataset(series, label_fraction, seed)
}

/// Splits externally supplied or generated series 80/20, labels a random
/// `floor(label_fraction * n_train)` subset of the train split, and labels
/// the whole test split. Series are min-max normalized first.
pub fn build_dataset(
    series: Vec<Vec<f64>>,
    label_fraction: f64,
    seed: u64,
) -> Result<DatasetBundle> {
    if !(label_fraction > 0.0 && label_fraction <= 1.0) {
        return Err(invalid(format!(
            "label fraction must lie in (0, 1], got {label_fraction}"
        )));
    }
    let n = series.len();
    if n < 10 {
        return Err(invalid(format!("need at least 10 series, got {n}")));
    }
    let len = series[0].len();
    if len < MIN_LEN || series.iter().any(|s| s.len() != len) {
        return Err(invalid(format!(
            "series must share one length of at least {MIN_LEN}"
        )));
    }
    let normalized: Vec<Vec<f64>> = series.iter().map(|s| minmax_normalize(s)).collect();
    let features = normalized
        .iter()
        .map(|s| extract_features(s))
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, "synthdata/split"));
    let n_train = n * 4 / 5;
    let (train_idx, test_idx) = order.split_at(n_train);

    let train_features: Vec<FeatureVector> = train_idx.iter().map(|&i| features[i]).collect();
    let bins = FeatureBins::from_corpus(&train_features)?;
    let n_labeled = (label_fraction * n_train as f64).floor() as usize;
    if n_labeled == 0 {
        return Err(invalid(format!(
            "label fraction {label_fraction} leaves no labeled series"
        )));
    }
    let mut labeled =
        index::sample(&mut stream(seed, "synthdata/labels"), n_train, n_labeled).into_vec();
    labeled.sort_unstable();

    let mut text_rng = stream(seed, "synthdata/text");
    let mut labeled_record = |i: usize| -> Result<Record> {
        let fv = features[i];
        let text = render_text(&fv, TextKind::Exact, None, &mut text_rng)?;
        Ok(Record {
            values: normalized[i].clone(),
            features: Some(fv),
            text: Some(text),
        })
    };
    let mut train_records = Vec::with_capacity(n_train);
    let mut next_label = labeled.iter().peekable();
    for (pos, &i) in train_idx.iter().enumerate() {
        if next_label.peek() == Some(&&pos) {
            next_label.next();
            train_records.push(labeled_record(i)?);
        } else {
            train_records.push(Record {
                values: normalized[i].clone(),
                features: None,
                text: None,
            });
        }
    }
    let test_records = test_idx
        .iter()
        .map(|&i| labeled_record(i))
        .collect::<Result<Vec<_>>>()?;

    Ok(DatasetBundle {
        manifest: Manifest {
            series_len: len,
            seed,
            label_fraction,
            train_size: n_train,
            test_size: n - n_train,
            train_labeled: labeled,
            bins,
        },
        train: Dataset {
            series_len: len,
            records: train_records,
        },
        test: Dataset {
            series_len: len,
            records: test_records,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn knobs() -> Knobs {
        Knobs {
            cycles: 0,
            phase: 0.0,
            amplitude: 0.0,
            slope: 0.0,
            bumps: vec![],
            skew_exponent: 1.0,
            noise_scale: 0.0,
        }
    }

    /// Direct O(n^2) periodogram argmax with an explicit tie rule.
    fn brute_frequency(x: &[f64]) -> f64 {
        let n = x.len();
        let mean = x.iter().sum::<f64>() / n as f64;
        let power = |k: usize| {
            let mut re = 0.0;
            let mut im = 0.0;
            for (i, v) in x.iter().enumerate() {
                let a = 2.0 * PI * (k * i % n) as f64 / n as f64;
                re += (v - mean) * a.cos();
                im += (v - mean) * a.sin();
            }
            re * re + im * im
        };
        let powers: Vec<f64> = (1..=n / 2).map(power).collect();
        let max = powers.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (powers
            .iter()
            .position(|&p| p >= max * (1.0 - 1e-9))
            .unwrap()
            + 1) as f64
            / n as f64
    }

    #[test]
    fn constant_series_conventions() {
        let fv = extract_features(&[3.0; 16]).unwrap();
        assert_eq!(
            (fv.variance, fv.skewness, fv.linearity, fv.n_peaks),
            (0.0, 0.0, 0.0, 0)
        );
        assert_eq!(minmax_normalize(&[3.0; 5]), vec![0.5; 5]);
    }

    #[test]
    fn ramp_features() {
        let l = 64;
        let ramp: Vec<f64> = (0..l).map(|i| i as f64 / (l - 1) as f64).collect();
        let fv = extract_features(&ramp).unwrap();
        assert!((fv.mean - 0.5).abs() < 1e-12);
        assert!((fv.linearity - 1.0).abs() < 1e-12);
        assert_eq!(fv.n_peaks, 0);
        let down: Vec<f64> = ramp.iter().rev().cloned().collect();
        assert!((extract_features(&down).unwrap().linearity + 1.0).abs() < 1e-12);
    }

    #[test]
    fn sinusoid_features() {
        let x: Vec<f64> = (0..64)
            .map(|i| (2.0 * PI * 5.0 * i as f64 / 64.0).sin())
            .collect();
        let fv = extract_features(&x).unwrap();
        assert_eq!(fv.frequency, 5.0 / 64.0);
        assert_eq!(fv.frequency, brute_frequency(&x));
        assert_eq!(fv.n_peaks, 5);
        assert!(fv.mean.abs() < 1e-9);
    }

    #[test]
    fn short_series_rejected() {
        assert!(matches!(
            extract_features(&[0.0; 7]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn skewness_sign_follows_the_tail() {
        let mut x = vec![0.0; 20];
        x[3] = 1.0;
        assert!(extract_features(&x).unwrap().skewness > 0.0);
        let y: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!(extract_features(&y).unwrap().skewness < 0.0);
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(minmax_normalize(&[2.0, 4.0, 6.0]), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn noise_free_ramp_generator() {
        let spec = SeriesSpec::from_knobs(
            Knobs {
                slope: 1.0,
                ..knobs()
            },
            64,
        )
        .unwrap();
        let s = generate_series(&spec, 64, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let fv = extract_features(&s).unwrap();
        assert!((fv.linearity - 1.0).abs() < 1e-12);
        assert_eq!(fv.n_peaks, 0);
    }

    #[test]
    fn pure_sinusoid_generator() {
        let spec = SeriesSpec::from_knobs(
            Knobs {
                cycles: 5,
                amplitude: 1.0,
                ..knobs()
            },
            64,
        )
        .unwrap();
        let s = generate_series(&spec, 64, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let fv = extract_features(&s).unwrap();
        assert_eq!(fv.frequency, brute_frequency(&s));
        assert_eq!(fv.frequency, 5.0 / 64.0);
        assert_eq!(fv.n_peaks, 5);
    }

    #[test]
    fn perfect_trend_with_noise_is_infeasible() {
        let spec = SeriesSpec::from_knobs(
            Knobs {
                slope: 1.0,
                noise_scale: 0.01,
                ..knobs()
            },
            64,
        )
        .unwrap();
        let err = generate_series(&spec, 64, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(Error::Infeasible(_))));
    }

    #[test]
    fn mismatched_target_is_infeasible() {
        let mut spec = SeriesSpec::from_knobs(
            Knobs {
                cycles: 3,
                amplitude: 1.0,
                ..knobs()
            },
            64,
        )
        .unwrap();
        spec.target.n_peaks = 9;
        assert!(matches!(
            generate_series(&spec, 64, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn seeds_change_series_not_features() {
        let mut krng = ChaCha8Rng::seed_from_u64(3);
        let spec = SeriesSpec::from_knobs(Knobs::random(64, &mut krng), 64).unwrap();
        let a = generate_series(&spec, 64, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = generate_series(&spec, 64, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(a, b);
        let (fa, fb) = (extract_features(&a).unwrap(), extract_features(&b).unwrap());
        for (i, f) in FEATURES.iter().enumerate() {
            assert!((fa.get(*f) - fb.get(*f)).abs() <= 2.0 * TOLERANCE[i], "{f}");
        }
    }

    #[test]
    fn generated_features_track_targets() {
        let len = 64;
        let mut krng = ChaCha8Rng::seed_from_u64(11);
        let mut nrng = ChaCha8Rng::seed_from_u64(12);
        let (mut total, mut within) = (0, 0);
        while total < 2000 {
            let spec = SeriesSpec::from_knobs(Knobs::random(len, &mut krng), len).unwrap();
            let Ok(s) = generate_series(&spec, len, &mut nrng) else {
                continue;
            };
            total += 1;
            let fv = extract_features(&s).unwrap();
            if FEATURES
                .iter()
                .zip(TOLERANCE)
                .all(|(f, tol)| (fv.get(*f) - spec.target.get(*f)).abs() <= tol)
            {
                within += 1;
            }
        }
        assert!(within as f64 >= 0.99 * total as f64, "{within}/{total}");
    }

    #[test]
    fn dataset_split_sizes() {
        let b = make_dataset(1000, 32, 0.1, 4).unwrap();
        assert_eq!((b.train.len(), b.test.len()), (800, 200));
        assert_eq!(b.manifest.train_labeled.len(), 80);
        assert_eq!(b.train.labeled_indices(), b.manifest.train_labeled);
        assert!(b.test.records.iter().all(Record::is_labeled));
        b.train.validate().unwrap();
        b.test.validate().unwrap();
        let full = make_dataset(20, 16, 1.0, 4).unwrap();
        assert_eq!(full.train.labeled_indices().len(), full.train.len());
    }

    #[test]
    fn dataset_rejects_bad_arguments() {
        assert!(make_dataset(9, 16, 0.5, 0).is_err());
        assert!(make_dataset(100, 16, 0.0, 0).is_err());
        assert!(make_dataset(100, 16, 1.5, 0).is_err());
        assert!(make_dataset(100, 7, 0.5, 0).is_err());
        assert!(make_dataset(10, 16, 0.05, 0).is_err());
    }

    #[test]
    fn stored_text_encodes_the_stored_features() {
        let b = make_dataset(50, 32, 0.5, 9).unwrap();
        for r in b.test.records.iter() {
            let p = parse_text(r.text.as_deref().unwrap()).unwrap();
            assert_eq!(p.to_features().unwrap(), r.features.unwrap());
            assert_eq!(extract_features(&r.values).unwrap(), r.features.unwrap());
        }
        let (series, conds) = b.train.labeled_pairs(&b.encoder()).unwrap();
        assert_eq!(series.len(), b.manifest.train_labeled.len());
        assert_eq!(conds.len(), series.len());
    }

    #[test]
    fn save_load_round_trip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let b = make_dataset(40, 16, 0.25, 1).unwrap();
        b.save(dir.path()).unwrap();
        let loaded = DatasetBundle::load(dir.path()).unwrap();
        assert_eq!(loaded, b);

        let dir2 = tempfile::tempdir().unwrap();
        make_dataset(40, 16, 0.25, 1)
            .unwrap()
            .save(dir2.path())
            .unwrap();
        for f in [TRAIN_FILE, TEST_FILE, MANIFEST_FILE] {
            assert_eq!(
                std::fs::read(dir.path().join(f)).unwrap(),
                std::fs::read(dir2.path().join(f)).unwrap()
            );
        }

        let (m, labeled) = DatasetBundle::load_labeled_train(dir.path()).unwrap();
        assert_eq!(labeled.len(), m.train_labeled.len());
        assert!(labeled.records.iter().all(Record::is_labeled));
    }

    #[test]
    fn corrupt_records_are_data_errors() {
        let input = "{\"values\":[0.0,1.0,0.5,0.5,0.5,0.5,0.5,0.5]}\n{\"values\":[1.0]}\n";
        assert!(matches!(
            Dataset::read_jsonl(input.as_bytes(), 8),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            Dataset::read_jsonl("not json\n".as_bytes(), 8),
            Err(Error::Data(_))
        ));
        let unnormalized = "{\"values\":[0.0,2.0,0.5,0.5,0.5,0.5,0.5,0.5]}\n";
        assert!(matches!(
            Dataset::read_jsonl(unnormalized.as_bytes(), 8),
            Err(Error::Data(_))
        ));
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(x in prop::collection::vec(-1e6f64..1e6, 1..50)) {
            let once = minmax_normalize(&x);
            prop_assert_eq!(minmax_normalize(&once), once.clone());
            if once.iter().any(|&v| v != 0.5) {
                let lo = once.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = once.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(lo.abs() <= 1e-12 && (hi - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn frequency_matches_brute_force(x in prop::collection::vec(-1.0f64..1.0, 8..40)) {
            let fv = extract_features(&x).unwrap();
            prop_assert_eq!(fv.frequency, brute_frequency(&x));
            prop_assert!((-1.0..=1.0).contains(&fv.linearity));
        }
    }
}
