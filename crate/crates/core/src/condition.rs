//! Text prompts for series features and their condition-vector encoding.
//!
//! Two sentence templates are supported. The exact form states each value,
//! e.g. `A time series with the frequency of 0.017, 19 peaks and the
//! skewness of -6.15.`; the general form states a quintile level per feature,
//! e.g. `A time series with a high mean and a very low number of peaks.`
//! Clause order is free. The grammar is closed, so [`parse_text`] inverts
//! [`render_text`] exactly.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// The six controllable series properties, in encoding order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Frequency,
    Skewness,
    Mean,
    Variance,
    Linearity,
    Peaks,
}

pub const FEATURES: [Feature; 6] = [
    Feature::Frequency,
    Feature::Skewness,
    Feature::Mean,
    Feature::Variance,
    Feature::Linearity,
    Feature::Peaks,
];

impl Feature {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Feature::Frequency => "frequency",
            Feature::Skewness => "skewness",
            Feature::Mean => "mean",
            Feature::Variance => "variance",
            Feature::Linearity => "linearity",
            Feature::Peaks => "n_peaks",
        }
    }

    /// Noun used by the general template.
    fn general_noun(self) -> &'static str {
        match self {
            Feature::Frequency => "frequency",
            Feature::Skewness => "skewness",
            Feature::Mean => "mean",
            Feature::Variance => "variance",
            Feature::Linearity => "linearity",
            Feature::Peaks => "number of peaks",
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Measured or requested values of the six properties.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub frequency: f64,
    pub skewness: f64,
    pub mean: f64,
    pub variance: f64,
    pub linearity: f64,
    pub n_peaks: usize,
}

impl FeatureVector {
    pub fn get(&self, f: Feature) -> f64 {
        match f {
            Feature::Frequency => self.frequency,
            Feature::Skewness => self.skewness,
            Feature::Mean => self.mean,
            Feature::Variance => self.variance,
            Feature::Linearity => self.linearity,
            Feature::Peaks => self.n_peaks as f64,
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        FEATURES.map(|f| self.get(f))
    }

    /// Checks the value bounds for a series of length `len`.
    pub fn validate(&self, len: usize) -> Result<()> {
        let vals = self.to_array();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(invalid("feature values must be finite"));
        }
        if !(0.0..=0.5).contains(&self.frequency) {
            return Err(invalid(format!(
                "frequency {} outside [0, 0.5]",
                self.frequency
            )));
        }
        if self.variance < 0.0 {
            return Err(invalid(format!("negative variance {}", self.variance)));
        }
        if !(-1.0..=1.0).contains(&self.linearity) {
            return Err(invalid(format!(
                "linearity {} outside [-1, 1]",
                self.linearity
            )));
        }
        if len >= 1 && self.n_peaks > (len - 1) / 2 {
            return Err(invalid(format!(
                "{} peaks impossible for length {len}",
                self.n_peaks
            )));
        }
        Ok(())
    }
}

/// Five equal-mass levels used by the general template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    VeryLow,
    Low,
    Medium,
    High,
    VeryHigh,
}

impl Level {
    pub const ALL: [Level; 5] = [
        Level::VeryLow,
        Level::Low,
        Level::Medium,
        Level::High,
        Level::VeryHigh,
    ];

    pub fn words(self) -> &'static str {
        match self {
            Level::VeryLow => "very low",
            Level::Low => "low",
            Level::Medium => "medium",
            Level::High => "high",
            Level::VeryHigh => "very high",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// One feature's worth of prompt content.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Descriptor {
    Exact(f64),
    Level(Level),
}

/// Parsed prompt: one optional descriptor per feature.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    slots: [Option<Descriptor>; 6],
}

impl Prompt {
    pub fn get(&self, f: Feature) -> Option<Descriptor> {
        self.slots[f.index()]
    }

    pub fn set(&mut self, f: Feature, d: Descriptor) {
        self.slots[f.index()] = Some(d);
    }

    pub fn from_features(fv: &FeatureVector) -> Self {
        let mut p = Prompt::default();
        for f in FEATURES {
            p.set(f, Descriptor::Exact(fv.get(f)));
        }
        p
    }

    /// The feature vector, when every feature is stated exactly.
    pub fn to_features(&self) -> Option<FeatureVector> {
        let mut vals = [0.0; 6];
        for f in FEATURES {
            match self.get(f)? {
                Descriptor::Exact(v) => vals[f.index()] = v,
                Descriptor::Level(_) => return None,
            }
        }
        let peaks = vals[Feature::Peaks.index()];
        if peaks < 0.0 || peaks.fract() != 0.0 {
            return None;
        }
        Some(FeatureVector {
            frequency: vals[0],
            skewness: vals[1],
            mean: vals[2],
            variance: vals[3],
            linearity: vals[4],
            n_peaks: peaks as usize,
        })
    }
}

/// Corpus range and quintile cut points of one feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureRange {
    pub min: f64,
    pub max: f64,
    /// Lower edge of levels 1..=4; a value `v` sits at level `#{e : e <= v}`.
    pub edges: [f64; 4],
}

impl FeatureRange {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("cannot compute bins of an empty corpus"));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let edges = [1, 2, 3, 4].map(|j| sorted[(j * n / 5).min(n - 1)]);
        Ok(Self {
            min: sorted[0],
            max: sorted[n - 1],
            edges,
        })
    }

    pub fn level(&self, v: f64) -> Level {
        Level::ALL[self.edges.iter().filter(|&&e| e <= v).count()]
    }

    /// Centre of a level's value interval.
    pub fn midpoint(&self, level: Level) -> f64 {
        let i = level.index();
        let lo = if i == 0 { self.min } else { self.edges[i - 1] };
        let hi = if i == 4 { self.max } else { self.edges[i] };
        0.5 * (lo + hi)
    }
}

/// Per-feature ranges and quintiles of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBins {
    pub ranges: [FeatureRange; 6],
}

impl FeatureBins {
    pub fn from_corpus(corpus: &[FeatureVector]) -> Result<Self> {
        let mut ranges = Vec::with_capacity(6);
        for f in FEATURES {
            let vals: Vec<f64> = corpus.iter().map(|fv| fv.get(f)).collect();
            ranges.push(FeatureRange::from_values(&vals)?);
        }
        Ok(Self {
            ranges: ranges.try_into().expect("six features"),
        })
    }

    pub fn range(&self, f: Feature) -> &FeatureRange {
        &self.ranges[f.index()]
    }
}

/// Which sentence template to render.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextKind {
    Exact,
    General,
}

const PREFIX: &str = "A time series with ";

/// Shortest round-trip decimal; very small or large magnitudes use a
/// two-digit exponent (`3.12e-05`).
pub fn format_number(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-3..1e6).contains(&a) {
        return format!("{v}");
    }
    let s = format!("{v:e}");
    match s.split_once('e') {
        Some((mant, exp)) => {
            let (sign, digits) = match exp.strip_prefix('-') {
                Some(d) => ('-', d),
                None => ('+', exp),
            };
            format!("{mant}e{sign}{digits:0>2}")
        }
        None => s,
    }
}

fn exact_clause(f: Feature, v: f64) -> String {
    match f {
        Feature::Frequency => format!("the frequency of {}", format_number(v)),
        Feature::Skewness => format!("the skewness of {}", format_number(v)),
        Feature::Mean => format!("the mean of {}", format_number(v)),
        Feature::Variance => format!("the variance of {}", format_number(v)),
        Feature::Linearity => format!("the linear trend of {}", format_number(v)),
        Feature::Peaks => format!("{} peaks", v as u64),
    }
}

fn general_clause(f: Feature, level: Level) -> String {
    format!("a {} {}", level.words(), f.general_noun())
}

fn join_clauses(clauses: &[String]) -> String {
    let body = match clauses {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    };
    format!("{PREFIX}{body}.")
}

/// Renders a prompt in one of the two templates, clause order shuffled.
///
/// `bins` is required for [`TextKind::General`].
pub fn render_text<R: Rng + ?Sized>(
    fv: &FeatureVector,
    kind: TextKind,
    bins: Option<&FeatureBins>,
    rng: &mut R,
) -> Result<String> {
    let mut order = FEATURES;
    order.shuffle(rng);
    let clauses: Vec<String> = match kind {
        TextKind::Exact => order.iter().map(|&f| exact_clause(f, fv.get(f))).collect(),
        TextKind::General => {
            let bins = bins.ok_or_else(|| invalid("general descriptions need corpus bins"))?;
            order
                .iter()
                .map(|&f| general_clause(f, bins.range(f).level(fv.get(f))))
                .collect()
        }
    };
    Ok(join_clauses(&clauses))
}

fn parse_err(clause: &str, reason: &str) -> Error {
    Error::Parse {
        clause: clause.to_string(),
        reason: reason.to_string(),
    }
}

fn parse_value(clause: &str, s: &str) -> Result<f64> {
    let v: f64 = s.parse().map_err(|_| parse_err(clause, "not a number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(parse_err(clause, "non-finite number"))
    }
}

fn parse_clause(clause: &str) -> Result<(Feature, Descriptor)> {
    const EXACT: [(&str, Feature); 5] = [
        ("the frequency of ", Feature::Frequency),
        ("the skewness of ", Feature::Skewness),
        ("the mean of ", Feature::Mean),
        ("the variance of ", Feature::Variance),
        ("the linear trend of ", Feature::Linearity),
    ];
    for (prefix, f) in EXACT {
        if let Some(rest) = clause.strip_prefix(prefix) {
            return Ok((f, Descriptor::Exact(parse_value(clause, rest)?)));
        }
    }
    if let Some(n) = clause.strip_suffix(" peaks") {
        if !n.starts_with("a ") {
            let count: u64 = n
                .parse()
                .map_err(|_| parse_err(clause, "peak count is not an integer"))?;
            return Ok((Feature::Peaks, Descriptor::Exact(count as f64)));
        }
    }
    if let Some(rest) = clause.strip_prefix("a ") {
        // longest level phrases first so "very low" wins over "low"
        for level in [
            Level::VeryLow,
            Level::VeryHigh,
            Level::Low,
            Level::Medium,
            Level::High,
        ] {
            if let Some(noun) = rest
                .strip_prefix(level.words())
                .and_then(|r| r.strip_prefix(' '))
            {
                if let Some(f) = FEATURES.into_iter().find(|f| f.general_noun() == noun) {
                    return Ok((f, Descriptor::Level(level)));
                }
                return Err(parse_err(clause, "unknown feature"));
            }
        }
    }
    Err(parse_err(clause, "unrecognised clause"))
}

/// Parses text produced by [`render_text`], in any clause order.
pub fn parse_text(text: &str) -> Result<Prompt> {
    let trimmed = text.trim();
    let body = trimmed
        .strip_prefix(PREFIX)
        .ok_or_else(|| parse_err(trimmed, "missing `A time series with` prefix"))?;
    let body = body.strip_suffix('.').unwrap_or(body);
    let mut pieces: Vec<&str> = body.split(", ").collect();
    if let Some(last) = pieces.pop() {
        match last.rsplit_once(" and ") {
            Some((a, b)) => {
                pieces.push(a);
                pieces.push(b);
            }
            None => pieces.push(last),
        }
    }
    let mut prompt = Prompt::default();
    for clause in pieces {
        let clause = clause.trim();
        let (f, d) = parse_clause(clause)?;
        if prompt.get(f).is_some() {
            return Err(parse_err(clause, "feature mentioned twice"));
        }
        prompt.set(f, d);
    }
    Ok(prompt)
}

/// The condition fed to the noise predictor. The NULL token is all zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionVector {
    pub values: Vec<f64>,
    pub is_null: bool,
}

impl ConditionVector {
    pub fn null(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
            is_null: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Result of encoding a prompt; `warnings` lists clamped features.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub condition: ConditionVector,
    pub warnings: Vec<String>,
}

/// Maps prompts to condition vectors using corpus ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionEncoder {
    pub bins: FeatureBins,
    /// Append one presence bit per feature (`d_c = 12` instead of 6).
    pub presence_bits: bool,
}

impl ConditionEncoder {
    pub fn new(bins: FeatureBins, presence_bits: bool) -> Self {
        Self {
            bins,
            presence_bits,
        }
    }

    pub fn dim(&self) -> usize {
        if self.presence_bits {
            12
        } else {
            6
        }
    }

    pub fn null(&self) -> ConditionVector {
        ConditionVector::null(self.dim())
    }

    pub fn encode(&self, prompt: &Prompt) -> Encoded {
        let mut values = vec![0.0; self.dim()];
        let mut warnings = Vec::new();
        for f in FEATURES {
            let range = self.bins.range(f);
            let Some(d) = prompt.get(f) else { continue };
            let raw = match d {
                Descriptor::Exact(v) => v,
                Descriptor::Level(l) => range.midpoint(l),
            };
            let clamped = raw.clamp(range.min, range.max);
            if clamped != raw {
                let msg = format!(
                    "{f} = {raw} outside corpus range [{}, {}], clamped",
                    range.min, range.max
                );
                log::warn!("{msg}");
                warnings.push(msg);
            }
            let span = range.max - range.min;
            values[f.index()] = if span > 0.0 {
                2.0 * (clamped - range.min) / span - 1.0
            } else {
                0.0
            };
            if self.presence_bits {
                values[6 + f.index()] = 1.0;
            }
        }
        Encoded {
            condition: ConditionVector {
                values,
                is_null: false,
            },
            warnings,
        }
    }

    pub fn encode_features(&self, fv: &FeatureVector) -> ConditionVector {
        self.encode(&Prompt::from_features(fv)).condition
    }
}
