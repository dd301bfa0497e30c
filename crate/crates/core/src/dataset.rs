//! Student training set: records pairing a teacher embedding with the
//! degraded inputs the student sees, the `SKD1` text format, and a seeded
//! synthetic generator with planted outliers.
//!
//! Labels are 1-based (`1..=class_count`) everywhere, including the file
//! format. Record ids are dense and equal to the record's position.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, ParseErrorKind, Result};

/// Number of degraded versions generated per face unless configured otherwise.
pub const DEFAULT_VERSIONS: usize = 16;

const HEADER_MAGIC: &str = "SKD1";

/// One training identity sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceRecord {
    pub id: usize,
    /// Class label in `1..=class_count`.
    pub label: usize,
    /// Teacher embedding of the high-quality sample.
    pub teacher_feature: Vec<f64>,
    /// Degraded versions fed to the student.
    pub degraded_inputs: Vec<Vec<f64>>,
    /// Ground-truth outlier marker, only known for synthetic data.
    pub outlier_flag: Option<bool>,
}

impl FaceRecord {
    /// Zero-based class index.
    pub fn class_index(&self) -> usize {
        self.label - 1
    }
}

/// The student training set with its shape parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentSet {
    records: Vec<FaceRecord>,
    class_count: usize,
    feature_dim: usize,
    input_dim: usize,
    versions: usize,
}

impl StudentSet {
    /// Validates every invariant and builds the set.
    pub fn new(
        records: Vec<FaceRecord>,
        class_count: usize,
        feature_dim: usize,
        input_dim: usize,
        versions: usize,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Invalid("a student set needs at least one record".into()));
        }
        if class_count == 0 || feature_dim == 0 || input_dim == 0 || versions == 0 {
            return Err(Error::Invalid(format!(
                "shape must be positive (C={class_count}, D={feature_dim}, d_in={input_dim}, N={versions})"
            )));
        }
        let mut class_sizes = vec![0usize; class_count];
        for (pos, r) in records.iter().enumerate() {
            if r.id != pos {
                return Err(Error::Invalid(format!(
                    "record ids must be dense: position {pos} holds id {}",
                    r.id
                )));
            }
            if r.label == 0 || r.label > class_count {
                return Err(Error::Invalid(format!(
                    "record {pos}: label {} outside 1..={class_count}",
                    r.label
                )));
            }
            class_sizes[r.label - 1] += 1;
            check_vector(&r.teacher_feature, feature_dim, || format!("record {pos} teacher feature"))?;
            if r.teacher_feature.iter().all(|&v| v == 0.0) {
                return Err(Error::Invalid(format!("record {pos}: teacher feature is all zero")));
            }
            if r.degraded_inputs.len() != versions {
                return Err(Error::Invalid(format!(
                    "record {pos}: {} degraded inputs, expected {versions}",
                    r.degraded_inputs.len()
                )));
            }
            for (j, x) in r.degraded_inputs.iter().enumerate() {
                check_vector(x, input_dim, || format!("record {pos} degraded input {j}"))?;
            }
        }
        if let Some(c) = class_sizes.iter().position(|&k| k == 0) {
            return Err(Error::EmptyClass { class: c + 1 });
        }
        Ok(Self {
            records,
            class_count,
            feature_dim,
            input_dim,
            versions,
        })
    }

    pub fn records(&self) -> &[FaceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn versions(&self) -> usize {
        self.versions
    }

    /// Records per class (`K_c`), indexed by zero-based class.
    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.class_count];
        for r in &self.records {
            sizes[r.class_index()] += 1;
        }
        sizes
    }

    /// Splits every class into its first `train_per_class` records and the
    /// rest. Ids are renumbered densely in both halves.
    pub fn split_per_class(&self, train_per_class: usize) -> Result<(StudentSet, StudentSet)> {
        let mut seen = vec![0usize; self.class_count];
        let mut train = Vec::new();
        let mut test = Vec::new();
        for r in &self.records {
            let slot = &mut seen[r.class_index()];
            let dest = if *slot < train_per_class { &mut train } else { &mut test };
            *slot += 1;
            let mut copy = r.clone();
            copy.id = dest.len();
            dest.push(copy);
        }
        let build = |records| StudentSet::new(records, self.class_count, self.feature_dim, self.input_dim, self.versions);
        Ok((build(train)?, build(test)?))
    }
}

fn check_vector(v: &[f64], dim: usize, what: impl Fn() -> String) -> Result<()> {
    if v.len() != dim {
        return Err(Error::Invalid(format!("{}: length {}, expected {dim}", what(), v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what()));
    }
    Ok(())
}

/// Writes `set` in the `SKD1` text format. Floats use the shortest
/// representation that parses back to the identical value.
pub fn save_student_set(set: &StudentSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_student_set(set, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_student_set<W: Write>(set: &StudentSet, w: &mut W) -> std::io::Result<()> {
    writeln!(
        w,
        "{HEADER_MAGIC} {} {} {} {} {}",
        set.len(),
        set.class_count,
        set.feature_dim,
        set.input_dim,
        set.versions
    )?;
    for r in &set.records {
        let flag = match r.outlier_flag {
            Some(true) => "1",
            Some(false) => "0",
            None => "-",
        };
        write!(w, "{},{},{}", r.id, r.label, flag)?;
        for v in &r.teacher_feature {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
        for (j, x) in r.degraded_inputs.iter().enumerate() {
            write!(w, "{j}")?;
            for v in x {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

pub fn load_student_set(path: impl AsRef<Path>) -> Result<StudentSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_student_set(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    line_no: usize,
}

impl<R: BufRead> Lines<R> {
    fn next_line(&mut self) -> Result<String> {
        self.line_no += 1;
        match self.inner.next() {
            Some(Ok(l)) => Ok(l),
            Some(Err(e)) => Err(Error::io("<reader>", e)),
            None => Err(Error::parse(self.line_no, ParseErrorKind::UnexpectedEof)),
        }
    }
}

/// Parses an `SKD1` stream. Every error names the offending line (1-based).
pub fn read_student_set<R: BufRead>(reader: R) -> Result<StudentSet> {
    let mut lines = Lines {
        inner: reader.lines(),
        line_no: 0,
    };
    let header = lines.next_line()?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 6 || fields[0] != HEADER_MAGIC {
        return Err(Error::parse(1, ParseErrorKind::Header(header.clone())));
    }
    let mut dims = [0usize; 5];
    for (slot, tok) in dims.iter_mut().zip(&fields[1..]) {
        *slot = tok
            .parse()
            .map_err(|_| Error::parse(1, ParseErrorKind::Header(header.clone())))?;
    }
    let [n, class_count, feature_dim, input_dim, versions] = dims;
    if n == 0 || class_count == 0 || feature_dim == 0 || input_dim == 0 || versions == 0 {
        return Err(Error::parse(1, ParseErrorKind::Header(header)));
    }

    let mut records = Vec::with_capacity(n);
    for pos in 0..n {
        let line = lines.next_line()?;
        let at = lines.line_no;
        let toks: Vec<&str> = line.split(',').collect();
        if toks.len() != 3 + feature_dim {
            return Err(Error::parse(
                at,
                ParseErrorKind::DimensionMismatch {
                    expected: feature_dim,
                    found: toks.len().saturating_sub(3),
                },
            ));
        }
        let id: usize = parse_token(toks[0], at)?;
        if id != pos {
            return Err(Error::parse(at, ParseErrorKind::Structure(format!("expected id {pos}, found {id}"))));
        }
        let label: usize = parse_token(toks[1], at)?;
        if label == 0 || label > class_count {
            return Err(Error::parse(
                at,
                ParseErrorKind::Structure(format!("label {label} outside 1..={class_count}")),
            ));
        }
        let outlier_flag = match toks[2] {
            "1" => Some(true),
            "0" => Some(false),
            "-" => None,
            other => return Err(Error::parse(at, ParseErrorKind::BadToken(other.to_string()))),
        };
        let teacher_feature = parse_floats(&toks[3..], at)?;

        let mut degraded_inputs = Vec::with_capacity(versions);
        for j in 0..versions {
            let line = lines.next_line()?;
            let at = lines.line_no;
            let toks: Vec<&str> = line.split(',').collect();
            if toks.len() != 1 + input_dim {
                return Err(Error::parse(
                    at,
                    ParseErrorKind::DimensionMismatch {
                        expected: input_dim,
                        found: toks.len().saturating_sub(1),
                    },
                ));
            }
            let jj: usize = parse_token(toks[0], at)?;
            if jj != j {
                return Err(Error::parse(at, ParseErrorKind::Structure(format!("expected version {j}, found {jj}"))));
            }
            degraded_inputs.push(parse_floats(&toks[1..], at)?);
        }
        records.push(FaceRecord {
            id,
            label,
            teacher_feature,
            degraded_inputs,
            outlier_flag,
        });
    }
    let last = lines.line_no;
    StudentSet::new(records, class_count, feature_dim, input_dim, versions).map_err(|e| match e {
        Error::EmptyClass { class } => {
            Error::parse(last, ParseErrorKind::Structure(format!("class {class} has no records")))
        }
        Error::Invalid(msg) => Error::parse(last, ParseErrorKind::Structure(msg)),
        other => other,
    })
}

fn parse_token<T: std::str::FromStr>(tok: &str, line: usize) -> Result<T> {
    tok.trim()
        .parse()
        .map_err(|_| Error::parse(line, ParseErrorKind::BadToken(tok.to_string())))
}

fn parse_floats(toks: &[&str], line: usize) -> Result<Vec<f64>> {
    toks.iter()
        .map(|t| {
            let v: f64 = parse_token(t, line)?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::parse(line, ParseErrorKind::NonFinite(t.to_string())))
            }
        })
        .collect()
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub class_count: usize,
    pub per_class_count: usize,
    pub feature_dim: usize,
    pub input_dim: usize,
    pub versions: usize,
    /// Gaussian noise added to class centroids to form teacher features.
    pub noise_scale: f64,
    /// Nonzero coordinates of each class direction. Supports are drawn
    /// without overlap until the feature dimensions run out.
    pub active_dims: usize,
    /// Depth below zero of a direction's off-support coordinates, in units
    /// of `noise_scale`. Larger values keep rectified features sparser.
    pub off_support_margin: f64,
    /// Gaussian noise added to each degraded version.
    pub input_noise: f64,
    pub outlier_fraction: f64,
    /// Drives centroids, noise and outlier placement.
    pub seed: u64,
    /// Drives the degradation projection only, so that sets with different
    /// identities can share one degradation model.
    pub projection_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            class_count: 10,
            per_class_count: 30,
            feature_dim: 64,
            input_dim: 32,
            versions: DEFAULT_VERSIONS,
            noise_scale: 0.05,
            active_dims: 6,
            off_support_margin: 3.0,
            input_noise: 0.1,
            outlier_fraction: 0.1,
            seed: 7,
            projection_seed: 1,
        }
    }
}

impl SynthConfig {
    /// Outliers planted in every class.
    pub fn outliers_per_class(&self) -> usize {
        (self.outlier_fraction * self.per_class_count as f64).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.per_class_count == 0 || self.versions == 0 {
            return Err(Error::Invalid("class_count, per_class_count and versions must be positive".into()));
        }
        if self.active_dims == 0 || self.active_dims > self.feature_dim {
            return Err(Error::Invalid(format!(
                "active_dims must be in 1..={}, got {}",
                self.feature_dim, self.active_dims
            )));
        }
        if self.input_dim == 0 || self.input_dim > self.feature_dim {
            return Err(Error::Invalid(format!(
                "need D >= d_in >= 1, got D={} d_in={}",
                self.feature_dim, self.input_dim
            )));
        }
        if !(self.off_support_margin >= 0.0 && self.off_support_margin.is_finite()) {
            return Err(Error::Invalid("off_support_margin must be finite and nonnegative".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite())
            || !(self.input_noise >= 0.0 && self.input_noise.is_finite())
        {
            return Err(Error::Invalid("noise scales must be finite and nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(Error::Invalid(format!(
                "outlier_fraction {} outside [0, 1)",
                self.outlier_fraction
            )));
        }
        let outliers = self.outliers_per_class();
        if outliers >= self.per_class_count {
            return Err(Error::Invalid(format!(
                "outlier_fraction {} leaves no inliers in a class of {}",
                self.outlier_fraction, self.per_class_count
            )));
        }
        if outliers > 0 && self.class_count < 2 {
            return Err(Error::Invalid("planted outliers need at least two classes".into()));
        }
        Ok(())
    }

}

/// Fixed `d_in x D` degradation projection, row-major.
pub fn degradation_projection(config: &SynthConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.projection_seed);
    let scale = 1.0 / (config.input_dim as f64).sqrt();
    (0..config.input_dim)
        .map(|_| {
            (0..config.feature_dim)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

/// Pre-rectification class directions, in class order. The support is
/// nonnegative with unit norm; every other coordinate sits at
/// `-off_support_margin * noise_scale`.
pub fn class_directions(config: &SynthConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    draw_directions(config, &mut rng)
}

fn draw_directions(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let d = config.feature_dim;
    let floor = -config.off_support_margin * config.noise_scale;
    let mut unused: Vec<usize> = Vec::new();
    (0..config.class_count)
        .map(|_| {
            if unused.len() < config.active_dims {
                unused = (0..d).collect();
                unused.shuffle(rng);
            }
            let support = unused.split_off(unused.len() - config.active_dims);
            let values: Vec<f64> = support
                .iter()
                .map(|_| rng.sample::<f64, _>(StandardNormal).abs() + 0.1)
                .collect();
            let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut dir = vec![floor; d];
            for (&idx, v) in support.iter().zip(values) {
                dir[idx] = v / norm;
            }
            dir
        })
        .collect()
}

/// `center` plus Gaussian noise, rectified. Falls back to the rectified
/// center in the unlikely case every coordinate clamps to zero.
fn noisy_copy(center: &[f64], scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = center
        .iter()
        .map(|&c| (c + scale * rng.sample::<f64, _>(StandardNormal)).max(0.0))
        .collect();
    if v.iter().all(|&x| x == 0.0) {
        center.iter().map(|&c| c.max(0.0)).collect()
    } else {
        v
    }
}

/// Generates a synthetic student set.
///
/// Each class gets a sparse direction. Inliers are that direction plus
/// Gaussian noise, clamped at zero. Planted outliers keep
/// their label but receive a teacher feature drawn near another class's
/// direction, emulating a teacher that mis-embeds the sample. Degraded
/// inputs always project the sample's true-class feature, so an outlier's
/// teacher target disagrees with what the student sees.
pub fn synthesize(config: &SynthConfig) -> Result<StudentSet> {
    config.validate()?;
    let projection = degradation_projection(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let directions = draw_directions(config, &mut rng);
    let outliers = config.outliers_per_class();

    let mut records = Vec::with_capacity(config.class_count * config.per_class_count);
    for (c, direction) in directions.iter().enumerate() {
        let mut is_outlier = vec![false; config.per_class_count];
        for k in sample(&mut rng, config.per_class_count, outliers).into_iter() {
            is_outlier[k] = true;
        }
        for &outlier in &is_outlier {
            let clean = noisy_copy(direction, config.noise_scale, &mut rng);
            let teacher_feature = if outlier {
                let shift = rng.random_range(1..config.class_count);
                let other = (c + shift) % config.class_count;
                noisy_copy(&directions[other], config.noise_scale, &mut rng)
            } else {
                clean.clone()
            };
            let base = project(&projection, &clean);
            let degraded_inputs = (0..config.versions)
                .map(|_| {
                    base.iter()
                        .map(|&b| b + config.input_noise * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect();
            records.push(FaceRecord {
                id: records.len(),
                label: c + 1,
                teacher_feature,
                degraded_inputs,
                outlier_flag: Some(outlier),
            });
        }
    }
    StudentSet::new(
        records,
        config.class_count,
        config.feature_dim,
        config.input_dim,
        config.versions,
    )
}

fn project(projection: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    projection
        .iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}
