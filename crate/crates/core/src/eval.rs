//! Evaluation: balanced repeated trials with confusion matrices, inference
//! timing for full versus reduced inputs, and per-application comparisons.
//!
//! Reports render as flat `section,row,col,value` CSV (timing excluded, so
//! identical inputs give byte-identical files) and as text tables.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cnn::{CnnError, CnnModel};
use crate::dataset::EncodedDataset;
use crate::encoder::{downsample, encode_full, ByteMatrix, EncoderConfig};
use crate::hierarchy::HierarchicalClassifier;
use crate::model_io::model_to_bytes;
use crate::pcap::RawPacket;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("class mismatch: {0}")]
    ClassMismatch(String),
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("class `{class}` has {available} test samples, {requested} requested per trial")]
    InsufficientSamples {
        class: String,
        available: usize,
        requested: usize,
    },
    #[error("no application model for service `{0}` and it has several applications")]
    Unresolved(String),
    #[error(transparent)]
    Model(#[from] CnnError),
}

/// Anything that maps a full-size matrix to one of its classes.
pub trait Predictor: Sync {
    fn class_names(&self) -> Vec<String>;
    fn predict_full(&self, full: &ByteMatrix) -> Result<usize, EvalError>;
    /// Bytes that identify this predictor in report fingerprints.
    fn identity(&self) -> Vec<u8>;
}

/// The matrix a model expects, resampled from a full-size one when needed.
pub fn input_for(model: &CnnModel, full: &ByteMatrix) -> Result<ByteMatrix, CnnError> {
    if model.input_side == full.side() {
        return Ok(full.clone());
    }
    downsample(full, model.input_side).map_err(|e| CnnError::ShapeMismatch(e.to_string()))
}

impl Predictor for CnnModel {
    fn class_names(&self) -> Vec<String> {
        self.class_names.clone()
    }

    fn predict_full(&self, full: &ByteMatrix) -> Result<usize, EvalError> {
        let input = input_for(self, full)?;
        Ok(self.predict(&input)?.0)
    }

    fn identity(&self) -> Vec<u8> {
        model_to_bytes(self)
    }
}

/// Predicts applications across the whole catalog. A service without an
/// application model resolves only when it has exactly one application.
impl Predictor for HierarchicalClassifier {
    fn class_names(&self) -> Vec<String> {
        self.catalog()
            .applications
            .iter()
            .map(|(a, _)| a.clone())
            .collect()
    }

    fn predict_full(&self, full: &ByteMatrix) -> Result<usize, EvalError> {
        let verdict = self.classify_matrix(full)?;
        let app = match verdict.application {
            Some(d) => d.name,
            None => {
                let service = verdict.service.name;
                let mut apps = self.catalog().applications_of(&service);
                match (apps.next(), apps.next()) {
                    (Some(only), None) => only.to_string(),
                    _ => return Err(EvalError::Unresolved(service.clone())),
                }
            }
        };
        Ok(self
            .catalog()
            .applications
            .iter()
            .position(|(a, _)| *a == app)
            .expect("application models only name catalog applications"))
    }

    fn identity(&self) -> Vec<u8> {
        let mut bytes = model_to_bytes(self.service_model());
        for service in &self.catalog().services {
            if let Some(m) = self.app_model(service) {
                bytes.extend_from_slice(service.as_bytes());
                bytes.extend(model_to_bytes(m));
            }
        }
        bytes
    }
}

/// Rows are true classes, columns predicted classes. Counts are averages when
/// pooled over several trials.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<f64>>,
}

impl ConfusionMatrix {
    pub fn new(class_names: Vec<String>) -> Self {
        let n = class_names.len();
        ConfusionMatrix {
            class_names,
            counts: vec![vec![0.0; n]; n],
        }
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1.0;
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn total(&self) -> f64 {
        self.row_sums().iter().sum()
    }

    pub fn correct(&self) -> f64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    /// Diagonal share of the whole matrix.
    pub fn accuracy(&self) -> f64 {
        self.correct() / self.total()
    }

    /// Per-class recall; `None` for classes with no samples.
    pub fn class_accuracy(&self) -> Vec<Option<f64>> {
        self.row_sums()
            .iter()
            .enumerate()
            .map(|(i, &sum)| (sum > 0.0).then(|| self.counts[i][i] / sum))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyStats {
    pub max: f64,
    pub mean: f64,
    pub min: f64,
}

impl AccuracyStats {
    fn from_values(values: &[f64]) -> Self {
        AccuracyStats {
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Every trial classifies the whole test set.
    All,
    /// Each trial draws the same number of samples from every class present;
    /// `None` means the smallest class count.
    Balanced(Option<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSpec {
    pub trials: usize,
    pub sampling: Sampling,
    pub seed: u64,
    /// Extra settings (for example the split) folded into the fingerprint.
    pub context: String,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            trials: 100,
            sampling: Sampling::Balanced(None),
            seed: 0,
            context: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationReport {
    pub class_names: Vec<String>,
    /// Mean counts over trials.
    pub confusion: ConfusionMatrix,
    /// Recall statistics per class; `None` for classes absent from the test set.
    pub per_class: Vec<Option<AccuracyStats>>,
    pub overall: AccuracyStats,
    pub trials: usize,
    pub samples_per_trial: usize,
    /// Time to classify every test sample once.
    pub wall_clock_secs: f64,
    pub per_packet_secs: f64,
    pub fingerprint: String,
}

/// Short hex SHA-256 over length-prefixed parts.
pub fn fingerprint(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize()
        .iter()
        .take(8)
        .fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

fn encoder_bytes(c: &EncoderConfig) -> Vec<u8> {
    format!(
        "target_bytes={} full_side={} reduced_side={} strip_link_layer={}",
        c.target_bytes, c.full_side, c.reduced_side, c.strip_link_layer
    )
    .into_bytes()
}

/// Runs `spec.trials` seeded trials. Trial `t` samples with seed
/// `spec.seed + t`, so results do not depend on how trials are scheduled.
pub fn evaluate<P: Predictor + ?Sized>(
    predictor: &P,
    test_set: &EncodedDataset,
    spec: &EvalSpec,
) -> Result<ClassificationReport, EvalError> {
    if test_set.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    if spec.trials == 0 {
        return Err(EvalError::ClassMismatch("at least one trial is required".into()));
    }
    let classes = predictor.class_names();
    let counts = test_set.class_counts();
    let mut to_model = Vec::with_capacity(test_set.class_names.len());
    for (name, &count) in test_set.class_names.iter().zip(&counts) {
        let idx = classes.iter().position(|c| c == name);
        if idx.is_none() && count > 0 {
            return Err(EvalError::ClassMismatch(format!(
                "test class `{name}` is not among model classes {classes:?}"
            )));
        }
        to_model.push(idx);
    }

    let started = Instant::now();
    let predictions: Vec<usize> = test_set
        .samples
        .par_iter()
        .map(|s| predictor.predict_full(&s.matrix))
        .collect::<Result<_, _>>()?;
    let wall_clock_secs = started.elapsed().as_secs_f64();
    let truths: Vec<usize> = test_set
        .samples
        .iter()
        .map(|s| to_model[s.label].expect("checked above"))
        .collect();

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes.len()];
    for (i, &t) in truths.iter().enumerate() {
        members[t].push(i);
    }
    let per_class_n = match spec.sampling {
        Sampling::All => None,
        Sampling::Balanced(requested) => {
            let smallest = members.iter().map(Vec::len).filter(|&n| n > 0).min().unwrap_or(0);
            let k = requested.unwrap_or(smallest);
            if let Some((c, m)) = members
                .iter()
                .enumerate()
                .find(|(_, m)| !m.is_empty() && m.len() < k)
            {
                return Err(EvalError::InsufficientSamples {
                    class: classes[c].clone(),
                    available: m.len(),
                    requested: k,
                });
            }
            Some(k)
        }
    };

    let trial_matrices: Vec<ConfusionMatrix> = (0..spec.trials)
        .into_par_iter()
        .map(|t| {
            let mut cm = ConfusionMatrix::new(classes.clone());
            match per_class_n {
                None => {
                    for (&truth, &pred) in truths.iter().zip(&predictions) {
                        cm.record(truth, pred);
                    }
                }
                Some(k) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(t as u64));
                    for m in members.iter().filter(|m| !m.is_empty()) {
                        for pick in index::sample(&mut rng, m.len(), k) {
                            let i = m[pick];
                            cm.record(truths[i], predictions[i]);
                        }
                    }
                }
            }
            cm
        })
        .collect();

    let mut pooled = ConfusionMatrix::new(classes.clone());
    for cm in &trial_matrices {
        for (dst, src) in pooled.counts.iter_mut().zip(&cm.counts) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    }
    let trials = spec.trials as f64;
    pooled
        .counts
        .iter_mut()
        .for_each(|row| row.iter_mut().for_each(|c| *c /= trials));

    let per_class = (0..classes.len())
        .map(|c| {
            if members[c].is_empty() {
                return None;
            }
            let accs: Vec<f64> = trial_matrices
                .iter()
                .map(|cm| cm.class_accuracy()[c].unwrap_or(0.0))
                .collect();
            Some(AccuracyStats::from_values(&accs))
        })
        .collect();
    let overall: Vec<f64> = trial_matrices.iter().map(ConfusionMatrix::accuracy).collect();
    let samples_per_trial = trial_matrices[0].total() as usize;

    let spec_text = format!("trials={} sampling={:?} seed={}", spec.trials, spec.sampling, spec.seed);
    let fp = fingerprint(&[
        &predictor.identity(),
        &encoder_bytes(&test_set.encoder),
        spec_text.as_bytes(),
        spec.context.as_bytes(),
    ]);

    Ok(ClassificationReport {
        class_names: classes,
        confusion: pooled,
        per_class,
        overall: AccuracyStats::from_values(&overall),
        trials: spec.trials,
        samples_per_trial,
        wall_clock_secs,
        per_packet_secs: wall_clock_secs / test_set.len() as f64,
        fingerprint: fp,
    })
}

fn fmt_value(v: f64) -> String {
    format!("{v:.6}")
}

type StatRow = (&'static str, fn(&AccuracyStats) -> f64);

const STAT_ROWS: [StatRow; 3] = [
    ("Maximum", |s| s.max),
    ("Average", |s| s.mean),
    ("Minimum", |s| s.min),
];

impl ClassificationReport {
    /// Flat CSV. Wall-clock figures are left out so reruns compare equal.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# report evaluate");
        let _ = writeln!(out, "# fingerprint {}", self.fingerprint);
        let _ = writeln!(out, "# trials {}", self.trials);
        let _ = writeln!(out, "# samples_per_trial {}", self.samples_per_trial);
        out.push_str("section,row,col,value\n");
        for (row, get) in STAT_ROWS {
            for (name, stats) in self.class_names.iter().zip(&self.per_class) {
                if let Some(s) = stats {
                    let _ = writeln!(out, "accuracy,{row},{name},{}", fmt_value(get(s)));
                }
            }
            let _ = writeln!(out, "accuracy,{row},overall,{}", fmt_value(get(&self.overall)));
        }
        for (i, truth) in self.class_names.iter().enumerate() {
            for (j, pred) in self.class_names.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "confusion,{truth},{pred},{}",
                    fmt_value(self.confusion.counts[i][j])
                );
            }
        }
        out
    }

    /// Max/average/min accuracy table followed by the mean confusion matrix.
    pub fn to_text(&self) -> String {
        let present: Vec<(usize, &AccuracyStats)> = self
            .per_class
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|s| (i, s)))
            .collect();
        let width = self
            .class_names
            .iter()
            .map(String::len)
            .max()
            .unwrap_or(0)
            .max(9);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "fingerprint {}  trials {}  samples/trial {}",
            self.fingerprint, self.trials, self.samples_per_trial
        );
        let _ = write!(out, "{:<10}", "");
        for (i, _) in &present {
            let _ = write!(out, " {:>width$}", self.class_names[*i]);
        }
        let _ = writeln!(out, " {:>width$}", "overall");
        for (label, get) in STAT_ROWS {
            let _ = write!(out, "{label:<10}");
            for (_, s) in &present {
                let _ = write!(out, " {:>width$.4}", get(s));
            }
            let _ = writeln!(out, " {:>width$.4}", get(&self.overall));
        }
        let _ = writeln!(out, "\nmean confusion (rows = true, cols = predicted)");
        let _ = write!(out, "{:<width$}", "");
        for name in &self.class_names {
            let _ = write!(out, " {name:>width$}");
        }
        out.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.confusion.counts) {
            let _ = write!(out, "{name:<width$}");
            for v in row {
                let _ = write!(out, " {v:>width$.1}");
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "\nclassification pass: {:.3} s total, {:.1} us/packet",
            self.wall_clock_secs,
            self.per_packet_secs * 1e6
        );
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PassTiming {
    /// Mean seconds per pass to build the model's input matrices.
    pub encode_secs: f64,
    /// Mean seconds per pass of inference alone.
    pub inference_secs: f64,
}

impl PassTiming {
    pub fn total(&self, include_encode: bool) -> f64 {
        self.inference_secs + if include_encode { self.encode_secs } else { 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingReport {
    pub packets: usize,
    pub repetitions: usize,
    pub include_encode: bool,
    pub full: PassTiming,
    pub reduced: PassTiming,
}

impl TimingReport {
    /// `1 - t_reduced / t_full`.
    pub fn saving(&self) -> f64 {
        1.0 - self.reduced.total(self.include_encode) / self.full.total(self.include_encode)
    }

    pub fn to_text(&self) -> String {
        let per = |t: f64| t / self.packets as f64 * 1e6;
        format!(
            "packets {}  repetitions {}  include_encode {}\n\
             {:<8} {:>12} {:>12} {:>12}\n\
             {:<8} {:>12.4} {:>12.4} {:>12.2}\n\
             {:<8} {:>12.4} {:>12.4} {:>12.2}\n\
             saving {:.1}%\n",
            self.packets,
            self.repetitions,
            self.include_encode,
            "model",
            "encode s",
            "infer s",
            "us/packet",
            "full",
            self.full.encode_secs,
            self.full.inference_secs,
            per(self.full.total(self.include_encode)),
            "reduced",
            self.reduced.encode_secs,
            self.reduced.inference_secs,
            per(self.reduced.total(self.include_encode)),
            self.saving() * 100.0
        )
    }
}

fn time_model(
    model: &CnnModel,
    packets: &[RawPacket],
    encoder: &EncoderConfig,
) -> Result<(f64, f64), CnnError> {
    let t0 = Instant::now();
    let inputs: Vec<ByteMatrix> = packets
        .iter()
        .map(|p| input_for(model, &encode_full(p, encoder)))
        .collect::<Result<_, _>>()?;
    let encode = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    for m in &inputs {
        black_box(model.predict(black_box(m))?);
    }
    Ok((encode, t1.elapsed().as_secs_f64()))
}

/// Classifies every packet with each model, sequentially on one thread,
/// `repetitions` times, and reports mean pass times. Encoding is timed
/// apart from inference.
pub fn bench_timing(
    full_model: &CnnModel,
    reduced_model: &CnnModel,
    packets: &[RawPacket],
    encoder: &EncoderConfig,
    repetitions: usize,
    include_encode: bool,
) -> Result<TimingReport, EvalError> {
    if packets.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let reps = repetitions.max(1);
    let mut full = PassTiming::default();
    let mut reduced = PassTiming::default();
    for _ in 0..reps {
        let (e, i) = time_model(full_model, packets, encoder)?;
        full.encode_secs += e;
        full.inference_secs += i;
        let (e, i) = time_model(reduced_model, packets, encoder)?;
        reduced.encode_secs += e;
        reduced.inference_secs += i;
    }
    for t in [&mut full, &mut reduced] {
        t.encode_secs /= reps as f64;
        t.inference_secs /= reps as f64;
    }
    Ok(TimingReport {
        packets: packets.len(),
        repetitions: reps,
        include_encode,
        full,
        reduced,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppRow {
    pub application: String,
    pub samples: usize,
    pub full_accuracy: f64,
    pub reduced_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppComparison {
    pub full_label: String,
    pub reduced_label: String,
    pub rows: Vec<AppRow>,
    pub warnings: Vec<String>,
    pub fingerprint: String,
}

/// Per-application accuracy of a full-size single-service model next to a
/// reduced-size model over all applications, on that service's test packets.
pub fn compare_app_level(
    full_service_model: &CnnModel,
    reduced_all_model: &CnnModel,
    test_set: &EncodedDataset,
) -> Result<AppComparison, EvalError> {
    for app in &full_service_model.class_names {
        if !reduced_all_model.class_names.contains(app) {
            return Err(EvalError::ClassMismatch(format!(
                "`{app}` is missing from the reduced model's classes"
            )));
        }
    }
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for (full_idx, app) in full_service_model.class_names.iter().enumerate() {
        let reduced_idx = reduced_all_model
            .class_names
            .iter()
            .position(|c| c == app)
            .expect("checked above");
        let Some(label) = test_set.class_index(app) else {
            warnings.push(format!("no test packets for `{app}`; row omitted"));
            continue;
        };
        let matrices: Vec<&ByteMatrix> = test_set
            .samples
            .iter()
            .filter(|s| s.label == label)
            .map(|s| &s.matrix)
            .collect();
        if matrices.is_empty() {
            warnings.push(format!("no test packets for `{app}`; row omitted"));
            continue;
        }
        let hits = |model: &CnnModel, want: usize| -> Result<usize, EvalError> {
            let preds: Vec<usize> = matrices
                .par_iter()
                .map(|m| model.predict_full(m))
                .collect::<Result<_, _>>()?;
            Ok(preds.into_iter().filter(|&p| p == want).count())
        };
        let n = matrices.len() as f64;
        rows.push(AppRow {
            application: app.clone(),
            samples: matrices.len(),
            full_accuracy: hits(full_service_model, full_idx)? as f64 / n,
            reduced_accuracy: hits(reduced_all_model, reduced_idx)? as f64 / n,
        });
    }
    let fp = fingerprint(&[
        &model_to_bytes(full_service_model),
        &model_to_bytes(reduced_all_model),
        &encoder_bytes(&test_set.encoder),
    ]);
    Ok(AppComparison {
        full_label: format!("full_{}class", full_service_model.num_classes()),
        reduced_label: format!("reduced_{}class", reduced_all_model.num_classes()),
        rows,
        warnings,
        fingerprint: fp,
    })
}

impl AppComparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# report compare-app");
        let _ = writeln!(out, "# fingerprint {}", self.fingerprint);
        out.push_str("section,row,col,value\n");
        for r in &self.rows {
            let _ = writeln!(out, "app_accuracy,{},{},{}", r.application, self.full_label, fmt_value(r.full_accuracy));
            let _ = writeln!(out, "app_accuracy,{},{},{}", r.application, self.reduced_label, fmt_value(r.reduced_accuracy));
            let _ = writeln!(out, "app_samples,{},count,{}", r.application, r.samples);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<16} {:>8} {:>16} {:>16}\n",
            "application", "packets", self.full_label, self.reduced_label
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<16} {:>8} {:>16.4} {:>16.4}",
                r.application, r.samples, r.full_accuracy, r.reduced_accuracy
            );
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}
