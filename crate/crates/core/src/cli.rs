//! `pktclass` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::dataset::EncodedDataset;
use crate::encoder::EncoderConfig;
use crate::eval::{bench_timing, compare_app_level, evaluate, EvalSpec, Sampling};
use crate::hierarchy::{Catalog, HierarchicalClassifier};
use crate::model_io::{load_model, save_model};
use crate::pcap::{self, load_manifest, parse_pcap, LabeledDataset, SplitSpec};
use crate::synthetic::SyntheticSpec;
use crate::train::{train_with_progress, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "pktclass", version, about = "Hierarchical CNN classification of encrypted packets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse the captures listed in a manifest and write a packed dataset.
    Ingest(IngestArgs),
    /// Train a model on the training side of a dataset split.
    Train(TrainArgs),
    /// Classify every packet of a capture with a service model and optional application models.
    Classify(ClassifyArgs),
    /// Repeated balanced evaluation on the test side of a dataset split.
    Evaluate(EvaluateArgs),
    /// Time full-size against reduced-size inference.
    Bench(BenchArgs),
    /// Per-application accuracy of a full-size service model against a reduced-size all-application model.
    CompareApp(CompareAppArgs),
    /// Write synthetic captures and a manifest for them.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct EncoderArgs {
    /// Bytes kept from each packet.
    #[arg(long, default_value_t = 1500)]
    target_bytes: usize,
    #[arg(long, default_value_t = 39)]
    full_side: usize,
    #[arg(long, default_value_t = 20)]
    reduced_side: usize,
    /// Skip the link-layer header before encoding.
    #[arg(long)]
    strip_link_layer: bool,
}

impl EncoderArgs {
    fn config(&self) -> Result<EncoderConfig> {
        let c = EncoderConfig {
            target_bytes: self.target_bytes,
            full_side: self.full_side,
            reduced_side: self.reduced_side,
            strip_link_layer: self.strip_link_layer,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
struct SplitArgs {
    /// Share of each class used for training.
    #[arg(long, default_value_t = 0.4)]
    train_fraction: f64,
    /// Seed of the train/test split; defaults to --seed.
    #[arg(long)]
    split_seed: Option<u64>,
}

impl SplitArgs {
    fn spec(&self, seed: u64) -> Result<SplitSpec> {
        Ok(SplitSpec::new(self.train_fraction, self.split_seed.unwrap_or(seed))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Size {
    Full,
    Reduced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Level {
    Application,
    Service,
}

#[derive(Debug, Args)]
struct LabelArgs {
    /// Catalog file; the bundled chat/video catalog is used when omitted.
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Classify applications (dataset labels) or their catalog services.
    #[arg(long, value_enum, default_value_t = Level::Application)]
    level: Level,
}

impl LabelArgs {
    fn catalog(&self) -> Result<Catalog> {
        match &self.catalog {
            Some(p) => Catalog::load(p).with_context(|| format!("loading catalog {}", p.display())),
            None => Ok(Catalog::builtin()),
        }
    }
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    encoder: EncoderArgs,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    filters: usize,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Size::Full)]
    size: Size,
    /// Restrict to the applications of one catalog service.
    #[arg(long)]
    service: Option<String>,
    /// Restrict to these applications (comma separated).
    #[arg(long, value_delimiter = ',')]
    classes: Vec<String>,
    #[command(flatten)]
    labels: LabelArgs,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Debug, Args)]
struct ClassifyArgs {
    #[arg(long)]
    service_model: PathBuf,
    /// `<service>=<model file>`; repeatable.
    #[arg(long = "app-model", value_parser = parse_assignment)]
    app_models: Vec<(String, PathBuf)>,
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long)]
    pcap: PathBuf,
    #[command(flatten)]
    encoder: EncoderArgs,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Model to evaluate; with --app-model it is the service model of a hierarchy.
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "app-model", value_parser = parse_assignment)]
    app_models: Vec<(String, PathBuf)>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Samples drawn per class in each trial; defaults to the smallest class.
    #[arg(long, conflicts_with = "all")]
    sample_per_class: Option<usize>,
    /// Classify the whole test side in every trial instead of balanced samples.
    #[arg(long)]
    all: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the CSV report here as well as printing the table.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    labels: LabelArgs,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    full: PathBuf,
    #[arg(long)]
    reduced: PathBuf,
    /// Captures to time, listed as for `ingest`; the test side of the split is used.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 3)]
    repetitions: usize,
    /// Count matrix encoding in the compared times.
    #[arg(long)]
    include_encode: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    split: SplitArgs,
    #[command(flatten)]
    encoder: EncoderArgs,
}

#[derive(Debug, Args)]
struct CompareAppArgs {
    /// Full-size model over one service's applications.
    #[arg(long)]
    full: PathBuf,
    /// Reduced-size model over all applications.
    #[arg(long)]
    reduced: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "class_a,class_b")]
    classes: Vec<String>,
    #[arg(long, default_value_t = 1000)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_assignment(s: &str) -> Result<(String, PathBuf), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected <service>=<path>, got `{s}`"))?;
    Ok((k.to_string(), PathBuf::from(v)))
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    EXIT_OK
                }
                _ => {
                    let _ = e.print();
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_DATA
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Ingest(a) => ingest(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Classify(a) => classify(a, out),
        Command::Evaluate(a) => evaluate_cmd(a, out),
        Command::Bench(a) => bench(a, out),
        Command::CompareApp(a) => compare_app(a, out),
        Command::Synth(a) => synth(a, out),
    }
}

fn ingest(a: IngestArgs, out: &mut dyn Write) -> Result<()> {
    let encoder = a.encoder.config()?;
    let raw = load_manifest(&a.manifest)
        .with_context(|| format!("reading manifest {}", a.manifest.display()))?;
    if raw.is_empty() {
        bail!("manifest {} yielded no packets", a.manifest.display());
    }
    let ds = EncodedDataset::encode(&raw, encoder);
    ds.save(&a.out)?;
    for (name, count) in raw.class_names.iter().zip(&raw.counts) {
        writeln!(out, "{name},{count}")?;
    }
    writeln!(out, "total,{}", raw.len())?;
    Ok(())
}

/// Applies the label view chosen on the command line: all applications,
/// catalog services, one service's applications, or an explicit list.
fn label_view(
    ds: &EncodedDataset,
    labels: &LabelArgs,
    service: Option<&str>,
    classes: &[String],
) -> Result<EncodedDataset> {
    let catalog = labels.catalog()?;
    let view = match labels.level {
        Level::Service => ds.relabel(&catalog.services, |app| {
            catalog.service_of(app).map(str::to_string)
        })?,
        Level::Application => ds.clone(),
    };
    let view = match service {
        Some(s) => {
            let apps: Vec<String> = catalog
                .applications_of(s)
                .filter(|a| view.class_index(a).is_some())
                .map(str::to_string)
                .collect();
            if apps.is_empty() {
                bail!("no dataset classes belong to service `{s}`");
            }
            view.restrict_to(&apps)?
        }
        None => view,
    };
    Ok(if classes.is_empty() {
        view
    } else {
        view.restrict_to(classes)?
    })
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let ds = EncodedDataset::load(&a.dataset)
        .with_context(|| format!("loading dataset {}", a.dataset.display()))?;
    let (train_side, _) = ds.split(&a.split.spec(a.seed)?)?;
    let mut set = label_view(&train_side, &a.labels, a.service.as_deref(), &a.classes)?;
    if a.size == Size::Reduced {
        set = set.reduced();
    }
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        learning_rate: a.lr,
        num_filters: a.filters,
        stride: a.stride,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let mut progress = Ok(());
    let (model, _) = train_with_progress(&set, &config, |s| {
        if progress.is_ok() {
            progress = writeln!(out, "{}", s.progress_line());
        }
    })?;
    progress?;
    save_model(&model, &a.out)?;
    Ok(())
}

fn load_app_models(assignments: &[(String, PathBuf)]) -> Result<BTreeMap<String, crate::cnn::CnnModel>> {
    assignments
        .iter()
        .map(|(service, path)| {
            let m = load_model(path).with_context(|| format!("loading {}", path.display()))?;
            Ok((service.clone(), m))
        })
        .collect()
}

fn classify(a: ClassifyArgs, out: &mut dyn Write) -> Result<()> {
    let catalog = match &a.catalog {
        Some(p) => Catalog::load(p)?,
        None => Catalog::builtin(),
    };
    let service_model = load_model(&a.service_model)?;
    let h = HierarchicalClassifier::new(
        catalog,
        service_model,
        load_app_models(&a.app_models)?,
        a.encoder.config()?,
    )?;
    let packets = parse_pcap(&a.pcap, "unlabeled")?.packets;
    let batch = h.classify_batch(&packets);
    writeln!(out, "index,service,service_prob,application,application_prob,dscp")?;
    for (i, v) in batch.verdicts.iter().enumerate() {
        match v {
            Ok(v) => {
                let (app, p) = v
                    .application
                    .as_ref()
                    .map_or(("-".to_string(), String::from("-")), |d| {
                        (d.name.clone(), format!("{:.6}", d.probability))
                    });
                writeln!(
                    out,
                    "{i},{},{:.6},{app},{p},{}",
                    v.service.name, v.service.probability, v.dscp
                )?;
            }
            Err(e) => eprintln!("packet {i}: {e}"),
        }
    }
    eprintln!(
        "classified {} packets in {:.3} s",
        packets.len(),
        batch.elapsed.as_secs_f64()
    );
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_model(&a.model)?;
    let ds = EncodedDataset::load(&a.dataset)?;
    let split = a.split.spec(a.seed)?;
    let (_, test) = ds.split(&split)?;
    let spec = EvalSpec {
        trials: a.trials,
        sampling: if a.all {
            Sampling::All
        } else {
            Sampling::Balanced(a.sample_per_class)
        },
        seed: a.seed,
        context: format!(
            "train_fraction={} split_seed={} level={:?}",
            split.train_fraction, split.seed, a.labels.level
        ),
    };
    let report = if a.app_models.is_empty() {
        let view = label_view(&test, &a.labels, None, &[])?;
        let view = view.restrict_to(&model.class_names)?;
        evaluate(&model, &view, &spec)?
    } else {
        let h = HierarchicalClassifier::new(
            a.labels.catalog()?,
            model,
            load_app_models(&a.app_models)?,
            ds.encoder,
        )?;
        evaluate(&h, &test, &spec)?
    };
    if let Some(path) = &a.csv {
        fs::write(path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    write!(out, "{}", report.to_text())?;
    Ok(())
}

fn bench(a: BenchArgs, out: &mut dyn Write) -> Result<()> {
    let full = load_model(&a.full)?;
    let reduced = load_model(&a.reduced)?;
    let raw = load_manifest(&a.manifest)?;
    let packets = test_packets(&raw, &a.split.spec(a.seed)?)?;
    let report = bench_timing(
        &full,
        &reduced,
        &packets,
        &a.encoder.config()?,
        a.repetitions,
        a.include_encode,
    )?;
    write!(out, "{}", report.to_text())?;
    Ok(())
}

fn test_packets(raw: &LabeledDataset, spec: &SplitSpec) -> Result<Vec<pcap::RawPacket>> {
    Ok(pcap::split(raw, spec)?.test.packets)
}

fn compare_app(a: CompareAppArgs, out: &mut dyn Write) -> Result<()> {
    let full = load_model(&a.full)?;
    let reduced = load_model(&a.reduced)?;
    let ds = EncodedDataset::load(&a.dataset)?;
    let (_, test) = ds.split(&a.split.spec(a.seed)?)?;
    let cmp = compare_app_level(&full, &reduced, &test)?;
    for w in &cmp.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(path) = &a.csv {
        fs::write(path, cmp.to_csv())?;
    }
    write!(out, "{}", cmp.to_text())?;
    Ok(())
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<()> {
    if a.classes.is_empty() || a.per_class == 0 {
        return Err(anyhow!("need at least one class and one packet per class"));
    }
    fs::create_dir_all(&a.out_dir)?;
    let spec = SyntheticSpec {
        class_names: a.classes.clone(),
        per_class: a.per_class,
        seed: a.seed,
        ..SyntheticSpec::two_class(a.per_class, a.seed)
    };
    let mut manifest = String::from("# synthetic captures\n");
    for (c, name) in a.classes.iter().enumerate() {
        let file = format!("{name}.pcap");
        write_capture(&a.out_dir.join(&file), &spec.class_packets(c))?;
        manifest.push_str(&format!("{file},{name}\n"));
    }
    let manifest_path = a.out_dir.join("manifest.txt");
    fs::write(&manifest_path, manifest)?;
    writeln!(out, "{}", manifest_path.display())?;
    Ok(())
}

fn write_capture(path: &Path, packets: &[pcap::RawPacket]) -> Result<()> {
    let mut buf = Vec::new();
    pcap::write_pcap(&mut buf, packets, pcap::linktype::RAW, false)?;
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}
