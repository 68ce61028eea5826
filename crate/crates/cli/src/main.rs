mod config;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use basisconv::basis::{make_baseline_basis, BaselineKind, Basis};
use basisconv::data::{
    cifar_files, load_cifar10, load_mnist, mnist_files, resolve_cache_dir, split_off, subset, LabeledImageSet, Split,
};
use basisconv::equivariance::{per_angle_csv, robustness_csv, robustness_suite, rotation_sweep, sweep_csv, sweep_svg};
use basisconv::group::{RotationIndex, RotationMethod};
use basisconv::nn::{Model, ModelSpec, GROUP_WIDTHS, TRANSLATIONAL_WIDTHS};
use basisconv::pretrain::{pretrain, write_loss_csv, LossWeights, PretrainConfig, RecScale};
use basisconv::train::{evaluate, train, write_confusion_csv, Augmentation, RotationAugment, TrainConfig};
use basisconv::verify::{format_table, run_all};
use basisconv_tensor::Tensor;
use clap::{Args, Parser, Subcommand, ValueEnum};

use manifest::Manifest;

#[derive(Parser)]
#[command(name = "basisconv", version, about = "Group convolutions with learned filter bases")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a rotated filter basis from images.
    PretrainBasis(PretrainArgs),
    /// Train a classifier.
    Train(TrainArgs),
    /// Test error of a checkpoint on rotated test images.
    EvalRotations(EvalRotationsArgs),
    /// Per-layer activation equivariance of a checkpoint.
    EvalActivations(EvalActivationsArgs),
    /// Render a basis file and report its orthogonality.
    InspectBasis(InspectArgs),
    /// Run the property suites and print a pass/fail table.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Dataset {
    Mnist,
    Cifar10,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Kind {
    Group,
    Translational,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Baseline {
    Random,
    Gaussian,
    Bilinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Args, Clone)]
struct DataArgs {
    #[arg(long, value_enum, default_value = "mnist")]
    dataset: Dataset,
    /// Directory with the IDX or CIFAR-10 binary files.
    #[arg(long, default_value = "data/mnist")]
    data_dir: PathBuf,
    /// Parsed-dataset cache; falls back to $BASISCONV_CACHE_DIR.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Seed of the stratified training subset.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Training images drawn from the train split (all when absent).
    #[arg(long)]
    train_images: Option<usize>,
    /// Evaluate on train-split images outside the training subset instead of the test split.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", default_value_t = false)]
    holdout: bool,
    /// Evaluation images, a stratified subset of the evaluation pool.
    #[arg(long)]
    test_images: Option<usize>,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "group")]
    model: Kind,
    /// Two block widths "a,b"; the paper widths when absent.
    #[arg(long)]
    widths: Option<String>,
    #[arg(long, default_value_t = 8)]
    order: usize,
    /// Basis file for group models.
    #[arg(long)]
    basis: Option<PathBuf>,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct PretrainArgs {
    /// key=value file; flags on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    crop_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    w_equiv: Option<f64>,
    #[arg(long)]
    w_orth: Option<f64>,
    #[arg(long)]
    w_rec: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    partial: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    sum_all_pairs: Option<bool>,
    /// sum or mean over basis elements in the reconstruction.
    #[arg(long)]
    rec_scale: Option<String>,
    /// gaussian or bilinear rotation of images inside the losses.
    #[arg(long)]
    interpolation: Option<RotationMethod>,
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
    /// Build a handcrafted basis instead of learning one.
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    /// Basis whose orientation 0 seeds an interpolated baseline.
    #[arg(long)]
    source: Option<PathBuf>,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    flip: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    normalize: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    translate: Option<bool>,
    /// none, 90, 45 or full.
    #[arg(long)]
    rotation: Option<RotationAugment>,
    #[arg(long)]
    rotation_method: Option<RotationMethod>,
    #[arg(long)]
    seed: Option<u64>,
    /// Seed of the weight initialization.
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
    /// Continue from a checkpoint; its basis must match --basis.
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    /// Refuse to train unless the basis has this fingerprint.
    #[arg(long)]
    basis_fingerprint: Option<String>,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct EvalRotationsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Comma-separated angles in degrees.
    #[arg(long, default_value = "0,45,90,135,180,225,270,315")]
    angles: String,
    /// Name of this model in the CSV; the model kind when absent.
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct EvalActivationsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Comma-separated rotation indices; all of them when absent.
    #[arg(long)]
    angles: Option<String>,
    #[arg(long, default_value = "gaussian")]
    method: RotationMethod,
    #[arg(long, default_value_t = 0.25)]
    crop_fraction: f64,
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct InspectArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    basis: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    zoom: usize,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct VerifyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// A failure with a short machine-readable kind.
struct Failure {
    kind: &'static str,
    message: String,
}

impl From<basisconv::Error> for Failure {
    fn from(e: basisconv::Error) -> Self {
        use basisconv::Error as E;
        let kind = match &e {
            E::Tensor(_) => "tensor",
            E::Io { .. } => "io",
            E::MissingFile(_) => "missing_file",
            E::BadMagic { .. } | E::VersionMismatch { .. } | E::ChecksumMismatch { .. } => "corrupt_file",
            E::Truncated { .. } | E::Format { .. } => "format",
            E::FingerprintMismatch { .. } => "fingerprint_mismatch",
            E::Divergence { .. } => "divergence",
            E::EmptySet | E::SubsetTooLarge { .. } => "dataset",
            _ => "invalid",
        };
        Failure { kind, message: e.to_string() }
    }
}

impl From<String> for Failure {
    fn from(message: String) -> Self {
        Failure { kind: "invalid", message }
    }
}

type Res<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let argv = match config::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error[config]: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(argv);
    let result = match cli.command {
        Command::PretrainBasis(a) => pretrain_basis(a),
        Command::Train(a) => train_cmd(a),
        Command::EvalRotations(a) => eval_rotations(a),
        Command::EvalActivations(a) => eval_activations(a),
        Command::InspectBasis(a) => inspect_basis(a),
        Command::Verify(a) => verify(a),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error[{}]: {}", f.kind, f.message);
            ExitCode::FAILURE
        }
    }
}

fn out_dir(dir: &Path) -> Res<()> {
    fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()).into())
}

fn data_files(d: &DataArgs, split: Split) -> Vec<PathBuf> {
    match d.dataset {
        Dataset::Mnist => mnist_files(split).iter().map(|f| d.data_dir.join(f)).collect(),
        Dataset::Cifar10 => cifar_files(split).iter().map(|f| d.data_dir.join(f)).collect(),
    }
}

fn load_split(d: &DataArgs, split: Split, m: &mut Manifest) -> Res<LabeledImageSet> {
    let cache = resolve_cache_dir(d.cache_dir.as_deref());
    let set = match d.dataset {
        Dataset::Mnist => load_mnist(&d.data_dir, split, cache.as_deref())?,
        Dataset::Cifar10 => load_cifar10(&d.data_dir, split, cache.as_deref())?,
    };
    for f in data_files(d, split) {
        m.input(&f)?;
    }
    Ok(set)
}

fn record_data(d: &DataArgs, m: &mut Manifest) {
    m.set("dataset", format!("{:?}", d.dataset).to_lowercase());
    m.set("data_dir", d.data_dir.display());
    m.set("data_seed", d.data_seed);
    m.set("holdout", d.holdout);
    if let Some(n) = d.train_images {
        m.set("train_images", n);
    }
    if let Some(n) = d.test_images {
        m.set("test_images", n);
    }
}

/// Training subset and the rest of the train split.
fn train_pool(d: &DataArgs, m: &mut Manifest) -> Res<(LabeledImageSet, Option<LabeledImageSet>)> {
    let all = load_split(d, Split::Train, m)?;
    match d.train_images {
        Some(n) if n < all.len() => {
            let (a, b) = split_off(&all, n, d.data_seed)?;
            Ok((a, Some(b)))
        }
        Some(n) if n > all.len() => Err(basisconv::Error::SubsetTooLarge { requested: n, available: all.len() }.into()),
        _ => Ok((all, None)),
    }
}

fn eval_pool(d: &DataArgs, m: &mut Manifest) -> Res<LabeledImageSet> {
    let pool = if d.holdout {
        train_pool(d, m)?.1.ok_or_else(|| "--holdout needs --train-images smaller than the train split".to_string())?
    } else {
        load_split(d, Split::Test, m)?
    };
    match d.test_images {
        Some(n) => Ok(subset(&pool, n, d.data_seed)?),
        None => Ok(pool),
    }
}

fn model_spec(a: &ModelArgs, in_channels: usize) -> Res<ModelSpec> {
    let widths = match &a.widths {
        Some(w) => {
            let v: Vec<usize> = w
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|e| format!("--widths {w:?}: {e}"))?;
            <[usize; 2]>::try_from(v).map_err(|_| format!("--widths needs two values, got {w:?}"))?
        }
        None if a.model == Kind::Group => GROUP_WIDTHS,
        None => TRANSLATIONAL_WIDTHS,
    };
    Ok(match a.model {
        Kind::Group => ModelSpec::group(in_channels, widths, 10, a.order),
        Kind::Translational => ModelSpec::translational(in_channels, widths, 10),
    })
}

fn record_model(a: &ModelArgs, spec: &ModelSpec, m: &mut Manifest) {
    m.set("model", format!("{:?}", a.model).to_lowercase());
    m.set("layers", format!("{:?}", spec.layers));
    m.set("architecture", spec.architecture_hash());
    m.set("order", a.order);
}

fn load_basis(a: &ModelArgs, m: &mut Manifest) -> Res<Option<Basis>> {
    match (&a.basis, a.model) {
        (Some(p), _) => {
            let b = Basis::load(p)?;
            m.input(p)?;
            m.set("basis", p.display());
            m.set("basis_fingerprint", b.fingerprint());
            Ok(Some(b))
        }
        (None, Kind::Group) => Err("group models need --basis".to_string().into()),
        (None, Kind::Translational) => Ok(None),
    }
}

fn in_channels(d: &DataArgs) -> usize {
    match d.dataset {
        Dataset::Mnist => 1,
        Dataset::Cifar10 => 3,
    }
}

fn load_model(a: &ModelArgs, d: &DataArgs, checkpoint: &Path, m: &mut Manifest) -> Res<Model<f32>> {
    let spec = model_spec(a, in_channels(d))?;
    record_model(a, &spec, m);
    let basis = load_basis(a, m)?;
    let mut model = Model::new(spec, basis.as_ref(), 0)?;
    model.load(checkpoint)?;
    m.input(checkpoint)?;
    m.set("checkpoint", checkpoint.display());
    Ok(model)
}

fn pretrain_basis(a: PretrainArgs) -> Res<ExitCode> {
    let mut m = Manifest::new("pretrain-basis");
    let d = PretrainConfig::default();
    let rec_scale = match a.rec_scale.as_deref() {
        None => d.rec_scale,
        Some("sum") => RecScale::Sum,
        Some("mean") => RecScale::Mean,
        Some(o) => return Err(format!("unknown --rec-scale {o:?} (sum, mean)").into()),
    };
    let cfg = PretrainConfig {
        order: a.order.unwrap_or(d.order),
        n: a.n.unwrap_or(d.n),
        k: a.k.unwrap_or(d.k),
        lr: a.lr.unwrap_or(d.lr),
        weight_decay: a.weight_decay.unwrap_or(d.weight_decay),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        epochs: a.epochs.unwrap_or(d.epochs),
        crop_fraction: a.crop_fraction.unwrap_or(d.crop_fraction),
        seed: a.seed.unwrap_or(d.seed),
        weights: LossWeights {
            equiv: a.w_equiv.unwrap_or(d.weights.equiv),
            orth: a.w_orth.unwrap_or(d.weights.orth),
            rec: a.w_rec.unwrap_or(d.weights.rec),
        },
        partial: a.partial.unwrap_or(d.partial),
        sum_all_pairs: a.sum_all_pairs.unwrap_or(d.sum_all_pairs),
        rec_scale,
        interpolation: a.interpolation.unwrap_or(d.interpolation),
    };
    cfg.validate()?;
    m.extend(cfg.key_values());
    out_dir(&a.out)?;
    let basis_path = a.out.join("basis.bcb");

    if let Some(kind) = a.baseline {
        m.set("baseline", format!("{kind:?}").to_lowercase());
        let zero = match &a.source {
            Some(p) => {
                let src = Basis::load(p)?;
                m.input(p)?;
                Some(Tensor::new([src.n(), src.k(), src.k()], src.slot(0).to_vec()).map_err(basisconv::Error::from)?)
            }
            None => None,
        };
        let kind = match kind {
            Baseline::Random => BaselineKind::Random,
            Baseline::Gaussian => BaselineKind::Interpolated(RotationMethod::Gaussian),
            Baseline::Bilinear => BaselineKind::Interpolated(RotationMethod::Bilinear),
        };
        let b = make_baseline_basis(kind, cfg.order, cfg.n, cfg.k, zero.as_ref(), cfg.seed)?;
        b.save(&basis_path)?;
        println!("basis {} fingerprint {}", basis_path.display(), b.fingerprint());
    } else {
        record_data(&a.data, &mut m);
        let set = train_pool(&a.data, &mut m)?.0;
        let corpus = set.luma();
        let t = Instant::now();
        let outcome = match a.precision {
            Precision::F32 => pretrain::<f32>(&corpus, &cfg)?,
            Precision::F64 => pretrain::<f64>(&corpus, &cfg)?,
        };
        m.set("precision", format!("{:?}", a.precision).to_lowercase());
        m.metrics.insert("seconds".into(), t.elapsed().as_secs_f64());
        if let Some(last) = outcome.log.last() {
            m.metrics.insert("final_L_equiv".into(), last.equiv);
            m.metrics.insert("final_L_orth".into(), last.orth);
            m.metrics.insert("final_L_rec".into(), last.rec);
        }
        outcome.basis.save(&basis_path)?;
        let csv = a.out.join("pretrain_loss.csv");
        let mut buf = Vec::new();
        write_loss_csv(&outcome.log, &mut buf).map_err(|e| e.to_string())?;
        fs::write(&csv, buf).map_err(|e| format!("{}: {e}", csv.display()))?;
        m.output(&csv)?;
        println!(
            "basis {} fingerprint {} ({} epochs, {:.1}s)",
            basis_path.display(),
            outcome.basis.fingerprint(),
            cfg.epochs,
            t.elapsed().as_secs_f64()
        );
    }
    m.output(&basis_path)?;
    m.write(&a.out)?;
    Ok(ExitCode::SUCCESS)
}

fn train_cmd(a: TrainArgs) -> Res<ExitCode> {
    let mut m = Manifest::new("train");
    let d = TrainConfig::default();
    let da = d.augmentation;
    let cfg = TrainConfig {
        epochs: a.epochs.unwrap_or(d.epochs),
        lr: a.lr.unwrap_or(d.lr),
        weight_decay: a.weight_decay.unwrap_or(d.weight_decay),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        augmentation: Augmentation {
            flip: a.flip.unwrap_or(da.flip),
            normalize: a.normalize.unwrap_or(da.normalize),
            translate: a.translate.unwrap_or(da.translate),
            rotation: a.rotation.unwrap_or(da.rotation),
            method: a.rotation_method.unwrap_or(da.method),
        },
        seed: a.seed.unwrap_or(d.seed),
    };
    m.extend(cfg.key_values());
    m.set("init_seed", a.init_seed);
    record_data(&a.data, &mut m);

    let spec = model_spec(&a.model, in_channels(&a.data))?;
    record_model(&a.model, &spec, &mut m);
    let basis = load_basis(&a.model, &mut m)?;
    if let (Some(want), Some(b)) = (&a.basis_fingerprint, &basis) {
        if *want != b.fingerprint() {
            return Err(basisconv::Error::FingerprintMismatch { expected: want.clone(), found: b.fingerprint() }.into());
        }
    }
    let mut model = Model::<f32>::new(spec, basis.as_ref(), a.init_seed)?;
    if let Some(p) = &a.init_checkpoint {
        model.load(p)?;
        m.input(p)?;
    }
    let (trainset, _) = train_pool(&a.data, &mut m)?;
    let test = if a.data.holdout || a.data.test_images.is_some() { Some(eval_pool(&a.data, &mut m)?) } else { None };

    let t = Instant::now();
    let log = train(&mut model, &trainset, test.as_ref(), &cfg, basis.as_ref())?;
    m.metrics.insert("seconds".into(), t.elapsed().as_secs_f64());
    out_dir(&a.out)?;
    let ckpt = a.out.join("checkpoint.bcm");
    model.save(&ckpt)?;
    m.output(&ckpt)?;
    let log_path = a.out.join("train_log.csv");
    log.write_csv(&log_path)?;
    m.output(&log_path)?;
    if let Some(last) = log.rows.last() {
        m.metrics.insert("train_accuracy".into(), last.train_acc);
        println!("epoch {} loss {:.4} train acc {:.4}", last.epoch, last.train_loss, last.train_acc);
    }
    if let Some(test) = &test {
        let e = evaluate(&mut model, test)?;
        let path = a.out.join("confusion.csv");
        let mut buf = Vec::new();
        write_confusion_csv(&e, &mut buf).map_err(|e| e.to_string())?;
        fs::write(&path, buf).map_err(|e| format!("{}: {e}", path.display()))?;
        m.output(&path)?;
        m.metrics.insert("test_accuracy".into(), e.accuracy);
        println!("test accuracy {:.4} on {} images", e.accuracy, test.len());
    }
    m.write(&a.out)?;
    Ok(ExitCode::SUCCESS)
}

fn eval_rotations(a: EvalRotationsArgs) -> Res<ExitCode> {
    let mut m = Manifest::new("eval-rotations");
    record_data(&a.data, &mut m);
    let mut model = load_model(&a.model, &a.data, &a.checkpoint, &mut m)?;
    let test = eval_pool(&a.data, &mut m)?;
    let angles: Vec<f64> = a
        .angles
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| format!("--angles {:?}: {e}", a.angles))?;
    let variant = a.variant.clone().unwrap_or_else(|| format!("{:?}", a.model.model).to_lowercase());
    m.set("angles", &a.angles);
    m.set("variant", &variant);
    let report = rotation_sweep(&mut model, &test.images, &test.labels, test.classes, &angles, &variant)?;
    out_dir(&a.out)?;
    let csv = a.out.join("rotation_sweep.csv");
    let svg = a.out.join("rotation_sweep.svg");
    fs::write(&csv, sweep_csv(&[&report])).map_err(|e| format!("{}: {e}", csv.display()))?;
    fs::write(&svg, sweep_svg(&[&report])).map_err(|e| format!("{}: {e}", svg.display()))?;
    m.output(&csv)?;
    m.output(&svg)?;
    for r in &report.rows {
        println!("{:>7.1} deg  error {:.4}", r.angle_deg, r.error);
        m.metrics.insert(format!("error_{}", r.angle_deg), r.error);
    }
    m.write(&a.out)?;
    Ok(ExitCode::SUCCESS)
}

fn eval_activations(a: EvalActivationsArgs) -> Res<ExitCode> {
    let mut m = Manifest::new("eval-activations");
    record_data(&a.data, &mut m);
    let model = load_model(&a.model, &a.data, &a.checkpoint, &mut m)?;
    let mut model: Model<f64> = model.cast();
    let test = eval_pool(&a.data, &mut m)?;
    let order = a.model.order;
    let angles: Vec<RotationIndex> = match &a.angles {
        Some(s) => s
            .split(',')
            .map(|v| v.trim().parse::<i64>().map(|r| RotationIndex::new(r, order)))
            .collect::<Result<_, _>>()
            .map_err(|e| format!("--angles {s:?}: {e}"))?,
        None => (0..order as i64).map(|r| RotationIndex::new(r, order)).collect(),
    };
    let variant = a.variant.clone().unwrap_or_else(|| format!("{:?}", a.model.model).to_lowercase());
    m.set("angles", angles.iter().map(|r| r.value().to_string()).collect::<Vec<_>>().join(","));
    m.set("method", a.method);
    m.set("crop_fraction", a.crop_fraction);
    m.set("variant", &variant);
    let images: Tensor<f64> = test.images.cast();
    let report = robustness_suite(&mut model, &images, &angles, a.method, a.crop_fraction, &variant)?;
    out_dir(&a.out)?;
    let layers = a.out.join("activation_equivariance.csv");
    let per_angle = a.out.join("activation_equivariance_per_angle.csv");
    fs::write(&layers, robustness_csv(&[&report])).map_err(|e| format!("{}: {e}", layers.display()))?;
    fs::write(&per_angle, per_angle_csv(&report)).map_err(|e| format!("{}: {e}", per_angle.display()))?;
    m.output(&layers)?;
    m.output(&per_angle)?;
    for r in &report.layers {
        println!("{:>2} {:<8} {:.6}", r.layer_index, r.layer_name, r.value);
        m.metrics.insert(r.layer_name.clone(), r.value);
    }
    m.write(&a.out)?;
    Ok(ExitCode::SUCCESS)
}

fn inspect_basis(a: InspectArgs) -> Res<ExitCode> {
    let mut m = Manifest::new("inspect-basis");
    let b = Basis::load(&a.basis)?;
    m.input(&a.basis)?;
    m.set("basis", a.basis.display());
    m.set("zoom", a.zoom);
    if a.zoom == 0 {
        return Err("--zoom must be positive".to_string().into());
    }
    println!("kind {:?}  |G| {}  N {}  k {}  fingerprint {}", b.kind(), b.order(), b.n(), b.k(), b.fingerprint());
    if !b.config_fingerprint().is_empty() {
        println!("pretraining config {}", b.config_fingerprint());
    }
    for r in 0..b.order() {
        let d = b.orthogonality_defect(RotationIndex::new(r as i64, b.order()));
        println!("orientation {r}: orthogonality defect {d:.6}");
        m.metrics.insert(format!("orthogonality_defect_{r}"), d);
    }
    out_dir(&a.out)?;
    let pgm = a.out.join("basis.pgm");
    fs::write(&pgm, b.render_pgm(a.zoom)).map_err(|e| format!("{}: {e}", pgm.display()))?;
    m.output(&pgm)?;
    println!("grid {} ({} rows x {} columns)", pgm.display(), b.order(), b.n());
    m.write(&a.out)?;
    Ok(ExitCode::SUCCESS)
}

fn verify(a: VerifyArgs) -> Res<ExitCode> {
    let checks = run_all(a.seed)?;
    print!("{}", format_table(&checks));
    let failed = checks.iter().filter(|c| !c.passed()).count();
    println!("{} checks, {failed} failed", checks.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
