//! Command-line frontend for the Sobel-gradient MLP pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

mod image_io;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use edge_mlp::dataset::{
    carve_validation_indices, load_dataset, stratified_split_indices, stratified_subset_indices,
    DatasetName, SplitSpec,
};
use edge_mlp::edge::{featurize, featurize_batch, read_feature_cache, write_feature_cache};
use edge_mlp::error::ErrorKind;
use edge_mlp::model::{init_model, MlpConfig};
use edge_mlp::store;
use edge_mlp::train::{
    default_class_names, evaluate, map_to_pgm, predict, saliency, train, weight_energy_map,
    TrainConfig,
};

const ENV_DATA_DIR: &str = "EDGEMLP_DATA_DIR";

#[derive(Parser)]
#[command(
    name = "edge-mlp",
    about = "Sobel-gradient MLP for handwritten character recognition",
    version
)]
struct Cli {
    /// Worker threads for the data-parallel kernels (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load IDX files, extract Sobel features, and write a feature cache.
    Prepare {
        /// Dataset name: mnist or emnist_letters.
        #[arg(long)]
        dataset: String,
        /// Directory holding the IDX files (falls back to $EDGEMLP_DATA_DIR).
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Output feature cache path.
        #[arg(long)]
        cache: PathBuf,
    },
    /// Split a feature cache, train the network, and evaluate on the test
    /// portion.
    Train(TrainArgs),
    /// Evaluate a saved model on a feature cache.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        /// Confusion-matrix CSV output path.
        #[arg(long, default_value = "confusion.csv")]
        out: PathBuf,
    },
    /// Classify a single 28x28 grayscale image (raw 784 bytes or PGM).
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Report model facts; with an image, dump saliency maps as PGMs.
    Inspect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: Option<PathBuf>,
        /// Directory for the attribution map dumps.
        #[arg(long, default_value = "edge-mlp-out")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Feature cache produced by `prepare`.
    #[arg(long)]
    cache: PathBuf,
    /// Output model path.
    #[arg(long, default_value = "edge-mlp-out/model.sgmlp")]
    model: PathBuf,
    /// Directory for the history log and confusion CSV.
    #[arg(long, default_value = "edge-mlp-out")]
    out: PathBuf,
    /// Seed for the split, initialization, shuffles, and dropout.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 50)]
    max_epochs: u32,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    /// Fast mode: stratified subsample of about this many images before
    /// splitting.
    #[arg(long)]
    subset: Option<usize>,
}

/// Die quietly when a downstream pipe closes (e.g. `edge-mlp inspect | head`)
/// instead of panicking on the failed write.
#[cfg(unix)]
fn reset_sigpipe() {
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn reset_sigpipe() {}

fn main() {
    reset_sigpipe();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // clap's own exit-code conventions differ; pin usage errors to 1
            let is_help = matches!(
                err.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = err.print();
            std::process::exit(if is_help { 0 } else { 1 });
        }
    };
    if let Some(threads) = cli.threads {
        if threads == 0 {
            eprintln!("error: --threads must be positive");
            std::process::exit(1);
        }
        if let Err(err) = edge_mlp::set_thread_count(threads) {
            eprintln!("error: {err}");
            std::process::exit(1);
        }
    }
    if let Err(err) = run(cli.command) {
        eprintln!("error: {err}");
        let mut source = std::error::Error::source(&err);
        while let Some(cause) = source {
            eprintln!("  caused by: {cause}");
            source = cause.source();
        }
        std::process::exit(match err.kind() {
            ErrorKind::Data => 2,
            ErrorKind::Numeric => 3,
            ErrorKind::Usage => 1,
        });
    }
}

fn run(command: Command) -> edge_mlp::Result<()> {
    match command {
        Command::Prepare {
            dataset,
            data_dir,
            cache,
        } => cmd_prepare(&dataset, data_dir, &cache),
        Command::Train(args) => cmd_train(&args),
        Command::Eval { model, cache, out } => cmd_eval(&model, &cache, &out),
        Command::Predict { model, image } => cmd_predict(&model, &image),
        Command::Inspect { model, image, out } => cmd_inspect(&model, image.as_deref(), &out),
    }
}

fn resolve_data_dir(flag: Option<PathBuf>) -> edge_mlp::Result<PathBuf> {
    if let Some(dir) = flag {
        return Ok(dir);
    }
    if let Some(dir) = std::env::var_os(ENV_DATA_DIR) {
        return Ok(PathBuf::from(dir));
    }
    Err(edge_mlp::Error::InvalidParameter(format!(
        "no data directory: pass --data-dir or set {ENV_DATA_DIR}"
    )))
}

fn cmd_prepare(dataset: &str, data_dir: Option<PathBuf>, cache: &Path) -> edge_mlp::Result<()> {
    let name = DatasetName::parse(dataset)?;
    let dir = resolve_data_dir(data_dir)?;
    let set = load_dataset(name, &dir)?;
    let features = featurize_batch(&set)?;
    write_feature_cache(cache, &features)?;
    println!(
        "dataset={} n={} d={} classes={} cache={}",
        name.as_str(),
        features.len(),
        features.features.cols(),
        features.class_count,
        cache.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> edge_mlp::Result<()> {
    let full = read_feature_cache(&args.cache)?;
    if full.is_empty() {
        return Err(edge_mlp::Error::EmptyDataset(format!(
            "feature cache {}",
            args.cache.display()
        )));
    }
    let working = match args.subset {
        Some(target) => {
            let per_class = (target / full.class_count).max(5);
            let indices =
                stratified_subset_indices(&full.labels, full.class_count, per_class, args.seed)?;
            println!("subset={} (about {} requested)", indices.len(), target);
            full.select(&indices)
        }
        None => full,
    };

    let spec = SplitSpec::standard(args.seed);
    let (train_idx, test_idx) =
        stratified_split_indices(&working.labels, working.class_count, &spec)?;
    let train_set = working.select(&train_idx);
    let test_set = working.select(&test_idx);
    let (fit_idx, val_idx) = carve_validation_indices(train_set.len(), &spec)?;
    let fit_set = train_set.select(&fit_idx);
    let val_set = train_set.select(&val_idx);
    println!(
        "split: fit={} val={} test={}",
        fit_set.len(),
        val_set.len(),
        test_set.len()
    );

    let dataset_name = match working.class_count {
        10 => "mnist",
        26 => "emnist_letters",
        _ => "custom",
    };
    let mut config = TrainConfig::new(args.seed, dataset_name);
    config.batch_size = args.batch_size;
    config.max_epochs = args.max_epochs;
    config.learning_rate = args.lr;

    let model = init_model(MlpConfig::for_classes(working.class_count), args.seed)?;

    fs::create_dir_all(&args.out)?;
    let history_path = args.out.join("history.jsonl");
    let mut history_file = fs::File::create(&history_path)?;
    // provenance header: every overridable hyperparameter of this run
    writeln!(
        history_file,
        "{{\"dataset\":\"{}\",\"seed\":{},\"batch_size\":{},\"max_epochs\":{},\"lr\":{},\"subset\":{}}}",
        dataset_name,
        args.seed,
        args.batch_size,
        args.max_epochs,
        args.lr,
        args.subset.map_or("null".to_string(), |s| s.to_string()),
    )?;

    let (trained, history) = train(model, &fit_set, &val_set, &config, |record| {
        println!(
            "epoch {:>3}: train_loss={:.4} train_acc={:.4} val_loss={:.4} val_acc={:.4} lr={:.2e} ({:.1}s)",
            record.epoch,
            record.train_loss,
            record.train_accuracy,
            record.val_loss,
            record.val_accuracy,
            record.lr,
            record.seconds
        );
        if let Err(err) =
            writeln!(history_file, "{}", record.to_json_line()).and_then(|_| history_file.flush())
        {
            eprintln!("warning: failed to append history: {err}");
        }
    })?;

    let (accuracy, confusion) = evaluate(&trained, &test_set)?;
    let names = default_class_names(trained.class_count());
    fs::write(args.out.join("confusion.csv"), confusion.to_csv(&names)?)?;
    store::save(&trained, &args.model)?;
    // the held-out test portion, so `eval` can reproduce this run's number
    write_feature_cache(&args.out.join("test.emfc"), &test_set)?;

    println!("epochs_run={}", history.records.len());
    println!("model={}", args.model.display());
    println!("history={}", history_path.display());
    println!("test_accuracy={accuracy:.4}");
    for (t, p, count) in confusion.top_confusions(10) {
        println!(
            "confusion: true={} predicted={} count={}",
            names[t], names[p], count
        );
    }
    Ok(())
}

fn cmd_eval(model_path: &Path, cache: &Path, out: &Path) -> edge_mlp::Result<()> {
    let model = store::load(model_path)?;
    let features = read_feature_cache(cache)?;
    if features.is_empty() {
        return Err(edge_mlp::Error::EmptyDataset(format!(
            "feature cache {}",
            cache.display()
        )));
    }
    if features.class_count != model.class_count() {
        return Err(edge_mlp::Error::ClassCountMismatch {
            model: model.class_count(),
            data: features.class_count,
        });
    }
    let (accuracy, confusion) = evaluate(&model, &features)?;
    let names = default_class_names(model.class_count());
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(out, confusion.to_csv(&names)?)?;
    println!("n={}", features.len());
    println!("accuracy={accuracy:.4}");
    println!("confusion_csv={}", out.display());
    Ok(())
}

fn cmd_predict(model_path: &Path, image_path: &Path) -> edge_mlp::Result<()> {
    let model = store::load(model_path)?;
    let pixels = image_io::read_image(image_path)?;
    let features = featurize(&pixels)?;
    let (label, probs) = predict(&model, &features.values)?;
    let names = default_class_names(model.class_count());
    println!("label={}", names[label]);
    for (name, p) in names.iter().zip(&probs) {
        println!("p[{name}]={p:.6}");
    }
    Ok(())
}

fn cmd_inspect(model_path: &Path, image: Option<&Path>, out: &Path) -> edge_mlp::Result<()> {
    let model = store::load(model_path)?;
    let config = &model.config;
    println!("trainable_params={}", config.param_count());
    println!(
        "dataset={} seed={} epochs_trained={}",
        if model.meta.dataset.is_empty() {
            "?"
        } else {
            &model.meta.dataset
        },
        model.meta.seed,
        model.meta.epochs_trained
    );
    let mut fan_in = config.input_dim;
    for (i, layer) in model.hidden.iter().enumerate() {
        println!(
            "hidden[{i}]: dense {}x{} + bias + bn(gamma,beta,moving) + relu + dropout({})",
            fan_in,
            layer.bias.len(),
            config.dropout_rates[i]
        );
        fan_in = layer.bias.len();
    }
    println!("output: dense {}x{} + bias", fan_in, config.output_dim);

    if let Some(image_path) = image {
        let pixels = image_io::read_image(image_path)?;
        let features = featurize(&pixels)?;
        let maps = saliency(&model, &features.values)?;
        let energy = weight_energy_map(&model)?;
        fs::create_dir_all(out)?;
        for (name, map) in [
            ("saliency_gx.pgm", &maps.gx),
            ("saliency_gy.pgm", &maps.gy),
            ("weight_energy_gx.pgm", &energy.gx),
            ("weight_energy_gy.pgm", &energy.gy),
        ] {
            let path = out.join(name);
            fs::write(&path, map_to_pgm(map)?)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
