use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use decamel::camel::CamelConfig;
use decamel::dataset::{generate_synthetic, load_dataset, save_dataset, Dataset, SyntheticConfig};
use decamel::decamel::DecamelConfig;
use decamel::extractor::FeatureExtractor;
use decamel::eval::{embed_dataset, pca_project_2d, run_protocol, ProtocolOptions};
use decamel::features::ViewFeatures;
use decamel::persist::{load_model, loss_trace_csv, projection_csv, save_model};
use decamel::pipeline::{train, Model, TrainOptions};
use decamel::{Error, Result};

use crate::config::FileConfig;
use crate::{Cli, Command, EvalArgs, ExportArgs, FreezeArg, GenerateArgs, TrainArgs};

/// Flag value, else file value, else default.
fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn required_path(flag: Option<PathBuf>, file: Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or(file).ok_or_else(|| Error::Config(format!("--{name} is required")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.display().to_string(), source: e })
}

pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let seed = cli.seed.or(file.seed);
    let require_seed = || seed.ok_or_else(|| Error::Config("a seed is required (--seed or `seed` in the config file)".into()));
    match cli.command {
        Command::Generate(args) => generate(args, &file, require_seed()?, cli.out),
        Command::Train(args) => train_cmd(args, file, require_seed()?, cli.out),
        Command::Eval(args) => eval(args, file, require_seed()?, cli.out),
        Command::ExportProjection(args) => export(args, file, cli.out),
    }
}

fn generate(args: GenerateArgs, file: &FileConfig, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let f = &file.generate;
    let d = SyntheticConfig::default();
    let config = SyntheticConfig {
        num_identities: pick(args.identities, f.identities, d.num_identities),
        num_views: pick(args.views, f.views, d.num_views),
        images_per_identity_per_view: pick(args.images, f.images, d.images_per_identity_per_view),
        dim: pick(args.dim, f.dim, d.dim),
        identity_spread: pick(args.spread, f.spread, d.identity_spread),
        within_identity_noise: pick(args.noise, f.noise, d.within_identity_noise),
        view_distortion_strength: pick(args.distortion, f.distortion, d.view_distortion_strength),
        view_families: args.families.or(f.families),
        seed,
    };
    config.validate()?;
    let out = pick(out, f.out.clone(), PathBuf::from("dataset.csv"));
    let dataset = generate_synthetic(&config)?;
    save_dataset(&dataset, &out)?;
    println!("wrote {} samples to {}", dataset.len(), out.display());
    Ok(())
}

fn train_options(args: &TrainArgs, file: &FileConfig, seed: u64) -> TrainOptions {
    let f = &file.train;
    let defaults = TrainOptions::default();
    let (c, dc) = (&defaults.camel, &defaults.decamel);
    let freeze = args.freeze.or(f.freeze);
    TrainOptions {
        camel: CamelConfig {
            lambda: pick(args.lambda, f.lambda, c.lambda),
            k: pick(args.k, f.k, c.k),
            target_dim: args.target_dim.or(f.target_dim),
            max_alternations: pick(args.max_alternations, f.max_alternations, c.max_alternations),
            ..c.clone()
        },
        decamel: DecamelConfig {
            gamma: pick(args.gamma, f.gamma, dc.gamma),
            iterations: pick(args.iterations, f.iterations, dc.iterations),
            learning_rate: pick(args.learning_rate, f.learning_rate, dc.learning_rate),
            batch_size: pick(args.batch_size, f.batch_size, dc.batch_size),
            refresh_period: pick(args.refresh_period, f.refresh_period, dc.refresh_period),
            freeze_metric: freeze == Some(FreezeArg::Metric),
            freeze_extractor: freeze == Some(FreezeArg::Extractor),
            ..dc.clone()
        },
        extractor: pick(args.extractor, f.extractor, defaults.extractor),
        hidden: pick(args.hidden, f.hidden, defaults.hidden),
        init: pick(args.init, f.init, defaults.init),
        symmetric: args.symmetric || f.symmetric.unwrap_or(false),
        view_clusters: args.view_clusters.or(f.view_clusters),
        ivc: args.ivc || f.ivc.unwrap_or(false),
        labels_fraction: pick(args.labels_fraction, f.labels_fraction, defaults.labels_fraction),
        seed,
    }
}

fn train_cmd(args: TrainArgs, file: FileConfig, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let options = train_options(&args, &file, seed);
    options.validate()?;
    let data = required_path(args.data, file.train.data, "data")?;
    let out = pick(out, file.train.out, PathBuf::from("model.json"));
    let loss_out = args.loss_out.or(file.train.loss_out).unwrap_or_else(|| out.with_extension("loss.csv"));

    let dataset = load_dataset(&data)?;
    let model = train(&dataset, &options)?;
    save_model(&model, &out)?;
    write_text(&loss_out, &loss_trace_csv(&model.trained.loss_trace))?;
    println!(
        "trained {} transforms on {} samples; wrote {} and {}",
        model.trained.metric.num_views(),
        dataset.len(),
        out.display(),
        loss_out.display()
    );
    Ok(())
}

fn load_inputs(model: &Path, data: &Path) -> Result<(Model, Dataset)> {
    let model = load_model(model)?;
    let dataset = load_dataset(data)?;
    let expected = model.trained.extractor.input_dim();
    if expected != dataset.dim() {
        return Err(Error::DimensionMismatch { expected, got: dataset.dim() });
    }
    Ok((model, dataset))
}

fn eval(args: EvalArgs, file: FileConfig, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let f = file.eval;
    let defaults = ProtocolOptions::default();
    let unseen = if args.unseen_views.is_empty() { f.unseen_views.unwrap_or_default() } else { args.unseen_views };
    let mut options = ProtocolOptions {
        mode: pick(args.mode, f.mode, defaults.mode),
        repetitions: pick(args.repetitions, f.repetitions, defaults.repetitions),
        max_rank: pick(args.max_rank, f.max_rank, defaults.max_rank),
        seed,
        probe_views: None,
    };
    if options.repetitions == 0 || options.max_rank == 0 {
        return Err(Error::Config("repetitions and max_rank must be at least 1".into()));
    }
    let model_path = required_path(args.model, f.model, "model")?;
    let data_path = required_path(args.data, f.data, "data")?;
    let out = pick(out, f.out, PathBuf::from("report.json"));

    let (mut model, dataset) = load_inputs(&model_path, &data_path)?;
    if !unseen.is_empty() {
        if let Some(&v) = unseen.iter().find(|&&v| v == 0 || v > dataset.num_views()) {
            return Err(Error::Argument(format!("unseen view {v} is not in the dataset")));
        }
        let zero_based: BTreeSet<usize> = unseen.iter().map(|v| v - 1).collect();
        model.assign_unseen_views(&dataset, &zero_based.iter().copied().collect::<Vec<_>>())?;
        options.probe_views = Some(zero_based);
    }
    let report = run_protocol(&dataset, &model, &options)?;
    write_text(&out, &report.to_json())?;
    println!(
        "rank-1 {:.4}, mAP {:.4}, S {:.4} over {} probes; wrote {}",
        report.rank1(),
        report.map,
        report.s_value,
        report.num_probes,
        out.display()
    );
    Ok(())
}

fn export(args: ExportArgs, file: FileConfig, out: Option<PathBuf>) -> Result<()> {
    let f = file.export;
    let model_path = required_path(args.model, f.model, "model")?;
    let data_path = required_path(args.data, f.data, "data")?;
    let out = pick(out, f.out, PathBuf::from("projection"));

    let (model, dataset) = load_inputs(&model_path, &data_path)?;
    let raw = ViewFeatures::from_dataset(&dataset);
    let shared = embed_dataset(&dataset, &model)?;
    let views = dataset.views();
    let identities = dataset.identities();
    fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.display().to_string(), source: e })?;
    for (name, points) in [("raw.csv", raw.points()), ("shared.csv", &shared[..])] {
        let projection = pca_project_2d(points)?;
        write_text(&out.join(name), &projection_csv(&projection, &views, &identities))?;
    }
    println!("wrote raw.csv and shared.csv for {} samples to {}", dataset.len(), out.display());
    Ok(())
}
