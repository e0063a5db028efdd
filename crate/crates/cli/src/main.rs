use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use popviz::attacks::{bim, cw_l2, fgsm, AttackBudget, CwConfig};
use popviz::data::{ingest_cifar10, synth_dataset, Dataset, Split, SynthSpec};
use popviz::dimred::{project_with, Method, Mode, ProjectionConfig};
use popviz::experiment::{desk_budget, run_experiment_with_progress, ExperimentConfig};
use popviz::matrix_file::{load_matrix, save_matrix, write_atomic, Matrix};
use popviz::model::{filter_correct, train, Architecture, Classifier, TrainConfig};
use popviz::popn::pop_score;
use popviz::viz::{class_overlay_plot, PlotSpec};
use popviz::{Error, Result, Tensor};

/// Scores and plots how well 2-D projections of a classifier's penultimate
/// representations preserve its predictions on adversarial inputs.
#[derive(Parser)]
#[command(name = "popviz", version, arg_required_else_help = true)]
struct Cli {
    /// JSON configuration for the chosen subcommand; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stochastic stage of the subcommand.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Gaussian-blob image dataset.
    Synth(SynthArgs),
    /// Convert CIFAR-10 binary batches into dataset directories.
    Ingest(IngestArgs),
    /// Train the classifier on a dataset directory.
    Train(TrainArgs),
    /// Attack the correctly classified images of a dataset.
    Attack(AttackArgs),
    /// Extract penultimate-layer representations.
    Extract(ExtractArgs),
    /// Project clean and adversarial representations.
    Project(ProjectArgs),
    /// Compute the POP-N score of a projection pair.
    Score(ScoreArgs),
    /// Render a class overlay scatter plot as SVG.
    Plot(PlotArgs),
    /// Run the full train/attack/project/score/plot pipeline.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    separation: Option<f32>,
    #[arg(long)]
    noise: Option<f32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct IngestArgs {
    /// Directory holding data_batch_1..5.bin and test_batch.bin.
    #[arg(long)]
    cifar_dir: PathBuf,
    /// Output directory; receives `train/` and `test/`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output model directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackKind {
    Fgsm,
    Bim,
    Cw,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    attack: AttackKind,
    /// Output directory for images, labels, adversarial images,
    /// predictions, and the success mask.
    #[arg(long)]
    out: PathBuf,
    /// Attack every image, not only the correctly classified ones.
    #[arg(long)]
    all: bool,
    /// L-infinity budget in intensity units out of 255.
    #[arg(long)]
    epsilon_255: Option<f32>,
    /// BIM step in intensity units out of 255.
    #[arg(long)]
    alpha_255: Option<f32>,
    /// BIM or CW iteration count.
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    model: PathBuf,
    /// Images as a `[n, C, H, W]` matrix file.
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    method: Method,
    #[arg(long, default_value = "coupled")]
    mode: Mode,
    #[arg(long)]
    clean: PathBuf,
    #[arg(long)]
    adv: PathBuf,
    #[arg(long, default_value_t = 2)]
    dims: usize,
    #[arg(long)]
    out_clean: PathBuf,
    #[arg(long)]
    out_adv: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    clean: PathBuf,
    #[arg(long)]
    clean_labels: PathBuf,
    #[arg(long)]
    adv: PathBuf,
    #[arg(long)]
    adv_preds: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    clean: PathBuf,
    #[arg(long)]
    clean_labels: PathBuf,
    /// Adversarial projections to overlay.
    #[arg(long)]
    adv: Option<PathBuf>,
    /// True classes of the adversarial rows, used with `--class`.
    #[arg(long, requires = "class")]
    adv_labels: Option<PathBuf>,
    /// Overlay only adversarial points whose true class is this.
    #[arg(long, requires = "adv_labels")]
    class: Option<usize>,
    #[arg(long)]
    legend: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Output directory (overrides the configuration).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
}

fn read_config<T: DeserializeOwned>(path: &Option<PathBuf>) -> Result<Option<T>> {
    match path {
        None => Ok(None),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
            Ok(Some(serde_json::from_str(&text)?))
        }
    }
}

fn load_f64(path: &Path) -> Result<Tensor<f64>> {
    load_matrix(path)?.into_f64()
}

fn load_labels(path: &Path) -> Result<Vec<usize>> {
    load_matrix(path)?.into_labels()
}

fn run(cli: Cli) -> Result<()> {
    let Cli { config, seed, command } = cli;
    match command {
        Command::Synth(a) => {
            let mut spec: SynthSpec = read_config(&config)?.unwrap_or_default();
            if let Some(v) = a.classes {
                spec.classes = v;
            }
            if let Some(v) = a.per_class {
                spec.per_class = v;
            }
            if let Some(v) = a.separation {
                spec.separation = v;
            }
            if let Some(v) = a.noise {
                spec.noise = v;
            }
            if let Some(s) = seed {
                spec.seed = s;
            }
            let split = match a.split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let ds = synth_dataset(&spec, split)?;
            ds.save(&a.out)?;
            println!("wrote {} images to {}", ds.len(), a.out.display());
        }
        Command::Ingest(a) => {
            let (mut tr, mut te) = ingest_cifar10(&a.cifar_dir)?;
            if let Some(n) = a.train_per_class {
                tr = tr.take_per_class(n);
            }
            if let Some(n) = a.test_per_class {
                te = te.take_per_class(n);
            }
            tr.save(&a.out.join("train"))?;
            te.save(&a.out.join("test"))?;
            println!("wrote {} train and {} test images", tr.len(), te.len());
        }
        Command::Train(a) => {
            let mut cfg: TrainConfig = read_config(&config)?.unwrap_or_default();
            if let Some(v) = a.epochs {
                cfg.epochs = v;
            }
            if let Some(v) = a.learning_rate {
                cfg.learning_rate = v;
            }
            if let Some(v) = a.batch_size {
                cfg.batch_size = v;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let data = Dataset::load(&a.data)?;
            let arch = Architecture::desk(data.image_shape(), data.num_classes());
            let (model, history) = train(arch, &data, &cfg)?;
            for h in &history {
                println!("epoch {:>3}  loss {:.6}  accuracy {:.4}", h.epoch, h.loss, h.accuracy);
            }
            model.save(&a.out)?;
        }
        Command::Attack(a) => {
            let model = Classifier::load(&a.model)?;
            let data = Dataset::load(&a.data)?;
            let data = if a.all { data } else { filter_correct(&model, &data)? };
            let batch = match a.attack {
                AttackKind::Fgsm | AttackKind::Bim => {
                    let mut b: AttackBudget = read_config(&config)?.unwrap_or_else(desk_budget);
                    if let Some(v) = a.epsilon_255 {
                        b.epsilon = v / 255.0;
                    }
                    if let Some(v) = a.alpha_255 {
                        b.alpha = v / 255.0;
                    }
                    if let Some(v) = a.iterations {
                        b.iterations = v;
                    }
                    match a.attack {
                        AttackKind::Fgsm => fgsm(&model, data.images(), data.labels(), &b)?,
                        _ => bim(&model, data.images(), data.labels(), &b)?,
                    }
                }
                AttackKind::Cw => {
                    let mut c: CwConfig = read_config(&config)?.unwrap_or_default();
                    if let Some(v) = a.iterations {
                        c.max_iterations = v;
                    }
                    cw_l2(&model, data.images(), data.labels(), &c)?
                }
            };
            fs::create_dir_all(&a.out).map_err(|e| Error::Io { path: a.out.clone(), source: e })?;
            let success: Vec<usize> = batch.success.iter().map(|&s| usize::from(s)).collect();
            save_matrix(a.out.join("images.vrpm"), &Matrix::F32(data.images().clone()))?;
            save_matrix(a.out.join("labels.vrpm"), &Matrix::labels(data.labels())?)?;
            save_matrix(a.out.join("x_adv.vrpm"), &Matrix::F32(batch.x_adv.clone()))?;
            save_matrix(a.out.join("predictions.vrpm"), &Matrix::labels(&batch.predictions)?)?;
            save_matrix(a.out.join("success.vrpm"), &Matrix::labels(&success)?)?;
            println!(
                "attacked {} images: success rate {:.4}, mean L2 {:.4}",
                batch.len(),
                batch.success_rate(),
                batch.mean_l2()
            );
        }
        Command::Extract(a) => {
            let model = Classifier::load(&a.model)?;
            let images = load_matrix(&a.images)?.into_f32()?;
            let r = model.penultimate(&images)?;
            save_matrix(&a.out, &Matrix::F32(r))?;
        }
        Command::Project(a) => {
            if (a.method, a.mode) == (Method::Tsne, Mode::Oos) {
                return Err(Error::Unsupported(
                    "t-SNE has no out-of-sample transform; use --mode coupled".into(),
                ));
            }
            let cfg: ProjectionConfig = read_config(&config)?.unwrap_or_default();
            let r = load_f64(&a.clean)?;
            let r_adv = load_f64(&a.adv)?;
            let pair = project_with(a.method, a.mode, &r, &r_adv, a.dims, seed.unwrap_or(0), &cfg)?;
            save_matrix(&a.out_clean, &Matrix::F64(pair.z))?;
            save_matrix(&a.out_adv, &Matrix::F64(pair.z_adv))?;
        }
        Command::Score(a) => {
            let s = pop_score(
                &load_f64(&a.clean)?,
                &load_labels(&a.clean_labels)?,
                &load_f64(&a.adv)?,
                &load_labels(&a.adv_preds)?,
            )?;
            println!("{s:.6}");
        }
        Command::Plot(a) => {
            let mut spec: PlotSpec = read_config(&config)?.unwrap_or_default();
            spec.legend |= a.legend;
            let z = load_f64(&a.clean)?;
            let y = load_labels(&a.clean_labels)?;
            let mut z_adv = match &a.adv {
                Some(p) => load_f64(p)?,
                None => Tensor::zeros(vec![0, 2]),
            };
            if let (Some(lp), Some(c)) = (&a.adv_labels, a.class) {
                let labels = load_labels(lp)?;
                if labels.len() != z_adv.rows() {
                    return Err(Error::Dimension(format!(
                        "{} adversarial rows but {} labels",
                        z_adv.rows(),
                        labels.len()
                    )));
                }
                let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
                z_adv = z_adv.select_rows(&rows);
            }
            let svg = class_overlay_plot(&z, &y, &z_adv, &spec)?;
            write_atomic(&a.out, svg.as_bytes())?;
        }
        Command::Experiment(a) => {
            let mut cfg = match &config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::default(),
            };
            if let Some(s) = seed {
                cfg.set_seed(s);
            }
            if let Some(t) = a.trials {
                cfg.trials = t;
            }
            if let Some(o) = a.out {
                cfg.output_dir = o;
            }
            let out = run_experiment_with_progress(&cfg, &mut |s| eprintln!("{s}"))?;
            print!("{}", out.table.to_csv());
            eprintln!("wrote {} and {}", out.scores_path.display(), out.manifest_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{}", e.render());
                    ExitCode::from(1)
                }
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut root = &e;
            while let Error::Stage { source, .. } = root {
                root = source;
            }
            match root {
                Error::Usage(_) | Error::Unsupported(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
