//! The end-to-end desk experiment: train, attack, extract penultimate
//! representations, project, score, and plot, with every intermediate
//! persisted so interrupted or partially deleted runs resume bit-exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{bim, cw_l2, fgsm, AdversarialBatch, AttackBudget, CwConfig};
use crate::data::{ingest_cifar10, synth_dataset, Dataset, Split, SynthSpec};
use crate::dimred::{project_with, Method, Mode, ProjectionConfig, ProjectionPair};
use crate::error::{Error, Result};
use crate::matrix_file::{load_matrix, save_matrix, write_atomic, Matrix};
use crate::model::{accuracy, filter_correct, train, Architecture, Classifier, TrainConfig};
use crate::popn::{pop_trials_observed, PopJob, PopResult};
use crate::tensor::Tensor;
use crate::viz::{class_overlay_plot, PlotSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    Synth {
        /// Training split; `per_class` sets its size.
        spec: SynthSpec,
        test_per_class: usize,
    },
    Cifar10 {
        dir: PathBuf,
        #[serde(default)]
        train_per_class: Option<usize>,
        #[serde(default)]
        test_per_class: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AttackSpec {
    Fgsm(AttackBudget),
    Bim(AttackBudget),
    Cw(CwConfig),
}

impl AttackSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::Fgsm(_) => "fgsm",
            AttackSpec::Bim(_) => "bim",
            AttackSpec::Cw(_) => "cw",
        }
    }

    pub fn run(&self, model: &Classifier, x: &Tensor<f32>, y: &[usize]) -> Result<AdversarialBatch> {
        match self {
            AttackSpec::Fgsm(b) => fgsm(model, x, y, b),
            AttackSpec::Bim(b) => bim(model, x, y, b),
            AttackSpec::Cw(c) => cw_l2(model, x, y, c),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            AttackSpec::Fgsm(b) | AttackSpec::Bim(b) => b.validate(),
            AttackSpec::Cw(c) => c.validate(),
        }
    }
}

/// A projection method paired with a mode, written `method-mode`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Combo {
    pub method: Method,
    pub mode: Mode,
}

impl Combo {
    pub const fn new(method: Method, mode: Mode) -> Self {
        Combo { method, mode }
    }

    /// The five combinations with a native implementation.
    pub fn all_supported() -> Vec<Combo> {
        vec![
            Combo::new(Method::Pca, Mode::Coupled),
            Combo::new(Method::Pca, Mode::Oos),
            Combo::new(Method::Tsne, Mode::Coupled),
            Combo::new(Method::Umap, Mode::Coupled),
            Combo::new(Method::Umap, Mode::Oos),
        ]
    }

    pub fn is_supported(&self) -> bool {
        !(self.method == Method::Tsne && self.mode == Mode::Oos)
    }
}

impl fmt::Display for Combo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.method.name(), self.mode.name())
    }
}

impl std::str::FromStr for Combo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (m, o) = s
            .split_once('-')
            .ok_or_else(|| Error::Usage(format!("expected method-mode, got '{s}'")))?;
        Ok(Combo { method: m.parse()?, mode: o.parse()? })
    }
}

impl TryFrom<String> for Combo {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Combo> for String {
    fn from(c: Combo) -> String {
        c.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlotConfig {
    /// Projections to draw; each gets a clean-only plot and one overlay
    /// plot per (attack, true class).
    pub combos: Vec<Combo>,
    pub spec: PlotSpec,
}

impl Default for PlotConfig {
    fn default() -> Self {
        PlotConfig {
            combos: vec![Combo::new(Method::Umap, Mode::Coupled)],
            spec: PlotSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    /// `None` selects the desk CNN for the dataset's image shape.
    pub architecture: Option<Architecture>,
    pub train: TrainConfig,
    pub attacks: Vec<AttackSpec>,
    pub projections: Vec<Combo>,
    pub projection: ProjectionConfig,
    pub dims: usize,
    pub trials: usize,
    /// Trial `t` projects with seed `base_seed + t`.
    pub base_seed: u64,
    pub output_dir: PathBuf,
    pub plots: PlotConfig,
}

/// FGSM/BIM budget for the desk classifier on synthetic blobs.
pub fn desk_budget() -> AttackBudget {
    AttackBudget {
        epsilon: 8.0 / 255.0,
        alpha: 2.0 / 255.0,
        ..AttackBudget::default()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::Synth { spec: SynthSpec::default(), test_per_class: 100 },
            architecture: None,
            train: TrainConfig::default(),
            attacks: vec![
                AttackSpec::Fgsm(desk_budget()),
                AttackSpec::Bim(desk_budget()),
                AttackSpec::Cw(CwConfig { max_iterations: 100, ..CwConfig::default() }),
            ],
            projections: Combo::all_supported(),
            projection: ProjectionConfig::default(),
            dims: 2,
            trials: 10,
            base_seed: 0,
            output_dir: PathBuf::from("experiment-out"),
            plots: PlotConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Sets the dataset, training, and projection seeds at once.
    pub fn set_seed(&mut self, seed: u64) {
        if let DatasetSource::Synth { spec, .. } = &mut self.dataset {
            spec.seed = seed;
        }
        self.train.seed = seed;
        self.base_seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Input("trials must be at least 1".into()));
        }
        if self.attacks.is_empty() {
            return Err(Error::Input("at least one attack is required".into()));
        }
        if self.projections.is_empty() {
            return Err(Error::Input("at least one projection method is required".into()));
        }
        if self.dims == 0 {
            return Err(Error::Input("projection dimension must be at least 1".into()));
        }
        let mut names: Vec<&str> = self.attacks.iter().map(AttackSpec::name).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Input("each attack kind may appear only once".into()));
        }
        for a in &self.attacks {
            a.validate()?;
        }
        self.train.validate()?;
        self.plots.spec.validate()?;
        Ok(())
    }

    /// SHA-256 of the configuration with the output directory blanked, so
    /// relocating a run does not change its identity.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let digest = Sha256::digest(serde_json::to_vec(&c)?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub method: Method,
    pub mode: Mode,
    pub attack: String,
    pub trials: usize,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

pub const SCORE_HEADER: &str = "method,mode,attack,trials,mean,sd";

impl ScoreTable {
    /// Orders (method, mode) groups by their mean score across attacks,
    /// highest first; ties and rows within a group keep insertion order.
    pub fn sort_by_mean_across_attacks(&mut self) {
        let mut groups: Vec<((Method, Mode), Vec<ScoreRow>)> = Vec::new();
        for row in self.rows.drain(..) {
            let key = (row.method, row.mode);
            match groups.iter_mut().find(|g| g.0 == key) {
                Some(g) => g.1.push(row),
                None => groups.push((key, vec![row])),
            }
        }
        let avg = |rows: &[ScoreRow]| rows.iter().map(|r| r.mean).sum::<f64>() / rows.len() as f64;
        groups.sort_by(|a, b| avg(&b.1).total_cmp(&avg(&a.1)));
        self.rows = groups.into_iter().flat_map(|g| g.1).collect();
    }

    pub fn get(&self, method: Method, mode: Mode, attack: &str) -> Option<&ScoreRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.mode == mode && r.attack == attack)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        let header: Vec<&str> = SCORE_HEADER.split(',').collect();
        w.write_record(&header).expect("write to memory");
        for r in &self.rows {
            w.write_record([
                r.method.name().to_string(),
                r.mode.name().to_string(),
                r.attack.clone(),
                r.trials.to_string(),
                format!("{:.6}", r.mean),
                format!("{:.6}", r.sd),
            ])
            .expect("write to memory");
        }
        String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf-8 fields")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let header = rdr
            .headers()
            .map_err(|e| Error::Input(format!("score table header: {e}")))?
            .iter()
            .collect::<Vec<_>>()
            .join(",");
        if header != SCORE_HEADER {
            return Err(Error::Input(format!("score table must start with '{SCORE_HEADER}'")));
        }
        let rows = rdr
            .deserialize()
            .enumerate()
            .map(|(i, r)| r.map_err(|e| Error::Input(format!("score row {}: {e}", i + 1))))
            .collect::<Result<Vec<ScoreRow>>>()?;
        Ok(ScoreTable { rows })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub attack: String,
    pub attacked: usize,
    pub success_rate: f64,
    pub mean_l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub dataset_seed: Option<u64>,
    pub train_seed: u64,
    pub projection_seeds: Vec<u64>,
    pub test_accuracy: f64,
    pub correct_test_images: usize,
    pub attacks: Vec<AttackSummary>,
    pub notices: Vec<String>,
    /// Paths relative to the output directory, sorted.
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub table: ScoreTable,
    pub manifest: Manifest,
    pub scores_path: PathBuf,
    pub manifest_path: PathBuf,
    pub plot_paths: Vec<PathBuf>,
}

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| e.in_stage(name))
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn load_or<T>(
    marker: &Path,
    load: impl FnOnce() -> Result<T>,
    compute: impl FnOnce() -> Result<T>,
) -> Result<T> {
    if marker.exists() {
        load()
    } else {
        compute()
    }
}

struct AttackArtifacts {
    spec: AttackSpec,
    predictions: Vec<usize>,
    repr: Tensor<f64>,
    summary: AttackSummary,
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

fn save_pair(dir: &Path, pair: &ProjectionPair) -> Result<()> {
    mkdir(dir)?;
    save_matrix(dir.join("z.vrpm"), &Matrix::F64(pair.z.clone()))?;
    save_matrix(dir.join("z_adv.vrpm"), &Matrix::F64(pair.z_adv.clone()))
}

fn load_pair(dir: &Path) -> Result<(Tensor<f64>, Tensor<f64>)> {
    Ok((
        load_matrix(dir.join("z.vrpm"))?.into_f64()?,
        load_matrix(dir.join("z_adv.vrpm"))?.into_f64()?,
    ))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    run_experiment_with_progress(cfg, &mut |_| {})
}

/// Runs the pipeline, reusing any intermediate already present in the
/// output directory. `progress` receives one line per stage.
pub fn run_experiment_with_progress(
    cfg: &ExperimentConfig,
    progress: &mut dyn FnMut(&str),
) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    let hash = cfg.hash()?;
    stage("setup", || {
        mkdir(&out)?;
        let stamp = out.join("config.json");
        if stamp.exists() {
            let previous: ExperimentConfig = read_json(&stamp)?;
            if previous.hash()? != hash {
                return Err(Error::Usage(format!(
                    "{} holds artifacts of a different configuration; use a fresh output directory",
                    out.display()
                )));
            }
        } else {
            write_json(&stamp, cfg)?;
        }
        Ok(())
    })?;
    let mut notices = Vec::new();

    progress("data");
    let (train_set, test_set) = stage("data", || {
        let (train_dir, test_dir) = (out.join("data/train"), out.join("data/test"));
        load_or(
            &test_dir.join("meta.json"),
            || Ok((Dataset::load(&train_dir)?, Dataset::load(&test_dir)?)),
            || {
                let (tr, te) = match &cfg.dataset {
                    DatasetSource::Synth { spec, test_per_class } => (
                        synth_dataset(spec, Split::Train)?,
                        synth_dataset(
                            &SynthSpec { per_class: *test_per_class, ..spec.clone() },
                            Split::Test,
                        )?,
                    ),
                    DatasetSource::Cifar10 { dir, train_per_class, test_per_class } => {
                        let (mut tr, mut te) = ingest_cifar10(dir)?;
                        if let Some(n) = train_per_class {
                            tr = tr.take_per_class(*n);
                        }
                        if let Some(n) = test_per_class {
                            te = te.take_per_class(*n);
                        }
                        (tr, te)
                    }
                };
                tr.save(&train_dir)?;
                te.save(&test_dir)?;
                Ok((tr, te))
            },
        )
    })?;

    progress("train");
    let model = stage("train", || {
        let dir = out.join("model");
        load_or(&dir.join("model.json"), || Classifier::load(&dir), || {
            let arch = cfg.architecture.clone().unwrap_or_else(|| {
                Architecture::desk(train_set.image_shape(), train_set.num_classes())
            });
            let (model, history) = train(arch, &train_set, &cfg.train)?;
            write_json(&out.join("train_history.json"), &history)?;
            model.save(&dir)?;
            Ok(model)
        })
    })?;

    progress("filter");
    let (correct, test_accuracy) = stage("filter", || {
        let dir = out.join("correct");
        let correct = load_or(&dir.join("meta.json"), || Dataset::load(&dir), || {
            let c = filter_correct(&model, &test_set)?;
            c.save(&dir)?;
            Ok(c)
        })?;
        let acc = accuracy(&model, &test_set)?;
        if correct.is_empty() {
            return Err(Error::Input("the classifier got every test image wrong".into()));
        }
        Ok((correct, acc))
    })?;
    let y = correct.labels().to_vec();

    progress("extract");
    let r = stage("extract", || {
        let path = out.join("repr/clean.vrpm");
        load_or(&path, || load_matrix(&path)?.into_f64(), || {
            mkdir(&out.join("repr"))?;
            let r = model.penultimate(correct.images())?;
            save_matrix(&path, &Matrix::F32(r.clone()))?;
            Ok(r.cast())
        })
    })?;

    let mut attacks = Vec::new();
    for spec in &cfg.attacks {
        let name = spec.name();
        progress(&format!("attack {name}"));
        let art = stage(&format!("attack {name}"), || {
            let dir = out.join("attacks").join(name);
            let summary_path = dir.join("summary.json");
            load_or(
                &summary_path,
                || {
                    Ok(AttackArtifacts {
                        spec: spec.clone(),
                        predictions: load_matrix(dir.join("predictions.vrpm"))?.into_labels()?,
                        repr: load_matrix(dir.join("repr.vrpm"))?.into_f64()?,
                        summary: read_json(&summary_path)?,
                    })
                },
                || {
                    mkdir(&dir)?;
                    let batch = spec.run(&model, correct.images(), &y)?;
                    let repr = model.penultimate(&batch.x_adv)?;
                    let success: Vec<usize> = batch.success.iter().map(|&s| usize::from(s)).collect();
                    save_matrix(dir.join("x_adv.vrpm"), &Matrix::F32(batch.x_adv.clone()))?;
                    save_matrix(dir.join("predictions.vrpm"), &Matrix::labels(&batch.predictions)?)?;
                    save_matrix(dir.join("success.vrpm"), &Matrix::labels(&success)?)?;
                    save_matrix(dir.join("repr.vrpm"), &Matrix::F32(repr.clone()))?;
                    let summary = AttackSummary {
                        attack: name.to_string(),
                        attacked: batch.len(),
                        success_rate: batch.success_rate(),
                        mean_l2: batch.mean_l2(),
                    };
                    write_json(&summary_path, &summary)?;
                    Ok(AttackArtifacts {
                        spec: spec.clone(),
                        predictions: batch.predictions,
                        repr: repr.cast(),
                        summary,
                    })
                },
            )
        })?;
        attacks.push(art);
    }

    let plotted = |c: &Combo| cfg.plots.combos.contains(c);
    let mut table = ScoreTable::default();
    for combo in &cfg.projections {
        if !combo.is_supported() {
            notices.push(format!("skipped {combo}: no out-of-sample transform for t-SNE"));
            continue;
        }
        for art in &attacks {
            let name = art.spec.name();
            progress(&format!("score {combo} {name}"));
            let result = stage(&format!("score {combo} {name}"), || {
                let score_path = out.join("scores").join(name).join(format!("{combo}.json"));
                let pair_dir = out.join("projections").join(name).join(combo.to_string());
                let job = PopJob {
                    method: combo.method,
                    mode: combo.mode,
                    r: &r,
                    r_adv: &art.repr,
                    y: &y,
                    y_adv: &art.predictions,
                    dims: cfg.dims,
                    config: &cfg.projection,
                };
                let result: PopResult = load_or(&score_path, || read_json(&score_path), || {
                    mkdir(score_path.parent().expect("has parent"))?;
                    let res = pop_trials_observed(&job, cfg.trials, cfg.base_seed, |t, pair| {
                        if t == 0 && plotted(combo) {
                            save_pair(&pair_dir, pair)?;
                        }
                        Ok(())
                    })?;
                    write_json(&score_path, &res)?;
                    Ok(res)
                })?;
                if plotted(combo) && !pair_dir.join("z_adv.vrpm").exists() {
                    let pair = project_with(
                        combo.method,
                        combo.mode,
                        &r,
                        &art.repr,
                        cfg.dims,
                        cfg.base_seed,
                        &cfg.projection,
                    )?;
                    save_pair(&pair_dir, &pair)?;
                }
                Ok(result)
            })?;
            table.rows.push(ScoreRow {
                method: combo.method,
                mode: combo.mode,
                attack: name.to_string(),
                trials: result.trials,
                mean: result.mean,
                sd: result.sd,
            });
        }
    }
    table.sort_by_mean_across_attacks();
    let scores_path = out.join("scores.csv");
    write_atomic(&scores_path, table.to_csv().as_bytes())?;

    let mut plot_paths = Vec::new();
    if cfg.dims == 2 {
        for combo in cfg.plots.combos.iter().filter(|c| c.is_supported()) {
            progress(&format!("plot {combo}"));
            stage(&format!("plot {combo}"), || {
                let spec = PlotSpec {
                    class_names: if cfg.plots.spec.class_names.is_empty() {
                        correct.class_names().to_vec()
                    } else {
                        cfg.plots.spec.class_names.clone()
                    },
                    ..cfg.plots.spec.clone()
                };
                let plot_dir = out.join("plots").join(combo.to_string());
                mkdir(&plot_dir)?;
                let clean_dir = out.join("projections/clean").join(combo.to_string());
                if !clean_dir.join("z_adv.vrpm").exists() {
                    let empty = Tensor::zeros(vec![0, r.row_len()]);
                    let pair = project_with(
                        combo.method,
                        combo.mode,
                        &r,
                        &empty,
                        cfg.dims,
                        cfg.base_seed,
                        &cfg.projection,
                    )?;
                    save_pair(&clean_dir, &pair)?;
                }
                let (z, z_adv) = load_pair(&clean_dir)?;
                let path = plot_dir.join("clean.svg");
                write_atomic(&path, class_overlay_plot(&z, &y, &z_adv, &spec)?.as_bytes())?;
                plot_paths.push(path);

                for art in &attacks {
                    let name = art.spec.name();
                    let pair_dir = out.join("projections").join(name).join(combo.to_string());
                    let (z, z_adv) = load_pair(&pair_dir)?;
                    let attack_dir = plot_dir.join(name);
                    mkdir(&attack_dir)?;
                    for c in 0..correct.num_classes() {
                        let rows: Vec<usize> = (0..y.len()).filter(|&i| y[i] == c).collect();
                        let svg = class_overlay_plot(&z, &y, &z_adv.select_rows(&rows), &spec)?;
                        let cname = correct.class_names().get(c).map(String::as_str).unwrap_or("class");
                        let path = attack_dir.join(format!("{c:02}_{}.svg", file_stem(cname)));
                        write_atomic(&path, svg.as_bytes())?;
                        plot_paths.push(path);
                    }
                }
                Ok(())
            })?;
        }
    } else if !cfg.plots.combos.is_empty() {
        notices.push(format!("plots skipped: projection dimension is {}, not 2", cfg.dims));
    }

    progress("manifest");
    let manifest_path = out.join("manifest.json");
    let manifest = stage("manifest", || {
        let mut artifacts = Vec::new();
        collect_files(&out, &out, &mut artifacts)?;
        artifacts.retain(|a| a != "manifest.json");
        artifacts.push("manifest.json".into());
        artifacts.sort();
        let manifest = Manifest {
            config_hash: hash.clone(),
            dataset_seed: match &cfg.dataset {
                DatasetSource::Synth { spec, .. } => Some(spec.seed),
                DatasetSource::Cifar10 { .. } => None,
            },
            train_seed: cfg.train.seed,
            projection_seeds: (0..cfg.trials as u64).map(|t| cfg.base_seed.wrapping_add(t)).collect(),
            test_accuracy,
            correct_test_images: correct.len(),
            attacks: attacks.iter().map(|a| a.summary.clone()).collect(),
            notices: notices.clone(),
            artifacts,
        };
        write_json(&manifest_path, &manifest)?;
        Ok(manifest)
    })?;

    Ok(ExperimentOutput { table, manifest, scores_path, manifest_path, plot_paths })
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let mut entries: BTreeMap<String, PathBuf> = BTreeMap::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let e = e.map_err(|e| Error::io(dir, e))?;
        entries.insert(e.file_name().to_string_lossy().into_owned(), e.path());
    }
    for path in entries.into_values() {
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if let Ok(rel) = path.strip_prefix(root) {
            let rel = rel.to_string_lossy().replace('\\', "/");
            if !rel.starts_with(".tmp") && !rel.contains("/.tmp") {
                out.push(rel);
            }
        }
    }
    Ok(())
}
