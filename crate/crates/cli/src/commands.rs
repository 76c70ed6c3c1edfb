//! Command implementations. Every file written here is a pure function of the
//! inputs, the effective configuration and the seed.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use scenediff::checkpoint::Checkpoint;
use scenediff::data::{filter_dataset, load_raw, split_dataset, synth_generate, SynthManifest};
use scenediff::ddpm::GuidanceConfig;
use scenediff::denoiser::Denoiser;
use scenediff::graph::{validate_graph, GraphFile, LabelEmbedder, RelationVocab, SceneGraph};
use scenediff::objectives::Trainer;
use scenediff::pipeline::{condition_seed, evaluate, fit_statistics, sample_scenes, training_examples, SampleOptions};
use scenediff::relations::PredicateConfig;
use scenediff::scene::{pad_scene, SceneFile, SceneMatrix};

use crate::config::{DataSource, RunConfig};
use crate::render::render_top_view;
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train.log";
pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";
pub const ABLATED_REPORT_FILE: &str = "report_label_only.json";

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

/// World-space training pairs with their relation vocabulary.
struct Dataset {
    pairs: Vec<(SceneMatrix, SceneGraph)>,
    relations: RelationVocab,
}

fn load_data(cfg: &RunConfig) -> Result<Dataset, CliError> {
    match &cfg.data {
        None => Err(CliError::Input(
            "no training data: set `data` in the config or use --preset".into(),
        )),
        Some(DataSource::Synthetic { scenes }) => Ok(Dataset {
            pairs: synth_generate(*scenes, &cfg.synth, &cfg.predicates, cfg.seed)?,
            relations: cfg.synth.vocab()?,
        }),
        Some(DataSource::Raw { dir }) => {
            let raw = load_raw(dir)?;
            if raw.dangling > 0 {
                log::warn!("{} relations reference missing objects and were skipped", raw.dangling);
            }
            let filtered = filter_dataset(&raw.scenes, &cfg.filter)?;
            log::info!("{} of {} raw scenes survive filtering", filtered.len(), raw.scenes.len());
            let pairs = filtered
                .into_iter()
                .map(|s| Ok((pad_scene(&s.objects, cfg.model.n_max)?, s.graph)))
                .collect::<scenediff::Result<Vec<_>>>()?;
            Ok(Dataset {
                pairs,
                relations: cfg.filter.vocab()?,
            })
        }
        Some(DataSource::Paired { dir }) => {
            let manifest = SynthManifest::read(&dir.join(MANIFEST_FILE))?;
            let relations = RelationVocab::new(&manifest.relations)?;
            let pairs = manifest
                .files
                .iter()
                .map(|(scene, graph)| {
                    let scene = SceneFile::read(&dir.join(scene))?.to_scene()?;
                    let graph = GraphFile::read(&dir.join(graph))?.to_graph(&relations)?;
                    Ok((scene, graph))
                })
                .collect::<scenediff::Result<Vec<_>>>()?;
            Ok(Dataset { pairs, relations })
        }
    }
}

fn write_graphs(dir: &Path, graphs: &[SceneGraph], relations: &RelationVocab) -> Result<(), CliError> {
    create_dir(dir)?;
    for (i, g) in graphs.iter().enumerate() {
        GraphFile::from_graph(g, relations)?.write(&dir.join(format!("graph_{i:04}.json")))?;
    }
    Ok(())
}

/// Trains a model and writes the checkpoint, log, effective config and the
/// validation/test conditions under `cfg.out`.
pub fn train(mut cfg: RunConfig) -> Result<PathBuf, CliError> {
    cfg.train.seed = cfg.seed;
    cfg.validate()?;
    let data = load_data(&cfg)?;
    if data.pairs.is_empty() {
        return Err(CliError::Input("the dataset is empty".into()));
    }
    let split = split_dataset(&data.pairs, cfg.split, cfg.seed)?;
    if split.train.is_empty() {
        return Err(CliError::Input("the training split is empty".into()));
    }
    log::info!(
        "split: {} train, {} validation, {} test",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );

    let labels: BTreeSet<String> = data
        .pairs
        .iter()
        .flat_map(|(_, g)| g.node_labels.iter().cloned())
        .collect();
    let labels: Vec<String> = labels.into_iter().collect();
    let embedder = LabelEmbedder::hash_derived(&labels, cfg.embedding_seed);
    let train_scenes: Vec<SceneMatrix> = split.train.iter().map(|(s, _)| s.clone()).collect();
    let (normalizer, stats) = fit_statistics(&train_scenes)?;
    let model = Denoiser::new(cfg.model.clone(), data.relations.clone(), embedder, cfg.seed)?;
    let train_examples = training_examples(&split.train, &normalizer, &model)?;
    let val_examples = training_examples(&split.val, &normalizer, &model)?;

    create_dir(&cfg.out)?;
    write_file(&cfg.out.join(CONFIG_FILE), cfg.to_json())?;
    let mut log = String::from("epoch, train_loss, val_loss, lr\n");
    let mut trainer = Trainer::new(model, cfg.train.clone(), stats.clone(), normalizer.clone())?;
    let mut best: Option<(f64, scenediff::denoiser::ParamStore)> = None;
    for _ in 0..cfg.train.epochs {
        let mut m = trainer.train_epoch(&train_examples)?;
        if !val_examples.is_empty() {
            m.val_loss = Some(trainer.validation_loss(&val_examples)?);
        }
        let metric = m.val_loss.unwrap_or(m.train_loss);
        trainer.observe(metric);
        m.lr = trainer.lr();
        log.push_str(&m.log_line());
        log.push('\n');
        log::debug!("{}", m.log_line());
        if best.as_ref().is_none_or(|(b, _)| metric < *b) {
            best = Some((metric, trainer.model().params().clone()));
        }
    }
    log.push_str(&format!(
        "# masked conditions: {} of {} samples\n",
        trainer.masked_count, trainer.sample_count
    ));
    let mut model = trainer.into_model();
    if let Some((metric, params)) = best {
        log::info!("keeping parameters with selection loss {metric:.6e}");
        *model.params_mut() = params;
    }
    let checkpoint = Checkpoint {
        model,
        normalizer,
        stats,
        schedule: cfg.train.schedule,
        steps: cfg.train.steps,
        guidance: cfg.guidance,
    };
    let ck_path = cfg.out.join(CHECKPOINT_FILE);
    checkpoint.save(&ck_path)?;
    write_file(&cfg.out.join(LOG_FILE), log)?;
    let val_graphs: Vec<SceneGraph> = split.val.iter().map(|(_, g)| g.clone()).collect();
    let test_graphs: Vec<SceneGraph> = split.test.iter().map(|(_, g)| g.clone()).collect();
    write_graphs(&cfg.out.join("splits").join("val"), &val_graphs, &data.relations)?;
    write_graphs(&cfg.out.join("splits").join("test"), &test_graphs, &data.relations)?;
    Ok(ck_path)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| CliError::Input(format!("cannot load checkpoint {}: {e}", path.display())))
}

/// Reads one graph and checks it against the checkpoint's vocabularies.
fn read_graph(path: &Path, ck: &Checkpoint) -> Result<SceneGraph, CliError> {
    let graph = GraphFile::read(path)?.to_graph(ck.model.relations())?;
    let problems = validate_graph(
        &graph,
        ck.model.relations(),
        ck.model.embedder().labels(),
        ck.model.config().n_max,
    );
    if !problems.is_empty() {
        return Err(CliError::Input(format!("{}: {}", path.display(), problems.join("; "))));
    }
    Ok(graph)
}

/// A graph file, or every `*.json` file of a directory in name order.
fn read_graphs(path: &Path, ck: &Checkpoint) -> Result<Vec<SceneGraph>, CliError> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| CliError::Input(format!("cannot list {}: {e}", path.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        files.iter().map(|p| read_graph(p, ck)).collect()
    } else if path.exists() {
        Ok(vec![read_graph(path, ck)?])
    } else {
        Err(CliError::Input(format!("{} does not exist", path.display())))
    }
}

#[derive(Clone, Debug)]
pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub graph: PathBuf,
    pub guidance: Option<f64>,
    pub seed: u64,
    pub n: usize,
    pub ablate_relations: bool,
    pub out: PathBuf,
}

fn guidance_of(ck: &Checkpoint, w: Option<f64>) -> GuidanceConfig {
    GuidanceConfig {
        guidance_scale: w.unwrap_or(ck.guidance.guidance_scale),
        ..ck.guidance
    }
}

/// Writes `n` scenes for one graph; sample `k` uses seed `condition_seed(seed, k)`.
pub fn sample(args: &SampleArgs) -> Result<Vec<PathBuf>, CliError> {
    if args.n == 0 {
        return Err(CliError::Input("--n must be at least 1".into()));
    }
    let ck = load_checkpoint(&args.checkpoint)?;
    let graph = read_graph(&args.graph, &ck)?;
    let opts = SampleOptions {
        guidance: guidance_of(&ck, args.guidance),
        seed: args.seed,
        ablate_relations: args.ablate_relations,
    };
    let graphs = vec![graph; args.n];
    let scenes = sample_scenes(&ck.model, &ck.normalizer, ck.schedule, ck.steps, &graphs, &opts)?;
    create_dir(&args.out)?;
    let mut written = Vec::with_capacity(scenes.len());
    for (k, scene) in scenes.iter().enumerate() {
        let path = args.out.join(format!("scene_{k:04}.json"));
        SceneFile::from_scene(scene).write(&path)?;
        log::debug!("sample {k} seed {:#x}", condition_seed(args.seed, k));
        written.push(path);
    }
    Ok(written)
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub graphs: PathBuf,
    pub guidance: Option<f64>,
    pub seed: u64,
    pub ablate_relations: bool,
    pub predicates: PredicateConfig,
    pub out: PathBuf,
}

/// Samples one scene per condition and writes a RAS report; with
/// `ablate_relations` a second report for the label-only pathway.
pub fn eval(args: &EvalArgs) -> Result<Vec<PathBuf>, CliError> {
    args.predicates.validate()?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let graphs = read_graphs(&args.graphs, &ck)?;
    if graphs.is_empty() {
        return Err(CliError::Input(format!("no conditions found in {}", args.graphs.display())));
    }
    if let Some(i) = graphs.iter().position(|g| g.edges.is_empty()) {
        return Err(CliError::Input(format!("condition {i} has no relations to score")));
    }
    create_dir(&args.out)?;
    let mut runs = vec![(false, REPORT_FILE, "scenes")];
    if args.ablate_relations {
        runs.push((true, ABLATED_REPORT_FILE, "scenes_label_only"));
    }
    let mut written = Vec::new();
    for (ablate, report_name, scene_dir) in runs {
        let opts = SampleOptions {
            guidance: guidance_of(&ck, args.guidance),
            seed: args.seed,
            ablate_relations: ablate,
        };
        let (scenes, report) = evaluate(&ck, &graphs, &opts, &args.predicates)?;
        log::info!("{report_name}: corpus RAS {:.4}", report.corpus);
        let dir = args.out.join(scene_dir);
        create_dir(&dir)?;
        for (i, s) in scenes.iter().enumerate() {
            SceneFile::from_scene(s).write(&dir.join(format!("scene_{i:04}.json")))?;
        }
        let path = args.out.join(report_name);
        write_file(&path, report.to_json()?)?;
        written.push(path);
    }
    Ok(written)
}

pub fn render(scene: &Path, out: &Path) -> Result<(), CliError> {
    let file = SceneFile::read(scene)?;
    // Validates the padding against the object list.
    file.to_scene()?;
    let svg = render_top_view(&file.objects);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut f = fs::File::create(out).map_err(|e| CliError::Input(format!("cannot write {}: {e}", out.display())))?;
    f.write_all(svg.as_bytes())
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", out.display())))
}

/// Writes a synthetic corpus with its manifest.
pub fn synth(manifest: &SynthManifest, out: &Path) -> Result<PathBuf, CliError> {
    if manifest.n_scenes == 0 {
        return Err(CliError::Input("--n must be at least 1".into()));
    }
    let pairs = synth_generate(manifest.n_scenes, &manifest.config, &manifest.predicates, manifest.seed)?;
    let relations = manifest.config.vocab()?;
    create_dir(out)?;
    let mut files = Vec::with_capacity(pairs.len());
    for (i, (scene, graph)) in pairs.iter().enumerate() {
        let (s, g) = (format!("scene_{i:04}.json"), format!("graph_{i:04}.json"));
        SceneFile::from_scene(scene).write(&out.join(&s))?;
        GraphFile::from_graph(graph, &relations)?.write(&out.join(&g))?;
        files.push((s, g));
    }
    let manifest = SynthManifest {
        relations: relations.names().to_vec(),
        files,
        ..manifest.clone()
    };
    let path = out.join(MANIFEST_FILE);
    write_file(&path, manifest.to_json()?)?;
    Ok(path)
}
