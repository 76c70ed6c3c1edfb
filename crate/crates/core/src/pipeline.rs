//! End-to-end helpers: preparing paired data for training, sampling scenes
//! for a set of conditions and scoring them.

use crate::ddpm::{make_schedule, sample_rows, Denoise, GuidanceConfig};
use crate::checkpoint::Checkpoint;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::graph::SceneGraph;
use crate::objectives::{CategoryStats, TrainingExample};
use crate::relations::{ras_corpus, PredicateConfig, RasReport};
use crate::scene::{Normalizer, SceneMatrix, EMPTY_LABEL};

/// Normalizer and category statistics fitted on world-space training scenes.
pub fn fit_statistics(train: &[SceneMatrix]) -> Result<(Normalizer, CategoryStats)> {
    Ok((Normalizer::fit(train)?, CategoryStats::fit(train)))
}

/// Normalizes every scene and fuses its graph for `model`.
pub fn training_examples<M: Denoise + ?Sized>(
    pairs: &[(SceneMatrix, SceneGraph)],
    normalizer: &Normalizer,
    model: &M,
) -> Result<Vec<TrainingExample>> {
    pairs
        .iter()
        .map(|(scene, graph)| {
            let normalized = normalizer.normalize(scene)?;
            if normalized.out_of_range > 0 {
                log::debug!("{} entries outside the fitted range", normalized.out_of_range);
            }
            TrainingExample::new(&normalized.scene, graph, model)
        })
        .collect()
}

/// Seed of the `index`-th condition in a run seeded with `seed`.
pub fn condition_seed(seed: u64, index: usize) -> u64 {
    // SplitMix64 finalizer over (seed, index).
    let mut z = seed ^ (index as u64).wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Options for generating scenes from conditions.
#[derive(Clone, Debug)]
pub struct SampleOptions {
    pub guidance: GuidanceConfig,
    pub seed: u64,
    /// Replace every typed condition edge by the neutral relation.
    pub ablate_relations: bool,
}

/// Samples one world-space scene per graph; graph `i` uses
/// [`condition_seed`]`(seed, i)`.
pub fn sample_scenes(
    model: &Denoiser,
    normalizer: &Normalizer,
    schedule_kind: crate::ddpm::ScheduleKind,
    steps: usize,
    graphs: &[SceneGraph],
    opts: &SampleOptions,
) -> Result<Vec<SceneMatrix>> {
    opts.guidance.validate()?;
    let sched = make_schedule(schedule_kind, steps)?;
    graphs
        .iter()
        .enumerate()
        .map(|(i, graph)| {
            if graph.node_count() > model.n_max() {
                return Err(Error::invalid(format!(
                    "graph {i} has {} nodes but the model holds {}",
                    graph.node_count(),
                    model.n_max()
                )));
            }
            let mut condition = model.condition(graph)?;
            if opts.ablate_relations {
                condition = condition.without_relations();
            }
            let rows = sample_rows(model, &condition, &opts.guidance, condition_seed(opts.seed, i), &sched)?;
            let mut labels = vec![EMPTY_LABEL.to_string(); model.n_max()];
            labels[..graph.node_count()].clone_from_slice(&graph.node_labels);
            normalizer.denormalize(&SceneMatrix::new(rows, labels)?)
        })
        .collect()
}

/// Samples a scene for every graph with a checkpoint and scores the corpus.
pub fn evaluate(
    checkpoint: &Checkpoint,
    graphs: &[SceneGraph],
    opts: &SampleOptions,
    predicates: &PredicateConfig,
) -> Result<(Vec<SceneMatrix>, RasReport)> {
    if graphs.is_empty() {
        return Err(Error::invalid("no conditions to evaluate"));
    }
    let scenes = sample_scenes(
        &checkpoint.model,
        &checkpoint.normalizer,
        checkpoint.schedule,
        checkpoint.steps,
        graphs,
        opts,
    )?;
    let pairs: Vec<(SceneMatrix, SceneGraph)> = scenes.iter().cloned().zip(graphs.iter().cloned()).collect();
    let report = ras_corpus(&pairs, checkpoint.model.relations(), predicates)?;
    Ok((scenes, report))
}
