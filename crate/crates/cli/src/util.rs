//! Small shared helpers for the command implementations.

use std::path::Path;

use zsad_core::container::Container;
use zsad_core::error::{Error, Result};
use zsad_core::prompts::{
    preset, EmbeddingTable, PromptDistribution, PromptTemplateSet, SyntheticEncoder,
};
use zsad_core::selector::{RepresentativePair, SelectorConfig};

use crate::config::PromptSource;

/// Map an item list across worker threads while keeping result order
/// independent of the worker count.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(usize, &T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs <= 1 {
        return items
            .iter()
            .enumerate()
            .map(|(i, item)| f(i, item))
            .collect();
    }
    let mut slots: Vec<Option<Result<R>>> = Vec::new();
    slots.resize_with(items.len(), || None);
    let slots_mutex = std::sync::Mutex::new(&mut slots);
    let next = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                slots_mutex.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("worker filled every slot"))
        .collect()
}

pub fn template_set(source: &PromptSource) -> Result<PromptTemplateSet> {
    match (&source.preset_file, &source.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)?;
            PromptTemplateSet::parse(&text)
        }
        (None, Some(name)) => preset(name),
        (None, None) => preset("industrial"),
    }
}

pub fn build_distribution(source: &PromptSource) -> Result<PromptDistribution> {
    let set = template_set(source)?;
    match &source.embeddings {
        Some(path) => {
            let table = EmbeddingTable::new(Container::read_from(path)?);
            PromptDistribution::from_table(&set, &source.object_name, &table)
        }
        None => {
            let encoder = SyntheticEncoder::new(source.text_seed, source.text_dim);
            Ok(PromptDistribution::synthesize(
                &set,
                &source.object_name,
                &encoder,
            ))
        }
    }
}

pub fn build_pair(
    source: &PromptSource,
    selector: &SelectorConfig,
) -> Result<RepresentativePair> {
    let dist = build_distribution(source)?;
    RepresentativePair::select(&dist, selector)
}

/// Pair container layout used by `select` outputs.
pub fn pair_to_container(pair: &RepresentativePair) -> Container {
    let mut c = Container::new();
    c.insert("normal", pair.normal.clone()).unwrap();
    c.insert("abnormal", pair.abnormal.clone()).unwrap();
    let prov = vec![
        pair.normal_provenance.used as f64,
        pair.normal_provenance.discarded as f64,
        if pair.normal_provenance.fallback { 1.0 } else { 0.0 },
        pair.abnormal_provenance.used as f64,
        pair.abnormal_provenance.discarded as f64,
        if pair.abnormal_provenance.fallback { 1.0 } else { 0.0 },
    ];
    c.insert(
        "provenance",
        zsad_core::tensor::Tensor::from_vec(&[6], prov),
    )
    .unwrap();
    c
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

pub fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}
