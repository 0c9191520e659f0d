use std::collections::HashMap;
use std::path::Path;

use sslseg_core::data::{
    generate_subject, load_volume, save_volume, split_manifest, Manifest, Split, SplitCounts, SubjectEntry, Volume,
};
use sslseg_core::par;

use crate::config::ExperimentConfig;
use crate::{CliError, Result};

/// Subject volumes grouped by split.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub pretrain: Vec<Volume>,
    pub train: Vec<Volume>,
    pub val: Vec<Volume>,
    pub test: Vec<Volume>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Volume] {
        match split {
            Split::Pretrain => &self.pretrain,
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn counts(config: &ExperimentConfig) -> SplitCounts {
    let d = &config.dataset;
    SplitCounts { train: d.train, val: d.val, test: d.test }
}

/// Phantom subjects `0..labeled` carry labels; the following `unlabeled`
/// subjects form the pretraining pool.
fn phantom_subjects(config: &ExperimentConfig) -> Result<Vec<Volume>> {
    let d = &config.dataset;
    let phantom = d.phantom();
    let total = d.labeled_subjects + d.unlabeled_subjects;
    let volumes: Vec<_> = par::map_indexed(total, |i| generate_subject(&phantom, i));
    volumes
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let mut v = v?;
            if i >= d.labeled_subjects {
                v.labels = None;
            }
            Ok(v)
        })
        .collect()
}

fn entry(v: &Volume, file: String) -> SubjectEntry {
    SubjectEntry { subject_id: v.subject_id.clone(), labels: v.labels.as_ref().map(|_| file.clone()), volume: file }
}

fn manifest_params(config: &ExperimentConfig) -> Vec<(String, String)> {
    let d = &config.dataset;
    [
        ("height", d.height.to_string()),
        ("width", d.width.to_string()),
        ("slices", d.slices.to_string()),
        ("organ_count", format!("{}..{}", d.organ_count[0], d.organ_count[1])),
        ("area_fraction", format!("{}..{}", d.area_fraction[0], d.area_fraction[1])),
        ("texture_noise", d.texture_noise.to_string()),
        ("intensity_variation", d.intensity_variation.to_string()),
        ("phantom_seed", d.seed.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn assemble(manifest: &Manifest, mut volumes: HashMap<String, Volume>) -> Result<Dataset> {
    let mut data = Dataset::default();
    for r in &manifest.records {
        let v = volumes
            .remove(&r.subject.subject_id)
            .ok_or_else(|| CliError::Data(format!("subject {} has no volume", r.subject.subject_id)))?;
        match r.split {
            Split::Pretrain => data.pretrain.push(v),
            Split::Train => data.train.push(v),
            Split::Val => data.val.push(v),
            Split::Test => data.test.push(v),
        }
    }
    Ok(data)
}

fn read_manifest_volumes(manifest: &Manifest, base: &Path) -> Result<HashMap<String, Volume>> {
    let mut out = HashMap::new();
    for r in &manifest.records {
        let s = &r.subject;
        let mut v = load_volume(&base.join(&s.volume))?;
        if v.subject_id != s.subject_id {
            return Err(CliError::Data(format!("{} holds subject {}, manifest says {}", s.volume, v.subject_id, s.subject_id)));
        }
        match &s.labels {
            Some(l) if *l != s.volume => {
                let lv = load_volume(&base.join(l))?;
                if lv.slices.shape() != v.slices.shape() {
                    return Err(CliError::Data(format!("label file {l} does not match volume {}", s.volume)));
                }
                v.labels = Some(lv.labels.ok_or_else(|| CliError::Data(format!("label file {l} has no labels")))?);
            }
            Some(_) if v.labels.is_none() => {
                return Err(CliError::Data(format!("{} was listed as labeled but has no labels", s.volume)));
            }
            Some(_) => {}
            None => v.labels = None,
        }
        out.insert(s.subject_id.clone(), v);
    }
    Ok(out)
}

/// Loads the manifest-listed files, or generates phantoms and splits them
/// exactly as `gen-data` would.
pub fn load_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    if let Some(path) = &config.dataset.manifest {
        let manifest = Manifest::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let volumes = read_manifest_volumes(&manifest, base)?;
        return assemble(&manifest, volumes);
    }
    let volumes = phantom_subjects(config)?;
    let entries: Vec<SubjectEntry> = volumes.iter().map(|v| entry(v, format!("{}.sslvol", v.subject_id))).collect();
    let manifest = split_manifest(&entries, counts(config), config.dataset.split_seed)?;
    assemble(&manifest, volumes.into_iter().map(|v| (v.subject_id.clone(), v)).collect())
}

/// Writes every phantom subject as an SSLVOL1 file under `dir` together with
/// `manifest.txt`; returns the manifest.
pub fn generate_data(config: &ExperimentConfig, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let volumes = phantom_subjects(config)?;
    let mut entries = Vec::with_capacity(volumes.len());
    for v in &volumes {
        let file = format!("{}.sslvol", v.subject_id);
        save_volume(&dir.join(&file), v)?;
        entries.push(entry(v, file));
    }
    let mut manifest = split_manifest(&entries, counts(config), config.dataset.split_seed)?;
    manifest.params = manifest_params(config);
    manifest.save(&dir.join("manifest.txt"))?;
    Ok(manifest)
}
