//! Materializes a dataset as archives plus a statistics report.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use thin_core::config::{DatasetName, ExoTarget, Limits};
use thin_core::data::archive::{write_archive, ArchiveHeader};
use thin_core::data::{SampleSet, Split};

use crate::runs::{write_json, Harness};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub label_histogram: Vec<u64>,
    /// Class histograms of the exogenous variables present, keyed by name.
    pub exo_histograms: BTreeMap<String, Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub dataset: DatasetName,
    pub seed: u64,
    pub dir: PathBuf,
    pub train: SplitStats,
    pub test: SplitStats,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut r = BufReader::new(File::open(path)?);
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = r.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn export(dataset: DatasetName, seed: u64, set: &SampleSet, split: Split, dir: &Path) -> Result<SplitStats> {
    let (height, width) = set.image_size();
    let header = ArchiveHeader {
        name: dataset.to_string(),
        seed,
        count: set.len() as u64,
        height: height as u32,
        width: width as u32,
    };
    let file = format!("{}.thinds", split.as_str());
    let path = dir.join(&file);
    let mut labels = vec![0u64; dataset.num_classes()];
    let mut exo: BTreeMap<String, Vec<u64>> = dataset
        .exo_targets()
        .iter()
        .map(|t| (t.to_string(), vec![0u64; t.num_classes()]))
        .collect();
    write_archive(
        &path,
        &header,
        set.iter().inspect(|s| {
            labels[s.task_label] += 1;
            for t in ExoTarget::ALL {
                if let (Some(c), Some(h)) = (s.exo_class(*t), exo.get_mut(t.as_str())) {
                    h[c] += 1;
                }
            }
        }),
    )?;
    Ok(SplitStats {
        sha256: sha256_file(&path)?,
        bytes: fs::metadata(&path)?.len(),
        file,
        count: set.len(),
        height,
        width,
        label_histogram: labels,
        exo_histograms: exo,
    })
}

/// Writes `<out>/data/<dataset>-seed<seed>/{train,test}.thinds` and `stats.json`.
pub fn generate(h: &Harness, dataset: DatasetName, seed: u64, limits: &Limits) -> Result<DatasetStats> {
    let ds = h.dataset(dataset, seed, limits)?;
    let dir = h.out_dir.join("data").join(format!("{dataset}-seed{seed}"));
    fs::create_dir_all(&dir)?;
    let stats = DatasetStats {
        dataset,
        seed,
        train: export(dataset, seed, &ds.train, Split::Train, &dir)?,
        test: export(dataset, seed, &ds.test, Split::Test, &dir)?,
        dir: dir.clone(),
    };
    write_json(&dir.join("stats.json"), &stats)?;
    Ok(stats)
}
