use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gtf;
use crate::synth::{SceneSpec, SegSample};
use crate::tensor::Tensor;

const INDEX_FILE: &str = "index.json";

/// `index.json` of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub count: usize,
    pub spec: SceneSpec,
    pub seed: u64,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptFile {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Writes `NNNN.img.gtf` / `NNNN.lab.gtf` per sample plus `index.json`.
/// Labels are stored as `f32` integers.
pub fn save_dataset(samples: &[SegSample], spec: &SceneSpec, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        gtf::save(&dir.join(format!("{i:04}.img.gtf")), &s.image)?;
        let lab = Tensor::new(&[s.height(), s.width()], s.label.iter().map(|&l| l as f64).collect())?;
        gtf::save(&dir.join(format!("{i:04}.lab.gtf")), &lab)?;
    }
    let index = DatasetIndex {
        count: samples.len(),
        spec: spec.clone(),
        seed: spec.seed,
    };
    fs::write(dir.join(INDEX_FILE), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetIndex, Vec<SegSample>)> {
    let index_path = dir.join(INDEX_FILE);
    let index: DatasetIndex =
        serde_json::from_str(&fs::read_to_string(&index_path)?).map_err(|e| corrupt(&index_path, e.to_string()))?;
    let on_disk = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().ends_with(".img.gtf"))
        .count();
    if on_disk != index.count {
        return Err(corrupt(
            &index_path,
            format!("index lists {} samples, directory holds {on_disk}", index.count),
        ));
    }
    let (h, w) = (index.spec.height, index.spec.width);
    let mut samples = Vec::with_capacity(index.count);
    for i in 0..index.count {
        let img_path = dir.join(format!("{i:04}.img.gtf"));
        let lab_path = dir.join(format!("{i:04}.lab.gtf"));
        if !img_path.exists() || !lab_path.exists() {
            return Err(corrupt(&img_path, format!("sample {i} is missing")));
        }
        let image = gtf::load(&img_path)?;
        if image.shape() != [3, h, w] {
            return Err(corrupt(
                &img_path,
                format!("shape {:?}, index says [3, {h}, {w}]", image.shape()),
            ));
        }
        let lab = gtf::load(&lab_path)?;
        if lab.shape() != [h, w] {
            return Err(corrupt(
                &lab_path,
                format!("shape {:?}, index says [{h}, {w}]", lab.shape()),
            ));
        }
        let label = lab
            .data()
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                    Ok(v as u8)
                } else {
                    Err(corrupt(&lab_path, format!("label value {v} is not a byte")))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        samples.push(SegSample { image, label });
    }
    Ok((index, samples))
}
