//! Per-layer token cosine similarity of saved models on one fixed batch.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vitstem::diagnostics::layer_diversity;
use vitstem::model::Model;
use vitstem::train::load_dataset;
use vitstem::Tensor;

use crate::svg;

/// Where the probe batch comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum ProbeSource {
    /// The first `n` validation images of a dataset descriptor.
    Dataset(String),
    /// Images whose every (standardized) pixel equals the value.
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileSeries {
    /// Legend entry: the model's stem string.
    pub label: String,
    pub checkpoint: String,
    pub layers: Vec<String>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub batch: String,
    pub series: Vec<ProfileSeries>,
}

fn probe_batch(source: &ProbeSource, n: usize, image_size: usize) -> Result<(Tensor, String)> {
    match source {
        ProbeSource::Dataset(desc) => {
            let ds = load_dataset(desc)?;
            if ds.image_size() != image_size {
                bail!(
                    "checkpoint expects {image_size}×{image_size} images but {desc} has {}×{}",
                    ds.image_size(),
                    ds.image_size()
                );
            }
            let idx: Vec<usize> = (0..n.min(ds.val.len())).collect();
            Ok((ds.batch(&ds.val, &idx), format!("{desc}[0..{}]", idx.len())))
        }
        ProbeSource::Constant(v) => Ok((
            Tensor::full(&[n, 3, image_size, image_size], *v),
            format!("constant({v})×{n}"),
        )),
    }
}

/// Profile each checkpoint on the same batch. All checkpoints must share an
/// image size and layer layout so their curves are comparable.
pub fn profile(checkpoints: &[PathBuf], source: &ProbeSource, n: usize) -> Result<Profile> {
    if checkpoints.is_empty() {
        bail!("at least one checkpoint is required");
    }
    if n == 0 {
        bail!("probe batch must hold at least one image");
    }
    let mut models = Vec::new();
    for path in checkpoints {
        let m = Model::load(path).with_context(|| format!("loading {}", path.display()))?;
        models.push((path, m));
    }
    let size = models[0].1.config.image_size;
    if let Some((p, m)) = models.iter().find(|(_, m)| m.config.image_size != size) {
        bail!(
            "{} uses {}px images but {} uses {size}px",
            p.display(),
            m.config.image_size,
            checkpoints[0].display()
        );
    }
    let (images, batch) = probe_batch(source, n, size)?;
    let mut series: Vec<ProfileSeries> = Vec::new();
    for (path, mut model) in models {
        let (_, trace) = model.predict(&images, true)?;
        let trace = trace.context("model returned no layer trace")?;
        let prof = layer_diversity(&trace, true, batch.clone())?;
        series.push(ProfileSeries {
            label: model.config.stem.clone(),
            checkpoint: path.display().to_string(),
            layers: prof.entries.iter().map(|e| e.label.clone()).collect(),
            values: prof.values(),
        });
    }
    if let Some(s) = series.iter().find(|s| s.layers != series[0].layers) {
        bail!(
            "{} has layers {:?}, {} has {:?}; profiles are not comparable",
            s.checkpoint,
            s.layers,
            series[0].checkpoint,
            series[0].layers
        );
    }
    Ok(Profile { batch, series })
}

impl Profile {
    pub fn to_svg(&self) -> String {
        let lines: Vec<svg::Line> = self
            .series
            .iter()
            .map(|s| svg::Line {
                label: &s.label,
                values: &s.values,
            })
            .collect();
        let x = self.series.first().map(|s| s.layers.clone()).unwrap_or_default();
        svg::line_chart(
            &format!("token cosine similarity — {}", self.batch),
            &x,
            "cos_sim",
            &lines,
        )
    }

    /// Long format: `checkpoint,label,layer_index,layer,cos_sim`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["checkpoint", "label", "layer_index", "layer", "cos_sim"])?;
        for s in &self.series {
            for (i, (l, v)) in s.layers.iter().zip(&s.values).enumerate() {
                w.write_record([&s.checkpoint, &s.label, &i.to_string(), l, &v.to_string()])?;
            }
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join("profile.svg"), self.to_svg())?;
        std::fs::write(dir.join("profile.csv"), self.to_csv()?)?;
        std::fs::write(dir.join("profile.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
