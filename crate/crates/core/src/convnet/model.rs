use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::net::{classify, extract_features, NetworkParams};
use super::spec::NetworkSpec;
use super::train::{train_network, LabeledImages, TrainConfig, TrainRunLog};
use crate::artifact;
use crate::corpus::{compute_mean_image, CorpusManifest, MeanImage, Partition, SplitAssignment};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::numerics::{Param, Tensor};

pub const MODEL_MAGIC: &[u8; 8] = b"DRAWMDL1";

/// A trained network with everything needed to classify raw pages.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub spec: NetworkSpec,
    pub params: NetworkParams,
    /// Illustrator id of each output unit.
    pub classes: Vec<u32>,
    pub mean: MeanImage,
    pub config: TrainConfig,
    pub split_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    spec: NetworkSpec,
    seeds: Seeds,
    schedule: crate::numerics::TrainingSchedule,
    flip: bool,
    eval_interval: usize,
    classes: Vec<u32>,
    mean_image: PathBuf,
    split_hash: Option<String>,
    params: Vec<(String, Vec<usize>)>,
}

#[derive(Serialize, Deserialize)]
struct Seeds {
    init: u64,
    train: u64,
}

impl TrainedModel {
    pub fn resolution(&self) -> [usize; 2] {
        [self.spec.input[1], self.spec.input[2]]
    }

    /// Resize, subtract the mean, and lay out as `[C, H, W]`.
    pub fn preprocess(&self, img: &ImageBuffer) -> Result<Tensor> {
        let img = if img.channels() == 1 {
            img.replicate(3)
        } else {
            img.clone()
        };
        let x = self.mean.preprocess(&img);
        Tensor::new(vec![x.channels(), x.height(), x.width()], x.to_planar())
    }

    /// Illustrator id and per-class probabilities.
    pub fn classify_image(&self, img: &ImageBuffer) -> Result<(u32, Vec<f64>)> {
        let (i, probs) = classify(&self.params, &self.spec, &self.preprocess(img)?)?;
        Ok((self.classes[i], probs))
    }

    pub fn classify_all(&self, images: &[ImageBuffer]) -> Result<Vec<(u32, Vec<f64>)>> {
        images
            .par_iter()
            .map(|img| self.classify_image(img))
            .collect()
    }

    pub fn features(&self, img: &ImageBuffer, tap: &str) -> Result<Tensor> {
        extract_features(&self.params, &self.spec, &self.preprocess(img)?, tap)
    }

    /// Writes the model and, beside it, `<file name>.mean`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mean_name = PathBuf::from(format!(
            "{}.mean",
            path.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "model".into())
        ));
        self.mean.save(&path.with_file_name(&mean_name))?;
        let header = ModelHeader {
            spec: self.spec.clone(),
            seeds: Seeds {
                init: self.params.init_seed,
                train: self.config.seed,
            },
            schedule: self.config.schedule.clone(),
            flip: self.config.flip,
            eval_interval: self.config.eval_interval,
            classes: self.classes.clone(),
            mean_image: mean_name,
            split_hash: self.split_hash.clone(),
            params: self
                .params
                .params
                .iter()
                .map(|p| (p.name.clone(), p.value.shape().to_vec()))
                .collect(),
        };
        let values = self
            .params
            .params
            .iter()
            .flat_map(|p| p.value.data().iter().copied());
        artifact::write_container(path, MODEL_MAGIC, &header, &artifact::f32_bytes(values))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, payload): (ModelHeader, _) = artifact::read_container(path, MODEL_MAGIC)?;
        h.spec.validate()?;
        let mut offset = 0;
        let params = h
            .params
            .into_iter()
            .map(|(name, shape)| {
                let n = shape.iter().product();
                Ok(Param {
                    name,
                    value: Tensor::new(shape, artifact::take_f32(&payload, &mut offset, n)?)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let params = NetworkParams {
            params,
            init_seed: h.seeds.init,
        };
        params.check(&h.spec)?;
        if h.classes.len() != h.spec.num_classes() {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                reason: format!(
                    "{} class ids for {} outputs",
                    h.classes.len(),
                    h.spec.num_classes()
                ),
            });
        }
        let mean_path = path.parent().unwrap_or(Path::new(".")).join(&h.mean_image);
        let mean = MeanImage::load(&mean_path)?;
        Ok(Self {
            spec: h.spec,
            params,
            classes: h.classes,
            mean,
            config: TrainConfig {
                schedule: h.schedule,
                seed: h.seeds.train,
                flip: h.flip,
                eval_interval: h.eval_interval,
            },
            split_hash: h.split_hash,
        })
    }
}

/// Pages read while training, for auditing against the test partition.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PagesRead {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Load the pages of one partition at canonical resolution.
pub fn load_partition(
    manifest: &CorpusManifest,
    split: &SplitAssignment,
    which: Partition,
    resolution: [usize; 2],
) -> Result<(Vec<String>, Vec<ImageBuffer>, Vec<u32>)> {
    let pages = split.pages(manifest, which);
    let images = pages
        .par_iter()
        .map(|p| {
            let img = manifest.load_page(p)?;
            let img = if img.channels() == 1 {
                img.replicate(3)
            } else {
                img
            };
            Ok(img.resize(resolution[0], resolution[1]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        pages.iter().map(|p| p.page_id.clone()).collect(),
        images,
        pages.iter().map(|p| p.illustrator_id).collect(),
    ))
}

/// Train on the split's train partition, selecting by validation accuracy.
/// Only train and validation pages are read.
pub fn train_from_split(
    manifest: &CorpusManifest,
    split: &SplitAssignment,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
) -> Result<(TrainedModel, TrainRunLog, PagesRead)> {
    let classes = manifest.class_ids();
    if spec.num_classes() != classes.len() {
        return Err(Error::invalid(format!(
            "network has {} outputs but the corpus has {} illustrators",
            spec.num_classes(),
            classes.len()
        )));
    }
    let res = [spec.input[1], spec.input[2]];
    let (train_ids, train_imgs, train_ids_cls) =
        load_partition(manifest, split, Partition::Train, res)?;
    let (val_ids, val_imgs, val_ids_cls) = load_partition(manifest, split, Partition::Val, res)?;
    let test: BTreeSet<&str> = split.test.iter().map(String::as_str).collect();
    assert!(
        train_ids
            .iter()
            .chain(&val_ids)
            .all(|id| !test.contains(id.as_str())),
        "training read a test page"
    );
    let index = |id: &u32| {
        classes
            .iter()
            .position(|c| c == id)
            .expect("class id from manifest")
    };
    let train_labels: Vec<usize> = train_ids_cls.iter().map(index).collect();
    let val_labels: Vec<usize> = val_ids_cls.iter().map(index).collect();
    let mean = compute_mean_image(train_imgs.iter().cloned(), res)?;
    let (params, log) = train_network(
        spec,
        &mean,
        LabeledImages {
            images: &train_imgs,
            labels: &train_labels,
        },
        LabeledImages {
            images: &val_imgs,
            labels: &val_labels,
        },
        cfg,
    )?;
    let model = TrainedModel {
        spec: spec.clone(),
        params,
        classes,
        mean,
        config: cfg.clone(),
        split_hash: split.config_hash.clone(),
    };
    Ok((
        model,
        log,
        PagesRead {
            train: train_ids,
            val: val_ids,
        },
    ))
}
