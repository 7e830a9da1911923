//! Dataset generation to disk and loading back, keyed by a manifest.
//!
//! Dense images are stored as raw `f32` so a dataset read from disk trains
//! exactly like one regenerated in memory. Label maps and opponent classes
//! are 8-bit PGM files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use mmnets::data::{
    make_opponent_splits, make_splits, read_image, read_labels, read_manifest, write_image, write_labels, write_manifest,
    DatasetSplit, ImageFormat, ManifestEntry, OpponentConfig, OpponentSample, OpponentSplit, RdSample, RsSample, SceneConfig,
    TripletSample,
};
use mmnets::metrics::OpponentOracle;
use mmnets::tensor::Tensor;
use mmnets::trainer::TaskData;

use crate::config::{ExperimentConfig, TaskKind};

pub const MANIFEST: &str = "manifest.tsv";

/// The generated data of either task.
#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Scenes(DatasetSplit),
    Opponent(OpponentSplit),
}

impl Dataset {
    pub fn generate(cfg: &ExperimentConfig) -> Dataset {
        let (h, w) = cfg.arch.input_hw;
        let d = &cfg.data;
        match d.task {
            TaskKind::Scenes => Dataset::Scenes(make_splits(
                d.n_train,
                d.n_test,
                cfg.seed,
                &SceneConfig {
                    h,
                    w,
                    classes: d.classes,
                    max_objects: d.max_objects,
                },
            )),
            TaskKind::Opponent => Dataset::Opponent(make_opponent_splits(d.n_train, d.n_test, cfg.seed, &OpponentConfig { h, w })),
        }
    }

    /// Reads `cfg.paths.data_dir` when set, otherwise regenerates from the seed.
    pub fn obtain(cfg: &ExperimentConfig) -> Result<Dataset> {
        match &cfg.paths.data_dir {
            Some(dir) => {
                let ds = Dataset::read(dir, cfg.data.task)?;
                ds.check_size(cfg.arch.input_hw)
                    .with_context(|| format!("dataset in {} does not match arch.input_hw", dir.display()))?;
                Ok(ds)
            }
            None => Ok(Dataset::generate(cfg)),
        }
    }

    fn check_size(&self, hw: (usize, usize)) -> Result<()> {
        let s = match self {
            Dataset::Scenes(d) => d.d_ds_test.first().map(|x| x.rgb.shape()),
            Dataset::Opponent(d) => d.test.first().map(|x| x.theta3.shape()),
        }
        .ok_or_else(|| anyhow!("dataset has no test samples"))?;
        if (s.h(), s.w()) != hw {
            bail!("images are {}x{}, expected {}x{}", s.h(), s.w(), hw.0, hw.1);
        }
        Ok(())
    }

    pub fn task_data(&self, classes: usize) -> Result<TaskData> {
        Ok(match self {
            Dataset::Scenes(d) => TaskData::from_scenes(d, classes)?,
            Dataset::Opponent(d) => TaskData::from_opponent(d)?,
        })
    }

    /// Classifier used to score translated Θ3 images, fitted on the
    /// training Θ3 images.
    pub fn oracle(&self) -> Result<Option<OpponentOracle>> {
        let Dataset::Opponent(d) = self else { return Ok(None) };
        let imgs: Vec<&Tensor<f32>> = d.d_13.iter().map(|s| &s.theta3).collect();
        let labels: Vec<usize> = d.d_13.iter().map(|s| s.class_label as usize).collect();
        let oracle = OpponentOracle::fit(&Tensor::stack(&imgs)?, &labels, mmnets::data::OPPONENT_CLASSES)?;
        Ok(Some(oracle))
    }

    /// Writes every sample plus the manifest; returns the number of samples.
    pub fn write(&self, dir: &Path) -> Result<usize> {
        let mut entries = Vec::new();
        let mut put = |split: &str, id: u64, files: Vec<(&str, FileData)>| -> Result<()> {
            let sub = dir.join(split);
            fs::create_dir_all(&sub).with_context(|| format!("creating {}", sub.display()))?;
            let mut listed = Vec::new();
            for (modality, data) in files {
                let rel = format!("{split}/{id:06}_{modality}.{}", data.ext());
                data.write(&dir.join(&rel))?;
                listed.push((modality.to_string(), rel));
            }
            entries.push(ManifestEntry {
                id,
                split: split.to_string(),
                files: listed,
            });
            Ok(())
        };
        match self {
            Dataset::Scenes(d) => {
                for s in &d.d_rs {
                    let hw = hw_of(&s.rgb);
                    put("rs", s.scene_id, vec![("rgb", FileData::Dense(&s.rgb)), ("seg", FileData::Labels(&s.seg, hw))])?;
                }
                for s in &d.d_rd {
                    put("rd", s.scene_id, vec![("rgb", FileData::Dense(&s.rgb)), ("depth", FileData::Dense(&s.depth))])?;
                }
                for s in &d.d_ds_test {
                    let hw = hw_of(&s.rgb);
                    put(
                        "test",
                        s.scene_id,
                        vec![
                            ("rgb", FileData::Dense(&s.rgb)),
                            ("depth", FileData::Dense(&s.depth)),
                            ("seg", FileData::Labels(&s.seg, hw)),
                        ],
                    )?;
                }
            }
            Dataset::Opponent(d) => {
                for (split, set) in [("pairs12", &d.d_12), ("pairs13", &d.d_13), ("test", &d.test)] {
                    for s in set {
                        let class = [s.class_label];
                        put(
                            split,
                            s.id,
                            vec![
                                ("theta1", FileData::Dense(&s.theta1)),
                                ("theta2", FileData::Dense(&s.theta2)),
                                ("theta3", FileData::Dense(&s.theta3)),
                                ("class", FileData::Labels(&class, (1, 1))),
                            ],
                        )?;
                    }
                }
            }
        }
        let n = entries.len();
        write_manifest(&dir.join(MANIFEST), &entries)?;
        Ok(n)
    }

    pub fn read(dir: &Path, task: TaskKind) -> Result<Dataset> {
        let manifest = dir.join(MANIFEST);
        let entries = read_manifest(&manifest).with_context(|| format!("run `mmnets gen-data` first to create {}", manifest.display()))?;
        let mut by_split: BTreeMap<&str, Vec<Files<'_>>> = BTreeMap::new();
        for e in &entries {
            by_split.entry(e.split.as_str()).or_default().push(Files { dir, entry: e });
        }
        let mut take = |split: &str| by_split.remove(split).unwrap_or_default();
        match task {
            TaskKind::Scenes => {
                let d_rs = take("rs")
                    .iter()
                    .map(|f| {
                        Ok(RsSample {
                            scene_id: f.entry.id,
                            rgb: f.dense("rgb")?,
                            seg: f.labels("seg")?,
                        })
                    })
                    .collect::<Result<_>>()?;
                let d_rd = take("rd")
                    .iter()
                    .map(|f| {
                        Ok(RdSample {
                            scene_id: f.entry.id,
                            rgb: f.dense("rgb")?,
                            depth: f.dense("depth")?,
                        })
                    })
                    .collect::<Result<_>>()?;
                let d_ds_test = take("test")
                    .iter()
                    .map(|f| {
                        Ok(TripletSample {
                            scene_id: f.entry.id,
                            rgb: f.dense("rgb")?,
                            depth: f.dense("depth")?,
                            seg: f.labels("seg")?,
                        })
                    })
                    .collect::<Result<_>>()?;
                Ok(Dataset::Scenes(DatasetSplit { d_rs, d_rd, d_ds_test }))
            }
            TaskKind::Opponent => {
                let mut set = |split: &str| -> Result<Vec<OpponentSample>> {
                    take(split)
                        .iter()
                        .map(|f| {
                            let class = f.labels("class")?;
                            Ok(OpponentSample {
                                id: f.entry.id,
                                theta1: f.dense("theta1")?,
                                theta2: f.dense("theta2")?,
                                theta3: f.dense("theta3")?,
                                class_label: *class.first().ok_or_else(|| anyhow!("empty class file for sample {}", f.entry.id))?,
                            })
                        })
                        .collect()
                };
                Ok(Dataset::Opponent(OpponentSplit {
                    d_12: set("pairs12")?,
                    d_13: set("pairs13")?,
                    test: set("test")?,
                }))
            }
        }
    }
}

fn hw_of(t: &Tensor<f32>) -> (usize, usize) {
    (t.shape().h(), t.shape().w())
}

enum FileData<'a> {
    Dense(&'a Tensor<f32>),
    Labels(&'a [u8], (usize, usize)),
}

impl FileData<'_> {
    fn ext(&self) -> &'static str {
        match self {
            FileData::Dense(_) => "mmt",
            FileData::Labels(..) => "pgm",
        }
    }

    fn write(&self, path: &Path) -> Result<()> {
        match self {
            FileData::Dense(t) => write_image(path, t, ImageFormat::Raw)?,
            FileData::Labels(l, (h, w)) => write_labels(path, l, *h, *w)?,
        }
        Ok(())
    }
}

struct Files<'a> {
    dir: &'a Path,
    entry: &'a ManifestEntry,
}

impl Files<'_> {
    fn path(&self, modality: &str) -> Result<PathBuf> {
        self.entry
            .files
            .iter()
            .find(|(m, _)| m == modality)
            .map(|(_, p)| self.dir.join(p))
            .ok_or_else(|| anyhow!("manifest entry {} ({}) has no {modality} file", self.entry.id, self.entry.split))
    }

    fn dense(&self, modality: &str) -> Result<Tensor<f32>> {
        Ok(read_image(&self.path(modality)?)?)
    }

    fn labels(&self, modality: &str) -> Result<Vec<u8>> {
        Ok(read_labels(&self.path(modality)?)?.2)
    }
}
