//! Labelled image sets stored as a directory of NetPBM files plus a
//! `labels.tsv` index (`relative/path<TAB>class-id`, one per line).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::netpbm;
use crate::raster::Image;

pub const LABELS_FILE: &str = "labels.tsv";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub paths: Vec<String>,
}

impl Dataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, paths: Vec<String>) -> Result<Self> {
        if images.len() != labels.len() || images.len() != paths.len() {
            return Err(Error::Dataset(
                "images, labels and paths differ in length".into(),
            ));
        }
        if let Some(first) = images.first() {
            let shape = (first.dims(), first.channels());
            if images.iter().any(|i| (i.dims(), i.channels()) != shape) {
                return Err(Error::Dataset("images differ in shape".into()));
            }
        }
        Ok(Self {
            images,
            labels,
            paths,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// `(width, height, channels)` of the first image.
    pub fn shape(&self) -> Option<(usize, usize, usize)> {
        self.images
            .first()
            .map(|i| (i.width(), i.height(), i.channels()))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            paths: indices.iter().map(|&i| self.paths[i].clone()).collect(),
        }
    }

    /// Indices grouped by class, in dataset order.
    pub fn by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            out.entry(l).or_default().push(i);
        }
        out
    }

    /// Stratified split: the first `train_per_class` images of every class
    /// (in dataset order) go left, the rest right.
    pub fn split_per_class(&self, train_per_class: usize) -> (Dataset, Dataset) {
        let (mut left, mut right) = (Vec::new(), Vec::new());
        for idx in self.by_class().values() {
            let k = train_per_class.min(idx.len());
            left.extend_from_slice(&idx[..k]);
            right.extend_from_slice(&idx[k..]);
        }
        left.sort_unstable();
        right.sort_unstable();
        (self.subset(&left), self.subset(&right))
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let index = std::fs::read_to_string(dir.join(LABELS_FILE))?;
        let (mut images, mut labels, mut paths) = (Vec::new(), Vec::new(), Vec::new());
        for (lineno, line) in index.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (path, label) = line.split_once('\t').ok_or_else(|| {
                Error::Dataset(format!(
                    "{LABELS_FILE}:{}: expected path<TAB>class",
                    lineno + 1
                ))
            })?;
            let label: usize = label.trim().parse().map_err(|_| {
                Error::Dataset(format!(
                    "{LABELS_FILE}:{}: bad class id {label:?}",
                    lineno + 1
                ))
            })?;
            images.push(netpbm::load_image(dir.join(path))?);
            labels.push(label);
            paths.push(path.to_string());
        }
        Self::new(images, labels, paths)
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let mut index = String::new();
        for ((img, &label), path) in self.images.iter().zip(&self.labels).zip(&self.paths) {
            let target = dir.join(path);
            if let Some(parent) = target.parent() {
                std::fs::create_dir_all(parent)?;
            }
            netpbm::save_image(&target, img)?;
            writeln!(index, "{path}\t{label}").expect("string write");
        }
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(LABELS_FILE), index)?;
        Ok(())
    }
}
