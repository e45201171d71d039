//! Styled-shapes dataset generation, manifest and on-disk layout.
//!
//! ```text
//! <dir>/manifest.tsv
//! <dir>/train/s{style}_c{content}_{k}.ppm
//! <dir>/holdout/s{style}_c{content}_{k}.ppm
//! ```
//!
//! Manifest lines are `path<TAB>style<TAB>content<TAB>caption<TAB>style_ref`
//! with paths relative to the dataset directory and the caption as
//! space-separated vocabulary words. Every style reference is a training
//! image of the same style and a different content.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{streams, RngStream};

use super::encoders::{caption_for, caption_words, parse_caption};
use super::oracle::oracle_classify;
use super::render::{render, Cell, Placement, CONTENTS, STYLES};

pub const DEFAULT_SAMPLES_PER_CELL: usize = 64;
pub const DEFAULT_HOLDOUT: &str = "1:2,3:0,0:3";
pub const MANIFEST: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Path relative to the dataset directory.
    pub path: String,
    pub cell: Cell,
    pub caption: Vec<usize>,
    /// Relative path of the style reference (always a training image).
    pub style_ref: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub holdout: Vec<Sample>,
    /// Pixels of every image, keyed by relative path.
    pub images: BTreeMap<String, Image>,
}

/// Rejects holdout sets that leave a style with fewer than two training
/// contents (no valid style reference) or a content with no training style.
pub fn validate_holdout(holdout: &[Cell]) -> Result<()> {
    for s in 0..STYLES {
        let kept = (0..CONTENTS).filter(|&c| !holdout.contains(&Cell { style: s, content: c })).count();
        if kept < 2 {
            return Err(Error::Contract(format!(
                "holdout leaves style {s} with {kept} training contents; at least 2 are needed"
            )));
        }
    }
    for c in 0..CONTENTS {
        if (0..STYLES).all(|s| holdout.contains(&Cell { style: s, content: c })) {
            return Err(Error::Contract(format!("holdout covers every style of content {c}")));
        }
    }
    Ok(())
}

fn file_name(dir: &str, cell: Cell, k: usize) -> String {
    format!("{dir}/s{}_c{}_{k:03}.ppm", cell.style, cell.content)
}

/// Renders the full grid. Holdout cells go to the holdout split only; every
/// render is checked against the oracle.
pub fn gen_dataset(samples_per_cell: usize, seed: u64, holdout: &[Cell]) -> Result<Dataset> {
    if samples_per_cell == 0 {
        return Err(Error::Contract("samples_per_cell must be at least 1".into()));
    }
    validate_holdout(holdout)?;
    let root = RngStream::new(seed, streams::DATA);
    let mut images = BTreeMap::new();
    let mut cells: Vec<(Cell, Vec<String>)> = Vec::new();
    for cell in Cell::all() {
        let dir = if holdout.contains(&cell) { "holdout" } else { "train" };
        let mut rng = root.split(cell.index() as u64);
        let mut paths = Vec::with_capacity(samples_per_cell);
        for k in 0..samples_per_cell {
            let img = render(cell, &Placement::jittered(&mut rng));
            let label = oracle_classify(&img);
            if (label.style, label.content) != (cell.style, cell.content) {
                return Err(Error::Invariant(format!(
                    "oracle labels render {k} of cell {cell} as {}:{}",
                    label.style, label.content
                )));
            }
            let path = file_name(dir, cell, k);
            images.insert(path.clone(), img);
            paths.push(path);
        }
        cells.push((cell, paths));
    }

    let mut train = Vec::new();
    let mut held = Vec::new();
    for (cell, paths) in &cells {
        let pool: Vec<&String> = cells
            .iter()
            .filter(|(c, _)| c.style == cell.style && c.content != cell.content && !holdout.contains(c))
            .flat_map(|(_, p)| p.iter())
            .collect();
        let mut rng = root.split(1000 + cell.index() as u64);
        for path in paths {
            let sample = Sample {
                path: path.clone(),
                cell: *cell,
                caption: caption_for(cell.content),
                style_ref: pool[rng.below(pool.len() as u64) as usize].clone(),
            };
            if holdout.contains(cell) {
                held.push(sample);
            } else {
                train.push(sample);
            }
        }
    }
    Ok(Dataset {
        train,
        holdout: held,
        images,
    })
}

impl Dataset {
    pub fn image(&self, path: &str) -> Result<&Image> {
        self.images
            .get(path)
            .ok_or_else(|| Error::Format(format!("dataset has no image {path}")))
    }

    /// Cells that appear only in the holdout split.
    pub fn holdout_cells(&self) -> Vec<Cell> {
        let mut cells: Vec<Cell> = self.holdout.iter().map(|s| s.cell).collect();
        cells.sort();
        cells.dedup();
        cells
    }

    pub fn train_cells(&self) -> Vec<Cell> {
        let mut cells: Vec<Cell> = self.train.iter().map(|s| s.cell).collect();
        cells.sort();
        cells.dedup();
        cells
    }

    /// Samples of one cell from either split, in file order.
    pub fn cell_samples(&self, cell: Cell) -> Vec<&Sample> {
        self.train.iter().chain(&self.holdout).filter(|s| s.cell == cell).collect()
    }

    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for s in self.train.iter().chain(&self.holdout) {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                s.path,
                s.cell.style,
                s.cell.content,
                caption_words(&s.caption),
                s.style_ref
            ));
        }
        out
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for sub in ["train", "holdout"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for (path, img) in &self.images {
            img.save_ppm(dir.join(path))?;
        }
        let m = dir.join(MANIFEST);
        fs::write(&m, self.manifest()).map_err(|e| Error::io(&m, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let m = dir.join(MANIFEST);
        let text = fs::read_to_string(&m).map_err(|e| Error::io(&m, e))?;
        let mut ds = Dataset {
            train: Vec::new(),
            holdout: Vec::new(),
            images: BTreeMap::new(),
        };
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |what: &str| Error::Format(format!("{}:{}: {what}", m.display(), n + 1));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad("expected 5 tab-separated fields"));
            }
            let style = f[1].parse().map_err(|_| bad("bad style id"))?;
            let content = f[2].parse().map_err(|_| bad("bad content id"))?;
            if style >= STYLES || content >= CONTENTS {
                return Err(bad("cell outside the grid"));
            }
            let sample = Sample {
                path: f[0].to_string(),
                cell: Cell { style, content },
                caption: parse_caption(f[3])?,
                style_ref: f[4].to_string(),
            };
            for p in [&sample.path, &sample.style_ref] {
                if !ds.images.contains_key(p.as_str()) {
                    ds.images.insert(p.clone(), Image::load_ppm(dir.join(p))?);
                }
            }
            if sample.path.starts_with("holdout/") {
                ds.holdout.push(sample);
            } else {
                ds.train.push(sample);
            }
        }
        if ds.train.is_empty() {
            return Err(Error::Format(format!("{} lists no training samples", m.display())));
        }
        Ok(ds)
    }
}
