//! Oracle-scored evaluation: accuracy per cell, diversity, and the α sweep.
//!
//! Seed `k` of cell `c` always uses noise label `c.index() << 16 | k` and the
//! style reference of the cell's `k`-th sample (cycling), so runs that differ
//! only in α, adapter scale or the aligner bypass are paired image by image.

use std::fmt::Write as _;

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{sample_images, ModelConfig, SampleRequest, SampleSettings};
use crate::params::ParamSet;
use crate::toy_world::dataset::Dataset;
use crate::toy_world::encoders::caption_for;
use crate::toy_world::oracle::oracle_classify;
use crate::toy_world::render::{Cell, CONTENTS, STYLES};

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub cell: Cell,
    /// Oracle style predictions, counted by style id.
    pub style_counts: [usize; STYLES],
    /// Oracle content predictions, counted by content id.
    pub content_counts: [usize; CONTENTS],
}

impl CellResult {
    pub fn samples(&self) -> usize {
        self.style_counts.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Accuracy {
    pub cells: Vec<CellResult>,
    pub style: f64,
    pub content: f64,
}

impl Accuracy {
    fn from_cells(cells: Vec<CellResult>) -> Self {
        let n: usize = cells.iter().map(CellResult::samples).sum();
        let hit_s: usize = cells.iter().map(|c| c.style_counts[c.cell.style]).sum();
        let hit_c: usize = cells.iter().map(|c| c.content_counts[c.cell.content]).sum();
        let frac = |h: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
        Accuracy {
            style: frac(hit_s),
            content: frac(hit_c),
            cells,
        }
    }

    /// Style confusion matrix, rows = requested style, columns = oracle style.
    pub fn style_confusion(&self) -> [[usize; STYLES]; STYLES] {
        let mut m = [[0; STYLES]; STYLES];
        for c in &self.cells {
            for (j, n) in c.style_counts.iter().enumerate() {
                m[c.cell.style][j] += n;
            }
        }
        m
    }

    pub fn content_confusion(&self) -> [[usize; CONTENTS]; CONTENTS] {
        let mut m = [[0; CONTENTS]; CONTENTS];
        for c in &self.cells {
            for (j, n) in c.content_counts.iter().enumerate() {
                m[c.cell.content][j] += n;
            }
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub diversity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Trend {
    /// Spearman rank correlation of diversity against α.
    pub spearman: f64,
    /// Adjacent α pairs where diversity goes down.
    pub inversions: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub accuracy: Option<Accuracy>,
    pub sweep: Vec<SweepRow>,
    pub trend: Option<Trend>,
    pub runtime_s: f64,
    pub config_echo: String,
}

/// Requests for `seeds` images of each cell.
pub fn requests(ds: &Dataset, cells: &[Cell], seeds: usize, with_reference: bool) -> Result<Vec<SampleRequest>> {
    let mut out = Vec::with_capacity(cells.len() * seeds);
    for &cell in cells {
        let samples = ds.cell_samples(cell);
        if samples.is_empty() {
            return Err(Error::Contract(format!("dataset has no samples of cell {cell}")));
        }
        for k in 0..seeds {
            let style_ref = if with_reference {
                Some(ds.image(&samples[k % samples.len()].style_ref)?.clone())
            } else {
                None
            };
            out.push(SampleRequest {
                caption: caption_for(cell.content),
                style_ref,
                noise_label: ((cell.index() as u64) << 16) | k as u64,
            });
        }
    }
    Ok(out)
}

/// Samples `seeds` images per cell and scores them with the oracle.
/// Without a reference the images come from the caption alone.
pub fn eval_accuracy(
    cfg: &ModelConfig,
    params: &ParamSet<f32>,
    sched: &NoiseSchedule,
    ds: &Dataset,
    cells: &[Cell],
    seeds: usize,
    with_reference: bool,
    settings: &SampleSettings,
) -> Result<Accuracy> {
    let reqs = requests(ds, cells, seeds, with_reference)?;
    let images = sample_images(cfg, params, sched, &reqs, settings)?.images;
    Ok(score(cells, seeds, &images))
}

/// Oracle tallies for images laid out cell-major, `seeds` per cell.
pub fn score(cells: &[Cell], seeds: usize, images: &[Image]) -> Accuracy {
    let results = cells
        .iter()
        .zip(images.chunks(seeds.max(1)))
        .map(|(&cell, imgs)| {
            let mut r = CellResult {
                cell,
                style_counts: [0; STYLES],
                content_counts: [0; CONTENTS],
            };
            for img in imgs {
                let label = oracle_classify(img);
                r.style_counts[label.style] += 1;
                r.content_counts[label.content] += 1;
            }
            r
        })
        .collect();
    Accuracy::from_cells(results)
}

/// Mean pairwise Euclidean pixel distance within a group; 0 for fewer than two images.
pub fn diversity(images: &[Image]) -> f64 {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            sum += images[i].sq_distance(&images[j]).sqrt();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum / pairs as f64
    }
}

/// One prompt per cell, the cell's caption with the style reference of its
/// first sample, repeated over `seeds` noise seeds.
pub fn prompt_requests(ds: &Dataset, cells: &[Cell], seeds: usize) -> Result<Vec<SampleRequest>> {
    let mut out = Vec::with_capacity(cells.len() * seeds);
    for &cell in cells {
        let first = ds
            .cell_samples(cell)
            .first()
            .copied()
            .ok_or_else(|| Error::Contract(format!("dataset has no samples of cell {cell}")))?;
        let style_ref = ds.image(&first.style_ref)?.clone();
        for k in 0..seeds {
            out.push(SampleRequest {
                caption: caption_for(cell.content),
                style_ref: Some(style_ref.clone()),
                noise_label: ((cell.index() as u64) << 16) | k as u64,
            });
        }
    }
    Ok(out)
}

/// Diversity per α: mean pairwise distance over the seeds of each cell's
/// prompt, averaged over cells. Every α reuses the same requests.
pub fn alpha_sweep(
    cfg: &ModelConfig,
    params: &ParamSet<f32>,
    sched: &NoiseSchedule,
    ds: &Dataset,
    cells: &[Cell],
    seeds: usize,
    alphas: &[f64],
    settings: &SampleSettings,
) -> Result<(Vec<SweepRow>, Trend)> {
    if alphas.is_empty() {
        return Err(Error::Contract("alpha sweep needs at least one alpha".into()));
    }
    let reqs = prompt_requests(ds, cells, seeds)?;
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut s = settings.clone();
        s.fusion.alpha = alpha;
        let images = sample_images(cfg, params, sched, &reqs, &s)?.images;
        let per_cell: Vec<f64> = images.chunks(seeds.max(1)).map(diversity).collect();
        let mean = per_cell.iter().sum::<f64>() / per_cell.len() as f64;
        rows.push(SweepRow { alpha, diversity: mean });
    }
    let trend = trend(&rows);
    Ok((rows, trend))
}

pub fn trend(rows: &[SweepRow]) -> Trend {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
    let a: Vec<f64> = sorted.iter().map(|r| r.alpha).collect();
    let d: Vec<f64> = sorted.iter().map(|r| r.diversity).collect();
    Trend {
        spearman: spearman(&a, &d),
        inversions: d.windows(2).filter(|w| w[1] < w[0]).count(),
    }
}

/// Ranks starting at 1, ties sharing their mean rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = mean;
        }
        i = j + 1;
    }
    r
}

/// Spearman correlation (Pearson on ranks). Zero when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl EvalReport {
    /// Human-readable summary.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if !self.label.is_empty() {
            let _ = writeln!(s, "== {} ==", self.label);
        }
        if let Some(a) = &self.accuracy {
            let _ = writeln!(s, "style accuracy   {:.4}", a.style);
            let _ = writeln!(s, "content accuracy {:.4}", a.content);
            let _ = writeln!(s, "cell  n   style counts      content counts");
            for c in &a.cells {
                let _ = writeln!(
                    s,
                    "{:<5} {:<3} {:<17} {}",
                    c.cell.to_string(),
                    c.samples(),
                    join(&c.style_counts),
                    join(&c.content_counts)
                );
            }
            let _ = writeln!(s, "style confusion (rows requested, columns predicted)");
            for row in a.style_confusion() {
                let _ = writeln!(s, "  {}", join(&row));
            }
            let _ = writeln!(s, "content confusion (rows requested, columns predicted)");
            for row in a.content_confusion() {
                let _ = writeln!(s, "  {}", join(&row));
            }
        }
        if !self.sweep.is_empty() {
            let _ = writeln!(s, "alpha  diversity");
            for r in &self.sweep {
                let _ = writeln!(s, "{:<6} {:.4}", r.alpha, r.diversity);
            }
        }
        if let Some(t) = self.trend {
            let _ = writeln!(s, "spearman {:.4}  adjacent inversions {}", t.spearman, t.inversions);
        }
        let _ = writeln!(s, "runtime {:.1} s", self.runtime_s);
        s
    }

    /// Line-oriented `key=value` form.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        if !self.label.is_empty() {
            let _ = writeln!(s, "label={}", self.label);
        }
        if let Some(a) = &self.accuracy {
            let _ = writeln!(s, "style_accuracy={}", a.style);
            let _ = writeln!(s, "content_accuracy={}", a.content);
            for c in &a.cells {
                let _ = writeln!(s, "cell.{}.style_counts={}", c.cell, join(&c.style_counts));
                let _ = writeln!(s, "cell.{}.content_counts={}", c.cell, join(&c.content_counts));
            }
            for (i, row) in a.style_confusion().iter().enumerate() {
                let _ = writeln!(s, "confusion.style.{i}={}", join(row));
            }
            for (i, row) in a.content_confusion().iter().enumerate() {
                let _ = writeln!(s, "confusion.content.{i}={}", join(row));
            }
        }
        for r in &self.sweep {
            let _ = writeln!(s, "diversity.{}={}", r.alpha, r.diversity);
        }
        if let Some(t) = self.trend {
            let _ = writeln!(s, "trend.spearman={}", t.spearman);
            let _ = writeln!(s, "trend.inversions={}", t.inversions);
        }
        let _ = writeln!(s, "runtime_s={}", self.runtime_s);
        for line in self.config_echo.lines().filter(|l| !l.trim().is_empty()) {
            if let Some((k, v)) = line.split_once('=') {
                let _ = writeln!(s, "config.{}={}", k.trim(), v.trim());
            }
        }
        s
    }
}

/// Reads one value out of a `key=value` report.
pub fn kv_get<'a>(report: &'a str, key: &str) -> Option<&'a str> {
    report.lines().find_map(|l| l.split_once('=').filter(|(k, _)| *k == key).map(|(_, v)| v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_world::render::{render, Placement};

    #[test]
    fn sweep_prompts_fix_the_reference_and_vary_the_seed() {
        let ds = crate::toy_world::gen_dataset(3, 1, &[]).unwrap();
        let cells = [Cell { style: 1, content: 2 }, Cell { style: 3, content: 0 }];
        let reqs = prompt_requests(&ds, &cells, 4).unwrap();
        assert_eq!(reqs.len(), 8);
        for group in reqs.chunks(4) {
            assert!(group.iter().all(|r| r.style_ref == group[0].style_ref && r.caption == group[0].caption));
            let mut labels: Vec<u64> = group.iter().map(|r| r.noise_label).collect();
            labels.dedup();
            assert_eq!(labels.len(), 4);
        }
        assert_ne!(reqs[0].caption, reqs[4].caption);
    }

    #[test]
    fn ranks_and_spearman() {
        assert_eq!(ranks(&[3.0, 1.0, 2.0, 1.0]), vec![4.0, 1.5, 3.0, 1.5]);
        let a = [0.2, 0.4, 0.6, 0.8, 1.0];
        assert!((spearman(&a, &[1.0, 2.0, 3.0, 4.0, 5.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &[5.0, 4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        // one swap among five: 1 - 6*2/(5*24) = 0.9
        assert!((spearman(&a, &[1.0, 2.0, 3.0, 5.0, 4.0]) - 0.9).abs() < 1e-12);
        assert_eq!(spearman(&a, &[1.0; 5]), 0.0);
    }

    #[test]
    fn trend_counts_inversions_in_alpha_order() {
        let rows = [(1.0, 3.0), (0.2, 1.0), (0.6, 2.5), (0.4, 2.0), (0.8, 3.5)]
            .map(|(alpha, diversity)| SweepRow { alpha, diversity });
        let t = trend(&rows);
        assert_eq!(t.inversions, 1);
        assert!((t.spearman - 0.9).abs() < 1e-12);
    }

    #[test]
    fn diversity_of_single_and_identical_images_is_zero() {
        let a = Image::filled(4, 4, [0.1, 0.2, 0.3]);
        assert_eq!(diversity(&[a.clone()]), 0.0);
        assert_eq!(diversity(&[a.clone(), a.clone(), a.clone()]), 0.0);
        let b = Image::filled(4, 4, [0.1, 0.2, 0.5]);
        // 16 pixels differing by 0.2 in one channel
        let d = (16.0f64 * 0.04).sqrt();
        let got = diversity(&[a.clone(), b.clone()]);
        assert!((got - d).abs() < 1e-6, "{got}");
        assert!((diversity(&[a.clone(), a, b]) - 2.0 * d / 3.0).abs() < 1e-6);
    }

    #[test]
    fn scoring_clean_renders_is_perfect_and_confusions_sum_up() {
        let cells = vec![Cell { style: 1, content: 2 }, Cell { style: 3, content: 0 }];
        let images: Vec<Image> = cells
            .iter()
            .flat_map(|&c| std::iter::repeat(render(c, &Placement::nominal())).take(3))
            .collect();
        let acc = score(&cells, 3, &images);
        assert_eq!((acc.style, acc.content), (1.0, 1.0));
        assert_eq!(acc.style_confusion()[1][1], 3);
        assert_eq!(acc.content_confusion()[0][0], 3);
        let total: usize = acc.style_confusion().iter().flatten().sum();
        assert_eq!(total, 6);

        let swapped = score(&cells, 3, &images.iter().rev().cloned().collect::<Vec<_>>());
        assert_eq!((swapped.style, swapped.content), (0.0, 0.0));
        assert_eq!(swapped.style_confusion()[1][3], 3);
    }

    #[test]
    fn report_forms_carry_the_numbers() {
        let cells = vec![Cell { style: 0, content: 0 }];
        let images = vec![render(cells[0], &Placement::nominal())];
        let report = EvalReport {
            label: "seen".into(),
            accuracy: Some(score(&cells, 1, &images)),
            sweep: vec![SweepRow { alpha: 0.2, diversity: 1.5 }],
            trend: Some(Trend { spearman: 1.0, inversions: 0 }),
            runtime_s: 2.0,
            config_echo: "seed = 4\n".into(),
        };
        let kv = report.to_kv();
        assert_eq!(kv_get(&kv, "style_accuracy"), Some("1"));
        assert_eq!(kv_get(&kv, "diversity.0.2"), Some("1.5"));
        assert_eq!(kv_get(&kv, "cell.0:0.style_counts"), Some("1,0,0,0"));
        assert_eq!(kv_get(&kv, "config.seed"), Some("4"));
        let text = report.to_text();
        assert!(text.contains("style accuracy   1.0000"));
        assert!(text.contains("spearman 1.0000"));
    }
}
