//! Datasets: manifest loading, sample I/O, augmentation, synthetic scene
//! generation, and per-dataset boundary statistics.
//!
//! A manifest is a TSV file with one `id<TAB>image_path<TAB>mask_path` line
//! per sample; paths are resolved relative to the manifest's directory and
//! samples are ordered by id.

pub mod pnm;
pub mod synth;

use std::path::{Path, PathBuf};

use crate::error::{GraftError, Result};
use crate::metrics;
use crate::rng::SplitMix64;
use crate::tensor::{kernels, Tensor};

pub use synth::{render_scene, synth_generate, Difficulty, Scene};

/// One loaded sample: image in [0,1], strictly binary mask, and the source
/// resolution (before any resizing for the network).
pub struct Sample {
    pub id: String,
    /// [3,H,W]
    pub image: Tensor<f32>,
    /// [1,H,W], values exactly 0.0 or 1.0
    pub mask: Tensor<f32>,
    pub original_hw: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
}

/// An ordered dataset backed by a manifest file.
#[derive(Debug)]
pub struct Dataset {
    entries: Vec<ManifestEntry>,
}

impl Dataset {
    /// Parses a manifest, resolves paths against its directory, verifies that
    /// every referenced file exists, and orders entries by id.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest_path)
            .map_err(|e| GraftError::io(manifest_path, e))?;
        let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(GraftError::parse(
                    manifest_path,
                    format!("line {}: want 3 tab-separated fields, got {}", lineno + 1, fields.len()),
                ));
            }
            let entry = ManifestEntry {
                id: fields[0].to_string(),
                image_path: root.join(fields[1]),
                mask_path: root.join(fields[2]),
            };
            for p in [&entry.image_path, &entry.mask_path] {
                if !p.is_file() {
                    return Err(GraftError::parse(
                        manifest_path,
                        format!("line {}: missing file {}", lineno + 1, p.display()),
                    ));
                }
            }
            entries.push(entry);
        }
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        for pair in entries.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(GraftError::parse(
                    manifest_path,
                    format!("duplicate id {:?}", pair[0].id),
                ));
            }
        }
        Ok(Dataset { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn load_sample(&self, index: usize) -> Result<Sample> {
        let entry = &self.entries[index];
        let image = pnm::load_image(&entry.image_path)?;
        let mask = pnm::load_mask(&entry.mask_path)?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        if mask.shape()[1] != h || mask.shape()[2] != w {
            return Err(GraftError::shape(
                "sample",
                format!(
                    "image {}x{} vs mask {}x{} for id {:?}",
                    h,
                    w,
                    mask.shape()[1],
                    mask.shape()[2],
                    entry.id
                ),
            ));
        }
        Ok(Sample { id: entry.id.clone(), image, mask, original_hw: (h, w) })
    }
}

/// Bilinear-resizes a [C,H,W] tensor to [C,oh,ow].
pub fn resize_chw(x: &Tensor<f32>, oh: usize, ow: usize) -> Result<Tensor<f32>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(GraftError::shape("resize_chw", format!("want [C,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let out = kernels::bilinear_resize_nchw(x.data(), 1, c, h, w, oh, ow);
    Tensor::new(vec![c, oh, ow], out)
}

/// Bilinear-resizes a [1,H,W] mask and re-binarizes at 0.5.
pub fn resize_mask(mask: &Tensor<f32>, oh: usize, ow: usize) -> Result<Tensor<f32>> {
    let resized = resize_chw(mask, oh, ow)?;
    Ok(resized.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

/// The multiscale side choices applied to the convolutional branch's
/// training resolution.
pub const SCALE_JITTER: [f64; 3] = [0.75, 1.0, 1.25];

/// Rounds a jittered side length to the nearest multiple of `unit`, never
/// below one unit.
pub fn snap_side(side: f64, unit: usize) -> usize {
    let snapped = (side / unit as f64).round() as usize * unit;
    snapped.max(unit)
}

/// Flip + crop augmentation, applied identically to image and mask at the
/// source resolution. Resizing to network resolution happens afterwards so
/// both branch inputs derive from one augmented source.
pub fn augment(sample: &Sample, rng: &mut SplitMix64) -> Result<Sample> {
    let (h, w) = (sample.image.shape()[1], sample.image.shape()[2]);
    let flip = rng.bernoulli(0.5);
    // crop retains at least 70% of the area: ceil keeps the product of the
    // two side fractions at or above the drawn fraction
    let area = rng.uniform(0.7, 1.0);
    let side_frac = area.sqrt();
    let ch = ((h as f64 * side_frac).ceil() as usize).clamp(1, h);
    let cw = ((w as f64 * side_frac).ceil() as usize).clamp(1, w);
    let r0 = rng.below(h - ch + 1);
    let c0 = rng.below(w - cw + 1);

    let take = |src: &Tensor<f32>, channels: usize| -> Result<Tensor<f32>> {
        let d = src.data();
        let mut out = vec![0f32; channels * ch * cw];
        for c in 0..channels {
            for r in 0..ch {
                for col in 0..cw {
                    let sc = if flip { w - 1 - (c0 + col) } else { c0 + col };
                    out[(c * ch + r) * cw + col] = d[(c * h + r0 + r) * w + sc];
                }
            }
        }
        Tensor::new(vec![channels, ch, cw], out)
    };
    Ok(Sample {
        id: sample.id.clone(),
        image: take(&sample.image, 3)?,
        mask: take(&sample.mask, 1)?,
        original_hw: sample.original_hw,
    })
}

/// Per-sample boundary statistics used for dataset characterization.
pub struct StatRow {
    pub id: String,
    pub edge_pixels: u64,
    /// log10 of the count; `-inf` when the mask has no boundary.
    pub log10_edge_pixels: f64,
    /// Diagonal length of the image in pixels.
    pub diag: f64,
}

pub fn stat_row(sample: &Sample) -> StatRow {
    let (h, w) = (sample.mask.shape()[1], sample.mask.shape()[2]);
    let bits: Vec<bool> = sample.mask.data().iter().map(|&v| v >= 0.5).collect();
    let edge_pixels = metrics::boundary_pixels(&bits, h, w).len() as u64;
    let log10 = if edge_pixels == 0 { f64::NEG_INFINITY } else { (edge_pixels as f64).log10() };
    let (oh, ow) = sample.original_hw;
    StatRow {
        id: sample.id.clone(),
        edge_pixels,
        log10_edge_pixels: log10,
        diag: ((oh * oh + ow * ow) as f64).sqrt(),
    }
}

pub fn dataset_stats(dataset: &Dataset) -> Result<Vec<StatRow>> {
    (0..dataset.len()).map(|i| Ok(stat_row(&dataset.load_sample(i)?))).collect()
}

fn fmt_log10(v: f64) -> String {
    if v == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

/// Writes `id,edge_pixels,log10_edge_pixels,diag` rows.
pub fn write_stats_csv(rows: &[StatRow], path: &Path) -> Result<()> {
    let mut out = String::from("id,edge_pixels,log10_edge_pixels,diag\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6}\n",
            r.id,
            r.edge_pixels,
            fmt_log10(r.log10_edge_pixels),
            r.diag
        ));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| GraftError::io(parent, e))?;
        }
    }
    std::fs::write(path, out).map_err(|e| GraftError::io(path, e))
}

/// Histogram of the finite log10 edge-pixel counts, 16 equal-width bins over
/// the observed range. Rows are `bin_lo,bin_hi,count`.
pub fn write_histogram_csv(rows: &[StatRow], path: &Path) -> Result<()> {
    const BINS: usize = 16;
    let vals: Vec<f64> =
        rows.iter().map(|r| r.log10_edge_pixels).filter(|v| v.is_finite()).collect();
    let mut out = String::from("bin_lo,bin_hi,count\n");
    if !vals.is_empty() {
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo { (hi - lo) / BINS as f64 } else { 1.0 };
        let mut counts = [0u64; BINS];
        for v in &vals {
            let bin = (((v - lo) / width) as usize).min(BINS - 1);
            counts[bin] += 1;
        }
        for (i, n) in counts.iter().enumerate() {
            let b_lo = lo + i as f64 * width;
            out.push_str(&format!("{:.6},{:.6},{}\n", b_lo, b_lo + width, n));
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| GraftError::io(parent, e))?;
        }
    }
    std::fs::write(path, out).map_err(|e| GraftError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset(dir: &Path, n: usize, hw: usize) -> Dataset {
        let manifest = synth_generate(n, hw, 11, Difficulty::Mixed, dir).unwrap();
        Dataset::load(&manifest).unwrap()
    }

    #[test]
    fn manifest_orders_by_id_and_names_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_generate(3, 16, 3, Difficulty::Blob, dir.path()).unwrap();
        // rewrite the manifest out of order; loading must sort by id
        let text = std::fs::read_to_string(&m).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.reverse();
        std::fs::write(&m, lines.join("\n")).unwrap();
        let ds = Dataset::load(&m).unwrap();
        let ids: Vec<&str> = ds.entries().iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["synth_00000", "synth_00001", "synth_00002"]);

        std::fs::write(&m, "a\timages/nope.ppm\tmasks/nope.pgm\n").unwrap();
        let err = Dataset::load(&m).unwrap_err().to_string();
        assert!(err.contains("nope.ppm"), "{err}");

        std::fs::write(&m, "only_two\tfields\n").unwrap();
        assert!(Dataset::load(&m).is_err());
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_generate(1, 16, 3, Difficulty::Blob, dir.path()).unwrap();
        let line = std::fs::read_to_string(&m).unwrap();
        std::fs::write(&m, format!("{line}{line}")).unwrap();
        let err = Dataset::load(&m).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn samples_roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy_dataset(dir.path(), 2, 24);
        let s = ds.load_sample(0).unwrap();
        assert_eq!(s.image.shape(), &[3, 24, 24]);
        assert_eq!(s.mask.shape(), &[1, 24, 24]);
        assert_eq!(s.original_hw, (24, 24));
        assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn augment_keeps_masks_binary_and_area_bound() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy_dataset(dir.path(), 1, 40);
        let s = ds.load_sample(0).unwrap();
        let mut rng = SplitMix64::new(7);
        for _ in 0..50 {
            let a = augment(&s, &mut rng).unwrap();
            let (ch, cw) = (a.image.shape()[1], a.image.shape()[2]);
            assert!(ch * cw >= (0.7 * 40.0 * 40.0) as usize, "crop too small: {ch}x{cw}");
            assert_eq!(a.mask.shape(), &[1, ch, cw]);
            let back = resize_mask(&a.mask, 40, 40).unwrap();
            assert!(back.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn flip_only_augment_mirrors_columns() {
        // find a seed whose first draw flips and whose crop keeps everything
        let dir = tempfile::tempdir().unwrap();
        let ds = toy_dataset(dir.path(), 1, 16);
        let s = ds.load_sample(0).unwrap();
        let mut found = false;
        for seed in 0..200 {
            let mut probe = SplitMix64::new(seed);
            let flip = probe.bernoulli(0.5);
            let area = probe.uniform(0.7, 1.0);
            if !(flip && (16.0 * area.sqrt()).ceil() as usize == 16) {
                continue;
            }
            let mut rng = SplitMix64::new(seed);
            let a = augment(&s, &mut rng).unwrap();
            for r in 0..16 {
                for c in 0..16 {
                    assert_eq!(
                        a.image.at(&[0, r, c]),
                        s.image.at(&[0, r, 15 - c]),
                        "mirror mismatch at {r},{c}"
                    );
                }
            }
            found = true;
            break;
        }
        assert!(found, "no pure-flip seed in range");
    }

    #[test]
    fn snap_side_hits_multiples_of_32() {
        assert_eq!(snap_side(64.0 * 0.75, 32), 64); // 48 rounds up
        assert_eq!(snap_side(64.0 * 1.0, 32), 64);
        assert_eq!(snap_side(64.0 * 1.25, 32), 96); // 80 rounds up
        assert_eq!(snap_side(10.0, 32), 32); // floor at one unit
        assert_eq!(snap_side(256.0 * 0.75, 32), 192);
    }

    #[test]
    fn stats_match_hand_counts() {
        // full-frame mask: boundary = frame = 2h + 2w - 4
        let full = Sample {
            id: "full".into(),
            image: Tensor::zeros(&[3, 6, 9]),
            mask: Tensor::ones(&[1, 6, 9]),
            original_hw: (6, 9),
        };
        let r = stat_row(&full);
        assert_eq!(r.edge_pixels, 2 * 6 + 2 * 9 - 4);
        assert!((r.log10_edge_pixels - (26f64).log10()).abs() < 1e-12);

        // empty mask: no boundary, log10 prints as -inf
        let empty = Sample {
            id: "empty".into(),
            image: Tensor::zeros(&[3, 4, 4]),
            mask: Tensor::zeros(&[1, 4, 4]),
            original_hw: (2160, 3840),
        };
        let r = stat_row(&empty);
        assert_eq!(r.edge_pixels, 0);
        assert!(r.log10_edge_pixels.is_infinite());
        assert!((r.diag - 4406.0).abs() < 0.5, "4k diagonal ~4406, got {}", r.diag);

        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("stats.csv");
        write_stats_csv(&[stat_row(&full), stat_row(&empty)], &csv).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("id,edge_pixels,log10_edge_pixels,diag"));
        assert!(lines.next().unwrap().starts_with("full,26,"));
        let empty_line = lines.next().unwrap();
        assert!(empty_line.contains(",-inf,"), "{empty_line}");

        let hist = dir.path().join("hist.csv");
        write_histogram_csv(&[stat_row(&full), stat_row(&empty)], &hist).unwrap();
        let text = std::fs::read_to_string(&hist).unwrap();
        assert_eq!(text.lines().count(), 17); // header + 16 bins
        let total: u64 = text
            .lines()
            .skip(1)
            .map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap())
            .sum();
        assert_eq!(total, 1); // -inf row excluded
    }

    #[test]
    fn resize_mask_rebinarizes() {
        let m = Tensor::<f32>::from_fn(&[1, 4, 4], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
        let r = resize_mask(&m, 7, 7).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0 || v == 1.0));
        // identity resize keeps the mask exactly
        let same = resize_mask(&m, 4, 4).unwrap();
        assert_eq!(same.data(), m.data());
    }
}
