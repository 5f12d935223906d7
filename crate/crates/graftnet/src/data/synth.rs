//! Synthetic salient-object scenes: colored shapes over a textured background,
//! with exact masks derived from the same analytic inside-tests that paint the
//! pixels. Generation is fully determined by the seed.

use std::path::{Path, PathBuf};

use crate::error::{GraftError, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

use super::pnm;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Difficulty {
    /// Compact ellipses and convex polygons.
    Blob,
    /// Thin elongated capsules — boundary-heavy masks.
    Thin,
    /// A mix of both populations.
    Mixed,
}

impl Difficulty {
    pub fn tag(self) -> &'static str {
        match self {
            Difficulty::Blob => "blob",
            Difficulty::Thin => "thin",
            Difficulty::Mixed => "mixed",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "blob" => Ok(Difficulty::Blob),
            "thin" => Ok(Difficulty::Thin),
            "mixed" => Ok(Difficulty::Mixed),
            other => Err(GraftError::Config(format!(
                "unknown difficulty {other:?} (want blob|thin|mixed)"
            ))),
        }
    }
}

enum Shape {
    Ellipse { cx: f64, cy: f64, a: f64, b: f64, cos_t: f64, sin_t: f64 },
    Polygon { verts: Vec<(f64, f64)> },
    Capsule { x0: f64, y0: f64, x1: f64, y1: f64, r: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Ellipse { cx, cy, a, b, cos_t, sin_t } => {
                let (dx, dy) = (x - cx, y - cy);
                let u = dx * cos_t + dy * sin_t;
                let v = -dx * sin_t + dy * cos_t;
                (u / a) * (u / a) + (v / b) * (v / b) <= 1.0
            }
            Shape::Polygon { verts } => {
                // convex, counter-clockwise: inside iff on the left of every edge
                let n = verts.len();
                for i in 0..n {
                    let (x0, y0) = verts[i];
                    let (x1, y1) = verts[(i + 1) % n];
                    if (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) < 0.0 {
                        return false;
                    }
                }
                true
            }
            Shape::Capsule { x0, y0, x1, y1, r } => {
                let (ex, ey) = (x1 - x0, y1 - y0);
                let len_sq = ex * ex + ey * ey;
                let t = if len_sq > 0.0 {
                    (((x - x0) * ex + (y - y0) * ey) / len_sq).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (dx, dy) = (x - (x0 + t * ex), y - (y0 + t * ey));
                dx * dx + dy * dy <= r * r
            }
        }
    }
}

fn random_shape(rng: &mut SplitMix64, hw: usize, difficulty: Difficulty) -> Shape {
    let side = hw as f64;
    let thin = match difficulty {
        Difficulty::Blob => false,
        Difficulty::Thin => true,
        Difficulty::Mixed => rng.bernoulli(0.5),
    };
    if thin {
        let cx = rng.uniform(0.25 * side, 0.75 * side);
        let cy = rng.uniform(0.25 * side, 0.75 * side);
        let half_len = rng.uniform(0.2 * side, 0.4 * side);
        let theta = rng.uniform(0.0, std::f64::consts::PI);
        let (c, s) = (theta.cos(), theta.sin());
        let r = rng.uniform(1.0, (0.02 * side).max(1.5));
        Shape::Capsule {
            x0: cx - half_len * c,
            y0: cy - half_len * s,
            x1: cx + half_len * c,
            y1: cy + half_len * s,
            r,
        }
    } else if rng.bernoulli(0.5) {
        let theta = rng.uniform(0.0, std::f64::consts::PI);
        Shape::Ellipse {
            cx: rng.uniform(0.25 * side, 0.75 * side),
            cy: rng.uniform(0.25 * side, 0.75 * side),
            a: rng.uniform(0.1 * side, 0.28 * side),
            b: rng.uniform(0.08 * side, 0.22 * side),
            cos_t: theta.cos(),
            sin_t: theta.sin(),
        }
    } else {
        // vertices on one circle in increasing-angle order: always convex
        let cx = rng.uniform(0.3 * side, 0.7 * side);
        let cy = rng.uniform(0.3 * side, 0.7 * side);
        let k = 5 + rng.below(4);
        let r = rng.uniform(0.12 * side, 0.3 * side);
        let step = 2.0 * std::f64::consts::PI / k as f64;
        let verts = (0..k)
            .map(|i| {
                let t = i as f64 * step + rng.uniform(-0.3, 0.3) * step;
                (cx + r * t.cos(), cy + r * t.sin())
            })
            .collect();
        Shape::Polygon { verts }
    }
}

/// One rendered scene: image [3,H,W] in [0,1] plus its exact binary mask [1,H,W].
pub struct Scene {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

/// Renders one scene. The mask marks the union of all shapes; the inside-test
/// that paints a pixel is the same one that sets its mask bit.
pub fn render_scene(rng: &mut SplitMix64, hw: usize, difficulty: Difficulty) -> Result<Scene> {
    let base = [
        rng.uniform(0.15, 0.85) as f32,
        rng.uniform(0.15, 0.85) as f32,
        rng.uniform(0.15, 0.85) as f32,
    ];
    let grad_amp = rng.uniform(0.0, 0.2);
    let grad_theta = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
    let (gx, gy) = (grad_theta.cos(), grad_theta.sin());
    let noise_amp = rng.uniform(0.01, 0.07);

    let n_shapes = 1 + rng.below(3);
    let shapes: Vec<Shape> =
        (0..n_shapes).map(|_| random_shape(rng, hw, difficulty)).collect();
    // all shapes in a scene sit on the same side of the background so the
    // foreground stays consistently contrasting
    let sign = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
    let colors: Vec<[f32; 3]> = (0..n_shapes)
        .map(|_| {
            let mut c = [0f32; 3];
            for (ch, slot) in c.iter_mut().enumerate() {
                let offset = sign * rng.uniform(0.3, 0.6);
                *slot = (base[ch] as f64 + offset).clamp(0.0, 1.0) as f32;
            }
            c
        })
        .collect();

    let mut image = vec![0f32; 3 * hw * hw];
    let mut mask = vec![0f32; hw * hw];
    let side = hw as f64;
    for row in 0..hw {
        for col in 0..hw {
            let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
            let g = grad_amp * ((x * gx + y * gy) / side - 0.5);
            let hit = shapes.iter().position(|s| s.contains(x, y));
            if hit.is_some() {
                mask[row * hw + col] = 1.0;
            }
            for ch in 0..3 {
                let body = match hit {
                    Some(i) => colors[i][ch] as f64,
                    None => base[ch] as f64 + g,
                };
                let v = body + rng.uniform(-noise_amp, noise_amp);
                image[ch * hw * hw + row * hw + col] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(Scene {
        image: Tensor::new(vec![3, hw, hw], image)?,
        mask: Tensor::new(vec![1, hw, hw], mask)?,
    })
}

/// Generates `n` scenes under `out_dir` (images/, masks/, manifest.tsv) and
/// returns the manifest path. The same seed yields bit-identical files.
pub fn synth_generate(
    n: usize,
    hw: usize,
    seed: u64,
    difficulty: Difficulty,
    out_dir: &Path,
) -> Result<PathBuf> {
    if hw == 0 {
        return Err(GraftError::Config("synth size must be positive".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| GraftError::io(out_dir, e))?;
    let mut master = SplitMix64::new(seed);
    let mut manifest = String::new();
    for i in 0..n {
        let mut rng = master.split();
        let scene = render_scene(&mut rng, hw, difficulty)?;
        let id = format!("synth_{i:05}");
        let image_rel = format!("images/{id}.ppm");
        let mask_rel = format!("masks/{id}.pgm");
        pnm::save_ppm(&out_dir.join(&image_rel), &scene.image)?;
        pnm::save_pgm(&out_dir.join(&mask_rel), &scene.mask)?;
        manifest.push_str(&format!("{id}\t{image_rel}\t{mask_rel}\n"));
    }
    let manifest_path = out_dir.join("manifest.tsv");
    std::fs::write(&manifest_path, manifest).map_err(|e| GraftError::io(&manifest_path, e))?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;

    fn dir_snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                    files.push((rel, std::fs::read(&p).unwrap()));
                }
            }
        }
        files.sort();
        files
    }

    #[test]
    fn same_seed_gives_bit_identical_files() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        synth_generate(4, 32, 99, Difficulty::Mixed, d1.path()).unwrap();
        synth_generate(4, 32, 99, Difficulty::Mixed, d2.path()).unwrap();
        assert_eq!(dir_snapshot(d1.path()), dir_snapshot(d2.path()));

        let d3 = tempfile::tempdir().unwrap();
        synth_generate(4, 32, 100, Difficulty::Mixed, d3.path()).unwrap();
        assert_ne!(dir_snapshot(d1.path()), dir_snapshot(d3.path()));
    }

    #[test]
    fn zero_samples_is_a_valid_empty_manifest() {
        let d = tempfile::tempdir().unwrap();
        let m = synth_generate(0, 32, 1, Difficulty::Blob, d.path()).unwrap();
        assert_eq!(std::fs::read_to_string(m).unwrap(), "");
    }

    #[test]
    fn scenes_have_foreground_and_contrast() {
        let mut rng = SplitMix64::new(5);
        for _ in 0..20 {
            let scene = render_scene(&mut rng, 48, Difficulty::Mixed).unwrap();
            let fg: f32 = scene.mask.data().iter().sum();
            assert!(fg >= 1.0, "mask has no foreground");
            assert!(fg <= 0.9 * 48.0 * 48.0, "mask nearly full-frame");
            // mean |image - mean_bg| over fg should be visibly nonzero
            let hw = 48 * 48;
            let mut fg_lum = 0.0f64;
            let mut bg_lum = 0.0f64;
            let (mut nf, mut nb) = (0usize, 0usize);
            for i in 0..hw {
                let lum: f32 =
                    (0..3).map(|c| scene.image.data()[c * hw + i]).sum::<f32>() / 3.0;
                if scene.mask.data()[i] > 0.5 {
                    fg_lum += lum as f64;
                    nf += 1;
                } else {
                    bg_lum += lum as f64;
                    nb += 1;
                }
            }
            let gap = (fg_lum / nf as f64 - bg_lum / nb.max(1) as f64).abs();
            assert!(gap > 0.05, "foreground barely separable: gap {gap}");
        }
    }

    #[test]
    fn thin_difficulty_raises_edge_pixel_ratio() {
        let ratio = |difficulty: Difficulty| -> f64 {
            let mut master = SplitMix64::new(4242);
            let mut acc = 0.0;
            for _ in 0..100 {
                let mut rng = master.split();
                let scene = render_scene(&mut rng, 64, difficulty).unwrap();
                let bits: Vec<bool> = scene.mask.data().iter().map(|&v| v > 0.5).collect();
                let edges = metrics::boundary_pixels(&bits, 64, 64).len() as f64;
                let fg = bits.iter().filter(|&&b| b).count() as f64;
                acc += edges / fg.max(1.0);
            }
            acc / 100.0
        };
        let thin = ratio(Difficulty::Thin);
        let blob = ratio(Difficulty::Blob);
        assert!(
            thin > blob,
            "thin scenes should be boundary-heavier: thin {thin:.3} vs blob {blob:.3}"
        );
    }
}
