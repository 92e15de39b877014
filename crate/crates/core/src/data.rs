//! Dataset plumbing: binary PPM images, YOLO-format TXT labels, and a
//! deterministic synthetic scene generator (bright ellipse = "face", ellipse
//! with a horizontal bar across it = "mask") used for desk-scale training.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::parse_labels;
use crate::model::GroundTruth;
use crate::tensor::Tensor;

pub fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * w * h {
        return Err(Error::Data(format!("ppm buffer {} != 3*{w}*{h}", rgb.len())));
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P6\n{w} {h}\n255\n")?;
    f.write_all(rgb)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data(format!("truncated ppm header in {}", path.display())));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(Error::Data(format!("{} is not a binary ppm", path.display())));
    }
    let w: usize = token()?.parse().map_err(|_| Error::Data("bad ppm width".into()))?;
    let h: usize = token()?.parse().map_err(|_| Error::Data("bad ppm height".into()))?;
    let maxv: usize = token()?.parse().map_err(|_| Error::Data("bad ppm maxval".into()))?;
    if maxv != 255 {
        return Err(Error::Data(format!("unsupported ppm maxval {maxv}")));
    }
    pos += 1; // single whitespace after maxval
    let need = 3 * w * h;
    if bytes.len() < pos + need {
        return Err(Error::Data(format!("short ppm payload in {}", path.display())));
    }
    Ok((w, h, bytes[pos..pos + need].to_vec()))
}

/// One labeled image ready for the network.
#[derive(Debug, Clone)]
pub struct Sample {
    pub path: PathBuf,
    pub image: Tensor<f32>,
    pub gts: Vec<GroundTruth>,
}

/// Load every `*.ppm` in a directory (sorted by name) with its sibling
/// `.txt` label file. An empty label file is a valid negative image.
pub fn load_dataset(dir: &Path, expect_size: usize) -> Result<Vec<Sample>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "ppm").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no images found in {}", dir.display())));
    }
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let (w, h, rgb) = read_ppm(&p)?;
        if w != expect_size || h != expect_size {
            return Err(Error::Data(format!(
                "{}: expected {expect_size}x{expect_size}, got {w}x{h}",
                p.display()
            )));
        }
        let image = Tensor::from_fn(&[3, h, w], |i| {
            let c = i / (h * w);
            let px = i % (h * w);
            rgb[px * 3 + c] as f32 / 255.0
        });
        let label_path = p.with_extension("txt");
        let text = fs::read_to_string(&label_path).map_err(|e| {
            Error::Data(format!("missing label file {}: {e}", label_path.display()))
        })?;
        let gts = parse_labels(&text)?;
        out.push(Sample { path: p, image, gts });
    }
    Ok(out)
}

/// Deterministically draw `n` synthetic images with labels into `dir`.
/// Same seed, same bytes.
pub fn generate_dataset(dir: &Path, n: usize, seed: u64, size: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Data("need at least one image".to_string()));
    }
    fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let (rgb, labels) = synth_image(&mut rng, size);
        write_ppm(&dir.join(format!("img_{i:05}.ppm")), size, size, &rgb)?;
        let mut text = String::new();
        for gt in &labels {
            text.push_str(&format!(
                "{} {:.6} {:.6} {:.6} {:.6}\n",
                gt.class_id, gt.bbox.cx, gt.bbox.cy, gt.bbox.w, gt.bbox.h
            ));
        }
        fs::write(dir.join(format!("img_{i:05}.txt")), text)?;
    }
    Ok(())
}

fn synth_image(rng: &mut ChaCha8Rng, size: usize) -> (Vec<u8>, Vec<GroundTruth>) {
    let mut rgb = vec![0u8; 3 * size * size];
    // dark noisy background
    for px in rgb.iter_mut() {
        *px = rng.gen_range(0..70);
    }
    let n_objects = rng.gen_range(1..=3);
    let mut labels: Vec<GroundTruth> = Vec::new();
    for _ in 0..n_objects {
        // extents 15-40% of the image, box kept fully inside
        let mut placed = None;
        for _try in 0..12 {
            let w = rng.gen_range(0.15..0.40);
            let h = rng.gen_range(0.15..0.40);
            let cx = rng.gen_range(w / 2.0..1.0 - w / 2.0);
            let cy = rng.gen_range(h / 2.0..1.0 - h / 2.0);
            let ok = labels.iter().all(|g| {
                let dx: f64 = g.bbox.cx - cx;
                let dy: f64 = g.bbox.cy - cy;
                dx.abs() > (g.bbox.w + w) / 2.5 || dy.abs() > (g.bbox.h + h) / 2.5
            });
            placed = Some((cx, cy, w, h));
            if ok {
                break;
            }
        }
        let (cx, cy, w, h) = placed.unwrap();
        let class_id = rng.gen_range(0..2usize);

        // warm skin-toned ellipse
        let base = (
            rng.gen_range(195..240) as i32,
            rng.gen_range(150..185) as i32,
            rng.gen_range(110..145) as i32,
        );
        let (a, b) = (w / 2.0 * size as f64, h / 2.0 * size as f64);
        let (pcx, pcy) = (cx * size as f64, cy * size as f64);
        for y in 0..size {
            for x in 0..size {
                let dx = (x as f64 + 0.5 - pcx) / a;
                let dy = (y as f64 + 0.5 - pcy) / b;
                if dx * dx + dy * dy <= 1.0 {
                    let idx = (y * size + x) * 3;
                    rgb[idx] = base.0 as u8;
                    rgb[idx + 1] = base.1 as u8;
                    rgb[idx + 2] = base.2 as u8;
                }
            }
        }
        if class_id == 1 {
            // pale horizontal bar across the lower half of the ellipse
            let bar = (
                rng.gen_range(150..200) as u8,
                rng.gen_range(200..240) as u8,
                rng.gen_range(210..250) as u8,
            );
            let bar_top = pcy;
            let bar_bot = pcy + 0.55 * b;
            for y in 0..size {
                let yf = y as f64 + 0.5;
                if yf < bar_top || yf > bar_bot {
                    continue;
                }
                for x in 0..size {
                    let dx = (x as f64 + 0.5 - pcx) / a;
                    let dy = (yf - pcy) / b;
                    if dx * dx + dy * dy <= 1.0 {
                        let idx = (y * size + x) * 3;
                        rgb[idx] = bar.0;
                        rgb[idx + 1] = bar.1;
                        rgb[idx + 2] = bar.2;
                    }
                }
            }
        }
        labels.push(GroundTruth {
            class_id,
            bbox: crate::model::Bbox::new(cx, cy, w, h),
        });
    }
    (rgb, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ppm");
        let rgb: Vec<u8> = (0..3 * 4 * 5).map(|i| (i * 7 % 256) as u8).collect();
        write_ppm(&p, 4, 5, &rgb).unwrap();
        let (w, h, back) = read_ppm(&p).unwrap();
        assert_eq!((w, h), (4, 5));
        assert_eq!(back, rgb);
    }

    #[test]
    fn synth_is_deterministic_and_valid() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_dataset(d1.path(), 4, 7, 64).unwrap();
        generate_dataset(d2.path(), 4, 7, 64).unwrap();
        for i in 0..4 {
            let name = format!("img_{i:05}.ppm");
            let a = fs::read(d1.path().join(&name)).unwrap();
            let b = fs::read(d2.path().join(&name)).unwrap();
            assert_eq!(a, b, "image bytes differ");
            let la = fs::read(d1.path().join(format!("img_{i:05}.txt"))).unwrap();
            let lb = fs::read(d2.path().join(format!("img_{i:05}.txt"))).unwrap();
            assert_eq!(la, lb, "label bytes differ");
        }
        // every label line parses and lies inside the unit square
        for i in 0..4 {
            let text = fs::read_to_string(d1.path().join(format!("img_{i:05}.txt"))).unwrap();
            let gts = parse_labels(&text).unwrap();
            assert!(!gts.is_empty() && gts.len() <= 3);
            for g in gts {
                assert!(g.class_id < 2);
                assert!(g.bbox.cx - g.bbox.w / 2.0 >= -1e-9);
                assert!(g.bbox.cx + g.bbox.w / 2.0 <= 1.0 + 1e-9);
                assert!(g.bbox.w >= 0.15 && g.bbox.w <= 0.40);
            }
        }
    }

    #[test]
    fn load_dataset_counts_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(dir.path(), 3, 9, 32).unwrap();
        let ds = load_dataset(dir.path(), 32).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds[0].image.shape(), &[3, 32, 32]);
        assert!(ds[0].image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));

        let empty = tempfile::tempdir().unwrap();
        let err = load_dataset(empty.path(), 32).unwrap_err().to_string();
        assert!(err.contains("no images found"), "{err}");
    }
}
