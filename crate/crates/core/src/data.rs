//! Image batches, procedural toy datasets and PNG / NPY file I/O.
//!
//! Two synthetic worlds stand in for natural images:
//!
//! * **textures** — class `c` is an oriented sinusoidal grating (orientation `c mod (K/2)`,
//!   one of two spatial frequencies) inside a soft blob, over a smooth coloured background.
//!   Neighbouring orientations are deliberately similar, so the label space has real
//!   near/far structure for the class-partition experiments.
//! * **faces** — each identity is a fixed arrangement of hair, skin, eyes, nose and mouth;
//!   instances jitter position, lighting and background.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type ImageBatch = Tensor<f32>;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages {
    /// `[N, C, H, W]` in `[0, 1]`.
    pub images: ImageBatch,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledImages {
    pub fn new(images: ImageBatch, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.shape().len() != 4 || images.dim(0) != labels.len() {
            return Err(Error::Input(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Input(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Leading `n` items and the rest.
    pub fn split(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.select(&head), self.select(&tail))
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.images.dim(1), self.images.dim(2), self.images.dim(3)]
    }
}

fn item_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(index as u128 * 1024);
    rng
}

/// Class layout of the texture world.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextureClass {
    pub orientation: f64,
    pub frequency: f64,
}

pub fn texture_class(class: usize, num_classes: usize) -> TextureClass {
    let orientations = num_classes.div_ceil(2).max(1);
    let o = class % orientations;
    let f = class / orientations;
    TextureClass {
        orientation: PI * o as f64 / orientations as f64,
        frequency: if f == 0 { 3.0 } else { 6.0 },
    }
}

/// `n` texture images (labels cycle through the classes), deterministic in `(seed, index)`.
pub fn synth_textures(num_classes: usize, n: usize, size: usize, seed: u64) -> LabeledImages {
    let mut data = Vec::with_capacity(n * 3 * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % num_classes;
        let mut rng = item_rng(seed, 1, i as u64);
        render_texture(&mut data, label, num_classes, size, &mut rng);
        labels.push(label);
    }
    let images = Tensor::from_vec(&[n, 3, size, size], data).expect("sizes agree");
    LabeledImages {
        images,
        labels,
        num_classes,
    }
}

fn render_texture(out: &mut Vec<f32>, label: usize, num_classes: usize, size: usize, rng: &mut ChaCha8Rng) {
    let class = texture_class(label, num_classes);
    let s = size as f64;
    let base: [f64; 3] = [
        rng.random_range(0.25..0.75),
        rng.random_range(0.25..0.75),
        rng.random_range(0.25..0.75),
    ];
    // low-frequency background field
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..PI),
                rng.random_range(0.3..1.2),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.03..0.08),
            )
        })
        .collect();
    let hard = rng.random::<f64>() < 0.12;
    let amplitude = if hard {
        rng.random_range(0.015..0.04)
    } else {
        rng.random_range(0.07..0.16)
    };
    let theta = class.orientation + rng.random_range(-0.08..0.08);
    let phase = rng.random_range(0.0..2.0 * PI);
    let (cx, cy) = (rng.random_range(0.35..0.65) * s, rng.random_range(0.35..0.65) * s);
    let radius = rng.random_range(0.3..0.45) * s;
    let tint: [f64; 3] = [
        rng.random_range(0.8..1.2),
        rng.random_range(0.8..1.2),
        rng.random_range(0.8..1.2),
    ];
    let noise = rand_distr::Normal::new(0.0, 0.02).expect("valid std");
    let start = out.len();
    out.resize(start + 3 * size * size, 0.0);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let bg: f64 = waves
                .iter()
                .map(|&(o, f, p, a)| a * (2.0 * PI * f * (xf * o.cos() + yf * o.sin()) / s + p).sin())
                .sum();
            let d2 = (xf - cx).powi(2) + (yf - cy).powi(2);
            let mask = (-d2 / (2.0 * radius * radius)).exp();
            let grating = amplitude
                * mask
                * (2.0 * PI * class.frequency * (xf * theta.cos() + yf * theta.sin()) / s + phase).sin();
            for c in 0..3 {
                let n: f64 = rng.sample(noise);
                let v = base[c] + bg + grating * tint[c] + n;
                out[start + (c * size + y) * size + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
}

/// Fixed appearance of one toy identity.
#[derive(Clone, Debug)]
struct FaceTemplate {
    skin: [f64; 3],
    hair: [f64; 3],
    hairline: f64,
    face_rx: f64,
    face_ry: f64,
    eye_dx: f64,
    eye_y: f64,
    eye_r: f64,
    eye_color: [f64; 3],
    nose_len: f64,
    mouth_y: f64,
    mouth_w: f64,
    mouth_color: [f64; 3],
}

fn face_template(identity: usize, world_seed: u64) -> FaceTemplate {
    let mut rng = item_rng(world_seed, 7, identity as u64);
    let mut color = |lo: f64, hi: f64| -> [f64; 3] {
        [
            rng.random_range(lo..hi),
            rng.random_range(lo..hi),
            rng.random_range(lo..hi),
        ]
    };
    let skin = color(0.35, 0.9);
    let hair = color(0.0, 0.8);
    let eye_color = color(0.0, 0.5);
    let mouth_color = color(0.2, 0.8);
    FaceTemplate {
        skin,
        hair,
        eye_color,
        mouth_color,
        hairline: rng.random_range(0.18..0.38),
        face_rx: rng.random_range(0.26..0.38),
        face_ry: rng.random_range(0.32..0.44),
        eye_dx: rng.random_range(0.1..0.2),
        eye_y: rng.random_range(0.36..0.46),
        eye_r: rng.random_range(0.035..0.07),
        nose_len: rng.random_range(0.06..0.16),
        mouth_y: rng.random_range(0.64..0.74),
        mouth_w: rng.random_range(0.08..0.2),
    }
}

fn soft(d: f64, edge: f64) -> f64 {
    // 1 inside, 0 outside, logistic ramp of width `edge`
    1.0 / (1.0 + (d / edge).exp())
}

/// `per_identity` images for each identity in `identities`; labels are identity ids.
pub fn synth_faces(
    identities: std::ops::Range<usize>,
    per_identity: usize,
    size: usize,
    world_seed: u64,
    sample_seed: u64,
) -> LabeledImages {
    let count = identities.len() * per_identity;
    let mut data = Vec::with_capacity(count * 3 * size * size);
    let mut labels = Vec::with_capacity(count);
    let num_classes = identities.end;
    let mut index = 0u64;
    for _ in 0..per_identity {
        for id in identities.clone() {
            let t = face_template(id, world_seed);
            let mut rng = item_rng(sample_seed, 11, index);
            index += 1;
            render_face(&mut data, &t, size, &mut rng);
            labels.push(id);
        }
    }
    LabeledImages {
        images: Tensor::from_vec(&[count, 3, size, size], data).expect("sizes agree"),
        labels,
        num_classes,
    }
}

fn render_face(out: &mut Vec<f32>, t: &FaceTemplate, size: usize, rng: &mut ChaCha8Rng) {
    let s = size as f64;
    let (ox, oy) = (rng.random_range(-0.04..0.04), rng.random_range(-0.04..0.04));
    let light = rng.random_range(0.85..1.15);
    let bg = [
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
    ];
    let noise = rand_distr::Normal::new(0.0, 0.02).expect("valid std");
    let edge = 0.6 / s;
    let start = out.len();
    out.resize(start + 3 * size * size, 0.0);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / s - 0.5 - ox;
            let v = (y as f64 + 0.5) / s - 0.5 - oy;
            let mut px = bg;
            let face_d = ((u / t.face_rx).powi(2) + (v / t.face_ry).powi(2)).sqrt() - 1.0;
            let face = soft(face_d * t.face_rx, edge);
            let hair_region = soft((v + 0.5) - t.hairline, edge) * soft(face_d * t.face_rx - 0.04, edge);
            let blend = |px: &mut [f64; 3], color: [f64; 3], a: f64| {
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - a) + color[c] * a;
                }
            };
            blend(&mut px, t.skin, face);
            blend(&mut px, t.hair, hair_region);
            for side in [-1.0, 1.0] {
                let d = ((u - side * t.eye_dx).powi(2) + (v + 0.5 - t.eye_y).powi(2)).sqrt();
                blend(&mut px, t.eye_color, soft(d - t.eye_r, edge) * face);
            }
            let nose_top = t.eye_y + 0.04;
            let nv = v + 0.5;
            let nose =
                soft(u.abs() - 0.02, edge) * soft(nose_top - nv, edge) * soft(nv - (nose_top + t.nose_len), edge);
            let darker = [t.skin[0] * 0.7, t.skin[1] * 0.7, t.skin[2] * 0.7];
            blend(&mut px, darker, nose * face);
            let mouth = soft(u.abs() - t.mouth_w, edge) * soft((nv - t.mouth_y).abs() - 0.025, edge);
            blend(&mut px, t.mouth_color, mouth * face);
            for c in 0..3 {
                let n: f64 = rng.sample(noise);
                out[start + (c * size + y) * size + x] = (px[c] * light + n).clamp(0.0, 1.0) as f32;
            }
        }
    }
}

/// Writes a `[3,H,W]` (or `[1,H,W]`) image in `[0,1]` as an 8-bit PNG.
pub fn write_png(path: &Path, image: &[f32], channels: usize, h: usize, w: usize) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(if channels == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    });
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Input(format!("png header for {}: {e}", path.display())))?;
    let mut bytes = Vec::with_capacity(h * w * channels);
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                let v = image[(c * h + y) * w + x].clamp(0.0, 1.0);
                bytes.push((v * 255.0).round() as u8);
            }
        }
    }
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::Input(format!("png data for {}: {e}", path.display())))
}

/// Reads a PNG into `[3,H,W]` floats in `[0,1]`; grayscale is replicated, alpha dropped.
pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let step = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => 3,
    };
    let mut out = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let p = &buf[(y * w + x) * step..];
            for c in 0..3 {
                let v = if step < 3 { p[0] } else { p[c] };
                out[(c * h + y) * w + x] = v as f32 / 255.0;
            }
        }
    }
    Tensor::from_vec(&[3, h, w], out)
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every PNG in `dir` (sorted by name) into one batch; all images must share a size.
pub fn load_image_dir(dir: &Path) -> Result<(ImageBatch, Vec<PathBuf>)> {
    let files = sorted_pngs(dir)?;
    if files.is_empty() {
        return Err(Error::Input(format!("no PNG images in {}", dir.display())));
    }
    let images = files.iter().map(|p| read_png(p)).collect::<Result<Vec<_>>>()?;
    let shape = images[0].shape().to_vec();
    if let Some((i, _)) = images.iter().enumerate().find(|(_, t)| t.shape() != shape.as_slice()) {
        return Err(Error::Input(format!(
            "{} has a different size than {}",
            files[i].display(),
            files[0].display()
        )));
    }
    let refs: Vec<Tensor<f32>> = images
        .into_iter()
        .map(|t| t.reshape(&[1, shape[0], shape[1], shape[2]]))
        .collect::<Result<_>>()?;
    let batch = Tensor::concat(&refs.iter().collect::<Vec<_>>())?;
    Ok((batch, files))
}

/// Writes a labelled dataset as `<dir>/<label>/<index>.png`.
pub fn save_labeled_dir(dir: &Path, data: &LabeledImages) -> Result<()> {
    let [c, h, w] = data.image_shape();
    for (i, &label) in data.labels.iter().enumerate() {
        let sub = dir.join(label.to_string());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        write_png(&sub.join(format!("{i:06}.png")), data.images.item(i), c, h, w)?;
    }
    let meta = serde_json::json!({ "num_classes": data.num_classes, "count": data.len() });
    let path = dir.join("dataset.json");
    fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
}

/// Loads `<dir>/<label>/*.png`; an optional `dataset.json` fixes the class count.
pub fn load_labeled_dir(dir: &Path) -> Result<LabeledImages> {
    let mut subdirs: Vec<(usize, PathBuf)> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .filter_map(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.parse::<usize>().ok())
                .map(|l| (l, p.clone()))
        })
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::Input(format!(
            "{} has no numeric class subdirectories",
            dir.display()
        )));
    }
    let mut parts = Vec::new();
    let mut labels = Vec::new();
    for (label, sub) in &subdirs {
        for file in sorted_pngs(sub)? {
            let img = read_png(&file)?;
            let s = img.shape().to_vec();
            parts.push(img.reshape(&[1, s[0], s[1], s[2]])?);
            labels.push(*label);
        }
    }
    if parts.is_empty() {
        return Err(Error::Input(format!("no images under {}", dir.display())));
    }
    let images = Tensor::concat(&parts.iter().collect::<Vec<_>>())?;
    let meta_path = dir.join("dataset.json");
    let declared = fs::read_to_string(&meta_path)
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v["num_classes"].as_u64())
        .map(|v| v as usize);
    let num_classes = declared.unwrap_or_else(|| subdirs.last().map_or(0, |s| s.0) + 1);
    LabeledImages::new(images, labels, num_classes)
}

/// Writes a float32 array in NumPy `.npy` (format 1.0, little-endian, C order).
pub fn write_npy(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    let shape_txt = if dims.len() == 1 {
        format!("({},)", dims[0])
    } else {
        format!("({})", dims.join(", "))
    };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {shape_txt}, }}");
    let unpadded = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut bytes = Vec::with_capacity(10 + header.len() + data.len() * 4);
    bytes.extend_from_slice(b"\x93NUMPY\x01\x00");
    bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a float32 `.npy` written by [`write_npy`].
pub fn read_npy(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = || Error::Input(format!("{} is not a float32 npy file", path.display()));
    if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
        return Err(bad());
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = std::str::from_utf8(bytes.get(10..10 + hlen).ok_or_else(bad)?).map_err(|_| bad())?;
    if !header.contains("'<f4'") {
        return Err(bad());
    }
    let open = header.find("'shape': (").ok_or_else(bad)? + 10;
    let close = header[open..].find(')').ok_or_else(bad)? + open;
    let shape: Vec<usize> = header[open..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let data: Vec<f32> = bytes[10 + hlen..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::from_vec(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textures_are_deterministic_balanced_and_in_range() {
        let a = synth_textures(10, 40, 32, 3);
        let b = synth_textures(10, 40, 32, 3);
        assert_eq!(a, b);
        assert_eq!(a.images.shape(), &[40, 3, 32, 32]);
        assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        for c in 0..10 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 4);
        }
        assert_ne!(a, synth_textures(10, 40, 32, 4));
    }

    #[test]
    fn texture_classes_pair_orientations_and_frequencies() {
        let c0 = texture_class(0, 10);
        let c5 = texture_class(5, 10);
        assert_eq!(c0.orientation, c5.orientation);
        assert!(c0.frequency < c5.frequency);
        assert!((texture_class(1, 20).orientation - PI / 10.0).abs() < 1e-12);
    }

    #[test]
    fn faces_share_templates_across_sample_seeds() {
        let a = synth_faces(0..3, 2, 32, 9, 1);
        assert_eq!(a.labels, vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(a.images.shape(), &[6, 3, 32, 32]);
        assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let b = synth_faces(0..3, 2, 32, 9, 2);
        assert_ne!(a.images, b.images);
    }

    #[test]
    fn png_and_npy_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = synth_textures(3, 6, 8, 0).select(&[0, 3, 1, 4, 2, 5]);
        save_labeled_dir(dir.path(), &data).unwrap();
        let back = load_labeled_dir(dir.path()).unwrap();
        assert_eq!(back.num_classes, 3);
        assert_eq!(back.labels, data.labels);
        for (a, b) in back.images.data().iter().zip(data.images.data()) {
            // 8-bit quantisation
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        let npy = dir.path().join("x.npy");
        write_npy(&npy, data.images.shape(), data.images.data()).unwrap();
        assert_eq!(read_npy(&npy).unwrap(), data.images);
        assert!(load_image_dir(dir.path()).is_err());
    }
}
