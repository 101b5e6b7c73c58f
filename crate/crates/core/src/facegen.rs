//! Procedural "faces": layered anti-aliased vector primitives whose shape and
//! colour are driven by a 12-dimensional identity vector, plus a nuisance
//! transform (pose, lighting, background) that varies between photos.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::Image;
use crate::rng::{derive_seed, seeded};

pub const ID_DIMS: usize = 12;
pub const MIN_RENDER_SIZE: usize = 32;
/// Reference photos per identity; the remainder of each identity is test data.
pub const REFERENCE_PER_ID: usize = 10;
pub const DATASET_FORMAT: &str = "dpt-faces";

const SEED_IDENTITY: u64 = 1;
const SEED_NUISANCE: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub label: u32,
    /// face width, face height, skin lightness, skin warmth, eye spacing,
    /// eye size, iris hue, nose length, mouth width, mouth curvature,
    /// brow angle, hair hue
    pub id_vector: [f64; ID_DIMS],
}

impl IdentitySpec {
    pub fn validate(&self) -> Result<()> {
        if self.id_vector.iter().all(|v| (0.0..=1.0).contains(v)) {
            Ok(())
        } else {
            Err(invalid("identity components must lie in [0, 1]"))
        }
    }

    pub fn distance(&self, other: &IdentitySpec) -> f64 {
        self.id_vector
            .iter()
            .zip(other.id_vector.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuisanceSpec {
    /// Pixels, within +-4.
    pub dx: f64,
    pub dy: f64,
    /// Degrees, within +-10.
    pub rotation: f64,
    /// Additive, within +-0.1.
    pub brightness: f64,
    pub background_hue: f64,
}

impl NuisanceSpec {
    pub const NEUTRAL: NuisanceSpec = NuisanceSpec {
        dx: 0.0,
        dy: 0.0,
        rotation: 0.0,
        brightness: 0.0,
        background_hue: 0.55,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = self.dx.abs() <= 4.0
            && self.dy.abs() <= 4.0
            && self.rotation.abs() <= 10.0
            && self.brightness.abs() <= 0.1
            && (0.0..=1.0).contains(&self.background_hue);
        if ok {
            Ok(())
        } else {
            Err(invalid("nuisance outside its stated range"))
        }
    }
}

pub fn sample_identity<R: Rng + ?Sized>(rng: &mut R, label: u32) -> IdentitySpec {
    let mut id_vector = [0f64; ID_DIMS];
    for v in id_vector.iter_mut() {
        *v = rng.random::<f64>();
    }
    IdentitySpec { label, id_vector }
}

pub fn sample_nuisance<R: Rng + ?Sized>(rng: &mut R) -> NuisanceSpec {
    NuisanceSpec {
        dx: rng.random_range(-4.0..=4.0),
        dy: rng.random_range(-4.0..=4.0),
        rotation: rng.random_range(-10.0..=10.0),
        brightness: rng.random_range(-0.1..=0.1),
        background_hue: rng.random::<f64>(),
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn ellipse_sd(px: f64, py: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let (u, v) = ((px - cx) / rx, (py - cy) / ry);
    ((u * u + v * v).sqrt() - 1.0) * rx.min(ry)
}

fn segment_sd(px: f64, py: f64, a: (f64, f64), b: (f64, f64), half_width: f64) -> f64 {
    let (bax, bay) = (b.0 - a.0, b.1 - a.1);
    let (pax, pay) = (px - a.0, py - a.1);
    let h = ((pax * bax + pay * bay) / (bax * bax + bay * bay)).clamp(0.0, 1.0);
    let (dx, dy) = (pax - bax * h, pay - bay * h);
    (dx * dx + dy * dy).sqrt() - half_width
}

/// Shape parameters decoded from the identity vector, in units of image size.
struct Face {
    fw: f64,
    fh: f64,
    skin: [f64; 3],
    eye_dx: f64,
    eye_r: f64,
    iris: [f64; 3],
    nose: f64,
    mouth_w: f64,
    mouth_c: f64,
    brow: f64,
    hair: [f64; 3],
}

impl Face {
    fn decode(v: &[f64; ID_DIMS]) -> Self {
        let light = lerp(0.45, 0.92, v[2]);
        let warm = lerp(0.02, 0.11, v[3]);
        Face {
            fw: lerp(0.24, 0.34, v[0]),
            fh: lerp(0.30, 0.40, v[1]),
            skin: hsv(warm, lerp(0.25, 0.55, v[3]), light),
            eye_dx: lerp(0.08, 0.15, v[4]),
            eye_r: lerp(0.030, 0.060, v[5]),
            iris: hsv(v[6], 0.75, 0.65),
            nose: lerp(0.05, 0.13, v[7]),
            mouth_w: lerp(0.06, 0.15, v[8]),
            mouth_c: lerp(-1.0, 1.0, v[9]),
            brow: lerp(-0.45, 0.45, v[10]),
            hair: hsv(v[11], 0.7, lerp(0.25, 0.8, v[11])),
        }
    }
}

/// Rasterizes one face. Output is 8-bit quantized so renders and their PNG
/// round trips agree exactly.
pub fn render_face(id: &IdentitySpec, nu: &NuisanceSpec, size: usize) -> Result<Image> {
    if size < MIN_RENDER_SIZE {
        return Err(invalid(format!("render size must be >= {MIN_RENDER_SIZE}, got {size}")));
    }
    id.validate()?;
    nu.validate()?;
    let f = Face::decode(&id.id_vector);
    let s = size as f64;
    let aa = 1.0 / s;
    let (sin, cos) = (-nu.rotation.to_radians()).sin_cos();
    let bg = hsv(nu.background_hue, 0.35, 0.8);
    let brow_col = f.hair.map(|c| c * 0.6);
    let nose_col = f.skin.map(|c| c * 0.78);
    let lip = [0.62, 0.18, 0.22];
    let cover = |d: f64| (0.5 - d / aa).clamp(0.0, 1.0);

    let mut img = Image::filled(size, size, 3, 0.0);
    for py in 0..size {
        for px in 0..size {
            // undo translation then rotation about the centre
            let x0 = (px as f64 + 0.5 - nu.dx) / s - 0.5;
            let y0 = (py as f64 + 0.5 - nu.dy) / s - 0.5;
            let x = cos * x0 - sin * y0;
            let y = sin * x0 + cos * y0;

            let g = 1.0 - 0.25 * (y + 0.5);
            let mut c = bg.map(|v| v * g);
            let mut paint = |col: [f64; 3], a: f64| {
                if a > 0.0 {
                    for k in 0..3 {
                        c[k] = lerp(c[k], col[k], a);
                    }
                }
            };

            // neck, hair mass, face
            paint(f.skin.map(|v| v * 0.85), cover(segment_sd(x, y, (0.0, 0.2), (0.0, 0.6), f.fw * 0.45)));
            paint(f.hair, cover(ellipse_sd(x, y, 0.0, -0.05, f.fw + 0.05, f.fh + 0.03)));
            let shade = 1.0 - 0.18 * (x / f.fw).powi(2).min(1.0);
            paint(f.skin.map(|v| v * shade), cover(ellipse_sd(x, y, 0.0, 0.03, f.fw, f.fh)));

            let ey = -0.02;
            for side in [-1.0f64, 1.0] {
                let ex = side * f.eye_dx;
                paint([0.96, 0.96, 0.94], cover(ellipse_sd(x, y, ex, ey, f.eye_r * 1.35, f.eye_r * 0.85)));
                paint(f.iris, cover(ellipse_sd(x, y, ex, ey, f.eye_r * 0.7, f.eye_r * 0.7)));
                paint([0.05, 0.05, 0.07], cover(ellipse_sd(x, y, ex, ey, f.eye_r * 0.32, f.eye_r * 0.32)));
                let by = ey - f.eye_r * 1.7;
                let half = f.eye_r * 1.5;
                let (bs, bc) = (side * f.brow).sin_cos();
                let a = (ex - bc * half, by - bs * half);
                let b = (ex + bc * half, by + bs * half);
                paint(brow_col, cover(segment_sd(x, y, a, b, 0.011)));
            }

            paint(nose_col, cover(segment_sd(x, y, (0.0, ey + 0.02), (0.0, ey + 0.02 + f.nose), 0.010)));

            let my = 0.03 + f.fh * 0.55;
            let mouth_d = {
                let xx = x.clamp(-f.mouth_w, f.mouth_w);
                let k = f.mouth_c * 0.05;
                let cy = my + k * ((xx / f.mouth_w).powi(2) - 0.5);
                ((x - xx).powi(2) + (y - cy).powi(2)).sqrt() - 0.012
            };
            paint(lip, cover(mouth_d));

            for k in 0..3 {
                img.set(px, py, k, (c[k] + nu.brightness).clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok(img.quantize8())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Reference,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub label: u32,
    pub index: usize,
    pub split: Split,
    pub id_vector: [f64; ID_DIMS],
    pub nuisance: NuisanceSpec,
    /// Relative to the dataset root.
    pub file: String,
    /// Seed of the nuisance stream, derived from the root seed.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub root_seed: u64,
    pub size: usize,
    pub n_ids: usize,
    pub per_id: usize,
    pub rows: Vec<DatasetRow>,
}

/// A dataset held in memory, rows and images in manifest order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Image>,
}

pub fn identity_for(root_seed: u64, label: u32) -> IdentitySpec {
    sample_identity(&mut seeded(derive_seed(root_seed, &[SEED_IDENTITY, label as u64])), label)
}

impl Dataset {
    pub fn generate(n_ids: usize, per_id: usize, size: usize, root_seed: u64) -> Result<Self> {
        if n_ids == 0 || per_id == 0 {
            return Err(invalid("dataset needs at least one identity and one image per identity"));
        }
        if size < MIN_RENDER_SIZE {
            return Err(invalid(format!("render size must be >= {MIN_RENDER_SIZE}, got {size}")));
        }
        let mut rows = Vec::with_capacity(n_ids * per_id);
        for label in 0..n_ids as u32 {
            let id = identity_for(root_seed, label);
            for index in 0..per_id {
                let seed = derive_seed(root_seed, &[SEED_NUISANCE, label as u64, index as u64]);
                rows.push(DatasetRow {
                    label,
                    index,
                    split: if index < REFERENCE_PER_ID { Split::Reference } else { Split::Test },
                    id_vector: id.id_vector,
                    nuisance: sample_nuisance(&mut seeded(seed)),
                    file: format!("images/{label}/{index}.png"),
                    seed,
                });
            }
        }
        let images = rows
            .par_iter()
            .map(|r| render_face(&r.identity(), &r.nuisance, size))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            manifest: DatasetManifest {
                format: DATASET_FORMAT.to_string(),
                root_seed,
                size,
                n_ids,
                per_id,
                rows,
            },
            images,
        })
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (row, img) in self.manifest.rows.iter().zip(&self.images) {
            img.save_png(dir.join(&row.file))?;
        }
        let json = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: DatasetManifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        if manifest.format != DATASET_FORMAT {
            return Err(invalid(format!("{} is not a face dataset", dir.display())));
        }
        let images = manifest
            .rows
            .iter()
            .map(|r| Image::load(dir.join(&r.file)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> Vec<u32> {
        let mut l: Vec<u32> = self.manifest.rows.iter().map(|r| r.label).collect();
        l.dedup();
        l
    }

    pub fn size(&self) -> usize {
        self.manifest.size
    }

    pub fn identity(&self, label: u32) -> Option<IdentitySpec> {
        self.manifest.rows.iter().find(|r| r.label == label).map(|r| r.identity())
    }

    /// Row indices of one identity, optionally restricted to a split.
    pub fn indices(&self, label: u32, split: Option<Split>) -> Vec<usize> {
        self.manifest
            .rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label == label && split.is_none_or(|s| r.split == s))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn images_of(&self, label: u32, split: Option<Split>) -> Vec<Image> {
        self.indices(label, split).into_iter().map(|i| self.images[i].clone()).collect()
    }

    /// Row indices of every identity except `label`.
    pub fn indices_excluding(&self, label: u32) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.manifest.rows[i].label != label).collect()
    }
}

impl DatasetRow {
    pub fn identity(&self) -> IdentitySpec {
        IdentitySpec {
            label: self.label,
            id_vector: self.id_vector,
        }
    }
}

/// Renders and writes `n_ids x per_id` faces plus `manifest.json` under `dir`.
pub fn make_dataset(dir: impl AsRef<Path>, n_ids: usize, per_id: usize, size: usize, root_seed: u64) -> Result<Dataset> {
    let ds = Dataset::generate(n_ids, per_id, size, root_seed)?;
    ds.write(dir)?;
    Ok(ds)
}
