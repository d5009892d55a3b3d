//! Deterministic synthetic pre/post/mask volumes for desk-scale runs.
//!
//! Anatomy: one or two half-ellipsoid breast regions above a chest-wall
//! band, a band-limited texture, and Gaussian noise. Lesions are
//! cosine-tapered blobs centred on integer voxels, faintly hypointense in
//! the pre phase; post adds their enhancement (or a small parenchymal
//! uplift, whichever is larger) on top of pre.

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Laterality;
use crate::error::{Error, Result};
use crate::manifest::Split;
use crate::volume::{Volume, VolumeCase};

/// Upper bound on the tumor-free enhancement of breast tissue.
pub const PARENCHYMA_UPLIFT: f32 = 0.03;
/// Lesion support is where the normalised profile reaches this level.
pub const MASK_THRESHOLD: f32 = 0.1;
/// Pre-phase lesion darkening relative to its enhancement peak.
const PRE_SIGNATURE: f32 = 0.25;
const TISSUE_MAX: f32 = 0.55;
const CHEST_WALL: f32 = 0.22;
const TEXTURE_WAVES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub patient_id: String,
    pub laterality: Laterality,
    pub image_size: usize,
    pub depth: usize,
    pub n_lesions: usize,
    pub lesion_radius_range: (f32, f32),
    pub enhancement_range: (f32, f32),
    pub background_texture_scale: f32,
    pub parenchyma_gradient: f32,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            patient_id: "P000".into(),
            laterality: Laterality::Bilateral,
            image_size: 64,
            depth: 16,
            n_lesions: 1,
            lesion_radius_range: (4.0, 8.0),
            enhancement_range: (0.25, 0.5),
            background_texture_scale: 0.08,
            parenchyma_gradient: 0.1,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let (elo, ehi) = self.enhancement_range;
        let (rlo, rhi) = self.lesion_radius_range;
        if self.image_size < 16 || self.depth == 0 {
            return Err(Error::Config(format!(
                "phantom needs image_size ≥ 16 and depth ≥ 1, got {} and {}",
                self.image_size, self.depth
            )));
        }
        if !(elo <= ehi && ehi <= 0.6 && elo >= 0.0) || (self.n_lesions > 0 && elo <= 0.0) {
            return Err(Error::Config(format!(
                "enhancement_range ({elo}, {ehi}) must lie within (0, 0.6]"
            )));
        }
        if !(rlo >= 1.0 && rlo <= rhi) {
            return Err(Error::Config(format!("lesion_radius_range ({rlo}, {rhi}) invalid")));
        }
        if self.noise_sigma < 0.0 || self.background_texture_scale < 0.0 {
            return Err(Error::Config("noise_sigma and texture scale must be ≥ 0".into()));
        }
        Ok(())
    }
}

struct Ellipse {
    cx: f32,
    a: f32,
}

struct Lesion {
    center: (usize, usize, usize),
    radius: f32,
    radius_z: f32,
    peak: f32,
}

impl Lesion {
    /// Normalised `0.5·(1 + cos(π d))` profile, zero outside the unit ball.
    fn profile(&self, z: usize, y: usize, x: usize) -> f32 {
        let dz = (z as f32 - self.center.0 as f32) / self.radius_z;
        let dy = (y as f32 - self.center.1 as f32) / self.radius;
        let dx = (x as f32 - self.center.2 as f32) / self.radius;
        let d = (dx * dx + dy * dy + dz * dz).sqrt();
        if d >= 1.0 {
            0.0
        } else {
            0.5 * (1.0 + (PI * d).cos())
        }
    }
}

struct Anatomy {
    size: f32,
    depth: usize,
    breasts: Vec<Ellipse>,
    chest_y: f32,
    semi_b: f32,
}

impl Anatomy {
    fn new(laterality: Laterality, size: usize, depth: usize) -> Self {
        let s = size as f32;
        let breasts = match laterality {
            Laterality::Bilateral => vec![
                Ellipse {
                    cx: 0.27 * s,
                    a: 0.21 * s,
                },
                Ellipse {
                    cx: 0.73 * s,
                    a: 0.21 * s,
                },
            ],
            Laterality::Unilateral => vec![Ellipse {
                cx: 0.5 * s,
                a: 0.34 * s,
            }],
        };
        Self {
            size: s,
            depth,
            breasts,
            chest_y: 0.78 * s,
            semi_b: 0.62 * s,
        }
    }

    fn z_scale(&self, z: usize) -> f32 {
        0.85 + 0.15 * (PI * (z as f32 + 0.5) / self.depth as f32).sin()
    }

    /// Normalised elliptical radius within the nearest breast, if inside one.
    fn breast_radius(&self, z: usize, y: usize, x: usize) -> Option<f32> {
        let (yf, xf) = (y as f32 + 0.5, x as f32 + 0.5);
        if yf >= self.chest_y {
            return None;
        }
        let s = self.z_scale(z);
        self.breasts
            .iter()
            .map(|e| {
                let u = (xf - e.cx) / (e.a * s);
                let v = (yf - self.chest_y) / (self.semi_b * s);
                (u * u + v * v).sqrt()
            })
            .filter(|r| *r < 1.0)
            .reduce(f32::min)
    }

    fn in_chest_wall(&self, y: usize) -> bool {
        let yf = y as f32 + 0.5;
        yf >= self.chest_y && yf < self.chest_y + 0.12 * self.size
    }
}

struct Texture {
    waves: Vec<([f32; 3], f32)>,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng, size: usize, depth: usize) -> Self {
        let waves = (0..TEXTURE_WAVES)
            .map(|_| {
                let cycles: f32 = rng.random_range(2.0..7.0);
                let theta: f32 = rng.random_range(0.0..2.0 * PI);
                let kz: f32 = rng.random_range(0.0..1.5);
                let k = [
                    2.0 * PI * cycles * theta.cos() / size as f32,
                    2.0 * PI * cycles * theta.sin() / size as f32,
                    2.0 * PI * kz / depth as f32,
                ];
                (k, rng.random_range(0.0..2.0 * PI))
            })
            .collect();
        Self { waves }
    }

    /// Roughly unit-variance band-limited field.
    fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        let norm = (2.0 / TEXTURE_WAVES as f32).sqrt();
        norm * self
            .waves
            .iter()
            .map(|(k, phase)| (k[0] * x as f32 + k[1] * y as f32 + k[2] * z as f32 + phase).sin())
            .sum::<f32>()
    }
}

fn place_lesion(rng: &mut ChaCha8Rng, anatomy: &Anatomy, params: &PhantomParams) -> Lesion {
    let (rlo, rhi) = params.lesion_radius_range;
    let radius = if rhi > rlo { rng.random_range(rlo..=rhi) } else { rlo };
    let radius_z = (radius * 0.4).max(1.5);
    let (elo, ehi) = params.enhancement_range;
    let peak = if ehi > elo { rng.random_range(elo..=ehi) } else { elo };
    let depth = params.depth;
    let z_margin = (radius_z.floor() as usize).min(depth.saturating_sub(1) / 2);
    let zc_range = z_margin..depth - z_margin;
    let size = params.image_size;
    for _ in 0..200 {
        let zc = rng.random_range(zc_range.clone());
        let yc = rng.random_range(0..size);
        let xc = rng.random_range(0..size);
        let inside = anatomy.breast_radius(zc, yc, xc).is_some_and(|r| r < 0.65);
        let clear_of_wall = (yc as f32 + radius) < anatomy.chest_y;
        if inside && clear_of_wall {
            return Lesion {
                center: (zc, yc, xc),
                radius,
                radius_z,
                peak,
            };
        }
    }
    let b = &anatomy.breasts[0];
    Lesion {
        center: (depth / 2, (anatomy.chest_y * 0.6) as usize, b.cx as usize),
        radius,
        radius_z,
        peak,
    }
}

/// Generates one case; a pure function of `params`.
pub fn generate_case(params: &PhantomParams) -> Result<VolumeCase> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let (d, n) = (params.depth, params.image_size);
    let anatomy = Anatomy::new(params.laterality, n, d);
    let texture = Texture::new(&mut rng, n, d);
    let lesions: Vec<Lesion> = (0..params.n_lesions)
        .map(|_| place_lesion(&mut rng, &anatomy, params))
        .collect();
    let noise = Normal::new(0.0f32, params.noise_sigma).expect("sigma validated");

    let mut pre = Volume::zeros(d, n, n);
    let mut post = Volume::zeros(d, n, n);
    let mut mask = Volume::zeros(d, n, n);
    for z in 0..d {
        for y in 0..n {
            for x in 0..n {
                let radius = anatomy.breast_radius(z, y, x);
                let tissue = match radius {
                    Some(r) => {
                        let depth_from_wall = (anatomy.chest_y - y as f32) / anatomy.semi_b;
                        let base = 0.38 + params.parenchyma_gradient * (depth_from_wall - 0.5);
                        // Soft skin edge.
                        let edge = ((1.0 - r) * 8.0).min(1.0);
                        (edge * (base + params.background_texture_scale * texture.at(z, y, x))).clamp(0.0, TISSUE_MAX)
                    }
                    None if anatomy.in_chest_wall(y) => CHEST_WALL,
                    None => 0.0,
                };
                let (mut enh, mut support) = (0.0f32, 0.0f32);
                for l in &lesions {
                    let p = l.profile(z, y, x);
                    enh = enh.max(l.peak * p);
                    support = support.max(p);
                }
                let eps = if params.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                let pre_v = (tissue - PRE_SIGNATURE * enh + eps).clamp(0.0, 1.0);
                let uplift = if radius.is_some() { PARENCHYMA_UPLIFT } else { 0.0 };
                pre.set(z, y, x, pre_v);
                post.set(z, y, x, (pre_v + enh.max(uplift)).clamp(0.0, 1.0));
                if support >= MASK_THRESHOLD {
                    mask.set(z, y, x, 1.0);
                }
            }
        }
    }
    Ok(VolumeCase {
        pre_volume: pre,
        post_volume: post,
        mask_volume: mask,
        patient_id: params.patient_id.clone(),
        laterality: params.laterality,
    })
}

/// Settings for a whole synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusParams {
    pub n_cases: usize,
    pub image_size: usize,
    pub depth: usize,
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            n_cases: 32,
            image_size: 64,
            depth: 16,
            seed: 0,
            train_fraction: 0.75,
        }
    }
}

/// Cases `P000, P001, …` with one or two lesions each and random
/// laterality; the first `round(train_fraction · n)` go to the train split.
pub fn generate_corpus(params: &CorpusParams) -> Result<Vec<(VolumeCase, Split)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n_train = (params.train_fraction * params.n_cases as f64).round() as usize;
    (0..params.n_cases)
        .map(|i| {
            let case_params = PhantomParams {
                patient_id: format!("P{i:03}"),
                laterality: if rng.random::<bool>() {
                    Laterality::Bilateral
                } else {
                    Laterality::Unilateral
                },
                image_size: params.image_size,
                depth: params.depth,
                n_lesions: rng.random_range(1..=2),
                seed: rng.random(),
                ..PhantomParams::default()
            };
            let split = if i < n_train { Split::Train } else { Split::Test };
            Ok((generate_case(&case_params)?, split))
        })
        .collect()
}
