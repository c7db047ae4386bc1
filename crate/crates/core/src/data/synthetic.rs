//! Procedural top-down re-identification scenes.
//!
//! Each identity gets a fixed body hue, body aspect and marker pattern. Each
//! camera gets a fixed cluttered background and a colour style (hue
//! rotation, per-channel gain and brightness offset). An image draws an
//! altitude factor that scales the object, then adds Gaussian pixel noise.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, Record, Split};
use super::ppm::RgbImage;
use crate::config::Kv;
use crate::error::{config, Result};
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_ids: usize,
    pub cameras: usize,
    pub images_per_id_per_cam: usize,
    /// Images per (id, camera) kept out of training; the first becomes a
    /// query, the rest gallery. Zero keeps everything in train.
    pub holdout_per_id_per_cam: usize,
    pub image_size: usize,
    pub altitude_min: f64,
    pub altitude_max: f64,
    pub noise_std: f64,
    /// Per-camera additive brightness; cycled when shorter than `cameras`.
    pub camera_brightness: Vec<f64>,
    /// Per-camera hue rotation in turns; cycled like `camera_brightness`.
    pub camera_hue: Vec<f64>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_ids: 8,
            cameras: 2,
            images_per_id_per_cam: 8,
            holdout_per_id_per_cam: 2,
            image_size: 64,
            altitude_min: 0.55,
            altitude_max: 0.85,
            noise_std: 0.03,
            camera_brightness: vec![0.0, -0.12, 0.1, -0.06],
            camera_hue: vec![0.0, 0.05, -0.04, 0.08],
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn from_kv(mut kv: Kv) -> Result<Self> {
        let d = Self::default();
        let spec = Self {
            num_ids: kv.get("num_ids")?.unwrap_or(d.num_ids),
            cameras: kv.get("cameras")?.unwrap_or(d.cameras),
            images_per_id_per_cam: kv
                .get("images_per_id_per_cam")?
                .unwrap_or(d.images_per_id_per_cam),
            holdout_per_id_per_cam: kv
                .get("holdout_per_id_per_cam")?
                .unwrap_or(d.holdout_per_id_per_cam),
            image_size: kv.get("image_size")?.unwrap_or(d.image_size),
            altitude_min: kv.get("altitude_min")?.unwrap_or(d.altitude_min),
            altitude_max: kv.get("altitude_max")?.unwrap_or(d.altitude_max),
            noise_std: kv.get("noise_std")?.unwrap_or(d.noise_std),
            camera_brightness: kv
                .get_list("camera_brightness")?
                .unwrap_or(d.camera_brightness),
            camera_hue: kv.get_list("camera_hue")?.unwrap_or(d.camera_hue),
            seed: kv.get("seed")?.unwrap_or(d.seed),
        };
        kv.finish()?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_ids < 2 {
            return Err(config("num_ids must be at least 2"));
        }
        if self.cameras == 0 || self.image_size < 8 {
            return Err(config("need at least one camera and image_size >= 8"));
        }
        let h = self.holdout_per_id_per_cam;
        if h == 1 {
            return Err(config(
                "holdout_per_id_per_cam must be 0 or at least 2 (one query plus gallery)",
            ));
        }
        if h > 0 && self.cameras < 2 {
            return Err(config(
                "cross-camera query/gallery needs at least 2 cameras",
            ));
        }
        if h >= self.images_per_id_per_cam {
            return Err(config(format!(
                "holdout {h} leaves no training images out of {} per id and camera",
                self.images_per_id_per_cam
            )));
        }
        if self.cameras * (self.images_per_id_per_cam - h) < 2 {
            return Err(config("each identity needs at least 2 training images"));
        }
        if !(self.altitude_min > 0.0
            && self.altitude_min <= self.altitude_max
            && self.altitude_max <= 1.0)
        {
            return Err(config("altitude range must satisfy 0 < min <= max <= 1"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(config("noise_std must be non-negative"));
        }
        if self.camera_brightness.is_empty() || self.camera_hue.is_empty() {
            return Err(config("camera_brightness and camera_hue must not be empty"));
        }
        Ok(())
    }

    pub fn total_images(&self) -> usize {
        self.num_ids * self.cameras * self.images_per_id_per_cam
    }

    fn split_of(&self, j: usize) -> Split {
        let train = self.images_per_id_per_cam - self.holdout_per_id_per_cam;
        match j {
            j if j < train => Split::Train,
            j if j == train => Split::Query,
            _ => Split::Gallery,
        }
    }
}

/// splitmix64 over a sequence of words.
fn mix(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

#[derive(Clone, Debug)]
struct Identity {
    body: [f64; 3],
    marker: [f64; 3],
    aspect: f64,
    pattern: usize,
    freq: f64,
}

fn identity(seed: u64, id: usize) -> Identity {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, 1, id as u64]));
    let hue0 = (seed % 997) as f64 / 997.0;
    // golden-ratio hue steps keep neighbouring ids far apart
    let hue = hue0 + id as f64 * 0.618_033_988_75;
    Identity {
        body: hsv(hue, 0.75, 0.85),
        marker: hsv(
            hue + 0.5,
            0.6,
            if id.is_multiple_of(2) { 0.95 } else { 0.35 },
        ),
        aspect: rng.gen_range(0.45..0.8),
        pattern: id % 4,
        freq: 2.0 + ((id / 4) % 3) as f64,
    }
}

#[derive(Clone, Debug)]
struct Scene {
    ground: [f64; 3],
    clutter: Vec<([f64; 4], [f64; 3])>,
    brightness: f64,
    gain: [f64; 3],
    hue: [[f64; 3]; 3],
}

/// Rotation of RGB space about the grey axis by `turns` of a full circle.
fn hue_rotation(turns: f64) -> [[f64; 3]; 3] {
    let (s, c) = (turns * std::f64::consts::TAU).sin_cos();
    let k = 1.0 / 3f64.sqrt();
    let t = (1.0 - c) / 3.0;
    [
        [c + t, t - s * k, t + s * k],
        [t + s * k, c + t, t - s * k],
        [t - s * k, t + s * k, c + t],
    ]
}

fn scene(spec: &SyntheticSpec, cam: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[spec.seed, 2, cam as u64]));
    let g = rng.gen_range(0.3..0.5);
    let ground = [g * rng.gen_range(0.8..1.0), g, g * rng.gen_range(0.7..0.95)];
    let clutter = (0..10)
        .map(|_| {
            let (x, y) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
            let (w, h) = (rng.gen_range(0.05..0.25), rng.gen_range(0.05..0.25));
            let v = rng.gen_range(0.2..0.6);
            (
                [x, y, w, h],
                [v, v * rng.gen_range(0.9..1.1), v * rng.gen_range(0.85..1.0)],
            )
        })
        .collect();
    let gain = [
        rng.gen_range(0.85..1.15),
        rng.gen_range(0.85..1.15),
        rng.gen_range(0.85..1.15),
    ];
    Scene {
        ground,
        clutter,
        brightness: spec.camera_brightness[cam % spec.camera_brightness.len()],
        gain,
        hue: hue_rotation(spec.camera_hue[cam % spec.camera_hue.len()]),
    }
}

fn object_pixel(o: &Identity, u: f64, v: f64) -> [f64; 3] {
    let on_marker = match o.pattern {
        0 => ((v * o.freq * 2.0).floor() as i64).rem_euclid(2) == 0,
        1 => ((u * o.freq * 2.0).floor() as i64).rem_euclid(2) == 0,
        2 => (((u * o.freq).floor() + (v * o.freq).floor()) as i64).rem_euclid(2) == 0,
        _ => u * u + v * v < 0.2,
    };
    if on_marker {
        o.marker
    } else {
        o.body
    }
}

/// Renders one image; `altitude` in (0, 1] scales the object.
pub fn render(
    spec: &SyntheticSpec,
    id: usize,
    cam: usize,
    altitude: f64,
    noise_seed: u64,
) -> RgbImage {
    let o = identity(spec.seed, id);
    let sc = scene(spec, cam);
    let n = spec.image_size;
    let half_h = 0.42 * altitude;
    let half_w = half_h * o.aspect;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("finite std");
    let mut img = RgbImage::new(n, n);
    for py in 0..n {
        for px in 0..n {
            let (x, y) = ((px as f64 + 0.5) / n as f64, (py as f64 + 0.5) / n as f64);
            let (u, v) = ((x - 0.5) / half_w, (y - 0.5) / half_h);
            let mut c = if u * u + v * v <= 1.0 {
                object_pixel(&o, u, v)
            } else {
                let mut c = sc.ground;
                for (r, col) in &sc.clutter {
                    if x >= r[0] && x < r[0] + r[2] && y >= r[1] && y < r[1] + r[3] {
                        c = *col;
                    }
                }
                c
            };
            let h = sc.hue;
            c = [0, 1, 2].map(|r| h[r][0] * c[0] + h[r][1] * c[1] + h[r][2] * c[2]);
            for ch in 0..3 {
                c[ch] = c[ch] * sc.gain[ch] + sc.brightness;
                if spec.noise_std > 0.0 {
                    c[ch] += noise.sample(&mut rng);
                }
                img.pixels[(py * n + px) * 3 + ch] = (c[ch].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    img
}

/// Writes `images/*.ppm` and `manifest.csv` under `out_dir`.
pub fn generate(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir)?;
    let per = spec.images_per_id_per_cam;
    let jobs: Vec<(usize, usize, usize)> = (0..spec.num_ids)
        .flat_map(|id| (0..spec.cameras).flat_map(move |c| (0..per).map(move |j| (id, c, j))))
        .collect();
    let images = par::map_range(jobs.len(), true, |i| {
        let (id, cam, j) = jobs[i];
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix(&[spec.seed, 3, id as u64, cam as u64, j as u64]));
        let altitude = rng.gen_range(spec.altitude_min..=spec.altitude_max);
        render(spec, id, cam, altitude, rng.gen())
    });
    let mut records = Vec::with_capacity(jobs.len());
    for (&(id, cam, j), img) in jobs.iter().zip(&images) {
        let rel = format!("images/id{id:03}_c{cam}_{j:03}.ppm");
        img.save(&out_dir.join(&rel))?;
        records.push(Record {
            path: rel,
            object_id: id,
            camera_id: cam,
            split: spec.split_of(j),
        });
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        records,
    };
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
