use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::vocab::{Attributes, Slot};
use crate::config::DataConfig;
use crate::error::{Result, WaveError};
use crate::tensor::Tensor;

/// Attempts per point when placing class latents.
const PLACEMENT_TRIES: usize = 20_000;

/// Ground-truth generative model of the synthetic clips.
///
/// Each slot has `classes` unit latent vectors. Visual frames render the
/// object and speaker latents, the speech stream renders the speaker and the
/// audio-event stream renders object and sound; every frame adds Gaussian
/// noise of standard deviation `noise`. Rendering maps have orthonormal
/// rows or columns, so they neither collapse nor stretch latent distances
/// when the output is at least as wide as the input.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSpec {
    pub classes: usize,
    pub latent_dim: usize,
    pub noise: f64,
    /// `[classes × latent_dim]` per slot, in object, sound, speaker order.
    pub tables: [Tensor; 3],
    /// Smallest pairwise distance within any slot table.
    pub min_distance: f64,
    /// `[2·latent_dim × visual_dim]` over `(object, speaker)`.
    pub visual_map: Tensor,
    /// `[latent_dim × speech_dim]` over the speaker.
    pub speech_map: Tensor,
    /// `[2·latent_dim × audio_dim]` over `(object, sound)`.
    pub audio_map: Tensor,
    digest: String,
}

#[derive(Serialize)]
struct DigestInput<'a> {
    data: &'a DataConfig,
    seed: u64,
}

impl LatentSpec {
    pub fn new(cfg: &DataConfig, seed: u64) -> Result<Self> {
        let mut errors = Vec::new();
        cfg.validate(&mut errors);
        if !errors.is_empty() {
            return Err(WaveError::Validation(errors));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let floor = 4.0 * cfg.noise;
        let mut tables = Vec::with_capacity(3);
        let mut min_distance = f64::INFINITY;
        for _ in 0..3 {
            let (t, d) = place_classes(cfg.classes, cfg.latent_dim, floor, &mut rng)?;
            min_distance = min_distance.min(d);
            tables.push(t);
        }
        let ld = cfg.latent_dim;
        let visual_map = orthonormal(2 * ld, cfg.visual_dim, &mut rng);
        let speech_map = orthonormal(ld, cfg.speech_dim, &mut rng);
        let audio_map = orthonormal(2 * ld, cfg.audio_dim, &mut rng);
        let digest_src = serde_json::to_vec(&DigestInput { data: cfg, seed }).expect("serializable");
        Ok(Self {
            classes: cfg.classes,
            latent_dim: ld,
            noise: cfg.noise,
            tables: tables.try_into().expect("three tables"),
            min_distance,
            visual_map,
            speech_map,
            audio_map,
            digest: hex::encode(Sha256::digest(digest_src)),
        })
    }

    /// Hex SHA-256 of the generating configuration and seed.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn latent(&self, slot: Slot, class: usize) -> &[f64] {
        self.tables[slot.index()].row(class)
    }

    fn joint(&self, a: (Slot, usize), b: (Slot, usize)) -> Vec<f64> {
        let mut z = self.latent(a.0, a.1).to_vec();
        z.extend_from_slice(self.latent(b.0, b.1));
        z
    }

    /// Noise-free visual frame.
    pub fn visual_mean(&self, attrs: &Attributes) -> Vec<f64> {
        let z = self.joint((Slot::Object, attrs.object), (Slot::Speaker, attrs.speaker));
        project(&z, &self.visual_map)
    }

    pub fn speech_mean(&self, attrs: &Attributes) -> Vec<f64> {
        project(self.latent(Slot::Speaker, attrs.speaker), &self.speech_map)
    }

    pub fn audio_mean(&self, attrs: &Attributes) -> Vec<f64> {
        let z = self.joint((Slot::Object, attrs.object), (Slot::Sound, attrs.sound));
        project(&z, &self.audio_map)
    }

    fn render<R: Rng>(&self, mean: &[f64], frames: usize, rng: &mut R) -> Tensor {
        let mut data = Vec::with_capacity(frames * mean.len());
        for _ in 0..frames {
            for &m in mean {
                data.push(m + self.noise * rng.sample::<f64, _>(StandardNormal));
            }
        }
        Tensor::new(vec![frames, mean.len()], data).expect("frame shape")
    }

    pub fn render_visual<R: Rng>(&self, attrs: &Attributes, frames: usize, rng: &mut R) -> Tensor {
        self.render(&self.visual_mean(attrs), frames, rng)
    }

    pub fn render_speech<R: Rng>(&self, attrs: &Attributes, frames: usize, rng: &mut R) -> Tensor {
        self.render(&self.speech_mean(attrs), frames, rng)
    }

    pub fn render_audio<R: Rng>(&self, attrs: &Attributes, frames: usize, rng: &mut R) -> Tensor {
        self.render(&self.audio_mean(attrs), frames, rng)
    }
}

fn project(z: &[f64], map: &Tensor) -> Vec<f64> {
    let (_, n) = map.dims2().expect("matrix");
    let mut out = vec![0.0; n];
    for (i, &zi) in z.iter().enumerate() {
        for (o, &w) in out.iter_mut().zip(map.row(i)) {
            *o += zi * w;
        }
    }
    out
}

/// Greedy rejection sampling of unit vectors. Starts from a generous
/// separation target and relaxes it until all points fit, but never below
/// `floor`.
fn place_classes(classes: usize, dim: usize, floor: f64, rng: &mut ChaCha8Rng) -> Result<(Tensor, f64)> {
    let mut target: f64 = 1.0;
    loop {
        if target <= floor {
            return Err(WaveError::Degenerate(format!(
                "cannot place {classes} classes in {dim} dimensions more than {floor} apart"
            )));
        }
        let mut points: Vec<Vec<f64>> = Vec::with_capacity(classes);
        let mut tries = 0;
        while points.len() < classes && tries < PLACEMENT_TRIES * classes {
            tries += 1;
            let v = unit(dim, rng);
            if points.iter().all(|p| dist(p, &v) > target) {
                points.push(v);
            }
        }
        if points.len() == classes {
            let mut min = f64::INFINITY;
            for i in 0..classes {
                for j in 0..i {
                    min = min.min(dist(&points[i], &points[j]));
                }
            }
            let data = points.concat();
            return Ok((Tensor::new(vec![classes, dim], data)?, min));
        }
        target = (target * 0.8).max(floor * 1.000_001);
    }
}

fn unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `[rows × cols]` matrix whose rows (if `rows <= cols`) or columns are
/// orthonormal, via Gram-Schmidt on a Gaussian draw.
fn orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let (k, len) = (rows.min(cols), rows.max(cols));
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let mut m = Tensor::zeros(&[rows, cols]);
    for (i, b) in basis.iter().enumerate() {
        for (j, &x) in b.iter().enumerate() {
            let (r, c) = if rows <= cols { (i, j) } else { (j, i) };
            m.data_mut()[r * cols + c] = x;
        }
    }
    m
}
