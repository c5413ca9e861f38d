//! Synthetic texture datasets for smoke tests and demos.
//!
//! A group plays the role of a video: its frames share texture parameters
//! and differ by phase shifts and sensor noise. Manipulated frames alter a
//! feathered rectangle covering part of the frame:
//!
//! - `blend`: a smoothed foreign texture blended in
//! - `warp`: the texture resampled through a smooth displacement field and
//!   nearest-neighbour upscaled
//! - `noise`: amplified grain with a contrast shift

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{self, Manifest, ManifestEntry, Split, Unit};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Manipulation {
    Blend,
    Warp,
    Noise,
}

/// Class layout of a toy dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyTask {
    /// `real` vs `fake`, fakes drawn from blend and warp.
    Binary,
    /// `real`, `blend`, `warp`, `noise`.
    FourWay,
}

impl ToyTask {
    pub fn class_names(self) -> Vec<String> {
        match self {
            ToyTask::Binary => vec!["real".into(), "fake".into()],
            ToyTask::FourWay => vec!["real".into(), "blend".into(), "warp".into(), "noise".into()],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub task: ToyTask,
    pub size: usize,
    pub groups_per_class: usize,
    pub frames_per_group: usize,
    pub seed: u64,
}

const NOISE: f64 = 0.1;
const FEATHER: f64 = 4.0;

struct Texture {
    base: [f64; 3],
    waves: Vec<(f64, f64, f64, f64, [f64; 3])>,
}

impl Texture {
    fn random(rng: &mut RngStream) -> Self {
        let base = [0.3 + 0.4 * rng.uniform(), 0.3 + 0.4 * rng.uniform(), 0.3 + 0.4 * rng.uniform()];
        let waves = (0..3)
            .map(|_| {
                let freq = 0.04 + 0.18 * rng.uniform();
                let angle = std::f64::consts::PI * rng.uniform();
                let amp = 0.06 + 0.08 * rng.uniform();
                let phase = std::f64::consts::TAU * rng.uniform();
                let tint = [0.5 + rng.uniform(), 0.5 + rng.uniform(), 0.5 + rng.uniform()];
                (freq * angle.cos(), freq * angle.sin(), amp, phase, tint)
            })
            .collect();
        Texture { base, waves }
    }

    fn at(&self, c: usize, x: f64, y: f64, shift: (f64, f64)) -> f64 {
        let mut v = self.base[c];
        for &(fx, fy, amp, phase, tint) in &self.waves {
            let arg = std::f64::consts::TAU * (fx * (x + shift.0) + fy * (y + shift.1)) + phase;
            v += amp * tint[c] * arg.sin();
        }
        v
    }
}

/// Feathered rectangle mask in `[0,1]`.
fn region_mask(size: usize, rng: &mut RngStream) -> Vec<f64> {
    let s = size as f64;
    let w = s * (0.5 + 0.25 * rng.uniform());
    let h = s * (0.5 + 0.25 * rng.uniform());
    let x0 = (s - w) * rng.uniform();
    let y0 = (s - h) * rng.uniform();
    let mut m = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let dx = (px - x0).min(x0 + w - px);
            let dy = (py - y0).min(y0 + h - py);
            m[y * size + x] = (dx.min(dy) / FEATHER).clamp(0.0, 1.0);
        }
    }
    m
}

fn box_blur(plane: &[f64], size: usize, r: isize) -> Vec<f64> {
    let mut out = vec![0.0; plane.len()];
    let n = size as isize;
    for y in 0..n {
        for x in 0..n {
            let (mut acc, mut cnt) = (0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if (0..n).contains(&yy) && (0..n).contains(&xx) {
                        acc += plane[(yy * n + xx) as usize];
                        cnt += 1.0;
                    }
                }
            }
            out[(y * n + x) as usize] = acc / cnt;
        }
    }
    out
}

fn render(tex: &Texture, size: usize, shift: (f64, f64), rng: &mut RngStream, noise: f64) -> Vec<Vec<f64>> {
    (0..3)
        .map(|c| {
            (0..size * size)
                .map(|i| tex.at(c, (i % size) as f64, (i / size) as f64, shift) + rng.normal(0.0, noise))
                .collect()
        })
        .collect()
}

fn manipulate(
    clean: &[Vec<f64>],
    tex: &Texture,
    kind: Manipulation,
    size: usize,
    shift: (f64, f64),
    rng: &mut RngStream,
) -> Vec<Vec<f64>> {
    let mask = region_mask(size, rng);
    let replacement: Vec<Vec<f64>> = match kind {
        Manipulation::Blend => {
            let other = Texture::random(rng);
            let src = render(&other, size, shift, rng, NOISE);
            src.iter()
                .zip(clean)
                .map(|(o, c)| {
                    let mixed: Vec<f64> = o.iter().zip(c).map(|(a, b)| 0.6 * a + 0.4 * b).collect();
                    box_blur(&mixed, size, 2)
                })
                .collect()
        }
        Manipulation::Warp => {
            let amp = 2.0 + 2.0 * rng.uniform();
            let freq = 0.03 + 0.03 * rng.uniform();
            (0..3)
                .map(|c| {
                    (0..size * size)
                        .map(|i| {
                            let (x, y) = ((i % size) as f64, (i / size) as f64);
                            // Nearest-neighbour 2x upscale of a displaced grid.
                            let (gx, gy) = ((x / 2.0).floor() * 2.0, (y / 2.0).floor() * 2.0);
                            let dx = amp * (std::f64::consts::TAU * freq * gy).sin();
                            let dy = amp * (std::f64::consts::TAU * freq * gx).cos();
                            tex.at(c, gx + dx, gy + dy, shift)
                        })
                        .collect()
                })
                .collect()
        }
        Manipulation::Noise => {
            let gain = 1.3 + 0.3 * rng.uniform();
            clean
                .iter()
                .map(|p| {
                    let mean = p.iter().sum::<f64>() / p.len() as f64;
                    p.iter().map(|v| mean + gain * (v - mean) + rng.normal(0.0, 3.0 * NOISE)).collect()
                })
                .collect()
        }
    };
    clean
        .iter()
        .zip(replacement)
        .map(|(c, r)| c.iter().zip(r).zip(&mask).map(|((a, b), m)| (1.0 - m) * a + m * b).collect())
        .collect()
}

fn to_tensor(planes: Vec<Vec<f64>>, size: usize) -> Tensor<f32> {
    let data = planes.into_iter().flatten().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Tensor::from_vec([3, size, size], data).expect("planes are size x size")
}

/// Generate every frame of every group, class by class. Group ids are
/// `c{class}g{k}`; `k` counts from `group_offset` so disjoint splits can be
/// drawn from one seed.
pub fn generate(spec: &ToySpec, group_offset: usize) -> Result<Vec<Unit>> {
    if spec.size < 8 || spec.groups_per_class == 0 || spec.frames_per_group == 0 {
        return Err(Error::Parameter(format!("degenerate toy dataset {spec:?}")));
    }
    let classes = spec.task.class_names().len();
    let root = RngStream::new(spec.seed);
    let mut units = Vec::with_capacity(classes * spec.groups_per_class * spec.frames_per_group);
    for label in 0..classes {
        for k in group_offset..group_offset + spec.groups_per_class {
            let mut rng = root.split((label as u64) << 32 | k as u64);
            let tex = Texture::random(&mut rng);
            let kind = match (spec.task, label) {
                (_, 0) => None,
                (ToyTask::Binary, _) => Some(if rng.uniform() < 0.5 { Manipulation::Blend } else { Manipulation::Warp }),
                (ToyTask::FourWay, 1) => Some(Manipulation::Blend),
                (ToyTask::FourWay, 2) => Some(Manipulation::Warp),
                (ToyTask::FourWay, _) => Some(Manipulation::Noise),
            };
            let group = format!("c{label}g{k}");
            for f in 0..spec.frames_per_group {
                let shift = (8.0 * rng.uniform(), 8.0 * rng.uniform());
                let clean = render(&tex, spec.size, shift, &mut rng, NOISE);
                let planes = match kind {
                    None => clean,
                    Some(m) => manipulate(&clean, &tex, m, spec.size, shift, &mut rng),
                };
                units.push(Unit {
                    id: format!("{group}f{f}"),
                    group_id: group.clone(),
                    label,
                    image: to_tensor(planes, spec.size),
                });
            }
        }
    }
    Ok(units)
}

/// Write PNG frames for train, val and test splits under `dir` plus a
/// `manifest.jsonl`; val and test get `eval_groups` groups per class.
pub fn write_dataset(dir: &Path, spec: &ToySpec, eval_groups: usize) -> Result<Manifest> {
    let names = spec.task.class_names();
    let mut entries = Vec::new();
    let mut offset = 0;
    for (split, groups) in [(Split::Train, spec.groups_per_class), (Split::Val, eval_groups), (Split::Test, eval_groups)] {
        if groups == 0 {
            continue;
        }
        let sub = dir.join(split.to_string());
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let units = generate(&ToySpec { groups_per_class: groups, ..*spec }, offset)?;
        offset += groups;
        for (i, u) in units.iter().enumerate() {
            let rel = Path::new(&split.to_string()).join(format!("{}.png", u.id));
            pipeline::save_image(&dir.join(&rel), &u.image)?;
            entries.push(ManifestEntry {
                path: rel,
                label: names[u.label].clone(),
                split,
                group_id: u.group_id.clone(),
                bbox: None,
                frame_index: Some((i % spec.frames_per_group) as u64),
            });
        }
    }
    let manifest = Manifest {
        entries,
        root: dir.to_path_buf(),
    };
    let path = dir.join("manifest.jsonl");
    std::fs::write(&path, manifest.to_jsonl()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
