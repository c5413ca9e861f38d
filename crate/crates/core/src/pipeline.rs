//! Pre- and post-processing around the network.
//!
//! Faces are located by an external detector; the manifest carries the
//! resulting boxes. Images are cropped, optionally resized and tiled into
//! patches, and per-unit probabilities are averaged per group (video or
//! source image).

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::SampleScore;
use crate::par;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Pixel rectangle `[x, y, w, h]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox(pub [usize; 4]);

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: String,
    pub split: Split,
    pub group_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_index: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths resolve against.
    pub root: PathBuf,
}

impl Manifest {
    /// Parse JSON-lines text; blank lines are ignored.
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(line)
                .map_err(|err| Error::Data(format!("manifest line {}: {err}", n + 1)))?;
            if !seen.insert(e.path.clone()) {
                return Err(Error::Data(format!(
                    "manifest line {}: duplicate path {}",
                    n + 1,
                    e.path.display()
                )));
            }
            entries.push(e);
        }
        Ok(Manifest {
            entries,
            root: root.into(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("manifest entries serialize") + "\n")
            .collect()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    /// Check labels against the class set.
    pub fn validate_labels(&self, classes: &[String]) -> Result<()> {
        for e in &self.entries {
            if !classes.contains(&e.label) {
                return Err(Error::Data(format!(
                    "label {:?} of {} not in class set {classes:?}",
                    e.label,
                    e.path.display()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub path: PathBuf,
    pub reason: String,
}

/// Ordered selection of manifest entries for one split.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSelection {
    pub entries: Vec<ManifestEntry>,
    pub skipped: Vec<Skipped>,
}

/// Select a split: groups in order of first appearance, within a group the
/// lowest frame indices first (entries without an index last, in manifest
/// order), at most `frames_per_group` per group. Entries whose file is
/// missing are reported in `skipped` and do not count toward the cap.
pub fn build_split(manifest: &Manifest, split: Split, frames_per_group: usize, check_files: bool) -> SplitSelection {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<(usize, &ManifestEntry)>> = HashMap::new();
    let mut skipped = Vec::new();
    for (pos, e) in manifest.entries.iter().enumerate().filter(|(_, e)| e.split == split) {
        if check_files && !manifest.resolve(e).is_file() {
            skipped.push(Skipped {
                path: e.path.clone(),
                reason: "file not found".into(),
            });
            continue;
        }
        let g = groups.entry(e.group_id.as_str()).or_insert_with(|| {
            order.push(e.group_id.as_str());
            Vec::new()
        });
        g.push((pos, e));
    }
    let mut entries = Vec::new();
    for g in order {
        let mut members = groups.remove(g).expect("group recorded");
        members.sort_by_key(|&(pos, e)| (e.frame_index.unwrap_or(u64::MAX), pos));
        entries.extend(members.into_iter().take(frames_per_group).map(|(_, e)| e.clone()));
    }
    SplitSelection { entries, skipped }
}

fn image_dims<T: Element>(image: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::dim(op, format!("expected a [C,H,W] image, got {s:?}"))),
    }
}

/// Copy of `image[:, y..y+h, x..x+w]`.
pub fn crop_region<T: Element>(image: &Tensor<T>, bbox: BBox) -> Result<Tensor<T>> {
    let (c, ih, iw) = image_dims(image, "crop_region")?;
    let [x, y, w, h] = bbox.0;
    if w == 0 || h == 0 || x + w > iw || y + h > ih {
        return Err(Error::dim(
            "crop_region",
            format!("box [{x}, {y}, {w}, {h}] outside {iw}x{ih} image"),
        ));
    }
    let mut out = Vec::with_capacity(c * h * w);
    for plane in image.data().chunks(ih * iw) {
        for row in y..y + h {
            out.extend_from_slice(&plane[row * iw + x..row * iw + x + w]);
        }
    }
    Tensor::from_vec([c, h, w], out)
}

/// Centered `S×S` crop at offsets `⌊(H−S)/2⌋, ⌊(W−S)/2⌋`.
pub fn center_crop<T: Element>(image: &Tensor<T>, size: usize) -> Result<Tensor<T>> {
    let (_, h, w) = image_dims(image, "center_crop")?;
    if size == 0 || size > h.min(w) {
        return Err(Error::dim(
            "center_crop",
            format!("crop {size} does not fit a {w}x{h} image"),
        ));
    }
    crop_region(image, BBox([(w - size) / 2, (h - size) / 2, size, size]))
}

/// Non-overlapping `P×P` tiles in row-major order; the right and bottom
/// remainders are discarded.
pub fn split_patches<T: Element>(image: &Tensor<T>, p: usize) -> Result<Vec<Tensor<T>>> {
    let (_, h, w) = image_dims(image, "split_patches")?;
    if p == 0 || h < p || w < p {
        return Err(Error::dim(
            "split_patches",
            format!("{w}x{h} image smaller than patch size {p}"),
        ));
    }
    let mut out = Vec::with_capacity((h / p) * (w / p));
    for r in 0..h / p {
        for c in 0..w / p {
            out.push(crop_region(image, BBox([c * p, r * p, p, p]))?);
        }
    }
    Ok(out)
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear<T: Element>(image: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = image_dims(image, "resize_bilinear")?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::dim("resize_bilinear", "empty image or target"));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(image.clone());
    }
    let axis = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let (ys, xs) = (axis(out_h, h), axis(out_w, w));
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for plane in image.data().chunks(h * w) {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let at = |y: usize, x: usize| plane[y * w + x].as_f64();
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(T::from_f64_lossy(top * (1.0 - fy) + bot * fy));
            }
        }
    }
    Tensor::from_vec([c, out_h, out_w], out)
}

/// Read an 8-bit PNG or binary PPM as RGB `[3,H,W]` in `[0,1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = f32::from(px.0[c]) / 255.0;
        }
    }
    Tensor::from_vec([3, h, w], data)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a `[3,H,W]` image in `[0,1]` as PNG (or PPM by extension).
pub fn save_image<T: Element>(path: &Path, image: &Tensor<T>) -> Result<()> {
    let (c, h, w) = image_dims(image, "save_image")?;
    if c != 3 {
        return Err(Error::dim("save_image", format!("expected 3 channels, got {c}")));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        for ch in 0..3 {
            px.0[ch] = to_u8(image.data()[ch * h * w + i].as_f64());
        }
    }
    buf.save(path).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

/// Write an `[H,W]` map in `[0,1]` as grayscale PNG.
pub fn save_gray_png<T: Element>(path: &Path, map: &Tensor<T>) -> Result<()> {
    let &[h, w] = map.shape() else {
        return Err(Error::dim("save_gray_png", format!("expected [H,W], got {:?}", map.shape())));
    };
    let pixels = map.data().iter().map(|v| to_u8(v.as_f64())).collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer size matches");
    buf.save(path).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

/// How manifest images become network inputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    /// Use the whole image.
    #[default]
    None,
    /// Crop to the manifest box; entries without one use the whole image.
    Bbox,
    /// Centered square crop of the given side.
    Center(usize),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preprocess {
    #[serde(default)]
    pub crop: CropMode,
    /// Square side the crop is resized to, if any.
    #[serde(default)]
    pub input_size: Option<usize>,
    /// Tile into patches of this side after resizing.
    #[serde(default)]
    pub patch_size: Option<usize>,
}

impl Preprocess {
    /// Network inputs for one image: one tensor, or its patches.
    pub fn apply(&self, image: &Tensor<f32>, bbox: Option<BBox>) -> Result<Vec<Tensor<f32>>> {
        let cropped = match (self.crop, bbox) {
            (CropMode::None, _) | (CropMode::Bbox, None) => image.clone(),
            (CropMode::Bbox, Some(b)) => crop_region(image, b)?,
            (CropMode::Center(s), _) => center_crop(image, s)?,
        };
        let sized = match self.input_size {
            Some(s) => resize_bilinear(&cropped, s, s)?,
            None => cropped,
        };
        match self.patch_size {
            Some(p) => split_patches(&sized, p),
            None => Ok(vec![sized]),
        }
    }
}

/// A network input with its identity.
#[derive(Clone, Debug)]
pub struct Unit {
    pub id: String,
    pub group_id: String,
    pub label: usize,
    pub image: Tensor<f32>,
}

/// Loaded units of one split.
#[derive(Clone, Debug)]
pub struct LoadedSplit {
    pub units: Vec<Unit>,
    pub skipped: Vec<Skipped>,
}

/// Load and preprocess selected entries in parallel, keeping manifest
/// order. Undecodable files join the skip report.
pub fn load_units(
    manifest: &Manifest,
    selection: &SplitSelection,
    classes: &[String],
    prep: &Preprocess,
) -> Result<LoadedSplit> {
    let loaded = par::map_indexed(selection.entries.len(), |i| {
        let e = &selection.entries[i];
        load_image(&manifest.resolve(e)).and_then(|img| prep.apply(&img, e.bbox))
    });
    let mut units = Vec::new();
    let mut skipped = selection.skipped.clone();
    for (e, r) in selection.entries.iter().zip(loaded) {
        let label = classes
            .iter()
            .position(|c| c == &e.label)
            .ok_or_else(|| Error::Data(format!("label {:?} not in class set {classes:?}", e.label)))?;
        match r {
            Ok(parts) => {
                let many = parts.len() > 1;
                for (k, image) in parts.into_iter().enumerate() {
                    let id = if many {
                        format!("{}#{k}", e.path.display())
                    } else {
                        e.path.display().to_string()
                    };
                    units.push(Unit {
                        id,
                        group_id: e.group_id.clone(),
                        label,
                        image,
                    });
                }
            }
            Err(err @ Error::Data(_)) => skipped.push(Skipped {
                path: e.path.clone(),
                reason: err.to_string(),
            }),
            Err(err) => return Err(err),
        }
    }
    Ok(LoadedSplit { units, skipped })
}

/// Per-class arithmetic mean of probability vectors.
pub fn aggregate_scores(probs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let k = probs
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Data("nothing to aggregate".into()))?;
    if probs.iter().any(|p| p.len() != k) {
        return Err(Error::dim("aggregate_scores", "probability vectors differ in length"));
    }
    let n = probs.len() as f64;
    Ok((0..k).map(|j| probs.iter().map(|p| p[j]).sum::<f64>() / n).collect())
}

/// Average unit scores per group, groups in order of first appearance.
/// A group's label is that of its first unit; mixed labels are an error.
pub fn aggregate_groups(samples: &[SampleScore]) -> Result<Vec<SampleScore>> {
    let mut order: Vec<&str> = Vec::new();
    let mut members: HashMap<&str, Vec<&SampleScore>> = HashMap::new();
    for s in samples {
        members
            .entry(s.group_id.as_str())
            .or_insert_with(|| {
                order.push(s.group_id.as_str());
                Vec::new()
            })
            .push(s);
    }
    order
        .into_iter()
        .map(|g| {
            let m = &members[g];
            let label = m[0].label;
            if m.iter().any(|s| s.label != label) {
                return Err(Error::Data(format!("group {g} mixes labels")));
            }
            let probs: Vec<Vec<f64>> = m.iter().map(|s| s.probs.clone()).collect();
            Ok(SampleScore {
                sample_id: g.to_string(),
                group_id: g.to_string(),
                label,
                probs: aggregate_scores(&probs)?,
            })
        })
        .collect()
}
