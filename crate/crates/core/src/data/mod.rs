//! Datasets of (image, binary mask, group id) samples: loading from PGM
//! directories, resizing, patient-grouped splits, synthetic blobs, and
//! mini-batching.

pub mod pgm;
mod split;
mod synth;

pub use split::{split, GroupAssignment, SplitManifest, SplitPolicy};
pub use synth::{synth_blobs, SynthConfig};

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::loss::LabelMask;
use crate::rng;
use crate::tensor::{Shape4, Tensor4};

/// Mask pixels at or above this 8-bit level count as foreground.
pub const MASK_THRESHOLD: u8 = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub group_id: String,
    pub height: usize,
    pub width: usize,
    /// Row-major intensities in [0, 1].
    pub image: Vec<f64>,
    /// Row-major 0/1 labels.
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn new(name: impl Into<String>, group_id: impl Into<String>, height: usize, width: usize, image: Vec<f64>, mask: Vec<u8>) -> Result<Self> {
        let name = name.into();
        if image.len() != height * width || mask.len() != height * width {
            return Err(Error::dim(format!(
                "sample {name}: image ({}) and mask ({}) must both have {height}x{width} pixels",
                image.len(),
                mask.len()
            )));
        }
        if mask.iter().any(|&m| m > 1) {
            return Err(Error::dim(format!("sample {name}: mask is not binary")));
        }
        Ok(Self {
            name,
            group_id: group_id.into(),
            height,
            width,
            image,
            mask,
        })
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m == 1).count() as f64 / self.mask.len() as f64
    }
}

/// Samples ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(mut samples: Vec<Sample>) -> Self {
        samples.sort_by(|a, b| a.name.cmp(&b.name));
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.samples.binary_search_by(|s| s.name.as_str().cmp(name)).ok()
    }

    /// The named samples, in the order given.
    pub fn subset(&self, names: &[String]) -> Result<Dataset> {
        let samples = names
            .iter()
            .map(|n| {
                self.index_of(n)
                    .map(|i| self.samples[i].clone())
                    .ok_or_else(|| Error::Manifest(format!("unknown sample {n}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset::new(samples))
    }

    /// Resizes every sample whose size differs from `(h, w)`.
    pub fn resized(&self, h: usize, w: usize) -> Dataset {
        Dataset {
            samples: self.samples.iter().map(|s| resize_bilinear(s, (h, w))).collect(),
        }
    }
}

fn is_pgm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

/// Sorted `.pgm` files of a directory.
pub fn list_pgm(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Load {
        path: dir.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_pgm(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn sample_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Reads a two-column `name,group` CSV. A header row naming those columns
/// is skipped; a trailing `.pgm` on names is ignored.
pub fn read_group_map(path: &Path) -> Result<HashMap<String, String>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Load {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    let mut map = HashMap::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Load {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        if rec.len() < 2 {
            return Err(Error::Load {
                path: path.to_path_buf(),
                msg: format!("row {} needs two columns (name, group)", i + 1),
            });
        }
        if i == 0 && rec[0].eq_ignore_ascii_case("name") {
            continue;
        }
        let name = rec[0].strip_suffix(".pgm").unwrap_or(&rec[0]).to_string();
        map.insert(name, rec[1].to_string());
    }
    Ok(map)
}

/// Loads every `.pgm` in `image_dir` with its same-named mask from
/// `mask_dir`. Intensities are scaled to [0, 1]; masks become 1 where the
/// 8-bit value is ≥ 128. Samples missing from the group map form their
/// own group.
pub fn load_dataset(image_dir: &Path, mask_dir: &Path, group_map_file: Option<&Path>) -> Result<Dataset> {
    let groups = match group_map_file {
        Some(p) => read_group_map(p)?,
        None => HashMap::new(),
    };
    let mut samples = Vec::new();
    for image_path in list_pgm(image_dir)? {
        let file_name = image_path.file_name().expect("listed files have names");
        let mask_path = mask_dir.join(file_name);
        if !mask_path.is_file() {
            return Err(Error::Load {
                path: mask_path,
                msg: format!("missing mask for image {}", image_path.display()),
            });
        }
        let img = pgm::read_pgm(&image_path)?;
        let mask = pgm::read_pgm(&mask_path)?;
        if (img.width, img.height) != (mask.width, mask.height) {
            return Err(Error::Load {
                path: mask_path,
                msg: format!(
                    "mask is {}x{} but image is {}x{}",
                    mask.width, mask.height, img.width, img.height
                ),
            });
        }
        let scale = img.maxval as f64;
        let mask_scale = 255.0 / mask.maxval as f64;
        let name = sample_name(&image_path);
        let group = groups.get(&name).cloned().unwrap_or_else(|| name.clone());
        samples.push(Sample::new(
            name,
            group,
            img.height,
            img.width,
            img.pixels.iter().map(|&v| v as f64 / scale).collect(),
            mask.pixels
                .iter()
                .map(|&v| u8::from(v as f64 * mask_scale >= MASK_THRESHOLD as f64))
                .collect(),
        )?);
    }
    Ok(Dataset::new(samples))
}

pub fn image_to_u8(image: &[f64]) -> Vec<u8> {
    image.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn mask_to_u8(mask: &[u8]) -> Vec<u8> {
    mask.iter().map(|&m| if m != 0 { 255 } else { 0 }).collect()
}

/// Writes `images/`, `masks/` and a `groups.csv` under `out_dir`.
pub fn save_dataset(dataset: &Dataset, out_dir: &Path) -> Result<()> {
    let images = out_dir.join("images");
    let masks = out_dir.join("masks");
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut groups = String::from("name,group\n");
    for s in &dataset.samples {
        let file = format!("{}.pgm", s.name);
        pgm::write_pgm(&images.join(&file), s.width, s.height, &image_to_u8(&s.image))?;
        pgm::write_pgm(&masks.join(&file), s.width, s.height, &mask_to_u8(&s.mask))?;
        groups.push_str(&format!("{},{}\n", s.name, s.group_id));
    }
    let path = out_dir.join("groups.csv");
    fs::write(&path, groups).map_err(|e| Error::io(&path, e))
}

/// Loads a directory laid out by [`save_dataset`]; `groups.csv` is optional.
pub fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    let groups = dir.join("groups.csv");
    load_dataset(
        &dir.join("images"),
        &dir.join("masks"),
        groups.is_file().then_some(groups.as_path()),
    )
}

/// Half-pixel-centre bilinear resampling of a row-major plane.
pub fn resize_plane_bilinear(src: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    let coord = |d: usize, from: usize, to: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * from as f64 / to as f64 - 0.5).clamp(0.0, (from - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(from - 1);
        (i0, i1, s - i0 as f64)
    };
    let cols: Vec<_> = (0..tw).map(|x| coord(x, w, tw)).collect();
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let (y0, y1, fy) = coord(y, h, th);
        for &(x0, x1, fx) in &cols {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Nearest-neighbour resampling with half-pixel centres.
pub fn resize_plane_nearest<T: Copy>(src: &[T], h: usize, w: usize, th: usize, tw: usize) -> Vec<T> {
    let pick = |d: usize, from: usize, to: usize| (((d as f64 + 0.5) * from as f64 / to as f64) as usize).min(from - 1);
    let cols: Vec<usize> = (0..tw).map(|x| pick(x, w, tw)).collect();
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let sy = pick(y, h, th);
        out.extend(cols.iter().map(|&sx| src[sy * w + sx]));
    }
    out
}

/// Image resampled bilinearly, mask by nearest neighbour (so it stays binary).
pub fn resize_bilinear(sample: &Sample, target: (usize, usize)) -> Sample {
    let (th, tw) = target;
    if (th, tw) == (sample.height, sample.width) {
        return sample.clone();
    }
    Sample {
        name: sample.name.clone(),
        group_id: sample.group_id.clone(),
        height: th,
        width: tw,
        image: resize_plane_bilinear(&sample.image, sample.height, sample.width, th, tw),
        mask: resize_plane_nearest(&sample.mask, sample.height, sample.width, th, tw)
            .into_iter()
            .map(|m| u8::from(m != 0))
            .collect(),
    }
}

/// Iteration order for [`batch_iter`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    Sequential,
    /// Shuffled with the epoch's stream of the master seed.
    Shuffled { seed: u64, epoch: usize },
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub names: Vec<String>,
    /// `(n, 1, h, w)` intensities.
    pub images: Tensor4,
    pub labels: LabelMask,
}

pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let first = &self.dataset.samples[idx[0]];
        let (h, w) = (first.height, first.width);
        let mut pixels = Vec::with_capacity(idx.len() * h * w);
        let mut labels = Vec::with_capacity(idx.len() * h * w);
        let mut names = Vec::with_capacity(idx.len());
        for &i in idx {
            let s = &self.dataset.samples[i];
            pixels.extend_from_slice(&s.image);
            labels.extend_from_slice(&s.mask);
            names.push(s.name.clone());
        }
        let n = idx.len();
        Some(Batch {
            names,
            images: Tensor4::from_vec(Shape4::new(n, 1, h, w), pixels).expect("sizes checked in batch_iter"),
            labels: LabelMask::new(n, h, w, labels).expect("sizes checked in batch_iter"),
        })
    }
}

/// Mini-batches over the named samples. The final partial batch is kept.
pub fn batch_iter<'a>(dataset: &'a Dataset, names: &[String], batch_size: usize, order: Order) -> Result<BatchIter<'a>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut idx = names
        .iter()
        .map(|n| {
            dataset
                .index_of(n)
                .ok_or_else(|| Error::Manifest(format!("unknown sample {n}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(&first) = idx.first() {
        let s0 = &dataset.samples[first];
        if let Some(bad) = idx
            .iter()
            .map(|&i| &dataset.samples[i])
            .find(|s| (s.height, s.width) != (s0.height, s0.width))
        {
            return Err(Error::dim(format!(
                "sample {} is {}x{} but {} is {}x{}; resize before batching",
                bad.name, bad.height, bad.width, s0.name, s0.height, s0.width
            )));
        }
    }
    if let Order::Shuffled { seed, epoch } = order {
        idx.shuffle(&mut rng::shuffle_stream(seed, epoch));
    }
    Ok(BatchIter {
        dataset,
        order: idx,
        batch_size,
        pos: 0,
    })
}

/// Group id → sample names, for reporting.
pub fn groups(dataset: &Dataset) -> BTreeMap<String, Vec<String>> {
    let mut map: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for s in &dataset.samples {
        map.entry(s.group_id.clone()).or_default().push(s.name.clone());
    }
    map
}
